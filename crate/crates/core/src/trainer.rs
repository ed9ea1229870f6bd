//! Patch admission, slide-label pretraining and the constrained weakly
//! supervised stage.
//!
//! Nothing in this module reads `Patch::true_class`: the only supervision is
//! each slide's label, directly (pretraining) or through the guideline
//! constraints (weak stage).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{confusion, macro_f1, AbsentClassPolicy};
use crate::guidelines::{
    hinge_distance, score_fractions, ClassFractionVector, ConstraintMatrices, Her2Class, Violation,
};
use crate::model::{
    ce_loss, forward, partial_loss, sgd_step, AdmissibleSet, ClassifierParams, Gradients, LossGrad, Slide,
};
use crate::selection::{build_epoch_set, compute_fractions, SlidePredictions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Weak,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Weak => "weak",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Optional guard: when set, must match the stage it is used for.
    pub stage: Option<Stage>,
    pub epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Patches with tumor fraction at or below this are dropped.
    pub min_tumor_fraction: f64,
    /// Minibatch size; `None` takes the whole epoch set as one batch.
    pub batch_size: Option<usize>,
    /// Optimizer passes over each weak-stage epoch set.
    pub passes: usize,
    pub reduction: LossReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: None,
            epochs: 100,
            patience: 20,
            learning_rate: 1e-3,
            momentum: 0.9,
            seed: 0,
            min_tumor_fraction: 0.1,
            batch_size: None,
            passes: 1,
            reduction: LossReduction::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, stage: Stage) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if let Some(s) = self.stage {
            if s != stage {
                return bad(format!("config for stage {} used for {}", s.name(), stage.name()));
            }
        }
        if !(0.0..1.0).contains(&self.min_tumor_fraction) {
            return bad("min_tumor_fraction must lie in [0,1)".into());
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("learning_rate must be > 0 and momentum in [0,1)".into());
        }
        if self.batch_size == Some(0) || self.passes == 0 {
            return bad("batch_size and passes must be >= 1".into());
        }
        Ok(())
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Drops patches with `tumor_fraction <= min_tumor_fraction` and
/// renormalizes the survivors' weights.
pub fn filter_patches(slides: &[Slide], min_tumor_fraction: f64) -> Result<Vec<Slide>> {
    slides
        .iter()
        .map(|s| {
            let kept: Vec<_> = s
                .patches
                .iter()
                .filter(|p| p.tumor_fraction > min_tumor_fraction)
                .cloned()
                .collect();
            if kept.is_empty() {
                return Err(Error::EmptySlide { slide: s.id.clone() });
            }
            Slide::new(s.id.clone(), s.label, kept)
        })
        .collect()
}

/// Share of raw tumor surface carried by patches above the threshold.
pub fn admitted_tumor_share(slides: &[Slide], min_tumor_fraction: f64) -> f64 {
    let (kept, total) = slides
        .iter()
        .flat_map(|s| &s.patches)
        .fold((0.0, 0.0), |(k, t), p| {
            let keep = if p.tumor_fraction > min_tumor_fraction { p.tumor_fraction } else { 0.0 };
            (k + keep, t + p.tumor_fraction)
        });
    if total > 0.0 {
        kept / total
    } else {
        0.0
    }
}

/// Full inference pass, parallel over slides, results in slide order.
pub fn infer(slides: &[Slide], params: &ClassifierParams) -> Result<Vec<SlidePredictions>> {
    slides
        .par_iter()
        .map(|s| {
            let mut classes = Vec::with_capacity(s.patches.len());
            let mut probs = Vec::with_capacity(s.patches.len());
            for p in &s.patches {
                let f = forward(params, &p.features)?;
                classes.push(f.class);
                probs.push(f.probs);
            }
            Ok(SlidePredictions { classes, probs })
        })
        .collect()
}

/// Predicted fractions of each slide.
pub fn slide_fractions(slides: &[Slide], preds: &[SlidePredictions]) -> Result<Vec<ClassFractionVector>> {
    slides
        .iter()
        .zip(preds)
        .map(|(s, p)| compute_fractions(s, &p.classes))
        .collect()
}

/// Principal guideline score of each slide from its predicted fractions.
pub fn slide_scores(fractions: &[ClassFractionVector], constraints: &ConstraintMatrices) -> Vec<Her2Class> {
    fractions
        .iter()
        .map(|v| score_fractions(v, constraints).principal_score)
        .collect()
}

/// Slide-level macro F1 (present-only) and total hinge distance.
pub fn slide_quality(
    slides: &[Slide],
    params: &ClassifierParams,
    constraints: &ConstraintMatrices,
) -> Result<(f64, f64)> {
    let preds = infer(slides, params)?;
    let fractions = slide_fractions(slides, &preds)?;
    let labels: Vec<_> = slides.iter().map(|s| s.label).collect();
    let cm = confusion(&labels, &slide_scores(&fractions, constraints))?;
    let f1 = macro_f1(&cm, AbsentClassPolicy::PresentOnly)?;
    let hinge = fractions
        .iter()
        .zip(&labels)
        .map(|(v, y)| hinge_distance(v, *y, constraints))
        .sum();
    Ok((f1, hinge))
}

fn reduce_scale(reduction: LossReduction, n: usize) -> f64 {
    match reduction {
        LossReduction::Mean => 1.0 / n as f64,
        LossReduction::Sum => 1.0,
    }
}

/// One pretraining epoch or weak-stage item: a patch and what it is pushed toward.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Target {
    Hard(Her2Class),
    Partial(AdmissibleSet),
}

#[derive(Debug, Clone, Copy)]
struct Item {
    slide: usize,
    patch: usize,
    target: Target,
}

fn item_loss(params: &ClassifierParams, slides: &[Slide], item: &Item) -> Result<(LossGrad, usize, usize)> {
    let logits = params.logits(&slides[item.slide].patches[item.patch].features)?;
    let lg = match item.target {
        Target::Hard(y) => ce_loss(&logits, y),
        Target::Partial(g) => partial_loss(&logits, g),
    };
    Ok((lg, item.slide, item.patch))
}

/// Minibatch SGD over `items`; returns the summed loss seen during the pass.
fn run_pass(
    params: &mut ClassifierParams,
    slides: &[Slide],
    items: &[Item],
    config: &TrainConfig,
    stage: Stage,
    epoch: usize,
) -> Result<f64> {
    let batch = config.batch_size.unwrap_or(items.len()).max(1);
    let mut total = 0.0;
    for chunk in items.chunks(batch) {
        let scale = reduce_scale(config.reduction, chunk.len());
        let mut grads = Gradients::zeros(params.dim);
        for item in chunk {
            let (lg, s, p) = item_loss(params, slides, item)?;
            if !lg.loss.is_finite() {
                return Err(Error::NonFiniteLoss { stage: stage.name(), epoch });
            }
            total += lg.loss;
            grads.accumulate(&slides[s].patches[p].features, &lg.grad_logits, scale);
        }
        sgd_step(params, &grads)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub stage: Stage,
    pub epoch: usize,
    pub mean_loss: f64,
    /// Patch accuracy against slide labels on the validation slides.
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub params: ClassifierParams,
    pub best_epoch: Option<usize>,
    pub history: Vec<PretrainEpoch>,
}

fn slide_label_accuracy(slides: &[Slide], params: &ClassifierParams) -> Result<f64> {
    let preds = infer(slides, params)?;
    let (hits, total) = slides.iter().zip(&preds).fold((0usize, 0usize), |(h, t), (s, p)| {
        let hits = p.classes.iter().filter(|c| **c == s.label).count();
        (h + hits, t + p.classes.len())
    });
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Supervised training with every patch targeted at its slide's label.
/// Early stopping on validation accuracy (training slides when the
/// validation set is empty); returns the best-validation parameters.
pub fn pretrain(
    train: &[Slide],
    validation: &[Slide],
    init: ClassifierParams,
    config: &TrainConfig,
) -> Result<PretrainOutcome> {
    config.validate(Stage::Pretrain)?;
    init.validate()?;
    let monitor = if validation.is_empty() { train } else { validation };
    let mut params = init;
    let mut items: Vec<Item> = train
        .iter()
        .enumerate()
        .flat_map(|(si, s)| {
            (0..s.patches.len()).map(move |pi| Item {
                slide: si,
                patch: pi,
                target: Target::Hard(s.label),
            })
        })
        .collect();
    if items.is_empty() {
        return Err(Error::InvalidConfig("no training patches".into()));
    }

    let mut best = params.clone();
    let mut best_acc = slide_label_accuracy(monitor, &params)?;
    let mut best_epoch = None;
    let mut since_best = 0;
    let mut history = Vec::new();
    for epoch in 0..config.epochs {
        items.shuffle(&mut rng_for(config.seed, epoch as u64));
        let total = run_pass(&mut params, train, &items, config, Stage::Pretrain, epoch)?;
        let acc = slide_label_accuracy(monitor, &params)?;
        history.push(PretrainEpoch {
            stage: Stage::Pretrain,
            epoch,
            mean_loss: total / items.len() as f64,
            validation_accuracy: acc,
        });
        if acc > best_acc {
            best_acc = acc;
            best = params.clone();
            best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience.max(1) {
                break;
            }
        }
    }
    Ok(PretrainOutcome {
        params: best,
        best_epoch,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideEpochReport {
    pub slide: String,
    pub fractions: ClassFractionVector,
    pub violations: Vec<Violation>,
    pub upper_selected: usize,
    pub lower_selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub stage: Stage,
    pub epoch: usize,
    /// Slides whose predicted fractions break no constraint before the update.
    pub consistent_slides: usize,
    pub satisfaction_rate: f64,
    pub upper_selected: usize,
    pub lower_selected: usize,
    pub mean_partial_loss: Option<f64>,
    pub mean_ce_loss: Option<f64>,
    pub validation_macro_f1: Option<f64>,
    pub slides: Vec<SlideEpochReport>,
}

impl EpochReport {
    pub fn violation_count(&self) -> usize {
        self.slides.iter().map(|s| s.violations.len()).sum()
    }
}

/// Inference, constraint check, selection and one optimizer pass (or
/// `config.passes` passes) over the selected patches: partial-label loss on
/// upper selections, cross-entropy toward the slide label on lower ones.
pub fn weak_epoch(
    slides: &[Slide],
    params: &ClassifierParams,
    constraints: &ConstraintMatrices,
    config: &TrainConfig,
    epoch: usize,
) -> Result<(ClassifierParams, EpochReport)> {
    let preds = infer(slides, params)?;
    let selections = build_epoch_set(slides, &preds, constraints)?;

    let mut items = Vec::new();
    let mut slide_reports = Vec::with_capacity(slides.len());
    for (si, sel) in selections.iter().enumerate() {
        for u in &sel.upper {
            items.extend(u.patches.iter().map(|&p| Item {
                slide: si,
                patch: p,
                target: Target::Partial(u.admissible),
            }));
        }
        if let Some(l) = &sel.lower {
            items.extend(l.patches.iter().map(|&p| Item {
                slide: si,
                patch: p,
                target: Target::Hard(l.target),
            }));
        }
        slide_reports.push(SlideEpochReport {
            slide: sel.slide.clone(),
            fractions: sel.fractions,
            violations: sel.violations.clone(),
            upper_selected: sel.upper_count(),
            lower_selected: sel.lower_count(),
        });
    }

    let mean_of = |want_partial: bool| -> Result<Option<f64>> {
        let losses: Vec<f64> = items
            .iter()
            .filter(|it| matches!(it.target, Target::Partial(_)) == want_partial)
            .map(|it| item_loss(params, slides, it).map(|(lg, _, _)| lg.loss))
            .collect::<Result<_>>()?;
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFiniteLoss { stage: "weak", epoch });
        }
        Ok((!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64))
    };
    let mean_partial_loss = mean_of(true)?;
    let mean_ce_loss = mean_of(false)?;

    let mut updated = params.clone();
    if !items.is_empty() {
        let multi_batch = config.batch_size.is_some_and(|b| b < items.len());
        for pass in 0..config.passes {
            if multi_batch || pass > 0 {
                let stream = ((epoch as u64) << 16) | pass as u64;
                items.shuffle(&mut rng_for(config.seed, stream));
            }
            run_pass(&mut updated, slides, &items, config, Stage::Weak, epoch)?;
        }
    }

    let consistent = selections.iter().filter(|s| s.violations.is_empty()).count();
    let report = EpochReport {
        stage: Stage::Weak,
        epoch,
        consistent_slides: consistent,
        satisfaction_rate: consistent as f64 / slides.len().max(1) as f64,
        upper_selected: selections.iter().map(|s| s.upper_count()).sum(),
        lower_selected: selections.iter().map(|s| s.lower_count()).sum(),
        mean_partial_loss,
        mean_ce_loss,
        validation_macro_f1: None,
        slides: slide_reports,
    };
    Ok((updated, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeakOutcome {
    pub params: ClassifierParams,
    pub best_epoch: Option<usize>,
    pub best_validation_f1: f64,
    pub reports: Vec<EpochReport>,
}

/// Repeats `weak_epoch` until the epoch budget is spent or no slide breaks a
/// constraint for `patience` consecutive epochs. Keeps the parameters with
/// the best validation slide macro F1, breaking ties by lower hinge
/// distance and then by the later epoch.
pub fn train_weak(
    train: &[Slide],
    validation: &[Slide],
    init: ClassifierParams,
    config: &TrainConfig,
    constraints: &ConstraintMatrices,
) -> Result<WeakOutcome> {
    config.validate(Stage::Weak)?;
    init.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidConfig("no training slides".into()));
    }
    let monitor = if validation.is_empty() { train } else { validation };
    let better = |a: (f64, f64), b: (f64, f64)| a.0 > b.0 || (a.0 == b.0 && a.1 <= b.1);

    let mut params = init.with_optimizer(config.learning_rate, config.momentum);
    let mut best = params.clone();
    let mut best_key = slide_quality(monitor, &params, constraints)?;
    let mut best_epoch = None;
    let mut reports = Vec::new();
    let mut clean_streak = 0;
    for epoch in 0..config.epochs {
        let (next, mut report) = weak_epoch(train, &params, constraints, config, epoch)?;
        params = next;
        let key = slide_quality(monitor, &params, constraints)?;
        report.validation_macro_f1 = Some(key.0);
        if better(key, best_key) {
            best_key = key;
            best = params.clone();
            best_epoch = Some(epoch);
        }
        clean_streak = if report.violation_count() == 0 { clean_streak + 1 } else { 0 };
        reports.push(report);
        if clean_streak >= config.patience.max(1) {
            break;
        }
    }
    Ok(WeakOutcome {
        params: best,
        best_epoch,
        best_validation_f1: best_key.0,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Patch;

    fn patch(id: &str, features: Vec<f64>, tf: f64) -> Patch {
        Patch {
            id: id.into(),
            features,
            tumor_fraction: tf,
            true_class: None,
        }
    }

    #[test]
    fn filter_examples() {
        let s = Slide::new(
            "a",
            Her2Class::ONE,
            vec![patch("p0", vec![0.0], 0.05), patch("p1", vec![0.0], 0.5), patch("p2", vec![0.0], 0.5)],
        )
        .unwrap();
        let out = filter_patches(std::slice::from_ref(&s), 0.1).unwrap();
        assert_eq!(out[0].patches.len(), 2);
        assert_eq!(out[0].normalized_weights, vec![0.5, 0.5]);

        let zero = Slide::new(
            "z",
            Her2Class::ONE,
            vec![patch("p0", vec![0.0], 0.0), patch("p1", vec![0.0], 0.3)],
        )
        .unwrap();
        assert_eq!(filter_patches(&[zero], 0.0).unwrap()[0].patches.len(), 1);

        let low = Slide::new("low", Her2Class::ZERO, vec![patch("p0", vec![0.0], 0.05)]).unwrap();
        match filter_patches(&[low], 0.1) {
            Err(Error::EmptySlide { slide }) => assert_eq!(slide, "low"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_guard() {
        let cfg = TrainConfig {
            stage: Some(Stage::Weak),
            ..TrainConfig::default()
        };
        assert!(cfg.validate(Stage::Pretrain).is_err());
        assert!(cfg.validate(Stage::Weak).is_ok());
    }

    #[test]
    fn consistent_model_is_a_fixed_point() {
        // Every patch predicted 0 on class-0 slides: nothing to select.
        let slides: Vec<Slide> = (0..3)
            .map(|i| {
                Slide::new(
                    format!("s{i}"),
                    Her2Class::ZERO,
                    (0..5).map(|j| patch(&format!("p{j}"), vec![1.0, j as f64], 0.5)).collect(),
                )
                .unwrap()
            })
            .collect();
        let mut params = ClassifierParams::zeros(2, 0.1, 0.9);
        params.bias[0] = 5.0;
        let cfg = TrainConfig {
            patience: 3,
            ..TrainConfig::default()
        };
        let (next, report) = weak_epoch(&slides, &params, &ConstraintMatrices::default(), &cfg, 0).unwrap();
        assert_eq!(next, params);
        assert_eq!(report.consistent_slides, 3);
        assert_eq!(report.upper_selected + report.lower_selected, 0);

        let out = train_weak(&slides, &[], params.clone(), &cfg, &ConstraintMatrices::default()).unwrap();
        assert_eq!(out.reports.len(), 3);
        assert_eq!(out.params.weights, params.weights);
        assert_eq!(out.params.bias, params.bias);
    }
}
