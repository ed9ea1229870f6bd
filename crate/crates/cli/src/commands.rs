use std::fs;
use std::path::{Path, PathBuf};

use her2_core::calibrate::{
    apply_calibration, objective_from_fractions, optimize_alpha, CalibrationResult, CalibrationVector, LogitsMatrix,
};
use her2_core::evaluation::{
    confusion, fraction_kde, macro_f1, patch_confusion, rater_agreement, AbsentClassPolicy, ConfusionMatrix,
};
use her2_core::guidelines::{score_fractions, ConstraintMatrices, GuidelineVerdict};
use her2_core::io::{self, LabelRecord, LogitRecord, SCHEMA_VERSION};
use her2_core::selection::{build_epoch_set, selection_records};
use her2_core::synth::{generate_cohort, split_cohort, Split};
use her2_core::trainer::{filter_patches, infer, pretrain, slide_scores, train_weak, Stage};
use her2_core::{ClassifierParams, Her2Class, Slide};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::PipelineConfig;
use crate::error::CliError;

type Out = Result<Value, CliError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub stage: Stage,
    pub best_epoch: Option<usize>,
    pub params: ClassifierParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub schema_version: u32,
    #[serde(flatten)]
    pub result: CalibrationResult,
}

#[derive(Debug, Serialize)]
struct VerdictRecord<'a> {
    schema_version: u32,
    id: &'a str,
    label: Her2Class,
    #[serde(flatten)]
    verdict: GuidelineVerdict,
}

/// Which slides of the split a command works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Subset {
    Train,
    Validation,
    Test,
    All,
}

/// Event log and effective config written next to a command's outputs,
/// named `<label>.events.jsonl` and `<label>.config.toml`.
struct Artifacts {
    dir: PathBuf,
    stage: &'static str,
    label: String,
    events: Vec<Value>,
}

impl Artifacts {
    fn new(dir: &Path, stage: &'static str) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(stage, dir, e))?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            stage,
            label: stage.to_string(),
            events: Vec::new(),
        })
    }

    /// Artifacts beside a single output file, labeled `<file stem>.<stage>`.
    fn beside(output: &Path, stage: &'static str) -> Result<Self, CliError> {
        ensure_parent(stage, output)?;
        let dir = output.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut art = Self::new(&dir, stage)?;
        if let Some(stem) = output.file_stem() {
            art.label = format!("{}.{stage}", stem.to_string_lossy());
        }
        Ok(art)
    }

    fn event(&mut self, name: &str, body: impl Serialize) {
        let mut v = json!({ "schema_version": SCHEMA_VERSION, "event": name });
        if let (Some(obj), Ok(Value::Object(extra))) = (v.as_object_mut(), serde_json::to_value(body)) {
            obj.extend(extra);
        }
        self.events.push(v);
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn finish(self, cfg: &PipelineConfig) -> Result<(), CliError> {
        let cfg_path = self.path(&format!("{}.config.toml", self.label));
        fs::write(&cfg_path, cfg.to_toml()).map_err(|e| CliError::io(self.stage, &cfg_path, e))?;
        let log = self.path(&format!("{}.events.jsonl", self.label));
        write_jsonl(self.stage, &log, &self.events)
    }
}

fn write_jsonl<T: Serialize>(stage: &str, path: &Path, items: &[T]) -> Result<(), CliError> {
    io::write_jsonl(path, items).map_err(|e| CliError::core(stage, Some(path), e))
}

fn write_json<T: Serialize>(stage: &str, path: &Path, value: &T) -> Result<(), CliError> {
    io::write_json(path, value).map_err(|e| CliError::core(stage, Some(path), e))
}

fn read_json<T: serde::de::DeserializeOwned>(stage: &str, path: &Path) -> Result<T, CliError> {
    io::read_json(path).map_err(|e| CliError::core(stage, Some(path), e))
}

fn write_text(stage: &str, path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(stage, path, e))
}

fn ensure_parent(stage: &str, path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| CliError::io(stage, dir, e)),
        _ => Ok(()),
    }
}

fn load_slides(stage: &str, path: &Path, min_tumor_fraction: f64) -> Result<Vec<Slide>, CliError> {
    let slides = io::read_cohort(path).map_err(|e| CliError::core(stage, Some(path), e))?;
    if slides.is_empty() {
        return Err(CliError::validation(stage, format!("{} holds no slides", path.display())));
    }
    filter_patches(&slides, min_tumor_fraction).map_err(|e| CliError::core(stage, Some(path), e))
}

fn split(stage: &str, cfg: &PipelineConfig, slides: &[Slide]) -> Result<Split, CliError> {
    let seed = cfg.require_seed(stage)?;
    split_cohort(slides, cfg.split.ratios, seed).map_err(|e| CliError::core(stage, None, e))
}

fn subset(stage: &str, cfg: &PipelineConfig, slides: Vec<Slide>, which: Subset) -> Result<Vec<Slide>, CliError> {
    if which == Subset::All {
        return Ok(slides);
    }
    let s = split(stage, cfg, &slides)?;
    Ok(match which {
        Subset::Train => s.train,
        Subset::Validation => s.validation,
        Subset::Test => s.test,
        Subset::All => unreachable!(),
    })
}

fn load_checkpoint(stage: &str, path: &Path) -> Result<Checkpoint, CliError> {
    let ck: Checkpoint = read_json(stage, path)?;
    io::check_version(ck.schema_version).map_err(|e| CliError::core(stage, Some(path), e))?;
    ck.params.validate().map_err(|e| CliError::core(stage, Some(path), e))?;
    Ok(ck)
}

fn load_alpha(stage: &str, path: &Path) -> Result<CalibrationVector, CliError> {
    let art: CalibrationArtifact = read_json(stage, path)?;
    io::check_version(art.schema_version).map_err(|e| CliError::core(stage, Some(path), e))?;
    Ok(CalibrationVector {
        alpha: art.result.alpha,
    })
}

fn check_dim(stage: &str, params: &ClassifierParams, slides: &[Slide]) -> Result<(), CliError> {
    match slides.first() {
        Some(s) if s.feature_dim() != params.dim => Err(CliError::validation(
            stage,
            format!("checkpoint expects {} features, cohort has {}", params.dim, s.feature_dim()),
        )),
        _ => Ok(()),
    }
}

pub fn generate(cfg: &PipelineConfig, out: Option<PathBuf>) -> Out {
    const STAGE: &str = "generate";
    cfg.require_seed(STAGE)?;
    let cohort = generate_cohort(&cfg.cohort).map_err(|e| CliError::core(STAGE, None, e))?;
    let path = out.unwrap_or_else(|| cfg.resolve(&cfg.paths.cohort));
    let mut art = Artifacts::beside(&path, STAGE)?;
    io::write_cohort(&path, &cohort.slides).map_err(|e| CliError::core(STAGE, Some(&path), e))?;

    let mut rater_files = Vec::new();
    if !cohort.rater_labels.is_empty() {
        let dir = cfg.resolve(&cfg.paths.raters);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(STAGE, &dir, e))?;
        for (k, labels) in cohort.rater_labels.iter().enumerate() {
            let p = dir.join(format!("rater{k}.jsonl"));
            write_jsonl(STAGE, &p, labels)?;
            rater_files.push(p);
        }
    }
    let patches: usize = cohort.slides.iter().map(|s| s.patches.len()).sum();
    let mut per_class = [0usize; 4];
    for s in &cohort.slides {
        per_class[s.label.index()] += 1;
    }
    art.event("generated", json!({ "slides": cohort.slides.len(), "patches": patches, "perClass": per_class }));
    art.finish(cfg)?;
    Ok(json!({
        "command": STAGE,
        "cohort": path,
        "slides": cohort.slides.len(),
        "patches": patches,
        "raterFiles": rater_files,
    }))
}

pub fn pretrain_cmd(cfg: &PipelineConfig) -> Out {
    const STAGE: &str = "pretrain";
    let seed = cfg.require_seed(STAGE)?;
    let slides = load_slides(STAGE, &cfg.resolve(&cfg.paths.cohort), cfg.pretrain.min_tumor_fraction)?;
    let s = split(STAGE, cfg, &slides)?;
    let dim = slides[0].feature_dim();
    let init = ClassifierParams::init(dim, cfg.pretrain.learning_rate, cfg.pretrain.momentum, seed);
    let out = pretrain(&s.train, &s.validation, init, &cfg.pretrain).map_err(|e| CliError::core(STAGE, None, e))?;

    let mut art = Artifacts::new(&cfg.resolve(&cfg.paths.checkpoints), STAGE)?;
    for h in &out.history {
        art.event("epoch", h);
    }
    let path = art.path("pretrain.json");
    let ck = Checkpoint {
        schema_version: SCHEMA_VERSION,
        stage: Stage::Pretrain,
        best_epoch: out.best_epoch,
        params: out.params,
    };
    write_json(STAGE, &path, &ck)?;
    art.finish(cfg)?;
    Ok(json!({
        "command": STAGE,
        "checkpoint": path,
        "epochs": out.history.len(),
        "bestEpoch": out.best_epoch,
        "trainSlides": s.train.len(),
        "validationSlides": s.validation.len(),
    }))
}

pub fn train_weak_cmd(cfg: &PipelineConfig, init: Option<PathBuf>, dump_selections: bool) -> Out {
    const STAGE: &str = "train-weak";
    cfg.require_seed(STAGE)?;
    let slides = load_slides(STAGE, &cfg.resolve(&cfg.paths.cohort), cfg.weak.min_tumor_fraction)?;
    let s = split(STAGE, cfg, &slides)?;
    let init_path = init.unwrap_or_else(|| cfg.resolve(&cfg.paths.checkpoints).join("pretrain.json"));
    let start = load_checkpoint(STAGE, &init_path)?;
    check_dim(STAGE, &start.params, &slides)?;
    let c = ConstraintMatrices::default();
    let out = train_weak(&s.train, &s.validation, start.params, &cfg.weak, &c)
        .map_err(|e| CliError::core(STAGE, None, e))?;

    let mut art = Artifacts::new(&cfg.resolve(&cfg.paths.checkpoints), STAGE)?;
    for r in &out.reports {
        art.event("epoch", r);
    }
    let path = art.path("weak.json");
    let ck = Checkpoint {
        schema_version: SCHEMA_VERSION,
        stage: Stage::Weak,
        best_epoch: out.best_epoch,
        params: out.params,
    };
    write_json(STAGE, &path, &ck)?;
    let mut selections_path = None;
    if dump_selections {
        let preds = infer(&s.train, &ck.params).map_err(|e| CliError::core(STAGE, None, e))?;
        let sel = build_epoch_set(&s.train, &preds, &c).map_err(|e| CliError::core(STAGE, None, e))?;
        let p = art.path("weak.selections.jsonl");
        write_jsonl(STAGE, &p, &selection_records(&s.train, &sel))?;
        selections_path = Some(p);
    }
    art.finish(cfg)?;
    let last = out.reports.last();
    Ok(json!({
        "command": STAGE,
        "checkpoint": path,
        "epochs": out.reports.len(),
        "bestEpoch": out.best_epoch,
        "validationMacroF1": out.best_validation_f1,
        "finalSatisfactionRate": last.map(|r| r.satisfaction_rate),
        "selections": selections_path,
    }))
}

pub fn dump_logits(cfg: &PipelineConfig, checkpoint: Option<PathBuf>, which: Subset, out: Option<PathBuf>) -> Out {
    const STAGE: &str = "dump-logits";
    let ck_path = checkpoint.unwrap_or_else(|| cfg.resolve(&cfg.paths.checkpoints).join("weak.json"));
    let ck = load_checkpoint(STAGE, &ck_path)?;
    let slides = load_slides(STAGE, &cfg.resolve(&cfg.paths.cohort), cfg.weak.min_tumor_fraction)?;
    let slides = subset(STAGE, cfg, slides, which)?;
    check_dim(STAGE, &ck.params, &slides)?;
    let m = LogitsMatrix::from_model(&ck.params, &slides).map_err(|e| CliError::core(STAGE, None, e))?;
    let path = out.unwrap_or_else(|| cfg.resolve(&cfg.paths.checkpoints).join("logits.jsonl"));
    let mut art = Artifacts::beside(&path, STAGE)?;
    write_jsonl(STAGE, &path, &m.to_records())?;
    art.event("dumped", json!({ "slides": m.slide_count(), "patches": m.rows.len() }));
    art.finish(cfg)?;
    Ok(json!({ "command": STAGE, "logits": path, "slides": m.slide_count(), "patches": m.rows.len() }))
}

pub fn calibrate(cfg: &PipelineConfig, logits: Option<PathBuf>) -> Out {
    const STAGE: &str = "calibrate";
    let path = logits.unwrap_or_else(|| cfg.resolve(&cfg.paths.checkpoints).join("logits.jsonl"));
    let records: Vec<LogitRecord> = io::read_jsonl(&path).map_err(|e| CliError::core(STAGE, Some(&path), e))?;
    for r in &records {
        io::check_version(r.schema_version).map_err(|e| CliError::core(STAGE, Some(&path), e))?;
    }
    let m = LogitsMatrix::from_records(&records).map_err(|e| CliError::core(STAGE, Some(&path), e))?;
    let result = optimize_alpha(&m, &m.labels, &ConstraintMatrices::default(), &cfg.calibration)
        .map_err(|e| CliError::core(STAGE, None, e))?;

    let mut art = Artifacts::new(&cfg.resolve(&cfg.paths.checkpoints), STAGE)?;
    for t in &result.trace {
        art.event("improved", t);
    }
    if let Some(w) = &result.warning {
        art.event("warning", json!({ "message": w }));
    }
    let out = art.path("calibration.json");
    let summary = json!({
        "command": STAGE,
        "calibration": out,
        "alpha": result.alpha,
        "objectiveBefore": result.objective_before,
        "objectiveAfter": result.objective_after,
        "evaluations": result.evaluations,
        "warning": result.warning,
    });
    write_json(
        STAGE,
        &out,
        &CalibrationArtifact {
            schema_version: SCHEMA_VERSION,
            result,
        },
    )?;
    art.finish(cfg)?;
    Ok(summary)
}

pub fn score(
    cfg: &PipelineConfig,
    checkpoint: Option<PathBuf>,
    calibration: Option<PathBuf>,
    input: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Out {
    const STAGE: &str = "score";
    let ck_path = checkpoint.unwrap_or_else(|| cfg.resolve(&cfg.paths.checkpoints).join("weak.json"));
    let ck = load_checkpoint(STAGE, &ck_path)?;
    let alpha = match &calibration {
        Some(p) => load_alpha(STAGE, p)?,
        None => CalibrationVector::default(),
    };
    let input = input.unwrap_or_else(|| cfg.resolve(&cfg.paths.cohort));
    let slides = load_slides(STAGE, &input, cfg.weak.min_tumor_fraction)?;
    check_dim(STAGE, &ck.params, &slides)?;
    let m = LogitsMatrix::from_model(&ck.params, &slides).map_err(|e| CliError::core(STAGE, None, e))?;
    let cal = apply_calibration(&m, &alpha).map_err(|e| CliError::core(STAGE, None, e))?;
    let c = ConstraintMatrices::default();
    let records: Vec<VerdictRecord> = slides
        .iter()
        .zip(&cal.fractions)
        .map(|(s, v)| VerdictRecord {
            schema_version: SCHEMA_VERSION,
            id: &s.id,
            label: s.label,
            verdict: score_fractions(v, &c),
        })
        .collect();
    let path = out.unwrap_or_else(|| cfg.resolve(&cfg.paths.reports).join("verdicts.jsonl"));
    let mut art = Artifacts::beside(&path, STAGE)?;
    write_jsonl(STAGE, &path, &records)?;
    let flagged = records.iter().filter(|r| r.verdict.heterogeneous_flag).count();
    art.event("scored", json!({ "slides": records.len(), "heterogeneous": flagged }));
    art.finish(cfg)?;
    Ok(json!({ "command": STAGE, "verdicts": path, "slides": records.len(), "heterogeneous": flagged }))
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct StageMetrics {
    stage: String,
    slides: usize,
    #[serde(rename = "macroF1")]
    macro_f1: f64,
    #[serde(rename = "macroF1Strict")]
    macro_f1_strict: f64,
    objective: f64,
    confusion: ConfusionMatrix,
    #[serde(skip_serializing_if = "Option::is_none")]
    patch_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    patch_confusion: Option<ConfusionMatrix>,
}

fn stage_metrics(
    stage: &str,
    name: &str,
    slides: &[Slide],
    params: &ClassifierParams,
    alpha: &CalibrationVector,
    c: &ConstraintMatrices,
) -> Result<(StageMetrics, Vec<her2_core::ClassFractionVector>), CliError> {
    let core = |e| CliError::core(stage, None, e);
    let m = LogitsMatrix::from_model(params, slides).map_err(core)?;
    let cal = apply_calibration(&m, alpha).map_err(core)?;
    let labels: Vec<Her2Class> = slides.iter().map(|s| s.label).collect();
    let cm = confusion(&labels, &slide_scores(&cal.fractions, c)).map_err(core)?;

    let mut per_slide = Vec::with_capacity(slides.len());
    let mut offset = 0;
    for s in slides {
        per_slide.push(cal.classes[offset..offset + s.patches.len()].to_vec());
        offset += s.patches.len();
    }
    let pcm = patch_confusion(slides, &per_slide).map_err(core)?;
    let has_truth = pcm.total() > 0;
    Ok((
        StageMetrics {
            stage: name.into(),
            slides: slides.len(),
            macro_f1: macro_f1(&cm, AbsentClassPolicy::PresentOnly).map_err(core)?,
            macro_f1_strict: macro_f1(&cm, AbsentClassPolicy::Strict).map_err(core)?,
            objective: objective_from_fractions(&cal.fractions, &labels, c),
            confusion: cm,
            patch_accuracy: has_truth.then(|| pcm.accuracy()),
            patch_confusion: has_truth.then_some(pcm),
        },
        cal.fractions,
    ))
}

pub fn report(cfg: &PipelineConfig) -> Out {
    const STAGE: &str = "report";
    let (slides, source) = match &cfg.paths.evaluation_cohort {
        Some(p) => (
            load_slides(STAGE, &cfg.resolve(p), cfg.weak.min_tumor_fraction)?,
            p.display().to_string(),
        ),
        None => {
            let all = load_slides(STAGE, &cfg.resolve(&cfg.paths.cohort), cfg.weak.min_tumor_fraction)?;
            (split(STAGE, cfg, &all)?.test, "test split".to_string())
        }
    };
    if slides.is_empty() {
        return Err(CliError::validation(STAGE, "evaluation set is empty"));
    }
    let ckdir = &cfg.resolve(&cfg.paths.checkpoints);
    let pre = ckdir.join("pretrain.json");
    let weak = ckdir.join("weak.json");
    let calib = ckdir.join("calibration.json");
    let mut stages = Vec::new();
    if pre.exists() {
        stages.push(("pretrain", load_checkpoint(STAGE, &pre)?.params, CalibrationVector::default()));
    }
    if weak.exists() {
        let params = load_checkpoint(STAGE, &weak)?.params;
        if calib.exists() {
            stages.push(("weak", params.clone(), CalibrationVector::default()));
            stages.push(("calibrated", params, load_alpha(STAGE, &calib)?));
        } else {
            stages.push(("weak", params, CalibrationVector::default()));
        }
    }
    if stages.is_empty() {
        return Err(CliError::validation(STAGE, format!("no checkpoints in {}", ckdir.display())));
    }

    let c = ConstraintMatrices::default();
    let dir = &cfg.resolve(&cfg.paths.reports);
    let mut art = Artifacts::new(dir, STAGE)?;
    let mut metrics = Vec::new();
    let mut summary = serde_json::Map::new();
    let mut csv = String::from("stage,slides,macro_f1,macro_f1_strict,objective,patch_accuracy\n");
    for (name, params, alpha) in &stages {
        check_dim(STAGE, params, &slides)?;
        let (m, fractions) = stage_metrics(STAGE, name, &slides, params, alpha, &c)?;
        write_text(STAGE, &dir.join(format!("confusion_{name}.csv")), &m.confusion.to_csv())?;
        if let Some(p) = &m.patch_confusion {
            write_text(STAGE, &dir.join(format!("patch_confusion_{name}.csv")), &p.to_csv())?;
        }
        let pairs: Vec<_> = slides.iter().map(|s| s.label).zip(fractions).collect();
        let cells = fraction_kde(&pairs, cfg.report.bandwidth).map_err(|e| CliError::core(STAGE, None, e))?;
        write_json(
            STAGE,
            &dir.join(format!("kde_{name}.json")),
            &json!({ "schema_version": SCHEMA_VERSION, "stage": name, "cells": cells }),
        )?;
        csv.push_str(&format!(
            "{name},{},{},{},{},{}\n",
            m.slides,
            m.macro_f1,
            m.macro_f1_strict,
            m.objective,
            m.patch_accuracy.map_or(String::new(), |a| a.to_string())
        ));
        let mut entry = json!({ "macroF1": m.macro_f1, "macroF1Strict": m.macro_f1_strict, "objective": m.objective });
        if let Some(p) = &m.patch_confusion {
            entry["patchAccuracy"] = json!(p.accuracy());
            entry["aboveDiagonal"] = json!(p.above_diagonal());
            entry["belowDiagonal"] = json!(p.below_diagonal());
        }
        summary.insert((*name).to_string(), entry);
        art.event("stage", &m);
        metrics.push(m);
    }
    write_text(STAGE, &dir.join("metrics.csv"), &csv)?;
    write_json(
        STAGE,
        &dir.join("metrics.json"),
        &json!({ "schema_version": SCHEMA_VERSION, "evaluation": source, "stages": metrics }),
    )?;
    art.finish(cfg)?;
    Ok(json!({ "command": STAGE, "evaluation": source, "slides": slides.len(), "stages": summary }))
}

pub fn agreement(cfg: &PipelineConfig, files: Vec<PathBuf>) -> Out {
    const STAGE: &str = "agreement";
    let files = if files.is_empty() {
        let dir = &cfg.resolve(&cfg.paths.raters);
        let mut found: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| CliError::io(STAGE, dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        found.sort();
        found
    } else {
        files
    };
    if files.len() < 2 {
        return Err(CliError::validation(STAGE, "need at least two rater label files"));
    }
    let mut raters = Vec::new();
    for f in &files {
        let labels: Vec<LabelRecord> = io::read_jsonl(f).map_err(|e| CliError::core(STAGE, Some(f), e))?;
        for l in &labels {
            io::check_version(l.schema_version).map_err(|e| CliError::core(STAGE, Some(f), e))?;
        }
        raters.push(labels);
    }
    let pairs = rater_agreement(&raters).map_err(|e| CliError::core(STAGE, None, e))?;
    let entries: Vec<Value> = pairs
        .iter()
        .map(|p| {
            json!({
                "raterA": files[p.rater_a].file_name().map(|n| n.to_string_lossy().into_owned()),
                "raterB": files[p.rater_b].file_name().map(|n| n.to_string_lossy().into_owned()),
                "slides": p.slides,
                "agreement": p.agreement,
                "discordance": p.discordance(),
                "confusion": p.confusion,
            })
        })
        .collect();
    let mut art = Artifacts::new(&cfg.resolve(&cfg.paths.reports), STAGE)?;
    let out = art.path("agreement.json");
    write_json(STAGE, &out, &json!({ "schema_version": SCHEMA_VERSION, "pairs": entries }))?;
    art.event("agreement", json!({ "pairs": pairs.len() }));
    art.finish(cfg)?;
    Ok(json!({ "command": STAGE, "agreement": out, "pairs": entries }))
}
