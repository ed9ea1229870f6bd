//! Turns broken slide constraints into the patch training set of an epoch.
//!
//! Patches of an over-represented class `c` are sorted by their probability
//! for `c` and the least confident are taken until their tumor mass covers
//! the excess. For a missing share of the slide label `Y`, patches predicted
//! as a neighbor of `Y` are sorted by their probability for `Y` and the most
//! confident are taken until their mass covers the deficit.

use std::cmp::Ordering;
use std::collections::HashSet;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::guidelines::{
    broken_constraints, ClassFractionVector, ConstraintMatrices, Her2Class, Violation,
};
use crate::model::{AdmissibleSet, Logits, Slide};

/// Slack applied when comparing cumulative mass to the required mass, so
/// that e.g. `0.15 - 0.1` is covered by a `0.05` patch.
pub const MASS_EPSILON: f64 = 1e-12;

/// Per-patch outputs of an inference pass over one slide.
#[derive(Debug, Clone, PartialEq)]
pub struct SlidePredictions {
    pub classes: Vec<Her2Class>,
    pub probs: Vec<Logits>,
}

impl SlidePredictions {
    fn check(&self, slide: &Slide) -> Result<()> {
        let n = slide.patches.len();
        for (what, len) in [("predicted classes", self.classes.len()), ("probabilities", self.probs.len())] {
            if len != n {
                return Err(Error::LengthMismatch { what, left: len, right: n });
            }
        }
        Ok(())
    }
}

pub fn compute_fractions(slide: &Slide, classes: &[Her2Class]) -> Result<ClassFractionVector> {
    if classes.len() != slide.patches.len() {
        return Err(Error::LengthMismatch {
            what: "predictions vs patches",
            left: classes.len(),
            right: slide.patches.len(),
        });
    }
    ClassFractionVector::from_weighted(classes, &slide.normalized_weights)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpperSelection {
    pub class: Her2Class,
    pub excess: f64,
    pub admissible: AdmissibleSet,
    /// Position in the sorted pool of the last selected patch.
    pub cutoff: Option<usize>,
    /// Patch indices into `slide.patches`, in selection order.
    pub patches: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LowerSelection {
    pub target: Her2Class,
    pub deficit: f64,
    /// Position in the sorted pool of the first selected patch.
    pub cutoff: Option<usize>,
    pub patches: Vec<usize>,
}

/// Selected patches of one slide for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlideSelection {
    pub slide: String,
    pub fractions: ClassFractionVector,
    pub violations: Vec<Violation>,
    pub upper: Vec<UpperSelection>,
    pub lower: Option<LowerSelection>,
}

impl SlideSelection {
    pub fn upper_count(&self) -> usize {
        self.upper.iter().map(|u| u.patches.len()).sum()
    }

    pub fn lower_count(&self) -> usize {
        self.lower.as_ref().map_or(0, |l| l.patches.len())
    }

    pub fn is_empty(&self) -> bool {
        self.upper_count() == 0 && self.lower_count() == 0
    }
}

/// Pool indices sorted ascending by the probability of `class`, patch id breaking ties.
fn sorted_pool(slide: &Slide, probs: &[Logits], pool: Vec<usize>, class: Her2Class) -> Vec<usize> {
    let mut pool = pool;
    pool.sort_by(|&a, &b| {
        probs[a][class.index()]
            .partial_cmp(&probs[b][class.index()])
            .unwrap_or(Ordering::Equal)
            .then_with(|| slide.patches[a].id.cmp(&slide.patches[b].id))
            .then_with(|| a.cmp(&b))
    });
    pool
}

pub fn select_upper(
    slide: &Slide,
    preds: &SlidePredictions,
    class: Her2Class,
    excess: f64,
) -> Result<UpperSelection> {
    preds.check(slide)?;
    let pool: Vec<usize> = (0..slide.patches.len())
        .filter(|&i| preds.classes[i] == class)
        .collect();
    let order = sorted_pool(slide, &preds.probs, pool, class);

    let mut cumulative = 0.0;
    let mut cutoff = None;
    for (n, &i) in order.iter().enumerate() {
        cumulative += slide.normalized_weights[i];
        if cumulative >= excess - MASS_EPSILON {
            cutoff = Some(n);
            break;
        }
    }
    // Rounding can leave the whole pool just short of `excess`.
    if cutoff.is_none() && !order.is_empty() {
        cutoff = Some(order.len() - 1);
    }
    let patches = cutoff.map_or_else(Vec::new, |n| order[..=n].to_vec());
    Ok(UpperSelection {
        class,
        excess,
        admissible: AdmissibleSet::excluding(class),
        cutoff,
        patches,
    })
}

pub fn neighbor_classes(label: Her2Class) -> Vec<Her2Class> {
    let y = label.index();
    [y.checked_sub(1), Some(y + 1)]
        .into_iter()
        .flatten()
        .filter(|&k| k < crate::guidelines::NUM_CLASSES)
        .map(Her2Class::from_index)
        .collect()
}

pub fn select_lower(
    slide: &Slide,
    preds: &SlidePredictions,
    target: Her2Class,
    deficit: f64,
) -> Result<LowerSelection> {
    preds.check(slide)?;
    let empty = LowerSelection {
        target,
        deficit,
        cutoff: None,
        patches: Vec::new(),
    };
    if deficit <= 0.0 {
        return Ok(empty);
    }
    let neighbors = neighbor_classes(target);
    let pool: Vec<usize> = (0..slide.patches.len())
        .filter(|&i| neighbors.contains(&preds.classes[i]))
        .collect();
    if pool.is_empty() {
        return Ok(empty);
    }
    let order = sorted_pool(slide, &preds.probs, pool, target);

    let mut cumulative = 0.0;
    let mut start = 0;
    for n in (0..order.len()).rev() {
        cumulative += slide.normalized_weights[order[n]];
        start = n;
        if cumulative >= deficit - MASS_EPSILON {
            break;
        }
    }
    // Most confident first.
    let patches = order[start..].iter().rev().copied().collect();
    Ok(LowerSelection {
        target,
        deficit,
        cutoff: Some(start),
        patches,
    })
}

/// Selection for a single slide. A patch chosen by the lower selection is
/// removed from any upper list.
pub fn select_slide(
    slide: &Slide,
    preds: &SlidePredictions,
    constraints: &ConstraintMatrices,
) -> Result<SlideSelection> {
    preds.check(slide)?;
    let fractions = compute_fractions(slide, &preds.classes)?;
    let violations = broken_constraints(&fractions, slide.label, constraints);

    let mut upper = Vec::new();
    let mut lower = None;
    for v in &violations {
        match *v {
            Violation::Upper { class, excess } => upper.push(select_upper(slide, preds, class, excess)?),
            Violation::Lower { deficit } => lower = Some(select_lower(slide, preds, slide.label, deficit)?),
        }
    }
    if let Some(l) = &lower {
        let taken: HashSet<usize> = l.patches.iter().copied().collect();
        for u in &mut upper {
            u.patches.retain(|i| !taken.contains(i));
        }
    }
    Ok(SlideSelection {
        slide: slide.id.clone(),
        fractions,
        violations,
        upper,
        lower,
    })
}

/// Per-slide selections in input order.
pub fn build_epoch_set(
    slides: &[Slide],
    predictions: &[SlidePredictions],
    constraints: &ConstraintMatrices,
) -> Result<Vec<SlideSelection>> {
    if slides.len() != predictions.len() {
        return Err(Error::LengthMismatch {
            what: "slides vs predictions",
            left: slides.len(),
            right: predictions.len(),
        });
    }
    slides
        .par_iter()
        .zip(predictions.par_iter())
        .map(|(s, p)| select_slide(s, p, constraints))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionKind {
    Upper,
    Lower,
}

/// One line of the epoch-set debug dump.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionRecord {
    pub schema_version: u32,
    pub slide: String,
    pub patch: String,
    pub kind: SelectionKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<Her2Class>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<Her2Class>,
    #[serde(rename = "cutoffIndex")]
    pub cutoff_index: Option<usize>,
}

pub fn selection_records(slides: &[Slide], selections: &[SlideSelection]) -> Vec<SelectionRecord> {
    let mut out = Vec::new();
    for (slide, sel) in slides.iter().zip(selections) {
        for u in &sel.upper {
            for &i in &u.patches {
                out.push(SelectionRecord {
                    schema_version: crate::io::SCHEMA_VERSION,
                    slide: slide.id.clone(),
                    patch: slide.patches[i].id.clone(),
                    kind: SelectionKind::Upper,
                    class: Some(u.class),
                    target: None,
                    cutoff_index: u.cutoff,
                });
            }
        }
        if let Some(l) = &sel.lower {
            for &i in &l.patches {
                out.push(SelectionRecord {
                    schema_version: crate::io::SCHEMA_VERSION,
                    slide: slide.id.clone(),
                    patch: slide.patches[i].id.clone(),
                    kind: SelectionKind::Lower,
                    class: None,
                    target: Some(l.target),
                    cutoff_index: l.cutoff,
                });
            }
        }
    }
    out
}
