//! Confusion matrices, macro F1, Dice/precision/recall, per-cell fraction
//! KDE tables and pairwise rater agreement.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidelines::{ClassFractionVector, Her2Class, NUM_CLASSES};
use crate::io::LabelRecord;
use crate::model::Slide;

/// Rows are reference labels, columns are predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|c| self.counts[c][c]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.trace() as f64 / t as f64,
        }
    }

    /// Mass predicted above the reference class (overclassification).
    pub fn above_diagonal(&self) -> u64 {
        (0..NUM_CLASSES)
            .flat_map(|r| ((r + 1)..NUM_CLASSES).map(move |c| (r, c)))
            .map(|(r, c)| self.counts[r][c])
            .sum()
    }

    pub fn below_diagonal(&self) -> u64 {
        (0..NUM_CLASSES)
            .flat_map(|r| (0..r).map(move |c| (r, c)))
            .map(|(r, c)| self.counts[r][c])
            .sum()
    }

    pub fn add(&mut self, reference: Her2Class, predicted: Her2Class) {
        self.counts[reference.index()][predicted.index()] += 1;
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("reference,pred_0,pred_1,pred_2,pred_3\n");
        for (r, row) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{r},{},{},{},{}", row[0], row[1], row[2], row[3]);
        }
        out
    }
}

pub fn confusion(reference: &[Her2Class], predicted: &[Her2Class]) -> Result<ConfusionMatrix> {
    if reference.len() != predicted.len() {
        return Err(Error::LengthMismatch {
            what: "reference vs predicted labels",
            left: reference.len(),
            right: predicted.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (r, p) in reference.iter().zip(predicted) {
        cm.add(*r, *p);
    }
    Ok(cm)
}

/// Patch-level confusion against synthetic ground truth. Patches without a
/// `true_class` are skipped.
pub fn patch_confusion(slides: &[Slide], predicted: &[Vec<Her2Class>]) -> Result<ConfusionMatrix> {
    if slides.len() != predicted.len() {
        return Err(Error::LengthMismatch {
            what: "slides vs patch predictions",
            left: slides.len(),
            right: predicted.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (s, preds) in slides.iter().zip(predicted) {
        if s.patches.len() != preds.len() {
            return Err(Error::LengthMismatch {
                what: "patches vs predictions",
                left: s.patches.len(),
                right: preds.len(),
            });
        }
        for (p, c) in s.patches.iter().zip(preds) {
            if let Some(t) = p.true_class {
                cm.add(t, *c);
            }
        }
    }
    Ok(cm)
}

/// How classes with neither support nor predictions enter the macro average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsentClassPolicy {
    /// Excluded from the average.
    #[default]
    PresentOnly,
    /// Scored as 0.
    Strict,
}

pub fn per_class_f1(cm: &ConfusionMatrix) -> [Option<f64>; NUM_CLASSES] {
    let mut out = [None; NUM_CLASSES];
    for (c, slot) in out.iter_mut().enumerate() {
        let tp = cm.counts[c][c];
        let support: u64 = cm.counts[c].iter().sum();
        let predicted: u64 = (0..NUM_CLASSES).map(|r| cm.counts[r][c]).sum();
        if support == 0 && predicted == 0 {
            continue;
        }
        *slot = Some(2.0 * tp as f64 / (support + predicted) as f64);
    }
    out
}

pub fn macro_f1(cm: &ConfusionMatrix, policy: AbsentClassPolicy) -> Result<f64> {
    if cm.total() == 0 {
        return Err(Error::EmptyConfusion);
    }
    let scores = per_class_f1(cm);
    let (sum, n) = match policy {
        AbsentClassPolicy::PresentOnly => scores
            .iter()
            .flatten()
            .fold((0.0, 0usize), |(s, n), f| (s + f, n + 1)),
        AbsentClassPolicy::Strict => (scores.iter().map(|f| f.unwrap_or(0.0)).sum(), NUM_CLASSES),
    };
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub dice: f64,
    /// Set when a ratio had a zero denominator or there are no true positives.
    pub degenerate: bool,
}

pub fn pixel_metrics(tp: u64, fp: u64, fn_: u64) -> PixelMetrics {
    let ratio = |num: u64, den: u64| if den == 0 { None } else { Some(num as f64 / den as f64) };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let dice = ratio(2 * tp, 2 * tp + fp + fn_);
    PixelMetrics {
        precision: precision.unwrap_or(0.0),
        recall: recall.unwrap_or(0.0),
        dice: dice.unwrap_or(0.0),
        degenerate: tp == 0 || precision.is_none() || recall.is_none(),
    }
}

/// Bandwidth choice for the fraction KDE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Silverman,
    Fixed(f64),
}

pub const MIN_BANDWIDTH: f64 = 0.01;
pub const KDE_GRID_POINTS: usize = 101;

/// `0.9 * min(sd, IQR/1.34) * n^(-1/5)`, falling back to whichever spread
/// is nonzero, floored at `MIN_BANDWIDTH`.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return MIN_BANDWIDTH;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = (quantile(&sorted, 0.75) - quantile(&sorted, 0.25)) / 1.34;
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr),
        (true, false) => sd,
        (false, true) => iqr,
        (false, false) => 0.0,
    };
    (0.9 * spread * (n as f64).powf(-0.2)).max(MIN_BANDWIDTH)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn kde_grid() -> Vec<f64> {
    (0..KDE_GRID_POINTS).map(|i| i as f64 / 100.0).collect()
}

/// Gaussian KDE evaluated on `grid`, not renormalized to [0,1].
pub fn gaussian_kde(samples: &[f64], bandwidth: f64, grid: &[f64]) -> Vec<f64> {
    let norm = 1.0 / (samples.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|&g| {
            samples
                .iter()
                .map(|&x| (-0.5 * ((g - x) / bandwidth).powi(2)).exp())
                .sum::<f64>()
                * norm
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct KdeCell {
    pub slide_class: Her2Class,
    pub patch_class: Her2Class,
    pub samples: usize,
    pub bandwidth: Option<f64>,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

/// One density per (slide score, patch class) pair over the slides'
/// fractions of that patch class. Empty cells carry empty series.
pub fn fraction_kde(slides: &[(Her2Class, ClassFractionVector)], bandwidth: Bandwidth) -> Result<Vec<KdeCell>> {
    if let Bandwidth::Fixed(h) = bandwidth {
        if !(h > 0.0) {
            return Err(Error::InvalidConfig(format!("KDE bandwidth {h} must be > 0")));
        }
    }
    let grid = kde_grid();
    let mut cells = Vec::with_capacity(NUM_CLASSES * NUM_CLASSES);
    for slide_class in Her2Class::ALL {
        for patch_class in Her2Class::ALL {
            let samples: Vec<f64> = slides
                .iter()
                .filter(|(score, _)| *score == slide_class)
                .map(|(_, v)| v.get(patch_class))
                .collect();
            if samples.is_empty() {
                cells.push(KdeCell {
                    slide_class,
                    patch_class,
                    samples: 0,
                    bandwidth: None,
                    grid: Vec::new(),
                    density: Vec::new(),
                });
                continue;
            }
            let h = match bandwidth {
                Bandwidth::Silverman => silverman_bandwidth(&samples),
                Bandwidth::Fixed(h) => h,
            };
            cells.push(KdeCell {
                slide_class,
                patch_class,
                samples: samples.len(),
                bandwidth: Some(h),
                density: gaussian_kde(&samples, h, &grid),
                grid: grid.clone(),
            });
        }
    }
    Ok(cells)
}

/// Trapezoid integral of a density over its grid.
pub fn trapezoid(grid: &[f64], density: &[f64]) -> f64 {
    grid.windows(2)
        .zip(density.windows(2))
        .map(|(g, d)| (g[1] - g[0]) * (d[0] + d[1]) / 2.0)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAgreement {
    pub rater_a: usize,
    pub rater_b: usize,
    pub slides: usize,
    pub agreement: f64,
    pub confusion: ConfusionMatrix,
}

impl PairAgreement {
    pub fn discordance(&self) -> f64 {
        1.0 - self.agreement
    }
}

/// Pairwise comparison over the slide ids both raters scored. Rater `a`
/// gives the confusion rows.
pub fn rater_agreement(raters: &[Vec<LabelRecord>]) -> Result<Vec<PairAgreement>> {
    if raters.len() < 2 {
        return Err(Error::InvalidConfig("rater agreement needs at least two label sets".into()));
    }
    let maps: Vec<BTreeMap<&str, Her2Class>> = raters
        .iter()
        .map(|r| r.iter().map(|rec| (rec.id.as_str(), rec.label)).collect())
        .collect();
    let mut out = Vec::new();
    for a in 0..maps.len() {
        for b in (a + 1)..maps.len() {
            let mut cm = ConfusionMatrix::default();
            for (id, la) in &maps[a] {
                if let Some(lb) = maps[b].get(id) {
                    cm.add(*la, *lb);
                }
            }
            if cm.total() == 0 {
                return Err(Error::DisjointRaters(a, b));
            }
            out.push(PairAgreement {
                rater_a: a,
                rater_b: b,
                slides: cm.total() as usize,
                agreement: cm.accuracy(),
                confusion: cm,
            });
        }
    }
    Ok(out)
}
