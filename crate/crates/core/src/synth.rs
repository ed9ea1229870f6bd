//! Synthetic cohorts with known patch classes.
//!
//! Each slide draws a class composition from its label's Dirichlet profile,
//! assigns patch classes from that composition and keeps the slide only if
//! the realized tumor-weighted fractions score to the declared label under
//! the guidelines (and match the drawn heterogeneity indicator).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidelines::{score_fractions, ClassFractionVector, ConstraintMatrices, Her2Class, NUM_CLASSES};
use crate::io::{LabelRecord, SCHEMA_VERSION};
use crate::model::{Patch, Slide};

pub const MAX_REJECTION_DRAWS: usize = 10_000;

/// Stream offset separating rater draws from slide generation.
const RATER_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaterNoise {
    /// Row = declared class, column = probability of each reported class.
    pub matrix: [[f64; NUM_CLASSES]; NUM_CLASSES],
    /// Total raters including the reference rater, who reports the declared class.
    #[serde(default = "default_raters")]
    pub raters: usize,
    /// Replace each slide's training label with the first noisy rater's label.
    #[serde(default)]
    pub corrupt_labels: bool,
}

fn default_raters() -> usize {
    2
}

impl RaterNoise {
    /// Every declared class keeps `1 - discordance`; the rest is split
    /// evenly over adjacent classes.
    pub fn adjacent(discordance: f64) -> Self {
        let mut matrix = [[0.0; NUM_CLASSES]; NUM_CLASSES];
        for (r, row) in matrix.iter_mut().enumerate() {
            row[r] = 1.0 - discordance;
            let adj: Vec<usize> = [r.checked_sub(1), Some(r + 1)]
                .into_iter()
                .flatten()
                .filter(|&k| k < NUM_CLASSES)
                .collect();
            for &k in &adj {
                row[k] = discordance / adj.len() as f64;
            }
        }
        RaterNoise {
            matrix,
            raters: 2,
            corrupt_labels: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortSpec {
    pub slides_per_class: [usize; NUM_CLASSES],
    /// Inclusive range of patches per slide.
    pub patches_per_slide: [usize; 2],
    pub feature_dim: usize,
    /// Per-class mean feature vectors; empty means the default simplex layout.
    pub class_means: Vec<Vec<f64>>,
    /// Distance of each default class mean from the origin, in units of `feature_sigma`.
    pub mean_separation: f64,
    pub feature_sigma: f64,
    /// Optional shift added to every feature vector (scanner-domain hook).
    pub mean_shift: Vec<f64>,
    /// Dirichlet parameters over patch classes, one row per slide label.
    pub composition_profiles: [[f64; NUM_CLASSES]; NUM_CLASSES],
    pub tumor_fraction_range: [f64; 2],
    pub heterogeneous_rate: f64,
    pub rater_noise: Option<RaterNoise>,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            slides_per_class: [50; NUM_CLASSES],
            patches_per_slide: [30, 60],
            feature_dim: 8,
            class_means: Vec::new(),
            mean_separation: 4.0,
            feature_sigma: 1.0,
            mean_shift: Vec::new(),
            composition_profiles: [
                [20.0, 0.4, 0.02, 0.02],
                [3.0, 6.0, 0.2, 0.02],
                [1.5, 2.5, 6.0, 0.15],
                [0.1, 0.3, 1.5, 6.0],
            ],
            tumor_fraction_range: [0.15, 1.0],
            heterogeneous_rate: 0.0,
            rater_noise: None,
            seed: 0,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if !(self.feature_sigma > 0.0) {
            return bad("feature_sigma must be > 0");
        }
        let [lo, hi] = self.patches_per_slide;
        if lo == 0 || lo > hi {
            return bad("patches_per_slide must be a nonempty range [lo, hi] with lo >= 1");
        }
        if self.composition_profiles.iter().flatten().any(|a| !(*a > 0.0)) {
            return bad("composition profile parameters must be > 0");
        }
        let [tlo, thi] = self.tumor_fraction_range;
        if !(tlo > 0.0 && tlo <= thi && thi <= 1.0) {
            return bad("tumor_fraction_range must satisfy 0 < lo <= hi <= 1");
        }
        if !(0.0..=1.0).contains(&self.heterogeneous_rate) {
            return bad("heterogeneous_rate must lie in [0,1]");
        }
        if !self.class_means.is_empty()
            && (self.class_means.len() != NUM_CLASSES
                || self.class_means.iter().any(|m| m.len() != self.feature_dim))
        {
            return bad("class_means must hold 4 vectors of length feature_dim");
        }
        if self.class_means.is_empty() && self.feature_dim < NUM_CLASSES {
            return bad("default class means need feature_dim >= 4");
        }
        if !self.mean_shift.is_empty() && self.mean_shift.len() != self.feature_dim {
            return bad("mean_shift must be empty or of length feature_dim");
        }
        if let Some(noise) = &self.rater_noise {
            if noise.raters < 2 {
                return bad("rater_noise.raters must be >= 2");
            }
            for row in &noise.matrix {
                if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return bad("rater_noise.matrix rows must be probability vectors");
                }
            }
        }
        Ok(())
    }

    /// Class means: explicit ones, or basis vectors scaled to
    /// `mean_separation * feature_sigma` (pairwise distance `sqrt(2)` times that).
    pub fn means(&self) -> Vec<Vec<f64>> {
        if !self.class_means.is_empty() {
            return self.class_means.clone();
        }
        let scale = self.mean_separation * self.feature_sigma;
        (0..NUM_CLASSES)
            .map(|c| {
                let mut m = vec![0.0; self.feature_dim];
                m[c] = scale;
                m
            })
            .collect()
    }
}

/// Generated slides plus one label file per simulated rater (empty without rater noise).
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub slides: Vec<Slide>,
    pub rater_labels: Vec<Vec<LabelRecord>>,
}

fn slide_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Gamma-normalized Dirichlet draw; `None` when every component underflows.
fn dirichlet<R: Rng>(alpha: &[f64; NUM_CLASSES], rng: &mut R) -> Option<[f64; NUM_CLASSES]> {
    let mut x = [0.0; NUM_CLASSES];
    for (xi, &a) in x.iter_mut().zip(alpha) {
        *xi = Gamma::new(a, 1.0).expect("positive shape").sample(rng);
    }
    let s: f64 = x.iter().sum();
    if !(s > 0.0) || !s.is_finite() {
        return None;
    }
    Some(x.map(|xi| xi / s))
}

fn categorical<R: Rng>(p: &[f64; NUM_CLASSES], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    // Rounding left a sliver above the last boundary.
    p.iter().rposition(|&pk| pk > 0.0).unwrap_or(0)
}

fn generate_slide(
    spec: &CohortSpec,
    means: &[Vec<f64>],
    constraints: &ConstraintMatrices,
    index: usize,
    label: Her2Class,
) -> Result<Slide> {
    let mut rng = slide_rng(spec.seed, index as u64);
    let heterogeneous = rng.random_bool(spec.heterogeneous_rate);
    let [plo, phi] = spec.patches_per_slide;
    let n_patches = rng.random_range(plo..=phi);
    let [tlo, thi] = spec.tumor_fraction_range;
    let tumor = Uniform::new_inclusive(tlo, thi).expect("valid tumor range");
    let noise = Normal::new(0.0, spec.feature_sigma).expect("positive sigma");
    let profile = &spec.composition_profiles[label.index()];

    for _ in 0..MAX_REJECTION_DRAWS {
        let Some(composition) = dirichlet(profile, &mut rng) else {
            continue;
        };
        let classes: Vec<usize> = (0..n_patches).map(|_| categorical(&composition, &mut rng)).collect();
        let fractions: Vec<f64> = (0..n_patches).map(|_| tumor.sample(&mut rng)).collect();

        let total: f64 = fractions.iter().sum();
        let mut v = [0.0; NUM_CLASSES];
        for (c, w) in classes.iter().zip(&fractions) {
            v[*c] += w / total;
        }
        let Ok(v) = ClassFractionVector::new(v) else {
            continue;
        };
        let verdict = score_fractions(&v, constraints);
        if verdict.principal_score != label || verdict.heterogeneous_flag != heterogeneous {
            continue;
        }

        let patches = classes
            .iter()
            .zip(&fractions)
            .enumerate()
            .map(|(p, (&c, &tf))| {
                let features = means[c]
                    .iter()
                    .enumerate()
                    .map(|(j, m)| m + spec.mean_shift.get(j).copied().unwrap_or(0.0) + noise.sample(&mut rng))
                    .collect();
                Patch {
                    id: format!("s{index:05}-p{p:03}"),
                    features,
                    tumor_fraction: tf,
                    true_class: Some(Her2Class::from_index(c)),
                }
            })
            .collect();
        return Slide::new(format!("s{index:05}"), label, patches);
    }
    Err(Error::RejectionExhausted {
        slide: index,
        class: label.value(),
        draws: MAX_REJECTION_DRAWS,
    })
}

/// Slides are numbered class by class; slide `i` uses its own RNG stream,
/// so output does not depend on the worker count.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort> {
    spec.validate()?;
    let constraints = ConstraintMatrices::default();
    let means = spec.means();
    let labels: Vec<Her2Class> = Her2Class::ALL
        .iter()
        .flat_map(|&c| std::iter::repeat_n(c, spec.slides_per_class[c.index()]))
        .collect();

    let mut slides: Vec<Slide> = labels
        .par_iter()
        .enumerate()
        .map(|(i, &label)| generate_slide(spec, &means, &constraints, i, label))
        .collect::<Result<_>>()?;

    let rater_labels = match &spec.rater_noise {
        None => Vec::new(),
        Some(noise) => {
            let mut files = vec![Vec::with_capacity(slides.len()); noise.raters];
            for (i, slide) in slides.iter().enumerate() {
                let mut rng = slide_rng(spec.seed, RATER_STREAM + i as u64);
                files[0].push(LabelRecord {
                    schema_version: SCHEMA_VERSION,
                    id: slide.id.clone(),
                    label: slide.label,
                });
                for file in files.iter_mut().skip(1) {
                    let reported = categorical(&noise.matrix[slide.label.index()], &mut rng);
                    file.push(LabelRecord {
                        schema_version: SCHEMA_VERSION,
                        id: slide.id.clone(),
                        label: Her2Class::from_index(reported),
                    });
                }
            }
            if noise.corrupt_labels {
                for (slide, rec) in slides.iter_mut().zip(&files[1]) {
                    slide.label = rec.label;
                }
            }
            files
        }
    };
    Ok(Cohort { slides, rater_labels })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Slide>,
    pub validation: Vec<Slide>,
    pub test: Vec<Slide>,
}

/// Stratified slide-level split. Each class is shuffled with the seed; the
/// validation and test parts get `round(n * ratio)` slides (at least one
/// when their ratio is nonzero) and train keeps the rest. Slides keep their
/// input order inside each part.
pub fn split_cohort(slides: &[Slide], ratios: [f64; 3], seed: u64) -> Result<Split> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let parts = ratios.iter().filter(|r| **r > 0.0).count();
    let mut assignment = vec![0usize; slides.len()];
    for class in Her2Class::ALL {
        let mut members: Vec<usize> = (0..slides.len()).filter(|&i| slides[i].label == class).collect();
        let n = members.len();
        if n == 0 {
            continue;
        }
        if n < parts {
            return Err(Error::SplitTooSmall {
                class: class.value(),
                count: n,
                parts,
            });
        }
        let mut rng = slide_rng(seed, class.index() as u64);
        members.shuffle(&mut rng);
        let size = |r: f64| if r > 0.0 { ((n as f64 * r).round() as usize).max(1) } else { 0 };
        let n_val = size(ratios[1]);
        let n_test = size(ratios[2]);
        let n_train = n.saturating_sub(n_val + n_test);
        if ratios[0] > 0.0 && n_train == 0 {
            return Err(Error::SplitTooSmall {
                class: class.value(),
                count: n,
                parts,
            });
        }
        for (k, &i) in members.iter().enumerate() {
            assignment[i] = if k < n_train {
                0
            } else if k < n_train + n_val {
                1
            } else {
                2
            };
        }
    }
    let pick = |part: usize| {
        slides
            .iter()
            .zip(&assignment)
            .filter(|(_, a)| **a == part)
            .map(|(s, _)| s.clone())
            .collect()
    };
    Ok(Split {
        train: pick(0),
        validation: pick(1),
        test: pick(2),
    })
}
