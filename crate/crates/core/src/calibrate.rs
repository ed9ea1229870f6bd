//! Per-class logit scaling of a frozen classifier, fitted to the slide
//! labels by minimizing the hinge distance between slide fractions and the
//! guideline thresholds.
//!
//! Under a hard argmax the objective is piecewise constant in `alpha`, so the
//! default search is a derivative-free simplex method with restarts. A
//! smoothed mode replaces hard counts with softmax fractions, descends on
//! that surrogate, and scores every iterate with the hard objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidelines::{hinge_distance, ClassFractionVector, ConstraintMatrices, Her2Class, NUM_CLASSES};
use crate::io::{LogitRecord, SCHEMA_VERSION};
use crate::model::{argmax, softmax, ClassifierParams, Logits, Slide};

/// Frozen logits of every admitted patch, grouped by slide in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsMatrix {
    pub rows: Vec<Logits>,
    pub slide_index: Vec<usize>,
    pub weights: Vec<f64>,
    pub slide_ids: Vec<String>,
    pub labels: Vec<Her2Class>,
    pub patch_ids: Vec<String>,
}

impl LogitsMatrix {
    pub fn from_model(params: &ClassifierParams, slides: &[Slide]) -> Result<Self> {
        let mut m = LogitsMatrix {
            rows: Vec::new(),
            slide_index: Vec::new(),
            weights: Vec::new(),
            slide_ids: Vec::with_capacity(slides.len()),
            labels: Vec::with_capacity(slides.len()),
            patch_ids: Vec::new(),
        };
        for (si, s) in slides.iter().enumerate() {
            m.slide_ids.push(s.id.clone());
            m.labels.push(s.label);
            for (p, w) in s.patches.iter().zip(&s.normalized_weights) {
                m.rows.push(params.logits(&p.features)?);
                m.slide_index.push(si);
                m.weights.push(*w);
                m.patch_ids.push(p.id.clone());
            }
        }
        Ok(m)
    }

    /// Rows of one slide must be contiguous.
    pub fn from_records(records: &[LogitRecord]) -> Result<Self> {
        let mut m = LogitsMatrix {
            rows: Vec::with_capacity(records.len()),
            slide_index: Vec::with_capacity(records.len()),
            weights: Vec::with_capacity(records.len()),
            slide_ids: Vec::new(),
            labels: Vec::new(),
            patch_ids: Vec::with_capacity(records.len()),
        };
        for r in records {
            crate::io::check_version(r.schema_version)?;
            if r.logits.iter().any(|z| !z.is_finite()) || !(r.weight >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "invalid logits or weight for patch {} of slide {}",
                    r.patch, r.slide
                )));
            }
            if m.slide_ids.last() != Some(&r.slide) {
                if m.slide_ids.contains(&r.slide) {
                    return Err(Error::InvalidConfig(format!("rows of slide {} are not contiguous", r.slide)));
                }
                m.slide_ids.push(r.slide.clone());
                m.labels.push(r.label);
            } else if m.labels.last() != Some(&r.label) {
                return Err(Error::InvalidConfig(format!("slide {} has conflicting labels", r.slide)));
            }
            m.rows.push(r.logits);
            m.slide_index.push(m.slide_ids.len() - 1);
            m.weights.push(r.weight);
            m.patch_ids.push(r.patch.clone());
        }
        Ok(m)
    }

    pub fn to_records(&self) -> Vec<LogitRecord> {
        (0..self.rows.len())
            .map(|i| LogitRecord {
                schema_version: SCHEMA_VERSION,
                slide: self.slide_ids[self.slide_index[i]].clone(),
                patch: self.patch_ids[i].clone(),
                logits: self.rows[i],
                weight: self.weights[i],
                label: self.labels[self.slide_index[i]],
            })
            .collect()
    }

    pub fn slide_count(&self) -> usize {
        self.slide_ids.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationVector {
    pub alpha: [f64; NUM_CLASSES],
}

impl Default for CalibrationVector {
    fn default() -> Self {
        CalibrationVector { alpha: [1.0; NUM_CLASSES] }
    }
}

impl CalibrationVector {
    pub fn scale(&self, logits: &Logits) -> Logits {
        let mut out = *logits;
        for (z, a) in out.iter_mut().zip(&self.alpha) {
            *z *= a;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibrated {
    pub classes: Vec<Her2Class>,
    pub fractions: Vec<ClassFractionVector>,
}

fn fractions_from(m: &LogitsMatrix, classes: &[Her2Class]) -> Result<Vec<ClassFractionVector>> {
    let mut sums = vec![[0.0; NUM_CLASSES]; m.slide_count()];
    let mut totals = vec![0.0; m.slide_count()];
    for ((c, &s), w) in classes.iter().zip(&m.slide_index).zip(&m.weights) {
        sums[s][c.index()] += w;
        totals[s] += w;
    }
    sums.into_iter()
        .zip(totals)
        .map(|(v, t)| {
            if !(t > 0.0) {
                return Err(Error::InvalidFractions("slide with zero total weight".into()));
            }
            ClassFractionVector::new(v.map(|x| x / t))
        })
        .collect()
}

/// Class of each row under `argmax(alpha ∘ logits)` and the resulting
/// per-slide fractions.
pub fn apply_calibration(m: &LogitsMatrix, alpha: &CalibrationVector) -> Result<Calibrated> {
    if m.rows.len() != m.slide_index.len() || m.rows.len() != m.weights.len() {
        return Err(Error::LengthMismatch {
            what: "logit rows vs slide index/weights",
            left: m.rows.len(),
            right: m.slide_index.len().min(m.weights.len()),
        });
    }
    let classes: Vec<Her2Class> = m.rows.iter().map(|z| argmax(&alpha.scale(z))).collect();
    let fractions = fractions_from(m, &classes)?;
    Ok(Calibrated { classes, fractions })
}

pub fn objective_from_fractions(
    fractions: &[ClassFractionVector],
    labels: &[Her2Class],
    constraints: &ConstraintMatrices,
) -> f64 {
    fractions
        .iter()
        .zip(labels)
        .map(|(v, y)| hinge_distance(v, *y, constraints))
        .sum()
}

/// Sum over slides of `(L[Y][Y] - V_Y)^+ + Σ_{c>Y} (V_c - U[Y][c])^+`,
/// indexed by each slide's label `Y`.
pub fn calibration_objective(
    m: &LogitsMatrix,
    alpha: &CalibrationVector,
    labels: &[Her2Class],
    constraints: &ConstraintMatrices,
) -> Result<f64> {
    if labels.len() != m.slide_count() {
        return Err(Error::LengthMismatch {
            what: "labels vs slides",
            left: labels.len(),
            right: m.slide_count(),
        });
    }
    let cal = apply_calibration(m, alpha)?;
    Ok(objective_from_fractions(&cal.fractions, labels, constraints))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMode {
    #[default]
    Simplex,
    Smoothed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationOptions {
    pub mode: CalibrationMode,
    /// Optimize `log alpha` so that every scale stays positive.
    pub positive: bool,
    /// Initial simplex edge length (in alpha or log-alpha units).
    pub initial_step: f64,
    /// Extra simplex runs started at `1 ± restart_offset` along each axis.
    pub restarts: bool,
    pub restart_offset: f64,
    pub max_evaluations: usize,
    pub diameter_tolerance: f64,
    pub temperature: f64,
    pub smoothed_iterations: usize,
    pub smoothed_step: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            mode: CalibrationMode::Simplex,
            positive: false,
            initial_step: 0.25,
            restarts: true,
            restart_offset: 0.5,
            max_evaluations: 500,
            diameter_tolerance: 1e-4,
            temperature: 1.0,
            smoothed_iterations: 200,
            smoothed_step: 1.0,
        }
    }
}

impl CalibrationOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_step > 0.0)
            || !(self.diameter_tolerance > 0.0)
            || !(self.temperature > 0.0)
            || !(self.smoothed_step > 0.0)
            || self.max_evaluations == 0
            || !(self.restart_offset >= 0.0)
        {
            return Err(Error::InvalidConfig(
                "calibration steps, tolerance and temperature must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub evaluation: usize,
    pub alpha: [f64; NUM_CLASSES],
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CalibrationResult {
    pub alpha: [f64; NUM_CLASSES],
    pub objective_before: f64,
    pub objective_after: f64,
    pub evaluations: usize,
    /// Every strict improvement of the best-seen objective.
    pub trace: Vec<TracePoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Keeps the best hard-objective point seen across all searches.
struct Tracker<'a> {
    m: &'a LogitsMatrix,
    labels: &'a [Her2Class],
    constraints: &'a ConstraintMatrices,
    positive: bool,
    evaluations: usize,
    best: ([f64; NUM_CLASSES], f64),
    trace: Vec<TracePoint>,
}

impl Tracker<'_> {
    fn to_alpha(&self, x: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
        if self.positive {
            x.map(f64::exp)
        } else {
            *x
        }
    }

    fn eval(&mut self, x: &[f64; NUM_CLASSES]) -> Result<f64> {
        let alpha = self.to_alpha(x);
        let j = calibration_objective(self.m, &CalibrationVector { alpha }, self.labels, self.constraints)?;
        self.evaluations += 1;
        if !j.is_finite() {
            return Err(Error::InvalidFractions("non-finite calibration objective".into()));
        }
        if j < self.best.1 {
            self.best = (alpha, j);
            self.trace.push(TracePoint {
                evaluation: self.evaluations,
                alpha,
                objective: j,
            });
        }
        Ok(j)
    }
}

fn diameter(simplex: &[([f64; NUM_CLASSES], f64)]) -> f64 {
    let mut d: f64 = 0.0;
    for a in simplex {
        for b in simplex {
            let dist = a.0.iter().zip(&b.0).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            d = d.max(dist);
        }
    }
    d
}

/// Standard Nelder–Mead (reflection 1, expansion 2, contraction 0.5,
/// shrink 0.5) on the hard objective.
fn nelder_mead(tracker: &mut Tracker<'_>, start: [f64; NUM_CLASSES], step: f64, budget: usize, tol: f64) -> Result<()> {
    let limit = tracker.evaluations + budget;
    let mut simplex = Vec::with_capacity(NUM_CLASSES + 1);
    simplex.push((start, tracker.eval(&start)?));
    for k in 0..NUM_CLASSES {
        let mut x = start;
        x[k] += step;
        simplex.push((x, tracker.eval(&x)?));
    }
    let combine = |a: &[f64; NUM_CLASSES], b: &[f64; NUM_CLASSES], t: f64| {
        let mut out = [0.0; NUM_CLASSES];
        for i in 0..NUM_CLASSES {
            out[i] = a[i] + t * (b[i] - a[i]);
        }
        out
    };

    while tracker.evaluations < limit && diameter(&simplex) >= tol {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let worst = simplex[NUM_CLASSES];
        let mut centroid = [0.0; NUM_CLASSES];
        for (x, _) in &simplex[..NUM_CLASSES] {
            for i in 0..NUM_CLASSES {
                centroid[i] += x[i] / NUM_CLASSES as f64;
            }
        }
        let reflected = combine(&centroid, &worst.0, -1.0);
        let fr = tracker.eval(&reflected)?;
        if fr < simplex[0].1 {
            let expanded = combine(&centroid, &worst.0, -2.0);
            let fe = tracker.eval(&expanded)?;
            simplex[NUM_CLASSES] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[NUM_CLASSES - 1].1 {
            simplex[NUM_CLASSES] = (reflected, fr);
        } else {
            let (target, ft) = if fr < worst.1 { (reflected, fr) } else { worst };
            let contracted = combine(&centroid, &target, 0.5);
            let fc = tracker.eval(&contracted)?;
            if fc < ft {
                simplex[NUM_CLASSES] = (contracted, fc);
            } else {
                let best = simplex[0].0;
                for v in simplex.iter_mut().skip(1) {
                    let x = combine(&best, &v.0, 0.5);
                    *v = (x, tracker.eval(&x)?);
                }
            }
        }
    }
    Ok(())
}

/// Soft objective with temperature and its gradient with respect to the
/// optimization variables (alpha, or log alpha when `positive`).
fn smoothed_objective(
    m: &LogitsMatrix,
    x: &[f64; NUM_CLASSES],
    labels: &[Her2Class],
    constraints: &ConstraintMatrices,
    temperature: f64,
    positive: bool,
) -> (f64, [f64; NUM_CLASSES]) {
    let alpha = if positive { x.map(f64::exp) } else { *x };
    let n_slides = m.slide_count();
    let mut v = vec![[0.0; NUM_CLASSES]; n_slides];
    let mut totals = vec![0.0; n_slides];
    // dV[s][c][j] = dV_{s,c} / d alpha_j
    let mut dv = vec![[[0.0; NUM_CLASSES]; NUM_CLASSES]; n_slides];
    for ((z, &s), &w) in m.rows.iter().zip(&m.slide_index).zip(&m.weights) {
        let mut scaled = [0.0; NUM_CLASSES];
        for j in 0..NUM_CLASSES {
            scaled[j] = alpha[j] * z[j] / temperature;
        }
        let p = softmax(&scaled);
        totals[s] += w;
        for c in 0..NUM_CLASSES {
            v[s][c] += w * p[c];
            for j in 0..NUM_CLASSES {
                let delta = if c == j { 1.0 } else { 0.0 };
                dv[s][c][j] += w * p[c] * (delta - p[j]) * z[j] / temperature;
            }
        }
    }
    let mut j_total = 0.0;
    let mut grad = [0.0; NUM_CLASSES];
    for s in 0..n_slides {
        let t = totals[s];
        let y = labels[s].index();
        let vy = v[s][y] / t;
        let lower = constraints.lower[y][y] - vy;
        if lower > 0.0 {
            j_total += lower;
            for j in 0..NUM_CLASSES {
                grad[j] -= dv[s][y][j] / t;
            }
        }
        for c in (y + 1)..NUM_CLASSES {
            let excess = v[s][c] / t - constraints.upper[y][c];
            if excess > 0.0 {
                j_total += excess;
                for j in 0..NUM_CLASSES {
                    grad[j] += dv[s][c][j] / t;
                }
            }
        }
    }
    if positive {
        for j in 0..NUM_CLASSES {
            grad[j] *= alpha[j];
        }
    }
    (j_total, grad)
}

fn smoothed_descent(tracker: &mut Tracker<'_>, options: &CalibrationOptions) -> Result<()> {
    let mut x = if options.positive { [0.0; NUM_CLASSES] } else { [1.0; NUM_CLASSES] };
    let soft = |x: &[f64; NUM_CLASSES]| {
        smoothed_objective(tracker.m, x, tracker.labels, tracker.constraints, options.temperature, options.positive)
    };
    let (mut f, mut g) = soft(&x);
    for _ in 0..options.smoothed_iterations {
        if tracker.evaluations >= options.max_evaluations {
            break;
        }
        let norm2: f64 = g.iter().map(|gi| gi * gi).sum();
        if norm2 < 1e-24 {
            break;
        }
        let mut step = options.smoothed_step;
        let mut moved = false;
        while step > 1e-8 {
            let mut cand = x;
            for j in 0..NUM_CLASSES {
                cand[j] -= step * g[j];
            }
            let (fc, gc) = soft(&cand);
            if fc <= f - 1e-4 * step * norm2 {
                x = cand;
                f = fc;
                g = gc;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        tracker.eval(&x)?;
        if !moved {
            break;
        }
    }
    Ok(())
}

/// Fits `alpha` starting from the identity. The returned objective is never
/// above the identity's; a failed search falls back to the identity and
/// records a warning.
pub fn optimize_alpha(
    m: &LogitsMatrix,
    labels: &[Her2Class],
    constraints: &ConstraintMatrices,
    options: &CalibrationOptions,
) -> Result<CalibrationResult> {
    options.validate()?;
    let identity = CalibrationVector::default();
    let before = calibration_objective(m, &identity, labels, constraints)?;
    let mut tracker = Tracker {
        m,
        labels,
        constraints,
        positive: options.positive,
        evaluations: 0,
        best: (identity.alpha, before),
        trace: Vec::new(),
    };
    if before == 0.0 {
        return Ok(CalibrationResult {
            alpha: identity.alpha,
            objective_before: before,
            objective_after: before,
            evaluations: 0,
            trace: Vec::new(),
            warning: None,
        });
    }

    let origin = if options.positive { [0.0; NUM_CLASSES] } else { [1.0; NUM_CLASSES] };
    let search = |tracker: &mut Tracker<'_>| -> Result<()> {
        match options.mode {
            CalibrationMode::Smoothed => smoothed_descent(tracker, options)?,
            CalibrationMode::Simplex => {}
        }
        let mut starts = vec![origin];
        if options.restarts {
            for k in 0..NUM_CLASSES {
                for sign in [-1.0, 1.0] {
                    let mut s = origin;
                    s[k] += sign * options.restart_offset;
                    starts.push(s);
                }
            }
        }
        let per_run = (options.max_evaluations / starts.len()).max(NUM_CLASSES + 2);
        for s in starts {
            if tracker.evaluations >= options.max_evaluations || tracker.best.1 == 0.0 {
                break;
            }
            let budget = per_run.min(options.max_evaluations - tracker.evaluations);
            nelder_mead(tracker, s, options.initial_step, budget, options.diameter_tolerance)?;
        }
        Ok(())
    };

    match search(&mut tracker) {
        Ok(()) => Ok(CalibrationResult {
            alpha: tracker.best.0,
            objective_before: before,
            objective_after: tracker.best.1,
            evaluations: tracker.evaluations,
            trace: tracker.trace,
            warning: None,
        }),
        Err(e) => Ok(CalibrationResult {
            alpha: identity.alpha,
            objective_before: before,
            objective_after: before,
            evaluations: tracker.evaluations,
            trace: Vec::new(),
            warning: Some(format!("calibration search failed, using identity: {e}")),
        }),
    }
}
