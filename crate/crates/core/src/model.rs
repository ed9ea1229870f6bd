//! Linear-softmax patch classifier with analytic gradients for the standard
//! and partial-label cross-entropy losses, and a Nesterov SGD update.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidelines::{Her2Class, NUM_CLASSES};

pub type Logits = [f64; NUM_CLASSES];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub id: String,
    pub features: Vec<f64>,
    pub tumor_fraction: f64,
    /// Synthetic ground truth; only evaluation code reads it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_class: Option<Her2Class>,
}

/// A labeled bag of patches. `normalized_weights` is derived from the
/// patches' tumor fractions and always sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Slide {
    pub id: String,
    pub label: Her2Class,
    pub patches: Vec<Patch>,
    pub normalized_weights: Vec<f64>,
}

impl Slide {
    pub fn new(id: impl Into<String>, label: Her2Class, patches: Vec<Patch>) -> Result<Self> {
        let id = id.into();
        if patches.is_empty() {
            return Err(Error::EmptySlide { slide: id });
        }
        for p in &patches {
            if !(0.0..=1.0).contains(&p.tumor_fraction) {
                return Err(Error::InvalidPatch {
                    slide: id.clone(),
                    patch: p.id.clone(),
                    reason: format!("tumor_fraction {} outside [0,1]", p.tumor_fraction),
                });
            }
            if p.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidPatch {
                    slide: id.clone(),
                    patch: p.id.clone(),
                    reason: "non-finite feature".into(),
                });
            }
        }
        let total: f64 = patches.iter().map(|p| p.tumor_fraction).sum();
        if !(total > 0.0) {
            return Err(Error::EmptySlide { slide: id });
        }
        let normalized_weights = patches.iter().map(|p| p.tumor_fraction / total).collect();
        Ok(Slide {
            id,
            label,
            patches,
            normalized_weights,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.patches[0].features.len()
    }

    /// Copy with every `true_class` removed.
    pub fn without_ground_truth(&self) -> Slide {
        let mut s = self.clone();
        for p in &mut s.patches {
            p.true_class = None;
        }
        s
    }
}

/// Linear-softmax parameters: logits = W·x + b, with Nesterov momentum buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierParams {
    pub dim: usize,
    /// 4×dim, row-major.
    pub weights: Vec<f64>,
    pub bias: [f64; NUM_CLASSES],
    pub weight_momentum: Vec<f64>,
    pub bias_momentum: [f64; NUM_CLASSES],
    pub learning_rate: f64,
    pub momentum: f64,
}

impl ClassifierParams {
    pub fn zeros(dim: usize, learning_rate: f64, momentum: f64) -> Self {
        ClassifierParams {
            dim,
            weights: vec![0.0; NUM_CLASSES * dim],
            bias: [0.0; NUM_CLASSES],
            weight_momentum: vec![0.0; NUM_CLASSES * dim],
            bias_momentum: [0.0; NUM_CLASSES],
            learning_rate,
            momentum,
        }
    }

    /// Small Gaussian weights (sd 0.01), zero bias, seeded.
    pub fn init(dim: usize, learning_rate: f64, momentum: f64, seed: u64) -> Self {
        let mut p = Self::zeros(dim, learning_rate, momentum);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.01).expect("valid sd");
        for w in &mut p.weights {
            *w = normal.sample(&mut rng);
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let n = NUM_CLASSES * self.dim;
        if self.weights.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: self.weights.len(),
            });
        }
        if self.weight_momentum.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: self.weight_momentum.len(),
            });
        }
        let finite = self
            .weights
            .iter()
            .chain(&self.weight_momentum)
            .chain(&self.bias)
            .chain(&self.bias_momentum)
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::InvalidConfig("non-finite classifier parameter".into()));
        }
        Ok(())
    }

    pub fn logits(&self, features: &[f64]) -> Result<Logits> {
        if features.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: features.len(),
            });
        }
        let mut z = self.bias;
        for (c, zc) in z.iter_mut().enumerate() {
            let row = &self.weights[c * self.dim..(c + 1) * self.dim];
            *zc += row.iter().zip(features).map(|(w, x)| w * x).sum::<f64>();
        }
        Ok(z)
    }

    /// Resets momentum buffers and overrides the optimizer settings.
    pub fn with_optimizer(mut self, learning_rate: f64, momentum: f64) -> Self {
        self.weight_momentum.iter_mut().for_each(|x| *x = 0.0);
        self.bias_momentum = [0.0; NUM_CLASSES];
        self.learning_rate = learning_rate;
        self.momentum = momentum;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Forward {
    pub logits: Logits,
    pub probs: Logits,
    pub class: Her2Class,
}

pub fn softmax(z: &Logits) -> Logits {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; NUM_CLASSES];
    let mut s = 0.0;
    for (pi, zi) in p.iter_mut().zip(z) {
        *pi = (zi - m).exp();
        s += *pi;
    }
    for pi in p.iter_mut() {
        *pi /= s;
    }
    p
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(z: &Logits) -> Her2Class {
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if z[c] > z[best] {
            best = c;
        }
    }
    Her2Class::from_index(best)
}

/// The predicted class is taken over the logits, which orders classes the
/// same way as the softmax but cannot merge distinct logits through rounding.
pub fn forward(params: &ClassifierParams, features: &[f64]) -> Result<Forward> {
    let logits = params.logits(features)?;
    Ok(Forward {
        logits,
        probs: softmax(&logits),
        class: argmax(&logits),
    })
}

/// Nonempty subset of the four classes, stored as a bit mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AdmissibleSet(u8);

impl AdmissibleSet {
    pub const ALL: AdmissibleSet = AdmissibleSet(0b1111);

    pub fn from_classes(classes: &[Her2Class]) -> Result<Self> {
        let mask = classes.iter().fold(0u8, |m, c| m | (1 << c.index()));
        Self::from_mask(mask)
    }

    pub fn from_mask(mask: u8) -> Result<Self> {
        let mask = mask & 0b1111;
        if mask == 0 {
            Err(Error::EmptyAdmissibleSet)
        } else {
            Ok(AdmissibleSet(mask))
        }
    }

    /// Every class except `class`.
    pub fn excluding(class: Her2Class) -> Self {
        AdmissibleSet(0b1111 & !(1 << class.index()))
    }

    #[inline]
    pub fn contains(self, class: usize) -> bool {
        self.0 & (1 << class) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn classes(self) -> Vec<Her2Class> {
        (0..NUM_CLASSES)
            .filter(|&c| self.contains(c))
            .map(Her2Class::from_index)
            .collect()
    }
}

impl Serialize for AdmissibleSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.classes().serialize(s)
    }
}

impl<'de> Deserialize<'de> for AdmissibleSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let classes = Vec::<Her2Class>::deserialize(d)?;
        AdmissibleSet::from_classes(&classes).map_err(serde::de::Error::custom)
    }
}

/// Moves the mass of inadmissible classes evenly onto the admissible ones.
pub fn pseudo_label(probs: &Logits, admissible: AdmissibleSet) -> Logits {
    let size = admissible.len() as f64;
    let spill: f64 = (0..NUM_CLASSES)
        .filter(|&k| !admissible.contains(k))
        .map(|k| probs[k])
        .sum();
    let mut y = [0.0; NUM_CLASSES];
    for (j, yj) in y.iter_mut().enumerate() {
        if admissible.contains(j) {
            *yj = probs[j] + spill / size;
        }
    }
    y
}

fn log_softmax(z: &Logits) -> Logits {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|zi| (zi - m).exp()).sum::<f64>().ln();
    let mut out = [0.0; NUM_CLASSES];
    for (o, zi) in out.iter_mut().zip(z) {
        *o = zi - lse;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_logits: Logits,
}

/// Cross-entropy against the pseudo-label, which is held fixed: the gradient
/// with respect to the logits is `p - pseudo_label(p)`.
pub fn partial_loss(logits: &Logits, admissible: AdmissibleSet) -> LossGrad {
    let p = softmax(logits);
    let target = pseudo_label(&p, admissible);
    soft_cross_entropy(logits, &p, &target)
}

pub fn ce_loss(logits: &Logits, target: Her2Class) -> LossGrad {
    let p = softmax(logits);
    let mut onehot = [0.0; NUM_CLASSES];
    onehot[target.index()] = 1.0;
    soft_cross_entropy(logits, &p, &onehot)
}

fn soft_cross_entropy(logits: &Logits, p: &Logits, target: &Logits) -> LossGrad {
    let logp = log_softmax(logits);
    let loss = -target
        .iter()
        .zip(&logp)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, lp)| t * lp)
        .sum::<f64>();
    let mut grad_logits = [0.0; NUM_CLASSES];
    for j in 0..NUM_CLASSES {
        grad_logits[j] = p[j] - target[j];
    }
    LossGrad { loss, grad_logits }
}

/// Accumulated parameter gradients, same layout as `ClassifierParams`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<f64>,
    pub bias: [f64; NUM_CLASSES],
}

impl Gradients {
    pub fn zeros(dim: usize) -> Self {
        Gradients {
            weights: vec![0.0; NUM_CLASSES * dim],
            bias: [0.0; NUM_CLASSES],
        }
    }

    /// Adds `scale * dL/dθ` for one patch given `dL/dlogits`.
    pub fn accumulate(&mut self, features: &[f64], grad_logits: &Logits, scale: f64) {
        let dim = features.len();
        for c in 0..NUM_CLASSES {
            let g = grad_logits[c] * scale;
            self.bias[c] += g;
            let row = &mut self.weights[c * dim..(c + 1) * dim];
            for (w, x) in row.iter_mut().zip(features) {
                *w += g * x;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|x| x.is_finite())
    }
}

/// Nesterov momentum (dampening 0):
/// `v ← μv + g`, `θ ← θ − lr·(g + μv)`.
pub fn sgd_step(params: &mut ClassifierParams, grads: &Gradients) -> Result<()> {
    if grads.weights.len() != params.weights.len() {
        return Err(Error::DimensionMismatch {
            expected: params.weights.len(),
            found: grads.weights.len(),
        });
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    let (lr, mu) = (params.learning_rate, params.momentum);
    let update = |theta: &mut f64, v: &mut f64, g: f64| {
        *v = mu * *v + g;
        *theta -= lr * (g + mu * *v);
    };
    for ((theta, v), g) in params
        .weights
        .iter_mut()
        .zip(params.weight_momentum.iter_mut())
        .zip(&grads.weights)
    {
        update(theta, v, *g);
    }
    for c in 0..NUM_CLASSES {
        update(&mut params.bias[c], &mut params.bias_momentum[c], grads.bias[c]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn class_set(cs: &[u8]) -> AdmissibleSet {
        let v: Vec<_> = cs.iter().map(|&c| Her2Class::new(c).unwrap()).collect();
        AdmissibleSet::from_classes(&v).unwrap()
    }

    /// Logits whose softmax equals `p` (up to rounding).
    fn logits_for(p: [f64; 4]) -> Logits {
        p.map(f64::ln)
    }

    #[test]
    fn uniform_forward() {
        let params = ClassifierParams::zeros(3, 1e-3, 0.9);
        let f = forward(&params, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(f.probs, [0.25; 4]);
        assert_eq!(f.class, Her2Class::ZERO);
    }

    #[test]
    fn dominant_bias() {
        let mut params = ClassifierParams::zeros(2, 1e-3, 0.9);
        params.bias = [0.0, 0.0, 0.0, 10.0];
        let f = forward(&params, &[0.3, 0.7]).unwrap();
        assert_eq!(f.class, Her2Class::THREE);
        let e10 = 10f64.exp();
        assert!((f.probs[3] - e10 / (e10 + 3.0)).abs() < 1e-15);
        assert!(f.probs[3] > 0.9998);
    }

    #[test]
    fn dimension_mismatch() {
        let params = ClassifierParams::zeros(2, 1e-3, 0.9);
        assert!(matches!(
            forward(&params, &[1.0]),
            Err(Error::DimensionMismatch { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn probs_sum_to_one_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let mut params = ClassifierParams::zeros(8, 1e-3, 0.9);
            params.weights.iter_mut().for_each(|w| *w = rng.random_range(-3.0..3.0));
            params.bias.iter_mut().for_each(|b| *b = rng.random_range(-3.0..3.0));
            let x: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
            let f = forward(&params, &x).unwrap();
            assert!((f.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pseudo_label_examples() {
        let y = pseudo_label(&[0.5, 0.3, 0.1, 0.1], class_set(&[0, 1]));
        assert!((y[0] - 0.6).abs() < 1e-15 && (y[1] - 0.4).abs() < 1e-15);
        assert_eq!((y[2], y[3]), (0.0, 0.0));

        let p = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(pseudo_label(&p, AdmissibleSet::ALL), p);

        assert_eq!(pseudo_label(&[0.25; 4], class_set(&[2])), [0.0, 0.0, 1.0, 0.0]);
        assert!(AdmissibleSet::from_classes(&[]).is_err());
    }

    #[test]
    fn partial_loss_gradient_example() {
        let lg = partial_loss(&logits_for([0.5, 0.3, 0.1, 0.1]), class_set(&[0, 1]));
        let expect = [-0.1, -0.1, 0.1, 0.1];
        for j in 0..4 {
            assert!((lg.grad_logits[j] - expect[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn partial_loss_full_set_is_entropy() {
        let z = [0.3, -1.2, 2.0, 0.1];
        let p = softmax(&z);
        let lg = partial_loss(&z, AdmissibleSet::ALL);
        let entropy = -p.iter().map(|q| q * q.ln()).sum::<f64>();
        assert!((lg.loss - entropy).abs() < 1e-12);
        assert!(lg.grad_logits.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn ce_loss_examples() {
        let lg = ce_loss(&[50.0, 0.0, 0.0, 0.0], Her2Class::ZERO);
        assert!(lg.loss < 1e-20);
        for t in Her2Class::ALL {
            let lg = ce_loss(&[0.7; 4], t);
            assert!((lg.loss - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let z = [0.5, -0.25, 1.75, 3.0];
        let shifted = z.map(|x| x + 123.0);
        let (a, b) = (softmax(&z), softmax(&shifted));
        for j in 0..4 {
            assert!((a[j] - b[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_zero_gradient_is_fixed_point() {
        let mut params = ClassifierParams::init(4, 0.1, 0.9, 3);
        let before = params.clone();
        sgd_step(&mut params, &Gradients::zeros(4)).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn sgd_descends_quadratic() {
        // f(b0) = (b0 - 3)^2 / 2 on the first bias entry.
        let mut params = ClassifierParams::zeros(1, 0.1, 0.9);
        let f = |b: f64| 0.5 * (b - 3.0).powi(2);
        let before = f(params.bias[0]);
        let mut g = Gradients::zeros(1);
        g.bias[0] = params.bias[0] - 3.0;
        sgd_step(&mut params, &g).unwrap();
        assert!(f(params.bias[0]) < before);
    }

    #[test]
    fn sgd_is_deterministic_and_rejects_nan() {
        let base = ClassifierParams::init(3, 0.05, 0.9, 9);
        let mut g = Gradients::zeros(3);
        g.accumulate(&[1.0, 2.0, 3.0], &[0.1, -0.2, 0.05, 0.05], 1.0);
        let (mut a, mut b) = (base.clone(), base.clone());
        sgd_step(&mut a, &g).unwrap();
        sgd_step(&mut b, &g).unwrap();
        assert_eq!(a, b);
        g.bias[1] = f64::NAN;
        assert!(matches!(sgd_step(&mut a, &g), Err(Error::NonFiniteGradient)));
    }

    #[test]
    fn params_json_roundtrip() {
        let p = ClassifierParams::init(3, 0.05, 0.9, 1);
        let s = serde_json::to_string(&p).unwrap();
        let q: ClassifierParams = serde_json::from_str(&s).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn slide_weights_normalize() {
        let patches = vec![
            Patch { id: "a".into(), features: vec![0.0], tumor_fraction: 0.3, true_class: None },
            Patch { id: "b".into(), features: vec![0.0], tumor_fraction: 0.9, true_class: None },
        ];
        let s = Slide::new("s", Her2Class::ONE, patches).unwrap();
        assert!((s.normalized_weights[0] - 0.25).abs() < 1e-15);
        assert!((s.normalized_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(Slide::new("e", Her2Class::ONE, vec![]).is_err());
    }
}
