//! Guideline rule engine: threshold matrices, Table-style slide scoring and
//! per-label constraint checks over tumor-surface class fractions.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of HER2 classes (0, 1+, 2+, 3+).
pub const NUM_CLASSES: usize = 4;

/// Sum tolerance for a fraction vector.
pub const FRACTION_TOLERANCE: f64 = 1e-9;

/// A HER2 score in `0..=3`, used both for slide scores and patch classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "u8")]
pub struct Her2Class(u8);

impl Her2Class {
    pub const ZERO: Her2Class = Her2Class(0);
    pub const ONE: Her2Class = Her2Class(1);
    pub const TWO: Her2Class = Her2Class(2);
    pub const THREE: Her2Class = Her2Class(3);
    pub const ALL: [Her2Class; NUM_CLASSES] = [Self::ZERO, Self::ONE, Self::TWO, Self::THREE];

    pub fn new(value: u8) -> Result<Self> {
        if (value as usize) < NUM_CLASSES {
            Ok(Her2Class(value))
        } else {
            Err(Error::InvalidClass(value as i64))
        }
    }

    /// Panics if `index >= 4`; use for loop indices already bounded by `NUM_CLASSES`.
    pub fn from_index(index: usize) -> Self {
        assert!(index < NUM_CLASSES, "class index {index} out of range");
        Her2Class(index as u8)
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    #[inline]
    pub fn value(self) -> u8 {
        self.0
    }
}

impl TryFrom<i64> for Her2Class {
    type Error = Error;

    fn try_from(value: i64) -> Result<Self> {
        if (0..NUM_CLASSES as i64).contains(&value) {
            Ok(Her2Class(value as u8))
        } else {
            Err(Error::InvalidClass(value))
        }
    }
}

impl From<Her2Class> for u8 {
    fn from(c: Her2Class) -> u8 {
        c.0
    }
}

impl fmt::Display for Her2Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            0 => write!(f, "0"),
            n => write!(f, "{n}+"),
        }
    }
}

/// Per-slide share of tumor surface predicted (or observed) in each class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(into = "[f64; 4]")]
pub struct ClassFractionVector([f64; NUM_CLASSES]);

impl ClassFractionVector {
    /// Validates range and unit sum. Components within `FRACTION_TOLERANCE`
    /// below zero are clamped to zero first.
    pub fn new(values: [f64; NUM_CLASSES]) -> Result<Self> {
        let mut v = values;
        for x in v.iter_mut() {
            if !x.is_finite() {
                return Err(Error::InvalidFractions(format!("non-finite component in {values:?}")));
            }
            if *x < 0.0 && *x >= -FRACTION_TOLERANCE {
                *x = 0.0;
            }
            if *x < 0.0 || *x > 1.0 + FRACTION_TOLERANCE {
                return Err(Error::InvalidFractions(format!("component out of [0,1] in {values:?}")));
            }
        }
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > FRACTION_TOLERANCE {
            return Err(Error::InvalidFractions(format!("components sum to {sum}, not 1")));
        }
        Ok(ClassFractionVector(v))
    }

    /// Weighted class shares: `weights[i]` is attributed to `classes[i]`,
    /// then divided by the total weight.
    pub fn from_weighted(classes: &[Her2Class], weights: &[f64]) -> Result<Self> {
        if classes.len() != weights.len() {
            return Err(Error::LengthMismatch {
                what: "predictions vs patch weights",
                left: classes.len(),
                right: weights.len(),
            });
        }
        let mut v = [0.0; NUM_CLASSES];
        let mut total = 0.0;
        for (c, w) in classes.iter().zip(weights) {
            v[c.index()] += w;
            total += w;
        }
        if !(total > 0.0) {
            return Err(Error::InvalidFractions("total weight is zero".into()));
        }
        for x in v.iter_mut() {
            *x /= total;
        }
        Self::new(v)
    }

    #[inline]
    pub fn get(&self, class: Her2Class) -> f64 {
        self.0[class.index()]
    }

    pub fn as_array(&self) -> &[f64; NUM_CLASSES] {
        &self.0
    }
}

impl From<ClassFractionVector> for [f64; 4] {
    fn from(v: ClassFractionVector) -> Self {
        v.0
    }
}

impl<'de> Deserialize<'de> for ClassFractionVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = <[f64; NUM_CLASSES]>::deserialize(d)?;
        ClassFractionVector::new(raw).map_err(serde::de::Error::custom)
    }
}

/// Lower (`L`) and upper (`U`) threshold matrices, indexed `[slide label][class]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintMatrices {
    pub lower: [[f64; NUM_CLASSES]; NUM_CLASSES],
    pub upper: [[f64; NUM_CLASSES]; NUM_CLASSES],
}

impl Default for ConstraintMatrices {
    fn default() -> Self {
        let mut lower = [[0.0; NUM_CLASSES]; NUM_CLASSES];
        let mut upper = [[0.0; NUM_CLASSES]; NUM_CLASSES];
        lower[0][0] = 0.7;
        for r in 1..NUM_CLASSES {
            lower[r][r] = 0.1;
        }
        for (r, row) in upper.iter_mut().enumerate() {
            for x in row.iter_mut().skip(r + 1) {
                *x = 0.1;
            }
        }
        ConstraintMatrices { lower, upper }
    }
}

impl ConstraintMatrices {
    pub fn validate(&self) -> Result<()> {
        let ok = self
            .lower
            .iter()
            .chain(self.upper.iter())
            .flatten()
            .all(|x| (0.0..=1.0).contains(x));
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("constraint matrix entries must lie in [0,1]".into()))
        }
    }

    #[inline]
    pub fn lower_bound(&self, label: Her2Class) -> f64 {
        self.lower[label.index()][label.index()]
    }

    #[inline]
    pub fn upper_bound(&self, label: Her2Class, class: Her2Class) -> f64 {
        self.upper[label.index()][class.index()]
    }
}

pub fn default_constraints() -> ConstraintMatrices {
    ConstraintMatrices::default()
}

/// Slide-level verdict with the heterogeneous-slide recommendation kept
/// separate from the principal score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidelineVerdict {
    #[serde(rename = "principal")]
    pub principal_score: Her2Class,
    #[serde(rename = "heterogeneous")]
    pub heterogeneous_flag: bool,
    #[serde(rename = "recommended")]
    pub recommended_score: Her2Class,
    pub fractions: ClassFractionVector,
}

/// Principal score: the highest class above 0 whose fraction reaches its
/// lower threshold, else 0. Flags slides carrying a nonzero sub-threshold
/// fraction two or more classes above the principal score.
pub fn score_fractions(v: &ClassFractionVector, c: &ConstraintMatrices) -> GuidelineVerdict {
    let principal = (1..NUM_CLASSES)
        .rev()
        .map(Her2Class::from_index)
        .find(|&k| v.get(k) >= c.lower_bound(k))
        .unwrap_or(Her2Class::ZERO);

    let hetero_max = ((principal.index() + 2)..NUM_CLASSES)
        .rev()
        .map(Her2Class::from_index)
        .find(|&h| {
            let x = v.get(h);
            x > 0.0 && x < c.upper_bound(principal, h)
        });

    let (heterogeneous_flag, recommended_score) = match hetero_max {
        Some(h) => (true, Her2Class::from_index(h.index() - 1)),
        None => (false, principal),
    };

    GuidelineVerdict {
        principal_score: principal,
        heterogeneous_flag,
        recommended_score,
        fractions: *v,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Violation {
    /// `V_c >= U[Y][c]` for some `c > Y`.
    Upper { class: Her2Class, excess: f64 },
    /// `V_Y < L[Y][Y]`.
    Lower { deficit: f64 },
}

/// Upper violations in ascending class order, then the lower violation if any.
pub fn broken_constraints(
    v: &ClassFractionVector,
    label: Her2Class,
    c: &ConstraintMatrices,
) -> Vec<Violation> {
    let mut out = Vec::new();
    for k in (label.index() + 1)..NUM_CLASSES {
        let class = Her2Class::from_index(k);
        let bound = c.upper_bound(label, class);
        if bound > 0.0 && v.get(class) >= bound {
            out.push(Violation::Upper {
                class,
                excess: v.get(class) - bound,
            });
        }
    }
    let lower = c.lower_bound(label);
    if v.get(label) < lower {
        out.push(Violation::Lower {
            deficit: lower - v.get(label),
        });
    }
    out
}

/// Hinge distance of a fraction vector to the thresholds for `label`.
pub fn hinge_distance(v: &ClassFractionVector, label: Her2Class, c: &ConstraintMatrices) -> f64 {
    let mut j = (c.lower_bound(label) - v.get(label)).max(0.0);
    for k in (label.index() + 1)..NUM_CLASSES {
        let class = Her2Class::from_index(k);
        j += (v.get(class) - c.upper_bound(label, class)).max(0.0);
    }
    j
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: [f64; 4]) -> ClassFractionVector {
        ClassFractionVector::new(x).unwrap()
    }

    #[test]
    fn default_matrices() {
        let c = default_constraints();
        assert_eq!(c.lower[0][0], 0.7);
        assert_eq!(c.lower[1][1], 0.1);
        assert_eq!(c.lower[2][2], 0.1);
        assert_eq!(c.lower[3][3], 0.1);
        assert_eq!(c.lower[2][3], 0.0);
        assert_eq!(c.upper[0][3], 0.1);
        assert_eq!(c.upper[3], [0.0; 4]);
        for r in 0..4 {
            for k in 0..4 {
                let expect = if k > r { 0.1 } else { 0.0 };
                assert_eq!(c.upper[r][k], expect);
                if r != k {
                    assert_eq!(c.lower[r][k], 0.0);
                }
            }
        }
    }

    #[test]
    fn worked_example_scores_two() {
        let verdict = score_fractions(&v([0.50, 0.36, 0.14, 0.0]), &default_constraints());
        assert_eq!(verdict.principal_score, Her2Class::TWO);
        assert!(!verdict.heterogeneous_flag);
    }

    #[test]
    fn heterogeneous_example() {
        let verdict = score_fractions(&v([0.82, 0.09, 0.09, 0.0]), &default_constraints());
        assert_eq!(verdict.principal_score, Her2Class::ZERO);
        assert!(verdict.heterogeneous_flag);
        assert_eq!(verdict.recommended_score, Her2Class::ONE);
    }

    #[test]
    fn pure_slides() {
        let c = default_constraints();
        let a = score_fractions(&v([1.0, 0.0, 0.0, 0.0]), &c);
        assert_eq!((a.principal_score, a.heterogeneous_flag), (Her2Class::ZERO, false));
        let b = score_fractions(&v([0.0, 0.0, 0.0, 1.0]), &c);
        assert_eq!((b.principal_score, b.heterogeneous_flag), (Her2Class::THREE, false));
    }

    #[test]
    fn small_three_plus_fraction_recommends_two() {
        let c = default_constraints();
        let a = score_fractions(&v([0.5, 0.45, 0.0, 0.05]), &c);
        assert_eq!(a.principal_score, Her2Class::ONE);
        assert!(a.heterogeneous_flag);
        assert_eq!(a.recommended_score, Her2Class::TWO);
        // h = 3 from principal 0: the largest qualifying class wins.
        let b = score_fractions(&v([0.86, 0.0, 0.09, 0.05]), &c);
        assert_eq!(b.recommended_score, Her2Class::TWO);
    }

    #[test]
    fn boundary_at_ten_percent() {
        let c = default_constraints();
        let x = v([0.9, 0.1, 0.0, 0.0]);
        assert_eq!(score_fractions(&x, &c).principal_score, Her2Class::ONE);
        let broken = broken_constraints(&x, Her2Class::ZERO, &c);
        assert!(matches!(broken[0], Violation::Upper { class, excess } if class == Her2Class::ONE && excess == 0.0));
    }

    #[test]
    fn worked_example_violation() {
        let out = broken_constraints(&v([0.50, 0.36, 0.14, 0.0]), Her2Class::ONE, &default_constraints());
        assert_eq!(out.len(), 1);
        match out[0] {
            Violation::Upper { class, excess } => {
                assert_eq!(class, Her2Class::TWO);
                assert!((excess - 0.04).abs() < 1e-12);
            }
            _ => panic!("expected upper violation"),
        }
    }

    #[test]
    fn consistent_one_plus() {
        let out = broken_constraints(&v([0.8, 0.1, 0.05, 0.05]), Her2Class::ONE, &default_constraints());
        assert!(out.is_empty());
        let out = broken_constraints(&v([1.0, 0.0, 0.0, 0.0]), Her2Class::ZERO, &default_constraints());
        assert!(out.is_empty());
    }

    #[test]
    fn both_violations() {
        let out = broken_constraints(&v([0.0, 1.0, 0.0, 0.0]), Her2Class::ZERO, &default_constraints());
        assert_eq!(out.len(), 2);
        assert!(matches!(out[0], Violation::Upper { class, excess } if class == Her2Class::ONE && (excess - 0.9).abs() < 1e-12));
        assert!(matches!(out[1], Violation::Lower { deficit } if (deficit - 0.7).abs() < 1e-12));
    }

    #[test]
    fn fraction_validation() {
        assert!(ClassFractionVector::new([0.5, 0.5, 0.1, 0.0]).is_err());
        assert!(ClassFractionVector::new([1.2, -0.2, 0.0, 0.0]).is_err());
        assert!(ClassFractionVector::new([f64::NAN, 0.0, 0.0, 1.0]).is_err());
        let clamped = ClassFractionVector::new([1.0, -1e-12, 0.0, 0.0]).unwrap();
        assert_eq!(clamped.get(Her2Class::ONE), 0.0);
    }

    #[test]
    fn class_parsing() {
        assert!(Her2Class::new(4).is_err());
        assert!(serde_json::from_str::<Her2Class>("-1").is_err());
        assert_eq!(serde_json::from_str::<Her2Class>("3").unwrap(), Her2Class::THREE);
        assert_eq!(Her2Class::TWO.to_string(), "2+");
    }

    #[test]
    fn verdict_json_shape() {
        let verdict = score_fractions(&v([0.82, 0.09, 0.09, 0.0]), &default_constraints());
        let json = serde_json::to_value(verdict).unwrap();
        assert_eq!(
            json,
            serde_json::json!({
                "principal": 0,
                "heterogeneous": true,
                "recommended": 1,
                "fractions": [0.82, 0.09, 0.09, 0.0]
            })
        );
    }

    #[test]
    fn hinge_matches_worked_example() {
        let c = default_constraints();
        assert!((hinge_distance(&v([0.50, 0.36, 0.14, 0.0]), Her2Class::ONE, &c) - 0.04).abs() < 1e-12);
        assert!((hinge_distance(&v([0.0, 1.0, 0.0, 0.0]), Her2Class::ZERO, &c) - 1.6).abs() < 1e-12);
    }
}
