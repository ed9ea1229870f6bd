use her2_core::guidelines::NUM_CLASSES;
use her2_core::model::{ce_loss, partial_loss, pseudo_label, softmax, AdmissibleSet, Logits};
use her2_core::Her2Class;
use proptest::prelude::*;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn log_softmax(z: &Logits) -> Logits {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.map(|v| v - lse)
}

/// Cross-entropy against a fixed soft target.
fn soft_ce(z: &Logits, target: &Logits) -> f64 {
    let lp = log_softmax(z);
    -(0..NUM_CLASSES).map(|j| target[j] * lp[j]).sum::<f64>()
}

fn central_diff(f: impl Fn(&Logits) -> f64, z: &Logits) -> Logits {
    let mut g = [0.0; NUM_CLASSES];
    for i in 0..NUM_CLASSES {
        let (mut hi, mut lo) = (*z, *z);
        hi[i] += STEP;
        lo[i] -= STEP;
        g[i] = (f(&hi) - f(&lo)) / (2.0 * STEP);
    }
    g
}

/// Redistribution written out per class, independent of the library.
fn pseudo_oracle(p: &Logits, mask: u8) -> Logits {
    let inside: Vec<usize> = (0..NUM_CLASSES).filter(|k| mask >> k & 1 == 1).collect();
    let outside: f64 = (0..NUM_CLASSES).filter(|k| mask >> k & 1 == 0).map(|k| p[k]).sum();
    let mut y = [0.0; NUM_CLASSES];
    for &j in &inside {
        y[j] = p[j] + outside / inside.len() as f64;
    }
    y
}

fn logits() -> impl Strategy<Value = Logits> {
    prop::array::uniform4(-6.0f64..6.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn partial_gradient_matches_finite_differences(z in logits(), mask in 1u8..16) {
        let g = AdmissibleSet::from_mask(mask).unwrap();
        let target = pseudo_oracle(&softmax(&z), mask);
        let lg = partial_loss(&z, g);
        prop_assert!((lg.loss - soft_ce(&z, &target)).abs() < 1e-12);
        let fd = central_diff(|x| soft_ce(x, &target), &z);
        for i in 0..NUM_CLASSES {
            prop_assert!((lg.grad_logits[i] - fd[i]).abs() < TOL, "{i}: {} vs {}", lg.grad_logits[i], fd[i]);
        }
    }

    #[test]
    fn ce_gradient_matches_finite_differences(z in logits(), t in 0usize..4) {
        let lg = ce_loss(&z, Her2Class::from_index(t));
        let fd = central_diff(|x| -log_softmax(x)[t], &z);
        for i in 0..NUM_CLASSES {
            prop_assert!((lg.grad_logits[i] - fd[i]).abs() < TOL);
        }
    }

    #[test]
    fn pseudo_label_support_mass_and_neutrality(z in logits(), mask in 1u8..16) {
        let p = softmax(&z);
        let g = AdmissibleSet::from_mask(mask).unwrap();
        let y = pseudo_label(&p, g);
        let oracle = pseudo_oracle(&p, mask);
        for k in 0..NUM_CLASSES {
            if !g.contains(k) {
                prop_assert_eq!(y[k], 0.0);
            }
            prop_assert!((y[k] - oracle[k]).abs() < 1e-15);
        }
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let grad = partial_loss(&z, g).grad_logits;
        let inside: Vec<f64> = (0..NUM_CLASSES).filter(|&k| g.contains(k)).map(|k| grad[k]).collect();
        let spread = inside.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - inside.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!(spread < 1e-12);
    }

    #[test]
    fn full_admissible_set_gives_zero_gradient(z in logits()) {
        let lg = partial_loss(&z, AdmissibleSet::ALL);
        let ent = soft_ce(&z, &softmax(&z));
        prop_assert!((lg.loss - ent).abs() < 1e-12);
        prop_assert!(lg.grad_logits.iter().all(|g| g.abs() < 1e-15));
    }
}
