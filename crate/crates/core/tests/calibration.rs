use her2_core::calibrate::{
    apply_calibration, calibration_objective, optimize_alpha, CalibrationMode, CalibrationOptions, CalibrationVector,
    LogitsMatrix,
};
use her2_core::guidelines::{score_fractions, ConstraintMatrices};
use her2_core::io::{LogitRecord, SCHEMA_VERSION};
use her2_core::model::Logits;
use her2_core::synth::{generate_cohort, CohortSpec};
use her2_core::trainer::{filter_patches, infer, pretrain, slide_fractions, TrainConfig};
use her2_core::{ClassifierParams, Her2Class};

/// Class-1 slides where a fifth of the tumor is narrowly called 2+.
fn overcall_fixture() -> LogitsMatrix {
    let mut recs = Vec::new();
    let mut push = |slide: usize, label: u8, rows: &[(Logits, f64)]| {
        for (p, (z, w)) in rows.iter().enumerate() {
            recs.push(LogitRecord {
                schema_version: SCHEMA_VERSION,
                slide: format!("s{slide}"),
                patch: format!("s{slide}-p{p}"),
                logits: *z,
                weight: *w,
                label: Her2Class::new(label).unwrap(),
            });
        }
    };
    for s in 0..6 {
        push(
            s,
            1,
            &[
                ([2.0, 0.0, 0.0, 0.0], 0.6),
                ([0.0, 1.0, 0.8, 0.0], 0.2),
                ([0.0, 0.9, 1.0 + 0.01 * s as f64, 0.0], 0.2),
            ],
        );
    }
    for s in 6..9 {
        push(s, 2, &[([1.0, 0.0, 0.0, 0.0], 0.5), ([0.0, 0.0, 2.0, 0.0], 0.5)]);
    }
    LogitsMatrix::from_records(&recs).unwrap()
}

#[test]
fn overcall_fixture_is_corrected() {
    let m = overcall_fixture();
    let c = ConstraintMatrices::default();
    for mode in [CalibrationMode::Simplex, CalibrationMode::Smoothed] {
        let opts = CalibrationOptions {
            mode,
            ..CalibrationOptions::default()
        };
        let r = optimize_alpha(&m, &m.labels, &c, &opts).unwrap();
        assert!(r.objective_after < r.objective_before, "{mode:?}: {r:?}");
        let before = apply_calibration(&m, &CalibrationVector::default()).unwrap();
        let after = apply_calibration(&m, &CalibrationVector { alpha: r.alpha }).unwrap();
        let fixed = before
            .fractions
            .iter()
            .zip(&after.fractions)
            .zip(&m.labels)
            .filter(|((b, a), y)| score_fractions(b, &c).principal_score != **y && score_fractions(a, &c).principal_score == **y)
            .count();
        assert!(fixed >= 1, "{mode:?}");
    }
}

#[test]
fn calibration_is_never_worse_than_identity() {
    let c = ConstraintMatrices::default();
    for seed in 0..20 {
        let cohort = generate_cohort(&CohortSpec {
            seed,
            slides_per_class: [6; 4],
            ..CohortSpec::default()
        })
        .unwrap();
        let slides = filter_patches(&cohort.slides, 0.1).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 0.01,
            batch_size: Some(64),
            seed,
            ..TrainConfig::default()
        };
        let params = pretrain(&slides, &[], ClassifierParams::init(8, 0.01, 0.9, seed), &cfg).unwrap().params;
        let m = LogitsMatrix::from_model(&params, &slides).unwrap();
        for positive in [false, true] {
            let opts = CalibrationOptions {
                positive,
                ..CalibrationOptions::default()
            };
            let r = optimize_alpha(&m, &m.labels, &c, &opts).unwrap();
            let identity = calibration_objective(&m, &CalibrationVector::default(), &m.labels, &c).unwrap();
            let found = calibration_objective(&m, &CalibrationVector { alpha: r.alpha }, &m.labels, &c).unwrap();
            assert_eq!(r.objective_before, identity);
            assert_eq!(r.objective_after, found);
            assert!(found <= identity, "seed {seed}");
        }
    }
}

#[test]
fn identity_reproduces_frozen_predictions_bit_exactly() {
    let cohort = generate_cohort(&CohortSpec {
        seed: 21,
        slides_per_class: [5; 4],
        ..CohortSpec::default()
    })
    .unwrap();
    let slides = cohort.slides;
    let params = ClassifierParams::init(8, 0.01, 0.9, 21);
    let preds = infer(&slides, &params).unwrap();
    let frozen = slide_fractions(&slides, &preds).unwrap();
    let m = LogitsMatrix::from_model(&params, &slides).unwrap();
    let cal = apply_calibration(&m, &CalibrationVector::default()).unwrap();
    let classes: Vec<Her2Class> = preds.iter().flat_map(|p| p.classes.clone()).collect();
    assert_eq!(cal.classes, classes);
    for (a, b) in cal.fractions.iter().zip(&frozen) {
        assert_eq!(a.as_array().map(f64::to_bits), b.as_array().map(f64::to_bits));
    }
    let back = LogitsMatrix::from_records(&m.to_records()).unwrap();
    assert_eq!(back.rows, m.rows);
    assert_eq!(back.weights, m.weights);
}
