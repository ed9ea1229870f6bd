use her2_core::evaluation::{
    fraction_kde, gaussian_kde, kde_grid, rater_agreement, silverman_bandwidth, trapezoid, Bandwidth,
};
use her2_core::guidelines::{score_fractions, ConstraintMatrices, NUM_CLASSES};
use her2_core::synth::{generate_cohort, split_cohort, CohortSpec, RaterNoise};
use her2_core::trainer::{admitted_tumor_share, filter_patches};
use her2_core::{ClassFractionVector, Her2Class, Slide};

fn true_fractions(s: &Slide) -> ClassFractionVector {
    let classes: Vec<Her2Class> = s.patches.iter().map(|p| p.true_class.unwrap()).collect();
    ClassFractionVector::from_weighted(&classes, &s.normalized_weights).unwrap()
}

#[test]
fn generated_compositions_respect_the_table() {
    let cohort = generate_cohort(&CohortSpec {
        seed: 3,
        slides_per_class: [100; 4],
        ..CohortSpec::default()
    })
    .unwrap();
    let c = ConstraintMatrices::default();
    let mut ok = 0;
    for s in &cohort.slides {
        let v = true_fractions(s);
        let verdict = score_fractions(&v, &c);
        assert_eq!(verdict.principal_score, s.label);
        assert!(!verdict.heterogeneous_flag);
        if (s.label.index() + 1..NUM_CLASSES).all(|h| v.as_array()[h] < 0.1) {
            ok += 1;
        }
        let [lo, hi] = CohortSpec::default().patches_per_slide;
        assert!((lo..=hi).contains(&s.patches.len()));
    }
    assert!(ok as f64 >= 0.99 * cohort.slides.len() as f64);
    assert!(cohort.slides.iter().filter(|s| s.label == Her2Class::THREE).all(|s| true_fractions(s).as_array()[3] >= 0.1));
}

#[test]
fn heterogeneous_rate_one_flags_every_eligible_slide() {
    let cohort = generate_cohort(&CohortSpec {
        seed: 5,
        slides_per_class: [20, 20, 0, 0],
        composition_profiles: [[8.0, 0.5, 0.5, 0.3], [2.0, 4.0, 0.5, 0.3], [1.0; 4], [1.0; 4]],
        heterogeneous_rate: 1.0,
        ..CohortSpec::default()
    })
    .unwrap();
    let c = ConstraintMatrices::default();
    for s in &cohort.slides {
        assert!(score_fractions(&true_fractions(s), &c).heterogeneous_flag, "{}", s.id);
    }
}

/// Nearest class centroid, fit on true patch classes of the even slides and
/// scored on the odd ones.
#[test]
fn separated_means_allow_an_oracle_classifier() {
    let spec = CohortSpec {
        seed: 11,
        ..CohortSpec::default()
    };
    let cohort = generate_cohort(&spec).unwrap();
    let fit: Vec<&Slide> = cohort.slides.iter().step_by(2).collect();
    let score: Vec<&Slide> = cohort.slides.iter().skip(1).step_by(2).collect();
    let d = spec.feature_dim;
    let mut sums = vec![vec![0.0; d]; NUM_CLASSES];
    let mut counts = [0usize; NUM_CLASSES];
    for p in fit.iter().flat_map(|s| &s.patches) {
        let c = p.true_class.unwrap().index();
        counts[c] += 1;
        for (a, x) in sums[c].iter_mut().zip(&p.features) {
            *a += x;
        }
    }
    let centroids: Vec<Vec<f64>> = sums
        .iter()
        .zip(counts)
        .map(|(s, n)| s.iter().map(|x| x / n.max(1) as f64).collect())
        .collect();
    let (mut hit, mut total) = (0, 0);
    for p in score.iter().flat_map(|s| &s.patches) {
        let dist = |c: &Vec<f64>| c.iter().zip(&p.features).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let best = (0..NUM_CLASSES).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
        hit += usize::from(best == p.true_class.unwrap().index());
        total += 1;
    }
    let acc = hit as f64 / total as f64;
    assert!(acc >= 0.99, "oracle accuracy {acc}");
}

#[test]
fn admission_keeps_most_tumor_weight() {
    let wide = CohortSpec {
        seed: 2,
        tumor_fraction_range: [0.01, 1.0],
        ..CohortSpec::default()
    };
    for spec in [CohortSpec::default(), wide] {
        let cohort = generate_cohort(&spec).unwrap();
        assert!(admitted_tumor_share(&cohort.slides, 0.1) >= 0.9);
        let kept = filter_patches(&cohort.slides, 0.1).unwrap();
        assert!(kept.iter().flat_map(|s| &s.patches).all(|p| p.tumor_fraction > 0.1));
    }
}

#[test]
fn generation_is_reproducible_and_seed_sensitive() {
    let spec = CohortSpec {
        seed: 9,
        slides_per_class: [5; 4],
        ..CohortSpec::default()
    };
    let a = generate_cohort(&spec).unwrap();
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap()
        .install(|| generate_cohort(&spec).unwrap());
    assert_eq!(a, b);
    let c = generate_cohort(&CohortSpec { seed: 10, ..spec }).unwrap();
    assert_ne!(a.slides, c.slides);
}

#[test]
fn split_is_stratified_and_disjoint() {
    let cohort = generate_cohort(&CohortSpec {
        seed: 4,
        ..CohortSpec::default()
    })
    .unwrap();
    let split = split_cohort(&cohort.slides, [0.8, 0.1, 0.1], 4).unwrap();
    for c in Her2Class::ALL {
        let count = |v: &[Slide]| v.iter().filter(|s| s.label == c).count();
        assert_eq!((count(&split.train), count(&split.validation), count(&split.test)), (40, 5, 5));
    }
    let mut ids: Vec<&str> = [&split.train, &split.validation, &split.test]
        .iter()
        .flat_map(|v| v.iter().map(|s| s.id.as_str()))
        .collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 200);
}

#[test]
fn kde_mass_is_near_one_for_interior_samples() {
    let samples: Vec<f64> = (0..50).map(|i| 0.3 + 0.4 * i as f64 / 49.0).collect();
    let grid = kde_grid();
    let h = silverman_bandwidth(&samples);
    let mass = trapezoid(&grid, &gaussian_kde(&samples, h, &grid));
    assert!((mass - 1.0).abs() < 0.02, "{mass}");
}

#[test]
fn kde_of_higher_classes_sits_below_ten_percent() {
    let cohort = generate_cohort(&CohortSpec {
        seed: 8,
        slides_per_class: [100; 4],
        ..CohortSpec::default()
    })
    .unwrap();
    let pairs: Vec<(Her2Class, ClassFractionVector)> =
        cohort.slides.iter().map(|s| (s.label, true_fractions(s))).collect();
    let cells = fraction_kde(&pairs, Bandwidth::Silverman).unwrap();
    assert_eq!(cells.len(), 16);
    let grid = kde_grid();
    for cell in cells.iter().filter(|c| c.patch_class > c.slide_class) {
        let total = trapezoid(&grid, &cell.density);
        let below = trapezoid(&grid[..11], &cell.density[..11]);
        assert!(below / total >= 0.98, "cell {}/{}: {}", cell.slide_class, cell.patch_class, below / total);
    }
}

#[test]
fn rater_discordance_matches_the_noise_matrix_on_average() {
    let mut measured = Vec::new();
    for seed in 0..20 {
        let cohort = generate_cohort(&CohortSpec {
            seed,
            slides_per_class: [125; 4],
            patches_per_slide: [5, 10],
            rater_noise: Some(RaterNoise::adjacent(0.3)),
            ..CohortSpec::default()
        })
        .unwrap();
        let pairs = rater_agreement(&cohort.rater_labels).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].slides, 500);
        measured.push(pairs[0].discordance());
    }
    let mean = measured.iter().sum::<f64>() / measured.len() as f64;
    assert!((mean - 0.3).abs() < 0.01, "{mean}");
}
