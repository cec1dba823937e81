use nalgebra::DMatrix;
use rand::Rng;

use super::*;
use crate::dataset::{split_folds, split_subjects};
use crate::learners::LearnerKind;
use crate::numeric::{mean, rng_from};
use crate::simulation::AnalyticDgp;

fn linear_config(seed: u64) -> NuisanceConfig {
    NuisanceConfig {
        ps_grids: vec![vec![LearnerSpec::new(LearnerKind::Logistic)]],
        outcome_grids: vec![vec![LearnerSpec::new(LearnerKind::Linear)]],
        seed,
        ..NuisanceConfig::default()
    }
}

fn randomized(n: usize, seed: u64) -> LongitudinalDataset {
    let mut rng = rng_from(seed, &[]);
    let mut a = vec![vec![0u8; n]; 2];
    let mut z = vec![DMatrix::zeros(n, 3), DMatrix::zeros(n, 3)];
    let mut y = vec![DMatrix::zeros(n, 1), DMatrix::zeros(n, 1)];
    for i in 0..n {
        for t in 0..2 {
            a[t][i] = rng.gen_bool(0.5) as u8;
            for k in 0..3 {
                z[t][(i, k)] = rng.gen_range(-1.0..1.0);
            }
            y[t][(i, 0)] = z[t][(i, 0)] + rng.gen_range(-1.0..1.0);
        }
    }
    LongitudinalDataset::new(a, z, y, None).unwrap()
}

#[test]
fn trimming_clamps_observed_arm() {
    assert_eq!(observed_arm_probability(0.995, 1, DEFAULT_TRIM), 0.99);
    assert_eq!(observed_arm_probability(0.995, 0, DEFAULT_TRIM), 0.01);
    assert_eq!(observed_arm_probability(0.3, 0, DEFAULT_TRIM), 0.7);
    assert_eq!(observed_arm_probability(0.3, 1, DEFAULT_TRIM), 0.3);
    assert_eq!(observed_arm_probability(0.0, 1, DEFAULT_TRIM), 0.01);
}

#[test]
fn cumulative_weights_multiply_inverse_probabilities() {
    let observed = vec![vec![0.5, 0.01], vec![0.5, 0.5]];
    assert_eq!(cumulative_weights_from(&observed, 1).unwrap(), vec![2.0, 100.0]);
    assert_eq!(cumulative_weights_from(&observed, 2).unwrap(), vec![4.0, 200.0]);
    assert!(cumulative_weights_from(&observed, 3).is_err());
    assert!(cumulative_weights_from(&observed, 0).is_err());
}

#[test]
fn fitted_shapes_and_cross_fitting() {
    let ds = randomized(200, 1);
    let folds = split_folds(&ds, 3).unwrap();
    let cfg = linear_config(5);
    let pf = fit_propensity(&ds, &folds, &cfg).unwrap();
    let ice = fit_ice(&ds, &folds, &cfg, 1).unwrap();
    assert_eq!(pf.raw.len(), 2);
    assert_eq!(ice.eta[0].len(), 4);
    assert_eq!(ice.eta[1].len(), 2);
    assert_eq!(ice.stacks[0].len(), 2);
    assert_eq!(ice.stacks[1].len(), 1);
    assert!(pf.provenance.is_cross_fitted(&folds));
    for p in pf.observed.iter().flatten() {
        assert!((0.01..=0.99).contains(p));
    }
    for t in 0..2 {
        for (i, &a) in ds.exposure(t + 1).iter().enumerate() {
            assert_eq!(pf.observed[t][i], observed_arm_probability(pf.raw[t][i], a, cfg.trim));
        }
    }
    // Stack trained on fold A never saw fold A rows.
    let s = &pf.stacks[0].a_trains;
    assert!(s.meta_rows.iter().all(|i| folds.fold_b.contains(i)));
    assert!(s.train_rows.iter().all(|i| folds.fold_a.contains(i)));
    let nv = NuisanceValues::from_fits(&pf, &ice).unwrap();
    assert_eq!(nv.n_subjects(), 200);
}

#[test]
fn mismatched_fold_splits_are_rejected() {
    let ds = randomized(120, 2);
    let cfg = linear_config(1);
    let pf = fit_propensity(&ds, &split_folds(&ds, 1).unwrap(), &cfg).unwrap();
    let ice = fit_ice(&ds, &split_folds(&ds, 2).unwrap(), &cfg, 1).unwrap();
    assert!(matches!(NuisanceValues::from_fits(&pf, &ice), Err(Error::Validation(_))));
}

#[test]
fn bad_inputs_are_rejected() {
    let ds = randomized(60, 3);
    let folds = split_folds(&ds, 1).unwrap();
    let cfg = linear_config(1);
    assert!(fit_ice(&ds, &folds, &cfg, 2).is_err());
    assert!(fit_ice(&ds, &folds, &cfg, 0).is_err());
    let other = split_subjects(61, 1).unwrap();
    assert!(fit_propensity(&ds, &other, &cfg).is_err());
    let bad_trim = NuisanceConfig {
        trim: (0.5, 0.4),
        ..linear_config(1)
    };
    assert!(fit_propensity(&ds, &folds, &bad_trim).is_err());
}

#[test]
fn randomized_exposure_is_calibrated_near_half() {
    let ds = randomized(2000, 4);
    let folds = split_folds(&ds, 4).unwrap();
    let cfg = NuisanceConfig {
        ps_grids: NuisanceConfig::default().ps_grids.into_iter().take(2).collect(),
        ..linear_config(9)
    };
    let pf = fit_propensity(&ds, &folds, &cfg).unwrap();
    for t in 0..2 {
        let dev: Vec<f64> = pf.raw[t].iter().map(|p| (p - 0.5).abs()).collect();
        assert!(mean(&dev) < 0.05, "t={} mean deviation {}", t + 1, mean(&dev));
        assert_eq!(pf.trim_hits[t], 0);
    }
}

#[test]
fn linear_ice_recovers_known_conditional_means() {
    let sample = AnalyticDgp::default().sample(4000, 7).unwrap();
    let folds = split_folds(&sample.dataset, 8).unwrap();
    let ice = fit_ice(&sample.dataset, &folds, &linear_config(3), 1).unwrap();
    for t in 0..2 {
        for (est, truth) in ice.eta[t].iter().zip(&sample.truth.eta[t]) {
            let err: Vec<f64> = est.iter().zip(truth).map(|(a, b)| (a - b).abs()).collect();
            assert!(mean(&err) < 0.1, "step {} MAE {}", t + 1, mean(&err));
        }
    }
}

#[test]
fn null_effect_columns_agree() {
    let dgp = AnalyticDgp {
        b1: 0.0,
        b2: 0.0,
        c: 0.0,
        ..AnalyticDgp::default()
    };
    let sample = dgp.sample(2000, 9).unwrap();
    let folds = split_folds(&sample.dataset, 1).unwrap();
    let ice = fit_ice(&sample.dataset, &folds, &linear_config(2), 1).unwrap();
    for cols in &ice.eta {
        for c in &cols[1..] {
            let gap: Vec<f64> = c.iter().zip(&cols[0]).map(|(a, b)| (a - b).abs()).collect();
            assert!(mean(&gap) < 0.1);
        }
    }
}

#[test]
fn diagnostics_have_one_column_per_quantity() {
    let ds = randomized(40, 5);
    let folds = split_folds(&ds, 1).unwrap();
    let cfg = linear_config(1);
    let pf = fit_propensity(&ds, &folds, &cfg).unwrap();
    let ice = fit_ice(&ds, &folds, &cfg, 1).unwrap();
    let mut buf = Vec::new();
    write_diagnostics(&ds, &folds, &pf, &ice, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 2 + 3 * 2 + 4 + 2);
    assert_eq!(header[8], "eta_1_00");
    assert_eq!(header[11], "eta_1_11");
    assert_eq!(lines.count(), 40);
}
