//! Seeded statistical regression tests on the closed-form DGP.

use longicausal::estimator::{compute_score_variant, solve_linear, LinearMsm, ScoreVariant};
use longicausal::learners::{LearnerKind, LearnerSpec};
use longicausal::mase::{run_mase, MaseConfig};
use longicausal::nuisance::NuisanceValues;
use longicausal::simulation::{AnalyticDgp, AnalyticSample};

const SIZES: [usize; 3] = [1000, 4000, 16000];
const SEEDS: u64 = 6;

fn ate_with(s: &AnalyticSample, nuis: &NuisanceValues, variant: ScoreVariant) -> f64 {
    let msm = LinearMsm::new(2);
    let scores = compute_score_variant(&s.dataset, 1, nuis, &msm, &[0.0; 3], variant).unwrap();
    solve_linear(&scores, &msm).unwrap().ate
}

/// ICE columns shifted by 0.5 per exposed timepoint (observed past plus
/// the suffix), so an outcome-only estimator is off by 1 in the ATE.
fn wrong_eta(s: &AnalyticSample) -> NuisanceValues {
    let mut v = s.truth.clone();
    let a1 = s.dataset.exposure(1);
    for (r, col) in v.eta[0].iter_mut().enumerate() {
        col.iter_mut().for_each(|y| *y += 0.5 * (r as u32).count_ones() as f64);
    }
    for (r, col) in v.eta[1].iter_mut().enumerate() {
        for (i, y) in col.iter_mut().enumerate() {
            *y += 0.5 * (a1[i] as usize + r) as f64;
        }
    }
    v
}

fn wrong_ps(truth: &NuisanceValues) -> NuisanceValues {
    let mut v = truth.clone();
    v.observed_arm.iter_mut().flatten().for_each(|p| *p = 0.5);
    v
}

/// Mean absolute ATE error over seeds, per sample size.
fn error_curve(f: impl Fn(&AnalyticSample) -> f64) -> Vec<f64> {
    let dgp = AnalyticDgp::default();
    let ate = dgp.b1 + 0.3 * dgp.c + dgp.b2;
    SIZES
        .iter()
        .map(|&n| {
            (0..SEEDS)
                .map(|seed| (f(&dgp.sample(n, 1000 + seed).unwrap()) - ate).abs())
                .sum::<f64>()
                / SEEDS as f64
        })
        .collect()
}

#[test]
fn misspecified_outcome_is_rescued_by_the_true_propensity() {
    let dr = error_curve(|s| ate_with(s, &wrong_eta(s), ScoreVariant::Full));
    let plugin = error_curve(|s| {
        // The ICE plug-in solves S0 alone.
        let msm = LinearMsm::new(2);
        let mut scores =
            compute_score_variant(&s.dataset, 1, &wrong_eta(s), &msm, &[0.0; 3], ScoreVariant::Full).unwrap();
        scores.psi = scores.s0.clone();
        solve_linear(&scores, &msm).unwrap().ate
    });
    println!("dr {dr:?} plugin {plugin:?}");
    assert!(dr[2] < dr[0] && dr[2] < 0.1, "{dr:?}");
    assert!(plugin.iter().all(|e| (e - 1.0).abs() < 0.15), "{plugin:?}");
}

#[test]
fn misspecified_propensity_is_rescued_by_the_true_outcome_model() {
    let dr = error_curve(|s| ate_with(s, &wrong_ps(&s.truth), ScoreVariant::Full));
    let ipw = error_curve(|s| ate_with(s, &wrong_ps(&s.truth), ScoreVariant::Ipw));
    println!("dr {dr:?} ipw {ipw:?}");
    assert!(dr[2] < dr[0] && dr[2] < 0.1, "{dr:?}");
    assert!(ipw[2] > 0.3 && ipw[2] > 0.7 * ipw[0], "{ipw:?}");
}

#[test]
fn interval_width_shrinks_at_root_n() {
    let mut cfg = MaseConfig::default();
    cfg.nuisance.ps_grids = vec![vec![LearnerSpec::new(LearnerKind::Logistic)]];
    cfg.nuisance.outcome_grids = vec![vec![LearnerSpec::new(LearnerKind::Linear)]];
    let dgp = AnalyticDgp::default();
    let pts: Vec<(f64, f64)> = SIZES
        .iter()
        .map(|&n| {
            let s = dgp.sample(n, 77).unwrap();
            let r = run_mase(&s.dataset, 1, &cfg.reseeded(n as u64)).unwrap();
            ((n as f64).ln(), (r.sandwich.ci.1 - r.sandwich.ci.0).ln())
        })
        .collect();
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / 3.0;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / 3.0;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    println!("log-log slope {slope:.4}");
    assert!((slope + 0.5).abs() <= 0.1, "slope {slope}");
}
