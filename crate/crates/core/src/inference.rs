//! Sandwich variance, Wald intervals for the ATE and the subject-level
//! bootstrap used for the comparison estimators.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::estimator::ScoreSet;
use crate::numeric::{invert, pairwise_sum, quantile, rng_from, sample_sd};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichResult {
    pub n: usize,
    /// Mean score Jacobian.
    pub j: DMatrix<f64>,
    /// Mean outer product of the scores.
    pub f: DMatrix<f64>,
    /// `J^{-1} F J^{-T}`.
    pub v: DMatrix<f64>,
    /// Asymptotic standard deviation of the ATE; its standard error is
    /// `sigma_ate / sqrt(n)`.
    pub sigma_ate: f64,
    pub se_ate: f64,
    pub ci: (f64, f64),
    pub alpha: f64,
    /// The quadratic form for the ATE variance came out negative (round-off)
    /// and was clamped to 0.
    pub negative_variance: bool,
}

/// Mean outer product `(1/n) sum_i psi_i psi_i^T`, entrywise pairwise sums.
pub fn outer_mean(psi: &DMatrix<f64>) -> DMatrix<f64> {
    let n = psi.nrows();
    let k = psi.ncols();
    let mut f = DMatrix::zeros(k, k);
    let mut buf = vec![0.0; n];
    for a in 0..k {
        for b in a..k {
            for (i, v) in buf.iter_mut().enumerate() {
                *v = psi[(i, a)] * psi[(i, b)];
            }
            let m = pairwise_sum(&buf) / n as f64;
            f[(a, b)] = m;
            f[(b, a)] = m;
        }
    }
    f
}

/// Plug-in sandwich variance at the solved theta. `jacobian` is the mean
/// score Jacobian (`-G` for the linear model).
pub fn sandwich(scores: &ScoreSet, jacobian: &DMatrix<f64>, alpha: f64) -> Result<SandwichResult> {
    let n = scores.n_subjects();
    let k = scores.psi.ncols();
    if n == 0 {
        return Err(Error::Validation("no scores for the sandwich variance".into()));
    }
    if jacobian.nrows() != k || jacobian.ncols() != k {
        return Err(Error::Dimension("Jacobian does not match the score dimension".into()));
    }
    let f = outer_mean(&scores.psi);
    let j_inv = invert(jacobian).map_err(|e| match e {
        Error::Singular(m) => Error::Singular(format!("score Jacobian: {m}")),
        other => other,
    })?;
    let mut v = &j_inv * &f * j_inv.transpose();
    v = (&v + v.transpose()) * 0.5;
    let c = DVector::from_iterator(k, (0..k).map(|i| if i == 0 { 0.0 } else { 1.0 }));
    let var = (c.transpose() * &v * &c)[(0, 0)];
    let negative_variance = var < 0.0;
    let sigma_ate = var.max(0.0).sqrt();
    let ate: f64 = scores.theta[1..].iter().sum();
    let ci = ci_ate(ate, sigma_ate, n, alpha)?;
    Ok(SandwichResult {
        n,
        j: jacobian.clone(),
        f,
        v,
        sigma_ate,
        se_ate: sigma_ate / (n as f64).sqrt(),
        ci,
        alpha,
        negative_variance,
    })
}

/// `ate +/- z_{1 - alpha/2} sigma / sqrt(n)`.
pub fn ci_ate(ate: f64, sigma_ate: f64, n: usize, alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if !(sigma_ate >= 0.0) || n == 0 {
        return Err(Error::Validation("interval needs sigma >= 0 and n >= 1".into()));
    }
    let half = normal_quantile(1.0 - alpha / 2.0) * sigma_ate / (n as f64).sqrt();
    Ok((ate - half, ate + half))
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &a| acc * x + a)
}

/// Standard normal quantile by Wichura's algorithm AS 241 (PPND16),
/// relative accuracy about 1e-16. Returns +/-infinity at 0 and 1 and NaN
/// outside [0, 1].
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 8] = [
        3.387_132_872_796_366_608,
        133.141_667_891_784_377_45,
        1_971.590_950_306_551_442_7,
        13_731.693_765_509_461_125,
        45_921.953_931_549_871_457,
        67_265.770_927_008_700_853,
        33_430.575_583_588_128_105,
        2_509.080_928_730_122_672_7,
    ];
    const B: [f64; 8] = [
        1.0,
        42.313_330_701_600_911_252,
        687.187_007_492_057_908_3,
        5_394.196_021_424_751_107_7,
        21_213.794_301_586_595_867,
        39_307.895_800_092_710_61,
        28_729.085_735_721_942_674,
        5_226.495_278_852_854_561,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_577_34,
        4.630_337_846_156_545_295_9,
        5.769_497_221_460_691_405_5,
        3.647_848_324_763_204_605_04,
        1.270_458_252_452_368_382_58,
        0.241_780_725_177_450_611_77,
        0.022_723_844_989_269_184_583_3,
        7.745_450_142_783_414_076_4e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_758_821_87,
        1.676_384_830_183_803_849_4,
        0.689_767_334_985_100_004_55,
        0.148_103_976_427_480_074_59,
        0.015_198_666_563_616_457_196_6,
        5.475_938_084_995_344_946e-4,
        1.050_750_071_644_416_843_24e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103_777_2,
        5.463_784_911_164_114_369_9,
        1.784_826_539_917_291_335_8,
        0.296_560_571_828_504_891_23,
        0.026_532_189_526_576_123_093,
        0.001_242_660_947_388_078_438_6,
        2.711_555_568_743_487_578_15e-5,
        2.010_334_399_292_288_132_65e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        0.599_832_206_555_887_937_69,
        0.136_929_880_922_735_805_31,
        0.014_875_361_290_850_614_852_5,
        7.868_691_311_456_132_591e-4,
        1.846_318_317_510_054_681_8e-5,
        1.421_511_758_316_445_888_7e-7,
        2.044_263_103_389_939_785_64e-15,
    ];
    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        r -= 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub se: f64,
    pub ci: (f64, f64),
    pub estimates: Vec<f64>,
    /// Resamples on which the estimator failed and were redrawn.
    pub failures: usize,
}

pub const MIN_BOOTSTRAP: usize = 100;
const RETRY_CAP: usize = 10;

/// Subject-level nonparametric bootstrap. Resample b draws from its own RNG
/// stream derived from `(seed, b, attempt)`; a failing resample is redrawn
/// up to a fixed retry cap.
pub fn bootstrap_se<E>(estimator: E, ds: &LongitudinalDataset, b: usize, alpha: f64, seed: u64) -> Result<BootstrapResult>
where
    E: Fn(&LongitudinalDataset) -> Result<f64> + Sync,
{
    if b < MIN_BOOTSTRAP {
        return Err(Error::Config(format!(
            "bootstrap needs at least {MIN_BOOTSTRAP} resamples, got {b}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let n = ds.n_subjects();
    let draws: Vec<(f64, usize)> = (0..b)
        .into_par_iter()
        .map(|k| {
            use rand::Rng;
            let mut last = None;
            for attempt in 0..RETRY_CAP {
                let mut rng = rng_from(seed, &[k as u64, attempt as u64]);
                let rows: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
                match estimator(&ds.select_rows(&rows)) {
                    Ok(v) if v.is_finite() => return Ok((v, attempt)),
                    Ok(v) => last = Some(Error::Numerical(format!("non-finite estimate {v}"))),
                    Err(e) => last = Some(e),
                }
            }
            Err(last.unwrap())
        })
        .collect::<Result<_>>()?;
    let estimates: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let failures = draws.iter().map(|d| d.1).sum();
    Ok(BootstrapResult {
        se: sample_sd(&estimates),
        ci: (quantile(&estimates, alpha / 2.0), quantile(&estimates, 1.0 - alpha / 2.0)),
        estimates,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::LinearMsm;

    /// Standard normal CDF by composite Simpson integration of the density,
    /// independent of the rational approximation under test.
    fn phi_by_quadrature(x: f64) -> f64 {
        let m = 20_000;
        let h = x / m as f64;
        let dens = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = dens(0.0) + dens(x);
        for i in 1..m {
            s += dens(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        0.5 + s * h / 3.0
    }

    fn quantile_by_bisection(p: f64) -> f64 {
        let (mut lo, mut hi) = (-9.0, 9.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if phi_by_quadrature(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn quantile_matches_independent_oracle() {
        for p in [0.001, 0.025, 0.1, 0.3, 0.5, 0.6, 0.84, 0.975, 0.995, 0.9999] {
            let z = normal_quantile(p);
            let oracle = quantile_by_bisection(p);
            assert!((z - oracle).abs() < 1e-9, "p={p}: {z} vs {oracle}");
        }
        assert!((normal_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
        assert_eq!(normal_quantile(0.5), 0.0);
        assert!((normal_quantile(1e-300) + normal_quantile(1.0 - 1e-16)).abs() > 0.0);
        assert!(normal_quantile(1.5).is_nan());
    }

    #[test]
    fn interval_arithmetic() {
        let (lo, hi) = ci_ate(2.0, 0.5, 1, 0.05).unwrap();
        assert!((lo - 1.020_018).abs() < 1e-6 && (hi - 2.979_982).abs() < 1e-6);
        assert_eq!(ci_ate(2.0, 0.0, 10, 0.05).unwrap(), (2.0, 2.0));
        let narrow = ci_ate(2.0, 1.0, 10, 0.32).unwrap();
        let wide = ci_ate(2.0, 1.0, 10, 0.05).unwrap();
        assert!(narrow.1 - narrow.0 < wide.1 - wide.0);
        assert!(((narrow.0 + narrow.1) / 2.0 - 2.0).abs() < 1e-15);
        assert!(ci_ate(2.0, 1.0, 10, 1.0).is_err());
    }

    fn scores_from(psi: DMatrix<f64>, theta: Vec<f64>) -> ScoreSet {
        ScoreSet {
            theta,
            s0: psi.clone(),
            terms: Vec::new(),
            psi,
            provenance: None,
        }
    }

    #[test]
    fn identity_jacobian_gives_outer_product() {
        let psi = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, -1.0, 0.5, 0.0, -3.0, 2.0, 1.0]);
        let s = scores_from(psi.clone(), vec![0.0, 1.0]);
        let j = -DMatrix::<f64>::identity(2, 2);
        let r = sandwich(&s, &j, 0.05).unwrap();
        let f = psi.transpose() * &psi / 4.0;
        assert!((&r.v - &f).amax() < 1e-15);
        assert!((r.sigma_ate - f[(1, 1)].sqrt()).abs() < 1e-15);
    }

    #[test]
    fn variance_invariant_to_subject_order() {
        let mut rng = rng_from(3, &[]);
        use rand::Rng;
        let psi = DMatrix::from_fn(50, 3, |_, _| rng.gen_range(-1.0..1.0));
        let rev = DMatrix::from_fn(50, 3, |i, j| psi[(49 - i, j)]);
        let j = LinearMsm::new(2).jacobian();
        let a = sandwich(&scores_from(psi, vec![0.0; 3]), &j, 0.05).unwrap();
        let b = sandwich(&scores_from(rev, vec![0.0; 3]), &j, 0.05).unwrap();
        assert!((&a.v - &b.v).amax() < 1e-14);
    }

    #[test]
    fn singular_jacobian_is_reported() {
        let s = scores_from(DMatrix::from_element(3, 2, 1.0), vec![0.0; 2]);
        assert!(sandwich(&s, &DMatrix::zeros(2, 2), 0.05).is_err());
    }

    fn toy_dataset(n: usize) -> LongitudinalDataset {
        let y: Vec<f64> = (0..n).map(|i| i as f64).collect();
        LongitudinalDataset::new(
            vec![(0..n).map(|i| (i % 2) as u8).collect()],
            vec![DMatrix::zeros(n, 0)],
            vec![DMatrix::from_column_slice(n, 1, &y)],
            None,
        )
        .unwrap()
    }

    #[test]
    fn bootstrap_constant_and_deterministic() {
        let ds = toy_dataset(30);
        let c = bootstrap_se(|_| Ok(1.5), &ds, 100, 0.05, 1).unwrap();
        assert_eq!(c.se, 0.0);
        let mean = |d: &LongitudinalDataset| Ok(d.outcome(1, 1).iter().sum::<f64>() / d.n_subjects() as f64);
        let a = bootstrap_se(mean, &ds, 200, 0.05, 7).unwrap();
        let b = bootstrap_se(mean, &ds, 200, 0.05, 7).unwrap();
        let c = bootstrap_se(mean, &ds, 201, 0.05, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.estimates[..], c.estimates[..200]);
        // SD of the mean of 0..29 is about 8.8 / sqrt(30).
        assert!((a.se / (8.8 / 30f64.sqrt()) - 1.0).abs() < 0.25);
        assert!(bootstrap_se(mean, &ds, 50, 0.05, 7).is_err());
    }

    #[test]
    fn bootstrap_redraws_failures() {
        let ds = toy_dataset(20);
        let picky = |d: &LongitudinalDataset| {
            if d.outcome(1, 1)[0] < 5.0 {
                Err(Error::Numerical("rejected".into()))
            } else {
                Ok(1.0)
            }
        };
        let r = bootstrap_se(picky, &ds, 100, 0.05, 2).unwrap();
        assert!(r.failures > 0);
    }
}
