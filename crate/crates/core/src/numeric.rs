//! Small numeric helpers shared across modules: seed derivation, ordered
//! summation, logistic link and dense linear solves.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent child seed from a parent seed and a stream path.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(mix64(seed), |acc, &p| mix64(acc ^ mix64(p.wrapping_add(0x5851_f42d_4c95_7f2d))))
}

pub fn rng_from(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Pairwise summation with a fixed split pattern, so results depend only on
/// the order of the input.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        let mut s = 0.0;
        for &x in xs {
            s += x;
        }
        s
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator). Returns 0 for fewer than two values.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let dev: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    (pairwise_sum(&dev) / (xs.len() - 1) as f64).sqrt()
}

/// Mean computed around the first element so that a constant input is
/// reproduced exactly.
pub fn offset_mean(xs: &[f64]) -> f64 {
    match xs.first() {
        None => f64::NAN,
        Some(&x0) => {
            let dev: Vec<f64> = xs.iter().map(|x| x - x0).collect();
            x0 + pairwise_sum(&dev) / xs.len() as f64
        }
    }
}

/// Linear-interpolated quantile of unsorted data (type 7).
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub const PROB_FLOOR: f64 = 1e-12;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Solves a symmetric positive (semi)definite system `a x = b`.
///
/// Tries Cholesky first; on failure falls back to a pseudo-inverse through
/// the symmetric eigendecomposition, discarding eigenvalues below
/// `1e-12 * max eigenvalue`.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() != a.ncols() || a.nrows() != b.len() {
        return Err(Error::Dimension(format!(
            "system {}x{} with rhs {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    if a.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    if let Some(chol) = a.clone().cholesky() {
        let x = chol.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
    }
    let eig = a.clone().symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    if !(max_ev > 0.0) || !max_ev.is_finite() {
        return Err(Error::Singular("matrix has no positive eigenvalues".into()));
    }
    let cutoff = max_ev * 1e-12;
    let qtb = eig.eigenvectors.transpose() * b;
    let scaled = DVector::from_iterator(
        qtb.len(),
        qtb.iter()
            .zip(eig.eigenvalues.iter())
            .map(|(v, &ev)| if ev > cutoff { v / ev } else { 0.0 }),
    );
    Ok(&eig.eigenvectors * scaled)
}

/// 2-norm condition number from singular values; infinite when singular.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    let sv = a.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves a square system with column-pivoted QR (rank revealing) and
/// reports the condition number. Fails when the matrix is numerically singular.
pub fn solve_general(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let cond = condition_number(a);
    if !cond.is_finite() || cond > 1e14 {
        return Err(Error::Singular(format!("condition number {cond:e}")));
    }
    let qr = a.clone().col_piv_qr();
    let x = qr
        .solve(b)
        .ok_or_else(|| Error::Singular("column-pivoted QR solve failed".into()))?;
    Ok((x, cond))
}

pub fn invert(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let cond = condition_number(a);
    if !cond.is_finite() || cond > 1e14 {
        return Err(Error::Singular(format!("condition number {cond:e}")));
    }
    a.clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("matrix inverse failed".into()))
}
