//! Memory-retention analyses: offset ridge regression against a permutation
//! baseline, and trial-wise RSA over per-session dissimilarity matrices.

mod ridge;
mod rsa;

pub use ridge::{
    ridge_fit, ridge_fit_with, ridge_offset_analysis, ridge_random_baseline, RidgeConfig,
    RidgeForm, RidgeModel, RidgeOptions, RidgePoint,
};
pub use rsa::{
    compute_rdm, fmri_auto_rsa, rsa_over_sessions, trialwise_rsa, Rdm, RsaResult, SessionScore,
};

use crate::error::{Error, Result};

/// Pearson correlation of two equal-length sequences.
///
/// Constant inputs have no defined correlation and are rejected rather than
/// mapped to zero. The result is clamped to `[-1, 1]`.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims("pearson", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pearson needs at least 2 values, got {}",
            a.len()
        )));
    }
    if is_constant(a) || is_constant(b) {
        return Err(Error::Degenerate("pearson of a constant vector".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    // sqrt of the product (not product of sqrts): identical inputs give
    // exactly 1.
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}
