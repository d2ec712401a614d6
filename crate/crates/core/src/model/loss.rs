//! Reconstruction and contrastive losses, with closed-form gradients.

use crate::error::{Error, Result};

/// Number of decoded offsets (`t`, `t-1`, `t-2`).
pub const OFFSETS: usize = 3;

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims("cosine_sim", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn mean_sq_err(p: &[f64], c: &[f64]) -> Result<f64> {
    if p.len() != c.len() {
        return Err(Error::dims("mse", c.len(), p.len()));
    }
    Ok(p.iter().zip(c).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / p.len() as f64)
}

/// Sum over offsets of the per-offset mean squared error. Returns the total
/// and the per-offset terms.
pub fn loss_mse<P: AsRef<[f64]>, C: AsRef<[f64]>>(
    preds: &[P; OFFSETS],
    targets: &[C; OFFSETS],
) -> Result<(f64, [f64; OFFSETS])> {
    let mut per = [0.0; OFFSETS];
    for i in 0..OFFSETS {
        per[i] = mean_sq_err(preds[i].as_ref(), targets[i].as_ref())?;
    }
    Ok((per.iter().sum(), per))
}

/// The four components of a consecutive signal pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    pub b_t: Vec<f64>,
    pub n_t: Vec<f64>,
    pub b_prev: Vec<f64>,
    pub n_prev: Vec<f64>,
}

/// Index of a component in the pair table below.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum C {
    BT,
    NT,
    BP,
    NP,
}

/// Similarity pairs in the softmax: the positive `(b_t, n_prev)` first, then
/// the five negatives.
const PAIRS: [(C, C); 6] = [
    (C::BT, C::NP),
    (C::NT, C::BT),
    (C::NP, C::BP),
    (C::NT, C::NP),
    (C::BT, C::BP),
    (C::NT, C::BP),
];

/// InfoNCE over one consecutive pair: `-log softmax(s / tau)[positive]`
/// with `s` the cosine similarities of the six pairs above.
pub fn loss_infonce(
    b_t: &[f64],
    n_t: &[f64],
    b_prev: &[f64],
    n_prev: &[f64],
    tau: f64,
) -> Result<f64> {
    Ok(infonce_with_grad(b_t, n_t, b_prev, n_prev, tau, false)?.0)
}

/// InfoNCE from precomputed similarities, positive pair first.
pub fn infonce_from_similarities(sims: &[f64; 6], tau: f64) -> f64 {
    let logits = sims.map(|s| s / tau);
    log_sum_exp(&logits) - logits[0]
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(l));
    max + xs.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// InfoNCE value and, when `want_grad`, its gradient with respect to
/// `[b_t, n_t, b_prev, n_prev]`.
pub(crate) fn infonce_with_grad(
    b_t: &[f64],
    n_t: &[f64],
    b_prev: &[f64],
    n_prev: &[f64],
    tau: f64,
    want_grad: bool,
) -> Result<(f64, Option<[Vec<f64>; 4]>)> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "tau must be > 0, got {tau}"
        )));
    }
    let vecs = [b_t, n_t, b_prev, n_prev];
    let d = b_t.len();
    if let Some(v) = vecs.iter().find(|v| v.len() != d) {
        return Err(Error::dims("infonce components", d, v.len()));
    }
    let norms = vecs.map(norm);
    if norms.contains(&0.0) {
        return Err(Error::Degenerate("infonce component has zero norm".into()));
    }
    let idx = |c: C| c as usize;
    let mut sims = [0.0; 6];
    for (j, &(x, y)) in PAIRS.iter().enumerate() {
        let (x, y) = (idx(x), idx(y));
        sims[j] = dot(vecs[x], vecs[y]) / (norms[x] * norms[y]);
    }
    let logits = sims.map(|s| s / tau);
    let lse = log_sum_exp(&logits);
    let loss = lse - logits[0];
    if !want_grad {
        return Ok((loss, None));
    }
    let mut grads: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; d]);
    for (j, &(x, y)) in PAIRS.iter().enumerate() {
        let p = (logits[j] - lse).exp();
        let g = (p - if j == 0 { 1.0 } else { 0.0 }) / tau;
        let (x, y) = (idx(x), idx(y));
        // ds/dx = y / (|x||y|) - s x / |x|^2, and symmetrically for y
        let s = sims[j];
        let inv = 1.0 / (norms[x] * norms[y]);
        let (nx2, ny2) = (norms[x] * norms[x], norms[y] * norms[y]);
        for i in 0..d {
            grads[x][i] += g * (vecs[y][i] * inv - s * vecs[x][i] / nx2);
            grads[y][i] += g * (vecs[x][i] * inv - s * vecs[y][i] / ny2);
        }
    }
    Ok((loss, Some(grads)))
}
