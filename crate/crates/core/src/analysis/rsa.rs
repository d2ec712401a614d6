use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::pearson;
use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Representational dissimilarity matrix, `1 - pearson` between every pair
/// of items. Symmetric with an exact zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct Rdm {
    n: usize,
    values: Vec<f64>,
}

impl Rdm {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    /// Builds an RDM from raw values after checking symmetry, the zero
    /// diagonal and the `[0, 2]` range.
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::dims("rdm values", n * n, values.len()));
        }
        for i in 0..n {
            if values[i * n + i] != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "rdm diagonal at {i} is nonzero"
                )));
            }
            for j in 0..n {
                let v = values[i * n + j];
                if v != values[j * n + i] || !(-1e-9..=2.0 + 1e-9).contains(&v) {
                    return Err(Error::InvalidArgument(format!(
                        "rdm entry ({i}, {j}) = {v} breaks symmetry or range"
                    )));
                }
            }
        }
        Ok(Rdm { n, values })
    }
}

pub fn compute_rdm<V, T>(vectors: &[V]) -> Result<Rdm>
where
    V: AsRef<[T]>,
    T: Copy + Into<f64>,
{
    let n = vectors.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "rdm needs at least 2 vectors, got {n}"
        )));
    }
    let d = vectors[0].as_ref().len();
    if d < 2 {
        return Err(Error::InvalidArgument(
            "rdm vectors need at least 2 entries".into(),
        ));
    }
    // Column i holds vector i, centered and scaled to unit norm, so the
    // Gram matrix is the Pearson matrix.
    let mut z = DMatrix::<f64>::zeros(d, n);
    for (i, v) in vectors.iter().enumerate() {
        let v = v.as_ref();
        if v.len() != d {
            return Err(Error::dims(format!("rdm vector {i}"), d, v.len()));
        }
        let first: f64 = v[0].into();
        if v.iter().all(|&x| Into::<f64>::into(x) == first) {
            return Err(Error::Degenerate(format!("rdm vector {i} is constant")));
        }
        let mean = v.iter().map(|&x| x.into()).sum::<f64>() / d as f64;
        let mut col = z.column_mut(i);
        for (dst, &x) in col.iter_mut().zip(v) {
            *dst = x.into() - mean;
        }
        let norm = col.norm();
        col /= norm;
    }
    let gram = z.transpose() * &z;
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 1.0 - gram[(i, j)].clamp(-1.0, 1.0);
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    Ok(Rdm { n, values })
}

/// Trial-wise RSA at offset `k`: row `t` of `rdm_c` is correlated with row
/// `t + k` of `rdm_f`, and the correlations are averaged over all valid `t`.
///
/// Columns `t` and `t + k` are removed from both rows before correlating;
/// they hold the structural zeros of the two diagonals.
pub fn trialwise_rsa(rdm_f: &Rdm, rdm_c: &Rdm, k: usize) -> Result<f64> {
    let n = rdm_f.n;
    if rdm_c.n != n {
        return Err(Error::dims("trialwise_rsa rdm sizes", n, rdm_c.n));
    }
    if k + 1 >= n {
        return Err(Error::InvalidArgument(format!(
            "offset k = {k} too large for n = {n}"
        )));
    }
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut total = 0.0;
    for t in 0..n - k {
        a.clear();
        b.clear();
        let (rc, rf) = (rdm_c.row(t), rdm_f.row(t + k));
        for j in (0..n).filter(|&j| j != t && j != t + k) {
            a.push(rc[j]);
            b.push(rf[j]);
        }
        total += pearson(&a, &b)
            .map_err(|e| Error::Degenerate(format!("rsa rows c[{t}] / f[{}]: {e}", t + k)))?;
    }
    Ok(total / (n - k) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionScore {
    pub session: usize,
    pub k: usize,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsaResult {
    pub ks: Vec<usize>,
    /// `rho_ave` per entry of `ks`, averaged over the sessions that were used.
    pub per_k: Vec<f64>,
    pub per_session: Vec<SessionScore>,
    pub skipped_sessions: Vec<usize>,
}

/// Trial-wise RSA between signals and stimulus embeddings, per session, for
/// `k` in `0..=max_k`.
pub fn rsa_over_sessions(dataset: &Dataset, max_k: usize) -> Result<RsaResult> {
    rsa_impl(dataset, max_k, false)
}

/// Trial-wise RSA of the signals against themselves, `k` in `1..=max_k`.
pub fn fmri_auto_rsa(dataset: &Dataset, max_k: usize) -> Result<RsaResult> {
    if max_k == 0 {
        return Err(Error::InvalidArgument("auto-RSA needs max_k >= 1".into()));
    }
    rsa_impl(dataset, max_k, true)
}

fn rsa_impl(dataset: &Dataset, max_k: usize, auto: bool) -> Result<RsaResult> {
    dataset.validate()?;
    let index = dataset.image_index();
    let ks: Vec<usize> = if auto {
        (1..=max_k).collect()
    } else {
        (0..=max_k).collect()
    };
    let mut per_session = Vec::new();
    let mut skipped = Vec::new();
    let mut used = 0usize;
    let mut sums = vec![0.0; ks.len()];
    for (s, session) in dataset.sessions.iter().enumerate() {
        let trials: Vec<_> = session.runs.iter().flat_map(|r| &r.trials).collect();
        let n = trials.len();
        if n < (max_k + 2).max(4) {
            log::warn!("session {s}: {n} trials is too short for max_k = {max_k}, skipped");
            skipped.push(s);
            continue;
        }
        let signals: Vec<&[f32]> = trials.iter().map(|t| &*t.fmri).collect();
        let rdm_f = compute_rdm(&signals)?;
        let rdm_c = if auto {
            None
        } else {
            let embeds: Vec<&[f32]> = trials
                .iter()
                .map(|t| &*dataset.images[index[&t.image_id]].embedding)
                .collect();
            Some(compute_rdm(&embeds)?)
        };
        for (slot, &k) in ks.iter().enumerate() {
            let rho = trialwise_rsa(&rdm_f, rdm_c.as_ref().unwrap_or(&rdm_f), k)?;
            sums[slot] += rho;
            per_session.push(SessionScore { session: s, k, rho });
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::InvalidArgument(format!(
            "no session is long enough for max_k = {max_k}"
        )));
    }
    Ok(RsaResult {
        ks,
        per_k: sums.into_iter().map(|v| v / used as f64).collect(),
        per_session,
        skipped_sessions: skipped,
    })
}
