use std::collections::{HashMap, HashSet};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::pearson;
use crate::dataset::{Dataset, SplitConfig};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RidgeConfig {
    pub lambda: f64,
    pub max_k: usize,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        RidgeConfig {
            lambda: 1.0,
            max_k: 9,
        }
    }
}

/// Which closed form to solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RidgeForm {
    /// Primal when `p <= n`, dual otherwise.
    #[default]
    Auto,
    /// `(XᵀX + λI)⁻¹ XᵀY`, a `p x p` system.
    Primal,
    /// `Xᵀ (XXᵀ + λI)⁻¹ Y`, an `n x n` system.
    Dual,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RidgeOptions {
    pub lambda: f64,
    pub form: RidgeForm,
    /// Center inputs and targets and fit a bias. On by default.
    pub fit_intercept: bool,
}

impl RidgeOptions {
    pub fn new(lambda: f64) -> Self {
        RidgeOptions {
            lambda,
            form: RidgeForm::Auto,
            fit_intercept: true,
        }
    }
}

/// Linear map `x ↦ Wᵀx + b` from `p` inputs to `q` outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    /// `p x q`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl RidgeModel {
    /// Predicts one row per row of `x` (`n x p` in, `n x q` out).
    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x * &self.weights;
        for mut row in out.row_iter_mut() {
            row += self.bias.transpose();
        }
        out
    }
}

/// Ridge regression with an intercept, solved in closed form.
pub fn ridge_fit(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<RidgeModel> {
    ridge_fit_with(x, y, &RidgeOptions::new(lambda))
}

pub fn ridge_fit_with(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    opts: &RidgeOptions,
) -> Result<RidgeModel> {
    let (n, p) = x.shape();
    let q = y.ncols();
    if y.nrows() != n {
        return Err(Error::dims("ridge targets (rows)", n, y.nrows()));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "ridge needs n >= 2 samples, got {n}"
        )));
    }
    if !(opts.lambda >= 0.0 && opts.lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be finite and >= 0, got {}",
            opts.lambda
        )));
    }

    let (x_mean, y_mean) = if opts.fit_intercept {
        (column_means(x), column_means(y))
    } else {
        (DVector::zeros(p), DVector::zeros(q))
    };
    let xc = center(x, &x_mean);
    let yc = center(y, &y_mean);

    let primal = match opts.form {
        RidgeForm::Auto => p <= n,
        RidgeForm::Primal => true,
        RidgeForm::Dual => false,
    };
    let weights = if primal {
        let xt = xc.transpose();
        let mut gram = &xt * &xc;
        gram.fill_diagonal_add(opts.lambda);
        solve_spd(gram, &xt * &yc)?
    } else {
        let xt = xc.transpose();
        let mut gram = &xc * &xt;
        gram.fill_diagonal_add(opts.lambda);
        let dual = solve_spd(gram, yc)?;
        xt * dual
    };
    let bias = &y_mean - weights.transpose() * &x_mean;
    if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            path: "ridge weights".into(),
        });
    }
    Ok(RidgeModel { weights, bias })
}

trait AddDiagonal {
    fn fill_diagonal_add(&mut self, v: f64);
}

impl AddDiagonal for DMatrix<f64> {
    fn fill_diagonal_add(&mut self, v: f64) {
        for i in 0..self.nrows().min(self.ncols()) {
            self[(i, i)] += v;
        }
    }
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

fn center(m: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (mut col, mu) in out.column_iter_mut().zip(mean.iter()) {
        col.add_scalar_mut(-mu);
    }
    out
}

fn solve_spd(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig_source = a.clone();
    match a.cholesky() {
        Some(ch) => Ok(ch.solve(&b)),
        None => {
            let eig = SymmetricEigen::new(eig_source).eigenvalues;
            let max = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let min = eig.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
            Err(Error::SingularSystem {
                condition: if min > 0.0 { max / min } else { f64::INFINITY },
            })
        }
    }
}

/// One point of the retention curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RidgePoint {
    pub k: usize,
    pub score: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Flattened trial table with run-local positions.
struct Trials<'a> {
    image: Vec<u64>,
    signal: Vec<&'a [f32]>,
    pos_in_run: Vec<usize>,
    embeddings: HashMap<u64, &'a [f32]>,
    d_f: usize,
    d_c: usize,
}

impl<'a> Trials<'a> {
    fn new(ds: &'a Dataset) -> Result<Self> {
        ds.validate()?;
        let mut t = Trials {
            image: Vec::new(),
            signal: Vec::new(),
            pos_in_run: Vec::new(),
            embeddings: ds
                .images
                .iter()
                .map(|im| (im.image_id, &*im.embedding))
                .collect(),
            d_f: ds.d_f,
            d_c: ds.d_c,
        };
        for run in ds.sessions.iter().flat_map(|s| &s.runs) {
            for (i, trial) in run.trials.iter().enumerate() {
                t.image.push(trial.image_id);
                t.signal.push(&trial.fmri);
                t.pos_in_run.push(i);
            }
        }
        Ok(t)
    }

    fn len(&self) -> usize {
        self.image.len()
    }

    /// Test anchors: `m` trials drawn among those with at least `max_k`
    /// predecessors in their run, so every offset can be scored on the same
    /// anchors.
    fn test_anchors(&self, max_k: usize, split: &SplitConfig) -> Result<Vec<usize>> {
        let eligible: Vec<usize> = (0..self.len())
            .filter(|&g| self.pos_in_run[g] >= max_k)
            .collect();
        if eligible.is_empty() {
            return Err(Error::EmptyPairs { k: max_k });
        }
        if split.m == 0 || split.m >= eligible.len() {
            return Err(Error::InvalidArgument(format!(
                "test size m = {} must be in 1..{} (trials with {max_k} predecessors)",
                split.m,
                eligible.len()
            )));
        }
        let order = Stream::new(split.seed, rng::SPLIT).permutation(eligible.len());
        let mut anchors: Vec<usize> = order[..split.m].iter().map(|&i| eligible[i]).collect();
        anchors.sort_unstable();
        Ok(anchors)
    }

    /// Fits on `(signal[a], embedding[target(a)])` pairs and scores the test
    /// anchors. A training pair is dropped when either its signal's image or
    /// its target image occurs in any test pair.
    fn fit_and_score(
        &self,
        k: usize,
        lambda: f64,
        anchors: &[usize],
        target: impl Fn(usize) -> Option<usize>,
    ) -> Result<RidgePoint> {
        let is_test: HashSet<usize> = anchors.iter().copied().collect();
        let mut marked = HashSet::new();
        for &a in anchors {
            let tgt = target(a).ok_or(Error::EmptyPairs { k })?;
            marked.insert(self.image[a]);
            marked.insert(self.image[tgt]);
        }
        let train: Vec<(usize, usize)> = (0..self.len())
            .filter(|g| !is_test.contains(g))
            .filter_map(|g| target(g).map(|t| (g, t)))
            .filter(|&(g, t)| !marked.contains(&self.image[g]) && !marked.contains(&self.image[t]))
            .collect();
        if train.len() < 2 {
            return Err(Error::EmptyPairs { k });
        }
        let (x, y) = self.matrices(&train);
        let model = ridge_fit(&x, &y, lambda)?;
        let test: Vec<(usize, usize)> = anchors.iter().map(|&a| (a, target(a).unwrap())).collect();
        let (xt, yt) = self.matrices(&test);
        let pred = model.predict(&xt);
        let mut total = 0.0;
        for i in 0..test.len() {
            let p: Vec<f64> = pred.row(i).iter().copied().collect();
            let c: Vec<f64> = yt.row(i).iter().copied().collect();
            total += pearson(&p, &c)?;
        }
        Ok(RidgePoint {
            k,
            score: total / test.len() as f64,
            n_train: train.len(),
            n_test: test.len(),
        })
    }

    fn matrices(&self, pairs: &[(usize, usize)]) -> (DMatrix<f64>, DMatrix<f64>) {
        let x = DMatrix::from_fn(pairs.len(), self.d_f, |i, j| {
            f64::from(self.signal[pairs[i].0][j])
        });
        let y = DMatrix::from_fn(pairs.len(), self.d_c, |i, j| {
            f64::from(self.embeddings[&self.image[pairs[i].1]][j])
        });
        (x, y)
    }
}

/// Retention curve: for each offset `k` in `0..=max_k`, ridge-regresses the
/// embedding `k` trials back on the current signal (within runs only) and
/// reports the mean Pearson correlation between prediction and target over
/// the test anchors.
pub fn ridge_offset_analysis(
    dataset: &Dataset,
    cfg: &RidgeConfig,
    split: &SplitConfig,
) -> Result<Vec<RidgePoint>> {
    let trials = Trials::new(dataset)?;
    for k in 0..=cfg.max_k {
        if !(0..trials.len()).any(|g| trials.pos_in_run[g] >= k) {
            return Err(Error::EmptyPairs { k });
        }
    }
    let anchors = trials.test_anchors(cfg.max_k, split)?;
    (0..=cfg.max_k)
        .map(|k| {
            let pos = &trials.pos_in_run;
            trials.fit_and_score(k, cfg.lambda, &anchors, |g| (pos[g] >= k).then(|| g - k))
        })
        .collect()
}

/// Lower bound for the retention curve: the same pipeline with every signal
/// paired to the embedding of a randomly permuted trial (stream
/// `"baseline"`), scored on the same test anchors.
pub fn ridge_random_baseline(
    dataset: &Dataset,
    cfg: &RidgeConfig,
    split: &SplitConfig,
) -> Result<f64> {
    let trials = Trials::new(dataset)?;
    let anchors = trials.test_anchors(cfg.max_k, split)?;
    let perm = Stream::new(split.seed, "baseline").permutation(trials.len());
    Ok(trials
        .fit_and_score(0, cfg.lambda, &anchors, |g| Some(perm[g]))?
        .score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn random_matrix(s: &mut Stream, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| s.next_normal())
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / a.norm().max(b.norm()).max(1e-300)
    }

    #[test]
    fn primal_and_dual_agree() {
        let mut s = Stream::new(1, "test");
        let x = random_matrix(&mut s, 20, 5);
        let y = random_matrix(&mut s, 20, 3);
        let mut o = RidgeOptions::new(1.0);
        o.form = RidgeForm::Primal;
        let p = ridge_fit_with(&x, &y, &o).unwrap();
        o.form = RidgeForm::Dual;
        let d = ridge_fit_with(&x, &y, &o).unwrap();
        assert!(rel_err(&p.weights, &d.weights) < 1e-6);
        assert!((&p.bias - &d.bias).norm() < 1e-6 * p.bias.norm().max(1.0));
    }

    #[test]
    fn huge_lambda_shrinks_to_zero() {
        let mut s = Stream::new(2, "test");
        let x = random_matrix(&mut s, 15, 6);
        let y = random_matrix(&mut s, 15, 2);
        let w1 = ridge_fit(&x, &y, 1.0).unwrap().weights.norm();
        let wbig = ridge_fit(&x, &y, 1e12).unwrap().weights.norm();
        assert!(wbig <= 1e-6 * w1, "{wbig} vs {w1}");
    }

    #[test]
    fn identity_without_intercept() {
        let i4 = DMatrix::<f64>::identity(4, 4);
        let mut o = RidgeOptions::new(1e-12);
        o.fit_intercept = false;
        let m = ridge_fit_with(&i4, &i4, &o).unwrap();
        assert!((&m.weights - &i4).abs().max() < 1e-6);
    }

    #[test]
    fn identity_with_intercept_reproduces_targets() {
        // Centering removes one rank: W is the centering projector and the bias
        // restores the means.
        let i4 = DMatrix::<f64>::identity(4, 4);
        let m = ridge_fit(&i4, &i4, 1e-6).unwrap();
        let proj = &i4 - DMatrix::from_element(4, 4, 0.25);
        assert!((&m.weights - &proj).abs().max() < 1e-5);
        assert!((m.predict(&i4) - &i4).abs().max() < 1e-5);
    }

    #[test]
    fn singular_system_reports_condition() {
        // Two identical columns, lambda 0.
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 5.0, 5.0]);
        let y = DMatrix::from_row_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let mut o = RidgeOptions::new(0.0);
        o.form = RidgeForm::Primal;
        match ridge_fit_with(&x, &y, &o) {
            Err(Error::SingularSystem { condition }) => assert!(condition > 1e10),
            other => panic!("expected singular system, got {other:?}"),
        }
    }

    #[test]
    fn dimension_errors() {
        let x = DMatrix::<f64>::zeros(4, 2);
        let y = DMatrix::<f64>::zeros(3, 1);
        assert!(matches!(
            ridge_fit(&x, &y, 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    use proptest::prelude::*;
    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn forms_agree_on_small_instances(n in 2usize..50, p in 1usize..50, q in 1usize..4, seed in any::<u64>(), lambda in 0.1..10.0f64) {
            let mut s = Stream::new(seed, "prop");
            let x = random_matrix(&mut s, n, p);
            let y = random_matrix(&mut s, n, q);
            let mut o = RidgeOptions::new(lambda);
            o.form = RidgeForm::Primal;
            let a = ridge_fit_with(&x, &y, &o).unwrap();
            o.form = RidgeForm::Dual;
            let b = ridge_fit_with(&x, &y, &o).unwrap();
            prop_assert!(rel_err(&a.weights, &b.weights) < 1e-6);
        }
    }
}
