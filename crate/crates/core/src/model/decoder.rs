use nalgebra::DMatrix;

use super::loss::{infonce_with_grad, loss_infonce, loss_mse, Components, OFFSETS};
use super::mlp::{Mlp, Params};
use super::{Architecture, LossReport, Method, TrainConfig};
use crate::dataset::WindowSample;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Shared trunk; its output splits at `d_h` into `before | now`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub trunk: Mlp,
    pub d_h: usize,
}

/// Output heads for offsets 0, 1, 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads(pub [Mlp; OFFSETS]);

#[derive(Debug, Clone, PartialEq)]
pub enum Decoder {
    Straightforward { mlps: [Mlp; OFFSETS] },
    Disentangled { encoder: Encoder, heads: Heads },
}

fn widths(input: usize, hidden: usize, output: usize) -> Vec<usize> {
    if hidden == 0 {
        vec![input, output]
    } else {
        vec![input, hidden, output]
    }
}

impl Decoder {
    /// He-initialized decoder; draws come from the `"init"` stream in
    /// declaration order.
    pub fn init(method: Method, arch: &Architecture, seed: u64) -> Self {
        let mut s = Stream::new(seed, rng::INIT);
        match method {
            Method::Straightforward => {
                let dims = widths(arch.d_f, arch.hidden, arch.d_c);
                Decoder::Straightforward {
                    mlps: std::array::from_fn(|_| Mlp::he_init(&dims, &mut s)),
                }
            }
            Method::Disentangled => {
                let trunk = Mlp::he_init(&widths(arch.d_f, arch.hidden, 2 * arch.d_h), &mut s);
                let heads = std::array::from_fn(|_| Mlp::he_init(&[arch.d_h, arch.d_c], &mut s));
                Decoder::Disentangled {
                    encoder: Encoder {
                        trunk,
                        d_h: arch.d_h,
                    },
                    heads: Heads(heads),
                }
            }
        }
    }

    /// Multiplies the weights of every output layer (the straightforward
    /// MLPs' last layers and the three heads) by `scale`.
    pub fn scale_output_layers(&mut self, scale: f64) {
        let outputs: Vec<&mut Mlp> = match self {
            Decoder::Straightforward { mlps } => mlps.iter_mut().collect(),
            Decoder::Disentangled { heads, .. } => heads.0.iter_mut().collect(),
        };
        for m in outputs {
            m.layers.last_mut().unwrap().weight *= scale;
        }
    }

    pub fn method(&self) -> Method {
        match self {
            Decoder::Straightforward { .. } => Method::Straightforward,
            Decoder::Disentangled { .. } => Method::Disentangled,
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            Decoder::Straightforward { mlps } => Architecture {
                d_f: mlps[0].in_dim(),
                d_c: mlps[0].out_dim(),
                d_h: 0,
                hidden: if mlps[0].layers.len() > 1 {
                    mlps[0].layers[0].weight.nrows()
                } else {
                    0
                },
            },
            Decoder::Disentangled { encoder, heads } => Architecture {
                d_f: encoder.trunk.in_dim(),
                d_c: heads.0[0].out_dim(),
                d_h: encoder.d_h,
                hidden: if encoder.trunk.layers.len() > 1 {
                    encoder.trunk.layers[0].weight.nrows()
                } else {
                    0
                },
            },
        }
    }

    /// Same shapes, all zeros (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Mlp| Mlp::zeros(&m.dims());
        match self {
            Decoder::Straightforward { mlps } => Decoder::Straightforward {
                mlps: std::array::from_fn(|i| z(&mlps[i])),
            },
            Decoder::Disentangled { encoder, heads } => Decoder::Disentangled {
                encoder: Encoder {
                    trunk: z(&encoder.trunk),
                    d_h: encoder.d_h,
                },
                heads: Heads(std::array::from_fn(|i| z(&heads.0[i]))),
            },
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t, _| n += t.len());
        n
    }

    /// Predicted embeddings for offsets 0, 1, 2 (`d_c x B` each).
    pub fn predict_batch(&self, batch: &Batch) -> [DMatrix<f64>; OFFSETS] {
        match self {
            Decoder::Straightforward { mlps } => {
                std::array::from_fn(|i| mlps[i].forward_batch(&batch.f_t).acts.pop_last())
            }
            Decoder::Disentangled { encoder, heads } => {
                let b = batch.len();
                let d_h = encoder.d_h;
                let h = encoder.trunk.forward_batch(&batch.f_t).acts.pop_last();
                let before = h.rows(0, d_h).clone_owned();
                let now = h.rows(d_h, d_h).clone_owned();
                debug_assert_eq!(now.ncols(), b);
                [
                    heads.0[0].forward_batch(&now).acts.pop_last(),
                    heads.0[1].forward_batch(&before).acts.pop_last(),
                    heads.0[2].forward_batch(&before).acts.pop_last(),
                ]
            }
        }
    }

    /// Batch-mean loss and, when `want_grad`, its exact gradient with respect
    /// to every parameter.
    pub fn loss_and_grad(
        &self,
        batch: &Batch,
        cfg: &TrainConfig,
        want_grad: bool,
    ) -> Result<(LossReport, Option<Decoder>)> {
        let arch = self.architecture();
        batch.check(&arch)?;
        let b = batch.len();
        let mut grads = want_grad.then(|| self.zeros_like());
        let report = match self {
            Decoder::Straightforward { mlps } => {
                let caches: Vec<_> = mlps.iter().map(|m| m.forward_batch(&batch.f_t)).collect();
                let preds: [&DMatrix<f64>; OFFSETS] = std::array::from_fn(|i| caches[i].output());
                let (mse, per) = batch_mse(&preds, &batch.targets);
                if let Some(Decoder::Straightforward { mlps: g }) = grads.as_mut() {
                    for i in 0..OFFSETS {
                        let d = mse_grad(preds[i], &batch.targets[i], b);
                        mlps[i].backward(&caches[i], d, &mut g[i]);
                    }
                }
                LossReport {
                    mse,
                    infonce: 0.0,
                    total: mse,
                    per_offset_mse: per,
                }
            }
            Decoder::Disentangled { encoder, heads } => {
                let d_h = encoder.d_h;
                // previous signals in columns 0..B, current in B..2B
                let mut x = DMatrix::zeros(arch.d_f, 2 * b);
                x.columns_mut(0, b).copy_from(&batch.f_prev);
                x.columns_mut(b, b).copy_from(&batch.f_t);
                let tc = encoder.trunk.forward_batch(&x);
                let h = tc.output();
                let b_prev = h.view((0, 0), (d_h, b)).clone_owned();
                let n_prev = h.view((d_h, 0), (d_h, b)).clone_owned();
                let b_t = h.view((0, b), (d_h, b)).clone_owned();
                let n_t = h.view((d_h, b), (d_h, b)).clone_owned();
                let hc = [
                    heads.0[0].forward_batch(&n_t),
                    heads.0[1].forward_batch(&b_t),
                    heads.0[2].forward_batch(&b_t),
                ];
                let preds: [&DMatrix<f64>; OFFSETS] = std::array::from_fn(|i| hc[i].output());
                let (mse, per) = batch_mse(&preds, &batch.targets);

                // With alpha = 0 the contrastive term is only reported, so
                // samples with a zero-norm component are left out of it.
                let contrastive_grad = want_grad && cfg.alpha != 0.0;
                let mut infonce = 0.0;
                let mut counted = 0usize;
                let mut d_h_mat = contrastive_grad.then(|| DMatrix::<f64>::zeros(2 * d_h, 2 * b));
                for i in 0..b {
                    let res = infonce_with_grad(
                        b_t.column(i).as_slice(),
                        n_t.column(i).as_slice(),
                        b_prev.column(i).as_slice(),
                        n_prev.column(i).as_slice(),
                        cfg.tau,
                        contrastive_grad,
                    );
                    let (l, g) = match res {
                        Err(Error::Degenerate(_)) if cfg.alpha == 0.0 => continue,
                        other => other?,
                    };
                    infonce += l;
                    counted += 1;
                    if let (Some(dh), Some([gbt, gnt, gbp, gnp])) = (d_h_mat.as_mut(), g) {
                        let scale = cfg.alpha / b as f64;
                        for r in 0..d_h {
                            dh[(r, b + i)] += scale * gbt[r];
                            dh[(d_h + r, b + i)] += scale * gnt[r];
                            dh[(r, i)] += scale * gbp[r];
                            dh[(d_h + r, i)] += scale * gnp[r];
                        }
                    }
                }
                if counted > 0 {
                    infonce /= counted as f64;
                }

                if let Some(Decoder::Disentangled {
                    encoder: ge,
                    heads: gh,
                }) = grads.as_mut()
                {
                    let mut dh = d_h_mat.unwrap_or_else(|| DMatrix::zeros(2 * d_h, 2 * b));
                    let d_now = heads.0[0].backward(
                        &hc[0],
                        mse_grad(preds[0], &batch.targets[0], b),
                        &mut gh.0[0],
                    );
                    let d_b1 = heads.0[1].backward(
                        &hc[1],
                        mse_grad(preds[1], &batch.targets[1], b),
                        &mut gh.0[1],
                    );
                    let d_b2 = heads.0[2].backward(
                        &hc[2],
                        mse_grad(preds[2], &batch.targets[2], b),
                        &mut gh.0[2],
                    );
                    let mut cur = dh.view_mut((0, b), (d_h, b));
                    cur += &d_b1;
                    cur += &d_b2;
                    let mut cur = dh.view_mut((d_h, b), (d_h, b));
                    cur += &d_now;
                    encoder.trunk.backward(&tc, dh, &mut ge.trunk);
                }
                LossReport {
                    mse,
                    infonce,
                    total: if cfg.alpha == 0.0 {
                        mse
                    } else {
                        mse + cfg.alpha * infonce
                    },
                    per_offset_mse: per,
                }
            }
        };
        if !report.total.is_finite() {
            return Err(Error::NonFinite {
                path: "loss".into(),
            });
        }
        if let Some(g) = &grads {
            let mut bad = None;
            g.visit(&mut |path, t, _| {
                if bad.is_none() && t.iter().any(|v| !v.is_finite()) {
                    bad = Some(path.to_string());
                }
            });
            if let Some(path) = bad {
                return Err(Error::NonFinite {
                    path: format!("gradient of {path}"),
                });
            }
        }
        Ok((report, grads))
    }
}

trait PopLast {
    fn pop_last(self) -> DMatrix<f64>;
}

impl PopLast for Vec<DMatrix<f64>> {
    fn pop_last(mut self) -> DMatrix<f64> {
        self.pop().unwrap()
    }
}

/// Mean over samples of the summed per-offset MSE, plus per-offset means.
fn batch_mse(
    preds: &[&DMatrix<f64>; OFFSETS],
    targets: &[DMatrix<f64>; OFFSETS],
) -> (f64, [f64; OFFSETS]) {
    let mut per = [0.0; OFFSETS];
    for i in 0..OFFSETS {
        let (d, b) = preds[i].shape();
        per[i] = (preds[i] - &targets[i]).norm_squared() / (d * b) as f64;
    }
    (per.iter().sum(), per)
}

fn mse_grad(pred: &DMatrix<f64>, target: &DMatrix<f64>, b: usize) -> DMatrix<f64> {
    let scale = 2.0 / (pred.nrows() * b) as f64;
    (pred - target) * scale
}

impl Params for Decoder {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a [f64], bool)) {
        match self {
            Decoder::Straightforward { mlps } => {
                for (i, m) in mlps.iter().enumerate() {
                    m.visit(&mut |p, t, bias| f(&format!("mlp{i}.{p}"), t, bias));
                }
            }
            Decoder::Disentangled { encoder, heads } => {
                encoder
                    .trunk
                    .visit(&mut |p, t, bias| f(&format!("trunk.{p}"), t, bias));
                for (i, m) in heads.0.iter().enumerate() {
                    m.visit(&mut |p, t, bias| f(&format!("head{i}.{p}"), t, bias));
                }
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64], bool)) {
        match self {
            Decoder::Straightforward { mlps } => {
                for (i, m) in mlps.iter_mut().enumerate() {
                    m.visit_mut(&mut |p, t, bias| f(&format!("mlp{i}.{p}"), t, bias));
                }
            }
            Decoder::Disentangled { encoder, heads } => {
                encoder
                    .trunk
                    .visit_mut(&mut |p, t, bias| f(&format!("trunk.{p}"), t, bias));
                for (i, m) in heads.0.iter_mut().enumerate() {
                    m.visit_mut(&mut |p, t, bias| f(&format!("head{i}.{p}"), t, bias));
                }
            }
        }
    }
}

/// Samples as columns: signals at `t` and `t-1`, and targets per offset.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub f_t: DMatrix<f64>,
    pub f_prev: DMatrix<f64>,
    pub targets: [DMatrix<f64>; OFFSETS],
}

impl Batch {
    pub fn from_windows(windows: &[&WindowSample]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let (d_f, d_c) = (first.fmri_t.len(), first.target_embeddings[0].len());
        let n = windows.len();
        for w in windows {
            if w.fmri_t.len() != d_f || w.fmri_prev.len() != d_f {
                return Err(Error::dims(
                    format!("signal of window {}", w.anchor),
                    d_f,
                    w.fmri_t.len(),
                ));
            }
            if let Some(e) = w.target_embeddings.iter().find(|e| e.len() != d_c) {
                return Err(Error::dims(
                    format!("target of window {}", w.anchor),
                    d_c,
                    e.len(),
                ));
            }
        }
        let cols = |get: &dyn Fn(&WindowSample) -> &[f32], rows: usize| {
            DMatrix::from_fn(rows, n, |r, c| f64::from(get(windows[c])[r]))
        };
        Ok(Batch {
            f_t: cols(&|w| &w.fmri_t, d_f),
            f_prev: cols(&|w| &w.fmri_prev, d_f),
            targets: std::array::from_fn(|i| cols(&|w| &w.target_embeddings[i], d_c)),
        })
    }

    pub fn len(&self) -> usize {
        self.f_t.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, arch: &Architecture) -> Result<()> {
        if self.f_t.nrows() != arch.d_f {
            return Err(Error::dims(
                "batch signal width (d_f)",
                arch.d_f,
                self.f_t.nrows(),
            ));
        }
        if self.targets[0].nrows() != arch.d_c {
            return Err(Error::dims(
                "batch target width (d_c)",
                arch.d_c,
                self.targets[0].nrows(),
            ));
        }
        if self.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        Ok(())
    }
}

/// Components and predictions for one consecutive signal pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DisentangledOutput {
    pub components: Components,
    /// Predictions for offsets 0, 1, 2.
    pub preds: [Vec<f64>; OFFSETS],
}

/// Single-sample forward pass: both signals go through the same trunk;
/// `P_t = head0(now_t)`, `P_{t-1} = head1(before_t)`, `P_{t-2} = head2(before_t)`.
pub fn forward_disentangled(
    encoder: &Encoder,
    heads: &Heads,
    f_prev: &[f64],
    f_t: &[f64],
) -> Result<DisentangledOutput> {
    let d_h = encoder.d_h;
    let hp = encoder.trunk.forward(f_prev)?;
    let ht = encoder.trunk.forward(f_t)?;
    if hp.len() != 2 * d_h {
        return Err(Error::dims("trunk output (2 d_h)", 2 * d_h, hp.len()));
    }
    let components = Components {
        b_prev: hp[..d_h].to_vec(),
        n_prev: hp[d_h..].to_vec(),
        b_t: ht[..d_h].to_vec(),
        n_t: ht[d_h..].to_vec(),
    };
    let preds = [
        heads.0[0].forward(&components.n_t)?,
        heads.0[1].forward(&components.b_t)?,
        heads.0[2].forward(&components.b_t)?,
    ];
    Ok(DisentangledOutput { components, preds })
}

/// `mse + alpha * infonce` for one sample.
pub fn total_loss<T: AsRef<[f64]>>(
    out: &DisentangledOutput,
    targets: &[T; OFFSETS],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let (mse, per) = loss_mse(&out.preds, targets)?;
    let c = &out.components;
    let infonce = loss_infonce(&c.b_t, &c.n_t, &c.b_prev, &c.n_prev, cfg.tau)?;
    Ok(LossReport {
        mse,
        infonce,
        total: mse + cfg.alpha * infonce,
        per_offset_mse: per,
    })
}
