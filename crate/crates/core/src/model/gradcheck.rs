use super::decoder::{Batch, Decoder};
use super::mlp::Params;
use super::TrainConfig;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|g_a - g_n| / max(1e-8, |g_a| + |g_n|)` over checked entries.
    pub max_rel_err: f64,
    /// Parameter path and index of the worst entry.
    pub worst: String,
    pub checked: usize,
}

/// Compares analytic gradients with central differences of step `h`.
/// Every `stride`-th entry of each tensor is checked (1 checks all).
pub fn grad_check(
    model: &Decoder,
    batch: &Batch,
    cfg: &TrainConfig,
    h: f64,
    stride: usize,
) -> Result<GradCheckReport> {
    let stride = stride.max(1);
    let (_, grads) = model.loss_and_grad(batch, cfg, true)?;
    let grads = grads.expect("gradient requested");
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    grads.visit(&mut |name, t, _| analytic.push((name.to_string(), t.to_vec())));

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut probe = model.clone();
    for (tensor, (name, ga)) in analytic.iter().enumerate() {
        for i in (0..ga.len()).step_by(stride) {
            let plus = perturbed_loss(&mut probe, tensor, i, h, batch, cfg)?;
            let minus = perturbed_loss(&mut probe, tensor, i, -h, batch, cfg)?;
            let gn = (plus - minus) / (2.0 * h);
            let rel = (ga[i] - gn).abs() / (ga[i].abs() + gn.abs()).max(1e-8);
            if rel > report.max_rel_err || report.checked == 0 {
                report.max_rel_err = rel.max(report.max_rel_err);
                report.worst = format!("{name}[{i}]");
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

fn perturbed_loss(
    model: &mut Decoder,
    tensor: usize,
    i: usize,
    delta: f64,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut original = 0.0;
    nudge(model, tensor, |t| {
        original = t[i];
        t[i] += delta;
    });
    let loss = model.loss_and_grad(batch, cfg, false).map(|(r, _)| r.total);
    nudge(model, tensor, |t| t[i] = original);
    loss
}

fn nudge(model: &mut Decoder, tensor: usize, mut f: impl FnMut(&mut [f64])) {
    let mut idx = 0;
    model.visit_mut(&mut |_, t, _| {
        if idx == tensor {
            f(t);
        }
        idx += 1;
    });
}
