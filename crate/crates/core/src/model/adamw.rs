use super::mlp::Params;
use super::TrainConfig;
use crate::error::{Error, Result};

/// First and second moments per tensor, in visit order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

/// One decoupled-decay Adam update of `theta` in place. `step` is 1-based.
/// Decay is skipped when `decay` is false (biases).
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    cfg: &TrainConfig,
    decay: bool,
) {
    let bc1 = 1.0 - cfg.beta1.powf(step as f64);
    let bc2 = 1.0 - cfg.beta2.powf(step as f64);
    let wd = if decay { cfg.weight_decay } else { 0.0 };
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + wd * theta[i]);
    }
}

/// Applies one update to every tensor of `params` using the matching tensor
/// of `grads`.
pub fn adamw_step<P: Params>(
    params: &mut P,
    grads: &P,
    state: &mut AdamWState,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut gs: Vec<(&str, &[f64])> = Vec::new();
    let mut names = Vec::new();
    grads.visit(&mut |name, t, _| {
        names.push(name.to_string());
        gs.push(("", t));
    });
    if state.m.is_empty() {
        state.m = gs.iter().map(|(_, g)| vec![0.0; g.len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let step = state.step;
    let mut idx = 0;
    let mut err = None;
    params.visit_mut(&mut |name, theta, is_bias| {
        if err.is_some() {
            return;
        }
        let Some((_, g)) = gs.get(idx) else {
            err = Some(Error::dims("optimizer tensors", idx, idx + 1));
            return;
        };
        if g.len() != theta.len() || state.m[idx].len() != theta.len() {
            err = Some(Error::dims(
                format!("gradient of {name}"),
                theta.len(),
                g.len(),
            ));
            return;
        }
        adamw_update(
            theta,
            g,
            &mut state.m[idx],
            &mut state.v[idx],
            step,
            cfg,
            !is_bias,
        );
        if theta.iter().any(|v| !v.is_finite()) {
            err = Some(Error::NonFinite {
                path: name.to_string(),
            });
        }
        idx += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if idx != gs.len() {
        return Err(Error::dims("optimizer tensors", gs.len(), idx));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mlp;

    fn cfg() -> TrainConfig {
        TrainConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // m_hat = g, v_hat = g^2, so the step is lr * (sign(g) + wd * theta) up to eps.
        let mut theta = [1.0, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adamw_update(&mut theta, &[0.5, -3.0], &mut m, &mut v, 1, &cfg(), true);
        assert!((theta[0] - (1.0 - 0.1 * (1.0 + 0.01))).abs() < 1e-8);
        assert!((theta[1] - (-2.0 - 0.1 * (-1.0 - 0.02))).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut theta = [2.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut theta, &[0.0], &mut m, &mut v, 1, &cfg(), true);
        assert!((theta[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
        let mut b = [2.0];
        adamw_update(&mut b, &[0.0], &mut m, &mut v, 1, &cfg(), false);
        assert_eq!(b[0], 2.0);
    }

    #[test]
    fn biases_are_not_decayed() {
        let mut p = Mlp::zeros(&[1, 1]);
        p.layers[0].weight[(0, 0)] = 1.0;
        p.layers[0].bias[0] = 1.0;
        let g = Mlp::zeros(&[1, 1]);
        let mut st = AdamWState::default();
        adamw_step(&mut p, &g, &mut st, &cfg()).unwrap();
        assert!(p.layers[0].weight[(0, 0)] < 1.0);
        assert_eq!(p.layers[0].bias[0], 1.0);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Mlp::zeros(&[2, 1]);
        let g = Mlp::zeros(&[3, 1]);
        assert!(adamw_step(&mut p, &g, &mut AdamWState::default(), &cfg()).is_err());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut theta = [5.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        let c = TrainConfig {
            weight_decay: 0.0,
            ..cfg()
        };
        for step in 1..=500 {
            let g = [2.0 * (theta[0] - 1.0)];
            adamw_update(&mut theta, &g, &mut m, &mut v, step, &c, true);
        }
        assert!((theta[0] - 1.0).abs() < 0.05);
    }
}
