//! Decoders from one signal to the embeddings of the current and two
//! previous stimuli.
//!
//! Two variants share the training loop:
//!
//! * **straightforward**: three independent MLPs, each mapping `F_t` to one
//!   offset, trained on the summed MSE;
//! * **disentangled**: a shared trunk encodes `F_{t-1}` and `F_t`, splits
//!   each code into a `before` and a `now` half, and three heads decode
//!   `now_t -> C_t`, `before_t -> C_{t-1}` and `before_t -> C_{t-2}`. An
//!   InfoNCE term pulls `before_t` towards `now_{t-1}`.
//!
//! Gradients are derived by hand; [`grad_check`] compares them with central
//! differences.

mod adamw;
mod checkpoint;
mod decoder;
mod gradcheck;
mod loss;
mod mlp;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use adamw::{adamw_step, adamw_update, AdamWState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
};
pub use decoder::{
    forward_disentangled, total_loss, Batch, Decoder, DisentangledOutput, Encoder, Heads,
};
pub use gradcheck::{grad_check, GradCheckReport};
pub use loss::{
    cosine_sim, infonce_from_similarities, loss_infonce, loss_mse, Components, OFFSETS,
};
pub use mlp::{Layer, Mlp, MlpCache, Params};
pub use train::{
    evaluate, predict, train, train_disentangled, train_straightforward, write_trace_csv,
    EpochLoss, TrainOutcome,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "sf")]
    Straightforward,
    #[serde(rename = "dis")]
    Disentangled,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Straightforward => "sf",
            Method::Disentangled => "dis",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sf" => Ok(Method::Straightforward),
            "dis" => Ok(Method::Disentangled),
            other => Err(Error::config(
                "method",
                format!("unknown method {other:?} (sf|dis)"),
            )),
        }
    }
}

/// Layer widths. `hidden == 0` removes the hidden layer, making every
/// network a single affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub d_f: usize,
    pub d_c: usize,
    pub d_h: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the InfoNCE term.
    pub alpha: f64,
    /// Softmax temperature of the InfoNCE term.
    pub tau: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Width of each of the `before` / `now` halves.
    pub d_h: usize,
    pub hidden: usize,
    /// Factor on the He-normal initial weights of the output layers. Unit
    /// norm targets have entries far smaller than a He-scaled output, so
    /// values well below 1 shorten the initial transient.
    pub output_init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.01,
            tau: 0.07,
            lr: 1e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 30,
            batch_size: 32,
            seed: 1,
            d_h: 512,
            hidden: 1024,
            output_init_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, bool); 10] = [
            ("output_init_scale", self.output_init_scale.is_finite()),
            ("alpha", self.alpha >= 0.0 && self.alpha.is_finite()),
            ("tau", self.tau > 0.0 && self.tau.is_finite()),
            ("lr", self.lr >= 0.0 && self.lr.is_finite()),
            ("weight_decay", self.weight_decay >= 0.0),
            ("beta1", (0.0..1.0).contains(&self.beta1)),
            ("beta2", (0.0..1.0).contains(&self.beta2)),
            ("eps", self.eps > 0.0),
            ("batch_size", self.batch_size > 0),
            ("d_h", self.d_h > 0),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((field, _)) => Err(Error::config(*field, "out of range")),
            None => Ok(()),
        }
    }

    pub fn architecture(&self, d_f: usize, d_c: usize) -> Architecture {
        Architecture {
            d_f,
            d_c,
            d_h: self.d_h,
            hidden: self.hidden,
        }
    }
}

/// Loss of one batch (means over its samples).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mse: f64,
    pub infonce: f64,
    pub total: f64,
    pub per_offset_mse: [f64; OFFSETS],
}
