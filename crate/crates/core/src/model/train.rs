use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::adamw::{adamw_step, AdamWState};
use super::decoder::{Batch, Decoder};
use super::loss::OFFSETS;
use super::{LossReport, Method, TrainConfig};
use crate::dataset::WindowSample;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

const EVAL_CHUNK: usize = 256;

/// One row of the loss trace. Epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub split: String,
    pub mse: f64,
    pub infonce: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Decoder,
    pub trace: Vec<EpochLoss>,
}

pub fn train_straightforward(
    train_set: &[WindowSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train(Method::Straightforward, train_set, &[], cfg)
}

pub fn train_disentangled(train_set: &[WindowSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train(Method::Disentangled, train_set, &[], cfg)
}

/// Mini-batch AdamW. Batches are reshuffled every epoch from the
/// `"schedule"` stream and a trailing partial batch is dropped. The trace
/// holds the full train loss (and validation loss when `val` is non-empty)
/// before training and after each epoch.
pub fn train(
    method: Method,
    train_set: &[WindowSample],
    val: &[WindowSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = train_set
        .first()
        .ok_or_else(|| Error::InvalidArgument("training set is empty".into()))?;
    if cfg.batch_size > train_set.len() {
        return Err(Error::config(
            "batch_size",
            format!(
                "{} exceeds the {} training windows",
                cfg.batch_size,
                train_set.len()
            ),
        ));
    }
    let arch = cfg.architecture(first.fmri_t.len(), first.target_embeddings[0].len());
    let mut model = Decoder::init(method, &arch, cfg.seed);
    if cfg.output_init_scale != 1.0 {
        model.scale_output_layers(cfg.output_init_scale);
    }
    let mut state = AdamWState::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffler = Stream::new(cfg.seed, rng::SCHEDULE);
    let mut trace = Vec::new();
    record(&mut trace, 0, &model, train_set, val, cfg)?;
    for epoch in 1..=cfg.epochs {
        shuffler.shuffle(&mut order);
        for chunk in order.chunks_exact(cfg.batch_size) {
            let refs: Vec<&WindowSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = Batch::from_windows(&refs)?;
            let (_, grads) = model.loss_and_grad(&batch, cfg, true)?;
            adamw_step(
                &mut model,
                &grads.expect("gradient requested"),
                &mut state,
                cfg,
            )?;
        }
        record(&mut trace, epoch, &model, train_set, val, cfg)?;
        log::info!(
            "{method} epoch {epoch}/{}: train total {:.6}",
            cfg.epochs,
            trace
                .iter()
                .rev()
                .find(|r| r.split == "train")
                .unwrap()
                .total
        );
    }
    Ok(TrainOutcome { model, trace })
}

fn record(
    trace: &mut Vec<EpochLoss>,
    epoch: usize,
    model: &Decoder,
    train_set: &[WindowSample],
    val: &[WindowSample],
    cfg: &TrainConfig,
) -> Result<()> {
    for (split, set) in [("train", train_set), ("val", val)] {
        if set.is_empty() {
            continue;
        }
        let r = evaluate(model, set, cfg)?;
        trace.push(EpochLoss {
            epoch,
            split: split.into(),
            mse: r.mse,
            infonce: r.infonce,
            total: r.total,
        });
    }
    Ok(())
}

/// Sample-weighted loss over `windows`.
pub fn evaluate(
    model: &Decoder,
    windows: &[WindowSample],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    if windows.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate on zero windows".into(),
        ));
    }
    let mut acc = LossReport {
        mse: 0.0,
        infonce: 0.0,
        total: 0.0,
        per_offset_mse: [0.0; OFFSETS],
    };
    for chunk in windows.chunks(EVAL_CHUNK) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let (r, _) = model.loss_and_grad(&Batch::from_windows(&refs)?, cfg, false)?;
        let w = chunk.len() as f64 / windows.len() as f64;
        acc.mse += w * r.mse;
        acc.infonce += w * r.infonce;
        acc.total += w * r.total;
        for i in 0..OFFSETS {
            acc.per_offset_mse[i] += w * r.per_offset_mse[i];
        }
    }
    Ok(acc)
}

/// Predictions per offset, one column per window.
pub fn predict(model: &Decoder, windows: &[WindowSample]) -> Result<[DMatrix<f64>; OFFSETS]> {
    let d_c = model.architecture().d_c;
    let mut out: [DMatrix<f64>; OFFSETS] =
        std::array::from_fn(|_| DMatrix::zeros(d_c, windows.len()));
    let mut start = 0;
    for chunk in windows.chunks(EVAL_CHUNK) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let preds = model.predict_batch(&Batch::from_windows(&refs)?);
        for i in 0..OFFSETS {
            out[i].columns_mut(start, chunk.len()).copy_from(&preds[i]);
        }
        start += chunk.len();
    }
    Ok(out)
}

pub fn write_trace_csv(trace: &[EpochLoss], mut out: impl Write) -> Result<()> {
    writeln!(out, "epoch,split,mse,infonce,total")?;
    for r in trace {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.split, r.mse, r.infonce, r.total
        )?;
    }
    Ok(())
}
