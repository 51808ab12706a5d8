//! Mini-batch training with Adam, gradient clipping and best-validation selection.

use std::io::Write;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Seq2Seq;
use crate::corpus::Record;
use crate::error::{Error, Result};
use crate::nn::optim::{adam_step, clip_gradients, AdamConfig, OptimizerState};
use crate::nn::Grads;
use crate::rng::Rng64;

/// Records per parallel work unit. Partial sums are always combined in chunk
/// order so results do not depend on the thread count.
const CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
    /// Stop after this many epochs without validation improvement; 0 disables.
    pub patience: usize,
    /// Append one JSON object per epoch to this file.
    pub metrics_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 32, learning_rate: 1e-3, max_grad_norm: 5.0, seed: 1, patience: 0, metrics_path: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_ppl: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: Seq2Seq,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

type Pair = (Vec<usize>, Vec<usize>);

fn encode_pairs(model: &Seq2Seq, records: &[Record]) -> Vec<Pair> {
    records.iter().map(|r| model.encode_record(r)).collect()
}

fn tokens(pair: &Pair) -> usize {
    pair.1.len() + 1
}

/// Mean per-token loss (target tokens plus EOS) without dropout.
pub fn evaluate_loss(model: &Seq2Seq, records: &[Record]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    mean_loss(model, &encode_pairs(model, records))
}

fn mean_loss(model: &Seq2Seq, pairs: &[Pair]) -> Result<f64> {
    let parts: Vec<Result<f64>> = pairs
        .par_chunks(CHUNK)
        .map(|chunk| chunk.iter().map(|(s, t)| model.loss(s, t)).sum())
        .collect();
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    let n: usize = pairs.iter().map(tokens).sum();
    Ok(total / n as f64)
}

fn record_rng(seed: u64, epoch: usize, index: usize) -> Rng64 {
    Rng64::new(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
}

fn batch_gradient(model: &Seq2Seq, pairs: &[Pair], batch: &[usize], seed: u64, epoch: usize) -> Result<(f64, usize, Grads)> {
    let dropout = model.config.dropout > 0.0;
    let parts: Vec<Result<(f64, Grads)>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = model.params.zero_grads();
            let mut loss = 0.0;
            for &i in chunk {
                let (s, t) = &pairs[i];
                let mut rng = record_rng(seed, epoch, i);
                let (l, gi) = model.loss_and_grads(s, t, dropout.then_some(&mut rng))?;
                loss += l;
                g.add_assign(&gi);
            }
            Ok((loss, g))
        })
        .collect();
    let mut total = model.params.zero_grads();
    let mut loss = 0.0;
    for p in parts {
        let (l, g) = p?;
        loss += l;
        total.add_assign(&g);
    }
    let n: usize = batch.iter().map(|&i| tokens(&pairs[i])).sum();
    Ok((loss, n, total))
}

/// Trains `model` and returns the best-validation parameters.
/// `on_epoch` sees each epoch's metrics as they are produced.
pub fn train(mut model: Seq2Seq, train: &[Record], valid: &[Record], cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<TrainOutcome> {
    if train.is_empty() || valid.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::ConfigInvalid("epochs and batch_size must be positive".into()));
    }
    let mut log = match &cfg.metrics_path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            Some((p.clone(), std::fs::File::create(p).map_err(|e| Error::io(p, e))?))
        }
        None => None,
    };
    let train_pairs = encode_pairs(&model, train);
    let valid_pairs = encode_pairs(&model, valid);
    let hyper = AdamConfig { lr: cfg.learning_rate, ..AdamConfig::default() };
    let mut opt = OptimizerState::new(&model.params, hyper);
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, 0usize, model.params.clone());

    for epoch in 1..=cfg.epochs {
        Rng64::derived(cfg.seed, &format!("epoch-{epoch}")).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut token_sum = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, n, mut grads) = batch_gradient(&model, &train_pairs, batch, cfg.seed, epoch)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss);
            }
            grads.scale(1.0 / n as f64);
            clip_gradients(&mut grads, cfg.max_grad_norm);
            adam_step(&mut model.params, &grads, &mut opt)?;
            loss_sum += loss;
            token_sum += n;
        }
        let valid_loss = mean_loss(&model, &valid_pairs)?;
        let metrics = EpochMetrics { epoch, train_loss: loss_sum / token_sum as f64, valid_loss, valid_ppl: valid_loss.exp() };
        if let Some((path, file)) = log.as_mut() {
            let line = serde_json::to_string(&metrics)?;
            writeln!(file, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        on_epoch(&metrics);
        history.push(metrics);
        if valid_loss < best.0 {
            best = (valid_loss, epoch, model.params.clone());
        } else if cfg.patience > 0 && epoch - best.1 >= cfg.patience {
            break;
        }
    }
    let (_, best_epoch, params) = best;
    model.params = params;
    Ok(TrainOutcome { model, history, best_epoch })
}
