//! Base-model training: the phased masking curriculum, the Adam optimizer
//! with L2 regularization, early stopping on validation loss, and the
//! reconstruction-fidelity evaluation.
//!
//! A batch is processed as a fixed number of gradient shards whose results
//! are reduced in index order, so training is bitwise reproducible for a
//! given seed regardless of how many worker threads execute the shards.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activity::{CLASS_COUNT, SLOTS_PER_DAY};
use crate::encoding::{apply_mask, decode_slots, MaskSpec, MaskStrategy, SlotSequence};
use crate::loss::{combined_loss, masked_combined_loss, LossConfig, SlotTargets};
use crate::metrics::{evaluate, JsdReport, MetricsError};
use crate::model::{
    forward, init_model, Decoding, LayerGroup, Mode, ModelConfig, ModelError, ModelParams,
};
use crate::numerics::{Element, NumericsError, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("base training requires complete chains; example {index} has unobserved slots")]
    IncompleteTrainingData { index: usize },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 regularization strength; applied as `grad += l2 * w`.
    pub l2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, l2: 1e-5 }
    }
}

/// Adam with per-parameter step counts, so a group unfrozen mid-training
/// starts its bias correction fresh. Frozen parameters receive no gradient
/// and are never touched.
pub struct Adam<T: Element> {
    pub cfg: AdamConfig,
    state: BTreeMap<String, AdamSlot<T>>,
}

struct AdamSlot<T> {
    step: u64,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Element> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, state: BTreeMap::new() }
    }

    /// Applies one update from gradients aligned with the parameter entries.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &[Option<Tensor<T>>]) {
        let lr = T::from_f64(self.cfg.lr);
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let eps = T::from_f64(self.cfg.eps);
        let l2 = T::from_f64(self.cfg.l2);
        let one = T::one();

        let names: Vec<String> = params.entries().iter().map(|e| e.name.clone()).collect();
        for (name, grad) in names.iter().zip(grads) {
            let Some(grad) = grad else { continue };
            let entry = params.entry_mut(name).expect("entry exists");
            let n = entry.tensor.len();
            let slot = self.state.entry(name.clone()).or_insert_with(|| AdamSlot {
                step: 0,
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            slot.step += 1;
            let bc1 = one - b1.powi(slot.step as i32);
            let bc2 = one - b2.powi(slot.step as i32);
            let w = entry.tensor.data_mut();
            for i in 0..n {
                let g = grad.data()[i] + l2 * w[i];
                slot.m[i] = b1 * slot.m[i] + (one - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (one - b2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                w[i] = w[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs trained on unmasked data.
    pub warmup_epochs: usize,
    /// First epoch of the high-mask phase; the middle phase runs on
    /// `phase2_fraction` masking in `[warmup_epochs, phase2_end)`.
    pub phase2_end: usize,
    pub phase2_fraction: f64,
    pub phase3_fraction: f64,
    pub optimizer: AdamConfig,
    /// Stop after this many epochs without a validation improvement;
    /// 0 disables early stopping.
    pub early_stop_patience: usize,
    pub val_fraction: f64,
    /// Recompute inverse-frequency class weights from the training split.
    pub auto_class_weights: bool,
    pub loss: LossConfig,
    /// Fixed shard count for batch gradients; results are reduced in shard
    /// order, keeping runs bitwise identical across thread counts.
    pub grad_shards: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk_default()
    }
}

impl TrainConfig {
    /// Desk-scale defaults: 30 epochs, batch 128, with phase boundaries
    /// scaled from the 5/120 warmup and 45/120 midpoint ratios.
    pub fn desk_default() -> Self {
        TrainConfig::scaled(30, 128)
    }

    /// Phase boundaries proportional to the reference 120-epoch protocol
    /// (5 warmup epochs, 40%-mask phase through epoch 45).
    pub fn scaled(epochs: usize, batch_size: usize) -> Self {
        let warmup = ((epochs as f64 * 5.0 / 120.0).round() as usize).max(1);
        let phase2_end = ((epochs as f64 * 45.0 / 120.0).round() as usize).max(warmup + 1);
        TrainConfig {
            epochs,
            batch_size,
            warmup_epochs: warmup,
            phase2_end,
            phase2_fraction: 0.4,
            phase3_fraction: 0.7,
            optimizer: AdamConfig::default(),
            early_stop_patience: 5,
            val_fraction: 0.2,
            auto_class_weights: true,
            loss: LossConfig::default(),
            grad_shards: 8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.warmup_epochs < self.phase2_end && self.phase2_end < self.epochs) {
            return Err(TrainError::InvalidConfig(format!(
                "need warmup {} < phase2_end {} < epochs {}",
                self.warmup_epochs, self.phase2_end, self.epochs
            )));
        }
        if self.batch_size == 0 || self.grad_shards == 0 {
            return Err(TrainError::InvalidConfig("batch_size and grad_shards must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(TrainError::InvalidConfig(format!("val_fraction {}", self.val_fraction)));
        }
        Ok(())
    }

    /// Mask fraction for an epoch under the phased curriculum.
    pub fn mask_fraction(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            0.0
        } else if epoch < self.phase2_end {
            self.phase2_fraction
        } else {
            self.phase3_fraction
        }
    }

    pub fn phase_name(&self, epoch: usize) -> &'static str {
        if epoch < self.warmup_epochs {
            "warmup"
        } else if epoch < self.phase2_end {
            "phase2"
        } else {
            "phase3"
        }
    }
}

/// Inverse-frequency class weights over observed slots: proportional to
/// 1/share, normalized to mean 1 over the classes present, then clipped to
/// [0.1, 10]. Classes absent from the data get the clip maximum.
pub fn compute_class_weights(dataset: &[SlotSequence]) -> Result<Vec<f64>, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut counts = vec![0u64; CLASS_COUNT];
    let mut total = 0u64;
    for seq in dataset {
        for slot in 0..SLOTS_PER_DAY {
            if seq.observed[slot] {
                let class = seq.tokens[slot] as usize - 1;
                if class < CLASS_COUNT {
                    counts[class] += 1;
                    total += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let raw: Vec<Option<f64>> = counts
        .iter()
        .map(|&c| (c > 0).then(|| total as f64 / c as f64))
        .collect();
    let seen: Vec<f64> = raw.iter().flatten().copied().collect();
    let mean = seen.iter().sum::<f64>() / seen.len() as f64;
    Ok(raw
        .iter()
        .map(|w| match w {
            Some(w) => (w / mean).clamp(0.1, 10.0),
            None => 10.0,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub mask_fraction: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "phase", "mask_fraction", "train_loss", "val_loss", "lr"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.phase.clone(),
                format!("{}", r.mask_fraction),
                format!("{}", r.train_loss),
                format!("{}", r.val_loss),
                format!("{}", r.lr),
            ])?;
        }
        w.flush()
    }
}

/// One training example: the (complete) sequence whose tokens are the
/// target, plus per-slot real/synthetic provenance when fine-tuning on
/// synthesized data.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub seq: SlotSequence,
    /// None: plain combined loss. Some: the transfer objective with
    /// per-slot real weighting.
    pub real_slots: Option<[bool; SLOTS_PER_DAY]>,
}

/// Derives a well-mixed per-example seed (splitmix64 over the inputs).
pub(crate) fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E3779B97F4A7C15) ^ b.wrapping_mul(0xD1B54A32D192ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Shared mini-batch fitting engine used by base training and transfer
/// fine-tuning. Runs one epoch and returns the mean shard loss.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_epoch<T: Element>(
    params: &mut ModelParams<T>,
    adam: &mut Adam<T>,
    examples: &[TrainExample],
    order: &[usize],
    mask_fraction: f64,
    loss_cfg: &LossConfig,
    batch_size: usize,
    grad_shards: usize,
    epoch_seed: u64,
) -> Result<f64, TrainError> {
    let mut epoch_loss = 0.0;
    let mut batches = 0usize;
    for (batch_no, batch_idx) in order.chunks(batch_size).enumerate() {
        let shard_size = batch_idx.len().div_ceil(grad_shards);
        let shards: Vec<&[usize]> = batch_idx.chunks(shard_size).collect();
        let frozen_params: &ModelParams<T> = params;

        let results: Vec<Result<(f64, Vec<Option<Tensor<T>>>), TrainError>> = shards
            .par_iter()
            .enumerate()
            .map(|(shard_no, shard)| {
                shard_loss_and_grads(
                    frozen_params,
                    examples,
                    shard,
                    mask_fraction,
                    loss_cfg,
                    derive_seed(epoch_seed, batch_no as u64, shard_no as u64),
                )
            })
            .collect();

        // Reduce in shard order: deterministic across thread counts.
        let mut total: Option<Vec<Option<Tensor<T>>>> = None;
        let mut loss_sum = 0.0;
        let shard_count = results.len();
        for result in results {
            let (loss, grads) = result?;
            loss_sum += loss;
            match &mut total {
                None => total = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(grads) {
                        match (a.as_mut(), g) {
                            (Some(a), Some(g)) => {
                                for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                                    *x += y;
                                }
                            }
                            (None, Some(g)) => *a = Some(g),
                            _ => {}
                        }
                    }
                }
            }
        }
        let scale = T::from_f64(1.0 / shard_count as f64);
        let mut grads = total.expect("at least one shard");
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x = *x * scale;
            }
        }
        adam.step(params, &grads);
        epoch_loss += loss_sum / shard_count as f64;
        batches += 1;
    }
    Ok(epoch_loss / batches.max(1) as f64)
}

/// Builds masked inputs for a shard, runs forward/backward, and returns the
/// shard loss with gradients in parameter-entry order.
fn shard_loss_and_grads<T: Element>(
    params: &ModelParams<T>,
    examples: &[TrainExample],
    shard: &[usize],
    mask_fraction: f64,
    loss_cfg: &LossConfig,
    shard_seed: u64,
) -> Result<(f64, Vec<Option<Tensor<T>>>), TrainError> {
    let (batch, targets, real) = assemble(examples, shard, mask_fraction, shard_seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(shard_seed, 0xD20, 0));
    let pass = forward(params, &batch, Mode::Train { rng: &mut dropout_rng })?;
    let mut graph = pass.graph;
    let loss = match &real {
        Some(flags) => masked_combined_loss(&mut graph, pass.probs, &targets, flags, loss_cfg)?,
        None => combined_loss(&mut graph, pass.probs, &targets, loss_cfg)?,
    };
    let loss_value = graph.value(loss).item().to_f64();
    let mut grads = graph.backward(loss)?;
    let by_entry: Vec<Option<Tensor<T>>> =
        pass.param_nodes.iter().map(|&id| grads.take(id)).collect();
    Ok((loss_value, by_entry))
}

/// Masks each selected example per the epoch fraction (strategy drawn
/// uniformly from the three) and concatenates the supervision.
fn assemble(
    examples: &[TrainExample],
    shard: &[usize],
    mask_fraction: f64,
    shard_seed: u64,
) -> (Vec<SlotSequence>, SlotTargets, Option<Vec<bool>>) {
    let mut batch = Vec::with_capacity(shard.len());
    let mut classes = Vec::with_capacity(shard.len() * SLOTS_PER_DAY);
    let mut has_target = Vec::with_capacity(shard.len() * SLOTS_PER_DAY);
    let mut newly_masked = Vec::with_capacity(shard.len() * SLOTS_PER_DAY);
    let any_real = shard.iter().any(|&i| examples[i].real_slots.is_some());
    let mut real: Vec<bool> = Vec::new();

    for (pos, &i) in shard.iter().enumerate() {
        let example = &examples[i];
        let example_seed = derive_seed(shard_seed, i as u64, pos as u64);
        let masked = if mask_fraction > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(example_seed);
            let strategy = MaskStrategy::ALL[rng.gen_range(0..3)];
            apply_mask(
                &example.seq,
                &MaskSpec { strategy, fraction: mask_fraction, rng_seed: example_seed },
            )
        } else {
            apply_mask(
                &example.seq,
                &MaskSpec { strategy: MaskStrategy::TimeSlot, fraction: 0.0, rng_seed: 0 },
            )
        };
        for slot in 0..SLOTS_PER_DAY {
            classes.push(masked.target[slot].saturating_sub(1) as u32);
            has_target.push(masked.target_mask[slot]);
            newly_masked.push(masked.newly_masked[slot]);
        }
        if any_real {
            match &example.real_slots {
                Some(flags) => real.extend_from_slice(flags),
                None => real.extend(std::iter::repeat_n(true, SLOTS_PER_DAY)),
            }
        }
        batch.push(masked.seq);
    }
    let targets = SlotTargets {
        classes,
        has_target,
        newly_masked: Some(newly_masked),
        batch: shard.len(),
        seq: SLOTS_PER_DAY,
    };
    (batch, targets, any_real.then_some(real))
}

/// Mean loss over a dataset in eval mode with fixed masking (for
/// comparable validation scores across epochs).
pub(crate) fn eval_loss<T: Element>(
    params: &ModelParams<T>,
    examples: &[TrainExample],
    mask_fraction: f64,
    loss_cfg: &LossConfig,
    batch_size: usize,
    seed: u64,
) -> Result<f64, TrainError> {
    let indices: Vec<usize> = (0..examples.len()).collect();
    let mut total = 0.0;
    let mut chunks = 0usize;
    for chunk in indices.chunks(batch_size) {
        let (batch, targets, real) = assemble(examples, chunk, mask_fraction, seed);
        let pass = forward(params, &batch, Mode::Eval)?;
        let mut graph = pass.graph;
        let loss = match &real {
            Some(flags) => {
                masked_combined_loss(&mut graph, pass.probs, &targets, flags, loss_cfg)?
            }
            None => combined_loss(&mut graph, pass.probs, &targets, loss_cfg)?,
        };
        total += graph.value(loss).item().to_f64();
        chunks += 1;
    }
    Ok(total / chunks.max(1) as f64)
}

/// Trains a base model on complete slot sequences with the phased masking
/// curriculum, restoring the best-validation parameters on early stop.
pub fn train_base<T: Element>(
    dataset: &[SlotSequence],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams<T>, TrainHistory), TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for (index, seq) in dataset.iter().enumerate() {
        if !seq.is_complete() {
            return Err(TrainError::IncompleteTrainingData { index });
        }
    }

    // Deterministic shuffle and train/val split.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    let val_len = ((dataset.len() as f64 * cfg.val_fraction) as usize).min(dataset.len() - 1);
    let (val_idx, train_idx) = indices.split_at(val_len);

    let train_examples: Vec<TrainExample> = train_idx
        .iter()
        .map(|&i| TrainExample { seq: dataset[i].clone(), real_slots: None })
        .collect();
    let val_examples: Vec<TrainExample> = val_idx
        .iter()
        .map(|&i| TrainExample { seq: dataset[i].clone(), real_slots: None })
        .collect();

    let mut loss_cfg = cfg.loss.clone();
    if cfg.auto_class_weights {
        let train_seqs: Vec<SlotSequence> =
            train_examples.iter().map(|e| e.seq.clone()).collect();
        loss_cfg.class_weights = compute_class_weights(&train_seqs)?;
    }

    let mut params: ModelParams<T> = init_model(model_cfg)?;
    params.set_trainable(&LayerGroup::ALL);
    let mut adam = Adam::new(cfg.optimizer);

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelParams<T>, usize)> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs {
        let fraction = cfg.mask_fraction(epoch);
        let mut order: Vec<usize> = (0..train_examples.len()).collect();
        let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, epoch as u64));
        for i in (1..order.len()).rev() {
            let j = order_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let train_loss = run_epoch(
            &mut params,
            &mut adam,
            &train_examples,
            &order,
            fraction,
            &loss_cfg,
            cfg.batch_size,
            cfg.grad_shards,
            derive_seed(cfg.seed, 2, epoch as u64),
        )?;
        // Validation uses the final-phase fraction with a fixed seed so the
        // score is comparable across epochs.
        let val_loss = if val_examples.is_empty() {
            train_loss
        } else {
            eval_loss(
                &params,
                &val_examples,
                cfg.phase3_fraction,
                &loss_cfg,
                cfg.batch_size,
                derive_seed(cfg.seed, 3, 0),
            )?
        };
        history.records.push(EpochRecord {
            epoch,
            phase: cfg.phase_name(epoch).to_string(),
            mask_fraction: fraction,
            train_loss,
            val_loss,
            lr: cfg.optimizer.lr,
        });

        let improved = best.as_ref().map_or(true, |(b, _, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, params.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                history.stopped_early = true;
                break;
            }
        }
    }

    let (_, best_params, best_epoch) = best.expect("at least one epoch ran");
    history.best_epoch = best_epoch;
    Ok((best_params, history))
}

/// Masks the test set, reconstructs it in sample mode, and scores the decoded
/// completions against the unmasked originals. Records the strategy mix.
pub fn evaluate_reconstruction<T: Element>(
    params: &ModelParams<T>,
    test: &[SlotSequence],
    mask_fraction: f64,
    strategies: &[MaskStrategy],
    decoding: Decoding,
    seed: u64,
) -> Result<JsdReport, TrainError> {
    if test.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if strategies.is_empty() {
        return Err(TrainError::InvalidConfig("no masking strategies".into()));
    }
    let date = chrono::NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date");
    let mut mix: BTreeMap<String, usize> = BTreeMap::new();
    let mut masked_inputs = Vec::with_capacity(test.len());
    for (i, seq) in test.iter().enumerate() {
        let example_seed = derive_seed(seed, 4, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(example_seed);
        let strategy = strategies[rng.gen_range(0..strategies.len())];
        *mix.entry(strategy.name().to_string()).or_default() += 1;
        let masked = apply_mask(
            seq,
            &MaskSpec { strategy, fraction: mask_fraction, rng_seed: example_seed },
        );
        masked_inputs.push(masked.seq);
    }

    // Chunked batched reconstruction; per-example sampling seeds are derived
    // from the example index, so chunking or threading cannot change output.
    let chunk_size = 64;
    let chunks: Vec<(usize, &[SlotSequence])> = masked_inputs
        .chunks(chunk_size)
        .enumerate()
        .map(|(n, c)| (n * chunk_size, c))
        .collect();
    let completed: Vec<Vec<SlotSequence>> = chunks
        .par_iter()
        .map(|(offset, chunk)| {
            let mode = match decoding {
                Decoding::Argmax => Decoding::Argmax,
                Decoding::Sample { temperature, seed: s } => Decoding::Sample {
                    temperature,
                    seed: derive_seed(s, 5, *offset as u64),
                },
            };
            crate::model::reconstruct_batch(params, chunk, mode)
        })
        .collect::<Result<_, _>>()?;

    let generated: Vec<crate::activity::ActivityChain> = completed
        .iter()
        .flatten()
        .enumerate()
        .map(|(i, seq)| decode_slots(seq, format!("gen-{i}"), date))
        .collect();
    let reference: Vec<crate::activity::ActivityChain> = test
        .iter()
        .enumerate()
        .map(|(i, seq)| decode_slots(seq, format!("ref-{i}"), date))
        .collect();
    let mut report = evaluate(&generated, &reference)?;
    report.strategy_mix = Some(mix);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{encode_day, EncodeConfig};
    use crate::simgen::{build_region_profile, generate_dataset, PRESET_REGION_A};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            heads: 2,
            mlp_hidden: 24,
            dow_embed_dim: 4,
            time_embed_dim: 4,
            dropout_p: 0.05,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    fn small_dataset(n_agents: usize, days: usize) -> Vec<SlotSequence> {
        let profile = build_region_profile(PRESET_REGION_A).unwrap();
        let chains = generate_dataset(
            &profile,
            n_agents,
            days,
            chrono::NaiveDate::from_ymd_opt(2024, 3, 4).unwrap(),
            99,
        );
        let cfg = EncodeConfig::default();
        chains.iter().map(|c| encode_day(c, &cfg)).collect()
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            warmup_epochs: 1,
            phase2_end: 2,
            early_stop_patience: 0,
            grad_shards: 4,
            seed: 7,
            ..TrainConfig::desk_default()
        }
    }

    #[test]
    fn class_weights_uniform_and_ratio() {
        // Two classes with a 2:1 slot ratio keep a 1:2 weight ratio.
        let mut seq = small_dataset(1, 1).remove(0);
        for slot in 0..SLOTS_PER_DAY {
            seq.tokens[slot] = if slot < 64 { 1 } else { 2 };
            seq.observed[slot] = true;
        }
        let w = compute_class_weights(&[seq.clone()]).unwrap();
        let ratio = w[1] / w[0];
        assert!((ratio - 2.0).abs() < 1e-9, "ratio {ratio}");
        // Absent classes take the clip maximum.
        assert_eq!(w[5], 10.0);
        // Uniform: every class equally frequent -> all ones.
        let mut uniform = seq.clone();
        for slot in 0..SLOTS_PER_DAY {
            uniform.tokens[slot] = (slot % CLASS_COUNT) as u8 + 1;
        }
        let wu = compute_class_weights(&[uniform]).unwrap();
        assert!(wu.iter().all(|&x| (x - 1.0).abs() < 1e-9));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(matches!(compute_class_weights(&[]), Err(TrainError::EmptyDataset)));
    }

    #[test]
    fn incomplete_data_rejected() {
        let mut data = small_dataset(2, 2);
        data[1].observed[10] = false;
        data[1].tokens[10] = crate::activity::MASK_TOKEN;
        let err = train_base::<f32>(&data, &tiny_model(), &quick_cfg(3)).unwrap_err();
        assert!(matches!(err, TrainError::IncompleteTrainingData { index: 1 }));
    }

    #[test]
    fn warmup_reduces_training_loss() {
        let data = small_dataset(25, 20); // 500 examples
        let cfg = TrainConfig {
            epochs: 7,
            warmup_epochs: 5,
            phase2_end: 6,
            early_stop_patience: 0,
            ..quick_cfg(7)
        };
        let (_, history) = train_base::<f32>(&data, &tiny_model(), &cfg).unwrap();
        let first = history.records[0].train_loss;
        let fifth = history.records[4].train_loss;
        assert!(
            fifth < first,
            "train loss should fall during warmup: epoch1 {first} vs epoch5 {fifth}"
        );
    }

    #[test]
    fn same_seed_identical_history_and_params() {
        let data = small_dataset(10, 8);
        let cfg = quick_cfg(3);
        let (p1, h1) = train_base::<f32>(&data, &tiny_model(), &cfg).unwrap();
        let (p2, h2) = train_base::<f32>(&data, &tiny_model(), &cfg).unwrap();
        assert_eq!(h1, h2);
        for (a, b) in p1.entries().iter().zip(p2.entries()) {
            assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let data = small_dataset(8, 6);
        let cfg = quick_cfg(3);
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool2 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let (p1, h1) =
            pool1.install(|| train_base::<f32>(&data, &tiny_model(), &cfg)).unwrap();
        let (p2, h2) =
            pool2.install(|| train_base::<f32>(&data, &tiny_model(), &cfg)).unwrap();
        assert_eq!(h1, h2);
        for (a, b) in p1.entries().iter().zip(p2.entries()) {
            assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
        }
    }

    #[test]
    fn adam_never_updates_frozen_groups() {
        let data = small_dataset(6, 4);
        let mut params: ModelParams<f32> = init_model(&tiny_model()).unwrap();
        params.set_trainable(&[LayerGroup::MlpHead]);
        let before: Vec<Vec<f32>> = params
            .entries()
            .iter()
            .filter(|e| e.group != LayerGroup::MlpHead)
            .map(|e| e.tensor.data().to_vec())
            .collect();
        let mut adam = Adam::new(AdamConfig::default());
        let examples: Vec<TrainExample> =
            data.iter().map(|s| TrainExample { seq: s.clone(), real_slots: None }).collect();
        let order: Vec<usize> = (0..examples.len()).collect();
        run_epoch(
            &mut params,
            &mut adam,
            &examples,
            &order,
            0.4,
            &LossConfig::default(),
            8,
            2,
            11,
        )
        .unwrap();
        let after: Vec<Vec<f32>> = params
            .entries()
            .iter()
            .filter(|e| e.group != LayerGroup::MlpHead)
            .map(|e| e.tensor.data().to_vec())
            .collect();
        assert_eq!(before, after);
        // And the head moved.
        let head_moved = params
            .entries()
            .iter()
            .any(|e| e.group == LayerGroup::MlpHead && e.tensor.data().iter().any(|&x| x != 0.0));
        assert!(head_moved);
    }

    #[test]
    fn phase_boundaries_match_config() {
        let data = small_dataset(6, 4);
        let cfg = TrainConfig {
            epochs: 5,
            warmup_epochs: 2,
            phase2_end: 4,
            early_stop_patience: 0,
            ..quick_cfg(5)
        };
        let (_, history) = train_base::<f32>(&data, &tiny_model(), &cfg).unwrap();
        let fractions: Vec<f64> = history.records.iter().map(|r| r.mask_fraction).collect();
        assert_eq!(fractions, vec![0.0, 0.0, 0.4, 0.4, 0.7]);
        let phases: Vec<&str> = history.records.iter().map(|r| r.phase.as_str()).collect();
        assert_eq!(phases, vec!["warmup", "warmup", "phase2", "phase2", "phase3"]);
    }

    #[test]
    fn early_stopping_restores_best_epoch() {
        let data = small_dataset(12, 6);
        let cfg = TrainConfig { early_stop_patience: 2, ..quick_cfg(12) };
        let (_, history) = train_base::<f32>(&data, &tiny_model(), &cfg).unwrap();
        if history.stopped_early {
            let best = history.best_epoch;
            let last = history.records.last().unwrap().epoch;
            assert!(last - best >= 2);
            let best_val = history.records[best].val_loss;
            assert!(history.records.iter().all(|r| r.val_loss >= best_val));
        }
    }

    #[test]
    fn evaluate_reconstruction_zero_mask_is_perfect() {
        let data = small_dataset(6, 4);
        let params: ModelParams<f32> = init_model(&tiny_model()).unwrap();
        let report = evaluate_reconstruction(
            &params,
            &data,
            0.0,
            &MaskStrategy::ALL,
            Decoding::Sample { temperature: 1.0, seed: 5 },
            9,
        )
        .unwrap();
        for (name, v) in report.values() {
            assert_eq!(v, 0.0, "jsd_{name} should be 0 with nothing masked");
        }
        let mix = report.strategy_mix.unwrap();
        assert_eq!(mix.values().sum::<usize>(), data.len());
    }

    #[test]
    fn history_csv_has_expected_header() {
        let history = TrainHistory {
            records: vec![EpochRecord {
                epoch: 0,
                phase: "warmup".into(),
                mask_fraction: 0.0,
                train_loss: 1.5,
                val_loss: 1.6,
                lr: 1e-3,
            }],
            best_epoch: 0,
            stopped_early: false,
        };
        let mut buf = Vec::new();
        history.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,phase,mask_fraction,train_loss,val_loss,lr\n"));
        assert!(text.contains("0,warmup,0,1.5,1.6,0.001"));
    }
}
