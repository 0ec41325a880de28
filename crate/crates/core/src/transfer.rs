//! The semi-supervised iterative transfer loop: synthesize completions of
//! incomplete target-region days, fine-tune with progressive unfreezing and
//! real/synthetic loss weighting, retain a slice of the previous training
//! set, track JSD per iteration, and return the best iteration's checkpoint
//! as the collapse guard.
//!
//! Iterations are strictly sequential; within an iteration synthesis
//! parallelizes per chunk with chunk-derived seeds, so results do not
//! depend on thread count.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activity::{ActivityChain, ObservedMask, SLOTS_PER_DAY};
use crate::encoding::{decode_slots, SlotSequence, TimeSegmentTable};
use crate::loss::LossConfig;
use crate::metrics::{evaluate, JsdReport, MetricsError};
use crate::model::{
    checkpoint, reconstruct_batch, Decoding, LayerGroup, ModelError, ModelParams,
};
use crate::numerics::Element;
use crate::training::{
    compute_class_weights, derive_seed, run_epoch, Adam, AdamConfig, TrainError, TrainExample,
};

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("no target data after filtering")]
    NoTargetData,
    #[error("invalid transfer config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("resume: {0}")]
    Resume(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub max_iterations: usize,
    pub epochs_per_iteration: usize,
    /// Share of the previous iteration's training set retained in the next.
    pub retention_fraction: f64,
    /// Convergence threshold on all five JSD deltas between iterations.
    pub convergence_epsilon: f64,
    /// Sampling temperature for synthesis.
    pub temperature: f64,
    /// Fractions of epochs for the initial and intermediate unfreezing
    /// phases; the remainder is the final phase.
    pub unfreeze_fractions: (f64, f64),
    /// Mask fraction applied to synthetic days during fine-tuning.
    pub finetune_mask_fraction: f64,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub loss: LossConfig,
    /// Recompute inverse-frequency class weights per iteration.
    pub auto_class_weights: bool,
    pub grad_shards: usize,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            max_iterations: 6,
            epochs_per_iteration: 4,
            retention_fraction: 0.20,
            convergence_epsilon: 1e-3,
            temperature: 1.0,
            unfreeze_fractions: (0.25, 0.25),
            finetune_mask_fraction: 0.7,
            batch_size: 128,
            optimizer: AdamConfig { lr: 5e-4, ..AdamConfig::default() },
            loss: LossConfig::default(),
            auto_class_weights: true,
            grad_shards: 8,
            seed: 0,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<(), TransferError> {
        if self.max_iterations == 0 {
            return Err(TransferError::InvalidConfig("max_iterations must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.retention_fraction) {
            return Err(TransferError::InvalidConfig(format!(
                "retention_fraction {} outside [0, 1)",
                self.retention_fraction
            )));
        }
        if self.epochs_per_iteration == 0 || self.batch_size == 0 || self.grad_shards == 0 {
            return Err(TransferError::InvalidConfig("zero epochs/batch/shards".into()));
        }
        Ok(())
    }
}

/// Trainable layer groups for a fine-tuning epoch.
///
/// The initial phase opens the MLP head and the embeddings; the intermediate
/// phase adds the input-nearest block; the final phase adds the middle
/// block. The output-nearest block stays frozen throughout transfer.
pub fn unfreeze_schedule(
    epoch: usize,
    total_epochs: usize,
    fractions: (f64, f64),
) -> Vec<LayerGroup> {
    let b1 = total_epochs as f64 * fractions.0;
    let b2 = total_epochs as f64 * (fractions.0 + fractions.1);
    let mut groups = vec![LayerGroup::MlpHead, LayerGroup::Embeddings];
    if (epoch as f64) >= b1 {
        groups.push(LayerGroup::Block1);
    }
    if (epoch as f64) >= b2 {
        groups.push(LayerGroup::Block2);
    }
    groups
}

/// A synthesized complete day with the per-slot provenance mask
/// (true = observed in the raw target data, false = model-filled).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDay {
    pub seq: SlotSequence,
    pub real: [bool; SLOTS_PER_DAY],
}

/// Completes every target sequence by sampling the model. Observed slots are
/// carried over verbatim and flagged real. Chunk seeds derive from fixed
/// offsets, so output is identical for any thread count.
pub fn synthesize_dataset<T: Element>(
    params: &ModelParams<T>,
    targets: &[SlotSequence],
    temperature: f64,
    seed: u64,
) -> Result<Vec<SyntheticDay>, TransferError> {
    let chunk_size = 64;
    let chunks: Vec<(usize, &[SlotSequence])> = targets
        .chunks(chunk_size)
        .enumerate()
        .map(|(n, c)| (n * chunk_size, c))
        .collect();
    let completed: Vec<Vec<SlotSequence>> = chunks
        .par_iter()
        .map(|(offset, chunk)| {
            let mode = Decoding::Sample { temperature, seed: derive_seed(seed, 6, *offset as u64) };
            reconstruct_batch(params, chunk, mode)
        })
        .collect::<Result<_, _>>()?;
    Ok(completed
        .into_iter()
        .flatten()
        .zip(targets)
        .map(|(seq, original)| SyntheticDay { seq, real: original.observed })
        .collect())
}

/// One fine-tuning pass over a synthetic-plus-retained training set with the
/// progressive unfreezing schedule and the real/synthetic weighted loss.
pub fn transfer_iteration<T: Element>(
    mut params: ModelParams<T>,
    train_set: &[SyntheticDay],
    cfg: &TransferConfig,
    iteration: usize,
) -> Result<ModelParams<T>, TransferError> {
    if train_set.is_empty() {
        return Err(TransferError::NoTargetData);
    }
    let examples: Vec<TrainExample> = train_set
        .iter()
        .map(|d| TrainExample { seq: d.seq.clone(), real_slots: Some(d.real) })
        .collect();
    let mut loss_cfg = cfg.loss.clone();
    if cfg.auto_class_weights {
        let seqs: Vec<SlotSequence> = train_set.iter().map(|d| d.seq.clone()).collect();
        loss_cfg.class_weights = compute_class_weights(&seqs)?;
    }
    let mut adam = Adam::new(cfg.optimizer);
    for epoch in 0..cfg.epochs_per_iteration {
        params.set_trainable(&unfreeze_schedule(
            epoch,
            cfg.epochs_per_iteration,
            cfg.unfreeze_fractions,
        ));
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            7 + iteration as u64,
            epoch as u64,
        ));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        run_epoch(
            &mut params,
            &mut adam,
            &examples,
            &order,
            cfg.finetune_mask_fraction,
            &loss_cfg,
            cfg.batch_size,
            cfg.grad_shards,
            derive_seed(cfg.seed, 100 + iteration as u64, epoch as u64),
        )?;
    }
    Ok(params)
}

/// Loop state: completed iterations, the JSD trajectory (one report per
/// iteration) and the best-iteration index (1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferState {
    pub completed_iterations: usize,
    pub trajectory: Vec<JsdReport>,
    pub best_iteration: usize,
    pub converged: bool,
}

impl TransferState {
    pub fn best_mean(&self) -> f64 {
        self.trajectory[self.best_iteration - 1].mean()
    }
}

/// Runs the full loop: synthesize, fine-tune, evaluate against the
/// observed-only statistics of the raw target data; stop at convergence or
/// `max_iterations`; return the iteration with the lowest mean JSD (the
/// collapse guard), which need not be the last.
///
/// With an output directory the loop persists per-iteration checkpoints,
/// synthetic datasets, retained sets and the JSD trajectory after every
/// iteration, and resumes from the last completed iteration on restart.
pub fn run_transfer_loop<T: Element>(
    base: &ModelParams<T>,
    targets: &[SlotSequence],
    cfg: &TransferConfig,
    out_dir: Option<&Path>,
) -> Result<(ModelParams<T>, TransferState), TransferError> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(TransferError::NoTargetData);
    }
    let date = chrono::NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date");
    let reference: Vec<ActivityChain> = targets
        .iter()
        .enumerate()
        .map(|(i, seq)| decode_slots(seq, format!("target-{i}"), date))
        .collect();

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut trajectory: Vec<JsdReport> = Vec::new();
    let mut checkpoints: Vec<ModelParams<T>> = Vec::new();
    let mut model = base.clone();
    let mut sd = synthesize_dataset(&model, targets, cfg.temperature, derive_seed(cfg.seed, 8, 0))?;
    let mut retained: Vec<SyntheticDay> = Vec::new();
    let mut start_iteration = 1;

    // Resume from the last completed iteration if artifacts exist.
    if let Some(dir) = out_dir {
        if let Some(resume) = try_resume::<T>(dir)? {
            trajectory = resume.trajectory;
            checkpoints = resume.checkpoints;
            model = checkpoints.last().expect("resume has iterations").clone();
            sd = resume.sd;
            retained = resume.retained;
            start_iteration = trajectory.len() + 1;
        }
    }

    for iteration in start_iteration..=cfg.max_iterations {
        let mut train_set = sd.clone();
        train_set.extend(retained.iter().cloned());
        model = transfer_iteration(model, &train_set, cfg, iteration)?;

        let sd_next = synthesize_dataset(
            &model,
            targets,
            cfg.temperature,
            derive_seed(cfg.seed, 8, iteration as u64),
        )?;
        let generated: Vec<ActivityChain> = sd_next
            .iter()
            .enumerate()
            .map(|(i, day)| decode_slots(&day.seq, format!("synth-{i}"), date))
            .collect();
        let report = evaluate(&generated, &reference)?;

        // Retention pool for the next iteration: a uniform sample without
        // replacement of this iteration's training set.
        let keep = (cfg.retention_fraction * train_set.len() as f64).round() as usize;
        let mut pick_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 9, iteration as u64));
        let mut pool: Vec<usize> = (0..train_set.len()).collect();
        for i in 0..keep.min(pool.len()) {
            let j = pick_rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        retained = pool[..keep.min(train_set.len())]
            .iter()
            .map(|&i| train_set[i].clone())
            .collect();

        trajectory.push(report);
        checkpoints.push(model.clone());
        if let Some(dir) = out_dir {
            persist_iteration(dir, iteration, &model, &sd_next, &retained, &trajectory)?;
        }

        let converged = trajectory.len() >= 2 && {
            let prev = &trajectory[trajectory.len() - 2];
            let cur = &trajectory[trajectory.len() - 1];
            prev.values()
                .iter()
                .zip(cur.values().iter())
                .all(|((_, a), (_, b))| (a - b).abs() < cfg.convergence_epsilon)
        };
        if converged {
            let state = finish(&trajectory, &checkpoints, true, out_dir)?;
            return Ok(state);
        }
        sd = sd_next;
    }

    finish(&trajectory, &checkpoints, false, out_dir)
}

fn finish<T: Element>(
    trajectory: &[JsdReport],
    checkpoints: &[ModelParams<T>],
    converged: bool,
    out_dir: Option<&Path>,
) -> Result<(ModelParams<T>, TransferState), TransferError> {
    let best_index = trajectory
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.mean().total_cmp(&b.mean()))
        .map(|(i, _)| i)
        .expect("at least one iteration");
    let state = TransferState {
        completed_iterations: trajectory.len(),
        trajectory: trajectory.to_vec(),
        best_iteration: best_index + 1,
        converged,
    };
    let best = checkpoints[best_index].clone();
    if let Some(dir) = out_dir {
        checkpoint::save(&best, &dir.join("best.ckpt"))?;
        let state_json = serde_json::to_string_pretty(&state)
            .map_err(|e| TransferError::Resume(e.to_string()))?;
        std::fs::write(dir.join("state.json"), state_json)?;
    }
    Ok((best, state))
}

fn iter_dir(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("iter_{iteration:04}"))
}

/// The trajectory CSV: one row per completed iteration.
pub fn write_trajectory_csv<W: Write>(out: &mut W, trajectory: &[JsdReport]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "jsd_length", "jsd_type", "jsd_start", "jsd_end", "jsd_duration"])?;
    for (i, r) in trajectory.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            format!("{}", r.jsd_length),
            format!("{}", r.jsd_type),
            format!("{}", r.jsd_start),
            format!("{}", r.jsd_end),
            format!("{}", r.jsd_duration),
        ])?;
    }
    w.flush()
}

fn persist_iteration<T: Element>(
    dir: &Path,
    iteration: usize,
    model: &ModelParams<T>,
    sd: &[SyntheticDay],
    retained: &[SyntheticDay],
    trajectory: &[JsdReport],
) -> Result<(), TransferError> {
    let idir = iter_dir(dir, iteration);
    std::fs::create_dir_all(&idir)?;
    checkpoint::save(model, &idir.join("model.ckpt"))?;
    write_synthetic_jsonl(&idir.join("synth.jsonl"), sd)?;
    write_synthetic_jsonl(&idir.join("retained.jsonl"), retained)?;
    let mut file = std::fs::File::create(dir.join("trajectory.csv"))?;
    write_trajectory_csv(&mut file, trajectory)?;
    let reports = serde_json::to_string_pretty(trajectory)
        .map_err(|e| TransferError::Resume(e.to_string()))?;
    std::fs::write(dir.join("trajectory.json"), reports)?;
    Ok(())
}

struct ResumeState<T: Element> {
    trajectory: Vec<JsdReport>,
    checkpoints: Vec<ModelParams<T>>,
    sd: Vec<SyntheticDay>,
    retained: Vec<SyntheticDay>,
}

fn try_resume<T: Element>(dir: &Path) -> Result<Option<ResumeState<T>>, TransferError> {
    let trajectory_path = dir.join("trajectory.json");
    if !trajectory_path.exists() {
        return Ok(None);
    }
    let trajectory: Vec<JsdReport> =
        serde_json::from_str(&std::fs::read_to_string(&trajectory_path)?)
            .map_err(|e| TransferError::Resume(e.to_string()))?;
    if trajectory.is_empty() {
        return Ok(None);
    }
    let mut checkpoints = Vec::with_capacity(trajectory.len());
    for iteration in 1..=trajectory.len() {
        let path = iter_dir(dir, iteration).join("model.ckpt");
        if !path.exists() {
            return Err(TransferError::Resume(format!(
                "trajectory lists iteration {iteration} but {} is missing",
                path.display()
            )));
        }
        checkpoints.push(checkpoint::load::<T>(&path)?);
    }
    let last = iter_dir(dir, trajectory.len());
    let sd = read_synthetic_jsonl(&last.join("synth.jsonl"))?;
    let retained = read_synthetic_jsonl(&last.join("retained.jsonl"))?;
    Ok(Some(ResumeState { trajectory, checkpoints, sd, retained }))
}

#[derive(Serialize, Deserialize)]
struct SyntheticRecord {
    tokens: Vec<u8>,
    real: String,
    dow: u8,
}

/// Synthetic-day JSONL: complete token rows plus the real/synthetic
/// provenance mask as a 96-bit string.
pub fn write_synthetic_jsonl(path: &Path, days: &[SyntheticDay]) -> Result<(), TransferError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for day in days {
        let record = SyntheticRecord {
            tokens: day.seq.tokens.to_vec(),
            real: ObservedMask(day.real).to_bit_string(),
            dow: day.seq.day_of_week,
        };
        serde_json::to_writer(&mut out, &record)
            .map_err(|e| TransferError::Resume(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_synthetic_jsonl(path: &Path) -> Result<Vec<SyntheticDay>, TransferError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let labels = TimeSegmentTable::default().labels();
    let mut days = Vec::new();
    for (idx, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SyntheticRecord = serde_json::from_str(&line)
            .map_err(|e| TransferError::Resume(format!("line {}: {e}", idx + 1)))?;
        if record.tokens.len() != SLOTS_PER_DAY {
            return Err(TransferError::Resume(format!("line {}: bad token count", idx + 1)));
        }
        let real = ObservedMask::from_bit_string(&record.real)
            .map_err(|e| TransferError::Resume(format!("line {}: {e}", idx + 1)))?;
        let mut tokens = [0u8; SLOTS_PER_DAY];
        tokens.copy_from_slice(&record.tokens);
        days.push(SyntheticDay {
            seq: SlotSequence {
                tokens,
                observed: [true; SLOTS_PER_DAY],
                time_labels: labels,
                day_of_week: record.dow,
            },
            real: real.0,
        });
    }
    Ok(days)
}

/// Per-iteration retention size for documentation and tests:
/// `round(retention_fraction * previous_training_set_len)`.
pub fn retention_size(cfg: &TransferConfig, previous_len: usize) -> usize {
    (cfg.retention_fraction * previous_len as f64).round() as usize
}

/// Summary of which strategy mix and provenance the loop used; handy for
/// run manifests.
pub fn provenance(cfg: &TransferConfig) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    map.insert("temperature".into(), cfg.temperature.to_string());
    map.insert("retention_fraction".into(), cfg.retention_fraction.to_string());
    map.insert("epochs_per_iteration".into(), cfg.epochs_per_iteration.to_string());
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activity::MASK_TOKEN;
    use crate::encoding::{encode_day_windowed, EncodeConfig};
    use crate::model::{init_model, ModelConfig};
    use crate::simgen::{
        build_region_profile, degrade_observation, generate_dataset, DegradationConfig,
        PRESET_REGION_B,
    };

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            heads: 2,
            mlp_hidden: 24,
            dow_embed_dim: 4,
            time_embed_dim: 4,
            dropout_p: 0.0,
            seed: 5,
            ..ModelConfig::default()
        }
    }

    fn incomplete_targets(n: usize) -> Vec<SlotSequence> {
        let profile = build_region_profile(PRESET_REGION_B).unwrap();
        let complete = generate_dataset(
            &profile,
            n / 4 + 1,
            4,
            chrono::NaiveDate::from_ymd_opt(2024, 3, 4).unwrap(),
            17,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let cfg = DegradationConfig::default();
        let enc = EncodeConfig::default();
        complete
            .iter()
            .take(n)
            .map(|c| {
                let (degraded, mask) = degrade_observation(c, &cfg, &mut rng);
                encode_day_windowed(&degraded, &enc, Some(&mask))
            })
            .filter(|s| s.observed_count() >= 24)
            .collect()
    }

    fn quick_cfg() -> TransferConfig {
        TransferConfig {
            max_iterations: 2,
            epochs_per_iteration: 4,
            batch_size: 16,
            grad_shards: 2,
            seed: 23,
            ..TransferConfig::default()
        }
    }

    #[test]
    fn unfreeze_schedule_matches_phases() {
        let f = (0.25, 0.25);
        assert_eq!(
            unfreeze_schedule(5, 40, f),
            vec![LayerGroup::MlpHead, LayerGroup::Embeddings]
        );
        assert_eq!(
            unfreeze_schedule(15, 40, f),
            vec![LayerGroup::MlpHead, LayerGroup::Embeddings, LayerGroup::Block1]
        );
        assert_eq!(
            unfreeze_schedule(30, 40, f),
            vec![
                LayerGroup::MlpHead,
                LayerGroup::Embeddings,
                LayerGroup::Block1,
                LayerGroup::Block2
            ]
        );
        // The output-nearest block never appears.
        for epoch in 0..40 {
            assert!(!unfreeze_schedule(epoch, 40, f).contains(&LayerGroup::Block3));
        }
    }

    #[test]
    fn synthesis_preserves_evidence_and_fills_everything() {
        let params = init_model::<f32>(&tiny_model()).unwrap();
        let targets = incomplete_targets(12);
        assert!(!targets.is_empty());
        let sd = synthesize_dataset(&params, &targets, 1.0, 42).unwrap();
        for (day, target) in sd.iter().zip(&targets) {
            assert_eq!(day.real, target.observed);
            for slot in 0..SLOTS_PER_DAY {
                assert_ne!(day.seq.tokens[slot], MASK_TOKEN);
                if target.observed[slot] {
                    assert_eq!(day.seq.tokens[slot], target.tokens[slot]);
                }
            }
        }
        // Fully observed input comes back identical with an all-real mask.
        let complete = sd[0].seq.clone();
        let again = synthesize_dataset(&params, &[complete.clone()], 1.0, 43).unwrap();
        assert_eq!(again[0].seq.tokens, complete.tokens);
        assert!(again[0].real.iter().all(|&r| r));
    }

    #[test]
    fn synthesis_is_seed_deterministic() {
        let params = init_model::<f32>(&tiny_model()).unwrap();
        let targets = incomplete_targets(8);
        let a = synthesize_dataset(&params, &targets, 1.0, 7).unwrap();
        let b = synthesize_dataset(&params, &targets, 1.0, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn block3_is_bitwise_unchanged_by_an_iteration() {
        let params = init_model::<f32>(&tiny_model()).unwrap();
        let targets = incomplete_targets(10);
        let sd = synthesize_dataset(&params, &targets, 1.0, 1).unwrap();
        let before: Vec<Vec<f32>> = params
            .entries()
            .iter()
            .filter(|e| e.group == LayerGroup::Block3)
            .map(|e| e.tensor.data().to_vec())
            .collect();
        let tuned = transfer_iteration(params.clone(), &sd, &quick_cfg(), 1).unwrap();
        let after: Vec<Vec<f32>> = tuned
            .entries()
            .iter()
            .filter(|e| e.group == LayerGroup::Block3)
            .map(|e| e.tensor.data().to_vec())
            .collect();
        assert_eq!(before, after);
        // Something else did change.
        let head_changed = params
            .entries()
            .iter()
            .zip(tuned.entries())
            .any(|(a, b)| a.group == LayerGroup::MlpHead && a.tensor.data() != b.tensor.data());
        assert!(head_changed);
    }

    #[test]
    fn single_iteration_loop_runs_once() {
        let params = init_model::<f32>(&tiny_model()).unwrap();
        let targets = incomplete_targets(10);
        let cfg = TransferConfig { max_iterations: 1, ..quick_cfg() };
        let (_, state) = run_transfer_loop(&params, &targets, &cfg, None).unwrap();
        assert_eq!(state.completed_iterations, 1);
        assert_eq!(state.trajectory.len(), 1);
        assert_eq!(state.best_iteration, 1);
    }

    #[test]
    fn best_checkpoint_has_minimal_mean_jsd() {
        let params = init_model::<f32>(&tiny_model()).unwrap();
        let targets = incomplete_targets(12);
        let cfg = quick_cfg();
        let (_, state) = run_transfer_loop(&params, &targets, &cfg, None).unwrap();
        let best = state.trajectory[state.best_iteration - 1].mean();
        for r in &state.trajectory {
            assert!(best <= r.mean() + 1e-12);
        }
        assert!(best <= state.trajectory.last().unwrap().mean() + 1e-12);
    }

    #[test]
    fn retention_size_rounds() {
        let cfg = TransferConfig { retention_fraction: 0.2, ..TransferConfig::default() };
        assert_eq!(retention_size(&cfg, 10), 2);
        assert_eq!(retention_size(&cfg, 13), 3); // round(2.6)
        assert_eq!(retention_size(&cfg, 0), 0);
    }

    #[test]
    fn no_target_data_is_an_error() {
        let params = init_model::<f32>(&tiny_model()).unwrap();
        let err = run_transfer_loop(&params, &[], &quick_cfg(), None).unwrap_err();
        assert!(matches!(err, TransferError::NoTargetData));
    }

    #[test]
    fn interrupted_loop_resumes_to_identical_trajectory() {
        let params = init_model::<f32>(&tiny_model()).unwrap();
        let targets = incomplete_targets(10);
        let full_cfg = TransferConfig { max_iterations: 3, ..quick_cfg() };

        // Uninterrupted run.
        let dir_full = tempfile::tempdir().unwrap();
        let (_, straight) =
            run_transfer_loop(&params, &targets, &full_cfg, Some(dir_full.path())).unwrap();

        // Two iterations, then resume for the third in the same directory.
        let dir_resume = tempfile::tempdir().unwrap();
        let partial_cfg = TransferConfig { max_iterations: 2, ..full_cfg.clone() };
        run_transfer_loop(&params, &targets, &partial_cfg, Some(dir_resume.path())).unwrap();
        let (_, resumed) =
            run_transfer_loop(&params, &targets, &full_cfg, Some(dir_resume.path())).unwrap();

        assert_eq!(straight.trajectory, resumed.trajectory);
        assert_eq!(straight.best_iteration, resumed.best_iteration);
    }

    #[test]
    fn synthetic_jsonl_round_trips() {
        let params = init_model::<f32>(&tiny_model()).unwrap();
        let targets = incomplete_targets(6);
        let sd = synthesize_dataset(&params, &targets, 1.0, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sd.jsonl");
        write_synthetic_jsonl(&path, &sd).unwrap();
        let back = read_synthetic_jsonl(&path).unwrap();
        assert_eq!(sd, back);
    }
}
