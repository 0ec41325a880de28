//! The composite training objective: weighted cross-entropy, transition
//! loss, differentiable soft dynamic time warping, their weighted sum, and
//! the real/synthetic slot-weighted variant used during transfer.
//!
//! All functions record onto a [`Graph`] so the objective is differentiable
//! end to end; evaluating a loss without backward just reads the node value.

use serde::{Deserialize, Serialize};

use crate::activity::CLASS_COUNT;
use crate::numerics::{Element, Graph, NodeId, NumericsError, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Per-class weights for the cross-entropy term, classes 1..=16.
    pub class_weights: Vec<f64>,
    /// Cross-entropy weight in the combined objective.
    pub w1: f64,
    /// Transition-loss weight.
    pub w2: f64,
    /// Soft-DTW weight.
    pub w3: f64,
    /// Real-slot weight in the masked objective.
    pub w_real: f64,
    /// Synthetic-slot weight in the masked objective.
    pub w_synth: f64,
    /// Soft-DTW smoothing; 0 gives classic DTW (evaluation/oracle only).
    pub dtw_gamma: f64,
    /// Clamp floor for logarithms.
    pub eps: f64,
    /// When true, cross-entropy counts only slots hidden by the training
    /// mask instead of every target-bearing slot.
    pub ce_masked_only: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            class_weights: vec![1.0; CLASS_COUNT],
            w1: 1.0,
            w2: 0.2,
            w3: 0.1,
            w_real: 1.0,
            w_synth: 0.5,
            dtw_gamma: 1.0,
            eps: 1e-7,
            ce_masked_only: false,
        }
    }
}

/// Supervision for a batch of slot rows laid out [batch * seq, classes].
#[derive(Debug, Clone)]
pub struct SlotTargets {
    /// Target class index (token - 1) per row; ignored where `has_target`
    /// is false.
    pub classes: Vec<u32>,
    /// Rows carrying a supervised target (observed in the original data).
    pub has_target: Vec<bool>,
    /// Rows hidden by the training mask; consulted only under
    /// `ce_masked_only`. None means "treat every target row as in focus".
    pub newly_masked: Option<Vec<bool>>,
    pub batch: usize,
    pub seq: usize,
}

impl SlotTargets {
    pub fn complete(classes: Vec<u32>, batch: usize, seq: usize) -> Self {
        let rows = batch * seq;
        SlotTargets { classes, has_target: vec![true; rows], newly_masked: None, batch, seq }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }

    /// CE eligibility per row under the given config.
    fn ce_rows(&self, cfg_masked_only: bool) -> Vec<bool> {
        match (&self.newly_masked, cfg_masked_only) {
            (Some(focus), true) => self
                .has_target
                .iter()
                .zip(focus)
                .map(|(&has, &hidden)| has && hidden)
                .collect(),
            _ => self.has_target.clone(),
        }
    }

    fn check(&self, op: &'static str) -> Result<(), NumericsError> {
        if self.classes.len() != self.rows() || self.has_target.len() != self.rows() {
            return Err(NumericsError::Invalid {
                op,
                msg: format!(
                    "targets {} / mask {} rows for batch {} x seq {}",
                    self.classes.len(),
                    self.has_target.len(),
                    self.batch,
                    self.seq
                ),
            });
        }
        Ok(())
    }
}

/// Mean over target-bearing slots of `-w_class * ln(clamp(p_target, eps, 1))`.
/// Slots without a target are skipped.
pub fn weighted_cross_entropy<T: Element>(
    g: &mut Graph<T>,
    probs: NodeId,
    targets: &SlotTargets,
    class_weights: &[f64],
    eps: f64,
) -> Result<NodeId, NumericsError> {
    targets.check("weighted_cross_entropy")?;
    cross_entropy_rows(g, probs, targets, &targets.ce_rows(false), class_weights, eps)
}

fn cross_entropy_rows<T: Element>(
    g: &mut Graph<T>,
    probs: NodeId,
    targets: &SlotTargets,
    rows: &[bool],
    class_weights: &[f64],
    eps: f64,
) -> Result<NodeId, NumericsError> {
    let weights: Vec<f64> = rows
        .iter()
        .zip(&targets.classes)
        .map(|(&on, &c)| if on { class_weights[c as usize] } else { 0.0 })
        .collect();
    let count = rows.iter().filter(|&&b| b).count();
    weighted_log_pick(g, probs, &targets.classes, &weights, count, eps)
}

/// Cross-entropy split into separately normalized real and synthetic parts:
/// `L_real = (1/N_r) * sum over real slots`, likewise `L_synthetic`. A part
/// with zero slots contributes a constant 0.
pub fn split_cross_entropy<T: Element>(
    g: &mut Graph<T>,
    probs: NodeId,
    targets: &SlotTargets,
    real_slot: &[bool],
    class_weights: &[f64],
    eps: f64,
) -> Result<(NodeId, NodeId), NumericsError> {
    targets.check("split_cross_entropy")?;
    if real_slot.len() != targets.rows() {
        return Err(NumericsError::Invalid {
            op: "split_cross_entropy",
            msg: format!("{} real flags for {} rows", real_slot.len(), targets.rows()),
        });
    }
    let rows = targets.ce_rows(false);
    split_cross_entropy_rows(g, probs, targets, &rows, real_slot, class_weights, eps)
}

fn split_cross_entropy_rows<T: Element>(
    g: &mut Graph<T>,
    probs: NodeId,
    targets: &SlotTargets,
    rows: &[bool],
    real_slot: &[bool],
    class_weights: &[f64],
    eps: f64,
) -> Result<(NodeId, NodeId), NumericsError> {
    let part = |g: &mut Graph<T>, want_real: bool| {
        let side: Vec<bool> = rows
            .iter()
            .zip(real_slot)
            .map(|(&on, &real)| on && real == want_real)
            .collect();
        cross_entropy_rows(g, probs, targets, &side, class_weights, eps)
    };
    let real = part(g, true)?;
    let synth = part(g, false)?;
    Ok((real, synth))
}

/// `-(1/count) * sum_i weights[i] * ln(clamp(probs[i, classes[i]], eps, 1))`.
fn weighted_log_pick<T: Element>(
    g: &mut Graph<T>,
    probs: NodeId,
    classes: &[u32],
    weights: &[f64],
    count: usize,
    eps: f64,
) -> Result<NodeId, NumericsError> {
    if count == 0 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let picked = g.pick_col(probs, classes)?;
    let clamped = g.clamp(picked, T::from_f64(eps), T::one());
    let logp = g.ln(clamped);
    let scale = -1.0 / count as f64;
    let w = Tensor::<T>::from_fn(vec![weights.len()], |i| T::from_f64(weights[i] * scale));
    let wn = g.constant(w);
    let weighted = g.mul(logp, wn)?;
    Ok(g.sum(weighted))
}

/// Binary cross-entropy on activity-change probabilities between adjacent
/// slots, averaged over the valid pairs of each example.
///
/// The predicted change probability is `1 - <p_i, p_{i+1}>`, which is
/// differentiable and equals the true change indicator at one-hot
/// predictions. Pairs where either slot lacks a target are skipped.
pub fn transition_loss<T: Element>(
    g: &mut Graph<T>,
    probs: NodeId,
    targets: &SlotTargets,
    eps: f64,
) -> Result<NodeId, NumericsError> {
    targets.check("transition_loss")?;
    let overlap = g.adjacent_overlap(probs, targets.batch, targets.seq)?;
    // change probability = 1 - overlap
    let change = g.affine(overlap, -T::one(), T::one());

    let pairs = targets.batch * (targets.seq - 1);
    let mut w_change = vec![0.0f64; pairs];
    let mut w_same = vec![0.0f64; pairs];
    let mut valid = 0usize;
    for b in 0..targets.batch {
        for i in 0..targets.seq - 1 {
            let r = b * targets.seq + i;
            if !(targets.has_target[r] && targets.has_target[r + 1]) {
                continue;
            }
            valid += 1;
            let changed = targets.classes[r] != targets.classes[r + 1];
            if changed {
                w_change[b * (targets.seq - 1) + i] = 1.0;
            } else {
                w_same[b * (targets.seq - 1) + i] = 1.0;
            }
        }
    }
    if valid == 0 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let scale = -1.0 / valid as f64;

    // t * ln(t_hat): clamp keeps the logs finite at the one-hot extremes.
    let ln_change = {
        let c = g.clamp(change, T::from_f64(eps), T::one());
        g.ln(c)
    };
    // (1 - t) * ln(1 - t_hat), and 1 - t_hat is exactly the overlap.
    let ln_same = {
        let c = g.clamp(overlap, T::from_f64(eps), T::one());
        g.ln(c)
    };
    let wc = Tensor::<T>::from_fn(vec![pairs], |i| T::from_f64(w_change[i] * scale));
    let ws = Tensor::<T>::from_fn(vec![pairs], |i| T::from_f64(w_same[i] * scale));
    let wc = g.constant(wc);
    let ws = g.constant(ws);
    let term_change = g.mul(ln_change, wc)?;
    let term_same = g.mul(ln_same, ws)?;
    let sum_change = g.sum(term_change);
    let sum_same = g.sum(term_same);
    g.add(sum_change, sum_same)
}

/// Soft-DTW between each example's predicted rows and its one-hot target
/// sequence (squared Euclidean local cost), averaged over examples with
/// complete targets. Examples with any missing target are skipped.
pub fn soft_dtw_loss<T: Element>(
    g: &mut Graph<T>,
    probs: NodeId,
    targets: &SlotTargets,
    gamma: f64,
) -> Result<NodeId, NumericsError> {
    targets.check("soft_dtw_loss")?;
    let complete: Vec<bool> = (0..targets.batch)
        .map(|b| targets.has_target[b * targets.seq..(b + 1) * targets.seq].iter().all(|&t| t))
        .collect();
    let n_complete = complete.iter().filter(|&&b| b).count();
    if n_complete == 0 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let per_example =
        g.soft_dtw(probs, &targets.classes, T::from_f64(gamma), targets.batch, targets.seq)?;
    let scale = 1.0 / n_complete as f64;
    let w = Tensor::<T>::from_fn(vec![targets.batch], |b| {
        if complete[b] {
            T::from_f64(scale)
        } else {
            T::zero()
        }
    });
    let wn = g.constant(w);
    let weighted = g.mul(per_example, wn)?;
    Ok(g.sum(weighted))
}

/// `w1 * L_CE + w2 * L_TR + w3 * L_DTW`. Terms with zero weight are not
/// recorded at all.
pub fn combined_loss<T: Element>(
    g: &mut Graph<T>,
    probs: NodeId,
    targets: &SlotTargets,
    cfg: &LossConfig,
) -> Result<NodeId, NumericsError> {
    let ce = if cfg.w1 != 0.0 {
        targets.check("combined_loss")?;
        let rows = targets.ce_rows(cfg.ce_masked_only);
        let l = cross_entropy_rows(g, probs, targets, &rows, &cfg.class_weights, cfg.eps)?;
        Some(g.scale(l, T::from_f64(cfg.w1)))
    } else {
        None
    };
    sum_weighted_terms(g, ce, probs, targets, cfg)
}

/// The transfer objective: the cross-entropy term is split by per-slot
/// provenance into `w1 * (w_real * L_real + w_synth * L_synthetic)`;
/// transition and DTW terms are unchanged.
pub fn masked_combined_loss<T: Element>(
    g: &mut Graph<T>,
    probs: NodeId,
    targets: &SlotTargets,
    real_slot: &[bool],
    cfg: &LossConfig,
) -> Result<NodeId, NumericsError> {
    let ce = if cfg.w1 != 0.0 {
        targets.check("masked_combined_loss")?;
        if real_slot.len() != targets.rows() {
            return Err(NumericsError::Invalid {
                op: "masked_combined_loss",
                msg: format!("{} real flags for {} rows", real_slot.len(), targets.rows()),
            });
        }
        let rows = targets.ce_rows(cfg.ce_masked_only);
        let (real, synth) = split_cross_entropy_rows(
            g,
            probs,
            targets,
            &rows,
            real_slot,
            &cfg.class_weights,
            cfg.eps,
        )?;
        let real = g.scale(real, T::from_f64(cfg.w1 * cfg.w_real));
        let synth = g.scale(synth, T::from_f64(cfg.w1 * cfg.w_synth));
        Some(g.add(real, synth)?)
    } else {
        None
    };
    sum_weighted_terms(g, ce, probs, targets, cfg)
}

fn sum_weighted_terms<T: Element>(
    g: &mut Graph<T>,
    ce: Option<NodeId>,
    probs: NodeId,
    targets: &SlotTargets,
    cfg: &LossConfig,
) -> Result<NodeId, NumericsError> {
    let mut total = ce;
    if cfg.w2 != 0.0 {
        let tr = transition_loss(g, probs, targets, cfg.eps)?;
        let tr = g.scale(tr, T::from_f64(cfg.w2));
        total = Some(match total {
            Some(t) => g.add(t, tr)?,
            None => tr,
        });
    }
    if cfg.w3 != 0.0 {
        let dtw = soft_dtw_loss(g, probs, targets, cfg.dtw_gamma)?;
        let dtw = g.scale(dtw, T::from_f64(cfg.w3));
        total = Some(match total {
            Some(t) => g.add(t, dtw)?,
            None => dtw,
        });
    }
    Ok(total.unwrap_or_else(|| g.constant(Tensor::scalar(T::zero()))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, sample_coordinates};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn probs_tensor(rows: usize, fill: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(vec![rows, CLASS_COUNT], |i| fill(i / CLASS_COUNT, i % CLASS_COUNT))
    }

    fn full_targets(classes: Vec<u32>, batch: usize, seq: usize) -> SlotTargets {
        assert_eq!(classes.len(), batch * seq);
        SlotTargets::complete(classes, batch, seq)
    }

    fn one_hot(classes: &[u32]) -> Tensor<f64> {
        probs_tensor(classes.len(), |r, c| if classes[r] == c as u32 { 1.0 } else { 0.0 })
    }

    #[test]
    fn perfect_prediction_has_zero_ce() {
        let classes = vec![0u32, 3, 15, 7];
        let targets = full_targets(classes.clone(), 1, 4);
        let mut g = Graph::<f64>::new();
        let p = g.leaf(one_hot(&classes));
        let ce =
            weighted_cross_entropy(&mut g, p, &targets, &vec![1.0; CLASS_COUNT], 1e-7).unwrap();
        assert_eq!(g.value(ce).item(), 0.0);
    }

    #[test]
    fn uniform_prediction_ce_is_ln_16() {
        let targets = full_targets(vec![2, 9, 0], 1, 3);
        let mut g = Graph::<f64>::new();
        let p = g.leaf(probs_tensor(3, |_, _| 1.0 / CLASS_COUNT as f64));
        let ce =
            weighted_cross_entropy(&mut g, p, &targets, &vec![1.0; CLASS_COUNT], 1e-7).unwrap();
        assert_abs_diff_eq!(g.value(ce).item(), (16.0f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(g.value(ce).item(), 2.7725887, epsilon = 1e-6);
    }

    #[test]
    fn doubling_one_class_weight_doubles_its_contribution() {
        // Slots with classes [0, 1, 0]; doubling w_0 doubles the class-0 share.
        let targets = full_targets(vec![0, 1, 0], 1, 3);
        let p = probs_tensor(3, |r, c| {
            if c as u32 == [0u32, 1, 0][r] {
                0.6
            } else {
                0.4 / 15.0
            }
        });
        let eval = |w0: f64| {
            let mut weights = vec![1.0; CLASS_COUNT];
            weights[0] = w0;
            let mut g = Graph::<f64>::new();
            let pn = g.leaf(p.clone());
            let ce = weighted_cross_entropy(&mut g, pn, &targets, &weights, 1e-7).unwrap();
            g.value(ce).item()
        };
        let slot_term = -(0.6f64).ln() / 3.0; // one slot's unweighted share
        let base = eval(1.0);
        let doubled = eval(2.0);
        assert_abs_diff_eq!(doubled - base, 2.0 * slot_term, epsilon = 1e-12);
    }

    #[test]
    fn transition_loss_zero_for_one_hot_correct() {
        let classes = vec![0u32, 0, 1, 1, 2];
        let targets = full_targets(classes.clone(), 1, 5);
        let mut g = Graph::<f64>::new();
        let p = g.leaf(one_hot(&classes));
        let tr = transition_loss(&mut g, p, &targets, 1e-7).unwrap();
        assert_abs_diff_eq!(g.value(tr).item(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn transition_loss_uniform_three_slot_example() {
        // Targets [A, A, B] with uniform predictions over 16 classes:
        // overlap = 1/16, change prob = 0.9375 for both pairs.
        let targets = full_targets(vec![0, 0, 1], 1, 3);
        let mut g = Graph::<f64>::new();
        let p = g.leaf(probs_tensor(3, |_, _| 1.0 / 16.0));
        let tr = transition_loss(&mut g, p, &targets, 1e-7).unwrap();
        let expected = -0.5 * ((1.0f64 - 0.9375).ln() + 0.9375f64.ln());
        assert_abs_diff_eq!(g.value(tr).item(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(g.value(tr).item(), 1.4186, epsilon = 1e-4);
    }

    #[test]
    fn transition_loss_constant_target_reduces_to_same_term() {
        let targets = full_targets(vec![4; 6], 1, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Tensor::<f64>::rand_uniform(vec![6, CLASS_COUNT], 1.0, &mut rng);
        let mut g = Graph::<f64>::new();
        let l = g.leaf(logits);
        let p = g.softmax(l).unwrap();
        let tr = transition_loss(&mut g, p, &targets, 1e-7).unwrap();
        // all t_i = 0: loss = -mean ln(1 - t_hat) = -mean ln(overlap)
        let pv = g.value(p).data().to_vec();
        let mut expected = 0.0;
        for i in 0..5 {
            let dot: f64 = (0..CLASS_COUNT)
                .map(|c| pv[i * CLASS_COUNT + c] * pv[(i + 1) * CLASS_COUNT + c])
                .sum();
            expected -= dot.ln() / 5.0;
        }
        assert_abs_diff_eq!(g.value(tr).item(), expected, epsilon = 1e-12);
    }

    /// Exhaustive-alignment DTW used as an independent oracle: enumerates
    /// every monotone path from (0, 0) to (n-1, m-1) and minimizes the
    /// summed local cost. Exponential; lengths <= 6 only.
    pub(crate) fn brute_force_dtw(pred: &[Vec<f64>], target_classes: &[u32]) -> f64 {
        fn cost(p: &[f64], t: u32) -> f64 {
            p.iter()
                .enumerate()
                .map(|(c, &v)| {
                    let e = if c as u32 == t { 1.0 } else { 0.0 };
                    (v - e) * (v - e)
                })
                .sum()
        }
        fn best(pred: &[Vec<f64>], targets: &[u32], i: usize, j: usize) -> f64 {
            let here = cost(&pred[i], targets[j]);
            if i == pred.len() - 1 && j == targets.len() - 1 {
                return here;
            }
            let mut rest = f64::INFINITY;
            if i + 1 < pred.len() {
                rest = rest.min(best(pred, targets, i + 1, j));
            }
            if j + 1 < targets.len() {
                rest = rest.min(best(pred, targets, i, j + 1));
            }
            if i + 1 < pred.len() && j + 1 < targets.len() {
                rest = rest.min(best(pred, targets, i + 1, j + 1));
            }
            here + rest
        }
        best(pred, target_classes, 0, 0)
    }

    #[test]
    fn dtw_gamma_zero_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let seq = rng.gen_range(2..=6);
            let classes: Vec<u32> =
                (0..seq).map(|_| rng.gen_range(0..CLASS_COUNT as u32)).collect();
            let pred: Vec<Vec<f64>> = (0..seq)
                .map(|_| {
                    let raw: Vec<f64> = (0..CLASS_COUNT).map(|_| rng.gen::<f64>()).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(|x| x / s).collect()
                })
                .collect();
            let flat: Vec<f64> = pred.iter().flatten().copied().collect();
            let mut g = Graph::<f64>::new();
            let p = g.leaf(Tensor::new(vec![seq, CLASS_COUNT], flat).unwrap());
            let d = g.soft_dtw(p, &classes, 0.0, 1, seq).unwrap();
            let got = g.value(d).data()[0];
            let want = brute_force_dtw(&pred, &classes);
            assert_abs_diff_eq!(got, want, epsilon = 1e-9);
        }
    }

    #[test]
    fn soft_dtw_is_below_hard_dtw_for_positive_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let seq = rng.gen_range(2..=6);
            let classes: Vec<u32> =
                (0..seq).map(|_| rng.gen_range(0..CLASS_COUNT as u32)).collect();
            let flat: Vec<f64> = (0..seq * CLASS_COUNT).map(|_| rng.gen::<f64>()).collect();
            let run = |gamma: f64| {
                let mut g = Graph::<f64>::new();
                let p = g.leaf(Tensor::new(vec![seq, CLASS_COUNT], flat.clone()).unwrap());
                let d = g.soft_dtw(p, &classes, gamma, 1, seq).unwrap();
                g.value(d).data()[0]
            };
            assert!(run(1.0) <= run(0.0) + 1e-12);
            assert!(run(0.1) <= run(0.0) + 1e-12);
        }
    }

    #[test]
    fn combined_loss_weight_vector_behavior() {
        let targets = full_targets(vec![0, 1, 2, 2], 1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor::<f64>::rand_uniform(vec![4, CLASS_COUNT], 1.0, &mut rng);

        let eval = |w1: f64, w2: f64, w3: f64| {
            let cfg = LossConfig { w1, w2, w3, ..LossConfig::default() };
            let mut g = Graph::<f64>::new();
            let l = g.leaf(logits.clone());
            let p = g.softmax(l).unwrap();
            let loss = combined_loss(&mut g, p, &targets, &cfg).unwrap();
            g.value(loss).item()
        };
        let ce_only = eval(1.0, 0.0, 0.0);
        let mut g = Graph::<f64>::new();
        let l = g.leaf(logits.clone());
        let p = g.softmax(l).unwrap();
        let ce =
            weighted_cross_entropy(&mut g, p, &targets, &vec![1.0; CLASS_COUNT], 1e-7).unwrap();
        assert_abs_diff_eq!(ce_only, g.value(ce).item(), epsilon = 1e-12);

        assert_eq!(eval(0.0, 0.0, 0.0), 0.0);

        let base = eval(1.0, 0.2, 0.1);
        let tripled = eval(3.0, 0.6, 0.3);
        assert_abs_diff_eq!(tripled, 3.0 * base, epsilon = 1e-9);
    }

    #[test]
    fn masked_loss_reduces_to_combined_when_all_real() {
        let targets = full_targets(vec![0, 1, 2, 3, 3, 1], 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = Tensor::<f64>::rand_uniform(vec![6, CLASS_COUNT], 1.0, &mut rng);
        let cfg = LossConfig { w_real: 1.0, ..LossConfig::default() };

        let mut g1 = Graph::<f64>::new();
        let l1 = g1.leaf(logits.clone());
        let p1 = g1.softmax(l1).unwrap();
        let all_real = vec![true; 6];
        let masked = masked_combined_loss(&mut g1, p1, &targets, &all_real, &cfg).unwrap();

        let mut g2 = Graph::<f64>::new();
        let l2 = g2.leaf(logits);
        let p2 = g2.softmax(l2).unwrap();
        let combined = combined_loss(&mut g2, p2, &targets, &cfg).unwrap();

        assert_abs_diff_eq!(g1.value(masked).item(), g2.value(combined).item(), epsilon = 1e-12);
    }

    #[test]
    fn masked_loss_synth_weight_zero_drops_synthetic_ce() {
        // All-synthetic slots with w_synth = 0: the CE part vanishes and only
        // transition + DTW drive the value.
        let targets = full_targets(vec![0, 1, 2, 3], 1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let logits = Tensor::<f64>::rand_uniform(vec![4, CLASS_COUNT], 1.0, &mut rng);
        let cfg = LossConfig { w_synth: 0.0, ..LossConfig::default() };

        let mut g1 = Graph::<f64>::new();
        let l1 = g1.leaf(logits.clone());
        let p1 = g1.softmax(l1).unwrap();
        let all_synth = vec![false; 4];
        let masked = masked_combined_loss(&mut g1, p1, &targets, &all_synth, &cfg).unwrap();

        let mut g2 = Graph::<f64>::new();
        let l2 = g2.leaf(logits);
        let p2 = g2.softmax(l2).unwrap();
        let no_ce = LossConfig { w1: 0.0, ..cfg.clone() };
        let rest = combined_loss(&mut g2, p2, &targets, &no_ce).unwrap();

        assert_abs_diff_eq!(g1.value(masked).item(), g2.value(rest).item(), epsilon = 1e-12);
    }

    #[test]
    fn masked_loss_half_real_half_synth_equal_slot_ce() {
        // With identical per-slot CE, the CE part is w1 (w_l + w_s) * slot CE.
        let targets = full_targets(vec![5; 4], 1, 4);
        let p = probs_tensor(4, |_, c| if c == 5 { 0.5 } else { 0.5 / 15.0 });
        let real = vec![true, true, false, false];
        let cfg = LossConfig { w2: 0.0, w3: 0.0, ..LossConfig::default() };
        let mut g = Graph::<f64>::new();
        let pn = g.leaf(p);
        let loss = masked_combined_loss(&mut g, pn, &targets, &real, &cfg).unwrap();
        let slot_ce = -(0.5f64).ln();
        let expected = cfg.w1 * (cfg.w_real + cfg.w_synth) * slot_ce;
        assert_abs_diff_eq!(g.value(loss).item(), expected, epsilon = 1e-12);
    }

    #[test]
    fn losses_pass_finite_difference_check() {
        // Full masked objective through softmax from free logits.
        let batch = 2;
        let seq = 5;
        let rows = batch * seq;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let classes: Vec<u32> = (0..rows).map(|_| rng.gen_range(0..16)).collect();
        let targets = full_targets(classes, batch, seq);
        let real: Vec<bool> =
            vec![true, false, true, true, false, false, true, false, true, true];
        let logits =
            Tensor::<f64>::rand_uniform(vec![rows, CLASS_COUNT], 1.5, &mut rng).with_grad();
        let cfg = LossConfig::default();

        let run = |logit_tensor: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let l = g.leaf(logit_tensor.clone());
            let p = g.softmax(l).unwrap();
            let loss = masked_combined_loss(&mut g, p, &targets, &real, &cfg).unwrap();
            (g, l, loss)
        };

        let (g, l, loss) = run(&logits);
        let mut grads = g.backward(loss).unwrap();
        let analytic = vec![grads.take(l)];

        let params = vec![logits];
        let coords = sample_coordinates(&params, &analytic, 40, 7);
        let report = finite_difference_check(
            |p| {
                let (g, _, loss) = run(&p[0]);
                g.value(loss).item()
            },
            &params,
            &analytic,
            1e-6,
            &coords,
        );
        assert!(report.max_rel_error < 1e-4, "max rel error {}", report.max_rel_error);
    }
}
