//! Jensen-Shannon divergence over the five activity statistics and the
//! system-level fidelity report.
//!
//! JSD uses log base 2, so every score lives in [0, 1]. Statistics are
//! extracted with the same rounding rules as the slot encoding, which makes
//! hand-derived expectations line up with encoded sequences.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::activity::{ActivityChain, ACTIVITY_TYPE_COUNT, SLOTS_PER_DAY};
use crate::encoding::round_to_slot_boundary;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("distributions differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("distribution sums to {0}, expected 1 within 1e-6")]
    NotNormalized(f64),
    #[error("empty chain collection")]
    EmptyCollection,
}

/// Jensen-Shannon divergence in base 2 with the 0 * log(0 / m) = 0
/// convention. Symmetric, and 0 exactly when the inputs are identical.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64, MetricsError> {
    if p.len() != q.len() {
        return Err(MetricsError::LengthMismatch(p.len(), q.len()));
    }
    for dist in [p, q] {
        let sum: f64 = dist.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(MetricsError::NotNormalized(sum));
        }
    }
    let half_divergence = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| {
                if x <= 0.0 {
                    0.0
                } else {
                    let m = 0.5 * (x + y);
                    x * (x / m).log2()
                }
            })
            .sum::<f64>()
    };
    Ok(0.5 * half_divergence(p, q) + 0.5 * half_divergence(q, p))
}

/// A binned count vector with its normalized probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Histogram {
    pub fn from_counts(counts: Vec<f64>) -> Self {
        let total: f64 = counts.iter().sum();
        let probs = if total > 0.0 {
            counts.iter().map(|&c| c / total).collect()
        } else {
            vec![0.0; counts.len()]
        };
        Histogram { counts, probs }
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

/// Highest chain length with its own bin; longer chains share the last bin.
pub const LENGTH_BIN_MAX: usize = 13;

/// The five per-collection activity statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityStatistics {
    /// Activities per day: bins 1..=12 plus a 13+ bin.
    pub length: Histogram,
    /// Activity type codes 1..=15 over all instances.
    pub kind: Histogram,
    /// Start slot 0..=95 of each instance.
    pub start: Histogram,
    /// Last occupied slot 0..=95 of each instance.
    pub end: Histogram,
    /// Instance length in slots 1..=96.
    pub duration: Histogram,
    /// Mean share of the day covered by activities, a visibility label for
    /// fragmentary reference data.
    pub coverage_share: f64,
    pub chain_count: usize,
}

/// An activity's occupied slot range under the encoding rounding rules, if
/// it survives rounding.
fn instance_slots(start_min: u16, end_min: u16) -> Option<(usize, usize)> {
    let s = round_to_slot_boundary(start_min);
    let e = round_to_slot_boundary(end_min);
    if s >= e {
        return None;
    }
    let first = (s / 15) as usize;
    let last = ((e / 15) as usize - 1).min(SLOTS_PER_DAY - 1);
    Some((first, last))
}

/// Builds the five histograms for a chain collection.
///
/// Order-invariant and duplication-invariant (probabilities are normalized).
/// Incomplete chains contribute only their observed activities; the coverage
/// share records how much of the day those activities span.
pub fn extract_statistics(chains: &[ActivityChain]) -> Result<ActivityStatistics, MetricsError> {
    if chains.is_empty() {
        return Err(MetricsError::EmptyCollection);
    }
    let mut length = vec![0.0; LENGTH_BIN_MAX];
    let mut kind = vec![0.0; ACTIVITY_TYPE_COUNT];
    let mut start = vec![0.0; SLOTS_PER_DAY];
    let mut end = vec![0.0; SLOTS_PER_DAY];
    let mut duration = vec![0.0; SLOTS_PER_DAY];
    let mut covered_slots = 0usize;

    for chain in chains {
        let mut instances = 0usize;
        for a in &chain.activities {
            let Some((first, last)) = instance_slots(a.start_min, a.end_min) else {
                continue;
            };
            instances += 1;
            kind[a.kind.index()] += 1.0;
            start[first] += 1.0;
            end[last] += 1.0;
            duration[last - first] += 1.0; // bin i = duration of i+1 slots
            covered_slots += last - first + 1;
        }
        if instances > 0 {
            length[instances.min(LENGTH_BIN_MAX) - 1] += 1.0;
        }
    }

    Ok(ActivityStatistics {
        length: Histogram::from_counts(length),
        kind: Histogram::from_counts(kind),
        start: Histogram::from_counts(start),
        end: Histogram::from_counts(end),
        duration: Histogram::from_counts(duration),
        coverage_share: covered_slots as f64 / (chains.len() * SLOTS_PER_DAY) as f64,
        chain_count: chains.len(),
    })
}

/// The five JSD scores between a generated and a reference collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsdReport {
    pub jsd_length: f64,
    pub jsd_duration: f64,
    pub jsd_type: f64,
    pub jsd_start: f64,
    pub jsd_end: f64,
    pub n_generated: usize,
    pub n_reference: usize,
    /// Mean day coverage of each side; flags comparisons against
    /// fragmentary references.
    pub coverage_generated: f64,
    pub coverage_reference: f64,
    pub config_digest: String,
    /// Masking-strategy mix used to produce the generated side, when the
    /// caller masked inputs (reconstruction evaluation provenance).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy_mix: Option<std::collections::BTreeMap<String, usize>>,
}

impl JsdReport {
    pub fn values(&self) -> [(&'static str, f64); 5] {
        [
            ("length", self.jsd_length),
            ("duration", self.jsd_duration),
            ("type", self.jsd_type),
            ("start", self.jsd_start),
            ("end", self.jsd_end),
        ]
    }

    pub fn mean(&self) -> f64 {
        self.values().iter().map(|(_, v)| v).sum::<f64>() / 5.0
    }

    pub fn max(&self) -> f64 {
        self.values().iter().map(|(_, v)| *v).fold(0.0, f64::max)
    }
}

/// Digest of the statistic-extraction configuration baked into this build:
/// bin layouts and the rounding rule. Identical digests mean comparable
/// reports.
pub fn config_digest() -> String {
    let descriptor = format!(
        "stats-v1;slots={SLOTS_PER_DAY};types={ACTIVITY_TYPE_COUNT};length-bins=1..={LENGTH_BIN_MAX};round=nearest-15-ties-down;log-base=2",
    );
    hex::encode(Sha256::digest(descriptor.as_bytes()))
}

pub fn evaluate(
    generated: &[ActivityChain],
    reference: &[ActivityChain],
) -> Result<JsdReport, MetricsError> {
    let gen_stats = extract_statistics(generated)?;
    let ref_stats = extract_statistics(reference)?;
    evaluate_statistics(&gen_stats, &ref_stats)
}

pub fn evaluate_statistics(
    gen_stats: &ActivityStatistics,
    ref_stats: &ActivityStatistics,
) -> Result<JsdReport, MetricsError> {
    Ok(JsdReport {
        jsd_length: jsd(&gen_stats.length.probs, &ref_stats.length.probs)?,
        jsd_duration: jsd(&gen_stats.duration.probs, &ref_stats.duration.probs)?,
        jsd_type: jsd(&gen_stats.kind.probs, &ref_stats.kind.probs)?,
        jsd_start: jsd(&gen_stats.start.probs, &ref_stats.start.probs)?,
        jsd_end: jsd(&gen_stats.end.probs, &ref_stats.end.probs)?,
        n_generated: gen_stats.chain_count,
        n_reference: ref_stats.chain_count,
        coverage_generated: gen_stats.coverage_share,
        coverage_reference: ref_stats.coverage_share,
        config_digest: config_digest(),
        strategy_mix: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activity::{Activity, ActivityType};
    use approx::assert_abs_diff_eq;
    use chrono::NaiveDate;

    fn chain(id: &str, activities: Vec<(u8, u16, u16)>) -> ActivityChain {
        ActivityChain::new(
            id,
            NaiveDate::from_ymd_opt(2024, 3, 4).unwrap(),
            activities
                .into_iter()
                .map(|(c, s, e)| Activity::new(ActivityType::new(c).unwrap(), s, e))
                .collect(),
        )
    }

    #[test]
    fn jsd_identical_distributions_is_exactly_zero() {
        let p = vec![0.2, 0.3, 0.5];
        assert_eq!(jsd(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn jsd_disjoint_supports_is_exactly_one() {
        assert_eq!(jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn jsd_hand_derived_value() {
        // jsd([1,0], [0.5,0.5]) = 0.5*log2(4/3) + 0.25*log2(2/3) + 0.25
        let v = jsd(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(v, 0.31128, epsilon = 1e-5);
    }

    #[test]
    fn jsd_is_symmetric_and_bounded() {
        let p = vec![0.7, 0.1, 0.05, 0.15];
        let q = vec![0.05, 0.45, 0.3, 0.2];
        let a = jsd(&p, &q).unwrap();
        let b = jsd(&q, &p).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0 && a < 1.0);
    }

    #[test]
    fn jsd_rejects_bad_inputs() {
        assert!(matches!(jsd(&[1.0], &[0.5, 0.5]), Err(MetricsError::LengthMismatch(1, 2))));
        assert!(matches!(jsd(&[0.7, 0.7], &[0.5, 0.5]), Err(MetricsError::NotNormalized(_))));
    }

    #[test]
    fn statistics_of_three_activity_day() {
        // Home 00:00-08:00, Work 08:30-17:00, Home 17:30-24:00.
        let c = chain("a", vec![(1, 0, 480), (2, 510, 1020), (1, 1050, 1440)]);
        let stats = extract_statistics(std::slice::from_ref(&c)).unwrap();
        // All mass at chain length 3.
        assert_eq!(stats.length.probs[2], 1.0);
        // Type: Home 2/3, Work 1/3.
        assert_abs_diff_eq!(stats.kind.probs[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.kind.probs[1], 1.0 / 3.0, epsilon = 1e-12);
        // Start slots 0, 34, 70.
        for slot in [0usize, 34, 70] {
            assert_abs_diff_eq!(stats.start.probs[slot], 1.0 / 3.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(stats.start.probs.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn identical_collections_have_all_zero_jsd() {
        let chains =
            vec![chain("a", vec![(1, 0, 480), (2, 510, 1020)]), chain("b", vec![(1, 0, 1440)])];
        let report = evaluate(&chains, &chains).unwrap();
        for (_, v) in report.values() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn duplication_leaves_histograms_unchanged() {
        let chains =
            vec![chain("a", vec![(1, 0, 480), (7, 510, 570)]), chain("b", vec![(2, 540, 1020)])];
        let mut doubled = chains.clone();
        doubled.extend(chains.clone());
        let s1 = extract_statistics(&chains).unwrap();
        let s2 = extract_statistics(&doubled).unwrap();
        assert_eq!(s1.length.probs, s2.length.probs);
        assert_eq!(s1.kind.probs, s2.kind.probs);
        assert_eq!(s1.start.probs, s2.start.probs);
        assert_eq!(s1.end.probs, s2.end.probs);
        assert_eq!(s1.duration.probs, s2.duration.probs);
    }

    #[test]
    fn ordering_does_not_matter() {
        let a = chain("a", vec![(1, 0, 480)]);
        let b = chain("b", vec![(2, 540, 1020)]);
        let s1 = extract_statistics(&[a.clone(), b.clone()]).unwrap();
        let s2 = extract_statistics(&[b, a]).unwrap();
        assert_eq!(s1.kind.probs, s2.kind.probs);
        assert_eq!(s1.length.probs, s2.length.probs);
    }

    #[test]
    fn empty_collection_is_an_error() {
        assert!(matches!(extract_statistics(&[]), Err(MetricsError::EmptyCollection)));
    }

    #[test]
    fn long_chains_share_the_tail_bin() {
        let acts: Vec<(u8, u16, u16)> = (0..14).map(|i| (1u8, i * 90, i * 90 + 60)).collect();
        let c = chain("a", acts);
        let stats = extract_statistics(&[c]).unwrap();
        assert_eq!(stats.length.probs[LENGTH_BIN_MAX - 1], 1.0);
    }

    #[test]
    fn report_serialization_round_trips() {
        let chains = vec![chain("a", vec![(1, 0, 480), (2, 510, 1020)])];
        let report = evaluate(&chains, &chains).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: JsdReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, back);
        assert_eq!(report.config_digest, config_digest());
    }
}
