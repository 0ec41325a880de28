//! Conversion between activity chains and 96-slot token sequences, temporal
//! context labels, and the three masking strategies used both for training
//! and for representing real-world incompleteness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activity::{
    Activity, ActivityChain, ActivityType, ObservedMask, MASK_TOKEN, MINUTES_PER_SLOT,
    SLOTS_PER_DAY, TRAVEL_TOKEN,
};

/// A day as 96 slot tokens plus observation flags and temporal context.
///
/// Invariants: every slot with `observed == false` carries [`MASK_TOKEN`];
/// `time_labels` are a pure function of the slot index under the segment
/// table that produced the sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotSequence {
    /// Tokens in {1..=15, TRAVEL_TOKEN, MASK_TOKEN}.
    pub tokens: [u8; SLOTS_PER_DAY],
    /// True where the slot is ground truth (activity or inferred travel).
    pub observed: [bool; SLOTS_PER_DAY],
    /// Piecewise-constant time-of-day labels in (0, 1].
    pub time_labels: [f64; SLOTS_PER_DAY],
    /// Monday = 0 .. Sunday = 6.
    pub day_of_week: u8,
}

impl SlotSequence {
    pub fn observed_mask(&self) -> ObservedMask {
        ObservedMask(self.observed)
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&b| b).count()
    }

    pub fn mask_count(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == MASK_TOKEN).count()
    }

    pub fn is_complete(&self) -> bool {
        self.observed.iter().all(|&b| b)
    }
}

/// Piecewise-constant time-of-day labels keyed by segment end minute.
///
/// Only the early-morning (0.15) and night (0.8) anchor values are fixed by
/// the problem; the rest of the default table interpolates between them and
/// ships as configuration so alternates can be tested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSegmentTable {
    /// (exclusive end minute, label) pairs covering [0, 1440) in order.
    pub segments: Vec<(u16, f64)>,
}

impl Default for TimeSegmentTable {
    fn default() -> Self {
        TimeSegmentTable {
            segments: vec![
                (240, 0.8),   // [00:00, 04:00) night
                (420, 0.15),  // [04:00, 07:00) early morning
                (600, 0.3),   // [07:00, 10:00) morning
                (780, 0.45),  // [10:00, 13:00) midday
                (960, 0.55),  // [13:00, 16:00) afternoon
                (1140, 0.65), // [16:00, 19:00) late afternoon
                (1320, 0.7),  // [19:00, 22:00) evening
                (1440, 0.8),  // [22:00, 24:00) night
            ],
        }
    }
}

impl TimeSegmentTable {
    /// Label for a slot index 0..96, from the segment containing its start.
    pub fn label(&self, slot: usize) -> f64 {
        let minute = slot as u16 * MINUTES_PER_SLOT;
        for &(end, label) in &self.segments {
            if minute < end {
                return label;
            }
        }
        self.segments.last().map(|&(_, l)| l).unwrap_or(0.0)
    }

    pub fn labels(&self) -> [f64; SLOTS_PER_DAY] {
        let mut out = [0.0; SLOTS_PER_DAY];
        for (slot, slot_label) in out.iter_mut().enumerate() {
            *slot_label = self.label(slot);
        }
        out
    }
}

/// Deterministic time-of-day label for a slot under the default table.
pub fn temporal_label(slot: usize) -> f64 {
    TimeSegmentTable::default().label(slot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeConfig {
    /// Inter-activity gaps up to this many minutes become TRAVEL slots;
    /// longer gaps are treated as unobserved time.
    pub travel_cap_min: u16,
    pub segments: TimeSegmentTable,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        EncodeConfig { travel_cap_min: 60, segments: TimeSegmentTable::default() }
    }
}

/// Rounds a minute value to the nearest slot boundary. With integer minutes
/// an exact half-slot remainder cannot occur; remainders of 7 round down and
/// 8 round up.
pub fn round_to_slot_boundary(minute: u16) -> u16 {
    ((minute + MINUTES_PER_SLOT / 2) / MINUTES_PER_SLOT) * MINUTES_PER_SLOT
}

/// Activity's covered slot range after boundary rounding, if non-empty.
fn slot_range(a: &Activity) -> Option<(usize, usize)> {
    let start = round_to_slot_boundary(a.start_min);
    let end = round_to_slot_boundary(a.end_min);
    if start >= end {
        return None; // rounds to an empty interval; contributes no slots
    }
    let first = (start / MINUTES_PER_SLOT) as usize;
    let last = (end / MINUTES_PER_SLOT) as usize - 1;
    Some((first, last.min(SLOTS_PER_DAY - 1)))
}

/// Encodes one chain into a slot sequence.
///
/// Each activity covers the slots of its rounded `[start, end)` interval.
/// Gaps between consecutive activities of at most `travel_cap_min` become
/// observed TRAVEL slots; longer gaps and uncovered time become unobserved
/// MASK slots.
pub fn encode_day(chain: &ActivityChain, cfg: &EncodeConfig) -> SlotSequence {
    encode_day_windowed(chain, cfg, None)
}

/// Like [`encode_day`] but with an explicit observation-window mask: travel
/// is only inferred across a gap when every gap slot lies inside a window,
/// so fragments recorded in separate observation windows are not stitched
/// together with spurious travel.
pub fn encode_day_windowed(
    chain: &ActivityChain,
    cfg: &EncodeConfig,
    window: Option<&ObservedMask>,
) -> SlotSequence {
    let mut tokens = [MASK_TOKEN; SLOTS_PER_DAY];
    let mut observed = [false; SLOTS_PER_DAY];

    let ranges: Vec<((usize, usize), u8)> = chain
        .activities
        .iter()
        .filter_map(|a| slot_range(a).map(|r| (r, a.kind.code())))
        .collect();

    for &((first, last), code) in &ranges {
        for slot in first..=last {
            tokens[slot] = code;
            observed[slot] = true;
        }
    }

    let cap_slots = (cfg.travel_cap_min / MINUTES_PER_SLOT) as usize;
    for pair in ranges.windows(2) {
        let (_, prev_last) = pair[0].0;
        let (next_first, _) = pair[1].0;
        if next_first <= prev_last + 1 {
            continue; // adjacent or overlapping after rounding: no gap
        }
        let gap = (prev_last + 1)..next_first;
        if gap.len() > cap_slots {
            continue;
        }
        let inside_window = window.map_or(true, |w| gap.clone().all(|slot| w.0[slot]));
        if inside_window {
            for slot in gap {
                tokens[slot] = TRAVEL_TOKEN;
                observed[slot] = true;
            }
        }
    }

    SlotSequence {
        tokens,
        observed,
        time_labels: cfg.segments.labels(),
        day_of_week: chain.day_of_week(),
    }
}

/// Decodes maximal runs of identical activity tokens back into activities.
/// TRAVEL and MASK runs are omitted from the activity list.
pub fn decode_activities(seq: &SlotSequence) -> Vec<Activity> {
    let mut activities = Vec::new();
    let mut slot = 0;
    while slot < SLOTS_PER_DAY {
        let token = seq.tokens[slot];
        let mut end = slot + 1;
        while end < SLOTS_PER_DAY && seq.tokens[end] == token {
            end += 1;
        }
        if let Ok(kind) = ActivityType::new(token) {
            activities.push(Activity::new(
                kind,
                slot as u16 * MINUTES_PER_SLOT,
                end as u16 * MINUTES_PER_SLOT,
            ));
        }
        slot = end;
    }
    activities
}

/// [`decode_activities`] wrapped into a chain for the given agent-day.
pub fn decode_slots(
    seq: &SlotSequence,
    agent_id: impl Into<String>,
    date: chrono::NaiveDate,
) -> ActivityChain {
    ActivityChain::new(agent_id, date, decode_activities(seq))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskStrategy {
    /// Mask whole activity runs until the masked-slot share reaches the
    /// target fraction.
    ActivityBased,
    /// Mask one uniformly placed contiguous block of `round(96 * fraction)`
    /// slots.
    Period,
    /// Mask exactly `round(96 * fraction)` individual slots sampled without
    /// replacement.
    TimeSlot,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 3] =
        [MaskStrategy::ActivityBased, MaskStrategy::Period, MaskStrategy::TimeSlot];

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::ActivityBased => "activity",
            MaskStrategy::Period => "period",
            MaskStrategy::TimeSlot => "timeslot",
        }
    }
}

impl std::str::FromStr for MaskStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "activity" | "activity-based" => Ok(MaskStrategy::ActivityBased),
            "period" => Ok(MaskStrategy::Period),
            "timeslot" | "time-slot" => Ok(MaskStrategy::TimeSlot),
            other => {
                Err(format!("unknown mask strategy {other:?} (expected activity|period|timeslot)"))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub strategy: MaskStrategy,
    /// Share of the 96 slots to hide, in [0, 1].
    pub fraction: f64,
    pub rng_seed: u64,
}

/// A masked sequence together with its training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSlots {
    pub seq: SlotSequence,
    /// Original tokens; the reconstruction target.
    pub target: [u8; SLOTS_PER_DAY],
    /// True where a target exists (slots observed in the input). Slots that
    /// were already unobserved stay MASK and are excluded from the target.
    pub target_mask: [bool; SLOTS_PER_DAY],
    /// True where this call hid a previously observed slot.
    pub newly_masked: [bool; SLOTS_PER_DAY],
}

/// Applies one masking strategy. Never unmasks: the output's observed set is
/// a subset of the input's. Identical specs (including the seed) produce
/// identical output.
pub fn apply_mask(seq: &SlotSequence, spec: &MaskSpec) -> MaskedSlots {
    let fraction = spec.fraction.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut hide = [false; SLOTS_PER_DAY];

    match spec.strategy {
        MaskStrategy::TimeSlot => {
            let n = (SLOTS_PER_DAY as f64 * fraction).round() as usize;
            for slot in sample_without_replacement(SLOTS_PER_DAY, n, &mut rng) {
                hide[slot] = true;
            }
        }
        MaskStrategy::Period => {
            let len = (SLOTS_PER_DAY as f64 * fraction).round() as usize;
            if len > 0 {
                let start = rng.gen_range(0..=SLOTS_PER_DAY - len);
                for flag in hide.iter_mut().skip(start).take(len) {
                    *flag = true;
                }
            }
        }
        MaskStrategy::ActivityBased => {
            // Maskable units are maximal runs of identical observed tokens.
            let mut runs: Vec<(usize, usize)> = Vec::new();
            let mut slot = 0;
            while slot < SLOTS_PER_DAY {
                if !seq.observed[slot] {
                    slot += 1;
                    continue;
                }
                let token = seq.tokens[slot];
                let mut end = slot + 1;
                while end < SLOTS_PER_DAY && seq.observed[end] && seq.tokens[end] == token {
                    end += 1;
                }
                runs.push((slot, end));
                slot = end;
            }
            shuffle(&mut runs, &mut rng);
            let mut masked = seq.mask_count();
            for (start, end) in runs {
                if masked as f64 / SLOTS_PER_DAY as f64 >= fraction {
                    break;
                }
                for flag in hide.iter_mut().take(end).skip(start) {
                    *flag = true;
                }
                masked += end - start;
            }
        }
    }

    let mut out = seq.clone();
    let mut newly_masked = [false; SLOTS_PER_DAY];
    for slot in 0..SLOTS_PER_DAY {
        if hide[slot] && seq.observed[slot] {
            newly_masked[slot] = true;
        }
        if hide[slot] {
            out.tokens[slot] = MASK_TOKEN;
            out.observed[slot] = false;
        }
    }

    MaskedSlots { seq: out, target: seq.tokens, target_mask: seq.observed, newly_masked }
}

/// First `n` elements of a seeded Fisher-Yates pass over `0..len`.
fn sample_without_replacement(len: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..len).collect();
    let n = n.min(len);
    for i in 0..n {
        let j = rng.gen_range(i..len);
        indices.swap(i, j);
    }
    indices.truncate(n);
    indices
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// JSONL interchange for encoded datasets:
/// `{"tokens": [96 ints], "observed": "96-bit string", "dow": 0..6}`.
pub mod jsonl {
    use super::*;
    use crate::activity::MaskParseError;
    use std::io::{BufRead, Write};

    #[derive(Debug, Serialize, Deserialize)]
    struct SeqRecord {
        tokens: Vec<u8>,
        observed: String,
        dow: u8,
    }

    #[derive(Debug, thiserror::Error)]
    pub enum SeqIoError {
        #[error("line {line}: {source}")]
        Json {
            line: usize,
            #[source]
            source: serde_json::Error,
        },
        #[error("line {line}: expected 96 tokens, got {got}")]
        BadLength { line: usize, got: usize },
        #[error("line {line}: token {token} outside 1..=17")]
        BadToken { line: usize, token: u8 },
        #[error("line {line}: day of week {dow} outside 0..=6")]
        BadDow { line: usize, dow: u8 },
        #[error("line {line}: unobserved slot {slot} must carry the MASK token")]
        UnmaskedHole { line: usize, slot: usize },
        #[error("line {line}: {source}")]
        BadMask {
            line: usize,
            #[source]
            source: MaskParseError,
        },
        #[error(transparent)]
        Io(#[from] std::io::Error),
    }

    pub fn write_sequences<W: Write>(out: &mut W, seqs: &[SlotSequence]) -> Result<(), SeqIoError> {
        for seq in seqs {
            let record = SeqRecord {
                tokens: seq.tokens.to_vec(),
                observed: seq.observed_mask().to_bit_string(),
                dow: seq.day_of_week,
            };
            serde_json::to_writer(&mut *out, &record)
                .map_err(|source| SeqIoError::Json { line: 0, source })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Time labels are recomputed from `segments`; they are deterministic
    /// from the slot index and are not serialized.
    pub fn read_sequences<R: BufRead>(
        input: R,
        segments: &TimeSegmentTable,
    ) -> Result<Vec<SlotSequence>, SeqIoError> {
        let labels = segments.labels();
        let mut seqs = Vec::new();
        for (idx, line) in input.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: SeqRecord = serde_json::from_str(&line)
                .map_err(|source| SeqIoError::Json { line: line_no, source })?;
            if record.tokens.len() != SLOTS_PER_DAY {
                return Err(SeqIoError::BadLength { line: line_no, got: record.tokens.len() });
            }
            if record.dow > 6 {
                return Err(SeqIoError::BadDow { line: line_no, dow: record.dow });
            }
            let mask = ObservedMask::from_bit_string(&record.observed)
                .map_err(|source| SeqIoError::BadMask { line: line_no, source })?;
            let mut tokens = [0u8; SLOTS_PER_DAY];
            for (slot, &t) in record.tokens.iter().enumerate() {
                if !(1..=MASK_TOKEN).contains(&t) {
                    return Err(SeqIoError::BadToken { line: line_no, token: t });
                }
                if !mask.0[slot] && t != MASK_TOKEN {
                    return Err(SeqIoError::UnmaskedHole { line: line_no, slot });
                }
                tokens[slot] = t;
            }
            seqs.push(SlotSequence {
                tokens,
                observed: mask.0,
                time_labels: labels,
                day_of_week: record.dow,
            });
        }
        Ok(seqs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn chain(activities: Vec<(u8, u16, u16)>) -> ActivityChain {
        ActivityChain::new(
            "a1",
            NaiveDate::from_ymd_opt(2024, 3, 4).unwrap(),
            activities
                .into_iter()
                .map(|(c, s, e)| Activity::new(ActivityType::new(c).unwrap(), s, e))
                .collect(),
        )
    }

    fn complete_day() -> SlotSequence {
        // Home 00:00-08:00, Work 08:30-17:00, Home 17:30-24:00
        encode_day(
            &chain(vec![(1, 0, 480), (2, 510, 1020), (1, 1050, 1440)]),
            &EncodeConfig::default(),
        )
    }

    #[test]
    fn home_travel_exercise_layout() {
        // Home 00:00-10:00, 30 min travel, Exercise 10:30-11:00.
        let seq = encode_day(&chain(vec![(1, 0, 600), (10, 630, 660)]), &EncodeConfig::default());
        assert!(seq.tokens[0..40].iter().all(|&t| t == 1));
        assert!(seq.tokens[40..42].iter().all(|&t| t == TRAVEL_TOKEN));
        assert!(seq.tokens[42..44].iter().all(|&t| t == 10));
        assert!(seq.tokens[44..].iter().all(|&t| t == MASK_TOKEN));
        assert!(seq.observed[0..44].iter().all(|&b| b));
        assert!(seq.observed[44..].iter().all(|&b| !b));
    }

    #[test]
    fn empty_chain_is_all_mask() {
        let seq = encode_day(&chain(vec![]), &EncodeConfig::default());
        assert_eq!(seq.mask_count(), SLOTS_PER_DAY);
        assert_eq!(seq.observed_count(), 0);
    }

    #[test]
    fn unaligned_times_round_to_nearest_slot() {
        // 08:03-09:58 rounds to 08:00-10:00 -> slots 32..=39.
        let seq = encode_day(&chain(vec![(2, 483, 598)]), &EncodeConfig::default());
        assert!(seq.tokens[32..40].iter().all(|&t| t == 2));
        assert_eq!(seq.tokens[31], MASK_TOKEN);
        assert_eq!(seq.tokens[40], MASK_TOKEN);
    }

    #[test]
    fn rounding_half_slot_behavior() {
        assert_eq!(round_to_slot_boundary(7), 0);
        assert_eq!(round_to_slot_boundary(8), 15);
        assert_eq!(round_to_slot_boundary(487), 480);
        assert_eq!(round_to_slot_boundary(488), 495);
    }

    #[test]
    fn long_gap_is_unobserved_not_travel() {
        // 90-minute gap exceeds the 60-minute travel cap.
        let seq = encode_day(&chain(vec![(1, 0, 480), (2, 570, 720)]), &EncodeConfig::default());
        assert!(seq.tokens[32..38].iter().all(|&t| t == MASK_TOKEN));
        assert!(seq.observed[32..38].iter().all(|&b| !b));
    }

    #[test]
    fn gap_at_cap_is_travel() {
        // Exactly 60 minutes: still travel.
        let seq = encode_day(&chain(vec![(1, 0, 480), (2, 540, 720)]), &EncodeConfig::default());
        assert!(seq.tokens[32..36].iter().all(|&t| t == TRAVEL_TOKEN));
    }

    #[test]
    fn windowed_encoding_does_not_stitch_across_unobserved_gap() {
        let mut window = ObservedMask::none_observed();
        for slot in 0..32 {
            window.0[slot] = true;
        }
        for slot in 34..48 {
            window.0[slot] = true;
        }
        let c = chain(vec![(1, 0, 480), (2, 510, 720)]);
        let seq = encode_day_windowed(&c, &EncodeConfig::default(), Some(&window));
        // The 2-slot gap is inside the travel cap but spans a window break.
        assert_eq!(seq.tokens[32], MASK_TOKEN);
        assert_eq!(seq.tokens[33], MASK_TOKEN);
        let unwindowed = encode_day(&c, &EncodeConfig::default());
        assert_eq!(unwindowed.tokens[32], TRAVEL_TOKEN);
    }

    #[test]
    fn decode_inverts_encode_on_aligned_chain() {
        let c = chain(vec![(1, 0, 600), (10, 630, 660)]);
        let seq = encode_day(&c, &EncodeConfig::default());
        assert_eq!(decode_activities(&seq), c.activities);
    }

    #[test]
    fn decode_all_mask_is_empty() {
        let seq = encode_day(&chain(vec![]), &EncodeConfig::default());
        assert!(decode_activities(&seq).is_empty());
    }

    #[test]
    fn decode_alternating_tokens_keeps_every_run() {
        let mut seq = complete_day();
        for slot in 0..SLOTS_PER_DAY {
            seq.tokens[slot] = if slot % 2 == 0 { 1 } else { 2 };
            seq.observed[slot] = true;
        }
        let acts = decode_activities(&seq);
        assert_eq!(acts.len(), SLOTS_PER_DAY);
        assert!(acts.iter().all(|a| a.duration_min() == 15));
    }

    #[test]
    fn temporal_label_anchors() {
        let table = TimeSegmentTable::default();
        assert_eq!(table.label(20), 0.15); // 05:00
        assert_eq!(table.label(92), 0.8); // 23:00
        assert_eq!(table.label(48), 0.45); // 12:00
        assert_eq!(table.label(0), 0.8); // 00:00 night
    }

    #[test]
    fn mask_fraction_zero_is_identity() {
        let seq = complete_day();
        for strategy in MaskStrategy::ALL {
            let spec = MaskSpec { strategy, fraction: 0.0, rng_seed: 7 };
            let masked = apply_mask(&seq, &spec);
            assert_eq!(masked.seq, seq, "{strategy:?}");
        }
    }

    #[test]
    fn timeslot_masks_exactly_rounded_count() {
        let seq = complete_day();
        let spec = MaskSpec { strategy: MaskStrategy::TimeSlot, fraction: 0.7, rng_seed: 3 };
        let masked = apply_mask(&seq, &spec);
        assert_eq!(masked.seq.mask_count(), 67); // round(96 * 0.7)
    }

    #[test]
    fn period_masks_one_contiguous_block() {
        let seq = complete_day();
        let spec = MaskSpec { strategy: MaskStrategy::Period, fraction: 0.25, rng_seed: 11 };
        let masked = apply_mask(&seq, &spec);
        let hidden: Vec<usize> = (0..SLOTS_PER_DAY).filter(|&s| masked.newly_masked[s]).collect();
        assert_eq!(hidden.len(), 24);
        assert!(hidden.windows(2).all(|w| w[1] == w[0] + 1));
    }

    #[test]
    fn activity_based_masks_whole_runs_only() {
        let seq = complete_day();
        let spec = MaskSpec { strategy: MaskStrategy::ActivityBased, fraction: 0.4, rng_seed: 5 };
        let masked = apply_mask(&seq, &spec);
        // Every maximal run of the input is hidden completely or not at all.
        let mut slot = 0;
        while slot < SLOTS_PER_DAY {
            let token = seq.tokens[slot];
            let mut end = slot + 1;
            while end < SLOTS_PER_DAY && seq.tokens[end] == token {
                end += 1;
            }
            let states: Vec<bool> = (slot..end).map(|s| masked.newly_masked[s]).collect();
            assert!(states.iter().all(|&b| b == states[0]), "run {slot}..{end} split");
            slot = end;
        }
        let share = masked.seq.mask_count() as f64 / SLOTS_PER_DAY as f64;
        assert!(share >= 0.4);
    }

    #[test]
    fn same_seed_reproduces_identical_masks() {
        let seq = complete_day();
        for strategy in MaskStrategy::ALL {
            let spec = MaskSpec { strategy, fraction: 0.5, rng_seed: 42 };
            assert_eq!(apply_mask(&seq, &spec), apply_mask(&seq, &spec));
        }
    }

    #[test]
    fn apply_mask_never_unmasks() {
        let base = complete_day();
        let first = apply_mask(
            &base,
            &MaskSpec { strategy: MaskStrategy::Period, fraction: 0.3, rng_seed: 1 },
        );
        let second = apply_mask(
            &first.seq,
            &MaskSpec { strategy: MaskStrategy::TimeSlot, fraction: 0.3, rng_seed: 2 },
        );
        for slot in 0..SLOTS_PER_DAY {
            assert!(!second.seq.observed[slot] || first.seq.observed[slot]);
            // Already-unobserved slots are excluded from the target.
            assert_eq!(second.target_mask[slot], first.seq.observed[slot]);
        }
    }

    #[test]
    fn sequence_jsonl_round_trip() {
        let seq = complete_day();
        let masked = apply_mask(
            &seq,
            &MaskSpec { strategy: MaskStrategy::Period, fraction: 0.4, rng_seed: 9 },
        );
        let mut buf = Vec::new();
        jsonl::write_sequences(&mut buf, &[seq.clone(), masked.seq.clone()]).unwrap();
        let back = jsonl::read_sequences(buf.as_slice(), &TimeSegmentTable::default()).unwrap();
        assert_eq!(back, vec![seq, masked.seq]);
    }
}
