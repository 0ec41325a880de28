//! Domain vocabulary and validated containers for activities, chains and
//! agent-days. Everything here is an immutable value type; instances are safe
//! to share and send freely.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of 15-minute slots in one day.
pub const SLOTS_PER_DAY: usize = 96;
/// Slot width in minutes.
pub const MINUTES_PER_SLOT: u16 = 15;
/// Minutes in a full day; activity end times are exclusive and may equal it.
pub const MINUTES_PER_DAY: u16 = 1440;
/// Number of semantic activity categories (codes 1..=15).
pub const ACTIVITY_TYPE_COUNT: usize = 15;
/// Reserved slot token for inter-activity travel. Never a chain activity.
pub const TRAVEL_TOKEN: u8 = 16;
/// Reserved slot token for unobserved/masked slots. Never a chain activity.
pub const MASK_TOKEN: u8 = 17;
/// Number of distinct slot tokens (15 activities + TRAVEL + MASK).
pub const TOKEN_COUNT: usize = 17;
/// Number of predictable classes (15 activities + TRAVEL; MASK is never predicted).
pub const CLASS_COUNT: usize = 16;

/// A semantic activity category, code 1..=15.
///
/// Codes 16 (travel) and 17 (mask) are slot tokens only: travel occupies the
/// gap between activities in an encoded day and mask marks unobserved time,
/// so neither can appear in a decoded chain's activity list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ActivityType(u8);

impl ActivityType {
    pub const HOME: ActivityType = ActivityType(1);
    pub const WORK: ActivityType = ActivityType(2);
    pub const SCHOOL: ActivityType = ActivityType(3);
    pub const CHILD_ADULT_CARE: ActivityType = ActivityType(4);
    pub const BUY_GOODS: ActivityType = ActivityType(5);
    pub const BUY_SERVICES: ActivityType = ActivityType(6);
    pub const BUY_MEALS: ActivityType = ActivityType(7);
    pub const ERRANDS: ActivityType = ActivityType(8);
    pub const RECREATION: ActivityType = ActivityType(9);
    pub const EXERCISE: ActivityType = ActivityType(10);
    pub const VISIT: ActivityType = ActivityType(11);
    pub const HEALTH_CARE: ActivityType = ActivityType(12);
    pub const RELIGIOUS: ActivityType = ActivityType(13);
    pub const SOMETHING_ELSE: ActivityType = ActivityType(14);
    pub const DROP_OFF_PICK_UP: ActivityType = ActivityType(15);

    pub fn new(code: u8) -> Result<Self, InvalidActivityCode> {
        if (1..=ACTIVITY_TYPE_COUNT as u8).contains(&code) {
            Ok(ActivityType(code))
        } else {
            Err(InvalidActivityCode(code))
        }
    }

    pub fn code(self) -> u8 {
        self.0
    }

    /// Zero-based index into per-activity tables (code - 1).
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn from_index(index: usize) -> Result<Self, InvalidActivityCode> {
        Self::new(index as u8 + 1)
    }

    pub fn all() -> impl Iterator<Item = ActivityType> {
        (1..=ACTIVITY_TYPE_COUNT as u8).map(ActivityType)
    }

    pub fn description(self) -> &'static str {
        match self.0 {
            1 => "Home activities or work from home",
            2 => "Work-related activity or volunteer",
            3 => "Attend school",
            4 => "Attend child or adult care",
            5 => "Buy goods",
            6 => "Buy services",
            7 => "Buy meals",
            8 => "General errands",
            9 => "Recreational activities",
            10 => "Exercise",
            11 => "Visit friends or relatives",
            12 => "Health care visit",
            13 => "Religious or community activities",
            14 => "Something else",
            15 => "Drop off/pick up someone",
            _ => unreachable!(),
        }
    }
}

impl TryFrom<u8> for ActivityType {
    type Error = InvalidActivityCode;
    fn try_from(code: u8) -> Result<Self, Self::Error> {
        ActivityType::new(code)
    }
}

impl From<ActivityType> for u8 {
    fn from(t: ActivityType) -> u8 {
        t.0
    }
}

impl fmt::Display for ActivityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("invalid activity code {0}: expected 1..=15")]
pub struct InvalidActivityCode(pub u8);

/// One activity instance inside a day: `[start_min, end_min)` in minutes
/// from midnight. End is exclusive, so an activity ending at 10:00 and the
/// next starting at 10:00 do not overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Activity {
    pub kind: ActivityType,
    pub start_min: u16,
    pub end_min: u16,
}

impl Activity {
    pub fn new(kind: ActivityType, start_min: u16, end_min: u16) -> Self {
        Activity { kind, start_min, end_min }
    }

    pub fn duration_min(&self) -> u16 {
        self.end_min.saturating_sub(self.start_min)
    }
}

/// A time-ordered sequence of activities for one agent-day.
///
/// Raw ingested chains may carry unaligned times; encoding aligns them to the
/// 15-minute grid. `day_of_week` is derived from `date` (Monday = 0).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityChain {
    pub agent_id: String,
    pub date: NaiveDate,
    pub activities: Vec<Activity>,
}

impl ActivityChain {
    pub fn new(agent_id: impl Into<String>, date: NaiveDate, activities: Vec<Activity>) -> Self {
        ActivityChain { agent_id: agent_id.into(), date, activities }
    }

    /// Monday = 0 .. Sunday = 6.
    pub fn day_of_week(&self) -> u8 {
        self.date.weekday().num_days_from_monday() as u8
    }

    /// Checks every chain invariant and returns all violations found.
    ///
    /// Validation is idempotent: a chain that validates cleanly validates
    /// cleanly again, unchanged.
    pub fn validate(&self) -> Result<(), Vec<ChainViolation>> {
        let mut violations = Vec::new();
        for (i, a) in self.activities.iter().enumerate() {
            if a.start_min >= a.end_min {
                violations.push(ChainViolation::NonMonotoneTimes {
                    index: i,
                    start_min: a.start_min,
                    end_min: a.end_min,
                });
            }
            if a.start_min >= MINUTES_PER_DAY || a.end_min > MINUTES_PER_DAY {
                violations.push(ChainViolation::OutOfRangeTime {
                    index: i,
                    start_min: a.start_min,
                    end_min: a.end_min,
                });
            }
        }
        for i in 1..self.activities.len() {
            let prev = &self.activities[i - 1];
            let cur = &self.activities[i];
            if cur.start_min < prev.start_min {
                violations.push(ChainViolation::Unsorted { index: i });
            } else if cur.start_min < prev.end_min {
                violations.push(ChainViolation::OverlappingActivities { index: i });
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }
}

/// A single invariant violation reported by [`ActivityChain::validate`] or by
/// the JSONL reader.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChainViolation {
    #[error("activity {index}: start {start_min} >= end {end_min}")]
    NonMonotoneTimes { index: usize, start_min: u16, end_min: u16 },
    #[error("activity {index}: time outside [0, 1440] (start {start_min}, end {end_min})")]
    OutOfRangeTime { index: usize, start_min: u16, end_min: u16 },
    #[error("activity {index} starts before its predecessor")]
    Unsorted { index: usize },
    #[error("activity {index} overlaps its predecessor")]
    OverlappingActivities { index: usize },
    #[error("activity {index}: {source}")]
    InvalidCode {
        index: usize,
        #[source]
        source: InvalidActivityCode,
    },
}

/// Identifier of a square grid cell; deterministic from a coordinate and the
/// grid configuration. Ordered so tie-breaks on "lower region id" are well
/// defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RegionId(pub i64);

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A dwell episode inferred from GPS records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StayPoint {
    pub agent_id: String,
    pub region_id: RegionId,
    /// Epoch seconds.
    pub arrive: i64,
    /// Epoch seconds; always > `arrive`.
    pub depart: i64,
    /// (lat, lon) degrees of the member-record centroid.
    pub centroid: (f64, f64),
}

/// Tolerance for probability-vector normalization checks.
pub const DENSITY_TOLERANCE: f64 = 1e-9;

/// Parametric description of a region's activity timing, durations and
/// transitions. Drives the synthetic generator and the Bayesian annotator's
/// start-time factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionProfile {
    pub name: String,
    /// Per-activity start-time density over the 96 slots; each row sums to 1.
    pub start_density: Vec<Vec<f64>>,
    /// Per-activity mean dwell duration in slots.
    pub duration_mean_slots: Vec<f64>,
    /// Per-activity duration standard deviation in slots.
    pub duration_std_slots: Vec<f64>,
    /// First-order activity transition matrix; each row sums to 1.
    pub transition: Vec<Vec<f64>>,
    /// Multiplier on transition weights into each activity on weekdays.
    pub weekday_weights: Vec<f64>,
    /// Multiplier on transition weights into each activity on weekends.
    pub weekend_weights: Vec<f64>,
    /// Probability that an arrival at or after `evening_home_slot` goes home.
    pub evening_home_prob: f64,
    /// Slot index from which the evening return-home bias applies.
    pub evening_home_slot: usize,
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("profile {name}: {table} row {row} sums to {sum}, expected 1")]
    NotNormalized { name: String, table: &'static str, row: usize, sum: f64 },
    #[error("profile {name}: {table} has {got} rows, expected {expected}")]
    BadShape { name: String, table: &'static str, got: usize, expected: usize },
    #[error("profile {name}: negative entry in {table}")]
    Negative { name: String, table: &'static str },
}

impl RegionProfile {
    pub fn validate(&self) -> Result<(), ProfileError> {
        let n = ACTIVITY_TYPE_COUNT;
        let check_shape = |table: &'static str, rows: usize, cols: Option<(usize, usize)>| {
            if rows != n {
                return Err(ProfileError::BadShape {
                    name: self.name.clone(),
                    table,
                    got: rows,
                    expected: n,
                });
            }
            if let Some((got, expected)) = cols {
                if got != expected {
                    return Err(ProfileError::BadShape {
                        name: self.name.clone(),
                        table,
                        got,
                        expected,
                    });
                }
            }
            Ok(())
        };
        check_shape(
            "start_density",
            self.start_density.len(),
            self.start_density.first().map(|r| (r.len(), SLOTS_PER_DAY)),
        )?;
        check_shape(
            "transition",
            self.transition.len(),
            self.transition.first().map(|r| (r.len(), n)),
        )?;
        check_shape("duration_mean_slots", self.duration_mean_slots.len(), None)?;
        check_shape("duration_std_slots", self.duration_std_slots.len(), None)?;
        check_shape("weekday_weights", self.weekday_weights.len(), None)?;
        check_shape("weekend_weights", self.weekend_weights.len(), None)?;

        for (table, rows) in [("start_density", &self.start_density), ("transition", &self.transition)] {
            for (row, r) in rows.iter().enumerate() {
                if r.iter().any(|&x| x < 0.0) {
                    return Err(ProfileError::Negative { name: self.name.clone(), table });
                }
                let sum: f64 = r.iter().sum();
                if (sum - 1.0).abs() > DENSITY_TOLERANCE {
                    return Err(ProfileError::NotNormalized {
                        name: self.name.clone(),
                        table,
                        row,
                        sum,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Per-day observation mask over the 96 slots; `true` = observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObservedMask(pub [bool; SLOTS_PER_DAY]);

impl ObservedMask {
    pub fn all_observed() -> Self {
        ObservedMask([true; SLOTS_PER_DAY])
    }

    pub fn none_observed() -> Self {
        ObservedMask([false; SLOTS_PER_DAY])
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / SLOTS_PER_DAY as f64
    }

    /// 96-character string of `0`/`1`, slot 0 first.
    pub fn to_bit_string(&self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn from_bit_string(s: &str) -> Result<Self, MaskParseError> {
        let chars: Vec<char> = s.chars().collect();
        if chars.len() != SLOTS_PER_DAY {
            return Err(MaskParseError::BadLength(chars.len()));
        }
        let mut mask = [false; SLOTS_PER_DAY];
        for (i, c) in chars.iter().enumerate() {
            mask[i] = match c {
                '0' => false,
                '1' => true,
                other => return Err(MaskParseError::BadChar(*other)),
            };
        }
        Ok(ObservedMask(mask))
    }
}

#[derive(Debug, Error)]
pub enum MaskParseError {
    #[error("observed mask must have 96 characters, got {0}")]
    BadLength(usize),
    #[error("observed mask may contain only 0/1, got {0:?}")]
    BadChar(char),
}

/// JSONL interchange for chains: one record per agent-day.
///
/// ```text
/// {"agent_id": "a", "date": "2024-03-04",
///  "activities": [{"type": 1, "start": "00:00", "end": "08:00"}],
///  "observed": "111...0"}   // optional 96-bit mask
/// ```
pub mod jsonl {
    use super::*;
    use std::io::{BufRead, Write};

    #[derive(Debug, Serialize, Deserialize)]
    struct ActivityRecord {
        #[serde(rename = "type")]
        kind: u8,
        start: String,
        end: String,
    }

    #[derive(Debug, Serialize, Deserialize)]
    struct ChainRecord {
        agent_id: String,
        date: String,
        activities: Vec<ActivityRecord>,
        #[serde(skip_serializing_if = "Option::is_none")]
        observed: Option<String>,
    }

    #[derive(Debug, Error)]
    pub enum ChainIoError {
        #[error("line {line}: {source}")]
        Json {
            line: usize,
            #[source]
            source: serde_json::Error,
        },
        #[error("line {line}: bad date {date:?}")]
        BadDate { line: usize, date: String },
        #[error("line {line}: bad time {time:?} (expected HH:MM, 00:00..=24:00)")]
        BadTime { line: usize, time: String },
        #[error("line {line}: {source}")]
        BadCode {
            line: usize,
            #[source]
            source: InvalidActivityCode,
        },
        #[error("line {line}: {source}")]
        BadMask {
            line: usize,
            #[source]
            source: MaskParseError,
        },
        #[error(transparent)]
        Io(#[from] std::io::Error),
    }

    /// "HH:MM" where "24:00" denotes end of day.
    pub fn format_minutes(min: u16) -> String {
        format!("{:02}:{:02}", min / 60, min % 60)
    }

    pub fn parse_minutes(s: &str) -> Option<u16> {
        let (h, m) = s.split_once(':')?;
        let h: u16 = h.parse().ok()?;
        let m: u16 = m.parse().ok()?;
        if m >= 60 {
            return None;
        }
        let total = h * 60 + m;
        (total <= MINUTES_PER_DAY).then_some(total)
    }

    /// One chain (with optional observation mask) per line.
    pub fn write_chains<W: Write>(
        out: &mut W,
        chains: &[(ActivityChain, Option<ObservedMask>)],
    ) -> Result<(), ChainIoError> {
        for (chain, mask) in chains {
            let record = ChainRecord {
                agent_id: chain.agent_id.clone(),
                date: chain.date.format("%Y-%m-%d").to_string(),
                activities: chain
                    .activities
                    .iter()
                    .map(|a| ActivityRecord {
                        kind: a.kind.code(),
                        start: format_minutes(a.start_min),
                        end: format_minutes(a.end_min),
                    })
                    .collect(),
                observed: mask.map(|m| m.to_bit_string()),
            };
            serde_json::to_writer(&mut *out, &record)
                .map_err(|source| ChainIoError::Json { line: 0, source })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_chains<R: BufRead>(
        input: R,
    ) -> Result<Vec<(ActivityChain, Option<ObservedMask>)>, ChainIoError> {
        let mut chains = Vec::new();
        for (idx, line) in input.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ChainRecord = serde_json::from_str(&line)
                .map_err(|source| ChainIoError::Json { line: line_no, source })?;
            let date = NaiveDate::parse_from_str(&record.date, "%Y-%m-%d")
                .map_err(|_| ChainIoError::BadDate { line: line_no, date: record.date.clone() })?;
            let mut activities = Vec::with_capacity(record.activities.len());
            for a in &record.activities {
                let kind = ActivityType::new(a.kind)
                    .map_err(|source| ChainIoError::BadCode { line: line_no, source })?;
                let start_min = parse_minutes(&a.start)
                    .ok_or_else(|| ChainIoError::BadTime { line: line_no, time: a.start.clone() })?;
                let end_min = parse_minutes(&a.end)
                    .ok_or_else(|| ChainIoError::BadTime { line: line_no, time: a.end.clone() })?;
                activities.push(Activity::new(kind, start_min, end_min));
            }
            let observed = match &record.observed {
                Some(s) => Some(
                    ObservedMask::from_bit_string(s)
                        .map_err(|source| ChainIoError::BadMask { line: line_no, source })?,
                ),
                None => None,
            };
            chains.push((ActivityChain::new(record.agent_id, date, activities), observed));
        }
        Ok(chains)
    }
}

/// Groups chains by agent id, preserving insertion order within each agent.
pub fn group_by_agent(chains: &[ActivityChain]) -> BTreeMap<&str, Vec<&ActivityChain>> {
    let mut map: BTreeMap<&str, Vec<&ActivityChain>> = BTreeMap::new();
    for chain in chains {
        map.entry(chain.agent_id.as_str()).or_default().push(chain);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

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

    #[test]
    fn well_formed_chain_validates() {
        let c = chain(vec![(1, 0, 480), (2, 510, 1020)]);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn non_monotone_times_rejected() {
        let c = chain(vec![(2, 480, 420)]);
        let violations = c.validate().unwrap_err();
        assert!(matches!(violations[0], ChainViolation::NonMonotoneTimes { index: 0, .. }));
    }

    #[test]
    fn overlap_rejected() {
        let c = chain(vec![(1, 540, 600), (2, 540, 600)]);
        let violations = c.validate().unwrap_err();
        assert!(violations
            .iter()
            .any(|v| matches!(v, ChainViolation::OverlappingActivities { index: 1 })));
    }

    #[test]
    fn touching_activities_do_not_overlap() {
        // End times are exclusive: 10:00 end then 10:00 start is legal.
        let c = chain(vec![(1, 0, 600), (2, 600, 660)]);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn validation_is_idempotent() {
        let good = chain(vec![(1, 0, 480)]);
        assert_eq!(good.validate(), good.validate());
        let bad = chain(vec![(1, 480, 480)]);
        assert_eq!(bad.validate(), bad.validate());
    }

    #[test]
    fn reserved_codes_are_not_activity_types() {
        assert!(ActivityType::new(TRAVEL_TOKEN).is_err());
        assert!(ActivityType::new(MASK_TOKEN).is_err());
        assert!(ActivityType::new(0).is_err());
        assert_eq!(ActivityType::new(15).unwrap().code(), 15);
    }

    #[test]
    fn day_of_week_monday_is_zero() {
        let c = chain(vec![(1, 0, 480)]); // 2024-03-04 is a Monday
        assert_eq!(c.day_of_week(), 0);
    }

    #[test]
    fn jsonl_round_trip_preserves_chain() {
        let c = chain(vec![(1, 0, 480), (7, 485, 540)]);
        let mask = ObservedMask::from_bit_string(&"10".repeat(48)).unwrap();
        let mut buf = Vec::new();
        jsonl::write_chains(&mut buf, &[(c.clone(), Some(mask))]).unwrap();
        let back = jsonl::read_chains(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].0, c);
        assert_eq!(back[0].1, Some(mask));
    }

    #[test]
    fn jsonl_midnight_end_round_trips() {
        assert_eq!(jsonl::format_minutes(1440), "24:00");
        assert_eq!(jsonl::parse_minutes("24:00"), Some(1440));
        assert_eq!(jsonl::parse_minutes("24:01"), None);
        assert_eq!(jsonl::parse_minutes("08:30"), Some(510));
    }

    #[test]
    fn observed_mask_round_trip() {
        let mut m = ObservedMask::none_observed();
        m.0[0] = true;
        m.0[95] = true;
        let s = m.to_bit_string();
        assert_eq!(s.len(), 96);
        assert_eq!(ObservedMask::from_bit_string(&s).unwrap(), m);
        assert!(ObservedMask::from_bit_string("01").is_err());
    }
}
