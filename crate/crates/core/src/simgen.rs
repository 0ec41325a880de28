//! Synthetic regional ground truth: samples complete daily activity chains
//! from a [`RegionProfile`] and degrades them into fragmentary observations.
//!
//! Two presets ship with contrasting regional character so the transfer
//! experiment has a known answer. All numbers are synthetic.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activity::{
    Activity, ActivityChain, ActivityType, ObservedMask, RegionProfile, ACTIVITY_TYPE_COUNT,
    MINUTES_PER_DAY, SLOTS_PER_DAY,
};

#[derive(Debug, Error)]
pub enum SimgenError {
    #[error("unknown region preset {0:?} (shipped: region_A_us_like, region_B_egypt_like)")]
    UnknownPreset(String),
    #[error(transparent)]
    Profile(#[from] crate::activity::ProfileError),
}

pub const PRESET_REGION_A: &str = "region_A_us_like";
pub const PRESET_REGION_B: &str = "region_B_egypt_like";
pub const PRESETS: [&str; 2] = [PRESET_REGION_A, PRESET_REGION_B];

/// Builds a shipped preset by name. Profiles are also plain serde values, so
/// custom regions can be loaded from JSON instead.
pub fn build_region_profile(preset: &str) -> Result<RegionProfile, SimgenError> {
    let profile = match preset {
        PRESET_REGION_A => region_a(),
        PRESET_REGION_B => region_b(),
        other => return Err(SimgenError::UnknownPreset(other.to_string())),
    };
    profile.validate()?;
    Ok(profile)
}

/// Density over 96 slots as a mixture of Gaussian bumps (hour, sigma_hours,
/// weight) over a uniform floor, normalized to 1.
fn bumps(floor: f64, peaks: &[(f64, f64, f64)]) -> Vec<f64> {
    let mut density = vec![floor; SLOTS_PER_DAY];
    for &(hour, sigma, weight) in peaks {
        for (slot, d) in density.iter_mut().enumerate() {
            let h = (slot as f64 + 0.5) / 4.0;
            let z = (h - hour) / sigma;
            *d += weight * (-0.5 * z * z).exp();
        }
    }
    let total: f64 = density.iter().sum();
    let mut normalized: Vec<f64> = density.iter().map(|d| d / total).collect();
    // Exact renormalization against accumulated rounding.
    let s: f64 = normalized.iter().sum();
    let last = normalized.last_mut().unwrap();
    *last += 1.0 - s;
    normalized
}

/// Transition row: `home_pull` to HOME, `attract[j]` elsewhere, no
/// self-transitions, normalized.
fn transition_rows(home_pull: &[f64], attract: &[f64]) -> Vec<Vec<f64>> {
    let n = ACTIVITY_TYPE_COUNT;
    let mut rows = Vec::with_capacity(n);
    for from in 0..n {
        let mut row = vec![0.0; n];
        for to in 0..n {
            if to == from {
                continue;
            }
            row[to] = if to == 0 { home_pull[from] } else { attract[to] };
        }
        let total: f64 = row.iter().sum();
        for w in row.iter_mut() {
            *w /= total;
        }
        let s: f64 = row.iter().sum();
        row[if from == 0 { 1 } else { 0 }] += 1.0 - s;
        rows.push(row);
    }
    rows
}

/// US-like region: pronounced 8:00 work peak, midday meal peak, evening
/// return home, chains of typically 5-6 activities.
fn region_a() -> RegionProfile {
    let start_density = vec![
        bumps(0.02, &[(17.5, 1.5, 1.0), (12.0, 2.0, 0.15), (21.0, 1.0, 0.4)]), // home
        bumps(0.004, &[(8.0, 0.7, 1.0), (13.0, 1.0, 0.35)]),                   // work
        bumps(0.002, &[(8.0, 0.5, 1.0)]),                                      // school
        bumps(0.01, &[(8.0, 1.0, 0.6), (17.0, 1.0, 0.6)]),                     // care
        bumps(0.01, &[(12.0, 1.5, 0.8), (17.5, 1.5, 0.7)]),                    // buy goods
        bumps(0.01, &[(10.0, 1.5, 0.7), (15.0, 1.5, 0.5)]),                    // buy services
        bumps(0.006, &[(12.2, 0.8, 1.0), (18.5, 1.0, 0.6)]),                   // buy meals
        bumps(0.015, &[(11.0, 2.0, 0.7)]),                                     // errands
        bumps(0.012, &[(19.0, 1.5, 0.8), (14.0, 2.0, 0.3)]),                   // recreation
        bumps(0.008, &[(17.8, 1.0, 0.9), (7.0, 0.8, 0.3)]),                    // exercise
        bumps(0.012, &[(18.0, 1.5, 0.8)]),                                     // visit
        bumps(0.008, &[(10.0, 1.5, 0.7), (14.0, 1.0, 0.5)]),                   // health
        bumps(0.006, &[(10.0, 1.0, 0.9)]),                                     // religious
        bumps(0.03, &[(12.0, 4.0, 0.4)]),                                      // something else
        bumps(0.006, &[(8.0, 0.5, 0.8), (15.5, 0.5, 0.7)]),                    // drop off
    ];
    let attract = [
        0.0, 0.32, 0.045, 0.02, 0.10, 0.04, 0.11, 0.05, 0.07, 0.065, 0.05, 0.03, 0.02, 0.035,
        0.045,
    ];
    let home_pull = [0.0, 0.52, 0.5, 0.5, 0.42, 0.42, 0.40, 0.42, 0.5, 0.52, 0.5, 0.48, 0.5, 0.45, 0.35];
    RegionProfile {
        name: PRESET_REGION_A.into(),
        start_density,
        duration_mean_slots: vec![
            30.0, 15.0, 25.0, 3.0, 3.0, 2.0, 3.0, 2.0, 7.0, 4.0, 6.0, 4.0, 5.0, 3.0, 1.0,
        ],
        duration_std_slots: vec![
            4.0, 3.0, 2.0, 1.0, 1.0, 0.7, 1.0, 0.7, 2.0, 1.0, 2.0, 1.0, 1.0, 1.0, 0.4,
        ],
        transition: transition_rows(&home_pull, &attract),
        weekday_weights: vec![1.0, 1.0, 1.0, 1.0, 0.8, 1.0, 1.0, 1.0, 0.8, 1.0, 0.8, 1.0, 0.4, 1.0, 1.0],
        weekend_weights: vec![1.0, 0.12, 0.05, 0.4, 1.5, 1.0, 1.2, 1.0, 2.2, 1.2, 1.8, 0.5, 3.0, 1.2, 0.6],
        evening_home_prob: 0.92,
        evening_home_slot: 82, // 20:30
    }
}

/// Egypt-like region: start times spread over multiple smaller peaks,
/// bimodal morning/evening religious activity, chains peaking at 3-4
/// activities per day.
fn region_b() -> RegionProfile {
    let start_density = vec![
        bumps(0.03, &[(14.0, 1.5, 0.5), (18.0, 1.5, 0.6), (21.0, 1.2, 0.5)]), // home
        bumps(0.012, &[(8.5, 2.0, 0.8), (16.0, 1.5, 0.25)]),                  // work
        bumps(0.004, &[(8.0, 0.8, 1.0)]),                                     // school
        bumps(0.015, &[(9.0, 1.5, 0.5), (16.0, 1.5, 0.5)]),                   // care
        bumps(0.015, &[(11.0, 2.0, 0.5), (17.5, 2.0, 0.8)]),                  // buy goods
        bumps(0.015, &[(11.0, 2.0, 0.5), (16.0, 2.0, 0.5)]),                  // buy services
        bumps(0.012, &[(13.5, 1.5, 0.5), (19.5, 1.5, 0.8)]),                  // buy meals
        bumps(0.02, &[(10.5, 2.5, 0.5)]),                                     // errands
        bumps(0.015, &[(20.0, 1.5, 0.7), (16.0, 2.0, 0.4)]),                  // recreation
        bumps(0.012, &[(7.0, 1.0, 0.5), (18.0, 1.5, 0.5)]),                   // exercise
        bumps(0.015, &[(19.0, 2.0, 0.8), (13.0, 2.0, 0.3)]),                  // visit
        bumps(0.01, &[(11.0, 2.0, 0.6)]),                                     // health
        bumps(0.004, &[(5.5, 0.8, 0.9), (18.5, 1.0, 0.9), (12.5, 1.0, 0.25)]), // religious
        bumps(0.035, &[(13.0, 4.0, 0.35)]),                                   // something else
        bumps(0.008, &[(8.0, 0.7, 0.6), (14.5, 0.8, 0.5)]),                   // drop off
    ];
    let attract = [
        0.0, 0.26, 0.035, 0.02, 0.14, 0.05, 0.09, 0.05, 0.06, 0.035, 0.08, 0.025, 0.09, 0.04,
        0.025,
    ];
    let home_pull = [0.0, 0.62, 0.6, 0.6, 0.55, 0.55, 0.52, 0.55, 0.6, 0.6, 0.58, 0.58, 0.55, 0.55, 0.45];
    RegionProfile {
        name: PRESET_REGION_B.into(),
        start_density,
        duration_mean_slots: vec![
            32.0, 27.0, 26.0, 3.0, 4.0, 3.0, 4.0, 2.0, 8.0, 4.0, 8.0, 4.0, 4.0, 3.0, 1.0,
        ],
        duration_std_slots: vec![
            5.0, 4.0, 2.0, 1.0, 1.5, 1.0, 1.5, 0.7, 2.5, 1.0, 2.5, 1.0, 1.0, 1.0, 0.4,
        ],
        transition: transition_rows(&home_pull, &attract),
        weekday_weights: vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.9, 1.0, 0.9, 1.0, 1.0, 1.0, 1.0],
        weekend_weights: vec![1.0, 0.3, 0.1, 0.6, 1.4, 1.0, 1.3, 1.0, 1.6, 1.1, 1.9, 0.6, 1.9, 1.2, 0.7],
        evening_home_prob: 0.93,
        evening_home_slot: 76, // 19:00
    }
}

/// Travel-gap distribution in slots (15/30/45 minutes), always within the
/// 60-minute travel cap so sampled days encode with zero MASK slots.
const GAP_WEIGHTS: [(usize, f64); 3] = [(1, 0.55), (2, 0.3), (3, 0.15)];

fn weighted_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 && w > 0.0 {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Samples one complete agent-day: a Markov walk over the transition matrix
/// starting from home at 00:00, activity start times shaped by the profile's
/// start densities and day-of-week weights, with 15/30/45-minute travel gaps.
/// Always ends exactly at 24:00; ends at home with probability >= 0.9 via the
/// evening return bias.
pub fn sample_complete_day(
    profile: &RegionProfile,
    agent_id: &str,
    date: NaiveDate,
    rng: &mut ChaCha8Rng,
) -> ActivityChain {
    let chain = ActivityChain::new(agent_id, date, Vec::new());
    let dow = chain.day_of_week();
    let dow_weights = if dow >= 5 { &profile.weekend_weights } else { &profile.weekday_weights };

    let mut activities: Vec<Activity> = Vec::new();
    let mut t: u16 = 0;
    let mut current = 0usize; // home
    loop {
        let dur = Normal::new(
            profile.duration_mean_slots[current],
            profile.duration_std_slots[current].max(1e-9),
        )
        .expect("valid normal")
        .sample(rng);
        let dur_slots = dur.round().max(1.0) as u16;
        let mut end = t + dur_slots * 15;

        // The evening return home fills out the rest of the day, and a home
        // stay running into the late evening keeps the agent in for the night.
        let arrival_slot = (t / 15) as usize;
        let curfew_slot = (profile.evening_home_slot + 8).min(SLOTS_PER_DAY - 1);
        if current == 0
            && (arrival_slot >= profile.evening_home_slot
                || (end / 15) as usize >= curfew_slot)
        {
            end = MINUTES_PER_DAY;
        }
        let end = end.min(MINUTES_PER_DAY);
        activities.push(Activity::new(
            ActivityType::from_index(current).expect("valid index"),
            t,
            end,
        ));
        if end >= MINUTES_PER_DAY {
            break;
        }

        let gap_slots = GAP_WEIGHTS[weighted_index(
            &GAP_WEIGHTS.iter().map(|&(_, w)| w).collect::<Vec<_>>(),
            rng,
        )]
        .0 as u16;
        let next_t = end + gap_slots * 15;
        if next_t >= MINUTES_PER_DAY {
            // No room after the travel gap: the agent heads straight home
            // for the rest of the day.
            if current == 0 {
                activities.last_mut().unwrap().end_min = MINUTES_PER_DAY;
            } else {
                activities.push(Activity::new(ActivityType::HOME, end, MINUTES_PER_DAY));
            }
            break;
        }

        let next_slot = (next_t / 15) as usize;
        // Two hours past the evening-return slot, transitions always go home.
        let next = if current != 0
            && (next_slot >= curfew_slot
                || (next_slot >= profile.evening_home_slot
                    && rng.gen::<f64>() < profile.evening_home_prob))
        {
            0
        } else {
            let row = &profile.transition[current];
            let weights: Vec<f64> = (0..ACTIVITY_TYPE_COUNT)
                .map(|to| row[to] * dow_weights[to] * profile.start_density[to][next_slot])
                .collect();
            if weights.iter().sum::<f64>() > 0.0 {
                weighted_index(&weights, rng)
            } else {
                let fallback: Vec<f64> =
                    (0..ACTIVITY_TYPE_COUNT).map(|to| row[to] * dow_weights[to]).collect();
                if fallback.iter().sum::<f64>() > 0.0 {
                    weighted_index(&fallback, rng)
                } else {
                    0
                }
            }
        };
        t = next_t;
        current = next;
    }

    ActivityChain::new(agent_id, date, activities)
}

/// Samples `days_per_agent` consecutive days for each of `agents` agents.
pub fn generate_dataset(
    profile: &RegionProfile,
    agents: usize,
    days_per_agent: usize,
    start_date: NaiveDate,
    seed: u64,
) -> Vec<ActivityChain> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(agents * days_per_agent);
    for agent in 0..agents {
        let agent_id = format!("a{agent:05}");
        for day in 0..days_per_agent {
            let date = start_date + chrono::Days::new(day as u64);
            out.push(sample_complete_day(profile, &agent_id, date, &mut rng));
        }
    }
    out
}

/// Window-based observation degradation. Real collection gaps are bursty,
/// so whole windows of the day are observed and everything else is lost,
/// rather than i.i.d. slot dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationConfig {
    /// Desired mean share of observed slots per day, in [0, 1]. 1.0 keeps
    /// days intact.
    pub target_coverage: f64,
    /// Poisson mean of observation windows per day.
    pub windows_per_day: f64,
    /// Standard deviation of the window length in slots.
    pub window_len_std_slots: f64,
    /// Share of degraded days expected to survive the 25%-coverage filter;
    /// a documentation knob checked by tests, not a hard guarantee.
    pub min_keep_share: f64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig {
            target_coverage: 0.3,
            windows_per_day: 2.5,
            window_len_std_slots: 2.0,
            min_keep_share: 0.35,
        }
    }
}

impl DegradationConfig {
    /// Mean window length (slots) calibrated so the expected union coverage
    /// of Poisson-many uniformly placed windows hits `target_coverage`.
    /// Solved by bisection on the exact per-slot coverage probability.
    pub fn window_len_mean_slots(&self) -> f64 {
        let target = self.target_coverage.clamp(0.0, 1.0);
        if target <= 0.0 {
            return 0.0;
        }
        let (mut lo, mut hi) = (0.5, SLOTS_PER_DAY as f64);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.expected_coverage(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Expected union coverage for a given mean window length.
    fn expected_coverage(&self, len_mean: f64) -> f64 {
        let weights = discrete_normal_weights(len_mean, self.window_len_std_slots);
        let mut coverage = 0.0;
        for s in 0..SLOTS_PER_DAY {
            // Probability one window covers slot s.
            let mut q = 0.0;
            for (l, w) in weights.iter().enumerate().filter(|&(_, w)| *w > 0.0) {
                if l == 0 || l > SLOTS_PER_DAY {
                    continue;
                }
                let positions = (SLOTS_PER_DAY - l + 1) as f64;
                let hi = s.min(SLOTS_PER_DAY - l);
                let lo = s.saturating_sub(l - 1);
                if hi >= lo {
                    q += w * (hi - lo + 1) as f64 / positions;
                }
            }
            coverage += 1.0 - (-self.windows_per_day * q).exp();
        }
        coverage / SLOTS_PER_DAY as f64
    }
}

/// Probability mass of round(N(mean, std)) clamped to 1..=96.
fn discrete_normal_weights(mean: f64, std: f64) -> Vec<f64> {
    let mut weights = vec![0.0; SLOTS_PER_DAY + 1];
    if std < 1e-9 {
        let l = (mean.round() as usize).clamp(1, SLOTS_PER_DAY);
        weights[l] = 1.0;
        return weights;
    }
    let erf_cdf = |x: f64| 0.5 * (1.0 + erf((x - mean) / (std * std::f64::consts::SQRT_2)));
    for (l, w) in weights.iter_mut().enumerate().skip(1) {
        let lo = if l == 1 { f64::NEG_INFINITY } else { l as f64 - 0.5 };
        let hi = if l == SLOTS_PER_DAY { f64::INFINITY } else { l as f64 + 0.5 };
        *w = erf_cdf(hi) - erf_cdf(lo);
    }
    weights
}

/// Abramowitz-Stegun 7.1.26 rational approximation; |error| < 1.5e-7,
/// plenty for window-length calibration.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}

/// Keeps the parts of each activity that intersect sampled observation
/// windows, truncated to window bounds; everything else is unobserved.
/// Evidence-preserving: every kept interval is a sub-interval of a true
/// activity with the same type.
pub fn degrade_observation(
    chain: &ActivityChain,
    cfg: &DegradationConfig,
    rng: &mut ChaCha8Rng,
) -> (ActivityChain, ObservedMask) {
    if cfg.target_coverage >= 1.0 {
        return (chain.clone(), ObservedMask::all_observed());
    }
    let windows = sample_windows(cfg, rng);
    apply_windows(chain, &windows)
}

/// Slot-aligned observation windows as disjoint sorted [start, end) slot
/// intervals (union of the raw sampled windows).
fn sample_windows(cfg: &DegradationConfig, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    if cfg.windows_per_day <= 0.0 || cfg.target_coverage <= 0.0 {
        return Vec::new();
    }
    let count = Poisson::new(cfg.windows_per_day).expect("positive poisson mean").sample(rng)
        as usize;
    let len_mean = cfg.window_len_mean_slots();
    let mut raw = Vec::with_capacity(count);
    for _ in 0..count {
        let len = Normal::new(len_mean, cfg.window_len_std_slots.max(1e-9))
            .expect("valid normal")
            .sample(rng)
            .round()
            .clamp(1.0, SLOTS_PER_DAY as f64) as usize;
        let start = rng.gen_range(0..=SLOTS_PER_DAY - len);
        raw.push((start, start + len));
    }
    raw.sort_unstable();
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for (s, e) in raw {
        match merged.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    merged
}

fn apply_windows(
    chain: &ActivityChain,
    windows: &[(usize, usize)],
) -> (ActivityChain, ObservedMask) {
    let mut mask = ObservedMask::none_observed();
    for &(s, e) in windows {
        for slot in s..e {
            mask.0[slot] = true;
        }
    }
    let mut kept = Vec::new();
    for a in &chain.activities {
        for &(ws, we) in windows {
            let ws_min = ws as u16 * 15;
            let we_min = we as u16 * 15;
            let s = a.start_min.max(ws_min);
            let e = a.end_min.min(we_min);
            if s < e {
                kept.push(Activity::new(a.kind, s, e));
            }
        }
    }
    kept.sort_by_key(|a| a.start_min);
    (ActivityChain::new(chain.agent_id.clone(), chain.date, kept), mask)
}
