//! Decoding per-frame activations into beat sequences.
//!
//! The decoder is a bar-pointer style HMM: a state is a tempo `tau`
//! (frames per beat) and a phase `phi` in `[0, tau)`. The phase advances
//! by one frame at a time and wraps at `tau - 1`, where the tempo may
//! change. Beats are the frames whose decoded phase is zero. Downbeats are
//! assigned afterwards by picking the meter and offset that best explain
//! the downbeat activation.

mod io;

pub use io::{
    format_beats, load_activations, load_beats, parse_activations, parse_beats, save_activations, save_beats,
    write_activations,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hingenet::ActivationPair;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DbnConfig {
    pub frame_rate: f64,
    pub tau_min: usize,
    pub tau_max: usize,
    pub tempo_change_lambda: f64,
    pub observation_epsilon: f64,
}

impl Default for DbnConfig {
    fn default() -> Self {
        DbnConfig {
            frame_rate: 50.0,
            tau_min: 15,
            tau_max: 60,
            tempo_change_lambda: 25.0,
            observation_epsilon: 1e-6,
        }
    }
}

impl DbnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau_min < 1 || self.tau_min >= self.tau_max {
            return Err(Error::invalid(format!(
                "need 1 <= tau_min < tau_max, got {} and {}",
                self.tau_min, self.tau_max
            )));
        }
        if !(self.frame_rate > 0.0) || !self.frame_rate.is_finite() {
            return Err(Error::invalid("frame_rate must be positive"));
        }
        if !(self.tempo_change_lambda >= 0.0) || !self.tempo_change_lambda.is_finite() {
            return Err(Error::invalid("tempo_change_lambda must be non-negative"));
        }
        if !(self.observation_epsilon > 0.0 && self.observation_epsilon < 0.5) {
            return Err(Error::invalid("observation_epsilon must lie in (0, 0.5)"));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        (self.tau_min..=self.tau_max).sum()
    }

    /// `log p(tau' | tau)` for every pair, row-major over `tau - tau_min`.
    pub fn tempo_log_transitions(&self) -> Vec<f64> {
        let taus: Vec<f64> = (self.tau_min..=self.tau_max).map(|t| t as f64).collect();
        let n = taus.len();
        let mut out = vec![0.0; n * n];
        for (i, &from) in taus.iter().enumerate() {
            let row = &mut out[i * n..(i + 1) * n];
            for (j, &to) in taus.iter().enumerate() {
                row[j] = -self.tempo_change_lambda * (to / from - 1.0).abs();
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        out
    }

    fn log_emission(&self, a: f64, phase: usize) -> f64 {
        let p = if phase == 0 { a } else { 1.0 - a };
        p.max(self.observation_epsilon).ln()
    }
}

/// Beat times in seconds with optional metrical positions (1 = downbeat).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BeatSequence {
    times: Vec<f64>,
    positions: Option<Vec<u32>>,
}

impl BeatSequence {
    pub fn new(times: Vec<f64>, positions: Option<Vec<u32>>) -> Result<Self> {
        for (i, &t) in times.iter().enumerate() {
            if !t.is_finite() || t < 0.0 {
                return Err(Error::invalid(format!("beat {i} at {t} is not a non-negative time")));
            }
            if i > 0 && t <= times[i - 1] {
                return Err(Error::invalid(format!("beat times not strictly increasing at index {i}")));
            }
        }
        if let Some(p) = &positions {
            if p.len() != times.len() {
                return Err(Error::invalid("positions and times differ in length"));
            }
            if p.contains(&0) {
                return Err(Error::invalid("positions are 1-based"));
            }
        }
        Ok(BeatSequence { times, positions })
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        Self::new(times, None)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn positions(&self) -> Option<&[u32]> {
        self.positions.as_deref()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Times of beats at position 1.
    pub fn downbeats(&self) -> Vec<f64> {
        match &self.positions {
            Some(p) => self.times.iter().zip(p).filter(|(_, &p)| p == 1).map(|(&t, _)| t).collect(),
            None => Vec::new(),
        }
    }

    pub fn with_positions(mut self, positions: Vec<u32>) -> Result<Self> {
        let times = std::mem::take(&mut self.times);
        Self::new(times, Some(positions))
    }
}

/// A decoder state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DbnState {
    pub tau: usize,
    pub phase: usize,
}

/// The most probable state sequence and its joint log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ViterbiPath {
    pub states: Vec<DbnState>,
    pub log_prob: f64,
}

fn check_activation(activation: &[f64]) -> Result<()> {
    if activation.is_empty() {
        return Err(Error::invalid("empty activation"));
    }
    if let Some(i) = activation.iter().position(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::invalid(format!(
            "activation value {} at frame {i} is outside [0, 1]",
            activation[i]
        )));
    }
    Ok(())
}

/// Joint log-probability of a full state path; `-inf` when the path uses a
/// forbidden transition.
pub fn path_log_probability(activation: &[f64], config: &DbnConfig, states: &[DbnState]) -> Result<f64> {
    config.validate()?;
    check_activation(activation)?;
    if states.len() != activation.len() {
        return Err(Error::invalid("path length differs from activation length"));
    }
    let valid = |s: &DbnState| (config.tau_min..=config.tau_max).contains(&s.tau) && s.phase < s.tau;
    if !states.iter().all(valid) {
        return Ok(f64::NEG_INFINITY);
    }
    let trans = config.tempo_log_transitions();
    let n_tau = config.tau_max - config.tau_min + 1;
    let mut lp = -(config.n_states() as f64).ln() + config.log_emission(activation[0], states[0].phase);
    for (t, w) in states.windows(2).enumerate() {
        let (from, to) = (w[0], w[1]);
        if from.phase + 1 < from.tau {
            if to.tau != from.tau || to.phase != from.phase + 1 {
                return Ok(f64::NEG_INFINITY);
            }
        } else {
            if to.phase != 0 {
                return Ok(f64::NEG_INFINITY);
            }
            lp += trans[(from.tau - config.tau_min) * n_tau + (to.tau - config.tau_min)];
        }
        lp += config.log_emission(activation[t + 1], to.phase);
    }
    Ok(lp)
}

/// Exact MAP state path.
///
/// Ties go to the first state in `(tau, phase)` order, both at the final
/// frame and when choosing a predecessor tempo.
pub fn viterbi_path(activation: &[f64], config: &DbnConfig) -> Result<ViterbiPath> {
    config.validate()?;
    check_activation(activation)?;
    let (tmin, tmax) = (config.tau_min, config.tau_max);
    let n_tau = tmax - tmin + 1;
    let trans = config.tempo_log_transitions();
    // state (tau, phi) lives at offset[tau - tmin] + phi
    let offset: Vec<usize> = (tmin..=tmax)
        .scan(0, |acc, tau| {
            let o = *acc;
            *acc += tau;
            Some(o)
        })
        .collect();
    let n_states = config.n_states();
    let log_init = -(n_states as f64).ln();
    let beat_e: Vec<f64> = activation.iter().map(|&a| config.log_emission(a, 0)).collect();
    let off_e: Vec<f64> = activation.iter().map(|&a| config.log_emission(a, 1)).collect();

    let mut delta = vec![0.0; n_states];
    for (k, tau) in (tmin..=tmax).enumerate() {
        for phi in 0..tau {
            delta[offset[k] + phi] = log_init + if phi == 0 { beat_e[0] } else { off_e[0] };
        }
    }
    let t_len = activation.len();
    // predecessor tempo index of each phase-0 state, per frame
    let mut back = vec![0u16; t_len * n_tau];
    let mut next = vec![0.0; n_states];
    for t in 1..t_len {
        for (k, tau) in (tmin..=tmax).enumerate() {
            let o = offset[k];
            for phi in 1..tau {
                next[o + phi] = delta[o + phi - 1] + off_e[t];
            }
        }
        for k in 0..n_tau {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for j in 0..n_tau {
                let tau_j = tmin + j;
                let v = delta[offset[j] + tau_j - 1] + trans[j * n_tau + k];
                if v > best {
                    best = v;
                    arg = j;
                }
            }
            next[offset[k]] = best + beat_e[t];
            back[t * n_tau + k] = arg as u16;
        }
        std::mem::swap(&mut delta, &mut next);
    }

    let mut best = f64::NEG_INFINITY;
    let mut state = DbnState { tau: tmin, phase: 0 };
    for (k, tau) in (tmin..=tmax).enumerate() {
        for phi in 0..tau {
            if delta[offset[k] + phi] > best {
                best = delta[offset[k] + phi];
                state = DbnState { tau, phase: phi };
            }
        }
    }
    if !best.is_finite() {
        return Err(Error::Numeric("Viterbi produced a non-finite score".into()));
    }
    let mut states = vec![state; t_len];
    for t in (1..t_len).rev() {
        let s = states[t];
        states[t - 1] = if s.phase > 0 {
            DbnState {
                tau: s.tau,
                phase: s.phase - 1,
            }
        } else {
            let tau = tmin + back[t * n_tau + (s.tau - tmin)] as usize;
            DbnState { tau, phase: tau - 1 }
        };
    }
    Ok(ViterbiPath { states, log_prob: best })
}

/// Decode beat times from a per-frame beat activation.
pub fn viterbi_decode(activation: &[f64], config: &DbnConfig) -> Result<BeatSequence> {
    let path = viterbi_path(activation, config)?;
    let times = path
        .states
        .iter()
        .enumerate()
        .filter(|(_, s)| s.phase == 0)
        .map(|(t, _)| t as f64 / config.frame_rate)
        .collect();
    BeatSequence::from_times(times)
}

const TIE_TOLERANCE: f64 = 1e-12;

/// Frame index nearest to `time`, clamped into `[0, n)`.
fn frame_of(time: f64, frame_rate: f64, n: usize) -> usize {
    ((time * frame_rate).round().max(0.0) as usize).min(n.saturating_sub(1))
}

/// Choose meter `B` and offset `o` maximising the mean downbeat activation
/// over beats `o, o + B, ...`, then number the beats cyclically.
///
/// Candidates with no beats are skipped. Ties (scores within 1e-12) go to
/// the smaller meter, then the smaller offset.
pub fn assign_downbeats(
    beats: &BeatSequence,
    downbeat_activation: &[f64],
    frame_rate: f64,
    meters: &[u32],
) -> Result<BeatSequence> {
    if beats.is_empty() {
        return Err(Error::invalid("no beats to assign"));
    }
    if downbeat_activation.is_empty() {
        return Err(Error::invalid("empty downbeat activation"));
    }
    if meters.is_empty() || meters.contains(&0) {
        return Err(Error::invalid("meters must be non-empty and positive"));
    }
    let mut sorted = meters.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let values: Vec<f64> = beats
        .times()
        .iter()
        .map(|&t| downbeat_activation[frame_of(t, frame_rate, downbeat_activation.len())])
        .collect();
    let mut best: Option<(f64, u32, u32)> = None;
    for &m in &sorted {
        for o in 0..m {
            let picked: Vec<f64> = values.iter().skip(o as usize).step_by(m as usize).copied().collect();
            if picked.is_empty() {
                continue;
            }
            let score = picked.iter().sum::<f64>() / picked.len() as f64;
            // means of equal values can differ in the last bit
            if best.map_or(true, |(s, _, _)| score > s + TIE_TOLERANCE) {
                best = Some((score, m, o));
            }
        }
    }
    let (_, m, o) = best.expect("offset 0 always has a beat");
    let positions = (0..beats.len() as u32).map(|i| (i + m - o % m) % m + 1).collect();
    beats.clone().with_positions(positions)
}

/// Local maxima strictly above `threshold`, thinned so that kept peaks are
/// at least `min_distance` frames apart. Higher peaks win; equal heights
/// keep the earlier frame.
pub fn peak_pick(activation: &[f64], threshold: f64, min_distance: usize, frame_rate: f64) -> Result<BeatSequence> {
    let n = activation.len();
    let mut candidates: Vec<usize> = (0..n)
        .filter(|&i| {
            let a = activation[i];
            a > threshold && (i == 0 || a > activation[i - 1]) && (i + 1 == n || a >= activation[i + 1])
        })
        .collect();
    candidates.sort_by(|&i, &j| activation[j].total_cmp(&activation[i]).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for c in candidates {
        if kept.iter().all(|&k| k.abs_diff(c) >= min_distance) {
            kept.push(c);
        }
    }
    kept.sort_unstable();
    BeatSequence::from_times(kept.into_iter().map(|i| i as f64 / frame_rate).collect())
}

/// Beat decoding followed by downbeat assignment over meters {3, 4}, using
/// the activation's own frame rate.
pub fn decode_activations(pair: &ActivationPair, config: &DbnConfig) -> Result<BeatSequence> {
    if pair.beat.shape().b != 1 {
        return Err(Error::invalid("decode expects a single item"));
    }
    let cfg = DbnConfig {
        frame_rate: pair.frame_rate,
        ..*config
    };
    let beats = viterbi_decode(pair.beat_row(0), &cfg)?;
    if beats.is_empty() {
        return Ok(beats);
    }
    assign_downbeats(&beats, pair.downbeat_row(0), pair.frame_rate, &[3, 4])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DbnConfig {
        DbnConfig {
            tau_min: 2,
            tau_max: 4,
            ..Default::default()
        }
    }

    #[test]
    fn state_count() {
        assert_eq!(small().n_states(), 9);
        assert_eq!(DbnConfig::default().n_states(), (15..=60).sum::<usize>());
    }

    #[test]
    fn tempo_rows_normalise() {
        let cfg = DbnConfig::default();
        let n = cfg.tau_max - cfg.tau_min + 1;
        for row in cfg.tempo_log_transitions().chunks(n) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn decoded_path_scores_match() {
        let a = [0.9, 0.1, 0.2, 0.8, 0.1, 0.1, 0.7];
        let p = viterbi_path(&a, &small()).unwrap();
        let lp = path_log_probability(&a, &small(), &p.states).unwrap();
        assert!((lp - p.log_prob).abs() < 1e-9);
    }

    #[test]
    fn empty_activation_is_rejected() {
        assert!(matches!(viterbi_decode(&[], &small()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn offset_numbering() {
        let beats = BeatSequence::from_times((0..8).map(|i| i as f64 * 0.5).collect()).unwrap();
        let mut act = vec![0.1; 200];
        for i in [1usize, 4, 7] {
            act[i * 25] = 0.9;
        }
        let out = assign_downbeats(&beats, &act, 50.0, &[3, 4]).unwrap();
        assert_eq!(out.positions().unwrap(), &[3, 1, 2, 3, 1, 2, 3, 1]);
    }

    #[test]
    fn peak_pick_plateau_keeps_first_frame() {
        let out = peak_pick(&[0.0, 0.8, 0.8, 0.0], 0.5, 1, 50.0).unwrap();
        assert_eq!(out.times(), &[1.0 / 50.0]);
    }
}
