//! Synthetic harmonic-shift corpus, beat annotations, label broadening and
//! time-stretch augmentation.
//!
//! Each item is a `(1, feature_dim, t)` log-frequency-like feature map.
//! A five-partial harmonic stack sits on a root bin that takes a random
//! walk step at every beat and is held in between, so harmonic changes
//! line up with beats. Downbeat frames get an extra broadband bump.
//! Every item draws from its own ChaCha8 stream derived from
//! `(seed, item index)`, so generation order does not matter.

mod io;

pub use io::{format_annotation, load_dataset, parse_annotation, read_annotation, save_dataset, write_annotation, Manifest};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::postprocess::BeatSequence;
use crate::rng::{rng_for, STREAM_DATA, STREAM_SPLIT};
use crate::tensorcore::{Shape, Tensor};

/// Bin offsets of partials 2..5 above the root for 12 bins per octave.
pub const HARMONIC_OFFSETS: [usize; 5] = [0, 12, 19, 24, 28];
pub const DOWNBEAT_BUMP: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_items: usize,
    pub duration_s: f64,
    pub frame_rate: f64,
    pub feature_dim: usize,
    pub tempo_bpm_min: f64,
    pub tempo_bpm_max: f64,
    pub meters: Vec<u32>,
    /// Relative per-beat jitter of the beat period.
    pub tempo_jitter: f64,
    pub noise_sigma: f64,
    pub harmonic_amplitudes: Vec<f64>,
    /// Largest root step per beat; 0 keeps the root fixed.
    pub root_step_max: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_items: 60,
            duration_s: 20.0,
            frame_rate: 50.0,
            feature_dim: 60,
            tempo_bpm_min: 70.0,
            tempo_bpm_max: 180.0,
            meters: vec![3, 4],
            tempo_jitter: 0.02,
            noise_sigma: 0.05,
            harmonic_amplitudes: vec![1.0, 0.8, 0.6, 0.5, 0.4],
            root_step_max: 4,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let top = HARMONIC_OFFSETS[HARMONIC_OFFSETS.len() - 1];
        if self.feature_dim < top + 1 {
            return Err(Error::Config(format!(
                "feature_dim {} cannot hold the harmonic stack (needs at least {})",
                self.feature_dim,
                top + 1
            )));
        }
        if self.harmonic_amplitudes.len() != HARMONIC_OFFSETS.len() {
            return Err(Error::Config(format!(
                "harmonic_amplitudes needs {} values",
                HARMONIC_OFFSETS.len()
            )));
        }
        if !(self.duration_s > 0.0 && self.frame_rate > 0.0) {
            return Err(Error::Config("duration_s and frame_rate must be positive".into()));
        }
        if !(self.tempo_bpm_min > 0.0 && self.tempo_bpm_min <= self.tempo_bpm_max) {
            return Err(Error::Config("need 0 < tempo_bpm_min <= tempo_bpm_max".into()));
        }
        if self.meters.is_empty() || self.meters.contains(&0) {
            return Err(Error::Config("meters must be non-empty and positive".into()));
        }
        if !(0.0..0.5).contains(&self.tempo_jitter) {
            return Err(Error::Config("tempo_jitter must lie in [0, 0.5)".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn n_frames(&self) -> usize {
        (self.duration_s * self.frame_rate).round() as usize
    }

    /// Largest admissible root bin.
    pub fn max_root(&self) -> usize {
        self.feature_dim - 1 - HARMONIC_OFFSETS[HARMONIC_OFFSETS.len() - 1]
    }
}

/// Beat times with metrical positions (1 = downbeat).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BeatAnnotation {
    pub beat_times: Vec<f64>,
    pub positions: Vec<u32>,
}

impl BeatAnnotation {
    pub fn new(beat_times: Vec<f64>, positions: Vec<u32>) -> Result<Self> {
        BeatSequence::new(beat_times.clone(), Some(positions.clone()))?;
        Ok(BeatAnnotation { beat_times, positions })
    }

    pub fn len(&self) -> usize {
        self.beat_times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beat_times.is_empty()
    }

    pub fn downbeat_times(&self) -> Vec<f64> {
        self.beat_times
            .iter()
            .zip(&self.positions)
            .filter(|(_, &p)| p == 1)
            .map(|(&t, _)| t)
            .collect()
    }

    pub fn to_sequence(&self) -> BeatSequence {
        BeatSequence::new(self.beat_times.clone(), Some(self.positions.clone())).expect("validated on construction")
    }

    /// All times multiplied by `s`.
    pub fn scaled(&self, s: f64) -> BeatAnnotation {
        BeatAnnotation {
            beat_times: self.beat_times.iter().map(|t| t * s).collect(),
            positions: self.positions.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: Tensor,
    pub annotation: BeatAnnotation,
    pub frame_rate: f64,
}

impl Example {
    pub fn n_frames(&self) -> usize {
        self.features.shape().t
    }
}

/// Item `index` of the corpus described by `config`.
pub fn generate_item(config: &SyntheticConfig, index: usize) -> Result<Example> {
    config.validate()?;
    let mut rng = rng_for(config.seed, &[STREAM_DATA, index as u64]);
    let t_len = config.n_frames();
    let fr = config.frame_rate;
    let bpm = rng.gen_range(config.tempo_bpm_min..=config.tempo_bpm_max);
    let meter = config.meters[rng.gen_range(0..config.meters.len())];
    let period = 60.0 / bpm;

    let mut times = Vec::new();
    let mut t = rng.gen_range(0.0..period);
    while (t * fr).round() < t_len as f64 && t <= config.duration_s {
        // six decimals so annotation files reproduce the times exactly
        let rounded = (t * 1e6).round() / 1e6;
        if times.last().map_or(true, |&p| rounded > p) {
            times.push(rounded);
        }
        let j = if config.tempo_jitter > 0.0 {
            rng.gen_range(-config.tempo_jitter..=config.tempo_jitter)
        } else {
            0.0
        };
        t += period * (1.0 + j);
    }
    let first_pos = rng.gen_range(0..meter);
    let positions: Vec<u32> = (0..times.len() as u32).map(|i| (first_pos + i) % meter + 1).collect();

    let max_root = config.max_root() as i64;
    let mut root = rng.gen_range(0..=max_root);
    let step = config.root_step_max as i64;
    let mut roots = vec![0i64; t_len];
    let mut beat_iter = times.iter().map(|&bt| (bt * fr).round() as usize).peekable();
    for (f, r) in roots.iter_mut().enumerate() {
        while beat_iter.peek() == Some(&f) {
            beat_iter.next();
            if step > 0 {
                root = (root + rng.gen_range(-step..=step)).clamp(0, max_root);
            }
        }
        *r = root;
    }

    let d = config.feature_dim;
    let mut features = Tensor::zeros(Shape::new(1, d, t_len));
    for (f, &r) in roots.iter().enumerate() {
        for (off, amp) in HARMONIC_OFFSETS.iter().zip(&config.harmonic_amplitudes) {
            features.set(0, r as usize + off, f, *amp);
        }
    }
    for (&bt, &p) in times.iter().zip(&positions) {
        let f = (bt * fr).round() as usize;
        if p == 1 && f < t_len {
            for c in 0..d {
                features.set(0, c, f, features.get(0, c, f) + DOWNBEAT_BUMP);
            }
        }
    }
    if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for v in features.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    // stored on disk as f32; keep memory and disk identical
    for v in features.data_mut() {
        *v = f64::from(*v as f32);
    }
    Ok(Example {
        id: format!("item_{index}"),
        features,
        annotation: BeatAnnotation::new(times, positions)?,
        frame_rate: fr,
    })
}

pub fn generate(config: &SyntheticConfig, exec: Exec) -> Result<Vec<Example>> {
    config.validate()?;
    exec.map_range(config.n_items, |i| generate_item(config, i)).into_iter().collect()
}

/// Per-frame targets for one event list: 1.0 on the event frame, 0.5 at
/// ±1, 0.25 at ±2, overlaps resolved by maximum, clipped to `[0, t)`.
pub fn broaden(times: &[f64], t: usize, frame_rate: f64) -> Vec<f64> {
    const STENCIL: [(i64, f64); 5] = [(-2, 0.25), (-1, 0.5), (0, 1.0), (1, 0.5), (2, 0.25)];
    let mut out = vec![0.0f64; t];
    for &time in times {
        let centre = (time * frame_rate).round() as i64;
        for (d, w) in STENCIL {
            let f = centre + d;
            if f >= 0 && (f as usize) < t {
                let slot = &mut out[f as usize];
                *slot = f64::max(*slot, w);
            }
        }
    }
    out
}

/// Broadened beat and downbeat targets.
pub fn broaden_labels(annotation: &BeatAnnotation, t: usize, frame_rate: f64) -> (Vec<f64>, Vec<f64>) {
    (
        broaden(&annotation.beat_times, t, frame_rate),
        broaden(&annotation.downbeat_times(), t, frame_rate),
    )
}

/// How broadened labels enter the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Broadened values are the BCE targets.
    #[default]
    SoftTargets,
    /// Every broadened frame is a positive; its value weights the loss.
    LossWeights,
}

/// Targets and optional per-frame weights for `broadened`.
pub fn label_targets(broadened: &[f64], mode: LabelMode) -> (Vec<f64>, Option<Vec<f64>>) {
    match mode {
        LabelMode::SoftTargets => (broadened.to_vec(), None),
        LabelMode::LossWeights => (
            broadened.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
            Some(broadened.iter().map(|&v| if v > 0.0 { v } else { 1.0 }).collect()),
        ),
    }
}

/// Resample `(b, c, t)` features along time to `round(t * s)` frames by
/// linear interpolation.
pub fn stretch_features(features: &Tensor, s: f64) -> Result<Tensor> {
    if !(0.5..=2.0).contains(&s) {
        return Err(Error::invalid(format!("stretch factor {s} outside [0.5, 2]")));
    }
    let shape = features.shape();
    if shape.t == 0 {
        return Err(Error::invalid("cannot stretch an empty sequence"));
    }
    let new_t = ((shape.t as f64 * s).round() as usize).max(1);
    let mut out = Tensor::zeros(Shape::new(shape.b, shape.c, new_t));
    let last = (shape.t - 1) as f64;
    let taps: Vec<(usize, usize, f64)> = (0..new_t)
        .map(|j| {
            let x = (j as f64 / s).min(last);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(shape.t - 1);
            (lo, hi, x - lo as f64)
        })
        .collect();
    for b in 0..shape.b {
        for c in 0..shape.c {
            let src = features.row(b, c);
            let dst = out.row_mut(b, c);
            for (d, &(lo, hi, w)) in dst.iter_mut().zip(&taps) {
                *d = if w == 0.0 { src[lo] } else { src[lo] * (1.0 - w) + src[hi] * w };
            }
        }
    }
    Ok(out)
}

/// Stretch features by `s` and scale beat times by the same factor.
pub fn time_stretch(example: &Example, s: f64) -> Result<Example> {
    Ok(Example {
        id: example.id.clone(),
        features: stretch_features(&example.features, s)?,
        annotation: example.annotation.scaled(s),
        frame_rate: example.frame_rate,
    })
}

/// Item indices per split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Seeded permutation cut into 2/3 train, 1/6 validation, 1/6 test.
    pub fn three_way(n: usize, seed: u64) -> Result<Splits> {
        if n < 3 {
            return Err(Error::invalid(format!("{n} items cannot fill three splits")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut rng_for(seed, &[STREAM_SPLIT]));
        let n_val = ((n as f64 / 6.0).round() as usize).max(1);
        let n_test = n_val;
        let n_train = n - n_val - n_test;
        let mut train = idx[..n_train].to_vec();
        let mut val = idx[n_train..n_train + n_val].to_vec();
        let mut test = idx[n_train + n_val..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        Ok(Splits { train, val, test })
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n {
                return Err(Error::invalid(format!("split index {i} out of range")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!("item {i} appears in more than one split")));
            }
        }
        Ok(())
    }
}

/// Generated items together with their split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SyntheticConfig,
    pub items: Vec<Example>,
    pub splits: Splits,
}

impl Dataset {
    pub fn generate(config: &SyntheticConfig, exec: Exec) -> Result<Dataset> {
        let items = generate(config, exec)?;
        let splits = Splits::three_way(items.len(), config.seed)?;
        Ok(Dataset {
            config: config.clone(),
            items,
            splits,
        })
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<&Example> {
        idx.iter().map(|&i| &self.items[i]).collect()
    }
}
