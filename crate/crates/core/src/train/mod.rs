//! Multi-task training of any [`BeatModel`] on broadened beat and downbeat
//! targets, plus the projection/HAM ablation and the method comparison.
//!
//! Batches are processed item by item: every item gets its own graph and
//! the per-item gradients are summed in batch order, so the update is the
//! same whichever [`Exec`] policy computed them.

mod harness;
pub mod svg;

pub use harness::{
    ablate_projection, compare_methods, write_ablation, write_comparison, AblationCell, AblationSpec, AblationTable,
    CompareRow, CompareSpec, CompareTable,
};

use std::borrow::Cow;
use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{broaden_labels, label_targets, time_stretch, Dataset, Example, LabelMode};
use crate::error::{Error, Result};
use crate::eval::{downbeat_f_measure, evaluate, mean_report, MetricReport};
use crate::exec::Exec;
use crate::foundation::{LayerFeatureStack, StubModel};
use crate::model::{BeatModel, MethodKind, ModelInput, ParameterCounts};
use crate::postprocess::{decode_activations, DbnConfig};
use crate::rng::{rng_for, STREAM_AUGMENT, STREAM_SHUFFLE};
use crate::tensorcore::{adam_step, AdamConfig, Graph, Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub augmentation: bool,
    pub stretch_min: f64,
    pub stretch_max: f64,
    pub label_mode: LabelMode,
    /// Train on random windows of this many frames, `ceil(t / crop)` per
    /// item per epoch; validation and test always use whole items.
    pub crop_frames: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 16,
            patience: 20,
            max_epochs: 200,
            seed: 0,
            augmentation: false,
            stretch_min: 0.8,
            stretch_max: 1.25,
            label_mode: LabelMode::SoftTargets,
            crop_frames: Some(100),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(0.5 <= self.stretch_min && self.stretch_min <= self.stretch_max && self.stretch_max <= 2.0) {
            return Err(Error::Config("need 0.5 <= stretch_min <= stretch_max <= 2".into()));
        }
        if self.crop_frames == Some(0) {
            return Err(Error::Config("crop_frames must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Outcome of feeding one validation loss to [`EarlyStopping`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once the validation loss has failed to strictly improve for
/// `patience` consecutive epochs. Epochs are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            return StopDecision::Improved;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Stretch hook applied to training items only.
pub trait Augmenter: Sync {
    fn stretch(&self, example: &Example, factor: f64) -> Result<Example>;
}

/// Linear-interpolation time stretch.
#[derive(Debug, Clone, Copy, Default)]
pub struct TimeStretch;

impl Augmenter for TimeStretch {
    fn stretch(&self, example: &Example, factor: f64) -> Result<Example> {
        time_stretch(example, factor)
    }
}

/// Stub layer outputs per item id, tied to one stub by digest.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    stub_digest: [u8; 32],
    stacks: HashMap<String, LayerFeatureStack>,
}

impl FeatureCache {
    pub fn build(stub: &StubModel, examples: &[&Example], exec: Exec) -> Result<Self> {
        let stacks = exec
            .map(examples, |ex| stub.forward_all(&ex.features, ex.frame_rate).map(|s| (ex.id.clone(), s)))
            .into_iter()
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(FeatureCache {
            stub_digest: stub.digest(),
            stacks,
        })
    }

    pub fn get(&self, stub: &StubModel, id: &str) -> Option<&LayerFeatureStack> {
        (self.stub_digest == stub.digest()).then(|| self.stacks.get(id)).flatten()
    }

    pub fn len(&self) -> usize {
        self.stacks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stacks.is_empty()
    }
}

/// Examples of the three splits.
#[derive(Debug, Clone)]
pub struct SplitData<'a> {
    pub train: Vec<&'a Example>,
    pub val: Vec<&'a Example>,
    pub test: Vec<&'a Example>,
}

impl<'a> SplitData<'a> {
    pub fn from_dataset(ds: &'a Dataset) -> Result<Self> {
        ds.splits.validate(ds.items.len())?;
        Ok(SplitData {
            train: ds.subset(&ds.splits.train),
            val: ds.subset(&ds.splits.val),
            test: ds.subset(&ds.splits.test),
        })
    }

    pub fn all(&self) -> Vec<&'a Example> {
        self.train.iter().chain(&self.val).chain(&self.test).copied().collect()
    }
}

/// Knobs that do not change the result.
#[derive(Clone, Copy)]
pub struct TrainOptions<'a> {
    pub exec: Exec,
    pub augmenter: &'a dyn Augmenter,
    pub cache: Option<&'a FeatureCache>,
    pub dbn: DbnConfig,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        TrainOptions {
            exec: Exec::default(),
            augmenter: &TimeStretch,
            cache: None,
            dbn: DbnConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: MethodKind,
    pub seed: u64,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub test: Option<MetricReport>,
    pub test_downbeat_f: Option<f64>,
    pub counts: ParameterCounts,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone)]
struct Targets {
    beat: Tensor,
    downbeat: Tensor,
    beat_w: Option<Tensor>,
    downbeat_w: Option<Tensor>,
}

impl Targets {
    fn new(ex: &Example, mode: LabelMode) -> Targets {
        let t = ex.n_frames();
        let (b, d) = broaden_labels(&ex.annotation, t, ex.frame_rate);
        let row = |v: Vec<f64>| Tensor::new(Shape::new(1, 1, t), v).expect("length t");
        let (bt, bw) = label_targets(&b, mode);
        let (dt, dw) = label_targets(&d, mode);
        Targets {
            beat: row(bt),
            downbeat: row(dt),
            beat_w: bw.map(row),
            downbeat_w: dw.map(row),
        }
    }

    fn slice(&self, lo: usize, hi: usize) -> Targets {
        let s = |t: &Tensor| t.slice_time(lo, hi).expect("in range");
        Targets {
            beat: s(&self.beat),
            downbeat: s(&self.downbeat),
            beat_w: self.beat_w.as_ref().map(s),
            downbeat_w: self.downbeat_w.as_ref().map(s),
        }
    }
}

enum Prepared<'a> {
    Stack(Cow<'a, LayerFeatureStack>),
    Raw(Cow<'a, Tensor>, f64),
}

impl Prepared<'_> {
    fn input(&self) -> ModelInput<'_> {
        match self {
            Prepared::Stack(s) => ModelInput::Stack(s),
            Prepared::Raw(t, fr) => ModelInput::Raw {
                features: t,
                frame_rate: *fr,
            },
        }
    }

    fn frames(&self) -> usize {
        match self {
            Prepared::Stack(s) => s.shape().t,
            Prepared::Raw(t, _) => t.shape().t,
        }
    }

    fn window(&self, lo: usize, hi: usize) -> Result<Prepared<'static>> {
        Ok(match self {
            Prepared::Stack(s) => Prepared::Stack(Cow::Owned(s.slice_time(lo, hi)?)),
            Prepared::Raw(t, fr) => Prepared::Raw(Cow::Owned(t.slice_time(lo, hi)?), *fr),
        })
    }
}

fn prepare<'a>(model: &dyn BeatModel, ex: &'a Example, cache: Option<&'a FeatureCache>) -> Result<Prepared<'a>> {
    if !model.reads_stub_features() {
        return Ok(Prepared::Raw(Cow::Borrowed(&ex.features), ex.frame_rate));
    }
    let stub = model
        .stub()
        .ok_or_else(|| Error::invalid("training needs a model attached to a stub"))?;
    if let Some(stack) = cache.and_then(|c| c.get(stub, &ex.id)) {
        return Ok(Prepared::Stack(Cow::Borrowed(stack)));
    }
    Ok(Prepared::Stack(Cow::Owned(stub.forward_all(&ex.features, ex.frame_rate)?)))
}

/// Summed beat and downbeat BCE for one item, with gradients if asked.
fn item_loss(
    model: &dyn BeatModel,
    input: &ModelInput<'_>,
    targets: &Targets,
    with_grad: bool,
) -> Result<(f64, Option<Vec<Option<Tensor>>>)> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, input)?;
    let lb = g.bce(out.beat, targets.beat.clone(), targets.beat_w.clone())?;
    let ld = g.bce(out.downbeat, targets.downbeat.clone(), targets.downbeat_w.clone())?;
    let loss = g.add(lb, ld)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite training loss".into()));
    }
    let grads = if with_grad {
        Some(g.backward(loss)?.for_store(model.params()))
    } else {
        None
    };
    Ok((value, grads))
}

fn mean_loss(model: &dyn BeatModel, examples: &[&Example], cfg: &TrainConfig, opts: &TrainOptions<'_>) -> Result<f64> {
    let losses = opts.exec.map(examples, |ex| {
        let p = prepare(model, ex, opts.cache)?;
        item_loss(model, &p.input(), &Targets::new(ex, cfg.label_mode), false).map(|r| r.0)
    });
    let losses = losses.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Decode and score `examples`; returns the mean report and the mean
/// downbeat F-measure over items that could be scored.
pub fn evaluate_examples<M: BeatModel + ?Sized>(
    model: &M,
    examples: &[&Example],
    dbn: &DbnConfig,
    exec: Exec,
    cache: Option<&FeatureCache>,
) -> Result<(MetricReport, f64)> {
    let per_item = exec.map(examples, |ex| -> Result<(MetricReport, f64)> {
        let stack;
        let input = match (model.reads_stub_features(), model.stub()) {
            (true, Some(stub)) => match cache.and_then(|c| c.get(stub, &ex.id)) {
                Some(s) => ModelInput::Stack(s),
                None => {
                    stack = stub.forward_all(&ex.features, ex.frame_rate)?;
                    ModelInput::Stack(&stack)
                }
            },
            _ => ModelInput::Raw {
                features: &ex.features,
                frame_rate: ex.frame_rate,
            },
        };
        let pair = model.predict(&input)?;
        let est = decode_activations(&pair, dbn)?;
        let reference = ex.annotation.to_sequence();
        Ok((evaluate(&est, &reference)?, downbeat_f_measure(&est, &reference)?))
    });
    let mut reports = Vec::new();
    let mut down = Vec::new();
    for r in per_item {
        let (m, d) = r?;
        reports.push(m);
        down.push(d);
    }
    let mean = mean_report(&reports)?;
    Ok((mean, down.iter().sum::<f64>() / down.len() as f64))
}

/// Train with the default time-stretch augmenter.
pub fn train<M: BeatModel>(model: &mut M, data: &SplitData<'_>, cfg: &TrainConfig, exec: Exec) -> Result<RunRecord> {
    train_with(
        model,
        data,
        cfg,
        &TrainOptions {
            exec,
            ..TrainOptions::default()
        },
    )
}

/// Mini-batch Adam on beat + downbeat BCE with early stopping on the
/// validation loss. The parameters of the best epoch are restored before
/// the test split is decoded and scored.
pub fn train_with<M: BeatModel>(
    model: &mut M,
    data: &SplitData<'_>,
    cfg: &TrainConfig,
    opts: &TrainOptions<'_>,
) -> Result<RunRecord> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::invalid("training and validation splits must be non-empty"));
    }
    let started = Instant::now();
    let local_cache;
    let mut opts = *opts;
    if opts.cache.is_none() && model.reads_stub_features() {
        if let Some(stub) = model.stub() {
            let needed: Vec<&Example> = if cfg.augmentation {
                data.val.iter().chain(&data.test).copied().collect()
            } else {
                data.all()
            };
            local_cache = FeatureCache::build(stub, &needed, opts.exec)?;
            opts.cache = Some(&local_cache);
        }
    }
    let train_targets: Vec<Targets> = data.train.iter().map(|ex| Targets::new(ex, cfg.label_mode)).collect();
    let adam = cfg.adam();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.params().snapshot();
    let mut train_curve = Vec::new();
    let mut val_curve = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let shared: &M = model;
        // one stretch factor per item per epoch
        let epoch_items: Vec<(Prepared<'_>, Cow<'_, Targets>)> = if cfg.augmentation {
            opts.exec
                .map_range(data.train.len(), |i| -> Result<(Prepared<'static>, Cow<'static, Targets>)> {
                    let mut rng = rng_for(cfg.seed, &[STREAM_AUGMENT, epoch as u64, i as u64]);
                    let s = rng.gen_range(cfg.stretch_min..=cfg.stretch_max);
                    let stretched = opts.augmenter.stretch(data.train[i], s)?;
                    let t = Targets::new(&stretched, cfg.label_mode);
                    let p = match (shared.reads_stub_features(), shared.stub()) {
                        (true, Some(stub)) => {
                            Prepared::Stack(Cow::Owned(stub.forward_all(&stretched.features, stretched.frame_rate)?))
                        }
                        _ => Prepared::Raw(Cow::Owned(stretched.features), stretched.frame_rate),
                    };
                    Ok((p, Cow::Owned(t)))
                })
                .into_iter()
                .collect::<Result<_>>()?
        } else {
            data.train
                .iter()
                .zip(&train_targets)
                .map(|(ex, t)| Ok((prepare(shared, ex, opts.cache)?, Cow::Borrowed(t))))
                .collect::<Result<_>>()?
        };
        // training windows: whole items, or ceil(t / crop) random crops each
        let mut windows: Vec<(usize, usize, usize)> = Vec::new();
        for (i, (p, _)) in epoch_items.iter().enumerate() {
            let t = p.frames();
            match cfg.crop_frames {
                Some(c) if t > c => {
                    for w in 0..t.div_ceil(c) {
                        let mut rng = rng_for(cfg.seed, &[STREAM_AUGMENT, epoch as u64, i as u64, w as u64 + 1]);
                        let lo = rng.gen_range(0..=t - c);
                        windows.push((i, lo, lo + c));
                    }
                }
                _ => windows.push((i, 0, t)),
            }
        }
        windows.shuffle(&mut rng_for(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let mut epoch_loss = 0.0;
        for batch in windows.chunks(cfg.batch_size) {
            let shared: &M = model;
            let results = opts.exec.map(batch, |&(i, lo, hi)| -> Result<(f64, Vec<Option<Tensor>>)> {
                let (prepared, targets) = &epoch_items[i];
                let (loss, grads) = if lo == 0 && hi == prepared.frames() {
                    item_loss(shared, &prepared.input(), targets, true)?
                } else {
                    let input = prepared.window(lo, hi)?;
                    item_loss(shared, &input.input(), &targets.slice(lo, hi), true)?
                };
                Ok((loss, grads.expect("requested")))
            });
            let mut sum: Vec<Option<Tensor>> = vec![None; model.params().len()];
            let n = results.len() as f64;
            for r in results {
                let (loss, grads) = r?;
                epoch_loss += loss;
                for (acc, g) in sum.iter_mut().zip(grads) {
                    match (acc.as_mut(), g) {
                        (Some(a), Some(g)) => a.add_assign(&g),
                        (None, Some(g)) => *acc = Some(g),
                        _ => {}
                    }
                }
            }
            for g in sum.iter_mut().flatten() {
                g.scale_assign(1.0 / n);
            }
            adam_step(model.params_mut(), &sum, &adam)?;
        }
        drop(epoch_items);
        train_curve.push(epoch_loss / windows.len() as f64);
        let val = mean_loss(model, &data.val, cfg, &opts)?;
        val_curve.push(val);
        match stopper.observe(epoch, val) {
            StopDecision::Improved => best = model.params().snapshot(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    model.params_mut().restore(&best)?;

    let (test, test_downbeat_f) = if data.test.is_empty() {
        (None, None)
    } else {
        let (m, d) = evaluate_examples(model, &data.test, &opts.dbn, opts.exec, opts.cache)?;
        (Some(m), Some(d))
    };
    Ok(RunRecord {
        method: model.kind(),
        seed: cfg.seed,
        epochs_run: val_curve.len(),
        train_loss: train_curve,
        val_loss: val_curve,
        best_epoch: stopper.best_epoch(),
        best_val_loss: stopper.best(),
        test,
        test_downbeat_f,
        counts: model.parameter_counts(),
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}
