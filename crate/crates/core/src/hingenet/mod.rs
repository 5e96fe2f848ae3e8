//! The trainable hinge: per-layer projection, gated fusion with the
//! previous core layer, and a harmonic-aware module of parallel dilated
//! convolutions whose dilations are the rounded harmonic intervals of a
//! log-frequency axis. A linear + sigmoid head emits beat and downbeat
//! activations from the last core layer.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::foundation::{LayerFeatureStack, StubModel};
use crate::model::{BeatModel, HeadOutput, MethodKind, ModelInput};
use crate::rng::{rng_for, STREAM_HEAD, STREAM_HINGE};
use crate::tensorcore::{ops, Axis, Graph, ParamId, ParamStore, Shape, Tensor, Var};

/// Harmonic-series description for [`harmonic_intervals`].
///
/// The intervals are independent of the fundamental: adjacent harmonics
/// `k f0` and `(k+1) f0` are always `Q log2((k+1)/k)` bins apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarmonicIntervalSpec {
    pub bins_per_octave: u32,
    pub n_harmonics: u32,
}

impl Default for HarmonicIntervalSpec {
    fn default() -> Self {
        HarmonicIntervalSpec {
            bins_per_octave: 12,
            n_harmonics: 5,
        }
    }
}

/// `round(Q * log2((k + 1) / k))` for `k = 1 .. n_harmonics - 1`, rounding
/// half away from zero.
pub fn harmonic_intervals(spec: HarmonicIntervalSpec) -> Result<Vec<usize>> {
    if spec.bins_per_octave < 1 {
        return Err(Error::invalid("bins_per_octave must be at least 1"));
    }
    if spec.n_harmonics < 2 {
        return Err(Error::invalid("n_harmonics must be at least 2"));
    }
    let q = f64::from(spec.bins_per_octave);
    Ok((1..spec.n_harmonics)
        .map(|k| {
            let k = f64::from(k);
            // f64::round rounds half away from zero
            (q * ((k + 1.0) / k).log2()).round() as usize
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HingeConfig {
    pub projection_factor: usize,
    pub n_branches: usize,
    pub kernel_size: usize,
    pub conv_axis: Axis,
    pub bins_per_octave: u32,
    pub n_harmonics: u32,
    pub ham_enabled: bool,
    /// Explicit branch dilations; harmonic-derived when `None`.
    pub dilations: Option<Vec<usize>>,
}

impl Default for HingeConfig {
    fn default() -> Self {
        HingeConfig {
            projection_factor: 6,
            n_branches: 4,
            kernel_size: 3,
            conv_axis: Axis::Channel,
            bins_per_octave: 12,
            n_harmonics: 5,
            ham_enabled: true,
            dilations: None,
        }
    }
}

impl HingeConfig {
    /// Branch dilations, validated against `n_branches`.
    pub fn branch_dilations(&self) -> Result<Vec<usize>> {
        let d = match &self.dilations {
            Some(d) => d.clone(),
            None => harmonic_intervals(HarmonicIntervalSpec {
                bins_per_octave: self.bins_per_octave,
                n_harmonics: self.n_harmonics,
            })?,
        };
        if d.len() != self.n_branches {
            return Err(Error::Config(format!(
                "n_branches = {} but {} dilations were derived",
                self.n_branches,
                d.len()
            )));
        }
        if d.iter().any(|&v| v == 0) {
            return Err(Error::Config("dilations must be positive".into()));
        }
        Ok(d)
    }

    /// Check the config against a feature width `hidden`.
    pub fn validate(&self, hidden: usize) -> Result<()> {
        if self.projection_factor == 0 {
            return Err(Error::Config("projection_factor must be at least 1".into()));
        }
        if hidden % self.projection_factor != 0 {
            return Err(Error::Config(format!(
                "hidden size {hidden} is not divisible by projection factor {}",
                self.projection_factor
            )));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::Config(format!("kernel_size {} must be odd", self.kernel_size)));
        }
        if !self.ham_enabled {
            return Ok(());
        }
        if self.n_branches == 0 {
            return Err(Error::Config("n_branches must be positive".into()));
        }
        let dilations = self.branch_dilations()?;
        if self.conv_axis == Axis::Channel {
            let width = hidden / self.projection_factor;
            let reach = dilations.iter().max().copied().unwrap_or(1) * (self.kernel_size - 1) / 2;
            if reach >= width {
                return Err(Error::invalid(format!(
                    "largest dilated reach {reach} does not fit a projected width of {width} channels"
                )));
            }
        }
        Ok(())
    }
}

/// Per-frame beat and downbeat probabilities, each `(b, 1, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationPair {
    pub beat: Tensor,
    pub downbeat: Tensor,
    pub frame_rate: f64,
}

impl ActivationPair {
    pub fn frames(&self) -> usize {
        self.beat.shape().t
    }

    /// Beat activation of batch entry `b`.
    pub fn beat_row(&self, b: usize) -> &[f64] {
        self.beat.row(b, 0)
    }

    pub fn downbeat_row(&self, b: usize) -> &[f64] {
        self.downbeat.row(b, 0)
    }
}

#[derive(Debug, Clone)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
enum Ham {
    Harmonic {
        branches: Vec<(Affine, usize)>,
        mlp_in: Affine,
        mlp_out: Affine,
    },
    Linear(Affine),
}

#[derive(Debug, Clone)]
struct CoreLayer {
    proj: Affine,
    gate: Option<ParamId>,
    ham: Ham,
}

/// Trainable hinge over `n_layers` encoder layers of width `hidden`.
#[derive(Debug, Clone)]
pub struct HingeModel {
    config: HingeConfig,
    hidden: usize,
    seed: u64,
    params: ParamStore,
    layers: Vec<CoreLayer>,
    head: Affine,
    stub: Option<Arc<StubModel>>,
}

fn affine(
    params: &mut ParamStore,
    rng: &mut rand_chacha::ChaCha8Rng,
    name: &str,
    w_shape: Shape,
    out: usize,
    fan_in: usize,
) -> Affine {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = params.add(format!("{name}.w"), Tensor::uniform(w_shape, bound, rng), true);
    let b = params.add(format!("{name}.b"), Tensor::uniform(Shape::new(1, out, 1), bound, rng), true);
    Affine { w, b }
}

/// Head `width -> 2` shared by every method; drawn from its own stream so
/// all arms built with one seed start from the same head when widths agree.
pub(crate) fn build_head(params: &mut ParamStore, seed: u64, width: usize) -> (ParamId, ParamId) {
    let mut rng = rng_for(seed, &[STREAM_HEAD]);
    let a = affine(params, &mut rng, "head", Shape::new(1, 2, width), 2, width);
    (a.w, a.b)
}

/// Apply the two-channel head and split it into beat and downbeat.
pub(crate) fn head_forward(g: &mut Graph, params: &ParamStore, head: (ParamId, ParamId), x: Var) -> Result<HeadOutput> {
    let w = g.param(params, head.0);
    let b = g.param(params, head.1);
    let logits = g.linear(x, w, Some(b))?;
    let probs = g.sigmoid(logits);
    Ok(HeadOutput {
        beat: g.slice_channels(probs, 0, 1)?,
        downbeat: g.slice_channels(probs, 1, 1)?,
    })
}

impl HingeModel {
    pub fn new(config: HingeConfig, n_layers: usize, hidden: usize, seed: u64) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::Config("hinge needs at least one layer".into()));
        }
        config.validate(hidden)?;
        let width = hidden / config.projection_factor;
        let k = config.kernel_size;
        let mut rng = rng_for(seed, &[STREAM_HINGE]);
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let p = format!("core{i}");
            let proj = affine(&mut params, &mut rng, &format!("{p}.proj"), Shape::new(1, width, hidden), width, hidden);
            let gate = (i > 0).then(|| params.add(format!("{p}.gate"), Tensor::scalar(0.0), true));
            let ham = if config.ham_enabled {
                let dilations = config.branch_dilations()?;
                let branches = dilations
                    .iter()
                    .enumerate()
                    .map(|(j, &d)| {
                        let name = format!("{p}.ham.branch{j}");
                        let a = match config.conv_axis {
                            Axis::Channel => affine(&mut params, &mut rng, &name, Shape::new(1, 1, k), 1, k),
                            Axis::Time => {
                                affine(&mut params, &mut rng, &name, Shape::new(width, width, k), width, width * k)
                            }
                        };
                        (a, d)
                    })
                    .collect::<Vec<_>>();
                let cat = width * branches.len();
                let mlp_in = affine(&mut params, &mut rng, &format!("{p}.ham.mlp_in"), Shape::new(1, width, cat), width, cat);
                let mlp_out =
                    affine(&mut params, &mut rng, &format!("{p}.ham.mlp_out"), Shape::new(1, width, width), width, width);
                Ham::Harmonic {
                    branches,
                    mlp_in,
                    mlp_out,
                }
            } else {
                Ham::Linear(affine(
                    &mut params,
                    &mut rng,
                    &format!("{p}.ham.linear"),
                    Shape::new(1, width, width),
                    width,
                    width,
                ))
            };
            layers.push(CoreLayer { proj, gate, ham });
        }
        let (hw, hb) = build_head(&mut params, seed, width);
        Ok(HingeModel {
            config,
            hidden,
            seed,
            params,
            layers,
            head: Affine { w: hw, b: hb },
            stub: None,
        })
    }

    /// Hinge sized for `stub`'s layers, able to take raw features.
    pub fn for_stub(config: HingeConfig, stub: Arc<StubModel>, seed: u64) -> Result<Self> {
        let mut m = Self::new(config, stub.n_layers(), stub.hidden(), seed)?;
        m.stub = Some(stub);
        Ok(m)
    }

    pub fn config(&self) -> &HingeConfig {
        &self.config
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Projected width `h / r`.
    pub fn width(&self) -> usize {
        self.hidden / self.config.projection_factor
    }

    /// Gate logit `alpha_i` of core layer `i` (0-based); layer 0 has none.
    pub fn gate_logit(&self, i: usize) -> Option<f64> {
        self.layers.get(i)?.gate.map(|id| self.params.get(id).tensor.data()[0])
    }

    /// `mu_i = sigmoid(alpha_i)`.
    pub fn gate_value(&self, i: usize) -> Option<f64> {
        self.gate_logit(i).map(ops::sigmoid_scalar)
    }

    pub fn set_gate_logit(&mut self, i: usize, alpha: f64) -> Result<()> {
        let id = self
            .layers
            .get(i)
            .and_then(|l| l.gate)
            .ok_or_else(|| Error::invalid(format!("core layer {i} has no gate")))?;
        self.params.get_mut(id).tensor = Tensor::scalar(alpha);
        Ok(())
    }

    /// Branch dilations of core layer `i`; empty when the HAM is disabled.
    pub fn dilations(&self, i: usize) -> Vec<usize> {
        match self.layers.get(i).map(|l| &l.ham) {
            Some(Ham::Harmonic { branches, .. }) => branches.iter().map(|(_, d)| *d).collect(),
            _ => Vec::new(),
        }
    }

    fn affine(&self, g: &mut Graph, x: Var, a: &Affine) -> Result<Var> {
        let w = g.param(&self.params, a.w);
        let b = g.param(&self.params, a.b);
        g.linear(x, w, Some(b))
    }

    fn layer(&self, i: usize) -> Result<&CoreLayer> {
        self.layers
            .get(i)
            .ok_or_else(|| Error::invalid(format!("core layer {i} out of range")))
    }

    /// Projection `P_i`: `(b, h, t) -> (b, h/r, t)`.
    pub fn project_graph(&self, g: &mut Graph, i: usize, features: Var) -> Result<Var> {
        let layer = self.layer(i)?;
        self.affine(g, features, &layer.proj)
    }

    /// Gated fusion. Layer 0 returns `proj` unchanged.
    pub fn fuse_graph(&self, g: &mut Graph, i: usize, prev: Option<Var>, proj: Var) -> Result<Var> {
        let layer = self.layer(i)?;
        match (layer.gate, prev) {
            (None, _) => Ok(proj),
            (Some(gate), Some(prev)) => {
                if g.shape(prev) != g.shape(proj) {
                    return Err(Error::invalid(format!(
                        "fuse: shape mismatch {} vs {}",
                        g.shape(prev),
                        g.shape(proj)
                    )));
                }
                let a = g.param(&self.params, gate);
                g.mix(prev, proj, a)
            }
            (Some(_), None) => Err(Error::invalid(format!("core layer {i} needs the previous layer output"))),
        }
    }

    /// Harmonic-aware module `H_i` (or its linear ablation).
    pub fn ham_graph(&self, g: &mut Graph, i: usize, x: Var) -> Result<Var> {
        let layer = self.layer(i)?;
        match &layer.ham {
            Ham::Linear(a) => self.affine(g, x, a),
            Ham::Harmonic {
                branches,
                mlp_in,
                mlp_out,
            } => {
                let outs = branches
                    .iter()
                    .map(|(a, d)| {
                        let w = g.param(&self.params, a.w);
                        let b = g.param(&self.params, a.b);
                        g.conv1d(x, w, Some(b), *d, self.config.conv_axis)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let cat = g.concat(&outs)?;
                let hidden = self.affine(g, cat, mlp_in)?;
                let hidden = g.relu(hidden);
                self.affine(g, hidden, mlp_out)
            }
        }
    }

    /// Chain all core layers over already-recorded layer features and apply
    /// the head.
    pub fn forward_layers(&self, g: &mut Graph, features: &[Var]) -> Result<HeadOutput> {
        if features.len() != self.layers.len() {
            return Err(Error::invalid(format!(
                "hinge has {} core layers but received {} feature layers",
                self.layers.len(),
                features.len()
            )));
        }
        let mut prev = None;
        for (i, &f) in features.iter().enumerate() {
            let fs = g.shape(f);
            if fs.c != self.hidden {
                return Err(Error::invalid(format!(
                    "layer {i} has {} channels, hinge expects {}",
                    fs.c, self.hidden
                )));
            }
            if self.config.conv_axis == Axis::Time && self.config.ham_enabled {
                let reach = self.config.branch_dilations()?.into_iter().max().unwrap_or(1) * (self.config.kernel_size - 1) / 2;
                if reach >= fs.t {
                    return Err(Error::invalid(format!(
                        "largest dilated reach {reach} exceeds {} frames",
                        fs.t
                    )));
                }
            }
            let proj = self.project_graph(g, i, f)?;
            let fused = self.fuse_graph(g, i, prev, proj)?;
            prev = Some(self.ham_graph(g, i, fused)?);
        }
        head_forward(g, &self.params, (self.head.w, self.head.b), prev.expect("at least one layer"))
    }

    /// Eager `P_i(h_i)`.
    pub fn project(&self, i: usize, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let y = self.project_graph(&mut g, i, x)?;
        Ok(g.value(y).clone())
    }

    /// Eager gated fusion.
    pub fn fuse(&self, i: usize, prev: Option<&Tensor>, proj: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = prev.map(|t| g.constant(t.clone()));
        let q = g.constant(proj.clone());
        let y = self.fuse_graph(&mut g, i, p, q)?;
        Ok(g.value(y).clone())
    }

    /// Eager harmonic-aware module.
    pub fn ham_forward(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.ham_graph(&mut g, i, xv)?;
        Ok(g.value(y).clone())
    }

    /// Full forward on a feature stack; the stack is only read.
    pub fn hinge_forward(&self, stack: &LayerFeatureStack) -> Result<ActivationPair> {
        self.predict(&ModelInput::Stack(stack))
    }
}

impl BeatModel for HingeModel {
    fn kind(&self) -> MethodKind {
        MethodKind::Hinge
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn stub(&self) -> Option<&Arc<StubModel>> {
        self.stub.as_ref()
    }

    fn reads_stub_features(&self) -> bool {
        true
    }

    fn forward(&self, g: &mut Graph, input: &ModelInput<'_>) -> Result<HeadOutput> {
        let owned;
        let stack = match input {
            ModelInput::Stack(s) => *s,
            ModelInput::Raw { features, frame_rate } => {
                let stub = self
                    .stub
                    .as_ref()
                    .ok_or_else(|| Error::invalid("hinge without a stub needs precomputed features"))?;
                owned = stub.forward_all(features, *frame_rate)?;
                &owned
            }
        };
        let vars: Vec<Var> = stack.layers().iter().map(|l| g.constant(l.clone())).collect();
        self.forward_layers(g, &vars)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_intervals_for_twelve_bins() {
        assert_eq!(harmonic_intervals(HarmonicIntervalSpec::default()).unwrap(), vec![12, 7, 5, 4]);
    }

    #[test]
    fn octave_identity_and_other_q() {
        for q in [1, 7, 12, 36] {
            let spec = HarmonicIntervalSpec {
                bins_per_octave: q,
                n_harmonics: 2,
            };
            assert_eq!(harmonic_intervals(spec).unwrap(), vec![q as usize]);
        }
        let spec = HarmonicIntervalSpec {
            bins_per_octave: 24,
            n_harmonics: 3,
        };
        // 24 * log2(1.5) = 14.039
        assert_eq!(harmonic_intervals(spec).unwrap(), vec![24, 14]);
    }

    #[test]
    fn invalid_interval_specs() {
        let bad = [(0, 5), (12, 1), (12, 0)];
        for (q, n) in bad {
            let spec = HarmonicIntervalSpec {
                bins_per_octave: q,
                n_harmonics: n,
            };
            assert!(matches!(harmonic_intervals(spec), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn projection_widths() {
        let cfg = HingeConfig {
            projection_factor: 6,
            ..Default::default()
        };
        // 768 / 6 = 128 channels
        let m = HingeModel::new(cfg, 1, 768, 0).unwrap();
        assert_eq!(m.width(), 128);
        let cfg = HingeConfig {
            projection_factor: 4,
            ..Default::default()
        };
        let m = HingeModel::new(cfg, 2, 64, 0).unwrap();
        let y = m.project(1, &Tensor::full(Shape::new(1, 64, 7), 0.5)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 16, 7));
    }

    #[test]
    fn indivisible_hidden_is_a_config_error() {
        assert!(matches!(
            HingeModel::new(HingeConfig::default(), 4, 64, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn reach_beyond_projected_width_is_rejected() {
        // width 12 cannot hold a dilation-12 kernel
        let cfg = HingeConfig {
            projection_factor: 8,
            ..Default::default()
        };
        assert!(matches!(HingeModel::new(cfg, 1, 96, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn gates_start_at_one_half() {
        let cfg = HingeConfig {
            projection_factor: 4,
            ..Default::default()
        };
        let m = HingeModel::new(cfg, 4, 64, 9).unwrap();
        assert_eq!(m.gate_value(0), None);
        for i in 1..4 {
            assert_eq!(m.gate_logit(i), Some(0.0));
            assert_eq!(m.gate_value(i), Some(0.5));
        }
        assert_eq!(m.dilations(2), vec![12, 7, 5, 4]);
    }
}
