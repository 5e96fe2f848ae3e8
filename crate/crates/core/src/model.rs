//! The train/infer interface shared by the hinge and every baseline, and
//! the HGNM checkpoint container.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{AdapterModel, BaselineConfig, BaselineKind, LinearProbe, LoraModel};
use crate::error::{Error, IoContext, Result};
use crate::foundation::{build_stub, LayerFeatureStack, StubConfig, StubModel};
use crate::hingenet::{ActivationPair, HingeConfig, HingeModel};
use crate::tensorcore::{Graph, ParamStore, Shape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Hinge,
    Adapter,
    Lora,
    LinearProbe,
}

impl MethodKind {
    pub const ALL: [MethodKind; 4] = [
        MethodKind::Hinge,
        MethodKind::Adapter,
        MethodKind::Lora,
        MethodKind::LinearProbe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Hinge => "hinge",
            MethodKind::Adapter => "adapter",
            MethodKind::Lora => "lora",
            MethodKind::LinearProbe => "linear_probe",
        }
    }
}

impl std::str::FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}; expected hinge, adapter, lora or linear_probe")))
    }
}

/// What a model is fed.
#[derive(Debug, Clone, Copy)]
pub enum ModelInput<'a> {
    /// Frame-level input features `(b, input_channels, t)`.
    Raw { features: &'a Tensor, frame_rate: f64 },
    /// Precomputed encoder-layer features.
    Stack(&'a LayerFeatureStack),
}

impl ModelInput<'_> {
    pub fn frame_rate(&self) -> f64 {
        match self {
            ModelInput::Raw { frame_rate, .. } => *frame_rate,
            ModelInput::Stack(s) => s.frame_rate,
        }
    }
}

/// Head outputs recorded on a graph, each `(b, 1, t)` in `(0, 1)`.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub beat: Var,
    pub downbeat: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub trainable: usize,
    pub frozen: usize,
    pub fraction: f64,
}

impl ParameterCounts {
    pub fn new(trainable: usize, frozen: usize) -> Self {
        let total = trainable + frozen;
        ParameterCounts {
            trainable,
            frozen,
            fraction: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
        }
    }
}

/// Common surface of the hinge and the baselines.
pub trait BeatModel: Send + Sync {
    fn kind(&self) -> MethodKind;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    /// The frozen encoder this model sits on, when attached.
    fn stub(&self) -> Option<&Arc<StubModel>>;

    /// True when the model only reads the stub's layer outputs, so they can
    /// be computed once and cached.
    fn reads_stub_features(&self) -> bool;

    fn forward(&self, g: &mut Graph, input: &ModelInput<'_>) -> Result<HeadOutput>;

    fn predict(&self, input: &ModelInput<'_>) -> Result<ActivationPair> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, input)?;
        let pair = ActivationPair {
            beat: g.value(out.beat).clone(),
            downbeat: g.value(out.downbeat).clone(),
            frame_rate: input.frame_rate(),
        };
        if !pair.beat.is_finite() || !pair.downbeat.is_finite() {
            return Err(Error::Numeric("non-finite activation".into()));
        }
        Ok(pair)
    }

    fn parameter_counts(&self) -> ParameterCounts {
        let frozen = self.params().frozen_count() + self.stub().map_or(0, |s| s.params().frozen_count());
        ParameterCounts::new(self.params().trainable_count(), frozen)
    }
}

/// Counts for a bare stub: nothing trainable.
pub fn stub_parameter_counts(stub: &StubModel) -> ParameterCounts {
    ParameterCounts::new(stub.params().trainable_count(), stub.params().frozen_count())
}

pub fn count_parameters(model: &dyn BeatModel) -> ParameterCounts {
    model.parameter_counts()
}

/// Everything needed to rebuild a model's structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: MethodKind,
    pub seed: u64,
    pub n_layers: usize,
    pub hidden: usize,
    pub stub: Option<StubConfig>,
    pub hinge: Option<HingeConfig>,
    pub baseline: Option<BaselineConfig>,
}

/// Any of the four trainable arms.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Hinge(HingeModel),
    Adapter(AdapterModel),
    Lora(LoraModel),
    LinearProbe(LinearProbe),
}

macro_rules! delegate {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            AnyModel::Hinge($m) => $e,
            AnyModel::Adapter($m) => $e,
            AnyModel::Lora($m) => $e,
            AnyModel::LinearProbe($m) => $e,
        }
    };
}

impl BeatModel for AnyModel {
    fn kind(&self) -> MethodKind {
        delegate!(self, m => m.kind())
    }

    fn params(&self) -> &ParamStore {
        delegate!(self, m => m.params())
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        delegate!(self, m => m.params_mut())
    }

    fn stub(&self) -> Option<&Arc<StubModel>> {
        delegate!(self, m => m.stub())
    }

    fn reads_stub_features(&self) -> bool {
        delegate!(self, m => m.reads_stub_features())
    }

    fn forward(&self, g: &mut Graph, input: &ModelInput<'_>) -> Result<HeadOutput> {
        delegate!(self, m => m.forward(g, input))
    }
}

impl AnyModel {
    /// Build a freshly initialised model for `kind` on top of `stub`.
    pub fn build(
        kind: MethodKind,
        stub: Arc<StubModel>,
        hinge: &HingeConfig,
        baseline: &BaselineConfig,
        seed: u64,
    ) -> Result<AnyModel> {
        Ok(match kind {
            MethodKind::Hinge => AnyModel::Hinge(HingeModel::for_stub(hinge.clone(), stub, seed)?),
            MethodKind::Adapter => AnyModel::Adapter(AdapterModel::new(stub, baseline.clone(), seed)?),
            MethodKind::Lora => AnyModel::Lora(LoraModel::new(stub, baseline.clone(), seed)?),
            MethodKind::LinearProbe => AnyModel::LinearProbe(LinearProbe::new(stub, seed)),
        })
    }

    pub fn spec(&self) -> ModelSpec {
        let stub = self.stub().map(|s| *s.config());
        match self {
            AnyModel::Hinge(m) => ModelSpec {
                kind: MethodKind::Hinge,
                seed: m.seed(),
                n_layers: m.n_layers(),
                hidden: m.hidden(),
                stub,
                hinge: Some(m.config().clone()),
                baseline: None,
            },
            AnyModel::Adapter(m) => baseline_spec(MethodKind::Adapter, m.seed(), m.stub_ref(), m.config()),
            AnyModel::Lora(m) => baseline_spec(MethodKind::Lora, m.seed(), m.stub_ref(), m.config()),
            AnyModel::LinearProbe(m) => baseline_spec(
                MethodKind::LinearProbe,
                m.seed(),
                m.stub_ref(),
                &BaselineConfig {
                    kind: BaselineKind::LinearProbe,
                    ..Default::default()
                },
            ),
        }
    }

    /// Rebuild the structure described by `spec` with fresh weights.
    pub fn from_spec(spec: &ModelSpec) -> Result<AnyModel> {
        let stub = spec.stub.map(build_stub).transpose()?.map(Arc::new);
        let need_stub = || stub.clone().ok_or_else(|| Error::Config(format!("{} checkpoint lacks a stub config", spec.kind.name())));
        let baseline = spec.baseline.clone().unwrap_or_default();
        Ok(match spec.kind {
            MethodKind::Hinge => {
                let cfg = spec.hinge.clone().ok_or_else(|| Error::Config("hinge checkpoint lacks a hinge config".into()))?;
                let mut m = HingeModel::new(cfg.clone(), spec.n_layers, spec.hidden, spec.seed)?;
                if let Some(stub) = stub.clone() {
                    m = HingeModel::for_stub(cfg, stub, spec.seed)?;
                }
                AnyModel::Hinge(m)
            }
            MethodKind::Adapter => AnyModel::Adapter(AdapterModel::new(need_stub()?, baseline, spec.seed)?),
            MethodKind::Lora => AnyModel::Lora(LoraModel::new(need_stub()?, baseline, spec.seed)?),
            MethodKind::LinearProbe => AnyModel::LinearProbe(LinearProbe::new(need_stub()?, spec.seed)),
        })
    }
}

fn baseline_spec(kind: MethodKind, seed: u64, stub: &StubModel, cfg: &BaselineConfig) -> ModelSpec {
    ModelSpec {
        kind,
        seed,
        n_layers: stub.n_layers(),
        hidden: stub.hidden(),
        stub: Some(*stub.config()),
        hinge: None,
        baseline: Some(cfg.clone()),
    }
}

// ---------------------------------------------------------------------------
// HGNM checkpoints
//
// "HGNM" | u32 version | payload | SHA-256(payload)
// payload: u32 spec_len | spec JSON | u32 n_params |
//          per parameter: u32 name_len | name | u32 b | u32 c | u32 t | f64 LE values

pub const HGNM_MAGIC: &[u8; 4] = b"HGNM";
pub const HGNM_VERSION: u32 = 1;

pub fn encode_checkpoint(model: &AnyModel) -> Result<Vec<u8>> {
    let spec = serde_json::to_vec(&model.spec())?;
    let mut payload = Vec::new();
    payload.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    payload.extend_from_slice(&spec);
    let params = model.params();
    payload.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        payload.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        payload.extend_from_slice(p.name.as_bytes());
        let s = p.tensor.shape();
        for d in [s.b, s.c, s.t] {
            payload.extend_from_slice(&(d as u32).to_le_bytes());
        }
        payload.extend_from_slice(&p.tensor.to_le_bytes());
    }
    let mut out = Vec::with_capacity(payload.len() + 40);
    out.extend_from_slice(HGNM_MAGIC);
    out.extend_from_slice(&HGNM_VERSION.to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<AnyModel> {
    if bytes.len() < 8 + 32 {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    if &bytes[..4] != HGNM_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"HGNM\""));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != HGNM_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let end = bytes.len() - 32;
    let payload = &bytes[8..end];
    if Sha256::digest(payload).as_slice() != &bytes[end..] {
        return Err(Error::format(end as u64, "payload digest mismatch"));
    }
    let mut r = Reader { bytes: &bytes[..end], pos: 8 };
    let spec_len = r.u32("spec length")?;
    let spec_at = r.pos;
    let spec: ModelSpec = serde_json::from_slice(r.take(spec_len, "spec")?)
        .map_err(|e| Error::format(spec_at as u64, format!("bad spec: {e}")))?;
    let mut model = AnyModel::from_spec(&spec)?;
    let n = r.u32("parameter count")?;
    if n != model.params().len() {
        return Err(Error::format(
            r.pos as u64,
            format!("checkpoint has {n} parameters, model expects {}", model.params().len()),
        ));
    }
    for _ in 0..n {
        let at = r.pos as u64;
        let name_len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::format(at, "parameter name is not UTF-8"))?
            .to_string();
        let shape = Shape::new(r.u32("shape")?, r.u32("shape")?, r.u32("shape")?);
        let len = shape
            .b
            .checked_mul(shape.c)
            .and_then(|v| v.checked_mul(shape.t))
            .and_then(|v| v.checked_mul(8))
            .ok_or_else(|| Error::format(at, "dimension overflow"))?;
        let data = r
            .take(len, "parameter data")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let id = model
            .params()
            .find(&name)
            .ok_or_else(|| Error::format(at, format!("unknown parameter {name}")))?;
        let p = model.params_mut().get_mut(id);
        if p.tensor.shape() != shape {
            return Err(Error::format(at, format!("shape mismatch for {name}")));
        }
        p.tensor = Tensor::new(shape, data)?;
    }
    if r.pos != end {
        return Err(Error::format(r.pos as u64, "trailing bytes before digest"));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &AnyModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)?).at(path)
}

pub fn load_checkpoint(path: &Path) -> Result<AnyModel> {
    decode_checkpoint(&std::fs::read(path).at(path)?)
}
