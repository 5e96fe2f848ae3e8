//! Insertion-style comparison arms: a serial residual Adapter after every
//! encoder block, LoRA on the attention query and value maps, and a linear
//! probe on the last encoder layer. The stub's own weights stay frozen in
//! all three; only the inserted modules and the head train.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::foundation::{AttnTarget, EncoderHooks, StubModel};
use crate::hingenet::{build_head, head_forward};
use crate::model::{BeatModel, HeadOutput, MethodKind, ModelInput};
use crate::rng::{rng_for, STREAM_ADAPTER, STREAM_LORA};
use crate::tensorcore::{Graph, ParamId, ParamStore, Shape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    #[default]
    Adapter,
    Lora,
    LinearProbe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub bottleneck: usize,
    pub rank: usize,
    pub lora_alpha: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            kind: BaselineKind::Adapter,
            bottleneck: 16,
            rank: 4,
            lora_alpha: 8.0,
        }
    }
}

fn last_layer_forward(
    g: &mut Graph,
    stub: &StubModel,
    input: &ModelInput<'_>,
    hooks: &dyn EncoderHooks,
) -> Result<Var> {
    match input {
        ModelInput::Raw { features, .. } => {
            let x = g.constant((*features).clone());
            let outs = stub.forward_graph(g, x, hooks)?;
            Ok(*outs.last().expect("stub has layers"))
        }
        ModelInput::Stack(_) => Err(Error::invalid(
            "insertion baselines modify the encoder and need raw input features",
        )),
    }
}

// ---------------------------------------------------------------------------
// Adapter

#[derive(Debug, Clone)]
struct AdapterLayer {
    down_w: ParamId,
    down_b: ParamId,
    up_w: ParamId,
    up_b: ParamId,
}

/// Residual bottleneck after each encoder block:
/// `h + up(relu(down(h)))`, with `up` zero-initialised.
#[derive(Debug, Clone)]
pub struct AdapterModel {
    stub: Arc<StubModel>,
    config: BaselineConfig,
    seed: u64,
    params: ParamStore,
    layers: Vec<AdapterLayer>,
    head: (ParamId, ParamId),
}

pub fn attach_adapter(stub: Arc<StubModel>, config: BaselineConfig, seed: u64) -> Result<AdapterModel> {
    AdapterModel::new(stub, config, seed)
}

impl AdapterModel {
    pub fn new(stub: Arc<StubModel>, config: BaselineConfig, seed: u64) -> Result<Self> {
        if config.bottleneck == 0 {
            return Err(Error::Config("adapter bottleneck must be positive".into()));
        }
        let h = stub.hidden();
        let bn = config.bottleneck;
        let bound = 1.0 / (h as f64).sqrt();
        let mut rng = rng_for(seed, &[STREAM_ADAPTER]);
        let mut params = ParamStore::new();
        let layers = (0..stub.n_layers())
            .map(|i| AdapterLayer {
                down_w: params.add(format!("adapter{i}.down.w"), Tensor::uniform(Shape::new(1, bn, h), bound, &mut rng), true),
                down_b: params.add(format!("adapter{i}.down.b"), Tensor::uniform(Shape::new(1, bn, 1), bound, &mut rng), true),
                up_w: params.add(format!("adapter{i}.up.w"), Tensor::zeros(Shape::new(1, h, bn)), true),
                up_b: params.add(format!("adapter{i}.up.b"), Tensor::zeros(Shape::new(1, h, 1)), true),
            })
            .collect();
        let head = build_head(&mut params, seed, h);
        Ok(AdapterModel {
            stub,
            config: BaselineConfig {
                kind: BaselineKind::Adapter,
                ..config
            },
            seed,
            params,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub(crate) fn stub_ref(&self) -> &StubModel {
        &self.stub
    }
}

impl EncoderHooks for AdapterModel {
    fn after_block(&self, g: &mut Graph, layer: usize, h: Var) -> Result<Var> {
        let l = &self.layers[layer];
        let (dw, db) = (g.param(&self.params, l.down_w), g.param(&self.params, l.down_b));
        let d = g.linear(h, dw, Some(db))?;
        let d = g.relu(d);
        let (uw, ub) = (g.param(&self.params, l.up_w), g.param(&self.params, l.up_b));
        let u = g.linear(d, uw, Some(ub))?;
        g.add(h, u)
    }
}

impl BeatModel for AdapterModel {
    fn kind(&self) -> MethodKind {
        MethodKind::Adapter
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn stub(&self) -> Option<&Arc<StubModel>> {
        Some(&self.stub)
    }

    fn reads_stub_features(&self) -> bool {
        false
    }

    fn forward(&self, g: &mut Graph, input: &ModelInput<'_>) -> Result<HeadOutput> {
        let last = last_layer_forward(g, &self.stub, input, self)?;
        head_forward(g, &self.params, self.head, last)
    }
}

// ---------------------------------------------------------------------------
// LoRA

#[derive(Debug, Clone)]
struct LoraPair {
    a: ParamId,
    b: ParamId,
}

/// Low-rank updates `(alpha / rank) * B * A` on the query and value maps of
/// every attention block; `A` is seeded, `B` starts at zero.
#[derive(Debug, Clone)]
pub struct LoraModel {
    stub: Arc<StubModel>,
    config: BaselineConfig,
    seed: u64,
    params: ParamStore,
    layers: Vec<(LoraPair, LoraPair)>,
    head: (ParamId, ParamId),
}

pub fn attach_lora(stub: Arc<StubModel>, config: BaselineConfig, seed: u64) -> Result<LoraModel> {
    LoraModel::new(stub, config, seed)
}

impl LoraModel {
    pub fn new(stub: Arc<StubModel>, config: BaselineConfig, seed: u64) -> Result<Self> {
        let h = stub.hidden();
        if config.rank == 0 || config.rank > h {
            return Err(Error::invalid(format!(
                "LoRA rank {} must be in 1..={h}",
                config.rank
            )));
        }
        let r = config.rank;
        let bound = 1.0 / (h as f64).sqrt();
        let mut rng = rng_for(seed, &[STREAM_LORA]);
        let mut params = ParamStore::new();
        let mut pair = |params: &mut ParamStore, name: String| LoraPair {
            a: params.add(format!("{name}.a"), Tensor::uniform(Shape::new(1, r, h), bound, &mut rng), true),
            b: params.add(format!("{name}.b"), Tensor::zeros(Shape::new(1, h, r)), true),
        };
        let layers = (0..stub.n_layers())
            .map(|i| (pair(&mut params, format!("lora{i}.q")), pair(&mut params, format!("lora{i}.v"))))
            .collect();
        let head = build_head(&mut params, seed, h);
        Ok(LoraModel {
            stub,
            config: BaselineConfig {
                kind: BaselineKind::Lora,
                ..config
            },
            seed,
            params,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scale(&self) -> f64 {
        self.config.lora_alpha / self.config.rank as f64
    }

    pub(crate) fn stub_ref(&self) -> &StubModel {
        &self.stub
    }
}

impl EncoderHooks for LoraModel {
    fn attention_delta(&self, g: &mut Graph, layer: usize, target: AttnTarget, x: Var) -> Result<Option<Var>> {
        let (q, v) = &self.layers[layer];
        let pair = match target {
            AttnTarget::Query => q,
            AttnTarget::Value => v,
            AttnTarget::Key => return Ok(None),
        };
        let a = g.param(&self.params, pair.a);
        let b = g.param(&self.params, pair.b);
        let low = g.linear(x, a, None)?;
        let up = g.linear(low, b, None)?;
        g.add_scaled(up, up, self.scale(), 0.0).map(Some)
    }
}

impl BeatModel for LoraModel {
    fn kind(&self) -> MethodKind {
        MethodKind::Lora
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn stub(&self) -> Option<&Arc<StubModel>> {
        Some(&self.stub)
    }

    fn reads_stub_features(&self) -> bool {
        false
    }

    fn forward(&self, g: &mut Graph, input: &ModelInput<'_>) -> Result<HeadOutput> {
        let last = last_layer_forward(g, &self.stub, input, self)?;
        head_forward(g, &self.params, self.head, last)
    }
}

// ---------------------------------------------------------------------------
// Linear probe

/// Head on the last encoder layer only.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    stub: Arc<StubModel>,
    seed: u64,
    params: ParamStore,
    head: (ParamId, ParamId),
}

pub fn linear_probe(stub: Arc<StubModel>, seed: u64) -> LinearProbe {
    LinearProbe::new(stub, seed)
}

impl LinearProbe {
    pub fn new(stub: Arc<StubModel>, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let head = build_head(&mut params, seed, stub.hidden());
        LinearProbe {
            stub,
            seed,
            params,
            head,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub(crate) fn stub_ref(&self) -> &StubModel {
        &self.stub
    }
}

impl BeatModel for LinearProbe {
    fn kind(&self) -> MethodKind {
        MethodKind::LinearProbe
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn stub(&self) -> Option<&Arc<StubModel>> {
        Some(&self.stub)
    }

    fn reads_stub_features(&self) -> bool {
        true
    }

    fn forward(&self, g: &mut Graph, input: &ModelInput<'_>) -> Result<HeadOutput> {
        let last = match input {
            ModelInput::Stack(s) => s.layers().last().expect("non-empty stack").clone(),
            ModelInput::Raw { features, frame_rate } => {
                let stack = self.stub.forward_all(features, *frame_rate)?;
                stack.into_layers().pop().expect("non-empty stack")
            }
        };
        if last.shape().c != self.stub.hidden() {
            return Err(Error::invalid("linear probe input width does not match the stub"));
        }
        let x = g.constant(last);
        head_forward(g, &self.params, self.head, x)
    }
}
