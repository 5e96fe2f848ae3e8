//! Frozen stand-in for a pretrained music foundation model.
//!
//! A time-axis convolutional stem followed by `n_layers` pre-layernorm
//! transformer blocks with seeded, immutable weights. Every block output is
//! exposed so downstream fine-tuning can read all intermediate layers.

mod hgft;

pub use hgft::{decode_features, encode_features, load_features, save_features, HGFT_MAGIC, HGFT_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, STREAM_STUB};
use crate::tensorcore::{Axis, Graph, ParamId, ParamStore, Shape, Tensor, Var};

pub const DEFAULT_FRAME_RATE: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StubConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub input_channels: usize,
    pub n_heads: usize,
    pub seed: u64,
}

impl Default for StubConfig {
    fn default() -> Self {
        StubConfig {
            n_layers: 4,
            hidden: 64,
            input_channels: 60,
            n_heads: 1,
            seed: 0,
        }
    }
}

impl StubConfig {
    pub fn mlp_hidden(&self) -> usize {
        4 * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.hidden == 0 || self.input_channels == 0 {
            return Err(Error::Config("stub n_layers, hidden and input_channels must be positive".into()));
        }
        if self.n_heads != 1 {
            return Err(Error::Config(format!(
                "stub supports a single attention head, got n_heads = {}",
                self.n_heads
            )));
        }
        if self.hidden % self.n_heads != 0 {
            return Err(Error::Config("hidden must be divisible by n_heads".into()));
        }
        Ok(())
    }
}

/// Per-layer encoder features `h_1 .. h_N`, each `(b, h, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatureStack {
    layers: Vec<Tensor>,
    pub frame_rate: f64,
}

impl LayerFeatureStack {
    pub fn new(layers: Vec<Tensor>, frame_rate: f64) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::invalid("feature stack must contain at least one layer"))?
            .shape();
        if layers.iter().any(|l| l.shape() != first) {
            return Err(Error::invalid("feature stack layers must share one shape"));
        }
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(Error::invalid(format!("frame rate must be positive, got {frame_rate}")));
        }
        Ok(LayerFeatureStack { layers, frame_rate })
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Tensor> {
        self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Shape shared by every layer.
    pub fn shape(&self) -> Shape {
        self.layers[0].shape()
    }

    pub fn slice_time(&self, lo: usize, hi: usize) -> Result<Self> {
        let layers = self.layers.iter().map(|l| l.slice_time(lo, hi)).collect::<Result<_>>()?;
        Ok(LayerFeatureStack {
            layers,
            frame_rate: self.frame_rate,
        })
    }
}

/// Which attention projection a hook is modifying.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnTarget {
    Query,
    Key,
    Value,
}

/// Extension points used by insertion-style fine-tuning (LoRA, Adapter).
///
/// The stub's own weights stay frozen; hooks add their own trainable terms
/// to the computation path.
pub trait EncoderHooks {
    /// Term added to an attention projection of the normalised block input.
    fn attention_delta(&self, _g: &mut Graph, _layer: usize, _target: AttnTarget, _x: Var) -> Result<Option<Var>> {
        Ok(None)
    }

    /// Transform applied to each block output before it is exposed and fed
    /// to the next block.
    fn after_block(&self, _g: &mut Graph, _layer: usize, h: Var) -> Result<Var> {
        Ok(h)
    }
}

/// Hooks that leave the stub unchanged.
pub struct NoHooks;

impl EncoderHooks for NoHooks {}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    ln1: (ParamId, ParamId),
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: (ParamId, ParamId),
    up: Linear,
    down: Linear,
}

/// The frozen stub. Immutable after construction and safe to share.
#[derive(Debug, Clone)]
pub struct StubModel {
    config: StubConfig,
    params: ParamStore,
    stem: Linear,
    blocks: Vec<Block>,
}

/// Build a stub with seeded `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights;
/// layernorm gains start at 1 and shifts at 0. All parameters are frozen.
pub fn build_stub(config: StubConfig) -> Result<StubModel> {
    config.validate()?;
    let mut rng = rng_for(config.seed, &[STREAM_STUB]);
    let mut params = ParamStore::new();
    let h = config.hidden;
    let mut lin = |params: &mut ParamStore, name: &str, out: usize, fan_in: usize, shape: Shape| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = params.add(format!("{name}.w"), Tensor::uniform(shape, bound, &mut rng), false);
        let b = params.add(format!("{name}.b"), Tensor::uniform(Shape::new(1, out, 1), bound, &mut rng), false);
        Linear { w, b }
    };
    let stem = lin(
        &mut params,
        "stem",
        h,
        config.input_channels * 3,
        Shape::new(h, config.input_channels, 3),
    );
    let mut blocks = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let p = format!("block{i}");
        let ln = |params: &mut ParamStore, name: &str| {
            (
                params.add(format!("{p}.{name}.gain"), Tensor::full(Shape::new(1, h, 1), 1.0), false),
                params.add(format!("{p}.{name}.shift"), Tensor::zeros(Shape::new(1, h, 1)), false),
            )
        };
        let ln1 = ln(&mut params, "ln1");
        let q = lin(&mut params, &format!("{p}.attn.q"), h, h, Shape::new(1, h, h));
        let k = lin(&mut params, &format!("{p}.attn.k"), h, h, Shape::new(1, h, h));
        let v = lin(&mut params, &format!("{p}.attn.v"), h, h, Shape::new(1, h, h));
        let o = lin(&mut params, &format!("{p}.attn.o"), h, h, Shape::new(1, h, h));
        let ln2 = ln(&mut params, "ln2");
        let m = config.mlp_hidden();
        let up = lin(&mut params, &format!("{p}.mlp.up"), m, h, Shape::new(1, m, h));
        let down = lin(&mut params, &format!("{p}.mlp.down"), h, m, Shape::new(1, h, m));
        blocks.push(Block {
            ln1,
            q,
            k,
            v,
            o,
            ln2,
            up,
            down,
        });
    }
    Ok(StubModel {
        config,
        params,
        stem,
        blocks,
    })
}

impl StubModel {
    pub fn config(&self) -> &StubConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    /// SHA-256 of every stub parameter.
    pub fn digest(&self) -> [u8; 32] {
        self.params.digest()
    }

    fn linear(&self, g: &mut Graph, x: Var, l: &Linear) -> Result<Var> {
        let w = g.param(&self.params, l.w);
        let b = g.param(&self.params, l.b);
        g.linear(x, w, Some(b))
    }

    fn projection(
        &self,
        g: &mut Graph,
        hooks: &dyn EncoderHooks,
        layer: usize,
        target: AttnTarget,
        x: Var,
        l: &Linear,
    ) -> Result<Var> {
        let base = self.linear(g, x, l)?;
        match hooks.attention_delta(g, layer, target, x)? {
            Some(delta) => g.add(base, delta),
            None => Ok(base),
        }
    }

    /// Record the full forward pass on `g`; returns the `n_layers` block
    /// outputs.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, hooks: &dyn EncoderHooks) -> Result<Vec<Var>> {
        let xs = g.shape(x);
        if xs.c != self.config.input_channels {
            return Err(Error::invalid(format!(
                "stub expects {} input channels, got {}",
                self.config.input_channels, xs.c
            )));
        }
        let sw = g.param(&self.params, self.stem.w);
        let sb = g.param(&self.params, self.stem.b);
        let mut h = g.conv1d(x, sw, Some(sb), 1, Axis::Time)?;
        let scale = 1.0 / (self.config.hidden as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.blocks.len());
        for (i, blk) in self.blocks.iter().enumerate() {
            let (g1, s1) = (g.param(&self.params, blk.ln1.0), g.param(&self.params, blk.ln1.1));
            let a = g.layer_norm(h, g1, s1)?;
            let q = self.projection(g, hooks, i, AttnTarget::Query, a, &blk.q)?;
            let k = self.projection(g, hooks, i, AttnTarget::Key, a, &blk.k)?;
            let v = self.projection(g, hooks, i, AttnTarget::Value, a, &blk.v)?;
            // scores[b, query, key]
            let scores = g.matmul(q, k, true, false, scale)?;
            let attn = g.softmax(scores, Axis::Time);
            let ctx = g.matmul(v, attn, false, true, 1.0)?;
            let out = self.linear(g, ctx, &blk.o)?;
            let h1 = g.add(h, out)?;
            let (g2, s2) = (g.param(&self.params, blk.ln2.0), g.param(&self.params, blk.ln2.1));
            let m = g.layer_norm(h1, g2, s2)?;
            let up = self.linear(g, m, &blk.up)?;
            let up = g.relu(up);
            let down = self.linear(g, up, &blk.down)?;
            let h2 = g.add(h1, down)?;
            h = hooks.after_block(g, i, h2)?;
            outputs.push(h);
        }
        Ok(outputs)
    }

    /// Features of every encoder layer for input `x` of shape
    /// `(b, input_channels, t)`.
    pub fn forward_all(&self, x: &Tensor, frame_rate: f64) -> Result<LayerFeatureStack> {
        if !x.is_finite() {
            return Err(Error::invalid("stub input contains non-finite values"));
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let outs = self.forward_graph(&mut g, xv, &NoHooks)?;
        let layers = outs.into_iter().map(|v| g.value(v).clone()).collect();
        LayerFeatureStack::new(layers, frame_rate)
    }
}
