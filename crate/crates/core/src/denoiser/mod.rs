//! The toy video denoiser `ε_θ(x_t, t, c)`.
//!
//! A U-shaped stack of transformer blocks over the `F·H·W` latent tokens:
//! encoder blocks, bottleneck blocks and decoder blocks, with every encoder
//! output added back at its paired decoder block. Each block runs
//! pre-norm attention (spatial then temporal, or a single full 3-D
//! attention) and a pre-norm MLP, all residual. Timestep and prompt
//! embeddings are added to every token at the input.

pub mod data;
mod decode;
mod embed;
pub mod train;
mod weights;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

pub use decode::{LatentDecoder, UPSAMPLE};
pub use embed::{embed_prompt, timestep_features, Condition};

use crate::adapt::registry::Registry;
use crate::attention::{
    attend, gather_block, latent_to_tokens, scatter_block, tokens_to_latent, AttentionMode,
    AttentionOutput, AttentionWeights, VideoDims,
};
use crate::error::{shape_err, Error, Result};
use crate::numcore::{gaussian, SeededRng, Tensor};

pub const LN_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Topology {
    /// Spatial then temporal attention in every block.
    Factorized,
    /// One attention over all `F·H·W` tokens per block.
    Full3d,
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "factorized" => Ok(Self::Factorized),
            "full3d" => Ok(Self::Full3d),
            other => Err(Error::Config(format!("unknown topology `{other}`"))),
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Factorized => "factorized",
            Self::Full3d => "full3d",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub frames: usize,
    /// Latent channels, also the token width `D`.
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub encoder_blocks: usize,
    pub bottleneck_blocks: usize,
    pub decoder_blocks: usize,
    pub heads: usize,
    pub topology: Topology,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            channels: 16,
            height: 8,
            width: 8,
            encoder_blocks: 2,
            bottleneck_blocks: 1,
            decoder_blocks: 2,
            heads: 1,
            topology: Topology::Factorized,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// `F = 2, D = 4, H = W = 2`, for gradient checks.
    pub fn tiny(seed: u64) -> Self {
        Self {
            frames: 2,
            channels: 4,
            height: 2,
            width: 2,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames < 2 || self.height < 2 || self.width < 2 {
            return bad(format!(
                "frames, height and width must be >= 2, got {}x{}x{}",
                self.frames, self.height, self.width
            ));
        }
        if self.channels == 0 || self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return bad(format!(
                "{} heads do not divide {} channels",
                self.heads, self.channels
            ));
        }
        let (e, d) = (self.encoder_blocks, self.decoder_blocks);
        if !(d == e || d + 1 == e) {
            return bad(format!(
                "decoder blocks ({d}) must equal encoder blocks ({e}) or one fewer"
            ));
        }
        if e + self.bottleneck_blocks + d == 0 {
            return bad("model needs at least one block".into());
        }
        Ok(())
    }

    pub fn video_dims(&self) -> VideoDims {
        VideoDims {
            frames: self.frames,
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }

    pub fn latent_dims(&self) -> [usize; 4] {
        self.video_dims().as_array()
    }

    pub fn n_blocks(&self) -> usize {
        self.encoder_blocks + self.bottleneck_blocks + self.decoder_blocks
    }

    pub fn block_modes(&self) -> &'static [AttentionMode] {
        match self.topology {
            Topology::Factorized => &[AttentionMode::Spatial, AttentionMode::Temporal],
            Topology::Full3d => &[AttentionMode::Full3d],
        }
    }

    /// Attention layers in forward order.
    pub fn n_layers(&self) -> usize {
        self.n_blocks() * self.block_modes().len()
    }

    pub fn stage_of_block(&self, block: usize) -> Stage {
        if block < self.encoder_blocks {
            Stage::Encoder
        } else if block < self.encoder_blocks + self.bottleneck_blocks {
            Stage::Bottleneck
        } else {
            Stage::Decoder
        }
    }

    /// Encoder block whose output is added before decoder block `j`
    /// (counted within the decoder): the outermost encoder pairs with the
    /// last decoder.
    pub fn skip_source(&self, j: usize) -> usize {
        self.decoder_blocks - 1 - j
    }

    /// Key/value lines, see [`ModelConfig::from_kv`].
    pub fn to_kv(&self) -> String {
        format!(
            "frames={}\nchannels={}\nheight={}\nwidth={}\nencoder_blocks={}\nbottleneck_blocks={}\ndecoder_blocks={}\nheads={}\ntopology={}\nseed={}\n",
            self.frames,
            self.channels,
            self.height,
            self.width,
            self.encoder_blocks,
            self.bottleneck_blocks,
            self.decoder_blocks,
            self.heads,
            self.topology,
            self.seed
        )
    }

    /// Applies `key=value` overrides on top of `self`.
    pub fn apply_kv<'a>(
        mut self,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for {k}")))
        }
        for (k, v) in pairs {
            match k {
                "frames" => self.frames = num(k, v)?,
                "channels" => self.channels = num(k, v)?,
                "height" => self.height = num(k, v)?,
                "width" => self.width = num(k, v)?,
                "encoder_blocks" => self.encoder_blocks = num(k, v)?,
                "bottleneck_blocks" => self.bottleneck_blocks = num(k, v)?,
                "decoder_blocks" => self.decoder_blocks = num(k, v)?,
                "heads" => self.heads = num(k, v)?,
                "topology" => self.topology = v.parse()?,
                "seed" => self.seed = num(k, v)?,
                _ => {}
            }
        }
        Ok(self)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        Self::default().apply_kv(
            crate::harness::config::parse_kv(text)?
                .iter()
                .map(|(k, v)| (k.as_str(), v.as_str())),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Encoder,
    Bottleneck,
    Decoder,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Encoder => "encoder",
            Self::Bottleneck => "bottleneck",
            Self::Decoder => "decoder",
        }
    }
}

/// Where an attention layer sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    pub index: usize,
    pub block: usize,
    pub stage: Stage,
    pub mode: AttentionMode,
    pub n_tokens: usize,
}

/// Affine layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl Norm {
    fn new(d: usize) -> Self {
        Self {
            gamma: Tensor::full([d], 1.0),
            beta: Tensor::zeros([d]),
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.layer_norm(LN_EPS)?;
        let (g, b) = (self.gamma.data(), self.beta.data());
        let d = g.len();
        for row in y.data_mut().chunks_mut(d) {
            for ((v, &g), &b) in row.iter_mut().zip(g).zip(b) {
                *v = *v * g + b;
            }
        }
        Ok(y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    /// `[D × 4D]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[4D × D]`
    pub w2: Tensor,
    pub b2: Tensor,
}

pub(crate) fn silu(z: f32) -> f32 {
    z / (1.0 + (-z).exp())
}

fn add_bias(x: &mut Tensor, b: &Tensor) {
    let d = b.len();
    for row in x.data_mut().chunks_mut(d) {
        for (v, &b) in row.iter_mut().zip(b.data()) {
            *v += b;
        }
    }
}

impl Mlp {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = x.matmul(&self.w1)?;
        add_bias(&mut z, &self.b1);
        let a = z.map(silu)?;
        let mut y = a.matmul(&self.w2)?;
        add_bias(&mut y, &self.b2);
        Ok(y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSublayer {
    pub mode: AttentionMode,
    pub norm: Norm,
    pub weights: AttentionWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attns: Vec<AttentionSublayer>,
    pub mlp_norm: Norm,
    pub mlp: Mlp,
}

/// A noisy video latent at timestep `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoLatent {
    pub x: Tensor,
    pub t: usize,
}

/// The denoiser. Immutable during forward passes; all per-run state lives
/// in the [`Registry`] passed in.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyVdm {
    config: ModelConfig,
    /// `[D × D]` projection of the sinusoidal timestep features.
    pub time_proj: Tensor,
    /// `[D × D]` projection of the prompt embedding.
    pub cond_proj: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Norm,
    pub final_proj: Tensor,
    pub final_bias: Tensor,
    pub decoder: LatentDecoder,
    layers: Vec<LayerInfo>,
}

fn scaled(seed: u64, label: &str, dims: [usize; 2], std: f32) -> Result<Tensor> {
    gaussian(&mut SeededRng::substream(seed, label), dims).scale(std)
}

impl ToyVdm {
    /// Seeded scaled-Gaussian init (std `1/√fan_in`); norms start at
    /// `γ = 1, β = 0` and biases at zero.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.channels;
        let seed = config.seed;
        let std = 1.0 / (d as f32).sqrt();
        let mut blocks = Vec::with_capacity(config.n_blocks());
        for b in 0..config.n_blocks() {
            let attns = config
                .block_modes()
                .iter()
                .map(|&mode| {
                    Ok(AttentionSublayer {
                        mode,
                        norm: Norm::new(d),
                        weights: AttentionWeights::seeded(
                            seed,
                            &format!("block{b}.attn_{mode}"),
                            d,
                            config.heads,
                        )?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mlp = Mlp {
                w1: scaled(seed, &format!("block{b}.mlp.w1"), [d, 4 * d], std)?,
                b1: Tensor::zeros([4 * d]),
                w2: scaled(seed, &format!("block{b}.mlp.w2"), [4 * d, d], 0.5 * std)?,
                b2: Tensor::zeros([d]),
            };
            blocks.push(Block {
                attns,
                mlp_norm: Norm::new(d),
                mlp,
            });
        }
        let decoder = LatentDecoder::seeded(seed, d)?;
        let mut model = Self {
            time_proj: scaled(seed, "time_proj", [d, d], std)?,
            cond_proj: scaled(seed, "cond_proj", [d, d], std)?,
            blocks,
            final_norm: Norm::new(d),
            final_proj: scaled(seed, "final_proj", [d, d], std)?,
            final_bias: Tensor::zeros([d]),
            decoder,
            layers: Vec::new(),
            config,
        };
        model.layers = model.enumerate_layers();
        Ok(model)
    }

    fn enumerate_layers(&self) -> Vec<LayerInfo> {
        let v = self.config.video_dims();
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            for a in &block.attns {
                out.push(LayerInfo {
                    index: out.len(),
                    block: b,
                    stage: self.config.stage_of_block(b),
                    mode: a.mode,
                    n_tokens: v.block_tokens(a.mode),
                });
            }
        }
        out
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    /// A registry sized for this model.
    pub fn registry(&self) -> Registry {
        Registry::new(self.n_layers())
    }

    pub fn embed_prompt(&self, text: &str) -> Condition {
        embed_prompt(text, self.config.channels)
    }

    pub fn null_condition(&self) -> Condition {
        Condition::null(self.config.channels)
    }

    fn input_embedding(&self, t: usize, cond: &Condition) -> Result<Tensor> {
        let d = self.config.channels;
        if cond.dim() != d {
            return shape_err(format!("condition has width {}, model {d}", cond.dim()));
        }
        let feats: Vec<f32> = timestep_features(t, d)
            .into_iter()
            .map(|v| v as f32)
            .collect();
        let temb = Tensor::new([1, d], feats)?.matmul(&self.time_proj)?;
        let cemb = cond
            .embedding()
            .clone()
            .reshape([1, d])?
            .matmul(&self.cond_proj)?;
        temb.add(&cemb)
    }

    /// `ε_θ(x_t, t, c)` with no hooks.
    pub fn predict_noise_plain(&self, latent: &VideoLatent, cond: &Condition) -> Result<Tensor> {
        self.predict_noise(latent, cond, &mut self.registry())
    }

    /// `ε_θ(x_t, t, c)`. Every attention layer consults `registry` for its
    /// action and capture; captured maps and stats accumulate there.
    pub fn predict_noise(
        &self,
        latent: &VideoLatent,
        cond: &Condition,
        registry: &mut Registry,
    ) -> Result<Tensor> {
        let v = self.config.video_dims();
        if latent.x.dims() != v.as_array() {
            return shape_err(format!(
                "latent {:?} does not match model {:?}",
                latent.x.dims(),
                v.as_array()
            ));
        }
        if registry.n_layers() != self.n_layers() {
            return Err(Error::Registry(format!(
                "registry sized for {} layers, model has {}",
                registry.n_layers(),
                self.n_layers()
            )));
        }
        let t = latent.t;
        let mut h = latent_to_tokens(&latent.x)?;
        let emb = self.input_embedding(t, cond)?;
        add_bias(&mut h, &emb.reshape([self.config.channels])?);

        let enc = self.config.encoder_blocks;
        let dec_start = enc + self.config.bottleneck_blocks;
        let mut skips = Vec::with_capacity(enc);
        let mut layer = 0;
        for (b, block) in self.blocks.iter().enumerate() {
            if b >= dec_start {
                let src = self.config.skip_source(b - dec_start);
                h.add_assign(&skips[src])?;
            }
            for sub in &block.attns {
                let n = sub.norm.apply(&h)?;
                let out = self.attention_layer(layer, sub, &n, t, v, registry)?;
                h.add_assign(&out)?;
                layer += 1;
            }
            let n = block.mlp_norm.apply(&h)?;
            h.add_assign(&block.mlp.forward(&n)?)?;
            if b < enc {
                skips.push(h.clone());
            }
        }
        let mut eps = self.final_norm.apply(&h)?.matmul(&self.final_proj)?;
        add_bias(&mut eps, &self.final_bias);
        tokens_to_latent(&eps, v)
    }

    fn attention_layer(
        &self,
        layer: usize,
        sub: &AttentionSublayer,
        tokens: &Tensor,
        t: usize,
        v: VideoDims,
        registry: &mut Registry,
    ) -> Result<Tensor> {
        let mode = sub.mode;
        let plan = registry.layer_plan(layer);
        let reg: &Registry = registry;
        let outputs: Vec<AttentionOutput> = (0..v.block_count(mode))
            .into_par_iter()
            .map(|b| {
                let x = gather_block(tokens, v, mode, b);
                let treatment = reg.treatment(&plan, layer, t, b)?;
                attend(&x, &sub.weights, mode, &treatment)
            })
            .collect::<Result<_>>()?;
        let mut out = Tensor::zeros(tokens.dims().to_vec());
        for (b, o) in outputs.iter().enumerate() {
            scatter_block(&mut out, v, mode, b, &o.out);
        }
        if !plan.is_noop() {
            registry.observe(&plan, layer, mode, t, outputs)?;
        }
        Ok(out)
    }

    /// Latent to pixels through the fixed projection, see [`LatentDecoder`].
    pub fn decode(&self, x0: &Tensor) -> Result<Tensor> {
        self.decoder.decode(x0)
    }

    /// All trainable parameters with stable names, in a fixed order.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("time_proj".into(), &self.time_proj),
            ("cond_proj".into(), &self.cond_proj),
        ];
        for (b, block) in self.blocks.iter().enumerate() {
            for a in &block.attns {
                let p = format!("block{b}.attn_{}", a.mode);
                out.push((format!("{p}.norm.gamma"), &a.norm.gamma));
                out.push((format!("{p}.norm.beta"), &a.norm.beta));
                for (name, t) in a.weights.tensors() {
                    out.push((format!("{p}.{name}"), t));
                }
            }
            out.push((format!("block{b}.mlp.norm.gamma"), &block.mlp_norm.gamma));
            out.push((format!("block{b}.mlp.norm.beta"), &block.mlp_norm.beta));
            out.push((format!("block{b}.mlp.w1"), &block.mlp.w1));
            out.push((format!("block{b}.mlp.b1"), &block.mlp.b1));
            out.push((format!("block{b}.mlp.w2"), &block.mlp.w2));
            out.push((format!("block{b}.mlp.b2"), &block.mlp.b2));
        }
        out.push(("final.norm.gamma".into(), &self.final_norm.gamma));
        out.push(("final.norm.beta".into(), &self.final_norm.beta));
        out.push(("final.proj".into(), &self.final_proj));
        out.push(("final.bias".into(), &self.final_bias));
        out
    }

    pub fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("time_proj".into(), &mut self.time_proj),
            ("cond_proj".into(), &mut self.cond_proj),
        ];
        for (b, block) in self.blocks.iter_mut().enumerate() {
            for a in &mut block.attns {
                let p = format!("block{b}.attn_{}", a.mode);
                out.push((format!("{p}.norm.gamma"), &mut a.norm.gamma));
                out.push((format!("{p}.norm.beta"), &mut a.norm.beta));
                for (name, t) in a.weights.tensors_mut() {
                    out.push((format!("{p}.{name}"), t));
                }
            }
            out.push((
                format!("block{b}.mlp.norm.gamma"),
                &mut block.mlp_norm.gamma,
            ));
            out.push((format!("block{b}.mlp.norm.beta"), &mut block.mlp_norm.beta));
            out.push((format!("block{b}.mlp.w1"), &mut block.mlp.w1));
            out.push((format!("block{b}.mlp.b1"), &mut block.mlp.b1));
            out.push((format!("block{b}.mlp.w2"), &mut block.mlp.w2));
            out.push((format!("block{b}.mlp.b2"), &mut block.mlp.b2));
        }
        out.push(("final.norm.gamma".into(), &mut self.final_norm.gamma));
        out.push(("final.norm.beta".into(), &mut self.final_norm.beta));
        out.push(("final.proj".into(), &mut self.final_proj));
        out.push(("final.bias".into(), &mut self.final_bias));
        out
    }

    /// Zeroes every parameter, including norm gains, and sets the output
    /// bias: `ε_θ ≡ bias` for every input.
    pub fn make_constant(&mut self, bias: &Tensor) -> Result<()> {
        if bias.dims() != [self.config.channels] {
            return shape_err(format!("bias must be [{}]", self.config.channels));
        }
        for (_, t) in self.named_parameters_mut() {
            t.data_mut().fill(0.0);
        }
        self.final_bias = bias.clone();
        Ok(())
    }
}
