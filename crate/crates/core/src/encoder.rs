//! The three social-temporal attention networks: a context encoder over past
//! trajectories and neighbors, a future encoder with cross-attention to the
//! context features, and a decoder that maps quantized latents back to
//! coordinates jointly over the scene.
//!
//! Each network alternates temporal self-attention (over an agent's own
//! steps), optional cross-attention (future queries against that agent's
//! context features), social attention (over all agents at the same step)
//! and a feedforward sublayer, all pre-norm residual.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FeedForward, HasParams, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Latent width D.
    pub d_model: usize,
    pub heads: usize,
    /// Blocks per network.
    pub depth: usize,
    pub feedforward: usize,
    /// Social attention across agents; disabled makes every agent independent.
    pub social: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            heads: 4,
            depth: 2,
            feedforward: 128,
            social: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.depth == 0 || self.heads == 0 {
            return Err(Error::Config("encoder: dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "encoder: d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

struct AttnSublayer {
    norm: LayerNorm,
    attn: MultiHeadAttention,
}

impl AttnSublayer {
    fn new(cfg: &EncoderConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        Ok(AttnSublayer {
            norm: LayerNorm::new(cfg.d_model),
            attn: MultiHeadAttention::new(cfg.d_model, cfg.heads, rng)?,
        })
    }
}

impl HasParams for AttnSublayer {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.norm.for_each_param(&format!("{prefix}.norm"), f);
        self.attn.for_each_param(&format!("{prefix}.attn"), f);
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.norm.for_each_param_mut(&format!("{prefix}.norm"), f);
        self.attn.for_each_param_mut(&format!("{prefix}.attn"), f);
    }
}

struct CrossSublayer {
    norm_q: LayerNorm,
    norm_kv: LayerNorm,
    attn: MultiHeadAttention,
}

impl CrossSublayer {
    fn new(cfg: &EncoderConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        Ok(CrossSublayer {
            norm_q: LayerNorm::new(cfg.d_model),
            norm_kv: LayerNorm::new(cfg.d_model),
            attn: MultiHeadAttention::new(cfg.d_model, cfg.heads, rng)?,
        })
    }
}

impl HasParams for CrossSublayer {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.norm_q.for_each_param(&format!("{prefix}.norm_q"), f);
        self.norm_kv.for_each_param(&format!("{prefix}.norm_kv"), f);
        self.attn.for_each_param(&format!("{prefix}.attn"), f);
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.norm_q
            .for_each_param_mut(&format!("{prefix}.norm_q"), f);
        self.norm_kv
            .for_each_param_mut(&format!("{prefix}.norm_kv"), f);
        self.attn.for_each_param_mut(&format!("{prefix}.attn"), f);
    }
}

struct FfSublayer {
    norm: LayerNorm,
    ff: FeedForward,
}

impl FfSublayer {
    fn new(cfg: &EncoderConfig, rng: &mut ChaCha12Rng) -> Self {
        FfSublayer {
            norm: LayerNorm::new(cfg.d_model),
            ff: FeedForward::new(cfg.d_model, cfg.feedforward, rng),
        }
    }
}

impl HasParams for FfSublayer {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.norm.for_each_param(&format!("{prefix}.norm"), f);
        self.ff.for_each_param(&format!("{prefix}.ff"), f);
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.norm.for_each_param_mut(&format!("{prefix}.norm"), f);
        self.ff.for_each_param_mut(&format!("{prefix}.ff"), f);
    }
}

struct Block {
    temporal: AttnSublayer,
    cross: Option<CrossSublayer>,
    social: AttnSublayer,
    ff: FfSublayer,
}

impl Block {
    fn new(cfg: &EncoderConfig, with_cross: bool, rng: &mut ChaCha12Rng) -> Result<Self> {
        Ok(Block {
            temporal: AttnSublayer::new(cfg, rng)?,
            cross: if with_cross {
                Some(CrossSublayer::new(cfg, rng)?)
            } else {
                None
            },
            social: AttnSublayer::new(cfg, rng)?,
            ff: FfSublayer::new(cfg, rng),
        })
    }
}

impl HasParams for Block {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.temporal
            .for_each_param(&format!("{prefix}.temporal"), f);
        if let Some(cross) = &self.cross {
            cross.for_each_param(&format!("{prefix}.cross"), f);
        }
        self.social.for_each_param(&format!("{prefix}.social"), f);
        self.ff.for_each_param(&format!("{prefix}.ff"), f);
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.temporal
            .for_each_param_mut(&format!("{prefix}.temporal"), f);
        if let Some(cross) = &mut self.cross {
            cross.for_each_param_mut(&format!("{prefix}.cross"), f);
        }
        self.social
            .for_each_param_mut(&format!("{prefix}.social"), f);
        self.ff.for_each_param_mut(&format!("{prefix}.ff"), f);
    }
}

/// Mix agents at the same timestep through one attention sublayer.
/// Permutation-equivariant over agents: no agent-index encoding exists.
fn social_mix(layer: &AttnSublayer, xs: &[Tensor]) -> Result<Vec<Tensor>> {
    let n = xs.len();
    let steps = xs[0].rows();
    let normed: Vec<Tensor> = xs
        .iter()
        .map(|x| layer.norm.forward(x))
        .collect::<Result<_>>()?;
    let mut per_step = Vec::with_capacity(steps);
    for t in 0..steps {
        let rows: Vec<Tensor> = normed
            .iter()
            .map(|x| x.narrow_rows(t, 1))
            .collect::<Result<_>>()?;
        let stacked = Tensor::cat_rows(&rows)?;
        per_step.push(layer.attn.forward(&stacked, &stacked)?);
    }
    let mut out = Vec::with_capacity(n);
    for (i, x) in xs.iter().enumerate() {
        let rows: Vec<Tensor> = per_step
            .iter()
            .map(|s| s.narrow_rows(i, 1))
            .collect::<Result<_>>()?;
        out.push(x.add(&Tensor::cat_rows(&rows)?)?);
    }
    Ok(out)
}

/// Shared trunk: input projection, learned per-step position embeddings, a
/// stack of social-temporal blocks and a final norm. One stream per agent.
pub struct SocialTemporalNet {
    input: Linear,
    positions: Tensor,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    social: bool,
}

impl SocialTemporalNet {
    pub fn new(
        cfg: &EncoderConfig,
        input_dim: usize,
        seq_len: usize,
        with_cross: bool,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let input = Linear::new(input_dim, cfg.d_model, rng);
        let positions = crate::nn::init_weight(cfg.d_model, seq_len, cfg.d_model, rng);
        let blocks = (0..cfg.depth)
            .map(|_| Block::new(cfg, with_cross, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(SocialTemporalNet {
            input,
            positions,
            blocks,
            final_norm: LayerNorm::new(cfg.d_model),
            social: cfg.social,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.positions.rows()
    }

    /// Run all agents of one scene jointly. `cross_ctx[i]` conditions agent
    /// i's stream via cross-attention; it must be present iff the network
    /// was built with cross sublayers.
    pub fn forward(&self, inputs: &[Tensor], cross_ctx: Option<&[Tensor]>) -> Result<Vec<Tensor>> {
        if inputs.is_empty() {
            return Err(Error::invalid("social_temporal", "no agents in scene"));
        }
        let mut xs = Vec::with_capacity(inputs.len());
        for input in inputs {
            if input.rows() != self.seq_len() {
                return Err(Error::invalid(
                    "social_temporal",
                    format!(
                        "sequence length {} does not match {}",
                        input.rows(),
                        self.seq_len()
                    ),
                ));
            }
            xs.push(self.input.forward(input)?.add(&self.positions)?);
        }
        for block in &self.blocks {
            for x in xs.iter_mut() {
                let normed = block.temporal.norm.forward(x)?;
                *x = x.add(&block.temporal.attn.forward(&normed, &normed)?)?;
            }
            if let Some(cross) = &block.cross {
                let ctx = cross_ctx.ok_or_else(|| {
                    Error::invalid("social_temporal", "cross-attention context missing")
                })?;
                if ctx.len() != xs.len() {
                    return Err(Error::invalid(
                        "social_temporal",
                        format!("{} context streams for {} agents", ctx.len(), xs.len()),
                    ));
                }
                for (x, c) in xs.iter_mut().zip(ctx.iter()) {
                    let q = cross.norm_q.forward(x)?;
                    let kv = cross.norm_kv.forward(c)?;
                    *x = x.add(&cross.attn.forward(&q, &kv)?)?;
                }
            }
            if self.social {
                xs = social_mix(&block.social, &xs)?;
            }
            for x in xs.iter_mut() {
                *x = x.add(&block.ff.ff.forward(&block.ff.norm.forward(x)?)?)?;
            }
        }
        for x in xs.iter_mut() {
            *x = self.final_norm.forward(x)?;
        }
        Ok(xs)
    }
}

impl HasParams for SocialTemporalNet {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.input.for_each_param(&format!("{prefix}.input"), f);
        f(&format!("{prefix}.positions"), &self.positions);
        for (i, b) in self.blocks.iter().enumerate() {
            b.for_each_param(&format!("{prefix}.block{i}"), f);
        }
        self.final_norm
            .for_each_param(&format!("{prefix}.final_norm"), f);
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.input.for_each_param_mut(&format!("{prefix}.input"), f);
        f(&format!("{prefix}.positions"), &mut self.positions);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_param_mut(&format!("{prefix}.block{i}"), f);
        }
        self.final_norm
            .for_each_param_mut(&format!("{prefix}.final_norm"), f);
    }
}

/// Context encoder: past coordinates + neighbors -> per-agent T_p x D features.
pub struct ContextEncoder {
    pub net: SocialTemporalNet,
}

impl ContextEncoder {
    pub fn new(cfg: &EncoderConfig, t_past: usize, rng: &mut ChaCha12Rng) -> Result<Self> {
        Ok(ContextEncoder {
            net: SocialTemporalNet::new(cfg, 2, t_past, false, rng)?,
        })
    }

    /// `pasts[i]` is agent i's T_p x 2 observed trajectory.
    pub fn forward(&self, pasts: &[Tensor]) -> Result<Vec<Tensor>> {
        self.net.forward(pasts, None)
    }
}

impl HasParams for ContextEncoder {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.net.for_each_param(prefix, f);
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.net.for_each_param_mut(prefix, f);
    }
}

/// Future encoder: future coordinates, neighbor futures and cross-attention
/// to the agent's own context features -> continuous latents T x D.
pub struct FutureEncoder {
    pub net: SocialTemporalNet,
}

impl FutureEncoder {
    pub fn new(cfg: &EncoderConfig, t_future: usize, rng: &mut ChaCha12Rng) -> Result<Self> {
        Ok(FutureEncoder {
            net: SocialTemporalNet::new(cfg, 2, t_future, true, rng)?,
        })
    }

    pub fn forward(&self, futures: &[Tensor], h_ctx: &[Tensor]) -> Result<Vec<Tensor>> {
        self.net.forward(futures, Some(h_ctx))
    }
}

impl HasParams for FutureEncoder {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.net.for_each_param(prefix, f);
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.net.for_each_param_mut(prefix, f);
    }
}

/// Decoder: quantized latents of the whole scene -> per-agent T x 2
/// coordinate sequences. The head emits per-step displacements that a
/// running sum turns into coordinates, so the output scale grows with the
/// horizon while the head itself stays near unit scale.
pub struct SceneDecoder {
    pub net: SocialTemporalNet,
    pub head: Linear,
}

impl SceneDecoder {
    pub fn new(
        cfg: &EncoderConfig,
        latent_width: usize,
        t_future: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        Ok(SceneDecoder {
            net: SocialTemporalNet::new(cfg, latent_width, t_future, false, rng)?,
            head: Linear::new(cfg.d_model, 2, rng),
        })
    }

    pub fn forward(&self, latents: &[Tensor]) -> Result<Vec<Tensor>> {
        self.net
            .forward(latents, None)?
            .iter()
            .map(|x| self.head.forward(x)?.cumsum_rows())
            .collect()
    }
}

impl HasParams for SceneDecoder {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.net.for_each_param(&format!("{prefix}.net"), f);
        self.head.for_each_param(&format!("{prefix}.head"), f);
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.net.for_each_param_mut(&format!("{prefix}.net"), f);
        self.head.for_each_param_mut(&format!("{prefix}.head"), f);
    }
}
