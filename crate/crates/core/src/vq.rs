//! The codebook family and quantization.
//!
//! Three interchangeable modes: a static codebook (row-normalized learnable
//! table), a full-rank conditioned codebook produced directly from context
//! features, and the low-rank adapted codebook where the per-instance update
//! is the product of two rank-r factors, one of them rewritten from context
//! by cross-attention. Quantization itself is the same for all modes:
//! nearest codeword under squared distance, ties to the lowest index, with
//! a straight-through estimator feeding the decoder.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_weight, HasParams, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookMode {
    Static,
    FullRank,
    LowRank,
}

impl std::str::FromStr for CodebookMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(CodebookMode::Static),
            "full_rank" => Ok(CodebookMode::FullRank),
            "low_rank" => Ok(CodebookMode::LowRank),
            other => Err(Error::Config(format!(
                "unknown codebook mode `{other}` (expected static | full_rank | low_rank)"
            ))),
        }
    }
}

impl std::fmt::Display for CodebookMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CodebookMode::Static => "static",
            CodebookMode::FullRank => "full_rank",
            CodebookMode::LowRank => "low_rank",
        };
        f.write_str(s)
    }
}

/// How the instance-update mix weight evolves over stage-one training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSchedule {
    /// Cosine ramp from 0 at the first step to 1 at the last.
    #[default]
    CosineRamp,
    /// Hold the configured `lambda_fixed` for the whole run.
    Fixed,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct VqConfig {
    pub mode: CodebookMode,
    /// Codeword count C.
    pub codewords: usize,
    /// Rank r of the instance update (low-rank mode).
    pub rank: usize,
    /// Optional reduced quantization width D_r; None quantizes at D.
    pub proj_dim: Option<usize>,
    /// Commitment loss weight.
    pub commitment_beta: f64,
    pub lambda_schedule: LambdaSchedule,
    /// Mix weight used when the schedule is `fixed`.
    pub lambda_fixed: f64,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig {
            mode: CodebookMode::LowRank,
            codewords: 16,
            rank: 8,
            proj_dim: None,
            commitment_beta: 0.25,
            lambda_schedule: LambdaSchedule::CosineRamp,
            lambda_fixed: 1.0,
        }
    }
}

impl VqConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.codewords < 2 {
            return Err(Error::Config("vq: need at least 2 codewords".into()));
        }
        let width = self.quant_width(d_model);
        if width == 0 || width > d_model {
            return Err(Error::Config(format!(
                "vq: projection width {width} must be in 1..={d_model}"
            )));
        }
        if self.mode == CodebookMode::LowRank && self.rank > width.min(self.codewords) {
            return Err(Error::Config(format!(
                "vq: rank {} exceeds min(width {}, codewords {})",
                self.rank, width, self.codewords
            )));
        }
        if self.commitment_beta < 0.0 {
            return Err(Error::Config(
                "vq: commitment weight must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn quant_width(&self, d_model: usize) -> usize {
        self.proj_dim.unwrap_or(d_model)
    }
}

/// Cross-attention transform rewriting the rank-r token matrix from context:
/// the r columns of B act as query tokens against h_ctx.
pub struct LowRankAdapter {
    /// Learnable token matrix B, stored transposed (r x width).
    pub b_tokens: Tensor,
    /// Rank-r mixing matrix A (r x C).
    pub a: Tensor,
    pub query_proj: Linear,
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub out_proj: Linear,
}

impl LowRankAdapter {
    fn new(
        width: usize,
        d_model: usize,
        heads: usize,
        rank: usize,
        codewords: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        Ok(LowRankAdapter {
            b_tokens: init_weight(width, rank, width, rng),
            a: init_weight(rank, rank, codewords, rng),
            query_proj: Linear::new(width, d_model, rng),
            norm_q: LayerNorm::new(d_model),
            norm_kv: LayerNorm::new(d_model),
            attn: MultiHeadAttention::new(d_model, heads, rng)?,
            out_proj: Linear::new(d_model, width, rng),
        })
    }

    /// Context-rewritten update: returns the C x width matrix (B_ctx A)ᵀ.
    pub fn conditioned_update(&self, h_ctx: &Tensor) -> Result<Tensor> {
        let q = self.query_proj.forward(&self.b_tokens)?; // r x d_model
        let mixed = self
            .attn
            .forward(&self.norm_q.forward(&q)?, &self.norm_kv.forward(h_ctx)?)?
            .add(&q)?;
        // b_ctx_t is B_ctxᵀ (r x width); (B_ctx A)ᵀ = Aᵀ B_ctxᵀ -> C x width.
        let b_ctx_t = self.out_proj.forward(&mixed)?;
        self.a.transpose()?.matmul(&b_ctx_t)
    }
}

impl HasParams for LowRankAdapter {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.b_tokens"), &self.b_tokens);
        f(&format!("{prefix}.a"), &self.a);
        self.query_proj
            .for_each_param(&format!("{prefix}.query_proj"), f);
        self.norm_q.for_each_param(&format!("{prefix}.norm_q"), f);
        self.norm_kv.for_each_param(&format!("{prefix}.norm_kv"), f);
        self.attn.for_each_param(&format!("{prefix}.attn"), f);
        self.out_proj
            .for_each_param(&format!("{prefix}.out_proj"), f);
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.b_tokens"), &mut self.b_tokens);
        f(&format!("{prefix}.a"), &mut self.a);
        self.query_proj
            .for_each_param_mut(&format!("{prefix}.query_proj"), f);
        self.norm_q
            .for_each_param_mut(&format!("{prefix}.norm_q"), f);
        self.norm_kv
            .for_each_param_mut(&format!("{prefix}.norm_kv"), f);
        self.attn.for_each_param_mut(&format!("{prefix}.attn"), f);
        self.out_proj
            .for_each_param_mut(&format!("{prefix}.out_proj"), f);
    }
}

/// Full-rank baseline: a learnable module emits all C x width entries
/// directly from context, with no shared static table.
pub struct FullRankNet {
    pub queries: Tensor,
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub out_proj: Linear,
}

impl FullRankNet {
    fn new(
        width: usize,
        d_model: usize,
        heads: usize,
        codewords: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        Ok(FullRankNet {
            queries: init_weight(d_model, codewords, d_model, rng),
            norm_q: LayerNorm::new(d_model),
            norm_kv: LayerNorm::new(d_model),
            attn: MultiHeadAttention::new(d_model, heads, rng)?,
            out_proj: Linear::new(d_model, width, rng),
        })
    }

    pub fn conditioned_codebook(&self, h_ctx: &Tensor) -> Result<Tensor> {
        let mixed = self
            .attn
            .forward(
                &self.norm_q.forward(&self.queries)?,
                &self.norm_kv.forward(h_ctx)?,
            )?
            .add(&self.queries)?;
        self.out_proj.forward(&mixed)
    }
}

impl HasParams for FullRankNet {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.queries"), &self.queries);
        self.norm_q.for_each_param(&format!("{prefix}.norm_q"), f);
        self.norm_kv.for_each_param(&format!("{prefix}.norm_kv"), f);
        self.attn.for_each_param(&format!("{prefix}.attn"), f);
        self.out_proj
            .for_each_param(&format!("{prefix}.out_proj"), f);
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.queries"), &mut self.queries);
        self.norm_q
            .for_each_param_mut(&format!("{prefix}.norm_q"), f);
        self.norm_kv
            .for_each_param_mut(&format!("{prefix}.norm_kv"), f);
        self.attn.for_each_param_mut(&format!("{prefix}.attn"), f);
        self.out_proj
            .for_each_param_mut(&format!("{prefix}.out_proj"), f);
    }
}

/// The complete quantization bottleneck in one of the three modes.
pub struct CodebookModule {
    pub mode: CodebookMode,
    /// Static table e (C x width); unused by the full-rank mode.
    pub table: Tensor,
    /// Optional projection from D down to the quantization width.
    pub proj_in: Option<Linear>,
    pub adapter: Option<LowRankAdapter>,
    pub full_rank: Option<FullRankNet>,
    pub codewords: usize,
    pub width: usize,
    pub commitment_beta: f64,
}

impl CodebookModule {
    pub fn new(
        cfg: &VqConfig,
        d_model: usize,
        heads: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        cfg.validate(d_model)?;
        let width = cfg.quant_width(d_model);
        let table = init_weight(width, cfg.codewords, width, rng);
        let proj_in = if width != d_model {
            Some(Linear::new(d_model, width, rng))
        } else {
            None
        };
        let adapter = if cfg.mode == CodebookMode::LowRank {
            Some(LowRankAdapter::new(
                width,
                d_model,
                heads,
                cfg.rank,
                cfg.codewords,
                rng,
            )?)
        } else {
            None
        };
        let full_rank = if cfg.mode == CodebookMode::FullRank {
            Some(FullRankNet::new(width, d_model, heads, cfg.codewords, rng)?)
        } else {
            None
        };
        Ok(CodebookModule {
            mode: cfg.mode,
            table,
            proj_in,
            adapter,
            full_rank,
            codewords: cfg.codewords,
            width,
            commitment_beta: cfg.commitment_beta,
        })
    }

    /// Project encoder latents to quantization width (identity when equal).
    pub fn project(&self, z: &Tensor) -> Result<Tensor> {
        match &self.proj_in {
            Some(p) => p.forward(z),
            None => Ok(z.clone()),
        }
    }

    /// The per-instance codebook e_c (C x width).
    ///
    /// static:    l2_norm(e)
    /// full_rank: module output, no static table
    /// low_rank:  l2_norm(e) + lambda * l2_norm((B_ctx A)ᵀ)
    pub fn conditioned_codebook(&self, h_ctx: Option<&Tensor>, lambda: f64) -> Result<Tensor> {
        match self.mode {
            CodebookMode::Static => self.table.l2_normalize_rows(),
            CodebookMode::FullRank => {
                let h = h_ctx.ok_or_else(|| {
                    Error::invalid("conditioned_codebook", "full-rank mode requires context")
                })?;
                self.full_rank
                    .as_ref()
                    .expect("full-rank module present")
                    .conditioned_codebook(h)
            }
            CodebookMode::LowRank => {
                let h = h_ctx.ok_or_else(|| {
                    Error::invalid("conditioned_codebook", "low-rank mode requires context")
                })?;
                let update = self
                    .adapter
                    .as_ref()
                    .expect("adapter present")
                    .conditioned_update(h)?;
                self.table
                    .l2_normalize_rows()?
                    .add(&update.l2_normalize_rows()?.scale(lambda)?)
            }
        }
    }
}

impl HasParams for CodebookModule {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.table"), &self.table);
        if let Some(p) = &self.proj_in {
            p.for_each_param(&format!("{prefix}.proj_in"), f);
        }
        if let Some(a) = &self.adapter {
            a.for_each_param(&format!("{prefix}.adapter"), f);
        }
        if let Some(n) = &self.full_rank {
            n.for_each_param(&format!("{prefix}.full_rank"), f);
        }
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.table"), &mut self.table);
        if let Some(p) = &mut self.proj_in {
            p.for_each_param_mut(&format!("{prefix}.proj_in"), f);
        }
        if let Some(a) = &mut self.adapter {
            a.for_each_param_mut(&format!("{prefix}.adapter"), f);
        }
        if let Some(n) = &mut self.full_rank {
            n.for_each_param_mut(&format!("{prefix}.full_rank"), f);
        }
    }
}

/// Nearest-codeword indices under squared euclidean distance.
/// Ties resolve to the lowest index.
pub fn nearest_indices(z: &[f64], codebook: &[f64], width: usize) -> Vec<usize> {
    debug_assert_eq!(codebook.len() % width, 0);
    let c = codebook.len() / width;
    z.chunks(width)
        .map(|row| {
            let mut best = 0usize;
            let mut best_dist = f64::INFINITY;
            for i in 0..c {
                let code = &codebook[i * width..(i + 1) * width];
                let dist: f64 = row
                    .iter()
                    .zip(code.iter())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
                if dist < best_dist {
                    best_dist = dist;
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// One agent's quantization outcome.
pub struct QuantizationResult {
    pub indices: Vec<usize>,
    /// Rows of the conditioned codebook, selected by index (graph node, so
    /// the embedding loss reaches the codebook parameters).
    pub z_q: Tensor,
    /// Straight-through latent handed to the decoder: forward equals z_q
    /// bit-for-bit, backward passes the decoder gradient to the encoder.
    pub straight_through: Tensor,
}

/// Quantize projected latents against a conditioned codebook.
pub fn quantize(z: &Tensor, codebook: &Tensor) -> Result<QuantizationResult> {
    let (_, zw) = z.expect_2d("quantize")?;
    let (_, cw) = codebook.expect_2d("quantize")?;
    if zw != cw {
        return Err(Error::ShapeMismatch {
            op: "quantize",
            lhs: z.shape().to_vec(),
            rhs: codebook.shape().to_vec(),
        });
    }
    let indices = nearest_indices(z.values(), codebook.values(), cw);
    let z_q = codebook.select_rows(&indices)?;
    let straight_through = Tensor::straight_through(z, &z_q)?;
    Ok(QuantizationResult {
        indices,
        z_q,
        straight_through,
    })
}

/// Separated terms of the stage-one objective for one instance.
pub struct FirstStageLoss {
    pub reconstruction: Tensor,
    pub embedding: Tensor,
    pub commitment: Tensor,
    pub total: Tensor,
}

/// reconstruction MSE + sum_t ||sg(z_t) - e_{c_t}||^2
/// + beta * sum_t ||z_t - sg(e_{c_t})||^2.
///
/// The stop-gradients route the embedding term to the codebook only and the
/// commitment term to the encoder only.
pub fn first_stage_loss(
    future: &Tensor,
    reconstruction: &Tensor,
    z: &Tensor,
    z_q: &Tensor,
    beta: f64,
) -> Result<FirstStageLoss> {
    let rec = reconstruction.mse(future)?;
    let embedding = z.detach().sum_squared_diff(z_q)?;
    let commitment = z.sum_squared_diff(&z_q.detach())?;
    let total = rec.add(&embedding)?.add(&commitment.scale(beta)?)?;
    Ok(FirstStageLoss {
        reconstruction: rec,
        embedding,
        commitment,
        total,
    })
}

/// Histogram of code usage plus perplexity exp(-sum p ln p).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UsageReport {
    pub counts: Vec<u64>,
    pub total: u64,
    pub perplexity: f64,
}

pub fn codebook_usage(indices: impl IntoIterator<Item = usize>, codewords: usize) -> UsageReport {
    let mut counts = vec![0u64; codewords];
    let mut total = 0u64;
    for i in indices {
        counts[i] += 1;
        total += 1;
    }
    let mut entropy = 0.0;
    if total > 0 {
        for &c in &counts {
            if c > 0 {
                let p = c as f64 / total as f64;
                entropy -= p * p.ln();
            }
        }
    }
    UsageReport {
        counts,
        total,
        perplexity: entropy.exp(),
    }
}

impl UsageReport {
    /// Delimited-text report: one `code,count,fraction` line per code.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("code,count,fraction\n");
        for (i, &c) in self.counts.iter().enumerate() {
            let frac = if self.total > 0 {
                c as f64 / self.total as f64
            } else {
                0.0
            };
            out.push_str(&format!("{i},{c},{frac}\n"));
        }
        out.push_str(&format!("# perplexity,{}\n", self.perplexity));
        out
    }
}
