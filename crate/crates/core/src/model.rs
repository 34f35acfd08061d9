//! Stage-one model: the three encoder/decoder networks plus the codebook
//! bottleneck, wired together over whole scenes.

use rand_chacha::ChaCha12Rng;

use crate::data::Scene;
use crate::encoder::{ContextEncoder, EncoderConfig, FutureEncoder, SceneDecoder};
use crate::error::Result;
use crate::nn::HasParams;
use crate::tensor::Tensor;
use crate::vq::{
    first_stage_loss, quantize, CodebookModule, FirstStageLoss, QuantizationResult, VqConfig,
};

pub fn coords_tensor(points: &[[f64; 2]]) -> Result<Tensor> {
    let mut v = Vec::with_capacity(points.len() * 2);
    for p in points {
        v.push(p[0]);
        v.push(p[1]);
    }
    Tensor::from_vec(v, &[points.len(), 2])
}

pub fn tensor_to_coords(t: &Tensor) -> Vec<[f64; 2]> {
    t.values().chunks(2).map(|c| [c[0], c[1]]).collect()
}

pub struct Stage1Model {
    pub encoder_cfg: EncoderConfig,
    pub vq_cfg: VqConfig,
    pub t_past: usize,
    pub t_future: usize,
    pub context: ContextEncoder,
    pub future: FutureEncoder,
    pub decoder: SceneDecoder,
    pub codebook: CodebookModule,
}

/// Everything the stage-one forward pass produces for one scene.
pub struct SceneForward {
    pub h_ctx: Vec<Tensor>,
    /// Raw future-encoder outputs, T x D per agent.
    pub z: Vec<Tensor>,
    /// Latents actually quantized: projected to the codebook width and
    /// row-normalized onto the unit sphere, matching the normalized table.
    pub z_quant: Vec<Tensor>,
    pub quant: Vec<QuantizationResult>,
    pub reconstructions: Vec<Tensor>,
}

impl Stage1Model {
    pub fn new(
        encoder_cfg: &EncoderConfig,
        vq_cfg: &VqConfig,
        t_past: usize,
        t_future: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        encoder_cfg.validate()?;
        vq_cfg.validate(encoder_cfg.d_model)?;
        let width = vq_cfg.quant_width(encoder_cfg.d_model);
        Ok(Stage1Model {
            context: ContextEncoder::new(encoder_cfg, t_past, rng)?,
            future: FutureEncoder::new(encoder_cfg, t_future, rng)?,
            decoder: SceneDecoder::new(encoder_cfg, width, t_future, rng)?,
            codebook: CodebookModule::new(vq_cfg, encoder_cfg.d_model, encoder_cfg.heads, rng)?,
            encoder_cfg: encoder_cfg.clone(),
            vq_cfg: vq_cfg.clone(),
            t_past,
            t_future,
        })
    }

    /// Context features for all agents of a (normalized) scene.
    pub fn context_features(&self, scene: &Scene) -> Result<Vec<Tensor>> {
        let pasts: Vec<Tensor> = scene
            .agents
            .iter()
            .map(|a| coords_tensor(&a.past))
            .collect::<Result<_>>()?;
        self.context.forward(&pasts)
    }

    /// Per-agent conditioned codebooks given context features.
    pub fn conditioned_codebooks(&self, h_ctx: &[Tensor], lambda: f64) -> Result<Vec<Tensor>> {
        let conditioned = self.codebook.mode != crate::vq::CodebookMode::Static;
        h_ctx
            .iter()
            .map(|h| {
                self.codebook
                    .conditioned_codebook(if conditioned { Some(h) } else { None }, lambda)
            })
            .collect()
    }

    /// Full training forward pass over one scene.
    pub fn forward_scene(&self, scene: &Scene, lambda: f64) -> Result<SceneForward> {
        let h_ctx = self.context_features(scene)?;
        let futures: Vec<Tensor> = scene
            .agents
            .iter()
            .map(|a| coords_tensor(&a.future))
            .collect::<Result<_>>()?;
        let z = self.future.forward(&futures, &h_ctx)?;
        let codebooks = self.conditioned_codebooks(&h_ctx, lambda)?;
        let mut z_quant = Vec::with_capacity(z.len());
        let mut quant = Vec::with_capacity(z.len());
        for (zi, e_c) in z.iter().zip(codebooks.iter()) {
            let latent = self.codebook.project(zi)?.l2_normalize_rows()?;
            quant.push(quantize(&latent, e_c)?);
            z_quant.push(latent);
        }
        let latents: Vec<Tensor> = quant.iter().map(|q| q.straight_through.clone()).collect();
        let reconstructions = self.decoder.forward(&latents)?;
        Ok(SceneForward {
            h_ctx,
            z,
            z_quant,
            quant,
            reconstructions,
        })
    }

    /// Mean of the per-agent stage-one losses over a scene.
    pub fn scene_loss(&self, scene: &Scene, lambda: f64) -> Result<(FirstStageLoss, SceneForward)> {
        let fwd = self.forward_scene(scene, lambda)?;
        let n = scene.agents.len() as f64;
        let mut rec: Option<Tensor> = None;
        let mut emb: Option<Tensor> = None;
        let mut com: Option<Tensor> = None;
        for (agent, ((z, q), y_hat)) in scene.agents.iter().zip(
            fwd.z_quant
                .iter()
                .zip(fwd.quant.iter())
                .zip(fwd.reconstructions.iter()),
        ) {
            let y = coords_tensor(&agent.future)?;
            let parts = first_stage_loss(&y, y_hat, z, &q.z_q, self.vq_cfg.commitment_beta)?;
            rec = Some(match rec {
                Some(acc) => acc.add(&parts.reconstruction)?,
                None => parts.reconstruction,
            });
            emb = Some(match emb {
                Some(acc) => acc.add(&parts.embedding)?,
                None => parts.embedding,
            });
            com = Some(match com {
                Some(acc) => acc.add(&parts.commitment)?,
                None => parts.commitment,
            });
        }
        let reconstruction = rec.expect("scene has agents").scale(1.0 / n)?;
        let embedding = emb.expect("scene has agents").scale(1.0 / n)?;
        let commitment = com.expect("scene has agents").scale(1.0 / n)?;
        let total = reconstruction
            .add(&embedding)?
            .add(&commitment.scale(self.vq_cfg.commitment_beta)?)?;
        Ok((
            FirstStageLoss {
                reconstruction,
                embedding,
                commitment,
                total,
            },
            fwd,
        ))
    }

    /// Token sequences (and detached context) for the frozen-encoder stage.
    pub fn encode_tokens(
        &self,
        scene: &Scene,
        lambda: f64,
    ) -> Result<(Vec<Vec<usize>>, Vec<Tensor>)> {
        let _guard = crate::tensor::no_grad();
        let fwd = self.forward_scene(scene, lambda)?;
        let tokens = fwd.quant.iter().map(|q| q.indices.clone()).collect();
        let h_ctx = fwd.h_ctx.iter().map(|h| h.detach()).collect();
        Ok((tokens, h_ctx))
    }

    /// Decode token sequences through the conditioned codebook and decoder.
    /// Trajectories come back in the scene's (normalized) frame.
    pub fn decode_tokens(
        &self,
        tokens: &[Vec<usize>],
        h_ctx: &[Tensor],
        lambda: f64,
    ) -> Result<Vec<Vec<[f64; 2]>>> {
        let _guard = crate::tensor::no_grad();
        let codebooks = self.conditioned_codebooks(h_ctx, lambda)?;
        let mut latents = Vec::with_capacity(tokens.len());
        for (seq, e_c) in tokens.iter().zip(codebooks.iter()) {
            latents.push(e_c.select_rows(seq)?);
        }
        let decoded = self.decoder.forward(&latents)?;
        Ok(decoded.iter().map(tensor_to_coords).collect())
    }

    /// Average displacement error of posterior reconstructions over scenes,
    /// in the frame the scenes are expressed in.
    pub fn reconstruction_ade(&self, scenes: &[Scene], lambda: f64) -> Result<f64> {
        let _guard = crate::tensor::no_grad();
        let mut total = 0.0;
        let mut count = 0.0;
        for scene in scenes {
            let fwd = self.forward_scene(scene, lambda)?;
            for (agent, y_hat) in scene.agents.iter().zip(fwd.reconstructions.iter()) {
                let pred = tensor_to_coords(y_hat);
                let mut ade = 0.0;
                for (p, q) in pred.iter().zip(agent.future.iter()) {
                    ade += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                }
                total += ade / agent.future.len() as f64;
                count += 1.0;
            }
        }
        Ok(total / count)
    }
}

impl HasParams for Stage1Model {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.context.for_each_param(&format!("{prefix}context"), f);
        self.future.for_each_param(&format!("{prefix}future"), f);
        self.decoder.for_each_param(&format!("{prefix}decoder"), f);
        self.codebook
            .for_each_param(&format!("{prefix}codebook"), f);
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.context
            .for_each_param_mut(&format!("{prefix}context"), f);
        self.future
            .for_each_param_mut(&format!("{prefix}future"), f);
        self.decoder
            .for_each_param_mut(&format!("{prefix}decoder"), f);
        self.codebook
            .for_each_param_mut(&format!("{prefix}codebook"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_dataset, GeneratorConfig};
    use crate::rng::{stream, StreamKind};
    use crate::vq::CodebookMode;

    fn tiny_model(mode: CodebookMode) -> Stage1Model {
        let enc = EncoderConfig {
            d_model: 16,
            heads: 2,
            depth: 1,
            feedforward: 24,
            social: true,
        };
        let vq = VqConfig {
            mode,
            codewords: 8,
            rank: 3,
            ..VqConfig::default()
        };
        let mut rng = stream(0, StreamKind::Init, 0);
        Stage1Model::new(&enc, &vq, 4, 5, &mut rng).unwrap()
    }

    fn tiny_scene() -> Scene {
        let cfg = GeneratorConfig {
            scenes: 1,
            agents_min: 2,
            agents_max: 2,
            t_past: 4,
            t_future: 5,
            ..GeneratorConfig::default()
        };
        synthesize_dataset(&cfg, 11).unwrap().pop().unwrap()
    }

    #[test]
    fn forward_shapes_and_loss_flow() {
        for mode in [
            CodebookMode::Static,
            CodebookMode::FullRank,
            CodebookMode::LowRank,
        ] {
            let model = tiny_model(mode);
            let scene = tiny_scene();
            let (loss, fwd) = model.scene_loss(&scene, 0.5).unwrap();
            assert_eq!(fwd.reconstructions.len(), 2);
            assert_eq!(fwd.reconstructions[0].shape(), &[5, 2]);
            assert_eq!(fwd.quant[0].indices.len(), 5);
            let grads = loss.total.backward().unwrap();
            let mut table_grad = grads.wrt_or_zeros(&model.codebook.table);
            if mode == CodebookMode::FullRank {
                // The full-rank mode bypasses the static table entirely.
                assert!(table_grad.iter().all(|&g| g == 0.0));
            } else {
                table_grad.retain(|&g| g != 0.0);
                assert!(!table_grad.is_empty());
            }
            // The loss reaches all three networks through the bottleneck.
            for net in [&model.context.net, &model.future.net, &model.decoder.net] {
                let mut norm = 0.0;
                net.for_each_param("n", &mut |_, t| {
                    norm += grads.wrt_or_zeros(t).iter().map(|g| g * g).sum::<f64>();
                });
                assert!(
                    norm > 0.0,
                    "loss gradient missing from a network in mode {mode:?}"
                );
            }
        }
    }

    #[test]
    fn reduced_width_projection_path_runs() {
        let enc = EncoderConfig {
            d_model: 16,
            heads: 2,
            depth: 1,
            feedforward: 24,
            social: true,
        };
        let vq = VqConfig {
            mode: CodebookMode::LowRank,
            codewords: 8,
            rank: 3,
            proj_dim: Some(6),
            ..VqConfig::default()
        };
        let mut rng = stream(9, StreamKind::Init, 0);
        let model = Stage1Model::new(&enc, &vq, 4, 5, &mut rng).unwrap();
        let scene = tiny_scene();
        let (loss, fwd) = model.scene_loss(&scene, 0.5).unwrap();
        assert_eq!(fwd.z_quant[0].shape(), &[5, 6]);
        assert_eq!(fwd.quant[0].z_q.shape(), &[5, 6]);
        assert_eq!(fwd.reconstructions[0].shape(), &[5, 2]);
        loss.total.backward().unwrap();
    }

    #[test]
    fn encode_decode_round_trip_is_consistent() {
        let model = tiny_model(CodebookMode::LowRank);
        let scene = tiny_scene();
        let (tokens, h_ctx) = model.encode_tokens(&scene, 1.0).unwrap();
        let decoded = model.decode_tokens(&tokens, &h_ctx, 1.0).unwrap();
        let fwd = model.forward_scene(&scene, 1.0).unwrap();
        for (d, r) in decoded.iter().zip(fwd.reconstructions.iter()) {
            let rv = tensor_to_coords(r);
            for (a, b) in d.iter().zip(rv.iter()) {
                assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
            }
        }
    }
}
