//! Checkpoint archives: named weight tensors with shapes plus the configs
//! needed to rebuild the module graph, serialized as JSON. Stage-two
//! checkpoints record the id of the stage-one checkpoint they were trained
//! against and refuse to pair with anything else.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, DiffusionConfig, DiffusionSchedule};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::Stage1Model;
use crate::nn::HasParams;
use crate::rng::{stream, StreamKind};
use crate::sampler::ModelBundle;
use crate::vq::VqConfig;

pub const STAGE1_FORMAT: &str = "trajvq.stage1.v1";
pub const STAGE2_FORMAT: &str = "trajvq.stage2.v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Checkpoint {
    pub format: String,
    pub id: String,
    pub encoder: EncoderConfig,
    pub vq: VqConfig,
    pub t_past: usize,
    pub t_future: usize,
    pub frame_interval: f64,
    pub norm_scale: f64,
    pub lambda: f64,
    pub tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Checkpoint {
    pub format: String,
    pub id: String,
    /// Id of the stage-one checkpoint this prior was trained against.
    pub stage1_id: String,
    pub encoder: EncoderConfig,
    pub diffusion: DiffusionConfig,
    pub codewords: usize,
    pub t_future: usize,
    pub tensors: BTreeMap<String, TensorEntry>,
}

fn fnv1a(bytes: impl Iterator<Item = u8>) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Order-stable checksum over every named parameter's bits.
pub fn weights_checksum<M: HasParams>(module: &M) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    module.for_each_param("", &mut |name, t| {
        hash = fnv1a(
            name.bytes()
                .chain(t.values().iter().flat_map(|v| v.to_le_bytes()))
                .chain(hash.to_le_bytes()),
        );
    });
    hash
}

fn collect_tensors<M: HasParams>(module: &M) -> BTreeMap<String, TensorEntry> {
    let mut tensors = BTreeMap::new();
    module.for_each_param("", &mut |name, t| {
        tensors.insert(
            name.to_string(),
            TensorEntry {
                shape: t.shape().to_vec(),
                values: t.values().to_vec(),
            },
        );
    });
    tensors
}

fn restore_tensors<M: HasParams>(
    module: &mut M,
    tensors: &BTreeMap<String, TensorEntry>,
) -> Result<()> {
    let mut missing = Vec::new();
    let mut used = 0usize;
    let mut failure: Option<Error> = None;
    module.for_each_param_mut("", &mut |name, t| {
        if failure.is_some() {
            return;
        }
        match tensors.get(name) {
            Some(entry) => {
                if entry.shape != t.shape() {
                    failure = Some(Error::Checkpoint(format!(
                        "tensor {name}: checkpoint shape {:?} does not match model shape {:?}",
                        entry.shape,
                        t.shape()
                    )));
                    return;
                }
                match t.with_values(entry.values.clone()) {
                    Ok(updated) => {
                        *t = updated;
                        used += 1;
                    }
                    Err(e) => failure = Some(e),
                }
            }
            None => missing.push(name.to_string()),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint is missing tensors: {}",
            missing.join(", ")
        )));
    }
    if used != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors but the model uses {used}",
            tensors.len()
        )));
    }
    Ok(())
}

fn content_id<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(format!("{:016x}", fnv1a(json.into_iter())))
}

pub struct Stage1Meta {
    pub id: String,
    pub norm_scale: f64,
    pub lambda: f64,
    pub frame_interval: f64,
}

pub fn stage1_checkpoint(
    model: &Stage1Model,
    lambda: f64,
    norm_scale: f64,
    frame_interval: f64,
) -> Result<Stage1Checkpoint> {
    let mut ckpt = Stage1Checkpoint {
        format: STAGE1_FORMAT.to_string(),
        id: String::new(),
        encoder: model.encoder_cfg.clone(),
        vq: model.vq_cfg.clone(),
        t_past: model.t_past,
        t_future: model.t_future,
        frame_interval,
        norm_scale,
        lambda,
        tensors: collect_tensors(model),
    };
    ckpt.id = content_id(&ckpt)?;
    Ok(ckpt)
}

pub fn save_stage1(
    path: &Path,
    model: &Stage1Model,
    lambda: f64,
    norm_scale: f64,
    frame_interval: f64,
) -> Result<String> {
    let ckpt = stage1_checkpoint(model, lambda, norm_scale, frame_interval)?;
    std::fs::write(path, serde_json::to_string(&ckpt)?)?;
    Ok(ckpt.id)
}

pub fn load_stage1(path: &Path) -> Result<(Stage1Model, Stage1Meta)> {
    let ckpt: Stage1Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if ckpt.format != STAGE1_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format `{}` (expected {STAGE1_FORMAT})",
            ckpt.format
        )));
    }
    let mut rng = stream(0, StreamKind::Init, 0);
    let mut model = Stage1Model::new(
        &ckpt.encoder,
        &ckpt.vq,
        ckpt.t_past,
        ckpt.t_future,
        &mut rng,
    )?;
    restore_tensors(&mut model, &ckpt.tensors)?;
    Ok((
        model,
        Stage1Meta {
            id: ckpt.id,
            norm_scale: ckpt.norm_scale,
            lambda: ckpt.lambda,
            frame_interval: ckpt.frame_interval,
        },
    ))
}

pub fn stage2_checkpoint(
    denoiser: &Denoiser,
    encoder: &EncoderConfig,
    diffusion: &DiffusionConfig,
    stage1_id: &str,
) -> Result<Stage2Checkpoint> {
    let mut ckpt = Stage2Checkpoint {
        format: STAGE2_FORMAT.to_string(),
        id: String::new(),
        stage1_id: stage1_id.to_string(),
        encoder: encoder.clone(),
        diffusion: diffusion.clone(),
        codewords: denoiser.codes,
        t_future: denoiser.t_future,
        tensors: collect_tensors(denoiser),
    };
    ckpt.id = content_id(&ckpt)?;
    Ok(ckpt)
}

pub fn save_stage2(
    path: &Path,
    denoiser: &Denoiser,
    encoder: &EncoderConfig,
    diffusion: &DiffusionConfig,
    stage1_id: &str,
) -> Result<String> {
    let ckpt = stage2_checkpoint(denoiser, encoder, diffusion, stage1_id)?;
    std::fs::write(path, serde_json::to_string(&ckpt)?)?;
    Ok(ckpt.id)
}

pub fn load_stage2(path: &Path) -> Result<(Denoiser, DiffusionConfig, String)> {
    let ckpt: Stage2Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if ckpt.format != STAGE2_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format `{}` (expected {STAGE2_FORMAT})",
            ckpt.format
        )));
    }
    let mut rng = stream(0, StreamKind::Init, 1);
    let mut denoiser = Denoiser::new(
        &ckpt.encoder,
        ckpt.codewords,
        ckpt.diffusion.steps,
        ckpt.t_future,
        &mut rng,
    )?;
    restore_tensors(&mut denoiser, &ckpt.tensors)?;
    Ok((denoiser, ckpt.diffusion, ckpt.stage1_id))
}

/// Load a stage-one/stage-two pair, refusing mismatched checkpoints.
pub fn load_bundle(stage1_path: &Path, stage2_path: &Path) -> Result<ModelBundle> {
    let (stage1, meta) = load_stage1(stage1_path)?;
    let (denoiser, diffusion_cfg, stage1_id) = load_stage2(stage2_path)?;
    if stage1_id != meta.id {
        return Err(Error::CheckpointPairing {
            expected: stage1_id,
            found: meta.id,
        });
    }
    if denoiser.codes != stage1.vq_cfg.codewords || denoiser.t_future != stage1.t_future {
        return Err(Error::Checkpoint(format!(
            "incompatible pair: prior over {} codes x {} steps, model has {} codes x {} steps",
            denoiser.codes, denoiser.t_future, stage1.vq_cfg.codewords, stage1.t_future
        )));
    }
    let schedule = DiffusionSchedule::build(denoiser.codes, &diffusion_cfg)?;
    Ok(ModelBundle {
        lambda: meta.lambda,
        norm_scale: meta.norm_scale,
        stage1,
        denoiser,
        schedule,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamKind};

    fn tiny_model(seed: u64) -> Stage1Model {
        let enc = EncoderConfig {
            d_model: 8,
            heads: 2,
            depth: 1,
            feedforward: 12,
            social: true,
        };
        let vq = VqConfig {
            codewords: 4,
            rank: 2,
            ..VqConfig::default()
        };
        let mut rng = stream(seed, StreamKind::Init, 0);
        Stage1Model::new(&enc, &vq, 3, 4, &mut rng).unwrap()
    }

    #[test]
    fn stage1_round_trip_preserves_weights() {
        let dir = std::env::temp_dir().join("trajvq-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("stage1.json");
        let model = tiny_model(5);
        let id = save_stage1(&path, &model, 0.75, 1.25, 0.4).unwrap();
        let (restored, meta) = load_stage1(&path).unwrap();
        assert_eq!(meta.id, id);
        assert_eq!(meta.lambda, 0.75);
        assert_eq!(meta.norm_scale, 1.25);
        assert_eq!(weights_checksum(&model), weights_checksum(&restored));
    }

    #[test]
    fn mismatched_pair_is_refused() {
        let dir = std::env::temp_dir().join("trajvq-ckpt-pair-test");
        std::fs::create_dir_all(&dir).unwrap();
        let s1a = dir.join("a.json");
        let s1b = dir.join("b.json");
        let s2 = dir.join("prior.json");
        let model_a = tiny_model(6);
        let model_b = tiny_model(7);
        let id_a = save_stage1(&s1a, &model_a, 1.0, 1.0, 0.4).unwrap();
        save_stage1(&s1b, &model_b, 1.0, 1.0, 0.4).unwrap();

        let enc = EncoderConfig {
            d_model: 8,
            heads: 2,
            depth: 1,
            feedforward: 12,
            social: true,
        };
        let diff = DiffusionConfig {
            steps: 3,
            ..DiffusionConfig::default()
        };
        let mut rng = stream(8, StreamKind::Init, 1);
        let denoiser = Denoiser::new(&enc, 4, 3, 4, &mut rng).unwrap();
        save_stage2(&s2, &denoiser, &enc, &diff, &id_a).unwrap();

        assert!(load_bundle(&s1a, &s2).is_ok());
        match load_bundle(&s1b, &s2) {
            Err(Error::CheckpointPairing { .. }) => {}
            other => panic!("expected pairing refusal, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn ids_track_content() {
        let model_a = tiny_model(9);
        let model_b = tiny_model(10);
        let ck_a = stage1_checkpoint(&model_a, 1.0, 1.0, 0.4).unwrap();
        let ck_b = stage1_checkpoint(&model_b, 1.0, 1.0, 0.4).unwrap();
        assert_ne!(ck_a.id, ck_b.id);
        let ck_a2 = stage1_checkpoint(&model_a, 1.0, 1.0, 0.4).unwrap();
        assert_eq!(ck_a.id, ck_a2.id);
    }
}
