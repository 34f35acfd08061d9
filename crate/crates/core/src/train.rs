//! Two-stage optimization: stage one fits the encoders, decoder and codebook
//! with the reconstruction + embedding + commitment objective; stage two
//! freezes them and fits the diffusion prior over the frozen token sequences.
//!
//! Training is bitwise deterministic for a fixed config and seed: scenes in
//! a batch run forward/backward in parallel but their gradients are reduced
//! in scene order, and every random draw comes from a stream keyed by
//! (seed, purpose, step, scene).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{fit_scale, normalize, rotate_augment, Scene};
use crate::diffusion::{prior_loss_for_step, Denoiser, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::model::Stage1Model;
use crate::nn::HasParams;
use crate::rng::{stream, stream2, StreamKind};
use crate::tensor::{Gradients, Tensor};
use crate::vq::codebook_usage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from the base rate to `lr_floor` over the run.
    Cosine,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    /// Final learning rate of the cosine schedule.
    pub lr_floor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Scenes per optimizer step.
    pub batch_scenes: usize,
    /// Rotation augmentation bound per stage, degrees.
    pub theta_max_stage1: f64,
    pub theta_max_stage2: f64,
    /// Epochs between reconstruction/accuracy evaluations (0 = end only).
    pub eval_every: usize,
    /// Epochs between codebook-usage sweeps (0 = end only).
    pub perplexity_every: usize,
    /// Epochs between periodic checkpoints (0 = final checkpoint only).
    pub checkpoint_every: usize,
    /// Stop stage one early once the reconstruction ADE drops below this.
    pub early_stop_ade: Option<f64>,
    /// Stop stage two early once token accuracy exceeds this.
    pub early_stop_accuracy: Option<f64>,
    /// Repetition count for the token-accuracy sweep.
    pub accuracy_repeats: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            lr_schedule: LrSchedule::Constant,
            lr_floor: 1e-5,
            beta1: 0.5,
            beta2: 0.9,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            stage1_epochs: 200,
            stage2_epochs: 200,
            batch_scenes: 8,
            theta_max_stage1: 180.0,
            theta_max_stage2: 5.0,
            eval_every: 10,
            perplexity_every: 1,
            checkpoint_every: 50,
            early_stop_ade: None,
            early_stop_accuracy: None,
            accuracy_repeats: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.batch_scenes == 0 {
            return Err(Error::Config(
                "train: learning rate and batch must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(
                "train: moment decays must lie in [0, 1)".into(),
            ));
        }
        for theta in [self.theta_max_stage1, self.theta_max_stage2] {
            if !(0.0..=180.0).contains(&theta) {
                return Err(Error::Config(format!(
                    "train: theta_max {theta} outside [0, 180]"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Decoupled-weight-decay adaptive-moment optimizer.
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step_count: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Apply one update given gradients aligned with the model's parameter
    /// visitation order.
    pub fn step<M: HasParams>(&mut self, model: &mut M, grads: &[Vec<f64>]) -> Result<()> {
        self.step_count += 1;
        if self.moments.is_empty() {
            self.moments = grads
                .iter()
                .map(|g| (vec![0.0; g.len()], vec![0.0; g.len()]))
                .collect();
        }
        let bias1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step_count as i32);
        let mut idx = 0;
        let mut failure: Option<Error> = None;
        model.for_each_param_mut("", &mut |name, t| {
            if failure.is_some() {
                return;
            }
            let g = &grads[idx];
            let (m, v) = &mut self.moments[idx];
            idx += 1;
            let mut values = t.values().to_vec();
            for j in 0..values.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                values[j] -=
                    self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * values[j]);
            }
            match t.with_values(values) {
                Ok(updated) => *t = updated,
                Err(_) => {
                    failure = Some(Error::Training(format!(
                        "parameter {name} became non-finite during the optimizer step"
                    )))
                }
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Cosine ramp from 0 at the first step to 1 at the last.
pub fn cosine_ramp(step: usize, total_steps: usize) -> f64 {
    if total_steps <= 1 {
        return if step == 0 { 0.0 } else { 1.0 };
    }
    let f = (step as f64 / (total_steps - 1) as f64).clamp(0.0, 1.0);
    0.5 * (1.0 - (std::f64::consts::PI * f).cos())
}

/// Learning rate at a given step under the configured schedule.
pub fn scheduled_lr(cfg: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    match cfg.lr_schedule {
        LrSchedule::Constant => cfg.learning_rate,
        LrSchedule::Cosine => {
            cfg.lr_floor
                + (cfg.learning_rate - cfg.lr_floor) * (1.0 - cosine_ramp(step, total_steps))
        }
    }
}

/// Instance-update mix weight at a given stage-one step.
pub fn scheduled_lambda(vq: &crate::vq::VqConfig, step: usize, total_steps: usize) -> f64 {
    match vq.lambda_schedule {
        crate::vq::LambdaSchedule::CosineRamp => cosine_ramp(step, total_steps),
        crate::vq::LambdaSchedule::Fixed => vq.lambda_fixed,
    }
}

fn ordered_params<M: HasParams>(model: &M) -> Vec<Tensor> {
    let mut params = Vec::new();
    model.for_each_param("", &mut |_, t| params.push(t.clone()));
    params
}

/// Sum per-scene gradients in scene order, average over the batch, and clip
/// by global norm. Returns gradients aligned with the parameter order.
fn combine_gradients(params: &[Tensor], per_scene: &[Gradients], clip: f64) -> Vec<Vec<f64>> {
    let inv = 1.0 / per_scene.len() as f64;
    let mut combined: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            let mut acc = vec![0.0; p.numel()];
            for grads in per_scene {
                if let Some(g) = grads.wrt(p) {
                    for (a, &gi) in acc.iter_mut().zip(g.iter()) {
                        *a += gi;
                    }
                }
            }
            for a in acc.iter_mut() {
                *a *= inv;
            }
            acc
        })
        .collect();
    if clip > 0.0 {
        let norm: f64 = combined
            .iter()
            .map(|g| g.iter().map(|&x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > clip {
            let scale = clip / norm;
            for g in combined.iter_mut() {
                for x in g.iter_mut() {
                    *x *= scale;
                }
            }
        }
    }
    combined
}

fn check_dataset(scenes: &[Scene]) -> Result<(usize, usize)> {
    let first = scenes
        .first()
        .ok_or_else(|| Error::Training("empty dataset".into()))?;
    let (tp, tf) = (first.t_past(), first.t_future());
    for scene in scenes {
        scene.validate()?;
        if scene.t_past() != tp || scene.t_future() != tf {
            return Err(Error::Training(format!(
                "scene {} geometry {}/{} differs from {}/{}",
                scene.scene_id,
                scene.t_past(),
                scene.t_future(),
                tp,
                tf
            )));
        }
    }
    Ok((tp, tf))
}

fn shuffled_indices(count: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = stream2(seed, StreamKind::Augment, 0xC0FFEE, epoch as u64);
    order.shuffle(&mut rng);
    order
}

// ---------------------------------------------------------------------------
// Stage one
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    pub reconstruction: f64,
    pub embedding: f64,
    pub commitment: f64,
    pub total: f64,
    pub perplexity: Option<f64>,
    pub ade_rec: Option<f64>,
}

pub struct Stage1Artifacts {
    pub model: Stage1Model,
    /// Final mix weight of the instance update.
    pub lambda: f64,
    pub norm_scale: f64,
    pub curve: Vec<Stage1EpochRecord>,
    pub steps_run: usize,
    /// Reconstruction ADE on the (normalized) training scenes at the end.
    pub final_ade_rec: f64,
}

pub fn stage1_curve_csv(curve: &[Stage1EpochRecord]) -> String {
    let mut out =
        String::from("epoch,lambda,reconstruction,embedding,commitment,total,perplexity,ade_rec\n");
    for r in curve {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.lambda,
            r.reconstruction,
            r.embedding,
            r.commitment,
            r.total,
            r.perplexity.map_or(String::new(), |v| v.to_string()),
            r.ade_rec.map_or(String::new(), |v| v.to_string()),
        ));
    }
    out
}

pub fn train_stage_one(scenes: &[Scene], cfg: &Config, seed: u64) -> Result<Stage1Artifacts> {
    train_stage_one_with_checkpoints(scenes, cfg, seed, None)
}

/// Stage one with periodic checkpoints written under `checkpoint_dir` every
/// `checkpoint_every` epochs (the final checkpoint is the caller's job).
pub fn train_stage_one_with_checkpoints(
    scenes: &[Scene],
    cfg: &Config,
    seed: u64,
    checkpoint_dir: Option<&std::path::Path>,
) -> Result<Stage1Artifacts> {
    cfg.validate()?;
    let (t_past, t_future) = check_dataset(scenes)?;
    let scale = fit_scale(scenes);
    let normalized: Vec<Scene> = scenes.iter().map(|s| normalize(s, scale).0).collect();

    let mut init_rng = stream(seed, StreamKind::Init, 0);
    let mut model = Stage1Model::new(&cfg.encoder, &cfg.vq, t_past, t_future, &mut init_rng)?;
    let mut optimizer = AdamW::new(&cfg.train);

    let batches_per_epoch = normalized.len().div_ceil(cfg.train.batch_scenes);
    let total_steps = (cfg.train.stage1_epochs * batches_per_epoch).max(1);
    let mut curve = Vec::new();
    let mut global_step = 0usize;
    let mut lambda = 0.0;
    let mut stop = false;

    for epoch in 0..cfg.train.stage1_epochs {
        let order = shuffled_indices(normalized.len(), seed, epoch);
        let mut sums = [0.0f64; 4];
        let mut batches = 0.0;
        for batch in order.chunks(cfg.train.batch_scenes) {
            lambda = scheduled_lambda(&cfg.vq, global_step, total_steps);
            let outputs: Vec<Result<([f64; 4], Gradients)>> = batch
                .par_iter()
                .map(|&scene_idx| {
                    let mut aug_rng = stream2(
                        seed,
                        StreamKind::Augment,
                        global_step as u64,
                        scene_idx as u64,
                    );
                    let scene = rotate_augment(
                        &normalized[scene_idx],
                        cfg.train.theta_max_stage1,
                        &mut aug_rng,
                    )?;
                    let (loss, _) = model.scene_loss(&scene, lambda).map_err(|e| {
                        Error::Training(format!(
                            "step {global_step}, scene {}: {e}",
                            normalized[scene_idx].scene_id
                        ))
                    })?;
                    let grads = loss.total.backward()?;
                    Ok((
                        [
                            loss.reconstruction.scalar_value()?,
                            loss.embedding.scalar_value()?,
                            loss.commitment.scalar_value()?,
                            loss.total.scalar_value()?,
                        ],
                        grads,
                    ))
                })
                .collect();
            let mut per_scene = Vec::with_capacity(outputs.len());
            for out in outputs {
                let (values, grads) = out?;
                for (s, v) in sums.iter_mut().zip(values.iter()) {
                    *s += v;
                }
                per_scene.push(grads);
            }
            batches += per_scene.len() as f64;
            let params = ordered_params(&model);
            let combined = combine_gradients(&params, &per_scene, cfg.train.grad_clip);
            optimizer.set_lr(scheduled_lr(&cfg.train, global_step, total_steps));
            optimizer.step(&mut model, &combined)?;
            global_step += 1;
        }

        let eval_now = cfg.train.eval_every > 0 && (epoch + 1) % cfg.train.eval_every == 0;
        let ade_rec = if eval_now {
            Some(model.reconstruction_ade(&normalized, lambda)?)
        } else {
            None
        };
        let perp_now =
            cfg.train.perplexity_every > 0 && (epoch + 1) % cfg.train.perplexity_every == 0;
        let perplexity = if perp_now {
            let _guard = crate::tensor::no_grad();
            let mut indices = Vec::new();
            for scene in &normalized {
                let fwd = model.forward_scene(scene, lambda)?;
                for q in &fwd.quant {
                    indices.extend_from_slice(&q.indices);
                }
            }
            Some(codebook_usage(indices, cfg.vq.codewords).perplexity)
        } else {
            None
        };
        curve.push(Stage1EpochRecord {
            epoch,
            lambda,
            reconstruction: sums[0] / batches,
            embedding: sums[1] / batches,
            commitment: sums[2] / batches,
            total: sums[3] / batches,
            perplexity,
            ade_rec,
        });
        if let Some(dir) = checkpoint_dir {
            if cfg.train.checkpoint_every > 0 && (epoch + 1) % cfg.train.checkpoint_every == 0 {
                crate::checkpoint::save_stage1(
                    &dir.join(format!("stage1_epoch{:05}.json", epoch + 1)),
                    &model,
                    lambda,
                    scale,
                    scenes[0].frame_interval,
                )?;
            }
        }
        if let (Some(threshold), Some(ade)) = (cfg.train.early_stop_ade, ade_rec) {
            if ade < threshold {
                stop = true;
            }
        }
        if stop {
            break;
        }
    }

    let final_lambda = if global_step == 0 {
        scheduled_lambda(&cfg.vq, 0, total_steps)
    } else {
        lambda
    };
    let final_ade_rec = model.reconstruction_ade(&normalized, final_lambda)?;
    Ok(Stage1Artifacts {
        model,
        lambda: final_lambda,
        norm_scale: scale,
        curve,
        steps_run: global_step,
        final_ade_rec,
    })
}

// ---------------------------------------------------------------------------
// Stage two
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

pub struct Stage2Artifacts {
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
    pub curve: Vec<Stage2EpochRecord>,
    pub final_accuracy: f64,
}

pub fn stage2_curve_csv(curve: &[Stage2EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,accuracy\n");
    for r in curve {
        out.push_str(&format!(
            "{},{},{}\n",
            r.epoch,
            r.loss,
            r.accuracy.map_or(String::new(), |v| v.to_string()),
        ));
    }
    out
}

/// Fraction of slots where the denoiser's argmax clean-token prediction
/// matches the frozen encoder's token, over noised inputs with uniformly
/// sampled steps. Deterministic for a fixed seed.
pub fn token_accuracy(
    model: &Stage1Model,
    lambda: f64,
    denoiser: &Denoiser,
    schedule: &DiffusionSchedule,
    scenes: &[Scene],
    seed: u64,
    repeats: usize,
) -> Result<f64> {
    use rand::Rng;
    let _guard = crate::tensor::no_grad();
    let mut hits = 0usize;
    let mut slots = 0usize;
    for rep in 0..repeats.max(1) {
        for (scene_idx, scene) in scenes.iter().enumerate() {
            let (tokens, h_ctx) = model.encode_tokens(scene, lambda)?;
            let mut rng = stream2(seed, StreamKind::Eval, rep as u64, scene_idx as u64);
            let step = rng.random_range(1..=schedule.steps);
            let noised: Vec<Vec<usize>> = tokens
                .iter()
                .map(|seq| schedule.forward_noise(seq, step, &mut rng))
                .collect::<Result<_>>()?;
            let logits = denoiser.forward(&noised, step, &h_ctx)?;
            for (agent_logits, clean) in logits.iter().zip(tokens.iter()) {
                let c = schedule.codes;
                for (slot, &truth) in clean.iter().enumerate() {
                    let row = &agent_logits.values()[slot * c..(slot + 1) * c];
                    let argmax = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(i, _)| i)
                        .unwrap();
                    hits += usize::from(argmax == truth);
                    slots += 1;
                }
            }
        }
    }
    Ok(hits as f64 / slots as f64)
}

pub fn train_stage_two(
    scenes: &[Scene],
    stage1: &Stage1Artifacts,
    cfg: &Config,
    seed: u64,
) -> Result<Stage2Artifacts> {
    cfg.validate()?;
    let (t_past, t_future) = check_dataset(scenes)?;
    if t_past != stage1.model.t_past || t_future != stage1.model.t_future {
        return Err(Error::Checkpoint(format!(
            "stage-one model geometry {}/{} does not match dataset {}/{}",
            stage1.model.t_past, stage1.model.t_future, t_past, t_future
        )));
    }
    if stage1.model.vq_cfg.codewords != cfg.vq.codewords
        || stage1.model.encoder_cfg.d_model != cfg.encoder.d_model
    {
        return Err(Error::Checkpoint(format!(
            "stage-one checkpoint (C={}, D={}) is incompatible with the config (C={}, D={})",
            stage1.model.vq_cfg.codewords,
            stage1.model.encoder_cfg.d_model,
            cfg.vq.codewords,
            cfg.encoder.d_model
        )));
    }
    let normalized: Vec<Scene> = scenes
        .iter()
        .map(|s| normalize(s, stage1.norm_scale).0)
        .collect();
    let schedule = DiffusionSchedule::build(cfg.vq.codewords, &cfg.diffusion)?;

    let mut init_rng = stream(seed, StreamKind::Init, 1);
    let mut denoiser = Denoiser::new(
        &cfg.encoder,
        cfg.vq.codewords,
        cfg.diffusion.steps,
        t_future,
        &mut init_rng,
    )?;
    let mut optimizer = AdamW::new(&cfg.train);

    let model = &stage1.model;
    let lambda = stage1.lambda;
    let batches_per_epoch = normalized.len().div_ceil(cfg.train.batch_scenes);
    let total_steps = (cfg.train.stage2_epochs * batches_per_epoch).max(1);
    let mut curve = Vec::new();
    let mut global_step = 0usize;
    let mut stop = false;

    for epoch in 0..cfg.train.stage2_epochs {
        let order = shuffled_indices(normalized.len(), seed, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0.0;
        for batch in order.chunks(cfg.train.batch_scenes) {
            let outputs: Vec<Result<(f64, Gradients)>> = batch
                .par_iter()
                .map(|&scene_idx| {
                    use rand::Rng;
                    let mut rng = stream2(
                        seed,
                        StreamKind::NoiseStep,
                        global_step as u64,
                        scene_idx as u64,
                    );
                    let scene = rotate_augment(
                        &normalized[scene_idx],
                        cfg.train.theta_max_stage2,
                        &mut rng,
                    )?;
                    let (tokens, h_ctx) = model.encode_tokens(&scene, lambda)?;
                    let step = rng.random_range(1..=schedule.steps);
                    let noised: Vec<Vec<usize>> = tokens
                        .iter()
                        .map(|seq| schedule.forward_noise(seq, step, &mut rng))
                        .collect::<Result<_>>()?;
                    let logits = denoiser.forward(&noised, step, &h_ctx)?;
                    let mut loss: Option<Tensor> = None;
                    for (agent_logits, (noised_seq, clean_seq)) in
                        logits.iter().zip(noised.iter().zip(tokens.iter()))
                    {
                        let term = prior_loss_for_step(
                            &schedule,
                            agent_logits,
                            noised_seq,
                            clean_seq,
                            step,
                            cfg.diffusion.aux_weight,
                        )?;
                        loss = Some(match loss {
                            Some(acc) => acc.add(&term)?,
                            None => term,
                        });
                    }
                    let loss = loss
                        .expect("scene has agents")
                        .scale(1.0 / tokens.len() as f64)?;
                    let grads = loss.backward().map_err(|e| {
                        Error::Training(format!("stage two step {global_step}: {e}"))
                    })?;
                    Ok((loss.scalar_value()?, grads))
                })
                .collect();
            let mut per_scene = Vec::with_capacity(outputs.len());
            for out in outputs {
                let (value, grads) = out?;
                loss_sum += value;
                per_scene.push(grads);
            }
            batches += per_scene.len() as f64;
            let params = ordered_params(&denoiser);
            let combined = combine_gradients(&params, &per_scene, cfg.train.grad_clip);
            optimizer.set_lr(scheduled_lr(&cfg.train, global_step, total_steps));
            optimizer.step(&mut denoiser, &combined)?;
            global_step += 1;
        }

        let eval_now = cfg.train.eval_every > 0 && (epoch + 1) % cfg.train.eval_every == 0;
        let accuracy = if eval_now {
            Some(token_accuracy(
                model,
                lambda,
                &denoiser,
                &schedule,
                &normalized,
                seed,
                cfg.train.accuracy_repeats,
            )?)
        } else {
            None
        };
        curve.push(Stage2EpochRecord {
            epoch,
            loss: loss_sum / batches.max(1.0),
            accuracy,
        });
        if let (Some(threshold), Some(acc)) = (cfg.train.early_stop_accuracy, accuracy) {
            if acc > threshold {
                stop = true;
            }
        }
        if stop {
            break;
        }
    }

    let final_accuracy = token_accuracy(
        model,
        lambda,
        &denoiser,
        &schedule,
        &normalized,
        seed,
        cfg.train.accuracy_repeats,
    )?;
    Ok(Stage2Artifacts {
        denoiser,
        schedule,
        curve,
        final_accuracy,
    })
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub mode: crate::vq::CodebookMode,
    pub rank: usize,
    pub ade_rec: f64,
    pub accuracy: f64,
    pub ade_k: f64,
    pub fde_k: f64,
}

pub fn ablation_csv(cells: &[AblationCell]) -> String {
    let mut out = String::from("mode,rank,ade_rec,accuracy,ade_k,fde_k\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.mode, c.rank, c.ade_rec, c.accuracy, c.ade_k, c.fde_k
        ));
    }
    out
}

/// Full two-stage train + evaluate for every (mode, rank) cell of the grid.
pub fn run_ablation(
    scenes: &[Scene],
    cfg: &Config,
    modes: &[crate::vq::CodebookMode],
    ranks: &[usize],
    seed: u64,
) -> Result<Vec<AblationCell>> {
    if modes.is_empty() || ranks.is_empty() {
        return Err(Error::Config("ablation: empty grid".into()));
    }
    let mut cells = Vec::new();
    for &mode in modes {
        for &rank in ranks {
            let mut cell_cfg = cfg.clone();
            cell_cfg.vq.mode = mode;
            cell_cfg.vq.rank = rank;
            let stage1 = train_stage_one(scenes, &cell_cfg, seed)?;
            let stage2 = train_stage_two(scenes, &stage1, &cell_cfg, seed)?;
            let bundle = crate::sampler::ModelBundle {
                norm_scale: stage1.norm_scale,
                lambda: stage1.lambda,
                stage1: stage1.model,
                denoiser: stage2.denoiser,
                schedule: stage2.schedule,
            };
            let (report, _) =
                crate::sampler::evaluate_dataset(&bundle, scenes, &cfg.sampling, seed)?;
            cells.push(AblationCell {
                mode,
                rank,
                ade_rec: stage1.final_ade_rec,
                accuracy: stage2.final_accuracy,
                ade_k: report.aggregate_centroid.ade,
                fde_k: report.aggregate_centroid.fde,
            });
        }
    }
    Ok(cells)
}
