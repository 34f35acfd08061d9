//! Multi-modal generation and evaluation: draw N raw trajectory guesses per
//! agent, condense them into K representatives with k-means over flattened
//! trajectories, and score with best-of-K ADE/FDE at the full horizon and at
//! configured partial horizons.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::diffusion::{sample_tokens, Denoiser, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::model::Stage1Model;
use crate::rng::{stream2, StreamKind};

pub type Trajectory = Vec<[f64; 2]>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// Raw guesses drawn per agent.
    pub n_guesses: usize,
    /// Final forecast count (cluster count).
    pub k_predictions: usize,
    /// Partial evaluation horizons in seconds.
    pub horizons: Vec<f64>,
    pub kmeans_max_iters: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            n_guesses: 200,
            k_predictions: 20,
            horizons: vec![1.0, 2.0, 3.0, 4.0],
            kmeans_max_iters: 100,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_predictions == 0 || self.n_guesses == 0 {
            return Err(Error::Config("sampling: counts must be positive".into()));
        }
        if self.k_predictions > self.n_guesses {
            return Err(Error::Config(format!(
                "sampling: K={} exceeds N={}",
                self.k_predictions, self.n_guesses
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// K-means over flattened trajectories
// ---------------------------------------------------------------------------

pub struct KMeansResult {
    /// K centroids, each a flattened 2T-vector.
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index per input point.
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squared distances at termination.
    pub objective: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    (best, best_d)
}

/// Farthest-point initialization: a seeded uniform first pick, then greedily
/// the point with maximal distance to its nearest chosen centroid.
fn farthest_point_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha12Rng) -> Vec<Vec<f64>> {
    let mut centroids = Vec::with_capacity(k);
    let first = rng.random_range(0..points.len());
    centroids.push(points[first].clone());
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let mut best = 0;
        let mut best_d = -1.0;
        for (i, &d) in dist.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        centroids.push(points[best].clone());
        for (d, p) in dist.iter_mut().zip(points.iter()) {
            let nd = sq_dist(p, centroids.last().unwrap());
            if nd < *d {
                *d = nd;
            }
        }
    }
    centroids
}

/// Lloyd's algorithm with farthest-point init. Runs until the assignment
/// and centroids reach a fixpoint or `max_iters` passes elapse. An empty
/// cluster is re-seeded to the point farthest from that cluster's centroid.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    max_iters: usize,
    rng: &mut ChaCha12Rng,
) -> Result<KMeansResult> {
    if k == 0 || points.is_empty() {
        return Err(Error::invalid(
            "kmeans",
            "need at least one point and one cluster",
        ));
    }
    if k > points.len() {
        return Err(Error::invalid(
            "kmeans",
            format!("cluster count {k} exceeds point count {}", points.len()),
        ));
    }
    let dim = points[0].len();
    let mut centroids = farthest_point_init(points, k, rng);
    let mut assignments = vec![usize::MAX; points.len()];

    for _ in 0..max_iters.max(1) {
        let mut new_assignments = Vec::with_capacity(points.len());
        for p in points {
            let (i, _) = nearest_centroid(p, &centroids);
            new_assignments.push(i);
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(new_assignments.iter()) {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        let mut new_centroids = Vec::with_capacity(k);
        for i in 0..k {
            if counts[i] > 0 {
                new_centroids.push(sums[i].iter().map(|&s| s / counts[i] as f64).collect());
            } else {
                // Re-seed to the point farthest from this cluster's centroid.
                let mut far = 0;
                let mut far_d = -1.0;
                for (j, p) in points.iter().enumerate() {
                    let d = sq_dist(p, &centroids[i]);
                    if d > far_d {
                        far_d = d;
                        far = j;
                    }
                }
                new_centroids.push(points[far].clone());
            }
        }

        let converged = new_assignments == assignments && new_centroids == centroids;
        assignments = new_assignments;
        centroids = new_centroids;
        if converged {
            break;
        }
    }

    // Final assignment against the final centroids so the reported pairing
    // is consistent.
    let mut objective = 0.0;
    for (p, a) in points.iter().zip(assignments.iter_mut()) {
        let (i, d) = nearest_centroid(p, &centroids);
        *a = i;
        objective += d;
    }
    Ok(KMeansResult {
        centroids,
        assignments,
        objective,
    })
}

// ---------------------------------------------------------------------------
// Displacement metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HorizonMetrics {
    pub horizon_seconds: f64,
    pub ade: f64,
    pub fde: f64,
}

/// Best-of-K displacement record for one agent.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub ade: f64,
    pub fde: f64,
    pub partial: Vec<HorizonMetrics>,
}

fn ade_prefix(prediction: &Trajectory, truth: &Trajectory, steps: usize) -> f64 {
    let mut total = 0.0;
    for t in 0..steps {
        let p = prediction[t];
        let q = truth[t];
        total += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
    }
    total / steps as f64
}

fn fde_at(prediction: &Trajectory, truth: &Trajectory, step: usize) -> f64 {
    let p = prediction[step - 1];
    let q = truth[step - 1];
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

fn min_over<'a>(
    predictions: impl Iterator<Item = &'a Trajectory>,
    f: impl Fn(&Trajectory) -> f64,
) -> f64 {
    predictions.map(f).fold(f64::INFINITY, f64::min)
}

/// Best-of-K ADE/FDE over the full horizon and each partial horizon.
/// The minimizing candidate may differ between metrics and horizons.
pub fn displacement_metrics(
    predictions: &[Trajectory],
    truth: &Trajectory,
    horizons: &[f64],
    frame_interval: f64,
) -> Result<MetricsRecord> {
    if predictions.is_empty() {
        return Err(Error::Evaluation("no predictions to score".into()));
    }
    let t = truth.len();
    for p in predictions {
        if p.len() != t {
            return Err(Error::Evaluation(format!(
                "prediction of {} steps against {t}-step truth",
                p.len()
            )));
        }
    }
    let ade = min_over(predictions.iter(), |p| ade_prefix(p, truth, t));
    let fde = min_over(predictions.iter(), |p| fde_at(p, truth, t));
    let mut partial = Vec::with_capacity(horizons.len());
    for &h in horizons {
        let steps = (h / frame_interval).round() as isize;
        if steps < 1 || steps as usize > t {
            return Err(Error::Evaluation(format!(
                "horizon {h}s is {steps} steps, outside 1..={t}"
            )));
        }
        let steps = steps as usize;
        partial.push(HorizonMetrics {
            horizon_seconds: h,
            ade: min_over(predictions.iter(), |p| ade_prefix(p, truth, steps)),
            fde: min_over(predictions.iter(), |p| fde_at(p, truth, steps)),
        });
    }
    Ok(MetricsRecord { ade, fde, partial })
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Trained stage-one + stage-two pair, ready for sampling.
pub struct ModelBundle {
    pub stage1: Stage1Model,
    pub denoiser: Denoiser,
    pub schedule: DiffusionSchedule,
    /// Mix weight of the instance update, as reached during stage one.
    pub lambda: f64,
    pub norm_scale: f64,
}

/// N decoded guesses per agent for one scene, in original coordinates.
/// Each sampling pass denoises the whole scene jointly, so one pass yields
/// one guess per agent.
pub fn generate_guesses(
    bundle: &ModelBundle,
    scene: &Scene,
    n: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<Vec<Trajectory>>> {
    let _guard = crate::tensor::no_grad();
    let (normalized, state) = crate::data::normalize(scene, bundle.norm_scale);
    let h_ctx: Vec<_> = bundle
        .stage1
        .context_features(&normalized)?
        .iter()
        .map(|h| h.detach())
        .collect();
    let mut guesses: Vec<Vec<Trajectory>> = vec![Vec::with_capacity(n); scene.agents.len()];
    for _ in 0..n {
        let tokens = sample_tokens(&bundle.denoiser, &bundle.schedule, &h_ctx, rng)?;
        let decoded = bundle
            .stage1
            .decode_tokens(&tokens, &h_ctx, bundle.lambda)?;
        for (agent, trajectory) in decoded.into_iter().enumerate() {
            guesses[agent].push(
                trajectory
                    .into_iter()
                    .map(|p| state.denormalize_point(p))
                    .collect(),
            );
        }
    }
    Ok(guesses)
}

/// Reduce N guesses to K centroid trajectories.
pub fn kmeans_reduce(
    guesses: &[Trajectory],
    k: usize,
    max_iters: usize,
    rng: &mut ChaCha12Rng,
) -> Result<(Vec<Trajectory>, Vec<usize>)> {
    let flattened: Vec<Vec<f64>> = guesses
        .iter()
        .map(|g| g.iter().flat_map(|p| [p[0], p[1]]).collect())
        .collect();
    let result = kmeans(&flattened, k, max_iters, rng)?;
    let centroids = result
        .centroids
        .iter()
        .map(|c| c.chunks(2).map(|p| [p[0], p[1]]).collect())
        .collect();
    Ok((centroids, result.assignments))
}

// ---------------------------------------------------------------------------
// Dataset evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AgentEvaluation {
    pub scene_id: String,
    pub agent_id: String,
    /// Scored on the K k-means centroids.
    pub centroid: MetricsRecord,
    /// Scored on the first K raw guesses, no clustering.
    pub uniform: MetricsRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvaluationReport {
    pub per_agent: Vec<AgentEvaluation>,
    pub aggregate_centroid: MetricsRecord,
    pub aggregate_uniform: MetricsRecord,
}

fn mean_records(records: &[&MetricsRecord]) -> MetricsRecord {
    let n = records.len() as f64;
    let horizons = &records[0].partial;
    MetricsRecord {
        ade: records.iter().map(|r| r.ade).sum::<f64>() / n,
        fde: records.iter().map(|r| r.fde).sum::<f64>() / n,
        partial: (0..horizons.len())
            .map(|i| HorizonMetrics {
                horizon_seconds: horizons[i].horizon_seconds,
                ade: records.iter().map(|r| r.partial[i].ade).sum::<f64>() / n,
                fde: records.iter().map(|r| r.partial[i].fde).sum::<f64>() / n,
            })
            .collect(),
    }
}

/// Per-scene trajectories kept for the plot-data export.
pub struct SceneTrajectories {
    pub scene_id: String,
    pub agent_ids: Vec<String>,
    pub guesses: Vec<Vec<Trajectory>>,
    pub centroids: Vec<Vec<Trajectory>>,
}

/// Evaluate every agent of every scene under the best-of-K protocol, in both
/// centroid and uniform (first-K) modes. Scenes run in parallel on
/// independent seeded streams; aggregation is an unweighted mean over agents.
pub fn evaluate_dataset(
    bundle: &ModelBundle,
    scenes: &[Scene],
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<(EvaluationReport, Vec<SceneTrajectories>)> {
    cfg.validate()?;
    let outputs: Vec<Result<(Vec<AgentEvaluation>, SceneTrajectories)>> = scenes
        .par_iter()
        .enumerate()
        .map(|(scene_idx, scene)| {
            let mut gen_rng = stream2(seed, StreamKind::Sample, scene_idx as u64, 0);
            let guesses = generate_guesses(bundle, scene, cfg.n_guesses, &mut gen_rng)?;
            let mut evals = Vec::with_capacity(scene.agents.len());
            let mut centroid_sets = Vec::with_capacity(scene.agents.len());
            for (agent_idx, agent) in scene.agents.iter().enumerate() {
                let mut km_rng =
                    stream2(seed, StreamKind::Eval, scene_idx as u64, agent_idx as u64);
                let (centroids, _) = kmeans_reduce(
                    &guesses[agent_idx],
                    cfg.k_predictions,
                    cfg.kmeans_max_iters,
                    &mut km_rng,
                )?;
                let centroid = displacement_metrics(
                    &centroids,
                    &agent.future,
                    &cfg.horizons,
                    scene.frame_interval,
                )?;
                let uniform = displacement_metrics(
                    &guesses[agent_idx][..cfg.k_predictions],
                    &agent.future,
                    &cfg.horizons,
                    scene.frame_interval,
                )?;
                evals.push(AgentEvaluation {
                    scene_id: scene.scene_id.clone(),
                    agent_id: agent.agent_id.clone(),
                    centroid,
                    uniform,
                });
                centroid_sets.push(centroids);
            }
            Ok((
                evals,
                SceneTrajectories {
                    scene_id: scene.scene_id.clone(),
                    agent_ids: scene.agents.iter().map(|a| a.agent_id.clone()).collect(),
                    guesses,
                    centroids: centroid_sets,
                },
            ))
        })
        .collect();

    let mut per_agent = Vec::new();
    let mut trajectories = Vec::new();
    for out in outputs {
        let (evals, trajs) = out?;
        per_agent.extend(evals);
        trajectories.push(trajs);
    }
    if per_agent.is_empty() {
        return Err(Error::Evaluation("no agents evaluated".into()));
    }
    let centroid_records: Vec<&MetricsRecord> = per_agent.iter().map(|e| &e.centroid).collect();
    let uniform_records: Vec<&MetricsRecord> = per_agent.iter().map(|e| &e.uniform).collect();
    let report = EvaluationReport {
        aggregate_centroid: mean_records(&centroid_records),
        aggregate_uniform: mean_records(&uniform_records),
        per_agent,
    };
    Ok((report, trajectories))
}

impl EvaluationReport {
    /// Per-agent table: one row per (agent, mode) pair.
    pub fn per_scene_csv(&self) -> String {
        let mut out = String::from("scene_id,agent_id,mode,ade,fde");
        if let Some(first) = self.per_agent.first() {
            for h in &first.centroid.partial {
                out.push_str(&format!(",ade_{0}s,fde_{0}s", h.horizon_seconds));
            }
        }
        out.push('\n');
        for e in &self.per_agent {
            for (mode, rec) in [("centroid", &e.centroid), ("uniform", &e.uniform)] {
                out.push_str(&format!(
                    "{},{},{mode},{},{}",
                    e.scene_id, e.agent_id, rec.ade, rec.fde
                ));
                for h in &rec.partial {
                    out.push_str(&format!(",{},{}", h.ade, h.fde));
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn aggregate_csv(&self) -> String {
        let mut out = String::from("mode,ade,fde");
        for h in &self.aggregate_centroid.partial {
            out.push_str(&format!(",ade_{0}s,fde_{0}s", h.horizon_seconds));
        }
        out.push('\n');
        for (mode, rec) in [
            ("centroid", &self.aggregate_centroid),
            ("uniform", &self.aggregate_uniform),
        ] {
            out.push_str(&format!("{mode},{},{}", rec.ade, rec.fde));
            for h in &rec.partial {
                out.push_str(&format!(",{},{}", h.ade, h.fde));
            }
            out.push('\n');
        }
        out
    }
}

/// Plot-data export: every guess, centroid, truth and past trajectory as
/// delimited text for external plotting.
pub fn plot_data_csv(scenes: &[Scene], trajectories: &[SceneTrajectories]) -> String {
    let mut out = String::from("scene_id,agent_id,kind,index,step,x,y\n");
    let mut push = |scene: &str, agent: &str, kind: &str, index: usize, traj: &Trajectory| {
        for (step, p) in traj.iter().enumerate() {
            out.push_str(&format!(
                "{scene},{agent},{kind},{index},{step},{},{}\n",
                p[0], p[1]
            ));
        }
    };
    for (scene, trajs) in scenes.iter().zip(trajectories.iter()) {
        for (a, agent) in scene.agents.iter().enumerate() {
            push(&scene.scene_id, &agent.agent_id, "past", 0, &agent.past);
            push(&scene.scene_id, &agent.agent_id, "truth", 0, &agent.future);
            for (i, g) in trajs.guesses[a].iter().enumerate() {
                push(&scene.scene_id, &agent.agent_id, "guess", i, g);
            }
            for (i, c) in trajs.centroids[a].iter().enumerate() {
                push(&scene.scene_id, &agent.agent_id, "centroid", i, c);
            }
        }
    }
    out
}
