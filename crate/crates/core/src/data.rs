//! Scene data model, file ingestion, normalization, rotation augmentation
//! and the synthetic trajectory generator used in place of full-scale
//! tracking datasets.
//!
//! Scene files are line-delimited text. The first non-comment line is a
//! header `header,<t_past>,<t_future>,<frame_interval>`; every following
//! line is one observation `scene_id,agent_id,past|future,step,x,y`.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, StreamKind};

pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrack {
    pub agent_id: String,
    /// T_p observed positions.
    pub past: Vec<Point>,
    /// T future positions, contiguous with the past.
    pub future: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub agents: Vec<AgentTrack>,
    /// Seconds between consecutive steps.
    pub frame_interval: f64,
}

impl Scene {
    pub fn t_past(&self) -> usize {
        self.agents.first().map(|a| a.past.len()).unwrap_or(0)
    }

    pub fn t_future(&self) -> usize {
        self.agents.first().map(|a| a.future.len()).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.agents.is_empty() {
            return Err(Error::Data(format!(
                "scene {} has no agents",
                self.scene_id
            )));
        }
        let tp = self.t_past();
        let tf = self.t_future();
        if tp == 0 || tf == 0 {
            return Err(Error::Data(format!(
                "scene {} has empty past or future",
                self.scene_id
            )));
        }
        for agent in &self.agents {
            if agent.past.len() != tp || agent.future.len() != tf {
                return Err(Error::Data(format!(
                    "scene {} agent {}: lengths {}/{} do not match scene lengths {}/{}",
                    self.scene_id,
                    agent.agent_id,
                    agent.past.len(),
                    agent.future.len(),
                    tp,
                    tf
                )));
            }
            for p in agent.past.iter().chain(agent.future.iter()) {
                if !p[0].is_finite() || !p[1].is_finite() {
                    return Err(Error::Data(format!(
                        "scene {} agent {}: non-finite coordinate",
                        self.scene_id, agent.agent_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Centroid of every agent's past positions.
    pub fn past_centroid(&self) -> Point {
        let mut cx = 0.0;
        let mut cy = 0.0;
        let mut n = 0.0;
        for agent in &self.agents {
            for p in &agent.past {
                cx += p[0];
                cy += p[1];
                n += 1.0;
            }
        }
        [cx / n, cy / n]
    }
}

/// Per-scene translation plus the dataset-level scale used at training time.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NormalizationState {
    pub offset: Point,
    pub scale: f64,
}

impl NormalizationState {
    pub fn normalize_point(&self, p: Point) -> Point {
        [
            (p[0] - self.offset[0]) * self.scale,
            (p[1] - self.offset[1]) * self.scale,
        ]
    }

    pub fn denormalize_point(&self, p: Point) -> Point {
        [
            p[0] / self.scale + self.offset[0],
            p[1] / self.scale + self.offset[1],
        ]
    }
}

fn map_scene(scene: &Scene, f: impl Fn(Point) -> Point) -> Scene {
    Scene {
        scene_id: scene.scene_id.clone(),
        agents: scene
            .agents
            .iter()
            .map(|a| AgentTrack {
                agent_id: a.agent_id.clone(),
                past: a.past.iter().map(|&p| f(p)).collect(),
                future: a.future.iter().map(|&p| f(p)).collect(),
            })
            .collect(),
        frame_interval: scene.frame_interval,
    }
}

/// Root-mean-square single-step past displacement across a dataset.
/// Returns 1.0 for a dataset with no motion so scaling stays a no-op.
pub fn rms_past_displacement(scenes: &[Scene]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for scene in scenes {
        for agent in &scene.agents {
            for w in agent.past.windows(2) {
                let dx = w[1][0] - w[0][0];
                let dy = w[1][1] - w[0][1];
                sum += dx * dx + dy * dy;
                n += 1.0;
            }
        }
    }
    if n == 0.0 || sum == 0.0 {
        1.0
    } else {
        (sum / n).sqrt()
    }
}

/// Fit the dataset-level scale: after scaling, RMS past displacement is 1.
pub fn fit_scale(scenes: &[Scene]) -> f64 {
    1.0 / rms_past_displacement(scenes)
}

/// Translate a scene by the negative centroid of its past points and apply
/// the dataset-level scale.
pub fn normalize(scene: &Scene, scale: f64) -> (Scene, NormalizationState) {
    let state = NormalizationState {
        offset: scene.past_centroid(),
        scale,
    };
    (map_scene(scene, |p| state.normalize_point(p)), state)
}

pub fn denormalize(scene: &Scene, state: &NormalizationState) -> Scene {
    map_scene(scene, |p| state.denormalize_point(p))
}

/// Rotate every point of the scene by `theta_deg` degrees about the scene's
/// past centroid. Deterministic core of the augmentation.
pub fn rotate_scene_by(scene: &Scene, theta_deg: f64) -> Scene {
    let c = scene.past_centroid();
    let rad = theta_deg.to_radians();
    let (sin, cos) = rad.sin_cos();
    map_scene(scene, |p| {
        let dx = p[0] - c[0];
        let dy = p[1] - c[1];
        [c[0] + cos * dx - sin * dy, c[1] + sin * dx + cos * dy]
    })
}

/// Rotate a scene by one shared random angle in [0, theta_max] degrees.
pub fn rotate_augment(scene: &Scene, theta_max: f64, rng: &mut ChaCha12Rng) -> Result<Scene> {
    if !(0.0..=180.0).contains(&theta_max) {
        return Err(Error::Data(format!(
            "rotation bound {theta_max} degrees outside [0, 180]"
        )));
    }
    if theta_max == 0.0 {
        return Ok(scene.clone());
    }
    let theta = rng.random_range(0.0..theta_max);
    Ok(rotate_scene_by(scene, theta))
}

// ---------------------------------------------------------------------------
// Scene file format
// ---------------------------------------------------------------------------

pub fn save_scenes(scenes: &[Scene], path: &Path) -> Result<()> {
    // One header per file: every scene must share the declared geometry.
    if let Some(first) = scenes.first() {
        for scene in scenes {
            if scene.t_past() != first.t_past()
                || scene.t_future() != first.t_future()
                || scene.frame_interval != first.frame_interval
            {
                return Err(Error::Data(format!(
                    "scene {} does not match the file geometry {}/{}@{}",
                    scene.scene_id,
                    first.t_past(),
                    first.t_future(),
                    first.frame_interval
                )));
            }
        }
    }
    std::fs::write(path, format_scenes(scenes))?;
    Ok(())
}

pub fn format_scenes(scenes: &[Scene]) -> String {
    let mut out = String::new();
    if let Some(first) = scenes.first() {
        let _ = writeln!(
            out,
            "header,{},{},{}",
            first.t_past(),
            first.t_future(),
            first.frame_interval
        );
    }
    for scene in scenes {
        for agent in &scene.agents {
            for (i, p) in agent.past.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},past,{},{},{}",
                    scene.scene_id, agent.agent_id, i, p[0], p[1]
                );
            }
            for (i, p) in agent.future.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},future,{},{},{}",
                    scene.scene_id, agent.agent_id, i, p[0], p[1]
                );
            }
        }
    }
    out
}

pub fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    parse_scenes(&std::fs::read_to_string(path)?)
}

struct PartialTrack {
    agent_id: String,
    past: Vec<Option<Point>>,
    future: Vec<Option<Point>>,
}

pub fn parse_scenes(text: &str) -> Result<Vec<Scene>> {
    let mut header: Option<(usize, usize, f64)> = None;
    // Scene and agent order follow first appearance in the file.
    let mut scenes: Vec<(String, Vec<PartialTrack>)> = Vec::new();

    for (line_no, raw) in text.lines().enumerate() {
        let line_no = line_no + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let fail = |msg: String| Error::SceneFormat { line: line_no, msg };
        if header.is_none() {
            if fields.len() != 4 || fields[0] != "header" {
                return Err(fail(format!(
                    "expected `header,<t_past>,<t_future>,<frame_interval>`, got `{line}`"
                )));
            }
            let tp: usize = fields[1]
                .parse()
                .map_err(|_| fail(format!("bad t_past `{}`", fields[1])))?;
            let tf: usize = fields[2]
                .parse()
                .map_err(|_| fail(format!("bad t_future `{}`", fields[2])))?;
            let dt: f64 = fields[3]
                .parse()
                .map_err(|_| fail(format!("bad frame_interval `{}`", fields[3])))?;
            if tp == 0 || tf == 0 || !(dt.is_finite() && dt > 0.0) {
                return Err(fail("header lengths must be positive".to_string()));
            }
            header = Some((tp, tf, dt));
            continue;
        }
        let (tp, tf, _) = header.unwrap();
        if fields.len() != 6 {
            return Err(fail(format!("expected 6 fields, got {}", fields.len())));
        }
        let scene_id = fields[0].to_string();
        let agent_id = fields[1].to_string();
        let role = fields[2];
        let step: usize = fields[3]
            .parse()
            .map_err(|_| fail(format!("bad step `{}`", fields[3])))?;
        let x: f64 = fields[4]
            .parse()
            .map_err(|_| fail(format!("bad x `{}`", fields[4])))?;
        let y: f64 = fields[5]
            .parse()
            .map_err(|_| fail(format!("bad y `{}`", fields[5])))?;
        if !x.is_finite() || !y.is_finite() {
            return Err(fail("non-finite coordinate".to_string()));
        }

        let scene = match scenes.iter_mut().find(|(id, _)| *id == scene_id) {
            Some(s) => s,
            None => {
                scenes.push((scene_id.clone(), Vec::new()));
                scenes.last_mut().unwrap()
            }
        };
        let track = match scene.1.iter_mut().find(|t| t.agent_id == agent_id) {
            Some(t) => t,
            None => {
                scene.1.push(PartialTrack {
                    agent_id: agent_id.clone(),
                    past: vec![None; tp],
                    future: vec![None; tf],
                });
                scene.1.last_mut().unwrap()
            }
        };
        let slot = match role {
            "past" => track.past.get_mut(step).ok_or_else(|| {
                fail(format!(
                    "agent {agent_id}: past step {step} outside 0..{tp}"
                ))
            })?,
            "future" => track.future.get_mut(step).ok_or_else(|| {
                fail(format!(
                    "agent {agent_id}: future step {step} outside 0..{tf}"
                ))
            })?,
            other => return Err(fail(format!("unknown role `{other}`"))),
        };
        if slot.is_some() {
            return Err(fail(format!(
                "agent {agent_id}: duplicate {role} step {step}"
            )));
        }
        *slot = Some([x, y]);
    }

    let Some((tp, tf, dt)) = header else {
        return Ok(Vec::new());
    };

    let mut out = Vec::with_capacity(scenes.len());
    for (scene_id, tracks) in scenes {
        let mut agents = Vec::with_capacity(tracks.len());
        for track in tracks {
            let missing_past = track.past.iter().filter(|p| p.is_none()).count();
            let missing_future = track.future.iter().filter(|p| p.is_none()).count();
            if missing_past > 0 || missing_future > 0 {
                return Err(Error::Data(format!(
                    "scene {scene_id} agent {}: has {}/{tp} past and {}/{tf} future points",
                    track.agent_id,
                    tp - missing_past,
                    tf - missing_future
                )));
            }
            agents.push(AgentTrack {
                agent_id: track.agent_id,
                past: track.past.into_iter().map(Option::unwrap).collect(),
                future: track.future.into_iter().map(Option::unwrap).collect(),
            });
        }
        let scene = Scene {
            scene_id,
            agents,
            frame_interval: dt,
        };
        scene.validate()?;
        out.push(scene);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub scenes: usize,
    pub agents_min: usize,
    pub agents_max: usize,
    pub t_past: usize,
    pub t_future: usize,
    pub frame_interval: f64,
    /// Weights for the three motion primitives:
    /// constant velocity, constant-turn arc, stationary jitter.
    pub mix: [f64; 3],
    /// Standard deviation of per-step Gaussian position noise.
    pub noise_sigma: f64,
    /// Half-width of the starting-position box.
    pub span: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Max |turn rate| in radians per step for the arc primitive.
    pub turn_rate_max: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            scenes: 16,
            agents_min: 1,
            agents_max: 3,
            t_past: 8,
            t_future: 12,
            frame_interval: 0.4,
            mix: [0.45, 0.35, 0.2],
            noise_sigma: 0.02,
            span: 10.0,
            speed_min: 0.2,
            speed_max: 1.5,
            turn_rate_max: 0.35,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 {
            return Err(Error::Config(
                "generator: scene count must be positive".into(),
            ));
        }
        if self.agents_min == 0 || self.agents_max < self.agents_min {
            return Err(Error::Config("generator: invalid agent count range".into()));
        }
        if self.t_past == 0 || self.t_future == 0 {
            return Err(Error::Config(
                "generator: trajectory lengths must be positive".into(),
            ));
        }
        if self.mix.iter().any(|&w| w < 0.0) || self.mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(
                "generator: motion mix weights must be non-negative and not all zero".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config(
                "generator: noise sigma must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum MotionPrimitive {
    ConstantVelocity {
        start: Point,
        velocity: Point,
    },
    ConstantTurn {
        start: Point,
        speed: f64,
        heading: f64,
        turn_rate: f64,
    },
    Stationary {
        start: Point,
    },
}

/// Noiseless positions at steps 0..len for one primitive.
pub fn primitive_positions(primitive: &MotionPrimitive, len: usize) -> Vec<Point> {
    match *primitive {
        MotionPrimitive::ConstantVelocity { start, velocity } => (0..len)
            .map(|t| {
                let tf = t as f64;
                [start[0] + velocity[0] * tf, start[1] + velocity[1] * tf]
            })
            .collect(),
        MotionPrimitive::ConstantTurn {
            start,
            speed,
            heading,
            turn_rate,
        } => {
            let mut pos = start;
            let mut h = heading;
            let mut out = Vec::with_capacity(len);
            out.push(pos);
            for _ in 1..len {
                pos = [pos[0] + speed * h.cos(), pos[1] + speed * h.sin()];
                h += turn_rate;
                out.push(pos);
            }
            out
        }
        MotionPrimitive::Stationary { start } => vec![start; len],
    }
}

/// Draw deterministic synthetic scenes from the three motion primitives.
pub fn synthesize_dataset(cfg: &GeneratorConfig, seed: u64) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let mut scenes = Vec::with_capacity(cfg.scenes);
    for s in 0..cfg.scenes {
        let mut rng = stream(seed, StreamKind::DataGen, s as u64);
        let n_agents = rng.random_range(cfg.agents_min..=cfg.agents_max);
        let len = cfg.t_past + cfg.t_future;
        let mut agents = Vec::with_capacity(n_agents);
        for a in 0..n_agents {
            let start = [
                rng.random_range(-cfg.span..cfg.span),
                rng.random_range(-cfg.span..cfg.span),
            ];
            let kind = crate::rng::sample_categorical(&mut rng, &cfg.mix);
            let primitive = match kind {
                0 => {
                    let heading = rng.random_range(0.0..std::f64::consts::TAU);
                    let speed = rng.random_range(cfg.speed_min..cfg.speed_max);
                    MotionPrimitive::ConstantVelocity {
                        start,
                        velocity: [speed * heading.cos(), speed * heading.sin()],
                    }
                }
                1 => MotionPrimitive::ConstantTurn {
                    start,
                    speed: rng.random_range(cfg.speed_min..cfg.speed_max),
                    heading: rng.random_range(0.0..std::f64::consts::TAU),
                    turn_rate: rng.random_range(-cfg.turn_rate_max..cfg.turn_rate_max),
                },
                _ => MotionPrimitive::Stationary { start },
            };
            let mut points = primitive_positions(&primitive, len);
            if cfg.noise_sigma > 0.0 {
                let normal = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
                for p in points.iter_mut() {
                    p[0] += normal.sample(&mut rng);
                    p[1] += normal.sample(&mut rng);
                }
            }
            agents.push(AgentTrack {
                agent_id: format!("a{a}"),
                past: points[..cfg.t_past].to_vec(),
                future: points[cfg.t_past..].to_vec(),
            });
        }
        scenes.push(Scene {
            scene_id: format!("synth-{s:03}"),
            agents,
            frame_interval: cfg.frame_interval,
        });
    }
    Ok(scenes)
}
