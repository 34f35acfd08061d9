//! Command-line driver for the two-stage forecasting pipeline.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use trajvq_core::checkpoint;
use trajvq_core::config::Config;
use trajvq_core::data;
use trajvq_core::sampler;
use trajvq_core::train;
use trajvq_core::vq::CodebookMode;

#[derive(Parser)]
#[command(
    name = "trajvq",
    version,
    about = "Trajectory forecasting with an instance-adapted vector-quantized autoencoder and a discrete diffusion prior"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file; omitted fields use built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for outputs (checkpoints, curves, tables).
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene file from the generator config.
    SynthData {
        #[command(flatten)]
        common: Common,
        /// Output scene file path.
        #[arg(long, default_value = "scenes.txt")]
        out: PathBuf,
    },
    /// Train the encoders, decoder and codebook (stage one).
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        /// Scene file to train on.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the diffusion prior against a frozen stage-one checkpoint.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Stage-one checkpoint path.
        #[arg(long)]
        stage1: PathBuf,
    },
    /// Sample, cluster and score a trained checkpoint pair.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        stage2: PathBuf,
        /// Guesses drawn per agent (overrides config).
        #[arg(long)]
        n: Option<usize>,
        /// Forecasts kept per agent (overrides config).
        #[arg(long)]
        k: Option<usize>,
        /// Comma-separated partial horizons in seconds (overrides config).
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<f64>>,
        /// Which sampling mode to report.
        #[arg(long, default_value = "both", value_parser = ["centroid", "uniform", "both"])]
        mode: String,
    },
    /// Run the codebook-mode x rank ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated codebook modes.
        #[arg(long, value_delimiter = ',', default_values_t = [
            "static".to_string(), "full_rank".to_string(), "low_rank".to_string()
        ])]
        modes: Vec<String>,
        /// Comma-separated ranks.
        #[arg(long, value_delimiter = ',', default_values_t = [4usize, 16usize])]
        ranks: Vec<usize>,
    },
}

fn load_config(common: &Common) -> Result<Config> {
    match &common.config {
        Some(path) => Ok(Config::load(path)?),
        None => Ok(Config::default()),
    }
}

fn prepare_out_dir(common: &Common) -> Result<()> {
    std::fs::create_dir_all(&common.out_dir)
        .with_context(|| format!("creating {}", common.out_dir.display()))
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::SynthData { common, out } => {
            let cfg = load_config(&common)?;
            let scenes = data::synthesize_dataset(&cfg.generator, common.seed)?;
            data::save_scenes(&scenes, &out)?;
            println!("wrote {} scenes to {}", scenes.len(), out.display());
            Ok(())
        }
        Command::TrainStage1 {
            common,
            data: data_path,
        } => {
            let cfg = load_config(&common)?;
            prepare_out_dir(&common)?;
            let scenes = data::load_scenes(&data_path)?;
            let frame_interval = scenes
                .first()
                .map(|s| s.frame_interval)
                .unwrap_or(cfg.generator.frame_interval);
            let artifacts = train::train_stage_one_with_checkpoints(
                &scenes,
                &cfg,
                common.seed,
                Some(&common.out_dir),
            )?;
            let ckpt_path = common.out_dir.join("stage1.json");
            let id = checkpoint::save_stage1(
                &ckpt_path,
                &artifacts.model,
                artifacts.lambda,
                artifacts.norm_scale,
                frame_interval,
            )?;
            std::fs::write(
                common.out_dir.join("stage1_curve.csv"),
                train::stage1_curve_csv(&artifacts.curve),
            )?;
            // Usage histogram over the training set with the final weights.
            let normalized: Vec<_> = scenes
                .iter()
                .map(|s| data::normalize(s, artifacts.norm_scale).0)
                .collect();
            let mut indices = Vec::new();
            for scene in &normalized {
                let (tokens, _) = artifacts.model.encode_tokens(scene, artifacts.lambda)?;
                indices.extend(tokens.into_iter().flatten());
            }
            let usage = trajvq_core::vq::codebook_usage(indices, cfg.vq.codewords);
            std::fs::write(common.out_dir.join("codebook_usage.csv"), usage.to_csv())?;
            println!(
                "stage one done: {} steps, reconstruction ADE {:.6}, checkpoint {} ({})",
                artifacts.steps_run,
                artifacts.final_ade_rec,
                ckpt_path.display(),
                id
            );
            Ok(())
        }
        Command::TrainStage2 {
            common,
            data: data_path,
            stage1,
        } => {
            let cfg = load_config(&common)?;
            prepare_out_dir(&common)?;
            let scenes = data::load_scenes(&data_path)?;
            let (model, meta) = checkpoint::load_stage1(&stage1)?;
            let stage1_artifacts = train::Stage1Artifacts {
                model,
                lambda: meta.lambda,
                norm_scale: meta.norm_scale,
                curve: Vec::new(),
                steps_run: 0,
                final_ade_rec: f64::NAN,
            };
            let artifacts = train::train_stage_two(&scenes, &stage1_artifacts, &cfg, common.seed)?;
            let ckpt_path = common.out_dir.join("stage2.json");
            let id = checkpoint::save_stage2(
                &ckpt_path,
                &artifacts.denoiser,
                &cfg.encoder,
                &cfg.diffusion,
                &meta.id,
            )?;
            std::fs::write(
                common.out_dir.join("stage2_curve.csv"),
                train::stage2_curve_csv(&artifacts.curve),
            )?;
            println!(
                "stage two done: token accuracy {:.4}, checkpoint {} ({})",
                artifacts.final_accuracy,
                ckpt_path.display(),
                id
            );
            Ok(())
        }
        Command::Evaluate {
            common,
            data: data_path,
            stage1,
            stage2,
            n,
            k,
            horizons,
            mode,
        } => {
            let mut cfg = load_config(&common)?;
            prepare_out_dir(&common)?;
            if let Some(n) = n {
                cfg.sampling.n_guesses = n;
            }
            if let Some(k) = k {
                cfg.sampling.k_predictions = k;
            }
            if let Some(h) = horizons {
                cfg.sampling.horizons = h;
            }
            cfg.sampling.validate()?;
            let scenes = data::load_scenes(&data_path)?;
            if scenes.is_empty() {
                bail!("no scenes in {}", data_path.display());
            }
            let bundle = checkpoint::load_bundle(&stage1, &stage2)?;
            let (report, trajectories) =
                sampler::evaluate_dataset(&bundle, &scenes, &cfg.sampling, common.seed)?;
            std::fs::write(common.out_dir.join("per_scene.csv"), report.per_scene_csv())?;
            std::fs::write(common.out_dir.join("aggregate.csv"), report.aggregate_csv())?;
            std::fs::write(
                common.out_dir.join("plot_data.csv"),
                sampler::plot_data_csv(&scenes, &trajectories),
            )?;
            let k_count = cfg.sampling.k_predictions;
            let print_mode = |name: &str, rec: &sampler::MetricsRecord| {
                println!(
                    "{name}: ADE_{k_count} {:.6}  FDE_{k_count} {:.6}",
                    rec.ade, rec.fde
                );
                for h in &rec.partial {
                    println!(
                        "  {}s: ADE {:.6}  FDE {:.6}",
                        h.horizon_seconds, h.ade, h.fde
                    );
                }
            };
            if mode != "uniform" {
                print_mode("centroid", &report.aggregate_centroid);
            }
            if mode != "centroid" {
                print_mode("uniform", &report.aggregate_uniform);
            }
            Ok(())
        }
        Command::Ablate {
            common,
            data: data_path,
            modes,
            ranks,
        } => {
            let cfg = load_config(&common)?;
            prepare_out_dir(&common)?;
            let scenes = data::load_scenes(&data_path)?;
            let modes: Vec<CodebookMode> = modes
                .iter()
                .map(|m| m.parse())
                .collect::<trajvq_core::Result<_>>()?;
            let cells = train::run_ablation(&scenes, &cfg, &modes, &ranks, common.seed)?;
            let table = train::ablation_csv(&cells);
            std::fs::write(common.out_dir.join("ablation.csv"), &table)?;
            print!("{table}");
            Ok(())
        }
    }
}
