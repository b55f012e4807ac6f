use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use evslam_core::dataset::Dataset;
use evslam_core::io;
use evslam_core::par::configure_threads;
use evslam_core::pipeline::{self, MetricsReport, PipelineConfig, SceneKind, Timings};

#[derive(Parser)]
#[command(name = "evslam", version, about = "Event-camera visual-inertial tracking and dense mapping")]
struct Cli {
    /// TOML configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for the parallel kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run every kernel sequentially.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Source {
    /// Dataset directory; simulated from the configuration when omitted.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Seed of the simulated dataset.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_scene)]
        scene: Option<SceneKind>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Track a dataset and write the trajectory.
    Track(Source),
    /// Map a dataset from given body poses (ground truth by default).
    Map {
        #[command(flatten)]
        source: Source,
        /// TUM trajectory of body poses.
        #[arg(long)]
        poses: Option<PathBuf>,
    },
    /// Tracking and mapping on two threads.
    Slam(Source),
    /// Trajectory error and optional depth error of stored results.
    Evaluate {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        groundtruth: PathBuf,
        /// Estimated and ground-truth depth maps (PFM).
        #[arg(long, num_args = 2, value_names = ["ESTIMATE", "TRUTH"])]
        depth: Option<Vec<PathBuf>>,
    },
    /// Print the effective configuration as TOML.
    PrintConfig,
}

fn parse_scene(s: &str) -> std::result::Result<SceneKind, String> {
    match s {
        "room" => Ok(SceneKind::Room),
        "stripes" => Ok(SceneKind::Stripes),
        "wall" => Ok(SceneKind::Wall),
        other => Err(format!("unknown scene '{other}' (room, stripes, wall)")),
    }
}

fn load_dataset(config: &PipelineConfig, source: &Source) -> Result<Dataset> {
    let dir = source.dataset.as_ref().or(config.dataset.as_ref());
    match dir {
        Some(dir) => Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display())),
        None => {
            let mut sim = config.simulate.clone();
            if let Some(seed) = source.seed {
                sim.seed = seed;
            }
            log::info!("simulating {:?} scene for {} s", sim.scene, sim.duration);
            Ok(sim.rig().generate(config.exec())?)
        }
    }
}

fn output_dir(config: &PipelineConfig, source: &Source) -> Result<PathBuf> {
    let out = source.out.clone().or_else(|| config.output.clone()).unwrap_or_else(|| PathBuf::from("evslam_out"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn finish(out: &Path, report: MetricsReport) -> Result<()> {
    let path = pipeline::write_metrics(out, &report)?;
    if let Some(ate) = report.ate {
        println!("ATE {ate:.4} m ({:.2}% of trajectory)", report.ate_percent.unwrap_or(f64::NAN));
    }
    if let Some(d) = report.dense {
        println!("dense depth: mean error {:.4} m, density {:.1}%", d.mean_error, d.density);
    }
    if report.reference_views > 0 || report.skipped_reference_views > 0 {
        println!(
            "{} reference views ({} skipped), mesh {} vertices / {} triangles",
            report.reference_views, report.skipped_reference_views, report.mesh_vertices, report.mesh_triangles
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if cli.sequential {
        config.parallel = false;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        configure_threads(n)?;
    }
    match cli.command {
        Command::PrintConfig => print!("{}", config.to_toml()),
        Command::Simulate { out, scene, duration, seed } => {
            let sim = &mut config.simulate;
            sim.scene = scene.unwrap_or(sim.scene);
            sim.duration = duration.unwrap_or(sim.duration);
            sim.seed = seed.unwrap_or(sim.seed);
            config.validate()?;
            let dataset = config.simulate.rig().generate(config.exec())?;
            dataset.save(&out)?;
            println!("wrote {} events, {} frames to {}", dataset.events.len(), dataset.frames.len(), out.display());
        }
        Command::Track(source) => {
            let dataset = load_dataset(&config, &source)?;
            let out = output_dir(&config, &source)?;
            let (tracking, timings) = pipeline::run_tracking(&dataset, &config)?;
            pipeline::write_tracking(&out, &tracking)?;
            finish(&out, MetricsReport::new(&dataset, Some(&tracking), None, &timings)?)?;
        }
        Command::Map { source, poses } => {
            let dataset = load_dataset(&config, &source)?;
            let out = output_dir(&config, &source)?;
            let trajectory = match poses {
                Some(p) => io::read_tum(&p)?,
                None if !dataset.groundtruth.is_empty() => dataset.groundtruth_pairs(),
                None => bail!("the dataset has no ground truth; pass --poses"),
            };
            let mapping = pipeline::run_mapping(&dataset, &config, &trajectory)?;
            pipeline::write_mapping(&out, &mapping)?;
            finish(&out, MetricsReport::new(&dataset, None, Some(&mapping), &mapping.timings)?)?;
        }
        Command::Slam(source) => {
            let dataset = load_dataset(&config, &source)?;
            let out = output_dir(&config, &source)?;
            let (tracking, mapping, tracking_timings) = pipeline::run_slam(&dataset, &config)?;
            pipeline::write_tracking(&out, &tracking)?;
            pipeline::write_mapping(&out, &mapping)?;
            let mut timings = Timings::default();
            timings.merge(tracking_timings);
            timings.merge(mapping.timings.clone());
            finish(&out, MetricsReport::new(&dataset, Some(&tracking), Some(&mapping), &timings)?)?;
        }
        Command::Evaluate { estimate, groundtruth, depth } => {
            let depth = depth.as_deref().map(|d| (d[0].as_path(), d[1].as_path()));
            let report = pipeline::evaluate_files(&estimate, &groundtruth, depth)?;
            println!("{}", report.to_json());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
