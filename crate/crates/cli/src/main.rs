use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use geotag_core::eval::truncate_decimals;
use geotag_core::pipeline::synth::{generate, SynthParams};
use geotag_core::pipeline::{self, PipelineConfig};
use geotag_core::sfm::CorrectionMode;
use std::path::PathBuf;

/// Geotagging of street furniture from panorama detections.
#[derive(Parser)]
#[command(name = "geotag", version)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides where stage artifacts are read and written.
    #[arg(long)]
    stage_dir: Option<PathBuf>,
    /// Overrides the pose correction mode.
    #[arg(long)]
    mode: Option<CorrectionMode>,
}

impl RunArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.stage_dir {
            cfg.paths.stage_dir = Some(dir.clone());
        }
        if let Some(mode) = self.mode {
            cfg.sfm.mode = mode;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the rectilinear views of every panorama.
    SplitViews(RunArgs),
    /// Denoise camera poses from feature correspondences.
    RefinePoses(RunArgs),
    /// Cast detection rays and intersect them.
    BuildGraph(RunArgs),
    /// Label intersection nodes as occupied or empty.
    SolveMrf(RunArgs),
    /// Group occupied nodes into objects.
    Cluster(RunArgs),
    /// Refine object positions with the map prior and write predictions.
    ApplyPrior(RunArgs),
    /// Score predictions against ground truth, or stored counts.
    Evaluate {
        #[command(flatten)]
        run: Option<RunArgs>,
        /// JSON lines of {label?, n_actual, n_detected, tp}.
        #[arg(long, conflicts_with = "config")]
        counts_file: Option<PathBuf>,
        /// Predictions GeoJSON; defaults to the run's output.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Run every stage.
    RunAll(RunArgs),
    /// Write a synthetic scene and its config.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    cameras: usize,
    #[arg(long, default_value_t = 3)]
    objects: usize,
    /// GPS noise, meters.
    #[arg(long, default_value_t = 0.0)]
    gps_sigma: f64,
    /// Compass noise, degrees.
    #[arg(long, default_value_t = 0.0)]
    heading_sigma: f64,
    /// Monocular depth noise, meters.
    #[arg(long, default_value_t = 0.0)]
    depth_sigma: f64,
    /// Feature match noise, pixels.
    #[arg(long, default_value_t = 0.0)]
    pixel_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    outlier_rate: f64,
    #[arg(long, default_value_t = CorrectionMode::Full)]
    mode: CorrectionMode,
}

fn print_report(label: &str, r: &geotag_core::eval::EvalReport) {
    let t = |x| truncate_decimals(x, 2);
    let err = r.mean_error_m.map_or_else(|| "-".to_string(), |e| format!("{e:.2} m"));
    println!(
        "{label}: actual {} detected {} tp {}  P {:.2} R {:.2} F {:.2}  error {err}",
        r.n_actual,
        r.n_detected,
        r.tp,
        t(r.precision),
        t(r.recall),
        t(r.f_measure)
    );
}

fn run(cli: Cli) -> Result<()> {
    let wrote = |p: PathBuf| println!("wrote {}", p.display());
    match cli.command {
        Command::SplitViews(a) => wrote(pipeline::step_split_views(&a.load()?)?),
        Command::RefinePoses(a) => wrote(pipeline::step_refine_poses(&a.load()?)?),
        Command::BuildGraph(a) => wrote(pipeline::step_build_graph(&a.load()?)?),
        Command::SolveMrf(a) => wrote(pipeline::step_solve_mrf(&a.load()?)?),
        Command::Cluster(a) => wrote(pipeline::step_cluster(&a.load()?)?),
        Command::ApplyPrior(a) => wrote(pipeline::step_apply_prior(&a.load()?)?),
        Command::Evaluate {
            run,
            counts_file,
            predictions,
        } => match (counts_file, run) {
            (Some(path), _) => {
                for (i, (row, report)) in pipeline::evaluate_counts(&path)?.iter().enumerate() {
                    print_report(row.label.as_deref().unwrap_or(&format!("row {}", i + 1)), report);
                }
            }
            (None, Some(a)) => {
                let report = pipeline::step_evaluate(&a.load()?, predictions.as_deref())?;
                print_report("predictions", &report);
            }
            (None, None) => bail!("evaluate needs --config or --counts-file"),
        },
        Command::RunAll(a) => {
            let cfg = a.load()?;
            let out = pipeline::run_pipeline(&cfg)?;
            let m = &out.manifest;
            println!(
                "{} rays, {} nodes, {} objects; mean prior displacement {:.3} m",
                m.graph.rays, m.graph.nodes, m.refinement.clusters, m.refinement.mean_prior_displacement_m
            );
            if let Some(e) = &m.evaluation {
                print_report("before prior", &e.pre_prior);
                print_report("with prior", &e.post_prior);
            }
            wrote(cfg.paths.output_dir.join(pipeline::artifacts::PREDICTIONS));
        }
        Command::Synth(a) => {
            let params = SynthParams {
                n_cameras: a.cameras,
                n_objects: a.objects,
                gps_sigma_m: a.gps_sigma,
                heading_sigma_deg: a.heading_sigma,
                depth_sigma_m: a.depth_sigma,
                pixel_sigma: a.pixel_sigma,
                outlier_rate: a.outlier_rate,
                seed: a.seed,
                mode: a.mode,
                ..SynthParams::default()
            };
            let scene = generate(&params);
            if scene.objects.len() < params.n_objects {
                log::warn!("placed {} of {} objects", scene.objects.len(), params.n_objects);
            }
            let path = scene
                .write(&a.out)
                .with_context(|| format!("writing scene to {}", a.out.display()))?;
            wrote(path);
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .parse_default_env()
        .init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
