use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use splatmap::bench::{ablation_config, run_ablation, synthetic_input};
use splatmap::config::PipelineConfig;
use splatmap::eval::{image_set_metrics, trajectory_error, EvalReport};
use splatmap::io::{read_bundle, read_tum, write_bundle, write_rgb8, BundleOptions, TumEntry};
use splatmap::pipeline::{run_pipeline, write_outputs};
use splatmap::raster::render;
use splatmap::splat::read_map;
use splatmap::synth::{SyntheticProvider, SyntheticScene};
use splatmap::{Error, Result};

#[derive(Parser)]
#[command(name = "splatmap", version, about = "Dense monocular SLAM with a Gaussian splatting map")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic scene as an input bundle.
    Synth(SynthArgs),
    /// Run the full pipeline on a bundle or on the synthetic scene.
    Run(RunArgs),
    /// Trajectory and image metrics between saved outputs.
    Eval(EvalArgs),
    /// Run the five-variant ablation on the corrupted synthetic bench.
    Ablate(AblateArgs),
    /// Render a saved map from a given viewpoint.
    Render(RenderArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    output: PathBuf,
    /// Scene and flow-noise settings are read from the `[synthetic]` section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Only write flows between frames at most this far apart.
    #[arg(long)]
    max_gap: Option<usize>,
    /// Leave out depth images.
    #[arg(long)]
    no_depth: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Bundle directory; the synthetic scene is used when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimated trajectory (TUM).
    #[arg(long, requires = "truth")]
    estimate: Option<PathBuf>,
    /// Ground-truth trajectory (TUM).
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Largest timestamp difference for associating poses, seconds.
    #[arg(long, default_value_t = 0.02)]
    max_dt: f64,
    /// Directory of rendered PNGs.
    #[arg(long, requires = "reference")]
    rendered: Option<PathBuf>,
    /// Directory of reference PNGs with matching names.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Base configuration; defaults to the corrupted synthetic bench.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for `ablation.json`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    map: PathBuf,
    /// World-from-camera pose "tx ty tz qx qy qz qw", as in TUM files.
    #[arg(long, allow_hyphen_values = true)]
    pose: String,
    #[arg(long)]
    output: PathBuf,
    /// Background color "r g b" in [0, 1].
    #[arg(long, default_value = "0 0 0", allow_hyphen_values = true)]
    background: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Render(a) => render_view(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> ExitCode {
    if e.is_solver_stall() {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    let scene = SyntheticScene::generate(&cfg.synthetic.scene)?;
    let opts = BundleOptions {
        noise: cfg.synthetic.flow,
        max_gap: a.max_gap.unwrap_or(usize::MAX),
        write_depth: !a.no_depth,
    };
    write_bundle(&a.output, &scene, &opts)?;
    println!("wrote {} frames to {}", scene.len(), a.output.display());
    Ok(ExitCode::SUCCESS)
}

fn run(a: RunArgs) -> Result<ExitCode> {
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    let outcome = match &a.input {
        Some(dir) => {
            let data = read_bundle(dir)?;
            run_pipeline(&cfg, data.intrinsics, &data.frames, data.truth.as_deref(), &data.flows)?
        }
        None => {
            let (scene, frames) = synthetic_input(&cfg)?;
            let provider = SyntheticProvider::new(&scene, cfg.synthetic.flow);
            run_pipeline(&cfg, scene.intrinsics, &frames, Some(&scene.poses), &provider)?
        }
    };
    write_outputs(&a.output, &outcome)?;
    write_text(&a.output.join("config.toml"), &cfg.to_toml())?;
    let m = &outcome.metrics;
    println!("keyframes {}  gaussians {}", m.keyframes, m.gaussians);
    if let Some(ate) = &m.ate {
        println!("ATE RMSE {:.6}", ate.rmse);
    }
    if let Some(p) = m.mean_psnr {
        println!("mean PSNR {p:.3} dB over {} views", m.views.len());
    }
    match &outcome.stalled {
        Some(e) => {
            eprintln!("error: {e}; outputs hold the last accepted state");
            Ok(exit_code(e))
        }
        None => Ok(ExitCode::SUCCESS),
    }
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    if a.estimate.is_none() && a.rendered.is_none() {
        return Err(Error::Input(
            "nothing to evaluate: pass --estimate/--truth and/or --rendered/--reference".into(),
        ));
    }
    let mut report = EvalReport::default();
    if let (Some(est), Some(gt)) = (&a.estimate, &a.truth) {
        let (n, ate) = trajectory_error(&read_tum(est)?, &read_tum(gt)?, a.max_dt)?;
        report.associated_poses = n;
        report.ate = Some(ate);
    }
    if let (Some(r), Some(t)) = (&a.rendered, &a.reference) {
        report = report.with_images(image_set_metrics(r, t)?);
    }
    let text = report.to_json() + "\n";
    match &a.output {
        Some(p) => write_text(p, &text)?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn ablate(a: AblateArgs) -> Result<ExitCode> {
    let base = match &a.config {
        Some(p) => load_config(Some(p), a.seed)?,
        None => ablation_config(a.seed.unwrap_or(0)),
    };
    let table = run_ablation(&base)?;
    print!("{table}");
    if let Some(dir) = &a.output {
        std::fs::create_dir_all(dir).map_err(|e| Error::Input(format!("cannot create {}: {e}", dir.display())))?;
        write_text(&dir.join("ablation.json"), &(table.to_json() + "\n"))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_numbers<const N: usize>(text: &str, what: &str) -> Result<[f64; N]> {
    let values: Vec<f64> = text
        .split_whitespace()
        .map(|s| s.parse::<f64>().map_err(|_| Error::Input(format!("{what}: {s:?} is not a number"))))
        .collect::<Result<_>>()?;
    values
        .try_into()
        .map_err(|v: Vec<f64>| Error::Input(format!("{what}: expected {N} numbers, got {}", v.len())))
}

fn render_view(a: RenderArgs) -> Result<ExitCode> {
    let [tx, ty, tz, qx, qy, qz, qw] = parse_numbers::<7>(&a.pose, "--pose")?;
    if [qx, qy, qz, qw].iter().all(|q| *q == 0.0) {
        return Err(Error::Input("--pose: quaternion is zero".into()));
    }
    let bg = parse_numbers::<3>(&a.background, "--background")?;
    let pose = TumEntry {
        timestamp: 0.0,
        translation: [tx, ty, tz],
        quaternion: [qx, qy, qz, qw],
    }
    .pose();
    let (map, k) = read_map(&a.map)?;
    let img = render(map.gaussians(), &pose, &k, Vector3::from(bg)).color;
    write_rgb8(&a.output, &img)?;
    Ok(ExitCode::SUCCESS)
}
