use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod files;

#[derive(Debug, Parser)]
#[command(
    name = "layout-lidar",
    version,
    about = "Layout-conditioned LiDAR range images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write procedural street layouts.
    GenScenes(GenScenesArgs),
    /// Raycast a layout into conditional range images.
    Render(RenderArgs),
    /// Recover a layout from a labeled point cloud.
    Extract(ExtractArgs),
    /// Lift a camera depth map and semantic map into a labeled point cloud.
    Unproject(UnprojectArgs),
    /// Train the score model, or its conditional adapter on top of a base checkpoint.
    Train(TrainArgs),
    /// Draw range images from a checkpoint.
    Sample(SampleArgs),
    /// Compare generated and reference range images.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct GenScenesArgs {
    #[arg(long)]
    num: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Config file providing `scene.*` keys.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    layout: PathBuf,
    /// Config file providing `sensor.*` and `raydrop.*` keys.
    #[arg(long)]
    sensor: Option<PathBuf>,
    /// Single pose `x,y,z,yaw_deg`; output is one file.
    #[arg(long, conflicts_with = "trajectory")]
    pose: Option<String>,
    /// One pose per line; output is a directory with one frame per pose.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Apply the parametric raydrop model to the depth channel.
    #[arg(long)]
    raydrop: bool,
    /// Sample mesh surfaces at this density (points per square meter) instead of raycasting.
    #[arg(long, value_name = "DENSITY")]
    surface_sample: Option<f64>,
    /// Also write a `.cloud.txt` point cloud next to every image.
    #[arg(long)]
    cloud: bool,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct UnprojectArgs {
    /// PGM or PNG depth map.
    #[arg(long)]
    depth: PathBuf,
    /// PGM or PNG map of label ids, same size as the depth map.
    #[arg(long)]
    semantic: PathBuf,
    /// `fx,fy,cx,cy` in pixels.
    #[arg(long)]
    intrinsics: String,
    /// Depth map units per meter.
    #[arg(long, default_value_t = 1000.0)]
    depth_scale: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum PhaseArg {
    A,
    B,
    Ab,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory of `.lri` targets, with `.cond.lri` conditions for adapter training.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Train the conditional adapter; requires `--base`.
    #[arg(long, requires = "base")]
    controlnet: bool,
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PhaseArg::Ab, requires = "controlnet")]
    phase: PhaseArg,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Condition on this layout; requires an adapter checkpoint.
    #[arg(long)]
    layout: Option<PathBuf>,
    /// Sensor pose for the condition, `x,y,z,yaw_deg`.
    #[arg(long, requires = "layout")]
    pose: Option<String>,
    #[arg(long, default_value_t = 1)]
    num: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Config file providing `sampler.*` keys.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    gen: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "jsd,mmd,frechet")]
    metrics: Vec<String>,
    /// Add layout consistency of the generated images against this layout.
    #[arg(long)]
    layout: Option<PathBuf>,
    #[arg(long, requires = "layout")]
    pose: Option<String>,
    /// Also write the report as `metric,value` rows.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenScenes(a) => commands::gen_scenes(&a),
        Command::Render(a) => commands::render(&a),
        Command::Extract(a) => commands::extract(&a),
        Command::Unproject(a) => commands::unproject(&a),
        Command::Train(a) => commands::train(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Eval(a) => commands::eval(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
