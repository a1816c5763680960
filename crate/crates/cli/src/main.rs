use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use surfel_core::dataset_io::{load_sequence, load_track_events, load_tum_trajectory, trajectory_to_events};
use surfel_core::evaluation::{score_accuracy, AccuracyReport, GroundTruth, PerfReport, PointCloudIndex};
use surfel_core::pipeline::{benchmark, run, BenchmarkOptions, PipelineConfig, Profile};
use surfel_core::ply::{export_ply, import_ply, read_points};
use surfel_core::Surfel;

#[derive(Parser)]
#[command(name = "surfelmap", version, about = "Dense surfel mapping from intensity/depth sequences with tracked poses")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a map from an image sequence and tracking output.
    Run(RunArgs),
    /// Run the built-in corridor loop and report timing and map growth.
    Benchmark(BenchArgs),
    /// Score a map against a reference point cloud.
    Evaluate(EvalArgs),
    /// Convert a surfel map to another format.
    Export(ExportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML pipeline configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sensor preset: icl, kitti-stereo or mono.
    #[arg(long, value_parser = parse_profile)]
    profile: Option<Profile>,
    /// Hop threshold for the local map.
    #[arg(long)]
    hops: Option<u32>,
    /// Superpixel grid spacing in pixels.
    #[arg(long)]
    spacing: Option<usize>,
    /// Write per-frame stage timings as CSV.
    #[arg(long)]
    perf_csv: Option<PathBuf>,
}

fn parse_profile(s: &str) -> std::result::Result<Profile, String> {
    s.parse().map_err(|e: surfel_core::Error| e.to_string())
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if self.profile.is_some() {
            cfg.profile = self.profile;
        }
        if let Some(h) = self.hops {
            cfg.hop_threshold = h;
        }
        if let Some(s) = self.spacing {
            cfg.segmentation.grid_spacing = s;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    /// Manifest with lines `timestamp intensity_path depth_path`.
    #[arg(long)]
    manifest: PathBuf,
    /// Camera file `fx fy cx cy width height baseline sigma depth_scale`.
    #[arg(long)]
    camera: Option<PathBuf>,
    /// Track-event file (POSE/KF/EDGE/OPT records).
    #[arg(long, required_unless_present = "trajectory", conflicts_with = "trajectory")]
    events: Option<PathBuf>,
    /// TUM trajectory; keyframes are synthesized.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Largest timestamp gap when matching trajectory samples to frames.
    #[arg(long, default_value_t = 0.02)]
    max_dt: f64,
    /// Output PLY map.
    #[arg(short, long, default_value = "map.ply")]
    output: PathBuf,
    /// Export a snapshot every N frames.
    #[arg(long, requires = "snapshot_dir")]
    snapshot_every: Option<usize>,
    #[arg(long)]
    snapshot_dir: Option<PathBuf>,
    /// Dump superpixel labels and centers per frame into this directory.
    #[arg(long)]
    dump_superpixels: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Stop after this many frames.
    #[arg(long)]
    frames: Option<usize>,
    /// Do not add proximity (loop-closure) edges between keyframes.
    #[arg(long)]
    no_loop_edges: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Surfel map to score.
    #[arg(long)]
    map: PathBuf,
    /// Reference point cloud (PLY).
    #[arg(long)]
    reference: PathBuf,
    /// Append the report as CSV to this file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Ply,
    Csv,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

fn write_perf(path: &Path, perf: &PerfReport) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    perf.write_csv(BufWriter::new(file))
        .with_context(|| format!("writing {}", path.display()))
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    let mut cfg = a.cfg.load()?;
    if let Some(n) = a.snapshot_every {
        cfg.snapshot_every = n;
        cfg.snapshot_dir = a.snapshot_dir.clone();
    }
    if a.dump_superpixels.is_some() {
        cfg.superpixel_dump = a.dump_superpixels.clone();
    }
    let camera = a
        .camera
        .clone()
        .or_else(|| cfg.camera.clone())
        .context("no camera file: pass --camera or set `camera` in the config")?;
    let sequence = load_sequence(&a.manifest, &camera)?;
    let events = match (&a.events, &a.trajectory) {
        (Some(p), _) => load_track_events(p, &cfg.keyframes)?,
        (None, Some(p)) => {
            let stamps: Vec<f64> = sequence.entries.iter().map(|e| e.timestamp).collect();
            trajectory_to_events(&stamps, &load_tum_trajectory(p)?, a.max_dt, &cfg.keyframes)
        }
        (None, None) => unreachable!("clap requires one of them"),
    };
    info!("{} frames in manifest, {} events", sequence.len(), events.len());
    let out = run(&sequence, &events, &cfg)?;
    export_ply(&a.output, out.map.to_vec().iter())?;
    print!("{}", out.perf.summary());
    println!("map written to {}", a.output.display());
    if let Some(p) = &a.cfg.perf_csv {
        write_perf(p, &out.perf)?;
    }
    Ok(())
}

fn cmd_benchmark(a: &BenchArgs) -> Result<()> {
    let mut cfg = a.cfg.load()?;
    if a.no_loop_edges {
        cfg.keyframes.proximity_edges = false;
    }
    let options = BenchmarkOptions {
        max_frames: a.frames,
        ..Default::default()
    };
    let report = benchmark(&options, &cfg)?;
    print!("{}", report.summary());
    if let Some(p) = &a.cfg.perf_csv {
        write_perf(p, &report.perf)?;
    }
    Ok(())
}

fn cmd_evaluate(a: &EvalArgs) -> Result<()> {
    let map = import_ply(&a.map)?;
    let cloud = PointCloudIndex::new(read_points(&a.reference)?)?;
    let report = score_accuracy(&map, GroundTruth::Cloud(&cloud))?;
    println!("{report}");
    if let Some(p) = &a.csv {
        let fresh = !p.exists();
        let mut f = File::options().create(true).append(true).open(p)?;
        if fresh {
            writeln!(f, "{}", AccuracyReport::CSV_HEADER)?;
        }
        writeln!(f, "{}", report.csv_row())?;
    }
    Ok(())
}

fn write_csv(path: &Path, surfels: &[Surfel]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "x,y,z,nx,ny,nz,intensity,radius,weight,update_count,keyframe_id")?;
    for s in surfels {
        let (p, n) = (s.position, s.normal);
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            p.x, p.y, p.z, n.x, n.y, n.z, s.intensity, s.radius, s.weight, s.update_count, s.attached_keyframe
        )?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_export(a: &ExportArgs) -> Result<()> {
    let map = import_ply(&a.map)?;
    match a.format {
        Format::Ply => export_ply(&a.output, map.iter())?,
        Format::Csv => write_csv(&a.output, &map).with_context(|| format!("writing {}", a.output.display()))?,
    }
    println!("{} surfels written to {}", map.len(), a.output.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Export(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
