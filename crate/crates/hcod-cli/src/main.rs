//! Batch CLI for the hyperspectral camouflage pipeline.
//!
//! Subcommands: synth, decompose, segment, eval, tau-sweep, stats.
//! Exit codes: 0 success, 2 user/input error, 3 internal invariant
//! violation. `HCOD_THREADS` caps worker threads (0 = auto).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use hcod_core::datastats;
use hcod_core::hsicube::{load_cube, load_mask, save_cube, save_mask, GroundTruthMask};
use hcod_core::metrics::{evaluate_pair, MetricReport};
use hcod_core::pipeline::{
    decompose, read_prediction_png, segment, train_decode_and_prompt, write_config_echo,
    write_f32_planar, write_map_png16, write_xyz_f32_planar, write_xyz_png16, PipelineConfig,
};
use hcod_core::synth::{generate_scene, SyntheticSceneSpec};

#[derive(Parser)]
#[command(
    name = "hcod",
    about = "Hyperspectral camouflaged-object detection pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene (cube + mask + manifest) from a spec file.
    Synth(SynthArgs),
    /// Decompose a cube into the XYZ image and the spectral saliency prompt.
    Decompose(DecomposeArgs),
    /// Segment a cube into a probability map.
    Segment(SegmentArgs),
    /// Evaluate prediction maps against ground-truth masks.
    Eval(EvalArgs),
    /// Sweep the token-dropout threshold over a scene set.
    TauSweep(TauSweepArgs),
    /// Dataset statistics over a mask directory.
    Stats(StatsArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scene spec JSON file.
    #[arg(long)]
    spec: PathBuf,
    /// Output directory.
    #[arg(long)]
    out_dir: PathBuf,
    /// Output file stem.
    #[arg(long, default_value = "scene")]
    stem: String,
}

#[derive(Args)]
struct ConfigArgs {
    /// Pipeline config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the dropout threshold.
    #[arg(long)]
    tau: Option<f64>,
    /// Override the seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Enable detail enhancement (training-mode output).
    #[arg(long)]
    fde: bool,
}

#[derive(Args)]
struct DecomposeArgs {
    /// Input HSIC cube.
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SegmentArgs {
    /// Input HSIC cube.
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of prediction PNGs.
    #[arg(long)]
    pred_dir: PathBuf,
    /// Directory of ground-truth PNGs with matching file names.
    #[arg(long)]
    gt_dir: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TauSweepArgs {
    /// Directory of HSIC cubes.
    #[arg(long)]
    cube_dir: PathBuf,
    /// Directory of ground-truth PNGs named after the cubes.
    #[arg(long)]
    gt_dir: PathBuf,
    /// Comma-separated thresholds.
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.03, 0.01, 0.003, 0.001])]
    taus: Vec<f64>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Fine-tune the decode head per scene before evaluating each tau.
    #[arg(long, default_value_t = 0)]
    train_steps: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct StatsArgs {
    /// Directory of mask PNGs.
    #[arg(long)]
    mask_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Also render the centroid occupancy grid as a PNG heatmap.
    #[arg(long)]
    heatmap: bool,
}

enum CliError {
    /// Bad input from the user: exit 2.
    User(String),
    /// The pipeline broke its own contract: exit 3.
    Internal(String),
}

impl CliError {
    fn user(e: impl std::fmt::Display) -> Self {
        CliError::User(e.to_string())
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        CliError::Internal(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Decompose(args) => cmd_decompose(args),
        Command::Segment(args) => cmd_segment(args),
        Command::Eval(args) => cmd_eval(args),
        Command::TauSweep(args) => cmd_tau_sweep(args),
        Command::Stats(args) => cmd_stats(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("HCOD_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .map_err(|_| format!("HCOD_THREADS must be a number, got {raw:?}"))?;
    if n == 0 {
        return Ok(()); // auto
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn load_config(args: &ConfigArgs) -> CliResult<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let raw = fs::read(path).map_err(CliError::user)?;
            serde_json::from_slice::<PipelineConfig>(&raw)
                .map_err(|e| CliError::User(format!("config {}: {e}", path.display())))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(tau) = args.tau {
        cfg.tau = tau;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.fde {
        cfg.fde_enabled = true;
    }
    cfg.validate().map_err(CliError::user)?;
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(CliError::user)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "output".to_string())
}

/// Sorted map of stem -> path for files with the given extension.
fn dir_entries(dir: &Path, ext: &str) -> CliResult<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries =
        fs::read_dir(dir).map_err(|e| CliError::User(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry.map_err(CliError::user)?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            out.insert(file_stem(&path), path);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_synth(args: SynthArgs) -> CliResult<()> {
    let raw = fs::read(&args.spec).map_err(CliError::user)?;
    let spec: SyntheticSceneSpec = serde_json::from_slice(&raw)
        .map_err(|e| CliError::User(format!("spec {}: {e}", args.spec.display())))?;
    let (cube, mask) = generate_scene(&spec).map_err(CliError::user)?;
    ensure_dir(&args.out_dir)?;
    let cube_path = args.out_dir.join(format!("{}.hsic", args.stem));
    let mask_path = args.out_dir.join(format!("{}.png", args.stem));
    let manifest_path = args.out_dir.join(format!("{}.manifest.json", args.stem));
    save_cube(&cube, &cube_path).map_err(CliError::user)?;
    save_mask(&mask, &mask_path).map_err(CliError::user)?;
    let manifest = serde_json::json!({
        "spec": spec,
        "cube": cube_path.file_name().unwrap().to_string_lossy(),
        "mask": mask_path.file_name().unwrap().to_string_lossy(),
        "foreground_pixels": mask.foreground_count(),
        "area_ratio": mask.foreground_count() as f64
            / (mask.height() * mask.width()) as f64,
    });
    fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).map_err(CliError::internal)?,
    )
    .map_err(CliError::user)?;
    println!(
        "wrote {} + {} + {}",
        cube_path.display(),
        mask_path.display(),
        manifest_path.display()
    );
    Ok(())
}

fn cmd_decompose(args: DecomposeArgs) -> CliResult<()> {
    let cfg = load_config(&args.config)?;
    let cube = load_cube(&args.cube).map_err(CliError::user)?;
    let (xyz, saliency) = decompose(&cube, &cfg).map_err(CliError::user)?;
    ensure_dir(&args.out_dir)?;
    let stem = file_stem(&args.cube);
    write_xyz_png16(args.out_dir.join(format!("{stem}.xyz.png")), &xyz)
        .map_err(CliError::internal)?;
    write_xyz_f32_planar(args.out_dir.join(format!("{stem}.xyz.f32")), &xyz)
        .map_err(CliError::internal)?;
    write_map_png16(args.out_dir.join(format!("{stem}.saliency.png")), &saliency)
        .map_err(CliError::internal)?;
    write_f32_planar(args.out_dir.join(format!("{stem}.saliency.f32")), &saliency)
        .map_err(CliError::internal)?;
    write_config_echo(args.out_dir.join(format!("{stem}.config.json")), &cfg)
        .map_err(CliError::internal)?;
    println!("wrote xyz + saliency for {stem}");
    Ok(())
}

fn cmd_segment(args: SegmentArgs) -> CliResult<()> {
    let cfg = load_config(&args.config)?;
    let cube = load_cube(&args.cube).map_err(CliError::user)?;
    let out = segment(&cube, &cfg).map_err(CliError::user)?;
    ensure_dir(&args.out_dir)?;
    let stem = file_stem(&args.cube);
    write_map_png16(args.out_dir.join(format!("{stem}.png")), &out.s_f)
        .map_err(CliError::internal)?;
    write_f32_planar(args.out_dir.join(format!("{stem}.f32")), &out.s_f)
        .map_err(CliError::internal)?;
    if let Some(s_d) = &out.s_d {
        write_map_png16(args.out_dir.join(format!("{stem}.enhanced.png")), s_d)
            .map_err(CliError::internal)?;
        write_f32_planar(args.out_dir.join(format!("{stem}.enhanced.f32")), s_d)
            .map_err(CliError::internal)?;
    }
    write_config_echo(args.out_dir.join(format!("{stem}.config.json")), &cfg)
        .map_err(CliError::internal)?;
    println!(
        "segmented {stem}: kept {:.1}% of tokens",
        100.0 * out.kept_fraction
    );
    Ok(())
}

fn paired_files(
    left: &BTreeMap<String, PathBuf>,
    right: &BTreeMap<String, PathBuf>,
    what: &str,
) -> CliResult<Vec<(String, PathBuf, PathBuf)>> {
    let missing_right: Vec<&String> = left.keys().filter(|k| !right.contains_key(*k)).collect();
    let missing_left: Vec<&String> = right.keys().filter(|k| !left.contains_key(*k)).collect();
    if !missing_right.is_empty() || !missing_left.is_empty() {
        return Err(CliError::User(format!(
            "unmatched {what}: missing counterparts for {:?} and {:?}",
            missing_right, missing_left
        )));
    }
    Ok(left
        .iter()
        .map(|(k, v)| (k.clone(), v.clone(), right[k].clone()))
        .collect())
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let preds = dir_entries(&args.pred_dir, "png")?;
    let gts = dir_entries(&args.gt_dir, "png")?;
    if preds.is_empty() {
        return Err(CliError::User(format!(
            "no prediction PNGs in {}",
            args.pred_dir.display()
        )));
    }
    let pairs = paired_files(&preds, &gts, "prediction/ground-truth files")?;
    let per_image: Vec<(String, [f64; 4])> = pairs
        .par_iter()
        .map(|(name, pred_path, gt_path)| {
            let pred = read_prediction_png(pred_path).map_err(CliError::user)?;
            let gt = load_mask(gt_path).map_err(CliError::user)?;
            let row = evaluate_pair(&pred, &gt).map_err(CliError::user)?;
            Ok((name.clone(), row))
        })
        .collect::<CliResult<_>>()?;

    let report = assemble_report(&per_image);
    let names: Vec<String> = per_image.iter().map(|(n, _)| n.clone()).collect();
    let csv = report.to_csv(&names).map_err(CliError::internal)?;
    fs::write(&args.out, csv).map_err(CliError::user)?;
    println!(
        "evaluated {} pairs: MAE {:.6}, Adp-F {:.6}, E {:.6}, S {:.6}",
        names.len(),
        report.mae,
        report.adp_f,
        report.e_measure,
        report.s_measure
    );
    Ok(())
}

fn assemble_report(per_image: &[(String, [f64; 4])]) -> MetricReport {
    let n = per_image.len() as f64;
    let mut sums = [0.0; 4];
    for (_, row) in per_image {
        for k in 0..4 {
            sums[k] += row[k];
        }
    }
    MetricReport {
        mae: sums[0] / n,
        adp_f: sums[1] / n,
        e_measure: sums[2] / n,
        s_measure: sums[3] / n,
        per_image: per_image.iter().map(|(_, r)| *r).collect(),
    }
}

fn cmd_tau_sweep(args: TauSweepArgs) -> CliResult<()> {
    if args.taus.is_empty() {
        return Err(CliError::User("tau list is empty".into()));
    }
    let cfg = load_config(&args.config)?;
    let cubes = dir_entries(&args.cube_dir, "hsic")?;
    let gts = dir_entries(&args.gt_dir, "png")?;
    if cubes.is_empty() {
        return Err(CliError::User(format!(
            "no cubes in {}",
            args.cube_dir.display()
        )));
    }
    let pairs = paired_files(&cubes, &gts, "cube/ground-truth files")?;
    let scenes: Vec<(String, hcod_core::HsiCube, GroundTruthMask)> = pairs
        .iter()
        .map(|(name, cube_path, gt_path)| {
            let cube = load_cube(cube_path).map_err(CliError::user)?;
            let gt = load_mask(gt_path).map_err(CliError::user)?;
            Ok((name.clone(), cube, gt))
        })
        .collect::<CliResult<_>>()?;

    let mut csv = String::from("tau,mae,adp_f,e,s,kept_fraction\n");
    for &tau in &args.taus {
        let run_cfg = PipelineConfig { tau, ..cfg.clone() };
        let rows: Vec<([f64; 4], f64)> = scenes
            .par_iter()
            .map(|(_, cube, gt)| {
                let (pred, kept) = if args.train_steps > 0 {
                    let report = train_decode_and_prompt(cube, gt, &run_cfg, args.train_steps, 0.1)
                        .map_err(CliError::user)?;
                    let kept = segment(cube, &run_cfg)
                        .map_err(CliError::user)?
                        .kept_fraction;
                    (report.prediction, kept)
                } else {
                    let out = segment(cube, &run_cfg).map_err(CliError::user)?;
                    (out.s_f, out.kept_fraction)
                };
                let row = evaluate_pair(&pred, gt).map_err(CliError::user)?;
                Ok((row, kept))
            })
            .collect::<CliResult<_>>()?;
        let n = rows.len() as f64;
        let mut sums = [0.0; 4];
        let mut kept = 0.0;
        for (row, k) in &rows {
            for i in 0..4 {
                sums[i] += row[i];
            }
            kept += k;
        }
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            tau,
            sums[0] / n,
            sums[1] / n,
            sums[2] / n,
            sums[3] / n,
            kept / n
        ));
    }
    fs::write(&args.out, csv).map_err(CliError::user)?;
    println!(
        "swept {} thresholds over {} scenes",
        args.taus.len(),
        scenes.len()
    );
    Ok(())
}

fn cmd_stats(args: StatsArgs) -> CliResult<()> {
    let mask_files = dir_entries(&args.mask_dir, "png")?;
    if mask_files.is_empty() {
        return Err(CliError::User(format!(
            "no mask PNGs in {}",
            args.mask_dir.display()
        )));
    }
    let names: Vec<String> = mask_files.keys().cloned().collect();
    let masks: Vec<GroundTruthMask> = mask_files
        .par_iter()
        .map(|(_, path)| load_mask(path).map_err(CliError::user))
        .collect::<CliResult<_>>()?;
    let summary = datastats::dataset_stats(&masks).map_err(CliError::user)?;
    ensure_dir(&args.out_dir)?;
    fs::write(
        args.out_dir.join("stats.csv"),
        summary.to_csv(&names).map_err(CliError::internal)?,
    )
    .map_err(CliError::user)?;
    fs::write(
        args.out_dir.join("hist.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "area_hist": summary.area_hist,
            "edge_hist": summary.edge_hist,
            "centroid_grid": summary.centroid_grid,
        }))
        .map_err(CliError::internal)?,
    )
    .map_err(CliError::user)?;
    if args.heatmap {
        write_centroid_heatmap(
            &args.out_dir.join("centroid_heatmap.png"),
            &summary.centroid_grid,
        )
        .map_err(CliError::internal)?;
    }
    println!("wrote stats for {} masks", names.len());
    Ok(())
}

/// Upscaled grayscale rendering of the centroid occupancy grid.
fn write_centroid_heatmap(path: &Path, grid: &[Vec<u64>]) -> hcod_core::Result<()> {
    let n = grid.len();
    let peak = grid.iter().flatten().copied().max().unwrap_or(0).max(1);
    let scale = 16u32;
    let img = image::GrayImage::from_fn(n as u32 * scale, n as u32 * scale, |x, y| {
        let gy = (y / scale) as usize;
        let gx = (x / scale) as usize;
        image::Luma([((grid[gy][gx] as f64 / peak as f64) * 255.0).round() as u8])
    });
    img.save(path)
        .map_err(|e| hcod_core::Error::format(format!("heatmap: {e}")))
}
