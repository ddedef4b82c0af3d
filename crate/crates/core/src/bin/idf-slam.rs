use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use image::{ImageBuffer, Luma, Rgb};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use idf_slam::eval::synthetic::CameraPath;
use idf_slam::eval::{
    ate, evaluate_reconstruction, extract_mesh, generate_synthetic, load_dataset, read_tum, write_dataset, write_tum,
    Mesh, ReconConfig, SyntheticScene,
};
use idf_slam::geometry::Intrinsics;
use idf_slam::mapper::write_loss_csv;
use idf_slam::mlp::SceneBounds;
use idf_slam::tensor::write_checkpoint;
use idf_slam::{Result, Slam, SlamError, SystemConfig};

const SCENE_FILE: &str = "scene.json";
const CONFIG_FILE: &str = "config.toml";

#[derive(Parser)]
#[command(name = "idf-slam", version, about = "RGB-D SLAM with a neural T-SDF map")]
struct Cli {
    /// Log progress at debug level.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track and map an RGB-D sequence.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        /// TOML configuration; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write rendered colour and depth of every stored keyframe.
        #[arg(long)]
        render_keyframes: bool,
        /// Extract the map's zero level set to mesh.ply.
        #[arg(long)]
        mesh: bool,
        /// Grid spacing of the extracted mesh, metres.
        #[arg(long, default_value_t = 0.03)]
        mesh_resolution: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many frames.
        #[arg(long)]
        max_frames: Option<usize>,
    },
    /// Absolute trajectory error of an estimate against ground truth.
    EvalAte {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        groundtruth: PathBuf,
        /// JSON file to merge the result into.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy and completion of a mesh against a synthetic dataset.
    EvalRecon {
        #[arg(long)]
        mesh: PathBuf,
        /// Directory written by make-synthetic.
        #[arg(long)]
        dataset: PathBuf,
        /// The mesh is already in world coordinates rather than those of
        /// the first camera.
        #[arg(long)]
        world: bool,
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a synthetic room sequence with ground truth.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value_t = 80)]
        width: usize,
        #[arg(long, default_value_t = 60)]
        height: usize,
        /// Horizontal field of view, degrees.
        #[arg(long, default_value_t = 60.0)]
        fov: f64,
        #[arg(long, default_value_t = 5000.0)]
        depth_scale: f64,
        /// Standard deviation of depth noise, metres.
        #[arg(long, default_value_t = 0.0)]
        depth_noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn io_err(e: impl std::fmt::Display) -> SlamError {
    SlamError::Io(std::io::Error::other(e.to_string()))
}

/// Adds `key` to a JSON object file, creating it if needed.
fn merge_metrics(path: &Path, key: &str, value: serde_json::Value) -> Result<()> {
    let mut all: BTreeMap<String, serde_json::Value> = match fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| SlamError::load(path, e))?,
        Err(_) => BTreeMap::new(),
    };
    all.insert(key.to_string(), value);
    fs::write(path, serde_json::to_string_pretty(&all).map_err(io_err)?)?;
    Ok(())
}

fn save_rgb(path: &Path, rgb: &[[f32; 3]], w: usize, h: usize) -> Result<()> {
    ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        Rgb(rgb[y as usize * w + x as usize].map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
    })
    .save(path)
    .map_err(io_err)
}

fn save_depth(path: &Path, depth: &[f32], w: usize, h: usize, scale: f64) -> Result<()> {
    ImageBuffer::<Luma<u16>, _>::from_fn(w as u32, h as u32, |x, y| {
        Luma([(depth[y as usize * w + x as usize] as f64 * scale).round().clamp(0.0, u16::MAX as f64) as u16])
    })
    .save(path)
    .map_err(io_err)
}

/// Largest grid spacing at or above `requested` that fits the grid limit.
fn mesh_spacing(bounds: &SceneBounds, requested: f64) -> f64 {
    let extent = (0..3).map(|i| bounds.max[i] - bounds.min[i]).fold(0.0, f64::max);
    requested.max(extent / (idf_slam::eval::mesh::MAX_GRID - 1) as f64 * 1.0001)
}

#[allow(clippy::too_many_arguments)]
fn run(
    dataset: &Path,
    config: Option<&Path>,
    out: &Path,
    render_keyframes: bool,
    mesh: bool,
    mesh_resolution: f64,
    seed: Option<u64>,
    max_frames: Option<usize>,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => SystemConfig::load(p)?,
        None => SystemConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ds = load_dataset(dataset)?;
    let n = max_frames.unwrap_or(ds.len()).min(ds.len());
    if n == 0 {
        return Err(SlamError::load(dataset, "no frames"));
    }
    fs::create_dir_all(out)?;
    let start = Instant::now();
    let mut slam = Slam::initialize(ds.frame(0)?, cfg.clone())?;
    let mut keyframe_events = 0;
    for i in 1..n {
        let r = slam.process_frame(ds.frame(i)?)?;
        keyframe_events += usize::from(r.keyframe.is_some());
        info!(
            "frame {i}/{n}: {}{} ({:.0} s)",
            if r.keyframe.is_some() { "keyframe" } else { "tracked" },
            if r.lost { ", lost" } else { "" },
            start.elapsed().as_secs_f64()
        );
    }
    write_tum(BufWriter::new(File::create(out.join("trajectory.txt"))?), slam.trajectory())?;
    slam.store().write_jsonl(BufWriter::new(File::create(out.join("keyframes.jsonl"))?))?;
    write_checkpoint(slam.map().params(), BufWriter::new(File::create(out.join("map.ckpt"))?))?;
    write_loss_csv(slam.loss_log(), BufWriter::new(File::create(out.join("losses.csv"))?))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml())?;
    if mesh {
        let spacing = mesh_spacing(&cfg.scene_bounds, mesh_resolution);
        let m = extract_mesh(slam.map(), &cfg.scene_bounds, spacing)?;
        m.write_ply(BufWriter::new(File::create(out.join("mesh.ply"))?))?;
    }
    if render_keyframes {
        let dir = out.join("keyframes");
        fs::create_dir_all(&dir)?;
        let kfs: Vec<_> = slam.store().keyframes().iter().map(|k| (k.id, k.frame.clone(), k.pose)).collect();
        for (id, frame, pose) in kfs {
            let (rgb, depth) = slam.render_view(&frame, &pose)?;
            let (w, h) = (frame.width(), frame.height());
            save_rgb(&dir.join(format!("{id:04}_rgb.png")), &rgb, w, h)?;
            save_depth(&dir.join(format!("{id:04}_depth.png")), &depth, w, h, ds.depth_scale)?;
        }
    }
    let violations = slam.violations();
    println!(
        "{n} frames, {keyframe_events} keyframe events, {} stored keyframes, {} phase violations, {:.1} s",
        slam.store().len(),
        violations.len(),
        start.elapsed().as_secs_f64()
    );
    if !violations.is_empty() {
        return Err(SlamError::contract(format!("phase isolation violated: {violations:?}")));
    }
    Ok(())
}

fn eval_ate(estimate: &Path, groundtruth: &Path, out: Option<&Path>) -> Result<()> {
    let stats = ate(&read_tum(estimate)?, &read_tum(groundtruth)?)?;
    println!(
        "ATE over {} poses: rmse {:.4} m, mean {:.4} m, median {:.4} m",
        stats.pairs, stats.rmse, stats.mean, stats.median
    );
    if let Some(out) = out {
        merge_metrics(out, "ate", serde_json::to_value(stats).map_err(io_err)?)?;
    }
    Ok(())
}

fn eval_recon(
    mesh_path: &Path,
    dataset: &Path,
    world: bool,
    cfg: ReconConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let text = fs::read_to_string(mesh_path).map_err(|e| SlamError::load(mesh_path, e))?;
    let mut mesh = Mesh::read_ply(&text).map_err(|e| SlamError::load(mesh_path, e))?;
    let scene_path = dataset.join(SCENE_FILE);
    let scene_text = fs::read_to_string(&scene_path).map_err(|e| SlamError::load(&scene_path, e))?;
    let scene: SyntheticScene = serde_json::from_str(&scene_text).map_err(|e| SlamError::load(&scene_path, e))?;
    let ds = load_dataset(dataset)?;
    let gt = ds.ground_truth()?.ok_or_else(|| SlamError::load(dataset.join("groundtruth.txt"), "missing"))?;
    if gt.len() != ds.len() {
        return Err(SlamError::load(dataset, "ground truth and frames differ in length"));
    }
    if !world {
        // The map lives in the frame of the first camera.
        mesh.vertices.iter_mut().for_each(|v| *v = gt[0].1.transform_point(v));
    }
    let frames = ds.frames().collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = frames.iter().zip(&gt).map(|(f, (_, p))| (f, *p)).collect();
    let report = evaluate_reconstruction(&mesh, &scene, &views, &cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let s = report.stats;
    println!(
        "accuracy {:.4} m, completion {:.4} m, completion ratio {:.2} % (< {} m), within the {}",
        s.accuracy, s.completion, s.completion_ratio, s.threshold, report.region
    );
    if let Some(out) = out {
        merge_metrics(out, "reconstruction", serde_json::to_value(report).map_err(io_err)?)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn make_synthetic(
    out: &Path,
    frames: usize,
    width: usize,
    height: usize,
    fov: f64,
    depth_scale: f64,
    depth_noise: f64,
    seed: u64,
) -> Result<()> {
    let scene = SyntheticScene {
        depth_noise,
        ..SyntheticScene::default()
    };
    let k = Intrinsics::from_fov(width, height, fov);
    let (seq, gt) = generate_synthetic(&scene, frames, &k, &mut ChaCha8Rng::seed_from_u64(seed))?;
    write_dataset(out, &seq, Some(&gt), depth_scale)?;
    fs::write(out.join(SCENE_FILE), serde_json::to_string_pretty(&scene).map_err(io_err)?)?;
    // A configuration whose map bounds cover the room as seen from frame 0.
    let cfg = SystemConfig {
        seed,
        scene_bounds: scene.bounds_in(&gt[0].1, 0.3),
        ..SystemConfig::default()
    };
    fs::write(out.join(CONFIG_FILE), cfg.to_toml())?;
    let path: &CameraPath = &scene.path;
    println!(
        "{frames} frames of {width}x{height} written to {}; path from {:?} to {:?}",
        out.display(),
        path.start,
        path.end
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.verbose { "debug" } else { "info" }))
        .init();
    let result = match cli.command {
        Command::Run {
            dataset,
            config,
            out,
            render_keyframes,
            mesh,
            mesh_resolution,
            seed,
            max_frames,
        } => run(&dataset, config.as_deref(), &out, render_keyframes, mesh, mesh_resolution, seed, max_frames),
        Command::EvalAte { estimate, groundtruth, out } => eval_ate(&estimate, &groundtruth, out.as_deref()),
        Command::EvalRecon {
            mesh,
            dataset,
            world,
            threshold,
            samples,
            seed,
            out,
        } => {
            let cfg = ReconConfig {
                threshold,
                samples,
                ..ReconConfig::default()
            };
            eval_recon(&mesh, &dataset, world, cfg, seed, out.as_deref())
        }
        Command::MakeSynthetic {
            out,
            frames,
            width,
            height,
            fov,
            depth_scale,
            depth_noise,
            seed,
        } => make_synthetic(&out, frames, width, height, fov, depth_scale, depth_noise, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
