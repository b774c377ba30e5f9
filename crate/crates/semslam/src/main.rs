use std::collections::BTreeSet;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use semslam::evaluation::{ate, rte_kitti, AteMode};
use semslam::io_kitti::{read_poses_kitti, read_scan, write_poses_kitti, write_poses_tum, SequencePaths};
use semslam::map_post::{aggregate_map, export_ply, import_ply};
use semslam::pipeline::{run_sequence, Mode, PipelineConfig};
use semslam::se3::Twist6;
use semslam::simgen::{generate_loop_trajectory, loop_world, write_kitti_sequence, ScanModel};
use semslam::submaps::grid_to_image;
use semslam::types::Scan;
use semslam::{Error, SemanticConfig};

#[derive(Parser)]
#[command(name = "semslam", about = "Semantic LiDAR SLAM", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Process a KITTI-layout sequence and write trajectory, map, and graph.
    Run {
        #[arg(long, value_parser = ["odometry", "slam"])]
        mode: String,
        /// Sequence directory containing velodyne/ (and optionally labels/,
        /// calib.txt, poses.txt).
        #[arg(long)]
        seq: PathBuf,
        /// Label directory override (defaults to <seq>/labels when present).
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Flat key=value config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare an estimated trajectory against ground truth.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Comma-separated: ate2d, ate3d, rte.
        #[arg(long, default_value = "ate2d,ate3d")]
        metrics: String,
        /// Rigidly align the estimate to ground truth first.
        #[arg(long)]
        align: bool,
    },
    /// Remove classes from an exported PLY map.
    FilterMap {
        #[arg(long = "in")]
        input: PathBuf,
        /// Comma-separated class names, e.g. car,truck.
        #[arg(long)]
        exclude: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic KITTI-layout sequence.
    Simgen {
        #[arg(long, value_parser = ["loop"])]
        preset: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> semslam::Result<()> {
    match cli.command {
        Command::Run {
            mode,
            seq,
            labels,
            config,
            out,
        } => cmd_run(&mode, &seq, labels, config, &out),
        Command::Eval {
            est,
            gt,
            metrics,
            align,
        } => cmd_eval(&est, &gt, &metrics, align),
        Command::FilterMap { input, exclude, out } => cmd_filter_map(&input, &exclude, &out),
        Command::Simgen { preset, out } => cmd_simgen(&preset, &out),
    }
}

fn cmd_run(
    mode: &str,
    seq: &std::path::Path,
    labels: Option<PathBuf>,
    config: Option<PathBuf>,
    out: &std::path::Path,
) -> semslam::Result<()> {
    let mode: Mode = mode.parse()?;
    let cfg = match config {
        Some(path) => PipelineConfig::from_file(&path)?,
        None => PipelineConfig::default(),
    };
    let default_labels = seq.join("labels");
    let paths = SequencePaths {
        velodyne_dir: seq.join("velodyne"),
        labels_dir: labels.or_else(|| default_labels.is_dir().then_some(default_labels)),
        calib_file: Some(seq.join("calib.txt")).filter(|p| p.is_file()),
        poses_file: Some(seq.join("poses.txt")).filter(|p| p.is_file()),
    };
    let output = run_sequence(&paths, &cfg, mode)?;
    std::fs::create_dir_all(out)?;
    write_poses_kitti(&output.trajectory, &out.join("poses_kitti.txt"))?;
    write_poses_tum(&output.trajectory, 10.0, &out.join("poses_tum.txt"))?;

    let mut graph_file = std::fs::File::create(out.join("pose_graph.txt"))?;
    output.graph.write_text(&mut graph_file)?;

    let submap_dir = out.join("submaps");
    std::fs::create_dir_all(&submap_dir)?;
    for (id, submap) in &output.submaps {
        let img = grid_to_image(&submap.grid);
        img.save(submap_dir.join(format!("{id:04}.png")))
            .map_err(|e| Error::Config(format!("failed to write submap image: {e}")))?;
        let mut f = std::fs::File::create(submap_dir.join(format!("{id:04}.submap")))?;
        submap.serialize(&mut f)?;
    }

    // Re-read scans for the final class-filtered map export.
    let files = paths.scan_files()?;
    let scans: Vec<Scan> = files
        .iter()
        .map(|(bin, label)| read_scan(bin, label.as_deref()))
        .collect::<semslam::Result<_>>()?;
    let exclude: BTreeSet<u16> = cfg.semantic.dynamic_labels.iter().copied().collect();
    let map = aggregate_map(&scans, &output.trajectory, cfg.export_voxel, &exclude)?;
    export_ply(&map, &out.join("map.ply"), true)?;

    println!(
        "processed {} scans, {} submaps, {} loop constraints, {} map points",
        output.trajectory.len(),
        output.submaps.len(),
        output.num_loop_constraints,
        map.len()
    );
    Ok(())
}

fn cmd_eval(
    est_path: &std::path::Path,
    gt_path: &std::path::Path,
    metrics: &str,
    align: bool,
) -> semslam::Result<()> {
    let est = read_poses_kitti(est_path)?;
    let gt = read_poses_kitti(gt_path)?;
    for metric in metrics.split(',').map(str::trim).filter(|m| !m.is_empty()) {
        match metric {
            "ate2d" => println!("ate2d {:.6} m", ate(&est, &gt, AteMode::TwoD, align)?),
            "ate3d" => println!("ate3d {:.6} m", ate(&est, &gt, AteMode::ThreeD, align)?),
            "rte" => {
                let (trans_pct, rot_deg_per_m) = rte_kitti(&est, &gt)?;
                println!("rte {trans_pct:.4} % {rot_deg_per_m:.6} deg/m");
            }
            other => return Err(Error::Config(format!("unknown metric '{other}'"))),
        }
    }
    Ok(())
}

fn cmd_filter_map(
    input: &std::path::Path,
    exclude: &str,
    out: &std::path::Path,
) -> semslam::Result<()> {
    let cfg = SemanticConfig::default();
    let mut drop = BTreeSet::new();
    for name in exclude.split(',').map(str::trim).filter(|n| !n.is_empty()) {
        let label = cfg
            .label_by_name(name)
            .ok_or_else(|| Error::Config(format!("unknown class name '{name}'")))?;
        drop.insert(label);
    }
    let points = import_ply(input)?;
    let kept: Vec<_> = points
        .into_iter()
        .filter(|p| !drop.contains(&p.label))
        .collect();
    export_ply(&kept, out, true)?;
    println!("kept {} points", kept.len());
    Ok(())
}

fn cmd_simgen(preset: &str, out: &std::path::Path) -> semslam::Result<()> {
    match preset {
        "loop" => {
            let side = 100.0;
            let world = loop_world(side);
            let (truth, _) = generate_loop_trajectory(side, 50, &Twist6::default());
            let model = ScanModel {
                channels: 32,
                azimuth_steps: 512,
                ..ScanModel::default()
            };
            write_kitti_sequence(&world, &truth, &model, out)?;
            println!("wrote {} scans to {}", truth.len(), out.display());
            Ok(())
        }
        other => Err(Error::Config(format!("unknown preset '{other}'"))),
    }
}
