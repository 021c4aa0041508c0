//! Implementations of the five subcommands.  Each one reads its inputs,
//! runs the corresponding library pipeline stage and writes artifacts
//! plus a `manifest.txt` into the output directory.

use std::path::Path;
use std::sync::Mutex;

use anyhow::Context;
use rayon::prelude::*;
use salsanet::autolabel::{label_from_boxes, label_from_mask, merge_labels, SegMask};
use salsanet::geometry::{is_vehicle_kind, parse_kitti_calib, parse_kitti_object_labels, Box3D};
use salsanet::io;
use salsanet::metrics::ConfusionMatrix;
use salsanet::nn::checkpoint::{load_network, save_network};
use salsanet::nn::Network;
use salsanet::projection::{BevSpec, GridKind, LabelGrid, SfvSpec, ViewSpec};
use salsanet::training::{self, TrainConfig, TrainData, TrainProgress};
use salsanet::ClassId;

use crate::frames;
use crate::manifest::RunManifest;
use crate::{AutolabelArgs, EvalArgs, InferArgs, ProjectArgs, TrainArgs, ViewArg};

impl ViewArg {
    fn to_spec(self) -> ViewSpec {
        match self {
            ViewArg::Bev => ViewSpec::Bev(BevSpec::kitti()),
            ViewArg::Sfv => ViewSpec::Sfv(SfvSpec::hdl64()),
        }
    }

    fn name(self) -> &'static str {
        match self {
            ViewArg::Bev => "bev",
            ViewArg::Sfv => "sfv",
        }
    }
}

/// Runs `work` on a rayon pool sized by `--jobs`, or on the default
/// global pool when the flag is absent.
fn run_pool<T: Send>(jobs: Option<usize>, work: impl FnOnce() -> T + Send) -> anyhow::Result<T> {
    match jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .context("building worker pool")?;
            Ok(pool.install(work))
        }
        None => Ok(work()),
    }
}

/// Outcome of one frame in a per-frame parallel stage.
enum FrameOutcome<T> {
    Done(T),
    /// Frame skipped because a companion file was missing.
    Skipped(String),
}

/// Prints skip warnings in frame order and returns the processed
/// results; fails if every frame was skipped.
fn settle_frames<T>(outcomes: Vec<FrameOutcome<T>>, what: &str) -> anyhow::Result<Vec<T>> {
    let mut done = Vec::new();
    for outcome in outcomes {
        match outcome {
            FrameOutcome::Done(t) => done.push(t),
            FrameOutcome::Skipped(reason) => eprintln!("warning: {reason}"),
        }
    }
    anyhow::ensure!(!done.is_empty(), "no {what} frames could be processed");
    Ok(done)
}

struct LabeledFrame {
    class_cells: [u64; 3],
    dropped_non_finite: usize,
}

pub fn autolabel(args: &AutolabelArgs) -> anyhow::Result<()> {
    let stems = frames::stems_with_suffix(&args.scans, ".bin")?;
    anyhow::ensure!(
        !stems.is_empty(),
        "no scans (*.bin) found in {}",
        args.scans.display()
    );
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let outcomes = run_pool(args.jobs, || {
        stems
            .par_iter()
            .map(|stem| autolabel_frame(args, stem))
            .collect::<anyhow::Result<Vec<_>>>()
    })??;

    let total = stems.len();
    let done = settle_frames(outcomes, "scan")?;
    let mut class_cells = [0u64; 3];
    let mut dropped = 0usize;
    for frame in &done {
        for (sum, n) in class_cells.iter_mut().zip(frame.class_cells) {
            *sum += n;
        }
        dropped += frame.dropped_non_finite;
    }

    let mut manifest = RunManifest::new("autolabel");
    manifest.push("scans", args.scans.display());
    manifest.push("calib", args.calib.display());
    manifest.push("masks", args.masks.display());
    manifest.push("boxes", args.boxes.display());
    manifest.push("mask_threshold", args.mask_threshold);
    manifest.push("frames_processed", done.len());
    manifest.push("frames_skipped", total - done.len());
    manifest.push("points_dropped_non_finite", dropped);
    for class in ClassId::ALL {
        manifest.push(
            &format!("points_{}", class.name()),
            class_cells[class.as_index()],
        );
    }
    manifest.write(&args.out)?;

    println!(
        "labeled {} of {total} frames ({} background, {} road, {} vehicle points) -> {}",
        done.len(),
        class_cells[0],
        class_cells[1],
        class_cells[2],
        args.out.display()
    );
    Ok(())
}

fn autolabel_frame(args: &AutolabelArgs, stem: &str) -> anyhow::Result<FrameOutcome<LabeledFrame>> {
    let scan_path = args.scans.join(format!("{stem}.bin"));
    let calib_path = args.calib.join(format!("{stem}.txt"));
    let mask_path = args.masks.join(format!("{stem}.pgm"));
    let boxes_path = args.boxes.join(format!("{stem}.txt"));
    for path in [&calib_path, &mask_path, &boxes_path] {
        if !path.is_file() {
            return Ok(FrameOutcome::Skipped(format!(
                "frame {stem}: missing {}, skipped",
                path.display()
            )));
        }
    }

    let (cloud, dropped_non_finite) = frames::load_scan(&scan_path)?;
    let calib_text = std::fs::read_to_string(&calib_path)
        .with_context(|| format!("reading {}", calib_path.display()))?;
    let calib =
        parse_kitti_calib(&calib_text).with_context(|| format!("in {}", calib_path.display()))?;

    let mask_bytes =
        std::fs::read(&mask_path).with_context(|| format!("reading {}", mask_path.display()))?;
    let (width, height, pixels) =
        io::pgm_from_bytes(&mask_bytes).with_context(|| format!("in {}", mask_path.display()))?;
    let mask = SegMask::from_gray(width, height, &pixels, args.mask_threshold)
        .with_context(|| format!("in {}", mask_path.display()))?;

    let boxes_text = std::fs::read_to_string(&boxes_path)
        .with_context(|| format!("reading {}", boxes_path.display()))?;
    let objects = parse_kitti_object_labels(&boxes_text, &calib)
        .with_context(|| format!("in {}", boxes_path.display()))?;
    let boxes: Vec<Box3D> = objects
        .iter()
        .filter(|o| is_vehicle_kind(&o.kind))
        .map(|o| o.box3d)
        .collect();

    let road = label_from_mask(&cloud, &calib, &mask);
    let vehicle = label_from_boxes(&cloud, &boxes);
    let merged = merge_labels(&road, &vehicle).with_context(|| format!("frame {stem}"))?;

    let mut class_cells = [0u64; 3];
    for class in &merged {
        class_cells[class.as_index()] += 1;
    }

    frames::write_output(&args.out, &format!("{stem}.bin"), &cloud.to_kitti_bytes())?;
    frames::write_output(&args.out, &format!("{stem}.labels"), &io::labels_to_bytes(&merged))?;
    Ok(FrameOutcome::Done(LabeledFrame {
        class_cells,
        dropped_non_finite,
    }))
}

pub fn project(args: &ProjectArgs) -> anyhow::Result<()> {
    let stems = frames::stems_with_suffix(&args.labeled, ".bin")?;
    anyhow::ensure!(
        !stems.is_empty(),
        "no labeled clouds (*.bin) found in {}",
        args.labeled.display()
    );
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let view = args.view.to_spec();

    let outcomes = run_pool(args.jobs, || {
        stems
            .par_iter()
            .map(|stem| project_frame(args, &view, stem))
            .collect::<anyhow::Result<Vec<_>>>()
    })??;

    let total = stems.len();
    let done = settle_frames(outcomes, "labeled")?;

    let mut manifest = RunManifest::new("project");
    manifest.push("labeled", args.labeled.display());
    manifest.push("view", args.view.name());
    manifest.push(
        "grid_dims",
        format!("({},{},{})", view.rows(), view.cols(), view.kind().channels()),
    );
    manifest.push("export_ppm", args.export_ppm);
    manifest.push("frames_processed", done.len());
    manifest.push("frames_skipped", total - done.len());
    manifest.write(&args.out)?;

    println!(
        "projected {} of {total} frames to {} grids ({},{},{}) -> {}",
        done.len(),
        args.view.name(),
        view.rows(),
        view.cols(),
        view.kind().channels(),
        args.out.display()
    );
    Ok(())
}

fn project_frame(
    args: &ProjectArgs,
    view: &ViewSpec,
    stem: &str,
) -> anyhow::Result<FrameOutcome<()>> {
    let scan_path = args.labeled.join(format!("{stem}.bin"));
    let labels_path = args.labeled.join(format!("{stem}.labels"));
    if !labels_path.is_file() {
        return Ok(FrameOutcome::Skipped(format!(
            "frame {stem}: missing {}, skipped",
            labels_path.display()
        )));
    }
    let cloud = frames::load_labeled_cloud(&scan_path, &labels_path)?;
    let (grid, labels) = view
        .project_labeled(&cloud)
        .with_context(|| format!("projecting frame {stem}"))?;
    frames::write_output(
        &args.out,
        &format!("{stem}.grid.tnsr"),
        &io::grid_image_to_bytes(&grid),
    )?;
    frames::write_output(
        &args.out,
        &format!("{stem}.labels.tnsr"),
        &io::label_grid_to_bytes(&labels),
    )?;
    if args.export_ppm {
        frames::write_output(&args.out, &format!("{stem}.ppm"), &io::label_grid_to_ppm(&labels))?;
    }
    Ok(FrameOutcome::Done(()))
}

/// Loads a training dataset from `dir`: projected grid tensors if any
/// are present, otherwise labeled clouds rasterized through `view`.
fn load_train_data(dir: &Path, view: ViewArg) -> anyhow::Result<(TrainData, usize, &'static str)> {
    let grid_stems = frames::stems_with_suffix(dir, ".grid.tnsr")?;
    if !grid_stems.is_empty() {
        let kind = frames::detect_grid_kind(dir, &grid_stems[0])?;
        let mut pairs = Vec::with_capacity(grid_stems.len());
        for stem in &grid_stems {
            pairs.push(frames::load_grid_pair(dir, stem, kind)?);
        }
        return Ok((TrainData::Grids(pairs), grid_stems.len(), "grids"));
    }
    let cloud_stems = frames::stems_with_suffix(dir, ".bin")?;
    anyhow::ensure!(
        !cloud_stems.is_empty(),
        "no training frames (*.grid.tnsr or *.bin) found in {}",
        dir.display()
    );
    let mut clouds = Vec::with_capacity(cloud_stems.len());
    for stem in &cloud_stems {
        let scan = dir.join(format!("{stem}.bin"));
        let labels = dir.join(format!("{stem}.labels"));
        anyhow::ensure!(
            labels.is_file(),
            "frame {stem}: missing label sidecar {}",
            labels.display()
        );
        clouds.push(frames::load_labeled_cloud(&scan, &labels)?);
    }
    let n = clouds.len();
    Ok((
        TrainData::Clouds {
            clouds,
            view: view.to_spec(),
        },
        n,
        "clouds",
    ))
}

pub fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::from_key_values(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }

    let (data, frames_loaded, mode) = load_train_data(&args.data, args.view)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let mut observer_error: Option<anyhow::Error> = None;
    let out_dir = args.out.clone();
    let checkpoint_every = config.checkpoint_every;
    let observer = |progress: TrainProgress<'_>| {
        let step = progress.iteration + 1;
        if checkpoint_every > 0 && step % checkpoint_every == 0 && observer_error.is_none() {
            let bytes = save_network(progress.network, step);
            if let Err(e) =
                frames::write_output(&out_dir, &format!("checkpoint_{step:07}.ckpt"), &bytes)
            {
                observer_error = Some(e);
            }
        }
    };

    let outcome = training::train(&data, &config, observer).context("training failed")?;
    if let Some(e) = observer_error {
        return Err(e.context("writing periodic checkpoint"));
    }

    let bytes = save_network(&outcome.network, outcome.iterations);
    frames::write_output(&args.out, "checkpoint.ckpt", &bytes)?;
    frames::write_output(
        &args.out,
        "train_log.csv",
        training::log_to_csv(&outcome.log).as_bytes(),
    )?;

    let mut manifest = RunManifest::new("train");
    manifest.push("data", args.data.display());
    manifest.push("mode", mode);
    if mode == "clouds" {
        manifest.push("view", args.view.name());
    }
    manifest.push("frames", frames_loaded);
    manifest.push("iterations", outcome.iterations);
    if let Some(row) = outcome.log.last() {
        manifest.push("final_loss", row.loss);
    }
    for class in ClassId::ALL {
        manifest.push(
            &format!("alpha_{}", class.name()),
            outcome.alpha[class.as_index()],
        );
    }
    manifest.push_key_values("config", &config.to_key_values());
    manifest.write(&args.out)?;

    let final_loss = outcome.log.last().map_or(f64::NAN, |row| row.loss);
    println!(
        "trained {} iterations on {frames_loaded} {mode} frames, final loss {final_loss:.6} -> {}",
        outcome.iterations,
        args.out.display()
    );
    Ok(())
}

/// Loads a checkpoint from disk.
fn load_checkpoint(path: &Path) -> anyhow::Result<(Network, u64)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    load_network(&bytes).with_context(|| format!("in {}", path.display()))
}

/// Runs one grid through the network and returns the predicted labels.
fn predict(net: &Network, grid: &salsanet::projection::GridImage) -> anyhow::Result<LabelGrid> {
    let mut batch = grid.to_chw_tensor();
    let dims = batch.dims().to_vec();
    batch
        .reshape(&[1, dims[0], dims[1], dims[2]])
        .context("batching grid")?;
    let logits = net.forward_infer(&batch).context("running network")?;
    let mut grids = training::logits_to_labels(&logits).context("decoding prediction")?;
    Ok(grids.remove(0))
}

pub fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    let (net, trained_iterations) = load_checkpoint(&args.checkpoint)?;
    let stems = frames::stems_with_suffix(&args.data, ".grid.tnsr")?;
    anyhow::ensure!(
        !stems.is_empty(),
        "no projected frames (*.grid.tnsr) found in {}",
        args.data.display()
    );
    let kind = frames::detect_grid_kind(&args.data, &stems[0])?;
    anyhow::ensure!(
        net.config.in_channels == kind.channels(),
        "checkpoint expects {} input channels but {} grids have {}",
        net.config.in_channels,
        match kind {
            GridKind::Bev => "bev",
            GridKind::Sfv => "sfv",
        },
        kind.channels()
    );

    let matrix = Mutex::new(ConfusionMatrix::new());
    run_pool(args.jobs, || -> anyhow::Result<()> {
        stems.par_iter().try_for_each(|stem| {
            let (grid, gt) = frames::load_grid_pair(&args.data, stem, kind)?;
            let pred = if args.identity {
                gt.clone()
            } else {
                predict(&net, &grid).with_context(|| format!("frame {stem}"))?
            };
            let mut local = ConfusionMatrix::new();
            local
                .accumulate(&pred, &gt)
                .with_context(|| format!("frame {stem}"))?;
            matrix.lock().unwrap().merge(&local);
            Ok(())
        })
    })??;
    let matrix = matrix.into_inner().unwrap();

    let csv = matrix.to_csv();
    frames::write_output(&args.out, "metrics.csv", csv.as_bytes())?;

    let mut manifest = RunManifest::new("eval");
    manifest.push("checkpoint", args.checkpoint.display());
    manifest.push("trained_iterations", trained_iterations);
    manifest.push("data", args.data.display());
    manifest.push("identity", args.identity);
    manifest.push("frames", stems.len());
    manifest.push("cells", matrix.total());
    manifest.push("mean_iou", format!("{:.4}", matrix.mean_iou()));
    manifest.write(&args.out)?;

    print!("{csv}");
    println!(
        "evaluated {} frames, mean IoU {:.2}% -> {}",
        stems.len(),
        100.0 * matrix.mean_iou(),
        args.out.display()
    );
    Ok(())
}

pub fn infer(args: &InferArgs) -> anyhow::Result<()> {
    let (net, trained_iterations) = load_checkpoint(&args.checkpoint)?;
    let view_arg = match args.view {
        Some(view) => view,
        None => match net.config.in_channels {
            4 => ViewArg::Bev,
            6 => ViewArg::Sfv,
            c => anyhow::bail!("checkpoint has {c} input channels, matching no known view"),
        },
    };
    let view = view_arg.to_spec();
    anyhow::ensure!(
        net.config.in_channels == view.kind().channels(),
        "checkpoint expects {} input channels but the {} view has {}",
        net.config.in_channels,
        view_arg.name(),
        view.kind().channels()
    );

    let (cloud, _) = frames::load_scan(&args.scan)?;
    let grid = view.project(&cloud);
    let pred = predict(&net, &grid)?;

    let stem = args
        .scan
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("scan");
    frames::write_output(
        &args.out,
        &format!("{stem}.labels.tnsr"),
        &io::label_grid_to_bytes(&pred),
    )?;
    if args.export_ppm {
        frames::write_output(&args.out, &format!("{stem}.ppm"), &io::label_grid_to_ppm(&pred))?;
    }

    let mut cells = [0u64; 3];
    for class in pred.data() {
        cells[class.as_index()] += 1;
    }

    let mut manifest = RunManifest::new("infer");
    manifest.push("checkpoint", args.checkpoint.display());
    manifest.push("trained_iterations", trained_iterations);
    manifest.push("scan", args.scan.display());
    manifest.push("view", view_arg.name());
    manifest.push("points", cloud.len());
    for class in ClassId::ALL {
        manifest.push(&format!("cells_{}", class.name()), cells[class.as_index()]);
    }
    manifest.write(&args.out)?;

    println!(
        "segmented {} ({} points): {} background, {} road, {} vehicle cells -> {}",
        args.scan.display(),
        cloud.len(),
        cells[0],
        cells[1],
        cells[2],
        args.out.display()
    );
    Ok(())
}
