//! Frame discovery and on-disk format plumbing shared by the
//! subcommands.  Frames are paired across directories by filename stem.

use std::path::{Path, PathBuf};

use anyhow::Context;
use salsanet::io;
use salsanet::pointcloud::{read_kitti_scan, PointCloud};
use salsanet::projection::{GridImage, GridKind, LabelGrid};

/// Sorted filename stems of the regular files in `dir` whose name ends
/// with `suffix` (e.g. `.bin` or `.grid.tnsr`).
pub fn stems_with_suffix(dir: &Path, suffix: &str) -> anyhow::Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    let mut stems = Vec::new();
    for entry in entries {
        let entry = entry.with_context(|| format!("reading {}", dir.display()))?;
        if !entry.file_type().map(|t| t.is_file()).unwrap_or(false) {
            continue;
        }
        let name = entry.file_name();
        let Some(name) = name.to_str() else {
            continue;
        };
        if let Some(stem) = name.strip_suffix(suffix) {
            if !stem.is_empty() {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Reads a raw KITTI scan, reporting how many records were dropped for
/// non-finite values.
pub fn load_scan(path: &Path) -> anyhow::Result<(PointCloud, usize)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let outcome = read_kitti_scan(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    Ok((outcome.cloud, outcome.dropped_non_finite))
}

/// Reads a labeled cloud: a scan plus its per-point label sidecar.
pub fn load_labeled_cloud(scan: &Path, labels: &Path) -> anyhow::Result<PointCloud> {
    let (mut cloud, _) = load_scan(scan)?;
    let bytes = std::fs::read(labels).with_context(|| format!("reading {}", labels.display()))?;
    let classes =
        io::labels_from_bytes(&bytes).with_context(|| format!("parsing {}", labels.display()))?;
    cloud
        .set_labels(classes)
        .with_context(|| format!("attaching {}", labels.display()))?;
    Ok(cloud)
}

/// Reads a projected frame: the grid image tensor and its label grid.
pub fn load_grid_pair(
    dir: &Path,
    stem: &str,
    kind: GridKind,
) -> anyhow::Result<(GridImage, LabelGrid)> {
    let grid_path = dir.join(format!("{stem}.grid.tnsr"));
    let bytes =
        std::fs::read(&grid_path).with_context(|| format!("reading {}", grid_path.display()))?;
    let grid = io::grid_image_from_bytes(&bytes, kind)
        .with_context(|| format!("parsing {}", grid_path.display()))?;
    let label_path = dir.join(format!("{stem}.labels.tnsr"));
    let bytes =
        std::fs::read(&label_path).with_context(|| format!("reading {}", label_path.display()))?;
    let labels = io::label_grid_from_bytes(&bytes)
        .with_context(|| format!("parsing {}", label_path.display()))?;
    Ok((grid, labels))
}

/// Infers the grid view of a stored grid image from its channel count.
pub fn detect_grid_kind(dir: &Path, stem: &str) -> anyhow::Result<GridKind> {
    let path = dir.join(format!("{stem}.grid.tnsr"));
    let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let t = io::tensor_from_bytes(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    let dims = t.dims();
    anyhow::ensure!(
        dims.len() == 3,
        "{}: expected a rank-3 grid image, got rank {}",
        path.display(),
        dims.len()
    );
    match dims[2] {
        4 => Ok(GridKind::Bev),
        6 => Ok(GridKind::Sfv),
        c => anyhow::bail!("{}: {c} channels match no known view", path.display()),
    }
}

/// Writes `bytes` to `dir/name`, creating `dir` first if needed.
pub fn write_output(dir: &Path, name: &str, bytes: &[u8]) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}
