//! Rasterization of point clouds into bird-eye-view (BEV) and
//! spherical-front-view (SFV) grid images, plus label-grid targets.
//!
//! BEV bins points on the ground plane from the ROI minimum corner with
//! fixed cell sizes; SFV bins by elevation and horizontal angle. Both use
//! floor binning with index-range rejection, so a grid can overrun the
//! nominal ROI and the effective coverage is exactly `rows x cols` cells.

use crate::autolabel::ClassId;
use crate::nn::Tensor;
use crate::pointcloud::{Point, PointCloud, RoiSpec};

/// Lower edge of the elevation normalization range, meters.
pub const BEV_Z_LO: f32 = -3.0;
/// Upper edge of the elevation normalization range, meters.
pub const BEV_Z_HI: f32 = 3.0;
/// Point-count channel saturation value.
pub const BEV_COUNT_CAP: f32 = 64.0;

/// BEV channel order.
pub const BEV_MEAN_Z: usize = 0;
pub const BEV_MAX_Z: usize = 1;
pub const BEV_MEAN_INTENSITY: usize = 2;
pub const BEV_COUNT: usize = 3;

/// SFV channel order.
pub const SFV_X: usize = 0;
pub const SFV_Y: usize = 1;
pub const SFV_Z: usize = 2;
pub const SFV_INTENSITY: usize = 3;
pub const SFV_RANGE: usize = 4;
pub const SFV_MASK: usize = 5;

/// Errors from projection operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProjectionError {
    /// Spherical angles are undefined for points on the z axis.
    UndefinedAngle,
    /// rasterize_labels needs a labeled cloud.
    MissingLabels,
    /// A spec parameter is non-positive or an interval is inverted.
    BadSpec(&'static str),
}

impl std::fmt::Display for ProjectionError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProjectionError::UndefinedAngle => {
                write!(f, "spherical angles undefined on the z axis")
            }
            ProjectionError::MissingLabels => write!(f, "point cloud carries no labels"),
            ProjectionError::BadSpec(what) => write!(f, "invalid grid spec: {what}"),
        }
    }
}

impl std::error::Error for ProjectionError {}

/// Bird-eye-view grid geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevSpec {
    roi: RoiSpec,
    cell_x: f32,
    cell_y: f32,
    height: usize,
    width: usize,
}

/// Spherical-front-view grid geometry. Angles are stored in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SfvSpec {
    azimuth_fov_deg: f32,
    zenith_min_deg: f32,
    zenith_max_deg: f32,
    rows: usize,
    cols: usize,
}

/// Which rasterization produced a [`GridImage`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridKind {
    Bev,
    Sfv,
}

impl GridKind {
    /// Channel count of the image kind.
    pub fn channels(self) -> usize {
        match self {
            GridKind::Bev => 4,
            GridKind::Sfv => 6,
        }
    }
}

/// A dense rows x cols x channels raster of `f32` cell statistics.
///
/// Storage is channel-planar (all of channel 0, then channel 1, ...), each
/// plane row-major, which feeds the C,H,W network input without a shuffle.
#[derive(Clone, Debug, PartialEq)]
pub struct GridImage {
    kind: GridKind,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// A rows x cols grid of class ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    data: Vec<ClassId>,
}

/// Anything that can map a point to a grid cell.
pub trait GridBinning {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    /// Cell for the point, or `None` when it falls outside the grid.
    fn bin(&self, p: &Point) -> Option<(usize, usize)>;
}

impl BevSpec {
    pub fn new(
        roi: RoiSpec,
        cell_x: f32,
        cell_y: f32,
        height: usize,
        width: usize,
    ) -> Result<BevSpec, ProjectionError> {
        if !(cell_x > 0.0 && cell_y > 0.0) {
            return Err(ProjectionError::BadSpec("cell sizes must be > 0"));
        }
        if height == 0 || width == 0 {
            return Err(ProjectionError::BadSpec("grid dimensions must be > 0"));
        }
        Ok(BevSpec {
            roi,
            cell_x,
            cell_y,
            height,
            width,
        })
    }

    /// The configuration used throughout: ROI x in [0, 50], y in [-6, 12],
    /// cells 0.2 x 0.3 m, grid 256 x 64.
    pub fn kitti() -> BevSpec {
        BevSpec::new(
            RoiSpec::new(0.0, 50.0, -6.0, 12.0).expect("static bounds"),
            0.2,
            0.3,
            256,
            64,
        )
        .expect("static spec")
    }

    pub fn roi(&self) -> &RoiSpec {
        &self.roi
    }

    pub fn cell_x(&self) -> f32 {
        self.cell_x
    }

    pub fn cell_y(&self) -> f32 {
        self.cell_y
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

impl SfvSpec {
    pub fn new(
        azimuth_fov_deg: f32,
        zenith_min_deg: f32,
        zenith_max_deg: f32,
        rows: usize,
        cols: usize,
    ) -> Result<SfvSpec, ProjectionError> {
        if azimuth_fov_deg <= 0.0 {
            return Err(ProjectionError::BadSpec("azimuth FOV must be > 0"));
        }
        if zenith_min_deg >= zenith_max_deg {
            return Err(ProjectionError::BadSpec("zenith_min must be < zenith_max"));
        }
        if rows == 0 || cols == 0 {
            return Err(ProjectionError::BadSpec("grid dimensions must be > 0"));
        }
        Ok(SfvSpec {
            azimuth_fov_deg,
            zenith_min_deg,
            zenith_max_deg,
            rows,
            cols,
        })
    }

    /// The configuration used throughout: 90 degree front view, zenith
    /// -24.9..+2.0 degrees (HDL-64E beam fan), 64 x 512 cells.
    pub fn hdl64() -> SfvSpec {
        SfvSpec::new(90.0, -24.9, 2.0, 64, 512).expect("static spec")
    }

    pub fn azimuth_fov_deg(&self) -> f32 {
        self.azimuth_fov_deg
    }

    pub fn zenith_min_deg(&self) -> f32 {
        self.zenith_min_deg
    }

    pub fn zenith_max_deg(&self) -> f32 {
        self.zenith_max_deg
    }

    pub fn rows_(&self) -> usize {
        self.rows
    }

    pub fn cols_(&self) -> usize {
        self.cols
    }
}

impl GridImage {
    /// An all-zero image of the kind's channel count.
    pub fn zeros(kind: GridKind, height: usize, width: usize) -> GridImage {
        GridImage {
            kind,
            height,
            width,
            data: vec![0.0; kind.channels() * height * width],
        }
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.kind.channels()
    }

    pub fn at(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    pub fn at_mut(&mut self, row: usize, col: usize, channel: usize) -> &mut f32 {
        &mut self.data[(channel * self.height + row) * self.width + col]
    }

    /// One channel as a row-major rows x cols plane.
    pub fn channel_plane(&self, channel: usize) -> &[f32] {
        &self.data[channel * self.height * self.width..(channel + 1) * self.height * self.width]
    }

    /// Full planar C,H,W data.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Copies into a rank-3 tensor with dims [channels, height, width].
    pub fn to_chw_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.channels(), self.height, self.width], self.data.clone())
            .expect("dims match data by construction")
    }

    /// Rebuilds an image from planar C,H,W data.
    pub fn from_chw(
        kind: GridKind,
        height: usize,
        width: usize,
        data: Vec<f32>,
    ) -> Result<GridImage, ProjectionError> {
        if data.len() != kind.channels() * height * width {
            return Err(ProjectionError::BadSpec("data length mismatch"));
        }
        Ok(GridImage {
            kind,
            height,
            width,
            data,
        })
    }
}

impl LabelGrid {
    /// A grid with every cell set to background.
    pub fn background(height: usize, width: usize) -> LabelGrid {
        LabelGrid {
            height,
            width,
            data: vec![ClassId::Background; height * width],
        }
    }

    pub fn from_data(
        height: usize,
        width: usize,
        data: Vec<ClassId>,
    ) -> Result<LabelGrid, ProjectionError> {
        if data.len() != height * width {
            return Err(ProjectionError::BadSpec("label data length mismatch"));
        }
        Ok(LabelGrid {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn at(&self, row: usize, col: usize) -> ClassId {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, class: ClassId) {
        self.data[row * self.width + col] = class;
    }

    pub fn data(&self) -> &[ClassId] {
        &self.data
    }
}

/// BEV cell of a point: `row = floor((x - x_min)/cell_x)`,
/// `col = floor((y - y_min)/cell_y)`, rejected when either index leaves the
/// grid. The binning runs in f64 so cell boundaries do not depend on f32
/// rounding of the subtraction.
pub fn bev_bin(p: &Point, spec: &BevSpec) -> Option<(usize, usize)> {
    let row = ((p.x as f64 - spec.roi.x_min() as f64) / spec.cell_x as f64).floor();
    let col = ((p.y as f64 - spec.roi.y_min() as f64) / spec.cell_y as f64).floor();
    if row < 0.0 || col < 0.0 || row >= spec.height as f64 || col >= spec.width as f64 {
        return None;
    }
    Some((row as usize, col as usize))
}

/// Elevation and horizontal angle of a point:
/// `theta = arcsin(z / sqrt(x^2+y^2+z^2))`, `phi = arcsin(y / sqrt(x^2+y^2))`.
///
/// Both angles are undefined on the z axis (including the origin), where
/// the horizontal radius vanishes.
pub fn sfv_angles(p: &Point) -> Result<(f64, f64), ProjectionError> {
    let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
    let r2 = (x * x + y * y).sqrt();
    if r2 == 0.0 {
        return Err(ProjectionError::UndefinedAngle);
    }
    let r3 = (x * x + y * y + z * z).sqrt();
    Ok(((z / r3).asin(), (y / r2).asin()))
}

/// SFV cell of a point, or `None` when outside the field of view (or on
/// the z axis, where the angles are undefined).
///
/// Row 0 is the top of the image (zenith_max); the elevation index
/// `u = floor((theta - zenith_min)/delta_theta)` counts from the bottom,
/// so the stored row is `rows - 1 - u`.
pub fn sfv_bin(p: &Point, spec: &SfvSpec) -> Option<(usize, usize)> {
    let (theta, phi) = sfv_angles(p).ok()?;
    let zmin = (spec.zenith_min_deg as f64).to_radians();
    let zmax = (spec.zenith_max_deg as f64).to_radians();
    let half_fov = (spec.azimuth_fov_deg as f64).to_radians() / 2.0;
    let dtheta = (zmax - zmin) / spec.rows as f64;
    let dphi = 2.0 * half_fov / spec.cols as f64;
    let u = ((theta - zmin) / dtheta).floor();
    let v = ((phi + half_fov) / dphi).floor();
    if u < 0.0 || v < 0.0 || u >= spec.rows as f64 || v >= spec.cols as f64 {
        return None;
    }
    Some((spec.rows - 1 - u as usize, v as usize))
}

impl GridBinning for BevSpec {
    fn rows(&self) -> usize {
        self.height
    }

    fn cols(&self) -> usize {
        self.width
    }

    fn bin(&self, p: &Point) -> Option<(usize, usize)> {
        bev_bin(p, self)
    }
}

impl GridBinning for SfvSpec {
    fn rows(&self) -> usize {
        self.rows
    }

    fn cols(&self) -> usize {
        self.cols
    }

    fn bin(&self, p: &Point) -> Option<(usize, usize)> {
        sfv_bin(p, self)
    }
}

/// Raw (un-normalized) BEV statistics: per occupied cell, channel 0 = mean
/// z, 1 = max z, 2 = mean intensity, 3 = point count. Empty cells are zero
/// in every channel.
pub fn project_bev_raw(cloud: &PointCloud, spec: &BevSpec) -> GridImage {
    let (h, w) = (spec.height, spec.width);
    let mut sum_z = vec![0.0f64; h * w];
    let mut max_z = vec![f64::NEG_INFINITY; h * w];
    let mut sum_i = vec![0.0f64; h * w];
    let mut count = vec![0u32; h * w];
    for p in cloud.points() {
        let Some((r, c)) = bev_bin(p, spec) else {
            continue;
        };
        let cell = r * w + c;
        sum_z[cell] += p.z as f64;
        max_z[cell] = max_z[cell].max(p.z as f64);
        sum_i[cell] += p.intensity as f64;
        count[cell] += 1;
    }
    let mut img = GridImage::zeros(GridKind::Bev, h, w);
    for r in 0..h {
        for c in 0..w {
            let cell = r * w + c;
            let n = count[cell];
            if n == 0 {
                continue;
            }
            *img.at_mut(r, c, BEV_MEAN_Z) = (sum_z[cell] / n as f64) as f32;
            *img.at_mut(r, c, BEV_MAX_Z) = max_z[cell] as f32;
            *img.at_mut(r, c, BEV_MEAN_INTENSITY) = (sum_i[cell] / n as f64) as f32;
            *img.at_mut(r, c, BEV_COUNT) = n as f32;
        }
    }
    img
}

/// Maps raw BEV statistics into [0, 1]: the elevation channels by a fixed
/// linear-clamp over [-3, +3] m, intensity passed through, count by
/// `min(count, 64)/64`. Empty cells (raw count 0) stay zero everywhere so
/// absence is not encoded as mid-range elevation.
pub fn normalize_bev(raw: &GridImage) -> GridImage {
    let mut out = GridImage::zeros(GridKind::Bev, raw.height, raw.width);
    let norm_z = |z: f32| ((z - BEV_Z_LO) / (BEV_Z_HI - BEV_Z_LO)).clamp(0.0, 1.0);
    for r in 0..raw.height {
        for c in 0..raw.width {
            if raw.at(r, c, BEV_COUNT) == 0.0 {
                continue;
            }
            *out.at_mut(r, c, BEV_MEAN_Z) = norm_z(raw.at(r, c, BEV_MEAN_Z));
            *out.at_mut(r, c, BEV_MAX_Z) = norm_z(raw.at(r, c, BEV_MAX_Z));
            *out.at_mut(r, c, BEV_MEAN_INTENSITY) = raw.at(r, c, BEV_MEAN_INTENSITY);
            *out.at_mut(r, c, BEV_COUNT) =
                raw.at(r, c, BEV_COUNT).min(BEV_COUNT_CAP) / BEV_COUNT_CAP;
        }
    }
    out
}

/// Raw projection followed by normalization — the network-ready BEV image.
pub fn project_bev(cloud: &PointCloud, spec: &BevSpec) -> GridImage {
    normalize_bev(&project_bev_raw(cloud, spec))
}

/// Spherical-front-view projection. Each occupied cell stores the x, y, z,
/// intensity and range of its nearest binned point (first LiDAR return)
/// plus an occupancy mask of 1; untouched cells are all zero.
pub fn project_sfv(cloud: &PointCloud, spec: &SfvSpec) -> GridImage {
    let (rows, cols) = (spec.rows, spec.cols);
    let mut img = GridImage::zeros(GridKind::Sfv, rows, cols);
    let mut best_r = vec![f64::INFINITY; rows * cols];
    for p in cloud.points() {
        let Some((r, c)) = sfv_bin(p, spec) else {
            continue;
        };
        let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
        let range = (x * x + y * y + z * z).sqrt();
        let cell = r * cols + c;
        if range >= best_r[cell] {
            continue;
        }
        best_r[cell] = range;
        *img.at_mut(r, c, SFV_X) = p.x;
        *img.at_mut(r, c, SFV_Y) = p.y;
        *img.at_mut(r, c, SFV_Z) = p.z;
        *img.at_mut(r, c, SFV_INTENSITY) = p.intensity;
        *img.at_mut(r, c, SFV_RANGE) = range as f32;
        *img.at_mut(r, c, SFV_MASK) = 1.0;
    }
    img
}

/// Rasterizes per-point labels to a grid: each cell takes the plurality
/// class of its binned points, with ties and contests resolved by the
/// priority vehicle > road > background; cells without points are
/// background.
pub fn rasterize_labels<G: GridBinning>(
    cloud: &PointCloud,
    spec: &G,
) -> Result<LabelGrid, ProjectionError> {
    let labels = cloud.labels().ok_or(ProjectionError::MissingLabels)?;
    let (rows, cols) = (spec.rows(), spec.cols());
    let mut counts = vec![[0u32; ClassId::COUNT]; rows * cols];
    for (p, &label) in cloud.points().iter().zip(labels) {
        if let Some((r, c)) = spec.bin(p) {
            counts[r * cols + c][label.as_index()] += 1;
        }
    }
    let mut grid = LabelGrid::background(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let cell = &counts[r * cols + c];
            let total: u32 = cell.iter().sum();
            if total == 0 {
                continue;
            }
            let max = *cell.iter().max().expect("three classes");
            // Scan classes from highest priority (vehicle) down; the first
            // one at the plurality count wins.
            for &class in ClassId::ALL.iter().rev() {
                if cell[class.as_index()] == max {
                    grid.set(r, c, class);
                    break;
                }
            }
        }
    }
    Ok(grid)
}

/// A concrete view choice carrying its grid geometry, so callers can
/// project frames without matching on the view everywhere.
#[derive(Clone, Debug, PartialEq)]
pub enum ViewSpec {
    Bev(BevSpec),
    Sfv(SfvSpec),
}

impl ViewSpec {
    pub fn kind(&self) -> GridKind {
        match self {
            ViewSpec::Bev(_) => GridKind::Bev,
            ViewSpec::Sfv(_) => GridKind::Sfv,
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            ViewSpec::Bev(s) => s.rows(),
            ViewSpec::Sfv(s) => s.rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            ViewSpec::Bev(s) => s.cols(),
            ViewSpec::Sfv(s) => s.cols(),
        }
    }

    /// Projects a cloud into this view's grid image.
    pub fn project(&self, cloud: &PointCloud) -> GridImage {
        match self {
            ViewSpec::Bev(s) => project_bev(cloud, s),
            ViewSpec::Sfv(s) => project_sfv(cloud, s),
        }
    }

    /// Projects a labeled cloud into (grid image, label grid).
    pub fn project_labeled(
        &self,
        cloud: &PointCloud,
    ) -> Result<(GridImage, LabelGrid), ProjectionError> {
        let labels = match self {
            ViewSpec::Bev(s) => rasterize_labels(cloud, s)?,
            ViewSpec::Sfv(s) => rasterize_labels(cloud, s)?,
        };
        Ok((self.project(cloud), labels))
    }
}
