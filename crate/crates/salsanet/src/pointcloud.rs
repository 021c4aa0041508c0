//! Loading, cropping and rigid transforms of raw LiDAR point clouds.
//!
//! Scans use the KITTI Velodyne binary format: a headerless sequence of
//! 16-byte records holding x, y, z, intensity as little-endian IEEE-754
//! 32-bit floats. Coordinates are meters in the LiDAR frame (x forward,
//! y left, z up); intensity is unitless reflectivity in [0, 1].

use crate::autolabel::ClassId;

/// One LiDAR return.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

/// An ordered point sequence, optionally with one class label per point.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    labels: Option<Vec<ClassId>>,
}

/// Rectangular ground-plane region of interest, half-open on both axes:
/// a point survives the crop when `x_min <= x < x_max` and
/// `y_min <= y < y_max`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiSpec {
    x_min: f32,
    x_max: f32,
    y_min: f32,
    y_max: f32,
}

/// Errors from point-cloud construction and ingestion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PointCloudError {
    /// Scan byte length is not a multiple of the 16-byte record size.
    MalformedScan { len: usize },
    /// Label sequence length differs from the point count.
    LabelLength { points: usize, labels: usize },
    /// ROI bounds are empty or inverted.
    EmptyRoi,
}

impl std::fmt::Display for PointCloudError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PointCloudError::MalformedScan { len } => {
                write!(f, "scan length {len} is not a multiple of 16 bytes")
            }
            PointCloudError::LabelLength { points, labels } => {
                write!(f, "{labels} labels for {points} points")
            }
            PointCloudError::EmptyRoi => write!(f, "ROI bounds must satisfy min < max"),
        }
    }
}

impl std::error::Error for PointCloudError {}

/// Result of scan ingestion: the parsed cloud plus a diagnostics tally of
/// records dropped for holding non-finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanReadOutcome {
    pub cloud: PointCloud,
    pub dropped_non_finite: usize,
}

impl RoiSpec {
    pub fn new(x_min: f32, x_max: f32, y_min: f32, y_max: f32) -> Result<RoiSpec, PointCloudError> {
        if !(x_min < x_max && y_min < y_max) {
            return Err(PointCloudError::EmptyRoi);
        }
        Ok(RoiSpec {
            x_min,
            x_max,
            y_min,
            y_max,
        })
    }

    pub fn x_min(&self) -> f32 {
        self.x_min
    }

    pub fn x_max(&self) -> f32 {
        self.x_max
    }

    pub fn y_min(&self) -> f32 {
        self.y_min
    }

    pub fn y_max(&self) -> f32 {
        self.y_max
    }

    /// True when the point falls inside the half-open ROI rectangle.
    pub fn contains(&self, p: &Point) -> bool {
        self.x_min <= p.x && p.x < self.x_max && self.y_min <= p.y && p.y < self.y_max
    }
}

impl PointCloud {
    /// An unlabeled cloud from a point list.
    pub fn new(points: Vec<Point>) -> PointCloud {
        PointCloud {
            points,
            labels: None,
        }
    }

    /// A labeled cloud; the label count must match the point count.
    pub fn with_labels(
        points: Vec<Point>,
        labels: Vec<ClassId>,
    ) -> Result<PointCloud, PointCloudError> {
        if labels.len() != points.len() {
            return Err(PointCloudError::LabelLength {
                points: points.len(),
                labels: labels.len(),
            });
        }
        Ok(PointCloud {
            points,
            labels: Some(labels),
        })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[ClassId]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Attaches labels to an existing cloud, replacing any prior labels.
    pub fn set_labels(&mut self, labels: Vec<ClassId>) -> Result<(), PointCloudError> {
        if labels.len() != self.points.len() {
            return Err(PointCloudError::LabelLength {
                points: self.points.len(),
                labels: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(())
    }

    /// Serializes back to the KITTI binary scan format.
    ///
    /// For clouds read from a well-formed scan with in-range intensities
    /// this reproduces the original bytes exactly.
    pub fn to_kitti_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.points.len() * 16);
        for p in &self.points {
            out.extend_from_slice(&p.x.to_le_bytes());
            out.extend_from_slice(&p.y.to_le_bytes());
            out.extend_from_slice(&p.z.to_le_bytes());
            out.extend_from_slice(&p.intensity.to_le_bytes());
        }
        out
    }
}

/// Parses a KITTI Velodyne scan.
///
/// Intensity is clamped to [0, 1]. Records with a non-finite coordinate or
/// intensity are dropped and counted in the returned tally instead of
/// failing the whole scan, since real captures contain occasional invalid
/// returns.
pub fn read_kitti_scan(bytes: &[u8]) -> Result<ScanReadOutcome, PointCloudError> {
    if bytes.len() % 16 != 0 {
        return Err(PointCloudError::MalformedScan { len: bytes.len() });
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut dropped = 0usize;
    for rec in bytes.chunks_exact(16) {
        let x = f32::from_le_bytes(rec[0..4].try_into().unwrap());
        let y = f32::from_le_bytes(rec[4..8].try_into().unwrap());
        let z = f32::from_le_bytes(rec[8..12].try_into().unwrap());
        let intensity = f32::from_le_bytes(rec[12..16].try_into().unwrap());
        if !(x.is_finite() && y.is_finite() && z.is_finite() && intensity.is_finite()) {
            dropped += 1;
            continue;
        }
        points.push(Point {
            x,
            y,
            z,
            intensity: intensity.clamp(0.0, 1.0),
        });
    }
    Ok(ScanReadOutcome {
        cloud: PointCloud::new(points),
        dropped_non_finite: dropped,
    })
}

/// Keeps exactly the points inside the half-open ROI, carrying labels along.
pub fn crop_roi(cloud: &PointCloud, roi: &RoiSpec) -> PointCloud {
    match cloud.labels() {
        None => PointCloud::new(
            cloud
                .points
                .iter()
                .filter(|p| roi.contains(p))
                .copied()
                .collect(),
        ),
        Some(labels) => {
            let mut pts = Vec::new();
            let mut labs = Vec::new();
            for (p, &l) in cloud.points.iter().zip(labels) {
                if roi.contains(p) {
                    pts.push(*p);
                    labs.push(l);
                }
            }
            PointCloud {
                points: pts,
                labels: Some(labs),
            }
        }
    }
}

/// Rotates every point about the z axis by `angle` radians
/// (counter-clockwise looking down the +z axis). z, intensity and labels
/// are unchanged.
pub fn rotate_z(cloud: &PointCloud, angle: f32) -> PointCloud {
    // The trig and the per-point products run in f64 so repeated small
    // augmentation rotations do not accumulate visible error.
    let (sin, cos) = (angle as f64).sin_cos();
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let (x, y) = (p.x as f64, p.y as f64);
            Point {
                x: (x * cos - y * sin) as f32,
                y: (x * sin + y * cos) as f32,
                z: p.z,
                intensity: p.intensity,
            }
        })
        .collect();
    PointCloud {
        points,
        labels: cloud.labels.clone(),
    }
}

/// Negates the y coordinate of every point (mirror across the x-z plane).
pub fn flip_y(cloud: &PointCloud) -> PointCloud {
    let points = cloud
        .points
        .iter()
        .map(|p| Point {
            x: p.x,
            y: -p.y,
            z: p.z,
            intensity: p.intensity,
        })
        .collect();
    PointCloud {
        points,
        labels: cloud.labels.clone(),
    }
}
