//! Transfer of camera-space labels (segmentation masks, 3D boxes) onto
//! LiDAR points.
//!
//! Road labels come from an image-space segmentation mask: each point is
//! projected into the camera and takes the mask value at its nearest
//! pixel. Vehicle labels come from 3D boxes: any point inside a box is a
//! vehicle. The two per-point sequences are merged with vehicle taking
//! precedence over road.

use crate::geometry::{lidar_to_pixel, point_in_box, Box3D, CalibrationSet, PixelProjection};
use crate::pointcloud::PointCloud;

/// Semantic class of a point or grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum ClassId {
    Background = 0,
    Road = 1,
    Vehicle = 2,
}

impl ClassId {
    /// Number of classes.
    pub const COUNT: usize = 3;

    /// All classes in id order.
    pub const ALL: [ClassId; 3] = [ClassId::Background, ClassId::Road, ClassId::Vehicle];

    /// Numeric id, 0..3.
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    /// Numeric id as an index.
    pub fn as_index(self) -> usize {
        self as usize
    }

    /// Parses a numeric id; values outside 0..3 are rejected.
    pub fn from_u8(v: u8) -> Option<ClassId> {
        match v {
            0 => Some(ClassId::Background),
            1 => Some(ClassId::Road),
            2 => Some(ClassId::Vehicle),
            _ => None,
        }
    }

    /// Lowercase class name for reports and file output.
    pub fn name(self) -> &'static str {
        match self {
            ClassId::Background => "background",
            ClassId::Road => "road",
            ClassId::Vehicle => "vehicle",
        }
    }
}

/// Errors from label transfer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AutolabelError {
    /// Mask dimensions are zero or do not match the data length.
    BadMask { width: usize, height: usize, data: usize },
    /// The two sequences passed to merge differ in length.
    LengthMismatch { road: usize, vehicle: usize },
}

impl std::fmt::Display for AutolabelError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AutolabelError::BadMask {
                width,
                height,
                data,
            } => write!(f, "mask {width}x{height} does not hold {data} values"),
            AutolabelError::LengthMismatch { road, vehicle } => {
                write!(f, "merge of {road} road and {vehicle} vehicle labels")
            }
        }
    }
}

impl std::error::Error for AutolabelError {}

/// An image-space segmentation mask, row-major, `height x width` cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    width: usize,
    height: usize,
    data: Vec<ClassId>,
}

impl SegMask {
    pub fn new(width: usize, height: usize, data: Vec<ClassId>) -> Result<SegMask, AutolabelError> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(AutolabelError::BadMask {
                width,
                height,
                data: data.len(),
            });
        }
        Ok(SegMask {
            width,
            height,
            data,
        })
    }

    /// Builds a road mask from 8-bit grayscale pixels: value >= `threshold`
    /// means road, anything below is background.
    pub fn from_gray(
        width: usize,
        height: usize,
        pixels: &[u8],
        threshold: u8,
    ) -> Result<SegMask, AutolabelError> {
        let data = pixels
            .iter()
            .map(|&v| {
                if v >= threshold {
                    ClassId::Road
                } else {
                    ClassId::Background
                }
            })
            .collect();
        SegMask::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn at(&self, row: usize, col: usize) -> ClassId {
        self.data[row * self.width + col]
    }
}

/// Labels each point with the mask value at its projected pixel.
///
/// Points behind the camera or whose nearest pixel lies outside the mask
/// are background. Pixel lookup rounds to the nearest pixel — labels are
/// categorical, so interpolation would be meaningless.
pub fn label_from_mask(cloud: &PointCloud, calib: &CalibrationSet, mask: &SegMask) -> Vec<ClassId> {
    cloud
        .points()
        .iter()
        .map(|p| match lidar_to_pixel(calib, p) {
            PixelProjection::BehindCamera => ClassId::Background,
            PixelProjection::InFront { u, v, .. } => {
                let col = u.round();
                let row = v.round();
                if row < 0.0 || col < 0.0 || row >= mask.height as f64 || col >= mask.width as f64 {
                    ClassId::Background
                } else {
                    mask.at(row as usize, col as usize)
                }
            }
        })
        .collect()
}

/// Labels each point vehicle when it lies inside any of the boxes,
/// background otherwise.
pub fn label_from_boxes(cloud: &PointCloud, boxes: &[Box3D]) -> Vec<ClassId> {
    cloud
        .points()
        .iter()
        .map(|p| {
            if boxes.iter().any(|b| point_in_box(p, b)) {
                ClassId::Vehicle
            } else {
                ClassId::Background
            }
        })
        .collect()
}

/// Combines a road-labeled and a vehicle-labeled sequence: vehicle wins
/// wherever the vehicle sequence says vehicle, otherwise the road label
/// stands (which may itself be background).
pub fn merge_labels(
    road: &[ClassId],
    vehicle: &[ClassId],
) -> Result<Vec<ClassId>, AutolabelError> {
    if road.len() != vehicle.len() {
        return Err(AutolabelError::LengthMismatch {
            road: road.len(),
            vehicle: vehicle.len(),
        });
    }
    Ok(road
        .iter()
        .zip(vehicle)
        .map(|(&r, &v)| if v == ClassId::Vehicle { ClassId::Vehicle } else { r })
        .collect())
}
