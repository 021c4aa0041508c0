//! KITTI calibration parsing and LiDAR-to-camera projection geometry.
//!
//! The calibration chain projects a LiDAR-frame point into pixel
//! coordinates of the left color camera (P2). Object labels travel the
//! opposite way: camera-frame 3D boxes are converted into LiDAR-frame
//! [`Box3D`] values via the inverse extrinsics.

use crate::pointcloud::Point;

pub type Mat3 = [[f64; 3]; 3];
pub type Mat34 = [[f64; 4]; 3];

/// Camera intrinsics, rectification and LiDAR-to-camera extrinsics.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    /// P2: 3x4 projection matrix of the left color camera, in pixels.
    cam_projection: Mat34,
    /// R0_rect: 3x3 rectifying rotation, unitless.
    rectification: Mat3,
    /// Tr_velo_to_cam: 3x4 rigid transform, LiDAR frame to camera frame.
    lidar_to_cam: Mat34,
}

/// An axis-aligned-in-its-own-frame cuboid in the LiDAR frame.
///
/// `size` is (length, width, height): extent along the box's own x, y and z
/// axes. `yaw` rotates the box frame about the LiDAR z axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    center: [f32; 3],
    size: [f32; 3],
    yaw: f32,
}

/// A parsed KITTI object annotation converted to the LiDAR frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectLabel {
    /// KITTI object type string, e.g. "Car", "Van", "Pedestrian".
    pub kind: String,
    pub box3d: Box3D,
}

/// Result of projecting a LiDAR point into the camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PixelProjection {
    /// Point is in front of the camera at pixel (u, v); depth is the
    /// rectified-camera z in meters.
    InFront { u: f64, v: f64, depth: f64 },
    /// Rectified-camera depth was <= 0; callers treat these as background.
    BehindCamera,
}

/// Errors from calibration and object-label ingestion.
#[derive(Debug, Clone, PartialEq)]
pub enum GeometryError {
    /// A required calibration key is absent.
    MissingKey { key: &'static str },
    /// A calibration line has the wrong number of values.
    ValueCount {
        key: &'static str,
        expected: usize,
        got: usize,
    },
    /// A calibration value failed to parse as a decimal number.
    BadNumber { key: &'static str },
    /// A rotation block deviates from orthonormality by more than 1e-3.
    NotOrthonormal { what: &'static str },
    /// An object label line is malformed.
    BadObjectLine { line: usize, reason: String },
    /// A box size component is not strictly positive.
    EmptyBox,
}

impl std::fmt::Display for GeometryError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GeometryError::MissingKey { key } => write!(f, "calibration key {key} missing"),
            GeometryError::ValueCount { key, expected, got } => {
                write!(f, "calibration key {key} has {got} values, expected {expected}")
            }
            GeometryError::BadNumber { key } => {
                write!(f, "calibration key {key} holds a malformed number")
            }
            GeometryError::NotOrthonormal { what } => {
                write!(f, "{what} is not orthonormal within 1e-3")
            }
            GeometryError::BadObjectLine { line, reason } => {
                write!(f, "object label line {line}: {reason}")
            }
            GeometryError::EmptyBox => write!(f, "box size components must be > 0"),
        }
    }
}

impl std::error::Error for GeometryError {}

fn max_abs_dev_from_identity(g: &Mat3) -> f64 {
    let mut worst = 0.0f64;
    for (r, row) in g.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let target = if r == c { 1.0 } else { 0.0 };
            worst = worst.max((v - target).abs());
        }
    }
    worst
}

/// R^T * R for a 3x3 block.
fn gram(r: &Mat3) -> Mat3 {
    let mut g = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for row in r {
                g[i][j] += row[i] * row[j];
            }
        }
    }
    g
}

fn rotation_of(m: &Mat34) -> Mat3 {
    [
        [m[0][0], m[0][1], m[0][2]],
        [m[1][0], m[1][1], m[1][2]],
        [m[2][0], m[2][1], m[2][2]],
    ]
}

impl CalibrationSet {
    /// Builds a calibration set, checking that the rectification and the
    /// rotation part of the extrinsics are orthonormal within 1e-3.
    pub fn new(
        cam_projection: Mat34,
        rectification: Mat3,
        lidar_to_cam: Mat34,
    ) -> Result<CalibrationSet, GeometryError> {
        if max_abs_dev_from_identity(&gram(&rectification)) > 1e-3 {
            return Err(GeometryError::NotOrthonormal { what: "R0_rect" });
        }
        if max_abs_dev_from_identity(&gram(&rotation_of(&lidar_to_cam))) > 1e-3 {
            return Err(GeometryError::NotOrthonormal {
                what: "Tr_velo_to_cam rotation",
            });
        }
        Ok(CalibrationSet {
            cam_projection,
            rectification,
            lidar_to_cam,
        })
    }

    pub fn cam_projection(&self) -> &Mat34 {
        &self.cam_projection
    }

    pub fn rectification(&self) -> &Mat3 {
        &self.rectification
    }

    pub fn lidar_to_cam(&self) -> &Mat34 {
        &self.lidar_to_cam
    }

    /// Maps a LiDAR-frame point into the rectified camera frame.
    pub fn lidar_to_rect(&self, x: f64, y: f64, z: f64) -> [f64; 3] {
        let t = &self.lidar_to_cam;
        let cam = [
            t[0][0] * x + t[0][1] * y + t[0][2] * z + t[0][3],
            t[1][0] * x + t[1][1] * y + t[1][2] * z + t[1][3],
            t[2][0] * x + t[2][1] * y + t[2][2] * z + t[2][3],
        ];
        let r = &self.rectification;
        [
            r[0][0] * cam[0] + r[0][1] * cam[1] + r[0][2] * cam[2],
            r[1][0] * cam[0] + r[1][1] * cam[1] + r[1][2] * cam[2],
            r[2][0] * cam[0] + r[2][1] * cam[1] + r[2][2] * cam[2],
        ]
    }

    /// Inverse of [`lidar_to_rect`](Self::lidar_to_rect): rectified camera
    /// frame back to the LiDAR frame, using the transposes of the
    /// orthonormal rotation blocks.
    pub fn rect_to_lidar(&self, x: f64, y: f64, z: f64) -> [f64; 3] {
        let r = &self.rectification;
        // R0^T * rect
        let cam = [
            r[0][0] * x + r[1][0] * y + r[2][0] * z,
            r[0][1] * x + r[1][1] * y + r[2][1] * z,
            r[0][2] * x + r[1][2] * y + r[2][2] * z,
        ];
        let t = &self.lidar_to_cam;
        let d = [cam[0] - t[0][3], cam[1] - t[1][3], cam[2] - t[2][3]];
        // R^T * (cam - t)
        [
            t[0][0] * d[0] + t[1][0] * d[1] + t[2][0] * d[2],
            t[0][1] * d[0] + t[1][1] * d[1] + t[2][1] * d[2],
            t[0][2] * d[0] + t[1][2] * d[1] + t[2][2] * d[2],
        ]
    }

    /// Rotates a rectified-camera-frame direction into the LiDAR frame
    /// (no translation).
    fn rect_dir_to_lidar(&self, d: [f64; 3]) -> [f64; 3] {
        let r = &self.rectification;
        let cam = [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ];
        let t = &self.lidar_to_cam;
        [
            t[0][0] * cam[0] + t[1][0] * cam[1] + t[2][0] * cam[2],
            t[0][1] * cam[0] + t[1][1] * cam[1] + t[2][1] * cam[2],
            t[0][2] * cam[0] + t[1][2] * cam[1] + t[2][2] * cam[2],
        ]
    }
}

impl Box3D {
    pub fn new(center: [f32; 3], size: [f32; 3], yaw: f32) -> Result<Box3D, GeometryError> {
        if !size.iter().all(|&s| s > 0.0) {
            return Err(GeometryError::EmptyBox);
        }
        Ok(Box3D { center, size, yaw })
    }

    pub fn center(&self) -> [f32; 3] {
        self.center
    }

    /// (length, width, height).
    pub fn size(&self) -> [f32; 3] {
        self.size
    }

    pub fn yaw(&self) -> f32 {
        self.yaw
    }
}

/// Projects a LiDAR point through the full calibration chain
/// `y = P2 * [R0 0; 0 1] * [Tr; 0 0 0 1] * (x, y, z, 1)^T` and returns the
/// pixel coordinates plus the rectified-camera depth, or a behind-camera
/// marker when that depth is <= 0.
pub fn lidar_to_pixel(calib: &CalibrationSet, p: &Point) -> PixelProjection {
    let rect = calib.lidar_to_rect(p.x as f64, p.y as f64, p.z as f64);
    let depth = rect[2];
    if depth <= 0.0 {
        return PixelProjection::BehindCamera;
    }
    let pm = &calib.cam_projection;
    let y0 = pm[0][0] * rect[0] + pm[0][1] * rect[1] + pm[0][2] * rect[2] + pm[0][3];
    let y1 = pm[1][0] * rect[0] + pm[1][1] * rect[1] + pm[1][2] * rect[2] + pm[1][3];
    let y2 = pm[2][0] * rect[0] + pm[2][1] * rect[1] + pm[2][2] * rect[2] + pm[2][3];
    PixelProjection::InFront {
        u: y0 / y2,
        v: y1 / y2,
        depth,
    }
}

/// True iff the point lies inside the box, boundary inclusive: expressed in
/// the box frame (translate by -center, rotate by -yaw), every coordinate
/// magnitude is within the corresponding half-extent.
pub fn point_in_box(p: &Point, b: &Box3D) -> bool {
    let dx = p.x as f64 - b.center[0] as f64;
    let dy = p.y as f64 - b.center[1] as f64;
    let dz = p.z as f64 - b.center[2] as f64;
    let (sin, cos) = (-(b.yaw as f64)).sin_cos();
    let bx = dx * cos - dy * sin;
    let by = dx * sin + dy * cos;
    bx.abs() <= b.size[0] as f64 / 2.0
        && by.abs() <= b.size[1] as f64 / 2.0
        && dz.abs() <= b.size[2] as f64 / 2.0
}

fn parse_matrix_line(
    text: &str,
    key: &'static str,
    expected: usize,
) -> Result<Vec<f64>, GeometryError> {
    for line in text.lines() {
        let line = line.trim();
        let Some(rest) = line.strip_prefix(key) else {
            continue;
        };
        let Some(rest) = rest.strip_prefix(':') else {
            continue;
        };
        let mut values = Vec::with_capacity(expected);
        for tok in rest.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| GeometryError::BadNumber { key })?;
            values.push(v);
        }
        if values.len() != expected {
            return Err(GeometryError::ValueCount {
                key,
                expected,
                got: values.len(),
            });
        }
        return Ok(values);
    }
    Err(GeometryError::MissingKey { key })
}

/// Parses a KITTI calibration file. Requires the keys `P2:` (12 values),
/// `R0_rect:` (9) and `Tr_velo_to_cam:` (12); other lines are ignored.
pub fn parse_kitti_calib(text: &str) -> Result<CalibrationSet, GeometryError> {
    let p2 = parse_matrix_line(text, "P2", 12)?;
    let r0 = parse_matrix_line(text, "R0_rect", 9)?;
    let tr = parse_matrix_line(text, "Tr_velo_to_cam", 12)?;
    let cam_projection = [
        [p2[0], p2[1], p2[2], p2[3]],
        [p2[4], p2[5], p2[6], p2[7]],
        [p2[8], p2[9], p2[10], p2[11]],
    ];
    let rectification = [
        [r0[0], r0[1], r0[2]],
        [r0[3], r0[4], r0[5]],
        [r0[6], r0[7], r0[8]],
    ];
    let lidar_to_cam = [
        [tr[0], tr[1], tr[2], tr[3]],
        [tr[4], tr[5], tr[6], tr[7]],
        [tr[8], tr[9], tr[10], tr[11]],
    ];
    CalibrationSet::new(cam_projection, rectification, lidar_to_cam)
}

/// Writes a calibration set back to the KITTI text format with 17
/// significant digits per value, enough for a bit-exact parse round trip.
pub fn serialize_kitti_calib(calib: &CalibrationSet) -> String {
    fn push(out: &mut String, key: &str, values: impl Iterator<Item = f64>) {
        out.push_str(key);
        out.push(':');
        for v in values {
            out.push(' ');
            out.push_str(&format!("{v:.16e}"));
        }
        out.push('\n');
    }
    let mut out = String::new();
    push(
        &mut out,
        "P2",
        calib.cam_projection.iter().flatten().copied(),
    );
    push(
        &mut out,
        "R0_rect",
        calib.rectification.iter().flatten().copied(),
    );
    push(
        &mut out,
        "Tr_velo_to_cam",
        calib.lidar_to_cam.iter().flatten().copied(),
    );
    out
}

/// True for the KITTI object types this pipeline treats as vehicles.
pub fn is_vehicle_kind(kind: &str) -> bool {
    matches!(kind, "Car" | "Van" | "Truck")
}

/// Parses KITTI 3D object label lines and converts each box to the LiDAR
/// frame.
///
/// Line format: type, truncation, occlusion, alpha, four 2D bbox values,
/// dimensions h w l, location x y z (bottom-center, rectified camera
/// frame), rotation_y — 15 fields, with an optional trailing score.
/// Entries without a positive 3D size (e.g. `DontCare`) are skipped.
pub fn parse_kitti_object_labels(
    text: &str,
    calib: &CalibrationSet,
) -> Result<Vec<ObjectLabel>, GeometryError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 15 && fields.len() != 16 {
            return Err(GeometryError::BadObjectLine {
                line: idx + 1,
                reason: format!("{} fields, expected 15 or 16", fields.len()),
            });
        }
        let kind = fields[0].to_string();
        let mut nums = [0.0f64; 14];
        for (slot, tok) in nums.iter_mut().zip(&fields[1..15]) {
            *slot = tok.parse().map_err(|_| GeometryError::BadObjectLine {
                line: idx + 1,
                reason: format!("malformed number {tok:?}"),
            })?;
        }
        let (h, w, l) = (nums[7], nums[8], nums[9]);
        let (x, y, z) = (nums[10], nums[11], nums[12]);
        let ry = nums[13];
        if !(h > 0.0 && w > 0.0 && l > 0.0) {
            continue;
        }
        // KITTI gives the bottom-center; lift by h/2 to the geometric
        // center (camera y points down), then change frames.
        let center_rect = [x, y - h / 2.0, z];
        let c = calib.rect_to_lidar(center_rect[0], center_rect[1], center_rect[2]);
        // The box heading is the camera-frame direction (cos ry, 0, -sin ry);
        // its LiDAR-frame azimuth is the box yaw. Exact for any calibration,
        // unlike the common flat approximation yaw = -ry - pi/2.
        let hd = calib.rect_dir_to_lidar([ry.cos(), 0.0, -ry.sin()]);
        let yaw = hd[1].atan2(hd[0]);
        out.push(ObjectLabel {
            kind,
            box3d: Box3D::new(
                [c[0] as f32, c[1] as f32, c[2] as f32],
                [l as f32, w as f32, h as f32],
                yaw as f32,
            )?,
        });
    }
    Ok(out)
}
