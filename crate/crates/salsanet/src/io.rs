//! On-disk formats: the TNSR tensor container, netpbm images, and
//! per-point label sidecars.
//!
//! TNSR layout: magic bytes `TNSR`, a little-endian u32 rank, that many
//! little-endian u64 extents, then the row-major little-endian f32 data.
//! Grid images are stored rank-3 with extents (height, width, channels);
//! label grids rank-2 (height, width) with class ids as 0.0/1.0/2.0.
//!
//! All functions here are pure byte transforms; callers own file access.

use crate::autolabel::ClassId;
use crate::nn::Tensor;
use crate::projection::{GridImage, GridKind, LabelGrid};

/// Magic prefix of every TNSR blob.
pub const TNSR_MAGIC: &[u8; 4] = b"TNSR";

/// Highest tensor rank the reader accepts. Nothing in the pipeline goes
/// beyond rank 4; anything larger in a file is corruption.
const MAX_RANK: u32 = 8;

/// RGB rendering of each class: background gray, road green, vehicle red.
pub const CLASS_COLORS: [[u8; 3]; 3] = [[128, 128, 128], [0, 255, 0], [255, 0, 0]];

/// Errors while decoding serialized artifacts.
#[derive(Debug)]
pub enum IoError {
    /// The byte stream ended before the named part was complete.
    Truncated { what: &'static str },
    /// The leading magic does not identify the expected format.
    BadMagic { what: &'static str },
    /// A decoded value is outside its valid domain.
    BadValue { what: &'static str },
}

impl std::fmt::Display for IoError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            IoError::Truncated { what } => write!(f, "truncated input while reading {what}"),
            IoError::BadMagic { what } => write!(f, "bad magic bytes: not a {what}"),
            IoError::BadValue { what } => write!(f, "invalid value: {what}"),
        }
    }
}

impl std::error::Error for IoError {}

/// Little-endian reader over a byte slice.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Cursor<'a> {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], IoError> {
        if self.bytes.len() - self.pos < n {
            return Err(IoError::Truncated { what });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, IoError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, IoError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

// ---------------------------------------------------------------------------
// TNSR tensors

/// Serializes a tensor to a TNSR blob.
pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 + 8 * t.dims().len() + 4 * t.len());
    out.extend_from_slice(TNSR_MAGIC);
    out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a TNSR blob that must span exactly the whole slice.
pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor, IoError> {
    let mut cur = Cursor::new(bytes);
    let t = read_tensor(&mut cur)?;
    if cur.remaining() != 0 {
        return Err(IoError::BadValue {
            what: "trailing bytes after tensor data",
        });
    }
    Ok(t)
}

fn read_tensor(cur: &mut Cursor<'_>) -> Result<Tensor, IoError> {
    let magic = cur.take(4, "tensor magic")?;
    if magic != TNSR_MAGIC {
        return Err(IoError::BadMagic { what: "TNSR blob" });
    }
    let rank = cur.u32("tensor rank")?;
    if rank > MAX_RANK {
        return Err(IoError::BadValue {
            what: "tensor rank exceeds supported maximum",
        });
    }
    let mut dims = Vec::with_capacity(rank as usize);
    let mut count = 1usize;
    for _ in 0..rank {
        let d = cur.u64("tensor extent")?;
        let d = usize::try_from(d).map_err(|_| IoError::BadValue {
            what: "tensor extent exceeds address space",
        })?;
        count = count.checked_mul(d).ok_or(IoError::BadValue {
            what: "tensor element count overflows",
        })?;
        dims.push(d);
    }
    let raw = cur.take(4 * count, "tensor data")?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor::from_vec(&dims, data).expect("length matches extents by construction"))
}

// ---------------------------------------------------------------------------
// Grid images and label grids

/// Serializes a grid image as a rank-3 TNSR with extents
/// (height, width, channels) and interleaved channel values.
pub fn grid_image_to_bytes(g: &GridImage) -> Vec<u8> {
    let (h, w, c) = (g.height(), g.width(), g.channels());
    let mut interleaved = vec![0.0f32; h * w * c];
    for row in 0..h {
        for col in 0..w {
            for ch in 0..c {
                interleaved[(row * w + col) * c + ch] = g.at(row, col, ch);
            }
        }
    }
    tensor_to_bytes(&Tensor::from_vec(&[h, w, c], interleaved).expect("sized to extents"))
}

/// Decodes a grid image blob, checking the channel count against `kind`.
pub fn grid_image_from_bytes(bytes: &[u8], kind: GridKind) -> Result<GridImage, IoError> {
    let t = tensor_from_bytes(bytes)?;
    let [h, w, c] = *t.dims() else {
        return Err(IoError::BadValue {
            what: "grid image tensor must be rank 3",
        });
    };
    if c != kind.channels() || h == 0 || w == 0 {
        return Err(IoError::BadValue {
            what: "grid image extents do not match the view kind",
        });
    }
    let interleaved = t.data();
    let mut planar = vec![0.0f32; c * h * w];
    for row in 0..h {
        for col in 0..w {
            for ch in 0..c {
                planar[(ch * h + row) * w + col] = interleaved[(row * w + col) * c + ch];
            }
        }
    }
    Ok(GridImage::from_chw(kind, h, w, planar).expect("length matches by construction"))
}

/// Serializes a label grid as a rank-2 TNSR of class ids.
pub fn label_grid_to_bytes(l: &LabelGrid) -> Vec<u8> {
    let data = l.data().iter().map(|c| c.as_u8() as f32).collect();
    tensor_to_bytes(&Tensor::from_vec(&[l.height(), l.width()], data).expect("sized to extents"))
}

/// Decodes a label grid blob; every value must be exactly 0.0, 1.0 or 2.0.
pub fn label_grid_from_bytes(bytes: &[u8]) -> Result<LabelGrid, IoError> {
    let t = tensor_from_bytes(bytes)?;
    let [h, w] = *t.dims() else {
        return Err(IoError::BadValue {
            what: "label grid tensor must be rank 2",
        });
    };
    if h == 0 || w == 0 {
        return Err(IoError::BadValue {
            what: "label grid extents must be positive",
        });
    }
    let mut data = Vec::with_capacity(h * w);
    for &v in t.data() {
        let id = match v {
            v if v == 0.0 => ClassId::Background,
            v if v == 1.0 => ClassId::Road,
            v if v == 2.0 => ClassId::Vehicle,
            _ => {
                return Err(IoError::BadValue {
                    what: "label grid value is not a class id",
                })
            }
        };
        data.push(id);
    }
    Ok(LabelGrid::from_data(h, w, data).expect("length matches by construction"))
}

// ---------------------------------------------------------------------------
// Label sidecars (one byte per point, scan ordering)

/// Serializes per-point labels, one byte each, in point order.
pub fn labels_to_bytes(labels: &[ClassId]) -> Vec<u8> {
    labels.iter().map(|c| c.as_u8()).collect()
}

/// Decodes a per-point label sidecar.
pub fn labels_from_bytes(bytes: &[u8]) -> Result<Vec<ClassId>, IoError> {
    bytes
        .iter()
        .map(|&b| {
            ClassId::from_u8(b).ok_or(IoError::BadValue {
                what: "label byte is not a class id",
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Netpbm images

/// Encodes 8-bit grayscale pixels (row-major) as binary PGM (P5).
pub fn pgm_to_bytes(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel buffer size");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Decodes a binary PGM (P5) with maxval ≤ 255 into (width, height,
/// row-major pixels). Header comments (`#` to end of line) are skipped.
pub fn pgm_from_bytes(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), IoError> {
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(IoError::BadMagic { what: "P5 PGM" });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        pos = skip_pnm_separators(bytes, pos)?;
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(IoError::BadValue {
                what: "PGM header field is not a number",
            });
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| IoError::BadValue {
            what: "PGM header field out of range",
        })?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(IoError::BadValue {
            what: "PGM dimensions must be positive",
        });
    }
    if maxval == 0 || maxval > 255 {
        return Err(IoError::BadValue {
            what: "PGM maxval must be in 1..=255",
        });
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(IoError::BadValue {
            what: "PGM header must end with whitespace",
        });
    }
    pos += 1;
    let n = width
        .checked_mul(height)
        .ok_or(IoError::BadValue {
            what: "PGM pixel count overflows",
        })?;
    if bytes.len() - pos < n {
        return Err(IoError::Truncated { what: "PGM raster" });
    }
    Ok((width, height, bytes[pos..pos + n].to_vec()))
}

fn skip_pnm_separators(bytes: &[u8], mut pos: usize) -> Result<usize, IoError> {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return Ok(pos);
        }
    }
}

/// Encodes RGB pixels (row-major, 3 bytes per pixel) as binary PPM (P6).
pub fn ppm_to_bytes(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), 3 * width * height, "rgb buffer size");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Renders a label grid as a class-colored PPM.
pub fn label_grid_to_ppm(l: &LabelGrid) -> Vec<u8> {
    let mut rgb = Vec::with_capacity(3 * l.height() * l.width());
    for c in l.data() {
        rgb.extend_from_slice(&CLASS_COLORS[c.as_index()]);
    }
    ppm_to_bytes(l.width(), l.height(), rgb.as_slice())
}

/// Renders one channel of a grid image as a min-max normalized PGM.
/// A constant channel renders to all-black.
pub fn channel_to_pgm(g: &GridImage, channel: usize) -> Result<Vec<u8>, IoError> {
    if channel >= g.channels() {
        return Err(IoError::BadValue {
            what: "channel index out of range",
        });
    }
    let plane = g.channel_plane(channel);
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in plane {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let pixels: Vec<u8> = plane
        .iter()
        .map(|&v| {
            if span > 0.0 {
                (((v - lo) / span) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    Ok(pgm_to_bytes(g.width(), g.height(), &pixels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_is_bit_exact() {
        let data = vec![
            0.0,
            -0.0,
            1.5,
            -3.25,
            f32::MIN_POSITIVE,
            1.0e-40, // subnormal
            std::f32::consts::PI,
            f32::MAX,
        ];
        let t = Tensor::from_vec(&[2, 2, 2], data).unwrap();
        let bytes = tensor_to_bytes(&t);
        let back = tensor_from_bytes(&bytes).unwrap();
        assert_eq!(back.dims(), t.dims());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(tensor_to_bytes(&back), bytes);
    }

    #[test]
    fn tensor_scalar_rank_zero_round_trips() {
        let t = Tensor::from_vec(&[], vec![42.0]).unwrap();
        let back = tensor_from_bytes(&tensor_to_bytes(&t)).unwrap();
        assert_eq!(back.dims(), &[] as &[usize]);
        assert_eq!(back.data(), &[42.0]);
    }

    #[test]
    fn tensor_rejects_malformed_blobs() {
        let good = tensor_to_bytes(&Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tensor_from_bytes(&good[..3]),
            Err(IoError::Truncated { .. })
        ));
        let mut wrong_magic = good.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(
            tensor_from_bytes(&wrong_magic),
            Err(IoError::BadMagic { .. })
        ));
        assert!(matches!(
            tensor_from_bytes(&good[..good.len() - 1]),
            Err(IoError::Truncated { .. })
        ));
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(
            tensor_from_bytes(&trailing),
            Err(IoError::BadValue { .. })
        ));
        let mut huge_rank = good;
        huge_rank[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            tensor_from_bytes(&huge_rank),
            Err(IoError::BadValue { .. })
        ));
    }

    #[test]
    fn tensor_rejects_overflowing_extents() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(TNSR_MAGIC);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        assert!(matches!(
            tensor_from_bytes(&bytes),
            Err(IoError::BadValue { .. })
        ));
    }

    #[test]
    fn grid_image_round_trip_and_extent_order() {
        let mut g = GridImage::zeros(GridKind::Bev, 3, 2);
        for row in 0..3 {
            for col in 0..2 {
                for ch in 0..4 {
                    *g.at_mut(row, col, ch) = (row * 100 + col * 10 + ch) as f32;
                }
            }
        }
        let bytes = grid_image_to_bytes(&g);
        let t = tensor_from_bytes(&bytes).unwrap();
        assert_eq!(t.dims(), &[3, 2, 4], "height, width, channels");
        let back = grid_image_from_bytes(&bytes, GridKind::Bev).unwrap();
        assert_eq!(back.data(), g.data());
        assert!(grid_image_from_bytes(&bytes, GridKind::Sfv).is_err());
    }

    #[test]
    fn label_grid_round_trip_and_rejection() {
        let mut l = LabelGrid::background(2, 3);
        l.set(0, 1, ClassId::Road);
        l.set(1, 2, ClassId::Vehicle);
        let bytes = label_grid_to_bytes(&l);
        let back = label_grid_from_bytes(&bytes).unwrap();
        assert_eq!(back.data(), l.data());
        let bad = tensor_to_bytes(&Tensor::from_vec(&[1, 2], vec![0.0, 3.0]).unwrap());
        assert!(label_grid_from_bytes(&bad).is_err());
        let frac = tensor_to_bytes(&Tensor::from_vec(&[1, 2], vec![0.5, 1.0]).unwrap());
        assert!(label_grid_from_bytes(&frac).is_err());
    }

    #[test]
    fn label_sidecar_round_trip_and_rejection() {
        let labels = vec![ClassId::Background, ClassId::Vehicle, ClassId::Road];
        let bytes = labels_to_bytes(&labels);
        assert_eq!(bytes, vec![0, 2, 1]);
        assert_eq!(labels_from_bytes(&bytes).unwrap(), labels);
        assert!(labels_from_bytes(&[0, 3]).is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let pixels: Vec<u8> = (0..12).collect();
        let bytes = pgm_to_bytes(4, 3, &pixels);
        let (w, h, back) = pgm_from_bytes(&bytes).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, pixels);
        assert_eq!(pgm_to_bytes(w, h, &back), bytes);
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n3 #cols\n2\n255\n".to_vec();
        bytes.extend_from_slice(&[10, 20, 30, 40, 50, 60]);
        let (w, h, pixels) = pgm_from_bytes(&bytes).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(pixels, &[10, 20, 30, 40, 50, 60]);
    }

    #[test]
    fn pgm_rejects_bad_headers() {
        assert!(matches!(
            pgm_from_bytes(b"P6\n2 2\n255\n"),
            Err(IoError::BadMagic { .. })
        ));
        assert!(pgm_from_bytes(b"P5\n2 2\n65535\n____").is_err());
        assert!(matches!(
            pgm_from_bytes(b"P5\n2 2\n255\nab"),
            Err(IoError::Truncated { .. })
        ));
        assert!(pgm_from_bytes(b"P5\n0 2\n255\n").is_err());
    }

    #[test]
    fn label_ppm_uses_class_colors() {
        let mut l = LabelGrid::background(1, 3);
        l.set(0, 1, ClassId::Road);
        l.set(0, 2, ClassId::Vehicle);
        let bytes = label_grid_to_ppm(&l);
        assert!(bytes.starts_with(b"P6\n3 1\n255\n"));
        let raster = &bytes[bytes.len() - 9..];
        assert_eq!(&raster[0..3], &[128, 128, 128], "background gray");
        assert_eq!(&raster[3..6], &[0, 255, 0], "road green");
        assert_eq!(&raster[6..9], &[255, 0, 0], "vehicle red");
    }

    #[test]
    fn channel_pgm_normalizes_min_max() {
        let mut g = GridImage::zeros(GridKind::Bev, 1, 3);
        *g.at_mut(0, 0, 2) = -1.0;
        *g.at_mut(0, 1, 2) = 0.0;
        *g.at_mut(0, 2, 2) = 1.0;
        let bytes = channel_to_pgm(&g, 2).unwrap();
        let (_, _, pixels) = pgm_from_bytes(&bytes).unwrap();
        assert_eq!(pixels, &[0, 128, 255]);
        // Constant channel: all black, no division by zero.
        let flat = GridImage::zeros(GridKind::Bev, 2, 2);
        let (_, _, pixels) = pgm_from_bytes(&channel_to_pgm(&flat, 0).unwrap()).unwrap();
        assert!(pixels.iter().all(|&p| p == 0));
        assert!(channel_to_pgm(&flat, 4).is_err());
    }
}
