//! Checkpoint serialization for network parameters.
//!
//! Layout: magic `CKPT`, format version, the architecture header
//! (input channels, class count, dropout probability), the training
//! iteration counter, then a length-prefixed sequence of
//! (UTF-8 name, TNSR blob) records covering every trainable tensor and
//! every batch-norm running statistic. All integers little-endian.

use std::collections::BTreeMap;

use super::network::{Network, NetworkConfig};
use super::tensor::Tensor;
use crate::io::{self, IoError};

/// Magic prefix of a checkpoint blob.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKPT";

/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Errors while decoding a checkpoint.
#[derive(Debug)]
pub enum CheckpointError {
    /// The byte stream ended before the named part was complete.
    Truncated { what: &'static str },
    /// Leading magic bytes are not `CKPT`.
    BadMagic,
    /// The format version is not supported.
    BadVersion { got: u32 },
    /// A header field is outside its valid domain.
    BadHeader { what: &'static str },
    /// A record name is not valid UTF-8.
    BadName,
    /// An embedded tensor blob failed to decode.
    Tensor(IoError),
    /// The same tensor name appears twice.
    DuplicateTensor(String),
    /// A tensor the architecture requires is absent.
    MissingTensor(String),
    /// A record does not correspond to any tensor of the architecture.
    UnknownTensor(String),
    /// A stored tensor's extents do not match the architecture.
    ShapeMismatch { name: String },
}

impl std::fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CheckpointError::Truncated { what } => {
                write!(f, "truncated checkpoint while reading {what}")
            }
            CheckpointError::BadMagic => write!(f, "not a checkpoint: bad magic bytes"),
            CheckpointError::BadVersion { got } => {
                write!(f, "unsupported checkpoint version {got}")
            }
            CheckpointError::BadHeader { what } => write!(f, "invalid checkpoint header: {what}"),
            CheckpointError::BadName => write!(f, "checkpoint record name is not UTF-8"),
            CheckpointError::Tensor(e) => write!(f, "checkpoint tensor: {e}"),
            CheckpointError::DuplicateTensor(name) => {
                write!(f, "duplicate checkpoint tensor {name:?}")
            }
            CheckpointError::MissingTensor(name) => {
                write!(f, "checkpoint is missing tensor {name:?}")
            }
            CheckpointError::UnknownTensor(name) => {
                write!(f, "checkpoint contains unknown tensor {name:?}")
            }
            CheckpointError::ShapeMismatch { name } => {
                write!(f, "checkpoint tensor {name:?} has mismatched extents")
            }
        }
    }
}

impl std::error::Error for CheckpointError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CheckpointError::Tensor(e) => Some(e),
            _ => None,
        }
    }
}

impl From<IoError> for CheckpointError {
    fn from(e: IoError) -> CheckpointError {
        CheckpointError::Tensor(e)
    }
}

/// Serializes the network and its training iteration counter.
pub fn save_network(net: &Network, iteration: u64) -> Vec<u8> {
    let mut records: Vec<(String, &Tensor)> = net.trainable();
    records.extend(net.running_stats());
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(net.config.in_channels as u32).to_le_bytes());
    out.extend_from_slice(&(net.config.num_classes as u32).to_le_bytes());
    out.extend_from_slice(&net.config.dropout_p.to_le_bytes());
    out.extend_from_slice(&iteration.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, tensor) in records {
        let blob = io::tensor_to_bytes(tensor);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);
    }
    out
}

/// Reconstructs a network and its iteration counter from checkpoint bytes.
///
/// Every tensor of the stored architecture must be present exactly once
/// with matching extents; extra or missing records are errors.
pub fn load_network(bytes: &[u8]) -> Result<(Network, u64), CheckpointError> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize, what: &'static str| -> Result<&[u8], CheckpointError> {
        if bytes.len() - *pos < n {
            return Err(CheckpointError::Truncated { what });
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4, "magic")? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(take(&mut pos, 4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::BadVersion { got: version });
    }
    let in_channels =
        u32::from_le_bytes(take(&mut pos, 4, "input channels")?.try_into().expect("4 bytes"));
    let num_classes =
        u32::from_le_bytes(take(&mut pos, 4, "class count")?.try_into().expect("4 bytes"));
    let dropout_p =
        f32::from_le_bytes(take(&mut pos, 4, "dropout")?.try_into().expect("4 bytes"));
    let iteration =
        u64::from_le_bytes(take(&mut pos, 8, "iteration")?.try_into().expect("8 bytes"));
    if in_channels == 0 {
        return Err(CheckpointError::BadHeader {
            what: "input channels must be positive",
        });
    }
    if num_classes == 0 {
        return Err(CheckpointError::BadHeader {
            what: "class count must be positive",
        });
    }
    if !(0.0..1.0).contains(&dropout_p) {
        return Err(CheckpointError::BadHeader {
            what: "dropout probability must be in [0, 1)",
        });
    }
    let record_count =
        u32::from_le_bytes(take(&mut pos, 4, "record count")?.try_into().expect("4 bytes"));
    let mut stored: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..record_count {
        let name_len =
            u32::from_le_bytes(take(&mut pos, 4, "name length")?.try_into().expect("4 bytes"));
        let name = std::str::from_utf8(take(&mut pos, name_len as usize, "record name")?)
            .map_err(|_| CheckpointError::BadName)?
            .to_owned();
        let blob_len =
            u64::from_le_bytes(take(&mut pos, 8, "blob length")?.try_into().expect("8 bytes"));
        let blob_len = usize::try_from(blob_len).map_err(|_| CheckpointError::Truncated {
            what: "tensor blob",
        })?;
        let tensor = io::tensor_from_bytes(take(&mut pos, blob_len, "tensor blob")?)?;
        if stored.insert(name.clone(), tensor).is_some() {
            return Err(CheckpointError::DuplicateTensor(name));
        }
    }
    if pos != bytes.len() {
        return Err(CheckpointError::BadHeader {
            what: "trailing bytes after last record",
        });
    }
    let config = NetworkConfig {
        in_channels: in_channels as usize,
        num_classes: num_classes as usize,
        dropout_p,
    };
    // Seed value is irrelevant: every tensor is overwritten below.
    let mut net = Network::build(config, 0);
    let mut fill = |targets: Vec<(String, &mut Tensor)>| -> Result<(), CheckpointError> {
        for (name, target) in targets {
            let source = stored
                .remove(&name)
                .ok_or(CheckpointError::MissingTensor(name.clone()))?;
            if source.dims() != target.dims() {
                return Err(CheckpointError::ShapeMismatch { name });
            }
            *target = source;
        }
        Ok(())
    };
    fill(net.trainable_mut())?;
    fill(net.running_stats_mut())?;
    if let Some((name, _)) = stored.into_iter().next() {
        return Err(CheckpointError::UnknownTensor(name));
    }
    Ok((net, iteration))
}
