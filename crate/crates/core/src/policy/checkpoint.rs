//! Binary weight files with a JSON sidecar.
//!
//! Layout: magic `CTSW`, format version (u32), the five layer sizes (u32
//! each), parameter count (u64), then little-endian `f32` weights in
//! [`super::Layout`] order. The sidecar `<file>.json` repeats the sizes and
//! carries free-form run metadata.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{NetConfig, PolicyParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CTSW";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 5 * 4 + 8;

/// Sidecar contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub net: NetConfig,
    pub parameter_count: usize,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn malformed(path: &Path, msg: impl Into<String>) -> Error {
    Error::Malformed {
        kind: "checkpoint",
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Write weights and sidecar. Creates parent directories.
pub fn save_checkpoint(path: &Path, params: &PolicyParams, metadata: serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let c = &params.config;
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * params.data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in [c.num_rays, c.encoder_hidden, c.encoder_out, c.trunk, c.hidden] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(params.data.len() as u64).to_le_bytes());
    for v in &params.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))?;

    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        net: *c,
        parameter_count: params.data.len(),
        metadata,
    };
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

/// Load a checkpoint. With `expected` set, the stored layer sizes must match.
pub fn load_checkpoint(path: &Path, expected: Option<&NetConfig>) -> Result<(PolicyParams, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(malformed(path, "not a policy checkpoint"));
    }
    let version = u32_at(&bytes, 4);
    if version != FORMAT_VERSION {
        return Err(malformed(path, format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let dims: Vec<usize> = (0..5).map(|i| u32_at(&bytes, 8 + 4 * i) as usize).collect();
    let net = NetConfig {
        num_rays: dims[0],
        encoder_hidden: dims[1],
        encoder_out: dims[2],
        trunk: dims[3],
        hidden: dims[4],
    };
    net.validate().map_err(|e| malformed(path, e.to_string()))?;
    if let Some(want) = expected {
        if *want != net {
            return Err(malformed(path, format!("network sizes {net:?} differ from expected {want:?}")));
        }
    }
    let count = u64::from_le_bytes(bytes[28..36].try_into().expect("8 bytes")) as usize;
    let mut params = PolicyParams::zeros(net);
    if count != params.data.len() || bytes.len() != HEADER_LEN + 4 * count {
        return Err(malformed(
            path,
            format!("{count} stored parameters, layout needs {}", params.data.len()),
        ));
    }
    for (v, chunk) in params.data.iter_mut().zip(bytes[HEADER_LEN..].chunks_exact(4)) {
        *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
    }
    if !params.is_finite() {
        return Err(malformed(path, "non-finite weights"));
    }

    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let header: CheckpointHeader = serde_json::from_str(&text).map_err(|e| malformed(&side, e.to_string()))?;
    if header.net != net || header.parameter_count != count || header.format_version != version {
        return Err(malformed(&side, "sidecar disagrees with weight file"));
    }
    Ok((params, header))
}
