//! Binary checkpoint files for trained networks.
//!
//! Layout: an 8-byte magic, a little-endian `u32` header length, a JSON
//! header (kind, seed, named parameter blocks with their network specs, free
//! metadata), a little-endian `u64` total parameter count, then every block's
//! parameters concatenated as little-endian `f64`. Writes go to a sibling
//! temp file first and are renamed into place, so readers never observe a
//! partial checkpoint.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::NetworkSpec;

pub const MAGIC: &[u8; 8] = b"MOERL001";

/// One named parameter block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub network: NetworkSpec,
}

/// Everything about a checkpoint except the numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// What the checkpoint holds, e.g. "lstm_autoencoder" or "dqn".
    pub kind: String,
    /// Seed the training run was started with.
    pub seed: u64,
    pub blocks: Vec<BlockInfo>,
    /// Free-form extras (training config, fitted statistics, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Write a checkpoint atomically. Block order must match `header.blocks`.
pub fn save(path: &Path, header: &CheckpointHeader, blocks: &[&[f64]]) -> Result<()> {
    if blocks.len() != header.blocks.len() {
        return Err(Error::Data(format!(
            "checkpoint {}: {} parameter blocks for {} declared",
            path.display(),
            blocks.len(),
            header.blocks.len()
        )));
    }
    for (info, block) in header.blocks.iter().zip(blocks) {
        let want = info.network.param_count();
        if block.len() != want {
            return Err(Error::Data(format!(
                "checkpoint {}: block '{}' has {} parameters, spec wants {want}",
                path.display(),
                info.name,
                block.len()
            )));
        }
    }
    let header_json = serde_json::to_vec(header)
        .map_err(|e| Error::Data(format!("checkpoint header encode: {e}")))?;
    let total: usize = blocks.iter().map(|b| b.len()).sum();

    let mut buf =
        Vec::with_capacity(8 + 4 + header_json.len() + 8 + total * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    buf.extend_from_slice(&(total as u64).to_le_bytes());
    for block in blocks {
        for v in *block {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let tmp = temp_sibling(path);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Read a checkpoint back; blocks come out in header order.
pub fn load(path: &Path) -> Result<(CheckpointHeader, Vec<Vec<f64>>)> {
    let bytes = fs::read(path)?;
    let bad = |why: &str| Error::Data(format!("checkpoint {}: {why}", path.display()));

    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end + 8 {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| bad(&format!("header decode: {e}")))?;
    let total =
        u64::from_le_bytes(bytes[header_end..header_end + 8].try_into().unwrap()) as usize;
    let declared: usize = header.blocks.iter().map(|b| b.network.param_count()).sum();
    if total != declared {
        return Err(bad(&format!(
            "parameter count {total} does not match specs ({declared})"
        )));
    }
    let body = &bytes[header_end + 8..];
    if body.len() != total * 8 {
        return Err(bad(&format!(
            "expected {} parameter bytes, found {}",
            total * 8,
            body.len()
        )));
    }
    let mut blocks = Vec::with_capacity(header.blocks.len());
    let mut off = 0;
    for info in &header.blocks {
        let n = info.network.param_count();
        let mut params = Vec::with_capacity(n);
        for chunk in body[off..off + n * 8].chunks_exact(8) {
            params.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        off += n * 8;
        blocks.push(params);
    }
    Ok((header, blocks))
}

fn temp_sibling(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}
