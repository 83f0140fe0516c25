//! Checkpoint serialization: a one-line JSON header followed by raw
//! little-endian `f64` sections.
//!
//! The header names each section and its length, so optimizer slots ride
//! along with the parameters and a loader can verify every length against
//! the declared architecture before touching the payload. Writes go
//! through a temp file plus rename, so an interrupted save never leaves a
//! truncated checkpoint at the target path.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchSpec, PolicyParams};
use crate::error::{Error, Result};

const FORMAT_TAG: &str = "edgelab-ckpt-v1";

/// Bookkeeping carried in a checkpoint header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Seed of the run that produced the checkpoint.
    pub seed: u64,
    /// Training step the parameters correspond to.
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    arch: ArchSpec,
    meta: CheckpointMeta,
    sections: Vec<(String, usize)>,
}

/// A checkpoint read back from disk.
pub struct LoadedCheckpoint {
    pub params: PolicyParams,
    pub meta: CheckpointMeta,
    /// Extra named sections (optimizer slots and the like), in file order.
    pub extras: Vec<(String, Vec<f64>)>,
}

impl LoadedCheckpoint {
    /// Extra section by name, if present.
    pub fn extra(&self, name: &str) -> Option<&[f64]> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }
}

/// Write `params` (and any extra sections) to `path` atomically.
pub fn save_checkpoint(
    path: &Path,
    params: &PolicyParams,
    meta: &CheckpointMeta,
    extras: &[(&str, &[f64])],
) -> Result<()> {
    let mut sections = vec![("params".to_string(), params.data().len())];
    for (name, data) in extras {
        if *name == "params" {
            return Err(Error::Domain("extra section may not be named 'params'".into()));
        }
        sections.push((name.to_string(), data.len()));
    }
    let header = Header {
        format: FORMAT_TAG.to_string(),
        arch: params.arch().clone(),
        meta: meta.clone(),
        sections,
    };
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for &x in params.data() {
            w.write_all(&x.to_le_bytes())?;
        }
        for (_, data) in extras {
            for &x in *data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_f64_section(r: &mut impl Read, len: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; len * 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Artifact(format!("checkpoint payload truncated: {e}")))?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Load a checkpoint, validating the format tag and every section length.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_bytes = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)
            .map_err(|e| Error::Artifact(format!("checkpoint header truncated: {e}")))?;
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
        if header_bytes.len() > 1 << 20 {
            return Err(Error::Artifact("checkpoint header exceeds 1 MiB".into()));
        }
    }
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Artifact(format!("bad checkpoint header: {e}")))?;
    if header.format != FORMAT_TAG {
        return Err(Error::Artifact(format!("unknown checkpoint format '{}'", header.format)));
    }
    let Some((first_name, first_len)) = header.sections.first() else {
        return Err(Error::Artifact("checkpoint has no sections".into()));
    };
    if first_name != "params" {
        return Err(Error::Artifact("first checkpoint section must be 'params'".into()));
    }
    if *first_len != header.arch.param_count() {
        return Err(Error::Artifact(format!(
            "params section has {} entries, architecture needs {}",
            first_len,
            header.arch.param_count()
        )));
    }
    let data = read_f64_section(&mut r, *first_len)?;
    let params = PolicyParams::from_data(&header.arch, data)?;
    let mut extras = Vec::new();
    for (name, len) in &header.sections[1..] {
        extras.push((name.clone(), read_f64_section(&mut r, *len)?));
    }
    Ok(LoadedCheckpoint { params, meta: header.meta, extras })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bitwise_with_extras() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let arch = ArchSpec::window_mlp(7, 2, 4);
        let params = PolicyParams::init(&arch, 9).unwrap();
        let slots: Vec<f64> = (0..params.data().len()).map(|i| (i as f64) * 0.125 - 3.0).collect();
        let meta = CheckpointMeta { seed: 9, step: 42 };
        save_checkpoint(&path, &params, &meta, &[("momentum", &slots)]).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params, params);
        assert_eq!(loaded.meta, meta);
        assert_eq!(loaded.extra("momentum").unwrap(), slots.as_slice());
        assert!(loaded.extra("missing").is_none());
    }

    #[test]
    fn corrupt_payload_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let arch = ArchSpec::window_mlp(5, 2, 3);
        let params = PolicyParams::init(&arch, 1).unwrap();
        save_checkpoint(&path, &params, &CheckpointMeta { seed: 1, step: 0 }, &[]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Artifact(_))));
    }

    #[test]
    fn header_lengths_are_validated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let arch = ArchSpec::window_mlp(5, 2, 3);
        let params = PolicyParams::init(&arch, 1).unwrap();
        save_checkpoint(&path, &params, &CheckpointMeta { seed: 1, step: 0 }, &[]).unwrap();
        // Rewrite the header to claim a different architecture.
        let bytes = std::fs::read(&path).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let doctored = String::from_utf8(bytes[..nl].to_vec())
            .unwrap()
            .replace("\"hidden\":3", "\"hidden\":4");
        let mut out = doctored.into_bytes();
        out.push(b'\n');
        out.extend_from_slice(&bytes[nl + 1..]);
        std::fs::write(&path, out).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Artifact(_))));
    }
}
