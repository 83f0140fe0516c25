//! Line-delimited JSON helpers shared by every on-disk log.
//!
//! All scalar and rollout logs are JSONL: one JSON object per line,
//! append-only during a run. Floats round-trip bitwise (the JSON writer
//! prints the shortest representation that parses back to the same
//! `f64`), so recomputation checks can compare with `==`.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::Result;

/// Append records to a JSONL file, one per line, creating it if needed.
pub fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::OpenOptions::new().create(true).append(true).open(path)?,
    );
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Read every record from a JSONL file. Blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Rewrite a JSONL file keeping only records that pass `keep`.
///
/// The rewrite goes through a temp file and an atomic rename so a crash
/// can't leave a half-written log. A missing file counts as empty.
/// Returns the number of records kept.
pub fn retain_jsonl<T: Serialize + DeserializeOwned>(
    path: &Path,
    keep: impl Fn(&T) -> bool,
) -> Result<usize> {
    if !path.exists() {
        return Ok(0);
    }
    let records: Vec<T> = read_jsonl(path)?;
    let kept: Vec<T> = records.into_iter().filter(|r| keep(r)).collect();
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        for r in &kept {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(kept.len())
}
