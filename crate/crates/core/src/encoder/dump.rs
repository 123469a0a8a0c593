//! Embedding dumps: a directory holding `manifest.jsonl` (one record per
//! matrix) and `embeddings.bin`, a single `FLT1` tensor of all rows stacked.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor_header, Tensor};

use super::ViewMatrix;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const PAYLOAD_FILE: &str = "embeddings.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub owner_id: String,
    pub views: usize,
    pub dims: usize,
    /// First payload row of this matrix.
    pub offset: usize,
    /// Absent means every view is valid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid: Option<Vec<bool>>,
}

pub fn write_dump(dir: &Path, matrices: &[ViewMatrix]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let dims = matrices.first().map_or(0, |m| m.dims());
    let mut manifest = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    let mut data = Vec::new();
    let mut offset = 0;
    for m in matrices {
        if m.dims() != dims {
            return Err(Error::shape(
                "write_dump",
                &[m.views(), m.dims()],
                &[0, dims],
            ));
        }
        let all_valid = m.valid_mask().iter().all(|&v| v);
        let entry = ManifestEntry {
            owner_id: m.owner_id.clone(),
            views: m.views(),
            dims,
            offset,
            valid: (!all_valid).then(|| m.valid_mask().to_vec()),
        };
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.write_all(b"\n")?;
        data.extend_from_slice(m.rows().data());
        offset += m.views();
    }
    manifest.flush()?;
    let payload = Tensor::new(vec![offset, dims], data)?;
    let mut w = BufWriter::new(File::create(dir.join(PAYLOAD_FILE))?);
    payload.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_FILE);
    let reader = BufReader::new(File::open(&path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Ingest {
            record: i + 1,
            owner: String::new(),
            reason: e.to_string(),
        })?;
        out.push(entry);
    }
    Ok(out)
}

/// Loads every matrix of a dump, validating each manifest record against the
/// payload.
pub fn ingest_embeddings(dir: &Path) -> Result<Vec<ViewMatrix>> {
    let manifest = read_manifest(dir)?;
    if manifest.is_empty() {
        return Ok(Vec::new());
    }
    let payload_path = dir.join(PAYLOAD_FILE);
    let file_len = fs::metadata(&payload_path)?.len() as usize;
    let mut r = BufReader::new(File::open(&payload_path)?);
    let shape = read_tensor_header(&mut r)?;
    if shape.len() != 2 {
        return Err(Error::Format(format!(
            "payload must be rank 2, got {shape:?}"
        )));
    }
    let (rows, dims) = (shape[0], shape[1]);
    let header_len = 4 + 8 + 16;
    let available_rows = (file_len.saturating_sub(header_len) / 8)
        .checked_div(dims)
        .map_or(rows, |r| r.min(rows));
    let bad = |i: usize, e: &ManifestEntry, reason: String| Error::Ingest {
        record: i + 1,
        owner: e.owner_id.clone(),
        reason,
    };
    for (i, e) in manifest.iter().enumerate() {
        if e.dims != dims {
            return Err(bad(i, e, format!("dims {} but payload has {dims}", e.dims)));
        }
        if e.offset + e.views > available_rows {
            return Err(bad(
                i,
                e,
                format!(
                    "rows {}..{} exceed the {available_rows} rows present in the payload",
                    e.offset,
                    e.offset + e.views
                ),
            ));
        }
        if let Some(v) = &e.valid {
            if v.len() != e.views {
                let reason = format!("mask of {} entries for {} views", v.len(), e.views);
                return Err(bad(i, e, reason));
            }
        }
    }
    let payload = Tensor::read_from(&mut BufReader::new(File::open(&payload_path)?))?;
    manifest
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let slice = &payload.data()[e.offset * dims..(e.offset + e.views) * dims];
            let rows = Tensor::matrix(e.views, dims, slice.to_vec())?;
            let valid = e.valid.clone().unwrap_or_else(|| vec![true; e.views]);
            ViewMatrix::new(e.owner_id.clone(), rows, valid)
                .map_err(|err| bad(i, &e, err.to_string()))
        })
        .collect()
}
