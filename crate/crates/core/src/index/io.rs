//! `FLIX` index files, little-endian: magic, version `u32`, kind `u8`
//! (0 flat, 1 IVF), dims, vector count and centroid count `K` as `u64`,
//! `K × dims` `f32` centroids, then each posting list as an entry count
//! `u64` followed by entries of `u32`-length-prefixed UTF-8 doc id, view id
//! `u32` and `dims` `f32` values. A flat index has `K = 0` and one list.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_u32, read_u64};

use super::{Index, IndexKind};

pub const INDEX_MAGIC: &[u8; 4] = b"FLIX";
pub const INDEX_VERSION: u32 = 1;

pub fn write_index<W: Write>(w: &mut W, idx: &Index) -> Result<()> {
    w.write_all(INDEX_MAGIC)?;
    w.write_all(&INDEX_VERSION.to_le_bytes())?;
    w.write_all(&[match idx.kind {
        IndexKind::Flat => 0u8,
        IndexKind::Ivf => 1u8,
    }])?;
    let k = idx.centroids.len() / idx.dims;
    for x in [idx.dims, idx.n_vectors(), k] {
        w.write_all(&(x as u64).to_le_bytes())?;
    }
    for c in &idx.centroids {
        w.write_all(&c.to_le_bytes())?;
    }
    for pl in &idx.lists {
        w.write_all(&(pl.len() as u64).to_le_bytes())?;
        for (e, (&doc, &view)) in pl.docs.iter().zip(&pl.views).enumerate() {
            let id = idx.doc_ids[doc as usize].as_bytes();
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id)?;
            w.write_all(&view.to_le_bytes())?;
            for x in &pl.vectors[e * idx.dims..(e + 1) * idx.dims] {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("index payload: {e}")))?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Reads an index, requiring `expect` as its kind when given.
pub fn read_index<R: Read>(r: &mut R, expect: Option<IndexKind>) -> Result<Index> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("index header: {e}")))?;
    if &magic != INDEX_MAGIC {
        return Err(Error::Format(format!(
            "not an index file (magic {magic:?})"
        )));
    }
    let version = read_u32(r)?;
    if version != INDEX_VERSION {
        return Err(Error::Format(format!(
            "index version {version}, expected {INDEX_VERSION}"
        )));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)?;
    let kind = match kind[0] {
        0 => IndexKind::Flat,
        1 => IndexKind::Ivf,
        other => return Err(Error::Format(format!("unknown index kind byte {other}"))),
    };
    if let Some(want) = expect {
        if want != kind {
            return Err(Error::Format(format!(
                "index file holds a {kind:?} index, expected {want:?}"
            )));
        }
    }
    let dims = read_u64(r)? as usize;
    let count = read_u64(r)? as usize;
    let k = read_u64(r)? as usize;
    if dims == 0 || dims > 1 << 20 {
        return Err(Error::Format(format!("implausible dims {dims}")));
    }
    match (kind, k) {
        (IndexKind::Flat, 0) => {}
        (IndexKind::Ivf, k) if k >= 1 && k <= count => {}
        _ => return Err(Error::Format(format!("{kind:?} index with K = {k}"))),
    }
    let centroids = read_f32s(r, k * dims)?;
    let n_lists = k.max(1);
    let mut entries = Vec::with_capacity(n_lists);
    let mut total = 0;
    for _ in 0..n_lists {
        let len = read_u64(r)? as usize;
        total += len;
        if total > count {
            return Err(Error::Format(
                "posting lists exceed the vector count".into(),
            ));
        }
        let mut list = Vec::with_capacity(len);
        for _ in 0..len {
            let n = read_u32(r)? as usize;
            let mut id = vec![0u8; n];
            r.read_exact(&mut id)
                .map_err(|e| Error::Format(format!("doc id: {e}")))?;
            let id = String::from_utf8(id)
                .map_err(|e| Error::Format(format!("doc id is not UTF-8: {e}")))?;
            let view = read_u32(r)?;
            list.push((id, view, read_f32s(r, dims)?));
        }
        entries.push(list);
    }
    if total != count {
        return Err(Error::Format(format!(
            "header promises {count} vectors, lists hold {total}"
        )));
    }
    Ok(Index::assemble(kind, dims, centroids, entries))
}

pub fn save_index(path: &Path, idx: &Index) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_index(&mut w, idx)?;
    w.flush()?;
    Ok(())
}

pub fn load_index(path: &Path, expect: Option<IndexKind>) -> Result<Index> {
    read_index(&mut BufReader::new(File::open(path)?), expect)
}

#[cfg(test)]
mod tests {
    use super::super::IndexedView;
    use super::*;

    fn small() -> Index {
        let views: Vec<IndexedView> = (0..12)
            .map(|i| IndexedView {
                doc_id: format!("doc-{}", i / 3),
                view_id: (i % 3) as u32,
                vector: vec![(i as f64).sin(), (i as f64).cos(), 0.1 * i as f64],
            })
            .collect();
        Index::build(&views, IndexKind::Ivf, 3, 5).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let idx = small();
        let mut buf = Vec::new();
        write_index(&mut buf, &idx).unwrap();
        let back = read_index(&mut buf.as_slice(), None).unwrap();
        assert_eq!(back, idx);
        let q = [0.3, -0.2, 0.9];
        assert_eq!(
            back.search(&q, 3, 2).unwrap(),
            idx.search(&q, 3, 2).unwrap()
        );
    }

    #[test]
    fn header_damage_and_kind_mismatch() {
        let idx = small();
        let mut buf = Vec::new();
        write_index(&mut buf, &idx).unwrap();
        assert!(matches!(
            read_index(&mut buf.as_slice(), Some(IndexKind::Flat)),
            Err(Error::Format(_))
        ));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_index(&mut bad.as_slice(), None).is_err());
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(read_index(&mut bad.as_slice(), None).is_err());
        assert!(read_index(&mut &buf[..buf.len() - 2], None).is_err());
    }
}
