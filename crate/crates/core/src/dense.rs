//! Precomputed dense vectors and inner-product similarity.
//!
//! Binary layout: magic `HYBEMB1\0`, `count: u32`, `dim: u32` (little-endian),
//! then `count * dim` little-endian `f32` values in row order. Ids live in a
//! separate newline-delimited file, one per row.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Cursor, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::io_util::{atomic_write, expect_magic, read_file};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"HYBEMB1\0";

#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    rows: HashMap<String, usize>,
    values: Vec<f32>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
        }
        Ok(EmbeddingStore {
            dim,
            ids: Vec::new(),
            rows: HashMap::new(),
            values: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.rows.contains_key(id)
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: &[f32]) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(Error::Shape(format!(
                "vector for {id} has {} values, store dimension is {}",
                vector.len(),
                self.dim
            )));
        }
        if let Some(i) = vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("component {i} of vector {id}")));
        }
        if self.rows.contains_key(&id) {
            return Err(Error::DuplicateId {
                line: self.ids.len() + 1,
                id,
            });
        }
        self.rows.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.values.extend_from_slice(vector);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.rows
            .get(id)
            .map(|&r| &self.values[r * self.dim..(r + 1) * self.dim])
    }

    fn vector(&self, id: &str) -> Result<&[f32]> {
        self.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    /// Inner product of two stored vectors, accumulated in `f64`.
    pub fn dense_score(&self, id_a: &str, id_b: &str) -> Result<f64> {
        let a = self.vector(id_a)?;
        let b = self.vector(id_b)?;
        Ok(dot(a, b))
    }

    pub fn save(&self, vec_path: &Path, id_path: &Path) -> Result<()> {
        atomic_write(vec_path, |w| {
            w.write_all(EMBEDDING_MAGIC)?;
            w.write_u32::<LittleEndian>(self.ids.len() as u32)?;
            w.write_u32::<LittleEndian>(self.dim as u32)?;
            for v in &self.values {
                w.write_f32::<LittleEndian>(*v)?;
            }
            Ok(())
        })?;
        atomic_write(id_path, |w| {
            for id in &self.ids {
                writeln!(w, "{id}")?;
            }
            Ok(())
        })
    }

    /// Reads the plain-text fallback: one id followed by space-separated reals
    /// per line.
    pub fn load_text(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut store: Option<EmbeddingStore> = None;
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut cols = line.split_whitespace();
            let Some(id) = cols.next() else { continue };
            let vals = cols
                .map(|c| c.parse::<f32>())
                .collect::<std::result::Result<Vec<f32>, _>>()
                .map_err(|e| Error::parse(path, lineno, format!("bad value: {e}")))?;
            let s = match store.as_mut() {
                Some(s) => s,
                None => store.insert(EmbeddingStore::new(vals.len()).map_err(|_| {
                    Error::parse(path, lineno, "vector has no components")
                })?),
            };
            s.insert(id, &vals).map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        }
        store.ok_or_else(|| Error::Format(format!("{}: no vectors", path.display())))
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn load_embeddings(vec_path: &Path, id_path: &Path) -> Result<EmbeddingStore> {
    let bytes = read_file(vec_path)?;
    let mut r = Cursor::new(bytes.as_slice());
    let fmt = |e: std::io::Error| Error::Format(format!("{}: {e}", vec_path.display()));
    expect_magic(&mut r, EMBEDDING_MAGIC).map_err(fmt)?;
    let count = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
    let dim = r.read_u32::<LittleEndian>().map_err(fmt)? as usize;
    let expected = 16 + count * dim * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: header declares {count}x{dim} values ({expected} bytes), file has {} bytes",
            vec_path.display(),
            bytes.len()
        )));
    }
    let ids_text = std::fs::read_to_string(id_path).map_err(|e| Error::io(id_path, e))?;
    let ids: Vec<&str> = ids_text.lines().collect();
    if ids.len() != count {
        return Err(Error::Format(format!(
            "{} has {} ids but {} declares {count} rows",
            id_path.display(),
            ids.len(),
            vec_path.display()
        )));
    }
    let mut store = EmbeddingStore::new(dim)?;
    store.values.reserve(count * dim);
    let mut row = vec![0f32; dim];
    for (i, id) in ids.into_iter().enumerate() {
        r.read_f32_into::<LittleEndian>(&mut row).map_err(fmt)?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("row {i} ({id}) of {}", vec_path.display())));
        }
        store.insert(id, &row).map_err(|e| match e {
            Error::DuplicateId { id, .. } => Error::DuplicateId { id, line: i + 1 },
            e => e,
        })?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(dir: &Path, count: u32, dim: u32, vals: &[f32], ids: &str) -> (std::path::PathBuf, std::path::PathBuf) {
        let v = dir.join("e.bin");
        let i = dir.join("e.ids");
        let mut buf = EMBEDDING_MAGIC.to_vec();
        buf.extend(count.to_le_bytes());
        buf.extend(dim.to_le_bytes());
        for x in vals {
            buf.extend(x.to_le_bytes());
        }
        std::fs::write(&v, buf).unwrap();
        std::fs::write(&i, ids).unwrap();
        (v, i)
    }

    #[test]
    fn reads_exact_values() {
        let dir = tempfile::tempdir().unwrap();
        let vals = [0.1f32, -2.5, 3.0, 1e-3, 0.0, 7.25];
        let (v, i) = write_raw(dir.path(), 2, 3, &vals, "a\nb\n");
        let s = load_embeddings(&v, &i).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.get("a").unwrap(), &vals[..3]);
        assert_eq!(s.get("b").unwrap(), &vals[3..]);
    }

    #[test]
    fn id_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (v, i) = write_raw(dir.path(), 2, 3, &[0.0; 6], "a\nb\nc\n");
        assert!(matches!(load_embeddings(&v, &i), Err(Error::Format(_))));
    }

    #[test]
    fn nan_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let (v, i) = write_raw(dir.path(), 2, 2, &[0.0, 1.0, f32::NAN, 1.0], "a\nb\n");
        let err = load_embeddings(&v, &i).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn scores() {
        let mut s = EmbeddingStore::new(2).unwrap();
        s.insert("x", &[1.0, 0.0]).unwrap();
        s.insert("y", &[0.0, 1.0]).unwrap();
        s.insert("u", &[0.6, 0.8]).unwrap();
        assert_eq!(s.dense_score("x", "y").unwrap(), 0.0);
        let uu = s.dense_score("u", "u").unwrap();
        assert!((uu - 1.0).abs() < 1e-7);
        assert!(matches!(s.dense_score("x", "zz"), Err(Error::UnknownId(id)) if id == "zz"));
    }

    #[test]
    fn save_load_and_text_fallback() {
        let dir = tempfile::tempdir().unwrap();
        let txt = dir.path().join("e.txt");
        std::fs::write(&txt, "p1 1 2 3\np2 -0.5 0.25 4\n").unwrap();
        let s = EmbeddingStore::load_text(&txt).unwrap();
        assert_eq!(s.dim(), 3);
        let (v, i) = (dir.path().join("o.bin"), dir.path().join("o.ids"));
        s.save(&v, &i).unwrap();
        let back = load_embeddings(&v, &i).unwrap();
        assert_eq!(back.get("p2").unwrap(), &[-0.5, 0.25, 4.0]);
        let bytes = std::fs::read(&v).unwrap();
        back.save(&v, &i).unwrap();
        assert_eq!(std::fs::read(&v).unwrap(), bytes);
    }
}
