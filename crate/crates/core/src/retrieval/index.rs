use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"SMIX1";

/// Immutable gallery embedding matrix with per-row identifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    d: usize,
    embeddings: Vec<f32>,
    pub ids: Vec<String>,
    pub categories: Vec<String>,
    pub instances: Vec<String>,
}

/// One query result.
#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub row: usize,
    pub distance: f64,
}

pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

impl RetrievalIndex {
    pub fn new(
        rows: Vec<Vec<f32>>,
        ids: Vec<String>,
        categories: Vec<String>,
        instances: Vec<String>,
    ) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Index("empty gallery".into()));
        }
        if ids.len() != n || categories.len() != n || instances.len() != n {
            return Err(Error::Index("rows and metadata are not aligned".into()));
        }
        let d = rows[0].len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::Index("embeddings must share a positive dimension".into()));
        }
        let embeddings: Vec<f32> = rows.into_iter().flatten().collect();
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::Index("non-finite embedding".into()));
        }
        Ok(Self { d, embeddings, ids, categories, instances })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.d..(i + 1) * self.d]
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Every row ordered by ascending squared distance, ties by ascending id.
    pub fn rank(&self, query: &[f32]) -> Result<Vec<Hit>> {
        if query.len() != self.d {
            return Err(Error::Contract(format!("query has {} entries, index has {}", query.len(), self.d)));
        }
        let mut hits: Vec<Hit> =
            (0..self.len()).map(|row| Hit { row, distance: squared_distance(query, self.row(row)) }).collect();
        hits.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| self.ids[a.row].cmp(&self.ids[b.row])));
        Ok(hits)
    }

    pub fn query(&self, query: &[f32], k: usize) -> Result<Vec<Hit>> {
        if k == 0 || k > self.len() {
            return Err(Error::Contract(format!("k = {k} outside 1..={}", self.len())));
        }
        let mut hits = self.rank(query)?;
        hits.truncate(k);
        Ok(hits)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(21 + self.embeddings.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.d as u64).to_le_bytes());
        for v in &self.embeddings {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..self.len() {
            for s in [&self.ids[i], &self.categories[i], &self.instances[i]] {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(Error::Index("truncated index file".into()));
            }
            let (a, b) = r.split_at(n);
            r = b;
            Ok(a)
        };
        if take(5)? != MAGIC {
            return Err(Error::Index("bad magic, expected SMIX1".into()));
        }
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize;
        let n = u64_at(take(8)?);
        let d = u64_at(take(8)?);
        let count = n.checked_mul(d).filter(|c| *c <= bytes.len() / 4).ok_or_else(|| Error::Index("bad dimensions".into()))?;
        let raw = take(count * 4)?;
        let rows: Vec<Vec<f32>> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect::<Vec<_>>()
            .chunks(d.max(1))
            .map(|c| c.to_vec())
            .collect();
        let mut meta: [Vec<String>; 3] = Default::default();
        for _ in 0..n {
            for m in meta.iter_mut() {
                let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
                let s = std::str::from_utf8(take(len)?).map_err(|_| Error::Index("id is not UTF-8".into()))?;
                m.push(s.to_string());
            }
        }
        if !r.is_empty() {
            return Err(Error::Index("trailing bytes after id table".into()));
        }
        let [ids, categories, instances] = meta;
        Self::new(rows, ids, categories, instances)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
