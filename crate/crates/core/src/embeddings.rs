//! Immutable stores of precomputed sentence vectors.
//!
//! On-disk layout, all integers little-endian, no padding:
//!
//! ```text
//! "EMBS"            4 bytes magic
//! version           u32 (= 1)
//! dataset digest    32 bytes
//! dim               u32
//! count             u64
//! tag length        u16, followed by that many UTF-8 bytes
//! values            count * dim f32, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::dataset::{Dataset, Digest};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"EMBS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dataset_digest: Digest,
    dim: usize,
    count: usize,
    encoder_tag: String,
    values: Vec<f32>,
}

impl EmbeddingStore {
    /// Validates shape, finiteness and tag length.
    pub fn new(
        dataset_digest: Digest,
        dim: usize,
        encoder_tag: impl Into<String>,
        values: Vec<f32>,
    ) -> Result<Self> {
        let encoder_tag = encoder_tag.into();
        if dim == 0 || dim > u32::MAX as usize {
            return Err(Error::Format(format!("dim {dim} out of range")));
        }
        if !values.len().is_multiple_of(dim) {
            return Err(Error::Format(format!(
                "{} values do not form rows of dim {dim}",
                values.len()
            )));
        }
        if encoder_tag.len() > u16::MAX as usize {
            return Err(Error::Format("encoder tag longer than 65535 bytes".into()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!(
                "non-finite value at row {} column {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self {
            dataset_digest,
            dim,
            count: values.len() / dim,
            encoder_tag,
            values,
        })
    }

    pub fn from_rows(
        dataset_digest: Digest,
        encoder_tag: impl Into<String>,
        rows: &[Vec<f32>],
    ) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::Dimension {
                expected: dim,
                got: bad.len(),
            });
        }
        Self::new(dataset_digest, dim, encoder_tag, rows.concat())
    }

    pub fn dataset_digest(&self) -> Digest {
        self.dataset_digest
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn encoder_tag(&self) -> &str {
        &self.encoder_tag
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn lookup(&self, row: usize) -> Result<&[f32]> {
        if row >= self.count {
            return Err(Error::OutOfRange {
                index: row,
                len: self.count,
            });
        }
        Ok(&self.values[row * self.dim..(row + 1) * self.dim])
    }

    /// Fails unless the store is bound to `dataset` and covers every row.
    pub fn check_against(&self, dataset: &Dataset) -> Result<()> {
        if self.dataset_digest != dataset.digest() {
            return Err(Error::Incompatible(format!(
                "store `{}` is bound to {} but dataset `{}` has digest {}",
                self.encoder_tag,
                self.dataset_digest,
                dataset.name,
                dataset.digest()
            )));
        }
        if self.count != dataset.len() {
            return Err(Error::Incompatible(format!(
                "store `{}` has {} vectors but dataset `{}` has {} rows",
                self.encoder_tag,
                self.count,
                dataset.name,
                dataset.len()
            )));
        }
        Ok(())
    }

    /// Copies the given rows into a `rows.len() x dim` matrix.
    pub fn gather(&self, rows: &[usize]) -> Result<Array2<f32>> {
        let mut out = Array2::zeros((rows.len(), self.dim));
        for (mut dst, &r) in out.rows_mut().into_iter().zip(rows) {
            for (d, s) in dst.iter_mut().zip(self.lookup(r)?) {
                *d = *s;
            }
        }
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<store>", e);
        w.write_all(&MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&self.dataset_digest.0).map_err(io)?;
        w.write_all(&(self.dim as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.count as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.encoder_tag.len() as u16).to_le_bytes())
            .map_err(io)?;
        w.write_all(self.encoder_tag.as_bytes()).map_err(io)?;
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        fn take<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
            let mut buf = [0u8; N];
            r.read_exact(&mut buf).map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated file in {what}")),
                _ => Error::io("<store>", e),
            })?;
            Ok(buf)
        }

        let magic: [u8; 4] = take(&mut r, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:02x?}, expected `EMBS`")));
        }
        let version = u32::from_le_bytes(take(&mut r, "version")?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let digest = Digest(take(&mut r, "digest")?);
        let dim = u32::from_le_bytes(take(&mut r, "dim")?) as usize;
        let count = u64::from_le_bytes(take(&mut r, "count")?);
        let tag_len = u16::from_le_bytes(take(&mut r, "tag length")?) as usize;
        let mut tag = vec![0u8; tag_len];
        r.read_exact(&mut tag)
            .map_err(|_| Error::Format("truncated file in encoder tag".into()))?;
        let tag = String::from_utf8(tag).map_err(|_| Error::Format("encoder tag is not UTF-8".into()))?;

        let n_values = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(dim))
            .ok_or_else(|| Error::Format(format!("count {count} x dim {dim} overflows")))?;
        let n_bytes = n_values
            .checked_mul(4)
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        let mut payload = Vec::new();
        r.by_ref()
            .take(n_bytes as u64)
            .read_to_end(&mut payload)
            .map_err(|e| Error::io("<store>", e))?;
        if payload.len() != n_bytes {
            return Err(Error::Format(format!(
                "truncated payload: {} of {n_bytes} bytes",
                payload.len()
            )));
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra).map_err(|e| Error::io("<store>", e))? != 0 {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(digest, dim, tag, values)
    }

    /// Writes through a temporary file in the target directory and renames it
    /// into place.
    pub fn write(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        self.write_to(BufWriter::new(tmp.as_file()))
            .map_err(|e| relabel(e, path))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f)).map_err(|e| relabel(e, path))
    }

    /// Reads a store and checks it against `dataset`.
    pub fn read_for(path: &Path, dataset: &Dataset) -> Result<Self> {
        let store = Self::read(path)?;
        store
            .check_against(dataset)
            .map_err(|e| Error::Incompatible(format!("{}: {e}", path.display())))?;
        Ok(store)
    }
}

fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    }
}

/// Row-wise concatenation in argument order; tags are joined with `+`.
pub fn concat_stores(stores: &[&EmbeddingStore]) -> Result<EmbeddingStore> {
    let (first, rest) = match stores {
        [first, rest @ ..] if !rest.is_empty() => (*first, rest),
        _ => {
            return Err(Error::Incompatible(
                "concatenation needs at least two stores".into(),
            ))
        }
    };
    for s in rest {
        if s.dataset_digest != first.dataset_digest {
            return Err(Error::Incompatible(format!(
                "store `{}` is bound to {}, store `{}` to {}",
                first.encoder_tag, first.dataset_digest, s.encoder_tag, s.dataset_digest
            )));
        }
        if s.count != first.count {
            return Err(Error::Incompatible(format!(
                "store `{}` has {} vectors, store `{}` has {}",
                first.encoder_tag, first.count, s.encoder_tag, s.count
            )));
        }
    }
    let dim: usize = stores.iter().map(|s| s.dim).sum();
    let mut values = Vec::with_capacity(dim * first.count);
    for row in 0..first.count {
        for s in stores {
            values.extend_from_slice(&s.values[row * s.dim..(row + 1) * s.dim]);
        }
    }
    let tag = stores
        .iter()
        .map(|s| s.encoder_tag.as_str())
        .collect::<Vec<_>>()
        .join("+");
    EmbeddingStore::new(first.dataset_digest, dim, tag, values)
}

/// Concatenates when given several stores, clones when given one.
pub fn combine(stores: &[EmbeddingStore]) -> Result<EmbeddingStore> {
    match stores {
        [] => Err(Error::Usage("no embedding stores given".into())),
        [one] => Ok(one.clone()),
        many => concat_stores(&many.iter().collect::<Vec<_>>()),
    }
}

/// Scales each row to unit L2 norm; all-zero rows are left as they are.
pub fn l2_normalize_rows(features: &mut Array2<f32>) {
    for mut row in features.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
}
