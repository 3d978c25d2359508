//! Binary model checkpoints.
//!
//! Little-endian layout: magic `FSIM`, u32 version, the config (u32 H,
//! u32 h, f64 dropout, u8 optimizer, f64 lr, u64 iterations, u64 seed),
//! u32 layer count, then per layer u32 rows, u32 cols, `rows*cols` f32
//! weights in row-major `(in, out)` order and `cols` f32 biases.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Layer, MlpConfig, MlpModel, Optimizer};
use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"FSIM";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &MlpModel, mut w: W) -> Result<()> {
    let c = model.config();
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(c.hidden_layers as u32).to_le_bytes());
    buf.extend_from_slice(&(c.hidden_dim as u32).to_le_bytes());
    buf.extend_from_slice(&c.dropout.to_le_bytes());
    buf.push(match c.optimizer {
        Optimizer::Sgd => 0,
        Optimizer::Adam => 1,
    });
    buf.extend_from_slice(&c.initial_lr.to_le_bytes());
    buf.extend_from_slice(&(c.iterations as u64).to_le_bytes());
    buf.extend_from_slice(&c.seed.to_le_bytes());
    buf.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for layer in model.layers() {
        buf.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
        for v in layer.weights.iter().chain(layer.bias.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io("<checkpoint>", e))
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
            _ => Error::io("<checkpoint>", e),
        })?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut raw = vec![0u8; n * 4];
        self.inner
            .read_exact(&mut raw)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<MlpModel> {
    let mut cur = Cursor { inner: r };
    if cur.bytes::<4>()? != MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hidden_layers = cur.u32()? as usize;
    let hidden_dim = cur.u32()? as usize;
    let dropout = cur.f64()?;
    let optimizer = match cur.bytes::<1>()?[0] {
        0 => Optimizer::Sgd,
        1 => Optimizer::Adam,
        other => return Err(Error::Format(format!("unknown optimizer tag {other}"))),
    };
    let initial_lr = cur.f64()?;
    let iterations = cur.u64()? as usize;
    let seed = cur.u64()?;
    let config = MlpConfig {
        hidden_layers,
        hidden_dim,
        dropout,
        optimizer,
        initial_lr,
        iterations,
        seed,
    };
    let n_layers = cur.u32()? as usize;
    if n_layers != hidden_layers + 1 {
        return Err(Error::Format(format!(
            "{n_layers} layers stored for H={hidden_layers}"
        )));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let weights = Array2::from_shape_vec((rows, cols), cur.f32s(rows * cols)?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let bias = Array1::from(cur.f32s(cols)?);
        layers.push(Layer { weights, bias });
    }
    let model = MlpModel::from_layers(config, layers)?;
    if !model.all_finite() {
        return Err(Error::Format("checkpoint holds non-finite parameters".into()));
    }
    Ok(model)
}

impl MlpModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        write_checkpoint(self, BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        read_checkpoint(BufReader::new(f)).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::init_model;

    #[test]
    fn round_trip_is_exact() {
        for h in 0..=2 {
            let cfg = MlpConfig {
                hidden_layers: h,
                hidden_dim: 7,
                seed: 99,
                ..MlpConfig::pivot()
            };
            let m: MlpModel = init_model(5, 3, &cfg).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&m, &mut buf).unwrap();
            let back = read_checkpoint(&buf[..]).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let m: MlpModel = init_model(5, 3, &MlpConfig { hidden_dim: 4, ..MlpConfig::pivot() }).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 2]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad[..]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.bin");
        let m: MlpModel = init_model(6, 2, &MlpConfig { hidden_dim: 3, ..MlpConfig::pivot() }).unwrap();
        m.save(&p).unwrap();
        assert_eq!(MlpModel::load(&p).unwrap(), m);
    }
}
