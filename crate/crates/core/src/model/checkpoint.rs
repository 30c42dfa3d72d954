//! Binary checkpoint files.
//!
//! Layout, all integers and floats little-endian:
//! magic `GDGCKPT\0`, u32 version, u8 endianness tag `L`,
//! config as (u32 length, JSON), f64 valid_ppl, u64 epoch,
//! u32 history length then (u64 epoch, f64 train_loss, f64 valid_ppl) each,
//! u32 vocab size then tokens as (u32 length, UTF-8),
//! u32 tensor count then per tensor: name, u32 rank, u64 dims, f64 values
//! row-major.

use std::io::{Read, Write};
use std::path::Path;

use super::train::{Checkpoint, EpochRecord};
use super::transformer::{Params, ToyLm, ToyLmConfig};
use crate::embedding::{read_f64, read_string, read_u32, read_u64};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GDGCKPT\0";
const VERSION: u32 = 1;

fn put_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let cfg = serde_json::to_string(self.model.config())?;
        let io = |e: std::io::Error| Error::Format(e.to_string());
        (|| -> std::io::Result<()> {
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(b"L")?;
            put_str(w, &cfg)?;
            w.write_all(&self.valid_ppl.to_le_bytes())?;
            w.write_all(&(self.epoch as u64).to_le_bytes())?;
            w.write_all(&(self.history.len() as u32).to_le_bytes())?;
            for h in &self.history {
                w.write_all(&(h.epoch as u64).to_le_bytes())?;
                w.write_all(&h.train_loss.to_le_bytes())?;
                w.write_all(&h.valid_ppl.to_le_bytes())?;
            }
            w.write_all(&(self.model.vocab().len() as u32).to_le_bytes())?;
            for t in self.model.vocab() {
                put_str(w, t)?;
            }
            let tensors = self.model.params.named();
            w.write_all(&(tensors.len() as u32).to_le_bytes())?;
            for (name, shape, vals) in tensors {
                put_str(w, &name)?;
                w.write_all(&(shape.len() as u32).to_le_bytes())?;
                for d in shape {
                    w.write_all(&(d as u64).to_le_bytes())?;
                }
                for v in vals {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Ok(())
        })()
        .map_err(io)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let io = |e: std::io::Error| Error::Format(format!("truncated checkpoint: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(r).map_err(io)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut endian = [0u8; 1];
        r.read_exact(&mut endian).map_err(io)?;
        if &endian != b"L" {
            return Err(Error::Format("unsupported endianness tag".into()));
        }
        let config: ToyLmConfig = serde_json::from_str(&read_string(r).map_err(io)?)?;
        let valid_ppl = read_f64(r).map_err(io)?;
        let epoch = read_u64(r).map_err(io)? as usize;
        let n_hist = read_u32(r).map_err(io)?;
        let mut history = Vec::new();
        for _ in 0..n_hist {
            history.push(EpochRecord {
                epoch: read_u64(r).map_err(io)? as usize,
                train_loss: read_f64(r).map_err(io)?,
                valid_ppl: read_f64(r).map_err(io)?,
            });
        }
        let n_vocab = read_u32(r).map_err(io)?;
        let mut vocab = Vec::new();
        for _ in 0..n_vocab {
            vocab.push(read_string(r).map_err(io)?);
        }
        config.validate()?;
        let mut params = Params::zeros(&config, vocab.len());
        let expected: Vec<(String, Vec<usize>)> =
            params.named().into_iter().map(|(n, s, _)| (n, s)).collect();
        let n_tensors = read_u32(r).map_err(io)? as usize;
        if n_tensors != expected.len() {
            return Err(Error::Format(format!(
                "{n_tensors} tensors, config implies {}",
                expected.len()
            )));
        }
        for ((name, shape), dst) in expected.into_iter().zip(params.slices_mut()) {
            let got = read_string(r).map_err(io)?;
            let rank = read_u32(r).map_err(io)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u64(r).map_err(io)? as usize);
            }
            if got != name || dims != shape {
                return Err(Error::Format(format!(
                    "tensor {got} {dims:?} where {name} {shape:?} was expected"
                )));
            }
            for v in dst.iter_mut() {
                *v = read_f64(r).map_err(io)?;
            }
        }
        Ok(Checkpoint {
            model: ToyLm::from_parts(config, vocab, params)?,
            valid_ppl,
            epoch,
            history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}
