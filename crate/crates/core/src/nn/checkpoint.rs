//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "BPCK"
//! version    u32      1
//! header_len u64      byte length of the JSON header
//! header     UTF-8 JSON {"metadata": any, "tensors": [{"name", "shape"}...],
//!                        "optimizer": null | {"step", "config"}}
//! payload    f64 LE   every tensor's data in header order, then (when an
//!                     optimizer is present) all first moments, then all
//!                     second moments, in the same order
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a save/load cycle is lossless.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamWConfig, AdamWState};
use super::tensor::{ParamStore, Tensor};
use super::NnError;

const MAGIC: &[u8; 4] = b"BPCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    step: u64,
    config: AdamWConfig,
}

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub params: ParamStore,
    pub optimizer: Option<AdamWState>,
}

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

pub fn write_checkpoint(
    out: &mut impl Write,
    params: &ParamStore,
    optimizer: Option<&AdamWState>,
    metadata: &serde_json::Value,
) -> Result<(), NnError> {
    let header = Header {
        metadata: metadata.clone(),
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry { name: name.to_string(), shape: t.shape().to_vec() })
            .collect(),
        optimizer: optimizer.map(|s| OptimizerEntry { step: s.step, config: s.config }),
    };
    let header = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    let mut write_all = |ts: &[Tensor]| -> Result<(), NnError> {
        for t in ts {
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    };
    write_all(params.tensors())?;
    if let Some(s) = optimizer {
        write_all(&s.m)?;
        write_all(&s.v)?;
    }
    Ok(())
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<Checkpoint, NnError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut u32buf = [0u8; 4];
    input.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut u64buf = [0u8; 8];
    input.read_exact(&mut u64buf)?;
    let mut header = vec![0u8; u64::from_le_bytes(u64buf) as usize];
    input.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header).map_err(|e| bad(e.to_string()))?;

    let mut read_tensor = |shape: &[usize]| -> Result<Tensor, NnError> {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            input.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        Tensor::new(shape.to_vec(), data)
    };

    let mut params = ParamStore::new();
    for entry in &header.tensors {
        let t = read_tensor(&entry.shape)?;
        params.add(entry.name.clone(), t)?;
    }
    let optimizer = match header.optimizer {
        Some(opt) => {
            let mut m = Vec::with_capacity(header.tensors.len());
            for entry in &header.tensors {
                m.push(read_tensor(&entry.shape)?);
            }
            let mut v = Vec::with_capacity(header.tensors.len());
            for entry in &header.tensors {
                v.push(read_tensor(&entry.shape)?);
            }
            Some(AdamWState { step: opt.step, m, v, config: opt.config })
        }
        None => None,
    };
    Ok(Checkpoint { metadata: header.metadata, params, optimizer })
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParamStore,
    optimizer: Option<&AdamWState>,
    metadata: &serde_json::Value,
) -> Result<(), NnError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, params, optimizer, metadata)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NnError> {
    read_checkpoint(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.add_uniform("a.weight", vec![3, 2], 3, &mut rng).unwrap();
        store.add("a.bias", Tensor::vector(vec![1.0 / 3.0, f64::MIN_POSITIVE])).unwrap();
        let mut state = AdamWState::new(store.tensors(), AdamWConfig::default());
        state.step = 17;
        state.m[0].data_mut()[1] = 0.1 + 0.2;
        state.v[1].data_mut()[0] = 1e-300;
        let meta = serde_json::json!({"model": "x", "epoch": 4});

        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store, Some(&state), &meta).unwrap();
        let ck = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(ck.params, store);
        assert_eq!(ck.optimizer.as_ref(), Some(&state));
        assert_eq!(ck.metadata, meta);

        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store, None, &meta).unwrap();
        assert!(read_checkpoint(&mut buf.as_slice()).unwrap().optimizer.is_none());
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        assert!(read_checkpoint(&mut &b"NOPE\x01\0\0\0"[..]).is_err());
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store, None, &serde_json::Value::Null).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
