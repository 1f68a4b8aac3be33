//! Self-describing checkpoint container.
//!
//! Layout: the 8-byte magic `NMTCKPT1`, a little-endian `u64` header length, a
//! JSON header, then one raw little-endian buffer per parameter holding its
//! values followed by the first and second AdamW moments.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"NMTCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub step: u64,
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: DType,
    pub config_digest: String,
    /// Free-form payload owned by the caller (model config, training state).
    pub meta: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

pub fn encode_checkpoint<T: Scalar>(
    store: &ParamStore<T>,
    config_digest: &str,
    meta: serde_json::Value,
) -> Vec<u8> {
    let header = CheckpointHeader {
        dtype: T::DTYPE,
        config_digest: config_digest.to_string(),
        meta,
        params: store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                step: p.step,
                decay: p.decay,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + store.num_elements() * 3 * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in store.iter() {
        for &v in p.value.data().iter().chain(&p.first_moment).chain(&p.second_moment) {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    let bad = |m: &str| TensorError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| bad(&format!("header: {e}")))?;
    Ok((header, end))
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(CheckpointHeader, ParamStore<T>)> {
    let (header, mut pos) = read_header(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(TensorError::Checkpoint(format!(
            "checkpoint holds {:?}, requested {:?}",
            header.dtype,
            T::DTYPE
        )));
    }
    let size = T::DTYPE.size();
    let mut store = ParamStore::new();
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let need = 3 * n * size;
        if pos + need > bytes.len() {
            return Err(TensorError::Checkpoint(format!("truncated buffer for {}", entry.name)));
        }
        let read = |start: usize| -> Vec<T> {
            (0..n)
                .map(|k| T::read_le(&bytes[start + k * size..]))
                .collect()
        };
        let values = read(pos);
        let m = read(pos + n * size);
        let v = read(pos + 2 * n * size);
        pos += need;
        let id = store.add(&entry.name, Tensor::new(&entry.shape, values)?, entry.decay);
        let p = store.get_mut(id);
        p.first_moment = m;
        p.second_moment = v;
        p.step = entry.step;
    }
    if pos != bytes.len() {
        return Err(TensorError::Checkpoint("trailing bytes after buffers".into()));
    }
    Ok((header, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_preserves_values_and_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::<f32>::new();
        let a = s.normal("a", &[3, 4], 0.5, &mut rng);
        s.zeros("b", &[4]);
        s.get_mut(a).first_moment[2] = 0.25;
        s.get_mut(a).step = 7;
        let bytes = encode_checkpoint(&s, "abc", serde_json::json!({"k": 1}));
        let (h, back) = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(h.config_digest, "abc");
        assert_eq!(h.meta["k"], 1);
        assert_eq!(back.len(), 2);
        let p = back.get(back.id("a").unwrap());
        assert_eq!(p.value, s.get(a).value);
        assert_eq!(p.first_moment[2], 0.25);
        assert_eq!(p.step, 7);
    }

    #[test]
    fn dtype_and_corruption_are_detected() {
        let mut s = ParamStore::<f32>::new();
        s.zeros("b", &[4]);
        let bytes = encode_checkpoint(&s, "", serde_json::Value::Null);
        assert!(decode_checkpoint::<f64>(&bytes).is_err());
        assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint::<f32>(b"garbage!garbage!").is_err());
    }
}
