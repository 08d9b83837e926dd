//! Parameter checkpoints.
//!
//! Layout: an 8-byte little-endian header length, a JSON header mapping each
//! tensor name to `{"offset": <byte offset into the data>, "shape": [rows,
//! cols]}`, then the tensors as little-endian `f32`, row-major.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graph::ParamSet;
use crate::tensor::Tensor;

use super::HarnessError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Entry {
    offset: u64,
    shape: [usize; 2],
}

pub fn write_checkpoint<W: Write>(params: &ParamSet, mut out: W) -> Result<(), HarnessError> {
    let mut header = BTreeMap::new();
    let mut offset = 0u64;
    for id in params.ids() {
        let t = params.get(id);
        let name = params.name(id).to_string();
        if header.insert(name.clone(), Entry { offset, shape: [t.rows(), t.cols()] }).is_some() {
            return Err(HarnessError::Checkpoint(format!("duplicate tensor name `{name}`")));
        }
        offset += 4 * t.data().len() as u64;
    }
    let json = serde_json::to_vec(&header).map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for t in params.tensors() {
        for &x in t.data() {
            out.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Named tensors in name order.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>, HarnessError> {
    let bad = |m: String| HarnessError::Checkpoint(m);
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = usize::try_from(u64::from_le_bytes(len)).map_err(|e| bad(e.to_string()))?;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let header: BTreeMap<String, Entry> = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    header
        .into_iter()
        .map(|(name, e)| {
            let n = e.shape[0] * e.shape[1];
            let start = e.offset as usize;
            let bytes = data
                .get(start..start + 4 * n)
                .ok_or_else(|| bad(format!("tensor `{name}` runs past the end of the file")))?;
            let values =
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
            let t = Tensor::new(e.shape[0], e.shape[1], values).map_err(|err| bad(err.to_string()))?;
            Ok((name, t))
        })
        .collect()
}

pub fn save(params: &ParamSet, path: &Path) -> Result<(), HarnessError> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(params, std::io::BufWriter::new(file))
}

/// Overwrites every parameter of `params` from the checkpoint at `path`.
pub fn load_into(params: &mut ParamSet, path: &Path) -> Result<(), HarnessError> {
    let tensors = read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))?;
    if tensors.len() != params.len() {
        return Err(HarnessError::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            tensors.len(),
            params.len()
        )));
    }
    for (name, t) in tensors {
        let id = params.find(&name).ok_or_else(|| HarnessError::Checkpoint(format!("unknown tensor `{name}`")))?;
        let slot = params.get_mut(id);
        if slot.shape() != t.shape() {
            return Err(HarnessError::Checkpoint(format!("shape mismatch for `{name}`")));
        }
        *slot = t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_at_single_precision() {
        let mut params = ParamSet::new();
        params.add("b.weight", Tensor::new(2, 3, vec![0.1, -2.5, 3.0, 1e-3, 7.25, -0.0]).unwrap());
        params.add("a.bias", Tensor::row_vector(vec![1.0, 2.0]));
        let mut bytes = Vec::new();
        write_checkpoint(&params, &mut bytes).unwrap();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 8 + header_len + 4 * 8);
        let back = read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(back[0].0, "a.bias");
        assert_eq!(back[0].1.data(), &[1.0, 2.0]);
        assert_eq!(back[1].1.shape(), (2, 3));
        for (x, y) in back[1].1.data().iter().zip(params.get(params.find("b.weight").unwrap()).data()) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut params = ParamSet::new();
        params.add("w", Tensor::zeros(4, 4));
        let mut bytes = Vec::new();
        write_checkpoint(&params, &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(read_checkpoint(&bytes[..]).is_err());
    }
}
