//! Parameter container: magic, JSON header, raw little-endian `f64` blobs.
//!
//! ```text
//! b"SRLCKPT\0" | u32 header_len | header JSON | blob_0 | blob_1 | ...
//! ```
//! Blobs follow the header's parameter order; each is `prod(shape)` values.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AutodiffError, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SRLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE: &str = "f64le";

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    params: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> Result<(), AutodiffError> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        dtype: DTYPE.into(),
        params: store
            .ids()
            .map(|id| Entry {
                name: store.name(id).to_string(),
                shape: store.get(id).shape().to_vec(),
                trainable: store.is_trainable(id),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::new();
    for id in store.ids() {
        buf.clear();
        for v in store.get(id).data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore, AutodiffError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic bytes".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| AutodiffError::Checkpoint(e.to_string()))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(AutodiffError::Checkpoint(format!(
            "unsupported checkpoint version {} (this build reads {})",
            header.format_version, CHECKPOINT_VERSION
        )));
    }
    if header.dtype != DTYPE {
        return Err(AutodiffError::Checkpoint(format!(
            "unsupported dtype {}",
            header.dtype
        )));
    }
    let mut store = ParamStore::new();
    for e in header.params {
        let n: usize = e.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(e.name, Tensor::new(e.shape, data)?, e.trainable);
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: impl AsRef<Path>) -> Result<(), AutodiffError> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(store, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore, AutodiffError> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_bit_exact() {
        let mut store = ParamStore::new();
        store.add(
            "enc.w",
            Tensor::new(vec![2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
            true,
        );
        store.add("head.b", Tensor::scalar(std::f64::consts::PI), false);
        let mut bytes = Vec::new();
        write_checkpoint(&store, &mut bytes).unwrap();
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        assert!(store.bit_equal(&back));
        assert!(!back.is_trainable(back.find("head.b").unwrap()));
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[3]), true);
        let mut bytes = Vec::new();
        write_checkpoint(&store, &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }
}
