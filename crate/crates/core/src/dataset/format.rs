//! Dataset container. Byte layout (all integers little-endian):
//!
//! ```text
//! magic         8 bytes  "SRLDATA\0"
//! version       u32
//! header_len    u32
//! header        header_len bytes of JSON (DatasetHeader)
//! record_count  u64
//! record*       u32 payload_len, then payload:
//!                 episode_id u64, step_index u32, action u8, reward i8,
//!                 gt_dim u16, gt_state f64 x gt_dim, next_gt_state f64 x gt_dim,
//!                 obs u8 x (S*S*3), next_obs u8 x (S*S*3)
//! crc32         u32 over every preceding byte
//! ```

use super::{Dataset, DatasetError, DatasetHeader, TransitionRecord};
use crate::envs::Image;

pub const DATASET_MAGIC: &[u8; 8] = b"SRLDATA\0";
pub const DATASET_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

impl Dataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        put_u32(&mut out, DATASET_VERSION);
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        let mut payload = Vec::new();
        for r in &self.records {
            payload.clear();
            payload.extend_from_slice(&r.episode_id.to_le_bytes());
            payload.extend_from_slice(&r.step_index.to_le_bytes());
            payload.push(r.action);
            payload.push(r.reward as u8);
            payload.extend_from_slice(&(r.gt_state.len() as u16).to_le_bytes());
            for v in r.gt_state.iter().chain(&r.next_gt_state) {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            payload.extend_from_slice(r.obs.pixels());
            payload.extend_from_slice(r.next_obs.pixels());
            put_u32(&mut out, payload.len() as u32);
            out.extend_from_slice(&payload);
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        if bytes.len() < 8 || &bytes[..8] != DATASET_MAGIC {
            return Err(DatasetError::BadMagic);
        }
        let mut rd = Reader { bytes, pos: 8 };
        let version = rd.u32("version")?;
        if version != DATASET_VERSION {
            return Err(DatasetError::Version {
                found: version,
                supported: DATASET_VERSION,
            });
        }
        let header_len = rd.u32("header length")? as usize;
        let header: DatasetHeader = serde_json::from_slice(rd.take(header_len, "header")?)
            .map_err(|e| DatasetError::Malformed(format!("header: {e}")))?;
        let count = rd.u64("record count")?;
        let s = header.image_size;
        let img_len = s * s * 3;
        let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
        for i in 0..count {
            let len = rd.u32("record length")? as usize;
            let payload = rd.take(len, "record")?;
            records.push(parse_record(payload, s, img_len).ok_or_else(|| {
                DatasetError::Malformed(format!("record {i} has an inconsistent layout"))
            })?);
        }
        let body_end = rd.pos;
        let stored = rd.u32("checksum")?;
        if rd.pos != bytes.len() {
            return Err(DatasetError::Malformed(format!(
                "{} trailing bytes after checksum",
                bytes.len() - rd.pos
            )));
        }
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(DatasetError::Checksum { stored, computed });
        }
        if header.sample_count != records.len() {
            return Err(DatasetError::Malformed(format!(
                "header claims {} samples, file holds {}",
                header.sample_count,
                records.len()
            )));
        }
        Ok(Dataset { header, records })
    }
}

fn parse_record(p: &[u8], size: usize, img_len: usize) -> Option<TransitionRecord> {
    let fixed = 8 + 4 + 1 + 1 + 2;
    if p.len() < fixed {
        return None;
    }
    let episode_id = u64::from_le_bytes(p[0..8].try_into().ok()?);
    let step_index = u32::from_le_bytes(p[8..12].try_into().ok()?);
    let action = p[12];
    let reward = p[13] as i8;
    let d = u16::from_le_bytes(p[14..16].try_into().ok()?) as usize;
    if p.len() != fixed + 16 * d + 2 * img_len {
        return None;
    }
    let floats: Vec<f64> = p[fixed..fixed + 16 * d]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let img_start = fixed + 16 * d;
    let obs = Image::from_pixels(size, p[img_start..img_start + img_len].to_vec())?;
    let next_obs = Image::from_pixels(size, p[img_start + img_len..].to_vec())?;
    Some(TransitionRecord {
        obs,
        action,
        reward,
        next_obs,
        episode_id,
        step_index,
        gt_state: floats[..d].to_vec(),
        next_gt_state: floats[d..].to_vec(),
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DatasetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(DatasetError::Truncated(format!(
                "{what} needs {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, DatasetError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
