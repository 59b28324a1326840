//! HSD: the hidden-state container shared with the extractor.
//!
//! Layout (all integers little-endian):
//! `"HSDF"`, `u32` version, then records until EOF, each
//! `u16 len + utf8 record_id`, `u16 len + utf8 group_id`, `u16 layer`,
//! `u8 label` (0 none, 1 mild, 2 moderate+, 255 unlabeled), `u32 dim`,
//! `dim x f32`.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use super::DistressLevel;
use crate::store::write_atomic;

pub const HSD_MAGIC: &[u8; 4] = b"HSDF";
pub const HSD_VERSION: u32 = 1;
const UNLABELED: u8 = 255;

#[derive(Debug, Clone, PartialEq)]
pub struct HsdRecord {
    pub record_id: String,
    pub group_id: String,
    pub layer: u16,
    pub label: Option<DistressLevel>,
    pub vector: Vec<f32>,
}

#[derive(Debug, Error)]
pub enum HsdError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported HSD version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated record at byte {0}")]
    Truncated(usize),
    #[error("invalid label code {code} at byte {offset}")]
    InvalidLabel { code: u8, offset: usize },
    #[error("identifier is not UTF-8 at byte {0}")]
    Utf8(usize),
    #[error("identifier longer than 65535 bytes: `{0}`")]
    IdTooLong(String),
    #[error("layer {layer} mixes dimensions {expected} and {found}")]
    MixedDimension { layer: u16, expected: usize, found: usize },
    #[error("non-finite value in record `{record_id}` layer {layer}")]
    NonFinite { record_id: String, layer: u16 },
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn check_dims(dims: &mut BTreeMap<u16, usize>, rec: &HsdRecord) -> Result<(), HsdError> {
    let expected = *dims.entry(rec.layer).or_insert(rec.vector.len());
    if expected != rec.vector.len() {
        return Err(HsdError::MixedDimension {
            layer: rec.layer,
            expected,
            found: rec.vector.len(),
        });
    }
    if rec.vector.iter().any(|v| !v.is_finite()) {
        return Err(HsdError::NonFinite {
            record_id: rec.record_id.clone(),
            layer: rec.layer,
        });
    }
    Ok(())
}

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<(), HsdError> {
    let len = u16::try_from(s.len()).map_err(|_| HsdError::IdTooLong(s.to_string()))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode_hsd(records: &[HsdRecord]) -> Result<Vec<u8>, HsdError> {
    let mut buf = Vec::with_capacity(8 + records.iter().map(|r| 16 + r.vector.len() * 4).sum::<usize>());
    buf.extend_from_slice(HSD_MAGIC);
    buf.extend_from_slice(&HSD_VERSION.to_le_bytes());
    let mut dims = BTreeMap::new();
    for rec in records {
        check_dims(&mut dims, rec)?;
        put_str(&mut buf, &rec.record_id)?;
        put_str(&mut buf, &rec.group_id)?;
        buf.extend_from_slice(&rec.layer.to_le_bytes());
        buf.push(rec.label.map_or(UNLABELED, |l| l.index() as u8));
        buf.extend_from_slice(&(rec.vector.len() as u32).to_le_bytes());
        for v in &rec.vector {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], HsdError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(HsdError::Truncated(self.pos)),
        }
    }

    fn u16(&mut self) -> Result<u16, HsdError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, HsdError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String, HsdError> {
        let at = self.pos;
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| HsdError::Utf8(at))
    }
}

pub fn decode_hsd(bytes: &[u8]) -> Result<Vec<HsdRecord>, HsdError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| HsdError::BadMagic)? != HSD_MAGIC {
        return Err(HsdError::BadMagic);
    }
    let version = r.u32()?;
    if version != HSD_VERSION {
        return Err(HsdError::UnsupportedVersion(version));
    }
    let mut records = Vec::new();
    let mut dims = BTreeMap::new();
    while r.pos < bytes.len() {
        let record_id = r.string()?;
        let group_id = r.string()?;
        let layer = r.u16()?;
        let offset = r.pos;
        let code = r.take(1)?[0];
        let label = match code {
            UNLABELED => None,
            c => Some(DistressLevel::from_index(c as usize).ok_or(HsdError::InvalidLabel { code: c, offset })?),
        };
        let dim = r.u32()? as usize;
        let raw = r.take(dim.checked_mul(4).ok_or(HsdError::Truncated(r.pos))?)?;
        let vector = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let rec = HsdRecord {
            record_id,
            group_id,
            layer,
            label,
            vector,
        };
        check_dims(&mut dims, &rec)?;
        records.push(rec);
    }
    Ok(records)
}

pub fn write_hsd(path: &Path, records: &[HsdRecord]) -> Result<(), HsdError> {
    let bytes = encode_hsd(records)?;
    Ok(write_atomic(path, &bytes)?)
}

pub fn read_hsd(path: &Path) -> Result<Vec<HsdRecord>, HsdError> {
    let bytes = std::fs::read(path).map_err(|source| HsdError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_hsd(&bytes)
}
