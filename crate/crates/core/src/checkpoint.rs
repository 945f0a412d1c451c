//! Binary checkpoint format.
//!
//! ```text
//! "RFCK"  u32 header_len  header_json
//! u32 tensor_count
//! repeat: u32 name_len  name  u32 rows  u32 cols  rows*cols f64
//! ```
//!
//! All integers and floats are little-endian. Floats are stored as raw
//! bit patterns, so a save/load cycle is bitwise exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{BlockVariant, Hyper, ModelParams};
use crate::error::{Error, Result};
use crate::fingerprint::Dim;
use crate::matrix::Matrix;

pub const MAGIC: &[u8; 4] = b"RFCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub d_prime: usize,
    pub layers: usize,
    pub heads: usize,
    pub variant: BlockVariant,
    pub dims_active: Vec<Dim>,
    pub snr_gate: bool,
    pub snr_eps: f64,
    /// Hash of the resolved run configuration that produced the weights.
    pub config_hash: Option<String>,
    /// Writer identification. Not a timestamp, so identical runs produce
    /// identical files.
    pub created: String,
    pub checksum: String,
}

impl CheckpointHeader {
    pub fn hyper(&self) -> Hyper {
        Hyper {
            dims: self.dims_active.clone(),
            d_model: self.d_prime,
            layers: self.layers,
            heads: self.heads,
            variant: self.variant,
            snr_gate: self.snr_gate,
            snr_eps: self.snr_eps,
        }
    }
}

pub fn header_for(params: &ModelParams, config_hash: Option<&str>) -> CheckpointHeader {
    let h = &params.hyper;
    CheckpointHeader {
        format_version: FORMAT_VERSION,
        d_prime: h.d_model,
        layers: h.layers,
        heads: h.heads,
        variant: h.variant,
        dims_active: h.dims.clone(),
        snr_gate: h.snr_gate,
        snr_eps: h.snr_eps,
        config_hash: config_hash.map(str::to_string),
        created: concat!("refi-core ", env!("CARGO_PKG_VERSION")).to_string(),
        checksum: params.checksum(),
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn to_bytes(params: &ModelParams, config_hash: Option<&str>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&header_for(params, config_hash))
        .map_err(|e| Error::Checkpoint(format!("header serialization: {e}")))?;
    let tensors = params.named_tensors();
    let mut out = Vec::with_capacity(header.len() + 16 + params.parameter_count() * 8);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, header.len(), "header length")?;
    out.extend_from_slice(&header);
    put_u32(&mut out, tensors.len(), "tensor count")?;
    for (name, m) in tensors {
        put_u32(&mut out, name.len(), "name length")?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, m.rows(), "rows")?;
        put_u32(&mut out, m.cols(), "cols")?;
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

fn parse_header(r: &mut Reader<'_>) -> Result<CheckpointHeader> {
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let len = r.u32()?;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    Ok(header)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelParams, CheckpointHeader)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let header = parse_header(&mut r)?;
    let mut params = ModelParams::init(header.hyper(), 0)?;
    let expected = params.weights.names();
    let count = r.u32()?;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {count}", expected.len())));
    }
    let mut slots = params.tensors_mut();
    for (name, slot) in expected.iter().zip(slots.iter_mut()) {
        let len = r.u32()?;
        let got = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if got != name {
            return Err(Error::Checkpoint(format!("expected tensor {name:?}, found {got:?}")));
        }
        let (rows, cols) = (r.u32()?, r.u32()?);
        if (rows, cols) != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} is {rows}x{cols}, model expects {}x{}",
                slot.rows(),
                slot.cols()
            )));
        }
        let raw = r.take(rows * cols * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        let m = Matrix::from_vec(rows, cols, data);
        if !m.is_finite() {
            return Err(Error::Checkpoint(format!("tensor {name} contains non-finite values")));
        }
        **slot = m;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if params.checksum() != header.checksum {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    Ok((params, header))
}

pub fn save(params: &ModelParams, path: &Path, config_hash: Option<&str>) -> Result<()> {
    fs::write(path, to_bytes(params, config_hash)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelParams, CheckpointHeader)> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Reads only the header, e.g. to validate flags before loading weights.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_header(&mut Reader { buf: &bytes, pos: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn model(variant: BlockVariant, dims: Vec<Dim>) -> ModelParams {
        let hyper = Hyper { dims, d_model: 8, layers: 2, variant, ..Hyper::default() };
        let mut p = ModelParams::init(hyper, 17).unwrap();
        let mut rng = SplitMix64::new(3);
        for m in p.tensors_mut() {
            for v in m.as_mut_slice() {
                *v += rng.normal() * 1e-3;
            }
        }
        p
    }

    #[test]
    fn round_trip_is_bitwise() {
        for (variant, dims) in [
            (BlockVariant::Standard, Dim::ALL.to_vec()),
            (BlockVariant::Literal, vec![Dim::Np, Dim::Nd, Dim::Gd, Dim::Deg]),
        ] {
            let p = model(variant, dims);
            let bytes = to_bytes(&p, Some("abc")).unwrap();
            let (q, header) = from_bytes(&bytes).unwrap();
            assert_eq!(p, q);
            assert_eq!(p.checksum(), q.checksum());
            assert_eq!(header.config_hash.as_deref(), Some("abc"));
            assert_eq!(to_bytes(&q, Some("abc")).unwrap(), bytes);
        }
    }

    #[test]
    fn file_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rfg");
        let p = model(BlockVariant::Standard, Dim::ALL.to_vec());
        save(&p, &path, None).unwrap();
        let header = read_header(&path).unwrap();
        assert_eq!((header.d_prime, header.layers, header.heads), (8, 2, 1));
        assert_eq!(load(&path).unwrap().0, p);
    }

    #[test]
    fn corruption_is_detected() {
        let p = model(BlockVariant::Standard, Dim::ALL.to_vec());
        let bytes = to_bytes(&p, None).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut flipped = bytes.clone();
        let last = flipped.len() - 2;
        flipped[last] ^= 1;
        assert!(matches!(from_bytes(&flipped), Err(Error::Checkpoint(m)) if m.contains("checksum")));
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
        assert!(from_bytes(b"nope").is_err());
    }
}
