//! Named-parameter checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "DSCK"
//! version    u8       CHECKPOINT_VERSION
//! part       u8       0 = backbone, 1 = header, 2 = full
//! dtype      u8       0 = f32, 1 = f64
//! reserved   u8       0
//! arch_len   u16, arch_id (UTF-8)
//! count      u32
//! count x entry:
//!     name_len u16, name (UTF-8)
//!     kind     u8       0 = weight, 1 = buffer
//!     ndim     u8, ndim x u32 dims
//!     nbytes   u64, raw element bytes
//!     crc32    u32 of the raw element bytes
//! crc32      u32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use super::{ComposedModel, Part};
use crate::nn::{DType, Element, ParamKind};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSCK";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u8),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checksum mismatch in {0}")]
    Corrupt(String),
    #[error("architecture mismatch: checkpoint has {found}, target is {expected}")]
    ArchitectureMismatch { expected: String, found: String },
    #[error("part mismatch: checkpoint holds {found}, asked for {expected}")]
    PartMismatch { expected: Part, found: Part },
    #[error("element type mismatch: checkpoint holds {found:?}, target uses {expected:?}")]
    DtypeMismatch { expected: DType, found: DType },
    #[error("parameter {0} missing from checkpoint")]
    MissingEntry(String),
    #[error("checkpoint entry {0} has no counterpart in the target model")]
    UnexpectedEntry(String),
    #[error("shape mismatch for {name}: checkpoint {found:?}, target {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    /// Raw little-endian element bytes.
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightCheckpoint {
    pub version: u8,
    pub part: Part,
    pub arch_id: String,
    pub dtype: DType,
    pub entries: Vec<CheckpointEntry>,
}

impl WeightCheckpoint {
    pub fn from_model<F: Element>(model: &ComposedModel<F>, part: Part) -> Self {
        let mut entries = Vec::new();
        model.visit_part(part, &mut |name, p| {
            let mut data = Vec::with_capacity(p.len() * F::DTYPE.size());
            p.value.iter().for_each(|v| v.write_le(&mut data));
            entries.push(CheckpointEntry { name: name.to_string(), kind: p.kind, shape: p.shape.clone(), data });
        });
        WeightCheckpoint { version: CHECKPOINT_VERSION, part, arch_id: model.arch_id(part), dtype: F::DTYPE, entries }
    }

    /// Copy this checkpoint's parameters into `model`; other parts are untouched.
    pub fn apply<F: Element>(&self, model: &mut ComposedModel<F>) -> Result<(), CheckpointError> {
        let expected = model.arch_id(self.part);
        if expected != self.arch_id {
            return Err(CheckpointError::ArchitectureMismatch { expected, found: self.arch_id.clone() });
        }
        if self.dtype != F::DTYPE {
            return Err(CheckpointError::DtypeMismatch { expected: F::DTYPE, found: self.dtype });
        }
        let by_name: std::collections::HashMap<&str, &CheckpointEntry> =
            self.entries.iter().map(|e| (e.name.as_str(), e)).collect();
        // validate everything before mutating
        let mut problem = None;
        let mut seen = 0usize;
        model.visit_part(self.part, &mut |name, p| {
            if problem.is_some() {
                return;
            }
            match by_name.get(name) {
                None => problem = Some(CheckpointError::MissingEntry(name.to_string())),
                Some(e) if e.shape != p.shape || e.kind != p.kind => {
                    problem = Some(CheckpointError::ShapeMismatch {
                        name: name.to_string(),
                        expected: p.shape.clone(),
                        found: e.shape.clone(),
                    })
                }
                Some(_) => seen += 1,
            }
        });
        if let Some(p) = problem {
            return Err(p);
        }
        if seen != self.entries.len() {
            let mut names = std::collections::HashSet::new();
            model.visit_part(self.part, &mut |n, _| {
                names.insert(n.to_string());
            });
            let extra = self.entries.iter().find(|e| !names.contains(&e.name)).map(|e| e.name.clone()).unwrap_or_default();
            return Err(CheckpointError::UnexpectedEntry(extra));
        }
        let size = F::DTYPE.size();
        let part = self.part;
        model.visit_mut(&mut |name, p| {
            if !part.covers(name) {
                return;
            }
            let e = by_name[name];
            for (v, chunk) in p.value.iter_mut().zip(e.data.chunks_exact(size)) {
                *v = F::read_le(chunk);
            }
        });
        Ok(())
    }
}

pub fn encode_checkpoint(ck: &WeightCheckpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&[ck.version, ck.part.code(), ck.dtype.code(), 0]);
    out.extend_from_slice(&(ck.arch_id.len() as u16).to_le_bytes());
    out.extend_from_slice(ck.arch_id.as_bytes());
    out.extend_from_slice(&(ck.entries.len() as u32).to_le_bytes());
    for e in &ck.entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(match e.kind {
            ParamKind::Weight => 0,
            ParamKind::Buffer => 1,
        });
        out.push(e.shape.len() as u8);
        for d in &e.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(e.data.len() as u64).to_le_bytes());
        out.extend_from_slice(&e.data);
        out.extend_from_slice(&crc32fast::hash(&e.data).to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &'static str) -> Result<String, CheckpointError> {
        let n = self.u16(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
    }
}

/// Parse and verify a checkpoint held in memory.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<WeightCheckpoint, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated("header"));
    }
    let version = bytes[4];
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(CheckpointError::Corrupt("file".into()));
    }
    let mut r = Reader { buf: body, pos: 5 };
    let part = Part::from_code(r.u8("part")?).ok_or_else(|| CheckpointError::Malformed("unknown part code".into()))?;
    let dtype = DType::from_code(r.u8("dtype")?).ok_or_else(|| CheckpointError::Malformed("unknown dtype code".into()))?;
    r.u8("reserved")?;
    let arch_id = r.string("architecture id")?;
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.string("entry name")?;
        let kind = match r.u8("entry kind")? {
            0 => ParamKind::Weight,
            1 => ParamKind::Buffer,
            k => return Err(CheckpointError::Malformed(format!("entry {name}: unknown kind {k}"))),
        };
        let ndim = r.u8("entry rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("entry dims")? as usize);
        }
        let nbytes = r.u64("entry size")?;
        let elems = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let expected = elems.and_then(|e| e.checked_mul(dtype.size()));
        if expected != Some(nbytes as usize) || nbytes > (r.buf.len() - r.pos) as u64 {
            return Err(CheckpointError::Malformed(format!("entry {name}: size {nbytes} does not match shape {shape:?}")));
        }
        let data = r.take(nbytes as usize, "entry data")?.to_vec();
        let crc = r.u32("entry checksum")?;
        if crc32fast::hash(&data) != crc {
            return Err(CheckpointError::Corrupt(name));
        }
        entries.push(CheckpointEntry { name, kind, shape, data });
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed("trailing bytes after last entry".into()));
    }
    Ok(WeightCheckpoint { version, part, arch_id, dtype, entries })
}

pub fn save_part<F: Element>(model: &ComposedModel<F>, part: Part, path: &Path) -> Result<WeightCheckpoint, CheckpointError> {
    let ck = WeightCheckpoint::from_model(model, part);
    fs::write(path, encode_checkpoint(&ck)).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    Ok(ck)
}

/// Load a checkpoint file into the matching part of `target`.
pub fn load_part<F: Element>(path: &Path, target: &mut ComposedModel<F>) -> Result<WeightCheckpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    let ck = decode_checkpoint(&bytes)?;
    ck.apply(target)?;
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_unet, UNetConfig};

    fn cfg() -> UNetConfig {
        UNetConfig { num_classes: 4, base_channels: 2, depth: 2, in_channels: 3 }
    }

    fn part_state(m: &ComposedModel<f32>, part: Part) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        m.visit_part(part, &mut |n, p| out.push((n.to_string(), p.value.clone())));
        out
    }

    #[test]
    fn backbone_round_trip_leaves_header_alone() {
        let dir = tempfile::tempdir().unwrap();
        let original = build_unet::<f32>(&cfg(), 1).unwrap();
        let path = dir.path().join(Part::Backbone.file_name());
        save_part(&original, Part::Backbone, &path).unwrap();
        let mut other = build_unet::<f32>(&cfg(), 2).unwrap();
        let header_before = part_state(&other, Part::Header);
        load_part(&path, &mut other).unwrap();
        assert_eq!(part_state(&other, Part::Backbone), part_state(&original, Part::Backbone));
        assert_eq!(part_state(&other, Part::Header), header_before);
        assert_ne!(part_state(&other, Part::Header), part_state(&original, Part::Header));
    }

    #[test]
    fn full_round_trip_restores_everything() {
        let dir = tempfile::tempdir().unwrap();
        let original = build_unet::<f32>(&cfg(), 5).unwrap();
        let path = dir.path().join("full.ckpt");
        save_part(&original, Part::Full, &path).unwrap();
        let mut other = build_unet::<f32>(&cfg(), 6).unwrap();
        load_part(&path, &mut other).unwrap();
        assert_eq!(other.state(), original.state());
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backbone.ckpt");
        save_part(&build_unet::<f32>(&cfg(), 1).unwrap(), Part::Backbone, &path).unwrap();
        let mut wider = build_unet::<f32>(&UNetConfig { base_channels: 4, ..cfg() }, 1).unwrap();
        assert!(matches!(load_part(&path, &mut wider), Err(CheckpointError::ArchitectureMismatch { .. })));
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let ck = WeightCheckpoint::from_model(&build_unet::<f64>(&cfg(), 1).unwrap(), Part::Header);
        let mut m = build_unet::<f32>(&cfg(), 1).unwrap();
        assert!(matches!(ck.apply(&mut m), Err(CheckpointError::DtypeMismatch { .. })));
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let ck = WeightCheckpoint::from_model(&build_unet::<f32>(&cfg(), 1).unwrap(), Part::Full);
        let bytes = encode_checkpoint(&ck);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ck);
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(decode_checkpoint(&flipped), Err(CheckpointError::Corrupt(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_checkpoint(&v2), Err(CheckpointError::UnsupportedVersion(2))));
        assert!(matches!(decode_checkpoint(b"nope"), Err(CheckpointError::BadMagic)));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 9]).is_err());
    }
}
