//! Binary checkpoint: `DLPR`, version (u16 LE), a u32-length-prefixed UTF-8
//! text block holding the spec and `meta.*` keys, then one record per
//! parameter (rank u8, u32 LE extents, f32 LE values) until end of file.

use std::path::Path;

use super::model::{check_against, Model};
use super::spec::NetworkSpec;
use crate::autodiff::Tensor;
use crate::config::KeyValues;
use crate::error::{invalid, Error, Result};
use crate::image::write_file;

pub const MAGIC: [u8; 4] = *b"DLPR";
pub const VERSION: u16 = 1;

/// Training provenance stored next to the parameters.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    pub optics_digest: String,
}

pub fn encode_checkpoint(model: &Model, meta: &CheckpointMeta) -> Vec<u8> {
    let mut kv = model.spec().to_kv();
    kv.set("meta.epoch", meta.epoch);
    kv.set("meta.seed", meta.seed);
    kv.set("meta.optics_digest", &meta.optics_digest);
    let text = kv.render();

    let mut out = Vec::with_capacity(16 + text.len() + 4 * model.parameter_count() + 16 * model.parameters().len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for t in model.parameters() {
        out.push(t.shape().len() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    write_file(path, &encode_checkpoint(model, meta))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{what}: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found: magic });
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Version { expected: VERSION, found: version });
    }
    let len = r.u32("header length")? as usize;
    let text = std::str::from_utf8(r.take(len, "header")?)
        .map_err(|e| Error::Parse(format!("checkpoint header is not UTF-8: {e}")))?;
    let kv = KeyValues::parse(text)?;
    let meta_kv = kv.section("meta");
    let mut spec_kv = KeyValues::new();
    for (k, v) in kv.iter().filter(|(k, _)| !k.starts_with("meta.")) {
        spec_kv.set(k, v);
    }
    let spec = NetworkSpec::from_kv(&spec_kv)?;
    let meta = CheckpointMeta {
        epoch: meta_kv.get_or("epoch", 0)?,
        seed: meta_kv.get_or("seed", 0)?,
        optics_digest: meta_kv.get("optics_digest").unwrap_or_default().to_string(),
    };

    let expected = super::model::parameter_shapes(&spec)?;
    let mut params = Vec::with_capacity(expected.len());
    for (index, (name, shape)) in expected.iter().enumerate() {
        if r.at_end() {
            return Err(Error::Truncated(format!("file ends after {index} of {} tensors", expected.len())));
        }
        let what = format!("tensor {index} ({name})");
        let rank = r.take(1, &what)?[0] as usize;
        let found = (0..rank).map(|_| r.u32(&what).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        if &found != shape {
            return Err(Error::TensorMismatch { index, name: name.clone(), expected: shape.clone(), found });
        }
        let n: usize = found.iter().product();
        let raw = r.take(4 * n, &what)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        params.push(Tensor::new(found, data)?);
    }
    if !r.at_end() {
        return Err(Error::Parse(format!(
            "{} trailing bytes after the last of {} tensors",
            bytes.len() - r.pos,
            expected.len()
        )));
    }
    Ok((Model::from_parameters(&spec, params)?, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Load and insist the stored spec equals `expected`.
///
/// Shape differences name the first mismatching tensor; specs that differ
/// only in shape-preserving fields (dilations, head) name the keys.
pub fn load_checkpoint_expecting(path: &Path, expected: &NetworkSpec) -> Result<(Model, CheckpointMeta)> {
    let (model, meta) = load_checkpoint(path)?;
    if model.spec() != expected {
        let shapes: Vec<Vec<usize>> = model.parameters().iter().map(|t| t.shape().to_vec()).collect();
        check_against(expected, &shapes)?;
        let (a, b) = (model.spec().to_kv(), expected.to_kv());
        let keys: Vec<&str> = a.iter().filter(|(k, v)| b.get(k) != Some(*v)).map(|(k, _)| k).collect();
        return Err(invalid!("checkpoint spec differs from the expected spec in {}", keys.join(", ")));
    }
    Ok((model, meta))
}
