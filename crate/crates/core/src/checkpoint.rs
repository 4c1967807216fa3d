//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "SNTLCKPT"
//! version    u32      currently 1
//! config     u32 length + UTF-8 JSON of ModelConfig
//! count      u32      number of parameters
//! per parameter:
//!   name     u32 length + UTF-8
//!   ndim     u32
//!   dims     ndim x u64
//!   data     numel x f64
//! crc32      u32      over every preceding byte
//! ```
//!
//! Parameters are written in [`SentinelModel::named_params`] order, so the
//! same model always produces the same bytes.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::Module;
use crate::model::{ModelConfig, SentinelModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SNTLCKPT";
pub const VERSION: u32 = 1;

pub fn to_bytes(model: &SentinelModel) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(&model.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    put_u32(&mut buf, config.len())?;
    buf.extend_from_slice(&config);
    let params = model.named_params();
    put_u32(&mut buf, params.len())?;
    for (name, t) in &params {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.ndim())?;
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

fn put_u32(buf: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))?;
    buf.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let b = self.take(8, what)?;
        usize::try_from(u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .map_err(|_| Error::Checkpoint(format!("{what} does not fit in usize")))
    }
}

/// Raw contents of a checkpoint before they are bound to a model.
#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub config: ModelConfig,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

pub fn parse(bytes: &[u8]) -> Result<CheckpointData> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Checkpoint("file too short to be a checkpoint".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    if &body[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a sentinel checkpoint".into()));
    }
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch (stored {stored:08x}, computed {actual:08x})"
        )));
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let clen = r.u32("config length")?;
    let config: ModelConfig = serde_json::from_slice(r.take(clen, "config")?)
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let count = r.u32("parameter count")?;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(nlen, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32("ndim")?;
        let dims = (0..ndim).map(|_| r.u64("dims")).collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("'{name}': dims overflow")))?;
        let raw = r.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::Checkpoint(format!("'{name}': size overflow")))?,
            "data",
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push((name, dims, data));
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(CheckpointData { config, params })
}

/// Rebuilds the model from the stored config and binds every parameter by
/// name, checking shapes.
pub fn from_bytes(bytes: &[u8]) -> Result<SentinelModel> {
    let ck = parse(bytes)?;
    let mut model = SentinelModel::new(ck.config.clone(), 0)?;
    load_params(&mut model, ck.params)?;
    Ok(model)
}

/// Overwrites the parameters of `model` with the named arrays. Every model
/// parameter must be present exactly once, with a matching shape.
pub fn load_params(model: &mut SentinelModel, params: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<()> {
    let mut by_name: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    for (name, dims, data) in params {
        if by_name.insert(name.clone(), (dims, data)).is_some() {
            return Err(Error::Checkpoint(format!("parameter '{name}' appears twice")));
        }
    }
    let mut failure: Option<Error> = None;
    model.visit_mut("", &mut |name, p| {
        if failure.is_some() {
            return;
        }
        match by_name.remove(name) {
            None => failure = Some(Error::Checkpoint(format!("missing parameter '{name}'"))),
            Some((dims, _)) if dims != p.shape() => {
                failure = Some(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {dims:?}, model expects {:?}",
                    p.shape()
                )))
            }
            Some((dims, data)) => match Tensor::param(&dims, data) {
                Ok(t) => *p = t,
                Err(e) => failure = Some(e),
            },
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = by_name.keys().min() {
        return Err(Error::Checkpoint(format!("unexpected parameter '{extra}'")));
    }
    Ok(())
}

pub fn save(model: &SentinelModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<SentinelModel> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
