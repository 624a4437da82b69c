//! Binary checkpoints of encoder parameters.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "UICLAB01"  magic
//! u32         format version
//! u32, bytes  encoder config as JSON
//! u64         k
//! u64         epoch
//! u32         tensor count
//! per tensor: u32 name length, name (UTF-8), u32 rank, u64 × rank dims,
//!             f64 × product(dims) values
//! ```
//!
//! Only parameter values are stored; momentum buffers start at zero after
//! loading.

use std::path::Path;

use crate::encoder::{EncoderConfig, EncoderState};
use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"UICLAB01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub encoder: EncoderState,
    pub epoch: usize,
}

pub fn encode_checkpoint(state: &EncoderState, epoch: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(state.config()).map_err(|e| Error::Internal(e.to_string()))?;
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(state.config().num_classes as u64).to_le_bytes());
    out.extend_from_slice(&(epoch as u64).to_le_bytes());
    out.extend_from_slice(&(state.params().len() as u32).to_le_bytes());
    for p in state.params().iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Write atomically: the file appears complete or not at all.
pub fn save_checkpoint(state: &EncoderState, epoch: usize, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state, epoch)?;
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.pos as u64,
                format!("truncated checkpoint while reading {what}"),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Parameters and header of a checkpoint, without checking them against any
/// encoder layout.
pub fn decode_raw(bytes: &[u8]) -> Result<(EncoderConfig, usize, ParamSet)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::format(0, "not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            8,
            format!("unsupported checkpoint version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let len = r.u32("config length")? as usize;
    let at = r.pos as u64;
    let config: EncoderConfig = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| Error::format(at, format!("bad encoder config: {e}")))?;
    let k = r.u64("k")? as usize;
    if k != config.num_classes {
        return Err(Error::format(
            r.pos as u64 - 8,
            format!(
                "header k = {k} but config has {} classes",
                config.num_classes
            ),
        ));
    }
    let epoch = r.u64("epoch")? as usize;
    let count = r.u32("tensor count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let at = r.pos as u64;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u64("dims")? as usize);
        }
        let at = r.pos as u64;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && n.checked_mul(8).is_some())
            .ok_or_else(|| Error::format(at, format!("tensor {name:?} has bad dims {dims:?}")))?;
        let raw = r.take(numel * 8, &format!("tensor {name:?}"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params
            .insert(name, Tensor::from_vec(&dims, data)?)
            .map_err(|e| Error::format(at, e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos as u64,
            "trailing bytes after last tensor",
        ));
    }
    Ok((config, epoch, params))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (config, epoch, params) = decode_raw(bytes)?;
    Ok(Checkpoint {
        encoder: EncoderState::from_params(config, params)?,
        epoch,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Load stored parameters into the layout of `expected`. A tensor whose
/// name or shape differs is reported by name.
pub fn load_checkpoint_as(path: &Path, expected: &EncoderConfig) -> Result<EncoderState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, _, params) = decode_raw(&bytes)?;
    EncoderState::from_params(expected.clone(), params)
}
