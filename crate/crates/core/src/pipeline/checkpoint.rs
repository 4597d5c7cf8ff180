//! Versioned binary checkpoints.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic "VKDCKPT\0" | u32 format version
//! u64 config length | canonical TOML config
//! u64 completed steps
//! generator: 32-byte seed | u64 stream | u128 word position
//! u64 tensor count, then per tensor:
//!     u32 name length | name | u8 dtype tag (1 = f64) | u8 frozen | u8 decay
//!     u32 rank | rank x u64 dims | numel x f64
//! u64 moment count, then per entry:
//!     u32 name length | name | u64 updates | u64 numel | numel x f64 (m) | numel x f64 (v)
//! 32-byte SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Result, VkdError};
use crate::model::Model;
use crate::pipeline::optim::{AdamW, Moments};
use crate::pipeline::train::TrainState;

pub const MAGIC: &[u8; 8] = b"VKDCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn name(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| VkdError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).ok().filter(|&n| n <= self.buf.len()).ok_or_else(|| VkdError::Checkpoint(format!("implausible length {}", n)))
    }
    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| VkdError::Checkpoint("name is not UTF-8".into()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| VkdError::Checkpoint("overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect())
    }
}

/// Serializes a training state.
pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.bytes(MAGIC);
    w.u32(FORMAT_VERSION);
    let cfg = state.model.cfg.to_toml();
    w.u64(cfg.len() as u64);
    w.bytes(cfg.as_bytes());
    w.u64(state.step);
    w.bytes(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.bytes(&state.rng.get_word_pos().to_le_bytes());
    let ps = &state.model.params;
    w.u64(ps.len() as u64);
    for (_, p) in ps.iter() {
        w.name(&p.name);
        w.u8(DTYPE_F64);
        w.u8(p.frozen as u8);
        w.u8(p.decay as u8);
        w.u32(p.value.rank() as u32);
        for &d in p.value.shape() {
            w.u64(d as u64);
        }
        w.f64s(p.value.data());
    }
    let entries: Vec<(&str, &Moments)> = ps
        .iter()
        .zip(&state.opt.moments)
        .filter_map(|((_, p), m)| m.as_ref().map(|m| (p.name.as_str(), m)))
        .collect();
    w.u64(entries.len() as u64);
    for (name, m) in entries {
        w.name(name);
        w.u64(m.step);
        w.u64(m.m.len() as u64);
        w.f64s(&m.m);
        w.f64s(&m.v);
    }
    let digest = Sha256::digest(&w.0);
    w.bytes(&digest);
    w.0
}

/// Parses a checkpoint. With `requested`, the stored architecture must match
/// it field by field; the requested training settings then replace the
/// stored ones, while the stored prompts are kept.
pub fn decode_checkpoint(bytes: &[u8], requested: Option<&ModelConfig>) -> Result<TrainState> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(VkdError::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(VkdError::Integrity("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(VkdError::Checkpoint(format!(
            "format version {} is not supported (this build reads version {})",
            version, FORMAT_VERSION
        )));
    }
    let n = r.len()?;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| VkdError::Checkpoint("config is not UTF-8".into()))?;
    let stored = ModelConfig::from_toml(text)?;
    let cfg = match requested {
        Some(req) => {
            req.check_compatible(&stored)?;
            ModelConfig {
                caption_prompt: stored.caption_prompt.clone(),
                reconstruction_prompt: stored.reconstruction_prompt.clone(),
                ..req.clone()
            }
        }
        None => stored,
    };
    let step = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let mut model = Model::new(&cfg)?;
    let count = r.len()?;
    if count != model.params.len() {
        return Err(VkdError::Checkpoint(format!("{} tensors stored, model has {}", count, model.params.len())));
    }
    for _ in 0..count {
        let name = r.name()?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(VkdError::Checkpoint(format!("{}: unknown dtype tag {}", name, dtype)));
        }
        let frozen = r.u8()? != 0;
        let decay = r.u8()? != 0;
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.len()).collect::<Result<_>>()?;
        let id = model.params.id(&name).ok_or_else(|| VkdError::Checkpoint(format!("unknown tensor {}", name)))?;
        let p = model.params.param(id);
        if p.value.shape() != shape.as_slice() || p.frozen != frozen || p.decay != decay {
            return Err(VkdError::Checkpoint(format!(
                "{}: stored {:?} frozen={} decay={}, model expects {:?} frozen={} decay={}",
                name,
                shape,
                frozen,
                decay,
                p.value.shape(),
                p.frozen,
                p.decay
            )));
        }
        let data = r.f64s(shape.iter().product())?;
        model.params.set(id, data)?;
    }
    let mut opt = AdamW::new(&model.params);
    let entries = r.len()?;
    for _ in 0..entries {
        let name = r.name()?;
        let updates = r.u64()?;
        let n = r.len()?;
        let id = model.params.id(&name).ok_or_else(|| VkdError::Checkpoint(format!("moments for unknown tensor {}", name)))?;
        if model.params.get(id).numel() != n {
            return Err(VkdError::Checkpoint(format!("{}: moment size {} mismatches", name, n)));
        }
        let m = r.f64s(n)?;
        let v = r.f64s(n)?;
        opt.moments[id.0] = Some(Moments { step: updates, m, v });
    }
    if r.pos != body.len() {
        return Err(VkdError::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(TrainState { model, opt, step, rng })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| VkdError::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| VkdError::io(format!("renaming to {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path, requested: Option<&ModelConfig>) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| VkdError::io(format!("reading {}", path.display()), e))?;
    decode_checkpoint(&bytes, requested)
}
