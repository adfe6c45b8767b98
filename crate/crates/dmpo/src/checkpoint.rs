//! Single-file binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//! magic `DMPC`, format version u32, backend tag u8, backend shape fields
//! (u64 each), parameter count u64 + f64 array, optimizer-present u8
//! (+ step count u64, first/second moment arrays), training step u64, RNG
//! state (32-byte seed, u128 word position, u64 stream). The loader rejects
//! unknown magic or version.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::policy::{PolicyParams, ShapeMeta, TabularShape, TinyNetShape};
use crate::rng::RngState;
use crate::trainer::AdamState;

const MAGIC: &[u8; 4] = b"DMPC";
pub const FORMAT_VERSION: u32 = 1;

const BACKEND_TABULAR: u8 = 0;
const BACKEND_TINYNET: u8 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub optimizer: Option<AdamState>,
    pub step: u64,
    pub rng: RngState,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, x: u8) {
        self.buf.push(x);
    }
    fn u32(&mut self, x: u32) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }
    fn u128(&mut self, x: u128) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        self.u64(xs.len() as u64);
        for x in xs {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > (1 << 32) {
            return Err(Error::Checkpoint("implausible array length".into()));
        }
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    match &ckpt.params.shape {
        ShapeMeta::Tabular(s) => {
            w.u8(BACKEND_TABULAR);
            w.u64(s.num_prompts as u64);
            w.u64(s.response_len as u64);
            w.u64(s.vocab_size as u64);
        }
        ShapeMeta::TinyNet(s) => {
            w.u8(BACKEND_TINYNET);
            w.u64(s.vocab_size as u64);
            w.u64(s.response_len as u64);
            w.u64(s.prompt_len as u64);
            w.u64(s.embed_dim as u64);
            w.u64(s.hidden_dim as u64);
        }
    }
    w.f64s(&ckpt.params.flat);
    match &ckpt.optimizer {
        Some(opt) => {
            w.u8(1);
            w.u64(opt.t);
            w.f64s(&opt.m);
            w.f64s(&opt.v);
        }
        None => w.u8(0),
    }
    w.u64(ckpt.step);
    w.buf.extend_from_slice(&ckpt.rng.seed);
    w.u128(ckpt.rng.word_pos);
    w.u64(ckpt.rng.stream);
    w.buf
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a policy checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} does not match supported {FORMAT_VERSION}"
        )));
    }
    let shape = match r.u8()? {
        BACKEND_TABULAR => ShapeMeta::Tabular(TabularShape {
            num_prompts: r.u64()? as usize,
            response_len: r.u64()? as usize,
            vocab_size: r.u64()? as u16,
        }),
        BACKEND_TINYNET => ShapeMeta::TinyNet(TinyNetShape {
            vocab_size: r.u64()? as u16,
            response_len: r.u64()? as usize,
            prompt_len: r.u64()? as usize,
            embed_dim: r.u64()? as usize,
            hidden_dim: r.u64()? as usize,
        }),
        other => {
            return Err(Error::Checkpoint(format!("unknown backend tag {other}")));
        }
    };
    let flat = r.f64s()?;
    let params = PolicyParams::new(flat, shape)
        .map_err(|e| Error::Checkpoint(format!("shape/parameter mismatch: {e}")))?;
    params
        .validate_finite()
        .map_err(|e| Error::Checkpoint(format!("{e}")))?;
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let t = r.u64()?;
            let m = r.f64s()?;
            let v = r.f64s()?;
            if m.len() != params.flat.len() || v.len() != params.flat.len() {
                return Err(Error::Checkpoint("optimizer state length mismatch".into()));
            }
            Some(AdamState { m, v, t })
        }
        other => {
            return Err(Error::Checkpoint(format!(
                "bad optimizer-present flag {other}"
            )));
        }
    };
    let step = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let word_pos = r.u128()?;
    let stream = r.u64()?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint {
        params,
        optimizer,
        step,
        rng: RngState {
            seed,
            word_pos,
            stream,
        },
    })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode(ckpt))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}
