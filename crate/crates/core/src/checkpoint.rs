//! Single-file binary checkpoints.
//!
//! Layout (little endian): magic `PMADCKPT`, `u32` version, then the config as
//! canonical TOML, corpus fingerprint, backbone digest, epoch and step
//! counters, the frozen class prompts, and every tensor sorted by name. A
//! trailing sha256 covers all preceding bytes. Strings and arrays are
//! length-prefixed.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{ClassPrompt, PromptMad};

pub const MAGIC: &[u8; 8] = b"PMADCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: Config,
    pub fingerprint: String,
    pub backbone_digest: String,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub prompts: BTreeMap<String, ClassPrompt>,
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
    pub adam_m: BTreeMap<String, Tensor>,
    pub adam_v: BTreeMap<String, Tensor>,
}

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
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    /// dtype tag then raw values.
    fn tensor_data(&mut self, t: &Tensor) -> Result<()> {
        let t = t.flatten_all()?;
        if t.dtype() == DType::F64 {
            self.u8(1);
            for x in t.to_vec1::<f64>()? {
                self.0.extend_from_slice(&x.to_le_bytes());
            }
        } else {
            self.u8(0);
            for x in t.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                self.0.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint(format!("unexpected end of data at byte {}", self.pos)));
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
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > self.buf.len() {
            return Err(Error::CorruptCheckpoint(format!("length {n} exceeds file size")));
        }
        Ok(n)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CorruptCheckpoint("invalid utf-8".into()))
    }
    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.len()?;
        Ok(self.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn write_map(w: &mut Writer, tag: &str, map: &BTreeMap<String, Tensor>) -> Result<()> {
    w.u64(map.len() as u64);
    for (name, t) in map {
        w.str(&format!("{tag}/{name}"));
        w.u32(t.rank() as u32);
        for &d in t.dims() {
            w.u64(d as u64);
        }
        w.tensor_data(t)?;
    }
    Ok(())
}

fn read_map(r: &mut Reader, tag: &str) -> Result<BTreeMap<String, Tensor>> {
    let n = r.len()?;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let full = r.str()?;
        let name = full
            .strip_prefix(&format!("{tag}/"))
            .ok_or_else(|| Error::CorruptCheckpoint(format!("tensor `{full}` outside section {tag}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let kind = r.u8()?;
        let count: usize = dims.iter().product();
        let t = match kind {
            0 => {
                let raw = r.take(4 * count)?;
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, dims.as_slice(), &Device::Cpu)?
            }
            1 => {
                let raw = r.take(8 * count)?;
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, dims.as_slice(), &Device::Cpu)?
            }
            k => return Err(Error::CorruptCheckpoint(format!("unknown dtype tag {k}"))),
        };
        out.insert(name, t);
    }
    Ok(out)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.config.to_toml());
        w.str(&self.fingerprint);
        w.str(&self.backbone_digest);
        w.u64(self.epoch as u64);
        w.u64(self.step);
        w.u64(self.prompts.len() as u64);
        for (class, p) in &self.prompts {
            w.str(class);
            w.f32s(&p.image);
            w.f32s(&p.pooled_text);
        }
        write_map(&mut w, "param", &self.params)?;
        write_map(&mut w, "buffer", &self.buffers)?;
        write_map(&mut w, "adam_m", &self.adam_m)?;
        write_map(&mut w, "adam_v", &self.adam_v)?;
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        Ok(w.0)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 4 + 32 || &buf[..8] != MAGIC {
            return Err(Error::CorruptCheckpoint("not a checkpoint file (bad magic or too short)".into()));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::CorruptCheckpoint("checksum mismatch (truncated or modified file)".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch { found: version, expected: VERSION });
        }
        let config = Config::from_toml_str(&r.str()?)
            .map_err(|e| Error::CorruptCheckpoint(format!("embedded config does not parse: {e}")))?;
        let fingerprint = r.str()?;
        let backbone_digest = r.str()?;
        let epoch = r.u64()? as usize;
        let step = r.u64()?;
        let n = r.len()?;
        let mut prompts = BTreeMap::new();
        for _ in 0..n {
            let class = r.str()?;
            let image = r.f32s()?;
            let pooled_text = r.f32s()?;
            prompts.insert(class, ClassPrompt { image, pooled_text });
        }
        let params = read_map(&mut r, "param")?;
        let buffers = read_map(&mut r, "buffer")?;
        let adam_m = read_map(&mut r, "adam_m")?;
        let adam_v = read_map(&mut r, "adam_v")?;
        if r.pos != body.len() {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { config, fingerprint, backbone_digest, epoch, step, prompts, params, buffers, adam_m, adam_v })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn dtype(&self) -> DType {
        self.params.values().next().map(|t| t.dtype()).unwrap_or(DType::F32)
    }

    /// Rebuilds the model and restores every parameter and buffer.
    pub fn to_model(&self) -> Result<PromptMad> {
        let model = PromptMad::new(&self.config, self.prompts.clone(), self.dtype())?;
        let digest = model.backbone().digest()?;
        if digest != self.backbone_digest {
            return Err(Error::CheckpointIncompatible(format!(
                "backbone weights differ from the ones used in training ({} vs {})",
                &digest[..12],
                &self.backbone_digest[..self.backbone_digest.len().min(12)]
            )));
        }
        model.load_tensors(&self.params, &self.buffers)?;
        Ok(model)
    }
}

/// Reads a checkpoint; with `expected_fingerprint`, also requires it was trained on that corpus.
pub fn load_checkpoint(path: &Path, expected_fingerprint: Option<&str>) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = Checkpoint::from_bytes(&buf)?;
    if let Some(fp) = expected_fingerprint {
        if fp != ck.fingerprint {
            return Err(Error::FingerprintMismatch { expected: ck.fingerprint.clone(), found: fp.to_string() });
        }
    }
    Ok(ck)
}
