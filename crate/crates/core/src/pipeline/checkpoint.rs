//! Checkpoint directories: `meta.json` plus a binary tensor table.
//!
//! `tensors.bin` layout, all integers little-endian: magic `TSGN`, `u32`
//! version, `u32` tensor count, then per tensor `u32` name length, UTF-8
//! name, `u32` rank, `u64` per dimension, `u8` dtype (0 = f32, 1 = f64) and
//! the row-major data.

use std::fs;
use std::path::Path;

use lungsynth_autodiff::{Adam, ParamStore, Tensor};
use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::maskgan::{GanTrainState, MaskGanConfig};
use crate::phantomdata::{read_json, write_json};
use crate::translator::{TranslatorConfig, TranslatorState};

pub const MAGIC: &[u8; 4] = b"TSGN";
pub const TENSOR_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }
}

/// Serialises named tensors in order.
pub fn encode_tensors(tensors: &[(String, Tensor)], dtype: DType) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&TENSOR_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.push(dtype.code());
        for &v in t.iter() {
            match dtype {
                DType::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                DType::F64 => buf.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("tensor table truncated".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad tensor table magic".into()));
    }
    let version = r.u32()?;
    if version != TENSOR_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported tensor table version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor {name} has rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let dtype = r.take(1)?[0];
        let values: Vec<f64> = match dtype {
            0 => r
                .take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            1 => r
                .take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            other => return Err(Error::Format(format!("tensor {name} has unknown dtype {other}"))),
        };
        out.push((name, Tensor::from_shape_vec(IxDyn(&dims), values).expect("size checked")));
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after tensor table".into()));
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &[(String, Tensor)], dtype: DType) -> Result<()> {
    fs::write(path, encode_tensors(tensors, dtype)).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(&buf).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Format(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Format("rng seed must be 32 bytes".into()))?;
        let word_pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Format(format!("rng word position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Maskgan,
    Translator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub kind: CheckpointKind,
    pub step: u64,
    pub epoch: u64,
    pub gen_adam_step: u64,
    pub critic_adam_step: u64,
    pub rng: RngState,
    pub config_hash: String,
    pub config: serde_json::Value,
}

pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_string(cfg).expect("config serialises");
    hex::encode(Sha256::digest(json.as_bytes()))
}

fn push_store(out: &mut Vec<(String, Tensor)>, prefix: &str, store: &ParamStore) {
    for (name, t) in store.iter() {
        out.push((format!("{prefix}/{name}"), t.clone()));
    }
}

fn push_adam(out: &mut Vec<(String, Tensor)>, prefix: &str, adam: &Adam, store: &ParamStore) {
    for (i, (name, _)) in store.iter().enumerate() {
        out.push((format!("{prefix}.m/{name}"), adam.m[i].clone()));
        out.push((format!("{prefix}.v/{name}"), adam.v[i].clone()));
    }
}

struct Table(std::collections::HashMap<String, Tensor>);

impl Table {
    fn take(&mut self, name: &str, like: &Tensor) -> Result<Tensor> {
        let t = self
            .0
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
        if t.shape() != like.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                like.shape()
            )));
        }
        Ok(t)
    }

    fn fill_store(&mut self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            let t = self.take(&format!("{prefix}/{name}"), &store.values()[i])?;
            store.values_mut()[i] = t;
        }
        Ok(())
    }

    fn fill_adam(&mut self, prefix: &str, adam: &mut Adam, store: &ParamStore) -> Result<()> {
        for (i, (name, like)) in store.iter().enumerate() {
            adam.m[i] = self.take(&format!("{prefix}.m/{name}"), like)?;
            adam.v[i] = self.take(&format!("{prefix}.v/{name}"), like)?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if let Some(extra) = self.0.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }
}

fn write_checkpoint(dir: &Path, meta: &CheckpointMeta, tensors: &[(String, Tensor)]) -> Result<()> {
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    write_json(&tmp.join("meta.json"), meta)?;
    write_tensors(&tmp.join("tensors.bin"), tensors, DType::F64)?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

fn read_checkpoint(dir: &Path, kind: CheckpointKind) -> Result<(CheckpointMeta, Table)> {
    let meta: CheckpointMeta = read_json(&dir.join("meta.json"))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", meta.version)));
    }
    if meta.kind != kind {
        return Err(Error::Format(format!(
            "{} holds a {:?} checkpoint, expected {kind:?}",
            dir.display(),
            meta.kind
        )));
    }
    let table = Table(read_tensors(&dir.join("tensors.bin"))?.into_iter().collect());
    Ok((meta, table))
}

pub fn save_maskgan(dir: &Path, state: &GanTrainState) -> Result<()> {
    let mut t = Vec::new();
    push_store(&mut t, "gen", &state.gen_params);
    push_store(&mut t, "gen_buffers", &state.gen_buffers);
    push_store(&mut t, "critic", &state.critic_params);
    push_adam(&mut t, "gen_opt", &state.gen_opt, &state.gen_params);
    push_adam(&mut t, "critic_opt", &state.critic_opt, &state.critic_params);
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        kind: CheckpointKind::Maskgan,
        step: state.step,
        epoch: 0,
        gen_adam_step: state.gen_opt.step,
        critic_adam_step: state.critic_opt.step,
        rng: RngState::capture(&state.rng),
        config_hash: config_hash(&state.cfg),
        config: serde_json::to_value(&state.cfg).expect("config serialises"),
    };
    write_checkpoint(dir, &meta, &t)
}

pub fn load_maskgan(dir: &Path) -> Result<GanTrainState> {
    let (meta, mut table) = read_checkpoint(dir, CheckpointKind::Maskgan)?;
    let cfg: MaskGanConfig =
        serde_json::from_value(meta.config.clone()).map_err(|e| Error::Format(format!("mask GAN config: {e}")))?;
    if config_hash(&cfg) != meta.config_hash {
        return Err(Error::Format("config hash mismatch".into()));
    }
    let mut state = GanTrainState::new(&cfg, 0)?;
    table.fill_store("gen", &mut state.gen_params)?;
    table.fill_store("gen_buffers", &mut state.gen_buffers)?;
    table.fill_store("critic", &mut state.critic_params)?;
    table.fill_adam("gen_opt", &mut state.gen_opt, &state.gen_params)?;
    table.fill_adam("critic_opt", &mut state.critic_opt, &state.critic_params)?;
    table.finish()?;
    state.gen_opt.step = meta.gen_adam_step;
    state.critic_opt.step = meta.critic_adam_step;
    state.step = meta.step;
    state.rng = meta.rng.restore()?;
    Ok(state)
}

pub fn save_translator(dir: &Path, state: &TranslatorState, epoch: u64) -> Result<()> {
    let mut t = Vec::new();
    push_store(&mut t, "gen", &state.gen_params);
    push_store(&mut t, "critic", &state.critic_params);
    push_adam(&mut t, "gen_opt", &state.gen_opt, &state.gen_params);
    push_adam(&mut t, "critic_opt", &state.critic_opt, &state.critic_params);
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        kind: CheckpointKind::Translator,
        step: state.step,
        epoch,
        gen_adam_step: state.gen_opt.step,
        critic_adam_step: state.critic_opt.step,
        rng: RngState::capture(&state.rng),
        config_hash: config_hash(&state.cfg),
        config: serde_json::to_value(&state.cfg).expect("config serialises"),
    };
    write_checkpoint(dir, &meta, &t)
}

pub fn load_translator(dir: &Path) -> Result<TranslatorState> {
    let (meta, mut table) = read_checkpoint(dir, CheckpointKind::Translator)?;
    let cfg: TranslatorConfig =
        serde_json::from_value(meta.config.clone()).map_err(|e| Error::Format(format!("translator config: {e}")))?;
    if config_hash(&cfg) != meta.config_hash {
        return Err(Error::Format("config hash mismatch".into()));
    }
    let mut state = TranslatorState::new(&cfg, 0)?;
    table.fill_store("gen", &mut state.gen_params)?;
    table.fill_store("critic", &mut state.critic_params)?;
    table.fill_adam("gen_opt", &mut state.gen_opt, &state.gen_params)?;
    table.fill_adam("critic_opt", &mut state.critic_opt, &state.critic_params)?;
    table.finish()?;
    state.gen_opt.step = meta.gen_adam_step;
    state.critic_opt.step = meta.critic_adam_step;
    state.step = meta.step;
    state.rng = meta.rng.restore()?;
    Ok(state)
}
