//! Binary checkpoint files.
//!
//! Parameters (`PWCK`): magic, `u32` format version, `u32` array count, then per
//! array a `u32` name length, the UTF-8 name, `u32` rank, `u32` dims, the
//! little-endian f32 data and one frozen-flag byte.
//!
//! Optimizer state (`PWOS`, written next to a parameter checkpoint so a run
//! can resume exactly): magic, `u32` version, `u64` step, `u64` parameter
//! version, `u32` array count, then per array a `u32` length and f64 first
//! and second moments.

use std::path::{Path, PathBuf};

use crate::binio::{write_atomic, Reader, Writer};
use crate::denoiser::{DenoiserParams, ParamArray};
use crate::error::{Error, Result};

const PARAMS_MAGIC: &[u8; 4] = b"PWCK";
const STATE_MAGIC: &[u8; 4] = b"PWOS";
const FORMAT_VERSION: u32 = 1;

pub fn encode_params(params: &DenoiserParams) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(PARAMS_MAGIC);
    w.u32(FORMAT_VERSION);
    w.len_u32(params.arrays.len())?;
    for a in &params.arrays {
        w.len_u32(a.name.len())?;
        w.bytes(a.name.as_bytes());
        w.len_u32(a.shape.len())?;
        for &d in &a.shape {
            w.len_u32(d)?;
        }
        for &v in &a.data {
            w.f32(v as f32);
        }
        w.u8(a.frozen as u8);
    }
    Ok(w.buf)
}

pub fn decode_params(bytes: &[u8], path: &Path) -> Result<DenoiserParams> {
    let mut r = Reader::new(bytes, path);
    r.magic(PARAMS_MAGIC)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| r.err("array name is not UTF-8"))?.to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| r.err("shape overflow"))?;
        let data = r.f32s(len)?;
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(r.err(format!("frozen flag byte {b} for array {name}"))),
        };
        arrays.push(ParamArray { name, shape, data, frozen });
    }
    r.finish()?;
    DenoiserParams::from_arrays(arrays).map_err(|e| r.err(e.to_string()))
}

pub fn save_params(params: &DenoiserParams, path: &Path) -> Result<()> {
    write_atomic(path, &encode_params(params)?)
}

pub fn load_params(path: &Path) -> Result<DenoiserParams> {
    let bytes = std::fs::read(path)?;
    decode_params(&bytes, path)
}

/// Adam moments and counters, aligned with the parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &DenoiserParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.arrays.iter().map(|a| vec![0.0; a.data.len()]).collect();
        OptimizerState { step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn matches(&self, params: &DenoiserParams) -> bool {
        self.m.len() == params.arrays.len()
            && self.v.len() == params.arrays.len()
            && params.arrays.iter().zip(&self.m).zip(&self.v).all(|((a, m), v)| a.data.len() == m.len() && m.len() == v.len())
    }
}

/// Path of the optimizer sidecar belonging to a parameter checkpoint.
pub fn state_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".opt");
    PathBuf::from(s)
}

pub fn save_state(state: &OptimizerState, param_version: u64, path: &Path) -> Result<()> {
    let mut w = Writer::default();
    w.bytes(STATE_MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(state.step);
    w.u64(param_version);
    w.len_u32(state.m.len())?;
    for (m, v) in state.m.iter().zip(&state.v) {
        w.len_u32(m.len())?;
        m.iter().chain(v).for_each(|&x| w.f64(x));
    }
    write_atomic(path, &w.buf)
}

/// Returns the optimizer state and the parameter version it was saved with.
pub fn load_state(path: &Path) -> Result<(OptimizerState, u64)> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes, path);
    r.magic(STATE_MAGIC)?;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(r.err(format!("unsupported optimizer-state version {version}")));
    }
    let step = r.u64()?;
    let param_version = r.u64()?;
    let count = r.u32()? as usize;
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for _ in 0..count {
        let n = r.u32()? as usize;
        m.push(r.f64s(n)?);
        v.push(r.f64s(n)?);
    }
    r.finish()?;
    Ok((OptimizerState { step, m, v }, param_version))
}

/// Loads parameters and, when present, the optimizer sidecar.
pub fn load_training_state(path: &Path) -> Result<(DenoiserParams, Option<OptimizerState>)> {
    let mut params = load_params(path)?;
    let sidecar = state_path(path);
    if !sidecar.exists() {
        return Ok((params, None));
    }
    let (state, version) = load_state(&sidecar)?;
    if !state.matches(&params) {
        return Err(Error::Format { path: sidecar.display().to_string(), reason: "optimizer state does not match checkpoint".into() });
    }
    params.version = version;
    Ok((params, Some(state)))
}
