use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use crate::autograd::Tensor;
use crate::dataio::SamplerState;
use crate::model::{ModelConfig, Params};
use crate::optim::{Adam, AdamConfig};
use crate::{Error, Result};

pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIM_FILE: &str = "optim.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
const PARAMS_MAGIC: &[u8; 4] = b"STP1";
const OPTIM_MAGIC: &[u8; 4] = b"STO1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngStates {
    pub sampler: SamplerState,
    pub augment: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub config_hash: String,
    pub seed: u64,
    pub rng_states: RngStates,
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
    pub lr: f64,
    /// Mean training loss of every completed epoch.
    pub loss_history: Vec<f64>,
    pub params_sha256: String,
    pub optim_sha256: String,
    pub code_version: String,
    pub deterministic: bool,
    pub config: TrainConfig,
    /// Effective model configuration, including derived fields.
    pub model: ModelConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Params,
    pub optim: Adam,
    pub manifest: Manifest,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn encode_tensors(out: &mut Vec<u8>, tensors: &BTreeMap<String, Tensor>) {
    put_u32(out, tensors.len());
    for (name, t) in tensors {
        put_u32(out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.ndim());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("{} is truncated", self.what)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn tensors(&mut self) -> Result<BTreeMap<String, Tensor>> {
        let n = self.u32()?;
        let mut out = BTreeMap::new();
        for _ in 0..n {
            let len = self.u32()?;
            let name = String::from_utf8(self.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint(format!("{} has a non-UTF-8 tensor name", self.what)))?;
            let ndim = self.u32()?;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(self.u64()? as usize);
            }
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(self.f64()?);
            }
            let t = Tensor::from_shape_vec(IxDyn(&shape), data).expect("count matches shape");
            out.insert(name, t);
        }
        Ok(out)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint(format!("{} has trailing bytes", self.what)));
        }
        Ok(())
    }
}

fn check_magic(r: &mut Reader<'_>, magic: &[u8; 4]) -> Result<()> {
    if r.take(4)? != magic {
        return Err(Error::Checkpoint(format!("{} has a bad magic number", r.what)));
    }
    Ok(())
}

pub fn encode_params(params: &Params) -> Vec<u8> {
    let mut out = PARAMS_MAGIC.to_vec();
    encode_tensors(&mut out, &params.tensors);
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<Params> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        what: PARAMS_FILE,
    };
    check_magic(&mut r, PARAMS_MAGIC)?;
    let tensors = r.tensors()?;
    r.finish()?;
    Ok(Params { tensors })
}

pub fn encode_optim(opt: &Adam) -> Vec<u8> {
    let mut out = OPTIM_MAGIC.to_vec();
    out.extend_from_slice(&opt.step.to_le_bytes());
    for v in [opt.config.beta1, opt.config.beta2, opt.config.eps] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    encode_tensors(&mut out, &opt.m);
    encode_tensors(&mut out, &opt.v);
    out
}

pub fn decode_optim(bytes: &[u8]) -> Result<Adam> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        what: OPTIM_FILE,
    };
    check_magic(&mut r, OPTIM_MAGIC)?;
    let step = r.u64()?;
    let config = AdamConfig {
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
    };
    let m = r.tensors()?;
    let v = r.tensors()?;
    r.finish()?;
    Ok(Adam { config, step, m, v })
}

fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the checkpoint to a sibling directory first and swaps it in, so a
/// crash never leaves a half-written checkpoint under `dir`.
pub fn save_checkpoint(dir: &Path, params: &Params, optim: &Adam, manifest: &Manifest) -> Result<()> {
    let params_bytes = encode_params(params);
    let optim_bytes = encode_optim(optim);
    let manifest = Manifest {
        params_sha256: sha256(&params_bytes),
        optim_sha256: sha256(&optim_bytes),
        ..manifest.clone()
    };
    let staging = staging_dir(dir);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    let write = |name: &str, bytes: &[u8]| {
        let p = staging.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(p, e))
    };
    write(PARAMS_FILE, &params_bytes)?;
    write(OPTIM_FILE, &optim_bytes)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(MANIFEST_FILE, e))?;
    write(MANIFEST_FILE, json.as_bytes())?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

fn staging_dir(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    dir.with_file_name(name)
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let p = dir.join(name);
    fs::read(&p).map_err(|e| Error::io(p, e))
}

/// Loads and verifies a checkpoint: blob hashes and the config hash must
/// agree with the manifest.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_bytes = read(dir, MANIFEST_FILE)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::json(dir.join(MANIFEST_FILE).display().to_string(), e))?;
    if manifest.config.hash() != manifest.config_hash {
        return Err(Error::Checkpoint(format!(
            "{}: config_hash does not match the stored config",
            dir.display()
        )));
    }
    let params_bytes = read(dir, PARAMS_FILE)?;
    if sha256(&params_bytes) != manifest.params_sha256 {
        return Err(Error::Checkpoint(format!("{}: {PARAMS_FILE} does not match its manifest hash", dir.display())));
    }
    let optim_bytes = read(dir, OPTIM_FILE)?;
    if sha256(&optim_bytes) != manifest.optim_sha256 {
        return Err(Error::Checkpoint(format!("{}: {OPTIM_FILE} does not match its manifest hash", dir.display())));
    }
    let params = decode_params(&params_bytes)?;
    let optim = decode_optim(&optim_bytes)?;
    let expected = manifest.model.param_shapes();
    if expected.len() != params.tensors.len()
        || expected
            .iter()
            .any(|(name, shape)| params.tensors.get(name).map(|t| t.shape()) != Some(shape.as_slice()))
    {
        return Err(Error::Checkpoint(format!(
            "{}: parameters do not fit the recorded model configuration",
            dir.display()
        )));
    }
    Ok(Checkpoint { params, optim, manifest })
}
