//! Checkpoint file: `CBLCKPT1`, a little-endian u32-length-prefixed JSON
//! header, a u64 count and the f32 parameters in canonical order, then the
//! optional optimizer moments.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numcore::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CBLCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Resumable ChaCha8 position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// u128 as decimal text; JSON numbers cannot hold it.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Config("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    rng: Option<RngState>,
    params: Vec<ParamMeta>,
    has_optimizer: bool,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Adam moments flattened in the same canonical order as the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerBlob {
    pub t: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub rng: Option<RngState>,
    pub manifest: Vec<ParamMeta>,
    pub params: Vec<f32>,
    pub optimizer: Option<OptimizerBlob>,
    /// Free-form caller data (training settings, vocabulary path, …).
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>, step: u64) -> Self {
        let manifest = model
            .stores()
            .iter()
            .flat_map(|s| s.iter().map(|p| ParamMeta { name: p.name.clone(), shape: p.value.shape().to_vec() }))
            .collect();
        let params = model.flat_params().into_iter().map(|v| v.to_f32().expect("finite parameter")).collect();
        Self {
            config: model.config.clone(),
            step,
            rng: None,
            manifest,
            params,
            optimizer: None,
            extra: serde_json::Value::Null,
        }
    }

    /// Rebuilds the model; the manifest must match the configuration's layout.
    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>> {
        let mut model = Model::<T>::new(self.config.clone(), 0)?;
        let expected: Vec<ParamMeta> = Self::from_model(&model, 0).manifest;
        if expected != self.manifest {
            return Err(Error::Checkpoint {
                path: Default::default(),
                reason: "parameter manifest does not match the stored configuration".into(),
            });
        }
        let flat: Vec<T> = self.params.iter().map(|&v| T::lit(v as f64)).collect();
        model.load_flat(&flat)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            rng: self.rng.clone(),
            params: self.manifest.clone(),
            has_optimizer: self.optimizer.is_some(),
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(32 + json.len() + 4 * self.params.len() * 3);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        write_f32s(&mut out, &self.params);
        if let Some(opt) = &self.optimizer {
            if opt.m.len() != self.params.len() || opt.v.len() != self.params.len() {
                return Err(Error::shape("checkpoint", "optimizer moments differ in length from parameters"));
            }
            out.extend_from_slice(&opt.t.to_le_bytes());
            for &x in opt.m.iter().chain(&opt.v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let len = read_u32(&mut r)? as usize;
        if r.len() < len {
            return Err(corrupt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        let params = read_f32s(&mut r)?;
        let expected: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        if params.len() != expected {
            return Err(corrupt("parameter count disagrees with the manifest"));
        }
        let optimizer = if header.has_optimizer {
            let t = read_u64(&mut r)?;
            let n = params.len();
            let mut m = vec![0f32; n];
            let mut v = vec![0f32; n];
            for x in m.iter_mut().chain(v.iter_mut()) {
                *x = read_f32(&mut r)?;
            }
            Some(OptimizerBlob { t, m, v })
        } else {
            None
        };
        if !r.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            config: header.config,
            step: header.step,
            rng: header.rng,
            manifest: header.params,
            params,
            optimizer,
            extra: header.extra,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::File::create(&tmp)?.write_all(&bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::Checkpoint { path: path.to_path_buf(), reason: e.to_string() })?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint { reason, .. } => Error::Checkpoint { path: path.to_path_buf(), reason },
            other => other,
        })
    }
}

fn corrupt(reason: &str) -> Error {
    Error::Checkpoint { path: Default::default(), reason: reason.into() }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    if r.len() < buf.len() {
        return Err(corrupt("unexpected end of file"));
    }
    buf.copy_from_slice(&r[..buf.len()]);
    *r = &r[buf.len()..];
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32(r: &mut &[u8]) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(f32::from_le_bytes(b))
}

fn write_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    out.extend_from_slice(&(xs.len() as u64).to_le_bytes());
    for &x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_f32s(r: &mut &[u8]) -> Result<Vec<f32>> {
    let n = read_u64(r)? as usize;
    if r.len() < n.saturating_mul(4) {
        return Err(corrupt("truncated parameter block"));
    }
    (0..n).map(|_| read_f32(r)).collect()
}
