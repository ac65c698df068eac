//! Checkpoint archive: named parameter arrays with dtype/shape headers,
//! the model configuration echo, optimizer moments, the step counter, and
//! the RNG seed. The layout is fully documented in `docs/formats.md`;
//! save -> load -> save reproduces the file byte for byte.

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::real::Real;
use crate::types::ModelConfig;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"FTCKPT01";

/// Everything needed to resume training exactly: parameters, AdamW
/// moments, the step counter, and the data-sampling seed. The RNG state is
/// the `(seed, step)` pair; per-step streams are derived from it, so no
/// generator position needs to be serialized.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real> {
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub params: Parameters<T>,
    pub opt_m: Option<Parameters<T>>,
    pub opt_v: Option<Parameters<T>>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    step: u64,
    seed: u64,
    dtype: String,
    has_optimizer: bool,
}

fn write_store<T: Real>(out: &mut Vec<u8>, store: &Parameters<T>) {
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, value) in store.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.ndim() as u64).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in value.iter() {
            if T::DTYPE == "f32" {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            } else {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.clone(),
                reason: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn read_store<T: Real>(&mut self) -> Result<Parameters<T>> {
        let count = self.u64()? as usize;
        let mut store = Parameters::new();
        for _ in 0..count {
            let name_len = self.u64()? as usize;
            let name = String::from_utf8(self.take(name_len)?.to_vec()).map_err(|_| {
                Error::Format {
                    path: self.path.clone(),
                    reason: "non-utf8 parameter name".into(),
                }
            })?;
            let ndim = self.u64()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(self.u64()? as usize);
            }
            let len: usize = dims.iter().product();
            let elem = if T::DTYPE == "f32" { 4 } else { 8 };
            let raw = self.take(len * elem)?;
            let data: Vec<T> = (0..len)
                .map(|i| {
                    if elem == 4 {
                        T::of_f64(
                            f32::from_le_bytes(raw[i * 4..i * 4 + 4].try_into().unwrap()) as f64
                        )
                    } else {
                        T::of_f64(f64::from_le_bytes(raw[i * 8..i * 8 + 8].try_into().unwrap()))
                    }
                })
                .collect();
            store.insert(name, ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap());
        }
        Ok(store)
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            config: self.config.clone(),
            step: self.step,
            seed: self.seed,
            dtype: T::DTYPE.to_string(),
            has_optimizer: self.opt_m.is_some(),
        };
        let meta_json = serde_json::to_vec(&meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta_json);
        write_store(&mut out, &self.params);
        if let (Some(m), Some(v)) = (&self.opt_m, &self.opt_v) {
            write_store(&mut out, m);
            write_store(&mut out, v);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = Reader {
            bytes: &bytes,
            pos: 0,
            path: path.display().to_string(),
        };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Format {
                path: r.path.clone(),
                reason: "bad checkpoint magic".into(),
            });
        }
        let meta_len = r.u64()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)?;
        if meta.dtype != T::DTYPE {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint dtype {} does not match requested {}",
                meta.dtype,
                T::DTYPE
            )));
        }
        let params = r.read_store::<T>()?;
        let (opt_m, opt_v) = if meta.has_optimizer {
            (Some(r.read_store::<T>()?), Some(r.read_store::<T>()?))
        } else {
            (None, None)
        };
        if r.pos != bytes.len() {
            return Err(Error::Format {
                path: r.path.clone(),
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Checkpoint {
            config: meta.config,
            step: meta.step,
            seed: meta.seed,
            params,
            opt_m,
            opt_v,
        })
    }
}
