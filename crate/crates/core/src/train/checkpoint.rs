//! Binary checkpoint: `TMX1` magic, u32 LE version, u32 LE metadata length,
//! UTF-8 `key=value` metadata, then little-endian arrays in order: parameters,
//! Adam first moments, Adam second moments.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::Dtype;
use crate::error::{Error, Result};
use crate::model::{Arch, ModelParams};
use crate::tensor::Tensor;

use super::adam::{AdamConfig, AdamState};

pub const MAGIC: &[u8; 4] = b"TMX1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: AdamState,
    /// Epochs completed.
    pub epoch: u64,
    pub seed: u64,
    pub dtype: Dtype,
    /// Resolved run config as `key=value` lines.
    pub config: String,
}

fn put_array(out: &mut Vec<u8>, t: &Tensor, dtype: Dtype) {
    for &v in t.data() {
        match dtype {
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let a = &self.adam.config;
        let mut meta = format!(
            "arch={}\nepoch={}\nseed={}\ndtype={}\nadam.t={}\nadam.lr={}\nadam.beta1={}\nadam.beta2={}\nadam.eps={}\nadam.weight_decay={}\n",
            self.params.arch,
            self.epoch,
            self.seed,
            self.dtype.as_str(),
            self.adam.t,
            a.lr,
            a.beta1,
            a.beta2,
            a.eps,
            a.weight_decay,
        );
        for line in self.config.lines().filter(|l| !l.trim().is_empty()) {
            meta.push_str("config.");
            meta.push_str(line);
            meta.push('\n');
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        for t in self
            .params
            .tensors()
            .into_iter()
            .chain(&self.adam.m)
            .chain(&self.adam.v)
        {
            put_array(&mut out, t, self.dtype);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::format(0, "bad magic, not a checkpoint"));
        }
        if bytes.len() < 12 {
            return Err(Error::format(bytes.len() as u64, "truncated header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = 12 + meta_len;
        if bytes.len() < body {
            return Err(Error::format(bytes.len() as u64, "truncated metadata"));
        }
        let meta = std::str::from_utf8(&bytes[12..body])
            .map_err(|e| Error::format(12 + e.valid_up_to() as u64, "metadata is not UTF-8"))?;

        let mut kv = BTreeMap::new();
        let mut config = String::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(12, format!("bad metadata line {line:?}")))?;
            match k.strip_prefix("config.") {
                Some(ck) => config.push_str(&format!("{ck}={v}\n")),
                None => {
                    kv.insert(k, v);
                }
            }
        }
        let get = |k: &str| -> Result<&str> {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::format(12, format!("metadata is missing {k}")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::format(12, format!("bad metadata value {v:?} for {k}")))
        }
        let arch: Arch = get("arch")?.parse()?;
        let dtype = Dtype::parse(get("dtype")?)?;
        let adam_cfg = AdamConfig {
            lr: num("adam.lr", get("adam.lr")?)?,
            beta1: num("adam.beta1", get("adam.beta1")?)?,
            beta2: num("adam.beta2", get("adam.beta2")?)?,
            eps: num("adam.eps", get("adam.eps")?)?,
            weight_decay: num("adam.weight_decay", get("adam.weight_decay")?)?,
        };

        let shapes = arch.param_shapes();
        let width = match dtype {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        };
        let total: usize = 3 * shapes
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum::<usize>();
        let expected = body + total * width;
        if bytes.len() < expected {
            return Err(Error::format(
                bytes.len() as u64,
                format!("truncated arrays: expected {expected} bytes"),
            ));
        }
        if bytes.len() > expected {
            return Err(Error::format(
                expected as u64,
                "trailing bytes after arrays",
            ));
        }
        let mut pos = body;
        let mut read = |shape: &Vec<usize>| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let data = bytes[pos..pos + n * width]
                .chunks_exact(width)
                .map(|c| match dtype {
                    Dtype::F64 => f64::from_le_bytes(c.try_into().unwrap()),
                    Dtype::F32 => f64::from(f32::from_le_bytes(c.try_into().unwrap())),
                })
                .collect();
            pos += n * width;
            Tensor::new(shape.clone(), data)
        };
        let params = shapes.iter().map(&mut read).collect::<Result<Vec<_>>>()?;
        let m = shapes.iter().map(&mut read).collect::<Result<Vec<_>>>()?;
        let v = shapes.iter().map(&mut read).collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            params: ModelParams::from_tensors(&arch, params)?,
            adam: AdamState {
                config: adam_cfg,
                m,
                v,
                t: num("adam.t", get("adam.t")?)?,
            },
            epoch: num("epoch", get("epoch")?)?,
            seed: num("seed", get("seed")?)?,
            dtype,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Load and require a specific architecture.
    pub fn load_for(path: &Path, arch: &Arch) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.params.arch != arch {
            return Err(Error::ArchMismatch {
                expected: arch.to_string(),
                found: ck.params.arch.to_string(),
            });
        }
        Ok(ck)
    }
}
