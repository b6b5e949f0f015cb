//! Binary checkpoint format.
//!
//! ```text
//! "LVNC"  u32 version
//! u32 metadata length, UTF-8 `key=value` lines (sorted by key)
//! u32 tensor count
//! per tensor: u32 name length, name, u8 dtype (0 = f64), u32 rank,
//!             rank × u64 extents, little-endian data
//! ```
//!
//! All integers are little-endian. Parameters are stored as `net.<name>`,
//! Adam moments as `adam.m.<name>` and `adam.v.<name>`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{CurveNet, CurveNetConfig};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LVNC";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const MAX_RANK: usize = 8;

/// Network, optimizer state and training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: CurveNet,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: u64,
    /// Seed of the training run, from which every per-epoch shuffle is derived.
    pub train_seed: u64,
    /// Free-form extra metadata, preserved verbatim.
    pub extra: BTreeMap<String, String>,
}

impl Checkpoint {
    /// A checkpoint with zeroed optimizer state.
    pub fn fresh(net: CurveNet, train_seed: u64) -> Self {
        let optimizer = OptimizerState::new(net.params().named().iter().map(|(_, t)| t.shape()));
        Self {
            net,
            optimizer,
            epoch: 0,
            train_seed,
            extra: BTreeMap::new(),
        }
    }

    pub fn metadata(&self) -> BTreeMap<String, String> {
        let c = self.net.config();
        let mut meta = self.extra.clone();
        for (k, v) in [
            ("net.branch_layers", c.branch_layers.to_string()),
            ("net.width", c.width.to_string()),
            ("net.attention_width", c.attention_width.to_string()),
            ("net.iterations", c.iterations.to_string()),
            ("net.seed", c.seed.to_string()),
            ("train.step", self.optimizer.step.to_string()),
            ("train.epoch", self.epoch.to_string()),
            ("train.seed", self.train_seed.to_string()),
        ] {
            meta.insert(k.to_string(), v);
        }
        meta
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());

        let meta: String = self
            .metadata()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        write_u32(&mut out, meta.len());
        out.extend_from_slice(meta.as_bytes());

        let named = self.net.params().named();
        write_u32(&mut out, named.len() * 3);
        for (name, t) in &named {
            write_tensor(&mut out, &format!("net.{name}"), t);
        }
        for ((name, _), m) in named.iter().zip(&self.optimizer.m) {
            write_tensor(&mut out, &format!("adam.m.{name}"), m);
        }
        for ((name, _), v) in named.iter().zip(&self.optimizer.v) {
            write_tensor(&mut out, &format!("adam.v.{name}"), v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let meta_len = r.u32()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?).map_err(|_| corrupt("metadata is not UTF-8"))?;
        let mut meta = BTreeMap::new();
        for line in meta_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| corrupt(format!("metadata line without `=`: {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }

        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let (name, t) = r.tensor()?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(corrupt(format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut take_meta = |key: &str| -> Result<u64> {
            meta.remove(key)
                .ok_or_else(|| corrupt(format!("missing metadata `{key}`")))?
                .parse()
                .map_err(|_| corrupt(format!("metadata `{key}` is not an integer")))
        };
        let config = CurveNetConfig {
            branch_layers: take_meta("net.branch_layers")? as usize,
            width: take_meta("net.width")? as usize,
            attention_width: take_meta("net.attention_width")? as usize,
            iterations: take_meta("net.iterations")? as usize,
            seed: take_meta("net.seed")?,
        };
        let step = take_meta("train.step")?;
        let epoch = take_meta("train.epoch")?;
        let train_seed = take_meta("train.seed")?;
        config.validate().map_err(|e| corrupt(format!("network config: {e}")))?;
        // The pointwise kernels alone need this many values; refuse to build a
        // template larger than what the file actually holds.
        let stored: usize = tensors.values().map(Tensor::numel).sum();
        let lower_bound = (config.width as u128).pow(2) * (config.branch_layers as u128 - 1) * 3
            + (config.width as u128) * (config.attention_width as u128) * 2;
        if lower_bound > stored as u128 {
            return Err(corrupt("network config does not match stored tensors"));
        }

        let mut template = CurveNet::zeroed(config.clone())?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, slot) in template.params_mut().named_mut() {
            let want = slot.shape().to_vec();
            let mut fetch = |key: String| -> Result<Tensor> {
                let t = tensors.remove(&key).ok_or_else(|| corrupt(format!("missing tensor `{key}`")))?;
                if t.shape() != want {
                    return Err(corrupt(format!(
                        "tensor `{key}` has shape {:?}, expected {want:?}",
                        t.shape()
                    )));
                }
                Ok(t)
            };
            let param = fetch(format!("net.{name}"))?;
            m.push(fetch(format!("adam.m.{name}"))?);
            v.push(fetch(format!("adam.v.{name}"))?);
            *slot = param;
        }
        if let Some(name) = tensors.keys().next() {
            return Err(corrupt(format!("unexpected tensor `{name}`")));
        }
        let params = template.params().clone();
        Ok(Self {
            net: CurveNet::from_params(config, params)?,
            optimizer: OptimizerState { step, m, v },
            epoch,
            train_seed,
            extra: meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound { path: path.to_path_buf() },
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn write_u32(out: &mut Vec<u8>, v: usize) {
    let v = u32::try_from(v).expect("checkpoint field exceeds u32");
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    write_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F64);
    write_u32(out, t.rank());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| corrupt("tensor name is not UTF-8"))?
            .to_string();
        let dtype = self.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(corrupt(format!("tensor `{name}` has unknown dtype tag {dtype}")));
        }
        let rank = self.u32()? as usize;
        if rank > MAX_RANK {
            return Err(corrupt(format!("tensor `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(self.u64()?).map_err(|_| corrupt("extent overflows usize"))?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| corrupt(format!("tensor `{name}` is too large")))?;
            shape.push(d);
        }
        let raw = self.take(numel.checked_mul(8).ok_or_else(|| corrupt("tensor too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| corrupt(format!("tensor `{name}`: {e}")))?;
        Ok((name, t))
    }
}
