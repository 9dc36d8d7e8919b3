//! `.skdc` container: named tensors, training step, RNG state and a JSON metadata block.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "SKDC" | u32 version | u64 step
//! [u8; 32] rng seed | u64 rng stream | u128 rng word position
//! u32 meta_len | meta_len bytes of UTF-8 JSON
//! u32 count | count x (u32 name_len | name | u8 dtype | u32 rank | rank x u64 dim | payload)
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, CheckpointError, Result};
use crate::models::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SKDC";
pub const VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Record {
    name: String,
    dtype: u8,
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn dtype_width(dtype: u8) -> Option<usize> {
    match dtype {
        f32::DTYPE => Some(4),
        f64::DTYPE => Some(8),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub rng: RngState,
    /// UTF-8 JSON describing what the tensors belong to.
    pub meta: String,
    records: Vec<Record>,
}

impl Checkpoint {
    pub fn new(step: u64, rng: RngState, meta: String) -> Self {
        Self {
            step,
            rng,
            meta,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.name.as_str())
    }

    pub fn push_tensor<S: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<S>) {
        let mut payload =
            Vec::with_capacity(t.numel() * dtype_width(S::DTYPE).expect("known dtype"));
        for &v in t.data() {
            match S::DTYPE {
                f32::DTYPE => payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                _ => payload.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
        self.records.push(Record {
            name: name.into(),
            dtype: S::DTYPE,
            dims: t.shape().to_vec(),
            payload,
        });
    }

    /// Appends every tensor of `params` as `{prefix}{name}`.
    pub fn push_params<S: Scalar>(&mut self, prefix: &str, params: &ParamStore<S>) {
        for (name, t) in params.iter() {
            self.push_tensor(format!("{prefix}{name}"), t);
        }
    }

    pub fn tensor<S: Scalar>(&self, name: &str) -> Result<Tensor<S>> {
        let Some(r) = self.records.iter().find(|r| r.name == name) else {
            return config_err(format!("checkpoint has no tensor `{name}`"));
        };
        if r.dtype != S::DTYPE {
            return config_err(format!(
                "tensor `{name}` has dtype code {}, expected {}",
                r.dtype,
                S::NAME
            ));
        }
        let data = match r.dtype {
            f32::DTYPE => r
                .payload
                .chunks_exact(4)
                .map(|b| S::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
                .collect(),
            _ => r
                .payload
                .chunks_exact(8)
                .map(|b| S::lit(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                .collect(),
        };
        Tensor::new(&r.dims, data)
    }

    /// Every tensor whose name starts with `prefix`, in file order, prefix stripped.
    pub fn params<S: Scalar>(&self, prefix: &str) -> Result<ParamStore<S>> {
        let mut store = ParamStore::new();
        for r in &self.records {
            if let Some(rest) = r.name.strip_prefix(prefix) {
                store.push(rest, self.tensor(&r.name)?);
            }
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.dtype);
            out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
            for &d in &r.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&r.payload);
        }
        out
    }

    /// Decodes a whole file. Nothing is returned unless every byte parses.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut rd = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = rd.array()?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic { found: magic });
        }
        let version = rd.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let step = rd.u64()?;
        let seed: [u8; 32] = rd.array()?;
        let stream = rd.u64()?;
        let word_pos = u128::from_le_bytes(rd.array()?);
        let meta_len = rd.u32()? as usize;
        let meta_at = rd.pos;
        let meta = String::from_utf8(rd.take(meta_len)?.to_vec()).map_err(|_| {
            CheckpointError::Corrupt {
                offset: meta_at,
                reason: "metadata is not UTF-8".into(),
            }
        })?;
        let count = rd.u32()? as usize;
        let mut records = Vec::new();
        for _ in 0..count {
            let name_len = rd.u32()? as usize;
            let name_at = rd.pos;
            let name = String::from_utf8(rd.take(name_len)?.to_vec()).map_err(|_| {
                CheckpointError::Corrupt {
                    offset: name_at,
                    reason: "tensor name is not UTF-8".into(),
                }
            })?;
            let dtype_at = rd.pos;
            let dtype = rd.array::<1>()?[0];
            let width = dtype_width(dtype).ok_or_else(|| CheckpointError::Corrupt {
                offset: dtype_at,
                reason: format!("unknown dtype code {dtype} for `{name}`"),
            })?;
            let rank = rd.u32()? as usize;
            let mut dims = Vec::new();
            let mut numel: usize = 1;
            for _ in 0..rank {
                let dim_at = rd.pos;
                let d = rd.u64()?;
                numel = usize::try_from(d)
                    .ok()
                    .filter(|&d| d > 0)
                    .and_then(|d| numel.checked_mul(d))
                    .ok_or_else(|| CheckpointError::Corrupt {
                        offset: dim_at,
                        reason: format!("invalid extent {d} for `{name}`"),
                    })?;
                dims.push(d as usize);
            }
            if rank == 0 {
                return Err(CheckpointError::Corrupt {
                    offset: dtype_at + 1,
                    reason: format!("`{name}` has rank 0"),
                });
            }
            let len = numel
                .checked_mul(width)
                .ok_or_else(|| CheckpointError::Corrupt {
                    offset: rd.pos,
                    reason: format!("payload size of `{name}` overflows"),
                })?;
            let payload = rd.take(len)?.to_vec();
            records.push(Record {
                name,
                dtype,
                dims,
                payload,
            });
        }
        if rd.pos != bytes.len() {
            return Err(CheckpointError::Corrupt {
                offset: rd.pos,
                reason: format!("{} trailing bytes", bytes.len() - rd.pos),
            });
        }
        Ok(Self {
            step,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            meta,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
                len: self.bytes.len(),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}
