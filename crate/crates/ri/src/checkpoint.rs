//! The `RIF1` checkpoint file.
//!
//! ```text
//! "RIF1"  u16 version  u32 entry count
//! per entry:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, rank × u64 extents
//!   numel × f64 elements, row-major
//! ```
//!
//! Entry names carry a reserved prefix: `param/` for trained tensors,
//! `buffer/` for batch-norm running statistics, `adam/m/`, `adam/v/` and
//! `adam/step` for optimizer state, and `meta/` for the normalizer, the epoch
//! and the split fingerprint.

use std::path::Path;

use ri_core::model::RiModel;
use ri_core::nn::{Adam, ParamKind};
use ri_core::synth::Normalizer;
use ri_core::Tensor;

use crate::format::{FormatError, Reader, Writer};
use crate::Error;

pub const MAGIC: &[u8; 4] = b"RIF1";
pub const VERSION: u16 = 1;
const KIND: &str = "checkpoint";

pub const PARAM: &str = "param/";
pub const BUFFER: &str = "buffer/";
pub const ADAM_M: &str = "adam/m/";
pub const ADAM_V: &str = "adam/v/";
pub const ADAM_STEP: &str = "adam/step";
pub const NORM_MEAN: &str = "meta/normalizer/mean";
pub const NORM_STD: &str = "meta/normalizer/std";
pub const EPOCH: &str = "meta/epoch";
pub const SPLIT: &str = "meta/split";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

/// A u64 as two exactly representable 32-bit halves.
fn u64_tensor(v: u64) -> Tensor {
    Tensor::from_slice(&[(v >> 32) as f64, (v & 0xffff_ffff) as f64])
}

fn tensor_u64(t: &Tensor) -> Option<u64> {
    match t.data() {
        &[hi, lo] if hi >= 0.0 && lo >= 0.0 && hi < 4294967296.0 && lo < 4294967296.0 => {
            Some(((hi as u64) << 32) | lo as u64)
        }
        _ => None,
    }
}

impl Checkpoint {
    /// Snapshot of the model, optionally its optimizer, and the preprocessing
    /// it was trained with.
    pub fn capture(model: &RiModel, adam: Option<&Adam>, normalizer: &Normalizer, epoch: usize, split: u64) -> Self {
        let mut entries = Vec::new();
        for (_, p) in model.store.iter() {
            let prefix = if p.kind == ParamKind::Buffer { BUFFER } else { PARAM };
            entries.push((format!("{prefix}{}", p.name), p.value.clone()));
        }
        if let Some(adam) = adam {
            entries.push((ADAM_STEP.to_string(), Tensor::scalar(adam.steps() as f64)));
            for (id, p) in model.store.iter() {
                if let Some((m, v)) = adam.moments(id) {
                    let shape = p.value.shape();
                    entries.push((format!("{ADAM_M}{}", p.name), Tensor::new(shape, m.to_vec()).expect("moment shape")));
                    entries.push((format!("{ADAM_V}{}", p.name), Tensor::new(shape, v.to_vec()).expect("moment shape")));
                }
            }
        }
        entries.push((NORM_MEAN.to_string(), Tensor::from_slice(&normalizer.mean)));
        entries.push((NORM_STD.to_string(), Tensor::from_slice(&normalizer.std)));
        entries.push((EPOCH.to_string(), Tensor::scalar(epoch as f64)));
        entries.push((SPLIT.to_string(), u64_tensor(split)));
        Checkpoint { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn require(&self, name: &str) -> Result<&Tensor, Error> {
        self.get(name)
            .ok_or_else(|| Error::Mismatch(format!("checkpoint has no `{name}` entry")))
    }

    /// Copies every parameter and buffer into `model`, which must have exactly
    /// the checkpoint's layout.
    pub fn restore(&self, model: &mut RiModel) -> Result<(), Error> {
        let mut expected = Vec::new();
        for (id, p) in model.store.iter() {
            let prefix = if p.kind == ParamKind::Buffer { BUFFER } else { PARAM };
            expected.push((id, format!("{prefix}{}", p.name)));
        }
        for (name, _) in &self.entries {
            if (name.starts_with(PARAM) || name.starts_with(BUFFER)) && !expected.iter().any(|(_, n)| n == name) {
                return Err(Error::Mismatch(format!(
                    "checkpoint entry `{name}` has no counterpart in the configured model"
                )));
            }
        }
        for (id, name) in expected {
            let stored = self.require(&name)?;
            let want = model.store.value(id).shape();
            if stored.shape() != want {
                let detail = match (0..stored.rank().max(want.len()))
                    .find(|&i| stored.shape().get(i) != want.get(i))
                {
                    Some(i) if stored.rank() == want.len() => {
                        format!("extent {i} is {} in the checkpoint but {} in the configuration", stored.shape()[i], want[i])
                    }
                    _ => format!("rank {} in the checkpoint but {} in the configuration", stored.rank(), want.len()),
                };
                return Err(Error::Mismatch(format!(
                    "`{name}` has shape {:?} in the checkpoint and {:?} in the configured model: {detail}",
                    stored.shape(),
                    want
                )));
            }
            *model.store.value_mut(id) = stored.clone();
        }
        Ok(())
    }

    /// Optimizer state for resuming, when the checkpoint carries it.
    pub fn adam(&self, model: &RiModel, learning_rate: f64) -> Option<Adam> {
        let step = self.get(ADAM_STEP)?.item() as u64;
        let mut moments = Vec::new();
        for (id, p) in model.store.iter() {
            if let (Some(m), Some(v)) = (self.get(&format!("{ADAM_M}{}", p.name)), self.get(&format!("{ADAM_V}{}", p.name))) {
                moments.push((id, m.data().to_vec(), v.data().to_vec()));
            }
        }
        let mut adam = Adam::new(learning_rate);
        adam.restore(step, moments);
        Some(adam)
    }

    pub fn normalizer(&self) -> Result<Normalizer, Error> {
        let mean = self.require(NORM_MEAN)?.data().to_vec();
        let std = self.require(NORM_STD)?.data().to_vec();
        if mean.len() != std.len() || std.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::Mismatch("checkpoint normalizer is malformed".into()));
        }
        Ok(Normalizer { mean, std })
    }

    pub fn epoch(&self) -> Option<usize> {
        self.get(EPOCH).map(|t| t.item() as usize)
    }

    pub fn split_fingerprint(&self) -> Option<u64> {
        self.get(SPLIT).and_then(tensor_u64)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.u32(self.entries.len() as u32);
        for (name, t) in &self.entries {
            w.u32(name.len() as u32);
            w.bytes(name.as_bytes());
            w.u32(t.rank() as u32);
            for &e in t.shape() {
                w.u64(e as u64);
            }
            for &v in t.data() {
                w.f64(v);
            }
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(KIND, bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let count = r.u32("entry count")? as usize;
        // name length and rank at least
        r.expect(count, 8, "entries")?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "entry name")?)
                .map_err(|_| r.invalid("entry name is not UTF-8"))?
                .to_string();
            if entries.iter().any(|(n, _): &(String, Tensor)| *n == name) {
                return Err(r.invalid(format!("duplicate entry `{name}`")));
            }
            let rank = r.u32("rank")? as usize;
            r.expect(rank, 8, "extents")?;
            let mut shape = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let e = usize::try_from(r.u64("extent")?).map_err(|_| r.invalid("extent overflows"))?;
                numel = numel
                    .checked_mul(e)
                    .ok_or_else(|| r.invalid(format!("element count of `{name}` overflows")))?;
                shape.push(e);
            }
            r.expect(numel, 8, "elements")?;
            let data = (0..numel).map(|_| r.f64("elements")).collect::<Result<Vec<_>, _>>()?;
            let t = Tensor::new(&shape, data).map_err(|e| r.invalid(e.to_string()))?;
            entries.push((name, t));
        }
        r.finish()?;
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes).map_err(|e| Error::File {
            path: path.to_path_buf(),
            source: e,
        })
    }
}
