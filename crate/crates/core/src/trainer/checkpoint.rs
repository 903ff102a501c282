//! PFCK: `"PFCK" | version u32 | json_len u32 | json | tensor_count u32 | tensors | fnv u64`.
//!
//! Each tensor is `name_len u16 | name | rank u8 | dims u32… | f32…`, all little-endian.
//! Parameters come first, then `adam.m.*` and `adam.v.*`. The JSON blob holds the
//! training config, progress, history and the Adam step count. The trailing hash is
//! FNV-1a 64 over every preceding byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{BestSnapshot, EpochRecord};
use super::{AdamState, TrainConfig};
use crate::episodes::fnv1a;
use crate::error::{Error, Result};
use crate::numerics::gradcheck::ParamSet;
use crate::numerics::Tensor;
use crate::protomodel::ExtractorParams;

pub const PFCK_MAGIC: &[u8; 4] = b"PFCK";
pub const PFCK_VERSION: u32 = 1;

/// Everything needed to continue training or to evaluate.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epochs_completed: usize,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub params: ExtractorParams<f32>,
    pub adam: AdamState<ExtractorParams<f32>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: TrainConfig,
    dim: usize,
    epochs_completed: usize,
    adam_step: u64,
    best_epoch: Option<usize>,
    best_val_accuracy: Option<f64>,
    history: Vec<EpochRecord>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let start = self.pos as u64;
        let len = self.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|_| Error::format(start, "tensor name is not UTF-8"))?
            .to_string();
        let rank = self.take(1, "tensor rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("tensor dims")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = numel
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(start, format!("tensor {name} is too large")))?;
        let data = self
            .take(bytes, "tensor data")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(start, format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
}

impl Checkpoint {
    pub fn snapshot(&self) -> BestSnapshot {
        BestSnapshot {
            epoch: self.epochs_completed,
            val_accuracy: self.history.last().and_then(|r| r.val_accuracy),
            params: self.params.clone(),
            adam: self.adam.clone(),
        }
    }

    /// This run's state as of the snapshot's epoch.
    pub fn with_snapshot(&self, snap: &BestSnapshot) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            epochs_completed: snap.epoch,
            history: self.history[..snap.epoch.min(self.history.len())].to_vec(),
            best_epoch: Some(snap.epoch),
            best_val_accuracy: snap.val_accuracy,
            params: snap.params.clone(),
            adam: snap.adam.clone(),
        }
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut all = self.params.tensors();
        for (prefix, set) in [("adam.m.", &self.adam.m), ("adam.v.", &self.adam.v)] {
            all.extend(set.tensors().into_iter().map(|(n, t)| (format!("{prefix}{n}"), t)));
        }
        all
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            config: self.config.clone(),
            dim: self.params.dim(),
            epochs_completed: self.epochs_completed,
            adam_step: self.adam.t,
            best_epoch: self.best_epoch,
            best_val_accuracy: self.best_val_accuracy,
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
        let tensors = self.named_tensors();
        let mut out = Vec::new();
        out.extend_from_slice(PFCK_MAGIC);
        out.extend_from_slice(&PFCK_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            put_tensor(&mut out, name, t);
        }
        let hash = fnv1a(&out);
        out.extend_from_slice(&hash.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != PFCK_MAGIC {
            return Err(Error::format(0, "not a PFCK checkpoint (bad magic)"));
        }
        if bytes.len() < 8 + 8 {
            return Err(Error::format(bytes.len() as u64, "truncated header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != PFCK_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}, expected {PFCK_VERSION}")));
        }
        let body_len = bytes.len() - 8;
        let stored = u64::from_le_bytes(bytes[body_len..].try_into().expect("8 bytes"));
        let computed = fnv1a(&bytes[..body_len]);
        if stored != computed {
            return Err(Error::format(
                body_len as u64,
                format!("hash mismatch: stored {stored:016x}, computed {computed:016x}"),
            ));
        }

        let mut r = Reader {
            bytes: &bytes[..body_len],
            pos: 8,
        };
        let json_len = r.u32("metadata length")? as usize;
        let json_at = r.pos as u64;
        let meta: Meta = serde_json::from_slice(r.take(json_len, "metadata")?)
            .map_err(|e| Error::format(json_at, format!("metadata: {e}")))?;
        let extractor = meta
            .config
            .extractor(meta.dim)
            .map_err(|e| Error::format(json_at, format!("metadata: {e}")))?;
        let count_at = r.pos as u64;
        let count = r.u32("tensor count")? as usize;

        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.pos as u64;
            tensors.push((at, r.tensor()?));
        }
        if r.pos != body_len {
            return Err(Error::format(r.pos as u64, "trailing bytes before hash"));
        }

        let per_set = extractor.layers * crate::protomodel::LAYER_FIELDS.len();
        if per_set == 0 || count != 3 * per_set {
            return Err(Error::format(
                count_at,
                format!("{count} tensors, expected {} for {} layers", 3 * per_set, extractor.layers),
            ));
        }
        let mut sets = Vec::with_capacity(3);
        let mut it = tensors.into_iter();
        for prefix in ["", "adam.m.", "adam.v."] {
            let chunk: Vec<(u64, (String, Tensor<f32>))> = it.by_ref().take(per_set).collect();
            let first_at = chunk[0].0;
            let names: Vec<(u64, String)> = chunk.iter().map(|(at, (n, _))| (*at, n.clone())).collect();
            let set = ExtractorParams::from_tensors(extractor, chunk.into_iter().map(|(_, (_, t))| t).collect())
                .map_err(|e| Error::format(first_at, e.to_string()))?;
            for ((at, found), (want, _)) in names.iter().zip(set.tensors()) {
                if *found != format!("{prefix}{want}") {
                    return Err(Error::format(*at, format!("tensor {found}, expected {prefix}{want}")));
                }
            }
            sets.push(set);
        }
        let v = sets.pop().expect("three sets");
        let m = sets.pop().expect("three sets");
        let params = sets.pop().expect("three sets");
        Ok(Checkpoint {
            config: meta.config,
            epochs_completed: meta.epochs_completed,
            history: meta.history,
            best_epoch: meta.best_epoch,
            best_val_accuracy: meta.best_val_accuracy,
            params,
            adam: AdamState { m, v, t: meta.adam_step },
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
