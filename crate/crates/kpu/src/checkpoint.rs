//! Binary checkpoints.
//!
//! Layout: `"KPUC"`, version (u32 LE), header length (u64 LE), a UTF-8
//! JSON header, the tensor payload, and an FNV-1a checksum of the payload
//! (u64 LE). The header maps every tensor name to
//! `{"dtype": "f32", "shape": [...], "offset": <byte offset in payload>}`
//! and carries the run state under `__meta__`. Optimizer moments are stored
//! as `optim.m.<param>` and `optim.v.<param>`. Teachers are rebuilt from
//! their specs and are not stored.

use std::collections::BTreeMap;
use std::path::Path;

use kpu_core::hash::fnv1a;
use kpu_core::trainer::{TrainConfig, Trainer};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CheckpointError, KpuError, Result};

pub const MAGIC: [u8; 4] = *b"KPUC";
pub const VERSION: u32 = 1;
const META_KEY: &str = "__meta__";
const PREFIX_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub config: TrainConfig,
    /// Steps completed.
    pub step: u64,
    pub optimizer_step: u64,
    pub famo_logits: Vec<f64>,
    pub famo_prev: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Meta,
    /// In payload order.
    pub tensors: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer<f32>) -> Self {
        let store = &trainer.store;
        let mut tensors: Vec<StoredTensor> = store
            .iter()
            .map(|(_, p)| StoredTensor { name: p.name.clone(), shape: p.tensor.shape().to_vec(), data: p.tensor.data().to_vec() })
            .collect();
        for (tag, pick) in [("m", 0), ("v", 1)] {
            for s in &trainer.optimizer.state {
                let data = if pick == 0 { &s.m } else { &s.v };
                tensors.push(StoredTensor {
                    name: format!("optim.{tag}.{}", store.name(s.id)),
                    shape: store.get(s.id).shape().to_vec(),
                    data: data.clone(),
                });
            }
        }
        Self {
            meta: Meta {
                config: trainer.config.clone(),
                step: trainer.step,
                optimizer_step: trainer.optimizer.step,
                famo_logits: trainer.weighting.logits.clone(),
                famo_prev: trainer.weighting.prev.clone(),
            },
            tensors,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut header = Map::new();
        header.insert(META_KEY.into(), serde_json::to_value(&self.meta).expect("meta serializes"));
        let mut payload = Vec::new();
        for t in &self.tensors {
            let entry = Entry { dtype: "f32".into(), shape: t.shape.clone(), offset: payload.len() as u64 };
            header.insert(t.name.clone(), serde_json::to_value(entry).expect("entry serializes"));
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len() + 8);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&fnv1a(&payload).to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let len = bytes.len() as u64;
        if bytes.len() < PREFIX_LEN {
            return Err(CheckpointError::Truncated { needed: PREFIX_LEN as u64, len });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Version { found: version, expected: VERSION });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = (PREFIX_LEN as u64).checked_add(hlen).filter(|&e| e.checked_add(8).is_some_and(|n| n <= len));
        let header_end = header_end.ok_or(CheckpointError::Truncated { needed: (PREFIX_LEN as u64).saturating_add(hlen).saturating_add(8), len })? as usize;
        let mut header: Map<String, Value> =
            serde_json::from_slice(&bytes[PREFIX_LEN..header_end]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let meta = header.remove(META_KEY).ok_or_else(|| CheckpointError::Header(format!("missing `{META_KEY}`")))?;
        let meta: Meta = serde_json::from_value(meta).map_err(|e| CheckpointError::Header(e.to_string()))?;

        let mut entries: Vec<(String, Entry)> = header
            .into_iter()
            .map(|(name, v)| {
                let e: Entry = serde_json::from_value(v).map_err(|e| CheckpointError::BadTensor { name: name.clone(), reason: e.to_string() })?;
                Ok((name, e))
            })
            .collect::<Result<_, CheckpointError>>()?;
        entries.sort_by_key(|(_, e)| e.offset);
        let payload_len: u64 = entries.iter().map(|(_, e)| 4 * e.shape.iter().product::<usize>() as u64).sum();
        let needed = header_end as u64 + payload_len + 8;
        if needed > len {
            return Err(CheckpointError::Truncated { needed, len });
        }
        if needed < len {
            return Err(CheckpointError::Header(format!("{} trailing bytes", len - needed)));
        }
        let payload = &bytes[header_end..header_end + payload_len as usize];
        let sum = u64::from_le_bytes(bytes[header_end + payload_len as usize..].try_into().unwrap());
        if fnv1a(payload) != sum {
            return Err(CheckpointError::Checksum);
        }
        let mut expected_offset = 0u64;
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, e) in entries {
            let bad = |reason: String| CheckpointError::BadTensor { name: name.clone(), reason };
            if e.dtype != "f32" {
                return Err(bad(format!("dtype `{}`", e.dtype)));
            }
            if e.offset != expected_offset {
                return Err(bad(format!("offset {} where {expected_offset} was expected", e.offset)));
            }
            let n = e.shape.iter().product::<usize>();
            let start = e.offset as usize;
            let data = payload[start..start + 4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            expected_offset += 4 * n as u64;
            tensors.push(StoredTensor { name, shape: e.shape, data });
        }
        Ok(Self { meta, tensors })
    }

    /// Rebuilds the trainer the checkpoint was taken from.
    pub fn restore(self) -> Result<Trainer<f32>> {
        let mut trainer = Trainer::<f32>::new(self.meta.config.clone())?;
        let mut by_name: BTreeMap<String, StoredTensor> = BTreeMap::new();
        for t in self.tensors {
            by_name.insert(t.name.clone(), t);
        }
        let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f32>, CheckpointError> {
            let t = by_name.remove(name).ok_or_else(|| CheckpointError::MissingTensor(name.into()))?;
            if t.shape != shape {
                return Err(CheckpointError::BadTensor { name: name.into(), reason: format!("shape {:?}, expected {shape:?}", t.shape) });
            }
            Ok(t.data)
        };
        let ids: Vec<_> = trainer.store.ids().collect();
        for id in ids {
            let name = trainer.store.name(id).to_string();
            let shape = trainer.store.get(id).shape().to_vec();
            let data = take(&name, &shape)?;
            trainer.store.get_mut(id).data_mut().copy_from_slice(&data);
        }
        for s in trainer.optimizer.state.iter_mut() {
            let name = trainer.store.name(s.id);
            let shape = trainer.store.get(s.id).shape().to_vec();
            s.m = take(&format!("optim.m.{name}"), &shape)?;
            s.v = take(&format!("optim.v.{name}"), &shape)?;
        }
        if let Some(name) = by_name.into_keys().next() {
            return Err(CheckpointError::UnknownTensor(name).into());
        }
        if self.meta.famo_logits.len() != trainer.teachers.len() {
            return Err(CheckpointError::Header("weighting state does not match the zoo".into()).into());
        }
        trainer.optimizer.step = self.meta.optimizer_step;
        trainer.weighting.logits = self.meta.famo_logits;
        trainer.weighting.prev = self.meta.famo_prev;
        trainer.step = self.meta.step;
        Ok(trainer)
    }
}

pub fn save(trainer: &Trainer<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, Checkpoint::capture(trainer).encode()).map_err(KpuError::io(path))
}

pub fn load(path: &Path) -> Result<Trainer<f32>> {
    read(path)?.restore()
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(KpuError::io(path))?;
    Ok(Checkpoint::decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use kpu_core::gradcheck::toy_config;

    fn trained(steps: u64) -> Trainer<f32> {
        let mut cfg = toy_config();
        cfg.steps = 4;
        let mut t = Trainer::<f32>::new(cfg).unwrap();
        for _ in 0..steps {
            t.train_step().unwrap();
        }
        t
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let t = trained(2);
        let bytes = Checkpoint::capture(&t).encode();
        let back = Checkpoint::decode(&bytes).unwrap().restore().unwrap();
        assert_eq!(back.step, 2);
        assert_eq!(Checkpoint::capture(&back).encode(), bytes);
    }

    #[test]
    fn restored_trainer_continues_identically() {
        let mut a = trained(2);
        let mut b = Checkpoint::decode(&Checkpoint::capture(&a).encode()).unwrap().restore().unwrap();
        assert_eq!(a.train_step().unwrap(), b.train_step().unwrap());
        assert_eq!(Checkpoint::capture(&a).encode(), Checkpoint::capture(&b).encode());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = Checkpoint::capture(&trained(1)).encode();

        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(Checkpoint::decode(&b), Err(CheckpointError::BadMagic(_))));

        let mut b = bytes.clone();
        b[4] = 9;
        assert_eq!(Checkpoint::decode(&b).err(), Some(CheckpointError::Version { found: 9, expected: VERSION }));

        let mut b = bytes.clone();
        b[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(Checkpoint::decode(&b), Err(CheckpointError::Truncated { .. })));

        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated { .. })));
        assert!(matches!(Checkpoint::decode(&bytes[..10]), Err(CheckpointError::Truncated { .. })));

        let mut b = bytes.clone();
        let n = b.len();
        b[n - 20] ^= 0x40;
        assert_eq!(Checkpoint::decode(&b).err(), Some(CheckpointError::Checksum));
    }

    #[test]
    fn unknown_and_missing_tensors() {
        let mut c = Checkpoint::capture(&trained(0));
        c.tensors.push(StoredTensor { name: "stray".into(), shape: vec![1], data: vec![0.0] });
        let bytes = c.encode();
        assert!(matches!(
            Checkpoint::decode(&bytes).unwrap().restore(),
            Err(KpuError::Checkpoint(CheckpointError::UnknownTensor(n))) if n == "stray"
        ));

        let mut c = Checkpoint::capture(&trained(0));
        let gone = c.tensors.remove(0).name;
        assert!(matches!(
            Checkpoint::decode(&c.encode()).unwrap().restore(),
            Err(KpuError::Checkpoint(CheckpointError::MissingTensor(n))) if n == gone
        ));
    }
}
