//! Binary run snapshots.
//!
//! Layout: magic `TGCK`, format version (u32), payload length (u64), CRC-32
//! of the payload (u32), payload. Everything is little-endian; tensors are
//! keyed by parameter name so the file does not depend on registration order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fisher_gate::ImportanceTable;
use crate::toolbox::{ModuleId, ModuleKind};
use crate::train::metrics::MetricsRecord;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TGCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedMoments {
    pub name: String,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Resolved run configuration as TOML.
    pub config: String,
    pub iteration: u64,
    pub params: Vec<NamedTensor>,
    pub moments: Vec<NamedMoments>,
    pub data_rng: RngState,
    pub fisher_rng: RngState,
    pub active: Vec<ModuleId>,
    pub ever_trainable: Vec<String>,
    pub history: Vec<ImportanceTable>,
    pub metrics: Vec<MetricsRecord>,
    pub losses: Vec<f64>,
}

struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn floats(&mut self, v: &[f64]) {
        self.len(v.len());
        for x in v {
            self.f64(*x);
        }
    }
    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn module(&mut self, id: ModuleId) {
        self.u32(id.layer as u32);
        self.u8(kind_code(id.kind));
    }
    fn modules(&mut self, ids: &[ModuleId]) {
        self.len(ids.len());
        for id in ids {
            self.module(*id);
        }
    }
    fn scores(&mut self, map: &BTreeMap<ModuleId, f64>) {
        self.len(map.len());
        for (id, v) in map {
            self.module(*id);
            self.f64(*v);
        }
    }
    fn rng(&mut self, r: &RngState) {
        self.0.extend_from_slice(&r.seed);
        self.u64(r.stream);
        self.0.extend_from_slice(&r.word_pos.to_le_bytes());
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Integrity(format!("payload ends early at byte {}", self.pos)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn arr<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.arr()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    /// Length prefix, sanity-checked against the bytes left so corrupt input
    /// cannot trigger huge allocations.
    fn len(&mut self, elem_size: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        let left = self.buf.len() - self.pos;
        if n.saturating_mul(elem_size.max(1)) > left {
            return Err(Error::Integrity(format!("length {n} exceeds remaining {left} bytes")));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
    fn floats(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Integrity(e.to_string()))
    }
    fn module(&mut self) -> Result<ModuleId> {
        let layer = self.u32()? as usize;
        Ok(ModuleId::new(layer, kind_from_code(self.u8()?)?))
    }
    fn modules(&mut self) -> Result<Vec<ModuleId>> {
        let n = self.len(5)?;
        (0..n).map(|_| self.module()).collect()
    }
    fn scores(&mut self) -> Result<BTreeMap<ModuleId, f64>> {
        let n = self.len(13)?;
        (0..n).map(|_| Ok((self.module()?, self.f64()?))).collect()
    }
    fn rng(&mut self) -> Result<RngState> {
        Ok(RngState {
            seed: self.arr()?,
            stream: self.u64()?,
            word_pos: u128::from_le_bytes(self.arr()?),
        })
    }
}

fn kind_code(k: ModuleKind) -> u8 {
    match k {
        ModuleKind::Spatial => 0,
        ModuleKind::Semantic => 1,
        ModuleKind::Frequency => 2,
    }
}

fn kind_from_code(c: u8) -> Result<ModuleKind> {
    ModuleKind::ALL
        .get(c as usize)
        .copied()
        .ok_or_else(|| Error::Integrity(format!("bad module kind code {c}")))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Enc(Vec::new());
        e.str(&self.config);
        e.u64(self.iteration);
        e.len(self.params.len());
        for p in &self.params {
            e.str(&p.name);
            e.len(p.shape.len());
            for d in &p.shape {
                e.len(*d);
            }
            e.u8(p.requires_grad as u8);
            e.floats(&p.data);
        }
        e.len(self.moments.len());
        for m in &self.moments {
            e.str(&m.name);
            e.u64(m.step);
            e.floats(&m.m);
            e.floats(&m.v);
        }
        e.rng(&self.data_rng);
        e.rng(&self.fisher_rng);
        e.modules(&self.active);
        e.len(self.ever_trainable.len());
        for n in &self.ever_trainable {
            e.str(n);
        }
        e.len(self.history.len());
        for t in &self.history {
            e.len(t.event_index);
            e.len(t.iteration);
            e.scores(&t.raw);
            e.scores(&t.normalized);
            e.modules(&t.selected);
        }
        e.len(self.metrics.len());
        for r in &self.metrics {
            e.len(r.iteration);
            e.str(&r.domain);
            e.len(r.per_class_iou.len());
            for v in &r.per_class_iou {
                match v {
                    Some(x) => {
                        e.u8(1);
                        e.f64(*x);
                    }
                    None => e.u8(0),
                }
            }
            e.f64(r.miou);
        }
        e.floats(&self.losses);

        let payload = e.0;
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Integrity("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let crc = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != len {
            return Err(Error::Integrity(format!("payload is {} bytes, header says {len}", payload.len())));
        }
        if crc32fast::hash(payload) != crc {
            return Err(Error::Integrity("checksum mismatch".into()));
        }

        let mut d = Dec { buf: payload, pos: 0 };
        let config = d.str()?;
        let iteration = d.u64()?;
        let n = d.len(1)?;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = d.str()?;
            let ndim = d.len(8)?;
            let shape = (0..ndim).map(|_| Ok(d.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let requires_grad = d.u8()? != 0;
            let data = d.floats()?;
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::Integrity(format!("tensor '{name}' shape {shape:?} holds {} values", data.len())));
            }
            params.push(NamedTensor {
                name,
                shape,
                requires_grad,
                data,
            });
        }
        let n = d.len(1)?;
        let mut moments = Vec::with_capacity(n);
        for _ in 0..n {
            moments.push(NamedMoments {
                name: d.str()?,
                step: d.u64()?,
                m: d.floats()?,
                v: d.floats()?,
            });
        }
        let data_rng = d.rng()?;
        let fisher_rng = d.rng()?;
        let active = d.modules()?;
        let n = d.len(8)?;
        let ever_trainable = (0..n).map(|_| d.str()).collect::<Result<Vec<_>>>()?;
        let n = d.len(1)?;
        let mut history = Vec::with_capacity(n);
        for _ in 0..n {
            history.push(ImportanceTable {
                event_index: d.u64()? as usize,
                iteration: d.u64()? as usize,
                raw: d.scores()?,
                normalized: d.scores()?,
                selected: d.modules()?,
            });
        }
        let n = d.len(1)?;
        let mut metrics = Vec::with_capacity(n);
        for _ in 0..n {
            let iteration = d.u64()? as usize;
            let domain = d.str()?;
            let c = d.len(1)?;
            let per_class_iou = (0..c)
                .map(|_| Ok(if d.u8()? == 1 { Some(d.f64()?) } else { None }))
                .collect::<Result<Vec<_>>>()?;
            metrics.push(MetricsRecord {
                iteration,
                domain,
                per_class_iou,
                miou: d.f64()?,
            });
        }
        let losses = d.floats()?;
        if d.pos != payload.len() {
            return Err(Error::Integrity(format!("{} trailing bytes", payload.len() - d.pos)));
        }
        Ok(Checkpoint {
            config,
            iteration,
            params,
            moments,
            data_rng,
            fisher_rng,
            active,
            ever_trainable,
            history,
            metrics,
            losses,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
