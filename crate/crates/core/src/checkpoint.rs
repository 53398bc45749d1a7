//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "BTCDCKPT" | version u32
//! config_len u64 | config TOML bytes | sha256(config) [32]
//! epoch u64 | best_epoch u64 | best_val_iou f64 | optimizer_step u64
//! record_count u64 | records...
//! record: name_len u32 | name | dtype u8 | dims 4 x u64 | payload
//! ```
//!
//! Optimizer moments are stored as records named `adamw.m/<param>` and `adamw.v/<param>`.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamW;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{DType, Scalar, Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"BTCDCKPT";
pub const VERSION: u32 = 1;

const M_PREFIX: &str = "adamw.m/";
const V_PREFIX: &str = "adamw.v/";

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub config: RunConfig,
    /// Last completed epoch (1-based; 0 before training).
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_val_iou: f64,
    pub params: ParamStore<T>,
    pub optimizer: AdamW<T>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.code());
    for d in t.shape().dims() {
        put_u64(out, d as u64);
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("value overflows usize".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn record<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        let code = self.take(1)?[0];
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::Checkpoint(format!("record {name}: unknown dtype code {code}")))?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("record {name} holds {dtype:?}, expected {:?}", T::DTYPE)));
        }
        let dims = [self.usize()?, self.usize()?, self.usize()?, self.usize()?];
        let shape = Shape(dims);
        let width = dtype.size();
        let payload = self.take(shape.numel().checked_mul(width).ok_or_else(|| {
            Error::Checkpoint(format!("record {name}: shape {shape} overflows"))
        })?)?;
        let data = payload.chunks_exact(width).map(T::read_le).collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let config = self.config.to_toml();
        put_u64(&mut out, config.len() as u64);
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&self.config.digest());
        put_u64(&mut out, self.epoch as u64);
        put_u64(&mut out, self.best_epoch as u64);
        out.extend_from_slice(&self.best_val_iou.to_le_bytes());
        put_u64(&mut out, self.optimizer.step);
        put_u64(&mut out, 3 * self.params.len() as u64);
        for (id, name, t) in self.params.iter() {
            put_record(&mut out, name, t);
            put_record(&mut out, &format!("{M_PREFIX}{name}"), &self.optimizer.m[id.index()]);
            put_record(&mut out, &format!("{V_PREFIX}{name}"), &self.optimizer.v[id.index()]);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let len = r.usize()?;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = RunConfig::from_toml(text)?;
        if r.take(32)? != config.digest() {
            return Err(Error::Checkpoint("config digest mismatch".into()));
        }
        let epoch = r.usize()?;
        let best_epoch = r.usize()?;
        let best_val_iou = r.f64()?;
        let step = r.u64()?;
        let count = r.usize()?;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let (name, t) = r.record::<T>()?;
            if let Some(p) = name.strip_prefix(M_PREFIX) {
                m.push((p.to_owned(), t));
            } else if let Some(p) = name.strip_prefix(V_PREFIX) {
                v.push((p.to_owned(), t));
            } else {
                params.insert(name, t)?;
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let order = |moments: Vec<(String, Tensor<T>)>, kind: &str| -> Result<Vec<Tensor<T>>> {
            let mut slots: Vec<Option<Tensor<T>>> = vec![None; params.len()];
            for (name, t) in moments {
                let id = params
                    .id(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("{kind} moment for unknown parameter {name}")))?;
                if t.shape() != params.get(id).shape() {
                    return Err(Error::Checkpoint(format!("{kind} moment for {name} has the wrong shape")));
                }
                slots[id.index()] = Some(t);
            }
            slots
                .into_iter()
                .enumerate()
                .map(|(i, s)| {
                    s.ok_or_else(|| Error::Checkpoint(format!("missing {kind} moment for {}", params.name(ParamId(i)))))
                })
                .collect()
        };
        let m = order(m, "first")?;
        let v = order(v, "second")?;
        let optimizer = AdamW { config: config.optimizer.clone(), step, m, v };
        Ok(Checkpoint { config, epoch, best_epoch, best_val_iou, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuild the architecture from the stored config and install the stored parameters.
    pub fn model(&self) -> Result<Model<T>> {
        let mut model = Model::new(&self.config.model, self.config.seed)?;
        if model.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, architecture expects {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (id, name, t) in model.params.iter() {
            let stored = self.params.by_name(name)?;
            if stored.shape() != t.shape() || self.params.id(name) != Some(id) {
                return Err(Error::Checkpoint(format!("parameter {name} does not match the architecture")));
            }
        }
        model.params = self.params.clone();
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn sample() -> Checkpoint<f32> {
        let config = RunConfig { model: ModelConfig::tiny(), seed: 3, ..Default::default() };
        let model = Model::<f32>::new(&config.model, config.seed).unwrap();
        let mut optimizer = AdamW::new(config.optimizer.clone(), &model.params);
        optimizer.step = 17;
        optimizer.m[0].data_mut()[0] = 0.25;
        Checkpoint { config, epoch: 5, best_epoch: 4, best_val_iou: 0.8125, params: model.params, optimizer }
    }

    #[test]
    fn byte_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.params, ck.params);
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!((back.epoch, back.best_epoch, back.best_val_iou), (5, 4, 0.8125));
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::<f32>::from_bytes(&extra).is_err());
    }
}
