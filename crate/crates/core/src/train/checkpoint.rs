//! RCSC checkpoint files.
//!
//! Layout, little-endian: magic `RCSC`, version `u16`, config hash `u64`,
//! iteration `u64`, config text (`u32` length + UTF-8), tensor count `u32`,
//! then per tensor: name (`u16` length + UTF-8), dtype tag `u8`, rank `u8`,
//! `rank × u32` dims and the raw values.

use std::fs;
use std::path::Path;

use crate::codec::{extent_u32, Reader, Writer};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::{DType, ParamSet, Real, Tensor};

const MAGIC: &[u8; 4] = b"RCSC";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl StoredTensor {
    pub fn of<R: Real>(name: &str, t: &Tensor<R>) -> Self {
        StoredTensor { name: name.to_string(), dtype: R::DTYPE, shape: t.shape().to_vec(), bytes: R::to_le_bytes_vec(t.data()) }
    }

    /// Values converted to `R`; exact when the stored dtype is `R`.
    pub fn to_tensor<R: Real>(&self) -> Tensor<R> {
        let data = match self.dtype {
            DType::F32 => self.bytes.chunks_exact(4).map(|c| R::lit(f32::from_le_chunk(c) as f64)).collect(),
            DType::F64 => self.bytes.chunks_exact(8).map(|c| R::lit(f64::from_le_chunk(c))).collect(),
        };
        Tensor::new(self.shape.clone(), data).expect("stored extents match payload")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub iteration: u64,
    pub tensors: Vec<StoredTensor>,
}

impl Checkpoint {
    pub fn from_params<R: Real>(config: &TrainConfig, iteration: u64, params: &ParamSet<R>) -> Self {
        let tensors = params.ids().map(|id| StoredTensor::of(params.name(id), params.get(id))).collect();
        Checkpoint { config: config.clone(), iteration, tensors }
    }

    /// Overwrites every parameter from the table, which must name exactly
    /// the parameters of `params` with matching shapes.
    pub fn apply_to<R: Real>(&self, params: &mut ParamSet<R>) -> Result<()> {
        if self.tensors.len() != params.len() {
            return Err(Error::Config(format!("checkpoint holds {} tensors, model has {}", self.tensors.len(), params.len())));
        }
        for st in &self.tensors {
            let id = params.find(&st.name).ok_or_else(|| Error::Config(format!("checkpoint tensor {:?} unknown to the model", st.name)))?;
            if params.get(id).shape() != st.shape {
                return Err(Error::shape("checkpoint", format!("{}: stored {:?}, model {:?}", st.name, st.shape, params.get(id).shape())));
            }
            params.get_mut(id).data_mut().copy_from_slice(st.to_tensor::<R>().data());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let text = self.config.to_text();
        let mut w = Writer::new();
        w.bytes(MAGIC)
            .u16(VERSION)
            .u64(self.config.hash())
            .u64(self.iteration)
            .u32(text.len() as u32)
            .bytes(text.as_bytes())
            .u32(self.tensors.len() as u32);
        for t in &self.tensors {
            let name_len = u16::try_from(t.name.len()).map_err(|_| Error::invalid(format!("tensor name {:?} too long", t.name)))?;
            let rank = u8::try_from(t.shape.len()).map_err(|_| Error::invalid("tensor rank above 255"))?;
            w.u16(name_len).bytes(t.name.as_bytes()).u8(t.dtype.tag()).u8(rank);
            for &d in &t.shape {
                w.u32(extent_u32(d, "tensor extent")?);
            }
            w.bytes(&t.bytes);
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let hash = r.u64("config hash")?;
        let iteration = r.u64("iteration")?;
        let at = r.pos();
        let len = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.bytes(len, "config text")?).map_err(|_| Error::parse(at, "config text is not UTF-8"))?;
        let config = TrainConfig::parse(text)?;
        if config.hash() != hash {
            return Err(Error::parse(at, "config hash does not match the stored config"));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let at = r.pos();
            let n = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.bytes(n, "tensor name")?).map_err(|_| Error::parse(at, "tensor name is not UTF-8"))?.to_string();
            let at = r.pos();
            let dtype = DType::from_tag(r.u8("dtype")?).ok_or_else(|| Error::parse(at, "unknown dtype tag"))?;
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("tensor extent")? as usize);
            }
            let numel: usize = shape.iter().product();
            let size = numel.checked_mul(dtype.size()).ok_or_else(|| Error::parse(at, "tensor size overflows"))?;
            let data = r.bytes(size, "tensor data")?.to_vec();
            tensors.push(StoredTensor { name, dtype, shape, bytes: data });
        }
        r.finish()?;
        Ok(Checkpoint { config, iteration, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
