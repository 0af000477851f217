//! Model file: container header, JSON description, then every parameter in
//! declaration order as `(name, shape, values)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Normalization, ScmError, ScmModel, ScmSpec, TrainMeta};
use crate::container::{Decoder, Encoder, FormatError};
use crate::numkit::Tensor;

pub const MODEL_MAGIC: &[u8] = b"CFSCM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ScmSpec,
    norm: Normalization,
    meta: TrainMeta,
}

impl ScmModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(MODEL_MAGIC, MODEL_VERSION);
        let header = Header {
            spec: self.spec.clone(),
            norm: self.norm.clone(),
            meta: self.meta.clone(),
        };
        e.bytes(&serde_json::to_vec(&header).expect("header serializes"));
        e.u64(self.store.len() as u64);
        for (_, p) in self.store.iter() {
            e.bytes(p.name.as_bytes());
            e.u64(p.value.shape().len() as u64);
            for &s in p.value.shape() {
                e.u64(s as u64);
            }
            e.f64s(p.value.data());
        }
        e.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, ScmError> {
        let mut dec = Decoder::open(data, MODEL_MAGIC, "model file", MODEL_VERSION)?;
        let header: Header =
            serde_json::from_slice(dec.bytes()?).map_err(|e| FormatError::Malformed(format!("model header: {e}")))?;
        let mut model = ScmModel::new(header.spec, header.norm, 0)?;
        model.meta = header.meta;
        let count = dec.usize()?;
        if count != model.store.len() {
            return Err(FormatError::Malformed(format!(
                "file holds {count} parameters, the model declares {}",
                model.store.len()
            ))
            .into());
        }
        let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let name = String::from_utf8_lossy(dec.bytes()?).into_owned();
            let rank = dec.usize()?;
            if rank > 8 {
                return Err(FormatError::Malformed(format!("parameter {name}: rank {rank}")).into());
            }
            let shape = (0..rank).map(|_| dec.usize()).collect::<Result<Vec<_>, _>>()?;
            let p = model.store.get_mut(id);
            if name != p.name || shape != p.value.shape() {
                return Err(FormatError::Malformed(format!(
                    "parameter {name} {shape:?} does not match declared {} {:?}",
                    p.name,
                    p.value.shape()
                ))
                .into());
            }
            let values = dec.f64s(p.value.len())?;
            p.value = Tensor::new(shape, values)?;
        }
        dec.finish()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ScmError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| ScmError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ScmError> {
        let data = std::fs::read(path).map_err(|source| ScmError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&data)
    }
}
