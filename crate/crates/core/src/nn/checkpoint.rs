//! Self-describing checkpoint container: a safetensors file whose header
//! metadata records the component kind, architecture profile, config hash
//! and free-form JSON extras.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "spa-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub profile: String,
    pub config_hash: String,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

fn to_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => (Dtype::F32, flat.to_vec1::<f32>()?.iter().flat_map(|x| x.to_le_bytes()).collect()),
        DType::F64 => (Dtype::F64, flat.to_vec1::<f64>()?.iter().flat_map(|x| x.to_le_bytes()).collect()),
        DType::U8 => (Dtype::U8, flat.to_vec1::<u8>()?),
        DType::U32 => (Dtype::U32, flat.to_vec1::<u32>()?.iter().flat_map(|x| x.to_le_bytes()).collect()),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

fn from_bytes(dtype: Dtype, shape: &[usize], data: &[u8]) -> Result<Tensor> {
    let dev = Device::Cpu;
    let t = match dtype {
        Dtype::F32 => {
            let v: Vec<f32> =
                data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &dev)?
        }
        Dtype::F64 => {
            let v: Vec<f64> =
                data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &dev)?
        }
        Dtype::U8 => Tensor::from_vec(data.to_vec(), shape, &dev)?,
        Dtype::U32 => {
            let v: Vec<u32> =
                data.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &dev)?
        }
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    };
    Ok(t)
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, tensors: BTreeMap<String, Tensor>) -> Self {
        Self { meta, tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut encoded = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let (dtype, bytes) = to_bytes(t)?;
            encoded.push((name.clone(), dtype, t.dims().to_vec(), bytes));
        }
        let views = encoded
            .iter()
            .map(|(n, d, s, b)| {
                safetensors::tensor::TensorView::new(*d, s.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut header = HashMap::new();
        header.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
        header.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
        header.insert("meta".to_string(), serde_json::to_string(&self.meta)?);
        safetensors::serialize(views, Some(header)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::Checkpoint(format!("unreadable container: {e}")))?;
        let info = header
            .metadata()
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("missing header metadata".into()))?;
        if info.get("format").map(String::as_str) != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Checkpoint("not a spa checkpoint".into()));
        }
        let version: u32 = info
            .get("version")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version mismatch: file has {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let meta: CheckpointMeta = serde_json::from_str(
            info.get("meta").ok_or_else(|| Error::Checkpoint("missing meta".into()))?,
        )?;
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            tensors.insert(name, from_bytes(view.dtype(), view.shape(), view.data())?);
        }
        Ok(Self { meta, tensors })
    }

    /// Writes atomically (temp file + rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.meta.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.meta.kind
            )));
        }
        Ok(())
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut tensors = BTreeMap::new();
        tensors.insert("param.w".into(), Tensor::new(&[[1.5f32, -2.0], [0.25, 3.0]], &Device::Cpu).unwrap());
        tensors.insert("param.ids".into(), Tensor::new(&[7u32, 9], &Device::Cpu).unwrap());
        Checkpoint::new(
            CheckpointMeta {
                kind: "classifier".into(),
                profile: "small-cnn".into(),
                config_hash: "abc".into(),
                extra: serde_json::json!({"num_classes": 10}),
            },
            tensors,
        )
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.meta, ck.meta);
        let a = back.tensors["param.w"].to_vec2::<f32>().unwrap();
        assert_eq!(a, vec![vec![1.5, -2.0], vec![0.25, 3.0]]);
        assert_eq!(back.section("param.").len(), 2);
    }

    #[test]
    fn corrupt_bytes_are_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.truncate(bytes.len() / 2);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
    }

    #[test]
    fn wrong_kind_is_rejected() {
        assert!(sample().expect_kind("generator").is_err());
    }
}
