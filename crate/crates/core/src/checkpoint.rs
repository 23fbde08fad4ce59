//! Checkpoint directories: `checkpoint.json` (config snapshot, geometry,
//! epoch, validation loss, tensor index) and `tensors.bin` (every parameter
//! in registry order, in the tensor wire format).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{ModelDims, NeuroClip};
use crate::params::{ParamStore, Role};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "checkpoint.json";
pub const TENSORS: &str = "tensors.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub dims: ModelDims,
    pub params: ParamStore,
    /// 0 is the initialized state.
    pub epoch: usize,
    pub val_loss: f64,
    pub train_classes: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: Role,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: u32,
    epoch: usize,
    val_loss: f64,
    dims: ModelDims,
    train_classes: Vec<usize>,
    config: RunConfig,
    tensors: Vec<TensorEntry>,
    tensors_sha256: String,
}

impl Checkpoint {
    pub fn from_model(model: &NeuroClip, epoch: usize, val_loss: f64, train_classes: Vec<usize>) -> Self {
        let mut params = model.params.clone();
        params.zero_grad();
        Self { config: model.config.clone(), dims: model.dims, params, epoch, val_loss, train_classes }
    }

    pub fn model(&self) -> Result<NeuroClip> {
        NeuroClip::with_params(&self.config, self.dims, self.params.clone())
    }

    fn tensor_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.params.iter() {
            p.value.write_to(&mut out).expect("writing to a Vec");
        }
        out
    }

    fn manifest(&self, tensors: &[u8]) -> Manifest {
        Manifest {
            format: FORMAT_VERSION,
            epoch: self.epoch,
            val_loss: self.val_loss,
            dims: self.dims,
            train_classes: self.train_classes.clone(),
            config: self.config.clone(),
            tensors: self
                .params
                .iter()
                .map(|p| TensorEntry { name: p.name.clone(), role: p.role, shape: p.value.shape().to_vec() })
                .collect(),
            tensors_sha256: hex::encode(Sha256::digest(tensors)),
        }
    }

    /// SHA-256 over the manifest and tensor payload as they would be written.
    pub fn hash(&self) -> String {
        let bytes = self.tensor_bytes();
        let json = serde_json::to_vec(&self.manifest(&bytes)).expect("manifest serializes");
        let mut h = Sha256::new();
        h.update(&json);
        h.update(&bytes);
        hex::encode(h.finalize())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let bytes = self.tensor_bytes();
        let json = serde_json::to_string_pretty(&self.manifest(&bytes))?;
        fs::write(dir.join(TENSORS), &bytes)?;
        fs::write(dir.join(MANIFEST), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
        if m.format != FORMAT_VERSION {
            return Err(Error::Format { offset: 0, msg: format!("unsupported checkpoint format {}", m.format) });
        }
        let bytes = fs::read(dir.join(TENSORS))?;
        if hex::encode(Sha256::digest(&bytes)) != m.tensors_sha256 {
            return Err(Error::Format { offset: 0, msg: format!("{TENSORS} does not match its recorded digest") });
        }
        let mut params = ParamStore::new();
        let mut pos = 0;
        for e in m.tensors {
            let start = pos as u64;
            let t = Tensor::decode(&bytes, &mut pos)?;
            if t.shape() != e.shape {
                return Err(Error::Format {
                    offset: start,
                    msg: format!("{} has shape {:?}, index says {:?}", e.name, t.shape(), e.shape),
                });
            }
            params.insert(e.name, t, e.role)?;
        }
        if pos != bytes.len() {
            return Err(Error::Format { offset: pos as u64, msg: "trailing bytes after last tensor".into() });
        }
        m.config.validate()?;
        Ok(Self {
            config: m.config,
            dims: m.dims,
            params,
            epoch: m.epoch,
            val_loss: m.val_loss,
            train_classes: m.train_classes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt() -> Checkpoint {
        let model = NeuroClip::new(&RunConfig::default(), ModelDims { channels: 3, times: 8, image_size: 16 }).unwrap();
        Checkpoint::from_model(&model, 2, 1.25, vec![0, 4, 7])
    }

    #[test]
    fn round_trip_preserves_everything() {
        let c = ckpt();
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.hash(), c.hash());
        assert_eq!(back.params.full_hash(), c.params.full_hash());
        assert_eq!((back.epoch, back.val_loss, back.train_classes.clone()), (2, 1.25, vec![0, 4, 7]));
        assert_eq!(back.config, c.config);
        back.model().unwrap();
    }

    #[test]
    fn tampered_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        ckpt().save(dir.path()).unwrap();
        let path = dir.path().join(TENSORS);
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn hash_tracks_values() {
        let a = ckpt();
        let mut b = a.clone();
        b.params.set_value("loss.log_tau", Tensor::scalar(0.0)).unwrap();
        assert_ne!(a.hash(), b.hash());
    }
}
