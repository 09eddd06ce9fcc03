//! Binary checkpoint: magic, format version, a JSON header (model config,
//! standardizer, training metadata, tensor names) and the named tensors.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{read_u32, Tensor};
use crate::error::{Error, Result};
use crate::evaluation::{ModelPredictor, SplitSpec};
use crate::features::Standardizer;
use crate::model::{ModelConfig, ModelParams, PhysicsTransformer};
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 8] = b"THFMCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    pub train_climates: Vec<String>,
    pub train_buildings: Vec<String>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub split: SplitSpec,
    pub train: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    standardizer: Standardizer,
    meta: CheckpointMeta,
    tensors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: PhysicsTransformer,
    pub standardizer: Standardizer,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn predictor(&self) -> ModelPredictor<'_> {
        ModelPredictor {
            model: &self.model,
            std: &self.standardizer,
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = Header {
            model: self.model.config.clone(),
            standardizer: self.standardizer.clone(),
            meta: self.meta.clone(),
            tensors: self.model.params.names(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for t in self.model.params.entries() {
            t.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::data(None, "not a checkpoint file (bad magic)"));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::data(
                None,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        header.model.validate()?;
        header.standardizer.validate()?;

        let template = ModelParams::init(&header.model, 0)?;
        let expected = template.names();
        if expected != header.tensors {
            return Err(Error::data(
                None,
                "checkpoint tensor names do not match its model config",
            ));
        }
        let mut tensors = Vec::with_capacity(expected.len());
        for _ in &expected {
            tensors.push(Tensor::read_from(r)?);
        }
        let mut it = tensors.into_iter();
        let params = template.map(|_, _| it.next().expect("one tensor per name"));
        let model = PhysicsTransformer::new(header.model, params)?;
        Ok(Self {
            model,
            standardizer: header.standardizer,
            meta: header.meta,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}
