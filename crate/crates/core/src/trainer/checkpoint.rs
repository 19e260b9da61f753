//! Binary checkpoint archives.
//!
//! Layout: the 8-byte magic `ISGCKPT1`, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian `f64` in header order.
//! Nothing time-dependent is stored, so saving a loaded archive reproduces
//! it byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, TrainConfig};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Adam, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ISGCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    /// Completed iterations.
    pub iteration: u64,
    pub gen_params: ParamStore,
    pub disc_params: ParamStore,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    config_hash: String,
    train_config: TrainConfig,
    iteration: u64,
    gen_adam_step: u64,
    disc_adam_step: u64,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

const GROUPS: [&str; 6] = ["gen", "disc", "gen_adam_m", "gen_adam_v", "disc_adam_m", "disc_adam_v"];

impl Checkpoint {
    fn groups(&self) -> [&ParamStore; 6] {
        [
            &self.gen_params,
            &self.disc_params,
            &self.gen_opt.first_moment,
            &self.gen_opt.second_moment,
            &self.disc_opt.first_moment,
            &self.disc_opt.second_moment,
        ]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for (group, store) in GROUPS.iter().zip(self.groups()) {
            for (name, t) in store.iter() {
                tensors.push(TensorEntry { group: group.to_string(), name: name.clone(), shape: t.shape().to_vec() });
                payload.extend(t.data().iter().flat_map(|x| x.to_le_bytes()));
            }
        }
        let header = Header {
            model_config: self.model_config.clone(),
            config_hash: self.model_config.hash(),
            train_config: self.train_config.clone(),
            iteration: self.iteration,
            gen_adam_step: self.gen_opt.step,
            disc_adam_step: self.disc_opt.step,
            tensors,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint archive (bad magic)"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let payload = &bytes[header_end..];
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(bad("payload checksum mismatch"));
        }
        if header.model_config.hash() != header.config_hash {
            return Err(bad("config hash does not match the stored model config"));
        }

        let mut stores: [ParamStore; 6] = Default::default();
        let mut offset = 0usize;
        for entry in header.tensors {
            let slot = GROUPS
                .iter()
                .position(|g| *g == entry.group)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor group `{}`", entry.group)))?;
            let n: usize = entry.shape.iter().product();
            let end = offset + 8 * n;
            let chunk = payload.get(offset..end).ok_or_else(|| Error::CheckpointParam {
                name: entry.name.clone(),
                message: "payload ends early".into(),
            })?;
            let data = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            stores[slot].insert(entry.name, Tensor::new(entry.shape, data)?);
            offset = end;
        }
        if offset != payload.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        let [gen_params, disc_params, gm, gv, dm, dv] = stores;
        Ok(Self {
            model_config: header.model_config,
            train_config: header.train_config,
            iteration: header.iteration,
            gen_params,
            disc_params,
            gen_opt: Adam { step: header.gen_adam_step, first_moment: gm, second_moment: gv },
            disc_opt: Adam { step: header.disc_adam_step, first_moment: dm, second_moment: dv },
        })
    }

    /// Build the model described by the archive and load its weights.
    pub fn restore_model(&self) -> Result<Model> {
        let mut model = Model::new(&self.model_config, 0)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Copy weights into an existing model. Parameter names and shapes are
    /// checked first, so a mismatch names the offending parameter; then the
    /// model configurations must agree.
    pub fn load_into(&self, model: &mut Model) -> Result<()> {
        let mut gen = model.gen_params.clone();
        gen.load_from(&self.gen_params)?;
        let mut disc = model.disc_params.clone();
        disc.load_from(&self.disc_params)?;
        if model.config.hash() != self.model_config.hash() {
            return Err(Error::Checkpoint(format!(
                "model config hash {} differs from the archive's {}",
                model.config.hash(),
                self.model_config.hash()
            )));
        }
        model.gen_params = gen;
        model.disc_params = disc;
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ckpt.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
