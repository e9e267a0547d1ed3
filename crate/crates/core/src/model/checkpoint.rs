//! Single-file checkpoint container.
//!
//! Layout: the 8-byte magic `EOSLABCK`, a little-endian `u64` manifest
//! length, the JSON manifest, then every tensor listed in the manifest as
//! row-major little-endian `f64`s, in manifest order. The manifest carries
//! the model config, the vocabulary and the optimizer state needed to resume.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{Adam, OptimizerSpec};
use super::params::TensorInfo;
use super::train::TrainState;
use super::{ModelConfig, Parameters};
use crate::encoding::Vocab;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"EOSLABCK";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    vocab: serde_json::Value,
    optimizer: OptimizerSpec,
    steps: usize,
    tensors: Vec<TensorInfo>,
}

const ADAM_FIRST: &str = "optimizer.first_moment";
const ADAM_SECOND: &str = "optimizer.second_moment";

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let params = &self.state.params;
        let mut tensors = params.tensor_infos();
        let n = params.num_params();
        tensors.push(TensorInfo {
            name: ADAM_FIRST.into(),
            shape: vec![n],
        });
        tensors.push(TensorInfo {
            name: ADAM_SECOND.into(),
            shape: vec![n],
        });
        let manifest = Manifest {
            format_version: 1,
            config: self.config.clone(),
            vocab: self.vocab.to_json(),
            optimizer: self.state.adam.spec.clone(),
            steps: self.state.adam.steps,
            tensors,
        };
        let json = serde_json::to_vec(&manifest)?;
        out.write_all(MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        let mut buf = Vec::with_capacity(3 * n * 8);
        for v in params
            .flatten()
            .iter()
            .chain(&self.state.adam.first)
            .chain(&self.state.adam.second)
        {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Checkpoint> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        input.read_exact(&mut json)?;
        let manifest: Manifest = serde_json::from_slice(&json)?;
        if manifest.format_version != 1 {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        let vocab = Vocab::from_json(&manifest.vocab)?;
        let mut params = Parameters::init(manifest.config.architecture(vocab.size()), 0)?;
        let n = params.num_params();

        let mut expected = params.tensor_infos();
        expected.push(TensorInfo {
            name: ADAM_FIRST.into(),
            shape: vec![n],
        });
        expected.push(TensorInfo {
            name: ADAM_SECOND.into(),
            shape: vec![n],
        });
        if expected != manifest.tensors {
            return Err(Error::Checkpoint(
                "tensor list does not match the configured architecture".into(),
            ));
        }

        let mut raw = Vec::with_capacity(3 * n * 8);
        input.read_to_end(&mut raw)?;
        if raw.len() != 3 * n * 8 {
            return Err(Error::Checkpoint(format!(
                "expected {} tensor bytes, found {}",
                3 * n * 8,
                raw.len()
            )));
        }
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.assign_flat(&values[..n])?;
        let adam = Adam {
            spec: manifest.optimizer,
            first: values[n..2 * n].to_vec(),
            second: values[2 * n..].to_vec(),
            steps: manifest.steps,
        };
        Ok(Checkpoint {
            config: manifest.config,
            vocab,
            state: TrainState { params, adam },
        })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    crate::harness::write_atomic(path, |w| checkpoint.write_to(w))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    Checkpoint::read_from(std::io::BufReader::new(file))
}
