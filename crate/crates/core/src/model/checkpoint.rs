//! Checkpoint directories: `config.json`, `params.json` (tensor names and
//! shapes), `generator.bin` / `critic.bin` (little-endian f64) and
//! `history.csv`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochStats, InputShape, LossBreakdown, NetworkConfig, ReconstructionModel};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    shape: InputShape,
    config: NetworkConfig,
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

/// Flat `history.csv` row.
#[derive(Serialize, Deserialize)]
struct HistoryRow {
    epoch: usize,
    contextual: f64,
    latent: f64,
    adversarial: f64,
    generator: f64,
    wasserstein: f64,
    penalty: f64,
    critic: f64,
}

impl From<&EpochStats> for HistoryRow {
    fn from(s: &EpochStats) -> Self {
        let l = &s.losses;
        Self {
            epoch: s.epoch,
            contextual: l.contextual,
            latent: l.latent,
            adversarial: l.adversarial,
            generator: l.generator,
            wasserstein: l.wasserstein,
            penalty: l.penalty,
            critic: l.critic,
        }
    }
}

impl From<HistoryRow> for EpochStats {
    fn from(r: HistoryRow) -> Self {
        Self {
            epoch: r.epoch,
            losses: LossBreakdown {
                contextual: r.contextual,
                latent: r.latent,
                adversarial: r.adversarial,
                generator: r.generator,
                wasserstein: r.wasserstein,
                penalty: r.penalty,
                critic: r.critic,
            },
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ParamIndex {
    generator: Vec<TensorInfo>,
    critic: Vec<TensorInfo>,
}

fn index(store: &ParamStore) -> Vec<TensorInfo> {
    store
        .names()
        .iter()
        .zip(store.values())
        .map(|(name, t)| TensorInfo {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect()
}

fn write_blob(path: &Path, store: &ParamStore) -> Result<()> {
    let mut bytes = Vec::with_capacity(store.scalar_count() * 8);
    for t in store.values() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_blob(path: &Path, store: &mut ParamStore, expected: &[TensorInfo]) -> Result<()> {
    if index(store) != expected {
        return Err(Error::Format(format!(
            "{}: parameter layout does not match the configured architecture",
            path.display()
        )));
    }
    let bytes = fs::read(path)?;
    if bytes.len() != store.scalar_count() * 8 {
        return Err(Error::Format(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            store.scalar_count() * 8,
            bytes.len()
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    for t in store.values_mut() {
        let data: Vec<f64> = values.by_ref().take(t.len()).collect();
        *t = Tensor::new(t.shape().to_vec(), data);
    }
    Ok(())
}

impl ReconstructionModel {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            shape: self.shape,
            config: self.config.clone(),
        };
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&header)?)?;
        let idx = ParamIndex {
            generator: index(&self.generator_params),
            critic: index(&self.critic_params),
        };
        fs::write(dir.join("params.json"), serde_json::to_string_pretty(&idx)?)?;
        write_blob(&dir.join("generator.bin"), &self.generator_params)?;
        write_blob(&dir.join("critic.bin"), &self.critic_params)?;

        let mut w = csv::Writer::from_path(dir.join("history.csv"))?;
        for row in &self.history {
            w.serialize(HistoryRow::from(row))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let header: Header = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                header.format_version
            )));
        }
        let idx: ParamIndex = serde_json::from_str(&fs::read_to_string(dir.join("params.json"))?)?;
        let mut model = Self::new(header.config, header.shape)?;
        read_blob(&dir.join("generator.bin"), &mut model.generator_params, &idx.generator)?;
        read_blob(&dir.join("critic.bin"), &mut model.critic_params, &idx.critic)?;

        let history_path = dir.join("history.csv");
        if history_path.exists() {
            let mut r = csv::Reader::from_path(history_path)?;
            model.history = r
                .deserialize::<HistoryRow>()
                .map(|row| row.map(EpochStats::from))
                .collect::<Result<_, _>>()?;
        }
        Ok(model)
    }
}
