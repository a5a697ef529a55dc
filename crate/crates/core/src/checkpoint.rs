//! Self-describing JSON checkpoint: config echo, named parameter tensors
//! (name, shape, f64 values), optional optimizer moments and the RNG
//! seed/step counters. f64 values survive the JSON round-trip exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub decayed: bool,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedOptimizer {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Arbitrary config echo (model + run configuration as JSON).
    pub config: serde_json::Value,
    pub params: Vec<SavedParam>,
    pub optimizer: Option<SavedOptimizer>,
    pub rng_seed: u64,
    pub step: u64,
}

impl Checkpoint {
    pub fn capture(
        config: serde_json::Value,
        params: &ParamSet,
        optimizer: Option<&AdamW>,
        rng_seed: u64,
        step: u64,
    ) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config,
            params: params
                .iter()
                .map(|(_, p)| SavedParam {
                    name: p.name.clone(),
                    rows: p.value.rows,
                    cols: p.value.cols,
                    decayed: p.decayed,
                    data: p.value.data.clone(),
                })
                .collect(),
            optimizer: optimizer.map(|o| {
                let (m, v, step) = o.state();
                SavedOptimizer {
                    step,
                    m: m.to_vec(),
                    v: v.to_vec(),
                }
            }),
            rng_seed,
            step,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let ckpt: Checkpoint = serde_json::from_reader(r)?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint format version {} (expected {})",
                ckpt.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        Ok(ckpt)
    }

    /// Write the saved values back into `params`, matching by name.
    pub fn restore_params(&self, params: &mut ParamSet) -> Result<()> {
        for saved in &self.params {
            let id = params.by_name(&saved.name).ok_or_else(|| {
                Error::Config(format!("checkpoint has unknown parameter `{}`", saved.name))
            })?;
            let target = params.get_mut(id);
            if target.value.shape() != (saved.rows, saved.cols) {
                return Err(Error::Config(format!(
                    "parameter `{}` shape {}x{} vs checkpoint {}x{}",
                    saved.name, target.value.rows, target.value.cols, saved.rows, saved.cols
                )));
            }
            target.value = Tensor::from_vec(saved.rows, saved.cols, saved.data.clone())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;

    #[test]
    fn roundtrip_is_exact() {
        let mut rng = SeedRng::new(3);
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::uniform(3, 4, -1.0, 1.0, &mut rng), true);
        ps.add("b", Tensor::uniform(1, 4, -1.0, 1.0, &mut rng), false);
        let ckpt = Checkpoint::capture(serde_json::json!({"d": 4}), &ps, None, 42, 7);

        let dir = std::env::temp_dir().join(format!("planet-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("test.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        std::fs::remove_file(&path).ok();

        assert_eq!(loaded.rng_seed, 42);
        assert_eq!(loaded.params.len(), 2);
        for (a, b) in ckpt.params.iter().zip(&loaded.params) {
            assert_eq!(a.data, b.data, "f64 values must round-trip exactly");
        }

        let mut ps2 = ParamSet::new();
        ps2.add("w", Tensor::zeros(3, 4), true);
        ps2.add("b", Tensor::zeros(1, 4), false);
        loaded.restore_params(&mut ps2).unwrap();
        assert_eq!(ps2.get(ps2.by_name("w").unwrap()).value, ps.get(ps.by_name("w").unwrap()).value);
    }
}
