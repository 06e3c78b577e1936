//! Run configuration: one declarative TOML file plus dotted-path overrides.
//!
//! Every run writes its fully-resolved configuration next to its outputs so
//! results can be audited and reproduced from `(config, seed)` alone.

use se3t::error::{Error, Result};
use se3t::fiber::Fiber;
use se3t::layers::{ModelConfig, SelfInteractionKind};
use se3t::nbody::{particle_fibers, SimConfig, TrainOptions};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub task: String,
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            task: "nbody".into(),
            seed: None,
            output_dir: PathBuf::from("runs/out"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub layers: usize,
    /// Hidden representation degrees are `0..=max_degree`.
    pub max_degree: u32,
    pub channels: usize,
    pub heads: usize,
    /// `"linear"` or `"attentive"`.
    pub self_interaction: String,
    pub norm_nonlinearity: bool,
    /// `false` gives the tensor-field convolution variant.
    pub attention: bool,
    /// Append gravity-axis symmetry-breaking input channels.
    pub plus_z: bool,
    pub scale_logits: bool,
    pub radial_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            layers: 4,
            max_degree: 2,
            channels: 3,
            heads: 1,
            self_interaction: "attentive".into(),
            norm_nonlinearity: false,
            attention: true,
            plus_z: false,
            scale_logits: false,
            radial_hidden: 32,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSection {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub log_interval: u64,
    pub val_fraction: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            steps: 5000,
            batch: 32,
            lr: 3e-3,
            log_interval: 100,
            val_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub n_train: usize,
    pub n_test: usize,
    /// Rotations per sample in the equivariance-error estimate.
    pub eval_rotations: usize,
    /// Samples used for the equivariance-error estimate.
    pub eval_samples: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_path: None,
            test_path: None,
            n_train: 2000,
            n_test: 500,
            eval_rotations: 20,
            eval_samples: 50,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub data: DataSection,
    pub sim: SimConfig,
}

impl RunConfig {
    /// Loads a TOML file (or defaults when absent) and applies `key=value`
    /// overrides on dotted paths, e.g. `training.steps=100`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut value: toml::Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::io(p.display().to_string(), e))?;
                text.parse::<toml::Value>()
                    .map_err(|e| Error::config("config", e.to_string()))?
            }
            None => toml::Value::Table(Default::default()),
        };
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        value
            .try_into()
            .map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn seed(&self) -> Result<u64> {
        self.run
            .seed
            .ok_or_else(|| Error::config("run.seed", "seed is mandatory; set run.seed"))
    }

    pub fn train_path(&self) -> PathBuf {
        self.data
            .train_path
            .clone()
            .unwrap_or_else(|| self.run.output_dir.join("train.jsonl"))
    }

    pub fn test_path(&self) -> PathBuf {
        self.data
            .test_path
            .clone()
            .unwrap_or_else(|| self.run.output_dir.join("test.jsonl"))
    }

    pub fn self_interaction_kind(&self) -> Result<SelfInteractionKind> {
        match self.model.self_interaction.as_str() {
            "linear" => Ok(SelfInteractionKind::Linear),
            "attentive" => Ok(SelfInteractionKind::Attentive),
            other => Err(Error::config(
                "model.self_interaction",
                format!("unknown kind `{other}` (use `linear` or `attentive`)"),
            )),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        if self.run.task != "nbody" {
            return Err(Error::config(
                "run.task",
                format!("unknown task `{}` (only `nbody` is built in)", self.run.task),
            ));
        }
        let (input, output) = particle_fibers(self.model.plus_z);
        Ok(ModelConfig {
            n_layers: self.model.layers,
            input,
            hidden: Fiber::uniform(self.model.max_degree + 1, self.model.channels)?,
            output,
            heads: self.model.heads,
            self_interaction: self.self_interaction_kind()?,
            norm_nonlinearity: self.model.norm_nonlinearity,
            attention: self.model.attention,
            scale_logits: self.model.scale_logits,
            uniform_attention: false,
            radial_hidden: self.model.radial_hidden,
            edge_scalar_width: 0,
            seed: self.seed()?,
        })
    }

    pub fn train_options(&self) -> Result<TrainOptions> {
        Ok(TrainOptions {
            steps: self.training.steps,
            batch: self.training.batch,
            lr: self.training.lr,
            seed: self.seed()?,
            log_interval: self.training.log_interval.max(1),
        })
    }

    /// Writes the fully-resolved configuration next to the outputs.
    pub fn write_resolved(&self) -> Result<PathBuf> {
        let dir = &self.run.output_dir;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = dir.join("config.resolved.toml");
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::config("config", e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(path)
    }
}

fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config("--set", format!("`{spec}` is not key=value")))?;
    // parse the value as TOML through a one-line document; bare words fall
    // back to strings
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Value>() {
        Ok(doc) => doc.get("v").cloned().expect("v assigned"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cursor.as_table_mut().ok_or_else(|| {
            Error::config("--set", format!("`{path}` traverses a non-table value"))
        })?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("empty override path");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = RunConfig::load(
            None,
            &[
                "run.seed=7".into(),
                "training.steps=12".into(),
                "model.self_interaction=linear".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed().unwrap(), 7);
        assert_eq!(cfg.training.steps, 12);
        assert_eq!(
            cfg.self_interaction_kind().unwrap(),
            SelfInteractionKind::Linear
        );
        assert_eq!(cfg.sim.n_particles, 5);
    }

    #[test]
    fn seed_is_mandatory() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert!(matches!(cfg.seed(), Err(Error::Config { .. })));
    }
}
