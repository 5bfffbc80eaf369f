//! Run configuration: a JSON file merged with command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use hyperada::{AblationConfig, BallConfig, Error, LabelSpace, ModelConfig, Result, TrainConfig};
use serde::{Deserialize, Serialize};

/// Everything a training run needs. Every field has a default, so an empty
/// JSON object is a valid file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub ball: BallConfig,
    pub ablation: AblationConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub labels: LabelSpace,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    /// Optional target labels, used only for per-epoch reporting.
    pub target_answers: Option<PathBuf>,
    pub transport_diagnostics: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Checks everything that can be checked before data is read.
    pub fn validate(&self) -> Result<()> {
        self.ball.validate()?;
        self.train.validate()?;
        self.labels.validate()?;
        if self.labels.len() != self.model.num_classes {
            return Err(Error::Config(format!(
                "{} labels configured but model.num_classes is {}",
                self.labels.len(),
                self.model.num_classes
            )));
        }
        if self.source.is_none() {
            return Err(Error::Config(
                "no source manifest (set `source` or pass --source)".into(),
            ));
        }
        if self.train.adapts() && self.target.is_none() {
            return Err(Error::Config(
                "no target manifest (set `target` or pass --target, or zero both transport weights)".into(),
            ));
        }
        Ok(())
    }

    /// Fills the input dimension from the data, or checks it against the data.
    pub fn resolve_input_dim(&mut self, data_dim: usize) -> Result<()> {
        match self.model.input_dim {
            0 => self.model.input_dim = data_dim,
            d if d != data_dim => {
                return Err(Error::Data(format!(
                    "model.input_dim is {d} but the source frames have dimension {data_dim}"
                )))
            }
            _ => {}
        }
        self.ball.dim = self.model.latent_dim;
        self.ball.geometry_mode = self.ablation.geometry;
        self.model.validate()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("run config serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"train": {"epochs": 3}, "ball": {"curvature_c": 0.5}}"#)
                .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.ball.curvature_c, 0.5);
        assert_eq!(cfg.ball.eps, 1e-8);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"epoch": 3}}"#).is_err());
    }

    #[test]
    fn resolved_copy_roundtrips() {
        let mut cfg = RunConfig {
            source: Some("s.jsonl".into()),
            ..RunConfig::default()
        };
        cfg.resolve_input_dim(12).unwrap();
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.model.input_dim, 12);
        assert!(cfg.resolve_input_dim(13).is_err());
    }
}
