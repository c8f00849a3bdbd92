//! Experiment configuration: TOML or JSON files with dotted-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baseline::PbfdafConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sim::DatasetConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pbfdaf: PbfdafConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.pbfdaf.validate()?;
        if self.dataset.sample_rate != self.model.stft.sample_rate {
            return Err(Error::Config("dataset.sample_rate differs from model.stft.sample_rate".into()));
        }
        Ok(())
    }

    /// Reads a `.toml` or `.json` file and applies `key.path=value` overrides.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let tree = if is_json {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            let v: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            serde_json::to_value(v)?
        };
        Self::from_value(tree, overrides)
    }

    pub fn from_value(mut tree: Value, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: Self = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults with overrides applied.
    pub fn with_overrides(overrides: &[String]) -> Result<Self> {
        Self::from_value(Value::Object(Default::default()), overrides)
    }
}

fn parse_scalar(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .and_then(|v| serde_json::to_value(v).ok())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets `a.b.c=value`; the value is parsed as a TOML literal, falling back
/// to a bare string. Unknown keys surface when the tree is deserialized.
pub fn apply_override(tree: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut node = tree;
    for p in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(Error::Config(format!("override {key:?} descends into a non-table")));
        }
        node = node
            .as_object_mut()
            .expect("checked")
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("override {key:?} descends into a non-table")))?;
    obj.insert(parts[parts.len() - 1].to_string(), parse_scalar(raw.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn defaults_for(mics: usize) -> Vec<String> {
        vec![format!("dataset.mics={mics}"), format!("model.mics={mics}")]
    }

    #[test]
    fn overrides_are_typed() {
        let mut o = defaults_for(2);
        o.push("train.lr=0.001".into());
        o.push("dataset.nonlinearities=[\"clip\"]".into());
        let c = ExperimentConfig::with_overrides(&o).unwrap();
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.dataset.nonlinearities, vec![crate::sim::Nonlinearity::Clip]);

        let mut bad = defaults_for(2);
        bad.push("train.lr=fast".into());
        assert!(ExperimentConfig::with_overrides(&bad).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut o = defaults_for(2);
        o.push("train.learning_rate=0.1".into());
        assert!(matches!(ExperimentConfig::with_overrides(&o), Err(Error::Config(_))));
        assert!(ExperimentConfig::with_overrides(&["nope=1".into()]).is_err());
    }

    #[test]
    fn defaults_are_valid() {
        assert!(ExperimentConfig::with_overrides(&[]).is_ok());
        assert!(ExperimentConfig::with_overrides(&["model.stft.sample_rate=8000".into()]).is_err());
    }

    #[test]
    fn json_and_toml_agree() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "[dataset]\nmics = 2\n[model]\nmics = 2\n[train]\nbatch = 3\n").unwrap();
        let j = dir.path().join("c.json");
        std::fs::write(&j, r#"{"dataset":{"mics":2},"model":{"mics":2},"train":{"batch":3}}"#).unwrap();
        assert_eq!(ExperimentConfig::load(&t, &[]).unwrap(), ExperimentConfig::load(&j, &[]).unwrap());
    }

    #[test]
    fn shipped_toy_config_loads() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
        let c = ExperimentConfig::load(&path, &[]).unwrap();
        assert_eq!(c.dataset.mics, 2);
        assert_eq!(c.train.steps, Some(600));
        let n = c.dataset.counts;
        assert_eq!(n.train + n.dev + n.test, 28);
    }
}
