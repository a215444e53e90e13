//! Flat `key = value` config file. Every key is optional; flags win.

use std::path::{Path, PathBuf};

use serde::Deserialize;

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub log_level: Option<String>,

    pub tax: Option<PathBuf>,
    pub base: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub rules: Option<PathBuf>,
    pub headers: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub corpus: Option<PathBuf>,

    pub n: Option<usize>,
    pub target_size: Option<usize>,
    pub budget: Option<usize>,
    pub trials: Option<usize>,
    pub reports: Option<usize>,

    pub objective: Option<String>,
    pub masking: Option<String>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub schedule: Option<String>,
    pub warmup_frac: Option<f64>,
    pub weight_decay: Option<f64>,
    pub lambda_a: Option<f64>,
    pub lambda_kg: Option<f64>,
    pub reg_sign: Option<f64>,
    pub tau: Option<f64>,
    pub d_model: Option<usize>,
    pub d_ff: Option<usize>,
    pub max_len: Option<usize>,
    pub eval_every: Option<usize>,
    pub patience: Option<usize>,
    pub checkpoint_every: Option<usize>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::parse(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_keys_parse() {
        let c = FileConfig::parse("seed = 4\nlr = 0.01\nobjective = \"kg\"\n").unwrap();
        assert_eq!(c.seed, Some(4));
        assert_eq!(c.lr, Some(0.01));
        assert_eq!(c.objective.as_deref(), Some("kg"));
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(FileConfig::parse("learning_rate = 1.0").is_err());
    }
}
