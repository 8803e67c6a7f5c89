//! Run configuration: one JSON document holding every module's settings.
//! Defaults follow the published training recipe at toy model scale.

use std::path::PathBuf;

use peifg_core::generator::DecodeConfig;
use peifg_core::llm::HttpClientConfig;
use peifg_core::model::ModelConfig;
use peifg_core::refine::RefinementConfig;
use peifg_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

pub const RUN_DIR_ENV: &str = "PEIFG_RUN_DIR";
pub const API_KEY_ENV: &str = "PEIFG_LLM_API_KEY";

/// Where samples come from: JSONL manifests, or seeded synthetic samples
/// when a manifest is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train: None, test: None, synthetic_train: 64, synthetic_test: 8, synthetic_seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LlmConfig {
    /// Keyword-overlap judge; only meaningful for refinement.
    Rule,
    /// JSON file holding a list of `{key, response}` entries.
    Canned {
        path: PathBuf,
    },
    Http(HttpClientConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatagenConfig {
    pub manifest: Option<PathBuf>,
    pub llm: LlmConfig,
    pub concurrency: usize,
    pub split_ratio: f64,
    pub split_seed: u64,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            llm: LlmConfig::Canned { path: PathBuf::from("canned.json") },
            concurrency: 4,
            split_ratio: 0.9,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReviewConfig {
    pub addr: String,
    pub journal: PathBuf,
    pub lease_ms: u64,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            journal: PathBuf::from("review/journal.jsonl"),
            lease_ms: peifg_service::DEFAULT_LEASE_MS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub name: String,
    pub output_root: PathBuf,
    pub model: ModelConfig,
    pub stage1: TrainConfig,
    pub train: TrainConfig,
    pub refine: RefinementConfig,
    pub judge: LlmConfig,
    pub decode: DecodeConfig,
    pub data: DataConfig,
    /// Full model to start from (`train` continues from it; `refine`,
    /// `generate` require it).
    pub checkpoint: Option<PathBuf>,
    /// Stage-1 region weights loaded before `train`.
    pub region_checkpoint: Option<PathBuf>,
    pub datagen: DatagenConfig,
    pub review: ReviewConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            output_root: PathBuf::from("runs"),
            model: ModelConfig::toy(0),
            stage1: TrainConfig { lr: 1e-3, ..TrainConfig::default() },
            train: TrainConfig::default(),
            refine: RefinementConfig::default(),
            judge: LlmConfig::Rule,
            decode: DecodeConfig::default(),
            data: DataConfig::default(),
            checkpoint: None,
            region_checkpoint: None,
            datagen: DatagenConfig::default(),
            review: ReviewConfig::default(),
        }
    }
}

fn section(name: &str, r: peifg_core::Result<()>) -> CliResult<()> {
    r.map_err(|e| match e {
        peifg_core::Error::Validation { field, message } => {
            CliError::Config { field: format!("{name}.{field}"), message }
        }
        other => other.into(),
    })
}

impl RunConfig {
    pub fn validate(&self) -> CliResult<()> {
        section("model", self.model.validate())?;
        section("stage1", self.stage1.validate())?;
        section("train", self.train.validate())?;
        section("refine", self.refine.validate())?;
        section("decode", self.decode.validate())?;
        if !(0.0..=1.0).contains(&self.datagen.split_ratio) {
            return Err(CliError::config("datagen.split_ratio", "must be in [0, 1]"));
        }
        if self.name.trim().is_empty() || self.name.contains('/') {
            return Err(CliError::config("name", "must be a non-empty single path component"));
        }
        Ok(())
    }

    /// Sets every seed in the document.
    pub fn set_seed(&mut self, seed: u64) {
        self.model = ModelConfig { seed, ..self.model.clone() };
        self.stage1.seed = seed;
        self.train.seed = seed;
        self.refine.seed = seed;
        self.decode.seed = seed;
    }
}

/// Short names accepted by `sweep --param`.
pub fn param_path(name: &str) -> &str {
    match name {
        "S" => "model.pool.size",
        "L_p" => "model.pool.prompt_len",
        "K" => "model.top_k",
        "lambda_cor" => "train.weights.lambda_cor",
        "lambda_se" => "train.weights.lambda_se",
        "lr" => "train.lr",
        "rank" => "model.decoder.adapter.rank",
        other => other,
    }
}

/// Parses a `--set` value: JSON when it parses, a plain string otherwise.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Replaces the value at a dotted path. Every segment must already exist
/// so typos are reported rather than silently ignored, except that an
/// optional field holding `null` may be set.
pub fn set_path(doc: &mut Value, path: &str, value: Value) -> CliResult<()> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| CliError::config(parts[..i].join("."), "is not an object"))?;
        let slot = obj.get_mut(*part).ok_or_else(|| CliError::config(parts[..=i].join("."), "no such field"))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Err(CliError::config(path, "empty path"))
}

/// Loads a config file (or the defaults) and applies `key=value` overrides.
pub fn load(path: Option<&std::path::Path>, overrides: &[String], seed: Option<u64>) -> CliResult<RunConfig> {
    let base = match path {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| CliError::config("config", format!("{}: {e}", p.display())))?;
            serde_json::from_str::<RunConfig>(&text).map_err(|e| CliError::config("config", e))?
        }
        None => RunConfig::default(),
    };
    let mut doc = serde_json::to_value(&base).map_err(|e| CliError::config("config", e))?;
    for o in overrides {
        let (k, v) =
            o.split_once('=').ok_or_else(|| CliError::config("set", format!("expected key=value, got {o:?}")))?;
        set_path(&mut doc, param_path(k.trim()), parse_value(v.trim()))?;
    }
    let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::config("set", e))?;
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_recipe() {
        let c = RunConfig::default();
        assert_eq!(c.model.pool.size, 10);
        assert_eq!(c.model.pool.prompt_len, 5);
        assert_eq!(c.model.top_k, 3);
        assert_eq!(c.model.decoder.adapter.map(|a| a.rank), Some(8));
        assert_eq!(c.train.weights.lambda_cor, 0.1);
        assert_eq!(c.train.weights.lambda_se, 0.1);
        assert_eq!(c.train.lr, 8e-5);
        assert_eq!(c.train.batch_size, 24);
        assert_eq!(c.train.epochs, 3);
        c.validate().unwrap();
    }

    #[test]
    fn overrides_apply_and_typos_fail() {
        let c = load(None, &["S=5".into(), "train.lr=0.01".into(), "name=x".into()], Some(3)).unwrap();
        assert_eq!(c.model.pool.size, 5);
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.name, "x");
        assert_eq!(c.train.seed, 3);
        let e = load(None, &["train.lrr=1".into()], None).unwrap_err();
        assert!(e.to_string().contains("train.lrr"));
    }

    #[test]
    fn invalid_values_name_the_field() {
        let e = load(None, &["train.lr=-1".into()], None).unwrap_err();
        assert!(e.to_string().contains("train.lr"), "{e}");
        let e = load(None, &["K=11".into()], None).unwrap_err();
        assert!(e.to_string().contains("model."), "{e}");
    }

    #[test]
    fn round_trips_through_json() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
