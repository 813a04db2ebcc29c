//! Experiment configuration documents and JSON loading with path-qualified
//! errors.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cost::{CostQuery, CostRow};
use crate::error::{Error, Result};
use crate::icl::{IclTaskConfig, ModelConfig, TrainConfig};

pub const SCHEMA_VERSION: &str = "1";

/// Parses JSON, reporting the path of the offending field on failure.
pub fn from_json_str<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Json {
            path: if path.is_empty() { ".".into() } else { path },
            message: e.into_inner().to_string(),
        }
    })
}

pub fn from_json_file<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let text = std::fs::read_to_string(path.as_ref())?;
    from_json_str(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostEntry {
    pub id: String,
    pub query: CostQuery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub queries: Vec<CostEntry>,
}

impl CostSection {
    pub fn evaluate(&self) -> Result<Vec<CostRow>> {
        self.queries
            .iter()
            .map(|q| {
                Ok(CostRow {
                    config_id: q.id.clone(),
                    family: q.query.family().to_string(),
                    report: q.query.evaluate()?,
                })
            })
            .collect()
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<IclTaskConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostSection>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = from_json_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ExperimentConfig::parse(&std::fs::read_to_string(path.as_ref())?)
    }

    /// Checks every cross-section invariant before anything runs.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Json {
                path: "schema_version".into(),
                message: format!("unsupported schema version {:?}, expected {SCHEMA_VERSION:?}", self.schema_version),
            });
        }
        let at = |path: &str, e: Error| match e {
            Error::Config(message) => Error::Json {
                path: path.into(),
                message,
            },
            other => other,
        };
        if let Some(task) = &self.task {
            task.validate().map_err(|e| at("task", e))?;
        }
        if let Some(train) = &self.train {
            train.validate().map_err(|e| at("train", e))?;
        }
        if let Some(model) = &self.model {
            let t = self.task.as_ref().map_or(1, IclTaskConfig::seq_len);
            if let Some(task) = &self.task {
                if task.d_input != model.d_input {
                    return Err(at("model.d_input", Error::config("must equal task.d_input")));
                }
            }
            model.validate(t).map_err(|e| at("model", e))?;
        }
        if let Some(cost) = &self.cost {
            for (i, q) in cost.queries.iter().enumerate() {
                q.query.evaluate().map_err(|e| at(&format!("cost.queries[{i}].query"), e))?;
            }
        }
        if self.seeds.is_empty() {
            return Err(at("seeds", Error::config("at least one seed is required")));
        }
        Ok(())
    }

    /// Canonical JSON used for hashing and for the copy stored in run
    /// directories.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"{
        "schema_version": "1",
        "model": {"layers": 1, "dim": 8, "d_input": 2,
                  "attention": {"heads": 2, "score": {"kind": "standard"}}},
        "task": {"d_input": 2},
        "train": {"steps": 2, "batch_size": 4, "base_lr": 0.001},
        "seeds": [1, 2]
    }"#;

    #[test]
    fn parses_and_round_trips() {
        let c = ExperimentConfig::parse(SMALL).unwrap();
        assert_eq!(c.seeds, vec![1, 2]);
        let again = ExperimentConfig::parse(&c.canonical_json()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let bad = SMALL.replace("\"batch_size\"", "\"batchsize\"");
        match ExperimentConfig::parse(&bad) {
            Err(Error::Json { path, .. }) => assert_eq!(path, "train.batchsize"),
            other => panic!("{other:?}"),
        }
        let bad = SMALL.replace("\"heads\": 2", "\"heads\": 2, \"extra\": 1");
        match ExperimentConfig::parse(&bad) {
            Err(Error::Json { path, .. }) => assert_eq!(path, "model.attention.extra"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_errors_point_at_sections() {
        let bad = SMALL.replace("\"heads\": 2", "\"heads\": 3");
        match ExperimentConfig::parse(&bad) {
            Err(Error::Json { path, .. }) => assert_eq!(path, "model"),
            other => panic!("{other:?}"),
        }
        let bad = SMALL.replace("\"schema_version\": \"1\"", "\"schema_version\": \"0\"");
        assert!(ExperimentConfig::parse(&bad).is_err());
        let bad = r#"{"schema_version": "1", "cost": {"queries": [{"id": "x", "query":
            {"kind": "mlr-attention", "seq_len": 6, "dim": 8, "rank_allocation": "1|1|1"}}]}}"#;
        match ExperimentConfig::parse(bad) {
            Err(Error::Json { path, .. }) => assert_eq!(path, "cost.queries[0].query"),
            other => panic!("{other:?}"),
        }
    }
}
