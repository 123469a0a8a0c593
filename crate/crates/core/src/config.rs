//! Run configuration merged from environment, config file and flags.
//!
//! Precedence, lowest first: built-in defaults, `VIEWROUTE_SECTION__KEY`
//! environment variables, the JSON config file, then command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::analysis::Linkage;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::metrics::Metric;
use crate::eval::SynthConfig;
use crate::index::IndexKind;
use crate::model::ModelConfig;
use crate::router::RouterConfig;
use crate::scoring::ScorerKind;
use crate::trainer::TrainConfig;

pub const ENV_PREFIX: &str = "VIEWROUTE_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    pub kind: IndexKind,
    /// Number of IVF lists; ignored by the flat index.
    pub k: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            kind: IndexKind::Ivf,
            k: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub scorer: ScorerKind,
    pub top_k: usize,
    pub nprobe: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            scorer: ScorerKind::Routed,
            top_k: 10,
            nprobe: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub reps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { reps: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub threshold: f64,
    pub linkage: Linkage,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            threshold: 0.95,
            linkage: Linkage::Average,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metrics: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            metrics: vec!["mrr@10".into(), "ndcg@10".into()],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model initialization and index clustering seed.
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub router: RouterConfig,
    pub train: TrainConfig,
    pub index: IndexConfig,
    pub search: SearchConfig,
    pub bench: BenchConfig,
    pub analysis: AnalysisConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            router: self.router.clone(),
        }
    }

    pub fn metrics(&self) -> Result<Vec<Metric>> {
        self.eval
            .metrics
            .iter()
            .map(|m| {
                Metric::parse(m)
                    .ok_or_else(|| Error::Config(format!("eval.metrics: unknown metric {m:?}")))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        self.metrics()?;
        if self.index.kind == IndexKind::Ivf && self.index.k == 0 {
            return Err(Error::Config(
                "index.k must be positive for an IVF index".into(),
            ));
        }
        if self.search.top_k == 0 || self.search.nprobe == 0 {
            return Err(Error::Config(
                "search.top_k and search.nprobe must be positive".into(),
            ));
        }
        if self.bench.reps == 0 {
            return Err(Error::Config("bench.reps must be positive".into()));
        }
        let t = self.analysis.threshold;
        if !(t > -1.0 && t <= 1.0) {
            return Err(Error::Config(format!(
                "analysis.threshold {t} outside (-1, 1]"
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let c: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    /// Merges the layers and validates the result. `flags` holds dotted keys
    /// such as `train.lr`.
    pub fn resolve(
        env: &[(String, String)],
        file: Option<&Path>,
        flags: &[(String, Value)],
    ) -> Result<RunConfig> {
        let mut merged = Value::Object(Map::new());
        for (key, raw) in env {
            let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let path: Vec<String> = rest.split("__").map(|s| s.to_ascii_lowercase()).collect();
            if path.iter().any(String::is_empty) {
                return Err(Error::Config(format!("malformed environment key {key}")));
            }
            set_path(&mut merged, &path, parse_scalar(raw), key)?;
        }
        if let Some(p) = file {
            let text = std::fs::read_to_string(p)?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            if !v.is_object() {
                return Err(Error::Config(format!(
                    "{}: expected a JSON object",
                    p.display()
                )));
            }
            merge(&mut merged, v);
        }
        for (key, v) in flags {
            let path: Vec<String> = key.split('.').map(str::to_string).collect();
            set_path(&mut merged, &path, v.clone(), key)?;
        }
        let c: RunConfig =
            serde_json::from_value(merged).map_err(|e| Error::Config(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }
}

/// Reads a flag or environment value as JSON, falling back to a string.
pub fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, path: &[String], v: Value, origin: &str) -> Result<()> {
    let mut cur = root;
    for (i, part) in path.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "{origin}: {} is not a section",
                path[..i].join(".")
            ))
        })?;
        if i + 1 == path.len() {
            obj.insert(part.clone(), v);
            return Ok(());
        }
        cur = obj
            .entry(part.clone())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    Err(Error::Config(format!("{origin}: empty key")))
}

fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}
