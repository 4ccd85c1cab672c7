//! Run configuration: a TOML file with sections, then `--set key=value` and
//! flag overrides, each checked against the known keys and logged.

use std::path::Path;

use dafrcnn::detector::DetectorConfig;
use dafrcnn::evaluation::{DEFAULT_TOP_P, DEFAULT_TOP_R};
use dafrcnn::synthdata::DatasetSpec;
use dafrcnn::training::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// IoU a detection needs to count as a match.
    pub iou: f32,
    /// Proposals per image for the mean-best-overlap measure.
    pub top_p: usize,
    /// Top-ranked detections examined by the error taxonomy.
    pub top_r: usize,
    /// Target scale factors for the scale sweep.
    pub scales: Vec<f32>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou: 0.5, top_p: DEFAULT_TOP_P, top_r: DEFAULT_TOP_R, scales: vec![0.4, 0.5, 0.6, 0.8, 1.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset written by `gen-data`.
    pub data: DatasetSpec,
    pub train: TrainConfig,
    pub detector: DetectorConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: String| CliError::Usage(format!("invalid config: {e}"));
        self.data.validate().map_err(|e| usage(e.to_string()))?;
        self.train.validate().map_err(|e| usage(e.to_string()))?;
        self.detector.validate().map_err(|e| usage(e.to_string()))?;
        if self.eval.scales.iter().any(|s| !(*s > 0.0)) {
            return Err(usage("eval.scales must be positive".into()));
        }
        Ok(())
    }
}

/// The defaults as TOML, for `--help`.
pub fn defaults_toml() -> String {
    toml::to_string(&RunConfig::default()).expect("defaults serialize")
}

pub fn defaults_help() -> String {
    format!(
        "Configuration (--config FILE, --set section.key=value); defaults:\n\n{}\nEnvironment: DA_DETECT_THREADS caps concurrent jobs (default 1).",
        defaults_toml()
    )
}

fn default_table() -> Table {
    Table::try_from(RunConfig::default()).expect("defaults serialize")
}

/// Fails on any key of `t` that the defaults do not have.
fn check_known(t: &Table, known: &Table, prefix: &str) -> Result<(), CliError> {
    for (k, v) in t {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match known.get(k) {
            None => return Err(CliError::Usage(format!("unknown config key {path:?}"))),
            Some(Value::Table(kt)) => {
                if let Value::Table(vt) = v {
                    check_known(vt, kt, &path)?;
                }
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Builds the effective config from an optional file plus overrides, in order.
pub struct ConfigBuilder {
    table: Table,
    known: Table,
}

impl ConfigBuilder {
    pub fn new(file: Option<&Path>) -> Result<Self, CliError> {
        let known = default_table();
        let table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                let t: Table = toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
                check_known(&t, &known, "")?;
                t
            }
            None => Table::new(),
        };
        Ok(Self { table, known })
    }

    /// `key=value` with a dotted key; the value is read as TOML, or as a bare
    /// string when it does not parse.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<(), CliError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {assignment:?}")))?;
        let value = toml::from_str::<Table>(&format!("v = {v}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(v.to_string()));
        self.set(k.trim(), value)
    }

    pub fn set(&mut self, key: &str, value: Value) -> Result<(), CliError> {
        let parts: Vec<&str> = key.split('.').collect();
        let mut known = &self.known;
        for (i, p) in parts.iter().enumerate() {
            match known.get(*p) {
                Some(Value::Table(t)) if i + 1 < parts.len() => known = t,
                Some(_) if i + 1 == parts.len() => {}
                _ => return Err(CliError::Usage(format!("unknown config key {key:?}"))),
            }
        }
        let mut t = &mut self.table;
        for p in &parts[..parts.len() - 1] {
            let entry = t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
            t = match entry {
                Value::Table(t) => t,
                _ => return Err(CliError::Usage(format!("config key {p:?} is not a section"))),
            };
        }
        log::info!("override {key} = {value}");
        t.insert(parts[parts.len() - 1].to_string(), value);
        Ok(())
    }

    pub fn set_opt<V: Into<Value>>(&mut self, key: &str, value: Option<V>) -> Result<(), CliError> {
        match value {
            Some(v) => self.set(key, v.into()),
            None => Ok(()),
        }
    }

    pub fn build(self) -> Result<RunConfig, CliError> {
        let cfg: RunConfig = self.table.try_into().map_err(|e: toml::de::Error| CliError::Usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
