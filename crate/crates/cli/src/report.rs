use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Config, SCHEMA_VERSION};
use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub relation: Relation,
    pub passed: bool,
}

/// Collected pass/fail checks. Upper bounds are scaled, lower bounds are not.
#[derive(Debug)]
pub struct Checks {
    scale: f64,
    pub items: Vec<Check>,
}

impl Checks {
    pub fn new(scale: f64) -> Self {
        Self {
            scale,
            items: Vec::new(),
        }
    }

    pub fn at_most(&mut self, name: impl Into<String>, value: f64, bound: f64) {
        let bound = bound * self.scale;
        self.items.push(Check {
            name: name.into(),
            value,
            bound,
            relation: Relation::AtMost,
            passed: value <= bound,
        });
    }

    pub fn at_least(&mut self, name: impl Into<String>, value: f64, bound: f64) {
        self.items.push(Check {
            name: name.into(),
            value,
            bound,
            relation: Relation::AtLeast,
            passed: value >= bound,
        });
    }

    pub fn failed(&self) -> Vec<String> {
        self.items.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect()
    }
}

#[derive(Debug, Serialize)]
pub struct Report<'a> {
    pub schema_version: u32,
    pub command: &'a str,
    pub config_hash: String,
    pub tolerance_scale: f64,
    pub passed: bool,
    pub checks: &'a [Check],
    pub results: serde_json::Value,
}

/// SHA-256 of the effective config, serialized canonically. The output
/// location does not enter the hash.
pub fn config_hash(cfg: &Config) -> Result<String, CliError> {
    let mut cfg = cfg.clone();
    cfg.output.dir = None;
    let canonical = serde_json::to_vec(&cfg)?;
    Ok(Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect())
}

pub struct OutDir(pub PathBuf);

impl OutDir {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(Self(path.to_path_buf()))
    }

    pub fn csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<(), CliError> {
        let path = self.0.join(name);
        let err = |e| CliError::Csv {
            path: path.clone(),
            source: e,
        };
        let mut w = csv::Writer::from_path(&path).map_err(err)?;
        for r in rows {
            w.serialize(r).map_err(err)?;
        }
        w.flush().map_err(|e| CliError::Io {
            path: path.clone(),
            source: e,
        })
    }

    pub fn report(&self, cfg: &Config, command: &str, scale: f64, checks: &Checks, results: serde_json::Value) -> Result<(), CliError> {
        let report = Report {
            schema_version: SCHEMA_VERSION,
            command,
            config_hash: config_hash(cfg)?,
            tolerance_scale: scale,
            passed: checks.failed().is_empty(),
            checks: &checks.items,
            results,
        };
        let path = self.0.join("report.json");
        let text = serde_json::to_string_pretty(&report)?;
        fs::write(&path, text + "\n").map_err(|e| CliError::Io { path, source: e })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_only_loosens_upper_bounds() {
        let mut c = Checks::new(10.0);
        c.at_most("a", 5e-9, 1e-9);
        c.at_least("b", 2.4, 2.5);
        c.at_most("c", f64::NAN, 1.0);
        assert_eq!(c.failed(), vec!["b".to_string(), "c".to_string()]);
    }

    #[test]
    fn hash_is_stable() {
        let cfg = Config::parse("[market]\n[utility]\nkind = \"log\"\n").unwrap();
        let h = config_hash(&cfg).unwrap();
        assert_eq!(h.len(), 64);
        assert_eq!(h, config_hash(&cfg.clone()).unwrap());
    }
}
