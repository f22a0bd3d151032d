//! `key = value` configuration files for the convergence CLI.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::estimators::JumpMode;
use crate::report::ReportFormat;
use crate::study::StudyConfig;
use crate::timeloop::InitialState;

pub const KEYS: [&str; 12] = [
    "levels",
    "n0",
    "dt",
    "t_final",
    "alpha_e",
    "out",
    "format",
    "include_eta_data",
    "jump",
    "initial",
    "parallel",
    "seed",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("key `{key}`: cannot parse `{value}`: {reason}")]
    Value {
        key: String,
        value: String,
        reason: String,
    },
}

/// Parsed file contents. Keys accept `-` or `_`; `#` starts a comment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .ok_or(ConfigError::Syntax { line })?;
            let key = k.trim().replace('-', "_").to_ascii_lowercase();
            let value = v.trim().trim_matches('"').to_string();
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::Syntax { line });
            }
            if !KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey { line, key });
            }
            if values.insert(key.clone(), value).is_some() {
                return Err(ConfigError::Duplicate { line, key });
            }
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| ConfigError::Value {
                    key: key.to_string(),
                    value: v.clone(),
                    reason: e.to_string(),
                })
            })
            .transpose()
    }
}

/// Values given on the command line; `None` means not given.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub levels: Option<usize>,
    pub n0: Option<usize>,
    pub dt: Option<f64>,
    pub t_final: Option<f64>,
    pub alpha_e: Option<f64>,
    pub out: Option<PathBuf>,
    pub format: Option<ReportFormat>,
    pub include_eta_data: Option<bool>,
    pub jump: Option<JumpMode>,
    pub initial: Option<InitialState>,
    pub parallel: Option<bool>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSettings {
    pub study: StudyConfig,
    pub out: Option<PathBuf>,
    pub format: ReportFormat,
}

/// Command line first, then the file, then the built-in defaults.
pub fn resolve(cli: &Overrides, file: &ConfigFile) -> Result<RunSettings, ConfigError> {
    let d = StudyConfig::default();
    let study = StudyConfig {
        levels: cli.levels.or(file.get("levels")?).unwrap_or(d.levels),
        n0: cli.n0.or(file.get("n0")?).unwrap_or(d.n0),
        dt: cli.dt.or(file.get("dt")?).unwrap_or(d.dt),
        t_final: cli.t_final.or(file.get("t_final")?).unwrap_or(d.t_final),
        alpha_e: cli.alpha_e.or(file.get("alpha_e")?).unwrap_or(d.alpha_e),
        jump: cli.jump.or(file.get("jump")?).unwrap_or(d.jump),
        include_eta_data: cli
            .include_eta_data
            .or(file.get("include_eta_data")?)
            .unwrap_or(d.include_eta_data),
        initial: cli.initial.or(file.get("initial")?).unwrap_or(d.initial),
        parallel: cli.parallel.or(file.get("parallel")?).unwrap_or(d.parallel),
        seed: cli.seed.or(file.get("seed")?).unwrap_or(d.seed),
        ..d
    };
    Ok(RunSettings {
        study,
        out: cli.out.clone().or(file.get("out")?),
        format: cli
            .format
            .or(file.get("format")?)
            .unwrap_or(ReportFormat::Csv),
    })
}
