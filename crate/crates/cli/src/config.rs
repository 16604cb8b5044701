//! JSON config files. A `"mode"` key selects a campaign or a single custom
//! experiment; everything else must be a known field.

use std::fmt;
use std::path::{Path, PathBuf};

use neurotrain::trainers::trainer_meta;
use neurotrain::{CampaignSpec, CustomSpec};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq)]
pub enum Experiment {
    Campaign(CampaignSpec),
    Custom(CustomSpec),
}

impl Experiment {
    pub fn mode(&self) -> &'static str {
        match self {
            Experiment::Campaign(_) => "campaign",
            Experiment::Custom(_) => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub experiment: Experiment,
    /// Dataset root, relative to the config file unless absolute.
    pub data_dir: Option<PathBuf>,
    /// Output directory, relative to the config file unless absolute.
    pub out: Option<PathBuf>,
}

/// A config problem with the file and the JSON location it concerns.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub origin: String,
    pub location: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: at {}: {}", self.origin, self.location, self.message)
    }
}

impl std::error::Error for ConfigError {}

impl ConfigFile {
    /// Parses and validates. `origin` only labels error messages.
    pub fn parse(text: &str, origin: &str) -> Result<ConfigFile, ConfigError> {
        let err = |location: String, message: String| ConfigError {
            origin: origin.to_string(),
            location,
            message,
        };
        let value: Value = serde_json::from_str(text).map_err(|e| {
            err(
                format!("line {} column {}", e.line(), e.column()),
                format!("invalid JSON: {e}"),
            )
        })?;
        let Value::Object(mut obj) = value else {
            return Err(err("the top level".into(), "a config must be a JSON object".into()));
        };
        let mode = match obj.remove("mode") {
            Some(Value::String(s)) => s,
            Some(other) => {
                return Err(err(
                    "`mode`".into(),
                    format!("expected \"campaign\" or \"custom\", got {other}"),
                ))
            }
            None => {
                return Err(err(
                    "the top level".into(),
                    "missing key `mode` (\"campaign\" or \"custom\")".into(),
                ))
            }
        };
        let data_dir = take_path(&mut obj, "data_dir").map_err(|m| err("`data_dir`".into(), m))?;
        let out = take_path(&mut obj, "out").map_err(|m| err("`out`".into(), m))?;
        let rest = Value::Object(obj);
        let experiment = match mode.as_str() {
            "campaign" => Experiment::Campaign(deserialize(rest).map_err(|(l, m)| err(l, m))?),
            "custom" => Experiment::Custom(deserialize(rest).map_err(|(l, m)| err(l, m))?),
            other => {
                return Err(err(
                    "`mode`".into(),
                    format!("unknown mode `{other}`, expected \"campaign\" or \"custom\""),
                ))
            }
        };
        validate(&experiment).map_err(|m| err("the top level".into(), m))?;
        Ok(ConfigFile {
            experiment,
            data_dir,
            out,
        })
    }

    pub fn load(path: &Path) -> anyhow::Result<ConfigFile> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        Ok(ConfigFile::parse(&text, &path.display().to_string())?)
    }

    pub fn to_value(&self) -> Value {
        let spec = match &self.experiment {
            Experiment::Campaign(s) => serde_json::to_value(s),
            Experiment::Custom(s) => serde_json::to_value(s),
        };
        let Ok(Value::Object(fields)) = spec else {
            unreachable!("specs serialize to objects");
        };
        let mut obj = Map::new();
        obj.insert("mode".into(), Value::String(self.experiment.mode().into()));
        for (k, p) in [("data_dir", &self.data_dir), ("out", &self.out)] {
            if let Some(p) = p {
                obj.insert(k.into(), Value::String(p.display().to_string()));
            }
        }
        obj.extend(fields);
        Value::Object(obj)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_value()).expect("values always serialize")
    }
}

fn take_path(obj: &mut Map<String, Value>, key: &str) -> Result<Option<PathBuf>, String> {
    match obj.remove(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) if !s.is_empty() => Ok(Some(PathBuf::from(s))),
        Some(other) => Err(format!("expected a non-empty path string, got {other}")),
    }
}

fn deserialize<T: serde::de::DeserializeOwned>(v: Value) -> Result<T, (String, String)> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        let location = if path == "." {
            "the top level".to_string()
        } else {
            format!("`{path}`")
        };
        (location, e.into_inner().to_string())
    })
}

fn validate(e: &Experiment) -> Result<(), String> {
    match e {
        Experiment::Campaign(s) => s.validate().map_err(|e| e.to_string()),
        Experiment::Custom(s) => {
            trainer_meta(&s.trainer).map_err(|e| e.to_string())?;
            s.model.validate().map_err(|e| e.to_string())?;
            if let neurotrain::DatasetSpec::Synth(d) = &s.dataset {
                d.validate().map_err(|e| e.to_string())?;
            }
            s.training
                .fit_config(s.epochs, s.seed)
                .validate()
                .map_err(|e| e.to_string())
        }
    }
}

/// `p` against the directory holding the config file, unless absolute.
pub fn relative_to(config: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match config.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => dir.join(p),
        _ => p.to_path_buf(),
    }
}
