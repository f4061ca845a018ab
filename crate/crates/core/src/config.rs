//! JSON configuration files.
//!
//! Every file is a JSON object carrying `"schema_version": 1`. A training
//! config may name a `"profile"` (`"desk"` or `"paper"`) and overrides any
//! [`TrainConfig`] field on top of it; nested objects merge key by key.
//!
//! ```json
//! {"schema_version": 1, "profile": "desk", "rounds": 4, "optimizer": {"lr_heads": 0.1}}
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::trainer::{Profile, TrainConfig};

pub const SCHEMA_VERSION: u64 = 1;

/// Removes and checks `schema_version`, returning the remaining object.
pub fn strip_version(value: Value) -> Result<Map<String, Value>> {
    let Value::Object(mut map) = value else {
        return Err(Error::Config("config must be a JSON object".into()));
    };
    match map.remove("schema_version") {
        Some(Value::Number(n)) if n.as_u64() == Some(SCHEMA_VERSION) => Ok(map),
        Some(v) => Err(Error::Config(format!("unsupported schema_version {v}"))),
        None => Err(Error::Config("missing schema_version".into())),
    }
}

/// Recursively overlays `patch` onto `base`; non-object values replace.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

fn config_err(e: serde_json::Error) -> Error {
    Error::Config(e.to_string())
}

/// Applies a partial override object to a full training config.
pub fn apply_overrides(base: &TrainConfig, overrides: &Value) -> Result<TrainConfig> {
    let mut v = serde_json::to_value(base).map_err(config_err)?;
    merge(&mut v, overrides);
    let cfg: TrainConfig = serde_json::from_value(v).map_err(config_err)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses a training config. `profile` picks the base constants when the
/// file does not name one.
pub fn parse_train_config(text: &str, profile: Profile) -> Result<TrainConfig> {
    let mut map = strip_version(serde_json::from_str(text).map_err(config_err)?)?;
    let profile = match map.remove("profile") {
        Some(p) => serde_json::from_value(p).map_err(config_err)?,
        None => profile,
    };
    apply_overrides(&TrainConfig::for_profile(profile), &Value::Object(map))
}

pub fn load_train_config(path: impl AsRef<Path>, profile: Profile) -> Result<TrainConfig> {
    parse_train_config(&fs::read_to_string(path)?, profile)
}

/// Parses a versioned file into any config type (unknown keys rejected by
/// the type itself).
pub fn parse_versioned<T: DeserializeOwned>(text: &str) -> Result<T> {
    let map = strip_version(serde_json::from_str(text).map_err(config_err)?)?;
    serde_json::from_value(Value::Object(map)).map_err(config_err)
}

pub fn load_synth_config(path: impl AsRef<Path>) -> Result<SynthConfig> {
    let cfg: SynthConfig = parse_versioned(&fs::read_to_string(path)?)?;
    cfg.validate()?;
    Ok(cfg)
}
