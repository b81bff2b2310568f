//! JSON run configs layered over built-in defaults.
//!
//! A config file is an object of sections (`"train"`, `"model"`, ...). Each
//! key present in a section replaces the default value for that key; keys
//! the defaults do not know about are rejected so typos surface early.

use std::path::Path;

use argen::{Error, Result};
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

pub fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Overlays `user` onto `base` one section deep.
pub fn overlay(mut base: Value, user: Value) -> Result<Value> {
    let Value::Object(user) = user else {
        return Err(Error::Config("config root must be a JSON object".into()));
    };
    let root = base.as_object_mut().expect("defaults are an object");
    for (section, v) in user {
        let Some(slot) = root.get_mut(&section) else {
            return Err(Error::Config(format!("unknown config section {section:?}")));
        };
        match (slot, v) {
            (Value::Object(dst), Value::Object(src)) => merge_keys(&section, dst, src)?,
            (slot, v) => *slot = v,
        }
    }
    Ok(base)
}

fn merge_keys(section: &str, dst: &mut Map<String, Value>, src: Map<String, Value>) -> Result<()> {
    for (k, v) in src {
        match dst.get_mut(&k) {
            Some(slot) => *slot = v,
            None => return Err(Error::Config(format!("unknown key {section}.{k}"))),
        }
    }
    Ok(())
}

/// Reads the section `name` of a merged config.
pub fn section<T: DeserializeOwned>(merged: &Value, name: &str) -> Result<T> {
    let v = merged.get(name).cloned().unwrap_or(Value::Null);
    serde_json::from_value(v).map_err(|e| Error::Config(format!("section {name:?}: {e}")))
}

/// Defaults merged with the file at `path`, if any.
pub fn load(path: Option<&Path>, defaults: Value) -> Result<Value> {
    match path {
        Some(p) => overlay(defaults, read_json(p)?),
        None => Ok(defaults),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_replace_defaults() {
        let base = json!({"train": {"steps": 10, "seed": 0}, "preset": "nano"});
        let m = overlay(base, json!({"train": {"steps": 3}, "preset": "micro"})).unwrap();
        assert_eq!(m, json!({"train": {"steps": 3, "seed": 0}, "preset": "micro"}));
    }

    #[test]
    fn unknown_names_rejected() {
        let base = json!({"train": {"steps": 10}});
        assert!(overlay(base.clone(), json!({"trian": {}})).is_err());
        assert!(overlay(base.clone(), json!({"train": {"stpes": 1}})).is_err());
        assert!(overlay(base, json!([1, 2])).is_err());
    }
}
