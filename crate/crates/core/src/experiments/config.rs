use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{Error, Result};

/// Parses `key.path=value`. The value is read as a TOML literal when it
/// parses as one and as a bare string otherwise.
pub fn parse_override(text: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(|s| s.trim().to_string()).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override `{text}` has an empty key segment")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key was just parsed"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((path, value))
}

pub fn apply_override(root: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("parse_override rejects empty keys");
    let mut table = root;
    for (depth, seg) in parents.iter().enumerate() {
        let slot = table.entry(seg.clone()).or_insert_with(|| Value::Table(Table::new()));
        table = slot.as_table_mut().ok_or_else(|| {
            Error::Config(format!("`{}` is not a table", path[..=depth].join(".")))
        })?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

/// Recursively overlays `top` onto `base`; tables merge, everything else replaces.
pub fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Builds a value from its defaults, an optional TOML file and `key=value`
/// overrides, applied in that order.
pub fn layered<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut root = match Value::try_from(defaults) {
        Ok(Value::Table(t)) => t,
        Ok(_) => return Err(Error::Config("configuration defaults must be a table".into())),
        Err(e) => return Err(Error::Config(format!("cannot encode defaults: {e}"))),
    };
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let table: Table = text
            .parse()
            .map_err(|e| Error::parse(path.display().to_string(), e))?;
        merge(&mut root, table);
    }
    for o in overrides {
        let (path, value) = parse_override(o)?;
        apply_override(&mut root, &path, value)?;
    }
    Value::Table(root).try_into().map_err(|e| Error::Config(e.to_string()))
}

/// SHA-256 of the value's JSON form. serde_json keeps object keys sorted,
/// so the hash does not depend on field or map insertion order.
pub fn canonical_hash<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let canonical = serde_json::to_value(value).map_err(|e| Error::parse("canonical form", e))?;
    let bytes = serde_json::to_vec(&canonical).map_err(|e| Error::parse("canonical form", e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path.display().to_string(), e))?;
    fs::write(path, text + "\n").map_err(Error::io(path))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_values() {
        let (p, v) = parse_override("train.epochs=3").unwrap();
        assert_eq!(p, vec!["train", "epochs"]);
        assert_eq!(v, Value::Integer(3));
        assert_eq!(parse_override("a=resnet18_1d").unwrap().1, Value::String("resnet18_1d".into()));
        assert_eq!(parse_override("a=[1, 2]").unwrap().1.as_array().unwrap().len(), 2);
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
    }

    #[test]
    fn nested_override_creates_tables() {
        let mut t = Table::new();
        apply_override(&mut t, &["x".into(), "y".into()], Value::Float(0.5)).unwrap();
        assert_eq!(t["x"]["y"].as_float(), Some(0.5));
        let mut leaf: Table = "x = 1".parse().unwrap();
        assert!(apply_override(&mut leaf, &["x".into(), "y".into()], Value::Integer(2)).is_err());
    }

    #[test]
    fn hash_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"a": 1, "b": [1, 2]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"b": [1, 2], "a": 1}"#).unwrap();
        assert_eq!(canonical_hash(&a).unwrap(), canonical_hash(&b).unwrap());
        assert_eq!(canonical_hash(&a).unwrap().len(), 64);
    }
}
