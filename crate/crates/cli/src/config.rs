//! Layered settings: preset defaults, then a JSON file, then flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Overlays `file` on `base`, recursing into objects.
fn overlay(base: &mut Value, file: Value) {
    match (base, file) {
        (Value::Object(b), Value::Object(f)) => {
            for (k, v) in f {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Keys of `v` (recursively) missing from `reference`.
fn unknown_keys(v: &Value, reference: &Value, path: &str, out: &mut Vec<String>) {
    if let (Value::Object(a), Value::Object(r)) = (v, reference) {
        for (k, x) in a {
            let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
            match r.get(k) {
                Some(y) => unknown_keys(x, y, &here, out),
                None => out.push(here),
            }
        }
    }
}

/// `base` with the JSON object in `file` layered on top. Every key in the
/// file must exist in the base so typos surface as errors.
pub fn layered<T: Serialize + DeserializeOwned>(base: &T, file: Option<&Path>) -> Result<T> {
    let Some(path) = file else {
        return Ok(serde_json::from_value(serde_json::to_value(base)?)?);
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
    let over: Value = serde_json::from_str(&text).with_context(|| format!("config file {} is not valid JSON", path.display()))?;
    if !over.is_object() {
        bail!("config file {} must hold a JSON object", path.display());
    }
    let mut merged = serde_json::to_value(base)?;
    let reference = merged.clone();
    let mut unknown = Vec::new();
    unknown_keys(&over, &reference, "", &mut unknown);
    if !unknown.is_empty() {
        bail!("config file {} has unknown keys: {}", path.display(), unknown.join(", "));
    }
    overlay(&mut merged, over);
    serde_json::from_value(merged).with_context(|| format!("config file {} does not match the settings schema", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use swarmwm_core::SimConfig;

    #[test]
    fn file_overrides_preset_fields_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"alpha": 2.5, "noise": {"sigma_meas": 0.5}}"#).unwrap();
        let c = layered(&SimConfig::ci(), Some(&p)).unwrap();
        assert_eq!(c.alpha, 2.5);
        assert_eq!(c.noise.sigma_meas, 0.5);
        assert_eq!(c.noise.tau, SimConfig::ci().noise.tau);
        assert_eq!(c.demonstrations, SimConfig::ci().demonstrations);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"noise": {"sigma_mesa": 0.5}}"#).unwrap();
        let e = layered(&SimConfig::ci(), Some(&p)).unwrap_err();
        assert!(format!("{e:#}").contains("noise.sigma_mesa"));
    }

    #[test]
    fn wrong_types_are_schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"alpha": "high"}"#).unwrap();
        assert!(format!("{:#}", layered(&SimConfig::ci(), Some(&p)).unwrap_err()).contains("schema"));
    }
}
