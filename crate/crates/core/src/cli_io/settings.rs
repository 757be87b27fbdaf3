//! Config loading: JSON file, then `BLDA_*` environment overrides.
//!
//! An override `BLDA_TRAIN__ITERATIONS=500` sets `train.iterations`; path
//! segments are separated by `__` and matched case-insensitively. Values are
//! parsed as JSON when possible and taken as strings otherwise.

use std::path::Path;

use serde_json::{Map, Value};

use crate::config::Config;
use crate::error::{BldaError, Result};

pub const ENV_PREFIX: &str = "BLDA_";

/// Top-level keys tolerated in config files but not part of [`Config`].
const IGNORED_KEYS: [&str; 1] = ["provenance"];

fn defaults_tree() -> Value {
    serde_json::to_value(Config::default()).expect("config serializes")
}

/// Rejects keys that do not exist in the default config tree.
fn check_keys(value: &Value, reference: &Value, path: &str) -> Result<()> {
    if let (Value::Object(v), Value::Object(r)) = (value, reference) {
        for (k, child) in v {
            if path.is_empty() && IGNORED_KEYS.contains(&k.as_str()) {
                continue;
            }
            let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
            match r.get(k) {
                Some(rc) => check_keys(child, rc, &here)?,
                None => return Err(BldaError::Config(format!("unknown key `{here}`"))),
            }
        }
    }
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies overrides from `vars` onto `tree`. Only objects that exist in the
/// default config can be traversed, so misspelled keys are errors.
fn apply_overrides<I, K, V>(tree: &mut Value, vars: I) -> Result<()>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let reference = defaults_tree();
    let mut overrides: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            k.as_ref()
                .strip_prefix(ENV_PREFIX)
                .map(|rest| (rest.to_ascii_lowercase(), v.as_ref().to_string()))
        })
        .collect();
    // Environment order is unspecified.
    overrides.sort();
    for (key, raw) in overrides {
        let segments: Vec<&str> = key.split("__").collect();
        let mut known = &reference;
        for s in &segments {
            known = known
                .get(s)
                .ok_or_else(|| BldaError::Config(format!("unknown override {ENV_PREFIX}{}", key.to_uppercase())))?;
        }
        let (leaf, parents) = segments.split_last().expect("split yields one segment");
        let mut node = &mut *tree;
        for s in parents {
            let obj = as_object(node)?;
            node = obj.entry(s.to_string()).or_insert_with(|| Value::Object(Map::new()));
        }
        as_object(node)?.insert(leaf.to_string(), parse_value(&raw));
    }
    Ok(())
}

fn as_object(v: &mut Value) -> Result<&mut Map<String, Value>> {
    v.as_object_mut()
        .ok_or_else(|| BldaError::Config("override path crosses a non-object value".into()))
}

/// Builds a validated config from an optional file and explicit variables.
pub fn resolve_config<I, K, V>(file: Option<&Path>, vars: I) -> Result<Config>
where
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let mut tree = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| BldaError::io(p, e))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| BldaError::Config(format!("{}: {e}", p.display())))?;
            if !v.is_object() {
                return Err(BldaError::Config(format!("{}: expected a JSON object", p.display())));
            }
            check_keys(&v, &defaults_tree(), "")?;
            v
        }
        None => Value::Object(Map::new()),
    };
    if let Some(obj) = tree.as_object_mut() {
        for k in IGNORED_KEYS {
            obj.remove(k);
        }
    }
    apply_overrides(&mut tree, vars)?;
    let cfg: Config = serde_json::from_value(tree).map_err(|e| BldaError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// [`resolve_config`] over the process environment.
pub fn load_config(file: Option<&Path>) -> Result<Config> {
    resolve_config(file, std::env::vars())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::QualityRule;

    fn none() -> Vec<(String, String)> {
        Vec::new()
    }

    #[test]
    fn defaults_without_file_or_env() {
        assert_eq!(resolve_config(None, none()).unwrap(), Config::default());
    }

    #[test]
    fn env_overrides_nested_keys() {
        let cfg = resolve_config(
            None,
            [
                ("BLDA_LOSS__TAU", "1.0"),
                ("BLDA_TRAIN__ITERATIONS", "50"),
                ("BLDA_LOSS__QUALITY__RULE", "linear"),
                ("PATH", "/usr/bin"),
            ],
        )
        .unwrap();
        assert_eq!(cfg.loss.tau, 1.0);
        assert_eq!(cfg.train.iterations, 50);
        assert_eq!(cfg.loss.quality, QualityRule::Linear);
    }

    #[test]
    fn env_beats_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 3, "loss": {"tau": 0.5}}"#).unwrap();
        let cfg = resolve_config(Some(&p), [("BLDA_SEED", "9")]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.loss.tau, 0.5);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = resolve_config(None, [("BLDA_LOSS__TAUU", "1")]).unwrap_err();
        assert_eq!(err.code(), "E_CONFIG");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"train": {"iters": 5}}"#).unwrap();
        assert!(resolve_config(Some(&p), none()).unwrap_err().to_string().contains("train.iters"));
    }

    #[test]
    fn invalid_values_rejected() {
        assert_eq!(resolve_config(None, [("BLDA_LOSS__TAU", "-1")]).unwrap_err().code(), "E_CONFIG");
        assert_eq!(resolve_config(None, [("BLDA_N_MIN", "many")]).unwrap_err().code(), "E_CONFIG");
    }

    #[test]
    fn emitted_config_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let mut v = serde_json::to_value(Config::default()).unwrap();
        v["provenance"] = serde_json::json!({"seed": 0});
        std::fs::write(&p, v.to_string()).unwrap();
        assert_eq!(resolve_config(Some(&p), none()).unwrap(), Config::default());
    }
}
