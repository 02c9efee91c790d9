use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parse a config file: JSON when the extension says so, TOML otherwise.
pub fn read_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    };
    Ok(value)
}

/// `flags` with every key present in the file replaced; nested tables merge
/// key by key. Unknown keys are rejected by the target type.
pub fn overlay<T: Serialize + DeserializeOwned>(flags: T, file: Option<&Path>) -> Result<T> {
    let Some(path) = file else {
        return Ok(flags);
    };
    let mut value = serde_json::to_value(&flags)?;
    merge(&mut value, read_file(path)?);
    serde_json::from_value(value).with_context(|| format!("applying {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Inner {
        a: u32,
        b: String,
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Outer {
        n: u32,
        inner: Inner,
    }

    fn outer() -> Outer {
        Outer { n: 1, inner: Inner { a: 2, b: "x".into() } }
    }

    #[test]
    fn file_keys_win_and_nested_tables_merge() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "n = 5\n[inner]\nb = \"y\"\n").unwrap();
        let got = overlay(outer(), Some(&p)).unwrap();
        assert_eq!(got, Outer { n: 5, inner: Inner { a: 2, b: "y".into() } });
    }

    #[test]
    fn json_files_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"inner": {"a": 9}}"#).unwrap();
        assert_eq!(overlay(outer(), Some(&p)).unwrap().inner.a, 9);
        std::fs::write(&p, r#"{"nope": 1}"#).unwrap();
        assert!(overlay(outer(), Some(&p)).is_err());
    }

    #[test]
    fn no_file_is_identity() {
        assert_eq!(overlay(outer(), None).unwrap(), outer());
    }
}
