//! Resolution of a run configuration from a preset, a config file and
//! `--set` overrides.

use std::path::Path;

use crnp::experiment::{Preset, RunConfig};
use serde_json::{Map, Value};

use crate::Failure;

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string (`fusion_fn=concat`).
fn parse_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .and_then(|v| serde_json::to_value(v).ok())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn read_file(path: &Path) -> Result<Value, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let value = if is_json {
        serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
    } else {
        let table: toml::Table = toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        serde_json::to_value(table).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
    };
    match value {
        Value::Object(_) => Ok(value),
        _ => Err(Failure::config(format!("{}: expected a table of settings", path.display()))),
    }
}

/// Recursively overlays `top` onto `base`; tables merge, everything else
/// replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
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

/// Sets the dotted `key` in `root`, refusing keys the configuration lacks.
fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<(), Failure> {
    let unknown = || Failure::config(format!("unknown configuration key `{key}`"));
    let mut node = root;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
        let table = node.as_object_mut().ok_or_else(unknown)?;
        if parts.peek().is_none() {
            if !table.contains_key(part) && !table.is_empty() {
                return Err(unknown());
            }
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table.get_mut(part).ok_or_else(unknown)?;
    }
    Err(unknown())
}

fn split_override(raw: &str) -> Result<(&str, &str), Failure> {
    raw.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Failure::config(format!("override `{raw}` is not of the form key=value")))
}

/// Preset defaults, then the file, then each override in order.
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, Failure> {
    let file_value = file.map(read_file).transpose()?;
    let sets = overrides
        .iter()
        .map(|raw| split_override(raw).map(|(k, v)| (k, parse_value(v))))
        .collect::<Result<Vec<_>, _>>()?;

    let mut preset = file_value.as_ref().and_then(|v| v.get("preset")).cloned();
    for (k, v) in &sets {
        if *k == "preset" {
            preset = Some(v.clone());
        }
    }
    let preset: Option<Preset> = match preset {
        None | Some(Value::Null) => None,
        Some(v) => Some(serde_json::from_value(v).map_err(|e| Failure::config(format!("preset: {e}")))?),
    };
    let base = preset.map_or_else(RunConfig::default, RunConfig::preset);
    let mut value = serde_json::to_value(&base).expect("run config serializes");

    if let Some(v) = file_value {
        merge(&mut value, v);
    }
    for (k, v) in sets {
        set_dotted(&mut value, k, v)?;
    }
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Failure::config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_parse_as_toml_or_strings() {
        assert_eq!(parse_value("0.5"), Value::from(0.5));
        assert_eq!(parse_value("3"), Value::from(3));
        assert_eq!(parse_value("true"), Value::from(true));
        assert_eq!(parse_value("[1, 2]"), serde_json::json!([1, 2]));
        assert_eq!(parse_value("concat"), Value::from("concat"));
        assert_eq!(parse_value("\"quoted\""), Value::from("quoted"));
    }

    #[test]
    fn overrides_are_last_writer_wins() {
        let cfg = resolve(None, &["lr=0.1".into(), "lr=0.2".into()]).unwrap();
        assert_eq!(cfg.lr, 0.2);
    }

    #[test]
    fn nested_and_null_keys_are_settable() {
        let cfg = resolve(None, &["seg2d.size=16".into(), "rnp_lr=0.01".into(), "norm_scope=global".into()]).unwrap();
        assert_eq!(cfg.seg2d.size, 16);
        assert_eq!(cfg.rnp_lr, Some(0.01));
    }

    #[test]
    fn unknown_keys_are_named() {
        for key in ["learning_rate=1", "seg2d.sise=3", "lr.x=1"] {
            let err = resolve(None, &[key.into()]).unwrap_err();
            assert_eq!(err.code, 2);
            assert!(err.message.contains(key.split('=').next().unwrap()), "{}", err.message);
        }
    }

    #[test]
    fn preset_override_changes_the_base() {
        let cfg = resolve(None, &["preset=seg2d".into(), "seed=4".into()]).unwrap();
        assert_eq!(cfg, RunConfig { seed: 4, ..RunConfig::preset(Preset::Seg2d) });
    }
}
