//! Layered configuration: struct defaults, then a JSON or TOML file, then
//! dotted-key overrides from the command line.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::UsageError;

/// One `key=value` override. Values parse as JSON when they can and fall
/// back to plain strings, so `lr=1e-3` is a number and `fusion.mode=concat`
/// a string.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: Value,
}

impl Override {
    pub fn parse(text: &str) -> Result<Self, UsageError> {
        let (key, raw) = text
            .split_once('=')
            .ok_or_else(|| UsageError(format!("override `{text}` is not of the form key=value")))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(UsageError(format!("bad override key `{key}`")));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        Ok(Override {
            key: key.to_string(),
            value,
        })
    }

    /// The value split on commas, for matrix axes.
    pub fn list(&self) -> Vec<String> {
        match &self.value {
            Value::String(s) => s
                .split(',')
                .map(|x| x.trim().to_string())
                .filter(|x| !x.is_empty())
                .collect(),
            Value::Array(a) => a
                .iter()
                .map(|v| v.as_str().map_or_else(|| v.to_string(), String::from))
                .collect(),
            v => vec![v.to_string()],
        }
    }
}

/// Rewrites `--a.b value` and `--a.b=value` into `--set a.b=value` so every
/// nested config field is reachable as a flag without declaring it.
pub fn expand_dotted_flags(args: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let dotted = a
            .strip_prefix("--")
            .filter(|name| name.split('=').next().is_some_and(|k| k.contains('.')));
        match dotted {
            Some(name) if name.contains('=') => {
                out.push("--set".into());
                out.push(name.to_string());
            }
            Some(name) => match it.next() {
                Some(v) => {
                    out.push("--set".into());
                    out.push(format!("{name}={v}"));
                }
                None => out.push(a),
            },
            None => out.push(a),
        }
    }
    out
}

pub fn read_config_file(path: &Path) -> Result<Value, UsageError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    let is_toml = path.extension().is_some_and(|e| e == "toml");
    let value = if is_toml {
        let t: toml::Value =
            toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        serde_json::to_value(t).map_err(|e| UsageError(e.to_string()))?
    } else {
        serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?
    };
    if !value.is_object() {
        return Err(UsageError(format!(
            "{}: config must be a table/object",
            path.display()
        )));
    }
    Ok(value)
}

/// Recursively overlays `top` onto `base`; objects merge, everything else
/// replaces.
pub fn merge(base: &mut Value, top: Value) {
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

pub fn apply_override(root: &mut Value, o: &Override) -> Result<(), UsageError> {
    let mut node = root;
    let parts: Vec<&str> = o.key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map: &mut Map<String, Value> = node.as_object_mut().ok_or_else(|| {
            UsageError(format!(
                "`{}` is not a config section",
                parts[..i].join(".")
            ))
        })?;
        if i + 1 == parts.len() {
            if !map.contains_key(*part) {
                return Err(UsageError(format!("unknown config key `{}`", o.key)));
            }
            map.insert(part.to_string(), o.value.clone());
            return Ok(());
        }
        node = map
            .get_mut(*part)
            .ok_or_else(|| UsageError(format!("unknown config key `{}`", o.key)))?;
    }
    unreachable!("override keys have at least one part")
}

/// Defaults < file < overrides. Unset optional fields serialize as `null`,
/// so they remain addressable by key.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(
    file: Option<&Path>,
    overrides: &[Override],
) -> Result<T, UsageError> {
    let mut value = serde_json::to_value(T::default()).map_err(|e| UsageError(e.to_string()))?;
    if let Some(path) = file {
        let layer = read_config_file(path)?;
        merge(&mut value, layer);
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    serde_json::from_value(value).map_err(|e| UsageError(format!("invalid configuration: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use f4d::fusion::FusionMode;
    use f4d::trainer::TrainConfig;

    fn ov(s: &str) -> Override {
        Override::parse(s).unwrap()
    }

    #[test]
    fn values_parse_as_json_or_text() {
        assert_eq!(ov("lr=1e-3").value, serde_json::json!(1e-3));
        assert_eq!(ov("fusion.mode=concat").value, serde_json::json!("concat"));
        assert_eq!(ov("grad_clip=null").value, Value::Null);
        assert!(Override::parse("lr").is_err());
        assert!(Override::parse("a..b=1").is_err());
        assert_eq!(ov("x=a, b,c").list(), ["a", "b", "c"]);
    }

    #[test]
    fn dotted_flags_become_overrides() {
        let args = [
            "f4d",
            "train",
            "--fusion.mode",
            "concat",
            "--loss.lambda=0.2",
            "--out",
            "x",
        ];
        let out = expand_dotted_flags(args.iter().map(|s| s.to_string()));
        assert_eq!(
            out,
            [
                "f4d",
                "train",
                "--set",
                "fusion.mode=concat",
                "--set",
                "loss.lambda=0.2",
                "--out",
                "x"
            ]
        );
    }

    #[test]
    fn precedence_defaults_file_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"lr": 0.5, "max_iters": 7, "fusion": {"mode": "concat"}}"#,
        )
        .unwrap();
        let c: TrainConfig = resolve(Some(&path), &[ov("lr=0.25")]).unwrap();
        assert_eq!(c.lr, 0.25);
        assert_eq!(c.max_iters, 7);
        assert_eq!(c.fusion.mode, FusionMode::Concat);
        assert_eq!(c.batch_size, TrainConfig::default().batch_size);

        let toml_path = dir.path().join("c.toml");
        std::fs::write(
            &toml_path,
            "max_iters = 3\n[fusion]\nmode = \"single_cross_attn\"\n",
        )
        .unwrap();
        let c: TrainConfig = resolve(Some(&toml_path), &[]).unwrap();
        assert_eq!(c.max_iters, 3);
        assert_eq!(c.fusion.mode, FusionMode::SingleCrossAttn);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        assert!(resolve::<TrainConfig>(None, &[ov("no_such=1")]).is_err());
        assert!(resolve::<TrainConfig>(None, &[ov("lr.deep=1")]).is_err());
        assert!(resolve::<TrainConfig>(None, &[ov("fusion.mode=sideways")]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"lrr": 0.5}"#).unwrap();
        assert!(resolve::<TrainConfig>(Some(&path), &[]).is_err());
    }

    #[test]
    fn optional_fields_are_settable() {
        let c: TrainConfig = resolve(None, &[ov("grad_clip=1.5")]).unwrap();
        assert_eq!(c.grad_clip, Some(1.5));
    }
}
