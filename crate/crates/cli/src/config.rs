//! Run configuration: a TOML document of flat dotted keys mirroring
//! [`ModelConfig`] plus a `paths` section.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crener::config::ModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

pub const SEED_ENV: &str = "CRENER_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub vectors_sidecar: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub paths: Paths,
}

impl RunConfig {
    fn to_json(&self) -> Value {
        let mut root = serde_json::to_value(&self.model).expect("config serializes");
        let paths = serde_json::to_value(&self.paths).expect("paths serialize");
        root.as_object_mut().expect("config is an object").insert("paths".into(), paths);
        root
    }

    fn from_json(mut root: Value) -> Result<Self, serde_json::Error> {
        let paths = root.as_object_mut().and_then(|m| m.remove("paths")).unwrap_or(Value::Null);
        Ok(Self { model: serde_json::from_value(root)?, paths: serde_json::from_value(paths)? })
    }
}

fn flatten_json(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                flatten_json(&join(prefix, k), v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn flatten_toml(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = join(prefix, k);
        match v {
            toml::Value::Table(t) => flatten_toml(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

fn toml_to_json(v: &toml::Value) -> Result<Value, String> {
    Ok(match v {
        toml::Value::String(s) => Value::String(s.clone()),
        toml::Value::Integer(i) => Value::from(*i),
        toml::Value::Float(f) => serde_json::Number::from_f64(*f).map(Value::Number).ok_or("non-finite float")?,
        toml::Value::Boolean(b) => Value::Bool(*b),
        toml::Value::Array(items) => Value::Array(items.iter().map(toml_to_json).collect::<Result<_, _>>()?),
        toml::Value::Datetime(d) => Value::String(d.to_string()),
        toml::Value::Table(_) => return Err("nested tables are not allowed as values".into()),
    })
}

/// Every addressable key with its default value.
pub fn default_keys() -> BTreeMap<String, Value> {
    let mut keys = BTreeMap::new();
    flatten_json("", &RunConfig::default().to_json(), &mut keys);
    keys
}

/// Parses the right-hand side of `--set key=value` as a TOML value, falling
/// back to a bare string.
fn parse_override(raw: &str) -> Result<(String, toml::Value), String> {
    let (key, value) = raw.split_once('=').ok_or_else(|| format!("override {raw:?} is not key=value"))?;
    let key = key.trim().to_string();
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key, parsed))
}

fn set_path(root: &mut Value, key: &str, value: Value) {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_object_mut()
            .expect("known keys address objects")
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    node.as_object_mut().expect("known keys address objects").insert(parts[parts.len() - 1].to_string(), value);
}

/// Applies `(key, value)` pairs over the defaults, rejecting unknown keys.
pub fn build(pairs: &[(String, toml::Value)]) -> Result<RunConfig, CliError> {
    let known = default_keys();
    let mut root = RunConfig::default().to_json();
    for (key, value) in pairs {
        if !known.contains_key(key) {
            return Err(CliError::Config(format!("unknown config key {key:?}")));
        }
        let json = toml_to_json(value).map_err(|e| CliError::Config(format!("{key}: {e}")))?;
        set_path(&mut root, key, json);
    }
    let cfg = RunConfig::from_json(root).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.model.validate().map_err(|e| CliError::Config(e.0))?;
    Ok(cfg)
}

/// Loads `path` (if given), then the seed environment variable, then the
/// `--set` overrides, in increasing precedence.
pub fn load(path: Option<&Path>, overrides: &[String], seed_env: Option<&str>) -> Result<RunConfig, CliError> {
    let mut pairs = Vec::new();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let table: toml::Table = text.parse().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        flatten_toml("", &table, &mut pairs);
    }
    if let Some(seed) = seed_env {
        let seed: i64 = seed
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={seed:?} is not a non-negative integer")))?;
        pairs.push(("optimizer.seed".into(), toml::Value::Integer(seed)));
    }
    for raw in overrides {
        pairs.push(parse_override(raw).map_err(CliError::Config)?);
    }
    build(&pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_and_table_syntax_agree() {
        let flat: toml::Table = "encoder.layers = 2\nablations.no_dilated_conv = true\n".parse().unwrap();
        let nested: toml::Table = "[encoder]\nlayers = 2\n[ablations]\nno_dilated_conv = true\n".parse().unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        flatten_toml("", &flat, &mut a);
        flatten_toml("", &nested, &mut b);
        let (a, b) = (build(&a).unwrap(), build(&b).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.model.encoder.layers, 2);
        assert!(a.model.ablations.no_dilated_conv);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = build(&[("encoder.layres".into(), toml::Value::Integer(1))]).unwrap_err();
        assert!(matches!(err, CliError::Config(m) if m.contains("layres")));
    }

    #[test]
    fn every_ablation_flag_is_addressable() {
        let keys = default_keys();
        for flag in [
            "no_adapted_transformer",
            "use_scaling_factor",
            "no_region_matrix",
            "no_distance_matrix",
            "no_attn_matrix",
            "no_dilated_conv",
            "no_mlp_predictor",
            "no_biaffine_predictor",
            "no_enhancement",
            "rounds_override",
        ] {
            assert!(keys.contains_key(&format!("ablations.{flag}")), "{flag}");
        }
        for p in ["train", "dev", "test", "vectors_sidecar", "checkpoint_dir"] {
            assert!(keys.contains_key(&format!("paths.{p}")));
        }
    }

    #[test]
    fn overrides_and_seed_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "ablations.no_biaffine_predictor = false\noptimizer.seed = 3\n").unwrap();
        let cfg = load(Some(&path), &["ablations.no_biaffine_predictor=true".into()], Some("9")).unwrap();
        assert!(cfg.model.ablations.no_biaffine_predictor);
        assert_eq!(cfg.model.optimizer.seed, 9);
        let cfg =
            load(Some(&path), &["optimizer.seed=4".into(), "paths.train=data/x.jsonl".into()], Some("9")).unwrap();
        assert_eq!(cfg.model.optimizer.seed, 4);
        assert_eq!(cfg.paths.train, Some(PathBuf::from("data/x.jsonl")));
        let cfg =
            load(None, &["ablations.rounds_override=1".into(), "predictor.mode=\"softmax\"".into()], None).unwrap();
        assert_eq!(cfg.model.ablations.rounds_override, Some(1));
        assert!(load(None, &["optimizer.learning_rate=fast".into()], None).is_err());
        assert!(load(None, &[], Some("-1")).is_err());
    }
}
