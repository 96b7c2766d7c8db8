//! Run configuration: JSON file, then `VTSSI_`-prefixed environment overrides, then flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use vtssi::model::VtssiConfig;
use vtssi::train::TrainConfig;

pub const ENV_PREFIX: &str = "VTSSI_";

/// Model fields at the top level plus a `train` section.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: VtssiConfig,
    pub train: TrainConfig,
}

/// Applies `VTSSI_A__B=value` as `doc.a.b = value`. Values parse as JSON when
/// possible and are taken as strings otherwise.
pub fn apply_env(doc: &mut Value, vars: impl IntoIterator<Item = (String, String)>) -> Result<Vec<String>, String> {
    let mut applied = Vec::new();
    for (key, raw) in vars {
        let Some(path) = key.strip_prefix(ENV_PREFIX) else { continue };
        if path.is_empty() {
            continue;
        }
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw.clone()));
        let parts: Vec<String> = path.split("__").map(|p| p.to_ascii_lowercase()).collect();
        let mut node = &mut *doc;
        for p in &parts[..parts.len() - 1] {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| format!("{key}: '{p}' is not a section"))?;
            node = obj.entry(p.clone()).or_insert_with(|| Value::Object(Default::default()));
        }
        node.as_object_mut()
            .ok_or_else(|| format!("{key}: parent is not a section"))?
            .insert(parts[parts.len() - 1].clone(), value);
        applied.push(key);
    }
    Ok(applied)
}

/// Reads the optional config file and environment overrides.
pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<RunConfig, String> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => serde_json::to_value(RunConfig::default()).map_err(|e| e.to_string())?,
    };
    apply_env(&mut doc, env)?;
    serde_json::from_value(doc).map_err(|e| format!("config: {e}"))
}
