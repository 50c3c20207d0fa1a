//! Config loading: a JSON file is the source of truth, `--set key=value`
//! flags override individual entries, and unknown keys anywhere are errors.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use factgraph_core::eval::ExperimentConfig;
use factgraph_core::rng::derive_seed;

/// Errors that should exit with the usage code (2) rather than the runtime
/// failure code (1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

/// Parse `--set` overrides of the form `dotted.path=json-or-string`.
fn apply_set(value: &mut serde_json::Value, spec: &str) -> Result<(), UsageError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| UsageError(format!("--set `{spec}`: expected key=value")))?;
    if path.is_empty() {
        return Err(UsageError(format!("--set `{spec}`: empty key")));
    }
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cursor.is_object() {
            return Err(UsageError(format!(
                "--set `{spec}`: `{}` is not an object",
                parts[..i].join(".")
            )));
        }
        let map = cursor.as_object_mut().expect("checked");
        if i + 1 == parts.len() {
            map.insert((*part).to_string(), parsed);
            return Ok(());
        }
        cursor = map
            .entry((*part).to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}

/// Load the experiment config: file (when given), then overrides, then the
/// optional top-level seed fan-out. Unknown keys are usage errors naming the
/// offending key.
pub fn load_config(
    path: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
) -> anyhow::Result<ExperimentConfig> {
    let mut value: serde_json::Value = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| anyhow!(UsageError(format!("config {}: {e}", p.display()))))?
        }
        None => serde_json::Value::Object(Default::default()),
    };
    for spec in sets {
        apply_set(&mut value, spec).map_err(|e| anyhow!(e))?;
    }
    let mut config: ExperimentConfig = serde_json::from_value(value)
        .map_err(|e| anyhow!(UsageError(format!("config: {e}"))))?;
    if let Some(seed) = seed {
        // One top-level seed fans out to every component by label.
        config.corpus.seed = derive_seed(seed, "corpus");
        config.model.seed = derive_seed(seed, "model");
        config.train.seed = derive_seed(seed, "train");
        config.gat_train.seed = derive_seed(seed, "gat-train");
    }
    Ok(config)
}

/// Exit code for an error chain: 2 for usage errors, 1 otherwise.
pub fn exit_code_for(err: &anyhow::Error) -> u8 {
    if err.chain().any(|c| c.downcast_ref::<UsageError>().is_some())
        || err.downcast_ref::<UsageError>().is_some()
    {
        2
    } else {
        1
    }
}
