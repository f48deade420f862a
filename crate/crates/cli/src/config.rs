use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use cagan_core::train::TrainConfig;

use crate::CliError;

/// One scene in a run: a cube and its optional ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub name: String,
    pub cube: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
}

impl TaskEntry {
    /// Parses `[name=]cube[,truth]`.
    pub fn parse(spec: &str) -> Result<Self, CliError> {
        let (name, rest) = match spec.split_once('=') {
            Some((n, r)) if !n.is_empty() => (Some(n.to_string()), r),
            _ => (None, spec),
        };
        let mut parts = rest.splitn(2, ',');
        let cube = PathBuf::from(parts.next().unwrap_or_default());
        if cube.as_os_str().is_empty() {
            return Err(CliError::Usage(format!("task {spec:?} names no cube file")));
        }
        let truth = parts.next().filter(|t| !t.is_empty()).map(PathBuf::from);
        let name = name.unwrap_or_else(|| {
            cube.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "task".into())
        });
        Ok(Self { name, cube, truth })
    }
}

/// Contents of a run file. Task paths are relative to the file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tasks: Vec<TaskEntry>,
    #[serde(default, skip_serializing_if = "toml::Table::is_empty")]
    pub train: toml::Table,
}

impl RunFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        let mut file: RunFile =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for t in &mut file.tasks {
            t.cube = base.join(&t.cube);
            t.truth = t.truth.take().map(|p| base.join(p));
        }
        file.out = file.out.take().map(|p| base.join(p));
        Ok(file)
    }
}

fn merge(into: &mut Value, from: &Value) {
    match (into, from) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                match a.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        a.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// The three configuration layers and their merge.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub defaults: Value,
    pub file: Value,
    pub flags: Value,
    pub resolved: TrainConfig,
}

/// Flags override file values, which override defaults.
pub fn resolve(file: Option<&toml::Table>, flags: Map<String, Value>) -> Result<Resolved, CliError> {
    let defaults = serde_json::to_value(TrainConfig::default()).expect("config serializes");
    let file = match file {
        Some(t) => serde_json::to_value(t).map_err(|e| CliError::Usage(format!("config: {e}")))?,
        None => Value::Object(Map::new()),
    };
    let flags = Value::Object(flags);
    let mut merged = defaults.clone();
    merge(&mut merged, &file);
    merge(&mut merged, &flags);
    let resolved: TrainConfig =
        serde_json::from_value(merged).map_err(|e| CliError::Usage(format!("training configuration: {e}")))?;
    resolved.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(Resolved {
        defaults,
        file,
        flags,
        resolved,
    })
}
