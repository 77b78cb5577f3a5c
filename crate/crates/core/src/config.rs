//! TOML run configuration with `key.path=value` overrides and
//! resolved-config snapshots.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;
use toml::{Table, Value};

pub const SNAPSHOT_FILE: &str = "resolved-config.toml";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("parsing {0}")]
    Parse(String),
    #[error("override '{0}' is not of the form key.path=value")]
    BadOverride(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn to_table<T: Serialize>(value: &T) -> Result<Table, ConfigError> {
    match Value::try_from(value).map_err(|e| ConfigError::Parse(e.to_string()))? {
        Value::Table(t) => Ok(t),
        _ => Err(ConfigError::Parse("configuration must be a table".into())),
    }
}

/// Recursively overlays `top` onto `base`.
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

/// One `key.path=value` assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: Value,
}

impl Override {
    pub fn new(key: &str, value: impl Into<Value>) -> Self {
        Override { path: key.split('.').map(str::to_string).collect(), value: value.into() }
    }

    /// Parses `a.b.c=value`; the value is read as a TOML literal and falls
    /// back to a plain string.
    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        let (key, raw) = s.split_once('=').ok_or_else(|| ConfigError::BadOverride(s.into()))?;
        let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(ConfigError::BadOverride(s.into()));
        }
        let raw = raw.trim();
        let value =
            format!("v = {raw}").parse::<Table>().ok().and_then(|mut t| t.remove("v")).unwrap_or_else(|| Value::String(raw.to_string()));
        Ok(Override { path, value })
    }
}

pub fn set_path(table: &mut Table, path: &[String], value: Value) {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        if !entry.is_table() {
            *entry = Value::Table(Table::new());
        }
        cur = entry.as_table_mut().expect("just made a table");
    }
    cur.insert(last.clone(), value);
}

/// Defaults, then the file, then overrides, in increasing precedence.
pub fn resolve<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, overrides: &[Override]) -> Result<T, ConfigError> {
    let mut table = to_table(&T::default())?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        let parsed: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        merge(&mut table, parsed);
    }
    for o in overrides {
        set_path(&mut table, &o.path, o.value.clone());
    }
    Value::Table(table).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String, ConfigError> {
    toml::to_string_pretty(value).map_err(|e| ConfigError::Parse(e.to_string()))
}

/// Writes the effective configuration and tool version next to a run's
/// outputs.
pub fn write_snapshot<T: Serialize>(dir: &Path, command: &str, config: &T) -> Result<(), ConfigError> {
    fs::create_dir_all(dir)?;
    let mut table = Table::new();
    let mut meta = Table::new();
    meta.insert("tool".into(), "cubescore".into());
    meta.insert("version".into(), TOOL_VERSION.into());
    meta.insert("command".into(), command.into());
    table.insert("meta".into(), Value::Table(meta));
    table.insert("config".into(), Value::Table(to_table(config)?));
    fs::write(dir.join(SNAPSHOT_FILE), to_toml(&table)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Inner {
        rate: f64,
        name: String,
    }

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Outer {
        n: usize,
        inner: Inner,
    }

    #[test]
    fn precedence_is_defaults_file_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "n = 3\n[inner]\nname = \"file\"\nrate = 0.5\n").unwrap();
        let over = [Override::parse("inner.rate=0.25").unwrap(), Override::parse("inner.name=cli").unwrap()];
        let c: Outer = resolve(Some(&path), &over).unwrap();
        assert_eq!(c, Outer { n: 3, inner: Inner { rate: 0.25, name: "cli".into() } });
        let d: Outer = resolve(None, &[]).unwrap();
        assert_eq!(d, Outer::default());
        assert!(Override::parse("nonsense").is_err());
        assert!(resolve::<Outer>(None, &[Override::parse("n=\"x\"").unwrap()]).is_err());
        let typed: Outer = resolve(None, &[Override::new("inner.name", "7")]).unwrap();
        assert_eq!(typed.inner.name, "7");
    }

    #[test]
    fn snapshot_records_version() {
        let dir = tempfile::tempdir().unwrap();
        write_snapshot(dir.path(), "test", &Outer::default()).unwrap();
        let text = fs::read_to_string(dir.path().join(SNAPSHOT_FILE)).unwrap();
        assert!(text.contains(TOOL_VERSION) && text.contains("command = \"test\""));
    }
}
