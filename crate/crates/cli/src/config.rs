use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::experiments::IDS;
use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 1,
            out: PathBuf::from("results"),
        }
    }
}

/// A parsed config file: the `[run]` section plus one raw table per
/// experiment section that was present.
#[derive(Debug, Default)]
pub struct ConfigFile {
    pub run: RunSection,
    sections: Table,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut table: Table = text.parse().map_err(|e| CliError::Config(format!("config: {e}")))?;
        let run = match table.remove("run") {
            Some(v) => v.try_into().map_err(|e| CliError::Config(format!("[run]: {e}")))?,
            None => RunSection::default(),
        };
        for key in table.keys() {
            if !IDS.contains(&key.as_str()) {
                return Err(CliError::Config(format!(
                    "unknown section [{key}]; expected [run] or one of {}",
                    IDS.join(", ")
                )));
            }
        }
        Ok(Self { run, sections: table })
    }

    pub fn section(&self, id: &str) -> Result<Table, CliError> {
        match self.sections.get(id) {
            None => Ok(Table::new()),
            Some(Value::Table(t)) => Ok(t.clone()),
            Some(_) => Err(CliError::Config(format!("[{id}] must be a table"))),
        }
    }
}

/// Applies `key=value` with a dotted key; the value is read as a TOML value
/// and falls back to a bare string.
pub fn apply_set(table: &mut Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{assignment}`")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("--set: bad key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("--set: `{p}` in `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Deserializes a section into a typed config, rejecting unknown fields.
pub fn typed<T: DeserializeOwned>(id: &str, table: Table) -> Result<T, CliError> {
    Value::Table(table)
        .try_into()
        .map_err(|e| CliError::Config(format!("[{id}]: {e}")))
}

/// Dotted keys whose effective value differs from the built-in default.
pub fn overrides<T: Serialize + Default>(cfg: &T) -> Result<Vec<String>, CliError> {
    let to_value = |c: &T| Value::try_from(c).map_err(|e| CliError::Config(format!("serializing config: {e}")));
    let mut base = Vec::new();
    let mut eff = Vec::new();
    flatten("", &to_value(&T::default())?, &mut base);
    flatten("", &to_value(cfg)?, &mut eff);
    Ok(eff
        .into_iter()
        .filter(|(k, v)| !base.iter().any(|(bk, bv)| bk == k && bv == v))
        .map(|(k, v)| {
            let default = base.iter().find(|(bk, _)| *bk == k).map(|(_, bv)| bv.to_string());
            format!("{k} = {v} (default {})", default.as_deref().unwrap_or("unset"))
        })
        .collect())
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Table(t) => {
            for (k, x) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

/// Canonical TOML of the effective config and its SHA-256.
pub fn canonical<T: Serialize>(id: &str, cfg: &T) -> Result<(String, String), CliError> {
    let text = toml::to_string(cfg).map_err(|e| CliError::Config(format!("serializing config: {e}")))?;
    let digest = Sha256::digest(format!("[{id}]\n{text}").as_bytes());
    let hex = digest.iter().map(|b| format!("{b:02x}")).collect();
    Ok((text, hex))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_builds_nested_tables() {
        let mut t = Table::new();
        apply_set(&mut t, "adaptive.lags=3").unwrap();
        apply_set(&mut t, "ensembles=[10, 40]").unwrap();
        apply_set(&mut t, "closure=carry_s").unwrap();
        assert_eq!(t["adaptive"]["lags"].as_integer(), Some(3));
        assert_eq!(t["ensembles"].as_array().unwrap().len(), 2);
        assert_eq!(t["closure"].as_str(), Some("carry_s"));
        assert!(apply_set(&mut t, "novalue").is_err());
        assert!(apply_set(&mut t, "ensembles.x=1").is_err());
    }

    #[test]
    fn unknown_sections_are_rejected() {
        assert!(ConfigFile::parse("[run]\nseed = 4\n[ex4_twoscale]\ncycles = 10\n").is_ok());
        assert!(matches!(ConfigFile::parse("[ex9]\n"), Err(CliError::Config(_))));
        assert!(matches!(ConfigFile::parse("[run]\nsed = 4\n"), Err(CliError::Config(_))));
    }
}
