use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const EXIT_CHECK: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unknown presets, invalid configs.
    Usage(String),
    Io {
        path: PathBuf,
        message: String,
    },
    /// A check or validation failed; the run itself completed.
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } => EXIT_IO,
            CliError::Check(_) => EXIT_CHECK,
        }
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            message: err.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Io { path, message } => write!(f, "{}: {message}", path.display()),
            CliError::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<incident_align::Error> for CliError {
    fn from(e: incident_align::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// A whole file that must parse; a parse failure is reported against the path.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::io(path, format!("invalid JSON: {e}")))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("output types serialize")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_text(path, &(to_json(value) + "\n"))
}

pub fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|i| to_json(&i) + "\n").collect()
}

/// A rejected input line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    pub path: String,
    /// 1-based.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.path, self.line, self.message)
    }
}

/// Parsed records with their 1-based line numbers, plus rejected lines.
pub struct Lines<T> {
    pub records: Vec<(usize, T)>,
    pub skipped: Vec<LineError>,
}

/// JSON Lines with blank lines ignored. Malformed lines are collected unless
/// `strict`, in which case the first one aborts.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, strict: bool) -> CliResult<Lines<T>> {
    let text = read_text(path)?;
    let mut out = Lines {
        records: Vec::new(),
        skipped: Vec::new(),
    };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.records.push((i + 1, v)),
            Err(e) => out.reject(path, i + 1, e.to_string(), strict)?,
        }
    }
    Ok(out)
}

impl<T> Lines<T> {
    pub fn reject(&mut self, path: &Path, line: usize, message: String, strict: bool) -> CliResult<()> {
        let err = LineError {
            path: path.display().to_string(),
            line,
            message,
        };
        if strict {
            return Err(CliError::Check(err.to_string()));
        }
        eprintln!("skipped {err}");
        self.skipped.push(err);
        Ok(())
    }
}

/// Overlays a partial JSON object onto `base`. Keys absent from `base` are
/// rejected so typos do not pass silently.
pub fn overlay<T: Serialize + DeserializeOwned>(base: T, patch: Option<&Value>, what: &str) -> CliResult<T> {
    let Some(patch) = patch else {
        return Ok(base);
    };
    let mut v = serde_json::to_value(&base).expect("config types serialize");
    merge_value(&mut v, patch, what)?;
    serde_json::from_value(v).map_err(|e| CliError::Usage(format!("{what}: {e}")))
}

fn merge_value(base: &mut Value, patch: &Value, path: &str) -> CliResult<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, pv) in p {
                let sub = format!("{path}.{k}");
                match b.get_mut(k) {
                    Some(bv) => merge_value(bv, pv, &sub)?,
                    None => return Err(CliError::Usage(format!("unknown config key {sub}"))),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

/// Config file as a JSON object, or none.
pub fn load_config(path: Option<&Path>) -> CliResult<Option<Value>> {
    let Some(path) = path else {
        return Ok(None);
    };
    let v: Value = read_json(path)?;
    if !v.is_object() {
        return Err(CliError::Usage(format!(
            "{}: config must be a JSON object",
            path.display()
        )));
    }
    Ok(Some(v))
}

/// Section `key` of a config object.
pub fn section<'a>(config: Option<&'a Value>, key: &str) -> Option<&'a Value> {
    config.and_then(|c| c.get(key))
}

/// Rejects top-level config keys other than `allowed`.
pub fn check_sections(config: Option<&Value>, allowed: &[&str]) -> CliResult<()> {
    if let Some(Value::Object(m)) = config {
        if let Some(k) = m.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(CliError::Usage(format!(
                "unknown config section {k:?}; expected one of {allowed:?}"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Cfg {
        a: f64,
        inner: Inner,
    }

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Inner {
        b: usize,
        c: bool,
    }

    fn base() -> Cfg {
        Cfg {
            a: 1.0,
            inner: Inner { b: 2, c: false },
        }
    }

    #[test]
    fn overlay_patches_nested_fields() {
        let patch = serde_json::json!({"inner": {"c": true}});
        let got = overlay(base(), Some(&patch), "cfg").unwrap();
        assert_eq!(got.inner, Inner { b: 2, c: true });
        assert_eq!(got.a, 1.0);
    }

    #[test]
    fn overlay_rejects_unknown_and_mistyped() {
        let typo = serde_json::json!({"inner": {"d": 1}});
        assert!(matches!(overlay(base(), Some(&typo), "cfg"), Err(CliError::Usage(_))));
        let wrong = serde_json::json!({"a": "x"});
        assert!(matches!(overlay(base(), Some(&wrong), "cfg"), Err(CliError::Usage(_))));
    }
}
