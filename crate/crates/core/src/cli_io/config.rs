use std::path::Path;

use serde::Deserialize;
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::simulate::{builtin, Scenario};

/// Byte offset to 1-based line and column.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Offending key named in a serde message such as "unknown field `foo`".
fn key_from_message(msg: &str) -> String {
    for marker in ["unknown field `", "missing field `", "unknown variant `"] {
        if let Some(i) = msg.find(marker) {
            let rest = &msg[i + marker.len()..];
            if let Some(j) = rest.find('`') {
                return rest[..j].to_string();
            }
        }
    }
    "config".to_string()
}

/// Builtin scenario as a TOML table.
pub fn resolve_builtin(name: &str) -> Result<Table> {
    let sc = builtin(name)?;
    let text = serialize_config(&sc)?;
    text.parse::<Table>().map_err(|e| Error::config("builtin", e.to_string()))
}

/// Parses a configuration document. A top-level `builtin = "<name>"` starts
/// from that scenario; every other key overrides it.
pub fn parse_config_str(text: &str, path: &str) -> Result<Scenario> {
    let mut table: Table = text.parse().map_err(|e: toml::de::Error| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        Error::Parse {
            path: path.to_string(),
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    let doc = match table.remove("builtin") {
        Some(Value::String(name)) => {
            let mut base = resolve_builtin(&name)?;
            merge(&mut base, table);
            base
        }
        Some(_) => return Err(Error::config("builtin", "must be a scenario name")),
        None => table,
    };
    let sc = Scenario::deserialize(Value::Table(doc)).map_err(|e| {
        let msg = e.to_string();
        Error::config(key_from_message(&msg), msg.trim().to_string())
    })?;
    sc.validate()?;
    Ok(sc)
}

pub fn parse_config(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text, &path.display().to_string())
}

/// Fully resolved configuration text (the `config.resolved` format).
pub fn serialize_config(sc: &Scenario) -> Result<String> {
    toml::to_string(sc).map_err(|e| Error::config("config", e.to_string()))
}
