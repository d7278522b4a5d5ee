//! Dotted `--section.key value` config overrides.

use anyhow::{bail, Result};
use serde_json::Value;

/// Splits dotted overrides out of the raw argument list. Both `--a.b v` and
/// `--a.b=v` are accepted. Returns the remaining arguments and the overrides
/// in command-line order.
pub fn extract(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut found = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match body.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (body, None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => match it.next() {
                Some(v) => v,
                None => bail!("override --{name} needs a value"),
            },
        };
        found.push((name.to_string(), value));
    }
    Ok((rest, found))
}

/// JSON literal if it parses as one, otherwise a plain string.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed override key `{path}`");
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let Value::Object(map) = node else {
            bail!("override `{path}`: `{part}` is not inside a section");
        };
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match node {
        Value::Object(map) => {
            map.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        _ => bail!("override `{path}` does not name a config section"),
    }
}
