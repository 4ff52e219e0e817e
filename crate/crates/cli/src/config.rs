//! Config files: TOML or JSON (by extension), merged over built-in defaults.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

pub fn read_value(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let v = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str::<Value>(&text).with_context(|| format!("parsing {}", path.display()))?,
        Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        _ => bail!("config {} must end in .toml or .json", path.display()),
    };
    if !v.is_object() {
        bail!("config {} must be a table", path.display());
    }
    Ok(v)
}

/// Recursively overlays `top` onto `base`; tables merge, everything else replaces.
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

/// `defaults` with the file at `path` (if any) laid over it. Unknown keys are rejected.
pub fn layered<T: Serialize + DeserializeOwned>(defaults: &T, path: Option<&Path>) -> Result<T> {
    let mut v = serde_json::to_value(defaults)?;
    if let Some(p) = path {
        let top = read_value(p)?;
        reject_unknown(&v, &top, "")?;
        merge(&mut v, top);
    }
    Ok(serde_json::from_value(v)?)
}

fn reject_unknown(base: &Value, top: &Value, at: &str) -> Result<()> {
    if let (Value::Object(b), Value::Object(t)) = (base, top) {
        for (k, v) in t {
            let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
            match b.get(k) {
                None => bail!("unknown config key `{path}`"),
                Some(inner) => reject_unknown(inner, v, &path)?,
            }
        }
    }
    Ok(())
}

/// Reads only the `profile` key, defaulting to `tiny`.
pub fn profile(path: Option<&Path>) -> Result<String> {
    let Some(p) = path else { return Ok("tiny".into()) };
    match read_value(p)?.get("profile") {
        None => Ok("tiny".into()),
        Some(Value::String(s)) if s == "tiny" || s == "full" => Ok(s.clone()),
        Some(other) => bail!("profile must be \"tiny\" or \"full\", got {other}"),
    }
}
