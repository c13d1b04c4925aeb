//! Flat `key=value` config files feeding the `PENCIL_*` environment
//! variables that every flag also reads.

use std::path::Path;

use duet_core::{Error, Result};

pub const ENV_PREFIX: &str = "PENCIL_";

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
        let k = k.trim();
        if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(Error::Config(format!("line {}: bad key {k:?}", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_ascii_uppercase().replace('-', "_"))
}

/// Export config entries as environment variables unless already set, so
/// precedence is: command line, then environment, then file.
pub fn apply_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let entries = parse(&text)?;
    for (k, v) in &entries {
        let name = env_name(k);
        if std::env::var_os(&name).is_none() {
            std::env::set_var(name, v);
        }
    }
    Ok(entries)
}

/// The value following `--config` (or `--config=...`) in raw arguments.
pub fn find_config_arg(args: &[String]) -> Option<String> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(v.to_string());
        }
    }
    std::env::var(env_name("config")).ok()
}
