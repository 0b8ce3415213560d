//! `--config <path>`: a flat `key=value` file expanded into flags.

use std::ffi::OsString;
use std::fs;

fn config_path(args: &[OsString]) -> Option<Result<OsString, String>> {
    let mut iter = args.iter();
    while let Some(arg) = iter.next() {
        let s = arg.to_string_lossy();
        if s == "--config" {
            return Some(iter.next().cloned().ok_or_else(|| "--config needs a path".to_string()));
        }
        if let Some(path) = s.strip_prefix("--config=") {
            return Some(Ok(path.into()));
        }
    }
    None
}

/// Parses `key=value` lines into flag arguments. Blank lines and lines
/// starting with `#` are ignored; `_` in keys becomes `-`. A value of
/// `true` yields a bare switch and `false` drops the key.
pub fn parse(text: &str) -> Result<Vec<(String, Option<String>)>, String> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key=value, got `{line}`", n + 1))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() {
            return Err(format!("config line {}: empty key", n + 1));
        }
        match value.trim() {
            "true" => out.push((key, None)),
            "false" => {}
            v => out.push((key, Some(v.to_string()))),
        }
    }
    Ok(out)
}

/// Inserts the config file's flags after the subcommand name, skipping
/// keys that also appear on the command line.
pub fn expand_args(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let path = match config_path(&args) {
        None => return Ok(args),
        Some(p) => p?,
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config {}: {e}", path.to_string_lossy()))?;
    let given: Vec<String> = args
        .iter()
        .filter_map(|a| a.to_str())
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect();
    let injected: Vec<OsString> = parse(&text)?
        .into_iter()
        .filter(|(k, _)| k != "config" && !given.contains(k))
        .flat_map(|(k, v)| std::iter::once(format!("--{k}")).chain(v))
        .map(OsString::from)
        .collect();
    let sub = args
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map_or(args.len(), |p| p + 2);
    let mut out = args[..sub.min(args.len())].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[sub.min(args.len())..]);
    Ok(out)
}
