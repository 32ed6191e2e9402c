//! `key=value` config files, expanded into flags ahead of the real command line.

use std::ffi::OsString;
use std::path::Path;

use clap::Command;

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value", i + 1))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(rest) = s.strip_prefix("--config=") {
            return Some(rest.into());
        }
    }
    None
}

/// Inserts the flags of the `--config` file right after the subcommand name.
/// Later occurrences win, so flags typed on the command line override the file.
pub fn expand(args: Vec<OsString>, cmd: &Command) -> Result<Vec<OsString>, String> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).map_err(|e| format!("config {}: {e}", path.display()))?;
    let entries = parse_config(&text).map_err(|e| format!("config {}: {e}", path.display()))?;
    let Some((pos, sub)) = args
        .iter()
        .enumerate()
        .skip(1)
        .find_map(|(i, a)| cmd.find_subcommand(a.to_str()?).map(|s| (i, s)))
    else {
        return Ok(args);
    };
    let mut inserted: Vec<OsString> = Vec::new();
    for (key, value) in entries {
        if key == "config" {
            return Err(format!("config {}: nested config files are not supported", path.display()));
        }
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| format!("config {}: unknown key `{key}` for `{}`", path.display(), sub.get_name()))?;
        if arg.get_action().takes_values() {
            inserted.push(format!("--{key}={value}").into());
        } else {
            match value.as_str() {
                "true" | "1" | "yes" => inserted.push(format!("--{key}").into()),
                "false" | "0" | "no" => {}
                other => return Err(format!("config {}: `{key}` expects true or false, got `{other}`", path.display())),
            }
        }
    }
    let mut out = args[..=pos].to_vec();
    out.extend(inserted);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_lines() {
        let got = parse_config("# run\nk = 3\nmax_iters=10\n\n").unwrap();
        assert_eq!(got, vec![("k".into(), "3".into()), ("max-iters".into(), "10".into())]);
        assert!(parse_config("k 3").is_err());
    }
}
