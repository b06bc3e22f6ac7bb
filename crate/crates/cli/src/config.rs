//! Merging of `key=value` config files into the argument list.

use std::fs;
use std::path::Path;

pub const SUBCOMMANDS: [&str; 4] = ["estimate", "band", "simulate", "coverage"];

/// Keys that are recorded in manifests but are not flags.
const INFORMATIONAL: [&str; 1] = ["version"];

/// Parsed config file: optional subcommand plus flags in file order.
#[derive(Debug, Default, PartialEq)]
pub struct ConfigFile {
    pub command: Option<String>,
    pub flags: Vec<(String, String)>,
}

pub fn parse_config(text: &str) -> Result<ConfigFile, String> {
    let mut cfg = ConfigFile::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key=value", i + 1))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "command" => cfg.command = Some(value.to_string()),
            k if INFORMATIONAL.contains(&k) => {}
            "config" => {
                return Err(format!(
                    "config line {}: nested config files are not supported",
                    i + 1
                ))
            }
            _ => cfg.flags.push((key.to_string(), value.to_string())),
        }
    }
    Ok(cfg)
}

fn config_path(args: &[String]) -> Option<String> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

/// Inserts the flags of a `--config` file right after the subcommand so
/// that later command-line flags override them. A subcommand named in the
/// file is used when the command line has none.
pub fn expand_args(args: Vec<String>) -> Result<Vec<String>, String> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = fs::read_to_string(Path::new(&path))
        .map_err(|e| format!("cannot read config `{path}`: {e}"))?;
    let cfg = parse_config(&text)?;
    let mut args = args;
    let pos = match args.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) {
        Some(p) => p,
        None => {
            let cmd = cfg
                .command
                .clone()
                .ok_or_else(|| format!("no subcommand given and none in `{path}`"))?;
            args.insert(1, cmd);
            1
        }
    };
    let mut injected = Vec::new();
    for (key, value) in cfg.flags {
        match value.as_str() {
            "true" => injected.push(format!("--{key}")),
            "false" => {}
            _ => injected.push(format!("--{key}={value}")),
        }
    }
    args.splice(pos + 1..pos + 1, injected);
    Ok(args)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let cfg =
            parse_config("# c\ncommand=band\nversion=0.1.0\nbandwidth = 1.5\nplot=true\n").unwrap();
        assert_eq!(cfg.command.as_deref(), Some("band"));
        assert_eq!(
            cfg.flags,
            vec![
                ("bandwidth".into(), "1.5".into()),
                ("plot".into(), "true".into())
            ]
        );
        assert!(parse_config("nonsense").is_err());
    }
}
