//! `--config FILE` support: flat `key = value` lines turned into flags.
//!
//! Keys are the subcommand's long flag names (dashes or underscores).
//! Flags given on the command line win over the file.

use std::fs;

use anyhow::{bail, Context, Result};
use clap::Command;

/// Reads `key = value` pairs, ignoring blank lines and `#` comments.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = vec![];
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected `key = value`", i + 1);
        };
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[String]) -> Result<Option<String>> {
    for (i, a) in args.iter().enumerate() {
        if a == "--config" {
            return args.get(i + 1).cloned().map(Some).context("--config needs a path");
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Ok(Some(p.to_string()));
        }
    }
    Ok(None)
}

fn given(args: &[String], long: &str) -> bool {
    let flag = format!("--{long}");
    args.iter().any(|a| *a == flag || a.starts_with(&format!("{flag}=")))
}

/// Splices the config file named by `--config` into `argv` right after the
/// subcommand. Unknown keys are an error naming the key.
pub fn expand(cmd: &Command, argv: Vec<String>) -> Result<Vec<String>> {
    let Some(sub_pos) = argv.iter().skip(1).position(|a| !a.starts_with('-')).map(|p| p + 1) else {
        return Ok(argv);
    };
    let Some(sub) = cmd.find_subcommand(&argv[sub_pos]) else {
        return Ok(argv);
    };
    let rest = &argv[sub_pos + 1..];
    let Some(path) = config_path(rest)? else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let mut extra = vec![];
    for (key, value) in parse_kv(&text).with_context(|| format!("in config {path}"))? {
        let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(key.as_str())) else {
            bail!("unknown config key `{key}` for `{}`", sub.get_name());
        };
        if key == "config" {
            bail!("config files cannot include other config files");
        }
        if given(rest, &key) {
            continue;
        }
        if arg.get_action().takes_values() {
            extra.push(format!("--{key}"));
            extra.push(value);
        } else {
            match value.as_str() {
                "true" => extra.push(format!("--{key}")),
                "false" => {}
                _ => bail!("config key `{key}` is a switch; use true or false"),
            }
        }
    }
    let mut out = argv[..=sub_pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_parsing() {
        let kv = parse_kv("# c\nepochs = 3 # trailing\n\nbatch_size=8\n").unwrap();
        assert_eq!(kv, vec![("epochs".into(), "3".into()), ("batch-size".into(), "8".into())]);
        assert!(parse_kv("oops").is_err());
    }
}
