//! Flat `key=value` config files, spliced in as flags ahead of the user's
//! own so that command-line flags win.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use clap::CommandFactory;

use crate::args::Cli;

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value, got {line:?}", i + 1))?;
        pairs.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Finds `--config FILE` / `--config=FILE` after the subcommand.
fn config_path(args: &[OsString]) -> Result<Option<(usize, usize, OsString)>, String> {
    for (i, a) in args.iter().enumerate().skip(2) {
        let s = a.to_string_lossy();
        if s == "--config" {
            let path = args.get(i + 1).ok_or("--config needs a file path")?;
            return Ok(Some((i, 2, path.clone())));
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Ok(Some((i, 1, p.into())));
        }
    }
    Ok(None)
}

/// Rewrites `args` with the config file's entries inserted as flags right
/// after the subcommand. Unknown keys are errors.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some((at, width, path)) = config_path(&args)? else {
        return Ok(args);
    };
    let sub_name = args[1].to_string_lossy().into_owned();
    let cmd = Cli::command();
    let sub = cmd
        .find_subcommand(&sub_name)
        .ok_or_else(|| format!("unknown subcommand {sub_name:?}"))?;
    let text = fs::read_to_string(Path::new(&path))
        .map_err(|e| format!("cannot read config {}: {e}", Path::new(&path).display()))?;
    let mut injected: Vec<OsString> = Vec::new();
    for (key, value) in parse(&text)? {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .ok_or_else(|| format!("config key {key:?} is not a flag of `{sub_name}`"))?;
        if arg.get_action().takes_values() {
            injected.push(format!("--{key}").into());
            injected.push(value.into());
        } else {
            match value.as_str() {
                "true" => injected.push(format!("--{key}").into()),
                "false" => {}
                other => return Err(format!("config key {key:?} expects true or false, got {other:?}")),
            }
        }
    }
    let mut out: Vec<OsString> = args[..2].to_vec();
    out.extend(injected);
    out.extend(args[2..at].iter().cloned());
    out.extend(args[at + width..].iter().cloned());
    Ok(out)
}
