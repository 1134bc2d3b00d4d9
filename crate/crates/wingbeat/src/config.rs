//! Flag values from a config file and the environment.
//!
//! A config file holds `key = value` lines, `#` comments and optional
//! `[subcommand]` sections. Keys are long flag names. Keys before the first
//! section apply to every subcommand that has such a flag; keys inside a
//! section must name a flag of that subcommand. For any flag not given on the
//! command line the value comes from the subcommand section, then the global
//! part of the file, then the environment variable `WINGBEAT_<FLAG>` with
//! dashes turned into underscores.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::Path;

use clap::parser::ValueSource;
use clap::{ArgAction, ArgMatches, Command};

use crate::error::{io_err, Error, Result};

pub const ENV_PREFIX: &str = "WINGBEAT_";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub global: BTreeMap<String, String>,
    pub sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ConfigFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut out = ConfigFile::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Line {
                path: path.into(),
                line: i + 1,
                message,
            };
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated section header `{line}`")))?;
                section = Some(name.trim().to_string());
                out.sections.entry(name.trim().to_string()).or_default();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim().to_string(), unquote(value.trim()).to_string());
            if key.is_empty() {
                return Err(err("empty key".into()));
            }
            let map = match &section {
                Some(s) => out.sections.get_mut(s).expect("section inserted"),
                None => &mut out.global,
            };
            map.insert(key, value);
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(io_err(path))?, path)
    }
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

pub fn env_key(flag: &str) -> String {
    format!("{ENV_PREFIX}{}", flag.to_uppercase().replace('-', "_"))
}

fn truthy(value: &str) -> Option<bool> {
    match value.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Some(true),
        "0" | "false" | "no" | "off" | "" => Some(false),
        _ => None,
    }
}

/// Appends flags for `subcommand` that are missing from the command line.
/// `env` looks up environment variables.
pub fn augment_args(
    command: &Command,
    matches: &ArgMatches,
    file: Option<&ConfigFile>,
    env: impl Fn(&str) -> Option<String>,
    mut argv: Vec<OsString>,
) -> Result<Vec<OsString>> {
    let Some((name, sub_matches)) = matches.subcommand() else {
        return Ok(argv);
    };
    let sub = command
        .find_subcommand(name)
        .ok_or_else(|| Error::Usage(format!("unknown subcommand `{name}`")))?;
    let longs: BTreeMap<&str, &clap::Arg> = sub
        .get_arguments()
        .filter_map(|a| a.get_long().map(|l| (l, a)))
        .collect();
    let section = file.and_then(|f| f.sections.get(name));
    if let Some(section) = section {
        if let Some(bad) = section.keys().find(|k| !longs.contains_key(k.as_str())) {
            return Err(Error::Usage(format!("config section [{name}] has unknown key `{bad}`")));
        }
    }
    for (long, arg) in longs {
        if matches!(arg.get_action(), ArgAction::Help | ArgAction::Version) {
            continue;
        }
        if sub_matches.value_source(arg.get_id().as_str()) == Some(ValueSource::CommandLine) {
            continue;
        }
        let value = section
            .and_then(|s| s.get(long).cloned())
            .or_else(|| file.and_then(|f| f.global.get(long).cloned()))
            .or_else(|| env(&env_key(long)));
        let Some(value) = value else { continue };
        match arg.get_action() {
            ArgAction::SetTrue => match truthy(&value) {
                Some(true) => argv.push(format!("--{long}").into()),
                Some(false) => {}
                None => return Err(Error::Usage(format!("`{long}` expects a boolean, got `{value}`"))),
            },
            _ => argv.push(format!("--{long}={value}").into()),
        }
    }
    Ok(argv)
}
