//! TOML defaults merged under command-line flags, and the run manifest
//! written before any computation.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::parser::ValueSource;
use clap::{ArgMatches, CommandFactory};
use sha2::{Digest, Sha256};

use crate::args::Cli;

/// Appends flags for every key in the config section of the invoked
/// subcommand that was not given on the command line. Sections are named by
/// the subcommand path: `[train]`, `[verify.descent]`, `[data.synth]`.
pub fn merge_config(argv: Vec<OsString>) -> std::result::Result<Vec<OsString>, MergeError> {
    let cmd = Cli::command();
    let matches = cmd.clone().try_get_matches_from(argv.clone()).map_err(MergeError::Usage)?;
    let Some(path) = matches.get_one::<PathBuf>("config").cloned() else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(MergeError::Config)?;
    let doc: toml::Table = text
        .parse()
        .with_context(|| format!("parsing config {}", path.display()))
        .map_err(MergeError::Config)?;

    let mut names = Vec::new();
    let mut sub_cmd = &cmd;
    let mut sub_matches: &ArgMatches = &matches;
    while let Some((name, m)) = sub_matches.subcommand() {
        names.push(name.to_string());
        sub_cmd = sub_cmd.find_subcommand(name).expect("matched subcommand exists");
        sub_matches = m;
    }
    let mut section: &toml::Table = &doc;
    for n in &names {
        match section.get(n) {
            Some(toml::Value::Table(t)) => section = t,
            Some(_) => return Err(MergeError::Config(anyhow::anyhow!("config key {n:?} must be a table"))),
            None => return Ok(argv),
        }
    }

    let mut out = argv;
    for (key, value) in section {
        if let toml::Value::Table(_) = value {
            continue;
        }
        let arg = sub_cmd
            .get_arguments()
            .find(|a| {
                let id = a.get_id().as_str();
                let long = a.get_long().unwrap_or("");
                id == key || long == key || id == key.replace('-', "_")
            })
            .ok_or_else(|| MergeError::Config(anyhow::anyhow!("unknown config key {key:?} for `{}`", names.join(" "))))?;
        if sub_matches.value_source(arg.get_id().as_str()) == Some(ValueSource::CommandLine) {
            continue;
        }
        let long = format!("--{}", arg.get_long().expect("config keys map to long flags"));
        match value {
            toml::Value::Boolean(true) => out.push(long.into()),
            toml::Value::Boolean(false) => {}
            other => {
                out.push(long.into());
                out.push(toml_scalar(other).map_err(MergeError::Config)?.into());
            }
        }
    }
    Ok(out)
}

fn toml_scalar(v: &toml::Value) -> Result<String> {
    Ok(match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        toml::Value::Array(items) => items.iter().map(toml_scalar).collect::<Result<Vec<_>>>()?.join(","),
        other => bail!("unsupported config value {other}"),
    })
}

#[derive(Debug)]
pub enum MergeError {
    Usage(clap::Error),
    Config(anyhow::Error),
}

/// Flat `key=value` record of one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub entries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(cli: &Cli, argv: &[OsString]) -> Result<Self> {
        let mut entries = vec![
            ("command".to_string(), cli.command.path().to_string()),
            ("tool_version".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            (
                "argv".to_string(),
                serde_json::to_string(&argv.iter().map(|a| a.to_string_lossy().into_owned()).collect::<Vec<_>>())?,
            ),
        ];
        let mut flat = BTreeMap::new();
        flatten("config", &serde_json::to_value(&cli.command)?, &mut flat);
        if let Some(s) = flat.iter().find(|(k, _)| k.ends_with(".seed")).map(|(_, v)| v.clone()) {
            entries.push(("seed".into(), s));
        }
        entries.extend(flat);
        if let Some(c) = &cli.config {
            entries.push(("digest.config".into(), file_digest(c)?));
        }
        for p in cli.command.inputs() {
            entries.push((format!("digest.{}", p.display()), file_digest(&p)?));
        }
        if let Some(out) = cli.command.out() {
            entries.push(("output".into(), out.display().to_string()));
        }
        Ok(RunManifest { entries })
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .with_context(|| format!("manifest line {l:?} is not key=value"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RunManifest { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// The recorded command line, ready for re-parsing.
    pub fn argv(&self) -> Result<Vec<OsString>> {
        let raw = self.get("argv").context("manifest has no argv line")?;
        let v: Vec<String> = serde_json::from_str(raw).context("manifest argv is not a JSON string list")?;
        Ok(v.into_iter().map(OsString::from).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        std::fs::write(path, self.render()).with_context(|| format!("writing manifest {}", path.display()))
    }
}

/// `<out>.manifest`.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, String>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                flatten(&format!("{prefix}.{k}"), v, out);
            }
        }
        serde_json::Value::Array(items) => {
            let parts: Vec<String> = items
                .iter()
                .map(|i| match i {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect();
            out.insert(prefix.to_string(), parts.join(","));
        }
        serde_json::Value::String(s) => {
            out.insert(prefix.to_string(), s.clone());
        }
        serde_json::Value::Null => {
            out.insert(prefix.to_string(), "none".into());
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
