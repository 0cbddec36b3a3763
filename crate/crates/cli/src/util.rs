//! Config-file plumbing and atomic file output shared by the subcommands.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::{CliError, GlobalArgs};

pub const DEFAULT_SEED: u64 = 13;

pub fn io_ctx(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_ctx(path, e))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

/// Write through a sibling temp file and rename, so `path` either keeps its
/// old content or holds the complete new content.
pub fn atomic_write(path: &Path, contents: &str) -> Result<(), CliError> {
    let file_name = path
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!("{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, contents).map_err(|e| io_ctx(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_ctx(path, e))?;
    Ok(())
}

/// Ordered key=value pairs merged from the config file and `--set` style
/// overrides; the last occurrence of a key wins.
pub struct KvConfig {
    entries: Vec<(String, String)>,
}

impl KvConfig {
    pub fn load(path: Option<&Path>) -> Result<KvConfig, CliError> {
        let mut kv = KvConfig { entries: Vec::new() };
        let Some(path) = path else {
            return Ok(kv);
        };
        let text = fs::read_to_string(path).map_err(|e| io_ctx(path, e))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Usage(format!(
                    "{}:{}: expected key=value, got {raw:?}",
                    path.display(),
                    i + 1
                )));
            };
            kv.entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(kv)
    }

    /// Append an override pair of the form KEY=VALUE.
    pub fn push_override(&mut self, pair: &str) -> Result<(), CliError> {
        let Some((k, v)) = pair.split_once('=') else {
            return Err(CliError::Usage(format!(
                "--set expects KEY=VALUE, got {pair:?}"
            )));
        };
        self.entries.push((k.trim().to_string(), v.trim().to_string()));
        Ok(())
    }

    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), CliError> {
        for (k, _) in &self.entries {
            if !allowed.contains(&k.as_str()) {
                return Err(CliError::Usage(format!(
                    "unknown config key {k:?} (allowed: {})",
                    allowed.join(", ")
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }
}

pub fn parse_val<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| CliError::Usage(format!("config {key}={value:?}: {e}")))
}

pub fn get_parsed<T: FromStr>(kv: &KvConfig, key: &str) -> Result<Option<T>, CliError>
where
    T::Err: Display,
{
    kv.get(key).map(|v| parse_val(key, v)).transpose()
}

/// Seed precedence: `--seed` flag, then the config file, then the default.
pub fn resolve_seed(global: &GlobalArgs, kv: &KvConfig) -> Result<u64, CliError> {
    if let Some(s) = global.seed {
        return Ok(s);
    }
    match get_parsed::<u64>(kv, "seed")? {
        Some(s) => Ok(s),
        None => Ok(DEFAULT_SEED),
    }
}
