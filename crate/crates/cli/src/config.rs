//! Flat `key=value` run configuration with flag overrides.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

pub const SEED_ENV: &str = "SRE_SEED";
pub const ECHO_FILE: &str = "run_config.txt";

/// Values from an optional config file plus the resolved value of every key
/// a command consumed, in the order they were resolved.
#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", n + 1)))?;
        out.insert(k.trim().replace('_', "-"), v.trim().to_string());
    }
    Ok(out)
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| sre_core::Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                parse_kv(&text)?
            }
            None => BTreeMap::new(),
        };
        Ok(Self {
            file,
            resolved: BTreeMap::new(),
        })
    }

    fn from_file<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        self.file
            .get(key)
            .map(|raw| {
                raw.parse::<T>()
                    .map_err(|e| CliError::Usage(format!("config key `{key}`: {e}")))
            })
            .transpose()
    }

    /// Flag, then config file, then `default`.
    pub fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => v,
            None => self.from_file(key)?.unwrap_or(default),
        };
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// Like [`Settings::get`] with no default; a missing value is a usage error.
    pub fn require<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(v) => v,
            None => self
                .from_file(key)?
                .ok_or_else(|| CliError::Usage(format!("missing required setting `--{key}`")))?,
        };
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// Boolean switches: a set flag wins, else the file, else false.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool, CliError> {
        let v = flag || self.from_file::<bool>(key)?.unwrap_or(false);
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    /// Flag, then config file, then `SRE_SEED`, then 0.
    pub fn seed(&mut self, flag: Option<u64>) -> Result<u64, CliError> {
        let env = match std::env::var(SEED_ENV) {
            Ok(raw) => Some(
                raw.trim()
                    .parse::<u64>()
                    .map_err(|e| CliError::Usage(format!("{SEED_ENV}: {e}")))?,
            ),
            Err(_) => None,
        };
        let v = match flag {
            Some(v) => v,
            None => self.from_file("seed")?.or(env).unwrap_or(0),
        };
        self.resolved.insert("seed".into(), v.to_string());
        Ok(v)
    }

    /// Rejects config keys that no resolution step consumed.
    pub fn finish(&self) -> Result<(), CliError> {
        let unknown: Vec<&str> = self
            .file
            .keys()
            .filter(|k| !self.resolved.contains_key(*k) && k.as_str() != "config")
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(format!("unknown config keys: {}", unknown.join(", "))))
        }
    }

    /// Drops a resolved key from the echo.
    pub fn omit(&mut self, key: &str) {
        self.resolved.remove(key);
    }

    pub fn render(&self, command: &str) -> String {
        let mut out = format!("command={command}\n");
        for (k, v) in &self.resolved {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_underscores() {
        let kv = parse_kv("# run\nbatch_size = 16\n\nloss=hcl\n").unwrap();
        assert_eq!(kv["batch-size"], "16");
        assert_eq!(kv["loss"], "hcl");
        assert!(parse_kv("novalue").is_err());
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let mut s = Settings {
            file: parse_kv("epochs=7\nlr=0.1").unwrap(),
            ..Settings::default()
        };
        assert_eq!(s.get("epochs", Some(3usize), 200).unwrap(), 3);
        assert_eq!(s.get("lr", None, 5e-4).unwrap(), 0.1);
        assert_eq!(s.get("batch-size", None, 32usize).unwrap(), 32);
        s.finish().unwrap();
        assert!(s.render("train").contains("epochs=3\n"));
    }

    #[test]
    fn unknown_and_malformed_keys_rejected() {
        let mut s = Settings {
            file: parse_kv("epochs=x\ntypo=1").unwrap(),
            ..Settings::default()
        };
        assert!(s.get("epochs", None, 1usize).is_err());
        assert!(s.finish().is_err());
    }
}
