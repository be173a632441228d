//! Key-value config files. Every CLI option can be supplied either as a
//! flag or as a `key = value` line; flags win over config entries, config
//! entries win over built-in defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use exvi_core::{Error, Result};

/// Parsed `key = value` file. Keys are the long flag names of the CLI
/// options they mirror (e.g. `steps = 20000`, `mode = perfect`). Blank
/// lines and `#` comments are ignored.
#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::validation(format!(
                    "config line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                ))
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::validation(format!("config line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::validation(format!(
                    "config line {}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
        }
        Ok(ConfigMap { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    /// Flag > config > default resolution for a parseable value.
    pub fn resolve<T: FromStr + Clone>(
        &self,
        flag: Option<T>,
        key: &str,
        default: T,
    ) -> Result<T> {
        self.resolve_opt(flag, key)
            .map(|v| v.unwrap_or(default))
    }

    /// Flag > config resolution with no default.
    pub fn resolve_opt<T: FromStr + Clone>(
        &self,
        flag: Option<T>,
        key: &str,
    ) -> Result<Option<T>> {
        if let Some(v) = flag {
            return Ok(Some(v));
        }
        match self.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::validation(format!("config key `{key}`: bad value `{raw}`"))),
            None => Ok(None),
        }
    }

    /// Flag > config resolution for a value that must come from somewhere.
    pub fn resolve_required<T: FromStr + Clone>(
        &self,
        flag: Option<T>,
        key: &str,
    ) -> Result<T> {
        self.resolve_opt(flag, key)?.ok_or_else(|| {
            Error::validation(format!("missing required option `--{key}` (or config key `{key}`)"))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blanks_and_values() {
        let cfg = ConfigMap::parse("# header\n\nsteps = 500\n mode=perfect \nout = /tmp/x\n").unwrap();
        assert_eq!(cfg.get("steps"), Some("500"));
        assert_eq!(cfg.get("mode"), Some("perfect"));
        assert_eq!(cfg.get("out"), Some("/tmp/x"));
        assert_eq!(cfg.get("missing"), None);
    }

    #[test]
    fn flag_beats_config_beats_default() {
        let cfg = ConfigMap::parse("steps = 500\n").unwrap();
        assert_eq!(cfg.resolve(Some(9usize), "steps", 1).unwrap(), 9);
        assert_eq!(cfg.resolve(None::<usize>, "steps", 1).unwrap(), 500);
        assert_eq!(cfg.resolve(None::<usize>, "other", 1).unwrap(), 1);
    }

    #[test]
    fn malformed_lines_and_duplicates_rejected() {
        assert!(ConfigMap::parse("just words\n").is_err());
        assert!(ConfigMap::parse("= 3\n").is_err());
        assert!(ConfigMap::parse("a = 1\na = 2\n").is_err());
        let cfg = ConfigMap::parse("steps = abc\n").unwrap();
        assert!(cfg.resolve(None::<usize>, "steps", 1).is_err());
    }

    #[test]
    fn required_values_must_be_present() {
        let cfg = ConfigMap::parse("").unwrap();
        assert!(cfg.resolve_required(None::<String>, "data").is_err());
        assert_eq!(cfg.resolve_required(Some(3u64), "seed").unwrap(), 3);
    }
}
