//! key=value configuration files with CLI-flag override (flags win), plus
//! the GUYU_SEED environment override for --seed.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use guyu_core::{Error, Result};

#[derive(Debug, Default)]
pub struct FileConfig {
    map: HashMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let content = std::fs::read_to_string(path)?;
        let mut map = HashMap::new();
        for (lineno, line) in content.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key=value",
                    path.display(),
                    lineno + 1
                ))
            })?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self { map })
    }

    /// flag > config file > default.
    pub fn resolve<T: FromStr + Clone>(
        &self,
        key: &str,
        flag: &Option<T>,
        default: T,
    ) -> Result<T> {
        match self.resolve_opt(key, flag)? {
            Some(v) => Ok(v),
            None => Ok(default),
        }
    }

    pub fn resolve_opt<T: FromStr + Clone>(
        &self,
        key: &str,
        flag: &Option<T>,
    ) -> Result<Option<T>> {
        if let Some(v) = flag {
            return Ok(Some(v.clone()));
        }
        match self.map.get(key) {
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Config(format!("config key {key}: cannot parse {raw:?}"))),
            None => Ok(None),
        }
    }

    pub fn resolve_path(&self, key: &str, flag: &Option<PathBuf>) -> Option<PathBuf> {
        flag.clone()
            .or_else(|| self.map.get(key).map(PathBuf::from))
    }
}

/// GUYU_SEED beats the flag and the config file.
pub fn resolve_seed(file: &FileConfig, flag: &Option<u64>) -> Result<u64> {
    if let Ok(raw) = std::env::var("GUYU_SEED") {
        return raw
            .parse::<u64>()
            .map_err(|_| Error::Config(format!("GUYU_SEED: cannot parse {raw:?} as u64")));
    }
    file.resolve("seed", flag, 0)
}
