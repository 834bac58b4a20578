//! Flat `key = value` config files and flag resolution.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Default)]
pub struct KvFile {
    map: BTreeMap<String, String>,
}

impl KvFile {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "{}:{}: expected key = value",
                    path.display(),
                    lineno + 1
                )));
            };
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self { map })
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|e| CliError::Config(format!("config key {key} = {raw:?}: {e}"))),
        }
    }

    /// Flag value, else config-file value, else the built-in default.
    pub fn resolve<T: FromStr + Clone>(
        &self,
        flag: &Option<T>,
        key: &str,
        default: T,
    ) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        if let Some(v) = flag {
            return Ok(v.clone());
        }
        Ok(self.parse(key)?.unwrap_or(default))
    }

    /// Flag value, else config-file value, else an error naming the key.
    pub fn require<T: FromStr + Clone>(&self, flag: &Option<T>, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        if let Some(v) = flag {
            return Ok(v.clone());
        }
        self.parse(key)?
            .ok_or_else(|| CliError::Config(format!("missing required option --{key}")))
    }
}

pub fn parse_seed_list(raw: &str) -> Result<Vec<u64>, CliError> {
    let seeds: Result<Vec<u64>, _> = raw
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u64>())
        .collect();
    let seeds = seeds.map_err(|e| CliError::Config(format!("bad seed list {raw:?}: {e}")))?;
    if seeds.is_empty() {
        return Err(CliError::Config("empty seed list".into()));
    }
    Ok(seeds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_overrides_file_overrides_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.conf");
        std::fs::write(&path, "epochs = 7\n").unwrap();
        let kv = KvFile::load(Some(&path)).unwrap();
        assert_eq!(kv.resolve(&Some(3usize), "epochs", 100).unwrap(), 3);
        assert_eq!(kv.resolve(&None::<usize>, "epochs", 100).unwrap(), 7);
        assert_eq!(kv.resolve(&None::<usize>, "other", 100).unwrap(), 100);
        assert!(kv.require(&None::<usize>, "missing").is_err());
    }

    #[test]
    fn seeds_parse() {
        assert_eq!(parse_seed_list("0,1, 2").unwrap(), vec![0, 1, 2]);
        assert!(parse_seed_list("a").is_err());
        assert!(parse_seed_list("").is_err());
    }
}
