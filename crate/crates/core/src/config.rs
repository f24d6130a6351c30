//! Flat `key = value` configuration files.
//!
//! One assignment per line, `#` starts a comment, blank lines ignored.
//! Keys keep their first occurrence order so a run manifest can echo the
//! resolved configuration verbatim.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {0}: expected `key = value`, got `{1}`")]
    Malformed(usize, String),
    #[error("line {0}: duplicate key `{1}`")]
    DuplicateKey(usize, String),
    #[error("missing required key `{0}`")]
    MissingKey(String),
    #[error("key `{key}`: cannot parse `{value}` as {wanted}")]
    BadValue {
        key: String,
        value: String,
        wanted: &'static str,
    },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
}

#[derive(Clone, Debug, Default)]
pub struct KvConfig {
    entries: Vec<(String, String)>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Malformed(lineno + 1, raw.trim().to_string()))?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::Malformed(lineno + 1, raw.trim().to_string()));
            }
            if entries.iter().any(|(k, _)| *k == key) {
                return Err(ConfigError::DuplicateKey(lineno + 1, key));
            }
            entries.push((key, value));
        }
        Ok(KvConfig { entries })
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, ConfigError> {
        self.get(key).ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    }

    fn parse_as<T: std::str::FromStr>(
        &self,
        key: &str,
        value: &str,
        wanted: &'static str,
    ) -> Result<T, ConfigError> {
        value.parse::<T>().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            wanted,
        })
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.get(key) {
            Some(v) => self.parse_as(key, v, "a real number"),
            None => Ok(default),
        }
    }

    pub fn require_f64(&self, key: &str) -> Result<f64, ConfigError> {
        let v = self.require(key)?.to_string();
        self.parse_as(key, &v, "a real number")
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.get(key) {
            Some(v) => self.parse_as(key, v, "a non-negative integer"),
            None => Ok(default),
        }
    }

    pub fn require_usize(&self, key: &str) -> Result<usize, ConfigError> {
        let v = self.require(key)?.to_string();
        self.parse_as(key, &v, "a non-negative integer")
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.get(key) {
            Some(v) => self.parse_as(key, v, "a non-negative integer"),
            None => Ok(default),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.get(key) {
            Some(v) => self.parse_as(key, v, "true or false"),
            None => Ok(default),
        }
    }

    /// Reject keys outside the allowed set (typo protection).
    pub fn check_known_keys(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        for (k, _) in &self.entries {
            if !allowed.contains(&k.as_str()) {
                return Err(ConfigError::UnknownKey(k.clone()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_order() {
        let cfg = KvConfig::parse("# header\n a = 1 \nb = two # trailing\n\nc=3.5\n").unwrap();
        assert_eq!(cfg.entries().len(), 3);
        assert_eq!(cfg.get("a"), Some("1"));
        assert_eq!(cfg.get("b"), Some("two"));
        assert_eq!(cfg.get_f64("c", 0.0).unwrap(), 3.5);
        assert_eq!(cfg.get_f64("missing", 7.0).unwrap(), 7.0);
    }

    #[test]
    fn rejects_malformed_and_duplicates() {
        assert!(matches!(KvConfig::parse("just a line"), Err(ConfigError::Malformed(1, _))));
        assert!(matches!(
            KvConfig::parse("a = 1\na = 2"),
            Err(ConfigError::DuplicateKey(2, _))
        ));
        assert!(matches!(KvConfig::parse("a ="), Err(ConfigError::Malformed(1, _))));
    }

    #[test]
    fn typed_errors_name_the_key() {
        let cfg = KvConfig::parse("lr = fast").unwrap();
        match cfg.get_f64("lr", 0.0) {
            Err(ConfigError::BadValue { key, .. }) => assert_eq!(key, "lr"),
            other => panic!("unexpected: {:?}", other),
        }
    }
}
