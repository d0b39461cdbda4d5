//! Service configuration.
//!
//! Loaded from a TOML or JSON file (chosen by extension, TOML otherwise),
//! then overridden by environment variables:
//!
//! | variable              | field         |
//! |-----------------------|---------------|
//! | `FLAAS_LISTEN`        | `listen`      |
//! | `FLAAS_DATA_DIR`      | `data_dir`    |
//! | `FLAAS_PAYLOAD_CAP`   | `payload_cap` |
//! | `FLAAS_STATIC_DIR`    | `static_dir`  |
//! | `FLAAS_TICK_MS`       | `tick_ms`     |

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Customer,
    Device,
}

/// A static bearer token. For devices the principal is the numeric device id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiToken {
    pub token: String,
    pub principal: String,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    /// Jobs are kept in memory only when unset.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Maximum request body size in bytes.
    #[serde(default = "default_payload_cap")]
    pub payload_cap: usize,
    /// Optional directory of static assets served under `/`.
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
    /// Interval of the round-deadline check.
    #[serde(default = "default_tick_ms")]
    pub tick_ms: u64,
    #[serde(default)]
    pub tokens: Vec<ApiToken>,
}

fn default_listen() -> SocketAddr {
    ([127, 0, 0, 1], 8080).into()
}

fn default_payload_cap() -> usize {
    8 * 1024 * 1024
}

fn default_tick_ms() -> u64 {
    500
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: default_listen(),
            data_dir: None,
            payload_cap: default_payload_cap(),
            static_dir: None,
            tick_ms: default_tick_ms(),
            tokens: Vec::new(),
        }
    }
}

impl ServerConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let config = Self::parse(&text, is_json)?;
        config.with_env(std::env::vars())
    }

    pub fn parse(text: &str, json: bool) -> Result<Self, ConfigError> {
        let config: Self = if json {
            serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?
        };
        config.validate()?;
        Ok(config)
    }

    /// Applies `FLAAS_*` overrides from `vars`.
    pub fn with_env(mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self, ConfigError> {
        let bad = |k: &str, v: &str| ConfigError::Invalid(format!("{k}={v:?}"));
        for (key, value) in vars {
            match key.as_str() {
                "FLAAS_LISTEN" => self.listen = value.parse().map_err(|_| bad(&key, &value))?,
                "FLAAS_DATA_DIR" => self.data_dir = Some(value.into()),
                "FLAAS_PAYLOAD_CAP" => self.payload_cap = value.parse().map_err(|_| bad(&key, &value))?,
                "FLAAS_STATIC_DIR" => self.static_dir = Some(value.into()),
                "FLAAS_TICK_MS" => self.tick_ms = value.parse().map_err(|_| bad(&key, &value))?,
                _ => {}
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.payload_cap == 0 || self.tick_ms == 0 {
            return Err(ConfigError::Invalid("payload_cap and tick_ms must be positive".into()));
        }
        let mut seen = BTreeMap::new();
        for t in &self.tokens {
            if t.token.is_empty() {
                return Err(ConfigError::Invalid("empty token".into()));
            }
            if seen.insert(t.token.as_str(), ()).is_some() {
                return Err(ConfigError::Invalid(format!("token for {} is repeated", t.principal)));
            }
            if t.role == Role::Device && t.principal.parse::<u32>().is_err() {
                return Err(ConfigError::Invalid(format!(
                    "device principal {:?} is not a device id",
                    t.principal
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOML: &str = r#"
listen = "0.0.0.0:9000"
data_dir = "/var/lib/flaas"
payload_cap = 1024

[[tokens]]
token = "c-secret"
principal = "acme"
role = "customer"

[[tokens]]
token = "d-7"
principal = "7"
role = "device"
"#;

    #[test]
    fn toml_and_env() {
        let c = ServerConfig::parse(TOML, false).unwrap();
        assert_eq!(c.listen.port(), 9000);
        assert_eq!(c.tokens.len(), 2);
        assert_eq!(c.tokens[1].role, Role::Device);
        let c = c
            .with_env([
                ("FLAAS_PAYLOAD_CAP".to_string(), "2048".to_string()),
                ("HOME".to_string(), "/root".to_string()),
            ])
            .unwrap();
        assert_eq!(c.payload_cap, 2048);
        assert!(ServerConfig::default()
            .with_env([("FLAAS_LISTEN".to_string(), "nope".to_string())])
            .is_err());
    }

    #[test]
    fn json_and_rejections() {
        let c = ServerConfig::parse(r#"{"tokens": []}"#, true).unwrap();
        assert_eq!(c, ServerConfig::default());
        assert!(ServerConfig::parse(r#"{"bogus": 1}"#, true).is_err());
        let dup = r#"{"tokens": [
            {"token": "t", "principal": "a", "role": "customer"},
            {"token": "t", "principal": "b", "role": "customer"}]}"#;
        assert!(ServerConfig::parse(dup, true).is_err());
        let bad_device = r#"{"tokens": [{"token": "t", "principal": "phone", "role": "device"}]}"#;
        assert!(ServerConfig::parse(bad_device, true).is_err());
    }
}
