use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

pub const DEFAULT_MAX_UPLOAD: usize = 5 * 1024 * 1024;
pub const DEFAULT_PORT: u16 = 8080;

/// Startup configuration. Read from TOML, then patched from `CELLSCOPE_*`
/// environment variables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub classifier_weights: PathBuf,
    /// Defaults to the sidecar next to the weights.
    pub classifier_spec: Option<PathBuf>,
    pub generator_weights: Option<PathBuf>,
    pub generator_spec: Option<PathBuf>,
    pub max_upload_bytes: usize,
    /// Defaults to a digest of the classifier weight file.
    pub model_version: Option<String>,
    /// Origins allowed cross-origin access; `"*"` allows any.
    pub cors_origins: Vec<String>,
    /// Mask probability above which a predicted pixel becomes a point.
    pub mask_threshold: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: DEFAULT_PORT,
            classifier_weights: PathBuf::from("models/classifier.e2ew"),
            classifier_spec: None,
            generator_weights: None,
            generator_spec: None,
            max_upload_bytes: DEFAULT_MAX_UPLOAD,
            model_version: None,
            cors_origins: vec![
                "http://localhost:5173".into(),
                "http://127.0.0.1:5173".into(),
            ],
            mask_threshold: 0.5,
        }
    }
}

const ENV_KEYS: [&str; 10] = [
    "CELLSCOPE_HOST",
    "CELLSCOPE_PORT",
    "CELLSCOPE_CLASSIFIER_WEIGHTS",
    "CELLSCOPE_CLASSIFIER_SPEC",
    "CELLSCOPE_GENERATOR_WEIGHTS",
    "CELLSCOPE_GENERATOR_SPEC",
    "CELLSCOPE_MAX_UPLOAD_BYTES",
    "CELLSCOPE_MODEL_VERSION",
    "CELLSCOPE_CORS_ORIGINS",
    "CELLSCOPE_MASK_THRESHOLD",
];

fn parse_env<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| ServiceError::Config(format!("{key}={v:?} is not valid")))
}

impl ServiceConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| ServiceError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&s)
    }

    /// Applies overrides from `lookup` (normally the process environment).
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        for key in ENV_KEYS {
            let Some(v) = lookup(key) else { continue };
            match key {
                "CELLSCOPE_HOST" => self.host = v,
                "CELLSCOPE_PORT" => self.port = parse_env(key, &v)?,
                "CELLSCOPE_CLASSIFIER_WEIGHTS" => self.classifier_weights = v.into(),
                "CELLSCOPE_CLASSIFIER_SPEC" => self.classifier_spec = Some(v.into()),
                "CELLSCOPE_GENERATOR_WEIGHTS" => self.generator_weights = Some(v.into()),
                "CELLSCOPE_GENERATOR_SPEC" => self.generator_spec = Some(v.into()),
                "CELLSCOPE_MAX_UPLOAD_BYTES" => self.max_upload_bytes = parse_env(key, &v)?,
                "CELLSCOPE_MODEL_VERSION" => self.model_version = Some(v),
                "CELLSCOPE_CORS_ORIGINS" => {
                    self.cors_origins = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect()
                }
                "CELLSCOPE_MASK_THRESHOLD" => self.mask_threshold = parse_env(key, &v)?,
                _ => unreachable!(),
            }
        }
        self.validate()
    }

    pub fn with_process_env(mut self) -> Result<Self> {
        self.apply_env(|k| std::env::var(k).ok())?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_upload_bytes == 0 {
            return Err(ServiceError::Config("max_upload_bytes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.mask_threshold) {
            return Err(ServiceError::Config(format!(
                "mask_threshold {} outside [0, 1)",
                self.mask_threshold
            )));
        }
        if self.generator_spec.is_some() && self.generator_weights.is_none() {
            return Err(ServiceError::Config(
                "generator_spec given without generator_weights".into(),
            ));
        }
        self.addr().map(|_| ())
    }

    pub fn addr(&self) -> Result<SocketAddr> {
        format!("{}:{}", self.host, self.port)
            .parse()
            .map_err(|_| ServiceError::Config(format!("bad listen address {}:{}", self.host, self.port)))
    }

    pub fn classifier_spec_path(&self) -> PathBuf {
        self.classifier_spec
            .clone()
            .unwrap_or_else(|| cellscope_core::model::spec_sidecar(&self.classifier_weights))
    }

    pub fn generator_spec_path(&self) -> Option<PathBuf> {
        let w = self.generator_weights.as_ref()?;
        Some(
            self.generator_spec
                .clone()
                .unwrap_or_else(|| cellscope_core::model::spec_sidecar(w)),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_env() {
        let mut cfg = ServiceConfig::from_toml(
            "port = 9000\nclassifier_weights = \"m/c.e2ew\"\ncors_origins = []\n",
        )
        .unwrap();
        assert_eq!(cfg.port, 9000);
        assert_eq!(cfg.max_upload_bytes, DEFAULT_MAX_UPLOAD);
        assert_eq!(cfg.classifier_spec_path(), PathBuf::from("m/c.e2ew.spec.json"));
        assert_eq!(cfg.generator_spec_path(), None);

        cfg.apply_env(|k| match k {
            "CELLSCOPE_PORT" => Some("7000".into()),
            "CELLSCOPE_CORS_ORIGINS" => Some("http://a, http://b".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(cfg.port, 7000);
        assert_eq!(cfg.cors_origins, vec!["http://a", "http://b"]);
        assert!(cfg
            .apply_env(|k| (k == "CELLSCOPE_PORT").then(|| "x".into()))
            .is_err());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ServiceConfig::from_toml("prot = 1").is_err());
        assert!(ServiceConfig::from_toml("max_upload_bytes = 0").is_err());
        assert!(ServiceConfig::from_toml("host = \"not a host\"").is_err());
        assert!(ServiceConfig::from_toml("generator_spec = \"g.json\"").is_err());
    }
}
