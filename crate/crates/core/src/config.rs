//! Project configuration stored as `simpa.toml`.
//!
//! ```toml
//! [project]
//! name = "demo"
//! taxonomy = "big_five"        # or a path to a taxonomy JSON file
//! default_trs_set = "ipip"
//!
//! [detection]
//! backend = "lexical"
//! threshold = 0.6
//! min_tokens = 3
//! case_insensitive = false
//! chunk_size = 512
//!
//! [[backends]]
//! backend_id = "lexical"
//! kind = "lexical"
//! dim = 262144
//!
//! [feedback]
//! promote_threshold = 0.9
//! max_passes = 3
//! allowed_categories = [1, 2]
//!
//! [annotation]
//! top_k = 20
//! annotators_per_item = 3
//! lease_seconds = 600
//!
//! [utilization]
//! min_tis = 10
//! k_per_facet = 3
//!
//! [generation]                 # optional
//! endpoint = "http://localhost:8080"
//! model = "some-model"
//! max_tokens = 2048
//!
//! [server]
//! api_token_env = "SIMPA_API_TOKEN"   # optional; when set, writes need the token
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::{check_threshold, DEFAULT_CHUNK, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::feedback::{DEFAULT_MAX_PASSES, DEFAULT_PROMOTE_THRESHOLD};
use crate::remote::GenerationConfig;
use crate::similarity::BackendDescriptor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectSection {
    pub name: String,
    #[serde(default = "default_taxonomy")]
    pub taxonomy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_trs_set: Option<String>,
}

fn default_taxonomy() -> String {
    "big_five".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionSection {
    pub backend: String,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_min_tokens")]
    pub min_tokens: usize,
    #[serde(default)]
    pub case_insensitive: bool,
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}
fn default_min_tokens() -> usize {
    3
}
fn default_chunk() -> usize {
    DEFAULT_CHUNK
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackSection {
    #[serde(default = "default_promote")]
    pub promote_threshold: f64,
    #[serde(default = "default_passes")]
    pub max_passes: u32,
    #[serde(default = "default_categories")]
    pub allowed_categories: Vec<u8>,
}

fn default_promote() -> f64 {
    DEFAULT_PROMOTE_THRESHOLD
}
fn default_passes() -> u32 {
    DEFAULT_MAX_PASSES
}
fn default_categories() -> Vec<u8> {
    vec![1, 2]
}

impl Default for FeedbackSection {
    fn default() -> Self {
        FeedbackSection {
            promote_threshold: default_promote(),
            max_passes: default_passes(),
            allowed_categories: default_categories(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSection {
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_redundancy")]
    pub annotators_per_item: usize,
    #[serde(default = "default_lease")]
    pub lease_seconds: u64,
}

fn default_top_k() -> usize {
    20
}
fn default_redundancy() -> usize {
    3
}
fn default_lease() -> u64 {
    600
}

impl Default for AnnotationSection {
    fn default() -> Self {
        AnnotationSection {
            top_k: default_top_k(),
            annotators_per_item: default_redundancy(),
            lease_seconds: default_lease(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilizationSection {
    #[serde(default = "default_min_tis")]
    pub min_tis: u64,
    #[serde(default = "default_k_per_facet")]
    pub k_per_facet: usize,
}

fn default_min_tis() -> u64 {
    10
}
fn default_k_per_facet() -> usize {
    3
}

impl Default for UtilizationSection {
    fn default() -> Self {
        UtilizationSection {
            min_tis: default_min_tis(),
            k_per_facet: default_k_per_facet(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_token_env: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub project: ProjectSection,
    pub detection: DetectionSection,
    #[serde(default)]
    pub backends: Vec<BackendDescriptor>,
    #[serde(default)]
    pub feedback: FeedbackSection,
    #[serde(default)]
    pub annotation: AnnotationSection,
    #[serde(default)]
    pub utilization: UtilizationSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<GenerationConfig>,
    #[serde(default)]
    pub server: ServerSection,
}

impl Config {
    /// A lexical-backend project using the bundled inventory.
    pub fn new(name: impl Into<String>) -> Self {
        Config {
            project: ProjectSection {
                name: name.into(),
                taxonomy: default_taxonomy(),
                default_trs_set: Some("ipip".into()),
            },
            detection: DetectionSection {
                backend: "lexical".into(),
                threshold: DEFAULT_THRESHOLD,
                min_tokens: default_min_tokens(),
                case_insensitive: false,
                chunk_size: DEFAULT_CHUNK,
            },
            backends: vec![BackendDescriptor::lexical("lexical")],
            feedback: FeedbackSection::default(),
            annotation: AnnotationSection::default(),
            utilization: UtilizationSection::default(),
            generation: None,
            server: ServerSection::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.project.name.trim().is_empty() {
            return Err(Error::Config("project.name is empty".into()));
        }
        check_threshold(self.detection.threshold).map_err(|e| Error::Config(e.to_string()))?;
        if self.detection.min_tokens == 0 || self.detection.chunk_size == 0 {
            return Err(Error::Config("detection.min_tokens and chunk_size must be >= 1".into()));
        }
        let mut ids = std::collections::HashSet::new();
        for b in &self.backends {
            if !ids.insert(b.backend_id.as_str()) {
                return Err(Error::Config(format!("backend {} declared twice", b.backend_id)));
            }
        }
        if !ids.contains(self.detection.backend.as_str()) {
            return Err(Error::Config(format!("detection.backend {} is not declared", self.detection.backend)));
        }
        if self.annotation.top_k == 0 || self.annotation.annotators_per_item == 0 {
            return Err(Error::Config("annotation.top_k and annotators_per_item must be >= 1".into()));
        }
        if self.utilization.k_per_facet == 0 {
            return Err(Error::Config("utilization.k_per_facet must be >= 1".into()));
        }
        self.feedback_policy(crate::feedback::PromotionMode::AutoThreshold)
            .validate(self.detection.threshold)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn backend(&self, id: &str) -> Result<&BackendDescriptor> {
        self.backends
            .iter()
            .find(|b| b.backend_id == id)
            .ok_or_else(|| Error::NotFound(format!("backend {id}")))
    }

    pub fn feedback_policy(&self, mode: crate::feedback::PromotionMode) -> crate::feedback::PromotionPolicy {
        crate::feedback::PromotionPolicy {
            mode,
            promote_threshold: self.feedback.promote_threshold,
            allowed_categories: self.feedback.allowed_categories.iter().copied().collect(),
            max_passes: self.feedback.max_passes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_round_trips() {
        let cfg = Config::new("demo");
        let text = cfg.to_toml().unwrap();
        let back = Config::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn documented_example_parses() {
        let doc = include_str!("config.rs");
        let example: String = doc
            .lines()
            .skip_while(|l| !l.starts_with("//! ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| l.strip_prefix("//! ").or_else(|| l.strip_prefix("//!")).unwrap_or(l))
            .collect::<Vec<_>>()
            .join("\n");
        let cfg = Config::parse(&example).unwrap();
        assert_eq!(cfg.generation.unwrap().max_tokens, 2048);
        assert_eq!(cfg.server.api_token_env.as_deref(), Some("SIMPA_API_TOKEN"));
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg = Config::new("x");
        cfg.detection.threshold = 1.5;
        assert!(Config::parse(&cfg.to_toml().unwrap()).is_err());
        let mut cfg = Config::new("x");
        cfg.detection.backend = "missing".into();
        assert!(cfg.validate().is_err());
        let mut cfg = Config::new("x");
        cfg.feedback.promote_threshold = 0.5;
        assert!(cfg.validate().is_err());
        assert!(Config::parse("[project]\nname='x'\nbogus=1\n[detection]\nbackend='lexical'").is_err());
    }

    proptest! {
        #[test]
        fn thresholds_round_trip_bit_exact(t in 0.0f64..=1.0, p in 0.0f64..=1.0, k in 1usize..100) {
            let mut cfg = Config::new("p");
            cfg.detection.threshold = t.min(p);
            cfg.feedback.promote_threshold = t.max(p);
            cfg.annotation.top_k = k;
            let text = cfg.to_toml().unwrap();
            let back = Config::parse(&text).unwrap();
            prop_assert_eq!(back.detection.threshold.to_bits(), cfg.detection.threshold.to_bits());
            prop_assert_eq!(back.feedback.promote_threshold.to_bits(), cfg.feedback.promote_threshold.to_bits());
            prop_assert_eq!(back.to_toml().unwrap(), text);
        }
    }
}
