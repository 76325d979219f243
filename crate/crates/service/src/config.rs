use std::path::{Path, PathBuf};

use capfeed::augment::image::ImageAugmentConfig;
use capfeed::augment::text::TextAugmentConfig;
use capfeed::continual::{UpdateConfig, DEFAULT_CAPACITY};
use capfeed::feedback::ApprovalPolicy;
use serde::{Deserialize, Serialize};

use crate::ServiceError;

/// Service settings, read from one TOML file and overridden by `CAPFEED_*`
/// environment variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    /// Checkpoint served at startup when `checkpoint_dir` has no `latest.json`.
    pub checkpoint: Option<PathBuf>,
    /// Where updated checkpoints are written.
    pub checkpoint_dir: PathBuf,
    pub log_path: PathBuf,
    /// Dataset directory (`images.jsonl` + `images/`) whose images can be predicted by id.
    pub data_dir: Option<PathBuf>,
    /// Replay memory file; kept in memory only when unset.
    pub memory_path: Option<PathBuf>,
    pub memory_capacity: usize,
    pub memory_seed: u64,
    /// Image variants generated per bbox annotation.
    pub image_augmentations: usize,
    /// Base seed for augmentation; each event mixes in its own number.
    pub augment_seed: u64,
    /// JSON stub table for back-translation and paraphrase.
    pub stub_table: Option<PathBuf>,
    /// HTTP text backend; takes precedence over `stub_table`.
    pub backend_url: Option<String>,
    pub text: TextAugmentConfig,
    pub image: ImageAugmentConfig,
    pub update: UpdateConfig,
    pub approval: ApprovalPolicy,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen: "127.0.0.1:8080".into(),
            checkpoint: None,
            checkpoint_dir: "checkpoints".into(),
            log_path: "events.jsonl".into(),
            data_dir: None,
            memory_path: None,
            memory_capacity: DEFAULT_CAPACITY,
            memory_seed: 0,
            image_augmentations: capfeed::augment::image::DEFAULT_IMAGE_AUGMENTATIONS,
            augment_seed: 0,
            stub_table: None,
            backend_url: None,
            text: TextAugmentConfig::default(),
            image: ImageAugmentConfig::default(),
            update: UpdateConfig::default(),
            approval: ApprovalPolicy::default(),
        }
    }
}

fn bad(var: &str, value: &str) -> ServiceError {
    ServiceError::Config(format!("{var}={value:?} is not valid"))
}

fn parse<T: std::str::FromStr>(var: &str, value: &str) -> Result<T, ServiceError> {
    value.trim().parse().map_err(|_| bad(var, value))
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Config file (when given) plus overrides from the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ServiceError> {
        let mut cfg = match path {
            Some(p) => Self::read(p)?,
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    /// Apply `CAPFEED_*` overrides looked up through `get`.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ServiceError> {
        let path = |k: &str| get(k).map(PathBuf::from);
        if let Some(v) = get("CAPFEED_LISTEN") {
            self.listen = v;
        }
        if let Some(v) = path("CAPFEED_CHECKPOINT") {
            self.checkpoint = Some(v);
        }
        if let Some(v) = path("CAPFEED_CHECKPOINT_DIR") {
            self.checkpoint_dir = v;
        }
        if let Some(v) = path("CAPFEED_LOG_PATH") {
            self.log_path = v;
        }
        if let Some(v) = path("CAPFEED_DATA_DIR") {
            self.data_dir = Some(v);
        }
        if let Some(v) = path("CAPFEED_MEMORY_PATH") {
            self.memory_path = Some(v);
        }
        if let Some(v) = get("CAPFEED_BACKEND_URL") {
            self.backend_url = Some(v);
        }
        if let Some(v) = path("CAPFEED_STUB_TABLE") {
            self.stub_table = Some(v);
        }
        let var = "CAPFEED_MEMORY_CAPACITY";
        if let Some(v) = get(var) {
            self.memory_capacity = parse(var, &v)?;
        }
        let var = "CAPFEED_IMAGE_AUGMENTATIONS";
        if let Some(v) = get(var) {
            self.image_augmentations = parse(var, &v)?;
        }
        let var = "CAPFEED_MAX_SYNONYMS";
        if let Some(v) = get(var) {
            self.text.n_synonym = parse(var, &v)?;
        }
        let var = "CAPFEED_MAX_PARAPHRASES";
        if let Some(v) = get(var) {
            self.text.n_paraphrase = parse(var, &v)?;
        }
        if let Some(v) = get("CAPFEED_PIVOTS") {
            self.text.pivots = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
        }
        let var = "CAPFEED_REPLAY_EVERY";
        if let Some(v) = get(var) {
            self.update.replay_every = match v.trim() {
                "off" | "none" | "0" => None,
                other => Some(parse(var, other)?),
            };
        }
        let var = "CAPFEED_BATCH_SIZE";
        if let Some(v) = get(var) {
            self.update.batch_size = parse(var, &v)?;
        }
        let var = "CAPFEED_EPOCHS";
        if let Some(v) = get(var) {
            self.update.epochs = parse(var, &v)?;
        }
        let var = "CAPFEED_LR";
        if let Some(v) = get(var) {
            self.update.lr = parse(var, &v)?;
        }
        let var = "CAPFEED_RANK_CUTOFF";
        if let Some(v) = get(var) {
            self.approval.rank_cutoff = parse(var, &v)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        self.update.validate()?;
        if self.memory_capacity == 0 {
            return Err(ServiceError::Config("memory_capacity must be positive".into()));
        }
        if self.text.n_synonym > 0 && !(self.text.synonym_rate > 0.0 && self.text.synonym_rate <= 1.0) {
            return Err(ServiceError::Config(format!(
                "synonym_rate {} outside (0, 1]",
                self.text.synonym_rate
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn toml_then_env() {
        let mut cfg = ServiceConfig::from_toml(
            r#"
            listen = "0.0.0.0:9000"
            memory_capacity = 50
            [update]
            batch_size = 4
            [text]
            n_paraphrase = 2
            "#,
        )
        .unwrap();
        assert_eq!(cfg.update.batch_size, 4);
        assert_eq!(cfg.update.replay_every, Some(10));
        assert_eq!(cfg.text.n_synonym, 3);
        let env: HashMap<&str, &str> = [("CAPFEED_REPLAY_EVERY", "off"), ("CAPFEED_MEMORY_CAPACITY", "7")].into();
        cfg.apply_env(|k| env.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!(cfg.listen, "0.0.0.0:9000");
        assert_eq!(cfg.update.replay_every, None);
        assert_eq!(cfg.memory_capacity, 7);
    }

    #[test]
    fn bad_override_is_rejected() {
        let mut cfg = ServiceConfig::default();
        assert!(cfg.apply_env(|k| (k == "CAPFEED_BATCH_SIZE").then(|| "many".to_string())).is_err());
        assert!(ServiceConfig::from_toml("nonsense = 1").is_err());
    }
}
