//! Run configuration. Every section rejects unknown keys.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::WorldSpec;
use crate::error::{check_unit, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Node width.
    pub d: usize,
    /// Word-vector width before the input projection.
    pub d_word: usize,
    /// Object nodes per segment.
    pub n_objects: usize,
    /// Action nodes per segment.
    pub n_actions: usize,
    /// Event queries per graph.
    pub n_events: usize,
    pub scl_layers: usize,
    pub hsa_layers: usize,
    pub heads: usize,
    /// Hidden width of the interval head.
    pub mlp_hidden: usize,
    /// Seed of the hash-derived word vectors.
    pub embedding_seed: u64,
    /// Optional GloVe-style word-vector file of width `d_word`.
    pub embeddings: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 384,
            d_word: 300,
            n_objects: 5,
            n_actions: 3,
            n_events: 4,
            scl_layers: 2,
            hsa_layers: 2,
            heads: 4,
            mlp_hidden: 384,
            embedding_seed: 0,
            embeddings: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub mask_p: f64,
    pub lambda: f64,
    pub omega: f64,
    pub tau: f64,
    pub eta: f64,
    pub u: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mask_p: 0.1,
            lambda: 0.4,
            omega: 0.995,
            tau: 0.5,
            eta: 0.4,
            u: 10.0,
        }
    }
}

/// Ablation switches. All on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub scl: bool,
    pub vcl: bool,
    pub hsa: bool,
    pub vcc: bool,
    pub msm: bool,
    pub sc: bool,
    pub sam: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            scl: true,
            vcl: true,
            hsa: true,
            vcc: true,
            msm: true,
            sc: true,
            sam: true,
        }
    }
}

impl Toggles {
    pub fn sism(&self) -> bool {
        self.msm || self.sc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 32,
            epochs: 30,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub toggles: Toggles,
    pub train: TrainConfig,
    pub paths: Paths,
    pub world: WorldSpec,
}

/// Pulls the offending key out of serde's `unknown field` message.
fn unknown_key(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            match unknown_key(&msg) {
                Some(key) => Error::UnknownConfigKey(key),
                None => Error::Config(msg),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative paths relative to the directory holding the config.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.paths.data_dir, &mut self.paths.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = self.model.embeddings.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let positive = [
            ("model.d", m.d),
            ("model.d_word", m.d_word),
            ("model.n_events", m.n_events),
            ("model.heads", m.heads),
            ("model.mlp_hidden", m.mlp_hidden),
            ("train.batch", self.train.batch),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if m.n_objects + m.n_actions == 0 {
            return Err(Error::Config("model.n_objects + model.n_actions must be positive".into()));
        }
        if m.d % m.heads != 0 {
            return Err(Error::Config(format!(
                "model.d = {} is not divisible by model.heads = {}",
                m.d, m.heads
            )));
        }
        let l = &self.loss;
        check_unit("loss.mask_p", l.mask_p)?;
        check_unit("loss.lambda", l.lambda)?;
        check_unit("loss.omega", l.omega)?;
        if !(l.tau > 0.0) {
            return Err(Error::OutOfRange {
                name: "loss.tau",
                value: l.tau,
                range: "(0, inf)",
            });
        }
        if !(l.eta > 0.0) {
            return Err(Error::OutOfRange {
                name: "loss.eta",
                value: l.eta,
                range: "(0, inf)",
            });
        }
        if !(l.u > 1.0) {
            return Err(Error::OutOfRange {
                name: "loss.u",
                value: l.u,
                range: "(1, inf)",
            });
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(Error::OutOfRange {
                name: "train.lr",
                value: self.train.lr,
                range: "(0, inf)",
            });
        }
        self.world.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_setup() {
        let c = RunConfig::default();
        assert_eq!((c.model.d, c.model.n_objects, c.model.n_actions), (384, 5, 3));
        assert_eq!((c.model.n_events, c.model.scl_layers, c.model.hsa_layers, c.model.heads), (4, 2, 2, 4));
        assert_eq!((c.loss.mask_p, c.loss.lambda, c.loss.omega), (0.1, 0.4, 0.995));
        assert_eq!((c.loss.tau, c.loss.eta, c.loss.u), (0.5, 0.4, 10.0));
        assert_eq!((c.train.lr, c.train.batch), (1e-4, 32));
        c.validate().unwrap();
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_json(r#"{"model": {"d": 8, "depth": 3}}"#).unwrap_err();
        assert!(matches!(&err, Error::UnknownConfigKey(k) if k == "depth"), "{err}");
        let err = RunConfig::from_json(r#"{"modle": {}}"#).unwrap_err();
        assert!(matches!(&err, Error::UnknownConfigKey(k) if k == "modle"));
        assert!(err.is_validation());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = RunConfig::from_json(r#"{"model": {"d": 16, "heads": 4}, "toggles": {"vcc": false}}"#).unwrap();
        assert_eq!(c.model.d, 16);
        assert_eq!(c.model.n_events, 4);
        assert!(!c.toggles.vcc && c.toggles.sam);
    }

    #[test]
    fn range_checks() {
        assert!(RunConfig::from_json(r#"{"loss": {"lambda": 1.5}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"loss": {"u": 1.0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"d": 10, "heads": 4}}"#).is_err());
    }
}
