use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neighborhood::GraphConfig;
use crate::prototype::SinkhornConfig;

/// Which losses drive training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// PGA on base embeddings + MCL + NSI.
    #[default]
    Full,
    /// Hardest-negative triplet loss on base embeddings only.
    TripletOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub profile: String,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub tau: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub epsilon_kernel: f64,
    pub m_tilde: f64,
    pub bank_size: usize,
    pub num_prototypes: usize,
    pub sinkhorn_iters: usize,
    pub sinkhorn_eps: f64,
    pub seed: u64,
    pub embed_dim: usize,
    pub num_codes: usize,
    pub dropout_gcn: f64,
    pub dropout_gat: f64,
    pub gat_heads: usize,
    pub weight_decay: f64,
    /// Share of all steps spent in linear learning-rate warmup.
    pub warmup_fraction: f64,
    pub objective: Objective,
    /// Save a checkpoint every this many epochs; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::synthetic()
    }
}

impl TrainConfig {
    pub fn synthetic() -> Self {
        Self {
            profile: "synthetic".into(),
            batch_size: 16,
            learning_rate: 5e-4,
            epochs: 30,
            tau: 0.1,
            gamma: 0.2,
            alpha: 1.5,
            epsilon_kernel: 1.0,
            m_tilde: 0.999,
            bank_size: 128,
            num_prototypes: 16,
            sinkhorn_iters: 3,
            sinkhorn_eps: 0.05,
            seed: 42,
            embed_dim: 64,
            num_codes: 8,
            dropout_gcn: 0.6,
            dropout_gat: 0.1,
            gat_heads: 1,
            weight_decay: 1e-4,
            warmup_fraction: 0.05,
            objective: Objective::Full,
            checkpoint_every: 0,
        }
    }

    pub fn flickr30k() -> Self {
        Self {
            profile: "flickr30k".into(),
            batch_size: 128,
            epochs: 30,
            m_tilde: 0.999,
            bank_size: 2048,
            num_prototypes: 384,
            embed_dim: 1024,
            ..Self::synthetic()
        }
    }

    pub fn mscoco() -> Self {
        Self {
            profile: "mscoco".into(),
            batch_size: 256,
            bank_size: 4096,
            num_prototypes: 768,
            ..Self::flickr30k()
        }
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "synthetic" => Some(Self::synthetic()),
            "flickr30k" => Some(Self::flickr30k()),
            "mscoco" => Some(Self::mscoco()),
            _ => None,
        }
    }

    /// A built-in profile name or a TOML/JSON file (chosen by extension).
    pub fn load(spec: &str) -> Result<Self> {
        if let Some(c) = Self::profile(spec) {
            return c.validated();
        }
        let path = Path::new(spec);
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingFile(path.to_path_buf()));
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        let config: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        config.validated()
    }

    pub fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let positive = [
            ("learning_rate", self.learning_rate),
            ("tau", self.tau),
            ("alpha", self.alpha),
            ("epsilon_kernel", self.epsilon_kernel),
            ("sinkhorn_eps", self.sinkhorn_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be nonnegative, got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.m_tilde) {
            return bad(format!("m_tilde must lie in [0, 1], got {}", self.m_tilde));
        }
        for (name, v) in [("dropout_gcn", self.dropout_gcn), ("dropout_gat", self.dropout_gat)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction must lie in [0, 1], got {}", self.warmup_fraction));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.bank_size < self.batch_size {
            return bad(format!(
                "bank_size {} is smaller than batch_size {}",
                self.bank_size, self.batch_size
            ));
        }
        if self.num_prototypes < 2 {
            return bad(format!("num_prototypes must be at least 2, got {}", self.num_prototypes));
        }
        if self.sinkhorn_iters == 0 || self.embed_dim == 0 || self.num_codes == 0 {
            return bad("sinkhorn_iters, embed_dim and num_codes must be positive".into());
        }
        if self.gat_heads == 0 || !self.embed_dim.is_multiple_of(self.gat_heads) {
            return bad(format!(
                "gat_heads {} must divide embed_dim {}",
                self.gat_heads, self.embed_dim
            ));
        }
        Ok(())
    }

    pub fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig {
            iters: self.sinkhorn_iters,
            eps: self.sinkhorn_eps,
        }
    }

    pub fn graph(&self) -> GraphConfig {
        GraphConfig {
            epsilon: self.epsilon_kernel,
            alpha: self.alpha,
            heads: self.gat_heads,
            dropout_gcn: self.dropout_gcn,
            dropout_gat: self.dropout_gat,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        for name in ["synthetic", "flickr30k", "mscoco"] {
            TrainConfig::load(name).unwrap();
        }
        let f = TrainConfig::flickr30k();
        assert_eq!((f.batch_size, f.bank_size, f.num_prototypes, f.embed_dim), (128, 2048, 384, 1024));
        let c = TrainConfig::mscoco();
        assert_eq!((c.batch_size, c.bank_size, c.num_prototypes), (256, 4096, 768));
        assert_eq!(c.learning_rate, 5e-4);
        assert_eq!(c.m_tilde, 0.999);
    }

    #[test]
    fn file_formats_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("c.toml");
        std::fs::write(&toml_path, "epochs = 3\nobjective = \"triplet_only\"\n").unwrap();
        let c = TrainConfig::load(toml_path.to_str().unwrap()).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.objective, Objective::TripletOnly);

        let json_path = dir.path().join("c.json");
        std::fs::write(&json_path, r#"{"batch_size": 1}"#).unwrap();
        assert!(matches!(TrainConfig::load(json_path.to_str().unwrap()), Err(Error::Config(_))));

        std::fs::write(&toml_path, "unknown_key = 1\n").unwrap();
        assert!(matches!(TrainConfig::load(toml_path.to_str().unwrap()), Err(Error::Config(_))));

        let missing = dir.path().join("nope.toml");
        assert!(matches!(TrainConfig::load(missing.to_str().unwrap()), Err(Error::MissingFile(_))));
    }
}
