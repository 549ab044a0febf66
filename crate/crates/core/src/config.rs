//! Training configuration, bundled profiles and validation.
//!
//! A user document is deep-merged over a profile, checked for unknown keys,
//! deserialized and range-checked. The result is fully explicit: serializing
//! it and validating again yields the same value.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::backdoor::{BaConfig, Strategy};
use std::path::Path;

use crate::data::{build_rotated_mnist, load_mnist, rotated_mnist_heldout, synthetic_heldout, synthetic_split, MultiDomainDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{BundleSpec, DecoderSpec, EncoderSpec};
use crate::optim::{LrSchedule, OptimizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `f_S` and `C_S` with label-smoothed cross-entropy only.
    Baseline,
    /// Entropy terms replaced by gradient-reversed misclassification.
    DualDann,
    /// Dual encoders with maximum-entropy adversaries.
    Mddan,
    /// MDDAN plus backdoor adjustment.
    Dir,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::DualDann, Variant::Mddan, Variant::Dir];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::DualDann => "dual_dann",
            Variant::Mddan => "mddan",
            Variant::Dir => "dir",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config("variant", format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// 100 digits per class at 0/15/30/45/60 degrees; test at 75 degrees.
    RotatedMnist { seed: u64 },
    /// Synthetic glyphs; one extra style is generated and held out for testing.
    Synthetic {
        domains: usize,
        ids: usize,
        per_class: usize,
        image_size: usize,
        seed: u64,
    },
}

impl DataConfig {
    pub fn counts(&self) -> (usize, usize, [usize; 3]) {
        match *self {
            DataConfig::RotatedMnist { .. } => (10, 5, [1, 28, 28]),
            DataConfig::Synthetic {
                domains,
                ids,
                image_size,
                ..
            } => (ids, domains, [1, image_size, image_size]),
        }
    }

    pub fn synthetic_spec(&self) -> Option<(SyntheticSpec, u64)> {
        match *self {
            DataConfig::Synthetic {
                domains,
                ids,
                per_class,
                image_size,
                seed,
            } => Some((
                SyntheticSpec {
                    domains,
                    ids,
                    per_class,
                    image_size,
                },
                seed,
            )),
            DataConfig::RotatedMnist { .. } => None,
        }
    }
}

/// Held-out rotated digits per class and angle used by the latent probes.
pub const MNIST_HELDOUT_PER_CLASS: usize = 20;

/// Training set, unseen-domain test set, and fresh samples of the training
/// domains for probing.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: MultiDomainDataset,
    pub test: MultiDomainDataset,
    pub heldout: MultiDomainDataset,
}

impl DataConfig {
    /// Builds the datasets. Rotated MNIST reads the IDX files in `mnist_dir`.
    pub fn build(&self, mnist_dir: Option<&Path>) -> Result<Datasets> {
        match *self {
            DataConfig::RotatedMnist { seed } => {
                let dir = mnist_dir.ok_or_else(|| Error::config("data-dir", "rotated-mnist needs the directory holding the MNIST IDX files"))?;
                let (train_pool, test_pool) = load_mnist(dir)?;
                let rm = build_rotated_mnist(&train_pool, &test_pool, seed)?;
                let heldout = rotated_mnist_heldout(&train_pool, &rm.train_indices, MNIST_HELDOUT_PER_CLASS, seed)?;
                Ok(Datasets {
                    train: rm.train,
                    test: rm.test,
                    heldout,
                })
            }
            DataConfig::Synthetic { .. } => {
                let (spec, seed) = self.synthetic_spec().expect("synthetic config");
                let (train, test) = synthetic_split(&spec, seed)?;
                Ok(Datasets {
                    train,
                    test,
                    heldout: synthetic_heldout(&spec, seed)?,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderSpec,
    pub decoder: Option<DecoderSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    /// Smoothing of the identity loss on `C_S(f_S(x))`.
    pub label_smoothing: f64,
    /// Smoothing of the invariance loss; off by default.
    pub invar_smoothing: f64,
    /// Weight of the reconstruction loss; needs a decoder when positive.
    pub recon_weight: f64,
    /// Reversal strength for the dual-DANN variant.
    pub grl_lambda: f64,
    pub optimizer: OptimizerConfig,
    pub schedule: LrSchedule,
    pub epochs: u32,
    pub batch_size: usize,
    pub ba: BaConfig,
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
}

pub const PROFILES: [&str; 3] = ["rotated-mnist", "synthetic-smoke", "synthetic-sweep"];
/// Epochs of the `synthetic-sweep` profile.
pub const SWEEP_EPOCHS: u32 = 40;

impl TrainConfig {
    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "rotated-mnist" => Ok(TrainConfig {
                variant: Variant::Dir,
                lambda1: 1.0,
                lambda2: 0.1,
                lambda3: 1.0,
                lambda4: 1.0,
                label_smoothing: 0.1,
                invar_smoothing: 0.0,
                recon_weight: 1.0,
                grl_lambda: 1.0,
                optimizer: OptimizerConfig::adam(0.001),
                schedule: LrSchedule::Warmup { warmup_epochs: 100 },
                epochs: 500,
                batch_size: 100,
                ba: BaConfig {
                    strategy: Strategy::KMixHard,
                    k: 10,
                    alpha: 0.5,
                },
                seed: 0,
                model: ModelConfig {
                    encoder: EncoderSpec::mnist(2),
                    decoder: Some(DecoderSpec::mnist()),
                },
                data: DataConfig::RotatedMnist { seed: 0 },
            }),
            "synthetic-smoke" => Ok(TrainConfig {
                variant: Variant::Dir,
                lambda1: 1.0,
                lambda2: 0.1,
                lambda3: 1.0,
                lambda4: 1.0,
                label_smoothing: 0.1,
                invar_smoothing: 0.0,
                recon_weight: 0.0,
                grl_lambda: 1.0,
                optimizer: OptimizerConfig::adam(0.001),
                schedule: LrSchedule::Constant,
                epochs: 3,
                batch_size: 32,
                ba: BaConfig {
                    strategy: Strategy::KMixup,
                    k: 10,
                    alpha: 0.5,
                },
                seed: 0,
                model: ModelConfig {
                    encoder: EncoderSpec::conv_stack([1, 16, 16], [8, 16], 3, 8),
                    decoder: None,
                },
                data: DataConfig::Synthetic {
                    domains: 3,
                    ids: 4,
                    per_class: 32,
                    image_size: 16,
                    seed: 0,
                },
            }),
            "synthetic-sweep" => Ok(TrainConfig {
                epochs: SWEEP_EPOCHS,
                ..Self::profile("synthetic-smoke")?
            }),
            other => Err(Error::config(
                "profile",
                format!("unknown profile `{other}` (known: {})", PROFILES.join(", ")),
            )),
        }
    }

    pub fn bundle_spec(&self) -> BundleSpec {
        let (num_ids, num_domains, _) = self.data.counts();
        BundleSpec {
            encoder: self.model.encoder.clone(),
            num_ids,
            num_domains,
            decoder: self.model.decoder,
        }
    }

    /// Range checks across fields.
    pub fn validate(&self) -> Result<()> {
        let nonneg = |field: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be finite and >= 0, got {v}")))
            }
        };
        nonneg("lambda1", self.lambda1)?;
        nonneg("lambda2", self.lambda2)?;
        nonneg("lambda3", self.lambda3)?;
        nonneg("lambda4", self.lambda4)?;
        nonneg("recon_weight", self.recon_weight)?;
        nonneg("grl_lambda", self.grl_lambda)?;
        for (field, v) in [("label_smoothing", self.label_smoothing), ("invar_smoothing", self.invar_smoothing)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field, format!("must lie in [0, 1), got {v}")));
            }
        }
        let o = &self.optimizer;
        if !(o.lr.is_finite() && o.lr > 0.0) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        for (field, v) in [("optimizer.momentum", o.momentum), ("optimizer.beta1", o.beta1), ("optimizer.beta2", o.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field, format!("must lie in [0, 1), got {v}")));
            }
        }
        if !(o.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        if let LrSchedule::Step { gamma, .. } = self.schedule {
            if !(gamma.is_finite() && gamma > 0.0) {
                return Err(Error::config("schedule.gamma", "must be positive"));
            }
        }
        if self.epochs < 1 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        self.ba.validate()?;
        let pool = self.batch_size - 1;
        let needs = match self.ba.strategy {
            Strategy::KRandom | Strategy::KHardest | Strategy::KMixHard => self.ba.k,
            Strategy::KMixup => 1,
        };
        if self.variant == Variant::Dir && needs > pool {
            return Err(Error::config(
                "ba.k",
                format!("K = {} exceeds the {pool} other samples in a batch", self.ba.k),
            ));
        }
        if let DataConfig::Synthetic {
            domains,
            ids,
            per_class,
            image_size,
            ..
        } = self.data
        {
            if domains < 2 || ids < 2 {
                return Err(Error::config("data", "need at least 2 domains and 2 identities"));
            }
            if per_class == 0 {
                return Err(Error::config("data.per_class", "must be positive"));
            }
            if image_size < 8 {
                return Err(Error::config("data.image_size", "must be at least 8"));
            }
            if domains * ids * per_class < self.batch_size {
                return Err(Error::config("batch_size", "larger than the training set"));
            }
        }
        let (_, _, shape) = self.data.counts();
        if self.model.encoder.input_shape != shape {
            return Err(Error::config(
                "model.encoder.input_shape",
                format!("{:?} does not match data images {shape:?}", self.model.encoder.input_shape),
            ));
        }
        self.bundle_spec().validate()?;
        if self.recon_weight > 0.0 && self.model.decoder.is_none() && self.variant != Variant::Baseline {
            return Err(Error::config("recon_weight", "a positive weight needs model.decoder"));
        }
        Ok(())
    }
}

/// Deep merge where `overlay` wins. Objects merge key by key unless the
/// overlay switches a tagged union's `kind`, in which case it replaces the
/// whole object. Unknown keys are reported with their dotted path.
fn merge(base: &mut Value, overlay: &Value, path: &str) -> Result<()> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            let switches_kind = matches!((b.get("kind"), o.get("kind")), (Some(x), Some(y)) if x != y);
            if switches_kind {
                *b = o.clone();
                return Ok(());
            }
            for (k, v) in o {
                let child = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &child)?,
                    None => return Err(Error::config(child, "unknown key")),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

/// Resolves a user document against a profile into a checked config.
pub fn validate_config(document: &Value, profile: &str) -> Result<TrainConfig> {
    if !document.is_object() {
        return Err(Error::config("(root)", "config must be a JSON object"));
    }
    let mut resolved = serde_json::to_value(TrainConfig::profile(profile)?)?;
    merge(&mut resolved, document, "")?;
    let cfg: TrainConfig = serde_path_to_error::deserialize(&resolved).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path == "." { "(root)".into() } else { path }, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses UTF-8 JSON text and resolves it.
pub fn validate_config_str(text: &str, profile: &str) -> Result<TrainConfig> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::config("(root)", format!("invalid JSON: {e}")))?;
    validate_config(&doc, profile)
}

/// Sets `value` at a dotted path inside a JSON object, creating objects on the way.
pub fn set_path(doc: &mut Value, path: &str, value: Value) {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        let obj = cur.as_object_mut().expect("just made an object");
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return;
        }
        cur = obj.entry((*part).to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        for p in PROFILES {
            TrainConfig::profile(p).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn set_path_builds_objects() {
        let mut v = serde_json::json!({});
        set_path(&mut v, "ba.k", serde_json::json!(5));
        assert_eq!(v, serde_json::json!({"ba": {"k": 5}}));
    }
}
