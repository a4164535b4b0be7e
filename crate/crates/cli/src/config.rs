//! Training configuration file: flat `key = value` lines (TOML syntax)
//! named after the trainer's fields, plus the encoder settings. Every key
//! is optional; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tpsmark::encoder::{grid_landmarks, init_params, Architecture, EncoderParams};
use tpsmark::losses::{LossKind, MindConfig};
use tpsmark::trainer::{PairStrategy, TrainConfig, Variant};
use tpsmark::{Image, Mask};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub lambda: Option<f64>,
    pub beta: Option<f64>,
    pub loss_kind: Option<LossKind>,
    pub ncc_patch: Option<usize>,
    pub mind_patch: Option<usize>,
    pub mind_radius: Option<i64>,
    pub variant: Option<Variant>,
    /// Grayscale image used as the localized variant's weight map.
    pub mask: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub batch_pairs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    /// `all_pairs` or `random_k`.
    pub pair_strategy: Option<String>,
    /// Pair count for `random_k`.
    pub pair_k: Option<usize>,
    pub seed: Option<u64>,
    pub early_stop_patience: Option<usize>,
    pub anchors: Option<usize>,
    pub group_size: Option<usize>,
    pub max_val_pairs: Option<usize>,
    /// Channel widths of the four encoder blocks.
    pub widths: Option<[usize; 4]>,
    /// Learned landmarks per image.
    pub landmarks: Option<usize>,
    /// `random` (random head) or `grid` (head starts at a spread-out lattice).
    pub init: Option<String>,
    pub init_seed: Option<u64>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("config {}", path.display()))?;
        if let (Some(m), Some(dir)) = (&cfg.mask, path.parent()) {
            if m.is_relative() {
                cfg.mask = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    /// The trainer configuration with defaults for missing keys.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let pair_strategy = match (self.pair_strategy.as_deref(), self.pair_k) {
            (None | Some("all_pairs"), None) => PairStrategy::AllPairs,
            (Some("random_k"), Some(k)) => PairStrategy::RandomK(k),
            (Some("random_k"), None) => bail!("pair_strategy random_k needs pair_k"),
            (Some("all_pairs") | None, Some(_)) => bail!("pair_k only applies to pair_strategy random_k"),
            (Some(other), _) => bail!("unknown pair_strategy '{other}' (expected all_pairs or random_k)"),
        };
        let mut mind = d.mind.clone();
        if self.mind_patch.is_some() || self.mind_radius.is_some() {
            mind = MindConfig::four_neighborhood(self.mind_patch.unwrap_or(mind.patch_size), self.mind_radius.unwrap_or(mind.displacements[0][0]));
        }
        let mask = match &self.mask {
            Some(p) => {
                let img = Image::load(p).with_context(|| format!("cannot read mask {}", p.display()))?;
                Some(Arc::new(Mask::new(img)?))
            }
            None => None,
        };
        let cfg = TrainConfig {
            lambda: self.lambda.unwrap_or(d.lambda),
            beta: self.beta.unwrap_or(d.beta),
            loss_kind: self.loss_kind.unwrap_or(d.loss_kind),
            ncc_patch: self.ncc_patch.unwrap_or(d.ncc_patch),
            mind,
            variant: self.variant.unwrap_or(d.variant),
            mask,
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_pairs: self.batch_pairs.unwrap_or(d.batch_pairs),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            adam_beta1: self.adam_beta1.unwrap_or(d.adam_beta1),
            adam_beta2: self.adam_beta2.unwrap_or(d.adam_beta2),
            adam_eps: self.adam_eps.unwrap_or(d.adam_eps),
            pair_strategy,
            seed: self.seed.unwrap_or(d.seed),
            early_stop_patience: self.early_stop_patience.unwrap_or(d.early_stop_patience),
            anchors: self.anchors.unwrap_or(d.anchors),
            group_size: self.group_size.or(d.group_size),
            max_val_pairs: self.max_val_pairs.unwrap_or(d.max_val_pairs),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn architecture(&self, width: usize, height: usize) -> Result<Architecture> {
        let arch = Architecture::standard(width, height, self.widths.unwrap_or([16, 32, 64, 128]), self.landmarks.unwrap_or(16));
        arch.validate()?;
        Ok(arch)
    }

    pub fn initial_params(&self, arch: &Architecture) -> Result<EncoderParams> {
        let seed = self.init_seed.unwrap_or(self.seed.unwrap_or(0));
        let params = match self.init.as_deref().unwrap_or("random") {
            "random" => init_params(seed, arch, None)?,
            "grid" => {
                let grid = grid_landmarks(arch.width, arch.height, arch.landmarks)?;
                init_params(seed, arch, Some(&grid))?
            }
            other => bail!("unknown init '{other}' (expected random or grid)"),
        };
        Ok(params)
    }

    /// Every set key as text, for checkpoint metadata.
    pub fn metadata(&self) -> BTreeMap<String, String> {
        let value = serde_json::to_value(self).expect("config serializes");
        value
            .as_object()
            .into_iter()
            .flatten()
            .filter(|(_, v)| !v.is_null())
            .map(|(k, v)| (k.clone(), v.as_str().map_or_else(|| v.to_string(), str::to_string)))
            .collect()
    }
}
