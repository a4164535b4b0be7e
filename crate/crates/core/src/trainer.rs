//! Pair construction, Adam training with validation-based early stopping,
//! and cross-validated λ sweeps.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::losses::{LossKind, MatchLoss, MindConfig};
use crate::pipeline::{evaluate_batch, Objective, Sample};
use crate::tps::KernelKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Plain,
    Weak,
    Localized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairStrategy {
    AllPairs,
    /// `k` ordered pairs drawn uniformly without replacement.
    RandomK(usize),
}

impl PairStrategy {
    /// All ordered pairs when there are at most `cap`, otherwise `cap` random ones.
    pub fn capped(n: usize, cap: usize) -> Self {
        if n * n.saturating_sub(1) <= cap {
            PairStrategy::AllPairs
        } else {
            PairStrategy::RandomK(cap)
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lambda: f64,
    pub beta: f64,
    pub loss_kind: LossKind,
    /// Patch side for NCC.
    pub ncc_patch: usize,
    pub mind: MindConfig,
    pub variant: Variant,
    /// Region-of-interest mask for the localized variant.
    pub mask: Option<Arc<Mask>>,
    pub epochs: usize,
    pub batch_pairs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub pair_strategy: PairStrategy,
    pub seed: u64,
    /// Epochs without a validation improvement before stopping.
    pub early_stop_patience: usize,
    /// Corner anchors appended to the learned landmarks (0 or 4).
    pub anchors: usize,
    /// When set, each epoch partitions the training images into groups of
    /// this size and visits pairs bucket by bucket (source group, target
    /// group), so a batch touches few distinct images and shares their
    /// encodings. Every pair is still visited once per epoch.
    pub group_size: Option<usize>,
    /// Cap on validation pairs (random subset, fixed seed).
    pub max_val_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.005,
            beta: 1.0,
            loss_kind: LossKind::L2,
            ncc_patch: 5,
            mind: MindConfig::default(),
            variant: Variant::Plain,
            mask: None,
            epochs: 20,
            batch_pairs: 16,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            pair_strategy: PairStrategy::AllPairs,
            seed: 0,
            early_stop_patience: usize::MAX,
            anchors: 4,
            group_size: None,
            max_val_pairs: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.batch_pairs < 1 {
            return bad("batch_pairs must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.variant == Variant::Localized && self.mask.is_none() {
            return bad("the localized variant needs a mask");
        }
        if self.group_size == Some(0) || self.max_val_pairs == 0 {
            return bad("group_size and max_val_pairs must be positive");
        }
        self.objective().validate()
    }

    pub fn match_loss(&self) -> MatchLoss {
        match self.loss_kind {
            LossKind::L2 => MatchLoss::L2,
            LossKind::Ncc => MatchLoss::Ncc {
                patch_size: self.ncc_patch,
            },
            LossKind::Mind => MatchLoss::Mind(self.mind.clone()),
        }
    }

    pub fn objective(&self) -> Objective {
        Objective {
            match_loss: self.match_loss(),
            lambda: self.lambda,
            beta: self.beta,
            weak: self.variant == Variant::Weak,
            mask: if self.variant == Variant::Localized { self.mask.clone() } else { None },
            anchors: self.anchors,
            kernel: KernelKind::ThinPlate2D,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub source: String,
    pub target: String,
    pub source_segmentation: Option<String>,
    pub target_segmentation: Option<String>,
}

/// Ordered index pairs `(i, j)`, `i != j`, over `n` items.
pub fn pair_indices(n: usize, strategy: PairStrategy, seed: u64) -> Result<Vec<(usize, usize)>> {
    if n < 2 {
        return Err(Error::InvalidArgument("pairs need at least two images".into()));
    }
    let total = n * (n - 1);
    let decode = |k: usize| {
        let i = k / (n - 1);
        let r = k % (n - 1);
        (i, if r >= i { r + 1 } else { r })
    };
    match strategy {
        PairStrategy::AllPairs => Ok((0..total).map(decode).collect()),
        PairStrategy::RandomK(k) => {
            if k > total {
                return Err(Error::InvalidArgument(format!("{k} pairs requested but only {total} exist")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(index::sample(&mut rng, total, k).into_iter().map(decode).collect())
        }
    }
}

pub fn make_pairs(ids: &[String], strategy: PairStrategy, seed: u64) -> Result<Vec<PairRecord>> {
    Ok(pair_indices(ids.len(), strategy, seed)?
        .into_iter()
        .map(|(i, j)| PairRecord {
            source: ids[i].clone(),
            target: ids[j].clone(),
            source_segmentation: None,
            target_segmentation: None,
        })
        .collect())
}

/// Samples with a train/validation/test assignment.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, train: Vec<usize>, val: Vec<usize>, test: Vec<usize>) -> Result<Self> {
        let n = samples.len();
        let mut seen = vec![false; n];
        for &i in train.iter().chain(&val).chain(&test) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidArgument(format!("split index {i} is out of range or repeated")));
            }
        }
        if let Some(first) = samples.first() {
            if samples.iter().any(|s| !s.image.same_extent(&first.image)) {
                return Err(Error::Shape("all images must share one extent".into()));
            }
        }
        Ok(Self {
            samples,
            train,
            val,
            test,
        })
    }

    /// Seeded shuffle into train/validation/test by the given fractions
    /// (the remainder goes to test).
    pub fn split(samples: Vec<Sample>, train_frac: f64, val_frac: f64, seed: u64) -> Result<Self> {
        let n = samples.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((n as f64) * train_frac).round() as usize;
        let n_val = (((n as f64) * val_frac).round() as usize).min(n - n_train.min(n));
        let n_train = n_train.min(n);
        let train = order[..n_train].to_vec();
        let val = order[n_train..n_train + n_val].to_vec();
        let test = order[n_train + n_val..].to_vec();
        Self::new(samples, train, val, test)
    }
}

/// One row of the training history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_match_loss: f64,
    pub mean_kappa: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// Parameters after the epoch with the lowest validation loss.
    pub params: EncoderParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, cfg: &TrainConfig, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            theta[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
}

fn epoch_batches(
    cfg: &TrainConfig,
    pairs: &[(usize, usize)],
    images: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<(usize, usize)>> {
    let mut order = pairs.to_vec();
    order.shuffle(rng);
    let Some(g) = cfg.group_size else {
        return order.chunks(cfg.batch_pairs).map(<[_]>::to_vec).collect();
    };
    let mut shuffled = images.to_vec();
    shuffled.shuffle(rng);
    let mut group = BTreeMap::new();
    for (pos, &img) in shuffled.iter().enumerate() {
        group.insert(img, pos / g);
    }
    let mut buckets: BTreeMap<(usize, usize), Vec<(usize, usize)>> = BTreeMap::new();
    for p in order {
        buckets.entry((group[&p.0], group[&p.1])).or_default().push(p);
    }
    let mut buckets: Vec<Vec<(usize, usize)>> = buckets.into_values().collect();
    buckets.shuffle(rng);
    buckets
        .iter()
        .flat_map(|b| b.chunks(cfg.batch_pairs).map(<[_]>::to_vec).collect::<Vec<_>>())
        .collect()
}

/// Mean matching loss and mean κ over `pairs`, evaluated in chunks.
pub fn evaluate_pairs(
    params: &EncoderParams,
    objective: &Objective,
    samples: &[Sample],
    pairs: &[(usize, usize)],
    chunk: usize,
) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs to evaluate".into()));
    }
    let (mut matching, mut kappa) = (0.0, 0.0);
    for batch in pairs.chunks(chunk.max(1)) {
        let out = evaluate_batch(params, objective, samples, batch, false).map_err(|f| {
            let (s, t) = batch[f.pair];
            Error::Sample {
                id: format!("{} -> {}", samples[s].id, samples[t].id),
                cause: Box::new(f.error),
            }
        })?;
        for v in out.pairs {
            matching += v.matching;
            kappa += v.kappa;
        }
    }
    let n = pairs.len() as f64;
    Ok((matching / n, kappa / n))
}

fn val_pairs(cfg: &TrainConfig, val: &[usize]) -> Result<Vec<(usize, usize)>> {
    let strategy = PairStrategy::capped(val.len(), cfg.max_val_pairs);
    Ok(pair_indices(val.len(), strategy, cfg.seed ^ 0x5eed)?
        .into_iter()
        .map(|(i, j)| (val[i], val[j]))
        .collect())
}

/// Trains from `init`, calling `on_epoch` after every completed epoch.
pub fn train_observed(
    cfg: &TrainConfig,
    data: &Dataset,
    init: &EncoderParams,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutput> {
    cfg.validate()?;
    let objective = cfg.objective();
    let train_pairs: Vec<(usize, usize)> = pair_indices(data.train.len(), cfg.pair_strategy, cfg.seed)?
        .into_iter()
        .map(|(i, j)| (data.train[i], data.train[j]))
        .collect();
    let val_pairs = val_pairs(cfg, &data.val)?;
    let mut params = init.clone();
    let mut theta = params.flat();
    let mut adam = Adam::new(theta.len());
    let mut best: Option<(f64, usize, EncoderParams)> = None;
    let mut history = Vec::new();
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let batches = epoch_batches(cfg, &train_pairs, &data.train, &mut rng);
        let (mut loss_sum, mut kappa_sum) = (0.0, 0.0);
        for (b, batch) in batches.iter().enumerate() {
            let out = evaluate_batch(&params, &objective, &data.samples, batch, true).map_err(|f| {
                let (s, t) = batch[f.pair];
                Error::TrainingAborted {
                    epoch,
                    batch: b,
                    source_id: data.samples[s].id.clone(),
                    target_id: data.samples[t].id.clone(),
                    cause: Box::new(f.error),
                }
            })?;
            for v in &out.pairs {
                loss_sum += v.loss;
                kappa_sum += v.kappa;
            }
            adam.step(cfg, &mut theta, out.gradient.as_deref().expect("gradient requested"));
            params.set_flat(&theta).map_err(|e| Error::TrainingAborted {
                epoch,
                batch: b,
                source_id: data.samples[batch[0].0].id.clone(),
                target_id: data.samples[batch[0].1].id.clone(),
                cause: Box::new(e),
            })?;
        }
        let (val_loss, _) = evaluate_pairs(&params, &objective, &data.samples, &val_pairs, cfg.batch_pairs.max(8))?;
        let n = train_pairs.len() as f64;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            val_match_loss: val_loss,
            mean_kappa: kappa_sum / n,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.6e} val {:.6e} kappa {:.4e}",
            record.train_loss,
            record.val_match_loss,
            record.mean_kappa
        );
        on_epoch(&record);
        history.push(record);
        let improved = best.as_ref().is_none_or(|(v, _, _)| val_loss < *v);
        if improved {
            best = Some((val_loss, epoch, params.clone()));
        } else if epoch - best.as_ref().map_or(0, |b| b.1) > cfg.early_stop_patience {
            break;
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(TrainOutput {
        params,
        history,
        best_epoch,
    })
}

pub fn train(cfg: &TrainConfig, data: &Dataset, init: &EncoderParams) -> Result<TrainOutput> {
    train_observed(cfg, data, init, &mut |_| {})
}

/// One cell of a λ sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub fold: usize,
    /// Best validation matching loss of the fold, or the training error.
    pub outcome: std::result::Result<f64, String>,
}

/// Deterministic fold of every sample index in `items`.
pub fn assign_folds(items: &[usize], folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order = items.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Vec::new(); folds];
    for (k, i) in order.into_iter().enumerate() {
        out[k % folds].push(i);
    }
    out
}

/// K-fold cross-validation of λ over `items` (indices into `samples`).
/// Failures are recorded per cell. Rows are sorted by λ, then fold.
pub fn lambda_sweep(
    cfg: &TrainConfig,
    samples: &[Sample],
    items: &[usize],
    init: &EncoderParams,
    lambdas: &[f64],
    folds: usize,
) -> Result<Vec<SweepRow>> {
    if folds < 2 {
        return Err(Error::InvalidArgument("a sweep needs at least two folds".into()));
    }
    if items.len() < 2 * folds {
        return Err(Error::InvalidArgument("each fold needs at least two images".into()));
    }
    let mut sorted = lambdas.to_vec();
    if sorted.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::InvalidArgument("lambdas must be finite and non-negative".into()));
    }
    sorted.sort_by(f64::total_cmp);
    let assignment = assign_folds(items, folds, cfg.seed);
    let mut rows = Vec::new();
    for &lambda in &sorted {
        for (fold, val) in assignment.iter().enumerate() {
            let fit: Vec<usize> = assignment
                .iter()
                .enumerate()
                .filter(|(f, _)| *f != fold)
                .flat_map(|(_, v)| v.iter().copied())
                .collect();
            let data = Dataset::new(samples.to_vec(), fit, val.clone(), Vec::new())?;
            let cell_cfg = TrainConfig {
                lambda,
                ..cfg.clone()
            };
            let outcome = train(&cell_cfg, &data, init)
                .map(|out| {
                    out.history
                        .iter()
                        .map(|r| r.val_match_loss)
                        .fold(f64::INFINITY, f64::min)
                })
                .map_err(|e| e.to_string());
            if let Err(msg) = &outcome {
                log::warn!("sweep cell lambda={lambda} fold={fold} failed: {msg}");
            }
            rows.push(SweepRow { lambda, fold, outcome });
        }
    }
    Ok(rows)
}
