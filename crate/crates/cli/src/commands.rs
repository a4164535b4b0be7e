//! The command implementations. Each writes its outputs under a locked
//! directory and moves every file into place only once it is complete.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tpsmark::checkpoint::{Checkpoint, PruneRecord};
use tpsmark::encoder::encode;
use tpsmark::landmarks::append_anchors;
use tpsmark::losses::{LossKind, MatchLoss};
use tpsmark::pipeline::{encode_normalized, query_grid, register_landmarks, Objective, Sample};
use tpsmark::pruner::{greedy_prune, PruneContext, StopRule};
use tpsmark::shape_stats::{export_features, fit_control_stats, zscore};
use tpsmark::synth::{generate, ShapeClass, SynthConfig};
use tpsmark::trainer::{lambda_sweep, pair_indices, train_observed, Dataset, EpochRecord, PairStrategy};
use tpsmark::{Image, LandmarkSet};

use crate::config::RunConfig;
use crate::manifest::{Manifest, Record, Split};
use crate::output::{save_atomic, write_atomic, DirLock};
use crate::plot::{self, Series};

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn save_png(img: &Image, path: &Path) -> Result<()> {
    save_atomic(path, |p| Ok(img.save_png(p)?))
}

#[derive(Args, Clone, Debug)]
pub struct SynthArgs {
    /// Output directory for images, masks and manifest.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Samples per class.
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated shape classes.
    #[arg(long, value_delimiter = ',', default_value = "ellipse,lobed,deformed")]
    pub classes: Vec<ShapeClass>,
    /// Image side in pixels.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
}

/// Per-class split sizes: 10% validation and test each (at least one once
/// there are three samples), the rest for training.
fn split_counts(n: usize) -> (usize, usize, usize) {
    let held = if n >= 3 { ((n as f64 * 0.1).round() as usize).max(1) } else { 0 };
    (n - 2 * held, held, held)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<Manifest> {
    if args.n < 2 {
        bail!("--n must be at least 2");
    }
    if args.classes.is_empty() {
        bail!("at least one class is required");
    }
    let _lock = DirLock::acquire(&args.out)?;
    let cfg = SynthConfig {
        size: args.size,
        ..SynthConfig::default()
    };
    let samples = generate(args.seed, args.n, &args.classes, &cfg)?;
    for sub in ["images", "masks"] {
        std::fs::create_dir_all(args.out.join(sub)).with_context(|| format!("cannot create {}", args.out.join(sub).display()))?;
    }
    let (n_train, n_val, _) = split_counts(args.n);
    let mut records = Vec::with_capacity(samples.len());
    for (ci, chunk) in samples.chunks(args.n).enumerate() {
        let mut order: Vec<usize> = (0..chunk.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        rng.set_stream(ci as u64);
        order.shuffle(&mut rng);
        let mut split = vec![Split::Test; chunk.len()];
        for (rank, &i) in order.iter().enumerate() {
            split[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        for (s, split) in chunk.iter().zip(split) {
            let image = PathBuf::from("images").join(format!("{}.png", s.id));
            let mask = PathBuf::from("masks").join(format!("{}.png", s.id));
            save_png(&s.image, &args.out.join(&image))?;
            save_png(&s.segmentation, &args.out.join(&mask))?;
            records.push(Record {
                id: s.id.clone(),
                image,
                split,
                segmentation: Some(mask),
                label: Some(s.class.name().to_string()),
            });
        }
    }
    let mut manifest = Manifest::new(records, &args.out);
    manifest.size = Some((args.size, args.size));
    write_atomic(&args.out.join("manifest.csv"), |w| manifest.write(w))?;
    Ok(manifest)
}

#[derive(Args, Clone, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Flat key = value configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for model.ckpt and history.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

pub fn write_history(w: impl Write, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["epoch", "train_loss", "val_match_loss", "mean_kappa", "wall_seconds"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_match_loss.to_string(),
            r.mean_kappa.to_string(),
            r.wall_seconds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn dataset(manifest: &Manifest) -> Result<Dataset> {
    let samples = manifest.samples()?;
    let (train, val, test) = (manifest.indices(Split::Train), manifest.indices(Split::Val), manifest.indices(Split::Test));
    if train.len() < 2 || val.len() < 2 {
        bail!("training needs at least two train and two val records");
    }
    Ok(Dataset::new(samples, train, val, test)?)
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let config = RunConfig::load(&args.config)?;
    let cfg = config.train_config()?;
    let manifest = Manifest::load(&args.manifest)?;
    let data = dataset(&manifest)?;
    let first = &data.samples[0].image;
    let arch = config.architecture(first.width(), first.height())?;
    let init = config.initial_params(&arch)?;
    let _lock = DirLock::acquire(&args.out)?;
    let out = train_observed(&cfg, &data, &init, &mut |r| {
        log::info!(
            "epoch {} train {:.6} val {:.6} kappa {:.3e} ({:.1}s)",
            r.epoch,
            r.train_loss,
            r.val_match_loss,
            r.mean_kappa,
            r.wall_seconds
        )
    })?;
    write_atomic(&args.out.join("history.csv"), |w| write_history(w, &out.history))?;
    let mut ckpt = Checkpoint::new(out.params, cfg.anchors);
    ckpt.meta.training = config.metadata();
    ckpt.meta.training.insert("best_epoch".into(), out.best_epoch.to_string());
    ckpt.meta.training.insert("epochs_run".into(), out.history.len().to_string());
    ckpt.save(args.out.join("model.ckpt"))?;
    Ok(TrainSummary {
        history: out.history,
        best_epoch: out.best_epoch,
    })
}

fn check_extent(ckpt: &Checkpoint, s: &Sample) -> Result<()> {
    let a = &ckpt.meta.arch;
    if s.image.width() != a.width || s.image.height() != a.height {
        bail!(
            "record '{}' is {}x{} but the checkpoint expects {}x{}",
            s.id,
            s.image.width(),
            s.image.height(),
            a.width,
            a.height
        );
    }
    Ok(())
}

/// Active learned landmarks in pixels, anchors appended.
pub fn infer_landmarks(ckpt: &Checkpoint, s: &Sample) -> Result<LandmarkSet> {
    check_extent(ckpt, s)?;
    let lms = encode(&ckpt.params, &s.image)?.select_learned(&ckpt.active())?;
    Ok(append_anchors(&lms, [s.image.width(), s.image.height()], ckpt.meta.anchors)?)
}

#[derive(Args, Clone, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Restrict to one split.
    #[arg(long)]
    pub split: Option<Split>,
    /// Landmark CSV to write.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_infer(args: &InferArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint).with_context(|| format!("checkpoint {}", args.checkpoint.display()))?;
    let manifest = Manifest::load(&args.manifest)?;
    let indices: Vec<usize> = match args.split {
        Some(s) => manifest.indices(s),
        None => (0..manifest.records.len()).collect(),
    };
    let mut sets = Vec::with_capacity(indices.len());
    let mut ids = Vec::with_capacity(indices.len());
    for i in indices {
        let s = manifest.sample(i)?;
        sets.push(infer_landmarks(&ckpt, &s)?);
        ids.push(s.id);
    }
    let _lock = DirLock::acquire(&parent_dir(&args.out))?;
    write_atomic(&args.out, |w| Ok(export_features(w, &sets, &ids)?))
}

#[derive(Args, Clone, Debug)]
pub struct RegisterArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub source: String,
    #[arg(long)]
    pub target: String,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Matching loss for the reported statistics.
    #[arg(long, default_value = "l2")]
    pub loss: LossKind,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegisterStats {
    pub source: String,
    pub target: String,
    pub loss: String,
    pub before: f64,
    pub after: f64,
    pub kappa: f64,
    pub max_residual: f64,
    pub mean_residual: f64,
}

fn match_loss(kind: LossKind) -> MatchLoss {
    match kind {
        LossKind::L2 => MatchLoss::L2,
        LossKind::Ncc => MatchLoss::Ncc { patch_size: 5 },
        LossKind::Mind => MatchLoss::Mind(Default::default()),
    }
}

pub fn cmd_register(args: &RegisterArgs) -> Result<RegisterStats> {
    let ckpt = Checkpoint::load(&args.checkpoint).with_context(|| format!("checkpoint {}", args.checkpoint.display()))?;
    let manifest = Manifest::load(&args.manifest)?;
    let source = manifest.sample(manifest.position(&args.source)?)?;
    let target = manifest.sample(manifest.position(&args.target)?)?;
    check_extent(&ckpt, &source)?;
    check_extent(&ckpt, &target)?;
    let mut objective = Objective::new(match_loss(args.loss), 0.0);
    objective.anchors = ckpt.meta.anchors;
    let lms = encode_normalized(&ckpt.params, &[&source, &target])?;
    let query = query_grid(target.image.width(), target.image.height());
    let active = ckpt.active();
    let (values, registered) = register_landmarks(&objective, &query, &lms[0], &lms[1], &source, &target, Some(&active))?;
    let before = objective.match_loss.value(&target.image, &source.image)?;
    let residual: Vec<f64> = target.image.data().iter().zip(registered.data()).map(|(t, r)| (t - r).abs()).collect();
    let stats = RegisterStats {
        source: source.id.clone(),
        target: target.id.clone(),
        loss: args.loss.to_string(),
        before,
        after: values.matching,
        kappa: values.kappa,
        max_residual: residual.iter().copied().fold(0.0, f64::max),
        mean_residual: residual.iter().sum::<f64>() / residual.len() as f64,
    };
    let (w, h) = (target.image.width(), target.image.height());
    let residual = Image::new(w, h, residual)?;
    let overlay = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let r = (registered.get(x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        let t = (target.image.get(x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([r, t, r])
    });
    let _lock = DirLock::acquire(&args.out)?;
    save_png(&registered, &args.out.join("registered.png"))?;
    save_png(&residual, &args.out.join("residual.png"))?;
    save_atomic(&args.out.join("overlay.png"), |p| {
        Ok(overlay.save_with_format(p, image::ImageFormat::Png)?)
    })?;
    write_atomic(&args.out.join("stats.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &stats)?;
        Ok(writeln!(w)?)
    })?;
    Ok(stats)
}

#[derive(Args, Clone, Debug)]
pub struct PruneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Stop once this many learned landmarks remain.
    #[arg(long, conflicts_with = "max_delta", required_unless_present = "max_delta")]
    pub target_count: Option<usize>,
    /// Stop when the cheapest removal raises the loss by more than this.
    #[arg(long)]
    pub max_delta: Option<f64>,
    /// Split whose pairs measure importance.
    #[arg(long, default_value = "train")]
    pub split: Split,
    /// Cap on evaluation pairs (random subset).
    #[arg(long, default_value_t = 200)]
    pub max_pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "l2")]
    pub loss: LossKind,
    /// Output directory for model.ckpt and prune.csv.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_prune(args: &PruneArgs) -> Result<PruneRecord> {
    let mut ckpt = Checkpoint::load(&args.checkpoint).with_context(|| format!("checkpoint {}", args.checkpoint.display()))?;
    if ckpt.meta.prune.is_some() {
        bail!("checkpoint is already pruned");
    }
    let manifest = Manifest::load(&args.manifest)?;
    let indices = manifest.indices(args.split);
    if indices.len() < 2 {
        bail!("split {} needs at least two records", args.split);
    }
    let samples = indices.iter().map(|&i| manifest.sample(i)).collect::<Result<Vec<_>>>()?;
    for s in &samples {
        check_extent(&ckpt, s)?;
    }
    let pairs = pair_indices(samples.len(), PairStrategy::capped(samples.len(), args.max_pairs), args.seed)?;
    let mut objective = Objective::new(match_loss(args.loss), 0.0);
    objective.anchors = ckpt.meta.anchors;
    let ctx = PruneContext::new(&ckpt.params, objective, samples, pairs)?;
    let stop = match (args.target_count, args.max_delta) {
        (Some(n), None) => StopRule::TargetCount(n),
        (None, Some(d)) => StopRule::MaxDelta(d),
        _ => bail!("give exactly one of --target-count and --max-delta"),
    };
    let report = greedy_prune(&ctx, stop)?;
    let record = PruneRecord::from(&report);
    let _lock = DirLock::acquire(&args.out)?;
    write_atomic(&args.out.join("prune.csv"), |w| {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["step", "removed", "importance", "loss_before", "loss_after"])?;
        for (k, s) in report.steps.iter().enumerate() {
            w.write_record([
                k.to_string(),
                s.removed.to_string(),
                s.importance.to_string(),
                record.losses[k].to_string(),
                record.losses[k + 1].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    ckpt.meta.prune = Some(record.clone());
    ckpt.save(args.out.join("model.ckpt"))?;
    Ok(record)
}

#[derive(Args, Clone, Debug)]
pub struct ZscoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Split forming the control population.
    #[arg(long)]
    pub control_split: Split,
    /// Split to score.
    #[arg(long)]
    pub query_split: Split,
    /// Keep only control records with one of these labels.
    #[arg(long, value_delimiter = ',')]
    pub control_labels: Vec<String>,
    /// Project descriptors onto this many principal components first.
    #[arg(long)]
    pub pca_dims: Option<usize>,
    /// Scores CSV to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub id: String,
    pub label: Option<String>,
    pub zscore: f64,
}

/// Learned landmarks (pixels, anchors excluded) flattened into one vector.
fn descriptor(ckpt: &Checkpoint, s: &Sample) -> Result<Vec<f64>> {
    check_extent(ckpt, s)?;
    Ok(encode(&ckpt.params, &s.image)?.select_learned(&ckpt.active())?.flatten())
}

pub fn cmd_zscore(args: &ZscoreArgs) -> Result<Vec<ScoreRow>> {
    let ckpt = Checkpoint::load(&args.checkpoint).with_context(|| format!("checkpoint {}", args.checkpoint.display()))?;
    let manifest = Manifest::load(&args.manifest)?;
    let control: Vec<usize> = manifest
        .indices(args.control_split)
        .into_iter()
        .filter(|&i| {
            args.control_labels.is_empty()
                || manifest.records[i].label.as_ref().is_some_and(|l| args.control_labels.contains(l))
        })
        .collect();
    if control.len() < 2 {
        bail!("control population ({} split) has fewer than two records", args.control_split);
    }
    let descriptors = control
        .iter()
        .map(|&i| descriptor(&ckpt, &manifest.sample(i)?))
        .collect::<Result<Vec<_>>>()?;
    let stats = fit_control_stats(&descriptors, args.pca_dims)?;
    let mut rows = Vec::new();
    for i in manifest.indices(args.query_split) {
        let d = descriptor(&ckpt, &manifest.sample(i)?)?;
        rows.push(ScoreRow {
            id: manifest.records[i].id.clone(),
            label: manifest.records[i].label.clone(),
            zscore: zscore(&stats, &d)?,
        });
    }
    let _lock = DirLock::acquire(&parent_dir(&args.out))?;
    write_atomic(&args.out, |w| {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["id", "label", "zscore"])?;
        for r in &rows {
            w.write_record([r.id.clone(), r.label.clone().unwrap_or_default(), r.zscore.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })?;
    Ok(rows)
}

#[derive(Args, Clone, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated λ values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub lambdas: Vec<f64>,
    #[arg(long, default_value_t = 3)]
    pub folds: usize,
    /// Output directory for sweep.csv and sweep.png.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub lambda: f64,
    pub fold: usize,
    pub val_match_loss: Option<f64>,
    pub error: Option<String>,
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<Vec<SweepCell>> {
    let config = RunConfig::load(&args.config)?;
    let cfg = config.train_config()?;
    let manifest = Manifest::load(&args.manifest)?;
    let samples = manifest.samples()?;
    let mut items = manifest.indices(Split::Train);
    items.extend(manifest.indices(Split::Val));
    items.sort_unstable();
    let first = &samples[0].image;
    let arch = config.architecture(first.width(), first.height())?;
    let init = config.initial_params(&arch)?;
    let _lock = DirLock::acquire(&args.out)?;
    let rows = lambda_sweep(&cfg, &samples, &items, &init, &args.lambdas, args.folds)?;
    let cells: Vec<SweepCell> = rows
        .into_iter()
        .map(|r| SweepCell {
            lambda: r.lambda,
            fold: r.fold,
            val_match_loss: r.outcome.as_ref().ok().copied(),
            error: r.outcome.err(),
        })
        .collect();
    write_atomic(&args.out.join("sweep.csv"), |w| {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["lambda", "fold", "val_match_loss", "error"])?;
        for c in &cells {
            w.write_record([
                c.lambda.to_string(),
                c.fold.to_string(),
                c.val_match_loss.map(|v| v.to_string()).unwrap_or_default(),
                c.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    // λ values are plotted at evenly spaced positions; λ = 0 rules out a log axis.
    let mut by_lambda: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut lambdas: Vec<f64> = cells.iter().map(|c| c.lambda).collect();
    lambdas.dedup();
    let pos = |l: f64| lambdas.iter().position(|&x| x == l).expect("lambda listed");
    for c in &cells {
        if let Some(v) = c.val_match_loss {
            by_lambda.entry(pos(c.lambda)).or_default().push(v);
        }
    }
    let mean = Series {
        points: by_lambda.iter().map(|(&k, v)| (k as f64, v.iter().sum::<f64>() / v.len() as f64)).collect(),
        line: true,
    };
    let folds = Series {
        points: cells.iter().filter_map(|c| c.val_match_loss.map(|v| (pos(c.lambda) as f64, v))).collect(),
        line: false,
    };
    let ticks: Vec<f64> = (0..lambdas.len()).map(|k| k as f64).collect();
    let img = plot::render(&[mean, folds], &ticks, 480, 320);
    save_atomic(&args.out.join("sweep.png"), |p| Ok(img.save_with_format(p, image::ImageFormat::Png)?))?;
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts_cover_every_sample() {
        assert_eq!(split_counts(50), (40, 5, 5));
        assert_eq!(split_counts(2), (2, 0, 0));
        assert_eq!(split_counts(3), (1, 1, 1));
        for n in 2..40 {
            let (a, b, c) = split_counts(n);
            assert_eq!(a + b + c, n);
        }
    }
}
