//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits nonzero if any failed.
//!
//! The training criteria are the slow part (about 20 minutes single-threaded
//! in total); everything runs in a temporary directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpsmark::checkpoint::Checkpoint;
use tpsmark::encoder::{encode, grid_landmarks, init_params, Architecture, EncoderParams};
use tpsmark::gradients::{fd_check, Tape, Tensor};
use tpsmark::image::{Mask, LATTICE_SNAP};
use tpsmark::landmarks::Frame;
use tpsmark::losses::{MatchLoss, MindConfig, NCC_VARIANCE_FLOOR};
use tpsmark::nn::maxpool2_forward;
use tpsmark::pipeline::{evaluate_batch, pair_on_tape, query_grid, register_landmarks, Objective, Sample};
use tpsmark::pruner::{greedy_prune, PruneContext, StopRule};
use tpsmark::shape_stats::roc_auc;
use tpsmark::synth::ShapeClass;
use tpsmark::tps::{apply_transform, build_system, solve_system, KernelKind};
use tpsmark::trainer::{evaluate_pairs, pair_indices, PairStrategy};
use tpsmark::{Image, LandmarkSet};
use tpsmark_cli::commands::{
    cmd_prune, cmd_sweep, cmd_synth, cmd_train, cmd_zscore, PruneArgs, SweepArgs, SynthArgs, TrainArgs, ZscoreArgs,
};
use tpsmark_cli::manifest::{Manifest, Split};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

const K: KernelKind = KernelKind::ThinPlate2D;

/// `m` random pixel positions in a 128 square, at least 2 px apart.
fn scattered(rng: &mut ChaCha8Rng, m: usize) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = Vec::with_capacity(m);
    while pts.len() < m {
        let p = [rng.random_range(0.0..127.0), rng.random_range(0.0..127.0)];
        if pts.iter().all(|q: &[f64; 2]| (p[0] - q[0]).hypot(p[1] - q[1]) >= 2.0) {
            pts.push(p);
        }
    }
    pts
}

fn tps_exactness() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_err, mut worst_res) = (0.0f64, 0.0f64);
    for k in 0..100 {
        let m = [8, 16, 32][k % 3];
        let src = scattered(&mut rng, m);
        let tgt: Vec<[f64; 2]> = src.iter().map(|p| [p[0] + rng.random_range(-10.0..10.0), p[1] + rng.random_range(-10.0..10.0)]).collect();
        let sys = build_system(&LandmarkSet::new(src.clone())?, &LandmarkSet::new(tgt.clone())?, K)?;
        let params = solve_system(&sys)?;
        for (p, q) in apply_transform(&params, &src)?.iter().zip(&tgt) {
            worst_err = worst_err.max((p[0] - q[0]).abs().max((p[1] - q[1]).abs()));
        }
        let residual = &sys.rhs - &sys.block * params.solution();
        worst_res = worst_res.max(residual.norm() / sys.rhs.norm());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_err <= 1e-6 && worst_res <= 1e-8 && secs < 5.0,
        format!("max interpolation error {worst_err:.2e} px, max relative residual {worst_res:.2e}, {secs:.2}s"),
    )
}

fn affine_reproduction() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_w, mut worst_err) = (0.0f64, 0.0f64);
    for k in 0..20 {
        let m = [8, 16, 32][k % 3];
        let a: [f64; 6] = std::array::from_fn(|i| if i < 4 { rng.random_range(-1.5..1.5) } else { rng.random_range(-20.0..20.0) });
        if (a[0] * a[3] - a[1] * a[2]).abs() < 0.1 {
            continue;
        }
        let f = |p: [f64; 2]| [a[0] * p[0] + a[1] * p[1] + a[4], a[2] * p[0] + a[3] * p[1] + a[5]];
        let src = scattered(&mut rng, m);
        let tgt: Vec<[f64; 2]> = src.iter().map(|&p| f(p)).collect();
        let params = solve_system(&build_system(&LandmarkSet::new(src)?, &LandmarkSet::new(tgt)?, K)?)?;
        let wnorm = params.rbf_weights.iter().flatten().map(|w| w * w).sum::<f64>().sqrt();
        worst_w = worst_w.max(wnorm);
        for _ in 0..50 {
            let q = [rng.random_range(0.0..127.0), rng.random_range(0.0..127.0)];
            let (got, want) = (params.apply_point(q), f(q));
            worst_err = worst_err.max((got[0] - want[0]).abs().max((got[1] - want[1]).abs()));
        }
    }
    outcome(
        worst_w <= 1e-8 && worst_err <= 1e-6,
        format!("max RBF weight norm {worst_w:.2e}, max off-control-point error {worst_err:.2e}"),
    )
}

fn smooth(n: usize, phase: f64) -> Image {
    Image::from_fn(n, n, |x, y| {
        let (u, v) = (x as f64 / n as f64, y as f64 / n as f64);
        0.5 + 0.3 * (5.0 * u + phase).sin() * (4.0 * v - phase).cos() + 0.1 * (9.0 * u * v).cos()
    })
    .expect("values in range")
}

fn cell(v: f64) -> i64 {
    let r = v.round();
    if (v - r).abs() <= LATTICE_SNAP {
        r as i64
    } else {
        v.floor() as i64
    }
}

/// ReLU signs and max-pool winners of the encoder on `img`, recomputed
/// layer by layer with the same operations the encoder uses.
fn activation_pattern(params: &EncoderParams, img: &Image, out: &mut Vec<i64>) -> Result<Vec<[f64; 2]>> {
    let mut tape = Tape::new();
    let t = params.tensors();
    let mut x = tape.constant(Tensor::new(vec![1, img.height(), img.width()], img.data().to_vec())?);
    let mut k = 0;
    for &layers in &params.arch().block_layers {
        for _ in 0..layers {
            let (w, b) = (tape.constant(t[k].clone()), tape.constant(t[k + 1].clone()));
            k += 2;
            let y = tape.conv3x3(x, w, b)?;
            out.extend(tape.value(y).data().iter().map(|&v| i64::from(v > 0.0)));
            x = tape.relu(y)?;
        }
        let v = tape.value(x);
        let s = v.shape();
        out.extend(maxpool2_forward(v.data(), s[0], s[1], s[2]).1.into_iter().map(|i| i as i64));
        x = tape.maxpool2(x)?;
    }
    let flat_len = tape.value(x).len();
    let flat = tape.reshape(x, vec![flat_len])?;
    let (w, b) = (tape.constant(t[k].clone()), tape.constant(t[k + 1].clone()));
    let head = tape.linear(flat, w, b)?;
    let y = tape.tanh(head)?;
    Ok(tape.value(y).data().chunks(2).map(|c| [c[0], c[1]]).collect())
}

/// Worst fd error over jittered encoder parameter vectors for one objective,
/// differentiating the whole chain image → encoder → spline → warp → loss.
///
/// The chain is piecewise smooth: ReLU, max-pool and bilinear sampling all
/// have kinks. A point is used only if no ±step probe changes any ReLU sign,
/// pool winner or sample lattice cell, so the function is smooth across the
/// stencil. The step balances roundoff in the difference quotient (about one
/// ulp of the loss divided by the step, which matters for the smallest
/// gradient entries) against truncation error from the curvature of the chain.
fn pipeline_fd(objective: &Objective, seed: u64, points: usize) -> Result<f64> {
    let n = 16;
    // one convolution per block keeps every operation of the chain while
    // limiting the number of ReLU kinks the stencil has to avoid
    let arch = Architecture {
        block_layers: vec![1; 4],
        ..Architecture::standard(n, n, [2, 2, 2, 2], 4)
    };
    let base = init_params(seed, &arch, Some(&grid_landmarks(n, n, 4)?))?;
    let samples = vec![Sample::new("a", smooth(n, 0.0)), Sample::new("b", smooth(n, 0.7))];
    let pairs = [(0usize, 1usize), (1, 0)];
    let query = query_grid(n, n);
    let frame = Frame::new(n, n);
    let step = 1e-4;
    let with = |flat: &[f64]| {
        let mut p = base.clone();
        p.set_flat(flat).map(|_| p)
    };
    // loss and kink signature from one forward pass
    let probe = |flat: &[f64]| -> Result<(f64, Vec<i64>, bool)> {
        let p = with(flat)?;
        let mut out = Vec::new();
        let lms: Vec<Vec<[f64; 2]>> =
            samples.iter().map(|s| activation_pattern(&p, &s.image, &mut out)).collect::<Result<_>>()?;
        let mut loss = 0.0;
        for &(s, t) in &pairs {
            let mut tape = Tape::new();
            let sv = tape.constant(Tensor::from_points(&lms[s]));
            let tv = tape.constant(Tensor::from_points(&lms[t]));
            let terms = pair_on_tape(&mut tape, objective, &query, sv, tv, &samples[s], &samples[t], None)?;
            loss += tape.scalar(terms.loss) / pairs.len() as f64;
            for u in tape.value(terms.coords).points() {
                let q = frame.to_pixel(u);
                out.extend([cell(q[0]), cell(q[1])]);
            }
        }
        Ok((loss, out, lms[0] == lms[1]))
    };
    let gradient = |flat: &[f64]| -> Result<Vec<f64>> {
        let out = evaluate_batch(&with(flat)?, objective, &samples, &pairs, true).map_err(|f| f.error)?;
        Ok(out.gradient.expect("requested"))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut accepted) = (0.0f64, 0);
    while accepted < points {
        let point: Vec<f64> = base.flat().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
        // dead feature maps give both images the same landmarks and a flat loss
        let (value, here, dead) = probe(&point)?;
        if dead {
            continue;
        }
        let mut stencil = Vec::with_capacity(2 * point.len());
        'probe: for i in 0..point.len() {
            for h in [step, -step] {
                let mut q = point.clone();
                q[i] += h;
                let (v, sig, _) = probe(&q)?;
                if sig != here {
                    break 'probe;
                }
                stencil.push(v);
            }
        }
        if stencil.len() < 2 * point.len() {
            continue;
        }
        let grad = gradient(&point)?;
        if grad.iter().all(|g| g.abs() < 1e-12) {
            continue;
        }
        // stencil holds (+step, -step) per coordinate
        let f = |x: &[f64]| -> tpsmark::Result<(f64, Vec<f64>)> {
            match x.iter().zip(&point).position(|(a, b)| a != b) {
                None => Ok((value, grad.clone())),
                Some(i) => Ok((stencil[2 * i + usize::from(x[i] < point[i])], Vec::new())),
            }
        };
        worst = worst.max(fd_check(f, &point, step)?);
        accepted += 1;
    }
    Ok(worst)
}

fn gradient_check() -> Result<Outcome> {
    let start = Instant::now();
    let mind = MatchLoss::Mind(MindConfig::four_neighborhood(3, 2));
    let mut cases: Vec<(String, Objective)> = Vec::new();
    for loss in [MatchLoss::L2, MatchLoss::Ncc { patch_size: 3 }, mind] {
        for lambda in [0.0, 1e-3] {
            let mut obj = Objective::new(loss.clone(), lambda);
            obj.anchors = 4;
            cases.push((format!("{}/lambda={lambda}", loss.kind()), obj));
        }
    }
    let mut masked = Objective::new(MatchLoss::L2, 1e-3);
    masked.anchors = 4;
    masked.mask = Some(Arc::new(Mask::blurred_box(16, 16, (3, 3, 12, 13), 1.5)?));
    cases.push(("masked l2".into(), masked));
    let mut worst = (0.0f64, String::new());
    for (k, (name, obj)) in cases.iter().enumerate() {
        let err = pipeline_fd(obj, k as u64 + 1, 10)?;
        if err >= worst.0 {
            worst = (err, name.clone());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.0 <= 1e-4 && secs < 120.0,
        format!("{} objectives x 10 points, worst relative error {:.2e} ({}), {secs:.1}s", cases.len(), worst.0, worst.1),
    )
}

fn px(img: &Image, x: i64, y: i64) -> f64 {
    img.get(x.clamp(0, img.width() as i64 - 1) as usize, y.clamp(0, img.height() as i64 - 1) as usize)
}

fn oracle_ncc(t: &Image, r: &Image, p: usize) -> f64 {
    let (w, h) = (t.width(), t.height());
    let n = (p * p) as f64;
    let (mut total, mut count) = (0.0, 0.0);
    for y0 in 0..=h - p {
        for x0 in 0..=w - p {
            let coords: Vec<(usize, usize)> = (y0..y0 + p).flat_map(|y| (x0..x0 + p).map(move |x| (x, y))).collect();
            let ma = coords.iter().map(|&(x, y)| t.get(x, y)).sum::<f64>() / n;
            let mb = coords.iter().map(|&(x, y)| r.get(x, y)).sum::<f64>() / n;
            let va = coords.iter().map(|&(x, y)| (t.get(x, y) - ma).powi(2)).sum::<f64>() / n;
            let vb = coords.iter().map(|&(x, y)| (r.get(x, y) - mb).powi(2)).sum::<f64>() / n;
            let cov = coords.iter().map(|&(x, y)| (t.get(x, y) - ma) * (r.get(x, y) - mb)).sum::<f64>() / n;
            if va > NCC_VARIANCE_FLOOR && vb > NCC_VARIANCE_FLOOR {
                total += cov / (va * vb).sqrt();
            }
            count += 1.0;
        }
    }
    1.0 - total / count
}

fn oracle_mind(t: &Image, r: &Image, cfg: &MindConfig) -> f64 {
    let feature = |img: &Image, x: i64, y: i64, d: [i64; 2]| {
        let h = (cfg.patch_size / 2) as i64;
        let mut a = Vec::new();
        let mut b = Vec::new();
        for dy in -h..=h {
            for dx in -h..=h {
                a.push(px(img, x + dx, y + dy));
                b.push(px(img, x + d[0] + dx, y + d[1] + dy));
            }
        }
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let var = a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let ssd: f64 = a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum();
        (-ssd / (var + cfg.variance_floor)).exp()
    };
    let mut total = 0.0;
    for y in 0..t.height() as i64 {
        for x in 0..t.width() as i64 {
            for &d in &cfg.displacements {
                total += (feature(t, x, y, d) - feature(r, x, y, d)).abs();
            }
        }
    }
    total / (t.len() * cfg.displacements.len()) as f64
}

fn loss_oracles() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let t = Image::from_fn(16, 16, |_, _| rng.random_range(0.0..1.0))?;
        let r = Image::from_fn(16, 16, |_, _| rng.random_range(0.0..1.0))?;
        let l2 = t.data().iter().zip(r.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 256.0;
        worst = worst.max((MatchLoss::L2.value(&t, &r)? - l2).abs());
        for p in [3, 5] {
            worst = worst.max((MatchLoss::Ncc { patch_size: p }.value(&t, &r)? - oracle_ncc(&t, &r, p)).abs());
        }
        for cfg in [MindConfig::four_neighborhood(3, 2), MindConfig::default()] {
            worst = worst.max((MatchLoss::Mind(cfg.clone()).value(&t, &r)? - oracle_mind(&t, &r, &cfg)).abs());
        }
    }
    outcome(worst <= 1e-10, format!("max deviation from naive loops {worst:.2e}"))
}

fn synth(out: &Path, n: usize, seed: u64, classes: Vec<ShapeClass>) -> Result<PathBuf> {
    cmd_synth(&SynthArgs {
        out: out.to_path_buf(),
        n,
        seed,
        classes,
        size: 128,
    })?;
    Ok(out.join("manifest.csv"))
}

fn write_config(path: &Path, body: &str) -> Result<PathBuf> {
    fs::write(path, body)?;
    Ok(path.to_path_buf())
}

/// `(epoch, val_match_loss, mean_kappa)` rows of a history file.
fn read_history(path: &Path) -> Result<Vec<(usize, f64, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok((rec[0].parse()?, rec[2].parse()?, rec[3].parse()?))
        })
        .collect()
}

fn min_pairwise(points: &[[f64; 2]]) -> f64 {
    let mut m = f64::INFINITY;
    for a in 0..points.len() {
        for b in 0..a {
            m = m.min((points[a][0] - points[b][0]).hypot(points[a][1] - points[b][1]));
        }
    }
    m
}

fn regularization_effect(work: &Path) -> Result<Outcome> {
    let manifest = synth(&work.join("data5"), 20, 5, vec![ShapeClass::Ellipse, ShapeClass::Lobed])?;
    let m = Manifest::load(&manifest)?;
    let start = Instant::now();
    let mut runs = Vec::new();
    for lambda in ["0.0", "1e-3"] {
        let dir = work.join(format!("reg-{lambda}"));
        let config = write_config(
            &work.join(format!("reg-{lambda}.toml")),
            &format!(
                "lambda = {lambda}\nepochs = 10\nbatch_pairs = 64\ngroup_size = 16\nlearning_rate = 1e-3\n\
                 pair_strategy = \"random_k\"\npair_k = 500\nseed = 3\ninit = \"random\"\ninit_seed = 2\n\
                 widths = [4, 8, 16, 32]\nlandmarks = 16\n"
            ),
        )?;
        let trained = cmd_train(&TrainArgs {
            manifest: manifest.clone(),
            config,
            out: dir.clone(),
        });
        match trained {
            Ok(_) => {
                let ckpt = Checkpoint::load(dir.join("model.ckpt"))?;
                let val = m.indices(Split::Val);
                let mut dist = 0.0;
                for &i in &val {
                    dist += min_pairwise(encode(&ckpt.params, &m.sample(i)?.image)?.points());
                }
                runs.push(Some((read_history(&dir.join("history.csv"))?, dist / val.len() as f64)));
            }
            Err(e) if lambda == "0.0" => {
                log::info!("unregularized training aborted: {e:#}");
                runs.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let (free, reg) = (&runs[0], runs[1].as_ref().context("regularized run")?);
    match free {
        None => outcome(secs < 1800.0, format!("lambda=0 aborted; lambda>0 completed, {secs:.0}s")),
        Some((hist0, d0)) => {
            let (hist1, d1) = reg;
            let epoch = hist0.len().min(hist1.len()) - 1;
            let (k0, k1) = (hist0[epoch].2, hist1[epoch].2);
            outcome(
                k0 >= 10.0 * k1 && d1 > d0 && secs < 1800.0,
                format!(
                    "epoch {epoch}: mean kappa {k0:.0} (lambda=0) vs {k1:.0} (lambda=1e-3), ratio {:.1}; \
                     mean min landmark distance {d0:.2} vs {d1:.2} px; {secs:.0}s",
                    k0 / k1
                ),
            )
        }
    }
}

const MODEL_CONFIG: &str = "lambda = 1e-5\nepochs = 20\nbatch_pairs = 128\ngroup_size = 20\nlearning_rate = 1e-3\n\
    pair_strategy = \"random_k\"\npair_k = 2000\nseed = 3\ninit = \"grid\"\ninit_seed = 1\n\
    widths = [4, 8, 16, 32]\nlandmarks = 16\n";

fn train_model(manifest: &Path, config: &Path, out: &Path) -> Result<f64> {
    let start = Instant::now();
    cmd_train(&TrainArgs {
        manifest: manifest.to_path_buf(),
        config: config.to_path_buf(),
        out: out.to_path_buf(),
    })?;
    Ok(start.elapsed().as_secs_f64())
}

fn held_out_matching(work: &Path) -> Result<Outcome> {
    let manifest = synth(&work.join("data6"), 50, 7, vec![ShapeClass::Ellipse, ShapeClass::Lobed])?;
    let config = write_config(&work.join("model.toml"), MODEL_CONFIG)?;
    let secs = train_model(&manifest, &config, &work.join("model"))?;
    let m = Manifest::load(&manifest)?;
    let ckpt = Checkpoint::load(work.join("model/model.ckpt"))?;
    let test: Vec<Sample> = m.indices(Split::Test).into_iter().map(|i| m.sample(i)).collect::<Result<_>>()?;
    let pairs = pair_indices(test.len(), PairStrategy::AllPairs, 0)?;
    let mut objective = Objective::new(MatchLoss::L2, 0.0);
    objective.anchors = ckpt.meta.anchors;
    let (registered, _) = evaluate_pairs(&ckpt.params, &objective, &test, &pairs, 32)?;
    let mut identity = 0.0;
    for &(s, t) in &pairs {
        identity += MatchLoss::L2.value(&test[t].image, &test[s].image)?;
    }
    identity /= pairs.len() as f64;
    let ratio = registered / identity;
    outcome(
        ratio <= 0.5 && secs < 1800.0,
        format!(
            "{} held-out pairs: registered {registered:.5} vs identity {identity:.5}, ratio {ratio:.3}; training {secs:.0}s",
            pairs.len()
        ),
    )
}

fn prune_args(work: &Path, model: &str, out: &str) -> PruneArgs {
    PruneArgs {
        checkpoint: work.join(model).join("model.ckpt"),
        manifest: work.join("data6/manifest.csv"),
        target_count: Some(11),
        max_delta: None,
        split: Split::Train,
        max_pairs: 200,
        seed: 0,
        loss: tpsmark::losses::LossKind::L2,
        out: work.join(out),
    }
}

fn redundancy_pruning(work: &Path) -> Result<Outcome> {
    let args = prune_args(work, "model", "pruned");
    let record = cmd_prune(&args)?;
    ensure!(record.surviving.len() == 11, "{} landmarks survive", record.surviving.len());

    // recompute each recorded importance from scratch
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let m = Manifest::load(&args.manifest)?;
    let samples: Vec<Sample> = m.indices(Split::Train).into_iter().map(|i| m.sample(i)).collect::<Result<_>>()?;
    let pairs = pair_indices(samples.len(), PairStrategy::capped(samples.len(), 200), 0)?;
    let mut objective = Objective::new(MatchLoss::L2, 0.0);
    objective.anchors = ckpt.meta.anchors;
    let ctx = PruneContext::new(&ckpt.params, objective.clone(), samples.clone(), pairs.clone())?;
    let mut csv = csv::Reader::from_path(args.out.join("prune.csv"))?;
    let mut active: Vec<usize> = (0..ctx.landmark_count()).collect();
    let mut worst = 0.0f64;
    for row in csv.records() {
        let row = row?;
        let (removed, importance): (usize, f64) = (row[1].parse()?, row[2].parse()?);
        let baseline = ctx.mean_loss(&active)?;
        active.retain(|&i| i != removed);
        let fresh = ctx.mean_loss(&active)? - baseline;
        worst = worst.max((fresh - importance).abs());
    }
    ensure!(active == record.surviving, "surviving set differs from replayed removals");

    // an exact copy of one landmark must be the first to go. The images are
    // spline warps of one base image built from the distinct landmarks, so
    // the full set registers every (base, k) pair exactly and each genuine
    // landmark carries information.
    let (a, b) = (4, 9);
    let texture = Image::from_fn(64, 64, |x, y| {
        let (x, y) = (x as f64, y as f64);
        0.5 + 0.25 * (0.31 * x + 0.17 * y).sin() + 0.2 * (0.23 * y - 0.13 * x).cos() * (0.05 * x).sin()
    })?;
    let base = Sample::new("base", texture);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let lattice: Vec<[f64; 2]> = (0..16)
        .map(|i| {
            let (c, r) = ((i % 4) as f64, (i / 4) as f64);
            [-0.75 + 0.5 * c + rng.random_range(-0.1..0.1), -0.75 + 0.5 * r + rng.random_range(-0.1..0.1)]
        })
        .collect();
    let distinct: Vec<usize> = (0..16).filter(|&i| i != b).collect();
    let query = query_grid(base.image.width(), base.image.height());
    let mut lms = vec![lattice.clone()];
    let mut dup_samples = vec![base.clone()];
    for k in 1..5 {
        let moved: Vec<[f64; 2]> =
            lattice.iter().map(|p| [p[0] + rng.random_range(-0.08..0.08), p[1] + rng.random_range(-0.08..0.08)]).collect();
        let (_, warped) = register_landmarks(&objective, &query, &lattice, &moved, &base, &base, Some(&distinct))?;
        lms.push(moved);
        dup_samples.push(Sample::new(format!("warp{k}"), warped));
    }
    for l in &mut lms {
        l[b] = l[a];
    }
    let dup_pairs: Vec<(usize, usize)> = (1..5).map(|k| (0, k)).collect();
    let dup = PruneContext::from_landmarks(objective, dup_samples, dup_pairs, lms)?;
    let first = greedy_prune(&dup, StopRule::TargetCount(15))?.steps[0].removed;
    outcome(
        worst <= 1e-10 && (first == a || first == b),
        format!(
            "16 -> {} removing {:?}; max importance recomputation error {worst:.2e}; duplicate of {a} at {b}, first removed {first}",
            record.surviving.len(),
            record.removal_order.iter().map(|r| r.0).collect::<Vec<_>>()
        ),
    )
}

fn anomaly_detection(work: &Path) -> Result<Outcome> {
    let manifest = synth(&work.join("data8"), 100, 11, vec![ShapeClass::Ellipse, ShapeClass::Deformed])?;
    let rows = cmd_zscore(&ZscoreArgs {
        checkpoint: work.join("model/model.ckpt"),
        manifest,
        control_split: Split::Train,
        query_split: Split::Test,
        control_labels: vec!["ellipse".into()],
        pca_dims: None,
        out: work.join("zscores.csv"),
    })?;
    let score = |label: &str| -> Vec<f64> { rows.iter().filter(|r| r.label.as_deref() == Some(label)).map(|r| r.zscore).collect() };
    let (pos, neg) = (score("deformed"), score("ellipse"));
    let auc = roc_auc(&pos, &neg)?;
    outcome(auc >= 0.9, format!("AUC {auc:.3} over {} deformed vs {} control held-out images", pos.len(), neg.len()))
}

fn lambda_sweep(work: &Path) -> Result<Outcome> {
    let data = work.join("data9");
    cmd_synth(&SynthArgs {
        out: data.clone(),
        n: 10,
        seed: 9,
        classes: vec![ShapeClass::Ellipse, ShapeClass::Lobed],
        size: 64,
    })?;
    let config = write_config(
        &work.join("sweep.toml"),
        "epochs = 5\nbatch_pairs = 64\ngroup_size = 6\nlearning_rate = 1e-3\nseed = 3\ninit = \"grid\"\n\
         widths = [4, 8, 16, 32]\nlandmarks = 16\n",
    )?;
    let lambdas = vec![0.0, 1e-4, 1e-3, 5e-3, 1e-2];
    let start = Instant::now();
    cmd_sweep(&SweepArgs {
        manifest: data.join("manifest.csv"),
        config,
        lambdas: lambdas.clone(),
        folds: 3,
        out: work.join("sweep"),
    })?;
    let secs = start.elapsed().as_secs_f64();
    let mut csv = csv::Reader::from_path(work.join("sweep/sweep.csv"))?;
    let mut cells = Vec::new();
    for row in csv.records() {
        let row = row?;
        let lambda: f64 = row[0].parse()?;
        let fold: usize = row[1].parse()?;
        let value: Option<f64> = if row[2].is_empty() { None } else { Some(row[2].parse()?) };
        cells.push((lambda, fold, value));
    }
    let complete = lambdas.iter().all(|&l| (0..3).all(|f| cells.iter().any(|c| c.0 == l && c.1 == f))) && cells.len() == 15;
    let finite = cells.iter().filter(|c| c.0 > 0.0).all(|c| c.2.is_some_and(f64::is_finite));
    let png = image::open(work.join("sweep/sweep.png")).is_ok();
    outcome(
        complete && finite && png,
        format!("{} cells, complete {complete}, every lambda>0 cell finite {finite}, plot readable {png}; {secs:.0}s", cells.len()),
    )
}

/// History rows without the wall-clock column.
fn history_without_time(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect())
}

fn reproducibility(work: &Path) -> Result<Outcome> {
    let config = work.join("model.toml");
    train_model(&work.join("data6/manifest.csv"), &config, &work.join("model-again"))?;
    let same_history = history_without_time(&work.join("model/history.csv"))? == history_without_time(&work.join("model-again/history.csv"))?;
    let same_ckpt = fs::read(work.join("model/model.ckpt"))? == fs::read(work.join("model-again/model.ckpt"))?;
    cmd_prune(&prune_args(work, "model-again", "pruned-again"))?;
    let same_prune = fs::read(work.join("pruned/prune.csv"))? == fs::read(work.join("pruned-again/prune.csv"))?;
    outcome(
        same_history && same_ckpt && same_prune,
        format!("training history identical {same_history}, checkpoint identical {same_ckpt}, prune history identical {same_prune}"),
    )
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let work = tempfile::tempdir().expect("temporary directory");
    let w = work.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Result<Outcome>>)> = vec![
        ("spline interpolation is exact", Box::new(tps_exactness)),
        ("affine maps are reproduced", Box::new(affine_reproduction)),
        ("pipeline gradients match finite differences", Box::new(gradient_check)),
        ("losses match naive oracles", Box::new(loss_oracles)),
        ("conditioning penalty prevents collapse", Box::new(|| regularization_effect(w))),
        ("held-out registration beats identity", Box::new(|| held_out_matching(w))),
        ("greedy pruning is exact", Box::new(|| redundancy_pruning(w))),
        ("Z-scores separate anomalies", Box::new(|| anomaly_detection(w))),
        ("lambda sweep completes", Box::new(|| lambda_sweep(w))),
        ("runs are reproducible", Box::new(|| reproducibility(w))),
    ];
    // TPSMARK_ACCEPTANCE=3,7 runs a subset; criteria 7, 8 and 10 need 6
    let only: Option<Vec<usize>> = std::env::var("TPSMARK_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let (mut failed, mut ran) = (0, 0);
    for (k, (name, run)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(k + 1))) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = run();
        let secs = start.elapsed().as_secs_f64();
        let (status, detail) = match result {
            Ok(o) if o.pass => ("PASS", o.detail),
            Ok(o) => ("FAIL", o.detail),
            Err(e) => ("FAIL", format!("error: {e:#}")),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("[{status}] criterion {:>2}: {name}: {detail} ({secs:.1}s)", k + 1);
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

