//! Image matching losses and their gradients with respect to the registered
//! image, plus the scalar composite objectives.
//!
//! Every loss takes `(target, registered)`. Reductions run sequentially in
//! row-major order so values are bit-stable across runs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// Patches whose population variance falls at or below this contribute an
/// NCC of zero.
pub const NCC_VARIANCE_FLOOR: f64 = 1e-8;

/// Loss selector names used by config files and the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L2,
    Ncc,
    Mind,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(LossKind::L2),
            "ncc" => Ok(LossKind::Ncc),
            "mind" => Ok(LossKind::Mind),
            other => Err(Error::InvalidArgument(format!("unknown loss `{other}` (expected l2, ncc or mind)"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::L2 => "l2",
            LossKind::Ncc => "ncc",
            LossKind::Mind => "mind",
        })
    }
}

/// MIND descriptor parameters: isotropic patch size, displacement set and the
/// floor added to the local variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MindConfig {
    pub patch_size: usize,
    pub displacements: Vec<[i64; 2]>,
    pub variance_floor: f64,
}

impl Default for MindConfig {
    fn default() -> Self {
        Self::four_neighborhood(3, 5)
    }
}

impl MindConfig {
    /// The 4-neighbourhood directions scaled to `radius` pixels.
    pub fn four_neighborhood(patch_size: usize, radius: i64) -> Self {
        Self {
            patch_size,
            displacements: vec![[radius, 0], [-radius, 0], [0, radius], [0, -radius]],
            variance_floor: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size % 2 == 0 {
            return Err(Error::InvalidArgument("MIND patch size must be odd".into()));
        }
        if self.displacements.is_empty() || self.displacements.iter().any(|r| r == &[0, 0]) {
            return Err(Error::InvalidArgument("MIND displacements must be non-empty and nonzero".into()));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::InvalidArgument("MIND variance floor must be positive".into()));
        }
        Ok(())
    }
}

/// A fully parameterized matching loss.
#[derive(Clone, Debug, PartialEq)]
pub enum MatchLoss {
    L2,
    Ncc { patch_size: usize },
    Mind(MindConfig),
}

impl MatchLoss {
    pub fn kind(&self) -> LossKind {
        match self {
            MatchLoss::L2 => LossKind::L2,
            MatchLoss::Ncc { .. } => LossKind::Ncc,
            MatchLoss::Mind(_) => LossKind::Mind,
        }
    }

    pub fn value(&self, target: &Image, registered: &Image) -> Result<f64> {
        match self {
            MatchLoss::L2 => l2_match(target, registered),
            MatchLoss::Ncc { patch_size } => ncc_match(target, registered, *patch_size),
            MatchLoss::Mind(cfg) => mind_match(target, registered, cfg),
        }
    }

    /// Loss value and its gradient with respect to every registered pixel.
    pub fn value_and_grad(&self, target: &Image, registered: &Image) -> Result<(f64, Vec<f64>)> {
        match self {
            MatchLoss::L2 => l2_grad(target, registered),
            MatchLoss::Ncc { patch_size } => ncc_grad(target, registered, *patch_size),
            MatchLoss::Mind(cfg) => mind_grad(target, registered, cfg),
        }
    }
}

/// Mean squared intensity difference.
pub fn l2_match(target: &Image, registered: &Image) -> Result<f64> {
    target.check_extent(registered)?;
    let n = target.len() as f64;
    let sum: f64 = target
        .data()
        .iter()
        .zip(registered.data())
        .map(|(t, r)| (t - r) * (t - r))
        .sum();
    Ok(sum / n)
}

fn l2_grad(target: &Image, registered: &Image) -> Result<(f64, Vec<f64>)> {
    let value = l2_match(target, registered)?;
    let n = target.len() as f64;
    let grad = target
        .data()
        .iter()
        .zip(registered.data())
        .map(|(t, r)| 2.0 * (r - t) / n)
        .collect();
    Ok((value, grad))
}

fn check_ncc_patch(img: &Image, patch_size: usize) -> Result<()> {
    if patch_size == 0 || patch_size % 2 == 0 {
        return Err(Error::InvalidArgument(format!("NCC patch size {patch_size} must be odd")));
    }
    if patch_size > img.width().min(img.height()) {
        return Err(Error::InvalidArgument(format!(
            "NCC patch size {patch_size} exceeds image extent {}x{}",
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

struct PatchStats {
    mean_a: f64,
    mean_b: f64,
    var_a: f64,
    var_b: f64,
    cov: f64,
}

fn patch_stats(a: &Image, b: &Image, x0: usize, y0: usize, p: usize) -> PatchStats {
    let n = (p * p) as f64;
    let (mut sa, mut sb) = (0.0, 0.0);
    for y in y0..y0 + p {
        for x in x0..x0 + p {
            sa += a.get(x, y);
            sb += b.get(x, y);
        }
    }
    let (mean_a, mean_b) = (sa / n, sb / n);
    let (mut vaa, mut vbb, mut vab) = (0.0, 0.0, 0.0);
    for y in y0..y0 + p {
        for x in x0..x0 + p {
            let da = a.get(x, y) - mean_a;
            let db = b.get(x, y) - mean_b;
            vaa += da * da;
            vbb += db * db;
            vab += da * db;
        }
    }
    PatchStats {
        mean_a,
        mean_b,
        var_a: vaa / n,
        var_b: vbb / n,
        cov: vab / n,
    }
}

/// `1 - mean NCC` over every patch that fits entirely inside the image.
pub fn ncc_match(target: &Image, registered: &Image, patch_size: usize) -> Result<f64> {
    target.check_extent(registered)?;
    check_ncc_patch(target, patch_size)?;
    let p = patch_size;
    let (nx, ny) = (target.width() - p + 1, target.height() - p + 1);
    let mut total = 0.0;
    for y0 in 0..ny {
        for x0 in 0..nx {
            let s = patch_stats(target, registered, x0, y0, p);
            if s.var_a > NCC_VARIANCE_FLOOR && s.var_b > NCC_VARIANCE_FLOOR {
                total += s.cov / (s.var_a * s.var_b).sqrt();
            }
        }
    }
    Ok(1.0 - total / (nx * ny) as f64)
}

fn ncc_grad(target: &Image, registered: &Image, patch_size: usize) -> Result<(f64, Vec<f64>)> {
    target.check_extent(registered)?;
    check_ncc_patch(target, patch_size)?;
    let p = patch_size;
    let w = target.width();
    let (nx, ny) = (w - p + 1, target.height() - p + 1);
    let count = (nx * ny) as f64;
    let n = (p * p) as f64;
    let mut grad = vec![0.0; target.len()];
    let mut total = 0.0;
    for y0 in 0..ny {
        for x0 in 0..nx {
            let s = patch_stats(target, registered, x0, y0, p);
            if !(s.var_a > NCC_VARIANCE_FLOOR && s.var_b > NCC_VARIANCE_FLOOR) {
                continue;
            }
            let (sa, sb) = (s.var_a.sqrt(), s.var_b.sqrt());
            total += s.cov / (sa * sb);
            // d ncc / d b_k = (a_k - ā) / (n σa σb) - cov (b_k - b̄) / (n σa σb³)
            let c1 = 1.0 / (n * sa * sb);
            let c2 = s.cov / (n * sa * sb * s.var_b);
            for y in y0..y0 + p {
                for x in x0..x0 + p {
                    let da = target.get(x, y) - s.mean_a;
                    let db = registered.get(x, y) - s.mean_b;
                    grad[y * w + x] -= (c1 * da - c2 * db) / count;
                }
            }
        }
    }
    Ok((1.0 - total / count, grad))
}

#[inline]
fn clamp_index(v: i64, n: usize) -> usize {
    v.clamp(0, n as i64 - 1) as usize
}

/// `exp(-ssd / (var + floor))` comparing the patch at `x` with the patch at
/// `x + r`; `var` is the population variance of the patch at `x`. Patch
/// coordinates are clamped to the image.
pub fn mind_feature(img: &Image, x: [usize; 2], cfg: &MindConfig, r: [i64; 2]) -> f64 {
    let h = (cfg.patch_size / 2) as i64;
    let (w, hgt) = (img.width(), img.height());
    let n = (cfg.patch_size * cfg.patch_size) as f64;
    let (cx, cy) = (x[0] as i64, x[1] as i64);
    let (mut ssd, mut sum, mut sum_sq) = (0.0, 0.0, 0.0);
    for dy in -h..=h {
        for dx in -h..=h {
            let a = img.get(clamp_index(cx + dx, w), clamp_index(cy + dy, hgt));
            let b = img.get(clamp_index(cx + r[0] + dx, w), clamp_index(cy + r[1] + dy, hgt));
            ssd += (a - b) * (a - b);
            sum += a;
            sum_sq += a * a;
        }
    }
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    (-ssd / (var + cfg.variance_floor)).exp()
}

/// Mean absolute MIND difference over every pixel and displacement.
pub fn mind_match(target: &Image, registered: &Image, cfg: &MindConfig) -> Result<f64> {
    target.check_extent(registered)?;
    cfg.validate()?;
    let mut total = 0.0;
    for y in 0..target.height() {
        for x in 0..target.width() {
            for &r in &cfg.displacements {
                let mt = mind_feature(target, [x, y], cfg, r);
                let mr = mind_feature(registered, [x, y], cfg, r);
                total += (mt - mr).abs();
            }
        }
    }
    Ok(total / (target.len() * cfg.displacements.len()) as f64)
}

fn mind_grad(target: &Image, registered: &Image, cfg: &MindConfig) -> Result<(f64, Vec<f64>)> {
    target.check_extent(registered)?;
    cfg.validate()?;
    let (w, hgt) = (registered.width(), registered.height());
    let h = (cfg.patch_size / 2) as i64;
    let n = (cfg.patch_size * cfg.patch_size) as f64;
    let norm = (target.len() * cfg.displacements.len()) as f64;
    let mut grad = vec![0.0; registered.len()];
    let mut total = 0.0;
    for y in 0..hgt {
        for x in 0..w {
            for &r in &cfg.displacements {
                let mt = mind_feature(target, [x, y], cfg, r);
                let (cx, cy) = (x as i64, y as i64);
                let (mut ssd, mut sum, mut sum_sq) = (0.0, 0.0, 0.0);
                for dy in -h..=h {
                    for dx in -h..=h {
                        let a = registered.get(clamp_index(cx + dx, w), clamp_index(cy + dy, hgt));
                        let b = registered.get(clamp_index(cx + r[0] + dx, w), clamp_index(cy + r[1] + dy, hgt));
                        ssd += (a - b) * (a - b);
                        sum += a;
                        sum_sq += a * a;
                    }
                }
                let mean = sum / n;
                let raw_var = sum_sq / n - mean * mean;
                let var = raw_var.max(0.0);
                let denom = var + cfg.variance_floor;
                let mr = (-ssd / denom).exp();
                let diff = mt - mr;
                total += diff.abs();
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                // dL/dmr = -sign / norm
                let g_mr = -sign / norm;
                if g_mr == 0.0 {
                    continue;
                }
                let g_ssd = g_mr * (-mr / denom);
                let g_var = if raw_var > 0.0 { g_mr * mr * ssd / (denom * denom) } else { 0.0 };
                for dy in -h..=h {
                    for dx in -h..=h {
                        let ia = clamp_index(cy + dy, hgt) * w + clamp_index(cx + dx, w);
                        let ib = clamp_index(cy + r[1] + dy, hgt) * w + clamp_index(cx + r[0] + dx, w);
                        let a = registered.data()[ia];
                        let b = registered.data()[ib];
                        let d = 2.0 * (a - b) * g_ssd;
                        grad[ia] += d + g_var * 2.0 * (a - mean) / n;
                        grad[ib] -= d;
                    }
                }
            }
        }
    }
    Ok((total / norm, grad))
}

/// Applies `base` to the masked images `mask_t ∘ target` and `mask_r ∘ registered`.
pub fn masked_match(target: &Image, registered: &Image, mask_t: &Mask, mask_r: &Mask, base: &MatchLoss) -> Result<f64> {
    target.check_extent(registered)?;
    let t = mask_t.apply(target)?;
    let r = mask_r.apply(registered)?;
    base.value(&t, &r)
}

/// `match + λ κ`.
pub fn total_loss(match_loss: f64, kappa: f64, lambda: f64) -> f64 {
    match_loss + lambda * kappa
}

/// `match + λ κ + β 𝟙 seg`, where the segmentation term is present only when
/// both source and target segmentations exist.
pub fn weak_loss(image_match: f64, kappa: f64, seg_match: Option<f64>, lambda: f64, beta: f64) -> f64 {
    let base = total_loss(image_match, kappa, lambda);
    match seg_match {
        Some(seg) => base + beta * seg,
        None => base,
    }
}
