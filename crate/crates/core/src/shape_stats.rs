//! Population statistics on landmark descriptors: Mahalanobis Z-scores with
//! a PCA fallback, the mean-shape image, and feature export.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::landmarks::LandmarkSet;
use crate::tps::{build_system, solve_system, warp_image, KernelKind};

/// Eigenvalues at or below this are numerically zero.
pub const MIN_EIGENVALUE: f64 = 1e-10;
/// Relative eigenvalue cutoff for the retained principal components.
pub const RELATIVE_CUTOFF: f64 = 1e-12;

/// Mean and covariance of a control population, possibly in a PCA basis.
#[derive(Clone, Debug)]
pub struct ControlStats {
    raw_mean: DVector<f64>,
    /// Columns are principal directions in the raw space.
    basis: Option<DMatrix<f64>>,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    n_samples: usize,
}

impl ControlStats {
    pub fn raw_dim(&self) -> usize {
        self.raw_mean.len()
    }

    /// Dimension of the space μ and Σ live in.
    pub fn working_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn basis(&self) -> Option<&DMatrix<f64>> {
        self.basis.as_ref()
    }

    /// Mean descriptor in the raw space.
    pub fn raw_mean(&self) -> &DVector<f64> {
        &self.raw_mean
    }

    fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.basis {
            Some(b) => b.transpose() * (x - &self.raw_mean),
            None => x.clone(),
        }
    }
}

fn sample_covariance(rows: &[DVector<f64>], mean: &DVector<f64>) -> DMatrix<f64> {
    let d = mean.len();
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let c = r - mean;
        cov += &c * c.transpose();
    }
    cov / (rows.len() as f64 - 1.0)
}

fn mean_of(rows: &[DVector<f64>]) -> DVector<f64> {
    let mut m = DVector::zeros(rows[0].len());
    for r in rows {
        m += r;
    }
    m / rows.len() as f64
}

/// Fits μ and Σ. When `n <= D` or `pca_dims` is given, descriptors are first
/// projected onto the leading `min(pca_dims, n - 1)` principal components
/// with eigenvalue above the numerical-zero cutoff; a singular raw
/// covariance also falls back to this projection.
pub fn fit_control_stats(descriptors: &[Vec<f64>], pca_dims: Option<usize>) -> Result<ControlStats> {
    let n = descriptors.len();
    if n < 2 {
        return Err(Error::InvalidArgument("control statistics need at least two descriptors".into()));
    }
    let d = descriptors[0].len();
    if d == 0 || descriptors.iter().any(|x| x.len() != d) {
        return Err(Error::Shape("descriptors must be non-empty and of equal length".into()));
    }
    crate::error::ensure_finite(descriptors.iter().flatten(), "descriptors")?;
    if pca_dims == Some(0) {
        return Err(Error::InvalidArgument("pca_dims must be positive".into()));
    }
    let rows: Vec<DVector<f64>> = descriptors.iter().map(|x| DVector::from_column_slice(x)).collect();
    let raw_mean = mean_of(&rows);
    let raw_cov = sample_covariance(&rows, &raw_mean);
    let eig = SymmetricEigen::new(raw_cov.clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]];
    if !(top > MIN_EIGENVALUE) {
        return Err(Error::ZeroVariance);
    }
    let full_rank = eig.eigenvalues[order[d - 1]] > MIN_EIGENVALUE.max(RELATIVE_CUTOFF * top);
    if n > d && pca_dims.is_none() && full_rank {
        return Ok(ControlStats {
            mean: raw_mean.clone(),
            raw_mean,
            basis: None,
            covariance: raw_cov,
            n_samples: n,
        });
    }
    let limit = pca_dims.unwrap_or(n - 1).min(n - 1).min(d);
    let keep: Vec<usize> = order
        .iter()
        .copied()
        .take(limit)
        .take_while(|&i| eig.eigenvalues[i] > MIN_EIGENVALUE.max(RELATIVE_CUTOFF * top))
        .collect();
    let basis = DMatrix::from_columns(&keep.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect::<Vec<_>>());
    let projected: Vec<DVector<f64>> = rows.iter().map(|r| basis.transpose() * (r - &raw_mean)).collect();
    let mean = mean_of(&projected);
    let covariance = sample_covariance(&projected, &mean);
    Ok(ControlStats {
        raw_mean,
        basis: Some(basis),
        mean,
        covariance,
        n_samples: n,
    })
}

/// Mahalanobis distance `sqrt((z - μ)ᵀ Σ⁻¹ (z - μ))` of a raw descriptor.
pub fn zscore(stats: &ControlStats, descriptor: &[f64]) -> Result<f64> {
    if descriptor.len() != stats.raw_dim() {
        return Err(Error::Shape(format!(
            "descriptor has {} values, statistics expect {}",
            descriptor.len(),
            stats.raw_dim()
        )));
    }
    crate::error::ensure_finite(descriptor, "descriptor")?;
    let diff = stats.project(&DVector::from_column_slice(descriptor)) - &stats.mean;
    let chol = stats
        .covariance
        .clone()
        .cholesky()
        .ok_or(Error::ZeroVariance)?;
    let solved = chol.solve(&diff);
    Ok(diff.dot(&solved).max(0.0).sqrt())
}

/// Area under the ROC curve for separating `positives` (expected high)
/// from `negatives`; ties count one half.
pub fn roc_auc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::InvalidArgument("AUC needs both classes".into()));
    }
    let mut wins = 0.0;
    for p in positives {
        for q in negatives {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (positives.len() * negatives.len()) as f64)
}

/// Pointwise mean of aligned landmark sets.
pub fn mean_landmarks(sets: &[LandmarkSet]) -> Result<LandmarkSet> {
    let first = sets.first().ok_or_else(|| Error::InvalidArgument("no landmark sets".into()))?;
    if sets.iter().any(|s| s.len() != first.len() || s.anchor_count() != first.anchor_count()) {
        return Err(Error::Shape("landmark sets are not aligned".into()));
    }
    let n = sets.len() as f64;
    let points = (0..first.len())
        .map(|i| {
            let sum = sets.iter().fold([0.0, 0.0], |acc, s| [acc[0] + s.points()[i][0], acc[1] + s.points()[i][1]]);
            [sum[0] / n, sum[1] / n]
        })
        .collect();
    LandmarkSet::with_anchors(points, first.anchor_count())
}

/// Average of every segmentation warped into the mean-landmark frame. Each
/// mask is resampled through the spline carrying the mean landmarks onto
/// that sample's landmarks, so pixel `x` of the result reads the mask at
/// the corresponding location. Returns the mean landmarks too.
pub fn mean_shape_image(masks: &[Image], sets: &[LandmarkSet], ids: &[String]) -> Result<(Image, LandmarkSet)> {
    if masks.is_empty() || masks.len() != sets.len() || ids.len() != masks.len() {
        return Err(Error::Shape("masks, landmark sets and ids must be aligned and non-empty".into()));
    }
    if masks.iter().any(|m| !m.same_extent(&masks[0])) {
        return Err(Error::Shape("masks differ in extent".into()));
    }
    let mean = mean_landmarks(sets)?;
    let mut acc = vec![0.0; masks[0].len()];
    for ((mask, set), id) in masks.iter().zip(sets).zip(ids) {
        let warped = build_system(&mean, set, KernelKind::ThinPlate2D)
            .and_then(|sys| solve_system(&sys))
            .map(|params| warp_image(mask, &params))
            .map_err(|e| Error::Sample {
                id: id.clone(),
                cause: Box::new(e),
            })?;
        acc.iter_mut().zip(warped.data()).for_each(|(a, v)| *a += v);
    }
    let n = masks.len() as f64;
    let image = Image::new(
        masks[0].width(),
        masks[0].height(),
        acc.into_iter().map(|v| (v / n).clamp(0.0, 1.0)).collect(),
    )?;
    Ok((image, mean))
}

/// Writes one CSV row per id: the id, then the flattened coordinates
/// (x₁, y₁, x₂, y₂, …) with 17 significant digits.
pub fn export_features<W: Write>(writer: W, sets: &[LandmarkSet], ids: &[String]) -> Result<()> {
    if sets.len() != ids.len() {
        return Err(Error::Shape("one id per landmark set is required".into()));
    }
    let m = sets.first().map_or(0, LandmarkSet::len);
    if sets.iter().any(|s| s.len() != m) {
        return Err(Error::Shape("landmark sets differ in size".into()));
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string()];
    for i in 1..=m {
        header.push(format!("x{i}"));
        header.push(format!("y{i}"));
    }
    w.write_record(&header)?;
    for (set, id) in sets.iter().zip(ids) {
        let mut row = vec![id.clone()];
        row.extend(set.flatten().iter().map(|v| format!("{v:.16e}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`export_features`] as `(id, flat coordinates)`.
pub fn read_features<R: Read>(reader: R) -> Result<Vec<(String, Vec<f64>)>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        let mut fields = record.iter();
        let id = fields.next().ok_or_else(|| Error::Format("empty feature row".into()))?.to_string();
        let values = fields
            .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Format(format!("feature value '{f}': {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        out.push((id, values));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Vec<Vec<f64>> {
        vec![
            vec![1.0, 2.0],
            vec![2.0, 1.0],
            vec![3.0, 5.0],
            vec![4.0, 3.0],
            vec![0.0, 4.0],
        ]
    }

    #[test]
    fn raw_fit_matches_hand_computation() {
        let s = fit_control_stats(&toy(), None).unwrap();
        assert!(s.basis().is_none());
        assert_eq!(s.mean().as_slice(), &[2.0, 3.0]);
        // deviations: (-1,-1) (0,-2) (1,2) (2,0) (-2,1)
        let c = s.covariance();
        assert!((c[(0, 0)] - 10.0 / 4.0).abs() < 1e-12);
        assert!((c[(1, 1)] - 10.0 / 4.0).abs() < 1e-12);
        assert!((c[(0, 1)] - 1.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn zscore_is_quadratic_form() {
        let s = fit_control_stats(&toy(), None).unwrap();
        assert_eq!(zscore(&s, &[2.0, 3.0]).unwrap(), 0.0);
        // Σ = [[2.5, .25], [.25, 2.5]]; Σ⁻¹ = [[2.5, -.25], [-.25, 2.5]] / 6.1875
        let (dx, dy): (f64, f64) = (1.0, -2.0);
        let q = (2.5 * dx * dx - 0.5 * dx * dy + 2.5 * dy * dy) / 6.1875;
        assert!((zscore(&s, &[3.0, 1.0]).unwrap() - q.sqrt()).abs() < 1e-12);
        assert!(zscore(&s, &[1.0]).is_err());
    }

    #[test]
    fn identity_covariance_gives_unit_distance() {
        let pts = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0], vec![0.0, 0.0]];
        // covariance diag(0.5, 0.5); scale so it becomes the identity
        let scaled: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|v| v * 2f64.sqrt()).collect()).collect();
        let s = fit_control_stats(&scaled, None).unwrap();
        assert!((zscore(&s, &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_and_small_inputs_error() {
        let same = vec![vec![1.0, 2.0, 3.0]; 4];
        assert!(matches!(fit_control_stats(&same, None), Err(Error::ZeroVariance)));
        assert!(fit_control_stats(&[vec![1.0]], None).is_err());
    }

    #[test]
    fn rank_deficient_population_uses_pca() {
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|i| (0..100).map(|j| ((i * 7 + j * 3) % 11) as f64 + (i * j) as f64 * 0.01).collect())
            .collect();
        let s = fit_control_stats(&rows, None).unwrap();
        assert!(s.working_dim() <= 9);
        let eig = s.covariance().clone().symmetric_eigenvalues();
        assert!(eig.iter().all(|&l| l > MIN_EIGENVALUE));
        assert!(zscore(&s, &rows[0]).unwrap() >= 0.0);
        assert!(zscore(&s, s.raw_mean().as_slice()).unwrap() < 1e-9);
        let two = fit_control_stats(&rows, Some(2)).unwrap();
        assert_eq!(two.working_dim(), 2);
    }

    #[test]
    fn auc_counts_ordered_pairs() {
        assert_eq!(roc_auc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[1.0], &[1.0]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[1.0, 3.0], &[2.0]).unwrap(), 0.5);
    }

    #[test]
    fn features_round_trip_exactly() {
        let sets: Vec<LandmarkSet> = (0..4)
            .map(|k| LandmarkSet::new((0..11).map(|i| [i as f64 / 3.0 + k as f64, (i * k) as f64 * 0.1 + 1e-17]).collect()).unwrap())
            .collect();
        let ids: Vec<String> = (0..4).map(|k| format!("s{k}")).collect();
        let mut buf = Vec::new();
        export_features(&mut buf, &sets, &ids).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap().split(',').count(), 23);
        let back = read_features(&buf[..]).unwrap();
        assert_eq!(back.len(), 4);
        for ((id, v), (set, want)) in back.iter().zip(sets.iter().zip(&ids)) {
            assert_eq!(id, want);
            assert_eq!(v, &set.flatten());
        }
        let mut empty = Vec::new();
        export_features(&mut empty, &[], &[]).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap().trim(), "id");
    }

    fn disc(cx: f64, cy: f64) -> Image {
        Image::from_fn(40, 40, |x, y| {
            if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= 36.0 {
                1.0
            } else {
                0.0
            }
        })
        .unwrap()
    }

    fn ring(cx: f64, cy: f64) -> LandmarkSet {
        LandmarkSet::new((0..6).map(|k| {
            let a = k as f64 * std::f64::consts::PI / 3.0;
            [cx + 8.0 * a.cos(), cy + 8.0 * a.sin()]
        }).collect())
        .unwrap()
    }

    #[test]
    fn mean_shape_of_single_sample_is_itself() {
        let m = disc(20.0, 19.0);
        let (img, mean) = mean_shape_image(&[m.clone()], &[ring(20.0, 19.0)], &["a".into()]).unwrap();
        assert_eq!(img, m);
        assert_eq!(mean, ring(20.0, 19.0));
    }

    #[test]
    fn mean_shape_of_translated_pair_is_midpoint() {
        let masks = [disc(17.0, 20.0), disc(23.0, 20.0)];
        let sets = [ring(17.0, 20.0), ring(23.0, 20.0)];
        let (img, _) = mean_shape_image(&masks, &sets, &["a".into(), "b".into()]).unwrap();
        let want = disc(20.0, 20.0);
        for (a, b) in img.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
