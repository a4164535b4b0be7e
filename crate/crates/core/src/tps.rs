//! Thin-plate-spline system construction, solving, evaluation and warping.
//!
//! For control points `x_i` and displaced points `x̄_i` the transform is
//!
//! ```text
//! T(x) = Σ_i w_i φ(|x - x_i|) + a_x·x + a_y·y + a_0,   φ(r) = r² log r
//! ```
//!
//! solved per output coordinate from the block system `B w = k` whose first
//! three rows force the radial part to carry no constant or linear term. The
//! full system matrix is block-diagonal with one copy of `B` per coordinate.
//!
//! `build_system(source, target, ..)` produces the transform with
//! `T(source_i) = target_i`. To backward-warp an image `S` onto an image `T`,
//! pass the landmarks of `T` as `source` and those of `S` as `target`: the
//! matrix is then built from the target image's landmarks and the right-hand
//! side from the source image's.

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure_finite, Error, Result};
use crate::image::Image;
use crate::landmarks::{LandmarkSet, DIM};

/// Block condition estimates above this are treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

/// Number of affine coefficients per coordinate (`a_x`, `a_y`, `a_0`).
pub const AFFINE_TERMS: usize = DIM + 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KernelKind {
    #[default]
    ThinPlate2D,
}

impl KernelKind {
    /// `φ(r)`, with the removable singularity `φ(0) = 0`.
    #[inline]
    pub fn eval(self, r: f64) -> f64 {
        self.eval_sq(r * r)
    }

    /// `φ` evaluated from the squared distance: `r² log r = ½ r² ln r²`.
    #[inline]
    pub fn eval_sq(self, r2: f64) -> f64 {
        match self {
            KernelKind::ThinPlate2D => {
                if r2 == 0.0 {
                    0.0
                } else {
                    0.5 * r2 * r2.ln()
                }
            }
        }
    }

    /// `φ'(r) / r = 2 ln r + 1`, from the squared distance. The gradient of
    /// `φ(|x - c|)` is this factor times `x - c`, which vanishes at `r = 0`.
    #[inline]
    pub fn grad_factor_sq(self, r2: f64) -> f64 {
        match self {
            KernelKind::ThinPlate2D => {
                if r2 == 0.0 {
                    0.0
                } else {
                    r2.ln() + 1.0
                }
            }
        }
    }

    /// `φ` from the squared distance together with `ln r²` (0 at `r = 0`),
    /// for reuse by [`KernelKind::from_log`].
    #[inline]
    pub fn eval_sq_with_log(self, r2: f64) -> (f64, f64) {
        match self {
            KernelKind::ThinPlate2D => {
                if r2 == 0.0 {
                    (0.0, 0.0)
                } else {
                    let log = r2.ln();
                    (0.5 * r2 * log, log)
                }
            }
        }
    }

    /// `(φ, φ'(r)/r)` from the squared distance and its cached `ln r²`.
    #[inline]
    pub fn from_log(self, r2: f64, log: f64) -> (f64, f64) {
        match self {
            KernelKind::ThinPlate2D => {
                if r2 == 0.0 {
                    (0.0, 0.0)
                } else {
                    (0.5 * r2 * log, log + 1.0)
                }
            }
        }
    }
}

/// The linear system for one landmark correspondence.
#[derive(Clone, Debug, PartialEq)]
pub struct TpsSystem {
    pub kernel: KernelKind,
    /// Points the kernel matrix is built from.
    pub centers: Vec<[f64; 2]>,
    /// The `(M+3) x (M+3)` block `B`.
    pub block: DMatrix<f64>,
    /// Right-hand sides `[k_x | k_y]`, `(M+3) x 2`.
    pub rhs: DMatrix<f64>,
    pub anchor_count: usize,
}

impl TpsSystem {
    pub fn size(&self) -> usize {
        self.block.nrows()
    }

    /// The full block-diagonal matrix `A = diag(B, B)`.
    pub fn matrix_a(&self) -> DMatrix<f64> {
        let n = self.size();
        let mut a = DMatrix::zeros(DIM * n, DIM * n);
        for c in 0..DIM {
            a.view_mut((c * n, c * n), (n, n)).copy_from(&self.block);
        }
        a
    }

    /// The stacked right-hand side `b = [k_x; k_y]`.
    pub fn rhs_b(&self) -> DVector<f64> {
        let n = self.size();
        DVector::from_iterator(DIM * n, (0..DIM).flat_map(|c| (0..n).map(move |i| (i, c))).map(|(i, c)| self.rhs[(i, c)]))
    }

    pub fn kx(&self) -> DVector<f64> {
        self.rhs.column(0).into_owned()
    }

    pub fn ky(&self) -> DVector<f64> {
        self.rhs.column(1).into_owned()
    }
}

/// Solved transform parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpParams {
    pub kernel: KernelKind,
    /// `w_i` per coordinate, one row per control point.
    pub rbf_weights: Vec<[f64; 2]>,
    /// Rows: coefficient of x, coefficient of y, constant; columns: output coordinate.
    pub affine: [[f64; 2]; AFFINE_TERMS],
    /// The control points `x_i` the transform was built on.
    pub source_points: Vec<[f64; 2]>,
}

impl WarpParams {
    /// Stacks weights and affine rows into the `(M+3) x 2` solution layout.
    pub fn solution(&self) -> DMatrix<f64> {
        let m = self.rbf_weights.len();
        DMatrix::from_fn(m + AFFINE_TERMS, DIM, |i, c| {
            if i < m {
                self.rbf_weights[i][c]
            } else {
                self.affine[i - m][c]
            }
        })
    }

    fn from_solution(kernel: KernelKind, w: &DMatrix<f64>, centers: &[[f64; 2]]) -> Self {
        let m = centers.len();
        let rbf_weights = (0..m).map(|i| [w[(i, 0)], w[(i, 1)]]).collect();
        let mut affine = [[0.0; 2]; AFFINE_TERMS];
        for (k, row) in affine.iter_mut().enumerate() {
            *row = [w[(m + k, 0)], w[(m + k, 1)]];
        }
        Self {
            kernel,
            rbf_weights,
            affine,
            source_points: centers.to_vec(),
        }
    }

    #[inline]
    pub fn apply_point(&self, p: [f64; 2]) -> [f64; 2] {
        let mut out = [
            self.affine[0][0] * p[0] + self.affine[1][0] * p[1] + self.affine[2][0],
            self.affine[0][1] * p[0] + self.affine[1][1] * p[1] + self.affine[2][1],
        ];
        for (c, w) in self.source_points.iter().zip(&self.rbf_weights) {
            let dx = p[0] - c[0];
            let dy = p[1] - c[1];
            let phi = self.kernel.eval_sq(dx * dx + dy * dy);
            out[0] += w[0] * phi;
            out[1] += w[1] * phi;
        }
        out
    }

    /// Residual of the constraint rows: `Σ w_i`, `Σ x_i w_i`, `Σ y_i w_i`
    /// per coordinate.
    pub fn constraint_sums(&self) -> [[f64; 2]; 3] {
        let mut sums = [[0.0; 2]; 3];
        for (p, w) in self.source_points.iter().zip(&self.rbf_weights) {
            for c in 0..DIM {
                sums[0][c] += w[c];
                sums[1][c] += p[0] * w[c];
                sums[2][c] += p[1] * w[c];
            }
        }
        sums
    }
}

/// The block `B` for the given control points, laid out as
///
/// ```text
/// [ x_1 .. x_M | 0 0 0 ]
/// [ y_1 .. y_M | 0 0 0 ]
/// [ 1   .. 1   | 0 0 0 ]
/// [ φ_ij       | x_i y_i 1 ]   i = 1..M
/// ```
pub fn system_matrix(kernel: KernelKind, centers: &[[f64; 2]]) -> DMatrix<f64> {
    let m = centers.len();
    let n = m + AFFINE_TERMS;
    let mut b = DMatrix::zeros(n, n);
    for (j, p) in centers.iter().enumerate() {
        b[(0, j)] = p[0];
        b[(1, j)] = p[1];
        b[(2, j)] = 1.0;
    }
    for (i, pi) in centers.iter().enumerate() {
        let row = AFFINE_TERMS + i;
        for j in 0..m {
            if j < i {
                b[(row, j)] = b[(AFFINE_TERMS + j, i)];
            } else if j > i {
                let dx = pi[0] - centers[j][0];
                let dy = pi[1] - centers[j][1];
                b[(row, j)] = kernel.eval_sq(dx * dx + dy * dy);
            }
        }
        b[(row, m)] = pi[0];
        b[(row, m + 1)] = pi[1];
        b[(row, m + 2)] = 1.0;
    }
    b
}

/// Right-hand sides `k = [0, 0, 0, v_1, .., v_M]` per coordinate.
pub fn system_rhs(values: &[[f64; 2]]) -> DMatrix<f64> {
    let n = values.len() + AFFINE_TERMS;
    DMatrix::from_fn(n, DIM, |i, c| if i < AFFINE_TERMS { 0.0 } else { values[i - AFFINE_TERMS][c] })
}

/// Builds the system whose solution maps `source` points onto `target` points.
pub fn build_system(source: &LandmarkSet, target: &LandmarkSet, kernel: KernelKind) -> Result<TpsSystem> {
    if source.len() != target.len() {
        return Err(Error::Shape(format!(
            "landmark counts differ: {} vs {}",
            source.len(),
            target.len()
        )));
    }
    if source.dim() != target.dim() {
        return Err(Error::Shape("landmark dimensions differ".into()));
    }
    if source.len() < DIM + 1 {
        return Err(Error::InvalidArgument(format!(
            "need at least {} landmarks, got {}",
            DIM + 1,
            source.len()
        )));
    }
    ensure_finite(source.points().iter().flatten(), "source landmarks")?;
    ensure_finite(target.points().iter().flatten(), "target landmarks")?;
    Ok(TpsSystem {
        kernel,
        centers: source.points().to_vec(),
        block: system_matrix(kernel, source.points()),
        rhs: system_rhs(target.points()),
        anchor_count: source.anchor_count(),
    })
}

/// `‖M‖_F ‖M⁻¹‖_F`, or a singular error when `M` cannot be inverted.
pub fn frobenius_condition(m: &DMatrix<f64>) -> Result<f64> {
    let inv = m
        .clone()
        .try_inverse()
        .ok_or(Error::Singular { condition: f64::INFINITY })?;
    let kappa = m.norm() * inv.norm();
    if kappa.is_finite() {
        Ok(kappa)
    } else {
        Err(Error::Singular { condition: kappa })
    }
}

/// Frobenius condition of the full matrix `A`. Since `A` repeats `B` once per
/// coordinate, both norms scale by `√d` and `κ(A) = d · κ(B)`.
pub fn condition_number(sys: &TpsSystem) -> Result<f64> {
    Ok(DIM as f64 * frobenius_condition(&sys.block)?)
}

/// Scale-free conditioning of a control-point configuration: the Frobenius
/// condition of `B` rebuilt on the points centred at their centroid and
/// scaled to unit RMS radius. Returns infinity for degenerate configurations.
pub fn condition_estimate(kernel: KernelKind, centers: &[[f64; 2]]) -> f64 {
    let m = centers.len() as f64;
    let mut mean = [0.0; 2];
    for p in centers {
        mean[0] += p[0] / m;
        mean[1] += p[1] / m;
    }
    let rms = (centers
        .iter()
        .map(|p| (p[0] - mean[0]).powi(2) + (p[1] - mean[1]).powi(2))
        .sum::<f64>()
        / m)
        .sqrt();
    if !(rms > 0.0 && rms.is_finite()) {
        return f64::INFINITY;
    }
    let canonical: Vec<[f64; 2]> = centers
        .iter()
        .map(|p| [(p[0] - mean[0]) / rms, (p[1] - mean[1]) / rms])
        .collect();
    frobenius_condition(&system_matrix(kernel, &canonical)).unwrap_or(f64::INFINITY)
}

/// Solves `B w = k` once per coordinate with a single LU factorization,
/// followed by two rounds of iterative refinement.
pub fn solve_system(sys: &TpsSystem) -> Result<WarpParams> {
    let condition = condition_estimate(sys.kernel, &sys.centers);
    if !(condition <= SINGULAR_CONDITION) {
        return Err(Error::Singular { condition });
    }
    let lu = sys.block.clone().lu();
    let singular = || Error::Singular { condition };
    let mut w = lu.solve(&sys.rhs).ok_or_else(singular)?;
    for _ in 0..2 {
        let residual = &sys.rhs - &sys.block * &w;
        let correction = lu.solve(&residual).ok_or_else(singular)?;
        w += correction;
    }
    ensure_finite(w.iter(), "TPS solution")?;
    Ok(WarpParams::from_solution(sys.kernel, &w, &sys.centers))
}

/// Evaluates the transform with solution matrix `w` ((M+3) x 2) at `query`.
pub fn eval_points(kernel: KernelKind, w: &DMatrix<f64>, centers: &[[f64; 2]], query: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let m = centers.len();
    let weights: Vec<[f64; 2]> = (0..m).map(|i| [w[(i, 0)], w[(i, 1)]]).collect();
    let aff = |k: usize| [w[(m + k, 0)], w[(m + k, 1)]];
    let (ax, ay, a0) = (aff(0), aff(1), aff(2));
    query
        .iter()
        .map(|q| {
            let mut out = [
                ax[0] * q[0] + ay[0] * q[1] + a0[0],
                ax[1] * q[0] + ay[1] * q[1] + a0[1],
            ];
            for (c, wi) in centers.iter().zip(&weights) {
                let dx = q[0] - c[0];
                let dy = q[1] - c[1];
                let phi = kernel.eval_sq(dx * dx + dy * dy);
                out[0] += wi[0] * phi;
                out[1] += wi[1] * phi;
            }
            out
        })
        .collect()
}

pub fn apply_transform(params: &WarpParams, coords: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    ensure_finite(coords.iter().flatten(), "query coordinates")?;
    Ok(coords.iter().map(|&p| params.apply_point(p)).collect())
}

/// Backward warp: output pixel `x` takes the bilinear sample of `source` at
/// `T(x)`, clamped to the border. `params` must be in `source`'s pixel frame.
pub fn warp_image(source: &Image, params: &WarpParams) -> Image {
    let (w, h) = (source.width(), source.height());
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let t = params.apply_point([x as f64, y as f64]);
            data.push(source.sample(t[0], t[1]));
        }
    }
    Image::new(w, h, data).expect("bilinear samples of a valid image stay in range")
}
