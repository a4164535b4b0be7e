//! Ordered landmark sets and the pixel <-> normalized coordinate frame.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Spatial dimension of every landmark set in this crate.
pub const DIM: usize = 2;

/// `M` ordered 2-D control points in pixel coordinates. The last
/// `anchor_count` points are fixed anchors that are never learned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
    anchor_count: usize,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        Self::with_anchors(points, 0)
    }

    pub fn with_anchors(points: Vec<[f64; 2]>, anchor_count: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("landmark set is empty".into()));
        }
        if anchor_count >= points.len() {
            return Err(Error::InvalidArgument(format!(
                "anchor count {anchor_count} must be below point count {}",
                points.len()
            )));
        }
        ensure_finite(points.iter().flatten(), "landmark coordinates")?;
        Ok(Self { points, anchor_count })
    }

    /// Builds a set from a landmark-major flat vector `x1, y1, x2, y2, ...`.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % DIM != 0 {
            return Err(Error::Shape(format!("flat landmark vector of odd length {}", flat.len())));
        }
        Self::new(flat.chunks_exact(DIM).map(|c| [c[0], c[1]]).collect())
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        DIM
    }

    pub fn anchor_count(&self) -> usize {
        self.anchor_count
    }

    pub fn learned(&self) -> &[[f64; 2]] {
        &self.points[..self.points.len() - self.anchor_count]
    }

    /// Landmark-major flattening `x1, y1, x2, y2, ...` of every point.
    pub fn flatten(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    /// Keeps the learned points at `indices` (in the given order) plus all anchors.
    pub fn select_learned(&self, indices: &[usize]) -> Result<Self> {
        let learned = self.learned();
        let mut points = Vec::with_capacity(indices.len() + self.anchor_count);
        for &i in indices {
            let p = learned
                .get(i)
                .ok_or_else(|| Error::InvalidArgument(format!("landmark index {i} out of range")))?;
            points.push(*p);
        }
        points.extend_from_slice(&self.points[learned.len()..]);
        Self::with_anchors(points, self.anchor_count)
    }

    pub fn map(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Result<Self> {
        Self::with_anchors(self.points.iter().map(|&p| f(p)).collect(), self.anchor_count)
    }
}

/// Image corners in the order (0,0), (w-1,0), (0,h-1), (w-1,h-1).
pub fn corner_points(extent: [usize; 2]) -> Vec<[f64; 2]> {
    let (w, h) = ((extent[0] - 1) as f64, (extent[1] - 1) as f64);
    vec![[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]]
}

/// Appends `count` fixed corner anchors. `count` must be 0 or `2^d` (4).
pub fn append_anchors(lms: &LandmarkSet, extent: [usize; 2], count: usize) -> Result<LandmarkSet> {
    if extent.iter().any(|&e| e == 0) {
        return Err(Error::InvalidArgument("image extent must be positive".into()));
    }
    match count {
        0 => Ok(lms.clone()),
        4 => {
            let mut points = lms.points.clone();
            points.extend(corner_points(extent));
            LandmarkSet::with_anchors(points, lms.anchor_count + count)
        }
        _ => Err(Error::InvalidArgument(format!(
            "anchor count must be 0 or 4 for 2-D images, got {count}"
        ))),
    }
}

/// Affine map between pixel coordinates `[0, extent-1]` and the normalized
/// square `[-1, 1]` used by the encoder output and the training pipeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
}

impl Frame {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    #[inline]
    fn half_span(&self) -> [f64; 2] {
        [
            ((self.width.max(2) - 1) as f64) / 2.0,
            ((self.height.max(2) - 1) as f64) / 2.0,
        ]
    }

    /// Pixel units per normalized unit along x and y.
    pub fn scale(&self) -> [f64; 2] {
        self.half_span()
    }

    #[inline]
    pub fn to_pixel(&self, u: [f64; 2]) -> [f64; 2] {
        let s = self.half_span();
        [(u[0] + 1.0) * s[0], (u[1] + 1.0) * s[1]]
    }

    #[inline]
    pub fn to_normalized(&self, p: [f64; 2]) -> [f64; 2] {
        let s = self.half_span();
        [p[0] / s[0] - 1.0, p[1] / s[1] - 1.0]
    }

    /// Normalized coordinates of every pixel centre, row-major.
    pub fn grid(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(self.to_normalized([x as f64, y as f64]));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchors_follow_learned_points() {
        let pts: Vec<[f64; 2]> = (0..16).map(|i| [i as f64, 2.0 * i as f64]).collect();
        let lms = LandmarkSet::new(pts.clone()).unwrap();
        let out = append_anchors(&lms, [256, 256], 4).unwrap();
        assert_eq!(out.len(), 20);
        assert_eq!(out.anchor_count(), 4);
        assert_eq!(&out.points()[..16], &pts[..]);
        assert_eq!(
            &out.points()[16..],
            &[[0.0, 0.0], [255.0, 0.0], [0.0, 255.0], [255.0, 255.0]]
        );
    }

    #[test]
    fn small_set_gets_exact_corners() {
        let lms = LandmarkSet::new(vec![[1.0, 2.0], [3.0, 4.0], [5.0, 1.0]]).unwrap();
        let out = append_anchors(&lms, [64, 64], 4).unwrap();
        assert_eq!(out.anchor_count(), 4);
        assert_eq!(&out.points()[3..], &corner_points([64, 64])[..]);
        assert_eq!(out.learned(), lms.points());
    }

    #[test]
    fn zero_anchors_is_identity_and_other_counts_fail() {
        let lms = LandmarkSet::new(vec![[1.0, 2.0], [3.0, 4.0], [5.0, 1.0]]).unwrap();
        assert_eq!(append_anchors(&lms, [64, 64], 0).unwrap(), lms);
        for bad in [1, 2, 3, 5, 8] {
            assert!(append_anchors(&lms, [64, 64], bad).is_err());
        }
    }

    #[test]
    fn rejects_non_finite_points() {
        assert!(LandmarkSet::new(vec![[0.0, f64::INFINITY]]).is_err());
        assert!(LandmarkSet::with_anchors(vec![[0.0, 0.0]], 1).is_err());
    }

    #[test]
    fn frame_round_trips() {
        let f = Frame::new(128, 128);
        assert_eq!(f.to_normalized([0.0, 127.0]), [-1.0, 1.0]);
        let p = [37.25, 90.5];
        let q = f.to_pixel(f.to_normalized(p));
        assert!((p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12);
    }
}
