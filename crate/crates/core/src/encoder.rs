//! Convolutional landmark encoder: conv blocks with 2x2 pooling, a
//! fully-connected head and a tanh output giving normalized coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::{Tape, Tensor, Var};
use crate::image::Image;
use crate::landmarks::{Frame, LandmarkSet, DIM};

/// Block structure of the encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub width: usize,
    pub height: usize,
    /// Convolution layers per block.
    pub block_layers: Vec<usize>,
    /// Output channels of every convolution in a block.
    pub widths: Vec<usize>,
    /// Learned landmarks predicted per image.
    pub landmarks: usize,
}

impl Architecture {
    /// Four blocks of (2, 2, 4, 4) layers with the given channel widths.
    pub fn standard(width: usize, height: usize, widths: [usize; 4], landmarks: usize) -> Self {
        Self {
            width,
            height,
            block_layers: vec![2, 2, 4, 4],
            widths: widths.to_vec(),
            landmarks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("architecture: {msg}")));
        if self.block_layers.is_empty() || self.block_layers.len() != self.widths.len() {
            return bad("one channel width per block is required".into());
        }
        if self.block_layers.contains(&0) || self.widths.contains(&0) {
            return bad("blocks need at least one layer and one channel".into());
        }
        if self.landmarks == 0 {
            return bad("at least one landmark".into());
        }
        let factor = 1usize << self.block_layers.len();
        if self.width % factor != 0 || self.height % factor != 0 || self.width < factor || self.height < factor {
            return bad(format!("input {}x{} is not divisible by {factor}", self.width, self.height));
        }
        Ok(())
    }

    pub fn frame(&self) -> Frame {
        Frame::new(self.width, self.height)
    }

    fn feature_len(&self) -> usize {
        let factor = 1usize << self.block_layers.len();
        self.widths.last().copied().unwrap_or(0) * (self.width / factor) * (self.height / factor)
    }

    /// Parameter tensor shapes in storage order: per conv layer weight then
    /// bias, then the head weight and bias.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut c_in = 1;
        for (&layers, &c_out) in self.block_layers.iter().zip(&self.widths) {
            for _ in 0..layers {
                shapes.push(vec![c_out, c_in, 3, 3]);
                shapes.push(vec![c_out]);
                c_in = c_out;
            }
        }
        let out = self.landmarks * DIM;
        shapes.push(vec![out, self.feature_len()]);
        shapes.push(vec![out]);
        shapes
    }
}

/// Encoder weights θ.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    arch: Architecture,
    tensors: Vec<Tensor>,
}

impl EncoderParams {
    pub fn new(arch: Architecture, tensors: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.shapes();
        if shapes.len() != tensors.len() || shapes.iter().zip(&tensors).any(|(s, t)| s.as_slice() != t.shape()) {
            return Err(Error::Shape("parameter tensors do not match the architecture".into()));
        }
        for t in &tensors {
            crate::error::ensure_finite(t.data(), "encoder parameters")?;
        }
        Ok(Self { arch, tensors })
    }

    /// Builds parameters from a flat vector in storage order.
    pub fn from_flat(arch: Architecture, flat: &[f64]) -> Result<Self> {
        arch.validate()?;
        let mut tensors = Vec::new();
        let mut offset = 0;
        for shape in arch.shapes() {
            let n: usize = shape.iter().product();
            let chunk = flat
                .get(offset..offset + n)
                .ok_or_else(|| Error::Shape("flat parameter vector too short".into()))?;
            tensors.push(Tensor::new(shape, chunk.to_vec())?);
            offset += n;
        }
        if offset != flat.len() {
            return Err(Error::Shape("flat parameter vector too long".into()));
        }
        Self::new(arch, tensors)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Overwrites all parameters from a flat vector in storage order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.num_params(), flat.len())));
        }
        crate::error::ensure_finite(flat, "encoder parameters")?;
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Deterministic initialization. Convolutions use fan-in scaled uniform
/// weights and zero biases. The head is random unless `mean_landmarks` is
/// given, in which case its weights are zero and its bias reproduces those
/// landmarks for every input.
pub fn init_params(seed: u64, arch: &Architecture, mean_landmarks: Option<&LandmarkSet>) -> Result<EncoderParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = arch.shapes();
    let head = shapes.len() - 2;
    let mut tensors = Vec::with_capacity(shapes.len());
    for (i, shape) in shapes.into_iter().enumerate() {
        let n: usize = shape.iter().product();
        let data = if shape.len() == 1 {
            vec![0.0; n]
        } else if i == head {
            let bound = 1.0 / (shape[1] as f64).sqrt();
            let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            if mean_landmarks.is_some() {
                v.fill(0.0);
            }
            v
        } else {
            let fan_in = (shape[1] * 9) as f64;
            let bound = (6.0 / fan_in).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        tensors.push(Tensor::new(shape, data)?);
    }
    if let Some(mean) = mean_landmarks {
        if mean.anchor_count() != 0 || mean.len() != arch.landmarks {
            return Err(Error::InvalidArgument(format!(
                "mean landmarks must be {} learned points without anchors",
                arch.landmarks
            )));
        }
        let frame = arch.frame();
        let bias = tensors.last_mut().expect("head bias");
        for (k, p) in mean.points().iter().enumerate() {
            let u = frame.to_normalized(*p);
            for c in 0..DIM {
                if u[c].abs() >= 1.0 {
                    return Err(Error::InvalidArgument("mean landmarks must lie strictly inside the image".into()));
                }
                bias.data_mut()[DIM * k + c] = u[c].atanh();
            }
        }
    }
    EncoderParams::new(arch.clone(), tensors)
}

/// `count` points on a near-square lattice spanning the central 70% of the
/// image, row by row. A spread-out starting configuration for
/// [`init_params`].
pub fn grid_landmarks(width: usize, height: usize, count: usize) -> Result<LandmarkSet> {
    if count == 0 || width < 2 || height < 2 {
        return Err(Error::InvalidArgument("grid needs at least one point and a 2x2 image".into()));
    }
    let cols = (count as f64).sqrt().ceil() as usize;
    let rows = count.div_ceil(cols);
    let span = |n: usize, extent: usize, k: usize| {
        let (lo, hi) = (0.15 * (extent - 1) as f64, 0.85 * (extent - 1) as f64);
        if n == 1 {
            (lo + hi) / 2.0
        } else {
            lo + (hi - lo) * k as f64 / (n - 1) as f64
        }
    };
    LandmarkSet::new((0..count).map(|i| [span(cols, width, i % cols), span(rows, height, i / cols)]).collect())
}

/// Parameter leaves of one encoder on a tape.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    vars: Vec<Var>,
}

impl EncoderVars {
    /// Places every parameter tensor on `tape`, as differentiable leaves when
    /// `trainable`.
    pub fn register(tape: &mut Tape, params: &EncoderParams, trainable: bool) -> Self {
        let vars = params.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect();
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Flat gradient in parameter storage order.
    pub fn gradient(&self, tape: &Tape, grads: &crate::gradients::Gradients) -> Vec<f64> {
        self.vars.iter().flat_map(|v| grads.values(tape, *v)).collect()
    }
}

/// Records the forward pass on `tape`; the result is an `M x 2` node of
/// normalized coordinates in [-1, 1].
pub fn encode_on_tape(tape: &mut Tape, vars: &EncoderVars, arch: &Architecture, img: &Image) -> Result<Var> {
    if img.width() != arch.width || img.height() != arch.height {
        return Err(Error::Shape(format!(
            "encoder expects {}x{} images, got {}x{}",
            arch.width,
            arch.height,
            img.width(),
            img.height()
        )));
    }
    let mut x = tape.constant(Tensor::new(vec![1, img.height(), img.width()], img.data().to_vec())?);
    let mut p = vars.vars.iter();
    for &layers in &arch.block_layers {
        for _ in 0..layers {
            let (w, b) = (*p.next().expect("conv weight"), *p.next().expect("conv bias"));
            let y = tape.conv3x3(x, w, b)?;
            x = tape.relu(y)?;
        }
        x = tape.maxpool2(x)?;
    }
    let flat_len = tape.value(x).len();
    let flat = tape.reshape(x, vec![flat_len])?;
    let (w, b) = (*p.next().expect("head weight"), *p.next().expect("head bias"));
    let h = tape.linear(flat, w, b)?;
    let t = tape.tanh(h)?;
    tape.reshape(t, vec![arch.landmarks, DIM])
}

/// Predicted learned landmarks in pixel coordinates.
pub fn encode(params: &EncoderParams, img: &Image) -> Result<LandmarkSet> {
    let mut tape = Tape::new();
    let vars = EncoderVars::register(&mut tape, params, false);
    let out = encode_on_tape(&mut tape, &vars, &params.arch, img)?;
    let frame = params.arch.frame();
    LandmarkSet::new(tape.value(out).points().into_iter().map(|u| frame.to_pixel(u)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Architecture {
        Architecture {
            width: 16,
            height: 16,
            block_layers: vec![1, 2],
            widths: vec![2, 3],
            landmarks: 3,
        }
    }

    fn image(seed: f64) -> Image {
        Image::from_fn(16, 16, |x, y| 0.5 + 0.4 * ((x as f64 * 0.7 + seed).sin() * (y as f64 * 0.4).cos())).unwrap()
    }

    #[test]
    fn shapes_follow_blocks() {
        let s = tiny().shapes();
        assert_eq!(s[0], vec![2, 1, 3, 3]);
        assert_eq!(s[2], vec![3, 2, 3, 3]);
        assert_eq!(s[4], vec![3, 3, 3, 3]);
        assert_eq!(s[6], vec![6, 3 * 4 * 4]);
        assert_eq!(s.len(), 8);
        assert!(Architecture::standard(128, 128, [16, 32, 64, 128], 16).validate().is_ok());
        assert!(Architecture::standard(100, 128, [16, 32, 64, 128], 16).validate().is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = init_params(3, &tiny(), None).unwrap();
        assert_eq!(a, init_params(3, &tiny(), None).unwrap());
        assert_ne!(a.flat(), init_params(4, &tiny(), None).unwrap().flat());
    }

    #[test]
    fn zero_head_maps_to_center() {
        let mut p = init_params(1, &tiny(), None).unwrap();
        let n = p.num_params();
        let head = tiny().shapes().iter().rev().take(2).map(|s| s.iter().product::<usize>()).sum::<usize>();
        let mut flat = p.flat();
        flat[n - head..].fill(0.0);
        p.set_flat(&flat).unwrap();
        for q in encode(&p, &image(0.0)).unwrap().points() {
            assert_eq!(*q, [7.5, 7.5]);
        }
    }

    #[test]
    fn mean_landmark_init_reproduces_them() {
        let mean = LandmarkSet::new(vec![[1.0, 2.0], [14.5, 0.25], [8.0, 9.0]]).unwrap();
        let p = init_params(5, &tiny(), Some(&mean)).unwrap();
        for seed in [0.0, 1.3] {
            let out = encode(&p, &image(seed)).unwrap();
            for (a, b) in out.points().iter().zip(mean.points()) {
                assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn outputs_stay_inside_and_are_deterministic() {
        let p = init_params(9, &tiny(), None).unwrap();
        let a = encode(&p, &image(0.5)).unwrap();
        assert_eq!(a, encode(&p, &image(0.5)).unwrap());
        for q in a.points() {
            assert!((0.0..=15.0).contains(&q[0]) && (0.0..=15.0).contains(&q[1]));
        }
        assert!(encode(&p, &Image::filled(8, 8, 0.0).unwrap()).is_err());
    }

    #[test]
    fn grid_is_inside_and_distinct() {
        let g = grid_landmarks(128, 128, 16).unwrap();
        assert_eq!(g.len(), 16);
        assert!((g.points()[0][0] - 0.15 * 127.0).abs() < 1e-12);
        assert!((g.points()[15][1] - 0.85 * 127.0).abs() < 1e-12);
        let g = grid_landmarks(64, 32, 5).unwrap();
        for (i, p) in g.points().iter().enumerate() {
            assert!(p[0] > 0.0 && p[0] < 63.0 && p[1] > 0.0 && p[1] < 31.0);
            assert!(g.points()[..i].iter().all(|q| q != p));
        }
    }

    #[test]
    fn flat_round_trip() {
        let p = init_params(2, &tiny(), None).unwrap();
        let q = EncoderParams::from_flat(tiny(), &p.flat()).unwrap();
        assert_eq!(p, q);
        assert!(EncoderParams::from_flat(tiny(), &p.flat()[1..]).is_err());
    }
}
