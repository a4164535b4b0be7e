//! Scalar images, masks, bilinear sampling and file I/O.
//!
//! Images are row-major `height x width` grids of intensities in `[0, 1]`.
//! Pixel `(x, y)` is column `x`, row `y`, and sits at continuous coordinate
//! `(x, y)`: the origin is the centre of the top-left pixel.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Sample positions closer than this to a lattice line are snapped onto it,
/// so that solver round-off does not perturb integer-aligned resampling.
pub const LATTICE_SNAP: f64 = 1e-9;

const RAW_MAGIC: &[u8; 8] = b"TPSMRAW1";

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("image extent must be positive".into()));
        }
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "image data has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidArgument(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Builds an image from `f(x, y)`, clamping values into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dim(&self) -> usize {
        2
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn same_extent(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn check_extent(&self, other: &Image) -> Result<()> {
        if self.same_extent(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "image extents differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    /// Bilinear sample at continuous pixel coordinates with clamp-to-border.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let (ix, fx, _) = locate(x, self.width);
        let (iy, fy, _) = locate(y, self.height);
        let (x1, y1) = (next(ix, self.width), next(iy, self.height));
        let i00 = self.get(ix, iy);
        let i01 = self.get(x1, iy);
        let i10 = self.get(ix, y1);
        let i11 = self.get(x1, y1);
        let top = i00 + fx * (i01 - i00);
        let bottom = i10 + fx * (i11 - i10);
        top + fy * (bottom - top)
    }

    /// Bilinear sample plus its partial derivatives with respect to `x` and
    /// `y`. Derivatives are one-sided (right cell) on lattice lines and zero
    /// where the coordinate is clamped.
    pub fn sample_with_grad(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let (ix, fx, inside_x) = locate(x, self.width);
        let (iy, fy, inside_y) = locate(y, self.height);
        let (x1, y1) = (next(ix, self.width), next(iy, self.height));
        let i00 = self.get(ix, iy);
        let i01 = self.get(x1, iy);
        let i10 = self.get(ix, y1);
        let i11 = self.get(x1, y1);
        let top = i00 + fx * (i01 - i00);
        let bottom = i10 + fx * (i11 - i10);
        let value = top + fy * (bottom - top);
        let gx = if inside_x {
            (1.0 - fy) * (i01 - i00) + fy * (i11 - i10)
        } else {
            0.0
        };
        let gy = if inside_y { bottom - top } else { 0.0 };
        (value, gx, gy)
    }

    /// Pixelwise product with another grid of the same extent.
    pub fn multiply(&self, other: &[f64]) -> Result<Image> {
        if other.len() != self.data.len() {
            return Err(Error::Shape("multiplier extent differs from image".into()));
        }
        let data = self.data.iter().zip(other).map(|(a, b)| a * b).collect();
        Image::new(self.width, self.height, data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let img = image::open(path.as_ref())?.into_luma8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
        Image::new(w as usize, h as usize, data)
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .ok_or_else(|| Error::Shape("image buffer size".into()))?;
        buf.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        Ok(())
    }

    /// Writes the lossless sidecar: magic `TPSMRAW1`, `u32` rank, one `u64`
    /// per axis (height, width), then row-major `f64` values, all little-endian.
    pub fn write_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(RAW_MAGIC)?;
        out.write_all(&2u32.to_le_bytes())?;
        out.write_all(&(self.height as u64).to_le_bytes())?;
        out.write_all(&(self.width as u64).to_le_bytes())?;
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_raw(path: impl AsRef<Path>) -> Result<Image> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != RAW_MAGIC {
            return Err(Error::Format("not a raw image sidecar".into()));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        if u32::from_le_bytes(word) != 2 {
            return Err(Error::Format("only rank-2 raw images are supported".into()));
        }
        let mut dims = [0usize; 2];
        for d in &mut dims {
            let mut long = [0u8; 8];
            input.read_exact(&mut long)?;
            *d = u64::from_le_bytes(long) as usize;
        }
        let [height, width] = dims;
        let mut data = Vec::with_capacity(width * height);
        let mut long = [0u8; 8];
        for _ in 0..width * height {
            input.read_exact(&mut long)?;
            data.push(f64::from_le_bytes(long));
        }
        Image::new(width, height, data)
    }
}

/// Cell index, fractional offset, and whether the coordinate lies inside the
/// sampled extent (derivative defined) for one axis.
#[inline]
fn locate(p: f64, n: usize) -> (usize, f64, bool) {
    let max = (n - 1) as f64;
    let inside = (0.0..=max).contains(&p);
    let mut c = p.clamp(0.0, max);
    let r = c.round();
    if (c - r).abs() < LATTICE_SNAP {
        c = r;
    }
    if n == 1 {
        return (0, 0.0, false);
    }
    let i = (c.floor() as usize).min(n - 2);
    (i, c - i as f64, inside)
}

#[inline]
fn next(i: usize, n: usize) -> usize {
    (i + 1).min(n - 1)
}

/// A multiplicative region-of-interest weight map in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask(Image);

impl Mask {
    pub fn new(image: Image) -> Result<Self> {
        if !image.data().iter().any(|&v| v > 0.0) {
            return Err(Error::InvalidArgument("mask has no positive value".into()));
        }
        Ok(Self(image))
    }

    pub fn ones(width: usize, height: usize) -> Result<Self> {
        Self::new(Image::filled(width, height, 1.0)?)
    }

    /// Zero-valued mask. Not a valid region of interest, but useful as the
    /// degenerate case of masked losses.
    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Ok(Self(Image::filled(width, height, 0.0)?))
    }

    /// Bounding box `[x0, x1] x [y0, y1]` (inclusive, pixels) blurred with a
    /// Gaussian of standard deviation `sigma` pixels.
    pub fn blurred_box(
        width: usize,
        height: usize,
        (x0, y0, x1, y1): (usize, usize, usize, usize),
        sigma: f64,
    ) -> Result<Self> {
        if x0 > x1 || y0 > y1 || x1 >= width || y1 >= height {
            return Err(Error::InvalidArgument("mask box outside image".into()));
        }
        let mut data = vec![0.0; width * height];
        for y in y0..=y1 {
            for x in x0..=x1 {
                data[y * width + x] = 1.0;
            }
        }
        let blurred = gaussian_blur(&data, width, height, sigma);
        Self::new(Image::new(width, height, blurred)?)
    }

    pub fn image(&self) -> &Image {
        &self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn apply(&self, image: &Image) -> Result<Image> {
        self.0.check_extent(image)?;
        image.multiply(self.0.data())
    }
}

/// Separable Gaussian blur with clamped borders. Output stays within the
/// input's range since the kernel is normalized.
pub fn gaussian_blur(data: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let xx = clampi(x as isize + k as isize - radius, width);
                acc += w * data[y * width + xx];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let yy = clampi(y as isize + k as isize - radius, height);
                acc += w * tmp[yy * width + x];
            }
            out[y * width + x] = acc.clamp(0.0, 1.0);
        }
    }
    out
}
