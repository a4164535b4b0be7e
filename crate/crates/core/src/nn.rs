//! Dense kernels for the landmark encoder: 3x3 same-padded convolution via
//! im2col + GEMM, 2x2 max pooling and fully-connected layers.

/// `c = alpha * a · b + beta * c` for row-major operands given with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every element addressed by the given
    // dimensions and strides; callers construct both from the same shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Rows `ci*9 + ky*3 + kx`, columns `y*w + x`: the input pixel feeding each
/// kernel tap, zero outside the image.
fn im2col(input: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; channels * 9 * hw];
    for ci in 0..channels {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Same-padded 3x3 convolution. `weight` is `[c_out, c_in, 3, 3]`.
pub fn conv3x3_forward(input: &[f64], c_in: usize, h: usize, w: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let c_out = bias.len();
    let hw = h * w;
    let k = c_in * 9;
    let cols = im2col(input, c_in, h, w);
    let mut out = vec![0.0; c_out * hw];
    for (o, b) in bias.iter().enumerate() {
        out[o * hw..(o + 1) * hw].fill(*b);
    }
    gemm(c_out, k, hw, weight, (k, 1), &cols, (hw, 1), 1.0, &mut out);
    out
}

pub struct ConvGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub input: Option<Vec<f64>>,
}

pub fn conv3x3_backward(
    grad_out: &[f64],
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    c_out: usize,
    need_input: bool,
) -> ConvGrads {
    let hw = h * w;
    let k = c_in * 9;
    let cols = im2col(input, c_in, h, w);
    let mut gw = vec![0.0; c_out * k];
    gemm(c_out, hw, k, grad_out, (hw, 1), &cols, (1, hw), 0.0, &mut gw);
    let gb = (0..c_out).map(|o| grad_out[o * hw..(o + 1) * hw].iter().sum()).collect();
    // The input adjoint of a same-padded 3x3 convolution is the same
    // convolution of the output gradient with flipped, channel-transposed taps.
    let input_grad = need_input.then(|| {
        let mut flipped = vec![0.0; weight.len()];
        for o in 0..c_out {
            for ci in 0..c_in {
                for t in 0..9 {
                    flipped[(ci * c_out + o) * 9 + 8 - t] = weight[(o * c_in + ci) * 9 + t];
                }
            }
        }
        conv3x3_forward(grad_out, c_out, h, w, &flipped, &vec![0.0; c_in])
    });
    ConvGrads {
        weight: gw,
        bias: gb,
        input: input_grad,
    }
}

/// 2x2 max pooling with stride 2 (trailing odd row/column dropped). Returns
/// the pooled values and, per output, the flat input index of the maximum
/// (first in scan order on ties).
pub fn maxpool2_forward(input: &[f64], channels: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(channels * oh * ow);
    let mut argmax = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let base = c * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * x + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

/// `y = W x + b` with `W` row-major `[out, in]`.
pub fn linear_forward(input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n_in = input.len();
    let mut out = bias.to_vec();
    gemm(bias.len(), n_in, 1, weight, (n_in, 1), input, (1, 1), 1.0, &mut out);
    out
}
