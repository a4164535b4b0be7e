//! A small reverse-mode tape over the coarse primitives of the registration
//! pipeline. Nodes are appended in evaluation order; `backward` walks them in
//! exact reverse order, accumulating adjoints only into nodes that depend on a
//! leaf marked `requires_grad`.

use std::sync::Arc;

use nalgebra::{DMatrix, Dyn, LU};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::landmarks::Frame;
use crate::losses::MatchLoss;
use crate::nn;
use crate::tps::{self, KernelKind, AFFINE_TERMS};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv3x3 { input: Var, weight: Var, bias: Var },
    Relu { input: Var },
    MaxPool2 { input: Var },
    Linear { input: Var, weight: Var, bias: Var },
    Tanh { input: Var },
    Reshape { input: Var, shape: Vec<usize> },
    SelectRows { input: Var, rows: Vec<usize> },
    ConcatRows { head: Var, tail: Var },
    TpsMatrix { centers: Var, kernel: KernelKind },
    TpsRhs { values: Var },
    Solve { matrix: Var, rhs: Var },
    FrobCond { matrix: Var, copies: f64 },
    TpsGrid { weights: Var, centers: Var, query: Arc<Vec<[f64; 2]>>, kernel: KernelKind },
    GridSample { coords: Var, image: Arc<Image>, frame: Frame },
    MaskMul { input: Var, mask: Arc<Vec<f64>> },
    Match { registered: Var, target: Arc<Image>, loss: MatchLoss },
    Combine { terms: Vec<(Var, f64)> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv3x3 { input, weight, bias } | Op::Linear { input, weight, bias } => vec![*input, *weight, *bias],
            Op::Relu { input }
            | Op::MaxPool2 { input }
            | Op::Tanh { input }
            | Op::Reshape { input, .. }
            | Op::SelectRows { input, .. }
            | Op::MaskMul { input, .. } => vec![*input],
            Op::ConcatRows { head, tail } => vec![*head, *tail],
            Op::TpsMatrix { centers, .. } => vec![*centers],
            Op::TpsRhs { values } => vec![*values],
            Op::Solve { matrix, rhs } => vec![*matrix, *rhs],
            Op::FrobCond { matrix, .. } => vec![*matrix],
            Op::TpsGrid { weights, centers, .. } => vec![*weights, *centers],
            Op::GridSample { coords, .. } => vec![*coords],
            Op::Match { registered, .. } => vec![*registered],
            Op::Combine { terms } => terms.iter().map(|(v, _)| *v).collect(),
        }
    }
}

#[derive(Clone, Debug)]
enum Saved {
    None,
    Argmax(Vec<usize>),
    Lu(LU<f64, Dyn, Dyn>),
    Inverse { inverse: DMatrix<f64>, norm: f64, inv_norm: f64 },
    Grad(Vec<f64>),
    /// `ln r²` per (query, center), zero where `r = 0`.
    LogDist(Vec<f64>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    saved: Saved,
    needs_grad: bool,
}

/// Record of primitive operations with the intermediates their adjoints need.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints from one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient of the seeded output with respect to `v`; `None` when no
    /// gradient flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient values of `v`, zeros when nothing flowed into it.
    pub fn values(&self, tape: &Tape, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; tape.value(v).len()],
        }
    }

    /// Node indices in the order the backward pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    let s = t.shape();
    DMatrix::from_row_slice(s[0], s[1], t.data())
}

fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    let mut data = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            data.push(m[(i, j)]);
        }
    }
    Tensor::new(vec![m.nrows(), m.ncols()], data).expect("matrix shape")
}

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.shape().len() == rank {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what} expects rank {rank}, got shape {:?}", t.shape())))
    }
}

fn expect_points(t: &Tensor, what: &str) -> Result<()> {
    if t.shape().len() == 2 && t.shape()[1] == 2 {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what} expects an n x 2 tensor, got {:?}", t.shape())))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            saved: Saved::None,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A constant input; it never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Replaces a leaf's value. Call [`Tape::replay`] to refresh dependents.
    pub fn set_leaf(&mut self, v: Var, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::InvalidArgument("only leaves can be assigned".into()));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::Shape("leaf value shape changed".into()));
        }
        node.value = value;
        Ok(())
    }

    /// Re-evaluates every recorded operation in order from the current leaf values.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let (value, saved) = self.forward(&self.nodes[i].op)?;
            self.nodes[i].value = value;
            self.nodes[i].saved = saved;
        }
        Ok(())
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let (value, saved) = self.forward(&op)?;
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            saved,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv3x3(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        self.push(Op::Conv3x3 { input, weight, bias })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.push(Op::Relu { input })
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        self.push(Op::MaxPool2 { input })
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        self.push(Op::Linear { input, weight, bias })
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        self.push(Op::Tanh { input })
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        self.push(Op::Reshape { input, shape })
    }

    pub fn select_rows(&mut self, input: Var, rows: Vec<usize>) -> Result<Var> {
        self.push(Op::SelectRows { input, rows })
    }

    pub fn concat_rows(&mut self, head: Var, tail: Var) -> Result<Var> {
        self.push(Op::ConcatRows { head, tail })
    }

    /// The TPS block `B` built from `n x 2` control points.
    pub fn tps_matrix(&mut self, centers: Var, kernel: KernelKind) -> Result<Var> {
        self.push(Op::TpsMatrix { centers, kernel })
    }

    /// The TPS right-hand sides `[k_x | k_y]` from `n x 2` values.
    pub fn tps_rhs(&mut self, values: Var) -> Result<Var> {
        self.push(Op::TpsRhs { values })
    }

    /// `B⁻¹ K` by LU with partial pivoting.
    pub fn solve(&mut self, matrix: Var, rhs: Var) -> Result<Var> {
        self.push(Op::Solve { matrix, rhs })
    }

    /// `copies · ‖B‖_F ‖B⁻¹‖_F`: the Frobenius condition of a block-diagonal
    /// matrix repeating `B` `copies` times.
    pub fn frobenius_condition(&mut self, matrix: Var, copies: usize) -> Result<Var> {
        self.push(Op::FrobCond {
            matrix,
            copies: copies as f64,
        })
    }

    /// Evaluates the TPS with solution `weights` at fixed query points.
    pub fn tps_grid(&mut self, weights: Var, centers: Var, query: Arc<Vec<[f64; 2]>>, kernel: KernelKind) -> Result<Var> {
        self.push(Op::TpsGrid {
            weights,
            centers,
            query,
            kernel,
        })
    }

    /// Bilinear samples of `image` at normalized `coords` (one row per output
    /// pixel, row-major over `image`'s extent).
    pub fn grid_sample(&mut self, coords: Var, image: Arc<Image>) -> Result<Var> {
        let frame = Frame::new(image.width(), image.height());
        self.push(Op::GridSample { coords, image, frame })
    }

    pub fn mask_mul(&mut self, input: Var, mask: Arc<Vec<f64>>) -> Result<Var> {
        self.push(Op::MaskMul { input, mask })
    }

    /// Matching loss between a fixed target and the registered image node.
    pub fn match_loss(&mut self, registered: Var, target: Arc<Image>, loss: MatchLoss) -> Result<Var> {
        self.push(Op::Match {
            registered,
            target,
            loss,
        })
    }

    /// `Σ coef_k · v_k` over scalar nodes.
    pub fn combine(&mut self, terms: Vec<(Var, f64)>) -> Result<Var> {
        self.push(Op::Combine { terms })
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn forward(&self, op: &Op) -> Result<(Tensor, Saved)> {
        let plain = |t: Tensor| Ok((t, Saved::None));
        match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::Conv3x3 { input, weight, bias } => {
                let (x, w, b) = (self.val(*input), self.val(*weight), self.val(*bias));
                expect_rank(x, 3, "conv3x3 input")?;
                let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let c_out = b.len();
                if w.shape() != [c_out, c_in, 3, 3] {
                    return Err(Error::Shape(format!("conv weight {:?} for {c_in} -> {c_out}", w.shape())));
                }
                let out = nn::conv3x3_forward(x.data(), c_in, h, wd, w.data(), b.data());
                plain(Tensor::new(vec![c_out, h, wd], out)?)
            }
            Op::Relu { input } => {
                let x = self.val(*input);
                plain(Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.max(0.0)).collect())?)
            }
            Op::MaxPool2 { input } => {
                let x = self.val(*input);
                expect_rank(x, 3, "maxpool input")?;
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (out, arg) = nn::maxpool2_forward(x.data(), c, h, w);
                Ok((Tensor::new(vec![c, h / 2, w / 2], out)?, Saved::Argmax(arg)))
            }
            Op::Linear { input, weight, bias } => {
                let (x, w, b) = (self.val(*input), self.val(*weight), self.val(*bias));
                if w.shape() != [b.len(), x.len()] {
                    return Err(Error::Shape(format!("linear weight {:?} for {} -> {}", w.shape(), x.len(), b.len())));
                }
                plain(Tensor::new(vec![b.len()], nn::linear_forward(x.data(), w.data(), b.data()))?)
            }
            Op::Tanh { input } => {
                let x = self.val(*input);
                plain(Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.tanh()).collect())?)
            }
            Op::Reshape { input, shape } => plain(Tensor::new(shape.clone(), self.val(*input).data().to_vec())?),
            Op::SelectRows { input, rows } => {
                let x = self.val(*input);
                expect_points(x, "select_rows")?;
                let n = x.shape()[0];
                let mut data = Vec::with_capacity(rows.len() * 2);
                for &r in rows {
                    if r >= n {
                        return Err(Error::InvalidArgument(format!("row {r} out of range {n}")));
                    }
                    data.extend_from_slice(&x.data()[2 * r..2 * r + 2]);
                }
                plain(Tensor::new(vec![rows.len(), 2], data)?)
            }
            Op::ConcatRows { head, tail } => {
                let (a, b) = (self.val(*head), self.val(*tail));
                expect_points(a, "concat_rows")?;
                expect_points(b, "concat_rows")?;
                let mut data = a.data().to_vec();
                data.extend_from_slice(b.data());
                plain(Tensor::new(vec![a.shape()[0] + b.shape()[0], 2], data)?)
            }
            Op::TpsMatrix { centers, kernel } => {
                let c = self.val(*centers);
                expect_points(c, "tps_matrix")?;
                plain(from_matrix(&tps::system_matrix(*kernel, &c.points())))
            }
            Op::TpsRhs { values } => {
                let v = self.val(*values);
                expect_points(v, "tps_rhs")?;
                plain(from_matrix(&tps::system_rhs(&v.points())))
            }
            Op::Solve { matrix, rhs } => {
                let b = to_matrix(self.val(*matrix));
                let k = to_matrix(self.val(*rhs));
                let lu = b.lu();
                let w = lu.solve(&k).ok_or(Error::Singular {
                    condition: f64::INFINITY,
                })?;
                if w.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Singular {
                        condition: f64::INFINITY,
                    });
                }
                Ok((from_matrix(&w), Saved::Lu(lu)))
            }
            Op::FrobCond { matrix, copies } => {
                let b = to_matrix(self.val(*matrix));
                let inverse = b.clone().try_inverse().ok_or(Error::Singular {
                    condition: f64::INFINITY,
                })?;
                let (norm, inv_norm) = (b.norm(), inverse.norm());
                let kappa = copies * norm * inv_norm;
                if !kappa.is_finite() {
                    return Err(Error::Singular { condition: kappa });
                }
                Ok((Tensor::scalar(kappa), Saved::Inverse { inverse, norm, inv_norm }))
            }
            Op::TpsGrid {
                weights,
                centers,
                query,
                kernel,
            } => {
                let c = self.val(*centers);
                let w = self.val(*weights);
                let m = c.shape()[0];
                if w.shape() != [m + AFFINE_TERMS, 2] {
                    return Err(Error::Shape("TPS weights do not match centers".into()));
                }
                let (pts, w) = (c.points(), w.data());
                let aff = |k: usize| [w[2 * (m + k)], w[2 * (m + k) + 1]];
                let (ax, ay, a0) = (aff(0), aff(1), aff(2));
                let mut logs = Vec::with_capacity(query.len() * m);
                let mut out = Vec::with_capacity(query.len() * 2);
                for q in query.iter() {
                    let mut acc = [ax[0] * q[0] + ay[0] * q[1] + a0[0], ax[1] * q[0] + ay[1] * q[1] + a0[1]];
                    for (i, ci) in pts.iter().enumerate() {
                        let (dx, dy) = (q[0] - ci[0], q[1] - ci[1]);
                        let r2 = dx * dx + dy * dy;
                        let (phi, log) = kernel.eval_sq_with_log(r2);
                        logs.push(log);
                        acc[0] += w[2 * i] * phi;
                        acc[1] += w[2 * i + 1] * phi;
                    }
                    out.extend_from_slice(&acc);
                }
                Ok((Tensor::new(vec![query.len(), 2], out)?, Saved::LogDist(logs)))
            }
            Op::GridSample { coords, image, frame } => {
                let c = self.val(*coords);
                expect_points(c, "grid_sample")?;
                if c.shape()[0] != image.len() {
                    return Err(Error::Shape("sample grid does not cover the image".into()));
                }
                let data = c
                    .data()
                    .chunks_exact(2)
                    .map(|u| {
                        let p = frame.to_pixel([u[0], u[1]]);
                        image.sample(p[0], p[1])
                    })
                    .collect();
                plain(Tensor::new(vec![image.height(), image.width()], data)?)
            }
            Op::MaskMul { input, mask } => {
                let x = self.val(*input);
                if x.len() != mask.len() {
                    return Err(Error::Shape("mask extent differs".into()));
                }
                plain(Tensor::new(x.shape().to_vec(), x.data().iter().zip(mask.iter()).map(|(a, m)| a * m).collect())?)
            }
            Op::Match {
                registered,
                target,
                loss,
            } => {
                let r = self.val(*registered);
                let reg = Image::new(target.width(), target.height(), r.data().to_vec())?;
                let (value, grad) = loss.value_and_grad(target, &reg)?;
                Ok((Tensor::scalar(value), Saved::Grad(grad)))
            }
            Op::Combine { terms } => plain(Tensor::scalar(terms.iter().map(|(v, c)| c * self.val(*v).item()).sum())),
        }
    }

    /// Reverse pass from `output` seeded with `seed`.
    pub fn backward(&self, output: Var, seed: f64) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let out = &self.nodes[output.0];
        let mut g0 = Tensor::zeros(out.value.shape().to_vec());
        g0.data_mut().fill(seed);
        grads[output.0] = Some(g0);
        let mut visited = Vec::new();

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (input, gin) in self.adjoint(node, &g)? {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gin),
                    slot @ None => *slot = Some(gin),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn adjoint(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3x3 { input, weight, bias } => {
                let x = self.val(*input);
                let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let wt = self.val(*weight);
                let c_out = wt.shape()[0];
                let grads = nn::conv3x3_backward(g.data(), x.data(), c_in, h, w, wt.data(), c_out, self.wants(*input));
                out.push((*weight, Tensor::new(wt.shape().to_vec(), grads.weight)?));
                out.push((*bias, Tensor::new(vec![c_out], grads.bias)?));
                if let Some(gx) = grads.input {
                    out.push((*input, Tensor::new(x.shape().to_vec(), gx)?));
                }
            }
            Op::Relu { input } => {
                let x = self.val(*input);
                let data = x.data().iter().zip(g.data()).map(|(v, gv)| if *v > 0.0 { *gv } else { 0.0 }).collect();
                out.push((*input, Tensor::new(x.shape().to_vec(), data)?));
            }
            Op::MaxPool2 { input } => {
                let Saved::Argmax(arg) = &node.saved else { unreachable!() };
                let mut gx = Tensor::zeros(self.val(*input).shape().to_vec());
                for (&idx, gv) in arg.iter().zip(g.data()) {
                    gx.data_mut()[idx] += gv;
                }
                out.push((*input, gx));
            }
            Op::Linear { input, weight, bias } => {
                let x = self.val(*input);
                let w = self.val(*weight);
                let n_in = x.len();
                let mut gw = Vec::with_capacity(w.len());
                for gv in g.data() {
                    gw.extend(x.data().iter().map(|xv| gv * xv));
                }
                out.push((*weight, Tensor::new(w.shape().to_vec(), gw)?));
                out.push((*bias, g.clone()));
                if self.wants(*input) {
                    let mut gx = vec![0.0; n_in];
                    for (o, gv) in g.data().iter().enumerate() {
                        let row = &w.data()[o * n_in..(o + 1) * n_in];
                        gx.iter_mut().zip(row).for_each(|(a, wv)| *a += gv * wv);
                    }
                    out.push((*input, Tensor::new(x.shape().to_vec(), gx)?));
                }
            }
            Op::Tanh { input } => {
                let y = &node.value;
                let data = y.data().iter().zip(g.data()).map(|(yv, gv)| gv * (1.0 - yv * yv)).collect();
                out.push((*input, Tensor::new(y.shape().to_vec(), data)?));
            }
            Op::Reshape { input, .. } => {
                out.push((*input, Tensor::new(self.val(*input).shape().to_vec(), g.data().to_vec())?));
            }
            Op::SelectRows { input, rows } => {
                let mut gx = Tensor::zeros(self.val(*input).shape().to_vec());
                for (k, &r) in rows.iter().enumerate() {
                    gx.data_mut()[2 * r] += g.data()[2 * k];
                    gx.data_mut()[2 * r + 1] += g.data()[2 * k + 1];
                }
                out.push((*input, gx));
            }
            Op::ConcatRows { head, tail } => {
                let split = self.val(*head).len();
                out.push((*head, Tensor::new(self.val(*head).shape().to_vec(), g.data()[..split].to_vec())?));
                out.push((*tail, Tensor::new(self.val(*tail).shape().to_vec(), g.data()[split..].to_vec())?));
            }
            Op::TpsMatrix { centers, kernel } => {
                let pts = self.val(*centers).points();
                let m = pts.len();
                let n = m + AFFINE_TERMS;
                let gb = g.data();
                let mut gc = vec![[0.0f64; 2]; m];
                for j in 0..m {
                    gc[j][0] += gb[j];
                    gc[j][1] += gb[n + j];
                }
                for i in 0..m {
                    let row = (AFFINE_TERMS + i) * n;
                    gc[i][0] += gb[row + m];
                    gc[i][1] += gb[row + m + 1];
                    for j in 0..m {
                        if i == j {
                            continue;
                        }
                        let d = [pts[i][0] - pts[j][0], pts[i][1] - pts[j][1]];
                        let f = kernel.grad_factor_sq(d[0] * d[0] + d[1] * d[1]) * gb[row + j];
                        gc[i][0] += f * d[0];
                        gc[i][1] += f * d[1];
                        gc[j][0] -= f * d[0];
                        gc[j][1] -= f * d[1];
                    }
                }
                out.push((*centers, Tensor::from_points(&gc)));
            }
            Op::TpsRhs { values } => {
                let m = self.val(*values).shape()[0];
                out.push((*values, Tensor::new(vec![m, 2], g.data()[2 * AFFINE_TERMS..].to_vec())?));
            }
            Op::Solve { matrix, rhs } => {
                let Saved::Lu(lu) = &node.saved else { unreachable!() };
                let inverse = lu.try_inverse().ok_or(Error::Singular {
                    condition: f64::INFINITY,
                })?;
                let gw = to_matrix(g);
                let gk = inverse.transpose() * gw;
                let w = to_matrix(&node.value);
                if self.wants(*matrix) {
                    out.push((*matrix, from_matrix(&(-(&gk * w.transpose())))));
                }
                out.push((*rhs, from_matrix(&gk)));
            }
            Op::FrobCond { matrix, copies } => {
                let Saved::Inverse { inverse, norm, inv_norm } = &node.saved else {
                    unreachable!()
                };
                let b = to_matrix(self.val(*matrix));
                let it = inverse.transpose();
                let term = &it * inverse * &it;
                let scale = g.item() * copies;
                let gb = b * (scale * inv_norm / norm) - term * (scale * norm / inv_norm);
                out.push((*matrix, from_matrix(&gb)));
            }
            Op::TpsGrid {
                weights,
                centers,
                query,
                kernel,
            } => {
                let Saved::LogDist(logs) = &node.saved else { unreachable!() };
                let pts = self.val(*centers).points();
                let w = self.val(*weights).data();
                let m = pts.len();
                let mut gw = vec![0.0; (m + AFFINE_TERMS) * 2];
                let mut gc = vec![[0.0f64; 2]; m];
                let want_centers = self.wants(*centers);
                for ((q, gq), row) in query.iter().zip(g.data().chunks_exact(2)).zip(logs.chunks_exact(m.max(1))) {
                    for (i, c) in pts.iter().enumerate() {
                        let d = [q[0] - c[0], q[1] - c[1]];
                        let r2 = d[0] * d[0] + d[1] * d[1];
                        let (phi, factor) = kernel.from_log(r2, row[i]);
                        gw[2 * i] += gq[0] * phi;
                        gw[2 * i + 1] += gq[1] * phi;
                        if want_centers {
                            let f = (gq[0] * w[2 * i] + gq[1] * w[2 * i + 1]) * factor;
                            gc[i][0] -= f * d[0];
                            gc[i][1] -= f * d[1];
                        }
                    }
                    for c in 0..2 {
                        gw[2 * m + c] += gq[c] * q[0];
                        gw[2 * (m + 1) + c] += gq[c] * q[1];
                        gw[2 * (m + 2) + c] += gq[c];
                    }
                }
                out.push((*weights, Tensor::new(vec![m + AFFINE_TERMS, 2], gw)?));
                if want_centers {
                    out.push((*centers, Tensor::from_points(&gc)));
                }
            }
            Op::GridSample { coords, image, frame } => {
                let c = self.val(*coords);
                let scale = frame.scale();
                let mut gc = Vec::with_capacity(c.len());
                for (u, gv) in c.data().chunks_exact(2).zip(g.data()) {
                    let p = frame.to_pixel([u[0], u[1]]);
                    let (_, gx, gy) = image.sample_with_grad(p[0], p[1]);
                    gc.push(gv * gx * scale[0]);
                    gc.push(gv * gy * scale[1]);
                }
                out.push((*coords, Tensor::new(c.shape().to_vec(), gc)?));
            }
            Op::MaskMul { input, mask } => {
                let data = g.data().iter().zip(mask.iter()).map(|(gv, m)| gv * m).collect();
                out.push((*input, Tensor::new(g.shape().to_vec(), data)?));
            }
            Op::Match { registered, .. } => {
                let Saved::Grad(grad) = &node.saved else { unreachable!() };
                let s = g.item();
                let data = grad.iter().map(|v| v * s).collect();
                out.push((*registered, Tensor::new(self.val(*registered).shape().to_vec(), data)?));
            }
            Op::Combine { terms } => {
                for (v, coef) in terms {
                    out.push((*v, Tensor::scalar(coef * g.item())));
                }
            }
        }
        Ok(out)
    }
}
