//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and the handles
//! of its inputs. [`Tape::backward`] walks the nodes in reverse creation
//! order, which is a valid topological order because a node can only refer
//! to nodes created before it.

use std::cell::RefCell;

use crate::error::{AutodiffError, Result};
use crate::gemm::{gemm, MatRef};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMulAdd {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    BroadcastSpatial(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
    },
    ConvTranspose2x2 {
        x: Var,
        w: Var,
        b: Var,
    },
    Bilinear(Var),
    SelectChannel {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    SmoothL1 {
        x: Var,
        target: Vec<f64>,
    },
    SquaredError {
        x: Var,
        target: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
    },
    BceLogits {
        logits: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a computation for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Corner-aligned source coordinate for output index `i`.
fn corner_coord(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    if dst == 1 || src == 1 {
        return (0, 0, 0.0);
    }
    let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
    let lo = (pos.floor() as usize).min(src - 1);
    let hi = (lo + 1).min(src - 1);
    (lo, hi, pos - lo as f64)
}

/// Corner-aligned bilinear resampling of the trailing two dims of `data`.
pub fn bilinear_resize_planes(
    data: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; planes * out_h * out_w];
    let ys: Vec<_> = (0..out_h).map(|i| corner_coord(i, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|j| corner_coord(j, w, out_w)).collect();
    for p in 0..planes {
        let src = &data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[i * out_w + j] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(AutodiffError::Dimension {
            op,
            lhs: shape.to_vec(),
            rhs: vec![rank],
        });
    }
    Ok(())
}

// im2col for one batch element: cols is (ci·k·k) × (ho·wo)
fn im2col(x: &[f64], ci: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [f64]) {
    let ho = h + 2 * pad - k + 1;
    let wo = w + 2 * pad - k + 1;
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], ci: usize, h: usize, w: usize, k: usize, pad: usize, dx: &mut [f64]) {
    let ho = h + 2 * pad - k + 1;
    let wo = w + 2 * pad - k + 1;
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (c * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// Records an input value. Any gradient buffer on `t` is dropped.
    pub fn leaf(&self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    /// First element of `v`; the natural accessor for scalar losses.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    /// `x · w + b` for `x: B×I`, `w: I×O`, `b: O`.
    pub fn matmul_add(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
            let (xs, ws) = (xv.shape(), wv.shape());
            if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
                return Err(AutodiffError::dim("matmul_add", xs, ws));
            }
            let (rows, inner, cols) = (xs[0], xs[1], ws[1]);
            let mut out = vec![0.0; rows * cols];
            let mut beta = 0.0;
            if let Some(b) = b {
                let bv = &nodes[b.0].value;
                if bv.numel() != cols {
                    return Err(AutodiffError::dim("matmul_add bias", ws, bv.shape()));
                }
                for row in out.chunks_mut(cols) {
                    row.copy_from_slice(bv.data());
                }
                beta = 1.0;
            }
            gemm(
                MatRef::new(xv.data(), rows, inner),
                MatRef::new(wv.data(), inner, cols),
                beta,
                &mut out,
            );
            Tensor::new(&[rows, cols], out)?
        };
        Ok(self.push(out, Op::MatMulAdd { x, w, b }))
    }

    fn binary(
        &self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if av.shape() != bv.shape() {
                return Err(AutodiffError::dim(op_name, av.shape(), bv.shape()));
            }
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(av.shape(), data)?
        };
        Ok(self.push(out, op))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let data = xv.data().iter().map(|&v| f(v)).collect();
            Tensor::new(xv.shape(), data).expect("unary op preserves shape")
        };
        self.push(out, op)
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Concatenation along axis 1. All parts must agree on every other axis.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].0].value.shape().to_vec();
            if first.len() < 2 {
                return Err(AutodiffError::dim("concat", &first, &[2]));
            }
            let mut axis = 0;
            for p in parts {
                let s = nodes[p.0].value.shape();
                if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                    return Err(AutodiffError::dim("concat", &first, s));
                }
                axis += s[1];
            }
            let outer = first[0];
            let inner: usize = first[2..].iter().product();
            let mut data = Vec::with_capacity(outer * axis * inner);
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.0].value;
                    let block = v.shape()[1] * inner;
                    data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
                }
            }
            let mut shape = first.clone();
            shape[1] = axis;
            Tensor::new(&shape, data)?
        };
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// `x[:, start..start+len, ...]`.
    pub fn slice(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let s = xv.shape();
            if s.len() < 2 || len == 0 || start + len > s[1] {
                return Err(AutodiffError::dim("slice", s, &[start, len]));
            }
            let inner: usize = s[2..].iter().product();
            let mut data = Vec::with_capacity(s[0] * len * inner);
            for o in 0..s[0] {
                let base = (o * s[1] + start) * inner;
                data.extend_from_slice(&xv.data()[base..base + len * inner]);
            }
            let mut shape = s.to_vec();
            shape[1] = len;
            Tensor::new(&shape, data)?
        };
        Ok(self.push(out, Op::Slice { x, start }))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Copies a `B×C` tensor across an `h×w` grid, giving `B×C×h×w`.
    pub fn broadcast_spatial(&self, x: Var, h: usize, w: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            expect_rank("broadcast_spatial", xv.shape(), 2)?;
            let mut data = Vec::with_capacity(xv.numel() * h * w);
            for &v in xv.data() {
                data.extend(std::iter::repeat_n(v, h * w));
            }
            Tensor::new(&[xv.shape()[0], xv.shape()[1], h, w], data)?
        };
        Ok(self.push(out, Op::BroadcastSpatial(x)))
    }

    /// Stride-1 cross-correlation. `x: B×Ci×H×W`, `w: Co×Ci×k×k`, `b: Co`,
    /// zero padding `pad` on every side.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, wv, bv) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
            let (xs, ws) = (xv.shape(), wv.shape());
            expect_rank("conv2d input", xs, 4)?;
            expect_rank("conv2d kernel", ws, 4)?;
            let (bn, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let (co, k) = (ws[0], ws[2]);
            if ws[1] != ci || ws[3] != k {
                return Err(AutodiffError::dim("conv2d", xs, ws));
            }
            if k > h + 2 * pad || k > wd + 2 * pad {
                return Err(AutodiffError::dim("conv2d kernel larger than padded input", xs, ws));
            }
            if bv.numel() != co {
                return Err(AutodiffError::dim("conv2d bias", ws, bv.shape()));
            }
            let (ho, wo) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
            let ckk = ci * k * k;
            let mut cols = vec![0.0; ckk * ho * wo];
            let mut data = vec![0.0; bn * co * ho * wo];
            for n in 0..bn {
                im2col(
                    &xv.data()[n * ci * h * wd..(n + 1) * ci * h * wd],
                    ci,
                    h,
                    wd,
                    k,
                    pad,
                    &mut cols,
                );
                let dst = &mut data[n * co * ho * wo..(n + 1) * co * ho * wo];
                for (c, plane) in dst.chunks_mut(ho * wo).enumerate() {
                    plane.fill(bv.data()[c]);
                }
                gemm(
                    MatRef::new(wv.data(), co, ckk),
                    MatRef::new(&cols, ckk, ho * wo),
                    1.0,
                    dst,
                );
            }
            Tensor::new(&[bn, co, ho, wo], data)?
        };
        Ok(self.push(out, Op::Conv2d { x, w, b, pad }))
    }

    /// Transposed convolution with a 2×2 kernel and stride 2, doubling the
    /// spatial size. `x: B×Ci×H×W`, `w: Ci×Co×2×2`, `b: Co`.
    pub fn conv_transpose2x2(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, wv, bv) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
            let (xs, ws) = (xv.shape(), wv.shape());
            expect_rank("conv_transpose input", xs, 4)?;
            expect_rank("conv_transpose kernel", ws, 4)?;
            if ws[0] != xs[1] || ws[2] != 2 || ws[3] != 2 || bv.numel() != ws[1] {
                return Err(AutodiffError::dim("conv_transpose2x2", xs, ws));
            }
            let (bn, ci, h, wd, co) = (xs[0], xs[1], xs[2], xs[3], ws[1]);
            let (ho, wo) = (2 * h, 2 * wd);
            let mut data = vec![0.0; bn * co * ho * wo];
            for n in 0..bn {
                for o in 0..co {
                    let plane = &mut data[(n * co + o) * ho * wo..(n * co + o + 1) * ho * wo];
                    plane.fill(bv.data()[o]);
                    for c in 0..ci {
                        let src = &xv.data()[(n * ci + c) * h * wd..(n * ci + c + 1) * h * wd];
                        let kern = &wv.data()[(c * co + o) * 4..(c * co + o) * 4 + 4];
                        for y in 0..h {
                            for xx in 0..wd {
                                let v = src[y * wd + xx];
                                let base = 2 * y * wo + 2 * xx;
                                plane[base] += v * kern[0];
                                plane[base + 1] += v * kern[1];
                                plane[base + wo] += v * kern[2];
                                plane[base + wo + 1] += v * kern[3];
                            }
                        }
                    }
                }
            }
            Tensor::new(&[bn, co, ho, wo], data)?
        };
        Ok(self.push(out, Op::ConvTranspose2x2 { x, w, b }))
    }

    /// Corner-aligned bilinear resize of the last two axes.
    pub fn bilinear_resize(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(AutodiffError::Config(format!(
                "bilinear_resize target must be positive, got {out_h}×{out_w}"
            )));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let s = xv.shape();
            if s.len() < 2 {
                return Err(AutodiffError::dim("bilinear_resize", s, &[out_h, out_w]));
            }
            let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
            let planes = xv.numel() / (h * w);
            let data = bilinear_resize_planes(xv.data(), planes, h, w, out_h, out_w);
            let mut shape = s.to_vec();
            let r = shape.len();
            shape[r - 2] = out_h;
            shape[r - 1] = out_w;
            Tensor::new(&shape, data)?
        };
        Ok(self.push(out, Op::Bilinear(x)))
    }

    /// Picks channel `idx[b]` for every batch element: `B×C×H×W → B×H×W`.
    pub fn select_channel(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let s = xv.shape();
            expect_rank("select_channel", s, 4)?;
            if idx.len() != s[0] || idx.iter().any(|&c| c >= s[1]) {
                return Err(AutodiffError::dim("select_channel", s, &[idx.len()]));
            }
            let plane = s[2] * s[3];
            let mut data = Vec::with_capacity(s[0] * plane);
            for (n, &c) in idx.iter().enumerate() {
                let base = (n * s[1] + c) * plane;
                data.extend_from_slice(&xv.data()[base..base + plane]);
            }
            Tensor::new(&[s[0], s[2], s[3]], data)?
        };
        Ok(self.push(
            out,
            Op::SelectChannel {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.with_value(x, |v| v.data().iter().sum());
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.with_value(x, Tensor::numel);
        let s = self.sum(x);
        self.affine(s, 1.0 / n as f64, 0.0)
    }

    /// `Σ wᵢ xᵢ` with constant weights.
    pub fn weighted_sum(&self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let s = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if weights.len() != xv.numel() {
                return Err(AutodiffError::dim("weighted_sum", xv.shape(), &[weights.len()]));
            }
            xv.data().iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }))
    }

    fn against_target(
        &self,
        op_name: &'static str,
        x: Var,
        target: &[f64],
        f: impl Fn(f64) -> f64,
    ) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let xv = &nodes[x.0].value;
        if target.len() != xv.numel() {
            return Err(AutodiffError::dim(op_name, xv.shape(), &[target.len()]));
        }
        let data = xv.data().iter().zip(target).map(|(a, b)| f(a - b)).collect();
        Tensor::new(xv.shape(), data)
    }

    /// Elementwise Huber term: `½d²` when `|d| < 1`, else `|d| − ½`.
    pub fn smooth_l1(&self, x: Var, target: Vec<f64>) -> Result<Var> {
        let out = self.against_target("smooth_l1", x, &target, |d| {
            if d.abs() < 1.0 {
                0.5 * d * d
            } else {
                d.abs() - 0.5
            }
        })?;
        Ok(self.push(out, Op::SmoothL1 { x, target }))
    }

    /// Elementwise `(x − target)²`.
    pub fn squared_error(&self, x: Var, target: Vec<f64>) -> Result<Var> {
        let out = self.against_target("squared_error", x, &target, |d| d * d)?;
        Ok(self.push(out, Op::SquaredError { x, target }))
    }

    /// `Σ_pixels w · (−log softmax(logits)[label])` with the softmax taken
    /// over axis 1 of `logits: B×C×H×W`. Labels at zero-weight pixels are
    /// not inspected.
    pub fn cross_entropy(&self, logits: Var, labels: Vec<usize>, weights: Vec<f64>) -> Result<Var> {
        let total = {
            let nodes = self.nodes.borrow();
            let lv = &nodes[logits.0].value;
            let s = lv.shape();
            expect_rank("cross_entropy", s, 4)?;
            let (bn, c, plane) = (s[0], s[1], s[2] * s[3]);
            if labels.len() != bn * plane || weights.len() != bn * plane {
                return Err(AutodiffError::dim("cross_entropy", s, &[labels.len()]));
            }
            let mut total = 0.0;
            for n in 0..bn {
                for p in 0..plane {
                    let wgt = weights[n * plane + p];
                    if wgt == 0.0 {
                        continue;
                    }
                    let label = labels[n * plane + p];
                    if label >= c {
                        return Err(AutodiffError::Config(format!(
                            "label {label} out of range for {c} classes"
                        )));
                    }
                    let at = |k: usize| lv.data()[(n * c + k) * plane + p];
                    let max = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + (0..c).map(|k| (at(k) - max).exp()).sum::<f64>().ln();
                    total += wgt * (lse - at(label));
                }
            }
            total
        };
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                labels,
                weights,
            },
        ))
    }

    /// `Σ w · BCE(σ(logit), target)` in the numerically stable logit form.
    pub fn bce_with_logits(&self, logits: Var, target: Vec<f64>, weights: Vec<f64>) -> Result<Var> {
        let total = {
            let nodes = self.nodes.borrow();
            let lv = &nodes[logits.0].value;
            if target.len() != lv.numel() || weights.len() != lv.numel() {
                return Err(AutodiffError::dim("bce_with_logits", lv.shape(), &[target.len()]));
            }
            lv.data()
                .iter()
                .zip(&target)
                .zip(&weights)
                .map(|((&x, &t), &w)| w * (x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()))
                .sum()
        };
        Ok(self.push(
            Tensor::scalar(total),
            Op::BceLogits {
                logits,
                target,
                weights,
            },
        ))
    }

    /// Reverse pass from the single-element node `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[output.0].value.numel() != 1 {
            return Err(AutodiffError::dim(
                "backward requires a scalar",
                nodes[output.0].value.shape(),
                &[1],
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            backprop_node(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'g mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMulAdd { x, w, b } => {
            let (xs, ws) = (val(*x).shape(), val(*w).shape());
            let (rows, inner, cols) = (xs[0], xs[1], ws[1]);
            let gm = MatRef::new(g, rows, cols);
            let wv = val(*w).data();
            let xv = val(*x).data();
            gemm(gm, MatRef::new(wv, inner, cols).t(), 1.0, acc(grads, nodes, *x));
            gemm(MatRef::new(xv, rows, inner).t(), gm, 1.0, acc(grads, nodes, *w));
            if let Some(b) = b {
                let gb = acc(grads, nodes, *b);
                for row in g.chunks(cols) {
                    for (a, r) in gb.iter_mut().zip(row) {
                        *a += r;
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for (d, s) in acc(grads, nodes, *a).iter_mut().zip(g) {
                *d += s;
            }
            for (d, s) in acc(grads, nodes, *b).iter_mut().zip(g) {
                *d += s;
            }
        }
        Op::Sub(a, b) => {
            for (d, s) in acc(grads, nodes, *a).iter_mut().zip(g) {
                *d += s;
            }
            for (d, s) in acc(grads, nodes, *b).iter_mut().zip(g) {
                *d -= s;
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            for ((d, s), o) in acc(grads, nodes, *a).iter_mut().zip(g).zip(bv) {
                *d += s * o;
            }
            for ((d, s), o) in acc(grads, nodes, *b).iter_mut().zip(g).zip(av) {
                *d += s * o;
            }
        }
        Op::Affine { x, scale } => {
            for (d, s) in acc(grads, nodes, *x).iter_mut().zip(g) {
                *d += scale * s;
            }
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            for ((d, s), y) in acc(grads, nodes, *x).iter_mut().zip(g).zip(y) {
                *d += s * y * (1.0 - y);
            }
        }
        Op::Tanh(x) => {
            let y = node.value.data();
            for ((d, s), y) in acc(grads, nodes, *x).iter_mut().zip(g).zip(y) {
                *d += s * (1.0 - y * y);
            }
        }
        Op::Relu(x) => {
            let xv = val(*x).data();
            for ((d, s), xi) in acc(grads, nodes, *x).iter_mut().zip(g).zip(xv) {
                if *xi > 0.0 {
                    *d += s;
                }
            }
        }
        Op::Concat { parts } => {
            let shape = node.value.shape();
            let outer = shape[0];
            let inner: usize = shape[2..].iter().product();
            let total = shape[1] * inner;
            let mut offset = 0;
            for p in parts {
                let block = val(*p).shape()[1] * inner;
                let gp = acc(grads, nodes, *p);
                for o in 0..outer {
                    let src = &g[o * total + offset..o * total + offset + block];
                    for (d, s) in gp[o * block..(o + 1) * block].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                offset += block;
            }
        }
        Op::Slice { x, start } => {
            let xs = val(*x).shape().to_vec();
            let len = node.value.shape()[1];
            let inner: usize = xs[2..].iter().product();
            let gx = acc(grads, nodes, *x);
            for o in 0..xs[0] {
                let base = (o * xs[1] + start) * inner;
                let src = &g[o * len * inner..(o + 1) * len * inner];
                for (d, s) in gx[base..base + len * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        Op::Reshape(x) => {
            for (d, s) in acc(grads, nodes, *x).iter_mut().zip(g) {
                *d += s;
            }
        }
        Op::BroadcastSpatial(x) => {
            let s = node.value.shape();
            let plane = s[2] * s[3];
            for (d, chunk) in acc(grads, nodes, *x).iter_mut().zip(g.chunks(plane)) {
                *d += chunk.iter().sum::<f64>();
            }
        }
        Op::Conv2d { x, w, b, pad } => {
            let (xs, ws) = (val(*x).shape().to_vec(), val(*w).shape().to_vec());
            let (bn, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let (co, k) = (ws[0], ws[2]);
            let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
            let ckk = ci * k * k;
            let xv = val(*x).data();
            let wv = val(*w).data();
            let mut cols = vec![0.0; ckk * ho * wo];
            let mut dcols = vec![0.0; ckk * ho * wo];
            {
                let gb = acc(grads, nodes, *b);
                for n in 0..bn {
                    let gn = &g[n * co * ho * wo..(n + 1) * co * ho * wo];
                    for (c, plane) in gn.chunks(ho * wo).enumerate() {
                        gb[c] += plane.iter().sum::<f64>();
                    }
                }
            }
            for n in 0..bn {
                let gn = &g[n * co * ho * wo..(n + 1) * co * ho * wo];
                im2col(&xv[n * ci * h * wd..(n + 1) * ci * h * wd], ci, h, wd, k, *pad, &mut cols);
                gemm(
                    MatRef::new(gn, co, ho * wo),
                    MatRef::new(&cols, ckk, ho * wo).t(),
                    1.0,
                    acc(grads, nodes, *w),
                );
                gemm(
                    MatRef::new(wv, co, ckk).t(),
                    MatRef::new(gn, co, ho * wo),
                    0.0,
                    &mut dcols,
                );
                let gx = acc(grads, nodes, *x);
                col2im(&dcols, ci, h, wd, k, *pad, &mut gx[n * ci * h * wd..(n + 1) * ci * h * wd]);
            }
        }
        Op::ConvTranspose2x2 { x, w, b } => {
            let (xs, ws) = (val(*x).shape().to_vec(), val(*w).shape().to_vec());
            let (bn, ci, h, wd, co) = (xs[0], xs[1], xs[2], xs[3], ws[1]);
            let (ho, wo) = (2 * h, 2 * wd);
            let xv = val(*x).data();
            let wv = val(*w).data();
            let mut gx = vec![0.0; xv.len()];
            let mut gw = vec![0.0; wv.len()];
            let mut gb = vec![0.0; co];
            for n in 0..bn {
                for o in 0..co {
                    let plane = &g[(n * co + o) * ho * wo..(n * co + o + 1) * ho * wo];
                    gb[o] += plane.iter().sum::<f64>();
                    for c in 0..ci {
                        let xoff = (n * ci + c) * h * wd;
                        let koff = (c * co + o) * 4;
                        for y in 0..h {
                            for xx in 0..wd {
                                let base = 2 * y * wo + 2 * xx;
                                let taps = [plane[base], plane[base + 1], plane[base + wo], plane[base + wo + 1]];
                                let xval = xv[xoff + y * wd + xx];
                                let mut s = 0.0;
                                for t in 0..4 {
                                    s += taps[t] * wv[koff + t];
                                    gw[koff + t] += taps[t] * xval;
                                }
                                gx[xoff + y * wd + xx] += s;
                            }
                        }
                    }
                }
            }
            for (d, s) in acc(grads, nodes, *x).iter_mut().zip(&gx) {
                *d += s;
            }
            for (d, s) in acc(grads, nodes, *w).iter_mut().zip(&gw) {
                *d += s;
            }
            for (d, s) in acc(grads, nodes, *b).iter_mut().zip(&gb) {
                *d += s;
            }
        }
        Op::Bilinear(x) => {
            let xs = val(*x).shape().to_vec();
            let os = node.value.shape();
            let r = xs.len();
            let (h, w, oh, ow) = (xs[r - 2], xs[r - 1], os[r - 2], os[r - 1]);
            let planes = val(*x).numel() / (h * w);
            let gx = acc(grads, nodes, *x);
            for p in 0..planes {
                for i in 0..oh {
                    let (y0, y1, fy) = corner_coord(i, h, oh);
                    for j in 0..ow {
                        let (x0, x1, fx) = corner_coord(j, w, ow);
                        let gv = g[(p * oh + i) * ow + j];
                        let base = p * h * w;
                        gx[base + y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                        gx[base + y0 * w + x1] += gv * (1.0 - fy) * fx;
                        gx[base + y1 * w + x0] += gv * fy * (1.0 - fx);
                        gx[base + y1 * w + x1] += gv * fy * fx;
                    }
                }
            }
        }
        Op::SelectChannel { x, idx } => {
            let s = val(*x).shape().to_vec();
            let plane = s[2] * s[3];
            let gx = acc(grads, nodes, *x);
            for (n, &c) in idx.iter().enumerate() {
                let base = (n * s[1] + c) * plane;
                for (d, v) in gx[base..base + plane].iter_mut().zip(&g[n * plane..(n + 1) * plane]) {
                    *d += v;
                }
            }
        }
        Op::Sum(x) => {
            for d in acc(grads, nodes, *x).iter_mut() {
                *d += g[0];
            }
        }
        Op::WeightedSum { x, weights } => {
            for (d, w) in acc(grads, nodes, *x).iter_mut().zip(weights) {
                *d += g[0] * w;
            }
        }
        Op::SmoothL1 { x, target } => {
            let xv = val(*x).data();
            for (((d, s), a), b) in acc(grads, nodes, *x).iter_mut().zip(g).zip(xv).zip(target) {
                let diff = a - b;
                *d += s * if diff.abs() < 1.0 { diff } else { diff.signum() };
            }
        }
        Op::SquaredError { x, target } => {
            let xv = val(*x).data();
            for (((d, s), a), b) in acc(grads, nodes, *x).iter_mut().zip(g).zip(xv).zip(target) {
                *d += s * 2.0 * (a - b);
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            weights,
        } => {
            let lv = val(*logits).data();
            let s = val(*logits).shape().to_vec();
            let (bn, c, plane) = (s[0], s[1], s[2] * s[3]);
            let gl = acc(grads, nodes, *logits);
            let mut probs = vec![0.0; c];
            for n in 0..bn {
                for p in 0..plane {
                    let wgt = weights[n * plane + p];
                    if wgt == 0.0 {
                        continue;
                    }
                    let at = |k: usize| lv[(n * c + k) * plane + p];
                    let max = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for (k, pr) in probs.iter_mut().enumerate() {
                        *pr = (at(k) - max).exp();
                        z += *pr;
                    }
                    let label = labels[n * plane + p];
                    for (k, pr) in probs.iter().enumerate() {
                        let onehot = if k == label { 1.0 } else { 0.0 };
                        gl[(n * c + k) * plane + p] += g[0] * wgt * (pr / z - onehot);
                    }
                }
            }
        }
        Op::BceLogits {
            logits,
            target,
            weights,
        } => {
            let lv = val(*logits).data();
            for (((d, x), t), w) in acc(grads, nodes, *logits)
                .iter_mut()
                .zip(lv)
                .zip(target)
                .zip(weights)
            {
                *d += g[0] * w * (sigmoid(*x) - t);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_add_identity_and_hand_values() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(t(&[2], &[0.0, 0.0]));
        let y = tape.matmul_add(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let x = tape.leaf(t(&[1, 2], &[1.0, 1.0]));
        let w = tape.leaf(t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]));
        let b = tape.leaf(t(&[2], &[1.0, 1.0]));
        let y = tape.matmul_add(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0, 9.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]));
        let w = tape.leaf(Tensor::zeros(&[2, 4]));
        let err = tape.matmul_add(x, w, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
    }

    #[test]
    fn conv2d_identity_and_all_ones() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..2 * 9).map(|v| v as f64).collect();
        let x = tape.leaf(t(&[1, 2, 3, 3], &data));
        let w = tape.leaf(t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.conv2d(x, w, b, 0).unwrap();
        assert_eq!(tape.value(y).data(), data.as_slice());

        let x = tape.leaf(Tensor::full(&[1, 3, 5, 5], 1.0));
        let w = tape.leaf(Tensor::full(&[1, 3, 3, 3], 1.0));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.value(tape.conv2d(x, w, b, 1).unwrap());
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        assert_eq!(y.data()[2 * 5 + 2], 27.0);
        // corner sees a 2×2 window per channel
        assert_eq!(y.data()[0], 12.0);
    }

    #[test]
    fn conv2d_rejects_kernel_larger_than_input() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        let w = tape.leaf(Tensor::zeros(&[1, 1, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        assert!(matches!(
            tape.conv2d(x, w, b, 0),
            Err(AutodiffError::Dimension { .. })
        ));
    }

    #[test]
    fn bilinear_resize_contracts() {
        let tape = Tape::new();
        let c = tape.leaf(Tensor::full(&[2, 3, 4], 0.7));
        let y = tape.value(tape.bilinear_resize(c, 5, 9).unwrap());
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-15));

        let data: Vec<f64> = (0..12).map(|v| (v * v) as f64).collect();
        let x = tape.leaf(t(&[1, 3, 4], &data));
        let y = tape.value(tape.bilinear_resize(x, 3, 4).unwrap());
        assert_eq!(y.data(), data.as_slice());

        let one = tape.leaf(t(&[1, 1, 1], &[3.0]));
        let y = tape.value(tape.bilinear_resize(one, 4, 6).unwrap());
        assert!(y.data().iter().all(|&v| v == 3.0));

        assert!(matches!(
            tape.bilinear_resize(one, 0, 2),
            Err(AutodiffError::Config(_))
        ));
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[1, 4, 1, 1]));
        let l = tape.cross_entropy(logits, vec![2], vec![1.0]).unwrap();
        assert!((tape.item(l) - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn smooth_l1_branches() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.5, 2.0, -3.0]));
        let y = tape.value(tape.smooth_l1(x, vec![0.0; 3]).unwrap());
        assert_eq!(y.data(), &[0.125, 1.5, 2.5]);
    }
}
