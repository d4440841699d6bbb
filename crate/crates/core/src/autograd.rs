//! A single-sample reverse-mode tape.
//!
//! Every forward pass records its operations on a fresh [`Tape`]; calling
//! [`Tape::backward`] walks the records in reverse and accumulates parameter
//! gradients into a [`Gradients`] buffer. Values that must not receive
//! gradients (cached feature maps, sampled actions, detached policy states)
//! enter the tape as constants.

use std::collections::HashMap;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{col2im, gemm, im2col, log_softmax, sigmoid, softmax, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    Gap(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Crop {
        x: Var,
        top: usize,
        left: usize,
        size: usize,
    },
    Concat(Var, Var),
    LogSoftmax(Var),
    Softmax(Var),
    Pick {
        x: Var,
        index: usize,
    },
    ScaleBy {
        x: Var,
        s: Var,
    },
    GaussLogProb {
        mean: Var,
        action: Vec<f64>,
        sigma: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A constant copy of `v`'s current value: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Leaf for a stored parameter; repeated requests reuse the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), store.is_trainable(id));
        self.param_vars.insert(id, v);
        v
    }

    /// 2-D convolution of a `C×H×W` input with an `O×C×k×k` kernel and a bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let dims = self.value(x).chw().expect("conv2d input must be C×H×W");
        let wshape = self.value(w).shape().to_vec();
        let (out_ch, k) = (wshape[0], wshape[2]);
        assert_eq!(wshape[1], dims.0, "conv2d channel mismatch");
        let (cols, ho, wo) = im2col(self.value(x).data(), dims, k, stride, pad);
        let n = ho * wo;
        let mut out = vec![0.0; out_ch * n];
        gemm(
            out_ch,
            dims.0 * k * k,
            n,
            self.value(w).data(),
            false,
            &cols,
            false,
            &mut out,
            false,
        );
        let bias = self.value(b).data();
        for (o, row) in out.chunks_mut(n).enumerate() {
            for v in row {
                *v += bias[o];
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::new(vec![out_ch, ho, wo], out).expect("sized");
        let cols = if self.rg(w) { cols } else { Vec::new() };
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            rg,
        )
    }

    /// 2×2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw().expect("pool input must be C×H×W");
        let (ho, wo) = (h / 2, w / 2);
        let input = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        let mut argmax = vec![0; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = (ch * h + oy * 2 + dy) * w + ox * 2 + dx;
                            if input[i] > best {
                                best = input[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (ch * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![c, ho, wo], out).expect("sized"),
            Op::MaxPool2 { x, argmax },
            rg,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.shape(), self.value(b).shape(), "add shape mismatch");
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("sized");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `scale · x + shift` elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(value, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    /// Global average pooling, `C×H×W → C`.
    pub fn gap(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw().expect("gap input must be C×H×W");
        let area = (h * w) as f64;
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|ch| ch.iter().sum::<f64>() / area)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![c], data).expect("sized"), Op::Gap(x), rg)
    }

    /// `W x (+ b)` for a vector `x` and an `O×I` matrix `W`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let wshape = self.value(w).shape().to_vec();
        let (out, inp) = (wshape[0], wshape[1]);
        assert_eq!(self.value(x).len(), inp, "linear input mismatch");
        let mut y = vec![0.0; out];
        gemm(out, inp, 1, self.value(w).data(), false, self.value(x).data(), false, &mut y, false);
        if let Some(b) = b {
            for (yi, bi) in y.iter_mut().zip(self.value(b).data()) {
                *yi += bi;
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::vector(y), Op::Linear { x, w, b }, rg)
    }

    /// Extracts the `C×size×size` window starting at (`top`, `left`).
    pub fn crop(&mut self, x: Var, top: usize, left: usize, size: usize) -> Var {
        let (c, h, w) = self.value(x).chw().expect("crop input must be C×H×W");
        assert!(top + size <= h && left + size <= w, "crop window out of bounds");
        let input = self.value(x).data();
        let mut out = Vec::with_capacity(c * size * size);
        for ch in 0..c {
            for y in top..top + size {
                let row = (ch * h + y) * w;
                out.extend_from_slice(&input[row + left..row + left + size]);
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![c, size, size], out).expect("sized"),
            Op::Crop {
                x,
                top,
                left,
                size,
            },
            rg,
        )
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::vector(data), Op::Concat(a, b), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let value = Tensor::vector(log_softmax(self.value(x).data()));
        let rg = self.rg(x);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let value = Tensor::vector(softmax(self.value(x).data()));
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Selects element `index` as a one-element tensor.
    pub fn pick(&mut self, x: Var, index: usize) -> Var {
        let value = Tensor::scalar(self.value(x).data()[index]);
        let rg = self.rg(x);
        self.push(value, Op::Pick { x, index }, rg)
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let factor = self.value(s).item();
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x) || self.rg(s);
        self.push(value, Op::ScaleBy { x, s }, rg)
    }

    /// Log-density of `action` under an isotropic normal centred at `mean`.
    pub fn gauss_log_prob(&mut self, mean: Var, action: &[f64], sigma: f64) -> Var {
        let mu = self.value(mean).data();
        assert_eq!(mu.len(), action.len());
        let value = gaussian_log_density(mu, action, sigma);
        let rg = self.rg(mean);
        self.push(
            Tensor::scalar(value),
            Op::GaussLogProb {
                mean,
                action: action.to_vec(),
                sigma,
            },
            rg,
        )
    }

    /// Back-propagates from the scalar `loss`, adding parameter gradients into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::scalar(1.0));

        fn acc(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut adj[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let gd = g.data();
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => grads.accumulate(*id, &g),
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    cols,
                } => {
                    let dims = self.value(*x).chw().expect("checked in forward");
                    let wv = self.value(*w);
                    let (out_ch, k) = (wv.shape()[0], wv.shape()[2]);
                    let n = gd.len() / out_ch;
                    let ckk = dims.0 * k * k;
                    if self.rg(*b) {
                        let db: Vec<f64> = gd.chunks(n).map(|r| r.iter().sum()).collect();
                        acc(&mut adj, *b, Tensor::vector(db));
                    }
                    if self.rg(*w) {
                        let mut dw = vec![0.0; out_ch * ckk];
                        gemm(out_ch, n, ckk, gd, false, cols, true, &mut dw, false);
                        acc(&mut adj, *w, Tensor::new(wv.shape().to_vec(), dw).expect("sized"));
                    }
                    if self.rg(*x) {
                        let mut dcols = vec![0.0; ckk * n];
                        gemm(ckk, out_ch, n, wv.data(), true, gd, false, &mut dcols, false);
                        let mut dx = vec![0.0; dims.0 * dims.1 * dims.2];
                        col2im(&dcols, dims, k, *stride, *pad, &mut dx);
                        acc(&mut adj, *x, Tensor::new(vec![dims.0, dims.1, dims.2], dx).expect("sized"));
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    let d = dx.data_mut();
                    for (o, &src) in argmax.iter().enumerate() {
                        d[src] += gd[o];
                    }
                    acc(&mut adj, *x, dx);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let data = gd.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                    acc(&mut adj, *x, with_shape(&g, data));
                }
                Op::Sigmoid(x) => {
                    let yv = node.value.data();
                    let data = gd.iter().zip(yv).map(|(g, y)| g * y * (1.0 - y)).collect();
                    acc(&mut adj, *x, with_shape(&g, data));
                }
                Op::Tanh(x) => {
                    let yv = node.value.data();
                    let data = gd.iter().zip(yv).map(|(g, y)| g * (1.0 - y * y)).collect();
                    acc(&mut adj, *x, with_shape(&g, data));
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut adj, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut adj, *b, g.clone());
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let bv = self.value(*b).data();
                        let data = gd.iter().zip(bv).map(|(g, y)| g * y).collect();
                        acc(&mut adj, *a, with_shape(&g, data));
                    }
                    if self.rg(*b) {
                        let av = self.value(*a).data();
                        let data = gd.iter().zip(av).map(|(g, y)| g * y).collect();
                        acc(&mut adj, *b, with_shape(&g, data));
                    }
                }
                Op::Affine { x, scale } => {
                    acc(&mut adj, *x, g.map(|v| v * scale));
                }
                Op::Gap(x) => {
                    let (c, h, w) = self.value(*x).chw().expect("checked in forward");
                    let area = (h * w) as f64;
                    let mut data = Vec::with_capacity(c * h * w);
                    for gc in gd {
                        data.extend(std::iter::repeat_n(gc / area, h * w));
                    }
                    acc(&mut adj, *x, Tensor::new(vec![c, h, w], data).expect("sized"));
                }
                Op::Linear { x, w, b } => {
                    let wv = self.value(*w);
                    let (out, inp) = (wv.shape()[0], wv.shape()[1]);
                    if let Some(b) = b {
                        if self.rg(*b) {
                            acc(&mut adj, *b, g.clone());
                        }
                    }
                    if self.rg(*w) {
                        let mut dw = vec![0.0; out * inp];
                        gemm(out, 1, inp, gd, false, self.value(*x).data(), false, &mut dw, false);
                        acc(&mut adj, *w, Tensor::new(vec![out, inp], dw).expect("sized"));
                    }
                    if self.rg(*x) {
                        let mut dx = vec![0.0; inp];
                        gemm(inp, out, 1, wv.data(), true, gd, false, &mut dx, false);
                        acc(&mut adj, *x, with_shape(self.value(*x), dx));
                    }
                }
                Op::Crop {
                    x,
                    top,
                    left,
                    size,
                } => {
                    let (c, h, w) = self.value(*x).chw().expect("checked in forward");
                    let mut dx = Tensor::zeros(&[c, h, w]);
                    let d = dx.data_mut();
                    let mut k = 0;
                    for ch in 0..c {
                        for y in *top..*top + *size {
                            let row = (ch * h + y) * w;
                            for xx in *left..*left + *size {
                                d[row + xx] += gd[k];
                                k += 1;
                            }
                        }
                    }
                    acc(&mut adj, *x, dx);
                }
                Op::Concat(a, b) => {
                    let na = self.value(*a).len();
                    if self.rg(*a) {
                        acc(&mut adj, *a, with_shape(self.value(*a), gd[..na].to_vec()));
                    }
                    if self.rg(*b) {
                        acc(&mut adj, *b, with_shape(self.value(*b), gd[na..].to_vec()));
                    }
                }
                Op::LogSoftmax(x) => {
                    let total: f64 = gd.iter().sum();
                    let data = gd
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, ls)| g - ls.exp() * total)
                        .collect();
                    acc(&mut adj, *x, Tensor::vector(data));
                }
                Op::Softmax(x) => {
                    let s = node.value.data();
                    let dot: f64 = gd.iter().zip(s).map(|(g, s)| g * s).sum();
                    let data = gd.iter().zip(s).map(|(g, s)| s * (g - dot)).collect();
                    acc(&mut adj, *x, Tensor::vector(data));
                }
                Op::Pick { x, index } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    dx.data_mut()[*index] = gd[0];
                    acc(&mut adj, *x, dx);
                }
                Op::ScaleBy { x, s } => {
                    let factor = self.value(*s).item();
                    if self.rg(*x) {
                        acc(&mut adj, *x, g.map(|v| v * factor));
                    }
                    if self.rg(*s) {
                        let dot: f64 = gd.iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                        acc(&mut adj, *s, Tensor::scalar(dot));
                    }
                }
                Op::GaussLogProb {
                    mean,
                    action,
                    sigma,
                } => {
                    let mu = self.value(*mean).data();
                    let var = sigma * sigma;
                    let data = action.iter().zip(mu).map(|(a, m)| gd[0] * (a - m) / var).collect();
                    acc(&mut adj, *mean, with_shape(self.value(*mean), data));
                }
            }
        }
    }
}

fn with_shape(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("gradient matches value shape")
}

/// Log-density of an isotropic normal with standard deviation `sigma`.
pub fn gaussian_log_density(mean: &[f64], x: &[f64], sigma: f64) -> f64 {
    let norm = (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    mean.iter()
        .zip(x)
        .map(|(m, v)| -(v - m) * (v - m) / (2.0 * sigma * sigma) - norm)
        .sum()
}
