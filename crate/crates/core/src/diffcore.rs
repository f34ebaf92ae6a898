//! Tape-based reverse-mode differentiation over real arrays.
//!
//! Image tensors are `[C, H, W]` row-major. Scalars have shape `[]`.
//! A tape records nodes in creation order; [`Tape::backward`] walks them in
//! reverse once.

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        k: usize,
        cols: Vec<f64>,
    },
    LeakyRelu(NodeId, f64),
    InstanceNorm {
        x: NodeId,
        inv_std: Vec<f64>,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Upsample(NodeId),
    Concat(Vec<NodeId>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    Abs(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    BoxFilter {
        x: NodeId,
        k: usize,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Percentile {
        x: NodeId,
        taps: [(usize, f64); 2],
    },
    ScaleBy {
        x: NodeId,
        s: NodeId,
    },
    DivBy {
        x: NodeId,
        s: NodeId,
    },
    Reshape(NodeId),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    leaf: Vec<bool>,
}

impl Gradients {
    /// Gradient of a node that requires grad, `None` otherwise.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Number of leaves holding a gradient entry.
    pub fn leaf_entries(&self) -> usize {
        self.grads
            .iter()
            .zip(&self.leaf)
            .filter(|(g, &l)| l && g.is_some())
            .count()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
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

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> NodeId {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(
        &mut self,
        value: Vec<f64>,
        shape: &[usize],
        requires_grad: bool,
    ) -> Result<NodeId> {
        if numel(shape) != value.len() {
            return Err(Error::shape(
                "leaf",
                format!("{} values for shape {shape:?}", value.len()),
            ));
        }
        Ok(self.push(shape.to_vec(), value, Op::Leaf, requires_grad))
    }

    pub fn param(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<NodeId> {
        self.leaf(value, shape, true)
    }

    pub fn constant(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<NodeId> {
        self.leaf(value, shape, false)
    }

    fn chw(&self, id: NodeId, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape(id) {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(Error::shape(op, format!("expected [C, H, W], got {s:?}"))),
        }
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// Stride-1 convolution with zero "same" padding; `w` is
    /// `[C_out, C_in, k, k]` with odd `k`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (cin, h, wd) = self.chw(x, "conv2d")?;
        let (cout, k) = match self.shape(w) {
            &[co, ci, k1, k2] if ci == cin && k1 == k2 && k1 % 2 == 1 => (co, k1),
            s => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {s:?} incompatible with input channels {cin} (need [C_out, {cin}, k, k], k odd)"),
                ))
            }
        };
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} vs {cout} output channels", self.shape(b)),
                ));
            }
        }
        let hw = h * wd;
        let kk = cin * k * k;
        let p = (k / 2) as isize;
        let xv = &self.nodes[x.0].value;
        let mut cols = vec![0.0; kk * hw];
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - p;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &xv[ci * hw + sy as usize * wd..][..wd];
                        for xx in 0..wd {
                            let sx = xx as isize + kx as isize - p;
                            if sx >= 0 && sx < wd as isize {
                                row[y * wd + xx] = src[sx as usize];
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; cout * hw];
        if let Some(b) = b {
            let bv = &self.nodes[b.0].value;
            for (c, chunk) in out.chunks_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bv[c]);
            }
        }
        gemm(
            &self.nodes[w.0].value,
            false,
            &cols,
            false,
            &mut out,
            cout,
            kk,
            hw,
            1.0,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![cout, h, wd], out, Op::Conv2d { x, w, b, k, cols }, rg))
    }

    pub fn leaky_relu(&mut self, x: NodeId) -> NodeId {
        self.leaky_relu_slope(x, LEAKY_SLOPE)
    }

    pub fn leaky_relu_slope(&mut self, x: NodeId, slope: f64) -> NodeId {
        let v = self
            .value(x)
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, v, Op::LeakyRelu(x, slope), rg)
    }

    /// Per-channel normalization to zero mean, unit variance (no affine).
    pub fn instance_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.chw(x, "instance_norm")?;
        let hw = (h * w) as f64;
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let src = &xv[ch * h * w..(ch + 1) * h * w];
            let mean = src.iter().sum::<f64>() / hw;
            let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hw;
            let is = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
            for (o, v) in out[ch * h * w..(ch + 1) * h * w].iter_mut().zip(src) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, h, w], out, Op::InstanceNorm { x, inv_std }, rg))
    }

    /// 2×2 max pooling; ties resolve to the lowest flat input index.
    pub fn max_pool2d(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.chw(x, "max_pool2d")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "max_pool2d",
                format!("spatial size {h}×{w} not divisible by 2"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = ch * h * w + 2 * y * w + 2 * xx;
                    let mut best = base;
                    for idx in [base + 1, base + w, base + w + 1] {
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    let o = ch * oh * ow + y * ow + xx;
                    out[o] = xv[best];
                    argmax[o] = best;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, oh, ow], out, Op::MaxPool { x, argmax }, rg))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.chw(x, "upsample")?;
        let xv = self.value(x);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[ch * oh * ow + y * ow + xx] = xv[ch * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, oh, ow], out, Op::Upsample(x), rg))
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let (_, h, w) = self.chw(parts[0], "concat")?;
        let mut c_total = 0;
        for &p in parts {
            let (c, ph, pw) = self.chw(p, "concat")?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape(
                    "concat",
                    format!("spatial {ph}×{pw} vs {h}×{w}"),
                ));
            }
            c_total += c;
        }
        let mut out = Vec::with_capacity(c_total * h * w);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![c_total, h, w], out, Op::Concat(parts.to_vec()), rg))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        rec: Op,
    ) -> Result<NodeId> {
        self.same_shape(a, b, op)?;
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, v, rec, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, rec: Op) -> NodeId {
        let v = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, v, rec, rg)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |v| v * c, Op::MulScalar(x, c))
    }

    /// Elementwise `|x|`; subgradient 0 at 0.
    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(vec![], vec![s], Op::Mean(x), rg)
    }

    /// Mean over every `k × k` window fully inside each channel.
    pub fn box_filter_valid(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let (c, h, w) = self.chw(x, "box_filter")?;
        if k == 0 || k > h || k > w {
            return Err(Error::shape(
                "box_filter",
                format!("window {k} larger than image {h}×{w}"),
            ));
        }
        let (oh, ow) = (h - k + 1, w - k + 1);
        let inv = 1.0 / (k * k) as f64;
        let xv = self.value(x);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let src = &xv[ch * h * w..];
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        let row = &src[(y + dy) * w + xx..][..k];
                        acc += row.iter().sum::<f64>();
                    }
                    out[ch * oh * ow + y * ow + xx] = acc * inv;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, oh, ow], out, Op::BoxFilter { x, k }, rg))
    }

    /// `w · x + b` for `x: [n]`, `w: [m, n]`, `b: [m]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let n = match self.shape(x) {
            &[n] => n,
            s => {
                return Err(Error::shape(
                    "linear",
                    format!("input must be a vector, got {s:?}"),
                ))
            }
        };
        let m = match self.shape(w) {
            &[m, nn] if nn == n => m,
            s => {
                return Err(Error::shape(
                    "linear",
                    format!("weight {s:?} vs input length {n}"),
                ))
            }
        };
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} vs {m} outputs", self.shape(b)),
                ));
            }
        }
        let mut out = match b {
            Some(b) => self.value(b).to_vec(),
            None => vec![0.0; m],
        };
        let (wv, xv) = (self.value(w), self.value(x));
        for (i, o) in out.iter_mut().enumerate() {
            *o += wv[i * n..(i + 1) * n]
                .iter()
                .zip(xv)
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![m], out, Op::Linear { x, w, b }, rg))
    }

    /// Linearly interpolated `q`-th percentile (`q` in `[0, 100]`);
    /// differentiable through the interpolation weights.
    pub fn percentile(&mut self, x: NodeId, q: f64) -> Result<NodeId> {
        if !(0.0..=100.0).contains(&q) {
            return Err(Error::invalid(format!("percentile {q} outside [0, 100]")));
        }
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::shape("percentile", "empty input"));
        }
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
        let pos = q / 100.0 * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        let taps = [(order[lo], 1.0 - frac), (order[hi], frac)];
        let val = taps[0].1 * v[taps[0].0] + taps[1].1 * v[taps[1].0];
        let rg = self.rg(x);
        Ok(self.push(vec![], vec![val], Op::Percentile { x, taps }, rg))
    }

    fn check_scalar(&self, s: NodeId, op: &'static str) -> Result<()> {
        if self.value(s).len() != 1 {
            return Err(Error::shape(
                op,
                format!("expected a scalar, got {:?}", self.shape(s)),
            ));
        }
        Ok(())
    }

    /// `x · s` for a scalar node `s`.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.check_scalar(s, "scale_by")?;
        let sv = self.scalar(s);
        let v = self.value(x).iter().map(|&v| v * sv).collect();
        let rg = self.rg(x) || self.rg(s);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, v, Op::ScaleBy { x, s }, rg))
    }

    /// `x / s` for a scalar node `s`.
    pub fn div_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.check_scalar(s, "div_by")?;
        let sv = self.scalar(s);
        let v = self.value(x).iter().map(|&v| v / sv).collect();
        let rg = self.rg(x) || self.rg(s);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, v, Op::DivBy { x, s }, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let v = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), v, Op::Reshape(x), rg))
    }

    /// Reverse sweep from a scalar `root`. A tape supports one backward pass.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(root).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got shape {:?}", self.shape(root)),
            ));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let leaf = self
            .nodes
            .iter()
            .map(|nd| matches!(nd.op, Op::Leaf))
            .collect();
        Ok(Gradients { grads, leaf })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: NodeId) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let len = self.nodes[id.0].value.len();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, k, cols } => {
                let (cout, h, wd) = (node.shape[0], node.shape[1], node.shape[2]);
                let cin = self.shape(*x)[0];
                let hw = h * wd;
                let kk = cin * k * k;
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b) {
                        for (c, chunk) in g.chunks(hw).enumerate() {
                            gb[c] += chunk.iter().sum::<f64>();
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    gemm(g, false, cols, true, gw, cout, hw, kk, 1.0);
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; kk * hw];
                    gemm(
                        &self.nodes[w.0].value,
                        true,
                        g,
                        false,
                        &mut dcols,
                        kk,
                        cout,
                        hw,
                        0.0,
                    );
                    let gx = self.acc(grads, *x).expect("requires grad");
                    let p = (k / 2) as isize;
                    for ci in 0..cin {
                        for ky in 0..*k {
                            for kx in 0..*k {
                                let row = &dcols[((ci * k + ky) * k + kx) * hw..][..hw];
                                for y in 0..h {
                                    let sy = y as isize + ky as isize - p;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    let dst = &mut gx[ci * hw + sy as usize * wd..][..wd];
                                    for xx in 0..wd {
                                        let sx = xx as isize + kx as isize - p;
                                        if sx >= 0 && sx < wd as isize {
                                            dst[sx as usize] += row[y * wd + xx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = &self.nodes[x.0].value;
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, &gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *o += if v > 0.0 { gi } else { slope * gi };
                    }
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                let hw = node.shape[1] * node.shape[2];
                let y = &node.value;
                if let Some(gx) = self.acc(grads, *x) {
                    for (c, &is) in inv_std.iter().enumerate() {
                        let r = c * hw..(c + 1) * hw;
                        let gy = &g[r.clone()];
                        let yc = &y[r.clone()];
                        let mg = gy.iter().sum::<f64>() / hw as f64;
                        let mgy = gy.iter().zip(yc).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
                        for ((o, &gi), &yi) in gx[r].iter_mut().zip(gy).zip(yc) {
                            *o += is * (gi - mg - yi * mgy);
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (&gi, &idx) in g.iter().zip(argmax) {
                        gx[idx] += gi;
                    }
                }
            }
            Op::Upsample(x) => {
                let (c, oh, ow) = (node.shape[0], node.shape[1], node.shape[2]);
                let (h, w) = (oh / 2, ow / 2);
                if let Some(gx) = self.acc(grads, *x) {
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                gx[ch * h * w + (y / 2) * w + xx / 2] +=
                                    g[ch * oh * ow + y * ow + xx];
                            }
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(gp) = self.acc(grads, *p) {
                        for (o, &gi) in gp.iter_mut().zip(&g[off..off + len]) {
                            *o += gi;
                        }
                    }
                    off += len;
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, &gi)| *o += gi);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(o, &gi)| *o += sign * gi);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gi), &v) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * v;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, &gi), &v) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * v;
                    }
                }
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b.0].value;
                let out = &node.value;
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gi), &v) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi / v;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (((o, &gi), &v), &q) in gb.iter_mut().zip(g).zip(bv).zip(out) {
                        *o -= gi * q / v;
                    }
                }
            }
            Op::AddScalar(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, &gi)| *o += gi);
                }
            }
            Op::MulScalar(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, &gi)| *o += c * gi);
                }
            }
            Op::Abs(x) => {
                let xv = &self.nodes[x.0].value;
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, &gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *o += gi;
                        } else if v < 0.0 {
                            *o -= gi;
                        }
                    }
                }
            }
            Op::Square(x) => {
                let xv = &self.nodes[x.0].value;
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, &gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *o += 2.0 * v * gi;
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                let len = self.nodes[x.0].value.len();
                let scale = if matches!(node.op, Op::Mean(_)) {
                    g[0] / len as f64
                } else {
                    g[0]
                };
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|o| *o += scale);
                }
            }
            Op::BoxFilter { x, k } => {
                let (c, oh, ow) = (node.shape[0], node.shape[1], node.shape[2]);
                let (h, w) = (oh + k - 1, ow + k - 1);
                let inv = 1.0 / (k * k) as f64;
                if let Some(gx) = self.acc(grads, *x) {
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let gi = g[ch * oh * ow + y * ow + xx] * inv;
                                for dy in 0..*k {
                                    let row = &mut gx[ch * h * w + (y + dy) * w + xx..][..*k];
                                    row.iter_mut().for_each(|o| *o += gi);
                                }
                            }
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let n = self.nodes[x.0].value.len();
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b) {
                        gb.iter_mut().zip(g).for_each(|(o, &gi)| *o += gi);
                    }
                }
                let xv = &self.nodes[x.0].value;
                if let Some(gw) = self.acc(grads, *w) {
                    for (i, &gi) in g.iter().enumerate() {
                        for (o, &v) in gw[i * n..(i + 1) * n].iter_mut().zip(xv) {
                            *o += gi * v;
                        }
                    }
                }
                let wv = &self.nodes[w.0].value;
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &gi) in g.iter().enumerate() {
                        for (o, &v) in gx.iter_mut().zip(&wv[i * n..(i + 1) * n]) {
                            *o += gi * v;
                        }
                    }
                }
            }
            Op::Percentile { x, taps } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for &(idx, wt) in taps {
                        gx[idx] += wt * g[0];
                    }
                }
            }
            Op::ScaleBy { x, s } => {
                let sv = self.nodes[s.0].value[0];
                let xv = &self.nodes[x.0].value;
                if let Some(gs) = self.acc(grads, *s) {
                    gs[0] += g.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
                }
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, &gi)| *o += gi * sv);
                }
            }
            Op::DivBy { x, s } => {
                let sv = self.nodes[s.0].value[0];
                let out = &node.value;
                if let Some(gs) = self.acc(grads, *s) {
                    gs[0] -= g.iter().zip(out).map(|(a, b)| a * b).sum::<f64>() / sv;
                }
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, &gi)| *o += gi / sv);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, &gi)| *o += gi);
                }
            }
        }
    }
}

/// `c = op(a) · op(b) + beta · c` with `op(a)` of shape `m × k` and
/// `op(b)` of shape `k × n`; all operands row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    beta: f64,
) {
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides describe in-bounds views of `a` (m×k), `b` (k×n)
    // and `c` (m×n), whose lengths the callers guarantee.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;

    /// Max relative error between backward and central differences of the
    /// scalar built by `f` from the given leaves.
    pub fn check<F>(leaves: &[(Vec<f64>, Vec<usize>)], f: F, h: f64) -> f64
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        let build = |vals: &[Vec<f64>]| -> (Tape, Vec<NodeId>, NodeId) {
            let mut t = Tape::new();
            let ids: Vec<NodeId> = vals
                .iter()
                .zip(leaves)
                .map(|(v, (_, s))| t.param(v.clone(), s).unwrap())
                .collect();
            let out = f(&mut t, &ids);
            (t, ids, out)
        };
        let base: Vec<Vec<f64>> = leaves.iter().map(|(v, _)| v.clone()).collect();
        let (mut t, ids, out) = build(&base);
        let g = t.backward(out).unwrap();
        let mut worst: f64 = 0.0;
        for (li, id) in ids.iter().enumerate() {
            let an = g
                .get(*id)
                .map(|v| v.to_vec())
                .unwrap_or_else(|| vec![0.0; base[li].len()]);
            for e in 0..base[li].len() {
                let mut up = base.clone();
                up[li][e] += h;
                let mut dn = base.clone();
                dn[li][e] -= h;
                let (tu, _, ou) = build(&up);
                let (td, _, od) = build(&dn);
                let fd = (tu.scalar(ou) - td.scalar(od)) / (2.0 * h);
                let err = (fd - an[e]).abs() / fd.abs().max(an[e].abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::check;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rv(n: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    /// Random weighted sum to turn any tensor into a scalar.
    fn project(t: &mut Tape, x: NodeId, seed: u64) -> NodeId {
        let shape = t.shape(x).to_vec();
        let w = t.constant(rv(t.value(x).len(), seed), &shape).unwrap();
        let p = t.mul(x, w).unwrap();
        t.sum(p)
    }

    const TOL: f64 = 1e-4;

    #[test]
    fn identity_conv() {
        let mut t = Tape::new();
        let x = t.constant(rv(2 * 16, 1), &[2, 4, 4]).unwrap();
        let w = t.constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 2, 1, 1]).unwrap();
        let y = t.conv2d(x, w, None).unwrap();
        assert_eq!(t.value(y), t.value(x));
        let bad = t.constant(vec![0.0; 9], &[1, 1, 3, 3]).unwrap();
        assert!(matches!(
            t.conv2d(x, bad, None),
            Err(Error::Shape { op: "conv2d", .. })
        ));
    }

    #[test]
    fn conv_grad() {
        let e = check(
            &[
                (rv(2 * 16, 2), vec![2, 4, 4]),
                (rv(3 * 2 * 9, 3), vec![3, 2, 3, 3]),
                (rv(3, 4), vec![3]),
            ],
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], Some(ids[2])).unwrap();
                project(t, y, 5)
            },
            1e-6,
        );
        assert!(e <= TOL, "{e}");
    }

    #[test]
    fn leaky_relu_grad() {
        let e = check(
            &[(rv(16, 6), vec![1, 4, 4])],
            |t, ids| {
                let y = t.leaky_relu(ids[0]);
                project(t, y, 7)
            },
            1e-6,
        );
        assert!(e <= TOL, "{e}");
    }

    #[test]
    fn instance_norm_grad() {
        let e = check(
            &[(rv(32, 8), vec![2, 4, 4])],
            |t, ids| {
                let y = t.instance_norm(ids[0]).unwrap();
                project(t, y, 9)
            },
            1e-6,
        );
        assert!(e <= TOL, "{e}");
    }

    #[test]
    fn pool_and_upsample_grad() {
        let e = check(
            &[(rv(32, 10), vec![2, 4, 4])],
            |t, ids| {
                let y = t.max_pool2d(ids[0]).unwrap();
                let z = t.upsample2(y).unwrap();
                project(t, z, 11)
            },
            1e-6,
        );
        assert!(e <= TOL, "{e}");
    }

    #[test]
    fn max_pool_constant_and_ties() {
        let mut t = Tape::new();
        let x = t.param(vec![2.0; 16], &[1, 4, 4]).unwrap();
        let y = t.max_pool2d(x).unwrap();
        assert_eq!(t.value(y), &[2.0; 4]);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        let gx = g.get(x).unwrap();
        let hot: Vec<usize> = (0..16).filter(|&i| gx[i] != 0.0).collect();
        assert_eq!(hot, vec![0, 2, 8, 10]);
    }

    #[test]
    fn concat_and_elementwise_grads() {
        let e = check(
            &[(rv(16, 12), vec![1, 4, 4]), (rv(16, 13), vec![1, 4, 4])],
            |t, ids| {
                let c = t.concat(&[ids[0], ids[1]]).unwrap();
                let a = t.add(ids[0], ids[1]).unwrap();
                let s = t.sub(ids[0], ids[1]).unwrap();
                let m = t.mul(a, s).unwrap();
                let sq = t.square(m);
                let ab = t.abs(s);
                let ab = t.mul_scalar(ab, 0.7);
                let z = t.add(sq, ab).unwrap();
                let z = t.add_scalar(z, 3.0);
                let p1 = project(t, c, 14);
                let p2 = t.mean(z);

                t.add(p1, p2).unwrap()
            },
            1e-6,
        );
        assert!(e <= TOL, "{e}");
    }

    #[test]
    fn div_box_linear_grads() {
        let den: Vec<f64> = rv(36, 15).into_iter().map(|v| 1.5 + v).collect();
        let e = check(
            &[(rv(36, 16), vec![1, 6, 6]), (den, vec![1, 6, 6])],
            |t, ids| {
                let q = t.div(ids[0], ids[1]).unwrap();
                let b = t.box_filter_valid(q, 3).unwrap();
                project(t, b, 17)
            },
            1e-6,
        );
        assert!(e <= TOL, "{e}");
        let e = check(
            &[
                (rv(4, 18), vec![4]),
                (rv(12, 19), vec![3, 4]),
                (rv(3, 20), vec![3]),
            ],
            |t, ids| {
                let y = t.linear(ids[0], ids[1], Some(ids[2])).unwrap();
                project(t, y, 21)
            },
            1e-6,
        );
        assert!(e <= TOL, "{e}");
    }

    #[test]
    fn scalar_node_ops_and_percentile() {
        let e = check(
            &[(rv(16, 22), vec![1, 4, 4]), (vec![1.7], vec![])],
            |t, ids| {
                let p = t.percentile(ids[0], 90.0).unwrap();
                let a = t.div_by(ids[0], p).unwrap();
                let b = t.scale_by(a, ids[1]).unwrap();
                let r = t.reshape(b, &[16]).unwrap();
                project(t, r, 23)
            },
            1e-7,
        );
        assert!(e <= TOL, "{e}");
        let mut t = Tape::new();
        let x = t.constant((0..11).map(f64::from).collect(), &[11]).unwrap();
        let p = t.percentile(x, 99.0).unwrap();
        assert!((t.scalar(p) - 9.9).abs() < 1e-12);
    }

    #[test]
    fn backward_basics() {
        let xv = rv(8, 24);
        let mut t = Tape::new();
        let x = t.param(xv.clone(), &[8]).unwrap();
        let s = t.sum(x);
        assert_eq!(t.backward(s).unwrap().get(x).unwrap(), &[1.0; 8]);

        let mut t = Tape::new();
        let x = t.param(xv.clone(), &[8]).unwrap();
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        for (a, b) in g.get(x).unwrap().iter().zip(&xv) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }
        assert!(matches!(t.backward(s), Err(Error::TapeConsumed)));

        let mut t = Tape::new();
        let x = t.param(xv, &[8]).unwrap();
        assert!(matches!(t.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn no_grad_leaves_get_no_entries() {
        let mut t = Tape::new();
        let x = t.param(rv(4, 25), &[4]).unwrap();
        let c = t.constant(rv(4, 26), &[4]).unwrap();
        let m = t.mul(x, c).unwrap();
        let s = t.sum(m);
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(x).is_some());
        assert_eq!(g.leaf_entries(), 1);
    }

    #[test]
    fn chained_conv_relu_sum() {
        let e = check(
            &[(rv(16, 27), vec![1, 4, 4]), (rv(18, 28), vec![2, 1, 3, 3])],
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], None).unwrap();
                let r = t.leaky_relu(y);
                t.sum(r)
            },
            1e-6,
        );
        assert!(e <= TOL, "{e}");
    }

    #[test]
    fn accumulation_order_independent() {
        let xv = rv(16, 29);
        let run = |flip: bool| -> Vec<f64> {
            let mut t = Tape::new();
            let x = t.param(xv.clone(), &[1, 4, 4]).unwrap();
            let (a, b) = if flip {
                let b = t.square(x);
                let a = t.abs(x);
                (a, b)
            } else {
                let a = t.abs(x);
                let b = t.square(x);
                (a, b)
            };
            let s = t.add(a, b).unwrap();
            let r = t.sum(s);
            t.backward(r).unwrap().get(x).unwrap().to_vec()
        };
        let (g1, g2) = (run(false), run(true));
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.constant(vec![0.0; 4], &[4]).unwrap();
        let b = t.constant(vec![0.0; 3], &[3]).unwrap();
        assert!(matches!(t.add(a, b), Err(Error::Shape { op: "add", .. })));
        assert!(matches!(
            t.max_pool2d(a),
            Err(Error::Shape {
                op: "max_pool2d",
                ..
            })
        ));
        let c = t.constant(vec![0.0; 9], &[1, 3, 3]).unwrap();
        assert!(matches!(t.max_pool2d(c), Err(Error::Shape { .. })));
        assert!(matches!(t.box_filter_valid(c, 4), Err(Error::Shape { .. })));
    }
}
