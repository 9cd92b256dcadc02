//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Every operation appends a node to the [`Graph`], so node ids are already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//! Gradients of one backward call are computed in scratch buffers and then
//! added to each node's persistent gradient, so repeated calls accumulate.

use crate::error::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NnError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NnError::Shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sum(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        pad: usize,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(NodeId),
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse {
        pred: NodeId,
        target: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input or parameter node.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Overwrites a leaf's value in place (used by finite-difference checks).
    pub fn set_leaf_value(&mut self, id: NodeId, value: Tensor) -> Result<(), NnError> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) || node.value.shape != value.shape {
            return Err(NnError::Shape("set_leaf_value needs a leaf of equal shape".into()));
        }
        node.value = value;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let grad = vec![0.0; value.numel()];
        self.nodes.push(Node {
            value,
            grad,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(NnError::Shape(format!(
                "add of {:?} and {:?}",
                va.shape, vb.shape
            )));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data.iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| x.max(0.0)).collect(),
        };
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| x.tanh()).collect(),
        };
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    /// Stride-1 convolution, `input [N,C,H,W]`, `weight [O,C,K,K]`,
    /// `bias [O]`, zero padding `pad` on every side.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        pad: usize,
    ) -> Result<NodeId, NnError> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let [n, c, h, wd] = dims4(x, "conv2d input")?;
        let [o, wc, k, k2] = dims4(w, "conv2d weight")?;
        if wc != c || k != k2 || b.shape != [o] || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(NnError::Shape(format!(
                "conv2d input {:?}, weight {:?}, bias {:?}, pad {pad}",
                x.shape, w.shape, b.shape
            )));
        }
        let geo = ConvGeometry::new(h, wd, k, pad);
        let mut out = vec![0.0; n * o * geo.oh * geo.ow];
        let (xd, wdata, bd) = (&x.data, &w.data, &b.data);
        for ni in 0..n {
            for oi in 0..o {
                let plane = &mut out[(ni * o + oi) * geo.oh * geo.ow..][..geo.oh * geo.ow];
                plane.iter_mut().for_each(|v| *v = bd[oi]);
                for ci in 0..c {
                    let src = &xd[(ni * c + ci) * h * wd..][..h * wd];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = wdata[((oi * c + ci) * k + ky) * k + kx];
                            let (ys, xs) = (geo.range(ky, true), geo.range(kx, false));
                            for y in ys.clone() {
                                let iy = y + ky - pad;
                                let orow = &mut plane[y * geo.ow..][xs.clone()];
                                let irow = &src[iy * wd + xs.start + kx - pad..][..orow.len()];
                                for (ov, iv) in orow.iter_mut().zip(irow) {
                                    *ov += wv * iv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor {
            shape: vec![n, o, geo.oh, geo.ow],
            data: out,
        };
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
            },
            rg,
        ))
    }

    /// 2×2 max pooling with stride 2; spatial sides must be even.
    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId, NnError> {
        let x = self.value(input);
        let [n, c, h, w] = dims4(x, "max_pool2 input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(NnError::Shape(format!("max_pool2 needs even sides, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                        if x.data[idx] > x.data[best] {
                            best = idx;
                        }
                    }
                    out.push(x.data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor {
            shape: vec![n, c, oh, ow],
            data: out,
        };
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, rg))
    }

    /// `[N,C,H,W] → [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId, NnError> {
        let x = self.value(input);
        let [n, c, h, w] = dims4(x, "global_avg_pool input")?;
        let area = (h * w) as f64;
        let data = x
            .data
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / area)
            .collect();
        let value = Tensor {
            shape: vec![n, c],
            data,
        };
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::GlobalAvgPool(input), rg))
    }

    /// `input [N,I] · weight[O,I]ᵀ + bias[O]`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId, NnError> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (n, i) = dims2(x, "linear input")?;
        let (o, wi) = dims2(w, "linear weight")?;
        if wi != i || b.shape != [o] {
            return Err(NnError::Shape(format!(
                "linear input {:?}, weight {:?}, bias {:?}",
                x.shape, w.shape, b.shape
            )));
        }
        let mut out = Vec::with_capacity(n * o);
        for row in x.data.chunks(i) {
            for (wrow, bv) in w.data.chunks(i).zip(&b.data) {
                out.push(bv + dot(row, wrow));
            }
        }
        let value = Tensor {
            shape: vec![n, o],
            data: out,
        };
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    /// Mean softmax cross entropy of `logits [N,K]` against class indices.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, NnError> {
        let l = self.value(logits);
        let (n, k) = dims2(l, "cross_entropy logits")?;
        if labels.len() != n || labels.iter().any(|&y| y >= k) || n == 0 {
            return Err(NnError::Shape(format!(
                "cross_entropy with {n}x{k} logits and labels {labels:?}"
            )));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut total = 0.0;
        for (row, &y) in l.data.chunks(k).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[y];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let value = Tensor::scalar(total / n as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean squared error of `pred` (any shape with N elements) against `target`.
    pub fn mse(&mut self, pred: NodeId, target: &[f64]) -> Result<NodeId, NnError> {
        let p = self.value(pred);
        if p.numel() != target.len() || target.is_empty() {
            return Err(NnError::Shape(format!(
                "mse of {:?} against {} targets",
                p.shape,
                target.len()
            )));
        }
        let s: f64 = p
            .data
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let value = Tensor::scalar(s / target.len() as f64);
        let rg = self.any_grad(&[pred]);
        Ok(self.push(
            value,
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node; returns the number of nodes visited.
    pub fn backward(&mut self, loss: NodeId) -> Result<usize, NnError> {
        let shape = &self.nodes[loss.0].value.shape;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(NnError::NonScalarBackward(shape.clone()));
        }
        let mut scratch: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        scratch[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            let Some(g) = scratch[idx].take() else {
                continue;
            };
            visited += 1;
            self.propagate(idx, &g, &mut scratch);
            for (acc, v) in self.nodes[idx].grad.iter_mut().zip(&g) {
                *acc += v;
            }
        }
        Ok(visited)
    }

    fn propagate(&self, idx: usize, g: &[f64], scratch: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let mut grads = Scratch { nodes, scratch };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                grads.with(*a, |ga| axpy(ga, g, 1.0));
                grads.with(*b, |gb| axpy(gb, g, 1.0));
            }
            Op::Sum(a) => grads.with(*a, |ga| ga.iter_mut().for_each(|v| *v += g[0])),
            Op::Relu(a) => {
                let x = &nodes[a.0].value.data;
                grads.with(*a, |ga| {
                    for ((d, gv), xv) in ga.iter_mut().zip(g).zip(x) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Tanh(a) => grads.with(*a, |ga| {
                for ((d, gv), y) in ga.iter_mut().zip(g).zip(&node.value.data) {
                    *d += gv * (1.0 - y * y);
                }
            }),
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
            } => {
                let x = &nodes[input.0].value;
                let w = &nodes[weight.0].value;
                let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
                let (o, k) = (w.shape[0], w.shape[2]);
                let geo = ConvGeometry::new(h, wd, k, *pad);
                let plane = geo.oh * geo.ow;
                grads.with(*bias, |gb| {
                    for ni in 0..n {
                        for (oi, gbv) in gb.iter_mut().enumerate() {
                            *gbv += g[(ni * o + oi) * plane..][..plane].iter().sum::<f64>();
                        }
                    }
                });
                grads.with(*weight, |gw| {
                    for ni in 0..n {
                        for oi in 0..o {
                            let gplane = &g[(ni * o + oi) * plane..][..plane];
                            for ci in 0..c {
                                let src = &x.data[(ni * c + ci) * h * wd..][..h * wd];
                                for ky in 0..k {
                                    let ys = geo.range(ky, true);
                                    for kx in 0..k {
                                        let xs = geo.range(kx, false);
                                        let len = xs.len();
                                        let mut acc = 0.0;
                                        for y in ys.clone() {
                                            let grow = &gplane[y * geo.ow + xs.start..][..len];
                                            let irow = &src[(y + ky - pad) * wd + xs.start + kx - pad..][..len];
                                            acc += dot(grow, irow);
                                        }
                                        gw[((oi * c + ci) * k + ky) * k + kx] += acc;
                                    }
                                }
                            }
                        }
                    }
                });
                grads.with(*input, |gx| {
                    for ni in 0..n {
                        for oi in 0..o {
                            let gplane = &g[(ni * o + oi) * plane..][..plane];
                            for ci in 0..c {
                                let dst = &mut gx[(ni * c + ci) * h * wd..][..h * wd];
                                for ky in 0..k {
                                    let ys = geo.range(ky, true);
                                    for kx in 0..k {
                                        let xs = geo.range(kx, false);
                                        let len = xs.len();
                                        let wv = w.data[((oi * c + ci) * k + ky) * k + kx];
                                        for y in ys.clone() {
                                            let grow = &gplane[y * geo.ow + xs.start..][..len];
                                            let drow = &mut dst[(y + ky - pad) * wd + xs.start + kx - pad..][..len];
                                            axpy(drow, grow, wv);
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::MaxPool2 { input, argmax } => grads.with(*input, |ga| {
                for (&src, gv) in argmax.iter().zip(g) {
                    ga[src] += gv;
                }
            }),
            Op::GlobalAvgPool(input) => {
                let s = &nodes[input.0].value.shape;
                let area = s[2] * s[3];
                grads.with(*input, |ga| {
                    for (chunk, gv) in ga.chunks_mut(area).zip(g) {
                        let d = gv / area as f64;
                        chunk.iter_mut().for_each(|v| *v += d);
                    }
                });
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = &nodes[input.0].value;
                let w = &nodes[weight.0].value;
                let (i, o) = (x.shape[1], w.shape[0]);
                grads.with(*bias, |gb| {
                    for grow in g.chunks(o) {
                        axpy(gb, grow, 1.0);
                    }
                });
                grads.with(*weight, |gw| {
                    for (xrow, grow) in x.data.chunks(i).zip(g.chunks(o)) {
                        for (gwrow, gv) in gw.chunks_mut(i).zip(grow) {
                            axpy(gwrow, xrow, *gv);
                        }
                    }
                });
                grads.with(*input, |gx| {
                    for (gxrow, grow) in gx.chunks_mut(i).zip(g.chunks(o)) {
                        for (wrow, gv) in w.data.chunks(i).zip(grow) {
                            axpy(gxrow, wrow, *gv);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => grads.with(*logits, |gl| {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                for (r, &y) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        gl[r * k + j] += scale * (probs[r * k + j] - onehot);
                    }
                }
            }),
            Op::Mse { pred, target } => {
                let p = &nodes[pred.0].value.data;
                let scale = 2.0 * g[0] / target.len() as f64;
                grads.with(*pred, |gp| {
                    for ((d, pv), t) in gp.iter_mut().zip(p).zip(target) {
                        *d += scale * (pv - t);
                    }
                });
            }
        }
    }
}

/// Per-backward gradient buffers, allocated on first touch.
struct Scratch<'a> {
    nodes: &'a [Node],
    scratch: &'a mut [Option<Vec<f64>>],
}

impl Scratch<'_> {
    /// Runs `f` on the buffer of `id`; skipped when `id` needs no gradient.
    fn with(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        let buf = self.scratch[id.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
        f(buf);
    }
}

/// Output size and valid index ranges of a stride-1 convolution.
struct ConvGeometry {
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(h: usize, w: usize, k: usize, pad: usize) -> Self {
        Self {
            h,
            w,
            k,
            pad,
            oh: h + 2 * pad + 1 - k,
            ow: w + 2 * pad + 1 - k,
        }
    }

    /// Output positions whose tap at kernel offset `off` lands inside the input.
    fn range(&self, off: usize, rows: bool) -> std::ops::Range<usize> {
        let (len, out) = if rows { (self.h, self.oh) } else { (self.w, self.ow) };
        debug_assert!(off < self.k);
        let lo = self.pad.saturating_sub(off);
        let hi = (len + self.pad).saturating_sub(off).min(out);
        lo..hi.max(lo)
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4], NnError> {
    <[usize; 4]>::try_from(t.shape.as_slice())
        .map_err(|_| NnError::Shape(format!("{what} must be 4-D, got {:?}", t.shape)))
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize), NnError> {
    match t.shape.as_slice() {
        &[a, b] => Ok((a, b)),
        s => Err(NnError::Shape(format!("{what} must be 2-D, got {s:?}"))),
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], x: &[f64], alpha: f64) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}
