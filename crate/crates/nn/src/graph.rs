//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every node that depends on a trainable parameter or a gradient-tracking
//! input. The tape is not consumed, so several backward passes (from
//! different losses) can share one forward pass.

use std::collections::HashMap;
use std::sync::Arc;

use crate::kernels::{self, ConvGeom, ConvShape};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise functions with known derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Abs,
    Ln,
    Exp,
    Square,
    /// Clamp into `[lo, hi]`; zero gradient outside.
    Clamp(f64, f64),
    /// Ternary entropy in bits of a total change probability `p` split
    /// evenly between +1 and −1: `−p·log2(p/2) − (1−p)·log2(1−p)`.
    SymTernaryEntropy,
    /// `x·a + b` for scalars `a`, `b`.
    Affine(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub store_uid: u64,
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance.
    pub batch_var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        invstd: Vec<f64>,
        /// Normalized input; present in training mode only.
        xhat: Option<Tensor>,
    },
    Unary {
        x: Var,
        f: Unary,
    },
    Binary {
        a: Var,
        b: Var,
        f: Binary,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Upsample2x {
        x: Var,
    },
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    AvgPool {
        x: Var,
        geom: ConvGeom,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax {
        x: Var,
    },
    Sum {
        x: Var,
    },
    SumPerSample {
        x: Var,
    },
    Narrow0 {
        x: Var,
        start: usize,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Parameters of one store bound into a graph, indexable by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl std::ops::Index<ParamId> for Binding {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Forward tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: HashMap<u64, Binding>,
    param_of: HashMap<usize, (u64, ParamId)>,
    bn_updates: Vec<BnUpdate>,
}

/// Gradients produced by one backward pass.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients for every tensor in `store`, indexed by [`ParamId`].
    /// Entries are `None` when the store was not bound or the parameter did
    /// not influence the loss.
    pub fn for_store(&self, graph: &Graph, store: &ParamStore) -> Vec<Option<Tensor>> {
        match graph.bindings.get(&store.uid()) {
            None => vec![None; store.len()],
            Some(b) => b.vars.iter().map(|&v| self.get(v).cloned()).collect(),
        }
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind every tensor of `store`. Binding the same store twice returns
    /// the same variables, so gradients from repeated use accumulate.
    pub fn bind(&mut self, store: &ParamStore) -> Binding {
        if let Some(b) = self.bindings.get(&store.uid()) {
            return b.clone();
        }
        let mut vars = Vec::with_capacity(store.len());
        for id in store.ids() {
            let trainable = store.kind(id) == ParamKind::Trainable;
            let v = self.push_arc(store.get_arc(id), Op::Param, trainable);
            self.param_of.insert(v.0, (store.uid(), id));
            vars.push(v);
        }
        let b = Binding { vars };
        self.bindings.insert(store.uid(), b.clone());
        b
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be [cout, cin, k, k]");
        assert_eq!(ws[1], cin, "conv expects {} input channels, got {cin}", ws[1]);
        assert_eq!(ws[2], ws[3], "square kernels only");
        let geom = ConvGeom {
            kernel: ws[2],
            stride,
            pad,
        };
        let s = ConvShape {
            n,
            cin,
            h,
            w: wd,
            cout: ws[0],
            oh: geom.out_size(h),
            ow: geom.out_size(wd),
        };
        let mut out = vec![0.0; n * s.cout * s.oh * s.ow];
        kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), s, geom, &mut out);
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), n, s.cout, s.oh * s.ow);
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(
            Tensor::new(&[n, s.cout, s.oh, s.ow], out),
            Op::Conv2d { x, w, b, geom },
            needs,
        )
    }

    /// Transposed convolution; weights are `[cin, cout, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws[0], cin, "transposed conv expects {} input channels", ws[0]);
        let geom = ConvGeom {
            kernel: ws[2],
            stride,
            pad,
        };
        let (oh, ow) = (geom.transposed_out_size(h), geom.transposed_out_size(wd));
        let s = transposed_shape(n, cin, h, wd, ws[1], oh, ow);
        let mut out = vec![0.0; n * ws[1] * oh * ow];
        kernels::conv_transpose2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            s,
            geom,
            &mut out,
        );
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), n, ws[1], oh * ow);
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(
            Tensor::new(&[n, ws[1], oh, ow], out),
            Op::ConvTranspose2d { x, w, b, geom },
            needs,
        )
    }

    /// Batch normalization over `(n, h, w)` per channel.
    ///
    /// In training mode batch statistics are used and a [`BnUpdate`] is
    /// recorded for the running buffers; in eval mode the running buffers
    /// are used as constants.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: Var,
        running_var: Var,
        train: bool,
        eps: f64,
    ) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let count = (n * hw) as f64;
        let xv = self.value(x).data();
        let (mean, var) = if train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut acc = 0.0;
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    acc += xv[base..base + hw].iter().sum::<f64>();
                }
                let mu = acc / count;
                let mut sq = 0.0;
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    sq += xv[base..base + hw].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = sq / count;
            }
            (mean, var)
        } else {
            (
                self.value(running_mean).data().to_vec(),
                self.value(running_var).data().to_vec(),
            )
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![0.0; xv.len()];
        let mut xhat = if train { vec![0.0; xv.len()] } else { Vec::new() };
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xv[i] - mean[ch]) * invstd[ch];
                    if train {
                        xhat[i] = xh;
                    }
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        if train {
            if let (Some(&(uid, mid)), Some(&(_, vid))) = (
                self.param_of.get(&running_mean.0),
                self.param_of.get(&running_var.0),
            ) {
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                self.bn_updates.push(BnUpdate {
                    store_uid: uid,
                    mean: mid,
                    var: vid,
                    batch_mean: mean.clone(),
                    batch_var: var.iter().map(|v| v * unbias).collect(),
                });
            }
        }
        let shape = self.value(x).shape().to_vec();
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Tensor::new(&shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                invstd,
                xhat: train.then(|| Tensor::new(&shape, xhat)),
            },
            needs,
        )
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let out = self.value(x).map(|v| unary_forward(f, v));
        let needs = self.ng(x);
        self.push(out, Op::Unary { x, f }, needs)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::LeakyRelu(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Ln)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Unary::Clamp(lo, hi))
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Var {
        self.unary(x, Unary::Affine(a, 0.0))
    }

    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        self.unary(x, Unary::Affine(a, b))
    }

    pub fn binary(&mut self, a: Var, b: Var, f: Binary) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise {f:?} shape mismatch");
        let data: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| match f {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
            })
            .collect();
        let shape = va.shape().to_vec();
        let needs = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&shape, data), Op::Binary { a, b, f }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Mul)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch {s:?} vs {first:?}");
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let needs = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::new(&shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        )
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[p * oh * ow + y * ow + xx] = src[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let needs = self.ng(x);
        self.push(Tensor::new(&[n, c, oh, ow], out), Op::Upsample2x { x }, needs)
    }

    /// Spatial crop to `h × w` starting at `(top, left)`.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Var {
        let (n, c, ih, iw) = self.value(x).dims4();
        assert!(top + h <= ih && left + w <= iw, "crop out of bounds");
        if (top, left, h, w) == (0, 0, ih, iw) {
            return x;
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * h * w);
        for p in 0..n * c {
            for y in 0..h {
                let row = p * ih * iw + (top + y) * iw + left;
                out.extend_from_slice(&src[row..row + w]);
            }
        }
        let needs = self.ng(x);
        self.push(Tensor::new(&[n, c, h, w], out), Op::Crop { x, top, left }, needs)
    }

    pub fn avg_pool(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let geom = ConvGeom {
            kernel,
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_size(h), geom.out_size(w));
        let mut out = vec![0.0; n * c * oh * ow];
        kernels::avg_pool_forward(self.value(x).data(), n * c, h, w, geom, &mut out);
        let needs = self.ng(x);
        self.push(Tensor::new(&[n, c, oh, ow], out), Op::AvgPool { x, geom }, needs)
    }

    /// Mean over the spatial axes: `[n, c, h, w] → [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let src = self.value(x).data();
        let out: Vec<f64> = (0..n * c)
            .map(|p| src[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let needs = self.ng(x);
        self.push(Tensor::new(&[n, c], out), Op::GlobalAvgPool { x }, needs)
    }

    /// `x [n, k] · wᵀ [k, o] + b [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2);
        assert_eq!(xs[1], ws[1], "linear input width mismatch");
        let (n, k, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(self.value(b).data());
        }
        kernels::gemm(
            n,
            k,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            1.0,
        );
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Tensor::new(&[n, o], out), Op::Linear { x, w, b }, needs)
    }

    /// Row-wise softmax of a `[n, k]` tensor.
    pub fn softmax(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        let k = s[1];
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(k) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let needs = self.ng(x);
        self.push(Tensor::new(&s, out), Op::Softmax { x }, needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let needs = self.ng(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over all axes but the first: `[n, ...] → [n]`.
    pub fn sum_per_sample(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let inner: usize = s[1..].iter().product();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(inner.max(1))
            .map(|c| c.iter().sum())
            .collect();
        let needs = self.ng(x);
        self.push(Tensor::new(&[s[0]], out), Op::SumPerSample { x }, needs)
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn narrow0(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).narrow0(start, len);
        let needs = self.ng(x);
        self.push(out, Op::Narrow0 { x, start }, needs)
    }

    /// Reverse pass from the scalar `loss`. Gradient flow stops at the
    /// nodes listed in `stop` (their own gradient is still reported).
    pub fn backward(&self, loss: Var, stop: &[Var]) -> Grads {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || stop.contains(&Var(i)) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backward_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = gout.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d { x, w, b, geom } => {
                let (n, cin, h, wd) = self.value(*x).dims4();
                let (_, cout, oh, ow) = node.value.dims4();
                let s = ConvShape { n, cin, h, w: wd, cout, oh, ow };
                if self.ng(*x) {
                    let mut dx = vec![0.0; n * cin * h * wd];
                    kernels::conv2d_backward_input(gd, self.value(*w).data(), s, *geom, &mut dx);
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx));
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; self.value(*w).numel()];
                    kernels::conv2d_backward_weight(gd, self.value(*x).data(), s, *geom, &mut dw);
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w), dw));
                }
                if let Some(b) = b {
                    let db = channel_sums(gd, n, cout, oh * ow);
                    self.accumulate(grads, *b, Tensor::new(&[cout], db));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (n, cin, h, wd) = self.value(*x).dims4();
                let (_, cout, oh, ow) = node.value.dims4();
                // The forward convolution this op is the adjoint of maps
                // [cout, oh, ow] -> [cin, h, w].
                let s = ConvShape { n, cin: cout, h: oh, w: ow, cout: cin, oh: h, ow: wd };
                if self.ng(*x) {
                    let mut dx = vec![0.0; n * cin * h * wd];
                    kernels::conv2d_forward(gd, self.value(*w).data(), s, *geom, &mut dx);
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx));
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; self.value(*w).numel()];
                    kernels::conv2d_backward_weight(self.value(*x).data(), gd, s, *geom, &mut dw);
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w), dw));
                }
                if let Some(b) = b {
                    let db = channel_sums(gd, n, cout, oh * ow);
                    self.accumulate(grads, *b, Tensor::new(&[cout], db));
                }
            }
            Op::BatchNorm { x, gamma, beta, invstd, xhat } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let count = (n * hw) as f64;
                let g = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let xh_owned;
                let xh = match xhat {
                    Some(t) => t.data(),
                    None => {
                        // Eval mode: recover the normalized input from the output.
                        let bt = self.value(*beta).data();
                        let out = node.value.data();
                        xh_owned = (0..out.len())
                            .map(|idx| {
                                let ch = (idx / hw) % c;
                                if g[ch] == 0.0 {
                                    0.0
                                } else {
                                    (out[idx] - bt[ch]) / g[ch]
                                }
                            })
                            .collect::<Vec<_>>();
                        &xh_owned
                    }
                };
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for idx in base..base + hw {
                            dgamma[ch] += gd[idx] * xh[idx];
                            dbeta[ch] += gd[idx];
                        }
                    }
                }
                if self.ng(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for idx in base..base + hw {
                                dx[idx] = if xhat.is_some() {
                                    g[ch] * invstd[ch]
                                        * (gd[idx]
                                            - dbeta[ch] / count
                                            - xh[idx] * dgamma[ch] / count)
                                } else {
                                    g[ch] * invstd[ch] * gd[idx]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx));
                }
                self.accumulate(grads, *gamma, Tensor::new(&[c], dgamma));
                self.accumulate(grads, *beta, Tensor::new(&[c], dbeta));
            }
            Op::Unary { x, f } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let dx: Vec<f64> = (0..gd.len())
                    .map(|k| gd[k] * unary_derivative(*f, xv[k], yv[k]))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx));
            }
            Op::Binary { a, b, f } => {
                let shape = gout.shape();
                match f {
                    Binary::Add => {
                        self.accumulate(grads, *a, gout.clone());
                        self.accumulate(grads, *b, gout.clone());
                    }
                    Binary::Sub => {
                        self.accumulate(grads, *a, gout.clone());
                        self.accumulate(grads, *b, gout.map(|v| -v));
                    }
                    Binary::Mul => {
                        if self.ng(*a) {
                            let bv = self.value(*b).data();
                            let da = gd.iter().zip(bv).map(|(g, y)| g * y).collect();
                            self.accumulate(grads, *a, Tensor::new(shape, da));
                        }
                        if self.ng(*b) {
                            let av = self.value(*a).data();
                            let db = gd.iter().zip(av).map(|(g, x)| g * x).collect();
                            self.accumulate(grads, *b, Tensor::new(shape, db));
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let start = o * total + offset;
                            d.extend_from_slice(&gd[start..start + len]);
                        }
                        self.accumulate(grads, p, Tensor::new(self.shape(p), d));
                    }
                    offset += len;
                }
            }
            Op::Upsample2x { x } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dx[p * h * w + (y / 2) * w + xx / 2] += gd[p * oh * ow + y * ow + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx));
            }
            Op::Crop { x, top, left } => {
                let (n, c, ih, iw) = self.value(*x).dims4();
                let (_, _, h, w) = node.value.dims4();
                let mut dx = vec![0.0; n * c * ih * iw];
                for p in 0..n * c {
                    for y in 0..h {
                        let row = p * ih * iw + (top + y) * iw + left;
                        dx[row..row + w].copy_from_slice(&gd[(p * h + y) * w..(p * h + y + 1) * w]);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx));
            }
            Op::AvgPool { x, geom } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let mut dx = vec![0.0; n * c * h * w];
                kernels::avg_pool_backward(gd, n * c, h, w, *geom, &mut dx);
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx));
            }
            Op::GlobalAvgPool { x } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let mut dx = vec![0.0; n * c * hw];
                for p in 0..n * c {
                    let g = gd[p] / hw as f64;
                    dx[p * hw..(p + 1) * hw].fill(g);
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx));
            }
            Op::Linear { x, w, b } => {
                let (n, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                if self.ng(*x) {
                    let mut dx = vec![0.0; n * k];
                    kernels::gemm(n, o, k, gd, false, self.value(*w).data(), false, &mut dx, 0.0);
                    self.accumulate(grads, *x, Tensor::new(&[n, k], dx));
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; o * k];
                    kernels::gemm(o, n, k, gd, true, self.value(*x).data(), false, &mut dw, 0.0);
                    self.accumulate(grads, *w, Tensor::new(&[o, k], dw));
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; o];
                    for row in gd.chunks(o) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(&[o], db));
                }
            }
            Op::Softmax { x } => {
                let k = node.value.shape()[1];
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / k {
                    let row = r * k..(r + 1) * k;
                    let dot: f64 = gd[row.clone()].iter().zip(&y[row.clone()]).map(|(g, p)| g * p).sum();
                    for j in row {
                        dx[j] = y[j] * (gd[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx));
            }
            Op::Sum { x } => {
                let g = gd[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g));
            }
            Op::SumPerSample { x } => {
                let shape = self.shape(*x);
                let inner: usize = shape[1..].iter().product();
                let mut dx = vec![0.0; shape[0] * inner];
                for (b, chunk) in dx.chunks_mut(inner.max(1)).enumerate() {
                    chunk.fill(gd[b]);
                }
                self.accumulate(grads, *x, Tensor::new(shape, dx));
            }
            Op::Narrow0 { x, start } => {
                let shape = self.shape(*x);
                let inner: usize = shape[1..].iter().product();
                let mut dx = vec![0.0; shape.iter().product()];
                dx[start * inner..start * inner + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *x, Tensor::new(shape, dx));
            }
        }
    }
}

fn transposed_shape(
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    oh: usize,
    ow: usize,
) -> ConvShape {
    // Forward convolution [cout, oh, ow] -> [cin, h, w] whose adjoint we apply.
    ConvShape { n, cin: cout, h: oh, w: ow, cout: cin, oh: h, ow: w }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], n: usize, c: usize, hw: usize) {
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for v in &mut out[base..base + hw] {
                *v += bias[ch];
            }
        }
    }
}

fn channel_sums(g: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let base = (b * c + ch) * hw;
            *o += g[base..base + hw].iter().sum::<f64>();
        }
    }
    out
}

fn unary_forward(f: Unary, x: f64) -> f64 {
    match f {
        Unary::LeakyRelu(s) => {
            if x > 0.0 {
                x
            } else {
                s * x
            }
        }
        Unary::Tanh => x.tanh(),
        Unary::Sigmoid => {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
        Unary::Abs => x.abs(),
        Unary::Ln => x.ln(),
        Unary::Exp => x.exp(),
        Unary::Square => x * x,
        Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        Unary::SymTernaryEntropy => sym_ternary_entropy(x),
        Unary::Affine(a, b) => a * x + b,
    }
}

fn unary_derivative(f: Unary, x: f64, y: f64) -> f64 {
    match f {
        Unary::LeakyRelu(s) => {
            if x > 0.0 {
                1.0
            } else {
                s
            }
        }
        Unary::Tanh => 1.0 - y * y,
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::Ln => 1.0 / x,
        Unary::Exp => y,
        Unary::Square => 2.0 * x,
        Unary::Clamp(lo, hi) => {
            if x >= lo && x <= hi {
                1.0
            } else {
                0.0
            }
        }
        Unary::SymTernaryEntropy => {
            if x <= 0.0 || x >= 1.0 {
                0.0
            } else {
                (2.0 * (1.0 - x) / x).log2()
            }
        }
        Unary::Affine(a, _) => a,
    }
}

/// `−p·log2(p/2) − (1−p)·log2(1−p)` with `0·log 0 = 0`.
pub fn sym_ternary_entropy(p: f64) -> f64 {
    let mut h = 0.0;
    if p > 0.0 {
        h -= p * (p / 2.0).log2();
    }
    if p < 1.0 {
        h -= (1.0 - p) * (1.0 - p).log2();
    }
    h
}
