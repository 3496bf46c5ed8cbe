//! Differentiable primitives.
//!
//! Each primitive validates shapes, computes its forward value, rejects
//! non-finite results and, when any input requires gradients, appends an
//! [`Op`] record. [`backward`] holds the matching reverse rules.

use std::sync::Arc;

use crate::error::{arg_err, shape_err, AutogradError, Result};
use crate::kernels::{self, axis_split, ConvGeom};
use crate::tape::{check_shape, DiffTensor, Node, NodeId};

#[derive(Debug, Clone)]
pub(crate) enum Op {
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    BiasAdd { x: NodeId, bias: NodeId, outer: usize, len: usize, inner: usize },
    Conv2d { x: NodeId, w: NodeId, geom: ConvGeom },
    Relu { x: NodeId },
    Softmax { x: NodeId, tau: NodeId, outer: usize, len: usize, inner: usize },
    LogSoftmax { x: NodeId, tau: NodeId, outer: usize, len: usize, inner: usize },
    Log { x: NodeId },
    Exp { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: f64 },
    AddScalar { x: NodeId },
    MulPrefix { x: NodeId, y: NodeId, inner: usize },
    Concat { inputs: Vec<NodeId>, outer: usize, lens: Vec<usize>, inner: usize },
    GlobalAvgPool { x: NodeId, spatial: usize },
    AvgPool { x: NodeId, planes: usize, h: usize, w: usize, k: usize },
    L2Normalize { x: NodeId, rows: usize, norms: Vec<f64> },
    Sum { x: NodeId },
    Mean { x: NodeId },
    SumAxis { x: NodeId, outer: usize, len: usize, inner: usize },
    Reshape { x: NodeId },
    Narrow { x: NodeId, outer: usize, len: usize, inner: usize, start: usize, take: usize },
    BlockSum { x: NodeId, block: usize },
    BlockLogSumExp { x: NodeId, block: usize },
    GradReverse { x: NodeId, scale: f64 },
}

fn emit(
    op_name: &'static str,
    inputs: &[&DiffTensor],
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
    op: impl FnOnce() -> Op,
) -> Result<DiffTensor> {
    let tape = &inputs[0].tape;
    if inputs[1..].iter().any(|t| !tape.same(&t.tape)) {
        return Err(AutogradError::ForeignTape);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(AutogradError::NonFinite { op: op_name });
    }
    let requires_grad = inputs.iter().any(|t| t.requires_grad);
    let record = requires_grad.then(op);
    Ok(tape.push(shape, values, requires_grad, record))
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return arg_err(op, format!("axis {axis} out of range for shape {shape:?}"));
    }
    Ok(())
}

fn check_same_shape(op: &'static str, a: &DiffTensor, b: &DiffTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn temperature_of(op: &'static str, tau: &DiffTensor) -> Result<f64> {
    if tau.numel() != 1 {
        return shape_err(op, format!("temperature must be scalar, got {:?}", tau.shape()));
    }
    let t = tau.values()[0];
    if t <= 0.0 {
        return Err(AutogradError::NonPositiveTemperature(t));
    }
    Ok(t)
}

impl DiffTensor {
    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &DiffTensor) -> Result<DiffTensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return shape_err("matmul", format!("{a:?} x {b:?}"));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.values(), false, other.values(), false, 0.0, &mut out);
        let (ia, ib) = (self.id, other.id);
        emit("matmul", &[self, other], vec![m, n], Arc::new(out), || Op::MatMul {
            a: ia,
            b: ib,
            m,
            k,
            n,
        })
    }

    /// Adds a rank-1 `bias` broadcast along every axis except `axis`.
    pub fn bias_add(&self, bias: &DiffTensor, axis: usize) -> Result<DiffTensor> {
        check_axis("bias_add", self.shape(), axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        if bias.shape() != [len] {
            return shape_err(
                "bias_add",
                format!("bias {:?} for axis {axis} of {:?}", bias.shape(), self.shape()),
            );
        }
        let mut out = self.values().to_vec();
        let bv = bias.values();
        for o in 0..outer {
            for (c, &b) in bv.iter().enumerate() {
                let base = (o * len + c) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v += b);
            }
        }
        let (x, bi) = (self.id, bias.id);
        emit("bias_add", &[self, bias], self.shape().to_vec(), Arc::new(out), || {
            Op::BiasAdd { x, bias: bi, outer, len, inner }
        })
    }

    /// 2-d convolution of NCHW input with `[cout, cin, kh, kw]` weights.
    pub fn conv2d(&self, weight: &DiffTensor, stride: usize, pad: usize) -> Result<DiffTensor> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return shape_err("conv2d", format!("input {xs:?} with weight {ws:?}"));
        }
        if stride == 0 {
            return arg_err("conv2d", "stride must be positive");
        }
        let (hp, wp) = (xs[2] + 2 * pad, xs[3] + 2 * pad);
        if ws[2] > hp || ws[3] > wp {
            return shape_err("conv2d", format!("kernel {ws:?} larger than padded input {xs:?}"));
        }
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho: (hp - ws[2]) / stride + 1,
            wo: (wp - ws[3]) / stride + 1,
        };
        let out = kernels::conv2d_forward(&geom, self.values(), weight.values());
        let (x, w) = (self.id, weight.id);
        emit(
            "conv2d",
            &[self, weight],
            vec![geom.batch, geom.cout, geom.ho, geom.wo],
            Arc::new(out),
            || Op::Conv2d { x, w, geom },
        )
    }

    /// Stride-1 convolution with zero padding that preserves spatial size
    /// (odd square kernels).
    pub fn conv2d_same(&self, weight: &DiffTensor) -> Result<DiffTensor> {
        let ws = weight.shape();
        if ws.len() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return shape_err("conv2d_same", format!("needs odd square kernel, got {ws:?}"));
        }
        self.conv2d(weight, 1, ws[2] / 2)
    }

    pub fn relu(&self) -> Result<DiffTensor> {
        let out: Vec<f64> = self.values().iter().map(|&v| v.max(0.0)).collect();
        let x = self.id;
        emit("relu", &[self], self.shape().to_vec(), Arc::new(out), || Op::Relu { x })
    }

    /// `softmax(x / tau)` along `axis`; `tau` is a single-element tensor so
    /// the temperature itself can be learned.
    pub fn softmax(&self, axis: usize, tau: &DiffTensor) -> Result<DiffTensor> {
        check_axis("softmax", self.shape(), axis)?;
        let t = temperature_of("softmax", tau)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut out = vec![0.0; self.numel()];
        let xv = self.values();
        let mut row = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for (j, r) in row.iter_mut().enumerate() {
                    *r = xv[at(j)] / t;
                    max = max.max(*r);
                }
                let mut sum = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    sum += *r;
                }
                for (j, r) in row.iter().enumerate() {
                    out[at(j)] = r / sum;
                }
            }
        }
        let (x, ti) = (self.id, tau.id);
        emit("softmax", &[self, tau], self.shape().to_vec(), Arc::new(out), || {
            Op::Softmax { x, tau: ti, outer, len, inner }
        })
    }

    /// `log(softmax(x / tau))` along `axis`, evaluated stably.
    pub fn log_softmax(&self, axis: usize, tau: &DiffTensor) -> Result<DiffTensor> {
        check_axis("log_softmax", self.shape(), axis)?;
        let t = temperature_of("log_softmax", tau)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut out = vec![0.0; self.numel()];
        let xv = self.values();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xv[at(j)] / t).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|j| (xv[at(j)] / t - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[at(j)] = xv[at(j)] / t - lse;
                }
            }
        }
        let (x, ti) = (self.id, tau.id);
        emit("log_softmax", &[self, tau], self.shape().to_vec(), Arc::new(out), || {
            Op::LogSoftmax { x, tau: ti, outer, len, inner }
        })
    }

    /// Softmax along the last axis at a fixed temperature.
    pub fn softmax_last(&self, tau: f64) -> Result<DiffTensor> {
        let t = self.tape.scalar(tau)?;
        self.softmax(self.rank() - 1, &t)
    }

    pub fn log_softmax_last(&self, tau: f64) -> Result<DiffTensor> {
        let t = self.tape.scalar(tau)?;
        self.log_softmax(self.rank() - 1, &t)
    }

    pub fn log(&self) -> Result<DiffTensor> {
        let out: Vec<f64> = self.values().iter().map(|v| v.ln()).collect();
        let x = self.id;
        emit("log", &[self], self.shape().to_vec(), Arc::new(out), || Op::Log { x })
    }

    pub fn exp(&self) -> Result<DiffTensor> {
        let out: Vec<f64> = self.values().iter().map(|v| v.exp()).collect();
        let x = self.id;
        emit("exp", &[self], self.shape().to_vec(), Arc::new(out), || Op::Exp { x })
    }

    pub fn add(&self, other: &DiffTensor) -> Result<DiffTensor> {
        check_same_shape("add", self, other)?;
        let out: Vec<f64> = self.values().iter().zip(other.values()).map(|(a, b)| a + b).collect();
        let (a, b) = (self.id, other.id);
        emit("add", &[self, other], self.shape().to_vec(), Arc::new(out), || Op::Add { a, b })
    }

    pub fn sub(&self, other: &DiffTensor) -> Result<DiffTensor> {
        check_same_shape("sub", self, other)?;
        let out: Vec<f64> = self.values().iter().zip(other.values()).map(|(a, b)| a - b).collect();
        let (a, b) = (self.id, other.id);
        emit("sub", &[self, other], self.shape().to_vec(), Arc::new(out), || Op::Sub { a, b })
    }

    pub fn mul(&self, other: &DiffTensor) -> Result<DiffTensor> {
        check_same_shape("mul", self, other)?;
        let out: Vec<f64> = self.values().iter().zip(other.values()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.id, other.id);
        emit("mul", &[self, other], self.shape().to_vec(), Arc::new(out), || Op::Mul { a, b })
    }

    pub fn scale(&self, factor: f64) -> Result<DiffTensor> {
        let out: Vec<f64> = self.values().iter().map(|v| v * factor).collect();
        let x = self.id;
        emit("scale", &[self], self.shape().to_vec(), Arc::new(out), || Op::Scale { x, factor })
    }

    pub fn add_scalar(&self, c: f64) -> Result<DiffTensor> {
        let out: Vec<f64> = self.values().iter().map(|v| v + c).collect();
        let x = self.id;
        emit("add_scalar", &[self], self.shape().to_vec(), Arc::new(out), || Op::AddScalar { x })
    }

    /// Elementwise product with `y` broadcast over trailing axes: `y`'s
    /// shape must be a leading prefix of `self`'s shape, or `y` a single
    /// element.
    pub fn mul_prefix(&self, y: &DiffTensor) -> Result<DiffTensor> {
        let xs = self.shape();
        let ys = y.shape();
        let scalar = y.numel() == 1;
        if !scalar && (ys.len() > xs.len() || xs[..ys.len()] != *ys) {
            return shape_err("mul_prefix", format!("{ys:?} is not a prefix of {xs:?}"));
        }
        let inner = self.numel() / y.numel();
        let yv = y.values();
        let out: Vec<f64> = self
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v * yv[i / inner])
            .collect();
        let (x, yi) = (self.id, y.id);
        emit("mul_prefix", &[self, y], xs.to_vec(), Arc::new(out), || Op::MulPrefix {
            x,
            y: yi,
            inner,
        })
    }

    /// Concatenates tensors along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&DiffTensor], axis: usize) -> Result<DiffTensor> {
        let Some(first) = parts.first() else {
            return arg_err("concat", "no inputs");
        };
        check_axis("concat", first.shape(), axis)?;
        for p in parts {
            let s = p.shape();
            if s.len() != first.rank()
                || s[..axis] != first.shape()[..axis]
                || s[axis + 1..] != first.shape()[axis + 1..]
            {
                return shape_err("concat", format!("{:?} vs {s:?} on axis {axis}", first.shape()));
            }
        }
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.values()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let inputs: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        emit("concat", parts, shape, Arc::new(out), || Op::Concat {
            inputs,
            outer,
            lens,
            inner,
        })
    }

    /// Mean over the spatial axes of `[B, C, H, W]`, giving `[B, C]`.
    pub fn global_avg_pool(&self) -> Result<DiffTensor> {
        let s = self.shape();
        if s.len() != 4 {
            return shape_err("global_avg_pool", format!("needs rank 4, got {s:?}"));
        }
        let spatial = s[2] * s[3];
        let inv = 1.0 / spatial as f64;
        let out: Vec<f64> = self
            .values()
            .chunks(spatial)
            .map(|c| c.iter().sum::<f64>() * inv)
            .collect();
        let x = self.id;
        emit("global_avg_pool", &[self], vec![s[0], s[1]], Arc::new(out), || {
            Op::GlobalAvgPool { x, spatial }
        })
    }

    /// Non-overlapping `k×k` average pooling (stride `k`) of `[B, C, H, W]`.
    pub fn avg_pool2d(&self, k: usize) -> Result<DiffTensor> {
        let s = self.shape();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return shape_err("avg_pool2d", format!("window {k} does not tile {s:?}"));
        }
        let planes = s[0] * s[1];
        let out = kernels::avg_pool(self.values(), planes, s[2], s[3], k);
        let (h, w, x) = (s[2], s[3], self.id);
        emit(
            "avg_pool2d",
            &[self],
            vec![s[0], s[1], h / k, w / k],
            Arc::new(out),
            || Op::AvgPool { x, planes, h, w, k },
        )
    }

    /// Normalizes every sample (leading axis) to unit L2 norm over its
    /// flattened features: `x / sqrt(Σx² + eps)`. An exactly zero sample
    /// is rejected.
    pub fn l2_normalize(&self, eps: f64) -> Result<DiffTensor> {
        let rows = self.shape()[0];
        let d = self.numel() / rows;
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![0.0; self.numel()];
        for (r, chunk) in self.values().chunks(d).enumerate() {
            let sq: f64 = chunk.iter().map(|v| v * v).sum();
            if sq == 0.0 {
                return arg_err("l2_normalize", format!("sample {r} has zero norm"));
            }
            let n = (sq + eps).sqrt();
            norms.push(n);
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(chunk) {
                *o = v / n;
            }
        }
        let x = self.id;
        emit("l2_normalize", &[self], self.shape().to_vec(), Arc::new(out), || {
            Op::L2Normalize { x, rows, norms }
        })
    }

    pub fn sum(&self) -> Result<DiffTensor> {
        let s: f64 = self.values().iter().sum();
        let x = self.id;
        emit("sum", &[self], vec![1], Arc::new(vec![s]), || Op::Sum { x })
    }

    pub fn mean(&self) -> Result<DiffTensor> {
        let s: f64 = self.values().iter().sum::<f64>() / self.numel() as f64;
        let x = self.id;
        emit("mean", &[self], vec![1], Arc::new(vec![s]), || Op::Mean { x })
    }

    /// Sums out `axis`. Reducing a rank-1 tensor yields shape `[1]`.
    pub fn sum_axis(&self, axis: usize) -> Result<DiffTensor> {
        check_axis("sum_axis", self.shape(), axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let xv = self.values();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &xv[(o * len + j) * inner..(o * len + j + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, b)| *a += b);
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let x = self.id;
        emit("sum_axis", &[self], shape, Arc::new(out), || Op::SumAxis { x, outer, len, inner })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<DiffTensor> {
        check_shape("reshape", shape, self.numel())?;
        let x = self.id;
        emit("reshape", &[self], shape.to_vec(), self.value.clone(), || Op::Reshape { x })
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<DiffTensor> {
        check_axis("narrow", self.shape(), axis)?;
        let (outer, full, inner) = axis_split(self.shape(), axis);
        if len == 0 || start + len > full {
            return shape_err("narrow", format!("[{start}, {}) of axis length {full}", start + len));
        }
        let xv = self.values();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let x = self.id;
        emit("narrow", &[self], shape, Arc::new(out), || Op::Narrow {
            x,
            outer,
            len: full,
            inner,
            start,
            take: len,
        })
    }

    /// Sums every `block` adjacent entries of the last axis.
    pub fn block_sum(&self, block: usize) -> Result<DiffTensor> {
        let last = *self.shape().last().unwrap();
        if block == 0 || last % block != 0 {
            return shape_err("block_sum", format!("block {block} does not divide {last}"));
        }
        let out: Vec<f64> = self
            .values()
            .chunks(block)
            .map(|c| c.iter().sum())
            .collect();
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = last / block;
        let x = self.id;
        emit("block_sum", &[self], shape, Arc::new(out), || Op::BlockSum { x, block })
    }

    /// Log-sum-exp over every `block` adjacent entries of the last axis.
    pub fn block_logsumexp(&self, block: usize) -> Result<DiffTensor> {
        let last = *self.shape().last().unwrap();
        if block == 0 || last % block != 0 {
            return shape_err("block_logsumexp", format!("block {block} does not divide {last}"));
        }
        let out: Vec<f64> = self
            .values()
            .chunks(block)
            .map(|c| {
                let max = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                max + c.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
            })
            .collect();
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = last / block;
        let x = self.id;
        emit("block_logsumexp", &[self], shape, Arc::new(out), || Op::BlockLogSumExp { x, block })
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `-scale` in the reverse pass.
    pub fn grad_reverse(&self, scale: f64) -> Result<DiffTensor> {
        if !(scale >= 0.0) {
            return Err(AutogradError::NegativeScale(scale));
        }
        let x = self.id;
        emit("grad_reverse", &[self], self.shape().to_vec(), self.value.clone(), || {
            Op::GradReverse { x, scale }
        })
    }
}

/// Reverse rule: returns `(input, gradient)` pairs for the record at `node`.
pub(crate) fn backward(op: &Op, node: &Node, nodes: &[Node], g: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
    let val = |id: NodeId| nodes[id].value.as_slice();
    let wants = |id: NodeId| nodes[id].requires_grad;
    let mut out = Vec::with_capacity(2);
    match *op {
        Op::MatMul { a, b, m, k, n } => {
            if wants(a) {
                let mut da = vec![0.0; m * k];
                kernels::gemm(m, n, k, g, false, val(b), true, 0.0, &mut da);
                out.push((a, da));
            }
            if wants(b) {
                let mut db = vec![0.0; k * n];
                kernels::gemm(k, m, n, val(a), true, g, false, 0.0, &mut db);
                out.push((b, db));
            }
        }
        Op::BiasAdd { x, bias, outer, len, inner } => {
            if wants(x) {
                out.push((x, g.to_vec()));
            }
            if wants(bias) {
                let mut db = vec![0.0; len];
                for o in 0..outer {
                    for (c, d) in db.iter_mut().enumerate() {
                        let base = (o * len + c) * inner;
                        *d += g[base..base + inner].iter().sum::<f64>();
                    }
                }
                out.push((bias, db));
            }
        }
        Op::Conv2d { x, w, ref geom } => {
            let (dx, dw) = kernels::conv2d_backward(geom, val(x), val(w), g, wants(x), wants(w));
            if let Some(dx) = dx {
                out.push((x, dx));
            }
            if let Some(dw) = dw {
                out.push((w, dw));
            }
        }
        Op::Relu { x } => {
            let dx = val(x)
                .iter()
                .zip(g)
                .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                .collect();
            out.push((x, dx));
        }
        Op::Softmax { x, tau, outer, len, inner } => {
            let y = node.value.as_slice();
            let xv = val(x);
            let t = val(tau)[0];
            let mut dx = vec![0.0; y.len()];
            let mut dtau = 0.0;
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot: f64 = (0..len).map(|j| y[at(j)] * g[at(j)]).sum();
                    for j in 0..len {
                        let dz = y[at(j)] * (g[at(j)] - dot);
                        dx[at(j)] = dz / t;
                        dtau -= dz * xv[at(j)] / (t * t);
                    }
                }
            }
            if wants(x) {
                out.push((x, dx));
            }
            if wants(tau) {
                out.push((tau, vec![dtau]));
            }
        }
        Op::LogSoftmax { x, tau, outer, len, inner } => {
            let y = node.value.as_slice();
            let xv = val(x);
            let t = val(tau)[0];
            let mut dx = vec![0.0; y.len()];
            let mut dtau = 0.0;
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let gsum: f64 = (0..len).map(|j| g[at(j)]).sum();
                    for j in 0..len {
                        let dz = g[at(j)] - y[at(j)].exp() * gsum;
                        dx[at(j)] = dz / t;
                        dtau -= dz * xv[at(j)] / (t * t);
                    }
                }
            }
            if wants(x) {
                out.push((x, dx));
            }
            if wants(tau) {
                out.push((tau, vec![dtau]));
            }
        }
        Op::Log { x } => {
            out.push((x, val(x).iter().zip(g).map(|(v, d)| d / v).collect()));
        }
        Op::Exp { x } => {
            out.push((x, node.value.iter().zip(g).map(|(y, d)| d * y).collect()));
        }
        Op::Add { a, b } => {
            if wants(a) {
                out.push((a, g.to_vec()));
            }
            if wants(b) {
                out.push((b, g.to_vec()));
            }
        }
        Op::Sub { a, b } => {
            if wants(a) {
                out.push((a, g.to_vec()));
            }
            if wants(b) {
                out.push((b, g.iter().map(|d| -d).collect()));
            }
        }
        Op::Mul { a, b } => {
            if wants(a) {
                out.push((a, val(b).iter().zip(g).map(|(v, d)| v * d).collect()));
            }
            if wants(b) {
                out.push((b, val(a).iter().zip(g).map(|(v, d)| v * d).collect()));
            }
        }
        Op::Scale { x, factor } => {
            out.push((x, g.iter().map(|d| d * factor).collect()));
        }
        Op::AddScalar { x } => out.push((x, g.to_vec())),
        Op::MulPrefix { x, y, inner } => {
            let yv = val(y);
            if wants(x) {
                out.push((x, g.iter().enumerate().map(|(i, d)| d * yv[i / inner]).collect()));
            }
            if wants(y) {
                let xv = val(x);
                let dy = (0..yv.len())
                    .map(|j| {
                        let r = j * inner..(j + 1) * inner;
                        xv[r.clone()].iter().zip(&g[r]).map(|(a, b)| a * b).sum()
                    })
                    .collect();
                out.push((y, dy));
            }
        }
        Op::Concat { ref inputs, outer, ref lens, inner } => {
            let total: usize = lens.iter().sum();
            let mut offset = 0;
            for (&input, &l) in inputs.iter().zip(lens) {
                if wants(input) {
                    let mut d = Vec::with_capacity(outer * l * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g[base..base + l * inner]);
                    }
                    out.push((input, d));
                }
                offset += l;
            }
        }
        Op::GlobalAvgPool { x, spatial } => {
            let inv = 1.0 / spatial as f64;
            let dx = g.iter().flat_map(|&d| std::iter::repeat_n(d * inv, spatial)).collect();
            out.push((x, dx));
        }
        Op::AvgPool { x, planes, h, w, k } => {
            out.push((x, kernels::avg_pool_backward(g, planes, h, w, k)));
        }
        Op::L2Normalize { x, rows, ref norms } => {
            let y = node.value.as_slice();
            let d = y.len() / rows;
            let mut dx = vec![0.0; y.len()];
            for r in 0..rows {
                let s = r * d..(r + 1) * d;
                let dot: f64 = y[s.clone()].iter().zip(&g[s.clone()]).map(|(a, b)| a * b).sum();
                for i in s {
                    dx[i] = (g[i] - y[i] * dot) / norms[r];
                }
            }
            out.push((x, dx));
        }
        Op::Sum { x } => out.push((x, vec![g[0]; nodes[x].value.len()])),
        Op::Mean { x } => {
            let n = nodes[x].value.len();
            out.push((x, vec![g[0] / n as f64; n]));
        }
        Op::SumAxis { x, outer, len, inner } => {
            let mut dx = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                for _ in 0..len {
                    dx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            out.push((x, dx));
        }
        Op::Reshape { x } => out.push((x, g.to_vec())),
        Op::Narrow { x, outer, len, inner, start, take } => {
            let mut dx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                dx[(o * len + start) * inner..(o * len + start + take) * inner]
                    .copy_from_slice(&g[o * take * inner..(o + 1) * take * inner]);
            }
            out.push((x, dx));
        }
        Op::BlockSum { x, block } => {
            let dx = g.iter().flat_map(|&d| std::iter::repeat_n(d, block)).collect();
            out.push((x, dx));
        }
        Op::BlockLogSumExp { x, block } => {
            let y = node.value.as_slice();
            let dx = val(x)
                .iter()
                .enumerate()
                .map(|(i, v)| g[i / block] * (v - y[i / block]).exp())
                .collect();
            out.push((x, dx));
        }
        Op::GradReverse { x, scale } => {
            let neg = -scale;
            out.push((x, g.iter().map(|d| neg * d).collect()));
        }
    }
    out
}
