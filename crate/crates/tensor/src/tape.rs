//! Reverse-mode differentiation over a linear recording of operations.
//!
//! Every op evaluates eagerly and appends one node holding its value and the
//! information its backward rule needs. `backward` walks the nodes in reverse
//! recording order exactly once.

use crate::error::{arg_err, shape_err, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse linear map from a flattened input to a flattened output:
/// `out[i] = sum_j weight[j] * input[index[j]]` for `j` in row `i`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Taps {
    offsets: Vec<usize>,
    index: Vec<usize>,
    weight: Vec<f64>,
}

impl Taps {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            index: Vec::new(),
            weight: Vec::new(),
        }
    }

    /// Plain gather: output `i` copies `input[indices[i]]`.
    pub fn gather(indices: &[usize]) -> Self {
        let mut t = Self::new();
        for &i in indices {
            t.push(i, 1.0);
            t.finish_row();
        }
        t
    }

    pub fn push(&mut self, index: usize, weight: f64) {
        self.index.push(index);
        self.weight.push(weight);
    }

    pub fn finish_row(&mut self) {
        self.offsets.push(self.index.len());
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        self.index[a..b]
            .iter()
            .copied()
            .zip(self.weight[a..b].iter().copied())
    }

    fn max_index(&self) -> Option<usize> {
        self.index.iter().copied().max()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        batch: usize,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        batch: usize,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Gather {
        input: Var,
        taps: Taps,
    },
    Concat(Vec<Var>),
    SmoothL1Sum {
        pred: Var,
        target: Vec<f64>,
    },
    BceWithLogitsMean {
        logits: Var,
        target: Vec<f64>,
    },
    SoftmaxCrossEntropyMean {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of the forward pass together with the gradient buffers
/// produced by the last `backward`.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// Drops every recorded node and gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    /// Resets every gradient buffer to zero while keeping the recording.
    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if it reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let value = if value.requires_grad() {
            let mut v = value;
            v.set_requires_grad(false);
            v
        } else {
            value
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records an input. It participates in differentiation iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(self.shape(a), data).expect("shape preserved");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, factor), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a).data();
        let s = x.iter().sum::<f64>() / x.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sum of any number of scalars; an empty list yields a constant zero.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut it = terms.iter();
        let Some(&first) = it.next() else {
            return Ok(self.constant(Tensor::scalar(0.0)));
        };
        let mut acc = first;
        for &t in it {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::new(self.shape(a), data).expect("shape preserved");
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| kernels::sigmoid(x)).collect();
        let t = Tensor::new(self.shape(a), data).expect("shape preserved");
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let k = *self.shape(a).last().expect("non-empty shape");
        let data = kernels::softmax_rows(self.value(a).data(), k);
        let t = Tensor::new(self.shape(a), data).expect("shape preserved");
        let rg = self.rg(&[a]);
        self.push(t, Op::Softmax(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).numel() {
            return shape_err("reshape", format!("{:?} -> {:?}", self.shape(a), shape));
        }
        let t = Tensor::new(shape, self.value(a).data().to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    fn conv_geom(
        &self,
        op: &'static str,
        input: Var,
        kernel: Var,
        bias: Var,
        transpose: bool,
    ) -> Result<(ConvGeom, usize)> {
        let xs = self.shape(input);
        let ks = self.shape(kernel);
        if xs.len() != 4 || ks.len() != 4 {
            return shape_err(op, format!("need 4-d input and kernel, got {xs:?} and {ks:?}"));
        }
        let (in_c, out_c) = if transpose { (ks[0], ks[1]) } else { (ks[1], ks[0]) };
        if xs[1] != in_c {
            return shape_err(op, format!("input has {} channels, kernel expects {in_c}", xs[1]));
        }
        if self.shape(bias) != [out_c] {
            return shape_err(op, format!("bias shape {:?}, expected [{out_c}]", self.shape(bias)));
        }
        Ok((
            ConvGeom {
                channels: in_c,
                height: xs[2],
                width: xs[3],
                out_channels: out_c,
                kh: ks[2],
                kw: ks[3],
                stride: 1,
                padding: 0,
            },
            xs[0],
        ))
    }

    /// 2-d cross-correlation: `[N,C,H,W] * [K,C,kh,kw] + [K] -> [N,K,H',W']`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return arg_err("conv2d", "stride must be positive");
        }
        let (mut geom, batch) = self.conv_geom("conv2d", input, kernel, bias, false)?;
        geom.stride = stride;
        geom.padding = padding;
        if geom.kh > geom.height + 2 * padding || geom.kw > geom.width + 2 * padding {
            return shape_err("conv2d", "kernel larger than padded input");
        }
        let (ho, wo) = (geom.out_h(), geom.out_w());
        let in_len = geom.channels * geom.height * geom.width;
        let out_len = geom.out_channels * ho * wo;
        let mut out = vec![0.0; batch * out_len];
        {
            let x = self.value(input).data();
            let w = self.value(kernel).data();
            let b = self.value(bias).data();
            for n in 0..batch {
                kernels::conv2d_forward(
                    &x[n * in_len..(n + 1) * in_len],
                    w,
                    b,
                    &geom,
                    &mut out[n * out_len..(n + 1) * out_len],
                );
            }
        }
        let t = Tensor::new(&[batch, geom.out_channels, ho, wo], out)?;
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                batch,
            },
            rg,
        ))
    }

    /// Transposed convolution without padding: `[N,C,H,W]` with kernel
    /// `[C,K,kh,kw]` gives `[N,K,(H-1)s+kh,(W-1)s+kw]`.
    pub fn conv_transpose2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return arg_err("conv_transpose2d", "stride must be positive");
        }
        let (mut geom, batch) = self.conv_geom("conv_transpose2d", input, kernel, bias, true)?;
        geom.stride = stride;
        let (oh, ow) = kernels::transpose_out_hw(&geom);
        let in_len = geom.channels * geom.height * geom.width;
        let out_len = geom.out_channels * oh * ow;
        let mut out = vec![0.0; batch * out_len];
        {
            let x = self.value(input).data();
            let w = self.value(kernel).data();
            let b = self.value(bias).data();
            for n in 0..batch {
                kernels::conv_transpose2d_forward(
                    &x[n * in_len..(n + 1) * in_len],
                    w,
                    b,
                    &geom,
                    &mut out[n * out_len..(n + 1) * out_len],
                );
            }
        }
        let t = Tensor::new(&[batch, geom.out_channels, oh, ow], out)?;
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            t,
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                geom,
                batch,
            },
            rg,
        ))
    }

    /// 2x2 window, stride 2 max pooling over the last two dimensions.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() < 2 {
            return shape_err("maxpool2d", format!("need at least 2 dims, got {s:?}"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if h % 2 != 0 || w % 2 != 0 {
            return arg_err("maxpool2d", format!("spatial dims must be even, got {h}x{w}"));
        }
        let planes = numel(&s[..s.len() - 2]);
        let (out, argmax) = kernels::maxpool2x2(self.value(input).data(), planes, h, w);
        let mut os = s.clone();
        let n = os.len();
        os[n - 2] = h / 2;
        os[n - 1] = w / 2;
        let t = Tensor::new(&os, out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(t, Op::MaxPool2d { input, argmax }, rg))
    }

    /// `x[N,D] * w[D,M] + b[M]`
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || self.shape(b) != [ws[1]] {
            return shape_err(
                "dense",
                format!("x {xs:?}, w {ws:?}, b {:?}", self.shape(b)),
            );
        }
        let (n, d, m) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        kernels::gemm_acc(self.value(x).data(), self.value(w).data(), &mut out, n, d, m);
        let t = Tensor::new(&[n, m], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(t, Op::Dense { x, w, b }, rg))
    }

    /// Applies a sparse linear map to the flattened input; the result has
    /// `shape`, whose element count must equal the number of tap rows.
    pub fn gather(&mut self, input: Var, taps: Taps, shape: &[usize]) -> Result<Var> {
        if numel(shape) != taps.rows() {
            return shape_err("gather", format!("{} rows for shape {shape:?}", taps.rows()));
        }
        let x = self.value(input).data();
        if let Some(mx) = taps.max_index() {
            if mx >= x.len() {
                return arg_err("gather", format!("index {mx} out of range for {} elements", x.len()));
            }
        }
        let out = (0..taps.rows())
            .map(|i| taps.row(i).map(|(j, w)| w * x[j]).sum())
            .collect();
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(t, Op::Gather { input, taps }, rg))
    }

    /// Stacks tensors along the leading dimension; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return arg_err("concat", "no inputs");
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return shape_err("concat", format!("{s:?} does not stack with trailing {tail:?}"));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::Concat(parts.to_vec()), rg))
    }

    /// Nearest-neighbour x2 upsampling of the last two dimensions.
    pub fn upsample_nearest2x(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() < 2 {
            return shape_err("upsample_nearest2x", format!("need at least 2 dims, got {s:?}"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = numel(&s[..s.len() - 2]);
        let mut idx = Vec::with_capacity(planes * 4 * h * w);
        for p in 0..planes {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    idx.push(p * h * w + (i / 2) * w + j / 2);
                }
            }
        }
        let mut os = s;
        let n = os.len();
        os[n - 2] = 2 * h;
        os[n - 1] = 2 * w;
        self.gather(input, Taps::gather(&idx), &os)
    }

    /// Sum over elements of smooth-L1(pred - target).
    pub fn smooth_l1_sum(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() {
            return shape_err("smooth_l1_sum", format!("{} predictions, {} targets", p.len(), target.len()));
        }
        let s = p.iter().zip(target).map(|(a, b)| kernels::smooth_l1(a - b)).sum();
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::SmoothL1Sum {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of sigmoid(logits) against targets in [0,1].
    pub fn bce_with_logits_mean(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != target.len() {
            return shape_err("bce_with_logits_mean", format!("{} logits, {} targets", z.len(), target.len()));
        }
        let s = z
            .iter()
            .zip(target)
            .map(|(&a, &t)| kernels::bce_with_logits(a, t))
            .sum::<f64>()
            / z.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::BceWithLogitsMean {
                logits,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits[row])[label]` for `[N,K]` logits.
    pub fn softmax_cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return shape_err("softmax_cross_entropy_mean", format!("logits {s:?}, {} labels", labels.len()));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return arg_err("softmax_cross_entropy_mean", format!("label {bad} >= {k} classes"));
        }
        let z = self.value(logits).data();
        let probs = kernels::softmax_rows(z, k);
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = &z[r * k..(r + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        loss /= labels.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropyMean {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Populates gradients of the scalar `loss` with respect to every node
    /// that requires them. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if numel(&shape) != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Parent buffers are borrowed mutably, so the op is moved out while
        // it runs and put back afterwards.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        self.apply_backward(i, &op, g);
        self.nodes[i].op = op;
    }

    fn apply_backward(&mut self, i: usize, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(ga) = self.acc(v) {
                        kernels::axpy(1.0, g, ga);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                if let Some(ga) = self.acc(a) {
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(&bv) {
                        *d += gi * y;
                    }
                }
                if let Some(gb) = self.acc(b) {
                    for ((d, gi), x) in gb.iter_mut().zip(g).zip(&av) {
                        *d += gi * x;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = self.acc(a) {
                    kernels::axpy(f, g, ga);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel() as f64;
                if let Some(ga) = self.acc(a) {
                    ga.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::Relu(a) => {
                let x = self.nodes[a.0].value.data().to_vec();
                if let Some(ga) = self.acc(a) {
                    for ((d, gi), xv) in ga.iter_mut().zip(g).zip(&x) {
                        if *xv > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data().to_vec();
                if let Some(ga) = self.acc(a) {
                    for ((d, gi), yv) in ga.iter_mut().zip(g).zip(&y) {
                        *d += gi * yv * (1.0 - yv);
                    }
                }
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.data().to_vec();
                let k = *self.nodes[i].value.shape().last().unwrap();
                if let Some(ga) = self.acc(a) {
                    for ((yr, gr), dr) in y.chunks(k).zip(g.chunks(k)).zip(ga.chunks_mut(k)) {
                        let s = kernels::dot(yr, gr);
                        for j in 0..k {
                            dr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(a) {
                    kernels::axpy(1.0, g, ga);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                batch,
            } => self.conv_backward(g, input, kernel, bias, &geom, batch, false),
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                geom,
                batch,
            } => self.conv_backward(g, input, kernel, bias, &geom, batch, true),
            Op::MaxPool2d { input, ref argmax } => {
                if let Some(ga) = self.acc(input) {
                    for (gi, &src) in g.iter().zip(argmax) {
                        ga[src] += gi;
                    }
                }
            }
            Op::Dense { x, w, b } => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let m = self.nodes[w.0].value.shape()[1];
                let (n, d) = (xs[0], xs[1]);
                if let Some(gb) = self.acc(b) {
                    for row in g.chunks(m) {
                        kernels::axpy(1.0, row, gb);
                    }
                }
                if self.nodes[w.0].requires_grad {
                    let xv = self.nodes[x.0].value.data().to_vec();
                    let gw = self.acc(w).unwrap();
                    kernels::gemm_atb_acc(&xv, g, gw, n, d, m);
                }
                if self.nodes[x.0].requires_grad {
                    let wv = self.nodes[w.0].value.data().to_vec();
                    let gx = self.acc(x).unwrap();
                    kernels::gemm_abt_acc(g, &wv, gx, n, m, d);
                }
            }
            Op::Concat(ref parts) => {
                let mut at = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    if let Some(gp) = self.acc(p) {
                        kernels::axpy(1.0, &g[at..at + n], gp);
                    }
                    at += n;
                }
            }
            Op::Gather { input, ref taps } => {
                if let Some(ga) = self.acc(input) {
                    for (r, gi) in g.iter().enumerate() {
                        if *gi == 0.0 {
                            continue;
                        }
                        for (j, w) in taps.row(r) {
                            ga[j] += w * gi;
                        }
                    }
                }
            }
            Op::SmoothL1Sum { pred, ref target } => {
                let p = self.nodes[pred.0].value.data().to_vec();
                if let Some(ga) = self.acc(pred) {
                    for ((d, pv), t) in ga.iter_mut().zip(&p).zip(target) {
                        *d += g[0] * kernels::smooth_l1_grad(pv - t);
                    }
                }
            }
            Op::BceWithLogitsMean { logits, ref target } => {
                let z = self.nodes[logits.0].value.data().to_vec();
                let n = z.len() as f64;
                if let Some(ga) = self.acc(logits) {
                    for ((d, zv), t) in ga.iter_mut().zip(&z).zip(target) {
                        *d += g[0] * (kernels::sigmoid(*zv) - t) / n;
                    }
                }
            }
            Op::SoftmaxCrossEntropyMean {
                logits,
                ref labels,
                ref probs,
            } => {
                let k = self.nodes[logits.0].value.shape()[1];
                let n = labels.len() as f64;
                if let Some(ga) = self.acc(logits) {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            ga[r * k + j] += g[0] * (probs[r * k + j] - onehot) / n;
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &mut self,
        g: &[f64],
        input: Var,
        kernel: Var,
        bias: Var,
        geom: &ConvGeom,
        batch: usize,
        transpose: bool,
    ) {
        let in_len = geom.channels * geom.height * geom.width;
        let out_len = g.len() / batch;
        let need_x = self.nodes[input.0].requires_grad;
        let need_w = self.nodes[kernel.0].requires_grad;
        let need_b = self.nodes[bias.0].requires_grad;
        let mut gx = need_x.then(|| vec![0.0; batch * in_len]);
        let mut gw = need_w.then(|| vec![0.0; self.nodes[kernel.0].value.numel()]);
        let mut gb = need_b.then(|| vec![0.0; geom.out_channels]);
        {
            let x = self.nodes[input.0].value.data();
            let w = self.nodes[kernel.0].value.data();
            for n in 0..batch {
                let xs = &x[n * in_len..(n + 1) * in_len];
                let gs = &g[n * out_len..(n + 1) * out_len];
                let gxs = gx.as_deref_mut().map(|b| &mut b[n * in_len..(n + 1) * in_len]);
                if transpose {
                    kernels::conv_transpose2d_backward(xs, w, gs, geom, gxs, gw.as_deref_mut(), gb.as_deref_mut());
                } else {
                    kernels::conv2d_backward(xs, w, gs, geom, gxs, gw.as_deref_mut(), gb.as_deref_mut());
                }
            }
        }
        for (v, buf) in [(input, gx), (kernel, gw), (bias, gb)] {
            if let Some(buf) = buf {
                kernels::axpy(1.0, &buf, self.acc(v).unwrap());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64).with_grad());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_grad());
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]).with_grad());
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0).with_grad());
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(x, c).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn clear_and_zero_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0).with_grad());
        let y = tape.scale(x, 4.0);
        tape.backward(y).unwrap();
        tape.zero_grads();
        assert_eq!(tape.grad(x).unwrap(), &[0.0]);
        tape.clear();
        assert!(tape.is_empty());
    }

    #[test]
    fn shared_node_accumulates_from_both_uses() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, -2.0]).unwrap().with_grad());
        let a = tape.scale(x, 2.0);
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn softmax_stable_and_normalized() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 2], vec![1000.0, 1000.0, 0.0, 0.0]).unwrap());
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(tape.maxpool2d(x).is_err());
    }

    #[test]
    fn conv_channel_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(matches!(
            tape.conv2d(x, k, b, 1, 0),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }
}
