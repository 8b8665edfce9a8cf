//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value and the
//! references it needs for the backward pass. [`Tape::backward`] walks the
//! nodes once in reverse recording order. It takes `&self`, so forward values
//! can never be mutated by a backward pass, and calling it twice from the same
//! root returns identical gradients (gradients are never accumulated across
//! calls).

use std::fmt;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{gemm, Element, MatMut, MatRef, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One window lookup for [`Tape::gather_windows`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowQuery {
    /// Batch item in the feature tensor.
    pub item: usize,
    pub row: usize,
    pub col: usize,
}

/// Backward rule for a user-supplied operation: receives the input values, the
/// output value and the upstream gradient, returns one gradient per input.
pub type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Vec<T>>>;

enum Op<T> {
    Leaf,
    Linear { input: Var, weight: Var, bias: Var },
    Conv2d { input: Var, kernel: Var, bias: Var, stride: usize, padding: usize },
    Upsample2x { input: Var },
    Sine { input: Var, omega: f64 },
    Relu { input: Var },
    Add { lhs: Var, rhs: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Mse { pred: Var, target: Var },
    Sum { input: Var },
    Pick { input: Var, index: Vec<usize> },
    GatherWindows { input: Var, queries: Vec<WindowQuery>, radius: usize, region: (usize, usize) },
    Custom { name: &'static str, inputs: Vec<Var>, backward: CustomBackward<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x { .. } => "upsample_nearest2x",
            Op::Sine { .. } => "sine",
            Op::Relu { .. } => "relu",
            Op::Add { .. } => "add",
            Op::Concat { .. } => "concat",
            Op::Mse { .. } => "mse_loss",
            Op::Sum { .. } => "sum",
            Op::Pick { .. } => "pick",
            Op::GatherWindows { .. } => "gather_windows",
            Op::Custom { name, .. } => name,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of a forward computation.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(self.nodes.iter().map(|n| (n.op.name(), n.value.shape())))
            .finish()
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every recorded value that
/// requires them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of `var`, or `None` if no path connects it to the root.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Records an input value.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_var(&self, var: Var) -> Result<()> {
        if var.0 >= self.nodes.len() {
            return Err(Error::Autodiff(format!("variable {} is not on this tape", var.0)));
        }
        Ok(())
    }

    /// `out[n, j] = sum_i input[n, i] * weight[i, j] + bias[j]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        for v in [input, weight, bias] {
            self.check_var(v)?;
        }
        let (n, din) = self.value(input).dims2()?;
        let (wdin, dout) = self.value(weight).dims2()?;
        let b = self.value(bias);
        if wdin != din || b.shape() != [dout] {
            return Err(dim_err!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                self.value(input).shape(),
                self.value(weight).shape(),
                b.shape()
            ));
        }
        let mut out = Vec::with_capacity(n * dout);
        for _ in 0..n {
            out.extend_from_slice(b.data());
        }
        gemm(
            T::ONE,
            MatRef::row_major(self.value(input).data(), n, din),
            MatRef::row_major(self.value(weight).data(), din, dout),
            T::ONE,
            MatMut::row_major(&mut out, n, dout),
        );
        self.push(Tensor::from_parts(vec![n, dout], out), Op::Linear { input, weight, bias }, &[
            input, weight, bias,
        ])
    }

    /// 2-D cross-correlation with zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        for v in [input, kernel, bias] {
            self.check_var(v)?;
        }
        let geom = ConvGeometry::new(self.value(input), self.value(kernel), stride, padding)?;
        if self.value(bias).shape() != [geom.cout] {
            return Err(dim_err!(
                "conv2d: bias {:?} does not match {} output channels",
                self.value(bias).shape(),
                geom.cout
            ));
        }
        let out = conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        self.push(
            Tensor::from_parts(vec![geom.n, geom.cout, geom.oh, geom.ow], out),
            Op::Conv2d { input, kernel, bias, stride, padding },
            &[input, kernel, bias],
        )
    }

    /// Nearest-neighbour 2x spatial upsampling of an `N x C x H x W` tensor.
    pub fn upsample_nearest2x(&mut self, input: Var) -> Result<Var> {
        self.check_var(input)?;
        let (n, c, h, w) = self.value(input).dims4()?;
        let src = self.value(input).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::ZERO; n * c * oh * ow];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                let srow = &s[(y / 2) * w..(y / 2 + 1) * w];
                let drow = &mut d[y * ow..(y + 1) * ow];
                for (x, v) in drow.iter_mut().enumerate() {
                    *v = srow[x / 2];
                }
            }
        }
        self.push(Tensor::from_parts(vec![n, c, oh, ow], out), Op::Upsample2x { input }, &[input])
    }

    /// `sin(omega * x)` elementwise.
    pub fn sine(&mut self, input: Var, omega: f64) -> Result<Var> {
        self.check_var(input)?;
        let w = T::from_f64(omega);
        let x = self.value(input);
        let out = x.data().iter().map(|&v| (w * v).sin()).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Sine { input, omega }, &[input])
    }

    /// `max(0, x)` elementwise, with subgradient 0 at 0.
    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.check_var(input)?;
        let x = self.value(input);
        let out = x.data().iter().map(|&v| if v > T::ZERO { v } else { T::ZERO }).collect();
        let shape = x.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Relu { input }, &[input])
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.check_var(lhs)?;
        self.check_var(rhs)?;
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(dim_err!("add: shapes {:?} and {:?} differ", a.shape(), b.shape()));
        }
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let shape = a.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Add { lhs, rhs }, &[lhs, rhs])
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| dim_err!("concat of zero tensors"))?;
        for &v in inputs {
            self.check_var(v)?;
        }
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {} out of range for rank {}", axis, base.len()));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let agrees = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(dim_err!("concat: shape {:?} disagrees with {:?} off axis {}", s, base, axis));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(Tensor::from_parts(shape, out), Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    /// Mean of squared differences, as a one-element tensor.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check_var(pred)?;
        self.check_var(target)?;
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(dim_err!("mse_loss: shapes {:?} and {:?} differ", p.shape(), t.shape()));
        }
        // accumulate in f64 so the f32 loss does not depend on summation drift
        let sum: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| {
                let d = (a - b).to_f64();
                d * d
            })
            .sum();
        let loss = T::from_f64(sum / p.numel() as f64);
        self.push(Tensor::scalar(loss), Op::Mse { pred, target }, &[pred, target])
    }

    /// Sum of all elements.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.check_var(input)?;
        let s: f64 = self.value(input).data().iter().map(|v| v.to_f64()).sum();
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum { input }, &[input])
    }

    /// `out[n] = input[n, index[n]]` for a rank-2 input.
    pub fn pick(&mut self, input: Var, index: Vec<usize>) -> Result<Var> {
        self.check_var(input)?;
        let (n, c) = self.value(input).dims2()?;
        if index.len() != n || index.iter().any(|&i| i >= c) {
            return Err(dim_err!("pick: {} indices into {}x{} tensor", index.len(), n, c));
        }
        let data = self.value(input).data();
        let out = index.iter().enumerate().map(|(r, &i)| data[r * c + i]).collect();
        self.push(Tensor::from_parts(vec![n], out), Op::Pick { input, index }, &[input])
    }

    /// Extracts a `(2r+1) x (2r+1)` window around each query from an
    /// `N x C x H x W` feature tensor and flattens it in (row, column,
    /// channel) order, giving a `Q x (2r+1)^2 C` tensor.
    ///
    /// Positions outside `region` (the top-left `h x w` part of the map) are
    /// mirrored back inside it without repeating the edge sample.
    pub fn gather_windows(
        &mut self,
        input: Var,
        queries: Vec<WindowQuery>,
        radius: usize,
        region: (usize, usize),
    ) -> Result<Var> {
        self.check_var(input)?;
        let (n, c, h, w) = self.value(input).dims4()?;
        let (rh, rw) = region;
        if rh > h || rw > w || rh <= radius || rw <= radius {
            return Err(dim_err!(
                "gather_windows: region {}x{} invalid for {}x{} map and radius {}",
                rh,
                rw,
                h,
                w,
                radius
            ));
        }
        if queries.is_empty() {
            return Err(dim_err!("gather_windows: no queries"));
        }
        if let Some(q) = queries.iter().find(|q| q.item >= n || q.row >= rh || q.col >= rw) {
            return Err(dim_err!("gather_windows: query {:?} outside {}x{}x{}", q, n, rh, rw));
        }
        let side = 2 * radius + 1;
        let width = side * side * c;
        let src = self.value(input).data();
        let mut out = vec![T::ZERO; queries.len() * width];
        for (q, dst) in queries.iter().zip(out.chunks_exact_mut(width)) {
            for_each_window_tap(q, radius, (rh, rw), |tap, y, x| {
                for ch in 0..c {
                    dst[tap * c + ch] = src[((q.item * c + ch) * h + y) * w + x];
                }
            });
        }
        let q = queries.len();
        self.push(
            Tensor::from_parts(vec![q, width], out),
            Op::GatherWindows { input, queries, radius, region },
            &[input],
        )
    }

    /// Records an operation whose forward value the caller has computed.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        output: Tensor<T>,
        backward: CustomBackward<T>,
    ) -> Result<Var> {
        for &v in inputs {
            self.check_var(v)?;
        }
        self.push(output, Op::Custom { name, inputs: inputs.to_vec(), backward }, inputs)
    }

    /// Gradients of the one-element `root` with respect to every recorded
    /// value on a path from a gradient-requiring leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        self.check_var(root)?;
        if self.value(root).numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![T::ONE]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else { continue };
            self.backward_node(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { input, weight, bias } => {
                let (n, din) = self.value(*input).dims2().expect("validated in forward");
                let dout = self.value(*bias).numel();
                let gm = MatRef::row_major(g, n, dout);
                if let Some(buf) = self.grad_slot(grads, *input) {
                    let w = MatRef::row_major(self.value(*weight).data(), din, dout);
                    gemm(T::ONE, gm, w.t(), T::ONE, MatMut::row_major(buf, n, din));
                }
                if let Some(buf) = self.grad_slot(grads, *weight) {
                    let x = MatRef::row_major(self.value(*input).data(), n, din);
                    gemm(T::ONE, x.t(), gm, T::ONE, MatMut::row_major(buf, din, dout));
                }
                if let Some(buf) = self.grad_slot(grads, *bias) {
                    for row in g.chunks_exact(dout) {
                        for (b, &v) in buf.iter_mut().zip(row) {
                            *b += v;
                        }
                    }
                }
            }
            Op::Conv2d { input, kernel, bias, stride, padding } => {
                let geom = ConvGeometry::new(self.value(*input), self.value(*kernel), *stride, *padding)
                    .expect("validated in forward");
                if let Some(buf) = self.grad_slot(grads, *bias) {
                    let plane = geom.oh * geom.ow;
                    for item in g.chunks_exact(geom.cout * plane) {
                        for (co, b) in buf.iter_mut().enumerate() {
                            *b += item[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
                        }
                    }
                }
                let need_kernel = self.nodes[kernel.0].requires_grad;
                let need_input = self.nodes[input.0].requires_grad;
                let mut dkernel = need_kernel.then(|| vec![T::ZERO; self.value(*kernel).numel()]);
                let mut dinput = need_input.then(|| vec![T::ZERO; self.value(*input).numel()]);
                conv2d_backward(
                    &geom,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    dinput.as_deref_mut(),
                    dkernel.as_deref_mut(),
                );
                if let (Some(d), Some(buf)) = (dkernel, self.grad_slot(grads, *kernel)) {
                    add_into(buf, &d);
                }
                if let (Some(d), Some(buf)) = (dinput, self.grad_slot(grads, *input)) {
                    add_into(buf, &d);
                }
            }
            Op::Upsample2x { input } => {
                let (n, c, h, w) = self.value(*input).dims4().expect("validated in forward");
                if let Some(buf) = self.grad_slot(grads, *input) {
                    let ow = 2 * w;
                    for plane in 0..n * c {
                        let gs = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                        let d = &mut buf[plane * h * w..(plane + 1) * h * w];
                        for (y, grow) in gs.chunks_exact(ow).enumerate() {
                            let drow = &mut d[(y / 2) * w..(y / 2 + 1) * w];
                            for (x, &v) in grow.iter().enumerate() {
                                drow[x / 2] += v;
                            }
                        }
                    }
                }
            }
            Op::Sine { input, omega } => {
                let w = T::from_f64(*omega);
                let x = self.value(*input).data();
                if let Some(buf) = self.grad_slot(grads, *input) {
                    for ((b, &gv), &xv) in buf.iter_mut().zip(g).zip(x) {
                        *b += gv * w * (w * xv).cos();
                    }
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                if let Some(buf) = self.grad_slot(grads, *input) {
                    for ((b, &gv), &xv) in buf.iter_mut().zip(g).zip(x) {
                        if xv > T::ZERO {
                            *b += gv;
                        }
                    }
                }
            }
            Op::Add { lhs, rhs } => {
                for v in [*lhs, *rhs] {
                    if let Some(buf) = self.grad_slot(grads, v) {
                        add_into(buf, g);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.value(v).shape()[*axis] * inner;
                    if let Some(buf) = self.grad_slot(grads, v) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            add_into(&mut buf[o * chunk..(o + 1) * chunk], src);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred).data();
                let t = self.value(*target).data();
                let scale = g[0] * T::from_f64(2.0 / p.len() as f64);
                if let Some(buf) = self.grad_slot(grads, *pred) {
                    for ((b, &a), &y) in buf.iter_mut().zip(p).zip(t) {
                        *b += scale * (a - y);
                    }
                }
                if let Some(buf) = self.grad_slot(grads, *target) {
                    for ((b, &a), &y) in buf.iter_mut().zip(p).zip(t) {
                        *b -= scale * (a - y);
                    }
                }
            }
            Op::Sum { input } => {
                if let Some(buf) = self.grad_slot(grads, *input) {
                    for b in buf.iter_mut() {
                        *b += g[0];
                    }
                }
            }
            Op::Pick { input, index } => {
                let (_, c) = self.value(*input).dims2().expect("validated in forward");
                if let Some(buf) = self.grad_slot(grads, *input) {
                    for (r, (&i, &gv)) in index.iter().zip(g).enumerate() {
                        buf[r * c + i] += gv;
                    }
                }
            }
            Op::GatherWindows { input, queries, radius, region } => {
                let (_, c, h, w) = self.value(*input).dims4().expect("validated in forward");
                let side = 2 * radius + 1;
                let width = side * side * c;
                if let Some(buf) = self.grad_slot(grads, *input) {
                    for (q, src) in queries.iter().zip(g.chunks_exact(width)) {
                        for_each_window_tap(q, *radius, *region, |tap, y, x| {
                            for ch in 0..c {
                                buf[((q.item * c + ch) * h + y) * w + x] += src[tap * c + ch];
                            }
                        });
                    }
                }
            }
            Op::Custom { inputs, backward, .. } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let contributions = backward(&values, &node.value, g);
                for (&v, d) in inputs.iter().zip(contributions) {
                    if let Some(buf) = self.grad_slot(grads, v) {
                        add_into(buf, &d);
                    }
                }
            }
        }
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], var: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[var.0].requires_grad {
            return None;
        }
        let len = self.nodes[var.0].value.numel();
        Some(grads[var.0].get_or_insert_with(|| vec![T::ZERO; len]))
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Mirrors `i` into `0..n` without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`). Preserves index parity, hence CFA phase.
pub fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n >= 2);
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

fn for_each_window_tap(
    q: &WindowQuery,
    radius: usize,
    region: (usize, usize),
    mut f: impl FnMut(usize, usize, usize),
) {
    let r = radius as isize;
    let mut tap = 0;
    for dy in -r..=r {
        let y = reflect_index(q.row as isize + dy, region.0);
        for dx in -r..=r {
            let x = reflect_index(q.col as isize + dx, region.1);
            f(tap, y, x);
            tap += 1;
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new<T: Element>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let (n, cin, h, w) = input.dims4()?;
        let (cout, kcin, kh, kw) = kernel.dims4()?;
        if kcin != cin || kh != kw || kh % 2 == 0 {
            return Err(dim_err!(
                "conv2d: kernel {:?} incompatible with input {:?} (square odd kernel required)",
                kernel.shape(),
                input.shape()
            ));
        }
        if stride == 0 {
            return Err(dim_err!("conv2d: stride must be positive"));
        }
        // floor convention: trailing rows/cols that do not fill a full stride are dropped
        let out_dim = |d: usize| -> Result<usize> {
            let span = d + 2 * padding;
            if span < kh {
                return Err(dim_err!(
                    "conv2d: kernel {} larger than padded input {} + 2*{}",
                    kh,
                    d,
                    padding
                ));
            }
            Ok((span - kh) / stride + 1)
        };
        let (oh, ow) = (out_dim(h)?, out_dim(w)?);
        Ok(Self { n, cin, h, w, cout, k: kh, stride, padding, oh, ow })
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Source pixel for output `(oy, ox)` and kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, o: usize, kk: usize, stride_dim: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < stride_dim).then_some(pos as usize)
    }

    /// Outputs `lo..hi` along a row whose tap `kx` lands inside the input.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if p > kx { (p - kx).div_ceil(s) } else { 0 };
        let hi = if self.w + p > kx { (self.w + p - kx).div_ceil(s) } else { 0 };
        (lo.min(self.ow), hi.min(self.ow).max(lo.min(self.ow)))
    }
}

fn im2col<T: Element>(g: &ConvGeometry, img: &[T], cols: &mut [T]) {
    let ncols = g.col_cols();
    for ci in 0..g.cin {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.oh {
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    match g.source(oy, ky, g.h) {
                        None => drow.fill(T::ZERO),
                        Some(y) => {
                            let srow = &plane[y * g.w..(y + 1) * g.w];
                            drow[..lo].fill(T::ZERO);
                            drow[hi..].fill(T::ZERO);
                            if lo < hi {
                                let x0 = lo * g.stride + kx - g.padding;
                                if g.stride == 1 {
                                    drow[lo..hi].copy_from_slice(&srow[x0..x0 + hi - lo]);
                                } else {
                                    for (d, &v) in drow[lo..hi].iter_mut().zip(srow[x0..].iter().step_by(g.stride)) {
                                        *d = v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &ConvGeometry, cols: &[T], img: &mut [T]) {
    let ncols = g.col_cols();
    for ci in 0..g.cin {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = g.valid_cols(kx);
                if lo >= hi {
                    continue;
                }
                let x0 = lo * g.stride + kx - g.padding;
                for oy in 0..g.oh {
                    let Some(y) = g.source(oy, ky, g.h) else { continue };
                    let srow = &src[oy * g.ow + lo..oy * g.ow + hi];
                    let drow = &mut plane[y * g.w..(y + 1) * g.w];
                    for (d, &v) in drow[x0..].iter_mut().step_by(g.stride).zip(srow) {
                        *d += v;
                    }
                }
            }
        }
    }
}

fn conv2d_forward<T: Element>(g: &ConvGeometry, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let in_item = g.cin * g.h * g.w;
    let out_item = g.cout * cols_n;
    let mut out = vec![T::ZERO; g.n * out_item];
    let mut cols = vec![T::ZERO; rows * cols_n];
    for item in 0..g.n {
        im2col(g, &input[item * in_item..(item + 1) * in_item], &mut cols);
        let dst = &mut out[item * out_item..(item + 1) * out_item];
        for (co, chunk) in dst.chunks_exact_mut(cols_n).enumerate() {
            chunk.fill(bias[co]);
        }
        gemm(
            T::ONE,
            MatRef::row_major(kernel, g.cout, rows),
            MatRef::row_major(&cols, rows, cols_n),
            T::ONE,
            MatMut::row_major(dst, g.cout, cols_n),
        );
    }
    out
}

fn conv2d_backward<T: Element>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    mut dinput: Option<&mut [T]>,
    mut dkernel: Option<&mut [T]>,
) {
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let in_item = g.cin * g.h * g.w;
    let out_item = g.cout * cols_n;
    let mut cols = vec![T::ZERO; rows * cols_n];
    for item in 0..g.n {
        let go = MatRef::row_major(&grad_out[item * out_item..(item + 1) * out_item], g.cout, cols_n);
        if let Some(dk) = dkernel.as_deref_mut() {
            im2col(g, &input[item * in_item..(item + 1) * in_item], &mut cols);
            gemm(
                T::ONE,
                go,
                MatRef::row_major(&cols, rows, cols_n).t(),
                T::ONE,
                MatMut::row_major(dk, g.cout, rows),
            );
        }
        if let Some(di) = dinput.as_deref_mut() {
            gemm(
                T::ONE,
                MatRef::row_major(kernel, g.cout, rows).t(),
                go,
                T::ZERO,
                MatMut::row_major(&mut cols, rows, cols_n),
            );
            col2im(g, &cols, &mut di[item * in_item..(item + 1) * in_item]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_analytic() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let x = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let w = tape.constant(t(&[2, 1], &[2.0, 3.0]));
        let b = tape.constant(t(&[1], &[1.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
    }

    #[test]
    fn linear_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let w = tape.constant(t(&[2, 2], &[1.0; 4]));
        let b = tape.constant(t(&[2], &[0.0; 2]));
        assert!(matches!(tape.linear(x, w, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn linear_weight_gradient_is_replicated_input_sums() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 5.0]));
        let w = tape.param(t(&[2, 3], &[0.1; 6]));
        let b = tape.param(t(&[3], &[0.0; 3]));
        let y = tape.linear(x, w, b).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap(), &[4.0, 4.0, 4.0, 7.0, 7.0, 7.0]);
        assert_eq!(g.get(b).unwrap(), &[2.0, 2.0, 2.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn conv_sum_of_ones_and_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([1, 1, 3, 3], 1.0).unwrap());
        let k = tape.constant(Tensor::full([1, 1, 3, 3], 1.0).unwrap());
        let b = tape.constant(Tensor::zeros([1]).unwrap());
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);

        let img = Tensor::from_fn([1, 1, 4, 5], |i| i as f64 * 0.5).unwrap();
        let x = tape.constant(img.clone());
        let k = tape.constant(Tensor::full([1, 1, 1, 1], 1.0).unwrap());
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), &img);
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([1, 1, 2, 2]).unwrap());
        let k = tape.constant(Tensor::zeros([1, 1, 5, 5]).unwrap());
        let b = tape.constant(Tensor::zeros([1]).unwrap());
        assert!(matches!(tape.conv2d(x, k, b, 1, 0), Err(Error::Dimension(_))));
        let ok = tape.conv2d(x, k, b, 1, 2).unwrap();
        assert_eq!(tape.value(ok).shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn stride_two_conv_halves_even_sizes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([1, 2, 8, 6], 1.0).unwrap());
        let k = tape.constant(Tensor::full([3, 2, 3, 3], 1.0).unwrap());
        let b = tape.constant(Tensor::zeros([3]).unwrap());
        let y = tape.conv2d(x, k, b, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 4, 3]);
        // top-left output sees a 2x2 patch of ones per channel
        assert_eq!(tape.value(y).data()[0], 8.0);
        // interior output sees the full 3x3 support
        assert_eq!(tape.value(y).data()[3 + 1], 18.0);
    }

    #[test]
    fn upsample_blocks_and_backward() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.upsample_nearest2x(x).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[4.0; 4]);

        let one = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let up = tape.upsample_nearest2x(one).unwrap();
        assert_eq!(tape.value(up).data(), &[1.0; 4]);
    }

    #[test]
    fn sine_values() {
        let mut tape = Tape::<f64>::new();
        let omega = 30.0;
        let x = tape.constant(t(&[2], &[0.0, std::f64::consts::PI / (2.0 * omega)]));
        let y = tape.sine(x, omega).unwrap();
        assert_eq!(tape.value(y).data()[0], 0.0);
        assert!((tape.value(y).data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn relu_values_and_mask() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_values_and_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[1], &[3.0]));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
        let single = tape.concat(&[a], 0).unwrap();
        assert_eq!(tape.value(single), tape.value(a));

        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let n = tape.constant(t(&[3, 1], &[9.0; 3]));
        assert!(matches!(tape.concat(&[m, n], 1), Err(Error::Dimension(_))));
        let n = tape.constant(t(&[2, 1], &[8.0, 9.0]));
        let mn = tape.concat(&[m, n], 1).unwrap();
        assert_eq!(tape.value(mn).data(), &[1.0, 2.0, 8.0, 3.0, 4.0, 9.0]);
    }

    #[test]
    fn mse_values() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(t(&[2], &[1.0, 0.0]));
        let q = tape.constant(t(&[2], &[0.0, 0.0]));
        let l = tape.mse_loss(p, q).unwrap();
        assert_eq!(tape.value(l).data(), &[0.5]);
        let l = tape.mse_loss(p, p).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);
        let r = tape.constant(t(&[3], &[0.0; 3]));
        assert!(tape.mse_loss(p, r).is_err());
    }

    #[test]
    fn backward_twice_is_identical() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1, 3], &[0.3, -0.2, 0.9]));
        let w = tape.param(Tensor::from_fn([3, 2], |i| 0.1 * i as f64 - 0.2).unwrap());
        let b = tape.param(t(&[2], &[0.05, -0.05]));
        let y = tape.linear(x, w, b).unwrap();
        let y = tape.sine(y, 3.0).unwrap();
        let target = tape.constant(t(&[1, 2], &[0.5, 0.5]));
        let l = tape.mse_loss(y, target).unwrap();
        let before = tape.value(y).clone();
        let g1 = tape.backward(l).unwrap();
        let g2 = tape.backward(l).unwrap();
        for v in [x, w, b] {
            assert_eq!(g1.get(v), g2.get(v));
        }
        assert_eq!(tape.value(y), &before);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Autodiff(_))));
    }

    #[test]
    fn reflect_preserves_parity() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(3, 5), 3);
        for i in -6..12isize {
            assert_eq!(reflect_index(i, 6) % 2, i.rem_euclid(2) as usize);
        }
    }

    #[test]
    fn non_finite_outputs_are_errors() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new([1, 1], vec![3.0e38f32]).unwrap());
        let w = tape.constant(Tensor::new([1, 1], vec![10.0f32]).unwrap());
        let b = tape.constant(Tensor::new([1], vec![0.0f32]).unwrap());
        assert!(matches!(tape.linear(x, w, b), Err(Error::NonFinite { op: "linear" })));
    }
}
