//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! A [`Graph`] is an append-only arena of nodes. Every op pushes one node whose
//! inputs have strictly smaller ids, so node order is already a topological
//! order and [`Graph::backward`] is a single reverse sweep.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, PoolGeometry};
use crate::tensor::{Float, Tensor};

/// Rows whose L2 norm falls below this are treated as zero rows.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Conv2d {
        input: usize,
        weight: usize,
        geom: ConvGeometry,
    },
    ChannelBias {
        input: usize,
        bias: usize,
    },
    Relu(usize),
    AvgPool2d {
        input: usize,
        geom: PoolGeometry,
    },
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Mean(usize),
    SumAxis {
        input: usize,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    Softmax {
        input: usize,
        temperature: f64,
    },
    LogSoftmax {
        input: usize,
        temperature: f64,
    },
    RowL2Normalize(usize),
    RowNorm(usize),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Confined to one thread; build one graph per step.
pub struct Graph<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var { graph: self, id }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Back-propagate from a scalar `loss`.
    ///
    /// Every node reachable from `loss` that requires a gradient ends up with a
    /// populated entry. Contributions from multiple consumers are summed.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        assert!(std::ptr::eq(loss.graph, self), "loss belongs to another graph");
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.id].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), T::ONE));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            for (input, dx) in input_grads(&nodes, node, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match grads[input].as_mut() {
                    Some(acc) => acc.add_assign(&dx),
                    None => grads[input] = Some(dx),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Float> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Float> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn rank2(op: &str, s: &[usize]) -> Result<(usize, usize)> {
    match *s {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Shape(format!("{op}: expected a rank-2 tensor, got {s:?}"))),
    }
}

fn rank4(op: &str, s: &[usize]) -> Result<[usize; 4]> {
    match *s {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::Shape(format!("{op}: expected a rank-4 tensor, got {s:?}"))),
    }
}

fn check_finite<T: Float>(op: &str, t: &Tensor<T>) -> Result<()> {
    if !t.all_finite() {
        return Err(Error::Numeric(format!("{op}: non-finite input")));
    }
    Ok(())
}

impl<'g, T: Float> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        self.graph.nodes.borrow()[self.id].value.item()
    }

    /// Copy of this value as a gradient-free leaf.
    pub fn detach(&self) -> Var<'g, T> {
        let value = (*self.value()).clone();
        self.graph.constant(value)
    }

    fn unary(&self, value: Tensor<T>, op: Op) -> Var<'g, T> {
        self.graph.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'g, T>, value: Tensor<T>, op: Op) -> Var<'g, T> {
        assert!(std::ptr::eq(self.graph, other.graph), "operands belong to different graphs");
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(value, op, rg)
    }

    pub fn matmul(&self, rhs: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), rhs.value());
        let (m, k) = rank2("matmul", a.shape())?;
        let (k2, n) = rank2("matmul", b.shape())?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions disagree for {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut out = vec![T::ZERO; m * n];
        T::gemm(m, k, n, T::ONE, a.data(), (k as isize, 1), b.data(), (n as isize, 1), T::ZERO, &mut out, (n as isize, 1));
        Ok(self.binary(rhs, Tensor::from_parts(vec![m, n], out), Op::MatMul(self.id, rhs.id)))
    }

    pub fn transpose(&self) -> Result<Var<'g, T>> {
        let a = self.value();
        let (r, c) = rank2("transpose", a.shape())?;
        Ok(self.unary(transpose(a.data(), r, c), Op::Transpose(self.id)))
    }

    /// Cross-correlation of `self` (`b×c_in×h×w`) with `weight` (`c_out×c_in×k×k`).
    pub fn conv2d(&self, weight: &Var<'g, T>, stride: usize, padding: usize) -> Result<Var<'g, T>> {
        let (x, w) = (self.value(), weight.value());
        let [batch, c_in, h, wd] = rank4("conv2d input", x.shape())?;
        let [c_out, wc_in, kh, kw] = rank4("conv2d weight", w.shape())?;
        if wc_in != c_in || kh != kw {
            return Err(Error::Shape(format!(
                "conv2d: weight {:?} incompatible with input {:?}",
                w.shape(),
                x.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d: stride must be positive".into()));
        }
        let (Some(out_h), Some(out_w)) = (
            kernels::out_extent(h, kh, stride, padding),
            kernels::out_extent(wd, kw, stride, padding),
        ) else {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh} with padding {padding} gives no output for a {h}x{wd} input"
            )));
        };
        let geom = ConvGeometry {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            kernel: kh,
            stride,
            padding,
            out_h,
            out_w,
        };
        let out = kernels::conv2d_forward(&geom, x.data(), w.data());
        Ok(self.binary(
            weight,
            Tensor::from_parts(vec![batch, c_out, out_h, out_w], out),
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                geom,
            },
        ))
    }

    /// Adds `bias[c]` along axis 1 of a tensor of rank ≥ 2.
    pub fn add_channel_bias(&self, bias: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (x, b) = (self.value(), bias.value());
        let s = x.shape();
        if s.len() < 2 || b.shape() != [s[1]] {
            return Err(Error::Shape(format!(
                "add_channel_bias: bias {:?} does not match axis 1 of {s:?}",
                b.shape()
            )));
        }
        let inner: usize = s[2..].iter().product();
        let mut out = x.data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let bv = b.data()[i % s[1]];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        Ok(self.binary(
            bias,
            Tensor::from_parts(s.to_vec(), out),
            Op::ChannelBias {
                input: self.id,
                bias: bias.id,
            },
        ))
    }

    pub fn relu(&self) -> Var<'g, T> {
        let x = self.value();
        self.unary(x.map(|v| if v > T::ZERO { v } else { T::ZERO }), Op::Relu(self.id))
    }

    /// Average pooling over square `kernel` windows of a `b×c×h×w` tensor.
    pub fn avg_pool2d(&self, kernel: usize, stride: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let [b, c, h, w] = rank4("avg_pool2d", x.shape())?;
        let (Some(out_h), Some(out_w)) = (
            kernels::out_extent(h, kernel, stride, 0),
            kernels::out_extent(w, kernel, stride, 0),
        ) else {
            return Err(Error::Shape(format!(
                "avg_pool2d: window {kernel} does not fit a {h}x{w} map"
            )));
        };
        let geom = PoolGeometry {
            planes: b * c,
            h,
            w,
            kernel,
            stride,
            out_h,
            out_w,
        };
        let out = kernels::avg_pool_forward(&geom, x.data());
        Ok(self.unary(
            Tensor::from_parts(vec![b, c, out_h, out_w], out),
            Op::AvgPool2d { input: self.id, geom },
        ))
    }

    /// Spatial mean of a square `b×c×h×h` map, returned as `b×c`.
    pub fn global_avg_pool(&self) -> Result<Var<'g, T>> {
        let [b, c, h, w] = rank4("global_avg_pool", &self.shape())?;
        if h != w {
            return Err(Error::Shape(format!("global_avg_pool: non-square map {h}x{w}")));
        }
        self.avg_pool2d(h, h)?.reshape(&[b, c])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let x = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(x, Op::Reshape(self.id)))
    }

    fn zip_with(&self, rhs: &Var<'g, T>, name: &str, f: impl Fn(T, T) -> T, op: Op) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), rhs.value());
        same_shape(name, a.shape(), b.shape())?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.binary(rhs, Tensor::from_parts(a.shape().to_vec(), data), op))
    }

    pub fn add(&self, rhs: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.zip_with(rhs, "add", |x, y| x + y, Op::Add(self.id, rhs.id))
    }

    pub fn sub(&self, rhs: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.zip_with(rhs, "sub", |x, y| x - y, Op::Sub(self.id, rhs.id))
    }

    pub fn mul(&self, rhs: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.zip_with(rhs, "mul", |x, y| x * y, Op::Mul(self.id, rhs.id))
    }

    pub fn square(&self) -> Var<'g, T> {
        self.mul(self).expect("identical shapes")
    }

    pub fn scale(&self, factor: f64) -> Var<'g, T> {
        let c = T::from_f64(factor);
        self.unary(self.value().map(|v| v * c), Op::Scale(self.id, factor))
    }

    pub fn sum(&self) -> Var<'g, T> {
        let s: T = self.value().data().iter().copied().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g, T> {
        let x = self.value();
        let s: T = x.data().iter().copied().sum();
        let m = s * T::from_f64(1.0 / x.numel() as f64);
        self.unary(Tensor::scalar(m), Op::Mean(self.id))
    }

    /// Sum over `axis`, removing it. A rank-1 input reduces to shape `[1]`.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let s = x.shape();
        if axis >= s.len() {
            return Err(Error::Shape(format!("sum_axis: axis {axis} out of range for {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let axis_len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for a in 0..axis_len {
                let src = &x.data()[(o * axis_len + a) * inner..(o * axis_len + a + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let mut shape: Vec<usize> = s.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.unary(
            Tensor::from_parts(shape, out),
            Op::SumAxis {
                input: self.id,
                outer,
                axis_len,
                inner,
            },
        ))
    }

    /// Row-wise `softmax(z / temperature)` with max subtraction.
    pub fn softmax(&self, temperature: f64) -> Result<Var<'g, T>> {
        let z = self.value();
        let (rows, cols) = rank2("softmax", z.shape())?;
        check_temperature(temperature)?;
        check_finite("softmax", &z)?;
        let out = softmax_rows(z.data(), rows, cols, temperature);
        Ok(self.unary(
            Tensor::from_parts(vec![rows, cols], out),
            Op::Softmax {
                input: self.id,
                temperature,
            },
        ))
    }

    /// Row-wise `log_softmax(z / temperature)`.
    pub fn log_softmax(&self, temperature: f64) -> Result<Var<'g, T>> {
        let z = self.value();
        let (rows, cols) = rank2("log_softmax", z.shape())?;
        check_temperature(temperature)?;
        check_finite("log_softmax", &z)?;
        let inv_t = T::from_f64(1.0 / temperature);
        let mut out = vec![T::ZERO; rows * cols];
        for (row, dst) in z.data().chunks(cols).zip(out.chunks_mut(cols)) {
            let max = row.iter().copied().fold(row[0], T::max) * inv_t;
            let lse = row.iter().map(|&v| (v * inv_t - max).exp()).sum::<T>().ln() + max;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = v * inv_t - lse;
            }
        }
        Ok(self.unary(
            Tensor::from_parts(vec![rows, cols], out),
            Op::LogSoftmax {
                input: self.id,
                temperature,
            },
        ))
    }

    /// Divides each row by its L2 norm; rows with norm below [`NORM_EPS`] stay zero.
    pub fn row_l2_normalize(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        let (rows, cols) = rank2("row_l2_normalize", x.shape())?;
        let eps = T::from_f64(NORM_EPS);
        let mut out = vec![T::ZERO; rows * cols];
        for (row, dst) in x.data().chunks(cols).zip(out.chunks_mut(cols)) {
            let norm = l2(row);
            if norm >= eps {
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d = v / norm;
                }
            }
        }
        Ok(self.unary(Tensor::from_parts(vec![rows, cols], out), Op::RowL2Normalize(self.id)))
    }

    /// L2 norm of each row of a rank-2 tensor, shape `[rows]`.
    pub fn row_norm(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        let (rows, cols) = rank2("row_norm", x.shape())?;
        let out = x.data().chunks(cols).map(l2).collect();
        Ok(self.unary(Tensor::from_parts(vec![rows], out), Op::RowNorm(self.id)))
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive and finite, got {t}")));
    }
    Ok(())
}

fn l2<T: Float>(row: &[T]) -> T {
    row.iter().map(|&v| v * v).sum::<T>().sqrt()
}

fn transpose<T: Float>(data: &[T], r: usize, c: usize) -> Tensor<T> {
    let mut out = vec![T::ZERO; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    Tensor::from_parts(vec![c, r], out)
}

pub(crate) fn softmax_rows<T: Float>(z: &[T], rows: usize, cols: usize, temperature: f64) -> Vec<T> {
    let inv_t = T::from_f64(1.0 / temperature);
    let mut out = vec![T::ZERO; rows * cols];
    for (row, dst) in z.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(row[0], T::max) * inv_t;
        let mut total = T::ZERO;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v * inv_t - max).exp();
            total += *d;
        }
        let inv = T::ONE / total;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    out
}

fn input_grads<T: Float>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>) -> Vec<(usize, Tensor<T>)> {
    let val = |id: usize| -> &Tensor<T> { &nodes[id].value };
    let wants = |id: usize| nodes[id].requires_grad;
    let like = |id: usize, data: Vec<T>| Tensor::from_parts(val(id).shape().to_vec(), data);
    let gd = g.data();

    match node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            let mut out = Vec::new();
            if wants(a) {
                // dA = dC · B^T
                let mut da = vec![T::ZERO; m * k];
                T::gemm(m, n, k, T::ONE, gd, (n as isize, 1), bv.data(), (1, n as isize), T::ZERO, &mut da, (k as isize, 1));
                out.push((a, like(a, da)));
            }
            if wants(b) {
                // dB = A^T · dC
                let mut db = vec![T::ZERO; k * n];
                T::gemm(k, m, n, T::ONE, av.data(), (1, k as isize), gd, (n as isize, 1), T::ZERO, &mut db, (n as isize, 1));
                out.push((b, like(b, db)));
            }
            out
        }
        Op::Transpose(a) => {
            let s = g.shape();
            vec![(a, transpose(gd, s[0], s[1]))]
        }
        Op::Conv2d { input, weight, geom } => {
            let (dx, dw) = kernels::conv2d_backward(
                &geom,
                val(input).data(),
                val(weight).data(),
                gd,
                wants(input),
                wants(weight),
            );
            let mut out = Vec::new();
            if let Some(dx) = dx {
                out.push((input, like(input, dx)));
            }
            if let Some(dw) = dw {
                out.push((weight, like(weight, dw)));
            }
            out
        }
        Op::ChannelBias { input, bias } => {
            let s = g.shape();
            let channels = s[1];
            let inner: usize = s[2..].iter().product();
            let mut out = vec![(input, g.clone())];
            if wants(bias) {
                let mut db = vec![T::ZERO; channels];
                for (i, chunk) in gd.chunks(inner).enumerate() {
                    db[i % channels] += chunk.iter().copied().sum::<T>();
                }
                out.push((bias, like(bias, db)));
            }
            out
        }
        Op::Relu(a) => {
            let x = val(a).data();
            let d = gd.iter().zip(x).map(|(&g, &x)| if x > T::ZERO { g } else { T::ZERO }).collect();
            vec![(a, like(a, d))]
        }
        Op::AvgPool2d { input, geom } => vec![(input, like(input, kernels::avg_pool_backward(&geom, gd)))],
        Op::Reshape(a) => vec![(a, like(a, gd.to_vec()))],
        Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
        Op::Sub(a, b) => vec![(a, g.clone()), (b, g.map(|v| -v))],
        Op::Mul(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            let da = gd.iter().zip(bv).map(|(&g, &y)| g * y).collect();
            let db = gd.iter().zip(av).map(|(&g, &x)| g * x).collect();
            vec![(a, like(a, da)), (b, like(b, db))]
        }
        Op::Scale(a, c) => {
            let c = T::from_f64(c);
            vec![(a, g.map(|v| v * c))]
        }
        Op::Sum(a) => vec![(a, Tensor::full(val(a).shape(), gd[0]))],
        Op::Mean(a) => {
            let share = gd[0] * T::from_f64(1.0 / val(a).numel() as f64);
            vec![(a, Tensor::full(val(a).shape(), share))]
        }
        Op::SumAxis {
            input,
            outer,
            axis_len,
            inner,
        } => {
            let mut d = vec![T::ZERO; outer * axis_len * inner];
            for o in 0..outer {
                let src = &gd[o * inner..(o + 1) * inner];
                for a in 0..axis_len {
                    d[(o * axis_len + a) * inner..(o * axis_len + a + 1) * inner].copy_from_slice(src);
                }
            }
            vec![(input, like(input, d))]
        }
        Op::Softmax { input, temperature } => {
            let y = node.value.data();
            let cols = node.value.shape()[1];
            let inv_t = T::from_f64(1.0 / temperature);
            let mut d = vec![T::ZERO; y.len()];
            for ((yr, gr), dr) in y.chunks(cols).zip(gd.chunks(cols)).zip(d.chunks_mut(cols)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *dv = inv_t * yv * (gv - dot);
                }
            }
            vec![(input, like(input, d))]
        }
        Op::LogSoftmax { input, temperature } => {
            let y = node.value.data();
            let cols = node.value.shape()[1];
            let inv_t = T::from_f64(1.0 / temperature);
            let mut d = vec![T::ZERO; y.len()];
            for ((yr, gr), dr) in y.chunks(cols).zip(gd.chunks(cols)).zip(d.chunks_mut(cols)) {
                let gsum: T = gr.iter().copied().sum();
                for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *dv = inv_t * (gv - yv.exp() * gsum);
                }
            }
            vec![(input, like(input, d))]
        }
        Op::RowL2Normalize(a) => {
            let x = val(a).data();
            let y = node.value.data();
            let cols = node.value.shape()[1];
            let eps = T::from_f64(NORM_EPS);
            let mut d = vec![T::ZERO; x.len()];
            for (((xr, yr), gr), dr) in x.chunks(cols).zip(y.chunks(cols)).zip(gd.chunks(cols)).zip(d.chunks_mut(cols)) {
                let norm = l2(xr);
                if norm < eps {
                    continue;
                }
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *dv = (gv - yv * dot) / norm;
                }
            }
            vec![(a, like(a, d))]
        }
        Op::RowNorm(a) => {
            let x = val(a).data();
            let cols = val(a).shape()[1];
            let eps = T::from_f64(NORM_EPS);
            let mut d = vec![T::ZERO; x.len()];
            for ((xr, &n), (dr, &gv)) in x.chunks(cols).zip(node.value.data()).zip(d.chunks_mut(cols).zip(gd)) {
                if n < eps {
                    continue;
                }
                for (dv, &xv) in dr.iter_mut().zip(xr) {
                    *dv = gv * xv / n;
                }
            }
            vec![(a, like(a, d))]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_hand_values() {
        let g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[1., 1.]));
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), vec![2, 1]);
        assert_eq!(c.value().data(), &[3.0, 7.0]);

        let id = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        assert_eq!(id.matmul(&a).unwrap().value().data(), a.value().data());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn conv2d_small_cases() {
        let g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = x.conv2d(&w, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);

        let x = g.constant(t(&[1, 1, 2, 2], &[1., -2., 3., 0.5]));
        let two = g.constant(t(&[1, 1, 1, 1], &[2.0]));
        assert_eq!(x.conv2d(&two, 1, 0).unwrap().value().data(), &[2., -4., 6., 1.]);

        let small = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(matches!(small.conv2d(&w, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_closed_forms() {
        let g = Graph::new();
        let z = g.constant(t(&[1, 2], &[0.0, 0.0]));
        assert_eq!(z.softmax(7.0).unwrap().value().data(), &[0.5, 0.5]);

        let z = g.constant(t(&[1, 2], &[1f64.ln(), 3f64.ln()]));
        let p = z.softmax(1.0).unwrap().value();
        assert!((p.data()[0] - 0.25).abs() < 1e-12);
        assert!((p.data()[1] - 0.75).abs() < 1e-12);

        let z = g.constant(t(&[1, 2], &[0.0, 10.0]));
        let p = z.softmax(1000.0).unwrap().value();
        assert!(p.data().iter().all(|v| (v - 0.5).abs() < 0.01));

        let z = g.constant(t(&[1, 2], &[f64::NAN, 0.0]));
        assert!(matches!(z.softmax(1.0), Err(Error::Numeric(_))));
        assert!(matches!(g.constant(t(&[1, 1], &[0.0])).softmax(0.0), Err(Error::Config(_))));
    }

    #[test]
    fn sum_axis_drops_the_axis() {
        let g = Graph::new();
        let x = g.constant(t(&[2, 3, 2], &[0., 1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11.]));
        let s = x.sum_axis(1).unwrap();
        assert_eq!(s.shape(), vec![2, 2]);
        assert_eq!(s.value().data(), &[6., 9., 24., 27.]);
    }

    #[test]
    fn normalize_keeps_zero_rows_zero() {
        let g = Graph::new();
        let x = g.param(t(&[2, 2], &[0., 0., 3., 4.]));
        let y = x.row_l2_normalize().unwrap();
        assert_eq!(y.value().data(), &[0., 0., 0.6, 0.8]);
        let grads = g.backward(y.sum()).unwrap();
        assert!(grads.get(x).unwrap().all_finite());
        assert_eq!(&grads.get(x).unwrap().data()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let g = Graph::new();
        let x = g.param(Tensor::<f64>::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        // f(x) = sum(x * x) + sum(3x): df/dx = 2x + 3
        let g = Graph::new();
        let x = g.param(t(&[3], &[1., -2., 0.5]));
        let f = x.mul(&x).unwrap().sum().add(&x.scale(3.0).sum()).unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, -1.0, 4.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let c = g.constant(t(&[2], &[3., 4.]));
        let grads = g.backward(x.mul(&c).unwrap().sum()).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3., 4.]);
    }
}
