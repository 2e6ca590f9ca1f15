//! Reverse-mode differentiation over a Wengert tape.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends one node to the
//! [`Tape`] that owns it. [`Var::backward`] sweeps the tape in reverse from a
//! scalar root and *adds* the resulting partials into the tape's gradient
//! slots; call [`Tape::zero_grad`] to reset them. A tape is single-threaded.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Real, Tensor};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

pub fn gelu_scalar<T: Real>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Gelu(usize),
    Relu(usize),
    EluPlusOne(usize),
    Sqrt(usize),
    Ln(usize),
    Transpose(usize),
    Reshape(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    MeanAxis {
        input: usize,
        axis: usize,
    },
    Sum(usize),
    BroadcastAdd(usize, usize),
    OuterSum(usize, usize),
    Softmax(usize),
    LayerNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    DepthwiseConv {
        input: usize,
        weight: usize,
        bias: usize,
        rows: usize,
        cols: usize,
    },
    GridGradient {
        input: usize,
        rows: usize,
        cols: usize,
        spacing: (T, T),
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Tensor<T>>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    /// A differentiable input (parameter or checked variable).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears all accumulated gradients.
    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn backward_from(&self, root: usize) -> Result<()> {
        let nodes = self.nodes.borrow();
        let shape = nodes[root].value.shape().to_vec();
        if nodes[root].value.numel() != 1 {
            return Err(Error::NonScalarRoot(shape));
        }
        let mut local: Vec<Option<Tensor<T>>> = (0..=root).map(|_| None).collect();
        local[root] = Some(Tensor::ones(shape));
        let mut grads = self.grads.borrow_mut();
        if grads.len() < nodes.len() {
            grads.resize_with(nodes.len(), || None);
        }
        for id in (0..=root).rev() {
            let Some(g) = local[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            propagate(&nodes, id, &g, &mut local);
            accumulate(&mut grads[id], g);
        }
        Ok(())
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Pushes the contribution of node `id` (with output gradient `g`) to its parents.
fn propagate<T: Real>(
    nodes: &[Node<T>],
    id: usize,
    g: &Tensor<T>,
    local: &mut [Option<Tensor<T>>],
) {
    let val = |i: usize| &nodes[i].value;
    let mut send = |p: usize, f: &mut dyn FnMut() -> Tensor<T>| {
        if nodes[p].requires_grad {
            let contribution = f();
            accumulate(&mut local[p], contribution);
        }
    };
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (m, k) = val(a).dims2().unwrap();
            let n = val(b).shape()[1];
            send(a, &mut || {
                let mut ga = vec![T::zero(); m * k];
                kernels::gemm_nt(g.data(), val(b).data(), m, n, k, &mut ga);
                Tensor::from_parts(vec![m, k], ga)
            });
            send(b, &mut || {
                let mut gb = vec![T::zero(); k * n];
                kernels::gemm_tn(val(a).data(), g.data(), k, m, n, &mut gb);
                Tensor::from_parts(vec![k, n], gb)
            });
        }
        &Op::Add(a, b) => {
            send(a, &mut || g.clone());
            send(b, &mut || g.clone());
        }
        &Op::Sub(a, b) => {
            send(a, &mut || g.clone());
            send(b, &mut || g.map(|x| -x));
        }
        &Op::Mul(a, b) => {
            send(a, &mut || {
                g.zip_map(val(b), "mul", |gi, bi| gi * bi).unwrap()
            });
            send(b, &mut || {
                g.zip_map(val(a), "mul", |gi, ai| gi * ai).unwrap()
            });
        }
        &Op::Scale(a, c) => send(a, &mut || g.map(|x| x * c)),
        &Op::Gelu(a) => send(a, &mut || {
            g.zip_map(val(a), "gelu", |gi, xi| gi * gelu_grad_scalar(xi))
                .unwrap()
        }),
        &Op::Relu(a) => send(a, &mut || {
            g.zip_map(
                val(a),
                "relu",
                |gi, xi| if xi > T::zero() { gi } else { T::zero() },
            )
            .unwrap()
        }),
        &Op::EluPlusOne(a) => send(a, &mut || {
            g.zip_map(val(a), "elu", |gi, xi| {
                if xi > T::zero() {
                    gi
                } else {
                    gi * xi.exp()
                }
            })
            .unwrap()
        }),
        &Op::Sqrt(a) => send(a, &mut || {
            g.zip_map(out, "sqrt", |gi, yi| {
                if yi > T::zero() {
                    gi * T::lit(0.5) / yi
                } else {
                    T::zero()
                }
            })
            .unwrap()
        }),
        &Op::Ln(a) => send(a, &mut || {
            g.zip_map(val(a), "ln", |gi, xi| gi / xi).unwrap()
        }),
        &Op::Transpose(a) => send(a, &mut || g.transpose().unwrap()),
        &Op::Reshape(a) => send(a, &mut || g.reshape(val(a).shape().to_vec()).unwrap()),
        Op::Concat { parts, axis } => {
            let axis = *axis;
            let outer: usize = out.shape()[..axis].iter().product();
            let inner: usize = out.shape()[axis + 1..].iter().product();
            let total = out.shape()[axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let width = val(p).shape()[axis] * inner;
                send(p, &mut || {
                    let mut d = Vec::with_capacity(outer * width);
                    for o in 0..outer {
                        let base = o * total + offset;
                        d.extend_from_slice(&g.data()[base..base + width]);
                    }
                    Tensor::from_parts(val(p).shape().to_vec(), d)
                });
                offset += width;
            }
        }
        &Op::Slice { input, axis, start } => send(input, &mut || {
            let shape = val(input).shape();
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let full = shape[axis] * inner;
            let width = out.shape()[axis] * inner;
            let mut d = vec![T::zero(); val(input).numel()];
            for o in 0..outer {
                let dst = o * full + start * inner;
                d[dst..dst + width].copy_from_slice(&g.data()[o * width..(o + 1) * width]);
            }
            Tensor::from_parts(shape.to_vec(), d)
        }),
        &Op::MeanAxis { input, axis } => send(input, &mut || {
            let shape = val(input).shape();
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let e = shape[axis];
            let inv = T::one() / T::lit(e as f64);
            let mut d = Vec::with_capacity(val(input).numel());
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for _ in 0..e {
                    d.extend(src.iter().map(|&x| x * inv));
                }
            }
            Tensor::from_parts(shape.to_vec(), d)
        }),
        &Op::Sum(a) => {
            let g0 = g.data()[0];
            send(a, &mut || Tensor::full(val(a).shape().to_vec(), g0));
        }
        &Op::BroadcastAdd(x, b) => {
            send(x, &mut || g.clone());
            send(b, &mut || {
                let n = val(b).numel();
                let mut d = vec![T::zero(); n];
                for row in g.data().chunks_exact(n) {
                    for (di, &gi) in d.iter_mut().zip(row) {
                        *di += gi;
                    }
                }
                Tensor::from_parts(val(b).shape().to_vec(), d)
            });
        }
        &Op::OuterSum(u, v) => {
            let m = val(u).numel();
            let n = val(v).numel();
            send(u, &mut || {
                let d = g
                    .data()
                    .chunks_exact(n)
                    .map(|row| row.iter().copied().sum())
                    .collect();
                Tensor::from_parts(val(u).shape().to_vec(), d)
            });
            send(v, &mut || {
                let mut d = vec![T::zero(); n];
                for row in g.data().chunks_exact(n).take(m) {
                    for (di, &gi) in d.iter_mut().zip(row) {
                        *di += gi;
                    }
                }
                Tensor::from_parts(val(v).shape().to_vec(), d)
            });
        }
        &Op::Softmax(a) => send(a, &mut || {
            let n = out.last_dim();
            let mut d = vec![T::zero(); out.numel()];
            for ((drow, grow), yrow) in d
                .chunks_exact_mut(n)
                .zip(g.data().chunks_exact(n))
                .zip(out.data().chunks_exact(n))
            {
                let s = kernels::dot(grow, yrow);
                for ((di, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                    *di = yi * (gi - s);
                }
            }
            Tensor::from_parts(out.shape().to_vec(), d)
        }),
        Op::LayerNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let n = out.last_dim();
            let gam = val(*gamma).data();
            send(*gamma, &mut || {
                let mut d = vec![T::zero(); n];
                for (grow, xrow) in g.data().chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for j in 0..n {
                        d[j] += grow[j] * xrow[j];
                    }
                }
                Tensor::from_parts(vec![n], d)
            });
            send(*beta, &mut || {
                let mut d = vec![T::zero(); n];
                for grow in g.data().chunks_exact(n) {
                    for j in 0..n {
                        d[j] += grow[j];
                    }
                }
                Tensor::from_parts(vec![n], d)
            });
            send(*input, &mut || {
                let inv_n = T::one() / T::lit(n as f64);
                let mut d = vec![T::zero(); out.numel()];
                let mut dxhat = vec![T::zero(); n];
                for (r, ((drow, grow), xrow)) in d
                    .chunks_exact_mut(n)
                    .zip(g.data().chunks_exact(n))
                    .zip(xhat.chunks_exact(n))
                    .enumerate()
                {
                    for j in 0..n {
                        dxhat[j] = grow[j] * gam[j];
                    }
                    let mean_d = dxhat.iter().copied().sum::<T>() * inv_n;
                    let mean_dx = kernels::dot(&dxhat, xrow) * inv_n;
                    let inv = inv_std[r];
                    for j in 0..n {
                        drow[j] = inv * (dxhat[j] - mean_d - xrow[j] * mean_dx);
                    }
                }
                Tensor::from_parts(val(*input).shape().to_vec(), d)
            });
        }
        &Op::DepthwiseConv {
            input,
            weight,
            bias,
            rows,
            cols,
        } => {
            let ch = val(input).last_dim();
            let x = val(input).data();
            let w = val(weight).data();
            send(bias, &mut || {
                let mut d = vec![T::zero(); ch];
                for row in g.data().chunks_exact(ch) {
                    for c in 0..ch {
                        d[c] += row[c];
                    }
                }
                Tensor::from_parts(vec![ch], d)
            });
            send(weight, &mut || {
                let mut d = vec![T::zero(); ch * 9];
                for_each_tap(rows, cols, |dst, src, k| {
                    let go = &g.data()[dst * ch..(dst + 1) * ch];
                    let xi = &x[src * ch..(src + 1) * ch];
                    for c in 0..ch {
                        d[c * 9 + k] += go[c] * xi[c];
                    }
                });
                Tensor::from_parts(vec![ch, 9], d)
            });
            send(input, &mut || {
                let mut d = vec![T::zero(); x.len()];
                for_each_tap(rows, cols, |dst, src, k| {
                    let go = &g.data()[dst * ch..(dst + 1) * ch];
                    let di = &mut d[src * ch..(src + 1) * ch];
                    for c in 0..ch {
                        di[c] += w[c * 9 + k] * go[c];
                    }
                });
                Tensor::from_parts(val(input).shape().to_vec(), d)
            });
        }
        &Op::GridGradient {
            input,
            rows,
            cols,
            spacing,
        } => send(input, &mut || {
            let ch = val(input).last_dim();
            let mut d = vec![T::zero(); val(input).numel()];
            grid_gradient_adjoint(g.data(), rows, cols, ch, spacing, &mut d);
            Tensor::from_parts(val(input).shape().to_vec(), d)
        }),
    }
}

/// Calls `f(dst, src, tap)` for every (output node, input node, stencil tap)
/// triple of a zero-padded 3×3 stencil on a `rows × cols` grid.
fn for_each_tap(rows: usize, cols: usize, mut f: impl FnMut(usize, usize, usize)) {
    for r in 0..rows {
        for c in 0..cols {
            let dst = r * cols + c;
            for dr in 0..3usize {
                let rr = r + dr;
                if rr == 0 || rr > rows {
                    continue;
                }
                for dc in 0..3usize {
                    let cc = c + dc;
                    if cc == 0 || cc > cols {
                        continue;
                    }
                    f(dst, (rr - 1) * cols + (cc - 1), dr * 3 + dc);
                }
            }
        }
    }
}

/// Finite-difference stencil weights along one axis at index `i` of `n`:
/// returns `[(index, weight); 2]`, central inside and one-sided at the ends.
fn diff_taps<T: Real>(i: usize, n: usize, h: T) -> [(usize, T); 2] {
    if i == 0 {
        [(1, T::one() / h), (0, -T::one() / h)]
    } else if i == n - 1 {
        [(n - 1, T::one() / h), (n - 2, -T::one() / h)]
    } else {
        let w = T::one() / (T::lit(2.0) * h);
        [(i + 1, w), (i - 1, -w)]
    }
}

pub(crate) fn grid_gradient_forward<T: Real>(
    x: &[T],
    rows: usize,
    cols: usize,
    ch: usize,
    (hr, hc): (T, T),
    out: &mut [T],
) {
    let n = rows * cols;
    for r in 0..rows {
        for c in 0..cols {
            let dst = r * cols + c;
            for (rr, w) in diff_taps(r, rows, hr) {
                let src = rr * cols + c;
                kernels::axpy(
                    w,
                    &x[src * ch..(src + 1) * ch],
                    &mut out[dst * ch..(dst + 1) * ch],
                );
            }
            for (cc, w) in diff_taps(c, cols, hc) {
                let src = r * cols + cc;
                let o = (n + dst) * ch;
                kernels::axpy(w, &x[src * ch..(src + 1) * ch], &mut out[o..o + ch]);
            }
        }
    }
}

fn grid_gradient_adjoint<T: Real>(
    g: &[T],
    rows: usize,
    cols: usize,
    ch: usize,
    (hr, hc): (T, T),
    d: &mut [T],
) {
    let n = rows * cols;
    for r in 0..rows {
        for c in 0..cols {
            let dst = r * cols + c;
            for (rr, w) in diff_taps(r, rows, hr) {
                let src = rr * cols + c;
                kernels::axpy(
                    w,
                    &g[dst * ch..(dst + 1) * ch],
                    &mut d[src * ch..(src + 1) * ch],
                );
            }
            for (cc, w) in diff_taps(c, cols, hc) {
                let src = r * cols + cc;
                let o = (n + dst) * ch;
                kernels::axpy(w, &g[o..o + ch], &mut d[src * ch..(src + 1) * ch]);
            }
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    /// Accumulated gradient, if any backward pass has reached this node.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grads.borrow().get(self.id).cloned().flatten()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward_from(self.id)
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        debug_assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.tape.needs(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'t, T>, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        self.same_tape(other);
        let rg = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    pub fn matmul(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.matmul(&nodes[rhs.id].value)?
        };
        Ok(self.binary(rhs, value, Op::MatMul(self.id, rhs.id)))
    }

    fn zip(
        &self,
        rhs: &Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let nodes = self.tape.nodes.borrow();
        nodes[self.id].value.zip_map(&nodes[rhs.id].value, name, f)
    }

    pub fn add(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip(rhs, "add", |a, b| a + b)?;
        Ok(self.binary(rhs, v, Op::Add(self.id, rhs.id)))
    }

    pub fn sub(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip(rhs, "sub", |a, b| a - b)?;
        Ok(self.binary(rhs, v, Op::Sub(self.id, rhs.id)))
    }

    pub fn mul(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        let v = self.zip(rhs, "mul", |a, b| a * b)?;
        Ok(self.binary(rhs, v, Op::Mul(self.id, rhs.id)))
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        let v = self.with_value(|x| x.map(|a| a * c));
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn gelu(&self) -> Var<'t, T> {
        let v = self.with_value(|x| x.map(gelu_scalar));
        self.unary(v, Op::Gelu(self.id))
    }

    pub fn relu(&self) -> Var<'t, T> {
        let v = self.with_value(|x| x.map(|a| a.max(T::zero())));
        self.unary(v, Op::Relu(self.id))
    }

    /// `elu(x) + 1`, a strictly positive feature map.
    pub fn elu_plus_one(&self) -> Var<'t, T> {
        let v = self.with_value(|x| x.map(|a| if a > T::zero() { a + T::one() } else { a.exp() }));
        self.unary(v, Op::EluPlusOne(self.id))
    }

    pub fn sqrt(&self) -> Result<Var<'t, T>> {
        let v = self.with_value(|x| x.map(|a| a.sqrt()));
        if !v.all_finite() {
            return Err(Error::NonFinite("sqrt of a negative value".into()));
        }
        Ok(self.unary(v, Op::Sqrt(self.id)))
    }

    /// Natural logarithm; inputs must be positive.
    pub fn ln(&self) -> Result<Var<'t, T>> {
        let v = self.with_value(|x| x.map(|a| a.ln()));
        if !v.all_finite() {
            return Err(Error::NonFinite("log of a non-positive value".into()));
        }
        Ok(self.unary(v, Op::Ln(self.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let v = self.with_value(|x| x.transpose())?;
        Ok(self.unary(v, Op::Transpose(self.id)))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let v = self.with_value(|x| x.reshape(shape))?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let tape = first.tape;
        let nodes = tape.nodes.borrow();
        let base = nodes[first.id].value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::AxisOutOfRange {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut extent = 0;
        for p in parts {
            first.same_tape(p);
            let s = nodes[p.id].value.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            extent += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = extent;
        let mut data = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for p in parts {
                let v = &nodes[p.id].value;
                let w = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = ids.iter().any(|&i| nodes[i].requires_grad);
        drop(nodes);
        Ok(tape.push(
            Tensor::from_parts(shape, data),
            Op::Concat { parts: ids, axis },
            rg,
        ))
    }

    /// Entries `start..start + len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let v = self.with_value(|x| -> Result<Tensor<T>> {
            let shape = x.shape();
            if axis >= shape.len() {
                return Err(Error::AxisOutOfRange {
                    op: "slice",
                    axis,
                    rank: shape.len(),
                });
            }
            if len == 0 || start + len > shape[axis] {
                return Err(Error::invalid(
                    "slice",
                    format!(
                        "range {start}..{} exceeds extent {}",
                        start + len,
                        shape[axis]
                    ),
                ));
            }
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let full = shape[axis] * inner;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s = o * full + start * inner;
                data.extend_from_slice(&x.data()[s..s + len * inner]);
            }
            let mut out_shape = shape.to_vec();
            out_shape[axis] = len;
            Ok(Tensor::from_parts(out_shape, data))
        })?;
        Ok(self.unary(
            v,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
        ))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_over_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let v = self.with_value(|x| -> Result<Tensor<T>> {
            let shape = x.shape();
            if axis >= shape.len() {
                return Err(Error::AxisOutOfRange {
                    op: "mean_over_axis",
                    axis,
                    rank: shape.len(),
                });
            }
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let e = shape[axis];
            let inv = T::one() / T::lit(e as f64);
            let mut data = vec![T::zero(); outer * inner];
            for o in 0..outer {
                let dst = &mut data[o * inner..(o + 1) * inner];
                for k in 0..e {
                    let s = (o * e + k) * inner;
                    for (d, &xv) in dst.iter_mut().zip(&x.data()[s..s + inner]) {
                        *d += xv;
                    }
                }
                for d in dst.iter_mut() {
                    *d *= inv;
                }
            }
            let mut out_shape = shape.to_vec();
            out_shape.remove(axis);
            Ok(Tensor::from_parts(out_shape, data))
        })?;
        Ok(self.unary(
            v,
            Op::MeanAxis {
                input: self.id,
                axis,
            },
        ))
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&self) -> Var<'t, T> {
        let v = self.with_value(|x| Tensor::scalar(x.sum()));
        self.unary(v, Op::Sum(self.id))
    }

    /// Adds the rank-1 `bias` to every slice along the last axis of `self`.
    pub fn broadcast_add(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let b = &nodes[bias.id].value;
            if b.rank() != 1 || b.numel() != x.last_dim() || x.rank() == 0 {
                return Err(Error::shape("broadcast_add", x.shape(), b.shape()));
            }
            let n = b.numel();
            let mut data = x.data().to_vec();
            for row in data.chunks_exact_mut(n) {
                for (d, &bv) in row.iter_mut().zip(b.data()) {
                    *d += bv;
                }
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        Ok(self.binary(bias, v, Op::BroadcastAdd(self.id, bias.id)))
    }

    /// `out[i, j] = self[i] + other[j]` for rank-1 inputs.
    pub fn outer_sum(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            let u = &nodes[self.id].value;
            let w = &nodes[other.id].value;
            if u.rank() != 1 || w.rank() != 1 {
                return Err(Error::shape("outer_sum", u.shape(), w.shape()));
            }
            let mut data = Vec::with_capacity(u.numel() * w.numel());
            for &a in u.data() {
                data.extend(w.data().iter().map(|&b| a + b));
            }
            Tensor::from_parts(vec![u.numel(), w.numel()], data)
        };
        Ok(self.binary(other, v, Op::OuterSum(self.id, other.id)))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_rows(&self) -> Result<Var<'t, T>> {
        let v = self.with_value(|x| -> Result<Tensor<T>> {
            if x.rank() == 0 {
                return Err(Error::invalid("softmax_rows", "scalar input"));
            }
            let mut data = x.data().to_vec();
            kernels::softmax_rows_inplace(&mut data, x.last_dim());
            Ok(Tensor::from_parts(x.shape().to_vec(), data))
        })?;
        Ok(self.unary(v, Op::Softmax(self.id)))
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        self.same_tape(gamma);
        self.same_tape(beta);
        let (value, xhat, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let gm = &nodes[gamma.id].value;
            let bt = &nodes[beta.id].value;
            let d = x.last_dim();
            if x.rank() == 0 || gm.shape() != [d] {
                return Err(Error::shape("layer_norm", x.shape(), gm.shape()));
            }
            if bt.shape() != [d] {
                return Err(Error::shape("layer_norm", x.shape(), bt.shape()));
            }
            let inv_d = T::one() / T::lit(d as f64);
            let rows = x.numel() / d;
            let mut xhat = Vec::with_capacity(x.numel());
            let mut inv_std = Vec::with_capacity(rows);
            let mut out = Vec::with_capacity(x.numel());
            for row in x.data().chunks_exact(d) {
                let mean = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                let inv = T::one() / (var + eps).sqrt();
                inv_std.push(if inv.is_finite() { inv } else { T::zero() });
                let inv = *inv_std.last().unwrap();
                for j in 0..d {
                    let xh = (row[j] - mean) * inv;
                    xhat.push(xh);
                    out.push(xh * gm.data()[j] + bt.data()[j]);
                }
            }
            (Tensor::from_parts(x.shape().to_vec(), out), xhat, inv_std)
        };
        let rg = self.tape.needs(&[self.id, gamma.id, beta.id]);
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                input: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Per-channel zero-padded 3×3 convolution of an `[N×C]` field laid out
    /// row-major on a `rows × cols` grid. `weight` is `[C×9]` (tap index
    /// `3·dr + dc`), `bias` is `[C]`.
    pub fn depthwise_conv3x3(
        &self,
        weight: &Var<'t, T>,
        bias: &Var<'t, T>,
        rows: usize,
        cols: usize,
    ) -> Result<Var<'t, T>> {
        self.same_tape(weight);
        self.same_tape(bias);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let (n, ch) = x.dims2()?;
            if rows * cols != n {
                return Err(Error::GridMismatch {
                    rows,
                    cols,
                    tokens: n,
                });
            }
            let w = &nodes[weight.id].value;
            let b = &nodes[bias.id].value;
            if w.shape() != [ch, 9] {
                return Err(Error::shape("depthwise_conv3x3", x.shape(), w.shape()));
            }
            if b.shape() != [ch] {
                return Err(Error::shape("depthwise_conv3x3", x.shape(), b.shape()));
            }
            let mut out = Vec::with_capacity(n * ch);
            for _ in 0..n {
                out.extend_from_slice(b.data());
            }
            let (xd, wd) = (x.data(), w.data());
            for_each_tap(rows, cols, |dst, src, k| {
                let xi = &xd[src * ch..(src + 1) * ch];
                let o = &mut out[dst * ch..(dst + 1) * ch];
                for c in 0..ch {
                    o[c] += wd[c * 9 + k] * xi[c];
                }
            });
            Tensor::from_parts(vec![n, ch], out)
        };
        let rg = self.tape.needs(&[self.id, weight.id, bias.id]);
        Ok(self.tape.push(
            value,
            Op::DepthwiseConv {
                input: self.id,
                weight: weight.id,
                bias: bias.id,
                rows,
                cols,
            },
            rg,
        ))
    }

    /// Spatial derivatives of an `[N×C]` grid field: rows `0..N` hold the
    /// derivative along the grid-row axis, rows `N..2N` along the column axis.
    /// Central differences inside, one-sided at the boundary.
    pub fn grid_gradient(&self, rows: usize, cols: usize, spacing: (T, T)) -> Result<Var<'t, T>> {
        let v = self.with_value(|x| -> Result<Tensor<T>> {
            let (n, ch) = x.dims2()?;
            if rows * cols != n {
                return Err(Error::GridMismatch {
                    rows,
                    cols,
                    tokens: n,
                });
            }
            if rows < 2 || cols < 2 {
                return Err(Error::invalid(
                    "grid_gradient",
                    "grid needs at least 2x2 nodes",
                ));
            }
            let mut out = vec![T::zero(); 2 * n * ch];
            grid_gradient_forward(x.data(), rows, cols, ch, spacing, &mut out);
            Ok(Tensor::from_parts(vec![2 * n, ch], out))
        })?;
        Ok(self.unary(
            v,
            Op::GridGradient {
                input: self.id,
                rows,
                cols,
                spacing,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_twice_x() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.25]));
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, -4.0, 0.5]);
    }

    #[test]
    fn backward_accumulates_until_zero_grad() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 3.0]));
        let root = x.mul(&x).unwrap().sum();
        root.backward().unwrap();
        root.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[4.0, 12.0]);
        tape.zero_grad();
        assert!(x.grad().is_none());
        root.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 6.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 3.0]));
        assert!(matches!(x.backward(), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 3.0]));
        let c = tape.constant(t(&[2], &[5.0, 7.0]));
        x.mul(&c).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[5.0, 7.0]);
        assert!(c.grad().is_none());
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::<f64>::new();
        let s = tape
            .constant(t(&[1, 2], &[0.0, 0.0]))
            .softmax_rows()
            .unwrap()
            .value();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = tape
            .constant(t(&[1, 2], &[1000.0, 0.0]))
            .softmax_rows()
            .unwrap()
            .value();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);
        let s = tape
            .constant(t(&[1, 3], &[1.0, 2.0, 3.0]))
            .softmax_rows()
            .unwrap()
            .value();
        // exp-normalize oracle evaluated in f64
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for (got, want) in s.data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((got - want).abs() < 5e-6);
        }
        for (got, ei) in s.data().iter().zip(&e) {
            assert!((got - ei / z).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::<f64>::new();
        let ones = tape.constant(Tensor::ones([2]));
        let zeros = tape.constant(Tensor::zeros([2]));
        let y = tape
            .constant(t(&[1, 2], &[4.0, 4.0]))
            .layer_norm(&ones, &zeros, 1e-5)
            .unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0]);
        let y = tape
            .constant(t(&[1, 2], &[1.0, 3.0]))
            .layer_norm(&ones, &zeros, 0.0)
            .unwrap();
        assert_eq!(y.value().data(), &[-1.0, 1.0]);
        let beta = tape.constant(t(&[2], &[0.5, -1.5]));
        let y = tape
            .constant(t(&[2, 2], &[1.0, 9.0, -3.0, 2.0]))
            .layer_norm(&zeros, &beta, 1e-5)
            .unwrap();
        assert_eq!(y.value().data(), &[0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn layer_norm_constant_row_has_finite_gradient() {
        let tape = Tape::<f64>::new();
        let g = tape.leaf(Tensor::ones([3]));
        let b = tape.leaf(Tensor::zeros([3]));
        let x = tape.leaf(t(&[1, 3], &[2.0, 2.0, 2.0]));
        x.layer_norm(&g, &b, 0.0).unwrap().sum().backward().unwrap();
        assert!(x.grad().unwrap().all_finite());
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        let tape = Tape::<f64>::new();
        let m = tape.constant(t(&[2, 2], &[1.0, 3.0, 5.0, 7.0]));
        assert_eq!(m.mean_over_axis(0).unwrap().value().data(), &[3.0, 5.0]);
        assert_eq!(m.mean_over_axis(1).unwrap().value().data(), &[2.0, 6.0]);
        let r = m.reshape([4]).unwrap().reshape([2, 2]).unwrap();
        assert_eq!(r.value(), m.value());
        assert!(m.reshape([3]).is_err());
        assert_eq!(m.transpose().unwrap().value().data(), &[1.0, 5.0, 3.0, 7.0]);
        let c = Var::concat(&[m, m.slice(1, 1, 1).unwrap()], 1).unwrap();
        assert_eq!(c.value().shape(), &[2, 3]);
        assert_eq!(c.value().data(), &[1.0, 3.0, 3.0, 5.0, 7.0, 7.0]);
        assert!(m.slice(1, 1, 2).is_err());
        assert!(m.mean_over_axis(2).is_err());
        let b = tape.constant(t(&[2], &[10.0, 20.0]));
        assert_eq!(
            m.broadcast_add(&b).unwrap().value().data(),
            &[11.0, 23.0, 15.0, 27.0]
        );
        assert!(m.broadcast_add(&tape.constant(t(&[3], &[0.0; 3]))).is_err());
        let neg = tape.constant(t(&[2], &[-1.0, 4.0]));
        assert_eq!(neg.relu().value().data(), &[0.0, 4.0]);
        assert_eq!(neg.relu().sqrt().unwrap().value().data(), &[0.0, 2.0]);
        assert!(neg.sqrt().is_err());
        assert!(m.add(&b).is_err());
    }

    #[test]
    fn depthwise_conv_examples() {
        let tape = Tape::<f64>::new();
        let (rows, cols, ch) = (3, 4, 2);
        let field = tape.constant(Tensor::full([rows * cols, ch], 2.0));
        let mut center = vec![0.0; ch * 9];
        for c in 0..ch {
            center[c * 9 + 4] = 1.0;
        }
        let w = tape.constant(t(&[ch, 9], &center));
        let b0 = tape.constant(Tensor::zeros([ch]));
        let y = field.depthwise_conv3x3(&w, &b0, rows, cols).unwrap();
        assert_eq!(y.value(), field.value());

        let box9 = tape.constant(Tensor::full([ch, 9], 1.0 / 9.0));
        let y = field
            .depthwise_conv3x3(&box9, &b0, rows, cols)
            .unwrap()
            .value();
        // corner sees 4 of 9 taps, edge 6, interior 9
        assert!((y.at(&[0, 0]) - 2.0 * 4.0 / 9.0).abs() < 1e-12);
        assert!((y.at(&[1, 0]) - 2.0 * 6.0 / 9.0).abs() < 1e-12);
        assert!((y.at(&[5, 1]) - 2.0).abs() < 1e-12);

        let zero_w = tape.constant(Tensor::zeros([ch, 9]));
        let bias = tape.constant(t(&[ch], &[0.3, -0.7]));
        let y = field
            .depthwise_conv3x3(&zero_w, &bias, rows, cols)
            .unwrap()
            .value();
        for i in 0..rows * cols {
            assert_eq!(y.row(i), &[0.3, -0.7]);
        }
        assert!(matches!(
            field.depthwise_conv3x3(&w, &b0, 5, 5),
            Err(Error::GridMismatch { .. })
        ));
    }

    #[test]
    fn grid_gradient_of_linear_field_is_exact() {
        let (rows, cols) = (4, 5);
        let h = (1.0 / 3.0, 1.0 / 4.0);
        let mut data = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                data.push(2.0 * (r as f64 * h.0) - 3.0 * (c as f64 * h.1));
            }
        }
        let tape = Tape::<f64>::new();
        let f = tape.constant(t(&[rows * cols, 1], &data));
        let g = f.grid_gradient(rows, cols, h).unwrap().value();
        for i in 0..rows * cols {
            assert!((g.data()[i] - 2.0).abs() < 1e-12);
            assert!((g.data()[rows * cols + i] + 3.0).abs() < 1e-12);
        }
    }
}
