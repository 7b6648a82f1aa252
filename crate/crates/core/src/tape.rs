//! Reverse-mode automatic differentiation over dense `f32` tensors.
//!
//! A [`Tape`] records every operation eagerly; [`Tape::backward`] walks the
//! record in reverse. Nodes that do not depend on a trainable leaf carry no
//! gradient and are skipped during the backward sweep.

use std::fmt;

use crate::gemm::gemm;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation with a hand-written adjoint, recorded opaquely on the tape.
pub(crate) trait CustomOp {
    /// Returns one gradient per input; entries for inputs with `needs[i] == false`
    /// may be `None`.
    fn backward(
        &self,
        inputs: &[&[f32]],
        output: &[f32],
        grad_out: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>>;
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Gelu,
    Square,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Unary(Var, Unary),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        src: Var,
        start: usize,
    },
    SliceRows {
        src: Var,
        start: usize,
    },
    GatherRows {
        src: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Vec<f32>,
    shape: Vec<usize>,
    op: Op,
    grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` lies on a path to a
    /// trainable leaf.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits a shape into `(rows, cols)` with `cols` the last dimension.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&c, rest)) => (numel(rest), c),
        None => (1, 1),
    }
}

fn gelu(x: f32) -> f32 {
    const K: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    const K: f32 = 0.797_884_6;
    let inner = K * (x + 0.044_715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * 0.044_715 * x * x)
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

    /// Drops every node recorded after the first `len`; earlier handles stay valid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: Vec<f32>, shape: Vec<usize>, op: Op, grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f32 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        val[0]
    }

    /// Trainable leaf.
    pub fn param(&mut self, data: Vec<f32>, shape: &[usize]) -> Var {
        assert_eq!(data.len(), numel(shape), "param: data/shape mismatch");
        self.push(data, shape.to_vec(), Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, data: Vec<f32>, shape: &[usize]) -> Var {
        assert_eq!(data.len(), numel(shape), "constant: data/shape mismatch");
        self.push(data, shape.to_vec(), Op::Leaf, false)
    }

    /// Copy of `v` that blocks gradient flow (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let node = &self.nodes[v.0];
        let (value, shape) = (node.value.clone(), node.shape.clone());
        self.push(value, shape, Op::Leaf, false)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f32, f32) -> f32, op: Op) -> Var {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(na.shape, nb.shape, "{what}: shape mismatch");
        let value = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        let shape = na.shape.clone();
        let grad = na.grad || nb.grad;
        self.push(value, shape, op, grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// `x + bias` with `bias` broadcast along every leading dimension of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (nx, nb) = (&self.nodes[x.0], &self.nodes[bias.0]);
        let (_, cols) = rows_cols(&nx.shape);
        assert_eq!(nb.value.len(), cols, "add_bias: bias length");
        let value = nx
            .value
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(&nb.value).map(|(a, b)| a + b))
            .collect();
        let shape = nx.shape.clone();
        let grad = nx.grad || nb.grad;
        self.push(value, shape, Op::AddBias(x, bias), grad)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|x| x * c).collect();
        let (shape, grad) = (n.shape.clone(), n.grad);
        self.push(value, shape, Op::Scale(a, c), grad)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|x| x + c).collect();
        let (shape, grad) = (n.shape.clone(), n.grad);
        self.push(value, shape, Op::AddScalar(a), grad)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let n = &self.nodes[a.0];
        let f: fn(f32) -> f32 = match kind {
            Unary::Relu => |x| x.max(0.0),
            Unary::Sigmoid => |x| 1.0 / (1.0 + (-x).exp()),
            Unary::Tanh => f32::tanh,
            Unary::Exp => f32::exp,
            Unary::Gelu => gelu,
            Unary::Square => |x| x * x,
        };
        let value = n.value.iter().map(|&x| f(x)).collect();
        let (shape, grad) = (n.shape.clone(), n.grad);
        self.push(value, shape, Op::Unary(a, kind), grad)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    /// 2-D matrix product of `op(a)` and `op(b)`, where `op` transposes when
    /// the matching flag is set.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(na.shape.len(), 2, "matmul: lhs must be 2-D");
        assert_eq!(nb.shape.len(), 2, "matmul: rhs must be 2-D");
        let (m, k) = if ta {
            (na.shape[1], na.shape[0])
        } else {
            (na.shape[0], na.shape[1])
        };
        let (k2, n) = if tb {
            (nb.shape[1], nb.shape[0])
        } else {
            (nb.shape[0], nb.shape[1])
        };
        assert_eq!(k, k2, "matmul: inner dimensions differ");
        let mut value = vec![0.0; m * n];
        gemm(m, k, n, &na.value, ta, &nb.value, tb, 0.0, &mut value);
        let grad = na.grad || nb.grad;
        self.push(
            value,
            vec![m, n],
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            },
            grad,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `x · wᵀ + b` for `x: [rows, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul_t(x, false, w, true);
        self.add_bias(y, b)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let s: f64 = n.value.iter().map(|&x| x as f64).sum();
        let grad = n.grad;
        self.push(vec![s as f32], vec![1], Op::SumAll(a), grad)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let s: f64 = n.value.iter().map(|&x| x as f64).sum();
        let m = s / n.value.len().max(1) as f64;
        let grad = n.grad;
        self.push(vec![m as f32], vec![1], Op::MeanAll(a), grad)
    }

    /// Mean of squared differences over every element.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean(sq)
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let rows = self.nodes[parts[0].0].shape[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = &self.nodes[p.0].shape;
                assert_eq!(s.len(), 2, "concat_cols: inputs must be 2-D");
                assert_eq!(s[0], rows, "concat_cols: row counts differ");
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.nodes[p.0].value[r * w..(r + 1) * w]);
            }
        }
        let grad = parts.iter().any(|p| self.nodes[p.0].grad);
        self.push(value, vec![rows, total], Op::ConcatCols(parts.to_vec()), grad)
    }

    /// Concatenates 2-D tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let cols = self.nodes[parts[0].0].shape[1];
        let mut value = Vec::new();
        let mut rows = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            assert_eq!(s.len(), 2, "concat_rows: inputs must be 2-D");
            assert_eq!(s[1], cols, "concat_rows: column counts differ");
            rows += s[0];
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        let grad = parts.iter().any(|p| self.nodes[p.0].grad);
        self.push(value, vec![rows, cols], Op::ConcatRows(parts.to_vec()), grad)
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let n = &self.nodes[src.0];
        assert_eq!(n.shape.len(), 2, "slice_cols: input must be 2-D");
        let (rows, cols) = (n.shape[0], n.shape[1]);
        assert!(start + len <= cols, "slice_cols: out of bounds");
        let value = n
            .value
            .chunks_exact(cols)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let grad = n.grad;
        self.push(value, vec![rows, len], Op::SliceCols { src, start }, grad)
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Var {
        let n = &self.nodes[src.0];
        let (rows, cols) = (n.shape[0], numel(&n.shape[1..]));
        assert!(start + len <= rows, "slice_rows: out of bounds");
        let value = n.value[start * cols..(start + len) * cols].to_vec();
        let mut shape = n.shape.clone();
        shape[0] = len;
        let grad = n.grad;
        self.push(value, shape, Op::SliceRows { src, start }, grad)
    }

    /// Selects rows (first-axis entries) by index; repeats are allowed.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Var {
        let n = &self.nodes[src.0];
        let cols = numel(&n.shape[1..]);
        let mut value = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            assert!(r < n.shape[0], "gather_rows: index out of bounds");
            value.extend_from_slice(&n.value[r * cols..(r + 1) * cols]);
        }
        let mut shape = n.shape.clone();
        shape[0] = rows.len();
        let grad = n.grad;
        self.push(
            value,
            shape,
            Op::GatherRows {
                src,
                rows: rows.to_vec(),
            },
            grad,
        )
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Var {
        let n = &self.nodes[src.0];
        assert_eq!(numel(shape), n.value.len(), "reshape: element count");
        let value = n.value.clone();
        let grad = n.grad;
        self.push(value, shape.to_vec(), Op::Reshape(src), grad)
    }

    /// Softmax along the last dimension. `-inf` entries map to exactly zero.
    pub fn softmax_rows(&mut self, src: Var) -> Var {
        let n = &self.nodes[src.0];
        let (_, cols) = rows_cols(&n.shape);
        let mut value = n.value.clone();
        for row in value.chunks_exact_mut(cols) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let (shape, grad) = (n.shape.clone(), n.grad);
        self.push(value, shape, Op::SoftmaxRows(src), grad)
    }

    /// Layer normalisation over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Var {
        let (nx, ng, nb) = (&self.nodes[x.0], &self.nodes[gamma.0], &self.nodes[beta.0]);
        let (rows, cols) = rows_cols(&nx.shape);
        assert_eq!(ng.value.len(), cols, "layer_norm: gamma length");
        assert_eq!(nb.value.len(), cols, "layer_norm: beta length");
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &nx.value[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f32>() / cols as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                value[r * cols + c] = h * ng.value[c] + nb.value[c];
            }
        }
        let shape = nx.shape.clone();
        let grad = nx.grad || ng.grad || nb.grad;
        self.push(
            value,
            shape,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            grad,
        )
    }

    pub(crate) fn custom(
        &mut self,
        inputs: Vec<Var>,
        value: Vec<f32>,
        shape: Vec<usize>,
        op: Box<dyn CustomOp>,
    ) -> Var {
        let grad = inputs.iter().any(|v| self.nodes[v.0].grad);
        self.push(value, shape, Op::Custom { inputs, op }, grad)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be scalar");
        let mut grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f32>>], v: Var) -> Option<&'a mut [f32]> {
        if !self.needs(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] / vb[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let cols = gb.len();
                    for row in g.chunks_exact(cols) {
                        gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Unary(a, kind) => {
                let (va, out) = (self.value(*a), &node.value);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        let d = match kind {
                            Unary::Relu => {
                                if va[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sigmoid => out[i] * (1.0 - out[i]),
                            Unary::Tanh => 1.0 - out[i] * out[i],
                            Unary::Exp => out[i],
                            Unary::Gelu => gelu_grad(va[i]),
                            Unary::Square => 2.0 * va[i],
                        };
                        ga[i] += g[i] * d;
                    }
                }
            }
            &Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                let (va, vb) = (self.value(a), self.value(b));
                if let Some(ga) = self.acc(grads, a) {
                    if ta {
                        gemm(k, n, m, vb, tb, g, true, 1.0, ga);
                    } else {
                        gemm(m, n, k, g, false, vb, !tb, 1.0, ga);
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    if tb {
                        gemm(n, m, k, g, true, va, ta, 1.0, gb);
                    } else {
                        gemm(k, m, n, va, !ta, g, false, 1.0, gb);
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::MeanAll(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g[0] / ga.len() as f32;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].shape[1];
                    if let Some(gp) = self.acc(grads, *p) {
                        for (r, row) in g.chunks_exact(total).enumerate() {
                            let dst = &mut gp[r * w..(r + 1) * w];
                            dst.iter_mut()
                                .zip(&row[offset..offset + w])
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(gp) = self.acc(grads, *p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(x, y)| *x += y);
                    }
                    offset += len;
                }
            }
            &Op::SliceCols { src, start } => {
                let cols = self.nodes[src.0].shape[1];
                let len = node.shape[1];
                if let Some(gs) = self.acc(grads, src) {
                    for (r, row) in g.chunks_exact(len).enumerate() {
                        let dst = &mut gs[r * cols + start..r * cols + start + len];
                        dst.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::SliceRows { src, start } => {
                let cols = numel(&node.shape[1..]);
                if let Some(gs) = self.acc(grads, src) {
                    let dst = &mut gs[start * cols..start * cols + g.len()];
                    dst.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::GatherRows { src, rows } => {
                let cols = numel(&node.shape[1..]);
                if let Some(gs) = self.acc(grads, *src) {
                    for (i, &r) in rows.iter().enumerate() {
                        let dst = &mut gs[r * cols..(r + 1) * cols];
                        dst.iter_mut()
                            .zip(&g[i * cols..(i + 1) * cols])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::SoftmaxRows(src) => {
                let (_, cols) = rows_cols(&node.shape);
                if let Some(gs) = self.acc(grads, *src) {
                    for ((y, gy), gx) in node
                        .value
                        .chunks_exact(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(gs.chunks_exact_mut(cols))
                    {
                        let dot: f32 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx[c] += y[c] * (gy[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = rows_cols(&node.shape);
                let gam = self.value(*gamma).to_vec();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for row in g.chunks_exact(cols) {
                        gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..cols {
                            let d = gr[c] * gam[c];
                            mean_d += d;
                            mean_dh += d * hr[c];
                        }
                        mean_d /= cols as f32;
                        mean_dh /= cols as f32;
                        for c in 0..cols {
                            let d = gr[c] * gam[c];
                            gx[r * cols + c] += rstd[r] * (d - mean_d - hr[c] * mean_dh);
                        }
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&[f32]> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.needs(*v)).collect();
                let out = op.backward(&vals, &node.value, g, &needs);
                for (v, gi) in inputs.iter().zip(out) {
                    if let (Some(dst), Some(src)) = (self.acc(grads, *v), gi) {
                        dst.iter_mut().zip(&src).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
    }
}
