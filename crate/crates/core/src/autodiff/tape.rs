//! Reverse-mode tape over dense tensors.
//!
//! Every operation appends one node holding its forward value. `backward`
//! walks the nodes once, newest first, accumulating gradients into inputs.

use crate::autodiff::attention::{attention_backward, attention_forward, check_partition};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Powf(Var, T),
    ClampMin(Var, T),
    SumAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    ExpandRows(Var),
    ExpandCols(Var),
    Gather(Var, Vec<usize>),
    ScatterAdd(Var, Vec<usize>),
    RowScale(Var, Vec<T>),
    SliceCols(Var, usize),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    Softmax(Var, usize),
    LogSoftmax(Var),
    PickPerRow(Var, Vec<usize>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        offsets: Vec<usize>,
        probs: Vec<T>,
    },
    Linearized(Var, Vec<T>),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar output with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `var` does not influence the output.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [r, c] => (*r, *c),
        _ => (0, 0),
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize, f: impl Fn(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, tensor: Tensor<T>, requires_grad: bool) -> Var {
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: tensor.into_values(),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor, true)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape matches value")
    }

    /// Single value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(
                op,
                format!("expected a 2-D tensor, got {s:?}"),
            )),
        }
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        if sa == sb || nb == 1 {
            Ok(sa.to_vec())
        } else if na == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::shape(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    fn zip_with(&self, a: Var, b: Var, n: usize, f: impl Fn(T, T) -> T) -> Vec<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let pick = |v: &[T], i: usize| if v.len() == 1 { v[0] } else { v[i] };
        (0..n).map(|i| f(pick(va, i), pick(vb, i))).collect()
    }

    /// Elementwise sum; either side may be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("add", a, b)?;
        let n = shape.iter().product();
        let value = self.zip_with(a, b, n, |x, y| x + y);
        Ok(self.push(shape, value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("sub", a, b)?;
        let n = shape.iter().product();
        let value = self.zip_with(a, b, n, |x, y| x - y);
        Ok(self.push(shape, value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape("mul", a, b)?;
        let n = shape.iter().product();
        let value = self.zip_with(a, b, n, |x, y| x * y);
        Ok(self.push(shape, value, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::AddScalar(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Scale(a, c), &[a])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let value = matmul_raw(self.value(a), self.value(b), m, k, n);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix("transpose", a)?;
        let value = transpose_raw(self.value(a), r, c);
        Ok(self.push(vec![c, r], value, Op::Transpose(a), &[a]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|x| x.ln()).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Log(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| x.max(T::zero())).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Relu(a), &[a])
    }

    pub fn powf(&mut self, a: Var, p: T) -> Var {
        let value = self.value(a).iter().map(|x| x.powf(p)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Powf(a, p), &[a])
    }

    pub fn clamp_min(&mut self, a: Var, floor: T) -> Var {
        let value = self.value(a).iter().map(|&x| x.max(floor)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::ClampMin(a, floor), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = vec![self.value(a).iter().copied().sum()];
        self.push(vec![1], value, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::lit(self.value(a).len() as f64);
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Sum of a 2-D tensor over `axis`, keeping the reduced dimension as 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.matrix("sum_axis", a)?;
        let (shape, value) = reduce_axis(self.value(a), r, c, axis)
            .ok_or_else(|| Error::shape("sum_axis", format!("axis {axis} of a 2-D tensor")))?;
        Ok(self.push(shape, value, Op::SumAxis(a, axis), &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.matrix("mean_axis", a)?;
        let (shape, mut value) = reduce_axis(self.value(a), r, c, axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {axis} of a 2-D tensor")))?;
        let len = T::lit(if axis == 0 { r } else { c } as f64);
        value.iter_mut().for_each(|v| *v = *v / len);
        Ok(self.push(shape, value, Op::MeanAxis(a, axis), &[a]))
    }

    /// `[1, c] -> [rows, c]` by repeating the row.
    pub fn expand_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let (r, c) = self.matrix("expand_rows", a)?;
        if r != 1 {
            return Err(Error::shape(
                "expand_rows",
                format!("expected [1, c], got [{r}, {c}]"),
            ));
        }
        let value = self.value(a).repeat(rows);
        Ok(self.push(vec![rows, c], value, Op::ExpandRows(a), &[a]))
    }

    /// `[r, 1] -> [r, cols]` by repeating the column.
    pub fn expand_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let (r, c) = self.matrix("expand_cols", a)?;
        if c != 1 {
            return Err(Error::shape(
                "expand_cols",
                format!("expected [r, 1], got [{r}, {c}]"),
            ));
        }
        let value = self
            .value(a)
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, cols))
            .collect();
        Ok(self.push(vec![r, cols], value, Op::ExpandCols(a), &[a]))
    }

    /// Selects rows (first-axis slices) by index; indices may repeat.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rows = *shape
            .first()
            .ok_or_else(|| Error::shape("gather", "scalar input"))?;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather", format!("row {bad} of {rows}")));
        }
        let width = self.value(a).len() / rows.max(1);
        let src = self.value(a);
        let mut value = Vec::with_capacity(index.len() * width);
        for &i in index {
            value.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        Ok(self.push(out_shape, value, Op::Gather(a, index.to_vec()), &[a]))
    }

    /// Adds row `i` of `a` into row `index[i]` of a zero tensor with `rows` rows.
    pub fn scatter_add(&mut self, a: Var, index: &[usize], rows: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape
            .first()
            .ok_or_else(|| Error::shape("scatter_add", "scalar input"))?;
        if index.len() != n {
            return Err(Error::shape(
                "scatter_add",
                format!("{} indices for {n} rows", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "scatter_add",
                format!("target row {bad} of {rows}"),
            ));
        }
        let width = self.value(a).len() / n.max(1);
        let src = self.value(a);
        let mut value = vec![T::zero(); rows * width];
        for (i, &t) in index.iter().enumerate() {
            for j in 0..width {
                value[t * width + j] = value[t * width + j] + src[i * width + j];
            }
        }
        let mut out_shape = shape;
        out_shape[0] = rows;
        Ok(self.push(out_shape, value, Op::ScatterAdd(a, index.to_vec()), &[a]))
    }

    /// Multiplies row `i` by the constant `weights[i]`.
    pub fn row_scale(&mut self, a: Var, weights: &[T]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.first() != Some(&weights.len()) {
            return Err(Error::shape(
                "row_scale",
                format!("{} weights for shape {shape:?}", weights.len()),
            ));
        }
        let width = self.value(a).len() / weights.len().max(1);
        let value = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(k, &x)| x * weights[k / width])
            .collect();
        Ok(self.push(shape, value, Op::RowScale(a, weights.to_vec()), &[a]))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.matrix("slice_cols", a)?;
        if start >= end || end > c {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {c} columns"),
            ));
        }
        let src = self.value(a);
        let mut value = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            value.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        Ok(self.push(vec![r, end - start], value, Op::SliceCols(a, start), &[a]))
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::shape(
                "concat",
                format!("{} parts, axis {axis}", parts.len()),
            ));
        }
        let shapes: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.matrix("concat", p))
            .collect::<Result<_>>()?;
        let (r0, c0) = shapes[0];
        let (shape, value) = if axis == 0 {
            if shapes.iter().any(|&(_, c)| c != c0) {
                return Err(Error::shape(
                    "concat",
                    format!("column mismatch {shapes:?}"),
                ));
            }
            let rows = shapes.iter().map(|s| s.0).sum();
            let value = parts
                .iter()
                .flat_map(|&p| self.value(p).iter().copied())
                .collect();
            (vec![rows, c0], value)
        } else {
            if shapes.iter().any(|&(r, _)| r != r0) {
                return Err(Error::shape("concat", format!("row mismatch {shapes:?}")));
            }
            let cols: usize = shapes.iter().map(|s| s.1).sum();
            let mut value = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for (&p, &(_, c)) in parts.iter().zip(&shapes) {
                    value.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
                }
            }
            (vec![r0, cols], value)
        };
        Ok(self.push(shape, value, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let value = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), &[a]))
    }

    /// Softmax of a 2-D tensor along `axis`, max-shifted.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.matrix("softmax", a)?;
        if axis > 1 {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} of a 2-D tensor"),
            ));
        }
        let src = if axis == 1 {
            self.value(a).to_vec()
        } else {
            transpose_raw(self.value(a), r, c)
        };
        let (rr, cc) = if axis == 1 { (r, c) } else { (c, r) };
        let mut value = src;
        for row in value.chunks_mut(cc.max(1)).take(rr) {
            softmax_in_place(row);
        }
        if axis == 0 {
            value = transpose_raw(&value, c, r);
        }
        Ok(self.push(vec![r, c], value, Op::Softmax(a, axis), &[a]))
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix("log_softmax", a)?;
        let mut value = self.value(a).to_vec();
        for row in value.chunks_mut(c.max(1)).take(r) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|x| *x = *x - lse);
        }
        Ok(self.push(vec![r, c], value, Op::LogSoftmax(a), &[a]))
    }

    /// `out[i] = a[i, index[i]]`.
    pub fn pick_per_row(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix("pick_per_row", a)?;
        if index.len() != r || index.iter().any(|&j| j >= c) {
            return Err(Error::shape(
                "pick_per_row",
                format!("{} indices for [{r}, {c}]", index.len()),
            ));
        }
        let src = self.value(a);
        let value = index
            .iter()
            .enumerate()
            .map(|(i, &j)| src[i * c + j])
            .collect();
        Ok(self.push(vec![r], value, Op::PickPerRow(a, index.to_vec()), &[a]))
    }

    /// Patch-local multi-head attention over `[n, heads, dim]` inputs.
    ///
    /// `offsets` lists patch starts followed by `n`, strictly increasing from 0.
    /// Points attend only within their own patch.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, offsets: &[usize]) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 3
            || self.shape(k) != shape.as_slice()
            || self.shape(v) != shape.as_slice()
        {
            return Err(Error::shape(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?}",
                    self.shape(q),
                    self.shape(k),
                    self.shape(v)
                ),
            ));
        }
        check_partition(offsets, shape[0])?;
        let (out, probs) = attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            shape[1],
            shape[2],
            offsets,
        );
        Ok(self.push(
            shape,
            out,
            Op::Attention {
                q,
                k,
                v,
                offsets: offsets.to_vec(),
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Scalar node with a caller-supplied value and a fixed local gradient
    /// with respect to `input` (used for piecewise-linear losses whose sort
    /// order is frozen during the backward pass).
    pub fn linearized(&mut self, input: Var, value: T, local_grad: Vec<T>) -> Result<Var> {
        if local_grad.len() != self.value(input).len() {
            return Err(Error::shape(
                "linearized",
                format!(
                    "{} gradient entries for {:?}",
                    local_grad.len(),
                    self.shape(input)
                ),
            ));
        }
        Ok(self.push(
            vec![1],
            vec![value],
            Op::Linearized(input, local_grad),
            &[input],
        ))
    }

    /// Gradients of the one-element node `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if self.value(out).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", self.shape(out)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(vec![T::one()]);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize_with(self.nodes.len(), || None);
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let len = |v: Var| self.nodes[v.0].value.len();
        // broadcast-aware accumulation for elementwise binary ops
        let acc_elementwise = |grads: &mut [Option<Vec<T>>], v: Var, f: &dyn Fn(usize) -> T| {
            if !self.wants(v) {
                return;
            }
            let n = len(v);
            accumulate(&mut grads[v.0], n, |buf| {
                if n == 1 && g.len() != 1 {
                    buf[0] = buf[0] + (0..g.len()).map(f).sum::<T>();
                } else {
                    for (i, b) in buf.iter_mut().enumerate() {
                        *b = *b + f(i);
                    }
                }
            });
        };
        let at = |v: Var, i: usize| {
            let val = &self.nodes[v.0].value;
            if val.len() == 1 {
                val[0]
            } else {
                val[i]
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc_elementwise(grads, *a, &|i| g[i]);
                acc_elementwise(grads, *b, &|i| g[i]);
            }
            Op::Sub(a, b) => {
                acc_elementwise(grads, *a, &|i| g[i]);
                acc_elementwise(grads, *b, &|i| -g[i]);
            }
            Op::Mul(a, b) => {
                acc_elementwise(grads, *a, &|i| g[i] * at(*b, i));
                acc_elementwise(grads, *b, &|i| g[i] * at(*a, i));
            }
            Op::AddScalar(a) => acc_elementwise(grads, *a, &|i| g[i]),
            Op::Scale(a, c) => acc_elementwise(grads, *a, &|i| g[i] * *c),
            Op::Exp(a) => acc_elementwise(grads, *a, &|i| g[i] * node.value[i]),
            Op::Log(a) => acc_elementwise(grads, *a, &|i| g[i] / at(*a, i)),
            Op::Relu(a) => acc_elementwise(grads, *a, &|i| {
                if at(*a, i) > T::zero() {
                    g[i]
                } else {
                    T::zero()
                }
            }),
            Op::Powf(a, p) => {
                acc_elementwise(grads, *a, &|i| g[i] * *p * at(*a, i).powf(*p - T::one()))
            }
            Op::ClampMin(a, floor) => acc_elementwise(grads, *a, &|i| {
                if at(*a, i) >= *floor {
                    g[i]
                } else {
                    T::zero()
                }
            }),
            Op::Reshape(a) => acc_elementwise(grads, *a, &|i| g[i]),
            Op::SumAll(a) => acc_elementwise(grads, *a, &|_| g[0]),
            Op::Linearized(a, local) => acc_elementwise(grads, *a, &|i| g[0] * local[i]),
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(&self.nodes[a.0].shape);
                let n = node.shape[1];
                if self.wants(*a) {
                    let bt = transpose_raw(&self.nodes[b.0].value, k, n);
                    let ga = matmul_raw(g, &bt, m, n, k);
                    accumulate(&mut grads[a.0], m * k, |buf| add_into(buf, &ga));
                }
                if self.wants(*b) {
                    let at_ = transpose_raw(&self.nodes[a.0].value, m, k);
                    let gb = matmul_raw(&at_, g, k, m, n);
                    accumulate(&mut grads[b.0], k * n, |buf| add_into(buf, &gb));
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let (r, c) = rows_cols(&node.shape);
                    let ga = transpose_raw(g, r, c);
                    accumulate(&mut grads[a.0], ga.len(), |buf| add_into(buf, &ga));
                }
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                if self.wants(*a) {
                    let (r, c) = rows_cols(&self.nodes[a.0].shape);
                    let scale = match node.op {
                        Op::MeanAxis(..) => {
                            T::one() / T::lit(if *axis == 0 { r } else { c } as f64)
                        }
                        _ => T::one(),
                    };
                    accumulate(&mut grads[a.0], r * c, |buf| {
                        for i in 0..r {
                            for j in 0..c {
                                let gi = if *axis == 0 { g[j] } else { g[i] };
                                buf[i * c + j] = buf[i * c + j] + gi * scale;
                            }
                        }
                    });
                }
            }
            Op::ExpandRows(a) => {
                if self.wants(*a) {
                    let (r, c) = rows_cols(&node.shape);
                    accumulate(&mut grads[a.0], c, |buf| {
                        for i in 0..r {
                            for j in 0..c {
                                buf[j] = buf[j] + g[i * c + j];
                            }
                        }
                    });
                }
            }
            Op::ExpandCols(a) => {
                if self.wants(*a) {
                    let (r, c) = rows_cols(&node.shape);
                    accumulate(&mut grads[a.0], r, |buf| {
                        for i in 0..r {
                            buf[i] = buf[i] + g[i * c..(i + 1) * c].iter().copied().sum();
                        }
                    });
                }
            }
            Op::Gather(a, index) => {
                if self.wants(*a) {
                    let n = len(*a);
                    let width = g.len() / index.len().max(1);
                    accumulate(&mut grads[a.0], n, |buf| {
                        for (k, &i) in index.iter().enumerate() {
                            for j in 0..width {
                                buf[i * width + j] = buf[i * width + j] + g[k * width + j];
                            }
                        }
                    });
                }
            }
            Op::ScatterAdd(a, index) => {
                if self.wants(*a) {
                    let n = len(*a);
                    let width = n / index.len().max(1);
                    accumulate(&mut grads[a.0], n, |buf| {
                        for (i, &t) in index.iter().enumerate() {
                            for j in 0..width {
                                buf[i * width + j] = buf[i * width + j] + g[t * width + j];
                            }
                        }
                    });
                }
            }
            Op::RowScale(a, w) => {
                let width = g.len() / w.len().max(1);
                acc_elementwise(grads, *a, &|i| g[i] * w[i / width]);
            }
            Op::SliceCols(a, start) => {
                if self.wants(*a) {
                    let (r, c) = rows_cols(&self.nodes[a.0].shape);
                    let w = node.shape[1];
                    accumulate(&mut grads[a.0], r * c, |buf| {
                        for i in 0..r {
                            for j in 0..w {
                                buf[i * c + start + j] = buf[i * c + start + j] + g[i * w + j];
                            }
                        }
                    });
                }
            }
            Op::Concat(parts, axis) => {
                let (_, total_c) = rows_cols(&node.shape);
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = rows_cols(&self.nodes[p.0].shape);
                    if self.wants(p) {
                        accumulate(&mut grads[p.0], r * c, |buf| {
                            for i in 0..r {
                                for j in 0..c {
                                    let src = if *axis == 0 {
                                        (offset + i) * total_c + j
                                    } else {
                                        i * total_c + offset + j
                                    };
                                    buf[i * c + j] = buf[i * c + j] + g[src];
                                }
                            }
                        });
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Softmax(a, axis) => {
                if self.wants(*a) {
                    let (r, c) = rows_cols(&node.shape);
                    let y = &node.value;
                    accumulate(&mut grads[a.0], r * c, |buf| {
                        let (outer, inner) = if *axis == 1 { (r, c) } else { (c, r) };
                        for o in 0..outer {
                            let idx = |t: usize| if *axis == 1 { o * c + t } else { t * c + o };
                            let dot: T = (0..inner).map(|t| g[idx(t)] * y[idx(t)]).sum();
                            for t in 0..inner {
                                let k = idx(t);
                                buf[k] = buf[k] + y[k] * (g[k] - dot);
                            }
                        }
                    });
                }
            }
            Op::LogSoftmax(a) => {
                if self.wants(*a) {
                    let (r, c) = rows_cols(&node.shape);
                    let y = &node.value;
                    accumulate(&mut grads[a.0], r * c, |buf| {
                        for i in 0..r {
                            let gs: T = g[i * c..(i + 1) * c].iter().copied().sum();
                            for j in 0..c {
                                let k = i * c + j;
                                buf[k] = buf[k] + g[k] - y[k].exp() * gs;
                            }
                        }
                    });
                }
            }
            Op::PickPerRow(a, index) => {
                if self.wants(*a) {
                    let (r, c) = rows_cols(&self.nodes[a.0].shape);
                    accumulate(&mut grads[a.0], r * c, |buf| {
                        for (i, &j) in index.iter().enumerate() {
                            buf[i * c + j] = buf[i * c + j] + g[i];
                        }
                    });
                }
            }
            Op::Attention {
                q,
                k,
                v,
                offsets,
                probs,
            } => {
                let heads = node.shape[1];
                let dim = node.shape[2];
                let (gq, gk, gv) = attention_backward(
                    &self.nodes[q.0].value,
                    &self.nodes[k.0].value,
                    &self.nodes[v.0].value,
                    probs,
                    g,
                    heads,
                    dim,
                    offsets,
                );
                for (var, gx) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if self.wants(var) {
                        accumulate(&mut grads[var.0], gx.len(), |buf| add_into(buf, &gx));
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(buf: &mut [T], src: &[T]) {
    for (b, &s) in buf.iter_mut().zip(src) {
        *b = *b + s;
    }
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &y) in row.iter_mut().zip(brow) {
                *o = *o + x * y;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw<T: Scalar>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn reduce_axis<T: Scalar>(
    a: &[T],
    r: usize,
    c: usize,
    axis: usize,
) -> Option<(Vec<usize>, Vec<T>)> {
    match axis {
        0 => {
            let mut out = vec![T::zero(); c];
            for i in 0..r {
                for j in 0..c {
                    out[j] = out[j] + a[i * c + j];
                }
            }
            Some((vec![1, c], out))
        }
        1 => Some((
            vec![r, 1],
            (0..r)
                .map(|i| a[i * c..(i + 1) * c].iter().copied().sum())
                .collect(),
        )),
        _ => None,
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}
