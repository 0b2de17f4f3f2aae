use std::fmt;

use super::array::{axis_split, broadcast_offsets, broadcast_shape, gemm, reduce_to, strides, Array};
use super::params::ParamStore;
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation implemented outside the built-in op set.
///
/// The forward value is computed by the caller and handed to
/// [`Graph::custom`]; the op only has to map the output gradient back onto its
/// inputs. Return `None` for inputs that receive no gradient.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Array], output: &Array, grad: &Array) -> Vec<Option<Array>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Neg,
    Scale(f64),
    Offset(f64),
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Ln,
    Sin,
    Cos,
    Sqrt,
    Square,
    Abs,
    /// `max(x, c)` with gradient only where `x > c`.
    MaxScalar(f64),
    /// `sin(t)/t` with `t = √x`.
    SincA,
    /// `(1 − cos t)/t²` with `t = √x`.
    SincB,
    /// `(t − sin t)/t³` with `t = √x`.
    SincC,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary),
    Unary(Unary),
    Sum,
    SumAxis { axis: usize },
    Matmul,
    Softmax { axis: usize },
    Conv2d,
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Reshape,
    Permute(Vec<usize>),
    BroadcastTo,
    Skew,
    Custom(Box<dyn CustomOp>),
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    inputs: Vec<Var>,
    requires_grad: bool,
    param: Option<String>,
}

/// Define-by-run reverse-mode tape. Nodes are appended in evaluation order, so
/// the node list is already a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward_all`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Array, op: Op, inputs: Vec<Var>) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, inputs, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, inputs: vec![], requires_grad: false, param: None });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Array) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, inputs: vec![], requires_grad: true, param: None });
        Var(self.nodes.len() - 1)
    }

    /// A leaf bound to a named parameter; [`Graph::backward`] accumulates its
    /// gradient into the store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: vec![],
            requires_grad: true,
            param: Some(name.to_string()),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Array::scalar(v))
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let value = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Array::from_parts(av.shape().to_vec(), data)
        } else {
            let shape = broadcast_shape(av.shape(), bv.shape()).ok_or_else(|| AutodiffError::ShapeMismatch {
                op: name,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            })?;
            let oa = broadcast_offsets(av.shape(), &shape);
            let ob = broadcast_offsets(bv.shape(), &shape);
            let data = oa.iter().zip(&ob).map(|(&i, &j)| f(av.data()[i], bv.data()[j])).collect();
            Array::from_parts(shape, data)
        };
        Ok(self.push(value, Op::Binary(kind), vec![a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| unary_forward(kind, x));
        self.push(value, Op::Unary(kind), vec![a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(Unary::Scale(s), a)
    }

    pub fn offset(&mut self, a: Var, s: f64) -> Var {
        self.unary(Unary::Offset(s), a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Unary::Ln, a)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(Unary::Sin, a)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(Unary::Cos, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn max_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::MaxScalar(c), a)
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(Array::scalar(s), Op::Sum, vec![a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if axis >= av.ndim() {
            return Err(AutodiffError::Invalid { op: "sum_axis", msg: format!("axis {axis} for shape {:?}", av.shape()) });
        }
        let (outer, len, inner) = axis_split(av.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += av.data()[base + i];
                }
            }
        }
        let mut shape = av.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(self.push(Array::from_parts(shape, out), Op::SumAxis { axis }, vec![a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let len = *self.shape(a).get(axis).unwrap_or(&1) as f64;
        let s = self.sum_axis(a, axis, keepdim)?;
        Ok(self.scale(s, 1.0 / len))
    }

    // ---- linear algebra ----------------------------------------------------

    /// Matrix product over the last two axes. Either operand may carry a
    /// leading batch axis; a 2-D operand is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let dims = matmul_dims(av.shape(), bv.shape())?;
        let MatmulDims { batch, m, k, n, a_batched, b_batched } = dims;
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let ao = if a_batched { bi * m * k } else { 0 };
            let bo = if b_batched { bi * k * n } else { 0 };
            gemm(m, k, n, &av.data()[ao..ao + m * k], false, &bv.data()[bo..bo + k * n], false, &mut out[bi * m * n..(bi + 1) * m * n], false);
        }
        let shape = if a_batched || b_batched { vec![batch, m, n] } else { vec![m, n] };
        Ok(self.push(Array::from_parts(shape, out), Op::Matmul, vec![a, b]))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if axis >= av.ndim() {
            return Err(AutodiffError::Invalid { op: "softmax", msg: format!("axis {axis} for shape {:?}", av.shape()) });
        }
        let (outer, len, inner) = axis_split(av.shape(), axis);
        let mut out = vec![0.0; av.len()];
        let x = av.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (x[at(l)] - mx).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        let shape = av.shape().to_vec();
        Ok(self.push(Array::from_parts(shape, out), Op::Softmax { axis }, vec![a]))
    }

    /// 2-D convolution, stride 1, zero padding that preserves the spatial size.
    /// `x`: (B, Cin, H, W); `w`: (Cout, Cin, k, k) with odd k; `bias`: (Cout).
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let geo = ConvGeom::new(xv.shape(), wv.shape())?;
        if let Some(b) = bias {
            let bs = self.nodes[b.0].value.shape();
            if bs != [geo.cout] {
                return Err(AutodiffError::ShapeMismatch { op: "conv2d bias", lhs: bs.to_vec(), rhs: vec![geo.cout] });
            }
        }
        let hw = geo.h * geo.w;
        let mut out = vec![0.0; geo.batch * geo.cout * hw];
        let mut cols = vec![0.0; geo.col_rows() * hw];
        for bi in 0..geo.batch {
            let xin = &xv.data()[bi * geo.cin * hw..(bi + 1) * geo.cin * hw];
            geo.im2col(xin, &mut cols);
            let dst = &mut out[bi * geo.cout * hw..(bi + 1) * geo.cout * hw];
            gemm(geo.cout, geo.col_rows(), hw, wv.data(), false, &cols, false, dst, false);
        }
        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            let bv = self.nodes[b.0].value.data();
            for bi in 0..geo.batch {
                for c in 0..geo.cout {
                    let base = (bi * geo.cout + c) * hw;
                    out[base..base + hw].iter_mut().for_each(|v| *v += bv[c]);
                }
            }
            inputs.push(b);
        }
        let shape = vec![geo.batch, geo.cout, geo.h, geo.w];
        Ok(self.push(Array::from_parts(shape, out), Op::Conv2d, inputs))
    }

    // ---- structural --------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(AutodiffError::Invalid { op: "concat", msg: format!("axis {axis} for shape {first:?}") });
        }
        let mut total = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            let compatible = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch { op: "concat", lhs: first.clone(), rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let v = &self.nodes[p.0].value;
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(self.push(Array::from_parts(shape, out), Op::Concat { axis }, parts.to_vec()))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if axis >= av.ndim() || start >= end || end > av.shape()[axis] {
            return Err(AutodiffError::Invalid {
                op: "slice",
                msg: format!("[{start}..{end}) on axis {axis} of shape {:?}", av.shape()),
            });
        }
        let (outer, len, inner) = axis_split(av.shape(), axis);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&av.data()[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = end - start;
        Ok(self.push(Array::from_parts(shape, out), Op::Slice { axis, start }, vec![a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape, vec![a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let mut seen = vec![false; av.ndim()];
        if axes.len() != av.ndim() || axes.iter().any(|&x| x >= av.ndim() || std::mem::replace(&mut seen[x], true)) {
            return Err(AutodiffError::Invalid { op: "permute", msg: format!("axes {axes:?} for shape {:?}", av.shape()) });
        }
        let value = permute_array(av, axes);
        Ok(self.push(value, Op::Permute(axes.to_vec()), vec![a]))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let n = self.shape(a).len();
        if n < 2 {
            return Err(AutodiffError::Invalid { op: "transpose", msg: format!("shape {:?}", self.shape(a)) });
        }
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 1, n - 2);
        self.permute(a, &axes)
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        match broadcast_shape(av.shape(), shape) {
            Some(s) if s == shape => {}
            _ => return Err(AutodiffError::ShapeMismatch { op: "broadcast_to", lhs: av.shape().to_vec(), rhs: shape.to_vec() }),
        }
        let offs = broadcast_offsets(av.shape(), shape);
        let data = offs.iter().map(|&o| av.data()[o]).collect();
        Ok(self.push(Array::from_parts(shape.to_vec(), data), Op::BroadcastTo, vec![a]))
    }

    /// `(…, 3) → (…, 3, 3)` skew-symmetric matrices.
    pub fn skew(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.shape().last() != Some(&3) {
            return Err(AutodiffError::ShapeMismatch { op: "skew", lhs: av.shape().to_vec(), rhs: vec![3] });
        }
        let mut out = Vec::with_capacity(av.len() * 3);
        for v in av.data().chunks(3) {
            let (x, y, z) = (v[0], v[1], v[2]);
            out.extend_from_slice(&[0.0, -z, y, z, 0.0, -x, -y, x, 0.0]);
        }
        let mut shape = av.shape().to_vec();
        shape.push(3);
        Ok(self.push(Array::from_parts(shape, out), Op::Skew, vec![a]))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], value: Array) -> Var {
        self.push(value, Op::Custom(op), inputs.to_vec())
    }

    // ---- backward ----------------------------------------------------------

    /// Gradients of a scalar `loss` with respect to every node.
    pub fn backward_all(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let input_grads = self.node_backward(node, &g)?;
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backpropagate `loss` and add the gradients of every parameter leaf into
    /// `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward_all(loss)?;
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Some(name), Some(g)) = (&node.param, grads.grads[i].as_ref()) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    fn node_backward(&self, node: &Node, g: &Array) -> Result<Vec<Option<Array>>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Binary(kind) => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (av, bv) = (val(a), val(b));
                let shape = node.value.shape();
                let same = av.shape() == shape && bv.shape() == shape;
                let oa = if same { None } else { Some(broadcast_offsets(av.shape(), shape)) };
                let ob = if same { None } else { Some(broadcast_offsets(bv.shape(), shape)) };
                let at = |arr: &Array, offs: &Option<Vec<usize>>, i: usize| match offs {
                    None => arr.data()[i],
                    Some(o) => arr.data()[o[i]],
                };
                let full_a: Option<Array> = needs(a).then(|| {
                    let data = (0..g.len())
                        .map(|i| match kind {
                            Binary::Add | Binary::Sub => g.data()[i],
                            Binary::Mul => g.data()[i] * at(bv, &ob, i),
                            Binary::Div => g.data()[i] / at(bv, &ob, i),
                        })
                        .collect();
                    Array::from_parts(shape.to_vec(), data)
                });
                let full_b: Option<Array> = needs(b).then(|| {
                    let data = (0..g.len())
                        .map(|i| match kind {
                            Binary::Add => g.data()[i],
                            Binary::Sub => -g.data()[i],
                            Binary::Mul => g.data()[i] * at(av, &oa, i),
                            Binary::Div => {
                                let y = at(bv, &ob, i);
                                -g.data()[i] * at(av, &oa, i) / (y * y)
                            }
                        })
                        .collect();
                    Array::from_parts(shape.to_vec(), data)
                });
                vec![full_a.map(|x| reduce_to(&x, av.shape())), full_b.map(|x| reduce_to(&x, bv.shape()))]
            }
            Op::Unary(kind) => {
                let x = val(node.inputs[0]);
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(y.data())
                    .map(|((&gi, &xi), &yi)| gi * unary_derivative(*kind, xi, yi))
                    .collect();
                vec![Some(Array::from_parts(x.shape().to_vec(), data))]
            }
            Op::Sum => {
                let x = val(node.inputs[0]);
                vec![Some(Array::full(x.shape(), g.item()))]
            }
            Op::SumAxis { axis, .. } => {
                let x = val(node.inputs[0]);
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let mut out = vec![0.0; x.len()];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        out[base..base + inner].copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Array::from_parts(x.shape().to_vec(), out))]
            }
            Op::Matmul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (av, bv) = (val(a), val(b));
                let MatmulDims { batch, m, k, n, a_batched, b_batched } = matmul_dims(av.shape(), bv.shape())?;
                let mut ga = needs(a).then(|| Array::zeros(av.shape()));
                let mut gb = needs(b).then(|| Array::zeros(bv.shape()));
                for bi in 0..batch {
                    let ao = if a_batched { bi * m * k } else { 0 };
                    let bo = if b_batched { bi * k * n } else { 0 };
                    let gc = &g.data()[bi * m * n..(bi + 1) * m * n];
                    if let Some(ga) = ga.as_mut() {
                        gemm(m, n, k, gc, false, &bv.data()[bo..bo + k * n], true, &mut ga.data_mut()[ao..ao + m * k], true);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gemm(k, m, n, &av.data()[ao..ao + m * k], true, gc, false, &mut gb.data_mut()[bo..bo + k * n], true);
                    }
                }
                vec![ga, gb]
            }
            Op::Softmax { axis } => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let mut out = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g.data()[at(l)] * y.data()[at(l)]).sum();
                        for l in 0..len {
                            out[at(l)] = y.data()[at(l)] * (g.data()[at(l)] - dot);
                        }
                    }
                }
                vec![Some(Array::from_parts(y.shape().to_vec(), out))]
            }
            Op::Conv2d => {
                let (x, w) = (node.inputs[0], node.inputs[1]);
                let (xv, wv) = (val(x), val(w));
                let geo = ConvGeom::new(xv.shape(), wv.shape())?;
                let hw = geo.h * geo.w;
                let mut gx = needs(x).then(|| Array::zeros(xv.shape()));
                let mut gw = needs(w).then(|| Array::zeros(wv.shape()));
                let mut cols = vec![0.0; geo.col_rows() * hw];
                for bi in 0..geo.batch {
                    let gy = &g.data()[bi * geo.cout * hw..(bi + 1) * geo.cout * hw];
                    if let Some(gw) = gw.as_mut() {
                        geo.im2col(&xv.data()[bi * geo.cin * hw..(bi + 1) * geo.cin * hw], &mut cols);
                        gemm(geo.cout, hw, geo.col_rows(), gy, false, &cols, true, gw.data_mut(), true);
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(geo.col_rows(), geo.cout, hw, wv.data(), true, gy, false, &mut cols, false);
                        geo.col2im_add(&cols, &mut gx.data_mut()[bi * geo.cin * hw..(bi + 1) * geo.cin * hw]);
                    }
                }
                let mut out = vec![gx, gw];
                if node.inputs.len() == 3 {
                    let gb = needs(node.inputs[2]).then(|| {
                        let mut gb = vec![0.0; geo.cout];
                        for bi in 0..geo.batch {
                            for (c, slot) in gb.iter_mut().enumerate() {
                                let base = (bi * geo.cout + c) * hw;
                                *slot += g.data()[base..base + hw].iter().sum::<f64>();
                            }
                        }
                        Array::from_vec(gb)
                    });
                    out.push(gb);
                }
                out
            }
            Op::Concat { axis } => {
                let shape = node.value.shape();
                let (outer, _, inner) = axis_split(shape, *axis);
                let total_chunk = shape[*axis] * inner;
                let mut start = 0;
                node.inputs
                    .iter()
                    .map(|&p| {
                        let ps = val(p).shape();
                        let chunk = ps[*axis] * inner;
                        let r = needs(p).then(|| {
                            let mut out = Vec::with_capacity(outer * chunk);
                            for o in 0..outer {
                                let base = o * total_chunk + start;
                                out.extend_from_slice(&g.data()[base..base + chunk]);
                            }
                            Array::from_parts(ps.to_vec(), out)
                        });
                        start += chunk;
                        r
                    })
                    .collect()
            }
            Op::Slice { axis, start } => {
                let x = val(node.inputs[0]);
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let width = node.value.shape()[*axis];
                let mut out = vec![0.0; x.len()];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    out[dst..dst + width * inner].copy_from_slice(&g.data()[o * width * inner..(o + 1) * width * inner]);
                }
                vec![Some(Array::from_parts(x.shape().to_vec(), out))]
            }
            Op::Reshape => {
                let x = val(node.inputs[0]);
                vec![Some(g.clone().reshaped(x.shape())?)]
            }
            Op::Permute(axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                vec![Some(permute_array(g, &inv))]
            }
            Op::BroadcastTo => {
                let x = val(node.inputs[0]);
                vec![Some(reduce_to(g, x.shape()))]
            }
            Op::Skew => {
                let x = val(node.inputs[0]);
                let mut out = Vec::with_capacity(x.len());
                for m in g.data().chunks(9) {
                    out.push(m[7] - m[5]);
                    out.push(m[2] - m[6]);
                    out.push(m[3] - m[1]);
                }
                vec![Some(Array::from_parts(x.shape().to_vec(), out))]
            }
            Op::Custom(op) => {
                let inputs: Vec<&Array> = node.inputs.iter().map(|&v| val(v)).collect();
                let grads = op.backward(&inputs, &node.value, g);
                if grads.len() != inputs.len() {
                    return Err(AutodiffError::Invalid {
                        op: "custom",
                        msg: format!("{} returned {} gradients for {} inputs", op.name(), grads.len(), inputs.len()),
                    });
                }
                grads
            }
        })
    }
}

fn unary_forward(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Neg => -x,
        Unary::Scale(s) => x * s,
        Unary::Offset(s) => x + s,
        Unary::Relu => x.max(0.0),
        Unary::Sigmoid => sigmoid(x),
        Unary::Tanh => x.tanh(),
        Unary::Exp => x.exp(),
        Unary::Ln => x.ln(),
        Unary::Sin => x.sin(),
        Unary::Cos => x.cos(),
        Unary::Sqrt => x.sqrt(),
        Unary::Square => x * x,
        Unary::Abs => x.abs(),
        Unary::MaxScalar(c) => x.max(c),
        Unary::SincA => sinc_coeffs(x).0[0],
        Unary::SincB => sinc_coeffs(x).0[1],
        Unary::SincC => sinc_coeffs(x).0[2],
    }
}

fn unary_derivative(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Neg => -1.0,
        Unary::Scale(s) => s,
        Unary::Offset(_) => 1.0,
        Unary::Relu => (x > 0.0) as u8 as f64,
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Tanh => 1.0 - y * y,
        Unary::Exp => y,
        Unary::Ln => 1.0 / x,
        Unary::Sin => x.cos(),
        Unary::Cos => -x.sin(),
        Unary::Sqrt => 0.5 / y,
        Unary::Square => 2.0 * x,
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::MaxScalar(c) => (x > c) as u8 as f64,
        Unary::SincA => sinc_coeffs(x).1[0],
        Unary::SincB => sinc_coeffs(x).1[1],
        Unary::SincC => sinc_coeffs(x).1[2],
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Values and x-derivatives of `sin t/t`, `(1 − cos t)/t²`, `(t − sin t)/t³`
/// at `t = √x`, for `x ≥ 0`.
pub(crate) fn sinc_coeffs(x: f64) -> ([f64; 3], [f64; 3]) {
    let x = x.max(0.0);
    if x < 1e-2 {
        // Power series in x; five terms keep the truncation error below 1e-17.
        let a = [1.0, -1.0 / 6.0, 1.0 / 120.0, -1.0 / 5040.0, 1.0 / 362880.0];
        let b = [0.5, -1.0 / 24.0, 1.0 / 720.0, -1.0 / 40320.0, 1.0 / 3628800.0];
        let c = [1.0 / 6.0, -1.0 / 120.0, 1.0 / 5040.0, -1.0 / 362880.0, 1.0 / 39916800.0];
        let series = |k: &[f64; 5]| {
            let v = k[0] + x * (k[1] + x * (k[2] + x * (k[3] + x * k[4])));
            let d = k[1] + x * (2.0 * k[2] + x * (3.0 * k[3] + x * 4.0 * k[4]));
            (v, d)
        };
        let (va, da) = series(&a);
        let (vb, db) = series(&b);
        let (vc, dc) = series(&c);
        ([va, vb, vc], [da, db, dc])
    } else {
        let t = x.sqrt();
        let (s, c) = t.sin_cos();
        let omc = 1.0 - c;
        let t2 = x;
        let t3 = t2 * t;
        let va = s / t;
        let vb = omc / t2;
        let vc = (t - s) / t3;
        let da = (t * c - s) / (2.0 * t3);
        let db = (t * s - 2.0 * omc) / (2.0 * t2 * t2);
        let dc = (omc * t - 3.0 * (t - s)) / (2.0 * t2 * t3);
        ([va, vb, vc], [da, db, dc])
    }
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    let err = || AutodiffError::ShapeMismatch { op: "matmul", lhs: a.to_vec(), rhs: b.to_vec() };
    let (ab, m, k) = match a {
        [m, k] => (None, *m, *k),
        [bt, m, k] => (Some(*bt), *m, *k),
        _ => return Err(err()),
    };
    let (bb, k2, n) = match b {
        [k2, n] => (None, *k2, *n),
        [bt, k2, n] => (Some(*bt), *k2, *n),
        _ => return Err(err()),
    };
    if k != k2 {
        return Err(err());
    }
    let batch = match (ab, bb) {
        (Some(x), Some(y)) if x != y => return Err(err()),
        (Some(x), _) | (_, Some(x)) => x,
        (None, None) => 1,
    };
    Ok(MatmulDims { batch, m, k, n, a_batched: ab.is_some(), b_batched: bb.is_some() })
}

fn permute_array(a: &Array, axes: &[usize]) -> Array {
    let in_shape = a.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&x| in_shape[x]).collect();
    let step: Vec<usize> = axes.iter().map(|&x| in_strides[x]).collect();
    let n = out_shape.len();
    let total = a.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(a.data()[off]);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= step[d] * idx[d];
            idx[d] = 0;
        }
    }
    Array::from_parts(out_shape, out)
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize]) -> Result<Self> {
        let err = || AutodiffError::ShapeMismatch { op: "conv2d", lhs: x.to_vec(), rhs: w.to_vec() };
        let [batch, cin, h, wd] = *x else { return Err(err()) };
        let [cout, cin2, k, k2] = *w else { return Err(err()) };
        if cin != cin2 || k != k2 || k % 2 == 0 {
            return Err(err());
        }
        Ok(ConvGeom { batch, cin, cout, h, w: wd, k })
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Rows are (channel, ky, kx); columns are output pixels.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (h, w, k) = (self.h as isize, self.w as isize, self.k);
        let pad = (k / 2) as isize;
        let hw = self.h * self.w;
        for c in 0..self.cin {
            let plane = &x[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let sy = y + dy;
                        let line = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                        if sy < 0 || sy >= h {
                            line.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[(sy * w) as usize..((sy + 1) * w) as usize];
                        for (xo, slot) in line.iter_mut().enumerate() {
                            let sx = xo as isize + dx;
                            *slot = if sx < 0 || sx >= w { 0.0 } else { src[sx as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], x: &mut [f64]) {
        let (h, w, k) = (self.h as isize, self.w as isize, self.k);
        let pad = (k / 2) as isize;
        let hw = self.h * self.w;
        for c in 0..self.cin {
            let plane = &mut x[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let sy = y + dy;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        let line = &src[(y * w) as usize..((y + 1) * w) as usize];
                        let dst = &mut plane[(sy * w) as usize..((sy + 1) * w) as usize];
                        for (xo, v) in line.iter().enumerate() {
                            let sx = xo as isize + dx;
                            if sx >= 0 && sx < w {
                                dst[sx as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}
