use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::array::validate_shape;
use super::kernels;
use super::{Array, GraphError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Reciprocal,
    Tanh,
    Sigmoid,
    Abs,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Param(String),
    Input(String),
    Const(Array),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Unary(Unary, NodeId),
    Affine {
        x: NodeId,
        scale: f64,
        shift: f64,
    },
    Sum(NodeId),
    Mean(NodeId),
    SumAxis {
        x: NodeId,
        axis: usize,
    },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    },
    Softmax(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    BilinearSample {
        map: NodeId,
        points: NodeId,
    },
    Rodrigues(NodeId),
    BaryInterp {
        src: NodeId,
        index: NodeId,
        weight: NodeId,
    },
}

impl Op {
    pub(crate) fn kind(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Input(_) => "input",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Unary(u, _) => match u {
                Unary::Neg => "neg",
                Unary::Exp => "exp",
                Unary::Log => "log",
                Unary::Sqrt => "sqrt",
                Unary::Square => "square",
                Unary::Reciprocal => "reciprocal",
                Unary::Tanh => "tanh",
                Unary::Sigmoid => "sigmoid",
                Unary::Abs => "abs",
            },
            Op::Affine { .. } => "affine",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Softmax(_) => "softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::BilinearSample { .. } => "bilinear_sample",
            Op::Rodrigues(_) => "rodrigues",
            Op::BaryInterp { .. } => "bary_interp",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Param(_) | Op::Input(_) | Op::Const(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Unary(_, x)
            | Op::Affine { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumAxis { x, .. }
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Slice { x, .. }
            | Op::Softmax(x)
            | Op::Rodrigues(x) => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::BilinearSample { map, points } => vec![*map, *points],
            Op::BaryInterp { src, index, weight } => vec![*src, *index, *weight],
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) shape: Vec<usize>,
    pub(crate) needs_grad: bool,
}

/// Differentiable expression DAG. Nodes are appended in topological order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    leaves: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

/// Named leaf values for one evaluation.
#[derive(Clone, Default)]
pub struct Bindings<'a> {
    map: HashMap<&'a str, &'a Array>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(mut self, name: &'a str, value: &'a Array) -> Self {
        self.map.insert(name, value);
        self
    }

    pub fn insert(&mut self, name: &'a str, value: &'a Array) {
        self.map.insert(name, value);
    }

    pub fn extend(&mut self, map: &'a BTreeMap<String, Array>) {
        for (k, v) in map {
            self.map.insert(k.as_str(), v);
        }
    }

    pub fn get(&self, name: &str) -> Option<&'a Array> {
        self.map.get(name).copied()
    }
}

/// Forward values of every node.
pub struct Values<'a> {
    pub(crate) slots: Vec<Cow<'a, Array>>,
    outputs: &'a BTreeMap<String, NodeId>,
}

impl<'a> Values<'a> {
    pub fn get(&self, id: NodeId) -> &Array {
        &self.slots[id.0]
    }

    pub fn output(&self, name: &str) -> Option<&Array> {
        self.outputs.get(name).map(|id| self.get(*id))
    }

    /// Every marked output by name.
    pub fn outputs(&self) -> BTreeMap<String, Array> {
        self.outputs
            .iter()
            .map(|(k, id)| (k.clone(), self.get(*id).clone()))
            .collect()
    }

    /// First node (in topological order) holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.slots.iter().position(|a| !a.is_finite())
    }
}

/// Gradients of every parameter leaf and every differentiable input.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<String, Array>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Array> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.grads.iter()
    }

    pub fn into_map(self) -> BTreeMap<String, Array> {
        self.grads
    }
}

fn shape_err(msg: String) -> GraphError {
    GraphError::Shape(msg)
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn op_kind(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.kind()
    }

    /// Names of parameter leaves, sorted.
    pub fn param_names(&self) -> Vec<String> {
        self.leaves
            .iter()
            .filter(|(_, id)| matches!(self.nodes[id.0].op, Op::Param(_)))
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn leaf(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    pub fn output_node(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let needs_grad = match &op {
            Op::Param(_) => true,
            Op::Input(_) | Op::Const(_) => false,
            other => other.inputs().iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            shape,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf_node(&mut self, name: &str, shape: &[usize], op: Op) -> Result<NodeId, GraphError> {
        validate_shape(shape)?;
        if let Some(&id) = self.leaves.get(name) {
            let node = &self.nodes[id.0];
            let same_kind = std::mem::discriminant(&node.op) == std::mem::discriminant(&op);
            if node.shape == shape && same_kind {
                return Ok(id);
            }
            return Err(shape_err(format!(
                "leaf `{name}` redeclared with shape {shape:?} (was {:?})",
                node.shape
            )));
        }
        let id = self.push(op, shape.to_vec());
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    /// Trainable leaf. Declaring the same name twice returns the same node.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, GraphError> {
        self.leaf_node(name, shape, Op::Param(name.to_string()))
    }

    /// Data leaf that receives no gradient.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, GraphError> {
        self.leaf_node(name, shape, Op::Input(name.to_string()))
    }

    /// Data leaf whose gradient is reported by [`Graph::backward_seeded`].
    pub fn input_differentiable(
        &mut self,
        name: &str,
        shape: &[usize],
    ) -> Result<NodeId, GraphError> {
        let id = self.leaf_node(name, shape, Op::Input(name.to_string()))?;
        self.nodes[id.0].needs_grad = true;
        Ok(id)
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Array::scalar(v))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        make: fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId, GraphError> {
        let shape = kernels::broadcast_shape(self.shape(a), self.shape(b)).ok_or_else(|| {
            shape_err(format!(
                "cannot broadcast {:?} with {:?}",
                self.shape(a),
                self.shape(b)
            ))
        })?;
        Ok(self.push(make(a, b), shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary(a, b, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary(a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary(a, b, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary(a, b, Op::Div)
    }

    pub fn unary(&mut self, u: Unary, x: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Unary(u, x), shape))
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Unary::Neg, x)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Unary::Log, x)
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Unary::Sqrt, x)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Unary::Square, x)
    }

    pub fn reciprocal(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Unary::Reciprocal, x)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.unary(Unary::Abs, x)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId, GraphError> {
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Affine { x, scale, shift }, shape))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId, GraphError> {
        self.affine(x, s, 0.0)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        Ok(self.push(Op::Sum(x), vec![1]))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        Ok(self.push(Op::Mean(x), vec![1]))
    }

    /// Sums out `axis`; a rank-1 input collapses to `[1]`.
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId, GraphError> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(shape_err(format!("axis {axis} out of range for {s:?}")));
        }
        let mut shape: Vec<usize> = s.to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push(Op::SumAxis { x, axis }, shape))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err(format!("matmul of {sa:?} and {sb:?}")));
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul(a, b), shape))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err(format!("transpose of rank-{} array", s.len())));
        }
        let shape = vec![s[1], s[0]];
        Ok(self.push(Op::Transpose(x), shape))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, GraphError> {
        validate_shape(shape)?;
        let n: usize = self.shape(x).iter().product();
        if n != shape.iter().product::<usize>() {
            return Err(shape_err(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape(x)
            )));
        }
        Ok(self.push(Op::Reshape(x), shape.to_vec()))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, GraphError> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat of nothing".into()))?;
        let mut shape = self.shape(*first).to_vec();
        if axis >= shape.len() {
            return Err(shape_err(format!("concat axis {axis} for {shape:?}")));
        }
        for p in &parts[1..] {
            let s = self.shape(*p);
            let compatible = s.len() == shape.len()
                && s.iter()
                    .zip(&shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err(format!("concat of {shape:?} with {s:?}")));
            }
            shape[axis] += s[axis];
        }
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            shape,
        ))
    }

    pub fn slice(
        &mut self,
        x: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<NodeId, GraphError> {
        let mut shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(shape_err(format!(
                "slice {start}..{end} on axis {axis} of {shape:?}"
            )));
        }
        shape[axis] = end - start;
        Ok(self.push(
            Op::Slice {
                x,
                axis,
                start,
                end,
            },
            shape,
        ))
    }

    /// Softmax along the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Softmax(x), shape))
    }

    /// 2-D convolution of `x: [Cin,H,W]` with `w: [Cout,Cin,k,k]` and bias `b: [Cout]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, GraphError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let ok = sx.len() == 3
            && sw.len() == 4
            && sw[1] == sx[0]
            && sw[2] == sw[3]
            && sb == [sw[0]]
            && stride > 0;
        if !ok {
            return Err(shape_err(format!(
                "conv2d of {sx:?} with weight {sw:?} bias {sb:?}"
            )));
        }
        let k = sw[2];
        let (h, wd) = (sx[1] + 2 * pad, sx[2] + 2 * pad);
        if h < k || wd < k {
            return Err(shape_err(format!(
                "conv2d kernel {k} larger than input {sx:?}"
            )));
        }
        let shape = vec![sw[0], (h - k) / stride + 1, (wd - k) / stride + 1];
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            shape,
        ))
    }

    /// Samples `map: [C,H,W]` at pixel positions `points: [N,2]` (x, y) with
    /// pixel centres at half-integers and border clamping. Output `[N,C]`.
    pub fn bilinear_sample(&mut self, map: NodeId, points: NodeId) -> Result<NodeId, GraphError> {
        let (sm, sp) = (self.shape(map), self.shape(points));
        if sm.len() != 3 || sp.len() != 2 || sp[1] != 2 {
            return Err(shape_err(format!(
                "bilinear_sample of map {sm:?} at points {sp:?}"
            )));
        }
        let shape = vec![sp[0], sm[0]];
        Ok(self.push(Op::BilinearSample { map, points }, shape))
    }

    /// Axis-angle rows `[N,3]` to row-major rotation matrices `[N,9]`.
    pub fn rodrigues(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let s = self.shape(x);
        if s.len() != 2 || s[1] != 3 {
            return Err(shape_err(format!("rodrigues of {s:?}")));
        }
        let shape = vec![s[0], 9];
        Ok(self.push(Op::Rodrigues(x), shape))
    }

    /// `out[m] = sum_j weight[m,j] * src[index[m,j]]`, skipping negative
    /// indices. Differentiable in `src` only.
    pub fn bary_interp(
        &mut self,
        src: NodeId,
        index: NodeId,
        weight: NodeId,
    ) -> Result<NodeId, GraphError> {
        let (ss, si, sw) = (self.shape(src), self.shape(index), self.shape(weight));
        if ss.len() != 2 || si.len() != 2 || si != sw {
            return Err(shape_err(format!(
                "bary_interp src {ss:?} index {si:?} weight {sw:?}"
            )));
        }
        if self.nodes[index.0].needs_grad || self.nodes[weight.0].needs_grad {
            return Err(GraphError::Contract(
                "bary_interp index/weight must not require gradients".into(),
            ));
        }
        let shape = vec![si[0], ss[1]];
        Ok(self.push(Op::BaryInterp { src, index, weight }, shape))
    }

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Evaluates every node.
    pub fn forward<'a>(&'a self, bindings: &Bindings<'a>) -> Result<Values<'a>, GraphError> {
        let mut slots: Vec<Cow<'a, Array>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value: Cow<'a, Array> = match &node.op {
                Op::Param(name) | Op::Input(name) => {
                    let v = bindings
                        .get(name)
                        .ok_or_else(|| GraphError::Binding(name.clone()))?;
                    if v.shape() != node.shape.as_slice() {
                        return Err(shape_err(format!(
                            "leaf `{name}` bound with shape {:?}, declared {:?}",
                            v.shape(),
                            node.shape
                        )));
                    }
                    Cow::Borrowed(v)
                }
                Op::Const(a) => Cow::Borrowed(a),
                op => {
                    let inputs: Vec<&Array> = op.inputs().iter().map(|i| &*slots[i.0]).collect();
                    Cow::Owned(kernels::forward(op, &inputs, &node.shape))
                }
            };
            slots.push(value);
        }
        Ok(Values {
            slots,
            outputs: &self.outputs,
        })
    }

    /// Gradient of the scalar `output` with respect to every parameter leaf.
    pub fn backward(&self, values: &Values, output: NodeId) -> Result<Gradients, GraphError> {
        if self.shape(output) != [1] {
            return Err(GraphError::Contract(format!(
                "backward needs a scalar output, node {} has shape {:?}",
                output.0,
                self.shape(output)
            )));
        }
        self.backward_seeded(values, &[(output, Array::scalar(1.0))])
    }

    /// Vector-Jacobian product: propagates the given output cotangents.
    /// Seeds on the same node are summed.
    pub fn backward_seeded(
        &self,
        values: &Values,
        seeds: &[(NodeId, Array)],
    ) -> Result<Gradients, GraphError> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array>> = vec![None; n];
        let mut top = 0;
        for (id, seed) in seeds {
            if seed.shape() != self.shape(*id) {
                return Err(shape_err(format!(
                    "seed shape {:?} for node of shape {:?}",
                    seed.shape(),
                    self.shape(*id)
                )));
            }
            accumulate(&mut grads[id.0], seed.clone());
            top = top.max(id.0 + 1);
        }
        for idx in (0..top).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Param(_) | Op::Input(_)) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let ins = node.op.inputs();
            let in_vals: Vec<&Array> = ins.iter().map(|i| values.get(*i)).collect();
            let wanted: Vec<bool> = ins.iter().map(|i| self.nodes[i.0].needs_grad).collect();
            let out_val = values.get(NodeId(idx));
            let in_grads = kernels::backward(&node.op, &in_vals, out_val, &g, &wanted);
            for ((i, ig), w) in ins.iter().zip(in_grads).zip(wanted) {
                if let (true, Some(ig)) = (w, ig) {
                    accumulate(&mut grads[i.0], ig);
                }
            }
        }
        let mut out = BTreeMap::new();
        for (name, id) in &self.leaves {
            let node = &self.nodes[id.0];
            if !node.needs_grad {
                continue;
            }
            let g = grads[id.0]
                .take()
                .unwrap_or_else(|| Array::zeros(&node.shape));
            out.insert(name.clone(), g);
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate(slot: &mut Option<Array>, g: Array) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}
