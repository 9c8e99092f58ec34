use std::cell::RefCell;
use std::collections::BTreeMap;

use super::gemm::{gemm, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    /// Differentiable input.
    Leaf,
    /// Input or result that carries no gradient.
    Constant,
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    IndexSelect { input: usize, indices: Vec<usize> },
    Reshape(usize),
    SumAll(usize),
    SumAxis { input: usize, axis: usize },
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Softmax(usize),
    LogSoftmax(usize),
    TemporalConv { x: usize, kernel: usize },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf | Constant => vec![],
            Add(a, b) | AddRow(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | BatchMatMul(a, b) => {
                vec![*a, *b]
            }
            TemporalConv { x, kernel } => vec![*x, *kernel],
            Concat { inputs, .. } => inputs.clone(),
            Scale(a, _) | AddScalar(a) | Reshape(a) | SumAll(a) | Sigmoid(a) | Tanh(a) | Relu(a)
            | Exp(a) | Ln(a) | Softmax(a) | LogSoftmax(a) => vec![*a],
            Slice { input, .. } | IndexSelect { input, .. } | SumAxis { input, .. } => vec![*input],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// A tape is single-threaded; independent computations use independent tapes.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<BTreeMap<usize, Vec<f64>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, name: &'static str) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{name} produced a non-finite value")));
        }
        let (op, requires_grad) = match op {
            Op::Leaf => (Op::Leaf, true),
            Op::Constant => (Op::Constant, false),
            op => {
                let nodes = self.nodes.borrow();
                if op.inputs().iter().any(|&i| nodes[i].requires_grad) {
                    (op, true)
                } else {
                    (Op::Constant, false)
                }
            }
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.try_input(value, Op::Leaf)
    }

    /// An input that is not differentiated.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.try_input(value, Op::Constant)
    }

    fn try_input(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            requires_grad: matches!(op, Op::Leaf),
            value,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let shape = self.nodes.borrow()[v.id].value.shape.clone();
        self.leaf_grads
            .borrow()
            .get(&v.id)
            .map(|g| Tensor::new(shape, g.clone()).expect("gradient shape"))
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    /// Propagates d(loss)/d(leaf) into every reachable leaf, accumulating
    /// onto gradients from earlier calls.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match leaf_grads.get_mut(&id) {
                    Some(acc) => add_into(acc, &g),
                    None => {
                        leaf_grads.insert(id, g);
                    }
                }
                continue;
            }
            for (input, contrib) in backward_op(&nodes, node, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => add_into(acc, &contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }
}

/// Gradient contributions of one node to its inputs.
fn backward_op(nodes: &[Node], node: &Node, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let val = |i: usize| &nodes[i].value;
    let y = &node.value.data;
    match &node.op {
        Op::Leaf | Op::Constant => vec![],
        Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
        Op::AddRow(a, b) => {
            let m = val(*b).numel();
            let mut gb = vec![0.0; m];
            for row in g.chunks(m) {
                add_into(&mut gb, row);
            }
            vec![(*a, g.to_vec()), (*b, gb)]
        }
        Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
        Op::Mul(a, b) => {
            let (da, db) = (&val(*a).data, &val(*b).data);
            vec![
                (*a, g.iter().zip(db).map(|(g, b)| g * b).collect()),
                (*b, g.iter().zip(da).map(|(g, a)| g * a).collect()),
            ]
        }
        Op::Scale(a, c) => vec![(*a, g.iter().map(|v| v * c).collect())],
        Op::AddScalar(a) => vec![(*a, g.to_vec())],
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
            let gm = MatRef::new(g, m, n);
            let mut ga = vec![0.0; m * k];
            gemm(gm, MatRef::new(&tb.data, k, n).t(), &mut ga, 0.0);
            let mut gb = vec![0.0; k * n];
            gemm(MatRef::new(&ta.data, m, k).t(), gm, &mut gb, 0.0);
            vec![(*a, ga), (*b, gb)]
        }
        Op::BatchMatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (bs, m, k, n) = (ta.shape[0], ta.shape[1], ta.shape[2], tb.shape[2]);
            let mut ga = vec![0.0; bs * m * k];
            let mut gb = vec![0.0; bs * k * n];
            for i in 0..bs {
                let gm = MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n);
                let am = MatRef::new(&ta.data[i * m * k..(i + 1) * m * k], m, k);
                let bm = MatRef::new(&tb.data[i * k * n..(i + 1) * k * n], k, n);
                gemm(gm, bm.t(), &mut ga[i * m * k..(i + 1) * m * k], 0.0);
                gemm(am.t(), gm, &mut gb[i * k * n..(i + 1) * k * n], 0.0);
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::Concat { inputs, axis } => {
            let out_shape = &node.value.shape;
            let (outer, total, inner) = split_axis(out_shape, *axis);
            let mut offset = 0;
            inputs
                .iter()
                .map(|&i| {
                    let len = val(i).shape[*axis];
                    let mut gi = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gi.extend_from_slice(&g[base..base + len * inner]);
                    }
                    offset += len;
                    (i, gi)
                })
                .collect()
        }
        Op::Slice { input, axis, start } => {
            let in_shape = &val(*input).shape;
            let (outer, total, inner) = split_axis(in_shape, *axis);
            let len = node.value.shape[*axis];
            let mut gi = vec![0.0; outer * total * inner];
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                let src = o * len * inner;
                gi[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![(*input, gi)]
        }
        Op::IndexSelect { input, indices } => {
            let t = val(*input);
            let row = t.numel() / t.shape[0];
            let mut gi = vec![0.0; t.numel()];
            for (k, &r) in indices.iter().enumerate() {
                add_into(&mut gi[r * row..(r + 1) * row], &g[k * row..(k + 1) * row]);
            }
            vec![(*input, gi)]
        }
        Op::Reshape(a) => vec![(*a, g.to_vec())],
        Op::SumAll(a) => vec![(*a, vec![g[0]; val(*a).numel()])],
        Op::SumAxis { input, axis } => {
            let (outer, len, inner) = split_axis(&val(*input).shape, *axis);
            let mut gi = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    let dst = (o * len + l) * inner;
                    gi[dst..dst + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![(*input, gi)]
        }
        Op::Sigmoid(a) => vec![(*a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect())],
        Op::Tanh(a) => vec![(*a, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect())],
        Op::Relu(a) => vec![(
            *a,
            g.iter()
                .zip(&val(*a).data)
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect(),
        )],
        Op::Exp(a) => vec![(*a, g.iter().zip(y).map(|(g, y)| g * y).collect())],
        Op::Ln(a) => vec![(*a, g.iter().zip(&val(*a).data).map(|(g, x)| g / x).collect())],
        Op::Softmax(a) => {
            let n = *node.value.shape.last().unwrap_or(&1);
            let mut gi = vec![0.0; g.len()];
            for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(gi.chunks_mut(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                for ((o, g), y) in out.iter_mut().zip(gr).zip(yr) {
                    *o = y * (g - dot);
                }
            }
            vec![(*a, gi)]
        }
        Op::LogSoftmax(a) => {
            let n = *node.value.shape.last().unwrap_or(&1);
            let mut gi = vec![0.0; g.len()];
            for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(gi.chunks_mut(n)) {
                let total: f64 = gr.iter().sum();
                for ((o, g), y) in out.iter_mut().zip(gr).zip(yr) {
                    *o = g - y.exp() * total;
                }
            }
            vec![(*a, gi)]
        }
        Op::TemporalConv { x, kernel } => {
            let (tx, tk) = (val(*x), val(*kernel));
            let dims = ConvDims::of(&tx.shape, &tk.shape).expect("validated in forward");
            let mut gx = vec![0.0; tx.numel()];
            let mut gk = vec![0.0; tk.numel()];
            for j in 0..dims.width {
                let Some((out_rows, in_rows)) = dims.overlap(j) else { continue };
                let rows = out_rows.len();
                let kj = &tk.data[j * dims.cin * dims.cout..(j + 1) * dims.cin * dims.cout];
                let gout = MatRef::new(&g[out_rows.start * dims.cout..out_rows.end * dims.cout], rows, dims.cout);
                gemm(
                    gout,
                    MatRef::new(kj, dims.cin, dims.cout).t(),
                    &mut gx[in_rows.start * dims.cin..in_rows.end * dims.cin],
                    1.0,
                );
                gemm(
                    MatRef::new(&tx.data[in_rows.start * dims.cin..in_rows.end * dims.cin], rows, dims.cin).t(),
                    gout,
                    &mut gk[j * dims.cin * dims.cout..(j + 1) * dims.cin * dims.cout],
                    1.0,
                );
            }
            vec![(*x, gx), (*kernel, gk)]
        }
    }
}

/// Geometry of a same-padded temporal convolution over `[T, M, Cin]` inputs.
struct ConvDims {
    steps: usize,
    lanes: usize,
    cin: usize,
    cout: usize,
    width: usize,
}

impl ConvDims {
    fn of(x: &[usize], k: &[usize]) -> Result<Self> {
        if k.len() != 3 || x.len() < 2 {
            return Err(Error::shape(
                "temporal_conv",
                format!("input {x:?}, kernel {k:?}; expected [T, .., C] and [W, C, Cout]"),
            ));
        }
        let cin = x[x.len() - 1];
        if k[1] != cin || k[0] % 2 == 0 {
            return Err(Error::shape(
                "temporal_conv",
                format!("input {x:?} vs kernel {k:?} (odd width, matching channels)"),
            ));
        }
        Ok(ConvDims {
            steps: x[0],
            lanes: x[1..x.len() - 1].iter().product(),
            cin,
            cout: k[2],
            width: k[0],
        })
    }

    /// Row ranges (in `[T·M]` row space) of outputs and the inputs they read at tap `j`.
    fn overlap(&self, j: usize) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        let pad = (self.width / 2) as isize;
        let shift = j as isize - pad;
        let t_lo = (-shift).max(0) as usize;
        let t_hi = (self.steps as isize - shift).min(self.steps as isize);
        if t_hi <= t_lo as isize {
            return None;
        }
        let t_hi = t_hi as usize;
        let s_lo = (t_lo as isize + shift) as usize;
        let s_hi = (t_hi as isize + shift) as usize;
        Some((t_lo * self.lanes..t_hi * self.lanes, s_lo * self.lanes..s_hi * self.lanes))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn with<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn value(&self) -> Tensor {
        self.with(Tensor::clone)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with(|t| t.shape.clone())
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> Result<f64> {
        self.with(Tensor::item)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::arg(format!("{op}: operands recorded on different tapes")))
        }
    }

    fn zip(&self, other: Var<'t>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_tape(&other, op)?;
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
        if a.shape != b.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
        }
        Ok(Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect(),
        })
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        self.with(|t| Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| f(*v)).collect(),
        })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip(other, "add", |a, b| a + b)?;
        self.tape.push(v, Op::Add(self.id, other.id), "add")
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip(other, "sub", |a, b| a - b)?;
        self.tape.push(v, Op::Sub(self.id, other.id), "sub")
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip(other, "mul", |a, b| a * b)?;
        self.tape.push(v, Op::Mul(self.id, other.id), "mul")
    }

    /// Adds a vector to every row (broadcast over the leading axes).
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias, "add_row")?;
        let v = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[bias.id].value);
            let m = b.numel();
            if b.shape.len() != 1 || a.shape.last() != Some(&m) {
                return Err(Error::shape("add_row", format!("{:?} + {:?}", a.shape, b.shape)));
            }
            let mut data = a.data.clone();
            for row in data.chunks_mut(m) {
                add_into(row, &b.data);
            }
            Tensor {
                shape: a.shape.clone(),
                data,
            }
        };
        self.tape.push(v, Op::AddRow(self.id, bias.id), "add_row")
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let v = self.map(|x| x * c);
        self.tape.push(v, Op::Scale(self.id, c), "scale")
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        let v = self.map(|x| x + c);
        self.tape.push(v, Op::AddScalar(self.id), "add_scalar")
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other, "matmul")?;
        let v = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape, b.shape)));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut data = vec![0.0; m * n];
            gemm(MatRef::new(&a.data, m, k), MatRef::new(&b.data, k, n), &mut data, 0.0);
            Tensor {
                shape: vec![m, n],
                data,
            }
        };
        self.tape.push(v, Op::MatMul(self.id, other.id), "matmul")
    }

    /// `[B, m, k] · [B, k, n]`, one product per batch entry.
    pub fn batch_matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other, "batch_matmul")?;
        let v = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape.len() != 3 || b.shape.len() != 3 || a.shape[0] != b.shape[0] || a.shape[2] != b.shape[1] {
                return Err(Error::shape("batch_matmul", format!("{:?} x {:?}", a.shape, b.shape)));
            }
            let (bs, m, k, n) = (a.shape[0], a.shape[1], a.shape[2], b.shape[2]);
            let mut data = vec![0.0; bs * m * n];
            for i in 0..bs {
                gemm(
                    MatRef::new(&a.data[i * m * k..(i + 1) * m * k], m, k),
                    MatRef::new(&b.data[i * k * n..(i + 1) * k * n], k, n),
                    &mut data[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
            Tensor {
                shape: vec![bs, m, n],
                data,
            }
        };
        self.tape.push(v, Op::BatchMatMul(self.id, other.id), "batch_matmul")
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let tape = first.tape;
        for p in parts {
            first.same_tape(p, "concat")?;
        }
        let v = {
            let nodes = tape.nodes.borrow();
            let shapes: Vec<&Vec<usize>> = parts.iter().map(|p| &nodes[p.id].value.shape).collect();
            let rank = shapes[0].len();
            if axis >= rank {
                return Err(Error::shape("concat", format!("axis {axis} of rank {rank}")));
            }
            for s in &shapes {
                let compatible = s.len() == rank
                    && s.iter().zip(shapes[0].iter()).enumerate().all(|(d, (a, b))| d == axis || a == b);
                if !compatible {
                    return Err(Error::shape("concat", format!("{:?} vs {:?}", s, shapes[0])));
                }
            }
            let mut shape = shapes[0].clone();
            shape[axis] = shapes.iter().map(|s| s[axis]).sum();
            let (outer, _, inner) = split_axis(&shape, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let t = &nodes[p.id].value;
                    let block = t.shape[axis] * inner;
                    data.extend_from_slice(&t.data[o * block..(o + 1) * block]);
                }
            }
            Tensor { shape, data }
        };
        let inputs = parts.iter().map(|p| p.id).collect();
        tape.push(v, Op::Concat { inputs, axis }, "concat")
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.with(|t| {
            if axis >= t.shape.len() || start > end || end > t.shape[axis] {
                return Err(Error::shape("slice", format!("{start}..{end} on axis {axis} of {:?}", t.shape)));
            }
            let (outer, total, inner) = split_axis(&t.shape, axis);
            let len = end - start;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * total + start) * inner;
                data.extend_from_slice(&t.data[base..base + len * inner]);
            }
            let mut shape = t.shape.clone();
            shape[axis] = len;
            Ok(Tensor { shape, data })
        })?;
        self.tape.push(v, Op::Slice { input: self.id, axis, start }, "slice")
    }

    /// Gathers entries of the leading axis (indices may repeat).
    pub fn index_select(self, indices: &[usize]) -> Result<Var<'t>> {
        let v = self.with(|t| {
            let Some(&rows) = t.shape.first() else {
                return Err(Error::shape("index_select", "scalar input"));
            };
            if let Some(bad) = indices.iter().find(|&&i| i >= rows) {
                return Err(Error::shape("index_select", format!("index {bad} of {rows} rows")));
            }
            let row = t.numel() / rows.max(1);
            let mut data = Vec::with_capacity(indices.len() * row);
            for &i in indices {
                data.extend_from_slice(&t.data[i * row..(i + 1) * row]);
            }
            let mut shape = t.shape.clone();
            shape[0] = indices.len();
            Ok(Tensor { shape, data })
        })?;
        self.tape.push(
            v,
            Op::IndexSelect {
                input: self.id,
                indices: indices.to_vec(),
            },
            "index_select",
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshaped(shape.to_vec())?;
        self.tape.push(v, Op::Reshape(self.id), "reshape")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Result<Var<'t>> {
        let v = Tensor::scalar(self.with(|t| t.data.iter().sum()));
        self.tape.push(v, Op::SumAll(self.id), "sum")
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let v = self.with(|t| {
            if axis >= t.shape.len() {
                return Err(Error::shape("sum_axis", format!("axis {axis} of {:?}", t.shape)));
            }
            let (outer, len, inner) = split_axis(&t.shape, axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    let src = (o * len + l) * inner;
                    add_into(&mut data[o * inner..(o + 1) * inner], &t.data[src..src + inner]);
                }
            }
            let mut shape = t.shape.clone();
            shape.remove(axis);
            Ok(Tensor { shape, data })
        })?;
        self.tape.push(v, Op::SumAxis { input: self.id, axis }, "sum_axis")
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let len = self.with(|t| t.shape.get(axis).copied());
        match len {
            Some(0) => Err(Error::shape("mean_axis", "empty axis")),
            Some(n) => self.sum_axis(axis)?.scale(1.0 / n as f64),
            None => Err(Error::shape("mean_axis", format!("axis {axis} out of range"))),
        }
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        let v = self.map(|x| 1.0 / (1.0 + (-x).exp()));
        self.tape.push(v, Op::Sigmoid(self.id), "sigmoid")
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        let v = self.map(f64::tanh);
        self.tape.push(v, Op::Tanh(self.id), "tanh")
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let v = self.map(|x| x.max(0.0));
        self.tape.push(v, Op::Relu(self.id), "relu")
    }

    pub fn exp(self) -> Result<Var<'t>> {
        let v = self.map(f64::exp);
        self.tape.push(v, Op::Exp(self.id), "exp")
    }

    /// Natural logarithm; nonpositive inputs raise a numeric error.
    pub fn ln(self) -> Result<Var<'t>> {
        let v = self.map(f64::ln);
        self.tape.push(v, Op::Ln(self.id), "ln")
    }

    fn last_axis_map(&self, op: &'static str, f: impl Fn(&[f64], &mut [f64])) -> Result<Tensor> {
        self.with(|t| {
            let Some(&n) = t.shape.last() else {
                return Err(Error::shape(op, "scalar input"));
            };
            let mut data = vec![0.0; t.numel()];
            if n > 0 {
                for (row, out) in t.data.chunks(n).zip(data.chunks_mut(n)) {
                    f(row, out);
                }
            }
            Ok(Tensor {
                shape: t.shape.clone(),
                data,
            })
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let v = self.last_axis_map("softmax", |row, out| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, x) in out.iter_mut().zip(row) {
                *o = (x - m).exp();
                z += *o;
            }
            out.iter_mut().for_each(|o| *o /= z);
        })?;
        self.tape.push(v, Op::Softmax(self.id), "softmax")
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        let v = self.last_axis_map("log_softmax", |row, out| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for (o, x) in out.iter_mut().zip(row) {
                *o = x - lse;
            }
        })?;
        self.tape.push(v, Op::LogSoftmax(self.id), "log_softmax")
    }

    /// Same-padded convolution along the leading (time) axis.
    ///
    /// `self` is `[T, .., Cin]` and `kernel` is `[W, Cin, Cout]` with odd `W`;
    /// output `[T, .., Cout]` at step `t` is `Σ_j x[t + j − W/2] · kernel[j]`,
    /// with out-of-range steps treated as zero.
    pub fn temporal_conv(self, kernel: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&kernel, "temporal_conv")?;
        let v = {
            let nodes = self.tape.nodes.borrow();
            let (x, k) = (&nodes[self.id].value, &nodes[kernel.id].value);
            let dims = ConvDims::of(&x.shape, &k.shape)?;
            let mut data = vec![0.0; dims.steps * dims.lanes * dims.cout];
            for j in 0..dims.width {
                let Some((out_rows, in_rows)) = dims.overlap(j) else { continue };
                let rows = out_rows.len();
                gemm(
                    MatRef::new(&x.data[in_rows.start * dims.cin..in_rows.end * dims.cin], rows, dims.cin),
                    MatRef::new(&k.data[j * dims.cin * dims.cout..(j + 1) * dims.cin * dims.cout], dims.cin, dims.cout),
                    &mut data[out_rows.start * dims.cout..out_rows.end * dims.cout],
                    1.0,
                );
            }
            let mut shape = x.shape.clone();
            *shape.last_mut().expect("rank >= 2") = dims.cout;
            Tensor { shape, data }
        };
        self.tape.push(v, Op::TemporalConv { x: self.id, kernel: kernel.id }, "temporal_conv")
    }
}
