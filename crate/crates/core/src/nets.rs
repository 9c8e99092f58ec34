//! Recurrent and graph-convolutional building blocks.
//!
//! Layers are lightweight descriptors (a parameter path prefix plus
//! dimensions); their weights live in a [`ParameterStore`] and are read through
//! a [`Bound`] view during a forward pass. Sequences are time-major:
//! `[T, B, C]` for recurrent cells and `[T, N, C]` for graph blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::stgraph::{normalize_adjacency, STGraph};
use crate::tensor::{Bound, ParameterStore, Tape, Tensor, Var};

fn uniform(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("shape")
}

fn check_last_dim(v: &Var<'_>, expected: usize, op: &'static str) -> Result<()> {
    let shape = v.shape();
    if shape.last() != Some(&expected) {
        return Err(Error::arg(format!("{op}: expected last dim {expected}, got {shape:?}")));
    }
    Ok(())
}

/// Affine map `x · w + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            prefix: prefix.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) {
        store.insert(format!("{}.w", self.prefix), uniform(vec![self.in_dim, self.out_dim], self.in_dim, rng));
        store.insert(format!("{}.b", self.prefix), uniform(vec![self.out_dim], self.in_dim, rng));
    }

    /// `[B, in] → [B, out]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        check_last_dim(&x, self.in_dim, "linear")?;
        x.matmul(p.get(&format!("{}.w", self.prefix))?)?
            .add_row(p.get(&format!("{}.b", self.prefix))?)
    }
}

/// LSTM cell with gates ordered input, forget, candidate, output.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub prefix: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn new(prefix: impl Into<String>, input_dim: usize, hidden_dim: usize) -> Self {
        LstmCell {
            prefix: prefix.into(),
            input_dim,
            hidden_dim,
        }
    }

    fn path(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) {
        let (i, h) = (self.input_dim, self.hidden_dim);
        store.insert(self.path("w_ih"), uniform(vec![i, 4 * h], i, rng));
        store.insert(self.path("w_hh"), uniform(vec![h, 4 * h], h, rng));
        store.insert(self.path("b"), uniform(vec![4 * h], h, rng));
    }

    /// Runs the recurrence from a zero state over `seq: [T, B, input_dim]`
    /// and returns the final hidden state `[B, hidden_dim]`.
    pub fn encode<'t>(&self, p: &Bound<'t>, seq: Var<'t>) -> Result<Var<'t>> {
        let shape = seq.shape();
        if shape.len() != 3 || shape[2] != self.input_dim {
            return Err(Error::arg(format!(
                "lstm_encode: expected [T, B, {}], got {shape:?}",
                self.input_dim
            )));
        }
        let (steps, batch, h) = (shape[0], shape[1], self.hidden_dim);
        let tape = seq.tape();
        let w_ih = p.get(&self.path("w_ih"))?;
        let w_hh = p.get(&self.path("w_hh"))?;
        let b = p.get(&self.path("b"))?;
        let mut hidden = tape.constant(Tensor::zeros(vec![batch, h]));
        let mut cell = tape.constant(Tensor::zeros(vec![batch, h]));
        for t in 0..steps {
            let x = seq.slice(0, t, t + 1)?.reshape(&[batch, self.input_dim])?;
            let gates = x.matmul(w_ih)?.add(hidden.matmul(w_hh)?)?.add_row(b)?;
            let i = gates.slice(1, 0, h)?.sigmoid()?;
            let f = gates.slice(1, h, 2 * h)?.sigmoid()?;
            let g = gates.slice(1, 2 * h, 3 * h)?.tanh()?;
            let o = gates.slice(1, 3 * h, 4 * h)?.sigmoid()?;
            cell = f.mul(cell)?.add(i.mul(g)?)?;
            hidden = o.mul(cell.tanh()?)?;
        }
        Ok(hidden)
    }

    /// Sums neighbour sequences step by step and encodes the result.
    ///
    /// An empty neighbour set encodes the all-zero sequence of `empty_shape`.
    pub fn edge_encode<'t>(
        &self,
        p: &Bound<'t>,
        neighbors: &[Var<'t>],
        empty_shape: [usize; 3],
    ) -> Result<Var<'t>> {
        let tape = p.get(&self.path("b"))?.tape();
        self.encode(p, sum_neighbors(tape, neighbors, empty_shape)?)
    }
}

/// Step-wise sum of neighbour sequences, or zeros of `empty_shape` when there are none.
pub fn sum_neighbors<'t>(tape: &'t Tape, neighbors: &[Var<'t>], empty_shape: [usize; 3]) -> Result<Var<'t>> {
    match neighbors.split_first() {
        None => Ok(tape.constant(Tensor::zeros(empty_shape.to_vec()))),
        Some((first, rest)) => rest.iter().try_fold(*first, |acc, n| acc.add(*n)),
    }
}

/// GRU cell (reset gate applied to the projected hidden state).
#[derive(Debug, Clone)]
pub struct GruCell {
    pub prefix: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new(prefix: impl Into<String>, input_dim: usize, hidden_dim: usize) -> Self {
        GruCell {
            prefix: prefix.into(),
            input_dim,
            hidden_dim,
        }
    }

    fn path(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) {
        let (i, h) = (self.input_dim, self.hidden_dim);
        store.insert(self.path("w_ih"), uniform(vec![i, 3 * h], i, rng));
        store.insert(self.path("w_hh"), uniform(vec![h, 3 * h], h, rng));
        store.insert(self.path("b_ih"), uniform(vec![3 * h], h, rng));
        store.insert(self.path("b_hh"), uniform(vec![3 * h], h, rng));
    }

    /// One step: `h: [B, hidden]`, `x: [B, input]` → `[B, hidden]`.
    ///
    /// `r = σ(x·W_ir + h·W_hr)`, `z = σ(x·W_iz + h·W_hz)`,
    /// `n = tanh(x·W_in + r ⊙ (h·W_hn))`, `h' = (1 − z) ⊙ n + z ⊙ h` (biases omitted).
    pub fn step<'t>(&self, p: &Bound<'t>, h: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        check_last_dim(&x, self.input_dim, "gru_decode_step")?;
        let gi = x.matmul(p.get(&self.path("w_ih"))?)?.add_row(p.get(&self.path("b_ih"))?)?;
        self.step_projected(p, h, gi)
    }

    /// One step given the already projected input gates `x · W_ih + b_ih`
    /// (`[B, 3·hidden]`), for callers that assemble the projection piecewise.
    pub fn step_projected<'t>(&self, p: &Bound<'t>, h: Var<'t>, gi: Var<'t>) -> Result<Var<'t>> {
        check_last_dim(&h, self.hidden_dim, "gru_decode_step")?;
        check_last_dim(&gi, 3 * self.hidden_dim, "gru_decode_step")?;
        let d = self.hidden_dim;
        let gh = h.matmul(p.get(&self.path("w_hh"))?)?.add_row(p.get(&self.path("b_hh"))?)?;
        let r = gi.slice(1, 0, d)?.add(gh.slice(1, 0, d)?)?.sigmoid()?;
        let z = gi.slice(1, d, 2 * d)?.add(gh.slice(1, d, 2 * d)?)?.sigmoid()?;
        let n = gi.slice(1, 2 * d, 3 * d)?.add(r.mul(gh.slice(1, 2 * d, 3 * d)?)?)?.tanh()?;
        n.add(z.mul(h.sub(n)?)?)
    }
}

/// One spatio-temporal graph convolution block: a per-tick graph convolution
/// with relu, then a same-padded temporal convolution of width 3.
#[derive(Debug, Clone)]
pub struct StgcnBlock {
    pub prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Temporal filter width of every STGCN block.
pub const TEMPORAL_WIDTH: usize = 3;

impl StgcnBlock {
    pub fn new(prefix: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        StgcnBlock {
            prefix: prefix.into(),
            in_dim,
            out_dim,
        }
    }

    fn path(&self, name: &str) -> String {
        format!("{}.{name}", self.prefix)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) {
        let (i, o) = (self.in_dim, self.out_dim);
        store.insert(self.path("w"), uniform(vec![i, o], i, rng));
        store.insert(self.path("kernel"), uniform(vec![TEMPORAL_WIDTH, o, o], TEMPORAL_WIDTH * o, rng));
        store.insert(self.path("bias"), uniform(vec![o], TEMPORAL_WIDTH * o, rng));
    }

    /// `x: [T, N, in]`, `a_hat: [T, N, N]` (normalized) → `[T, N, out]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, a_hat: Var<'t>) -> Result<Var<'t>> {
        let xs = x.shape();
        let a_s = a_hat.shape();
        if xs.len() != 3 || xs[2] != self.in_dim || a_s != [xs[0], xs[1], xs[1]] {
            return Err(Error::arg(format!(
                "stgcn_forward: features {xs:?}, adjacency {a_s:?}, in_dim {}",
                self.in_dim
            )));
        }
        let (steps, n) = (xs[0], xs[1]);
        let mixed = a_hat.batch_matmul(x)?.reshape(&[steps * n, self.in_dim])?;
        let spatial = mixed
            .matmul(p.get(&self.path("w"))?)?
            .relu()?
            .reshape(&[steps, n, self.out_dim])?;
        spatial
            .temporal_conv(p.get(&self.path("kernel"))?)?
            .add_row(p.get(&self.path("bias"))?)
    }

    /// Runs the block on a graph, normalizing its adjacency first.
    pub fn forward_graph<'t>(&self, p: &Bound<'t>, g: &STGraph) -> Result<Var<'t>> {
        let tape = p.get(&self.path("w"))?.tape();
        let (x, a) = graph_tensors(g)?;
        self.forward(p, tape.constant(x), tape.constant(a))
    }
}

/// Features `[T, N, C]` and normalized adjacency `[T, N, N]` of a graph.
pub fn graph_tensors(g: &STGraph) -> Result<(Tensor, Tensor)> {
    g.validate()?;
    let (n, steps) = (g.num_nodes(), g.num_ticks());
    let dim = g.features.first().and_then(|f| f.first()).map_or(0, Vec::len);
    let mut x = Vec::with_capacity(steps * n * dim);
    let mut a = Vec::with_capacity(steps * n * n);
    for t in 0..steps {
        for node in &g.features {
            x.extend_from_slice(&node[t]);
        }
        for row in normalize_adjacency(&g.adjacency[t]) {
            a.extend(row);
        }
    }
    Ok((Tensor::new(vec![steps, n, dim], x)?, Tensor::new(vec![steps, n, n], a)?))
}

/// Mean over the nodes of `[T, N, C]` embeddings → `[T, C]`.
pub fn group_pool<'t>(embeddings: Var<'t>) -> Result<Var<'t>> {
    let shape = embeddings.shape();
    if shape.len() != 3 || shape[1] == 0 {
        return Err(Error::arg(format!("group_pool needs [T, N>0, C], got {shape:?}")));
    }
    embeddings.mean_axis(1)
}

/// Embedding of group `g` at the final tick of `[T, G, C]` scene output → `[C]`.
pub fn scene_select<'t>(scene_out: Var<'t>, g: usize) -> Result<Var<'t>> {
    let shape = scene_out.shape();
    if shape.len() != 3 || shape[0] == 0 {
        return Err(Error::arg(format!("scene_select needs [T>0, G, C], got {shape:?}")));
    }
    if g >= shape[1] {
        return Err(Error::arg(format!("group {g} out of range ({} groups)", shape[1])));
    }
    let t = shape[0];
    scene_out.slice(0, t - 1, t)?.slice(1, g, g + 1)?.reshape(&[shape[2]])
}
