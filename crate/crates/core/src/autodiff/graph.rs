use super::tensor::{gemm, logistic, split_axis, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of one [`Graph`]. Handles are meaningless across graphs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Min,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    Unary(UnaryOp, Var),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    /// Flat input index of the selected element for every output element.
    Min(Var, Vec<usize>),
    SqDist(Var, Var),
    PairwiseSqDist(Var, Var),
    LogSumExp(Var),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Reshape(Var),
    /// Activated gates `[i f o u]` per row followed by `tanh(c)`.
    LstmGates {
        gates: Var,
        c_prev: Option<Var>,
        act: Vec<S>,
        tanh_c: Vec<S>,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    op: Op<S>,
    tracks: bool,
}

/// Tape of operations in creation order; inputs always precede their uses,
/// so reverse creation order is a valid topological order for the adjoint pass.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, tracks: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            tracks,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].tracks
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let tracks = self.tracks(a) || self.tracks(b);
        Ok(self.push(value, Op::MatMul(a, b), tracks))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            let name = match op {
                BinaryOp::Add => "add",
                BinaryOp::Sub => "sub",
                BinaryOp::Mul => "mul",
            };
            return Err(Error::dim(name, x.shape(), y.shape()));
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| match op {
                BinaryOp::Add => p + q,
                BinaryOp::Sub => p - q,
                BinaryOp::Mul => p * q,
            })
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let tracks = self.tracks(a) || self.tracks(b);
        Ok(self.push(value, Op::Binary(op, a, b), tracks))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// `a + bias` with `bias` broadcast over every row of `a`'s trailing axis.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        let n = b.len();
        if b.shape().len() != 1 || x.shape().last() != Some(&n) {
            return Err(Error::dim("add_row", x.shape(), b.shape()));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &w) in row.iter_mut().zip(b.data()) {
                *v += w;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let tracks = self.tracks(a) || self.tracks(bias);
        Ok(self.push(value, Op::AddRow(a, bias), tracks))
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let value = self.value(a).map(|v| v * factor);
        let tracks = self.tracks(a);
        self.push(value, Op::Scale(a, factor), tracks)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let x = self.value(a);
        if op == UnaryOp::Log {
            if let Some(bad) = x
                .data()
                .iter()
                .find(|&&v| v.partial_cmp(&S::zero()) != Some(std::cmp::Ordering::Greater))
            {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let value = match op {
            UnaryOp::Sigmoid => Tensor::new(x.shape().to_vec(), S::sigmoid_slice(x.data()))?,
            UnaryOp::Tanh => Tensor::new(x.shape().to_vec(), S::tanh_slice(x.data()))?,
            _ => x.map(|v| match op {
                UnaryOp::Neg => -v,
                UnaryOp::Tanh => v.tanh(),
                UnaryOp::Sigmoid => logistic(v),
                UnaryOp::Relu => {
                    if v > S::zero() {
                        v
                    } else {
                        S::zero()
                    }
                }
                UnaryOp::Exp => v.exp(),
                UnaryOp::Log => v.ln(),
                UnaryOp::Square => v * v,
            }),
        };
        let tracks = self.tracks(a);
        Ok(self.push(value, Op::Unary(op, a), tracks))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a).expect("neg is total")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a).expect("tanh is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a).expect("relu is total")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a).expect("exp is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a).expect("square is total")
    }

    /// Reduction along `axis`, or over every element when `axis` is `None`.
    /// For [`ReduceOp::Min`] use [`Graph::min`] to also get the argmin.
    pub fn reduce(&mut self, op: ReduceOp, a: Var, axis: Option<usize>) -> Result<Var> {
        match op {
            ReduceOp::Sum => self.sum(a, axis),
            ReduceOp::Mean => self.mean(a, axis),
            ReduceOp::Min => match axis {
                Some(axis) => self.min(a, axis).map(|(v, _)| v),
                None => {
                    let n = self.value(a).len();
                    let flat = self.reshape(a, &[n])?;
                    self.min(flat, 0).map(|(v, _)| v)
                }
            },
        }
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let value = reduce_sum(self.value(a), axis, "sum")?;
        let tracks = self.tracks(a);
        Ok(self.push(value, Op::Sum(a, axis), tracks))
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let x = self.value(a);
        let count = match axis {
            Some(ax) => split_axis("mean", x.shape(), ax)?.1,
            None => x.len(),
        };
        if count == 0 {
            return Err(Error::EmptyReduction { op: "mean" });
        }
        let inv = S::one() / S::from_usize(count).unwrap();
        let value = reduce_sum(x, axis, "mean")?.map(|v| v * inv);
        let tracks = self.tracks(a);
        Ok(self.push(value, Op::Mean(a, axis), tracks))
    }

    /// Minimum along `axis`. Returns the position along `axis` of each selected
    /// element; ties resolve to the first index and only that element receives
    /// the adjoint.
    pub fn min(&mut self, a: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let x = self.value(a);
        let (outer, len, inner) = split_axis("min", x.shape(), axis)?;
        if len == 0 {
            return Err(Error::EmptyReduction { op: "min" });
        }
        let data = x.data();
        let mut values = Vec::with_capacity(outer * inner);
        let mut flat = Vec::with_capacity(outer * inner);
        let mut positions = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = 0;
                for l in 1..len {
                    if data[base + l * inner] < data[base + best * inner] {
                        best = l;
                    }
                }
                values.push(data[base + best * inner]);
                flat.push(base + best * inner);
                positions.push(best);
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, values)?;
        let tracks = self.tracks(a);
        Ok((self.push(value, Op::Min(a, flat), tracks), positions))
    }

    /// Squared Euclidean distance between two equal-length vectors.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() || x.shape().len() != 1 {
            return Err(Error::dim("sq_dist", x.shape(), y.shape()));
        }
        let d = sq_dist_slice(x.data(), y.data());
        let tracks = self.tracks(a) || self.tracks(b);
        Ok(self.push(Tensor::scalar(d), Op::SqDist(a, b), tracks))
    }

    /// All squared distances between rows of `a[m×d]` and rows of `b[n×d]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape().len() != 2 || y.shape().len() != 2 || x.shape()[1] != y.shape()[1] {
            return Err(Error::dim("pairwise_sq_dist", x.shape(), y.shape()));
        }
        let (m, n) = (x.rows(), y.rows());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(sq_dist_slice(x.row(i), y.row(j)));
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let tracks = self.tracks(a) || self.tracks(b);
        Ok(self.push(value, Op::PairwiseSqDist(a, b), tracks))
    }

    /// `log Σ exp` over the trailing axis, shifted by the row maximum.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let Some((&c, lead)) = x.shape().split_last() else {
            return Err(Error::Axis {
                op: "logsumexp",
                axis: 0,
                shape: vec![],
            });
        };
        if c == 0 {
            return Err(Error::EmptyReduction { op: "logsumexp" });
        }
        let out = x
            .data()
            .chunks(c)
            .map(|row| {
                let m = row.iter().copied().fold(S::neg_infinity(), S::max);
                if m == S::neg_infinity() {
                    return m;
                }
                m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln()
            })
            .collect();
        let value = Tensor::new(lead.to_vec(), out)?;
        let tracks = self.tracks(a);
        Ok(self.push(value, Op::LogSumExp(a), tracks))
    }

    /// Picks `per_row` entries from every row of a rank-2 tensor; `columns`
    /// holds `rows × per_row` column indices.
    pub fn gather_columns(&mut self, a: Var, columns: &[usize], per_row: usize) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 2 || columns.len() != x.rows() * per_row {
            return Err(Error::dim("gather_columns", x.shape(), &[columns.len()]));
        }
        let cols = x.cols();
        let mut flat = Vec::with_capacity(columns.len());
        for (k, &c) in columns.iter().enumerate() {
            if c >= cols {
                return Err(Error::Axis {
                    op: "gather_columns",
                    axis: c,
                    shape: x.shape().to_vec(),
                });
            }
            flat.push((k / per_row) * cols + c);
        }
        let data = flat.iter().map(|&f| x.data()[f]).collect();
        let value = Tensor::new(vec![x.rows(), per_row], data)?;
        let tracks = self.tracks(a);
        Ok(self.push(value, Op::Gather(a, flat), tracks))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::EmptyReduction { op: "concat" });
        };
        let base = self.value(first).shape().to_vec();
        let (outer, _, inner) = split_axis("concat", &base, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (p, q))| i == axis || p == q);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let x = self.value(v);
                let chunk = x.shape()[axis] * inner;
                data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        let tracks = inputs.iter().any(|&v| self.tracks(v));
        Ok(self.push(value, Op::Concat(inputs.to_vec(), axis), tracks))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (outer, full, inner) = split_axis("slice", x.shape(), axis)?;
        if start + len > full {
            return Err(Error::dim("slice", x.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            data.extend_from_slice(&x.data()[from..from + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        let tracks = self.tracks(a);
        Ok(self.push(value, Op::Slice(a, axis, start), tracks))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let tracks = self.tracks(a);
        Ok(self.push(value, Op::Reshape(a), tracks))
    }

    /// Fused LSTM state update. `gates[B×4H]` holds input, forget, output and
    /// candidate pre-activations in that order; the result is `[h | c]` of
    /// shape `[B×2H]`. Without `c_prev` the forget path is skipped.
    pub fn lstm_gates(&mut self, gates: Var, c_prev: Option<Var>) -> Result<Var> {
        let x = self.value(gates);
        if x.shape().len() != 2 || !x.cols().is_multiple_of(4) {
            return Err(Error::dim("lstm_gates", x.shape(), &[4]));
        }
        let (batch, hidden) = (x.rows(), x.cols() / 4);
        if let Some(c) = c_prev {
            if self.shape(c) != [batch, hidden] {
                return Err(Error::dim("lstm_gates", self.shape(gates), self.shape(c)));
            }
        }
        let mut act = S::sigmoid_slice(x.data());
        for (r, row) in act.chunks_mut(4 * hidden).enumerate() {
            let pre = &x.row(r)[3 * hidden..];
            row[3 * hidden..].copy_from_slice(&S::tanh_slice(pre));
        }
        let mut c = vec![S::zero(); batch * hidden];
        for r in 0..batch {
            let a = &act[r * 4 * hidden..(r + 1) * 4 * hidden];
            for j in 0..hidden {
                let kept = match c_prev {
                    Some(cp) => a[hidden + j] * self.value(cp).data()[r * hidden + j],
                    None => S::zero(),
                };
                c[r * hidden + j] = kept + a[j] * a[3 * hidden + j];
            }
        }
        let tanh_c = S::tanh_slice(&c);
        let mut out = Vec::with_capacity(batch * 2 * hidden);
        for r in 0..batch {
            let a = &act[r * 4 * hidden..(r + 1) * 4 * hidden];
            out.extend((0..hidden).map(|j| a[2 * hidden + j] * tanh_c[r * hidden + j]));
            out.extend_from_slice(&c[r * hidden..(r + 1) * hidden]);
        }
        let value = Tensor::new(vec![batch, 2 * hidden], out)?;
        let tracks = self.tracks(gates) || c_prev.is_some_and(|c| self.tracks(c));
        let op = Op::LstmGates {
            gates,
            c_prev,
            act,
            tanh_c,
        };
        Ok(self.push(value, op, tracks))
    }

    /// Reverse-mode sweep from a one-element `root`. Leaf gradients accumulate
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<S>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(vec![S::one()]);
        let mut leaves = Vec::new();
        let mut deferred: Vec<Option<Deferred<S>>> = (0..=root.0).map(|_| None).collect();
        let nodes = &self.nodes;
        for id in (0..=root.0).rev() {
            if let Some(d) = deferred[id].take() {
                let k = nodes[id].value.rows();
                let n = nodes[id].value.cols();
                let gb = slot(nodes, &mut adj, Var(id)).expect("deferred leaves are tracked");
                gemm(
                    k,
                    d.rows,
                    n,
                    MatRef::t(&d.lhs),
                    MatRef::plain(&d.grads),
                    gb,
                    true,
                );
            }
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if !node.tracks {
                continue;
            }
            propagate(nodes, &mut adj, &mut deferred, node, id, g, &mut leaves);
        }
        for (id, g) in leaves {
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(g) {
                        *a += v;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }
}

pub(crate) fn sq_dist_slice<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter()
        .zip(b)
        .map(|(&p, &q)| {
            let d = p - q;
            d * d
        })
        .sum()
}

fn reduce_sum<S: Scalar>(
    x: &Tensor<S>,
    axis: Option<usize>,
    op: &'static str,
) -> Result<Tensor<S>> {
    let Some(axis) = axis else {
        return Ok(Tensor::scalar(x.data().iter().copied().sum()));
    };
    let (outer, len, inner) = split_axis(op, x.shape(), axis)?;
    if len == 0 {
        return Err(Error::EmptyReduction { op });
    }
    let mut out = vec![S::zero(); outer * inner];
    let data = x.data();
    for o in 0..outer {
        for l in 0..len {
            let src = &data[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *acc += v;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out)
}

/// Adjoint buffer of `v`, created on first use; `None` when `v` is untracked.
fn slot<'a, S: Scalar>(
    nodes: &[Node<S>],
    adj: &'a mut [Option<Vec<S>>],
    v: Var,
) -> Option<&'a mut [S]> {
    let node = &nodes[v.0];
    if !node.tracks {
        return None;
    }
    let n = node.value.len();
    Some(
        adj[v.0]
            .get_or_insert_with(|| vec![S::zero(); n])
            .as_mut_slice(),
    )
}

/// Products `aᵢᵀ·gᵢ` owed to a weight leaf, stacked by rows so that they
/// are summed by one large multiplication once every use has been visited.
struct Deferred<S> {
    lhs: Vec<S>,
    grads: Vec<S>,
    rows: usize,
}

fn propagate<S: Scalar>(
    nodes: &[Node<S>],
    adj: &mut [Option<Vec<S>>],
    deferred: &mut [Option<Deferred<S>>],
    node: &Node<S>,
    id: usize,
    g: Vec<S>,
    leaves: &mut Vec<(usize, Vec<S>)>,
) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => leaves.push((id, g)),
        Op::MatMul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let (m, k, n) = (x.rows(), x.cols(), y.cols());
            if let Some(ga) = slot(nodes, adj, *a) {
                gemm(m, n, k, MatRef::plain(&g), MatRef::t(y.data()), ga, true);
            }
            let b_node = &nodes[b.0];
            if b_node.tracks && matches!(b_node.op, Op::Leaf) {
                let d = deferred[b.0].get_or_insert_with(|| Deferred {
                    lhs: Vec::new(),
                    grads: Vec::new(),
                    rows: 0,
                });
                d.lhs.extend_from_slice(x.data());
                d.grads.extend_from_slice(&g);
                d.rows += m;
            } else if let Some(gb) = slot(nodes, adj, *b) {
                gemm(k, m, n, MatRef::t(x.data()), MatRef::plain(&g), gb, true);
            }
        }
        Op::Binary(op, a, b) => {
            let (x, y) = (val(*a).data(), val(*b).data());
            if let Some(ga) = slot(nodes, adj, *a) {
                for i in 0..g.len() {
                    ga[i] += match op {
                        BinaryOp::Add | BinaryOp::Sub => g[i],
                        BinaryOp::Mul => g[i] * y[i],
                    };
                }
            }
            if let Some(gb) = slot(nodes, adj, *b) {
                for i in 0..g.len() {
                    gb[i] += match op {
                        BinaryOp::Add => g[i],
                        BinaryOp::Sub => -g[i],
                        BinaryOp::Mul => g[i] * x[i],
                    };
                }
            }
        }
        Op::AddRow(a, bias) => {
            if let Some(ga) = slot(nodes, adj, *a) {
                for (p, &q) in ga.iter_mut().zip(&g) {
                    *p += q;
                }
            }
            if let Some(gb) = slot(nodes, adj, *bias) {
                let n = gb.len();
                for row in g.chunks(n) {
                    for (p, &q) in gb.iter_mut().zip(row) {
                        *p += q;
                    }
                }
            }
        }
        Op::Scale(a, factor) => {
            if let Some(ga) = slot(nodes, adj, *a) {
                for (p, &q) in ga.iter_mut().zip(&g) {
                    *p += q * *factor;
                }
            }
        }
        Op::Unary(op, a) => {
            let x = val(*a).data();
            let y = node.value.data();
            if let Some(ga) = slot(nodes, adj, *a) {
                let two = S::one() + S::one();
                for i in 0..g.len() {
                    ga[i] += match op {
                        UnaryOp::Neg => -g[i],
                        UnaryOp::Tanh => g[i] * (S::one() - y[i] * y[i]),
                        UnaryOp::Sigmoid => g[i] * y[i] * (S::one() - y[i]),
                        UnaryOp::Relu => {
                            if x[i] > S::zero() {
                                g[i]
                            } else {
                                S::zero()
                            }
                        }
                        UnaryOp::Exp => g[i] * y[i],
                        UnaryOp::Log => g[i] / x[i],
                        UnaryOp::Square => g[i] * two * x[i],
                    };
                }
            }
        }
        Op::Sum(a, axis) | Op::Mean(a, axis) => {
            let shape = val(*a).shape().to_vec();
            let Some(ga) = slot(nodes, adj, *a) else {
                return;
            };
            let mean = matches!(node.op, Op::Mean(..));
            match axis {
                None => {
                    let mut s = g[0];
                    if mean {
                        s /= S::from_usize(ga.len()).unwrap();
                    }
                    ga.iter_mut().for_each(|p| *p += s);
                }
                Some(axis) => {
                    let (outer, len, inner) =
                        split_axis("sum", &shape, *axis).expect("validated in forward");
                    let scale = if mean {
                        S::one() / S::from_usize(len).unwrap()
                    } else {
                        S::one()
                    };
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (p, &q) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *p += q * scale;
                            }
                        }
                    }
                }
            }
        }
        Op::Min(a, flat) | Op::Gather(a, flat) => {
            if let Some(ga) = slot(nodes, adj, *a) {
                for (&f, &q) in flat.iter().zip(&g) {
                    ga[f] += q;
                }
            }
        }
        Op::SqDist(a, b) => {
            let (x, y) = (val(*a).data(), val(*b).data());
            let two = S::one() + S::one();
            if let Some(ga) = slot(nodes, adj, *a) {
                for i in 0..x.len() {
                    ga[i] += two * (x[i] - y[i]) * g[0];
                }
            }
            if let Some(gb) = slot(nodes, adj, *b) {
                for i in 0..x.len() {
                    gb[i] -= two * (x[i] - y[i]) * g[0];
                }
            }
        }
        Op::PairwiseSqDist(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let (m, n, d) = (x.rows(), y.rows(), x.cols());
            let two = S::one() + S::one();
            if let Some(ga) = slot(nodes, adj, *a) {
                for i in 0..m {
                    for j in 0..n {
                        let w = two * g[i * n + j];
                        for c in 0..d {
                            ga[i * d + c] += w * (x.row(i)[c] - y.row(j)[c]);
                        }
                    }
                }
            }
            if let Some(gb) = slot(nodes, adj, *b) {
                for i in 0..m {
                    for j in 0..n {
                        let w = two * g[i * n + j];
                        for c in 0..d {
                            gb[j * d + c] -= w * (x.row(i)[c] - y.row(j)[c]);
                        }
                    }
                }
            }
        }
        Op::LogSumExp(a) => {
            let x = val(*a);
            let c = *x.shape().last().unwrap();
            let out = node.value.data();
            if let Some(ga) = slot(nodes, adj, *a) {
                for (r, row) in x.data().chunks(c).enumerate() {
                    if out[r] == S::neg_infinity() {
                        continue;
                    }
                    for (k, &v) in row.iter().enumerate() {
                        ga[r * c + k] += g[r] * (v - out[r]).exp();
                    }
                }
            }
        }
        Op::Concat(inputs, axis) => {
            let shape = node.value.shape();
            let (outer, total, inner) =
                split_axis("concat", shape, *axis).expect("validated in forward");
            let mut offset = 0;
            for &v in inputs {
                let len = val(v).shape()[*axis];
                if let Some(gv) = slot(nodes, adj, v) {
                    for o in 0..outer {
                        let src =
                            &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        for (p, &q) in gv[o * len * inner..(o + 1) * len * inner]
                            .iter_mut()
                            .zip(src)
                        {
                            *p += q;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::LstmGates {
            gates,
            c_prev,
            act,
            tanh_c,
        } => {
            let hidden = tanh_c.len() / node.value.rows();
            let mut dc = vec![S::zero(); tanh_c.len()];
            for (r, d) in dc.chunks_mut(hidden).enumerate() {
                let a = &act[r * 4 * hidden..(r + 1) * 4 * hidden];
                let gh = &g[r * 2 * hidden..r * 2 * hidden + hidden];
                let gc = &g[r * 2 * hidden + hidden..(r + 1) * 2 * hidden];
                for j in 0..hidden {
                    let t = tanh_c[r * hidden + j];
                    d[j] = gc[j] + gh[j] * a[2 * hidden + j] * (S::one() - t * t);
                }
            }
            let prev = c_prev.map(|c| val(c).data());
            if let Some(ga) = slot(nodes, adj, *gates) {
                for (r, d) in dc.chunks(hidden).enumerate() {
                    let a = &act[r * 4 * hidden..(r + 1) * 4 * hidden];
                    let gh = &g[r * 2 * hidden..r * 2 * hidden + hidden];
                    let out = &mut ga[r * 4 * hidden..(r + 1) * 4 * hidden];
                    for j in 0..hidden {
                        let (i, f, o, u) =
                            (a[j], a[hidden + j], a[2 * hidden + j], a[3 * hidden + j]);
                        out[j] += d[j] * u * i * (S::one() - i);
                        if let Some(cp) = prev {
                            out[hidden + j] += d[j] * cp[r * hidden + j] * f * (S::one() - f);
                        }
                        out[2 * hidden + j] += gh[j] * tanh_c[r * hidden + j] * o * (S::one() - o);
                        out[3 * hidden + j] += d[j] * i * (S::one() - u * u);
                    }
                }
            }
            if let Some(c) = c_prev {
                if let Some(gc) = slot(nodes, adj, *c) {
                    for (r, d) in dc.chunks(hidden).enumerate() {
                        let f = &act[r * 4 * hidden + hidden..r * 4 * hidden + 2 * hidden];
                        for j in 0..hidden {
                            gc[r * hidden + j] += d[j] * f[j];
                        }
                    }
                }
            }
        }
        Op::Slice(a, axis, start) => {
            let full_shape = val(*a).shape().to_vec();
            let (outer, full, inner) =
                split_axis("slice", &full_shape, *axis).expect("validated in forward");
            let len = node.value.shape()[*axis];
            if let Some(ga) = slot(nodes, adj, *a) {
                for o in 0..outer {
                    let dst = &mut ga[(o * full + start) * inner..(o * full + start + len) * inner];
                    for (p, &q) in dst
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                    {
                        *p += q;
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, adj, *a) {
                for (p, &q) in ga.iter_mut().zip(&g) {
                    *p += q;
                }
            }
        }
    }
}
