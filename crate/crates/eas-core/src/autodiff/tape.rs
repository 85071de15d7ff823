use std::collections::BTreeMap;

use super::params::NamedParamSet;
use super::tensor::{Real, Tensor};
use super::TapeError;

/// Handle to a value produced on a `Tape`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(u32);

impl NodeId {
    fn index(self) -> usize {
        self.0 as usize
    }
}

/// Primitive operations the tape can record.
#[derive(Clone, Debug)]
pub enum OpSpec {
    /// Matrix product, with optional transposition of either operand.
    MatMul { transpose_a: bool, transpose_b: bool },
    /// Elementwise addition; the second operand may be a trailing-dimension
    /// bias applied to every row of the first.
    AddBroadcast,
    Relu,
    Tanh,
    Scale(Real),
    Log,
    Exp,
    /// Select rows of a matrix by index, duplicates allowed.
    GatherRows(Vec<u32>),
    /// Row-wise softmax over entries whose mask is nonzero; masked entries
    /// are exactly zero in the output. Inputs: logits, mask (same shape).
    MaskedSoftmax,
    /// Sum of every entry, yielding a scalar.
    Sum,
    /// Mean over the leading axis: [m, n] -> [n], [m] -> [1].
    Mean,
}

impl OpSpec {
    fn name(&self) -> &'static str {
        match self {
            OpSpec::MatMul { .. } => "matmul",
            OpSpec::AddBroadcast => "add-broadcast",
            OpSpec::Relu => "relu",
            OpSpec::Tanh => "tanh",
            OpSpec::Scale(_) => "scale",
            OpSpec::Log => "log",
            OpSpec::Exp => "exp",
            OpSpec::GatherRows(_) => "gather-rows",
            OpSpec::MaskedSoftmax => "masked-softmax",
            OpSpec::Sum => "sum",
            OpSpec::Mean => "mean",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpSpec::MatMul { .. } | OpSpec::AddBroadcast | OpSpec::MaskedSoftmax => 2,
            _ => 1,
        }
    }
}

enum NodeKind {
    Leaf { name: Option<String>, trainable: bool },
    Op { op: OpSpec, a: NodeId, b: Option<NodeId> },
}

struct Node {
    value: Tensor,
    kind: NodeKind,
}

/// Append-only record of primitive operations; every entry's inputs precede
/// it, so a single reverse sweep computes gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.index()].value
    }

    fn push(&mut self, value: Tensor, kind: NodeKind) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { value, kind });
        id
    }

    /// Register an anonymous constant input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, NodeKind::Leaf { name: None, trainable: false })
    }

    /// Register a named leaf; names must be unique on a tape.
    pub fn named_leaf(
        &mut self,
        name: &str,
        value: Tensor,
        trainable: bool,
    ) -> Result<NodeId, TapeError> {
        for node in &self.nodes {
            if let NodeKind::Leaf { name: Some(n), .. } = &node.kind {
                if n == name {
                    return Err(TapeError::DuplicateLeaf { name: name.to_string() });
                }
            }
        }
        Ok(self.push(value, NodeKind::Leaf { name: Some(name.to_string()), trainable }))
    }

    /// Register every entry of a parameter set as a named leaf.
    pub fn register_params(
        &mut self,
        params: &NamedParamSet,
    ) -> Result<BTreeMap<String, NodeId>, TapeError> {
        let mut ids = BTreeMap::new();
        for (name, entry) in params.iter() {
            let id = self.named_leaf(name, entry.tensor.clone(), entry.trainable)?;
            ids.insert(name.to_string(), id);
        }
        Ok(ids)
    }

    /// Look up a named leaf.
    pub fn node_of(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|node| {
            matches!(&node.kind, NodeKind::Leaf { name: Some(n), .. } if n == name)
        })
        .map(|i| NodeId(i as u32))
    }

    /// Apply a primitive op, appending one entry to the record.
    pub fn forward(&mut self, op: OpSpec, inputs: &[NodeId]) -> Result<NodeId, TapeError> {
        if inputs.len() != op.arity() {
            return Err(TapeError::ShapeMismatch {
                op: op.name(),
                detail: format!("expected {} inputs, got {}", op.arity(), inputs.len()),
            });
        }
        let a = inputs[0];
        let b = inputs.get(1).copied();
        let value = {
            let av = self.value(a);
            let bv = b.map(|id| self.value(id));
            eval(&op, av, bv)?
        };
        if !value.all_finite() {
            return Err(TapeError::NonFinite { op: op.name() });
        }
        Ok(self.push(value, NodeKind::Op { op, a, b }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.forward(OpSpec::MatMul { transpose_a: false, transpose_b: false }, &[a, b])
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.forward(OpSpec::MatMul { transpose_a: false, transpose_b: true }, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.forward(OpSpec::AddBroadcast, &[a, b])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.forward(OpSpec::Relu, &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.forward(OpSpec::Tanh, &[a])
    }

    pub fn scale(&mut self, a: NodeId, c: Real) -> Result<NodeId, TapeError> {
        self.forward(OpSpec::Scale(c), &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.forward(OpSpec::Log, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.forward(OpSpec::Exp, &[a])
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId, TapeError> {
        let idx = indices.iter().map(|&i| i as u32).collect();
        self.forward(OpSpec::GatherRows(idx), &[a])
    }

    pub fn masked_softmax(&mut self, logits: NodeId, mask: NodeId) -> Result<NodeId, TapeError> {
        self.forward(OpSpec::MaskedSoftmax, &[logits, mask])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.forward(OpSpec::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        self.forward(OpSpec::Mean, &[a])
    }

    /// Reverse sweep from `output`, seeded with `seed`. Returns gradients for
    /// the trainable entries of `targets` only; operations that no target
    /// feeds into are skipped outright, which is what keeps the sweep cheap
    /// when only a small parameter subset is being adapted.
    pub fn backprop(
        &self,
        output: NodeId,
        seed: &Tensor,
        targets: &NamedParamSet,
    ) -> Result<BTreeMap<String, Tensor>, TapeError> {
        if seed.shape() != self.value(output).shape() {
            return Err(TapeError::ShapeMismatch {
                op: "backprop",
                detail: format!(
                    "seed shape {:?} does not match output shape {:?}",
                    seed.shape(),
                    self.value(output).shape()
                ),
            });
        }

        let mut target_ids: BTreeMap<&str, NodeId> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let NodeKind::Leaf { name: Some(n), trainable: true } = &node.kind {
                if targets.is_trainable(n) {
                    target_ids.insert(n.as_str(), NodeId(i as u32));
                }
            }
        }
        for (name, _) in targets.trainable_iter() {
            if !target_ids.contains_key(name) {
                return Err(TapeError::UnknownTarget { name: name.to_string() });
            }
        }

        // A node needs its gradient iff some target leaf feeds into it.
        let mut dep = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            dep[i] = match &node.kind {
                NodeKind::Leaf { name: Some(n), trainable: true } => targets.is_trainable(n),
                NodeKind::Leaf { .. } => false,
                NodeKind::Op { a, b, .. } => {
                    dep[a.index()] || b.map(|id| dep[id.index()]).unwrap_or(false)
                }
            };
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.index()] = Some(seed.clone());

        for i in (0..=output.index()).rev() {
            if !dep[i] || grads[i].is_none() {
                continue;
            }
            let (op, a, b) = match &self.nodes[i].kind {
                NodeKind::Leaf { .. } => continue,
                NodeKind::Op { op, a, b } => (op.clone(), *a, *b),
            };
            let upstream = grads[i].take().unwrap();
            let out_val = &self.nodes[i].value;
            let a_val = &self.nodes[a.index()].value;
            let b_val = b.map(|id| &self.nodes[id.index()].value);
            let want_a = dep[a.index()];
            let want_b = b.map(|id| dep[id.index()]).unwrap_or(false);
            let (ga, gb) = backward(&op, &upstream, out_val, a_val, b_val, want_a, want_b);
            if let Some(ga) = ga {
                accumulate(&mut grads[a.index()], ga);
            }
            if let (Some(gb), Some(bid)) = (gb, b) {
                accumulate(&mut grads[bid.index()], gb);
            }
        }

        let mut out = BTreeMap::new();
        for (name, id) in target_ids {
            let g = grads[id.index()]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.value(id).shape().to_vec()));
            out.insert(name.to_string(), g);
        }
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Tensor>, add: Tensor) {
    match slot {
        None => *slot = Some(add),
        Some(t) => {
            for (o, v) in t.data_mut().iter_mut().zip(add.data()) {
                *o += v;
            }
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> TapeError {
    TapeError::ShapeMismatch { op, detail }
}

fn eval(op: &OpSpec, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor, TapeError> {
    match op {
        OpSpec::MatMul { transpose_a, transpose_b } => {
            matmul_raw(a, *transpose_a, b.unwrap(), *transpose_b)
        }
        OpSpec::AddBroadcast => add_broadcast(a, b.unwrap()),
        OpSpec::Relu => Ok(map(a, |x| if x > 0.0 { x } else { 0.0 })),
        OpSpec::Tanh => Ok(map(a, Real::tanh)),
        OpSpec::Scale(c) => {
            let c = *c;
            Ok(map(a, |x| c * x))
        }
        OpSpec::Log => {
            if a.data().iter().any(|&x| x <= 0.0) {
                return Err(TapeError::LogDomain);
            }
            Ok(map(a, Real::ln))
        }
        OpSpec::Exp => Ok(map(a, Real::exp)),
        OpSpec::GatherRows(indices) => gather_rows_raw(a, indices),
        OpSpec::MaskedSoftmax => masked_softmax_raw(a, b.unwrap()),
        OpSpec::Sum => Ok(Tensor::scalar(a.data().iter().sum())),
        OpSpec::Mean => mean_axis0(a),
    }
}

fn map(t: &Tensor, f: impl Fn(Real) -> Real) -> Tensor {
    let data = t.data().iter().map(|&x| f(x)).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

fn transpose_data(rows: usize, cols: usize, data: &[Real]) -> Vec<Real> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// C = op_a(A) · op_b(B); transposed operands are materialized so the kernel
/// always runs with unit-stride rows on both sides.
fn matmul_raw(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<Tensor, TapeError> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(shape_err(
            "matmul",
            format!("need matrices, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k1) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k1 != k2 {
        return Err(shape_err(
            "matmul",
            format!("inner dimensions differ: {:?} x {:?} (ta={ta}, tb={tb})", a.shape(), b.shape()),
        ));
    }
    let at;
    let adata: &[Real] = if ta {
        at = transpose_data(ar, ac, a.data());
        &at
    } else {
        a.data()
    };
    let bt;
    let bdata: &[Real] = if tb {
        bt = transpose_data(br, bc, b.data());
        &bt
    } else {
        b.data()
    };
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &adata[i * k1..(i + 1) * k1];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &bdata[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

fn add_broadcast(a: &Tensor, b: &Tensor) -> Result<Tensor, TapeError> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    if b.is_bias_for(a) {
        let cols = a.cols();
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (x, y) in row.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        return Tensor::new(a.shape().to_vec(), data);
    }
    Err(shape_err(
        "add-broadcast",
        format!("incompatible shapes {:?} and {:?}", a.shape(), b.shape()),
    ))
}

fn gather_rows_raw(a: &Tensor, indices: &[u32]) -> Result<Tensor, TapeError> {
    if a.shape().len() != 2 {
        return Err(shape_err("gather-rows", format!("need a matrix, got {:?}", a.shape())));
    }
    if indices.is_empty() {
        return Err(shape_err("gather-rows", "empty index list".to_string()));
    }
    let rows = a.shape()[0];
    let cols = a.shape()[1];
    let mut data = Vec::with_capacity(indices.len() * cols);
    for &i in indices {
        let i = i as usize;
        if i >= rows {
            return Err(shape_err("gather-rows", format!("row {} out of {}", i, rows)));
        }
        data.extend_from_slice(a.row(i));
    }
    Tensor::new(vec![indices.len(), cols], data)
}

fn masked_softmax_raw(logits: &Tensor, mask: &Tensor) -> Result<Tensor, TapeError> {
    if logits.shape() != mask.shape() {
        return Err(shape_err(
            "masked-softmax",
            format!("logits {:?} vs mask {:?}", logits.shape(), mask.shape()),
        ));
    }
    let cols = logits.cols();
    let mut data = vec![0.0; logits.len()];
    for (r, (lrow, mrow)) in logits
        .data()
        .chunks(cols)
        .zip(mask.data().chunks(cols))
        .enumerate()
    {
        // Shift by the row max over unmasked entries before exponentiating.
        let mut hi = Real::NEG_INFINITY;
        for (l, m) in lrow.iter().zip(mrow) {
            if *m != 0.0 && *l > hi {
                hi = *l;
            }
        }
        if hi == Real::NEG_INFINITY {
            return Err(shape_err("masked-softmax", format!("row {} has no unmasked entry", r)));
        }
        let out = &mut data[r * cols..(r + 1) * cols];
        let mut total = 0.0;
        for ((o, l), m) in out.iter_mut().zip(lrow).zip(mrow) {
            if *m != 0.0 {
                let e = (l - hi).exp();
                *o = e;
                total += e;
            }
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }
    Tensor::new(logits.shape().to_vec(), data)
}

fn mean_axis0(a: &Tensor) -> Result<Tensor, TapeError> {
    if a.shape().len() == 1 {
        let m = a.len() as Real;
        return Ok(Tensor::scalar(a.data().iter().sum::<Real>() / m));
    }
    if a.shape().len() == 2 {
        let rows = a.shape()[0];
        let cols = a.shape()[1];
        let mut out = vec![0.0; cols];
        for row in a.data().chunks(cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let m = rows as Real;
        for o in &mut out {
            *o /= m;
        }
        // A single-row matrix, so the mean can feed matmul or gather-rows.
        return Tensor::new(vec![1, cols], out);
    }
    Err(shape_err("mean", format!("need a vector or matrix, got {:?}", a.shape())))
}

/// Gradients of one op w.r.t. its inputs; `want_*` suppresses sides nothing
/// depends on.
fn backward(
    op: &OpSpec,
    upstream: &Tensor,
    out: &Tensor,
    a: &Tensor,
    b: Option<&Tensor>,
    want_a: bool,
    want_b: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    match op {
        OpSpec::MatMul { transpose_a: ta, transpose_b: tb } => {
            let b = b.unwrap();
            let ga = if want_a {
                Some(if *ta {
                    matmul_raw(b, *tb, upstream, true).unwrap()
                } else {
                    matmul_raw(upstream, false, b, !*tb).unwrap()
                })
            } else {
                None
            };
            let gb = if want_b {
                Some(if *tb {
                    matmul_raw(upstream, true, a, *ta).unwrap()
                } else {
                    matmul_raw(a, !*ta, upstream, false).unwrap()
                })
            } else {
                None
            };
            (ga, gb)
        }
        OpSpec::AddBroadcast => {
            let b = b.unwrap();
            let ga = want_a.then(|| upstream.clone());
            let gb = if !want_b {
                None
            } else if b.shape() == a.shape() {
                Some(upstream.clone())
            } else {
                // Bias case: fold the upstream over rows.
                let cols = a.cols();
                let mut g = vec![0.0; b.len()];
                for row in upstream.data().chunks(cols) {
                    for (o, v) in g.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                Some(Tensor::new(b.shape().to_vec(), g).unwrap())
            };
            (ga, gb)
        }
        OpSpec::Relu => {
            let ga = want_a.then(|| {
                let data = upstream
                    .data()
                    .iter()
                    .zip(a.data())
                    .map(|(&u, &x)| if x > 0.0 { u } else { 0.0 })
                    .collect();
                Tensor::new(a.shape().to_vec(), data).unwrap()
            });
            (ga, None)
        }
        OpSpec::Tanh => {
            let ga = want_a.then(|| {
                let data = upstream
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&u, &y)| u * (1.0 - y * y))
                    .collect();
                Tensor::new(a.shape().to_vec(), data).unwrap()
            });
            (ga, None)
        }
        OpSpec::Scale(c) => {
            let c = *c;
            let ga = want_a.then(|| {
                let data = upstream.data().iter().map(|&u| c * u).collect();
                Tensor::new(a.shape().to_vec(), data).unwrap()
            });
            (ga, None)
        }
        OpSpec::Log => {
            let ga = want_a.then(|| {
                let data = upstream.data().iter().zip(a.data()).map(|(&u, &x)| u / x).collect();
                Tensor::new(a.shape().to_vec(), data).unwrap()
            });
            (ga, None)
        }
        OpSpec::Exp => {
            let ga = want_a.then(|| {
                let data = upstream.data().iter().zip(out.data()).map(|(&u, &y)| u * y).collect();
                Tensor::new(a.shape().to_vec(), data).unwrap()
            });
            (ga, None)
        }
        OpSpec::GatherRows(indices) => {
            let ga = want_a.then(|| {
                let mut g = Tensor::zeros(a.shape().to_vec());
                let cols = a.cols();
                let gd = g.data_mut();
                for (r, &i) in indices.iter().enumerate() {
                    let dst = &mut gd[i as usize * cols..(i as usize + 1) * cols];
                    for (o, v) in dst.iter_mut().zip(upstream.row(r)) {
                        *o += v;
                    }
                }
                g
            });
            (ga, None)
        }
        OpSpec::MaskedSoftmax => {
            // d logit_j = y_j (u_j - sum_k y_k u_k); masked entries have
            // y_j = 0, so the same expression covers them. The mask itself
            // is not differentiable.
            let ga = want_a.then(|| {
                let cols = a.cols();
                let mut data = vec![0.0; a.len()];
                for (r, (yrow, urow)) in out
                    .data()
                    .chunks(cols)
                    .zip(upstream.data().chunks(cols))
                    .enumerate()
                {
                    let dot: Real = yrow.iter().zip(urow).map(|(&y, &u)| y * u).sum();
                    let drow = &mut data[r * cols..(r + 1) * cols];
                    for ((d, &y), &u) in drow.iter_mut().zip(yrow).zip(urow) {
                        *d = y * (u - dot);
                    }
                }
                Tensor::new(a.shape().to_vec(), data).unwrap()
            });
            (ga, None)
        }
        OpSpec::Sum => {
            let ga = want_a.then(|| {
                let u = upstream.data()[0];
                Tensor::new(a.shape().to_vec(), vec![u; a.len()]).unwrap()
            });
            (ga, None)
        }
        OpSpec::Mean => {
            let ga = want_a.then(|| {
                let m = a.rows() as Real;
                let mut g = Tensor::zeros(a.shape().to_vec());
                let cols = a.cols();
                let gd = g.data_mut();
                for row in gd.chunks_mut(cols) {
                    for (o, &u) in row.iter_mut().zip(upstream.data()) {
                        *o = u / m;
                    }
                }
                g
            });
            (ga, None)
        }
    }
}
