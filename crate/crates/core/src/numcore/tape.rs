//! Dynamic computation tape.
//!
//! A fresh [`Tape`] is built for every example: ops append nodes in
//! evaluation order, so the node list is already a topological order and the
//! reverse pass is a single backwards sweep. Parameters are read in place
//! from a borrowed [`ParamStore`]; their adjoints are collected with
//! [`Tape::param_grads`].

use smallvec::smallvec;

use super::{Gradients, NumError, ParamId, ParamStore, Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Linear { terms: Vec<(Var, Var)>, bias: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    CrossEntropy { logits: Var, target: usize },
    Sum(Var),
    AddN(Vec<Var>),
    Concat(Vec<Var>),
    Lookup { table: Var, row: usize },
    StackRows(Vec<Var>),
    Transpose(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::MulScalar(..) => "mul_scalar",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softmax(_) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::AddN(_) => "add_n",
            Op::Concat(_) => "concat",
            Op::Lookup { .. } => "lookup",
            Op::StackRows(_) => "stack_rows",
            Op::Transpose(_) => "transpose",
        }
    }
}

struct Node {
    // `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
}

pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Tape::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumError {
    NumError::Shape { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_slice(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'p> Tape<'p> {
    /// A tape with no parameter store; only leaves can be tracked.
    pub fn new() -> Self {
        Tape { params: None, nodes: Vec::new(), param_vars: Vec::new(), grads: Vec::new() }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Tape {
            params: Some(params),
            nodes: Vec::with_capacity(1024),
            param_vars: vec![None; params.len()],
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.expect("param node without store").get(*id),
            (None, _) => unreachable!("only parameter nodes are stored by reference"),
        }
    }

    /// Accumulated gradient of `v`, once a backward pass has run.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        let shape = Shape::from_slice(self.value(v).shape());
        Some(Tensor::from_parts(shape, g.clone()))
    }

    /// Resets all accumulated gradients.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, NumError> {
        if !value.is_finite() {
            return Err(NumError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value: Some(value), op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input tensor whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: Some(t), op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// The node for a stored parameter; created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Matrix product; the right operand may be a vector (matrix–vector).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k) = ta.rows_cols();
        let (kb, n, out_shape): (usize, usize, Shape) = match tb.shape() {
            [kb] => (*kb, 1, smallvec![m]),
            [kb, n] => (*kb, *n, smallvec![m, *n]),
            _ => unreachable!(),
        };
        if k != kb {
            return Err(shape_err("matmul", ta, tb));
        }
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        self.push(Tensor::from_parts(out_shape, out), Op::MatMul(a, b))
    }

    /// `Σ_k W_k x_k + bias` with matrix `W_k` and vector `x_k`.
    pub fn linear(&mut self, terms: &[(Var, Var)], bias: Option<Var>) -> Result<Var, NumError> {
        let rows = match (terms.first(), bias) {
            (Some(&(w, _)), _) => self.value(w).rows_cols().0,
            (None, Some(b)) => self.value(b).numel(),
            (None, None) => return Err(NumError::Contract("linear: no terms".into())),
        };
        let mut out = vec![0.0; rows];
        for &(w, x) in terms {
            let (tw, tx) = (self.value(w), self.value(x));
            let (m, k) = tw.rows_cols();
            if !tw.is_matrix() || !tx.is_vector() || m != rows || k != tx.numel() {
                return Err(shape_err("linear", tw, tx));
            }
            let (wd, xd) = (tw.data(), tx.data());
            for (i, o) in out.iter_mut().enumerate() {
                *o += wd[i * k..(i + 1) * k].iter().zip(xd).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        if let Some(b) = bias {
            let tb = self.value(b);
            if tb.numel() != rows || !tb.is_vector() {
                return Err(NumError::Shape { op: "linear", lhs: vec![rows], rhs: tb.shape().to_vec() });
            }
            add_into(&mut out, tb.data());
        }
        self.push(Tensor::vector(out), Op::Linear { terms: terms.to_vec(), bias })
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = Shape::from_slice(ta.shape());
        self.push(Tensor::from_parts(shape, data), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds vector `v` to every row of matrix `m`.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var, NumError> {
        let (tm, tv) = (self.value(m), self.value(v));
        let (_, c) = tm.rows_cols();
        if !tm.is_matrix() || !tv.is_vector() || tv.numel() != c {
            return Err(shape_err("add_row", tm, tv));
        }
        let vd = tv.data();
        let data = tm.data().chunks(c).flat_map(|row| row.iter().zip(vd).map(|(a, b)| a + b)).collect();
        let shape = Shape::from_slice(tm.shape());
        self.push(Tensor::from_parts(shape, data), Op::AddRow(m, v))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, NumError> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * factor).collect();
        let shape = Shape::from_slice(ta.shape());
        self.push(Tensor::from_parts(shape, data), Op::Scale(a, factor))
    }

    /// Multiplies by a tracked scalar (vector–scalar broadcast).
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, NumError> {
        let (ta, ts) = (self.value(a), self.value(s));
        if !ts.is_scalar() {
            return Err(shape_err("mul_scalar", ta, ts));
        }
        let sv = ts.item();
        let data = ta.data().iter().map(|x| x * sv).collect();
        let shape = Shape::from_slice(ta.shape());
        self.push(Tensor::from_parts(shape, data), Op::MulScalar(a, s))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, NumError> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let shape = Shape::from_slice(ta.shape());
        self.push(Tensor::from_parts(shape, data), op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumError> {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumError> {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    /// Softmax of a vector, computed with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumError> {
        let ta = self.value(a);
        if !ta.is_vector() {
            return Err(NumError::Contract(format!("softmax expects a vector, got {:?}", ta.shape())));
        }
        let out = softmax_slice(ta.data());
        self.push(Tensor::vector(out), Op::Softmax(a))
    }

    /// `−log softmax(logits)[target]`, fused through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, NumError> {
        let tz = self.value(logits);
        if !tz.is_vector() || target >= tz.numel() {
            return Err(NumError::Contract(format!(
                "cross_entropy: target {target} out of range for logits {:?}",
                tz.shape()
            )));
        }
        let z = tz.data();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        self.push(Tensor::scalar(lse - z[target]), Op::CrossEntropy { logits, target })
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Element-wise sum of equally shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var, NumError> {
        let first = *xs.first().ok_or_else(|| NumError::Contract("add_n: no inputs".into()))?;
        let t0 = self.value(first);
        let shape = Shape::from_slice(t0.shape());
        let mut out = t0.data().to_vec();
        for &x in &xs[1..] {
            let tx = self.value(x);
            if tx.shape() != shape.as_slice() {
                return Err(shape_err("add_n", self.value(first), tx));
            }
            add_into(&mut out, tx.data());
        }
        self.push(Tensor::from_parts(shape, out), Op::AddN(xs.to_vec()))
    }

    /// Concatenates vectors.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var, NumError> {
        if xs.is_empty() {
            return Err(NumError::Contract("concat: no inputs".into()));
        }
        let mut out = Vec::new();
        for &x in xs {
            let tx = self.value(x);
            if !tx.is_vector() {
                return Err(NumError::Contract(format!("concat expects vectors, got {:?}", tx.shape())));
            }
            out.extend_from_slice(tx.data());
        }
        self.push(Tensor::vector(out), Op::Concat(xs.to_vec()))
    }

    /// Row `row` of an embedding table, as a vector.
    pub fn lookup(&mut self, table: Var, row: usize) -> Result<Var, NumError> {
        let tt = self.value(table);
        let (rows, _) = tt.rows_cols();
        if !tt.is_matrix() || row >= rows {
            return Err(NumError::Contract(format!("lookup: row {row} out of range for table {:?}", tt.shape())));
        }
        let out = tt.row(row).to_vec();
        self.push(Tensor::vector(out), Op::Lookup { table, row })
    }

    /// Stacks equally sized vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Result<Var, NumError> {
        let first = *xs.first().ok_or_else(|| NumError::Contract("stack_rows: no inputs".into()))?;
        let cols = self.value(first).numel();
        let mut out = Vec::with_capacity(cols * xs.len());
        for &x in xs {
            let tx = self.value(x);
            if !tx.is_vector() || tx.numel() != cols {
                return Err(shape_err("stack_rows", self.value(first), tx));
            }
            out.extend_from_slice(tx.data());
        }
        self.push(Tensor::from_parts(smallvec![xs.len(), cols], out), Op::StackRows(xs.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumError> {
        let ta = self.value(a);
        if !ta.is_matrix() {
            return Err(NumError::Contract(format!("transpose expects a matrix, got {:?}", ta.shape())));
        }
        let (r, c) = ta.rows_cols();
        let d = ta.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push(Tensor::from_parts(smallvec![c, r], out), Op::Transpose(a))
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate across calls
    /// until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), NumError> {
        if !self.value(loss).is_scalar() {
            return Err(NumError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.backprop_node(i, &g, &mut adj);
            adj[i] = Some(g);
        }

        if self.grads.len() < adj.len() {
            self.grads.resize(adj.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(adj) {
            match (dst.as_mut(), src) {
                (Some(d), Some(s)) => add_into(d, &s),
                (None, Some(s)) => *dst = Some(s),
                _ => {}
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        fn slot(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            adj[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k) = ta.rows_cols();
                let n = tb.numel() / k;
                let (ad, bd) = (ta.data(), tb.data());
                let da = slot(adj, a, m * k);
                for i in 0..m {
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        da[i * k + p] += g[i * n..(i + 1) * n].iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
                let db = slot(adj, b, k * n);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *d += av * gv;
                        }
                    }
                }
            }
            Op::Linear { terms, bias } => {
                for &(w, x) in terms {
                    let (tw, tx) = (self.value(w), self.value(x));
                    let (m, k) = tw.rows_cols();
                    let (wd, xd) = (tw.data(), tx.data());
                    let dw = slot(adj, w, m * k);
                    for (r, &gv) in g.iter().enumerate() {
                        for (d, xv) in dw[r * k..(r + 1) * k].iter_mut().zip(xd) {
                            *d += gv * xv;
                        }
                    }
                    let dx = slot(adj, x, k);
                    for (r, &gv) in g.iter().enumerate() {
                        for (d, wv) in dx.iter_mut().zip(&wd[r * k..(r + 1) * k]) {
                            *d += gv * wv;
                        }
                    }
                }
                if let Some(b) = *bias {
                    add_into(slot(adj, b, g.len()), g);
                }
            }
            &Op::Add(a, b) => {
                add_into(slot(adj, a, g.len()), g);
                add_into(slot(adj, b, g.len()), g);
            }
            &Op::Sub(a, b) => {
                add_into(slot(adj, a, g.len()), g);
                let db = slot(adj, b, g.len());
                for (d, gv) in db.iter_mut().zip(g) {
                    *d -= gv;
                }
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                let da = slot(adj, a, g.len());
                for ((d, gv), bv) in da.iter_mut().zip(g).zip(bd) {
                    *d += gv * bv;
                }
                let db = slot(adj, b, g.len());
                for ((d, gv), av) in db.iter_mut().zip(g).zip(ad) {
                    *d += gv * av;
                }
            }
            &Op::AddRow(m, v) => {
                add_into(slot(adj, m, g.len()), g);
                let c = self.value(v).numel();
                let dv = slot(adj, v, c);
                for row in g.chunks(c) {
                    add_into(dv, row);
                }
            }
            &Op::Scale(a, factor) => {
                let da = slot(adj, a, g.len());
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv * factor;
                }
            }
            &Op::MulScalar(a, s) => {
                let ad = self.value(a).data();
                let sv = self.value(s).item();
                let da = slot(adj, a, g.len());
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv * sv;
                }
                let ds: f64 = g.iter().zip(ad).map(|(x, y)| x * y).sum();
                slot(adj, s, 1)[0] += ds;
            }
            &Op::Sigmoid(a) => {
                let y = node.value.as_ref().expect("computed").data();
                let da = slot(adj, a, g.len());
                for ((d, gv), yv) in da.iter_mut().zip(g).zip(y) {
                    *d += gv * yv * (1.0 - yv);
                }
            }
            &Op::Tanh(a) => {
                let y = node.value.as_ref().expect("computed").data();
                let da = slot(adj, a, g.len());
                for ((d, gv), yv) in da.iter_mut().zip(g).zip(y) {
                    *d += gv * (1.0 - yv * yv);
                }
            }
            &Op::Softmax(a) => {
                let y = node.value.as_ref().expect("computed").data();
                let dot: f64 = g.iter().zip(y).map(|(x, y)| x * y).sum();
                let da = slot(adj, a, g.len());
                for ((d, gv), yv) in da.iter_mut().zip(g).zip(y) {
                    *d += yv * (gv - dot);
                }
            }
            &Op::CrossEntropy { logits, target } => {
                let p = softmax_slice(self.value(logits).data());
                let dz = slot(adj, logits, p.len());
                for (j, (d, pv)) in dz.iter_mut().zip(&p).enumerate() {
                    let onehot = if j == target { 1.0 } else { 0.0 };
                    *d += g[0] * (pv - onehot);
                }
            }
            &Op::Sum(a) => {
                let n = self.value(a).numel();
                slot(adj, a, n).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::AddN(xs) => {
                for &x in xs {
                    add_into(slot(adj, x, g.len()), g);
                }
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).numel();
                    add_into(slot(adj, x, n), &g[off..off + n]);
                    off += n;
                }
            }
            &Op::Lookup { table, row } => {
                let tt = self.value(table);
                let (_, c) = tt.rows_cols();
                let dt = slot(adj, table, tt.numel());
                add_into(&mut dt[row * c..(row + 1) * c], g);
            }
            Op::StackRows(xs) => {
                let c = g.len() / xs.len();
                for (r, &x) in xs.iter().enumerate() {
                    add_into(slot(adj, x, c), &g[r * c..(r + 1) * c]);
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = self.value(a).rows_cols();
                let da = slot(adj, a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
    }

    /// Gradients of every parameter used on this tape, scaled by `scale`
    /// and added into `out`.
    pub fn accumulate_param_grads(&self, out: &mut Gradients, scale: f64) {
        for (pid, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if let Some(Some(g)) = self.grads.get(v.0) {
                    out.add(ParamId(pid), g, scale);
                }
            }
        }
    }

    /// Gradients of every parameter used on this tape.
    pub fn param_grads(&self) -> Gradients {
        let params = self.params.expect("param_grads on a tape without parameters");
        let mut g = Gradients::zeros_like(params);
        self.accumulate_param_grads(&mut g, 1.0);
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_by_hand() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = t.leaf(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).shape(), &[2, 1]);
        assert_eq!(t.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[2, 1]));
        match t.matmul(a, b) {
            Err(NumError::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 1]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn no_broadcast_between_mismatched_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 2]));
        let b = t.leaf(Tensor::zeros(&[2]));
        assert!(t.add(a, b).is_err());
        assert!(t.mul(a, b).is_err());
    }

    #[test]
    fn softmax_uniform_and_sigmoid_half() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::vector(vec![0.0; 3]));
        let s = t.softmax(z).unwrap();
        for &v in t.value(s).data() {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
        let x = t.leaf(Tensor::scalar(0.0));
        let y = t.sigmoid(x).unwrap();
        assert_eq!(t.value(y).item(), 0.5);
    }

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().item(), 6.0);
        // Repeated calls accumulate.
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().item(), 12.0);
        t.zero_grad();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(NumError::Contract(_))));
    }

    #[test]
    fn cross_entropy_gradient_closed_form() {
        let z = vec![0.3, -1.2, 0.7, 0.1];
        let mut t = Tape::new();
        let zv = t.leaf(Tensor::vector(z.clone()));
        let l = t.cross_entropy(zv, 2).unwrap();
        t.backward(l).unwrap();
        let p = softmax_slice(&z);
        let g = t.grad(zv).unwrap();
        for (j, (gv, pv)) in g.data().iter().zip(&p).enumerate() {
            let expect = pv - if j == 2 { 1.0 } else { 0.0 };
            assert!(close(*gv, expect, 1e-15));
        }
    }

    #[test]
    fn softmax_stable_for_large_inputs() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::vector(vec![1000.0, 1000.0]));
        let s = t.softmax(z).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);
        let l = t.cross_entropy(z, 0).unwrap();
        assert!(close(t.value(l).item(), std::f64::consts::LN_2, 1e-12));
    }

    #[test]
    fn non_finite_values_are_reported() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![f64::MAX, 1.0]));
        let err = t.add(x, x).unwrap_err();
        assert!(matches!(err, NumError::NonFinite { op: "add" }));
    }
}
