//! Dense f64 tensors and a Wengert-tape reverse-mode autodiff engine
//! covering exactly the operations the LSTM stack needs.
//!
//! Values live in plain [`Tensor`]s; differentiable computation is recorded
//! on a [`Tape`], whose nodes are addressed by lightweight [`Var`] handles.
//! Every committed op checks its output for non-finite values. Reductions
//! run in sequential index order so runs are bit-reproducible.

use crate::error::{Error, Result};

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "Tensor::new" });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }
}

/// Handle into the active tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

/// Pointwise op kinds exposed by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Square,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// Equal shapes, or one side scalar.
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulScalar(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Square(usize),
    /// (r,k) x (k,c) -> (r,c)
    Matmul(usize, usize),
    /// (r,k) x (c,k)^T -> (r,c)
    MatmulNt(usize, usize),
    /// Gather rows of a rank-2 tensor.
    Rows(usize, Vec<usize>),
    /// (r,c1) ++ (r,c2) -> (r,c1+c2)
    ConcatCols(usize, usize),
    /// (src, start, len) over columns
    SliceCols(usize, usize, usize),
    /// (r,c) + broadcast (c,)
    AddRow(usize, usize),
    /// Sum of all entries -> scalar.
    Sum(usize),
    /// Summed -log softmax(row)[target]; saved softmax probs for backward.
    CrossEntropy(usize, Vec<usize>),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    /// Softmax probabilities for CrossEntropy nodes, empty otherwise.
    saved: Vec<f64>,
    op: Op,
}

/// Ordered record of operations for one forward/backward pass.
///
/// Topological by construction: parents always precede children.
pub struct Tape {
    nodes: Vec<Node>,
    seed: u64,
    peak_elems: usize,
    cur_elems: usize,
}

impl Tape {
    pub fn new(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            seed,
            peak_elems: 0,
            cur_elems: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Peak number of f64 elements resident on the tape (data + grad).
    pub fn peak_elems(&self) -> usize {
        self.peak_elems
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].data.clone(),
        }
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].grad.clone(),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name(&op) });
        }
        let n = data.len();
        self.cur_elems += 2 * n;
        self.peak_elems = self.peak_elems.max(self.cur_elems);
        self.nodes.push(Node {
            grad: vec![0.0; n],
            saved: Vec::new(),
            shape,
            data,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record a constant/leaf value. Leaves still receive gradients; use
    /// [`Tape::grad`] after backward to read them.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        // Tensor invariants already guarantee finiteness.
        self.push(t.shape, t.data, Op::Leaf).expect("leaf is finite")
    }

    /// Re-materialize a var's value as a fresh leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v);
        self.leaf(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_pointwise(a, b, Op::Add(a.0, b.0), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_pointwise(a, b, Op::Sub(a.0, b.0), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_pointwise(a, b, Op::Mul(a.0, b.0), "mul", |x, y| x * y)
    }

    pub fn mul_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * k).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::MulScalar(a.0, k))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| sigmoid(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.tanh()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Tanh(a.0))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * x).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Square(a.0))
    }

    /// Pointwise dispatch over the supported op kinds. Binary kinds take two
    /// args, unary kinds one.
    pub fn elementwise(&mut self, op: ElemOp, args: &[Var]) -> Result<Var> {
        match (op, args) {
            (ElemOp::Add, &[a, b]) => self.add(a, b),
            (ElemOp::Sub, &[a, b]) => self.sub(a, b),
            (ElemOp::Mul, &[a, b]) => self.mul(a, b),
            (ElemOp::Sigmoid, &[a]) => self.sigmoid(a),
            (ElemOp::Tanh, &[a]) => self.tanh(a),
            (ElemOp::Square, &[a]) => self.square(a),
            _ => Err(Error::Config(format!(
                "elementwise {op:?} takes {} arg(s), got {}",
                match op {
                    ElemOp::Add | ElemOp::Sub | ElemOp::Mul => 2,
                    _ => 1,
                },
                args.len()
            ))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; r * c];
        mm(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            &mut out,
            r,
            k,
            c,
        );
        self.push(vec![r, c], out, Op::Matmul(a.0, b.0))
    }

    /// `a · bᵀ` for `a: (r,k)`, `b: (c,k)`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (r, k, c) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; r * c];
        mm_nt(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            &mut out,
            r,
            k,
            c,
        );
        self.push(vec![r, c], out, Op::MatmulNt(a.0, b.0))
    }

    /// Gather rows of a rank-2 tensor (embedding lookup).
    pub fn rows(&mut self, src: Var, indices: &[usize]) -> Result<Var> {
        let s = &self.nodes[src.0].shape;
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "rows",
                lhs: s.clone(),
                rhs: vec![],
            });
        }
        let (n, c) = (s[0], s[1]);
        for &i in indices {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, dim: n });
            }
        }
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&self.nodes[src.0].data[i * c..(i + 1) * c]);
        }
        self.push(
            vec![indices.len(), c],
            out,
            Op::Rows(src.0, indices.to_vec()),
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (r, c1, c2) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(r * (c1 + c2));
        for i in 0..r {
            out.extend_from_slice(&self.nodes[a.0].data[i * c1..(i + 1) * c1]);
            out.extend_from_slice(&self.nodes[b.0].data[i * c2..(i + 1) * c2]);
        }
        self.push(vec![r, c1 + c2], out, Op::ConcatCols(a.0, b.0))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let s = &self.nodes[src.0].shape;
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: s.clone(),
                rhs: vec![start, len],
            });
        }
        let (r, c) = (s[0], s[1]);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.nodes[src.0].data[i * c + start..i * c + start + len]);
        }
        self.push(vec![r, len], out, Op::SliceCols(src.0, start, len))
    }

    /// Broadcast-add a `(c,)` vector to every row of `(r,c)`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (&self.nodes[a.0].shape, &self.nodes[row.0].shape);
        let c = *sr.last().unwrap_or(&0);
        if sa.len() != 2 || self.nodes[row.0].data.len() != sa[1] || c != sa[1] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: sa.clone(),
                rhs: sr.clone(),
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let mut out = self.nodes[a.0].data.clone();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += self.nodes[row.0].data[j];
            }
        }
        self.push(vec![r, c], out, Op::AddRow(a.0, row.0))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a.0))
    }

    /// Summed token-level cross-entropy over the rows of `logits: (r, m)`,
    /// one target index per row. Computed with max-subtraction.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = &self.nodes[logits.0].shape;
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: s.clone(),
                rhs: vec![targets.len()],
            });
        }
        let (r, m) = (s[0], s[1]);
        for &t in targets {
            if t >= m {
                return Err(Error::IndexOutOfRange { index: t, dim: m });
            }
        }
        let mut probs = vec![0.0; r * m];
        let mut total = 0.0;
        for i in 0..r {
            let row = &self.nodes[logits.0].data[i * m..(i + 1) * m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..m {
                let e = (row[j] - max).exp();
                probs[i * m + j] = e;
                z += e;
            }
            for j in 0..m {
                probs[i * m + j] /= z;
            }
            total += z.ln() - (row[targets[i]] - max);
        }
        let v = self.push(vec![1], vec![total], Op::CrossEntropy(logits.0, targets.to_vec()))?;
        self.nodes[v.0].saved = probs;
        Ok(v)
    }

    /// Softmax probabilities of each row of `logits` (value-only, not
    /// differentiable; used by evaluation paths).
    pub fn softmax_rows(&self, logits: Var) -> Tensor {
        let s = &self.nodes[logits.0].shape;
        let (r, m) = (s[0], s[1]);
        let mut out = vec![0.0; r * m];
        for i in 0..r {
            let row = &self.nodes[logits.0].data[i * m..(i + 1) * m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..m {
                out[i * m + j] = (row[j] - max).exp();
                z += out[i * m + j];
            }
            for j in 0..m {
                out[i * m + j] /= z;
            }
        }
        Tensor {
            shape: vec![r, m],
            data: out,
        }
    }

    /// Reverse pass from a scalar loss. Each call propagates exactly one
    /// unit of adjoint from `loss`; gradients accumulate additively across
    /// repeated calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NotScalar {
                op: "backward",
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Vec<f64>> = self.nodes[..n]
            .iter()
            .map(|nd| vec![0.0; nd.data.len()])
            .collect();
        adj[loss.0][0] = 1.0;
        for idx in (0..n).rev() {
            let nd = &self.nodes[idx];
            match nd.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let g = std::mem::take(&mut adj[idx]);
                    accum_broadcast(&mut adj[a], &g);
                    accum_broadcast(&mut adj[b], &g);
                    adj[idx] = g;
                }
                Op::Sub(a, b) => {
                    let g = std::mem::take(&mut adj[idx]);
                    accum_broadcast(&mut adj[a], &g);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    accum_broadcast(&mut adj[b], &neg);
                    adj[idx] = g;
                }
                Op::Mul(a, b) => {
                    let g = std::mem::take(&mut adj[idx]);
                    let prod_b = broadcast_mul(&g, &self.nodes[b].data);
                    accum_broadcast(&mut adj[a], &prod_b);
                    let prod_a = broadcast_mul(&g, &self.nodes[a].data);
                    accum_broadcast(&mut adj[b], &prod_a);
                    adj[idx] = g;
                }
                Op::MulScalar(a, k) => {
                    let g = std::mem::take(&mut adj[idx]);
                    for (ga, gi) in adj[a].iter_mut().zip(&g) {
                        *ga += gi * k;
                    }
                    adj[idx] = g;
                }
                Op::Sigmoid(a) => {
                    let g = std::mem::take(&mut adj[idx]);
                    let y = &self.nodes[idx].data;
                    for i in 0..g.len() {
                        adj[a][i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                    adj[idx] = g;
                }
                Op::Tanh(a) => {
                    let g = std::mem::take(&mut adj[idx]);
                    let y = &self.nodes[idx].data;
                    for i in 0..g.len() {
                        adj[a][i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                    adj[idx] = g;
                }
                Op::Square(a) => {
                    let g = std::mem::take(&mut adj[idx]);
                    let x = &self.nodes[a].data;
                    for i in 0..g.len() {
                        adj[a][i] += g[i] * 2.0 * x[i];
                    }
                    adj[idx] = g;
                }
                Op::Matmul(a, b) => {
                    let g = std::mem::take(&mut adj[idx]);
                    let (r, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let c = self.nodes[b].shape[1];
                    // dA += dC · Bᵀ ; dB += Aᵀ · dC
                    mm_nt(&g, &self.nodes[b].data, &mut adj[a], r, c, k);
                    mm_tn(&self.nodes[a].data, &g, &mut adj[b], r, k, c);
                    adj[idx] = g;
                }
                Op::MatmulNt(a, b) => {
                    let g = std::mem::take(&mut adj[idx]);
                    let (r, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let c = self.nodes[b].shape[0];
                    // C = A·Bᵀ: dA += dC · B ; dB += dCᵀ · A
                    mm(&g, &self.nodes[b].data, &mut adj[a], r, c, k);
                    mm_tn(&g, &self.nodes[a].data, &mut adj[b], r, c, k);
                    adj[idx] = g;
                }
                Op::Rows(src, ref indices) => {
                    let g = std::mem::take(&mut adj[idx]);
                    let c = self.nodes[src].shape[1];
                    for (pos, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            adj[src][i * c + j] += g[pos * c + j];
                        }
                    }
                    adj[idx] = g;
                }
                Op::ConcatCols(a, b) => {
                    let g = std::mem::take(&mut adj[idx]);
                    let (r, c1) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let c2 = self.nodes[b].shape[1];
                    let c = c1 + c2;
                    for i in 0..r {
                        for j in 0..c1 {
                            adj[a][i * c1 + j] += g[i * c + j];
                        }
                        for j in 0..c2 {
                            adj[b][i * c2 + j] += g[i * c + c1 + j];
                        }
                    }
                    adj[idx] = g;
                }
                Op::SliceCols(src, start, len) => {
                    let g = std::mem::take(&mut adj[idx]);
                    let (r, c) = (self.nodes[src].shape[0], self.nodes[src].shape[1]);
                    for i in 0..r {
                        for j in 0..len {
                            adj[src][i * c + start + j] += g[i * len + j];
                        }
                    }
                    adj[idx] = g;
                }
                Op::AddRow(a, row) => {
                    let g = std::mem::take(&mut adj[idx]);
                    let (r, c) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    for i in 0..g.len() {
                        adj[a][i] += g[i];
                    }
                    for i in 0..r {
                        for j in 0..c {
                            adj[row][j] += g[i * c + j];
                        }
                    }
                    adj[idx] = g;
                }
                Op::Sum(a) => {
                    let g = adj[idx][0];
                    for ga in adj[a].iter_mut() {
                        *ga += g;
                    }
                }
                Op::CrossEntropy(logits, ref targets) => {
                    let g = adj[idx][0];
                    let m = self.nodes[logits].shape[1];
                    let saved = &self.nodes[idx].saved;
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..m {
                            let ind = if j == t { 1.0 } else { 0.0 };
                            adj[logits][i * m + j] += g * (saved[i * m + j] - ind);
                        }
                    }
                }
            }
        }
        for (nd, a) in self.nodes[..n].iter_mut().zip(adj) {
            for (pg, ag) in nd.grad.iter_mut().zip(a) {
                *pg += ag;
            }
        }
        Ok(())
    }

    fn binary_pointwise(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (la, lb) = (self.nodes[a.0].data.len(), self.nodes[b.0].data.len());
        let (shape, data) = if la == lb && self.nodes[a.0].shape == self.nodes[b.0].shape {
            let data = self.nodes[a.0]
                .data
                .iter()
                .zip(&self.nodes[b.0].data)
                .map(|(&x, &y)| f(x, y))
                .collect();
            (self.nodes[a.0].shape.clone(), data)
        } else if lb == 1 {
            let y = self.nodes[b.0].data[0];
            let data = self.nodes[a.0].data.iter().map(|&x| f(x, y)).collect();
            (self.nodes[a.0].shape.clone(), data)
        } else if la == 1 {
            let x = self.nodes[a.0].data[0];
            let data = self.nodes[b.0].data.iter().map(|&y| f(x, y)).collect();
            (self.nodes[b.0].shape.clone(), data)
        } else {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        };
        self.push(shape, data, op)
    }

}

/// Accumulate `g` into an adjoint buffer, reducing to a scalar if that
/// side was broadcast.
fn accum_broadcast(dst: &mut [f64], g: &[f64]) {
    if dst.len() == g.len() {
        for (ga, gi) in dst.iter_mut().zip(g) {
            *ga += gi;
        }
    } else {
        debug_assert_eq!(dst.len(), 1);
        dst[0] += g.iter().sum::<f64>();
    }
}

/// Pointwise g * other, broadcasting the scalar side.
fn broadcast_mul(g: &[f64], other: &[f64]) -> Vec<f64> {
    if other.len() == g.len() {
        g.iter().zip(other).map(|(x, y)| x * y).collect()
    } else if other.len() == 1 {
        g.iter().map(|x| x * other[0]).collect()
    } else {
        debug_assert_eq!(g.len(), 1);
        other.iter().map(|y| g[0] * y).collect()
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::MulScalar(..) => "mul_scalar",
        Op::Sigmoid(..) => "sigmoid",
        Op::Tanh(..) => "tanh",
        Op::Square(..) => "square",
        Op::Matmul(..) => "matmul",
        Op::MatmulNt(..) => "matmul_nt",
        Op::Rows(..) => "rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols(..) => "slice_cols",
        Op::AddRow(..) => "add_row",
        Op::Sum(..) => "sum",
        Op::CrossEntropy(..) => "cross_entropy",
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// out += a(r,k) · b(k,c)
fn mm(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * c..(kk + 1) * c];
            for j in 0..c {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out += a(r,k) · b(c,k)ᵀ
fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..c {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            out[i * c + j] += acc;
        }
    }
}

/// out += a(r,k)ᵀ · b(r,c), out is (k,c)
fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let brow = &b[i * c..(i + 1) * c];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * c..(kk + 1) * c];
            for j in 0..c {
                orow[j] += av * brow[j];
            }
        }
    }
}
