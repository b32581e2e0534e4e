use super::tensor::{gemm, softmax_in_place, Layout, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Concat(Var, Var),
    Sum(Var),
    /// Saves the softmax output.
    Softmax { input: Var, tau: f64 },
    /// Saves the row softmax of the logits.
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    /// Forward value is a hard one-hot; `soft` holds the temperature softmax
    /// used for the backward pass.
    StraightThrough { scores: Var, tau: f64, soft: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Define-by-run reverse-mode tape. Nodes are appended in evaluation order,
/// which is a topological order, and [`Tape::backward`] walks them in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, if `v` requires one and `backward` has run.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::MatMul(a, b)))
    }

    /// `x + bias` with a `1 × n` bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_row(self.value(bias))?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, rg, Op::AddBias(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).scale(factor);
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).relu();
        let rg = self.rg(&[x]);
        self.push(out, rg, Op::Relu(x))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).concat_cols(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Concat(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::filled(1, 1, s), rg, Op::Sum(x))
    }

    /// Row-wise `softmax(x / tau)`.
    pub fn softmax_row(&mut self, x: Var, tau: f64) -> Result<Var> {
        let out = self.value(x).softmax_rows(tau)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Softmax { input: x, tau }))
    }

    /// Mean over rows of `-ln softmax(logits)[label]`, in nats.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        let (m, c) = (l.rows(), l.cols());
        if labels.len() != m {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: l.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::LabelOutOfRange { label: bad, classes: c });
        }
        let mut probs = l.data().to_vec();
        let mut total = 0.0;
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
            softmax_in_place(row, 1.0);
        }
        let loss = if m == 0 { 0.0 } else { total / m as f64 };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::filled(1, 1, loss),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Hard argmax one-hot per row in the forward pass; the backward pass
    /// treats the output as `softmax(scores / tau)`.
    ///
    /// `mask[i * cols + j] == true` excludes entry `j` of row `i` from the
    /// argmax and gives it zero surrogate probability. The lowest index wins
    /// ties.
    pub fn straight_through(&mut self, scores: Var, tau: f64, mask: Option<&[bool]>) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::NonPositiveTemperature(tau));
        }
        let s = self.value(scores);
        let (m, c) = (s.rows(), s.cols());
        if let Some(mask) = mask {
            if mask.len() != m * c {
                return Err(Error::ShapeMismatch {
                    op: "straight_through",
                    lhs: s.shape().to_vec(),
                    rhs: vec![mask.len()],
                });
            }
        }
        let mut soft = s.data().to_vec();
        let mut hard = vec![0.0; m * c];
        for i in 0..m {
            let row = &mut soft[i * c..(i + 1) * c];
            if let Some(mask) = mask {
                for (v, &masked) in row.iter_mut().zip(&mask[i * c..(i + 1) * c]) {
                    if masked {
                        *v = f64::NEG_INFINITY;
                    }
                }
            }
            let mut best: Option<usize> = None;
            for (j, &v) in row.iter().enumerate() {
                if v == f64::NEG_INFINITY {
                    continue;
                }
                if best.is_none_or(|b| v > row[b]) {
                    best = Some(j);
                }
            }
            let best = best.ok_or(Error::AllQueriesMasked)?;
            hard[i * c + best] = 1.0;
            softmax_in_place(row, tau);
        }
        let rg = self.rg(&[scores]);
        let out = Tensor::matrix(m, c, hard)?;
        Ok(self.push(out, rg, Op::StraightThrough { scores, tau, soft }))
    }

    /// Reverse pass from a scalar `loss`. Gradients are added to whatever the
    /// nodes already hold, so calling twice without [`Tape::zero_grad`]
    /// accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut adj);
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, contrib: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.requires_grad(*a) {
                    let mut da = Tensor::zeros(m, k);
                    gemm(m, n, k, g.data(), Layout::Normal, bv.data(), Layout::Transposed, da.data_mut(), 0.0);
                    send(*a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = Tensor::zeros(k, n);
                    gemm(k, m, n, av.data(), Layout::Transposed, g.data(), Layout::Normal, db.data_mut(), 0.0);
                    send(*b, db);
                }
            }
            Op::AddBias(x, bias) => {
                send(*x, g.clone());
                let n = g.cols();
                let mut db = Tensor::zeros(1, n);
                for row in g.data().chunks(n) {
                    for (d, v) in db.data_mut().iter_mut().zip(row) {
                        *d += v;
                    }
                }
                send(*bias, db);
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    send(*a, g.mul(self.value(*b)).expect("shape checked in forward"));
                }
                if self.requires_grad(*b) {
                    send(*b, g.mul(self.value(*a)).expect("shape checked in forward"));
                }
            }
            Op::Scale(x, f) => send(*x, g.scale(*f)),
            Op::Relu(x) => {
                let mut d = g.clone();
                for (d, &v) in d.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                send(*x, d);
            }
            Op::Concat(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let m = g.rows();
                let mut da = Tensor::zeros(m, ca);
                let mut db = Tensor::zeros(m, cb);
                for i in 0..m {
                    let row = g.row(i);
                    da.row_mut(i).copy_from_slice(&row[..ca]);
                    db.row_mut(i).copy_from_slice(&row[ca..]);
                }
                send(*a, da);
                send(*b, db);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                let mut d = Tensor::zeros_like(xv);
                d.data_mut().fill(g.item());
                send(*x, d);
            }
            Op::Softmax { input, tau } => {
                let d = softmax_vjp(node.value.data(), g, *tau);
                send(*input, d);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let lv = self.value(*logits);
                let (m, c) = (lv.rows(), lv.cols());
                let scale = g.item() / m as f64;
                let mut d = Tensor::matrix(m, c, probs.clone()).expect("shape from logits");
                for (i, &y) in labels.iter().enumerate() {
                    d.row_mut(i)[y] -= 1.0;
                }
                for v in d.data_mut() {
                    *v *= scale;
                }
                send(*logits, d);
            }
            Op::StraightThrough { scores, tau, soft } => {
                let d = softmax_vjp(soft, g, *tau);
                send(*scores, d);
            }
        }
    }
}

/// Vector-Jacobian product of row-wise `softmax(x / tau)` given its output.
fn softmax_vjp(soft: &[f64], g: &Tensor, tau: f64) -> Tensor {
    let c = g.cols();
    let mut d = Tensor::zeros_like(g);
    for ((drow, grow), srow) in d.data_mut().chunks_mut(c).zip(g.data().chunks(c)).zip(soft.chunks(c)) {
        let dot: f64 = grow.iter().zip(srow).map(|(a, b)| a * b).sum();
        for ((dv, &gv), &sv) in drow.iter_mut().zip(grow).zip(srow) {
            *dv = sv * (gv - dot) / tau;
        }
    }
    d
}
