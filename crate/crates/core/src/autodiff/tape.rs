use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Detach,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    LogSumExpRows(Var),
    CrossEntropy(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    GatherElements(Var, Vec<(usize, usize)>),
    ScatterWeightedRows {
        src: Var,
        weights: Var,
        rows: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order because
/// every op can only reference vars that already exist. [`Tape::backward`]
/// walks that order in reverse exactly once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. The data buffer is shared with `t`, not copied.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs_grad = t.is_requires_grad();
        self.push(t.share_data(), Op::Leaf, needs_grad)
    }

    /// Records a constant (never receives gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf created with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Moves the accumulated gradient of a leaf out of the tape.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.take_grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<[usize; 2]> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(sa)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let [r, c] = self.shape(a);
        let out: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(Tensor::from_vec(r, c, out).unwrap(), op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ([m, k], [k2, n]) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: [m, k],
                right: [k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_vec(m, n, out)?, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let [r, c] = self.same_shape("add", a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_vec(r, c, out)?, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let [r, c] = self.same_shape("sub", a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_vec(r, c, out)?, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [r, c] = self.same_shape("mul", a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_vec(r, c, out)?, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    /// `a[m×n] + b[1×n]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let ([m, n], sb) = (self.shape(a), self.shape(b));
        if sb != [1, n] {
            return Err(Error::Dimension {
                op: "add_row",
                left: [m, n],
                right: sb,
            });
        }
        let bias = self.data(b);
        let out = self
            .data(a)
            .chunks_exact(n.max(1))
            .flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_vec(m, n, out)?, Op::AddRow(a, b), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), kernels::sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let [r, c] = self.shape(a);
        if c == 0 {
            return Err(Error::Contract("softmax over an empty last dimension".into()));
        }
        let mut out = self.data(a).to_vec();
        for row in out.chunks_exact_mut(c) {
            kernels::softmax_in_place(row);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_vec(r, c, out)?, Op::SoftmaxRows(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = kernels::sum(self.data(a));
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = kernels::sum(d) / d.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Column means: `[m×n] -> [1×n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let [m, n] = self.shape(a);
        if m == 0 {
            return Err(Error::EmptyBatch("mean_rows"));
        }
        let mut out = vec![0.0; n];
        for row in self.data(a).chunks_exact(n.max(1)) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let ng = self.ng(a);
        Ok(self.push(Tensor::row(out), Op::MeanRows(a), ng))
    }

    /// Per-row log-sum-exp: `[m×n] -> [m×1]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let [m, n] = self.shape(a);
        if n == 0 {
            return Err(Error::Contract("logsumexp over an empty row".into()));
        }
        let out = self.data(a).chunks_exact(n).map(kernels::logsumexp).collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_vec(m, 1, out)?, Op::LogSumExpRows(a), ng))
    }

    /// Mean token negative log-likelihood of `targets` under `logits[T×V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let [t, v] = self.shape(logits);
        if targets.len() != t {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: [t, v],
                right: [targets.len(), 1],
            });
        }
        if t == 0 {
            return Err(Error::EmptyBatch("cross_entropy"));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                bound: v,
            });
        }
        let d = self.data(logits);
        let total: f64 = d
            .chunks_exact(v)
            .zip(targets)
            .map(|(row, &y)| kernels::logsumexp(row) - row[y])
            .sum();
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(total / t as f64),
            Op::CrossEntropy(logits, targets.to_vec()),
            ng,
        ))
    }

    /// `out[k] = table[idx[k]]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let [m, n] = self.shape(table);
        let d = self.data(table);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    bound: m,
                });
            }
            out.extend_from_slice(&d[i * n..(i + 1) * n]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::from_vec(idx.len(), n, out)?,
            Op::GatherRows(table, idx.to_vec()),
            ng,
        ))
    }

    /// Picks single elements `src[r][c]` into an `[len×1]` column.
    pub fn gather_elements(&mut self, src: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let [m, n] = self.shape(src);
        let d = self.data(src);
        let mut out = Vec::with_capacity(idx.len());
        for &(r, c) in idx {
            if r >= m || c >= n {
                return Err(Error::Index {
                    op: "gather_elements",
                    index: r * n + c,
                    bound: m * n,
                });
            }
            out.push(d[r * n + c]);
        }
        let ng = self.ng(src);
        Ok(self.push(
            Tensor::from_vec(idx.len(), 1, out)?,
            Op::GatherElements(src, idx.to_vec()),
            ng,
        ))
    }

    /// `out[rows[k]] += weights[k] * src[k]` into a zero `[out_rows×h]` tensor.
    pub fn scatter_weighted_rows(
        &mut self,
        src: Var,
        weights: Var,
        rows: &[usize],
        out_rows: usize,
    ) -> Result<Var> {
        let [r, h] = self.shape(src);
        if self.shape(weights) != [r, 1] || rows.len() != r {
            return Err(Error::Dimension {
                op: "scatter_weighted_rows",
                left: [r, h],
                right: self.shape(weights),
            });
        }
        let mut out = vec![0.0; out_rows * h];
        let (s, w) = (self.data(src), self.data(weights));
        for (k, &dst) in rows.iter().enumerate() {
            if dst >= out_rows {
                return Err(Error::Index {
                    op: "scatter_weighted_rows",
                    index: dst,
                    bound: out_rows,
                });
            }
            let o = &mut out[dst * h..(dst + 1) * h];
            o.iter_mut()
                .zip(&s[k * h..(k + 1) * h])
                .for_each(|(o, x)| *o += w[k] * x);
        }
        let ng = self.ng(src) || self.ng(weights);
        Ok(self.push(
            Tensor::from_vec(out_rows, h, out)?,
            Op::ScatterWeightedRows {
                src,
                weights,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Same value, no gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.share_data().requires_grad(false);
        self.push(v, Op::Detach, false)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients of leaves accumulate across calls; intermediate gradients are
    /// scratch and discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                let ([m, k], [_, n]) = (self.shape(*a), self.shape(*b));
                if self.ng(*a) {
                    let ga = slot(grads, *a, m * k);
                    kernels::gemm_acc(m, n, k, g, false, self.data(*b), true, ga);
                }
                if self.ng(*b) {
                    let gb = slot(grads, *b, k * n);
                    kernels::gemm_acc(k, m, n, self.data(*a), true, g, false, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        axpy(slot(grads, v, g.len()), g, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    axpy(slot(grads, *a, g.len()), g, 1.0);
                }
                if self.ng(*b) {
                    axpy(slot(grads, *b, g.len()), g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if self.ng(*a) {
                    let ga = slot(grads, *a, g.len());
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(db) {
                        *o += gi * bi;
                    }
                }
                if self.ng(*b) {
                    let gb = slot(grads, *b, g.len());
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(da) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(a, s) => axpy(slot(grads, *a, g.len()), g, *s),
            Op::AddRow(a, b) => {
                if self.ng(*a) {
                    axpy(slot(grads, *a, g.len()), g, 1.0);
                }
                if self.ng(*b) {
                    let n = self.shape(*b)[1];
                    let gb = slot(grads, *b, n);
                    for row in g.chunks_exact(n.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                let ga = slot(grads, *a, g.len());
                for ((o, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                    if *xi > 0.0 {
                        *o += gi;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let ga = slot(grads, *a, g.len());
                for ((o, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                    *o += gi * yi * (1.0 - yi);
                }
            }
            Op::Log(a) => {
                let x = self.data(*a);
                let ga = slot(grads, *a, g.len());
                for ((o, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                    *o += gi / xi;
                }
            }
            Op::SoftmaxRows(a) => {
                let n = node.value.cols();
                let ga = slot(grads, *a, g.len());
                for ((orow, grow), yrow) in ga
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(y.chunks_exact(n))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((o, gi), yi) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o += yi * (gi - dot);
                    }
                }
            }
            Op::Sum(a) => {
                let len = self.nodes[a.0].value.len();
                slot(grads, *a, len).iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Mean(a) => {
                let len = self.nodes[a.0].value.len();
                let s = g[0] / len as f64;
                slot(grads, *a, len).iter_mut().for_each(|o| *o += s);
            }
            Op::MeanRows(a) => {
                let [m, n] = self.shape(*a);
                let ga = slot(grads, *a, m * n);
                for row in ga.chunks_exact_mut(n.max(1)) {
                    row.iter_mut().zip(g).for_each(|(o, gi)| *o += gi / m as f64);
                }
            }
            Op::LogSumExpRows(a) => {
                let [m, n] = self.shape(*a);
                let x = self.data(*a);
                let ga = slot(grads, *a, m * n);
                for (r, (orow, xrow)) in ga.chunks_exact_mut(n).zip(x.chunks_exact(n)).enumerate() {
                    for (o, xi) in orow.iter_mut().zip(xrow) {
                        *o += g[r] * (xi - y[r]).exp();
                    }
                }
            }
            Op::CrossEntropy(a, targets) => {
                let [t, v] = self.shape(*a);
                let x = self.data(*a);
                let scale = g[0] / t as f64;
                let ga = slot(grads, *a, t * v);
                let mut p = vec![0.0; v];
                for ((orow, xrow), &yt) in ga.chunks_exact_mut(v).zip(x.chunks_exact(v)).zip(targets) {
                    p.copy_from_slice(xrow);
                    kernels::softmax_in_place(&mut p);
                    p[yt] -= 1.0;
                    orow.iter_mut().zip(&p).for_each(|(o, pi)| *o += scale * pi);
                }
            }
            Op::GatherRows(table, idx) => {
                let [m, n] = self.shape(*table);
                let gt = slot(grads, *table, m * n);
                for (k, &r) in idx.iter().enumerate() {
                    gt[r * n..(r + 1) * n]
                        .iter_mut()
                        .zip(&g[k * n..(k + 1) * n])
                        .for_each(|(o, x)| *o += x);
                }
            }
            Op::GatherElements(src, idx) => {
                let [m, n] = self.shape(*src);
                let gs = slot(grads, *src, m * n);
                for (k, &(r, c)) in idx.iter().enumerate() {
                    gs[r * n + c] += g[k];
                }
            }
            Op::ScatterWeightedRows { src, weights, rows } => {
                let [r, h] = self.shape(*src);
                let (s, w) = (self.data(*src), self.data(*weights));
                if self.ng(*src) {
                    let gs = slot(grads, *src, r * h);
                    for (k, &dst) in rows.iter().enumerate() {
                        let grow = &g[dst * h..(dst + 1) * h];
                        gs[k * h..(k + 1) * h]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(o, x)| *o += w[k] * x);
                    }
                }
                if self.ng(*weights) {
                    let gw = slot(grads, *weights, r);
                    for (k, &dst) in rows.iter().enumerate() {
                        let grow = &g[dst * h..(dst + 1) * h];
                        gw[k] += grow
                            .iter()
                            .zip(&s[k * h..(k + 1) * h])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += a * s);
}
