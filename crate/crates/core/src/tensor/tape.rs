use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{kernels, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub causal: bool,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    SoftmaxRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SmoothedCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<usize>,
        include: Vec<bool>,
        epsilon: T,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and a single reverse sweep visits each node once.
pub struct GradTape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.rank() != 2 {
            return Err(Error::shape(
                op,
                format!("expected a matrix, got {:?}", t.shape()),
            ));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("[{m}x{k}] x [{n}x{k2}]^T"),
            ));
        }
        let out = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(
            "matmul_nt",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMulNt(a, b),
            &[a, b],
        )
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |p, q| p + q);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |p, q| p - q);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |p, q| p * q);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a bias vector to every row (trailing-axis broadcast only).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(bias).numel() != d {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for rows of width {d}", self.value(bias).shape()),
            ));
        }
        let mut out = self.value(x).clone();
        kernels::add_bias_in_place(out.data_mut(), self.value(bias).data());
        self.push("add_bias", out, Op::AddBias(x, bias), &[x, bias])
    }

    /// `x * w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::from_parts(
            t.shape().to_vec(),
            t.data().iter().map(|&v| v * factor).collect(),
        );
        self.push("scale", out, Op::Scale(x, factor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, T::ONE / T::from_usize(n))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::from_parts(
            t.shape().to_vec(),
            t.data().iter().map(|&v| kernels::gelu(v)).collect(),
        );
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::from_parts(
            t.shape().to_vec(),
            t.data().iter().map(|&v| v.tanh()).collect(),
        );
        self.push("tanh", out, Op::Tanh(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, epsilon: T) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape(
                "layer_norm",
                format!("gain/bias must have {d} entries"),
            ));
        }
        let (out, xhat, rstd) = kernels::layer_norm(
            self.value(x).data(),
            d,
            self.value(gain).data(),
            self.value(bias).data(),
            epsilon,
        );
        let shape = self.value(x).shape().to_vec();
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Inverted dropout with a mask drawn from `seed`. A zero rate is the identity.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::config(format!(
                "dropout rate {rate} must be below 1"
            )));
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = self.value(x);
        let mask: Vec<T> = (0..t.numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::ZERO
                } else {
                    keep
                }
            })
            .collect();
        let out = Tensor::from_parts(
            t.shape().to_vec(),
            t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        );
        self.push("dropout", out, Op::Dropout { x, mask }, &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let d = out.cols();
        for row in out.data_mut().chunks_mut(d) {
            kernels::softmax_in_place(row);
        }
        self.push("softmax", out, Op::SoftmaxRows(x), &[x])
    }

    /// Multi-head attention of `q` (`t x d`) over `k`, `v` (`s x d`).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (t, d) = self.dims2(q, "attention")?;
        let (s, dk) = self.dims2(k, "attention")?;
        if dk != d || self.value(v).shape() != self.value(k).shape() {
            return Err(Error::shape("attention", "query/key/value widths differ"));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("{d} features over {} heads", spec.heads),
            ));
        }
        let (out, probs) = kernels::attention(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            t,
            s,
            d,
            spec.heads,
            spec.causal,
        );
        self.push(
            "attention",
            Tensor::from_parts(vec![t, d], out),
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Selects rows of `table` by index.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims2(table, "gather")?;
        if ids.is_empty() {
            return Err(Error::shape("gather", "no rows requested"));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= rows {
                return Err(Error::shape("gather", format!("row {i} of {rows}")));
            }
            out.extend_from_slice(t.row(i));
        }
        self.push(
            "gather",
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Mean over included rows of `-sum_v q_v log softmax(logits)_v`, with
    /// `q = (1 - epsilon) one_hot(target) + epsilon / V`.
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        include: &[bool],
        epsilon: T,
    ) -> Result<Var> {
        let (rows, vocab) = self.dims2(logits, "smoothed_cross_entropy")?;
        if targets.len() != rows || include.len() != rows {
            return Err(Error::shape(
                "smoothed_cross_entropy",
                format!(
                    "{rows} rows but {} targets / {} mask entries",
                    targets.len(),
                    include.len()
                ),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::shape(
                "smoothed_cross_entropy",
                format!("target {bad} >= vocab {vocab}"),
            ));
        }
        let count = include.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::contract("every position of the loss is masked"));
        }
        let x = self.value(logits).data();
        let uniform = epsilon / T::from_usize(vocab);
        let on = T::ONE - epsilon;
        let mut probs = vec![T::ZERO; rows * vocab];
        let mut total = T::ZERO;
        for r in 0..rows {
            let row = &x[r * vocab..(r + 1) * vocab];
            let logp = kernels::log_softmax(row);
            for (p, &lp) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(&logp) {
                *p = lp.exp();
            }
            if include[r] {
                let mut loss = T::ZERO;
                for (v, &lp) in logp.iter().enumerate() {
                    let q = if v == targets[r] {
                        on + uniform
                    } else {
                        uniform
                    };
                    loss -= q * lp;
                }
                total += loss;
            }
        }
        let value = total / T::from_usize(count);
        self.push(
            "smoothed_cross_entropy",
            Tensor::scalar(value),
            Op::SmoothedCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                include: include.to_vec(),
                epsilon,
                count,
            },
            &[logits],
        )
    }

    /// Accumulates gradients of the scalar `loss` into every leaf that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if matches!(n.op, Op::Leaf) && n.requires_grad {
                    grads[i].take()
                } else {
                    None
                }
            })
            .collect();
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients {
            grads: leaves,
            shapes,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![T::ZERO; n])
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    let ga = self.slot(grads, *a);
                    kernels::matmul_nt_acc(g, bv, m, n, k, ga);
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    let gb = self.slot(grads, *b);
                    kernels::matmul_tn_acc(av, g, m, k, n, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                // c = a b^T, a: m x k, b: n x k
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[0];
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    let ga = self.slot(grads, *a);
                    kernels::matmul_acc(g, bv, m, n, k, ga);
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    let gb = self.slot(grads, *b);
                    kernels::matmul_tn_acc(g, av, m, n, k, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        for (o, &x) in self.slot(grads, v).iter_mut().zip(g) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    for (o, &x) in self.slot(grads, *a).iter_mut().zip(g) {
                        *o += x;
                    }
                }
                if self.wants(*b) {
                    for (o, &x) in self.slot(grads, *b).iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    for ((o, &x), &y) in self.slot(grads, *a).iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    for ((o, &x), &y) in self.slot(grads, *b).iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(*x) {
                    for (o, &v) in self.slot(grads, *x).iter_mut().zip(g) {
                        *o += v;
                    }
                }
                if self.wants(*bias) {
                    let gb = self.slot(grads, *bias);
                    let d = gb.len();
                    for row in g.chunks(d) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Scale(x, f) => {
                if self.wants(*x) {
                    for (o, &v) in self.slot(grads, *x).iter_mut().zip(g) {
                        *o += v * *f;
                    }
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    for o in self.slot(grads, *x).iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    for ((o, &v), &gi) in self.slot(grads, *x).iter_mut().zip(xv).zip(g) {
                        *o += gi * kernels::gelu_grad(v);
                    }
                }
            }
            Op::Tanh(x) => {
                if self.wants(*x) {
                    let yv = node.value.data();
                    for ((o, &y), &gi) in self.slot(grads, *x).iter_mut().zip(yv).zip(g) {
                        *o += gi * (T::ONE - y * y);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*x).cols();
                let gv = self.value(*gain).data().to_vec();
                let mut dx = self.wants(*x).then(|| vec![T::ZERO; xhat.len()]);
                let mut dg = self.wants(*gain).then(|| vec![T::ZERO; d]);
                let mut db = self.wants(*bias).then(|| vec![T::ZERO; d]);
                kernels::layer_norm_backward(
                    g,
                    xhat,
                    rstd,
                    &gv,
                    d,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, acc) in [(*x, dx), (*gain, dg), (*bias, db)] {
                    if let Some(acc) = acc {
                        for (o, a) in self.slot(grads, v).iter_mut().zip(acc) {
                            *o += a;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if self.wants(*x) {
                    for ((o, &m), &gi) in self.slot(grads, *x).iter_mut().zip(mask).zip(g) {
                        *o += gi * m;
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if self.wants(*x) {
                    let y = &node.value;
                    let d = y.cols();
                    let gx = self.slot(grads, *x);
                    for ((yr, gr), or) in y.data().chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d))
                    {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => {
                let (t, d) = (self.value(*q).shape()[0], self.value(*q).shape()[1]);
                let s = self.value(*k).shape()[0];
                let mut dq = self.wants(*q).then(|| vec![T::ZERO; t * d]);
                let mut dk = self.wants(*k).then(|| vec![T::ZERO; s * d]);
                let mut dv = self.wants(*v).then(|| vec![T::ZERO; s * d]);
                kernels::attention_backward(
                    g,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    t,
                    s,
                    d,
                    spec.heads,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                for (var, acc) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(acc) = acc {
                        for (o, a) in self.slot(grads, var).iter_mut().zip(acc) {
                            *o += a;
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let d = self.value(*table).cols();
                    let gt = self.slot(grads, *table);
                    for (r, &i) in ids.iter().enumerate() {
                        for (o, &v) in gt[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                        {
                            *o += v;
                        }
                    }
                }
            }
            Op::SmoothedCrossEntropy {
                logits,
                probs,
                targets,
                include,
                epsilon,
                count,
            } => {
                if self.wants(*logits) {
                    let vocab = self.value(*logits).cols();
                    let uniform = *epsilon / T::from_usize(vocab);
                    let on = T::ONE - *epsilon;
                    let scale = g[0] / T::from_usize(*count);
                    let gl = self.slot(grads, *logits);
                    for r in 0..targets.len() {
                        if !include[r] {
                            continue;
                        }
                        for v in 0..vocab {
                            let q = if v == targets[r] {
                                on + uniform
                            } else {
                                uniform
                            };
                            gl[r * vocab + v] += scale * (probs[r * vocab + v] - q);
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of one backward sweep, keyed by leaf.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`; exactly zero when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g.clone()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Moves the gradient of `v` out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Vec<T> {
        let n: usize = self.shapes[v.0].iter().product();
        self.grads[v.0].take().unwrap_or_else(|| vec![T::ZERO; n])
    }

    pub fn touched(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_gradient;

    fn t64(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).data(), &[6.0]);
    }

    #[test]
    fn unused_leaf_gets_exact_zero() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let z = tape.leaf(Tensor::filled(&[2, 2], 1.5), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(!g.touched(z));
        assert_eq!(g.get(z).data(), &[0.0; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        let y = tape.gelu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(f64::MAX), true);
        assert!(matches!(tape.add(x, x), Err(Error::NonFinite { .. })));
    }

    /// Rebuilds `f` on a fresh tape for each coordinate perturbation and
    /// compares the tape gradient of every input with central differences.
    fn check(shapes: &[&[usize]], build: impl Fn(&mut GradTape<f64>, &[Var]) -> Var) {
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| t64(s, 11 + i as u64))
            .collect();
        let mut tape = GradTape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        for (which, input) in inputs.iter().enumerate() {
            let f = |theta: &[f64]| {
                let mut tape = GradTape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        if i == which {
                            tape.leaf(
                                Tensor::new(t.shape().to_vec(), theta.to_vec()).unwrap(),
                                true,
                            )
                        } else {
                            tape.leaf(t.clone(), true)
                        }
                    })
                    .collect();
                let out = build(&mut tape, &vars);
                tape.value(out).data()[0]
            };
            let fd = finite_difference_gradient(f, input.data(), 1e-5).unwrap();
            let an = grads.get(vars[which]);
            let num: f64 = fd
                .iter()
                .zip(an.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let den = fd
                .iter()
                .map(|a| a * a)
                .sum::<f64>()
                .sqrt()
                .max(an.sq_norm().sqrt())
                .max(1e-12);
            assert!(
                num / den < 1e-6,
                "input {which}: relative error {}",
                num / den
            );
        }
    }

    #[test]
    fn matmul_gradients() {
        check(&[&[3, 4], &[4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            let y = t.tanh(y).unwrap();
            t.sum(y).unwrap()
        });
        check(&[&[3, 4], &[5, 4]], |t, v| {
            let y = t.matmul_nt(v[0], v[1]).unwrap();
            let y = t.tanh(y).unwrap();
            t.sum(y).unwrap()
        });
    }

    #[test]
    fn elementwise_gradients() {
        check(&[&[2, 3], &[2, 3], &[3]], |t, v| {
            let a = t.mul(v[0], v[1]).unwrap();
            let b = t.sub(a, v[1]).unwrap();
            let c = t.add_bias(b, v[2]).unwrap();
            let d = t.gelu(c).unwrap();
            let e = t.scale(d, 0.7).unwrap();
            let e = t.mul(e, e).unwrap();
            t.mean(e).unwrap()
        });
    }

    #[test]
    fn layer_norm_gradients() {
        check(&[&[3, 5], &[5], &[5], &[3, 5]], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            let y = t.mul(y, v[3]).unwrap();
            t.sum(y).unwrap()
        });
    }

    #[test]
    fn softmax_gradients() {
        check(&[&[3, 4], &[3, 4]], |t, v| {
            let y = t.softmax_rows(v[0]).unwrap();
            let y = t.mul(y, v[1]).unwrap();
            t.sum(y).unwrap()
        });
    }

    #[test]
    fn attention_gradients() {
        for causal in [false, true] {
            check(&[&[3, 4], &[3, 4], &[3, 4], &[3, 4]], |t, v| {
                let y = t
                    .attention(v[0], v[1], v[2], AttentionSpec { heads: 2, causal })
                    .unwrap();
                let y = t.mul(y, v[3]).unwrap();
                t.sum(y).unwrap()
            });
        }
        // cross attention: 2 queries over 5 keys
        check(&[&[2, 4], &[5, 4], &[5, 4], &[2, 4]], |t, v| {
            let y = t
                .attention(
                    v[0],
                    v[1],
                    v[2],
                    AttentionSpec {
                        heads: 4,
                        causal: false,
                    },
                )
                .unwrap();
            let y = t.mul(y, v[3]).unwrap();
            t.sum(y).unwrap()
        });
    }

    #[test]
    fn gather_and_cross_entropy_gradients() {
        check(&[&[6, 4], &[4, 5]], |t, v| {
            let x = t.gather(v[0], &[0, 3, 3, 5]).unwrap();
            let logits = t.matmul(x, v[1]).unwrap();
            t.smoothed_cross_entropy(logits, &[1, 0, 4, 2], &[true, false, true, true], 0.1)
                .unwrap()
        });
    }

    #[test]
    fn dropout_is_seeded_and_scaled() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::filled(&[10, 10], 1.0), true);
        let a = tape.dropout(x, 0.5, 7).unwrap();
        let b = tape.dropout(x, 0.5, 7).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        assert!(tape.value(a).data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert_eq!(tape.dropout(x, 0.0, 7).unwrap(), x);
    }

    #[test]
    fn masked_cross_entropy_needs_a_position() {
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]), true);
        let r = tape.smoothed_cross_entropy(x, &[0, 1], &[false, false], 0.1);
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
