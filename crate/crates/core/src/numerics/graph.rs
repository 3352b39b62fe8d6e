//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op appends a node
//! holding its output value; a node needs a gradient iff one of its inputs
//! does. Leaves created with `requires_grad = false` therefore cut the
//! backward pass off below them, which is how frozen layers skip gradient
//! computation entirely.

use super::tensor::{check_finite, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: Vec<f64>,
    },
    MeanPool {
        x: Var,
        group: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`, or `None` when the node
    /// was not on a gradient-requiring path.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Adds an input tensor. Its `requires_grad` flag decides whether the
    /// backward pass produces a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        let mut value = tensor;
        value.set_requires_grad(false);
        value.clear_grad();
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var]) -> Result<Var> {
        check_finite(&data, op_name(&op))?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value: Tensor::from_parts_unchecked(shape, data),
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.dims2()
    }

    fn data(&self, var: Var) -> &[f64] {
        self.nodes[var.0].value.data()
    }

    /// `a [m,k] · b [k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 || self.value(a).shape().len() != 2 || self.value(b).shape().len() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let out = matmul_nn(self.data(a), self.data(b), m, k, n);
        self.push(Op::MatMul(a, b), vec![m, n], out, &[a, b])
    }

    /// `a [m,k] · bᵀ` where `b` is `[n,k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        if k != k2 || self.value(a).shape().len() != 2 || self.value(b).shape().len() != 2 {
            return Err(Error::shape(
                "matmul_t",
                format!("{:?} x {:?}ᵀ", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let out = matmul_nt(self.data(a), self.data(b), m, k, n);
        self.push(Op::MatMulT(a, b), vec![m, n], out, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        self.push(Op::Add(a, b), shape, out, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        self.push(Op::Mul(a, b), shape, out, &[a, b])
    }

    /// Adds a length-`n` bias to every row of `x [m,n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if self.value(bias).len() != n || self.value(bias).shape().len() != 1 {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", self.value(x).shape(), self.value(bias).shape()),
            ));
        }
        let b = self.data(bias);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        let shape = self.value(x).shape().to_vec();
        debug_assert_eq!(shape.iter().product::<usize>(), m * n);
        self.push(Op::AddBias(x, bias), shape, out, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Scale(x, c), shape, out, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v.tanh()).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Tanh(x), shape, out, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Gelu(x), shape, out, &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.dims2(x);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let shape = self.value(x).shape().to_vec();
        self.push(Op::SoftmaxRows(x), shape, out, &[x])
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "{:?} with gain {:?} bias {:?}",
                    self.value(x).shape(),
                    self.value(gain).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let g = self.data(gain);
        let b = self.data(bias);
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for (r, row) in self.data(x).chunks_exact(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            shape,
            out,
            &[x, gain, bias],
        )
    }

    /// Row lookup: `table [V,d]` indexed by `ids` gives `[len(ids), d]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2(table);
        if ids.is_empty() {
            return Err(Error::shape("embed", "empty id list"));
        }
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { token: id, vocab });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            vec![ids.len(), d],
            out,
            &[table],
        )
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, c) = self.dims2(logits);
        if labels.len() != m {
            return Err(Error::shape(
                "cross_entropy",
                format!("{m} rows but {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes: c,
            });
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_exact_mut(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[label];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        loss /= m as f64;
        self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            vec![1],
            vec![loss],
            &[logits],
        )
    }

    /// Multi-head scaled dot-product self-attention without masking.
    ///
    /// `q`, `k`, `v` are `[batch*seq, d]` with rows grouped by sequence; heads
    /// split the columns into `heads` contiguous blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape) -> Result<Var> {
        let (rows, d) = self.dims2(q);
        let AttentionShape { batch, seq, heads } = shape;
        if self.dims2(k) != (rows, d)
            || self.dims2(v) != (rows, d)
            || rows != batch * seq
            || heads == 0
            || d % heads != 0
        {
            return Err(Error::shape(
                "attention",
                format!(
                    "q {:?} k {:?} v {:?} for batch {batch} seq {seq} heads {heads}",
                    self.value(q).shape(),
                    self.value(k).shape(),
                    self.value(v).shape()
                ),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + h * dh..][..dh];
                    let prow = &mut p[i * seq..(i + 1) * seq];
                    for j in 0..seq {
                        let kj = &kd[(b * seq + j) * d + h * dh..][..dh];
                        prow[j] = dot(qi, kj) * scale;
                    }
                    softmax_in_place(prow);
                    let oi = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for j in 0..seq {
                        let vj = &vd[(b * seq + j) * d + h * dh..][..dh];
                        let w = prow[j];
                        for (o, vv) in oi.iter_mut().zip(vj) {
                            *o += w * vv;
                        }
                    }
                }
            }
        }
        self.push(
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            vec![rows, d],
            out,
            &[q, k, v],
        )
    }

    /// Averages consecutive groups of `group` rows: `[g*m, d]` to `[m, d]`.
    pub fn mean_pool(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, d) = self.dims2(x);
        if group == 0 || rows % group != 0 {
            return Err(Error::shape(
                "mean_pool",
                format!("{rows} rows in groups of {group}"),
            ));
        }
        let m = rows / group;
        let xd = self.data(x);
        let mut out = vec![0.0; m * d];
        for (r, row) in xd.chunks_exact(d).enumerate() {
            let o = &mut out[(r / group) * d..][..d];
            for (oo, v) in o.iter_mut().zip(row) {
                *oo += v;
            }
        }
        let inv = 1.0 / group as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(Op::MeanPool { x, group }, vec![m, d], out, &[x])
    }

    /// Selects rows of `x [n,d]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(x);
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::shape(
                "gather_rows",
                format!("rows {rows:?} from {n}-row input"),
            ));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&xd[r * d..(r + 1) * d]);
        }
        self.push(
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            vec![rows.len(), d],
            out,
            &[x],
        )
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push(Op::Sum(x), vec![1], vec![s], &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    /// Reverse pass from the scalar `root`. Gradients accumulate over fan-out;
    /// nodes that do not need a gradient are never visited.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = self
            .nodes
            .get(root.0)
            .ok_or_else(|| Error::Graph(format!("root {} not in graph", root.0)))?;
        if !root_node.value.is_scalar() {
            return Err(Error::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if root_node.needs_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        for (g, node) in grads.iter().zip(&self.nodes) {
            if let Some(g) = g {
                check_finite(g, &format!("gradient of {}", op_name(&node.op)))?;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims2(a);
                let (_, n) = self.dims2(b);
                if self.needs_grad(a) {
                    let da = matmul_nt(gout, self.data(b), m, n, k);
                    accumulate(grads, a, da);
                }
                if self.needs_grad(b) {
                    let db = matmul_tn(self.data(a), gout, m, k, n);
                    accumulate(grads, b, db);
                }
            }
            &Op::MatMulT(a, b) => {
                let (m, k) = self.dims2(a);
                let (n, _) = self.dims2(b);
                if self.needs_grad(a) {
                    let da = matmul_nn(gout, self.data(b), m, n, k);
                    accumulate(grads, a, da);
                }
                if self.needs_grad(b) {
                    let db = matmul_tn(gout, self.data(a), m, n, k);
                    accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                if self.needs_grad(a) {
                    accumulate(grads, a, gout.to_vec());
                }
                if self.needs_grad(b) {
                    accumulate(grads, b, gout.to_vec());
                }
            }
            &Op::Mul(a, b) => {
                if self.needs_grad(a) {
                    let da = gout.iter().zip(self.data(b)).map(|(g, y)| g * y).collect();
                    accumulate(grads, a, da);
                }
                if self.needs_grad(b) {
                    let db = gout.iter().zip(self.data(a)).map(|(g, x)| g * x).collect();
                    accumulate(grads, b, db);
                }
            }
            &Op::AddBias(x, bias) => {
                if self.needs_grad(x) {
                    accumulate(grads, x, gout.to_vec());
                }
                if self.needs_grad(bias) {
                    let n = self.value(bias).len();
                    let mut db = vec![0.0; n];
                    for row in gout.chunks_exact(n) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    accumulate(grads, bias, db);
                }
            }
            &Op::Scale(x, c) => {
                if self.needs_grad(x) {
                    accumulate(grads, x, gout.iter().map(|g| g * c).collect());
                }
            }
            &Op::Tanh(x) => {
                let y = node.value.data();
                let dx = gout.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect();
                accumulate(grads, x, dx);
            }
            &Op::Gelu(x) => {
                let dx = gout
                    .iter()
                    .zip(self.data(x))
                    .map(|(g, &v)| g * gelu_grad(v))
                    .collect();
                accumulate(grads, x, dx);
            }
            &Op::SoftmaxRows(x) => {
                let (_, n) = self.dims2(x);
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(gout.chunks_exact(n)) {
                    let s = dot(gr, yr);
                    for c in 0..n {
                        dr[c] = yr[c] * (gr[c] - s);
                    }
                }
                accumulate(grads, x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, n) = self.dims2(*x);
                let g = self.data(*gain);
                if self.needs_grad(*gain) {
                    let mut dg = vec![0.0; n];
                    for (gr, hr) in gout.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for c in 0..n {
                            dg[c] += gr[c] * hr[c];
                        }
                    }
                    accumulate(grads, *gain, dg);
                }
                if self.needs_grad(*bias) {
                    let mut db = vec![0.0; n];
                    for gr in gout.chunks_exact(n) {
                        for c in 0..n {
                            db[c] += gr[c];
                        }
                    }
                    accumulate(grads, *bias, db);
                }
                if self.needs_grad(*x) {
                    let mut dx = vec![0.0; m * n];
                    let inv_n = 1.0 / n as f64;
                    for r in 0..m {
                        let gr = &gout[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..n {
                            let dh = gr[c] * g[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[c];
                        }
                        mean_dh *= inv_n;
                        mean_dh_h *= inv_n;
                        for c in 0..n {
                            let dh = gr[c] * g[c];
                            dx[r * n + c] = rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Embed { table, ids } => {
                let (vocab, d) = self.dims2(*table);
                let mut dt = vec![0.0; vocab * d];
                for (row, &id) in gout.chunks_exact(d).zip(ids) {
                    for (t, g) in dt[id * d..(id + 1) * d].iter_mut().zip(row) {
                        *t += g;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (m, c) = self.dims2(*logits);
                let scale = gout[0] / m as f64;
                let mut dl = probs.clone();
                for (row, &label) in dl.chunks_exact_mut(c).zip(labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                accumulate(grads, *logits, dl);
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => {
                let (rows, d) = self.dims2(*q);
                let AttentionShape { batch, seq, heads } = *shape;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.data(*q), self.data(*k), self.data(*v));
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut ds = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                        let col = h * dh;
                        for i in 0..seq {
                            let prow = &p[i * seq..(i + 1) * seq];
                            let go = &gout[(b * seq + i) * d + col..][..dh];
                            // dP[i,j] = dO_i · V_j; dV_j += P[i,j] dO_i
                            for j in 0..seq {
                                let vj = &vd[(b * seq + j) * d + col..][..dh];
                                ds[j] = dot(go, vj);
                                let dvj = &mut dv[(b * seq + j) * d + col..][..dh];
                                for (o, g) in dvj.iter_mut().zip(go) {
                                    *o += prow[j] * g;
                                }
                            }
                            let s = dot(&ds, prow);
                            for j in 0..seq {
                                ds[j] = prow[j] * (ds[j] - s) * scale;
                            }
                            let qi = &qd[(b * seq + i) * d + col..][..dh];
                            for j in 0..seq {
                                let w = ds[j];
                                let kj = &kd[(b * seq + j) * d + col..][..dh];
                                let dqi = &mut dq[(b * seq + i) * d + col..][..dh];
                                for (o, kk) in dqi.iter_mut().zip(kj) {
                                    *o += w * kk;
                                }
                                let dkj = &mut dk[(b * seq + j) * d + col..][..dh];
                                for (o, qq) in dkj.iter_mut().zip(qi) {
                                    *o += w * qq;
                                }
                            }
                        }
                    }
                }
                if self.needs_grad(*q) {
                    accumulate(grads, *q, dq);
                }
                if self.needs_grad(*k) {
                    accumulate(grads, *k, dk);
                }
                if self.needs_grad(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            &Op::MeanPool { x, group } => {
                let (rows, d) = self.dims2(x);
                let inv = 1.0 / group as f64;
                let mut dx = vec![0.0; rows * d];
                for (r, row) in dx.chunks_exact_mut(d).enumerate() {
                    let g = &gout[(r / group) * d..][..d];
                    for (o, gg) in row.iter_mut().zip(g) {
                        *o = gg * inv;
                    }
                }
                accumulate(grads, x, dx);
            }
            Op::GatherRows { x, rows } => {
                let (n, d) = self.dims2(*x);
                let mut dx = vec![0.0; n * d];
                for (g, &r) in gout.chunks_exact(d).zip(rows) {
                    for (o, gg) in dx[r * d..(r + 1) * d].iter_mut().zip(g) {
                        *o += gg;
                    }
                }
                accumulate(grads, *x, dx);
            }
            &Op::Sum(x) => {
                let n = self.value(x).len();
                accumulate(grads, x, vec![gout[0]; n]);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, g: Vec<f64>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(&g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::MatMulT(..) => "matmul_t",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::AddBias(..) => "add_bias",
        Op::Scale(..) => "scale",
        Op::Tanh(..) => "tanh",
        Op::Gelu(..) => "gelu",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Embed { .. } => "embed",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Attention { .. } => "attention",
        Op::MeanPool { .. } => "mean_pool",
        Op::GatherRows { .. } => "gather_rows",
        Op::Sum(..) => "sum",
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `a [m,k] · b [k,n]`
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a [m,k] · bᵀ` with `b [n,k]`
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `aᵀ · b` with `a [m,k]`, `b [m,n]`, giving `[k,n]`
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}
