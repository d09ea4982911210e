//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Graph`]. Node indices are a
//! topological order by construction, so [`Graph::backward`] simply walks
//! the tape from the loss towards the leaves, accumulating adjoints.
//!
//! ```
//! use symattn::graph::Graph;
//! use symattn::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
//! ```

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Marker for labels that do not contribute to the masked cross-entropy.
pub const IGNORE_INDEX: i64 = -1;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<i64>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// The recorded computation: an append-only tape of nodes.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: gradients flow into it.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Clears every stored gradient so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        self.backward_done = false;
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// Rank-2 product `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        self.matmul_impl(a, b, 1, m, k, n, false, vec![m, n])
    }

    /// Rank-2 product against a transposed right operand: `[m×k] · [n×k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(self.shape_err("matmul_t", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        self.matmul_impl(a, b, 1, m, k, n, true, vec![m, n])
    }

    /// Batched product over all leading axes: `[..×m×k] · [..×k×n]`, or
    /// `[..×m×k] · [..×n×k]ᵀ` when `trans_b` is set. Leading axes must match.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(self.shape_err("bmm", a, b));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(self.shape_err("bmm", a, b));
        }
        let batch = sa[..r - 2].iter().product();
        let mut out_shape = sa[..r - 2].to_vec();
        out_shape.extend([m, n]);
        self.matmul_impl(a, b, batch, m, k, n, trans_b, out_shape)
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_impl(
        &mut self,
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            if trans_b {
                let bt = kernels::transpose(bd, batch, n, k);
                kernels::gemm(ad, &bt, &mut out, batch, m, k, n);
            } else {
                kernels::gemm(ad, bd, &mut out, batch, m, k, n);
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            &[a, b],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Element-wise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(self.shape(a), data).expect("scale keeps shape");
        self.push(value, Op::Scale(a, factor), &[a])
    }

    /// Adds a `[h]` bias along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let h = *self.shape(x).last().unwrap();
        if self.shape(bias) != [h] {
            return Err(self.shape_err("add_bias", x, bias));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(h)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape {
                op: "permute",
                lhs: shape.to_vec(),
                rhs: perm.to_vec(),
            });
        }
        let (data, out_shape) = kernels::permute(self.value(a).data(), shape, perm);
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Permute(a, perm.to_vec()), &[a]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let n = *self.shape(a).last().unwrap();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            kernels::softmax_in_place(row);
        }
        let value = Tensor::new(self.shape(a), data).expect("softmax keeps shape");
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Standardizes each last-axis slice, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let h = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [h] {
            return Err(self.shape_err("layer_norm", x, gamma));
        }
        if self.shape(beta) != [h] {
            return Err(self.shape_err("layer_norm", x, beta));
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let rows = xd.len() / h;
        let mut xhat = Vec::with_capacity(xd.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(h) {
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let xh = (v - mean) * is;
                xhat.push(xh);
                out.push(xh * gd[j] + bd[j]);
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| kernels::gelu(x)).collect();
        let value = Tensor::new(self.shape(a), data).expect("gelu keeps shape");
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Gathers rows of a `[V×h]` table; output is `[ids.len()×h]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::InvalidTensor(format!("embedding table must be rank 2, got {shape:?}")));
        }
        let (vocab, h) = (shape[0], shape[1]);
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::TokenOutOfRange { id, limit: vocab });
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            out.extend_from_slice(&td[id * h..(id + 1) * h]);
        }
        let value = Tensor::new(&[ids.len(), h], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean negative log-likelihood over positions whose label is not
    /// [`IGNORE_INDEX`]. `logits` is `[..×V]`, `labels` has one entry per row.
    pub fn cross_entropy_masked(&mut self, logits: Var, labels: &[i64]) -> Result<Var> {
        let v = *self.shape(logits).last().unwrap();
        let rows = self.value(logits).numel() / v;
        if labels.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy_masked",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE_INDEX && (l < 0 || l as usize >= v)) {
            return Err(Error::TokenOutOfRange {
                id: bad.max(0) as usize,
                limit: v,
            });
        }
        let count = labels.iter().filter(|&&l| l != IGNORE_INDEX).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; ld.len()];
        let mut total = 0.0;
        for (r, (row, &label)) in ld.chunks(v).zip(labels).enumerate() {
            if label == IGNORE_INDEX {
                continue;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = max + sum.ln();
            total += log_z - row[label as usize];
            for (p, x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - log_z).exp();
            }
        }
        let value = Tensor::scalar(total / count as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Replays the tape in reverse and stores `∂loss/∂node` on every node
    /// that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            self.nodes[i].value.set_grad(g)?;
        }
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let ad = nodes[a.0].value.data();
                let bd = nodes[b.0].value.data();
                if wants(a) {
                    let mut da = vec![0.0; batch * m * k];
                    if trans_b {
                        // b is [n×k]
                        kernels::gemm(g, bd, &mut da, batch, m, n, k);
                    } else {
                        let bt = kernels::transpose(bd, batch, k, n);
                        kernels::gemm(g, &bt, &mut da, batch, m, n, k);
                    }
                    accumulate(grads, a, da);
                }
                if wants(b) {
                    if trans_b {
                        let gt = kernels::transpose(g, batch, m, n);
                        let mut db = vec![0.0; batch * n * k];
                        kernels::gemm(&gt, ad, &mut db, batch, n, m, k);
                        accumulate(grads, b, db);
                    } else {
                        let at = kernels::transpose(ad, batch, m, k);
                        let mut db = vec![0.0; batch * k * n];
                        kernels::gemm(&at, g, &mut db, batch, k, m, n);
                        accumulate(grads, b, db);
                    }
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g.to_vec());
                }
                if wants(b) {
                    accumulate(grads, b, g.to_vec());
                }
            }
            &Op::Mul(a, b) => {
                let ad = nodes[a.0].value.data();
                let bd = nodes[b.0].value.data();
                if wants(a) {
                    accumulate(grads, a, g.iter().zip(bd).map(|(g, y)| g * y).collect());
                }
                if wants(b) {
                    accumulate(grads, b, g.iter().zip(ad).map(|(g, x)| g * x).collect());
                }
            }
            &Op::Scale(a, f) => {
                accumulate(grads, a, g.iter().map(|g| g * f).collect());
            }
            &Op::AddBias(x, bias) => {
                let h = nodes[bias.0].value.numel();
                if wants(x) {
                    accumulate(grads, x, g.to_vec());
                }
                if wants(bias) {
                    let mut db = vec![0.0; h];
                    for row in g.chunks(h) {
                        for (d, gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    accumulate(grads, bias, db);
                }
            }
            &Op::Reshape(a) => accumulate(grads, a, g.to_vec()),
            Op::Permute(a, perm) => {
                let (back, _) = kernels::permute(g, nodes[i].value.shape(), &kernels::inverse_perm(perm));
                accumulate(grads, *a, back);
            }
            &Op::Softmax(a) => {
                let y = nodes[i].value.data();
                let n = *nodes[i].value.shape().last().unwrap();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    dx.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                accumulate(grads, a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let h = nodes[gamma.0].value.numel();
                let gd = nodes[gamma.0].value.data();
                if wants(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for ((gr, xr), &is) in g.chunks(h).zip(xhat.chunks(h)).zip(inv_std) {
                        let dxhat: Vec<f64> = gr.iter().zip(gd).map(|(g, w)| g * w).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / h as f64;
                        let mean_dx = dxhat.iter().zip(xr).map(|(d, x)| d * x).sum::<f64>() / h as f64;
                        dx.extend(dxhat.iter().zip(xr).map(|(d, x)| is * (d - mean_d - x * mean_dx)));
                    }
                    accumulate(grads, *x, dx);
                }
                if wants(*gamma) {
                    let mut dg = vec![0.0; h];
                    for (gr, xr) in g.chunks(h).zip(xhat.chunks(h)) {
                        for j in 0..h {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                    accumulate(grads, *gamma, dg);
                }
                if wants(*beta) {
                    let mut db = vec![0.0; h];
                    for gr in g.chunks(h) {
                        for (d, gv) in db.iter_mut().zip(gr) {
                            *d += gv;
                        }
                    }
                    accumulate(grads, *beta, db);
                }
            }
            &Op::Gelu(a) => {
                let x = nodes[a.0].value.data();
                accumulate(
                    grads,
                    a,
                    g.iter().zip(x).map(|(g, &x)| g * kernels::gelu_grad(x)).collect(),
                );
            }
            Op::Embedding { table, ids } => {
                let shape = nodes[table.0].value.shape();
                let h = shape[1];
                let mut dt = vec![0.0; shape[0] * h];
                for (row, &id) in g.chunks(h).zip(ids) {
                    for (d, gv) in dt[id * h..(id + 1) * h].iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                count,
            } => {
                let v = *nodes[logits.0].value.shape().last().unwrap();
                let scale = g[0] / *count as f64;
                let mut dl = vec![0.0; probs.len()];
                for (r, &label) in labels.iter().enumerate() {
                    if label == IGNORE_INDEX {
                        continue;
                    }
                    let row = &mut dl[r * v..(r + 1) * v];
                    for (d, p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                        *d = p * scale;
                    }
                    row[label as usize] -= scale;
                }
                accumulate(grads, *logits, dl);
            }
            &Op::Sum(a) => {
                let n = nodes[a.0].value.numel();
                accumulate(grads, a, vec![g[0]; n]);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Row-wise softmax over the last axis, without recording a graph.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let n = *x.shape().last().unwrap();
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(n) {
        kernels::softmax_in_place(row);
    }
    Tensor::new(x.shape(), data).expect("softmax keeps shape")
}

/// Layer normalization over the last axis, without recording a graph.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.constant(x.clone()), g.constant(gamma.clone()), g.constant(beta.clone()));
    let out = g.layer_norm(xv, gv, bv, eps)?;
    Ok(g.value(out).clone())
}

/// Element-wise GELU, without recording a graph.
pub fn gelu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| kernels::gelu(v)).collect();
    Tensor::new(x.shape(), data).expect("gelu keeps shape")
}

/// Masked mean cross-entropy, without recording a graph.
pub fn cross_entropy_masked(logits: &Tensor, labels: &[i64]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy_masked(l, labels)?;
    Ok(g.value(loss).item())
}
