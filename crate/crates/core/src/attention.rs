//! Multi-head self-attention with three interchangeable compatibility
//! functions.
//!
//! For head `i` and tokens `x`, `y` with per-head projections `Qᵢ`, `Kᵢ`:
//!
//! | kind        | score                 | projections kept   |
//! |-------------|-----------------------|--------------------|
//! | `Original`  | `Qᵢ(x) · Kᵢ(y)ᵀ`      | Q, K, V            |
//! | `Symmetric` | `Qᵢ(x) · Qᵢ(y)ᵀ`      | Q, V               |
//! | `Pairwise`  | `Qᵢ(x) · Sᵢ · Qᵢ(y)ᵀ` | Q, V, one `d×d` Sᵢ |
//!
//! The pairwise form comes from writing `Q = L·W_q`, `K = L·W_k` over a
//! shared projection `L`; the product `W_q·W_kᵀ` collapses into a single
//! `d×d` matrix `S` (see [`pairwise_from_factors`]).
//!
//! Weights are stored `[in × out]` so a projection is `x·W + b`. Heads are
//! contiguous column blocks of width `d = h / n`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::init::truncated_normal;
use crate::tensor::Tensor;

/// Additive score for masked keys.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorKind {
    Original,
    Symmetric,
    Pairwise,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 3] = [Self::Original, Self::Symmetric, Self::Pairwise];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Original => "original",
            Self::Symmetric => "symmetric",
            Self::Pairwise => "pairwise",
        }
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "original" => Ok(Self::Original),
            "symmetric" => Ok(Self::Symmetric),
            "pairwise" => Ok(Self::Pairwise),
            other => Err(Error::Config(format!("unknown operator `{other}`"))),
        }
    }
}

/// Scalar parameters in the Q/K/V part of one attention layer (biases
/// included, output projection excluded).
pub fn attention_param_count(hidden: usize, n_heads: usize, kind: OperatorKind) -> Result<usize> {
    check_heads(hidden, n_heads)?;
    let proj = hidden * hidden + hidden;
    let d = hidden / n_heads;
    Ok(match kind {
        OperatorKind::Original => 3 * proj,
        OperatorKind::Symmetric => 2 * proj,
        OperatorKind::Pairwise => 2 * proj + n_heads * d * d,
    })
}

fn check_heads(hidden: usize, n_heads: usize) -> Result<()> {
    if n_heads == 0 || hidden == 0 || hidden % n_heads != 0 {
        return Err(Error::Config(format!(
            "hidden size {hidden} is not divisible by {n_heads} heads"
        )));
    }
    Ok(())
}

/// `S = W_q · W_kᵀ` for square per-head base-change matrices.
pub fn pairwise_from_factors(w_q: &Tensor, w_k: &Tensor) -> Result<Tensor> {
    let square = |t: &Tensor| t.rank() == 2 && t.shape()[0] == t.shape()[1];
    if !square(w_q) || w_q.shape() != w_k.shape() {
        return Err(Error::Shape {
            op: "pairwise_from_factors",
            lhs: w_q.shape().to_vec(),
            rhs: w_k.shape().to_vec(),
        });
    }
    w_q.matmul(&w_k.transpose2()?)
}

/// Projection weights of one attention layer. Which optional tensors are
/// present determines the operator kind.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub n_heads: usize,
    pub w_q: Tensor,
    pub b_q: Tensor,
    /// Original only.
    pub w_k: Option<Tensor>,
    pub b_k: Option<Tensor>,
    /// Pairwise only: per-head matrices stacked as `[n × d × d]`.
    pub s_heads: Option<Tensor>,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
}

impl AttentionParams {
    /// Weights and `S` from `N(0, std²)` truncated at 2σ; biases zero.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, hidden: usize, n_heads: usize, kind: OperatorKind, std: f64) -> Result<Self> {
        check_heads(hidden, n_heads)?;
        let d = hidden / n_heads;
        let dense = |rng: &mut R| truncated_normal(rng, &[hidden, hidden], std);
        let w_q = dense(rng);
        let w_k = (kind == OperatorKind::Original).then(|| dense(rng));
        let s_heads = (kind == OperatorKind::Pairwise).then(|| truncated_normal(rng, &[n_heads, d, d], std));
        let w_v = dense(rng);
        let w_o = dense(rng);
        let bias = || Tensor::zeros(&[hidden]);
        Ok(Self {
            n_heads,
            w_q,
            b_q: bias(),
            b_k: w_k.as_ref().map(|_| bias()),
            w_k,
            s_heads,
            w_v,
            b_v: bias(),
            w_o,
            b_o: bias(),
        })
    }

    pub fn hidden(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.hidden() / self.n_heads
    }

    /// The kind implied by which tensors are present.
    pub fn kind(&self) -> Result<OperatorKind> {
        match (&self.w_k, &self.b_k, &self.s_heads) {
            (Some(_), Some(_), None) => Ok(OperatorKind::Original),
            (None, None, None) => Ok(OperatorKind::Symmetric),
            (None, None, Some(_)) => Ok(OperatorKind::Pairwise),
            _ => Err(Error::Config("attention parameters mix operator kinds".into())),
        }
    }

    pub fn check(&self, kind: OperatorKind) -> Result<()> {
        check_heads(self.hidden(), self.n_heads)?;
        let actual = self.kind()?;
        if actual != kind {
            return Err(Error::Config(format!(
                "operator `{kind}` requested but parameters are for `{actual}`"
            )));
        }
        let h = self.hidden();
        let d = self.head_dim();
        let mut expect = vec![
            (&self.w_q, vec![h, h]),
            (&self.b_q, vec![h]),
            (&self.w_v, vec![h, h]),
            (&self.b_v, vec![h]),
            (&self.w_o, vec![h, h]),
            (&self.b_o, vec![h]),
        ];
        if let (Some(w), Some(b)) = (&self.w_k, &self.b_k) {
            expect.push((w, vec![h, h]));
            expect.push((b, vec![h]));
        }
        if let Some(s) = &self.s_heads {
            expect.push((s, vec![self.n_heads, d, d]));
        }
        for (t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "attention tensor has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// All tensors with their local names, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![("query.weight", &self.w_q), ("query.bias", &self.b_q)];
        if let (Some(w), Some(b)) = (&self.w_k, &self.b_k) {
            out.push(("key.weight", w));
            out.push(("key.bias", b));
        }
        if let Some(s) = &self.s_heads {
            out.push(("pairwise.weight", s));
        }
        out.extend([
            ("value.weight", &self.w_v),
            ("value.bias", &self.b_v),
            ("output.weight", &self.w_o),
            ("output.bias", &self.b_o),
        ]);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = vec![("query.weight", &mut self.w_q), ("query.bias", &mut self.b_q)];
        if let (Some(w), Some(b)) = (&mut self.w_k, &mut self.b_k) {
            out.push(("key.weight", w));
            out.push(("key.bias", b));
        }
        if let Some(s) = &mut self.s_heads {
            out.push(("pairwise.weight", s));
        }
        out.extend([
            ("value.weight", &mut self.w_v),
            ("value.bias", &mut self.b_v),
            ("output.weight", &mut self.w_o),
            ("output.bias", &mut self.b_o),
        ]);
        out
    }

    /// Scalars in Q/K/S/V (output projection excluded).
    pub fn compat_scalar_count(&self) -> usize {
        self.named_tensors()
            .into_iter()
            .filter(|(name, _)| !name.starts_with("output."))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Registers every tensor on `g` as a trainable leaf.
    pub fn register(&self, g: &mut Graph) -> AttentionVars {
        AttentionVars {
            n_heads: self.n_heads,
            w_q: g.param(self.w_q.clone()),
            b_q: g.param(self.b_q.clone()),
            w_k: self.w_k.as_ref().map(|t| g.param(t.clone())),
            b_k: self.b_k.as_ref().map(|t| g.param(t.clone())),
            s_heads: self.s_heads.as_ref().map(|t| g.param(t.clone())),
            w_v: g.param(self.w_v.clone()),
            b_v: g.param(self.b_v.clone()),
            w_o: g.param(self.w_o.clone()),
            b_o: g.param(self.b_o.clone()),
        }
    }
}

/// [`AttentionParams`] as graph handles.
#[derive(Debug, Clone)]
pub struct AttentionVars {
    pub n_heads: usize,
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Option<Var>,
    pub b_k: Option<Var>,
    pub s_heads: Option<Var>,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
}

impl AttentionVars {
    /// Handles in the same order as [`AttentionParams::named_tensors`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.w_q, self.b_q];
        if let (Some(w), Some(b)) = (self.w_k, self.b_k) {
            out.extend([w, b]);
        }
        out.extend(self.s_heads);
        out.extend([self.w_v, self.b_v, self.w_o, self.b_o]);
        out
    }

    fn kind(&self) -> OperatorKind {
        match (self.w_k, self.s_heads) {
            (Some(_), _) => OperatorKind::Original,
            (None, Some(_)) => OperatorKind::Pairwise,
            (None, None) => OperatorKind::Symmetric,
        }
    }
}

/// `[B×L×h] → [B×n×L×d]` through `x·W + b`.
fn project_heads(g: &mut Graph, x: Var, w: Var, b: Var, n_heads: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (batch, len, h) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(x, &[batch * len, h])?;
    let proj = g.matmul(flat, w)?;
    let proj = g.add_bias(proj, b)?;
    let split = g.reshape(proj, &[batch, len, n_heads, h / n_heads])?;
    g.permute(split, &[0, 2, 1, 3])
}

fn check_input(g: &Graph, x: Var, vars: &AttentionVars, kind: OperatorKind) -> Result<()> {
    if vars.kind() != kind {
        return Err(Error::Config(format!(
            "operator `{kind}` requested but parameters are for `{}`",
            vars.kind()
        )));
    }
    let h = g.shape(vars.w_q)[0];
    let shape = g.shape(x);
    if shape.len() != 3 || shape[2] != h {
        return Err(Error::Shape {
            op: "attention",
            lhs: shape.to_vec(),
            rhs: vec![h, h],
        });
    }
    check_heads(h, vars.n_heads)
}

/// Unscaled compatibility scores `[B×n×L×L]`, recorded on `g`.
pub fn compat_scores_graph(g: &mut Graph, x: Var, vars: &AttentionVars, kind: OperatorKind) -> Result<Var> {
    check_input(g, x, vars, kind)?;
    let n = vars.n_heads;
    let q = project_heads(g, x, vars.w_q, vars.b_q, n)?;
    match kind {
        OperatorKind::Original => {
            let (w_k, b_k) = (vars.w_k.unwrap(), vars.b_k.unwrap());
            let k = project_heads(g, x, w_k, b_k, n)?;
            g.bmm(q, k, true)
        }
        OperatorKind::Symmetric => g.bmm(q, q, true),
        OperatorKind::Pairwise => {
            let s = vars.s_heads.unwrap();
            let [batch, heads, len, d] = g.shape(q).try_into().expect("rank-4 heads");
            // heads leading so each Sᵢ multiplies every token of head i
            let by_head = g.permute(q, &[1, 0, 2, 3])?;
            let by_head = g.reshape(by_head, &[heads, batch * len, d])?;
            let qs = g.bmm(by_head, s, false)?;
            let qs = g.reshape(qs, &[heads, batch, len, d])?;
            let qs = g.permute(qs, &[1, 0, 2, 3])?;
            g.bmm(qs, q, true)
        }
    }
}

/// Output `[B×L×h]` and post-softmax weights `[B×n×L×L]`, recorded on `g`.
///
/// `mask` is `B×L`, row-major, 1 for attendable tokens and 0 for padding.
pub fn attention_forward_graph(
    g: &mut Graph,
    x: Var,
    vars: &AttentionVars,
    kind: OperatorKind,
    mask: &[u8],
) -> Result<(Var, Var)> {
    check_input(g, x, vars, kind)?;
    let [batch, len, h]: [usize; 3] = g.shape(x).try_into().expect("rank-3 input");
    let n = vars.n_heads;
    let d = h / n;
    if mask.len() != batch * len {
        return Err(Error::Shape {
            op: "attention mask",
            lhs: vec![batch, len],
            rhs: vec![mask.len()],
        });
    }
    if let Some(b) = mask.chunks(len).position(|row| row.iter().all(|&m| m == 0)) {
        return Err(Error::FullyMasked(b));
    }

    let scores = compat_scores_graph(g, x, vars, kind)?;
    let mut scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
    if mask.contains(&0) {
        let mut additive = Vec::with_capacity(batch * n * len * len);
        for row in mask.chunks(len) {
            let keys: Vec<f64> = row.iter().map(|&m| if m == 0 { MASK_VALUE } else { 0.0 }).collect();
            for _ in 0..n * len {
                additive.extend_from_slice(&keys);
            }
        }
        let additive = g.constant(Tensor::new(&[batch, n, len, len], additive)?);
        scaled = g.add(scaled, additive)?;
    }
    let probs = g.softmax(scaled);

    let v = project_heads(g, x, vars.w_v, vars.b_v, n)?;
    let ctx = g.bmm(probs, v, false)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[batch * len, h])?;
    let out = g.matmul(ctx, vars.w_o)?;
    let out = g.add_bias(out, vars.b_o)?;
    let out = g.reshape(out, &[batch, len, h])?;
    Ok((out, probs))
}

/// Unscaled scores `[B×n×L×L]` for input `x: [B×L×h]`.
pub fn compat_scores(x: &Tensor, params: &AttentionParams, kind: OperatorKind) -> Result<Tensor> {
    params.check(kind)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = params.register(&mut g);
    let scores = compat_scores_graph(&mut g, xv, &vars, kind)?;
    Ok(g.value(scores).clone())
}

/// Full multi-head attention output `[B×L×h]`.
pub fn attention_forward(x: &Tensor, params: &AttentionParams, kind: OperatorKind, mask: &[u8]) -> Result<Tensor> {
    Ok(attention_forward_with_weights(x, params, kind, mask)?.0)
}

/// Output together with the attention weights `[B×n×L×L]`.
pub fn attention_forward_with_weights(
    x: &Tensor,
    params: &AttentionParams,
    kind: OperatorKind,
    mask: &[u8],
) -> Result<(Tensor, Tensor)> {
    params.check(kind)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = params.register(&mut g);
    let (out, probs) = attention_forward_graph(&mut g, xv, &vars, kind, mask)?;
    Ok((g.value(out).clone(), g.value(probs).clone()))
}

/// `‖A − Aᵀ‖_F / ‖A‖_F` over the token-pair axes of a `[..×L×L]` score
/// tensor; zero for symmetric scores.
pub fn asymmetry(scores: &Tensor) -> f64 {
    let r = scores.rank();
    assert!(r >= 2 && scores.shape()[r - 1] == scores.shape()[r - 2], "asymmetry: needs square trailing axes");
    let l = scores.shape()[r - 1];
    let (mut diff, mut norm) = (0.0, 0.0);
    for block in scores.data().chunks(l * l) {
        for s in 0..l {
            for t in 0..l {
                let a = block[s * l + t];
                diff += (a - block[t * l + s]).powi(2);
                norm += a * a;
            }
        }
    }
    if norm == 0.0 {
        0.0
    } else {
        (diff / norm).sqrt()
    }
}
