//! Independent loop-based oracles for the tensor ops and the attention layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use symattn::attention::{attention_forward, compat_scores, AttentionParams, OperatorKind};
use symattn::gradcheck::{finite_diff_grad, max_relative_error};
use symattn::graph::{self, Graph, IGNORE_INDEX};
use symattn::Tensor;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn random_params(rng: &mut ChaCha8Rng, h: usize, n: usize, kind: OperatorKind) -> AttentionParams {
    let mut p = AttentionParams::init(rng, h, n, kind, 0.02).unwrap();
    for (_, t) in p.named_tensors_mut() {
        *t = uniform(rng, t.shape(), -0.6, 0.6);
    }
    p
}

// ---- scalar reference implementations -------------------------------------

fn ref_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Kahan-summed softmax via log-sum-exp.
fn ref_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for &x in row {
        let y = (x - m).exp() - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    row.iter().map(|&x| (x - m - sum.ln()).exp()).collect()
}

/// erfc from the Maclaurin series of erf for |z| ≤ 1.5 and Laplace's
/// continued fraction beyond, where the series would cancel.
fn ref_erfc(z: f64) -> f64 {
    if z > 1.5 {
        let mut frac = 0.0;
        for k in (1..4000).rev() {
            frac = (k as f64 / 2.0) / (z + frac);
        }
        return (-z * z).exp() / std::f64::consts::PI.sqrt() / (z + frac);
    }
    if z < -1.5 {
        return 2.0 - ref_erfc(-z);
    }
    let mut term = z;
    let mut sum = z;
    for n in 1..200 {
        term *= -z * z / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    1.0 - 2.0 / std::f64::consts::PI.sqrt() * sum
}

fn ref_gelu(x: f64) -> f64 {
    0.5 * x * ref_erfc(-x / std::f64::consts::SQRT_2)
}

fn ref_layer_norm(row: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    row.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(x, (g, b))| (x - mean) / (var + eps).sqrt() * g + b)
        .collect()
}

/// Attention by explicit loops over batch, head, query, key.
fn ref_attention(x: &Tensor, p: &AttentionParams, kind: OperatorKind, mask: &[u8]) -> Vec<f64> {
    let [b, l, h]: [usize; 3] = x.shape().try_into().unwrap();
    let n = p.n_heads;
    let d = h / n;
    let proj = |w: &Tensor, bias: &Tensor| {
        let mut y = ref_matmul(x.data(), w.data(), b * l, h, h);
        for (i, v) in y.iter_mut().enumerate() {
            *v += bias.data()[i % h];
        }
        y
    };
    let q = proj(&p.w_q, &p.b_q);
    let k = match kind {
        OperatorKind::Original => proj(p.w_k.as_ref().unwrap(), p.b_k.as_ref().unwrap()),
        _ => q.clone(),
    };
    let v = proj(&p.w_v, &p.b_v);
    let mut ctx = vec![0.0; b * l * h];
    for bi in 0..b {
        for head in 0..n {
            let at = |m: &[f64], t: usize, c: usize| m[(bi * l + t) * h + head * d + c];
            for s in 0..l {
                let mut scores = vec![0.0; l];
                for t in 0..l {
                    let mut a = 0.0;
                    match kind {
                        OperatorKind::Pairwise => {
                            let sm = p.s_heads.as_ref().unwrap().data();
                            for i in 0..d {
                                for j in 0..d {
                                    a += at(&q, s, i) * sm[head * d * d + i * d + j] * at(&q, t, j);
                                }
                            }
                        }
                        _ => {
                            for c in 0..d {
                                a += at(&q, s, c) * at(&k, t, c);
                            }
                        }
                    }
                    scores[t] = a / (d as f64).sqrt() + if mask[bi * l + t] == 0 { -1e9 } else { 0.0 };
                }
                let w = ref_softmax(&scores);
                for t in 0..l {
                    for c in 0..d {
                        ctx[(bi * l + s) * h + head * d + c] += w[t] * at(&v, t, c);
                    }
                }
            }
        }
    }
    let mut out = ref_matmul(&ctx, p.w_o.data(), b * l, h, h);
    for (i, o) in out.iter_mut().enumerate() {
        *o += p.b_o.data()[i % h];
    }
    out
}

// ---- forward oracles --------------------------------------------------------

#[test]
fn attention_matches_loop_oracle_b1_l3_h8_n2() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for kind in OperatorKind::ALL {
        let x = uniform(&mut rng, &[1, 3, 8], -1.0, 1.0);
        let p = random_params(&mut rng, 8, 2, kind);
        for mask in [[1u8, 1, 1], [1, 0, 1]] {
            let got = attention_forward(&x, &p, kind, &mask).unwrap();
            let want = ref_attention(&x, &p, kind, &mask);
            let diff = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-10, "{kind} mask {mask:?}: diff {diff}");
        }
    }
}

#[test]
fn attention_matches_loop_oracle_larger_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for kind in OperatorKind::ALL {
        let x = uniform(&mut rng, &[3, 5, 12], -1.0, 1.0);
        let p = random_params(&mut rng, 12, 3, kind);
        let mask: Vec<u8> = [1, 1, 1, 0, 0, 1, 1, 1, 1, 1, 0, 1, 0, 1, 1].to_vec();
        let got = attention_forward(&x, &p, kind, &mask).unwrap();
        let want = ref_attention(&x, &p, kind, &mask);
        let diff = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-10, "{kind}: diff {diff}");
    }
}

#[test]
fn original_scores_match_per_pair_dot_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (l, h, n) = (4, 6, 2);
    let d = h / n;
    let x = uniform(&mut rng, &[1, l, h], -1.0, 1.0);
    let p = random_params(&mut rng, h, n, OperatorKind::Original);
    let scores = compat_scores(&x, &p, OperatorKind::Original).unwrap();
    let w_k = p.w_k.as_ref().unwrap();
    let b_k = p.b_k.as_ref().unwrap();
    for head in 0..n {
        for s in 0..l {
            for t in 0..l {
                let mut want = 0.0;
                for c in head * d..(head + 1) * d {
                    let mut qs = p.b_q.data()[c];
                    let mut kt = b_k.data()[c];
                    for r in 0..h {
                        qs += x.data()[s * h + r] * p.w_q.data()[r * h + c];
                        kt += x.data()[t * h + r] * w_k.data()[r * h + c];
                    }
                    want += qs * kt;
                }
                let got = scores.data()[(head * l + s) * l + t];
                assert!((got - want).abs() <= 1e-12, "head {head} ({s},{t}): {got} vs {want}");
            }
        }
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (m, k, n) in [(1, 1, 1), (3, 5, 2), (7, 4, 9), (16, 16, 16)] {
        let a = uniform(&mut rng, &[m, k], -2.0, 2.0);
        let b = uniform(&mut rng, &[k, n], -2.0, 2.0);
        let want = ref_matmul(a.data(), b.data(), m, k, n);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(av, bv).unwrap();
        for (x, y) in g.value(c).data().iter().zip(&want) {
            assert!((x - y).abs() <= 1e-12);
        }
        let bt = b.transpose2().unwrap();
        let btv = g.constant(bt);
        let c2 = g.matmul_t(av, btv).unwrap();
        for (x, y) in g.value(c2).data().iter().zip(&want) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn softmax_matches_compensated_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = uniform(&mut rng, &[6, 11], -30.0, 30.0);
    let got = graph::softmax_rows(&x);
    for (r, row) in x.data().chunks(11).enumerate() {
        for (a, b) in got.data()[r * 11..(r + 1) * 11].iter().zip(ref_softmax(row)) {
            assert!((a - b).abs() <= 1e-14);
        }
    }
    let big = Tensor::new(&[1, 3], vec![1000.0, 1000.0, -1e9]).unwrap();
    let p = graph::softmax_rows(&big);
    assert_eq!(p.data(), &[0.5, 0.5, 0.0]);
}

#[test]
fn layer_norm_matches_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = uniform(&mut rng, &[5, 8], -2.0, 2.0);
    let gamma = uniform(&mut rng, &[8], 0.5, 1.5);
    let beta = uniform(&mut rng, &[8], -0.5, 0.5);
    for eps in [1e-12, 1e-5] {
        let got = graph::layer_norm(&x, &gamma, &beta, eps).unwrap();
        for (r, row) in x.data().chunks(8).enumerate() {
            let want = ref_layer_norm(row, gamma.data(), beta.data(), eps);
            for (a, b) in got.data()[r * 8..(r + 1) * 8].iter().zip(want) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn gelu_matches_series_and_continued_fraction() {
    for i in -600..=600 {
        let x = i as f64 / 100.0;
        let a = symattn::gelu(x);
        let b = ref_gelu(x);
        assert!((a - b).abs() <= 1e-13 * b.abs().max(1e-300), "x={x}: {a} vs {b}");
    }
    assert_eq!(symattn::gelu(0.0), 0.0);
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let logits = uniform(&mut rng, &[4, 7], -3.0, 3.0);
    let labels = [2, IGNORE_INDEX, 6, 0];
    let got = graph::cross_entropy_masked(&logits, &labels).unwrap();
    let mut want = 0.0;
    for (row, &l) in logits.data().chunks(7).zip(&labels) {
        if l == IGNORE_INDEX {
            continue;
        }
        want -= ref_softmax(row)[l as usize].ln();
    }
    want /= 3.0;
    assert!((got - want).abs() <= 1e-13, "{got} vs {want}");

    // uniform logits give ln V
    let flat = Tensor::zeros(&[2, 7]);
    let ce = graph::cross_entropy_masked(&flat, &[3, 4]).unwrap();
    assert!((ce - 7f64.ln()).abs() <= 1e-15);
    assert!(graph::cross_entropy_masked(&flat, &[IGNORE_INDEX, IGNORE_INDEX]).is_err());
}

// ---- gradient oracles -------------------------------------------------------

/// Builds `loss = Σ w ⊙ op(inputs)` so every output element gets a distinct
/// upstream weight, then compares every input gradient against finite
/// differences.
fn check_op<F>(inputs: &[Tensor], op: F)
where
    F: Fn(&mut Graph, &[symattn::graph::Var]) -> symattn::graph::Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = op(&mut g, &vars);
    let weights = uniform(&mut rng, g.shape(out), -1.0, 1.0);
    let wv = g.constant(weights.clone());
    let prod = g.mul(out, wv).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();

    for (i, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[i]).unwrap().to_vec();
        let fd = finite_diff_grad(
            |probe| {
                let mut g = Graph::new();
                let vars: Vec<_> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.constant(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                let out = op(&mut g, &vars);
                g.value(out).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
            },
            input,
            1e-4,
        )
        .unwrap();
        let err = max_relative_error(&analytic, fd.data());
        assert!(err <= 1e-4, "input {i}: max rel err {err}");
    }
}

fn inputs(seed: u64, shapes: &[&[usize]]) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes.iter().map(|s| uniform(&mut rng, s, -2.0, 2.0)).collect()
}

#[test]
fn grad_matmul_and_matmul_t() {
    check_op(&inputs(1, &[&[3, 4], &[4, 5]]), |g, v| g.matmul(v[0], v[1]).unwrap());
    check_op(&inputs(2, &[&[3, 4], &[5, 4]]), |g, v| g.matmul_t(v[0], v[1]).unwrap());
}

#[test]
fn grad_bmm_both_layouts() {
    check_op(&inputs(3, &[&[2, 3, 3, 4], &[2, 3, 4, 2]]), |g, v| g.bmm(v[0], v[1], false).unwrap());
    check_op(&inputs(4, &[&[2, 3, 4], &[2, 5, 4]]), |g, v| g.bmm(v[0], v[1], true).unwrap());
    // same operand on both sides, as in the symmetric operator
    check_op(&inputs(5, &[&[2, 4, 3]]), |g, v| g.bmm(v[0], v[0], true).unwrap());
}

#[test]
fn grad_elementwise_and_shape_ops() {
    check_op(&inputs(6, &[&[3, 4], &[3, 4]]), |g, v| g.add(v[0], v[1]).unwrap());
    check_op(&inputs(7, &[&[3, 4], &[3, 4]]), |g, v| g.mul(v[0], v[1]).unwrap());
    check_op(&inputs(8, &[&[3, 4]]), |g, v| g.scale(v[0], -0.37));
    check_op(&inputs(9, &[&[3, 4], &[4]]), |g, v| g.add_bias(v[0], v[1]).unwrap());
    check_op(&inputs(10, &[&[2, 3, 4]]), |g, v| g.reshape(v[0], &[6, 4]).unwrap());
    check_op(&inputs(11, &[&[2, 3, 4, 5]]), |g, v| g.permute(v[0], &[0, 2, 1, 3]).unwrap());
    check_op(&inputs(12, &[&[2, 3, 4]]), |g, v| g.permute(v[0], &[2, 0, 1]).unwrap());
}

#[test]
fn grad_softmax_gelu_layer_norm() {
    check_op(&inputs(13, &[&[3, 5]]), |g, v| g.softmax(v[0]));
    check_op(&inputs(14, &[&[4, 6]]), |g, v| g.gelu(v[0]));
    check_op(&inputs(15, &[&[4, 6], &[6], &[6]]), |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());
}

#[test]
fn grad_embedding_with_repeated_ids() {
    check_op(&inputs(16, &[&[5, 3]]), |g, v| g.embedding(v[0], &[1, 4, 1, 0, 1]).unwrap());
}

#[test]
fn grad_cross_entropy() {
    check_op(&inputs(17, &[&[4, 6]]), |g, v| {
        g.cross_entropy_masked(v[0], &[5, IGNORE_INDEX, 0, 2]).unwrap()
    });
}

#[test]
fn grad_full_attention_layer_every_kind() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for kind in OperatorKind::ALL {
        let x = uniform(&mut rng, &[2, 3, 8], -1.0, 1.0);
        let p = random_params(&mut rng, 8, 2, kind);
        let mask = [1u8, 1, 1, 1, 0, 1];
        let weights = uniform(&mut rng, &[2, 3, 8], -1.0, 1.0);
        let loss_of = |p: &AttentionParams| -> f64 {
            attention_forward(&x, p, kind, &mask)
                .unwrap()
                .data()
                .iter()
                .zip(weights.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let vars = p.register(&mut g);
        let (out, _) = symattn::attention::attention_forward_graph(&mut g, xv, &vars, kind, &mask).unwrap();
        let wv = g.constant(weights.clone());
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        let names: Vec<&str> = p.named_tensors().iter().map(|(n, _)| *n).collect();
        for (j, var) in vars.ordered().into_iter().enumerate() {
            let analytic = g.grad(var).unwrap().to_vec();
            let value = p.named_tensors()[j].1.clone();
            let fd = finite_diff_grad(
                |probe| {
                    let mut q = p.clone();
                    *q.named_tensors_mut()[j].1 = probe.clone();
                    loss_of(&q)
                },
                &value,
                1e-4,
            )
            .unwrap();
            let abs = analytic.iter().zip(fd.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let rel = max_relative_error(&analytic, fd.data());
            // An identically-zero gradient (Original key bias) leaves only
            // finite-difference roundoff; compare it absolutely.
            let structural_zero = analytic.iter().all(|a| a.abs() < 1e-14);
            if structural_zero {
                assert!(abs <= 1e-9, "{kind} {}: abs err {abs}", names[j]);
            } else {
                assert!(rel <= 1e-4, "{kind} {}: max rel err {rel}", names[j]);
            }
        }
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let a = uniform(&mut rng, &[3, 4], -2.0, 2.0);
    let b = uniform(&mut rng, &[4, 2], -2.0, 2.0);
    let grad_of = |scale: f64, with_extra: bool| {
        let mut g = Graph::new();
        let av = g.param(a.clone());
        let bv = g.constant(b.clone());
        let y = g.matmul(av, bv).unwrap();
        let y = g.gelu(y);
        let mut loss = g.sum(y);
        if with_extra {
            let sq = g.mul(av, av).unwrap();
            let s2 = g.sum(sq);
            loss = g.add(loss, s2).unwrap();
        }
        let loss = g.scale(loss, scale);
        g.backward(loss).unwrap();
        g.grad(av).unwrap().to_vec()
    };
    let base = grad_of(1.0, false);
    let tripled = grad_of(3.0, false);
    for (x, y) in base.iter().zip(&tripled) {
        assert!((3.0 * x - y).abs() <= 1e-12);
    }
    let summed = grad_of(1.0, true);
    for ((s, b), a) in summed.iter().zip(&base).zip(a.data()) {
        assert!((s - (b + 2.0 * a)).abs() <= 1e-12);
    }
}
