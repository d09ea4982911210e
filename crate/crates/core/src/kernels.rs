//! Raw slice kernels shared by the tensor and graph code.

/// Batched `out[g] += a[g] · b[g]` with `a: [m×k]`, `b: [k×n]`, all contiguous.
///
/// Accumulation order is fixed (i, p, j), so results are bit-reproducible.
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], batch: usize, m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), batch * m * k);
    debug_assert_eq!(b.len(), batch * k * n);
    debug_assert_eq!(out.len(), batch * m * n);
    for g in 0..batch {
        let a = &a[g * m * k..(g + 1) * m * k];
        let b = &b[g * k * n..(g + 1) * k * n];
        let out = &mut out[g * m * n..(g + 1) * m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
    }
}

/// Batched transpose of `[batch×m×n]` into `[batch×n×m]`.
pub(crate) fn transpose(a: &[f64], batch: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for g in 0..batch {
        let src = &a[g * m * n..(g + 1) * m * n];
        let dst = &mut out[g * m * n..(g + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Permutes axes: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Gaussian error linear unit, exact erf form.
pub fn gelu(x: f64) -> f64 {
    // erfc form keeps full relative precision in the negative tail
    0.5 * x * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2);
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// In-place numerically stable softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_roundtrip() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let perm = [2, 0, 1];
        let (p, pshape) = permute(&data, &shape, &perm);
        assert_eq!(pshape, vec![4, 2, 3]);
        // out[c, a, b] == in[a, b, c]
        assert_eq!(p[(3 * 2 + 1) * 3 + 2], data[(1 * 3 + 2) * 4 + 3]);
        let (back, bshape) = permute(&p, &pshape, &inverse_perm(&perm));
        assert_eq!(bshape, shape.to_vec());
        assert_eq!(back, data);
    }

    #[test]
    fn transpose_matches_permute() {
        let data: Vec<f64> = (0..12).map(f64::from).collect();
        let (p, _) = permute(&data, &[2, 2, 3], &[0, 2, 1]);
        assert_eq!(transpose(&data, 2, 2, 3), p);
    }
}
