//! Small dense helpers shared by the estimation modules.

use nalgebra::{DMatrix, SymmetricEigen};

/// Frobenius norm of `AᵀA − I`.
pub fn orthonormality_defect(a: &DMatrix<f64>) -> f64 {
    let gram = a.tr_mul(a);
    let n = gram.nrows();
    (gram - DMatrix::identity(n, n)).norm()
}

/// Index of the largest-magnitude entry; ties resolve to the lowest index.
pub fn argmax_abs<'a>(values: impl IntoIterator<Item = &'a f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        let a = v.abs();
        match best {
            Some((_, b)) if a <= b => {}
            _ => best = Some((i, a)),
        }
    }
    best.map(|(i, _)| i)
}

/// Top `k` singular triplets `(U_k, s_k, V_k)` of `a`, in descending order.
pub fn top_svd(a: &DMatrix<f64>, k: usize) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let (m, n) = a.shape();
    if k == 0 || m == 0 || n == 0 {
        return (DMatrix::zeros(m, 0), Vec::new(), DMatrix::zeros(n, 0));
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let k = k.min(order.len());
    let mut uk = DMatrix::zeros(m, k);
    let mut vk = DMatrix::zeros(n, k);
    let mut sk = Vec::with_capacity(k);
    for (dst, &src) in order.iter().take(k).enumerate() {
        uk.set_column(dst, &u.column(src));
        vk.set_column(dst, &v_t.row(src).transpose());
        sk.push(svd.singular_values[src]);
    }
    (uk, sk, vk)
}

/// Top `k` right singular vectors of a data matrix `x` (N×p) together with
/// the singular values. Uses the N×N Gram matrix when `p > N` so that no
/// p×p buffer is formed.
pub fn top_right_singular(x: &DMatrix<f64>, k: usize) -> (DMatrix<f64>, Vec<f64>) {
    let (n, p) = x.shape();
    if k == 0 {
        return (DMatrix::zeros(p, 0), Vec::new());
    }
    if p <= n {
        let (_, s, v) = top_svd(x, k);
        return (v, s);
    }
    let gram = x * x.transpose();
    let (vals, vecs) = sorted_symmetric_eigen(gram);
    let k = k.min(n);
    let mut v = DMatrix::zeros(p, k);
    let mut s = Vec::with_capacity(k);
    for (j, val) in vals.iter().take(k).enumerate() {
        let sv = val.max(0.0).sqrt();
        s.push(sv);
        if sv > 0.0 {
            let col = x.tr_mul(&vecs.column(j)) / sv;
            v.set_column(j, &col);
        }
    }
    (v, s)
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted descending.
pub fn sorted_symmetric_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    let mut vals = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
        vals.push(eig.eigenvalues[src]);
    }
    (vals, vecs)
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Horizontal concatenation `[a b]`.
pub fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// Squared Frobenius norm.
pub fn sq_norm(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// `tr(AᵀB)` for equally shaped matrices.
pub fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_abs_prefers_lowest_index_on_ties() {
        assert_eq!(argmax_abs(&[1.0, -3.0, 3.0]), Some(1));
        assert_eq!(argmax_abs(&[]), None);
    }

    #[test]
    fn gram_route_matches_direct_svd() {
        let x = DMatrix::from_fn(4, 9, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0 + 0.1 * j as f64);
        let (v, s) = top_right_singular(&x, 2);
        let (_, s_direct, v_direct) = top_svd(&x, 2);
        for j in 0..2 {
            assert!((s[j] - s_direct[j]).abs() < 1e-10);
            let dot = v.column(j).dot(&v_direct.column(j)).abs();
            assert!((dot - 1.0).abs() < 1e-10);
        }
    }
}
