//! Dense symmetric eigensolver wrapper with deterministic output.

use nalgebra::DMatrix;

/// Full eigendecomposition of a symmetric matrix given row-major data.
/// Returns eigenvalues ascending with matching eigenvectors as rows of the
/// second vector (vector i corresponds to eigenvalue i). Each eigenvector is
/// sign-canonicalized: its largest-magnitude entry (lowest index on ties) is
/// made non-negative.
pub fn sym_eig_ascending(n: usize, data: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    assert_eq!(data.len(), n * n, "matrix data must be n*n");
    let m = DMatrix::from_row_slice(n, n, data);
    let decomp = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        decomp.eigenvalues[a]
            .partial_cmp(&decomp.eigenvalues[b])
            .expect("eigenvalues are finite")
    });
    let mut values = Vec::with_capacity(n);
    let mut vectors = Vec::with_capacity(n);
    for &k in &order {
        values.push(decomp.eigenvalues[k]);
        let mut v: Vec<f64> = decomp.eigenvectors.column(k).iter().copied().collect();
        canonicalize_sign(&mut v);
        vectors.push(v);
    }
    (values, vectors)
}

/// Flip so the largest-magnitude entry (lowest index on ties) is positive.
pub fn canonicalize_sign(v: &mut [f64]) {
    let mut best = 0usize;
    let mut best_abs = -1.0f64;
    for (i, &x) in v.iter().enumerate() {
        if x.abs() > best_abs {
            best_abs = x.abs();
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigenvalues_sorted_and_orthonormal() {
        // P3 Laplacian: eigenvalues 0, 1, 3
        let l = [1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0];
        let (vals, vecs) = sym_eig_ascending(3, &l);
        assert!((vals[0] - 0.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        assert!((vals[2] - 3.0).abs() < 1e-12);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sign_canonicalization_is_stable() {
        let mut a = vec![-0.8, 0.1];
        canonicalize_sign(&mut a);
        assert_eq!(a, vec![0.8, -0.1]);
        let mut b = vec![0.8, -0.1];
        canonicalize_sign(&mut b);
        assert_eq!(b, vec![0.8, -0.1]);
    }
}
