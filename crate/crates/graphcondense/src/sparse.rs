//! Compressed sparse row matrices for graph operators.
//!
//! Square symmetric matrices only — adjacency, Laplacian, and their
//! normalized variants. Row order is always ascending column index so
//! iteration order (and therefore floating-point accumulation order) is
//! reproducible.

/// Square sparse matrix in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Build from (row, col, value) triplets. Duplicate coordinates are
    /// summed; entries are sorted within each row.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut entries: Vec<(usize, usize, f64)> = triplets.to_vec();
        entries.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(entries.len());
        for (r, c, v) in entries {
            assert!(r < n && c < n, "triplet ({r}, {c}) out of range for n = {n}");
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => merged.push((r, c, v)),
            }
        }
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(merged.len());
        let mut values = Vec::with_capacity(merged.len());
        for (r, c, v) in merged {
            col_idx.push(c);
            values.push(v);
            row_ptr[r + 1] += 1;
        }
        for r in 0..n {
            row_ptr[r + 1] += row_ptr[r];
        }
        CsrMatrix {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Build a symmetric unweighted adjacency from undirected edges.
    /// Self-loops and duplicates must already be removed.
    pub fn symmetric_adjacency(n: usize, undirected_edges: &[(usize, usize)]) -> Self {
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(u, v) in undirected_edges {
            assert!(u < n && v < n && u != v, "bad edge ({u}, {v})");
            adj[u].push(v);
            adj[v].push(u);
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for neighbours in &mut adj {
            neighbours.sort_unstable();
            col_idx.extend_from_slice(neighbours);
            row_ptr.push(col_idx.len());
        }
        let values = vec![1.0; col_idx.len()];
        CsrMatrix {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Stored entries (for a symmetric adjacency this counts both directions).
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        (&self.col_idx[lo..hi], &self.values[lo..hi])
    }

    pub fn value_at(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    /// Row sums (weighted degrees).
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).1.iter().sum::<f64>())
            .collect()
    }

    /// Max absolute row sum (induced infinity/1-norm for symmetric matrices).
    pub fn norm_one(&self) -> f64 {
        (0..self.n)
            .map(|i| self.row(i).1.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// y = A x.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            let mut acc = 0.0f64;
            for (c, v) in cols.iter().zip(vals) {
                acc += v * x[*c];
            }
            y[i] = acc;
        }
    }

    /// Dense product A * X for row-major X of shape (n, d).
    pub fn mul_dense(&self, x: &[f64], d: usize) -> Vec<f64> {
        assert_eq!(x.len(), self.n * d);
        let mut out = vec![0.0f64; self.n * d];
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            let row_out = &mut out[i * d..(i + 1) * d];
            for (c, v) in cols.iter().zip(vals) {
                let row_x = &x[c * d..c * d + d];
                for k in 0..d {
                    row_out[k] += v * row_x[k];
                }
            }
        }
        out
    }

    /// Dense (n, n) copy, row-major.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut dense = vec![0.0f64; self.n * self.n];
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (c, v) in cols.iter().zip(vals) {
                dense[i * self.n + c] = *v;
            }
        }
        dense
    }

    /// Map stored values, keeping the pattern.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> CsrMatrix {
        CsrMatrix {
            n: self.n,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Induced submatrix on `nodes` (relabelled 0..k in the given order).
    pub fn induced(&self, nodes: &[usize]) -> CsrMatrix {
        let mut pos = vec![usize::MAX; self.n];
        for (new, &old) in nodes.iter().enumerate() {
            pos[old] = new;
        }
        let mut triplets = Vec::new();
        for (new_r, &old_r) in nodes.iter().enumerate() {
            let (cols, vals) = self.row(old_r);
            for (c, v) in cols.iter().zip(vals) {
                let new_c = pos[*c];
                if new_c != usize::MAX {
                    triplets.push((new_r, new_c, *v));
                }
            }
        }
        CsrMatrix::from_triplets(nodes.len(), &triplets)
    }

    /// Connected components over the nonzero pattern; returns a component id
    /// per node and the component count.
    pub fn components(&self) -> (Vec<usize>, usize) {
        let mut comp = vec![usize::MAX; self.n];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..self.n {
            if comp[start] != usize::MAX {
                continue;
            }
            comp[start] = count;
            stack.push(start);
            while let Some(u) = stack.pop() {
                let (cols, vals) = self.row(u);
                for (c, v) in cols.iter().zip(vals) {
                    if *v != 0.0 && comp[*c] == usize::MAX {
                        comp[*c] = count;
                        stack.push(*c);
                    }
                }
            }
            count += 1;
        }
        (comp, count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjacency_stores_both_directions() {
        let a = CsrMatrix::symmetric_adjacency(2, &[(0, 1)]);
        assert_eq!(a.nnz(), 2);
        assert_eq!(a.value_at(0, 1), 1.0);
        assert_eq!(a.value_at(1, 0), 1.0);
        assert_eq!(a.value_at(0, 0), 0.0);
    }

    #[test]
    fn triplets_sum_duplicates() {
        let m = CsrMatrix::from_triplets(2, &[(0, 1, 1.0), (0, 1, 2.0), (1, 0, 3.0)]);
        assert_eq!(m.value_at(0, 1), 3.0);
        assert_eq!(m.value_at(1, 0), 3.0);
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn matvec_matches_dense() {
        let m = CsrMatrix::from_triplets(
            3,
            &[(0, 1, 2.0), (1, 0, 2.0), (1, 2, -1.0), (2, 1, -1.0), (2, 2, 4.0)],
        );
        let x = [1.0, 2.0, 3.0];
        let mut y = [0.0; 3];
        m.matvec(&x, &mut y);
        assert_eq!(y, [4.0, -1.0, 10.0]);
    }

    #[test]
    fn induced_submatrix_relabels() {
        let a = CsrMatrix::symmetric_adjacency(4, &[(0, 1), (1, 2), (2, 3)]);
        let sub = a.induced(&[1, 2, 3]);
        assert_eq!(sub.n(), 3);
        assert_eq!(sub.value_at(0, 1), 1.0);
        assert_eq!(sub.value_at(1, 2), 1.0);
        assert_eq!(sub.value_at(0, 2), 0.0);
    }

    #[test]
    fn component_count() {
        let a = CsrMatrix::symmetric_adjacency(5, &[(0, 1), (2, 3)]);
        let (_, c) = a.components();
        assert_eq!(c, 3); // {0,1}, {2,3}, {4}
    }

    #[test]
    fn empty_rows_have_empty_slices() {
        let m = CsrMatrix::from_triplets(3, &[(2, 0, 1.0)]);
        assert_eq!(m.row(0).0.len(), 0);
        assert_eq!(m.row(1).0.len(), 0);
        assert_eq!(m.row(2).0, &[0]);
    }
}
