//! Laplacian spectral analysis and guided node selection.
//!
//! The selection stage embeds every node as its row in the matrix of the k
//! smallest Laplacian eigenvectors, scores nodes by their mean cosine
//! similarity to all other rows, and keeps the per-class top scorers from the
//! train split. The same module owns the spectral gap 1 - lambda_2 of the
//! symmetrically normalized adjacency, which the condensation loss matches
//! between sampled original subgraphs and the synthetic structure.

use std::borrow::Cow;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph::{GraphBundle, WeightedGraph};
use crate::linalg;
use crate::rng::Rng;
use crate::sparse::CsrMatrix;

/// Systems at or below this size go through the dense symmetric eigensolver;
/// larger ones use Lanczos with full reorthogonalization.
pub const DENSE_EIG_THRESHOLD: usize = 3000;

/// Dense cutoff for the spectral gap (the full spectrum is overkill above it).
const GAP_DENSE_THRESHOLD: usize = 512;

/// Default eigenvector count: a class-count-scale subspace.
pub fn default_k_eig(num_classes: usize, num_nodes: usize) -> usize {
    (num_classes + 1).min(num_nodes)
}

/// Which operator a [`SpectralCache`] was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectralSource {
    UnnormalizedLaplacian,
    NormalizedAdjacency,
}

/// The k algebraically smallest eigenpairs of a symmetric operator.
/// Eigenvectors are stored row-per-node: row i is the spectral embedding of
/// node i. Columns are sign-canonicalized so downstream scores are
/// reproducible across eigensolver backends.
#[derive(Debug, Clone)]
pub struct SpectralCache {
    pub eigenvalues: Vec<f64>,
    /// (num_nodes, k_eig) row-major.
    pub eigenvectors: Tensor,
    pub source: SpectralSource,
}

/// Mean cosine similarity of every node's spectral embedding against all
/// rows, including its own.
#[derive(Debug, Clone)]
pub struct SimilarityScores {
    pub mean_similarity: Vec<f64>,
    pub epsilon: f64,
}

pub const DEFAULT_SIMILARITY_EPSILON: f64 = 1e-10;

/// Chosen node set with its per-class budget and initial feature rows.
#[derive(Debug, Clone)]
pub struct SelectionResult {
    /// Global node ids, grouped by class (class 0 first), each class ordered
    /// by descending score with ascending id on ties.
    pub selected: Vec<usize>,
    pub per_class_budget: Vec<usize>,
    /// (sum of budgets, num_features) feature rows of the selected nodes.
    pub init_features: Tensor,
}

/// Unnormalized Laplacian L = D - A.
pub fn laplacian(g: &GraphBundle) -> CsrMatrix {
    let n = g.num_nodes;
    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(g.adjacency.nnz() + n);
    for i in 0..n {
        let (cols, vals) = g.adjacency.row(i);
        let mut degree = 0.0;
        for (c, v) in cols.iter().zip(vals) {
            triplets.push((i, *c, -v));
            degree += v;
        }
        triplets.push((i, i, degree));
    }
    CsrMatrix::from_triplets(n, &triplets)
}

/// Symmetric operator for iterative eigensolvers.
pub trait SymOp {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

impl SymOp for CsrMatrix {
    fn dim(&self) -> usize {
        self.n()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.matvec(x, y);
    }
}

struct Negated<'a, T: SymOp>(&'a T);

impl<T: SymOp> SymOp for Negated<'_, T> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.0.apply(x, y);
        for v in y.iter_mut() {
            *v = -*v;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Lanczos with full reorthogonalization and Rayleigh-Ritz extraction.
///
/// Returns the `k` algebraically smallest Ritz pairs of `op`, restricted to
/// the orthogonal complement of `deflate`. Breakdowns restart with a fresh
/// deterministic direction, so invariant subspaces of disconnected graphs do
/// not stall the iteration. Fails carrying the residual norms if the target
/// pairs have not converged below `tol * scale` by `max_dim` basis vectors.
fn lanczos_smallest(
    op: &dyn SymOp,
    k: usize,
    deflate: &[Vec<f64>],
    tol: f64,
    scale: f64,
    max_dim: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = op.dim();
    let usable = n.saturating_sub(deflate.len());
    let k = k.min(usable);
    if k == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let max_dim = max_dim.min(usable).max(k);
    let mut rng = Rng::new(0x5ca1_ab1e_0000_0001);

    let mut basis: Vec<Vec<f64>> = Vec::new();
    // projected matrix Q^T A Q, row-major over basis indices
    let mut proj: Vec<f64> = Vec::new();

    let orthogonalize = |v: &mut [f64], basis: &[Vec<f64>]| {
        for _ in 0..2 {
            for d in deflate {
                let c = dot(v, d);
                for (vi, di) in v.iter_mut().zip(d) {
                    *vi -= c * di;
                }
            }
            for q in basis {
                let c = dot(v, q);
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= c * qi;
                }
            }
        }
    };

    let fresh_vector = |rng: &mut Rng, basis: &[Vec<f64>]| -> Option<Vec<f64>> {
        for _ in 0..40 {
            let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            orthogonalize(&mut v, basis);
            let nv = norm(&v);
            if nv > 1e-8 {
                for x in v.iter_mut() {
                    *x /= nv;
                }
                return Some(v);
            }
        }
        None
    };

    let mut w = vec![0.0f64; n];
    loop {
        // grow the basis by one vector
        let next = if basis.is_empty() {
            fresh_vector(&mut rng, &basis)
        } else {
            // three-term candidate, then full reorthogonalization
            op.apply(basis.last().unwrap(), &mut w);
            let mut v = w.clone();
            orthogonalize(&mut v, &basis);
            let nv = norm(&v);
            if nv > 1e-10 * scale.max(1.0) {
                for x in v.iter_mut() {
                    *x /= nv;
                }
                Some(v)
            } else {
                // invariant subspace exhausted: restart
                fresh_vector(&mut rng, &basis)
            }
        };
        let Some(q) = next else {
            break; // no directions left
        };

        // extend the projected matrix with the new row/column
        op.apply(&q, &mut w);
        let m = basis.len() + 1;
        let mut new_proj = vec![0.0f64; m * m];
        for i in 0..m - 1 {
            for j in 0..m - 1 {
                new_proj[i * m + j] = proj[i * (m - 1) + j];
            }
        }
        for (i, qi) in basis.iter().enumerate() {
            let c = dot(qi, &w);
            new_proj[i * m + (m - 1)] = c;
            new_proj[(m - 1) * m + i] = c;
        }
        new_proj[(m - 1) * m + (m - 1)] = dot(&q, &w);
        proj = new_proj;
        basis.push(q);

        let m = basis.len();
        let enough = m >= k;
        let checkpoint = m == max_dim || m == usable || (enough && m % 20 == 0);
        if !checkpoint {
            continue;
        }

        // Rayleigh-Ritz + explicit residual check on the k smallest
        let (theta, y) = linalg::sym_eig_ascending(m, &proj);
        let mut vals = Vec::with_capacity(k);
        let mut vecs = Vec::with_capacity(k);
        let mut residuals = Vec::with_capacity(k);
        for t in 0..k.min(m) {
            let mut v = vec![0.0f64; n];
            for (j, q) in basis.iter().enumerate() {
                let c = y[t][j];
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi += c * qi;
                }
            }
            let nv = norm(&v);
            for x in v.iter_mut() {
                *x /= nv;
            }
            op.apply(&v, &mut w);
            let lam = theta[t];
            let resid = (0..n)
                .map(|i| (w[i] - lam * v[i]).powi(2))
                .sum::<f64>()
                .sqrt();
            residuals.push(resid);
            vals.push(lam);
            vecs.push(v);
        }
        let bound = tol * scale.max(1e-12);
        if vals.len() == k && residuals.iter().all(|&r| r <= bound) {
            for v in vecs.iter_mut() {
                linalg::canonicalize_sign(v);
            }
            return Ok((vals, vecs));
        }
        if m >= max_dim || m >= usable {
            return Err(Error::Numerical(format!(
                "eigensolver did not converge after {m} Lanczos vectors; \
                 residual norms {residuals:?} exceed {bound:.3e}"
            )));
        }
    }
    Err(Error::Numerical(
        "eigensolver ran out of orthogonal directions before convergence".into(),
    ))
}

/// The k_eig algebraically smallest eigenpairs of a sparse symmetric matrix.
pub fn smallest_eigenvectors(matrix: &CsrMatrix, k_eig: usize) -> Result<SpectralCache> {
    smallest_eigenvectors_with_threshold(matrix, k_eig, DENSE_EIG_THRESHOLD)
}

/// As [`smallest_eigenvectors`] with an explicit dense-path cutoff, mainly to
/// exercise the Lanczos path on small instances.
pub fn smallest_eigenvectors_with_threshold(
    matrix: &CsrMatrix,
    k_eig: usize,
    dense_threshold: usize,
) -> Result<SpectralCache> {
    let n = matrix.n();
    if k_eig == 0 || k_eig > n {
        return Err(Error::Config(format!(
            "k_eig must lie in 1..={n}, got {k_eig}"
        )));
    }
    let (values, vector_rows) = if n <= dense_threshold {
        let (vals, vecs) = linalg::sym_eig_ascending(n, &matrix.to_dense());
        (vals[..k_eig].to_vec(), vecs[..k_eig].to_vec())
    } else {
        let scale = matrix.norm_one();
        let max_dim = (4 * k_eig + 80).clamp(k_eig, 320).min(n);
        lanczos_smallest(matrix, k_eig, &[], 1e-8, scale, max_dim)?
    };
    // vector_rows[t] spans all nodes; transpose into per-node embedding rows
    let mut embed = Tensor::zeros(n, k_eig);
    for (t, v) in vector_rows.iter().enumerate() {
        for i in 0..n {
            embed.set(i, t, v[i]);
        }
    }
    Ok(SpectralCache {
        eigenvalues: values,
        eigenvectors: embed,
        source: SpectralSource::UnnormalizedLaplacian,
    })
}

/// Mean cosine similarity of each embedding row against all rows:
/// score_i = (1/n) sum_j (v_i . v_j) / (|v_i| |v_j| + eps).
///
/// Computed without materializing the n x n similarity matrix: rows with a
/// healthy norm go through two folded sums (the second is the first-order
/// correction in eps), tiny-norm rows fall back to exact per-row sums. The
/// result matches the quadratic-time definition to well under 1e-8.
pub fn algebraic_jaccard_scores(cache: &SpectralCache, epsilon: f64) -> SimilarityScores {
    let v = &cache.eigenvectors;
    let n = v.rows();
    let k = v.cols();
    let norms: Vec<f64> = (0..n)
        .map(|i| v.row_slice(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();

    // eps / (a_i a_j) stays <= 4e-6 for safe pairs, keeping the first-order
    // expansion of 1/(a_i a_j + eps) accurate to ~1e-11 per term
    let safe_norm = 5e-3_f64.max(1e3 * epsilon);
    let safe: Vec<bool> = norms.iter().map(|&a| a >= safe_norm).collect();

    let mut z1 = vec![0.0f64; k]; // sum of v_j / a_j over safe j
    let mut z2 = vec![0.0f64; k]; // sum of v_j / a_j^2 over safe j
    for j in 0..n {
        if safe[j] {
            let row = v.row_slice(j);
            for t in 0..k {
                z1[t] += row[t] / norms[j];
                z2[t] += row[t] / (norms[j] * norms[j]);
            }
        }
    }
    let unsafe_rows: Vec<usize> = (0..n).filter(|&j| !safe[j]).collect();

    let exact_term = |i: usize, j: usize| -> f64 {
        let num = dot(v.row_slice(i), v.row_slice(j));
        num / (norms[i] * norms[j] + epsilon)
    };

    let mut mean = vec![0.0f64; n];
    for i in 0..n {
        let total = if safe[i] {
            let row = v.row_slice(i);
            let mut folded = 0.0;
            let mut correction = 0.0;
            for t in 0..k {
                folded += row[t] / norms[i] * z1[t];
                correction += row[t] / (norms[i] * norms[i]) * z2[t];
            }
            let mut sum = folded - epsilon * correction;
            for &j in &unsafe_rows {
                sum += exact_term(i, j);
            }
            sum
        } else {
            (0..n).map(|j| exact_term(i, j)).sum()
        };
        mean[i] = total / n as f64;
    }
    SimilarityScores {
        mean_similarity: mean,
        epsilon,
    }
}

/// For each class, the `budget[c]` train-split nodes of that class with the
/// highest mean similarity; ties go to the lower node id.
pub fn select_nodes(
    g: &GraphBundle,
    scores: &SimilarityScores,
    budget: &[usize],
) -> Result<SelectionResult> {
    if budget.len() != g.num_classes {
        return Err(Error::Config(format!(
            "budget has {} classes, bundle has {}",
            budget.len(),
            g.num_classes
        )));
    }
    let mut selected = Vec::with_capacity(budget.iter().sum());
    for (class, &want) in budget.iter().enumerate() {
        let mut candidates = g.train_nodes_of_class(class);
        if want > candidates.len() {
            return Err(Error::Config(format!(
                "budget {} for class {} exceeds its {} train nodes",
                want,
                class,
                candidates.len()
            )));
        }
        candidates.sort_by(|&a, &b| {
            scores.mean_similarity[b]
                .partial_cmp(&scores.mean_similarity[a])
                .expect("scores are finite")
                .then(a.cmp(&b))
        });
        selected.extend_from_slice(&candidates[..want]);
    }
    Ok(build_selection(g, selected, budget))
}

/// Seeded class-stratified sample of train nodes; the selection mode that
/// predates similarity guidance, kept for ablations.
pub fn random_selection(
    g: &GraphBundle,
    budget: &[usize],
    rng: &mut Rng,
) -> Result<SelectionResult> {
    if budget.len() != g.num_classes {
        return Err(Error::Config(format!(
            "budget has {} classes, bundle has {}",
            budget.len(),
            g.num_classes
        )));
    }
    let mut selected = Vec::with_capacity(budget.iter().sum());
    for (class, &want) in budget.iter().enumerate() {
        let candidates = g.train_nodes_of_class(class);
        if want > candidates.len() {
            return Err(Error::Config(format!(
                "budget {} for class {} exceeds its {} train nodes",
                want,
                class,
                candidates.len()
            )));
        }
        selected.extend(rng.sample(&candidates, want));
    }
    Ok(build_selection(g, selected, budget))
}

fn build_selection(g: &GraphBundle, selected: Vec<usize>, budget: &[usize]) -> SelectionResult {
    let mut init = Tensor::zeros(selected.len(), g.num_features);
    for (row, &node) in selected.iter().enumerate() {
        let feat = g.feature_row(node);
        init.data_mut()[row * g.num_features..(row + 1) * g.num_features].copy_from_slice(&feat);
    }
    SelectionResult {
        selected,
        per_class_budget: budget.to_vec(),
        init_features: init,
    }
}

/// Anything that exposes a symmetric adjacency.
pub trait HasAdjacency {
    fn adjacency(&self) -> Cow<'_, CsrMatrix>;
}

impl HasAdjacency for GraphBundle {
    fn adjacency(&self) -> Cow<'_, CsrMatrix> {
        Cow::Borrowed(&self.adjacency)
    }
}

impl HasAdjacency for WeightedGraph {
    fn adjacency(&self) -> Cow<'_, CsrMatrix> {
        Cow::Owned(self.to_csr())
    }
}

/// Spectral gap 1 - lambda_2 of the symmetrically normalized (self-loop-free)
/// adjacency. On connected graphs the top eigenvalue is 1, so the gap lies in
/// [0, 2].
pub fn spectral_gap<G: HasAdjacency>(graph: &G) -> Result<f64> {
    spectral_gap_csr(graph.adjacency().as_ref())
}

/// [`spectral_gap`] on a raw adjacency matrix.
pub fn spectral_gap_csr(adj: &CsrMatrix) -> Result<f64> {
    let lambda2 = second_largest_normalized_eigenvalue(adj)?;
    Ok(1.0 - lambda2)
}

/// Second-largest eigenvalue of D^{-1/2} A D^{-1/2}.
pub fn second_largest_normalized_eigenvalue(adj: &CsrMatrix) -> Result<f64> {
    let n = adj.n();
    if n < 2 {
        return Err(Error::Validation(
            "spectral gap needs at least 2 nodes".into(),
        ));
    }
    let normalized = crate::graph::normalize_symmetric(adj, false);
    if n <= GAP_DENSE_THRESHOLD {
        let (vals, _) = linalg::sym_eig_ascending(n, &normalized.to_dense());
        return Ok(vals[n - 2]);
    }

    // Large instance: one deflated iterative solve on the edge-bearing part.
    if adj.nnz() == 0 {
        return Ok(0.0); // spectrum is all zeros
    }
    let degrees = adj.row_sums();
    let isolated = degrees.iter().filter(|&&d| d == 0.0).count();
    let (comp, _) = adj.components();
    let mut edge_comps: Vec<usize> = (0..n)
        .filter(|&i| degrees[i] > 0.0)
        .map(|i| comp[i])
        .collect();
    edge_comps.sort_unstable();
    edge_comps.dedup();
    if edge_comps.len() >= 2 {
        return Ok(1.0); // two Perron eigenvalues at 1
    }
    // single edge-bearing component: its top eigenvector is D^{1/2} 1
    let nodes: Vec<usize> = (0..n).filter(|&i| comp[i] == edge_comps[0]).collect();
    let sub = normalized.induced(&nodes);
    let mut u1: Vec<f64> = nodes.iter().map(|&i| degrees[i].sqrt()).collect();
    let nu = norm(&u1);
    for x in u1.iter_mut() {
        *x /= nu;
    }
    let neg = Negated(&sub);
    let max_dim = 400.min(sub.n());
    let (vals, _) = lanczos_smallest(&neg, 1, &[u1], 3e-8, 1.0, max_dim)?;
    let lambda2_comp = -vals[0];
    // isolated nodes contribute zero eigenvalues to the global spectrum
    Ok(if isolated > 0 {
        lambda2_comp.max(0.0)
    } else {
        lambda2_comp
    })
}
