//! Seeded synthetic dataset generators: stochastic block model and
//! preferential attachment. Both emit full bundles (edges, class-informative
//! Gaussian features, labels, stratified 80/10/10 split) so every other
//! command can run on them.

use crate::error::{Error, Result};
use crate::graph::{GraphBundle, Split};
use crate::rng::Rng;

/// Mean separation of the per-class feature centroids.
const FEATURE_MEAN_SCALE: f64 = 1.0;
/// Per-coordinate feature noise when unspecified.
pub const DEFAULT_FEATURE_NOISE: f64 = 0.5;

fn class_features(
    labels: &[usize],
    num_classes: usize,
    num_features: usize,
    noise: f64,
    rng: &mut Rng,
) -> Vec<f32> {
    // one random unit direction per class; near-orthogonal for d >> classes
    let mut centroids = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let raw: Vec<f64> = (0..num_features).map(|_| rng.normal()).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        centroids.push(
            raw.iter()
                .map(|x| FEATURE_MEAN_SCALE * x / norm)
                .collect::<Vec<f64>>(),
        );
    }
    let mut out = Vec::with_capacity(labels.len() * num_features);
    for &y in labels {
        for k in 0..num_features {
            out.push((centroids[y][k] + noise * rng.normal()) as f32);
        }
    }
    out
}

fn stratified_split(labels: &[usize], num_classes: usize, rng: &mut Rng) -> Split {
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for c in 0..num_classes {
        let mut ids: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        rng.shuffle(&mut ids);
        let n = ids.len();
        let n_train = (n * 8) / 10;
        let n_val = n / 10;
        train.extend_from_slice(&ids[..n_train]);
        val.extend_from_slice(&ids[n_train..n_train + n_val]);
        test.extend_from_slice(&ids[n_train + n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Split { train, val, test }
}

/// Stochastic block model with `blocks` equal-size communities; block
/// membership doubles as the class label.
pub fn generate_sbm(
    name: &str,
    nodes: usize,
    blocks: usize,
    p_in: f64,
    p_out: f64,
    num_features: usize,
    seed: u64,
) -> Result<GraphBundle> {
    generate_sbm_with_noise(
        name,
        nodes,
        blocks,
        p_in,
        p_out,
        num_features,
        DEFAULT_FEATURE_NOISE,
        seed,
    )
}

/// [`generate_sbm`] with an explicit per-coordinate feature noise; higher
/// noise makes node classification harder and widens generalization gaps.
#[allow(clippy::too_many_arguments)]
pub fn generate_sbm_with_noise(
    name: &str,
    nodes: usize,
    blocks: usize,
    p_in: f64,
    p_out: f64,
    num_features: usize,
    noise: f64,
    seed: u64,
) -> Result<GraphBundle> {
    if blocks == 0 || nodes < 2 * blocks {
        return Err(Error::Config(format!(
            "need at least 2 nodes per block ({nodes} nodes, {blocks} blocks)"
        )));
    }
    if !(0.0..=1.0).contains(&p_in) || !(0.0..=1.0).contains(&p_out) {
        return Err(Error::Config("probabilities must lie in [0, 1]".into()));
    }
    let root = Rng::new(seed);
    let labels: Vec<usize> = (0..nodes).map(|i| i * blocks / nodes).collect();

    let mut edge_rng = root.split("edges", 0);
    let mut edges = Vec::new();
    for i in 0..nodes {
        for j in (i + 1)..nodes {
            let p = if labels[i] == labels[j] { p_in } else { p_out };
            if edge_rng.uniform() < p {
                edges.push((i, j));
            }
        }
    }

    let features = class_features(
        &labels,
        blocks,
        num_features,
        noise,
        &mut root.split("features", 0),
    );
    let split = stratified_split(&labels, blocks, &mut root.split("split", 0));
    GraphBundle::new(name, nodes, num_features, blocks, &edges, features, labels, split)
}

/// Preferential attachment: a complete seed graph on `m` nodes, then each
/// new node attaches `m` edges to distinct existing nodes with probability
/// proportional to degree. Labels are assigned uniformly at random (after
/// guaranteeing every class appears).
pub fn generate_ba(
    name: &str,
    nodes: usize,
    m: usize,
    num_classes: usize,
    num_features: usize,
    seed: u64,
) -> Result<GraphBundle> {
    generate_ba_with_noise(name, nodes, m, num_classes, num_features, DEFAULT_FEATURE_NOISE, seed)
}

/// [`generate_ba`] with explicit feature noise.
#[allow(clippy::too_many_arguments)]
pub fn generate_ba_with_noise(
    name: &str,
    nodes: usize,
    m: usize,
    num_classes: usize,
    num_features: usize,
    noise: f64,
    seed: u64,
) -> Result<GraphBundle> {
    if m == 0 || nodes <= m {
        return Err(Error::Config(format!(
            "preferential attachment needs nodes > m >= 1 (got {nodes}, {m})"
        )));
    }
    if num_classes == 0 || nodes < num_classes {
        return Err(Error::Config("need at least one node per class".into()));
    }
    let root = Rng::new(seed);
    let mut edge_rng = root.split("edges", 0);

    let mut edges: Vec<(usize, usize)> = Vec::new();
    // endpoint multiset for degree-proportional sampling
    let mut endpoints: Vec<usize> = Vec::new();
    for i in 0..m {
        for j in (i + 1)..m {
            edges.push((i, j));
            endpoints.push(i);
            endpoints.push(j);
        }
    }
    for new in m..nodes {
        let mut targets: Vec<usize> = Vec::with_capacity(m);
        while targets.len() < m {
            let t = endpoints[edge_rng.index(endpoints.len())];
            if !targets.contains(&t) {
                targets.push(t);
            }
        }
        for &t in &targets {
            edges.push((t.min(new), t.max(new)));
            endpoints.push(t);
            endpoints.push(new);
        }
    }

    let mut label_rng = root.split("labels", 0);
    let mut labels: Vec<usize> = (0..nodes).map(|_| label_rng.index(num_classes)).collect();
    for c in 0..num_classes {
        labels[c] = c; // every class occurs
    }

    let features = class_features(
        &labels,
        num_classes,
        num_features,
        noise,
        &mut root.split("features", 0),
    );
    let split = stratified_split(&labels, num_classes, &mut root.split("split", 0));
    GraphBundle::new(name, nodes, num_features, num_classes, &edges, features, labels, split)
}
