//! Evaluation of condensed graphs: link-prediction utility, node and link
//! membership-inference attacks, graph statistics, DOT export and
//! efficiency measurements.
//!
//! The utility protocol trains a two-layer graph-convolution encoder with a
//! dot-product decoder either on the original train edges or on the
//! condensed graph, then scores held-out original edges. A condensed-trained
//! encoder never sees original features or edges during training; the
//! original graph enters only at transfer time.
//!
//! Both attacks are threshold attackers: they query the target, fit a single
//! threshold on a calibration half and report on the held-out half. Link
//! membership is reported as F1 (ties predict non-member), node membership
//! as accuracy.

use std::collections::HashSet;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use serde::Serialize;

use crate::autodiff::{sigmoid, Tape, Tensor};
use crate::condense::CondensedGraph;
use crate::error::{Error, Result};
use crate::graph::{normalize_symmetric, GraphBundle, WeightedGraph};
use crate::rng::Rng;
use crate::sparse::CsrMatrix;

const LP_HIDDEN: usize = 128;
const LP_EPOCHS: usize = 100;
const LP_LR: f64 = 0.001;
const CLF_HIDDEN: usize = 256;
const CLF_EPOCHS: usize = 200;
const CLF_LR: f64 = 0.01;

/// Round to `sig` significant digits (report serialization policy).
pub fn round_sig(x: f64, sig: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let magnitude = x.abs().log10().floor() as i32;
    let factor = 10f64.powi(sig - 1 - magnitude);
    (x * factor).round() / factor
}

/// Positive edges split 0.7/0.1/0.2 with equal-count sampled negative
/// non-edges per partition.
#[derive(Debug, Clone)]
pub struct EdgeSplit {
    pub train_pos: Vec<(usize, usize)>,
    pub val_pos: Vec<(usize, usize)>,
    pub test_pos: Vec<(usize, usize)>,
    pub train_neg: Vec<(usize, usize)>,
    pub val_neg: Vec<(usize, usize)>,
    pub test_neg: Vec<(usize, usize)>,
    pub seed: u64,
}

fn pair_key(n: usize, u: usize, v: usize) -> u64 {
    (u.min(v) * n + u.max(v)) as u64
}

/// Sample `count` distinct non-edges (u < v) uniformly with rejection.
fn sample_non_edges(
    n: usize,
    forbidden: &HashSet<u64>,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::with_capacity(count);
    let mut taken: HashSet<u64> = HashSet::with_capacity(count * 2);
    let mut attempts = 0usize;
    let max_attempts = 200 * count + 10_000;
    while out.len() < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Eval(format!(
                "could not sample {count} non-edges after {attempts} attempts \
                 (graph too dense or too small)"
            )));
        }
        let u = rng.index(n);
        let v = rng.index(n);
        if u == v {
            continue;
        }
        let key = pair_key(n, u, v);
        if forbidden.contains(&key) || taken.contains(&key) {
            continue;
        }
        taken.insert(key);
        out.push((u.min(v), u.max(v)));
    }
    Ok(out)
}

impl EdgeSplit {
    /// Shuffle the undirected edges with the given seed and cut 70/10/20,
    /// then draw one verified non-edge per positive, disjoint across
    /// partitions.
    pub fn build(g: &GraphBundle, seed: u64) -> Result<EdgeSplit> {
        let mut edges = g.edges();
        if edges.is_empty() {
            return Err(Error::Eval("graph has no edges to split".into()));
        }
        let mut rng = Rng::new(seed);
        rng.shuffle(&mut edges);
        let e = edges.len();
        let n_train = (e * 7) / 10;
        let n_val = e / 10;
        let train_pos = edges[..n_train].to_vec();
        let val_pos = edges[n_train..n_train + n_val].to_vec();
        let test_pos = edges[n_train + n_val..].to_vec();
        if train_pos.is_empty() {
            return Err(Error::Eval("no train edges after splitting".into()));
        }

        let forbidden: HashSet<u64> = g
            .edges()
            .iter()
            .map(|&(u, v)| pair_key(g.num_nodes, u, v))
            .collect();
        let negatives = sample_non_edges(g.num_nodes, &forbidden, e, &mut rng)?;
        let train_neg = negatives[..n_train].to_vec();
        let val_neg = negatives[n_train..n_train + n_val].to_vec();
        let test_neg = negatives[n_train + n_val..].to_vec();
        Ok(EdgeSplit {
            train_pos,
            val_pos,
            test_pos,
            train_neg,
            val_neg,
            test_neg,
            seed,
        })
    }

    /// Propagation matrix that exposes only train edges (plus self-loops).
    pub fn train_propagation(&self, num_nodes: usize) -> CsrMatrix {
        let adj = CsrMatrix::symmetric_adjacency(num_nodes, &self.train_pos);
        normalize_symmetric(&adj, true)
    }
}

/// Weighted normalized synthetic adjacency with the standard unit self-loop:
/// D^{-1/2} (A' + I) D^{-1/2}.
pub fn condensed_propagation(cond: &CondensedGraph) -> CsrMatrix {
    let b = cond.num_nodes();
    let mut triplets = Vec::new();
    for i in 0..b {
        for j in 0..b {
            let v = if i == j {
                1.0
            } else {
                cond.adjacency.weights.get(i, j)
            };
            triplets.push((i, j, v));
        }
    }
    let weighted = CsrMatrix::from_triplets(b, &triplets);
    normalize_symmetric(&weighted, false)
}

/// Which positive/negative partition to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgePartition {
    Train,
    Val,
    Test,
}

// ---------------------------------------------------------------------------
// link prediction
// ---------------------------------------------------------------------------

/// Two-layer graph-convolution encoder with a symmetric dot-product decoder.
#[derive(Debug, Clone)]
pub struct LpModel {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl LpModel {
    /// Node embeddings over an arbitrary propagation matrix.
    pub fn embeddings(&self, prop: &CsrMatrix, features: &Tensor) -> Tensor {
        let t1 = features.matmul(&self.w1);
        let t1b = add_row_broadcast(&t1, &self.b1);
        let h1 = Tensor::from_vec(
            t1b.rows(),
            t1b.cols(),
            prop.mul_dense(t1b.data(), t1b.cols()),
        )
        .map(|x| x.max(0.0));
        let t2 = h1.matmul(&self.w2);
        let t2b = add_row_broadcast(&t2, &self.b2);
        Tensor::from_vec(
            t2b.rows(),
            t2b.cols(),
            prop.mul_dense(t2b.data(), t2b.cols()),
        )
    }

    /// sigma(z_u . z_v); symmetric in (u, v) by construction.
    pub fn score(embeddings: &Tensor, u: usize, v: usize) -> f64 {
        let dot: f64 = embeddings
            .row_slice(u)
            .iter()
            .zip(embeddings.row_slice(v))
            .map(|(a, b)| a * b)
            .sum();
        sigmoid(dot)
    }
}

fn add_row_broadcast(t: &Tensor, row: &Tensor) -> Tensor {
    let mut out = t.clone();
    for i in 0..t.rows() {
        for j in 0..t.cols() {
            let v = out.get(i, j) + row.get(0, j);
            out.set(i, j, v);
        }
    }
    out
}

/// Adam over a fixed list of parameter tensors.
struct Adam {
    lr: f64,
    t: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    fn new(lr: f64, params: &[&Tensor]) -> Self {
        Adam {
            lr,
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
        }
    }

    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for k in 0..g.len() {
                let gk = g.data()[k];
                m.data_mut()[k] = B1 * m.data()[k] + (1.0 - B1) * gk;
                v.data_mut()[k] = B2 * v.data()[k] + (1.0 - B2) * gk * gk;
                let mhat = m.data()[k] / bc1;
                let vhat = v.data()[k] / bc2;
                p.data_mut()[k] -= self.lr * mhat / (vhat.sqrt() + EPS);
            }
        }
    }
}

/// Shared LP training core: binary cross-entropy over the given positive and
/// negative pairs, full-batch Adam.
fn train_gcn_lp(
    prop: Rc<CsrMatrix>,
    features: &Tensor,
    pos: &[(usize, usize)],
    neg: &[(usize, usize)],
    seed: u64,
    epochs: usize,
) -> LpModel {
    let d = features.cols();
    let mut rng = Rng::new(seed);
    let mut model = LpModel {
        w1: Tensor::rand_uniform(&mut rng, d, LP_HIDDEN, 1.0 / (d as f64).sqrt()),
        b1: Tensor::zeros(1, LP_HIDDEN),
        w2: Tensor::rand_uniform(&mut rng, LP_HIDDEN, LP_HIDDEN, 1.0 / (LP_HIDDEN as f64).sqrt()),
        b2: Tensor::zeros(1, LP_HIDDEN),
    };
    let mut adam = Adam::new(LP_LR, &[&model.w1, &model.b1, &model.w2, &model.b2]);

    let us: Vec<usize> = pos.iter().chain(neg).map(|&(u, _)| u).collect();
    let vs: Vec<usize> = pos.iter().chain(neg).map(|&(_, v)| v).collect();
    let mut y = Tensor::zeros(us.len(), 1);
    for i in 0..pos.len() {
        y.set(i, 0, 1.0);
    }

    for _ in 0..epochs {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let w1 = tape.leaf(model.w1.clone());
        let b1 = tape.leaf(model.b1.clone());
        let w2 = tape.leaf(model.w2.clone());
        let b2 = tape.leaf(model.b2.clone());

        let t1 = tape.matmul(x, w1);
        let t1b = tape.add_row_vec(t1, b1);
        let h1 = tape.spmm_sym(prop.clone(), t1b);
        let a1 = tape.relu(h1);
        let t2 = tape.matmul(a1, w2);
        let t2b = tape.add_row_vec(t2, b2);
        let z = tape.spmm_sym(prop.clone(), t2b);

        let zu = tape.gather_rows(z, us.clone());
        let zv = tape.gather_rows(z, vs.clone());
        let prod = tape.mul(zu, zv);
        let scores = tape.row_sum(prod);
        // BCE with logits: softplus(s) - y s
        let yv = tape.constant(y.clone());
        let sp = tape.softplus(scores);
        let ys = tape.mul(yv, scores);
        let diff = tape.sub(sp, ys);
        let total = tape.sum_all(diff);
        let loss = tape.scale(total, 1.0 / us.len() as f64);

        let grads = tape.backward(loss).expect("lp loss is finite");
        let gs = [
            grads.get(w1, &tape),
            grads.get(b1, &tape),
            grads.get(w2, &tape),
            grads.get(b2, &tape),
        ];
        adam.step(
            &mut [&mut model.w1, &mut model.b1, &mut model.w2, &mut model.b2],
            &gs,
        );
    }
    model
}

/// Train on the original graph: propagation and supervision both come from
/// the train partition of the edge split.
pub fn train_lp_bundle(g: &GraphBundle, split: &EdgeSplit, seed: u64) -> LpModel {
    let prop = Rc::new(split.train_propagation(g.num_nodes));
    let features = Tensor::from_vec(g.num_nodes, g.num_features, g.features_f64());
    train_gcn_lp(prop, &features, &split.train_pos, &split.train_neg, seed, LP_EPOCHS)
}

/// Train on a condensed graph: propagation uses the weighted normalized
/// synthetic adjacency; pairs above `edge_threshold` supervise as positives,
/// pairs at or below it as negatives.
pub fn train_lp_condensed(
    cond: &CondensedGraph,
    edge_threshold: f64,
    seed: u64,
) -> Result<LpModel> {
    let b = cond.num_nodes();
    let w = &cond.adjacency.weights;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..b {
        for j in (i + 1)..b {
            if w.get(i, j) > edge_threshold {
                pos.push((i, j));
            } else {
                neg.push((i, j));
            }
        }
    }
    if pos.is_empty() {
        return Err(Error::Eval(format!(
            "no condensed edges above threshold {edge_threshold}; try a lower threshold"
        )));
    }
    if neg.is_empty() {
        log::warn!("condensed graph is complete above threshold {edge_threshold}; training without negatives");
    }
    let prop = Rc::new(condensed_propagation(cond));
    Ok(train_gcn_lp(prop, &cond.features, &pos, &neg, seed, LP_EPOCHS))
}

/// F1 at decision threshold 0.5 over the balanced positives/negatives of one
/// partition, scoring original edges with the encoder transferred onto the
/// original graph (train-edge propagation only; held-out edges stay hidden).
pub fn transfer_f1(model: &LpModel, g: &GraphBundle, split: &EdgeSplit, part: EdgePartition) -> f64 {
    let prop = split.train_propagation(g.num_nodes);
    let features = Tensor::from_vec(g.num_nodes, g.num_features, g.features_f64());
    let z = model.embeddings(&prop, &features);
    let (pos, neg) = match part {
        EdgePartition::Train => (&split.train_pos, &split.train_neg),
        EdgePartition::Val => (&split.val_pos, &split.val_neg),
        EdgePartition::Test => (&split.test_pos, &split.test_neg),
    };
    f1_from_scores(
        &pos.iter().map(|&(u, v)| LpModel::score(&z, u, v)).collect::<Vec<_>>(),
        &neg.iter().map(|&(u, v)| LpModel::score(&z, u, v)).collect::<Vec<_>>(),
    )
}

/// Binary F1 of the positive class at threshold 0.5.
pub fn f1_from_scores(pos_scores: &[f64], neg_scores: &[f64]) -> f64 {
    let tp = pos_scores.iter().filter(|&&s| s > 0.5).count();
    let fp = neg_scores.iter().filter(|&&s| s > 0.5).count();
    let fn_ = pos_scores.len() - tp;
    if 2 * tp + fp + fn_ == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// What a link-prediction experiment trains on.
pub enum LpTarget<'a> {
    Original(&'a GraphBundle),
    Condensed(&'a CondensedGraph),
}

/// Metric summary over repeated seeded runs. The mean and standard deviation
/// (population) always match the stored per-run values.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub metric: String,
    pub runs: Vec<f64>,
    pub mean: f64,
    pub std_dev: f64,
}

/// Attack summaries share the report shape.
pub type AttackReport = Report;

impl Report {
    pub fn from_runs(metric: impl Into<String>, runs: Vec<f64>) -> Report {
        assert!(!runs.is_empty(), "report needs at least one run");
        let mean = runs.iter().sum::<f64>() / runs.len() as f64;
        let var = runs.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / runs.len() as f64;
        Report {
            metric: metric.into(),
            runs,
            mean,
            std_dev: var.sqrt(),
        }
    }

    /// Recompute the summary from the stored runs and compare.
    pub fn validate(&self) -> Result<()> {
        let fresh = Report::from_runs(self.metric.clone(), self.runs.clone());
        if (fresh.mean - self.mean).abs() > 1e-9 || (fresh.std_dev - self.std_dev).abs() > 1e-9 {
            return Err(Error::Validation(
                "report summary does not match its runs".into(),
            ));
        }
        Ok(())
    }

    /// Percent-scale "mean +- std" rendering used in result tables.
    pub fn format_percent(&self) -> String {
        format!("{:.2}\u{b1}{:.2}", self.mean * 100.0, self.std_dev * 100.0)
    }

    /// Copy with every float rounded to 6 significant digits, the report
    /// serialization policy.
    pub fn rounded(&self) -> Report {
        Report {
            metric: self.metric.clone(),
            runs: self.runs.iter().map(|&r| round_sig(r, 6)).collect(),
            mean: round_sig(self.mean, 6),
            std_dev: round_sig(self.std_dev, 6),
        }
    }
}

/// The full utility protocol: per run, re-split the original edges, train on
/// the target (original train edges or the condensed graph), transfer, and
/// score the held-out original test edges.
pub fn lp_report(
    target: &LpTarget,
    g: &GraphBundle,
    runs: usize,
    seed: u64,
    edge_threshold: f64,
) -> Result<Report> {
    let root = Rng::new(seed);
    let mut f1s = Vec::with_capacity(runs);
    for run in 0..runs {
        let run_seed = root.split("lp-run", run as u64).seed();
        let split = EdgeSplit::build(g, run_seed)?;
        let model = match target {
            LpTarget::Original(og) => train_lp_bundle(og, &split, run_seed),
            LpTarget::Condensed(c) => train_lp_condensed(c, edge_threshold, run_seed)?,
        };
        f1s.push(transfer_f1(&model, g, &split, EdgePartition::Test));
    }
    Ok(Report::from_runs("lp_f1", f1s))
}

// ---------------------------------------------------------------------------
// node classifier and membership-inference attacks
// ---------------------------------------------------------------------------

/// Two-layer graph-convolution node classifier (the MIA target).
#[derive(Debug, Clone)]
pub struct NodeClassifier {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl NodeClassifier {
    /// Class logits over an arbitrary propagation matrix.
    pub fn logits(&self, prop: &CsrMatrix, features: &Tensor) -> Tensor {
        let t1 = features.matmul(&self.w1);
        let t1b = add_row_broadcast(&t1, &self.b1);
        let h1 = Tensor::from_vec(
            t1b.rows(),
            t1b.cols(),
            prop.mul_dense(t1b.data(), t1b.cols()),
        )
        .map(|x| x.max(0.0));
        let t2 = h1.matmul(&self.w2);
        let t2b = add_row_broadcast(&t2, &self.b2);
        Tensor::from_vec(
            t2b.rows(),
            t2b.cols(),
            prop.mul_dense(t2b.data(), t2b.cols()),
        )
    }

    /// Max softmax probability per node.
    pub fn confidences(&self, prop: &CsrMatrix, features: &Tensor) -> Vec<f64> {
        let z = self.logits(prop, features);
        (0..z.rows())
            .map(|i| {
                let row = z.row_slice(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
                row.iter().map(|x| (x - max).exp() / total).fold(0.0, f64::max)
            })
            .collect()
    }
}

fn train_gcn_classifier(
    prop: Rc<CsrMatrix>,
    features: &Tensor,
    train_idx: &[usize],
    labels: &[usize],
    num_classes: usize,
    seed: u64,
) -> NodeClassifier {
    let d = features.cols();
    let mut rng = Rng::new(seed);
    let mut model = NodeClassifier {
        w1: Tensor::rand_uniform(&mut rng, d, CLF_HIDDEN, 1.0 / (d as f64).sqrt()),
        b1: Tensor::zeros(1, CLF_HIDDEN),
        w2: Tensor::rand_uniform(
            &mut rng,
            CLF_HIDDEN,
            num_classes,
            1.0 / (CLF_HIDDEN as f64).sqrt(),
        ),
        b2: Tensor::zeros(1, num_classes),
    };
    let train_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let mut adam = Adam::new(CLF_LR, &[&model.w1, &model.b1, &model.w2, &model.b2]);

    for _ in 0..CLF_EPOCHS {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let w1 = tape.leaf(model.w1.clone());
        let b1 = tape.leaf(model.b1.clone());
        let w2 = tape.leaf(model.w2.clone());
        let b2 = tape.leaf(model.b2.clone());

        let t1 = tape.matmul(x, w1);
        let t1b = tape.add_row_vec(t1, b1);
        let h1 = tape.spmm_sym(prop.clone(), t1b);
        let a1 = tape.relu(h1);
        let t2 = tape.matmul(a1, w2);
        let t2b = tape.add_row_vec(t2, b2);
        let z = tape.spmm_sym(prop.clone(), t2b);
        let zt = tape.gather_rows(z, train_idx.to_vec());
        let loss = tape.cross_entropy_logits(zt, train_labels.clone());

        let grads = tape.backward(loss).expect("classifier loss is finite");
        let gs = [
            grads.get(w1, &tape),
            grads.get(b1, &tape),
            grads.get(w2, &tape),
            grads.get(b2, &tape),
        ];
        adam.step(
            &mut [&mut model.w1, &mut model.b1, &mut model.w2, &mut model.b2],
            &gs,
        );
    }
    model
}

/// Classifier trained transductively on the original graph's train labels.
pub fn train_node_classifier_bundle(g: &GraphBundle, seed: u64) -> NodeClassifier {
    let prop = Rc::new(normalize_symmetric(&g.adjacency, true));
    let features = Tensor::from_vec(g.num_nodes, g.num_features, g.features_f64());
    train_gcn_classifier(
        prop,
        &features,
        &g.split.train,
        &g.labels,
        g.num_classes,
        seed,
    )
}

/// Classifier trained on the condensed graph (every condensed node is
/// labeled training data).
pub fn train_node_classifier_condensed(cond: &CondensedGraph, seed: u64) -> NodeClassifier {
    let b = cond.num_nodes();
    let prop = Rc::new(condensed_propagation(cond));
    let all: Vec<usize> = (0..b).collect();
    train_gcn_classifier(
        prop,
        &cond.features,
        &all,
        &cond.labels,
        cond.num_classes,
        seed,
    )
}

/// Split a pool into calibration and evaluation halves after a seeded
/// shuffle.
fn halves<T: Copy>(pool: &[T], rng: &mut Rng) -> (Vec<T>, Vec<T>) {
    let mut shuffled: Vec<T> = pool.to_vec();
    rng.shuffle(&mut shuffled);
    let mid = shuffled.len() / 2;
    let cal = shuffled[..mid].to_vec();
    let eva = shuffled[mid..].to_vec();
    (cal, eva)
}

fn accuracy_at(members: &[f64], non_members: &[f64], threshold: f64) -> f64 {
    let tp = members.iter().filter(|&&c| c > threshold).count();
    let tn = non_members.iter().filter(|&&c| c <= threshold).count();
    (tp + tn) as f64 / (members.len() + non_members.len()) as f64
}

fn f1_at(members: &[f64], non_members: &[f64], threshold: f64) -> f64 {
    let tp = members.iter().filter(|&&s| s > threshold).count();
    let fp = non_members.iter().filter(|&&s| s > threshold).count();
    let fn_ = members.len() - tp;
    if 2 * tp + fp + fn_ == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// Threshold candidates are exactly the observed calibration scores.
/// Predictions are "member iff score > threshold", so ties always fall to
/// non-member; a constant-score target therefore ends up predicting nothing.
fn threshold_candidates(cal_members: &[f64], cal_non: &[f64]) -> Vec<f64> {
    let mut cands: Vec<f64> = cal_members.iter().chain(cal_non).copied().collect();
    cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cands.dedup();
    cands
}

/// Node membership-inference attack: threshold the target classifier's
/// softmax confidence, querying with features propagated over the original
/// graph. Balanced member (train) / non-member (test) samples, threshold fit
/// on a calibration half, accuracy reported on the evaluation half.
pub fn attack_mia(
    target: &NodeClassifier,
    g: &GraphBundle,
    runs: usize,
    seed: u64,
) -> Result<AttackReport> {
    if g.split.test.len() < 2 {
        return Err(Error::Eval(
            "node membership attack needs at least 2 test (non-member) nodes".into(),
        ));
    }
    let prop = normalize_symmetric(&g.adjacency, true);
    let features = Tensor::from_vec(g.num_nodes, g.num_features, g.features_f64());
    let conf = target.confidences(&prop, &features);

    let root = Rng::new(seed);
    let k = g.split.train.len().min(g.split.test.len());
    let mut accs = Vec::with_capacity(runs);
    for run in 0..runs {
        let mut rng = root.split("mia-run", run as u64);
        let members = rng.sample(&g.split.train, k);
        let non_members = rng.sample(&g.split.test, k);
        let (cal_m, eval_m) = halves(&members, &mut rng);
        let (cal_n, eval_n) = halves(&non_members, &mut rng);
        let cal_m: Vec<f64> = cal_m.iter().map(|&i| conf[i]).collect();
        let cal_n: Vec<f64> = cal_n.iter().map(|&i| conf[i]).collect();
        let eval_m: Vec<f64> = eval_m.iter().map(|&i| conf[i]).collect();
        let eval_n: Vec<f64> = eval_n.iter().map(|&i| conf[i]).collect();

        let mut best = (f64::NEG_INFINITY, 0.0);
        for t in threshold_candidates(&cal_m, &cal_n) {
            let acc = accuracy_at(&cal_m, &cal_n, t);
            if acc > best.0 {
                best = (acc, t);
            }
        }
        accs.push(accuracy_at(&eval_m, &eval_n, best.1));
    }
    Ok(Report::from_runs("mia_accuracy", accs))
}

/// Link membership-inference attack: threshold the target link predictor's
/// scores on member edges (original train edges) versus verified non-edges
/// held out from every training set. Threshold fit on a calibration half by
/// F1, F1 reported on the evaluation half; ties predict non-member.
pub fn attack_lmia(
    target: &LpModel,
    g: &GraphBundle,
    split: &EdgeSplit,
    runs: usize,
    seed: u64,
) -> Result<AttackReport> {
    let prop = split.train_propagation(g.num_nodes);
    let features = Tensor::from_vec(g.num_nodes, g.num_features, g.features_f64());
    let z = target.embeddings(&prop, &features);

    // non-member candidates must avoid true edges and every sampled negative
    let mut forbidden: HashSet<u64> = g
        .edges()
        .iter()
        .map(|&(u, v)| pair_key(g.num_nodes, u, v))
        .collect();
    for (u, v) in split
        .train_neg
        .iter()
        .chain(&split.val_neg)
        .chain(&split.test_neg)
    {
        forbidden.insert(pair_key(g.num_nodes, *u, *v));
    }

    let root = Rng::new(seed);
    let k = split.train_pos.len().min(4000).max(2);
    let mut f1s = Vec::with_capacity(runs);
    for run in 0..runs {
        let mut rng = root.split("lmia-run", run as u64);
        let members = rng.sample(&split.train_pos, k.min(split.train_pos.len()));
        let non_members = sample_non_edges(g.num_nodes, &forbidden, members.len(), &mut rng)?;

        let score = |edges: &[(usize, usize)]| -> Vec<f64> {
            edges.iter().map(|&(u, v)| LpModel::score(&z, u, v)).collect()
        };
        let (cal_m, eval_m) = halves(&members, &mut rng);
        let (cal_n, eval_n) = halves(&non_members, &mut rng);
        let cal_m = score(&cal_m);
        let cal_n = score(&cal_n);
        let eval_m = score(&eval_m);
        let eval_n = score(&eval_n);

        let mut best = (f64::NEG_INFINITY, 0.0);
        for t in threshold_candidates(&cal_m, &cal_n) {
            let f1 = f1_at(&cal_m, &cal_n, t);
            if f1 > best.0 {
                best = (f1, t);
            }
        }
        f1s.push(f1_at(&eval_m, &eval_n, best.1));
    }
    Ok(Report::from_runs("lmia_f1", f1s))
}

// ---------------------------------------------------------------------------
// statistics, export, efficiency
// ---------------------------------------------------------------------------

/// Node count, edge count and density.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub edges: usize,
    pub density: f64,
}

/// Stats of a binary graph: density = 2|E| / (n (n-1)).
pub fn stats_bundle(g: &GraphBundle) -> GraphStats {
    let n = g.num_nodes;
    let e = g.num_edges();
    let density = if n > 1 {
        2.0 * e as f64 / (n as f64 * (n - 1) as f64)
    } else {
        0.0
    };
    GraphStats {
        nodes: n,
        edges: e,
        density,
    }
}

/// Stats of a weighted graph: pairs above the threshold count as edges.
pub fn stats_weighted(w: &WeightedGraph, threshold: f64) -> GraphStats {
    let n = w.num_nodes;
    let mut edges = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            if w.get(i, j) > threshold {
                edges += 1;
            }
        }
    }
    let pairs = n * (n - 1) / 2;
    GraphStats {
        nodes: n,
        edges,
        density: if pairs > 0 {
            edges as f64 / pairs as f64
        } else {
            0.0
        },
    }
}

pub fn stats_condensed(cond: &CondensedGraph, threshold: f64) -> GraphStats {
    stats_weighted(&cond.to_weighted_graph(), threshold)
}

/// Write a DOT rendering where pen width grows linearly with edge weight;
/// edges at or below the threshold are omitted. Node and edge order is
/// deterministic.
pub fn export_dot(
    weights: &Tensor,
    path: impl AsRef<Path>,
    threshold: f64,
    graph_name: &str,
) -> Result<()> {
    let path = path.as_ref();
    let n = weights.rows();
    let mut out = String::new();
    out.push_str(&format!("graph {graph_name} {{\n"));
    out.push_str("  node [shape=point, width=0.12];\n");
    for i in 0..n {
        out.push_str(&format!("  {i};\n"));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let w = weights.get(i, j);
            if w > threshold {
                let penwidth = 0.5 + 4.0 * w;
                out.push_str(&format!(
                    "  {i} -- {j} [weight={}, penwidth={:.4}];\n",
                    round_sig(w, 6),
                    penwidth
                ));
            }
        }
    }
    out.push_str("}\n");
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn export_dot_condensed(
    cond: &CondensedGraph,
    path: impl AsRef<Path>,
    threshold: f64,
) -> Result<()> {
    export_dot(&cond.adjacency.weights, path, threshold, "condensed")
}

/// Wall-clock seconds of an LP training run plus on-disk artifact size.
#[derive(Debug, Clone, Serialize)]
pub struct EfficiencyReport {
    pub seconds: f64,
    pub artifact_bytes: u64,
}

/// Time `epochs` of LP training on the target and sum the artifact files'
/// sizes (0 when no directory is given).
pub fn measure_efficiency(
    target: &LpTarget,
    g: &GraphBundle,
    artifact_dir: Option<&Path>,
    epochs: usize,
    seed: u64,
    edge_threshold: f64,
) -> Result<EfficiencyReport> {
    let split = EdgeSplit::build(g, seed)?;
    let start = Instant::now();
    match target {
        LpTarget::Original(og) => {
            let prop = Rc::new(split.train_propagation(og.num_nodes));
            let features = Tensor::from_vec(og.num_nodes, og.num_features, og.features_f64());
            let _ = train_gcn_lp(prop, &features, &split.train_pos, &split.train_neg, seed, epochs);
        }
        LpTarget::Condensed(c) => {
            // same construction as train_lp_condensed, with a custom epoch count
            let b = c.num_nodes();
            let w = &c.adjacency.weights;
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for i in 0..b {
                for j in (i + 1)..b {
                    if w.get(i, j) > edge_threshold {
                        pos.push((i, j));
                    } else {
                        neg.push((i, j));
                    }
                }
            }
            if pos.is_empty() {
                return Err(Error::Eval(format!(
                    "no condensed edges above threshold {edge_threshold}; try a lower threshold"
                )));
            }
            let prop = Rc::new(condensed_propagation(c));
            let _ = train_gcn_lp(prop, &c.features, &pos, &neg, seed, epochs);
        }
    }
    let seconds = start.elapsed().as_secs_f64();

    let mut artifact_bytes = 0u64;
    if let Some(dir) = artifact_dir {
        let files = match target {
            LpTarget::Original(_) => crate::graph::bundle_files(dir),
            LpTarget::Condensed(_) => crate::condense::artifact_files(dir),
        };
        for f in files {
            if let Ok(meta) = std::fs::metadata(&f) {
                artifact_bytes += meta.len();
            }
        }
    }
    Ok(EfficiencyReport {
        seconds,
        artifact_bytes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Split;
    use crate::rng::Rng;
    use crate::synth;

    fn toy_graph(seed: u64) -> GraphBundle {
        synth::generate_sbm("toy", 120, 2, 0.25, 0.02, 8, seed).unwrap()
    }

    #[test]
    fn edge_split_ratios_and_disjointness() {
        let g = toy_graph(1);
        let split = EdgeSplit::build(&g, 7).unwrap();
        let e = g.num_edges();
        assert_eq!(split.train_pos.len(), e * 7 / 10);
        assert_eq!(split.val_pos.len(), e / 10);
        assert_eq!(
            split.train_pos.len() + split.val_pos.len() + split.test_pos.len(),
            e
        );
        assert_eq!(split.train_neg.len(), split.train_pos.len());
        assert_eq!(split.val_neg.len(), split.val_pos.len());
        assert_eq!(split.test_neg.len(), split.test_pos.len());

        let mut seen = HashSet::new();
        for (u, v) in split
            .train_pos
            .iter()
            .chain(&split.val_pos)
            .chain(&split.test_pos)
        {
            assert!(seen.insert(pair_key(g.num_nodes, *u, *v)));
        }
    }

    #[test]
    fn edge_split_negatives_never_hit_true_edges() {
        let g = toy_graph(2);
        let split = EdgeSplit::build(&g, 11).unwrap();
        let edges: HashSet<u64> = g
            .edges()
            .iter()
            .map(|&(u, v)| pair_key(g.num_nodes, u, v))
            .collect();
        let mut seen = HashSet::new();
        for (u, v) in split
            .train_neg
            .iter()
            .chain(&split.val_neg)
            .chain(&split.test_neg)
        {
            let key = pair_key(g.num_nodes, *u, *v);
            assert!(!edges.contains(&key), "negative ({u},{v}) is a true edge");
            assert!(seen.insert(key), "duplicate negative");
        }
    }

    #[test]
    fn edge_split_is_seed_deterministic() {
        let g = toy_graph(3);
        let a = EdgeSplit::build(&g, 5).unwrap();
        let b = EdgeSplit::build(&g, 5).unwrap();
        assert_eq!(a.train_pos, b.train_pos);
        assert_eq!(a.test_neg, b.test_neg);
        let c = EdgeSplit::build(&g, 6).unwrap();
        assert_ne!(a.train_pos, c.train_pos);
    }

    #[test]
    fn dense_graph_exhausts_non_edges() {
        // complete graph: no negatives can exist
        let n = 12;
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                edges.push((i, j));
            }
        }
        let g = GraphBundle::new(
            "complete",
            n,
            1,
            1,
            &edges,
            vec![0.0; n],
            vec![0; n],
            Split {
                train: (0..n).collect(),
                val: vec![],
                test: vec![],
            },
        )
        .unwrap();
        let err = EdgeSplit::build(&g, 1).unwrap_err();
        assert!(matches!(err, Error::Eval(_)));
    }

    #[test]
    fn decoder_is_symmetric() {
        let mut rng = Rng::new(4);
        let z = Tensor::rand_normal(&mut rng, 10, 6, 1.0);
        for u in 0..10 {
            for v in 0..10 {
                assert_eq!(
                    LpModel::score(&z, u, v).to_bits(),
                    LpModel::score(&z, v, u).to_bits()
                );
            }
        }
    }

    #[test]
    fn all_positive_predictor_scores_two_thirds() {
        let pos = vec![0.9; 50];
        let neg = vec![0.8; 50];
        let f1 = f1_from_scores(&pos, &neg);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn random_scores_give_chance_f1() {
        let mut rng = Rng::new(5);
        let pos: Vec<f64> = (0..2000).map(|_| rng.uniform()).collect();
        let neg: Vec<f64> = (0..2000).map(|_| rng.uniform()).collect();
        let f1 = f1_from_scores(&pos, &neg);
        assert!((f1 - 0.5).abs() < 0.05, "f1 {f1}");
    }

    #[test]
    fn lp_training_is_deterministic() {
        let g = toy_graph(6);
        let split = EdgeSplit::build(&g, 9).unwrap();
        let a = train_lp_bundle(&g, &split, 33);
        let b = train_lp_bundle(&g, &split, 33);
        assert_eq!(a.w1.data(), b.w1.data());
        assert_eq!(a.w2.data(), b.w2.data());
    }

    #[test]
    fn perfect_two_block_graph_is_learnable() {
        // two dense clusters, no inter-edges, informative features
        let n = 40;
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if (i < n / 2) == (j < n / 2) {
                    edges.push((i, j));
                }
            }
        }
        let labels: Vec<usize> = (0..n).map(|i| (i >= n / 2) as usize).collect();
        let mut rng = Rng::new(7);
        let features: Vec<f32> = labels
            .iter()
            .flat_map(|&y| {
                let base = if y == 0 { 1.0 } else { -1.0 };
                (0..4)
                    .map(|_| (base + 0.1 * rng.normal()) as f32)
                    .collect::<Vec<_>>()
            })
            .collect();
        let g = GraphBundle::new(
            "blocks",
            n,
            4,
            2,
            &edges,
            features,
            labels,
            Split {
                train: (0..n).collect(),
                val: vec![],
                test: vec![],
            },
        )
        .unwrap();
        let split = EdgeSplit::build(&g, 3).unwrap();
        let model = train_lp_bundle(&g, &split, 3);
        let f1 = transfer_f1(&model, &g, &split, EdgePartition::Test);
        assert!(f1 >= 0.95, "test f1 {f1}");
    }

    #[test]
    fn report_summaries_match_runs() {
        let r = Report::from_runs("demo", vec![0.5, 0.6, 0.7]);
        assert!((r.mean - 0.6).abs() < 1e-12);
        r.validate().unwrap();
        let mut tampered = r.clone();
        tampered.mean = 0.9;
        assert!(tampered.validate().is_err());
        assert!(r.std_dev >= 0.0);
        assert!(r.format_percent().starts_with("60.00"));
    }

    #[test]
    fn rounding_keeps_six_significant_digits() {
        assert_eq!(round_sig(0.123456789, 6), 0.123457);
        assert_eq!(round_sig(123456.789, 6), 123457.0);
        assert_eq!(round_sig(0.0, 6), 0.0);
        assert_eq!(round_sig(-0.000123456789, 6), -0.000123457);
    }

    #[test]
    fn uniform_confidence_target_attacks_at_chance() {
        let g = toy_graph(8);
        // zero-weight classifier: logits all zero, confidence exactly 1/C
        let target = NodeClassifier {
            w1: Tensor::zeros(g.num_features, CLF_HIDDEN),
            b1: Tensor::zeros(1, CLF_HIDDEN),
            w2: Tensor::zeros(CLF_HIDDEN, g.num_classes),
            b2: Tensor::zeros(1, g.num_classes),
        };
        let report = attack_mia(&target, &g, 10, 5).unwrap();
        for acc in &report.runs {
            assert!((acc - 0.5).abs() < 1e-12, "accuracy {acc}");
        }
    }

    #[test]
    fn constant_score_lmia_yields_zero_f1() {
        let g = toy_graph(9);
        let split = EdgeSplit::build(&g, 4).unwrap();
        // zero-weight encoder: all embeddings zero, every score is 0.5
        let target = LpModel {
            w1: Tensor::zeros(g.num_features, LP_HIDDEN),
            b1: Tensor::zeros(1, LP_HIDDEN),
            w2: Tensor::zeros(LP_HIDDEN, LP_HIDDEN),
            b2: Tensor::zeros(1, LP_HIDDEN),
        };
        let report = attack_lmia(&target, &g, &split, 5, 6).unwrap();
        for f1 in &report.runs {
            assert_eq!(*f1, 0.0);
        }
    }

    #[test]
    fn stats_of_published_condensed_size() {
        // 55 nodes, 1431 edges: density 1431/1485 = 96.36%
        let n = 55;
        let mut edges = Vec::new();
        'outer: for i in 0..n {
            for j in (i + 1)..n {
                edges.push((i, j));
                if edges.len() == 1431 {
                    break 'outer;
                }
            }
        }
        let g = GraphBundle::new(
            "c55",
            n,
            1,
            1,
            &edges,
            vec![0.0; n],
            vec![0; n],
            Split {
                train: vec![0],
                val: vec![],
                test: vec![],
            },
        )
        .unwrap();
        let s = stats_bundle(&g);
        assert_eq!(s.edges, 1431);
        assert!((s.density * 100.0 - 96.36).abs() < 0.005, "{}", s.density);
    }

    #[test]
    fn complete_graph_density_is_one() {
        let n = 9;
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                edges.push((i, j));
            }
        }
        let g = GraphBundle::new(
            "kn",
            n,
            1,
            1,
            &edges,
            vec![0.0; n],
            vec![0; n],
            Split {
                train: vec![0],
                val: vec![],
                test: vec![],
            },
        )
        .unwrap();
        assert_eq!(stats_bundle(&g).density, 1.0);
    }

    #[test]
    fn weighted_stats_count_above_threshold() {
        let w = WeightedGraph::new(
            3,
            vec![0.0, 0.9, 0.2, 0.9, 0.0, 0.6, 0.2, 0.6, 0.0],
        )
        .unwrap();
        let s = stats_weighted(&w, 0.5);
        assert_eq!(s.nodes, 3);
        assert_eq!(s.edges, 2);
        assert!((s.density - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn dot_export_round_trip() {
        let mut w = Tensor::zeros(3, 3);
        for (i, j, v) in [(0usize, 1usize, 0.9), (1, 2, 0.6), (0, 2, 0.3)] {
            w.set(i, j, v);
            w.set(j, i, v);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.dot");
        export_dot(&w, &path, 0.0, "demo").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        // parse back: count edge lines and check pen widths are ordered
        let mut widths = Vec::new();
        for line in text.lines() {
            if let Some(idx) = line.find("penwidth=") {
                let rest = &line[idx + "penwidth=".len()..];
                let num: String = rest
                    .chars()
                    .take_while(|c| c.is_ascii_digit() || *c == '.')
                    .collect();
                widths.push(num.parse::<f64>().unwrap());
            }
        }
        // lexicographic edge order: (0,1) w=0.9, (0,2) w=0.3, (1,2) w=0.6
        assert_eq!(widths.len(), 3);
        assert!(widths[0] > widths[2] && widths[2] > widths[1]);

        // thresholding drops weak edges
        export_dot(&w, &path, 0.5, "demo").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches(" -- ").count(), 2);
    }

    #[test]
    fn efficiency_artifact_bytes_sum_files() {
        let g = toy_graph(10);
        let dir = tempfile::tempdir().unwrap();
        crate::graph::save_bundle(&g, dir.path()).unwrap();
        let report = measure_efficiency(
            &LpTarget::Original(&g),
            &g,
            Some(dir.path()),
            3,
            1,
            0.5,
        )
        .unwrap();
        let expect: u64 = crate::graph::bundle_files(dir.path())
            .iter()
            .filter_map(|f| std::fs::metadata(f).ok())
            .map(|m| m.len())
            .sum();
        assert_eq!(report.artifact_bytes, expect);
        assert!(report.seconds > 0.0);
    }

    #[test]
    fn lp_report_runs_are_reproducible() {
        let g = toy_graph(11);
        let a = lp_report(&LpTarget::Original(&g), &g, 3, 42, 0.5).unwrap();
        let b = lp_report(&LpTarget::Original(&g), &g, 3, 42, 0.5).unwrap();
        assert_eq!(a.runs, b.runs);
        a.validate().unwrap();
        assert!(a.mean > 0.5, "lp should beat chance, got {}", a.mean);
    }
}
