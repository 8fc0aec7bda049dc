//! Poincare-ball geometry and the structure-generating network.
//!
//! Selected feature rows are pushed into the ball of curvature kappa < 0 by
//! the exponential map at the origin; ordered pairs of embeddings are
//! concatenated and fed through a stack of Mobius-linear layers (each
//! followed by hyperbolic batch normalization and a hyperbolic ReLU), and a
//! tangent-space readout produces one score per ordered pair. Averaging the
//! two orientations and squashing through a sigmoid yields a symmetric
//! synthetic adjacency with zero diagonal.
//!
//! All ball operations clamp to a safe radius of (1 - 1e-7) times the ball
//! radius before any log map, so boundary blowups cannot occur mid-training.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Fraction of the ball radius points are clamped into.
pub const SAFE_RADIUS_FRACTION: f64 = 1.0 - 1e-7;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// A point strictly inside the Poincare ball of curvature `kappa < 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoincarePoint {
    pub coords: Vec<f64>,
    pub curvature: f64,
}

fn ball_scale(kappa: f64) -> f64 {
    assert!(kappa < 0.0, "curvature must be negative, got {kappa}");
    (-kappa).sqrt()
}

fn slice_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl PoincarePoint {
    /// Wrap coordinates, clamping onto the safe radius if necessary.
    pub fn new(coords: Vec<f64>, kappa: f64) -> Self {
        let sc = ball_scale(kappa);
        let norm = slice_norm(&coords);
        let max = SAFE_RADIUS_FRACTION / sc;
        let coords = if norm > max {
            coords.iter().map(|v| v * max / norm).collect()
        } else {
            coords
        };
        PoincarePoint {
            coords,
            curvature: kappa,
        }
    }

    pub fn origin(dim: usize, kappa: f64) -> Self {
        ball_scale(kappa);
        PoincarePoint {
            coords: vec![0.0; dim],
            curvature: kappa,
        }
    }

    pub fn norm(&self) -> f64 {
        slice_norm(&self.coords)
    }

    /// Norm relative to the ball radius; < 1 for every valid point.
    pub fn radius_fraction(&self) -> f64 {
        self.norm() * ball_scale(self.curvature)
    }
}

/// tanh(x)/x with its removable singularity at zero.
fn tanhc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        x.tanh() / x
    }
}

/// atanh(x)/x with its removable singularity at zero.
fn artanhc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        x.atanh() / x
    }
}

/// Exponential map at the origin: v -> tanh(sqrt(|k|) |v|) v / (sqrt(|k|) |v|).
/// The zero vector maps to the origin.
pub fn exp_map_origin(x: &[f64], kappa: f64) -> PoincarePoint {
    let sc = ball_scale(kappa);
    let factor = tanhc(sc * slice_norm(x));
    PoincarePoint::new(x.iter().map(|v| v * factor).collect(), kappa)
}

/// Logarithmic map at the origin, inverse of [`exp_map_origin`] on the safe
/// ball.
pub fn log_map_origin(p: &PoincarePoint) -> Vec<f64> {
    let sc = ball_scale(p.curvature);
    let norm = p.norm();
    if norm < 1e-12 {
        return p.coords.clone();
    }
    let arg = (sc * norm).min(SAFE_RADIUS_FRACTION);
    let factor = artanhc(arg) * (arg / (sc * norm));
    p.coords.iter().map(|v| v * factor).collect()
}

/// Mobius addition a (+) b in the shared ball.
pub fn mobius_add(a: &PoincarePoint, b: &PoincarePoint) -> PoincarePoint {
    assert_eq!(a.curvature, b.curvature, "curvatures differ");
    assert_eq!(a.coords.len(), b.coords.len(), "dimensions differ");
    let c = -a.curvature;
    let xy: f64 = a.coords.iter().zip(&b.coords).map(|(x, y)| x * y).sum();
    let x2: f64 = a.coords.iter().map(|x| x * x).sum();
    let y2: f64 = b.coords.iter().map(|y| y * y).sum();
    let den = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
    let ca = (1.0 + 2.0 * c * xy + c * y2) / den;
    let cb = (1.0 - c * x2) / den;
    let coords = a
        .coords
        .iter()
        .zip(&b.coords)
        .map(|(x, y)| ca * x + cb * y)
        .collect();
    PoincarePoint::new(coords, a.curvature)
}

/// Mobius linear map: exp0(W log0(p)) (+) b.
/// `weight` has shape (input_dim, output_dim); points are row vectors.
pub fn mobius_linear(p: &PoincarePoint, weight: &Tensor, bias: &PoincarePoint) -> PoincarePoint {
    assert_eq!(weight.rows(), p.coords.len(), "weight/input dim mismatch");
    assert_eq!(weight.cols(), bias.coords.len(), "weight/bias dim mismatch");
    let tangent = log_map_origin(p);
    let mut mapped = vec![0.0; weight.cols()];
    for (i, t) in tangent.iter().enumerate() {
        for j in 0..weight.cols() {
            mapped[j] += t * weight.get(i, j);
        }
    }
    let moved = exp_map_origin(&mapped, p.curvature);
    mobius_add(&moved, bias)
}

/// Hyperbolic ReLU: log map to the origin tangent space, clamp the negative
/// part, exp map back.
pub fn hyperbolic_relu(p: &PoincarePoint) -> PoincarePoint {
    let tangent: Vec<f64> = log_map_origin(p).iter().map(|v| v.max(0.0)).collect();
    exp_map_origin(&tangent, p.curvature)
}

/// Conformal factor lambda_p = 2 / (1 - |kappa| |p|^2) of the ball metric.
pub fn conformal_factor(p: &PoincarePoint) -> f64 {
    let c = -p.curvature;
    2.0 / (1.0 - c * p.norm() * p.norm()).max(1e-12)
}

/// Exponential map at an arbitrary point:
/// exp_p(v) = p (+) tanh(sqrt(c) lambda_p |v| / 2) v / (sqrt(c) |v|).
/// Used by Riemannian parameter updates to retract along a tangent step.
pub fn exp_map(p: &PoincarePoint, v: &[f64]) -> PoincarePoint {
    let c = -p.curvature;
    let sc = c.sqrt();
    let vn = slice_norm(v);
    if vn < 1e-15 {
        return p.clone();
    }
    let lam = conformal_factor(p);
    let t = (sc * lam * vn / 2.0).tanh() / (sc * vn);
    let step = PoincarePoint::new(v.iter().map(|x| x * t).collect(), p.curvature);
    mobius_add(p, &step)
}

// ---------------------------------------------------------------------------
// batched tape variants (rows are points)
// ---------------------------------------------------------------------------

fn safe_radius(kappa: f64) -> f64 {
    SAFE_RADIUS_FRACTION / ball_scale(kappa)
}

/// Row-wise exponential map at the origin on the tape.
pub fn exp_map_rows(tape: &mut Tape, v: Var, kappa: f64) -> Var {
    let sc = ball_scale(kappa);
    let r = tape.row_norm(v);
    let arg = tape.scale(r, sc);
    let t = tape.tanh(arg);
    let factor = div_removable(tape, t, arg);
    let out = tape.mul_col_vec(v, factor);
    tape.row_clamp_norm(out, safe_radius(kappa))
}

/// Row-wise log map at the origin on the tape (rows clamped onto the safe
/// radius first).
pub fn log_map_rows(tape: &mut Tape, p: Var, kappa: f64) -> Var {
    let sc = ball_scale(kappa);
    let clamped = tape.row_clamp_norm(p, safe_radius(kappa));
    let r = tape.row_norm(clamped);
    let arg = tape.scale(r, sc);
    let t = tape.artanh(arg);
    let factor = div_removable(tape, t, arg);
    tape.mul_col_vec(clamped, factor)
}

/// t/x with the removable singularity at x = 0 resolved to 1: wherever
/// |x| <= tiny, both numerator and denominator are replaced by exactly 1.
/// Valid for t = f(x) with f(0) = 0 and f'(0) = 1 (tanh, atanh).
fn div_removable(tape: &mut Tape, t: Var, x: Var) -> Var {
    let tiny = 1e-12;
    let xv = tape.value(x).clone();
    let mask = tape.constant(xv.map(|v| if v.abs() > tiny { 0.0 } else { 1.0 }));
    let masked_t = zero_masked(tape, t, &xv, tiny);
    let masked_x = zero_masked(tape, x, &xv, tiny);
    let num = tape.add(masked_t, mask);
    let den = tape.add(masked_x, mask);
    tape.div(num, den)
}

/// Zero out entries whose reference value is tiny (keeps 0/0 out of the tape).
fn zero_masked(tape: &mut Tape, v: Var, reference: &Tensor, tiny: f64) -> Var {
    let keep = tape.constant(reference.map(|x| if x.abs() > tiny { 1.0 } else { 0.0 }));
    tape.mul(v, keep)
}

/// Row-wise Mobius addition of equally-shaped point batches.
pub fn mobius_add_rows(tape: &mut Tape, a: Var, b: Var, kappa: f64) -> Var {
    let c = -kappa;
    let aa = tape.mul(a, a);
    let x2 = tape.row_sum(aa);
    let bb = tape.mul(b, b);
    let y2 = tape.row_sum(bb);
    let ab = tape.mul(a, b);
    let xy = tape.row_sum(ab);

    let two_c_xy = tape.scale(xy, 2.0 * c);
    let c_y2 = tape.scale(y2, c);
    let ca_num_a = tape.add(two_c_xy, c_y2);
    let ca_num = tape.add_scalar(ca_num_a, 1.0);

    let neg_c_x2 = tape.scale(x2, -c);
    let cb_num = tape.add_scalar(neg_c_x2, 1.0);

    let x2y2 = tape.mul(x2, y2);
    let c2_x2y2 = tape.scale(x2y2, c * c);
    let den_a = tape.add(two_c_xy, c2_x2y2);
    let den = tape.add_scalar(den_a, 1.0);

    let ca = tape.div(ca_num, den);
    let cb = tape.div(cb_num, den);
    let left = tape.mul_col_vec(a, ca);
    let right = tape.mul_col_vec(b, cb);
    let sum = tape.add(left, right);
    tape.row_clamp_norm(sum, safe_radius(kappa))
}

/// Row-wise hyperbolic ReLU.
pub fn hyperbolic_relu_rows(tape: &mut Tape, p: Var, kappa: f64) -> Var {
    let t = log_map_rows(tape, p, kappa);
    let r = tape.relu(t);
    exp_map_rows(tape, r, kappa)
}

// ---------------------------------------------------------------------------
// structure network
// ---------------------------------------------------------------------------

/// Whether hyperbolic batch normalization standardizes with statistics of the
/// current batch or with stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Batch,
    Running,
}

/// One Mobius-linear layer with its normalization parameters and state.
#[derive(Debug, Clone)]
pub struct MobiusLayer {
    /// (input_dim, output_dim).
    pub weight: Tensor,
    /// (1, output_dim) ball point.
    pub bias: Tensor,
    /// (1, output_dim) batch-norm scale.
    pub gamma: Tensor,
    /// (1, output_dim) batch-norm shift.
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// Edge-weight network over the Poincare ball.
#[derive(Debug, Clone)]
pub struct HyperbolicStructureNet {
    pub curvature: f64,
    pub input_dim: usize,
    pub hidden_units: usize,
    pub layers: Vec<MobiusLayer>,
    /// (hidden_units, 1) tangent-space readout.
    pub readout_weight: Tensor,
    /// (1, 1).
    pub readout_bias: Tensor,
}

/// Tape handles for every trainable parameter of the net.
pub struct NetVars {
    pub layers: Vec<LayerVars>,
    pub readout_weight: Var,
    pub readout_bias: Var,
}

pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Per-layer batch statistics observed during a batch-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Output of a synthetic-adjacency forward pass.
pub struct SynthForward {
    /// (budget, budget) symmetric zero-diagonal weights in (0, 1).
    pub adjacency: Var,
    /// Batch statistics per layer (batch mode only).
    pub batch_stats: Vec<BatchStats>,
    /// Max radius fraction observed after each stage, for ball-membership
    /// diagnostics.
    pub layer_max_radius: Vec<f64>,
}

/// Validated dense synthetic adjacency.
#[derive(Debug, Clone)]
pub struct SynthAdjacency {
    /// (budget, budget) row-major, symmetric to the bit, zero diagonal,
    /// entries in (0, 1).
    pub weights: Tensor,
}

impl SynthAdjacency {
    pub fn from_tensor(weights: Tensor) -> Result<Self> {
        let n = weights.rows();
        if n < 2 || weights.cols() != n {
            return Err(Error::Validation(format!(
                "synthetic adjacency must be square with >= 2 nodes, got ({}, {})",
                weights.rows(),
                weights.cols()
            )));
        }
        for i in 0..n {
            if weights.get(i, i) != 0.0 {
                return Err(Error::Validation(format!("nonzero diagonal at {i}")));
            }
            for j in 0..n {
                let v = weights.get(i, j);
                if i != j && !(v > 0.0 && v < 1.0) {
                    return Err(Error::Validation(format!(
                        "weight ({i}, {j}) = {v} outside (0, 1)"
                    )));
                }
                if v.to_bits() != weights.get(j, i).to_bits() {
                    return Err(Error::Validation(format!(
                        "weights not bit-symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(SynthAdjacency { weights })
    }

    pub fn num_nodes(&self) -> usize {
        self.weights.rows()
    }
}

impl HyperbolicStructureNet {
    /// Two Mobius-linear hidden layers with weights uniform in
    /// +-1/sqrt(fan_in), bias points at the origin, identity normalization.
    pub fn new(input_dim: usize, hidden_units: usize, curvature: f64, rng: &mut Rng) -> Self {
        ball_scale(curvature);
        let dims = [(input_dim, hidden_units), (hidden_units, hidden_units)];
        let layers = dims
            .iter()
            .map(|&(fan_in, fan_out)| MobiusLayer {
                weight: Tensor::rand_uniform(rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt()),
                bias: Tensor::zeros(1, fan_out),
                gamma: Tensor::filled(1, fan_out, 1.0),
                beta: Tensor::zeros(1, fan_out),
                running_mean: vec![0.0; fan_out],
                running_var: vec![1.0; fan_out],
            })
            .collect();
        HyperbolicStructureNet {
            curvature,
            input_dim,
            hidden_units,
            layers,
            readout_weight: Tensor::rand_uniform(
                rng,
                hidden_units,
                1,
                1.0 / (hidden_units as f64).sqrt(),
            ),
            readout_bias: Tensor::zeros(1, 1),
        }
    }

    /// Register every trainable parameter as a tape leaf.
    pub fn register(&self, tape: &mut Tape) -> NetVars {
        NetVars {
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    weight: tape.leaf(l.weight.clone()),
                    bias: tape.leaf(l.bias.clone()),
                    gamma: tape.leaf(l.gamma.clone()),
                    beta: tape.leaf(l.beta.clone()),
                })
                .collect(),
            readout_weight: tape.leaf(self.readout_weight.clone()),
            readout_bias: tape.leaf(self.readout_bias.clone()),
        }
    }

    /// Fold observed batch statistics into the running statistics.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats]) {
        for (layer, s) in self.layers.iter_mut().zip(stats) {
            for (r, m) in layer.running_mean.iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, v) in layer.running_var.iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }

    fn batch_norm(
        &self,
        tape: &mut Tape,
        layer_idx: usize,
        vars: &LayerVars,
        p: Var,
        mode: BatchNormMode,
        stats_out: &mut Vec<BatchStats>,
    ) -> Var {
        let kappa = self.curvature;
        let t = log_map_rows(tape, p, kappa);
        let m = tape.value(t).rows() as f64;
        let (centered, inv_std) = match mode {
            BatchNormMode::Batch => {
                let col_total = tape.col_sum(t);
                let mean = tape.scale(col_total, 1.0 / m);
                let neg_mean = tape.neg(mean);
                let centered = tape.add_row_vec(t, neg_mean);
                let sq = tape.mul(centered, centered);
                let var_total = tape.col_sum(sq);
                let var = tape.scale(var_total, 1.0 / m);
                stats_out.push(BatchStats {
                    mean: tape.value(mean).data().to_vec(),
                    var: tape.value(var).data().to_vec(),
                });
                let shifted = tape.add_scalar(var, BN_EPS);
                let inv_std = tape.pow_const(shifted, -0.5);
                (centered, inv_std)
            }
            BatchNormMode::Running => {
                let layer = &self.layers[layer_idx];
                let neg_mean = tape.constant(Tensor::from_vec(
                    1,
                    layer.running_mean.len(),
                    layer.running_mean.iter().map(|v| -v).collect(),
                ));
                let centered = tape.add_row_vec(t, neg_mean);
                let inv_std = tape.constant(Tensor::from_vec(
                    1,
                    layer.running_var.len(),
                    layer
                        .running_var
                        .iter()
                        .map(|v| 1.0 / (v + BN_EPS).sqrt())
                        .collect(),
                ));
                (centered, inv_std)
            }
        };
        let standardized = tape.mul_row_vec(centered, inv_std);
        let scaled = tape.mul_row_vec(standardized, vars.gamma);
        let shifted = tape.add_row_vec(scaled, vars.beta);
        exp_map_rows(tape, shifted, kappa)
    }

    /// Score a batch of concatenated embedding pairs: one scalar per row.
    pub fn forward_pairs(
        &self,
        tape: &mut Tape,
        vars: &NetVars,
        pairs: Var,
        mode: BatchNormMode,
    ) -> Result<(Var, Vec<BatchStats>, Vec<f64>)> {
        let kappa = self.curvature;
        let mut stats = Vec::new();
        let mut max_radius = Vec::new();
        let sc = ball_scale(kappa);
        let record = |tape: &Tape, v: Var, out: &mut Vec<f64>| {
            let t = tape.value(v);
            let mut worst = 0.0f64;
            for i in 0..t.rows() {
                worst = worst.max(slice_norm(t.row_slice(i)) * sc);
            }
            out.push(worst);
        };

        let mut p = tape.row_clamp_norm(pairs, safe_radius(kappa));
        record(tape, p, &mut max_radius);
        for (li, lvars) in vars.layers.iter().enumerate() {
            let t = log_map_rows(tape, p, kappa);
            let h = tape.matmul(t, lvars.weight);
            let moved = exp_map_rows(tape, h, kappa);
            let bias_rows = {
                let m = tape.value(moved).rows();
                tape.gather_rows(lvars.bias, vec![0; m])
            };
            let added = mobius_add_rows(tape, moved, bias_rows, kappa);
            let normed = self.batch_norm(tape, li, lvars, added, mode, &mut stats);
            p = hyperbolic_relu_rows(tape, normed, kappa);
            record(tape, p, &mut max_radius);
            if !tape.value(p).all_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite activation after hidden layer {li}"
                )));
            }
        }
        let tangent = log_map_rows(tape, p, kappa);
        let score = tape.matmul(tangent, vars.readout_weight);
        let out = tape.add_row_vec(score, vars.readout_bias);
        if !tape.value(out).all_finite() {
            return Err(Error::Numerical("non-finite readout output".into()));
        }
        Ok((out, stats, max_radius))
    }

    /// Build the synthetic adjacency from condensed features on the tape:
    /// embed rows hyperbolically, score both orientations of every pair,
    /// average, squash, and assemble the symmetric matrix.
    pub fn synth_adjacency_var(
        &self,
        tape: &mut Tape,
        vars: &NetVars,
        features: Var,
        mode: BatchNormMode,
    ) -> Result<SynthForward> {
        let b = tape.value(features).rows();
        if b < 2 {
            return Err(Error::Validation(format!(
                "synthetic adjacency needs at least 2 nodes, got {b}"
            )));
        }
        if tape.value(features).cols() * 2 != self.input_dim {
            return Err(Error::Config(format!(
                "feature dim {} does not match network input {} (= 2 x feature dim)",
                tape.value(features).cols(),
                self.input_dim
            )));
        }
        let h = exp_map_rows(tape, features, self.curvature);

        let pair_count = b * (b - 1) / 2;
        let mut left = Vec::with_capacity(2 * pair_count);
        let mut right = Vec::with_capacity(2 * pair_count);
        for i in 0..b {
            for j in (i + 1)..b {
                left.push(i);
                right.push(j);
            }
        }
        for i in 0..b {
            for j in (i + 1)..b {
                left.push(j);
                right.push(i);
            }
        }
        let hl = tape.gather_rows(h, left);
        let hr = tape.gather_rows(h, right);
        let pairs = tape.hcat(hl, hr);

        let (scores, batch_stats, layer_max_radius) =
            self.forward_pairs(tape, vars, pairs, mode)?;
        let forward_idx: Vec<usize> = (0..pair_count).collect();
        let backward_idx: Vec<usize> = (pair_count..2 * pair_count).collect();
        let s_ij = tape.gather_rows(scores, forward_idx);
        let s_ji = tape.gather_rows(scores, backward_idx);
        let total = tape.add(s_ij, s_ji);
        let avg = tape.scale(total, 0.5);
        let squashed = tape.sigmoid(avg);
        let adjacency = tape.symmetrize_upper(squashed, b);
        Ok(SynthForward {
            adjacency,
            batch_stats,
            layer_max_radius,
        })
    }

    /// Non-tape convenience: run one forward pass and return the validated
    /// adjacency.
    pub fn synth_adjacency(
        &self,
        features: &Tensor,
        mode: BatchNormMode,
    ) -> Result<SynthAdjacency> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let vars = self.register(&mut tape);
        let fwd = self.synth_adjacency_var(&mut tape, &vars, x, mode)?;
        SynthAdjacency::from_tensor(tape.value(fwd.adjacency).clone())
    }

    /// Flat parameter layout used by the `.f32` blob, in serialization order.
    fn param_blocks(&self) -> Vec<(&'static str, Vec<f64>)> {
        let mut blocks = Vec::new();
        for l in &self.layers {
            blocks.push(("weight", l.weight.data().to_vec()));
            blocks.push(("bias", l.bias.data().to_vec()));
            blocks.push(("gamma", l.gamma.data().to_vec()));
            blocks.push(("beta", l.beta.data().to_vec()));
            blocks.push(("running_mean", l.running_mean.clone()));
            blocks.push(("running_var", l.running_var.clone()));
        }
        blocks.push(("readout_weight", self.readout_weight.data().to_vec()));
        blocks.push(("readout_bias", self.readout_bias.data().to_vec()));
        blocks
    }

    /// Write `net.json` (shapes, curvature, normalization state layout) and
    /// `net.f32` (parameters) into a directory so runs can resume.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = NetManifest {
            curvature: self.curvature,
            input_dim: self.input_dim,
            hidden_units: self.hidden_units,
            num_layers: self.layers.len(),
            bn_momentum: BN_MOMENTUM,
            block_lengths: self.param_blocks().iter().map(|(_, b)| b.len()).collect(),
        };
        let manifest_path = dir.join("net.json");
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;

        let blob_path = dir.join("net.f32");
        let mut bytes = Vec::new();
        for (_, block) in self.param_blocks() {
            for v in block {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let mut f = fs::File::create(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&blob_path, e))?;
        Ok(())
    }

    /// Inverse of [`HyperbolicStructureNet::save`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join("net.json");
        let manifest: NetManifest = serde_json::from_str(
            &fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
        )
        .map_err(|e| Error::parse(&manifest_path, e.to_string()))?;

        let blob_path = dir.join("net.f32");
        let mut bytes = Vec::new();
        fs::File::open(&blob_path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&blob_path, e))?;
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let expected: usize = manifest.block_lengths.iter().sum();
        if values.len() != expected {
            return Err(Error::parse(
                &blob_path,
                format!("expected {expected} values, found {}", values.len()),
            ));
        }

        let mut net = HyperbolicStructureNet::new(
            manifest.input_dim,
            manifest.hidden_units,
            manifest.curvature,
            &mut Rng::new(0),
        );
        if net.layers.len() != manifest.num_layers {
            return Err(Error::parse(
                &manifest_path,
                format!("unsupported layer count {}", manifest.num_layers),
            ));
        }
        let mut offset = 0usize;
        let mut take = |len: usize| {
            let slice = values[offset..offset + len].to_vec();
            offset += len;
            slice
        };
        for l in net.layers.iter_mut() {
            let w = take(l.weight.len());
            l.weight = Tensor::from_vec(l.weight.rows(), l.weight.cols(), w);
            let b = take(l.bias.len());
            l.bias = Tensor::from_vec(1, b.len(), b);
            let g = take(l.gamma.len());
            l.gamma = Tensor::from_vec(1, g.len(), g);
            let be = take(l.beta.len());
            l.beta = Tensor::from_vec(1, be.len(), be);
            l.running_mean = take(l.running_mean.len());
            l.running_var = take(l.running_var.len());
        }
        let rw = take(net.readout_weight.len());
        net.readout_weight = Tensor::from_vec(net.readout_weight.rows(), 1, rw);
        let rb = take(1);
        net.readout_bias = Tensor::from_vec(1, 1, rb);
        Ok(net)
    }
}

#[derive(Serialize, Deserialize)]
struct NetManifest {
    curvature: f64,
    input_dim: usize,
    hidden_units: usize,
    num_layers: usize,
    bn_momentum: f64,
    block_lengths: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;

    const KAPPA: f64 = -1.0;

    #[test]
    fn exp_map_of_zero_is_origin() {
        let p = exp_map_origin(&[0.0, 0.0, 0.0], KAPPA);
        assert_eq!(p.coords, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn exp_map_unit_x_matches_tanh_one() {
        let p = exp_map_origin(&[1.0, 0.0], KAPPA);
        assert!((p.coords[0] - 1.0f64.tanh()).abs() < 1e-15);
        assert!((p.coords[0] - 0.76159).abs() < 1e-5);
        assert_eq!(p.coords[1], 0.0);
    }

    #[test]
    fn exp_map_norm_is_monotone_and_bounded() {
        let mut rng = Rng::new(3);
        for _ in 0..200 {
            let dir: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let n = slice_norm(&dir);
            let unit: Vec<f64> = dir.iter().map(|v| v / n).collect();
            let mut prev = 0.0;
            for mag in [0.1, 0.5, 1.0, 2.0, 5.0, 20.0] {
                let x: Vec<f64> = unit.iter().map(|v| v * mag).collect();
                let p = exp_map_origin(&x, -0.1);
                let frac = p.radius_fraction();
                assert!(frac < 1.0, "outside ball: {frac}");
                assert!(frac > prev, "not monotone at magnitude {mag}");
                prev = frac;
            }
        }
    }

    #[test]
    fn kappa_scaling_matches_generalized_map() {
        let x = [0.7, -0.2, 0.1];
        let n = slice_norm(&x);
        let unit = exp_map_origin(&x, -1.0);
        let wide = exp_map_origin(&x, -0.1);
        let sc = 0.1f64.sqrt();
        assert!((slice_norm(&unit.coords) - n.tanh()).abs() < 1e-14);
        assert!((slice_norm(&wide.coords) - (sc * n).tanh() / sc).abs() < 1e-14);
    }

    #[test]
    fn log_map_inverts_exp_map() {
        let mut rng = Rng::new(11);
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| rng.normal() * 0.8).collect();
            let p = exp_map_origin(&x, -0.1);
            let back = log_map_origin(&p);
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn mobius_identity_and_zero_cases() {
        let mut rng = Rng::new(7);
        for _ in 0..50 {
            let coords: Vec<f64> = (0..3).map(|_| rng.normal() * 0.3).collect();
            let p = PoincarePoint::new(coords, KAPPA);
            let origin = PoincarePoint::origin(3, KAPPA);

            // W = I, b = origin: identity within 1e-9
            let id = mobius_linear(&p, &Tensor::identity(3), &origin);
            for (a, b) in id.coords.iter().zip(&p.coords) {
                assert!((a - b).abs() < 1e-9);
            }

            // p = origin: result is exactly b
            let b = PoincarePoint::new(vec![0.1, -0.2, 0.05], KAPPA);
            let from_origin = mobius_add(&origin, &b);
            for (x, y) in from_origin.coords.iter().zip(&b.coords) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hyperbolic_relu_cases() {
        let origin = PoincarePoint::origin(2, KAPPA);
        assert_eq!(hyperbolic_relu(&origin).coords, vec![0.0, 0.0]);

        let neg = exp_map_origin(&[-0.5, -0.3], KAPPA);
        let relued = hyperbolic_relu(&neg);
        assert!(relued.norm() < 1e-12, "all-negative tangent maps to origin");

        let pos = exp_map_origin(&[0.5, 0.3], KAPPA);
        let kept = hyperbolic_relu(&pos);
        for (a, b) in kept.coords.iter().zip(&pos.coords) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    // --- double-double arithmetic for the extended-precision oracle ---
    mod dd {
        #[derive(Clone, Copy, Debug)]
        pub struct Dd(pub f64, pub f64); // value = hi + lo

        pub fn from(x: f64) -> Dd {
            Dd(x, 0.0)
        }

        fn two_sum(a: f64, b: f64) -> (f64, f64) {
            let s = a + b;
            let bb = s - a;
            (s, (a - (s - bb)) + (b - bb))
        }

        fn two_prod(a: f64, b: f64) -> (f64, f64) {
            let p = a * b;
            (p, a.mul_add(b, -p))
        }

        pub fn add(a: Dd, b: Dd) -> Dd {
            let (s, e) = two_sum(a.0, b.0);
            let e = e + a.1 + b.1;
            let (hi, lo) = two_sum(s, e);
            Dd(hi, lo)
        }

        pub fn sub(a: Dd, b: Dd) -> Dd {
            add(a, Dd(-b.0, -b.1))
        }

        pub fn mul(a: Dd, b: Dd) -> Dd {
            let (p, e) = two_prod(a.0, b.0);
            let e = e + a.0 * b.1 + a.1 * b.0;
            let (hi, lo) = two_sum(p, e);
            Dd(hi, lo)
        }

        pub fn div(a: Dd, b: Dd) -> Dd {
            let q1 = a.0 / b.0;
            let r = sub(a, mul(from(q1), b));
            let q2 = r.0 / b.0;
            let r2 = sub(r, mul(from(q2), b));
            let q3 = r2.0 / b.0;
            add(add(from(q1), from(q2)), from(q3))
        }

        pub fn sqrt(a: Dd) -> Dd {
            if a.0 == 0.0 {
                return from(0.0);
            }
            let x = from(a.0.sqrt());
            // one Newton step on x = (x + a/x)/2 doubles precision
            mul(from(0.5), add(x, div(a, x)))
        }

        pub fn exp(x: Dd) -> Dd {
            // Taylor series; callers keep |x| small enough for fast decay
            let mut term = from(1.0);
            let mut sum = from(1.0);
            for k in 1..120 {
                term = div(mul(term, x), from(k as f64));
                sum = add(sum, term);
                if term.0.abs() < 1e-36 {
                    break;
                }
            }
            sum
        }

        pub fn tanh(x: Dd) -> Dd {
            let e2 = exp(mul(from(2.0), x));
            div(sub(e2, from(1.0)), add(e2, from(1.0)))
        }

        pub fn atanh(x: Dd) -> Dd {
            // series sum x^(2k+1)/(2k+1); callers keep |x| < 0.8
            let x2 = mul(x, x);
            let mut term = x;
            let mut sum = x;
            for k in 1..500 {
                term = mul(term, x2);
                let contrib = div(term, from((2 * k + 1) as f64));
                sum = add(sum, contrib);
                if contrib.0.abs() < 1e-36 {
                    break;
                }
            }
            sum
        }
    }

    /// Full Mobius-linear composition in double-double arithmetic.
    fn mobius_linear_dd(p: &[f64], weight: &Tensor, bias: &[f64], c: f64) -> Vec<f64> {
        use dd::*;
        let sc = sqrt(from(c));
        let dim_in = p.len();
        let dim_out = bias.len();

        // log map at origin
        let mut norm2 = from(0.0);
        for &x in p {
            norm2 = add(norm2, mul(from(x), from(x)));
        }
        let norm = sqrt(norm2);
        let arg = mul(sc, norm);
        let factor = if norm.0 == 0.0 {
            from(1.0)
        } else {
            div(atanh(arg), arg)
        };
        let tangent: Vec<Dd> = p.iter().map(|&x| mul(from(x), factor)).collect();

        // matrix multiply
        let mut mapped = vec![from(0.0); dim_out];
        for i in 0..dim_in {
            for (j, m) in mapped.iter_mut().enumerate() {
                *m = add(*m, mul(tangent[i], from(weight.get(i, j))));
            }
        }

        // exp map at origin
        let mut mn2 = from(0.0);
        for m in &mapped {
            mn2 = add(mn2, mul(*m, *m));
        }
        let mn = sqrt(mn2);
        let marg = mul(sc, mn);
        let mfac = if mn.0 == 0.0 {
            from(1.0)
        } else {
            div(tanh(marg), marg)
        };
        let moved: Vec<Dd> = mapped.iter().map(|m| mul(*m, mfac)).collect();

        // Mobius addition with the bias point
        let bvec: Vec<Dd> = bias.iter().map(|&x| from(x)).collect();
        let mut xy = from(0.0);
        let mut x2 = from(0.0);
        let mut y2 = from(0.0);
        for (a, b) in moved.iter().zip(&bvec) {
            xy = add(xy, mul(*a, *b));
            x2 = add(x2, mul(*a, *a));
            y2 = add(y2, mul(*b, *b));
        }
        let cdd = from(c);
        let two_c_xy = mul(from(2.0), mul(cdd, xy));
        let den = add(add(from(1.0), two_c_xy), mul(mul(cdd, cdd), mul(x2, y2)));
        let ca = div(add(add(from(1.0), two_c_xy), mul(cdd, y2)), den);
        let cb = div(sub(from(1.0), mul(cdd, x2)), den);
        moved
            .iter()
            .zip(&bvec)
            .map(|(a, b)| add(mul(ca, *a), mul(cb, *b)).0)
            .collect()
    }

    #[test]
    fn mobius_linear_matches_extended_precision_oracle() {
        let mut rng = Rng::new(41);
        for trial in 0..60 {
            let kappa = if trial % 2 == 0 { -1.0 } else { -0.1 };
            let c: f64 = -kappa;
            // keep sqrt(c) * |p| <= ~0.65 so the oracle series converge fast
            let scale = 0.65 / c.sqrt() / (3f64).sqrt();
            let p_coords: Vec<f64> = (0..3).map(|_| rng.uniform_range(-scale, scale)).collect();
            let b_coords: Vec<f64> = (0..3)
                .map(|_| rng.uniform_range(-scale * 0.5, scale * 0.5))
                .collect();
            let w = Tensor::rand_uniform(&mut rng, 3, 3, 0.6);

            let p = PoincarePoint::new(p_coords.clone(), kappa);
            let b = PoincarePoint::new(b_coords.clone(), kappa);
            let got = mobius_linear(&p, &w, &b);
            let want = mobius_linear_dd(&p_coords, &w, &b_coords, c);
            for (g, w) in got.coords.iter().zip(&want) {
                assert!((g - w).abs() < 1e-13, "trial {trial}: {g} vs oracle {w}");
            }
        }
    }

    fn tiny_net(rng: &mut Rng, feat_dim: usize, hidden: usize) -> HyperbolicStructureNet {
        HyperbolicStructureNet::new(2 * feat_dim, hidden, -0.1, rng)
    }

    #[test]
    fn synth_adjacency_is_bit_symmetric_with_zero_diagonal() {
        let mut rng = Rng::new(5);
        let net = tiny_net(&mut rng, 4, 8);
        let x = Tensor::rand_normal(&mut rng, 6, 4, 1.0);
        let adj = net.synth_adjacency(&x, BatchNormMode::Batch).unwrap();
        let w = &adj.weights;
        for i in 0..6 {
            assert_eq!(w.get(i, i), 0.0);
            for j in 0..6 {
                assert_eq!(w.get(i, j).to_bits(), w.get(j, i).to_bits());
                if i != j {
                    assert!(w.get(i, j) > 0.0 && w.get(i, j) < 1.0);
                }
            }
        }
    }

    #[test]
    fn zero_readout_gives_all_half_weights() {
        let mut rng = Rng::new(6);
        let mut net = tiny_net(&mut rng, 3, 8);
        net.readout_weight = Tensor::zeros(net.hidden_units, 1);
        net.readout_bias = Tensor::zeros(1, 1);
        let x = Tensor::rand_normal(&mut rng, 5, 3, 1.0);
        let adj = net.synth_adjacency(&x, BatchNormMode::Batch).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    assert_eq!(adj.weights.get(i, j), 0.5);
                }
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = Rng::new(8);
        let net = tiny_net(&mut rng, 3, 8);
        let x = Tensor::rand_normal(&mut rng, 5, 3, 0.8);
        let adj = net.synth_adjacency(&x, BatchNormMode::Batch).unwrap();

        let perm = [3usize, 0, 4, 1, 2];
        let mut xp = Tensor::zeros(5, 3);
        for (new, &old) in perm.iter().enumerate() {
            for c in 0..3 {
                xp.set(new, c, x.get(old, c));
            }
        }
        let adjp = net.synth_adjacency(&xp, BatchNormMode::Batch).unwrap();
        for new_i in 0..5 {
            for new_j in 0..5 {
                let a = adjp.weights.get(new_i, new_j);
                let b = adj.weights.get(perm[new_i], perm[new_j]);
                assert!((a - b).abs() < 1e-12, "({new_i},{new_j}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn ball_membership_after_every_layer() {
        let mut rng = Rng::new(9);
        let net = tiny_net(&mut rng, 4, 16);
        let x = Tensor::rand_normal(&mut rng, 7, 4, 2.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let vars = net.register(&mut tape);
        let fwd = net
            .synth_adjacency_var(&mut tape, &vars, xv, BatchNormMode::Batch)
            .unwrap();
        assert!(!fwd.layer_max_radius.is_empty());
        for (stage, frac) in fwd.layer_max_radius.iter().enumerate() {
            assert!(*frac < 1.0, "stage {stage} escaped the ball: {frac}");
        }
    }

    #[test]
    fn perturbing_one_row_touches_only_its_pairs_without_batch_coupling() {
        let mut rng = Rng::new(10);
        let mut net = tiny_net(&mut rng, 3, 8);
        // seed running statistics from one batch pass, then freeze
        let x = Tensor::rand_normal(&mut rng, 5, 3, 0.8);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = net.register(&mut tape);
        let fwd = net
            .synth_adjacency_var(&mut tape, &vars, xv, BatchNormMode::Batch)
            .unwrap();
        net.apply_batch_stats(&fwd.batch_stats);

        let base = net.synth_adjacency(&x, BatchNormMode::Running).unwrap();
        let mut x2 = x.clone();
        x2.set(2, 1, x.get(2, 1) + 0.37);
        let bumped = net.synth_adjacency(&x2, BatchNormMode::Running).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                if i == 2 || j == 2 {
                    continue;
                }
                let delta = (base.weights.get(i, j) - bumped.weights.get(i, j)).abs();
                assert!(delta < 1e-14, "({i},{j}) moved by {delta}");
            }
        }
        // and the perturbed row did move
        let moved: f64 = (0..5)
            .filter(|&j| j != 2)
            .map(|j| (base.weights.get(2, j) - bumped.weights.get(2, j)).abs())
            .sum();
        assert!(moved > 1e-8);
    }

    #[test]
    fn synth_gradients_match_finite_differences() {
        let mut rng = Rng::new(12);
        let net = tiny_net(&mut rng, 3, 6);
        let x0 = Tensor::rand_normal(&mut rng, 4, 3, 0.7);

        let eval = |x: &Tensor| -> crate::error::Result<f64> {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let vars = net.register(&mut tape);
            let fwd = net.synth_adjacency_var(&mut tape, &vars, xv, BatchNormMode::Batch)?;
            let sq = tape.mul(fwd.adjacency, fwd.adjacency);
            let loss = tape.sum_all(sq);
            Ok(tape.value(loss).as_scalar())
        };

        let mut tape = Tape::new();
        let xv = tape.leaf(x0.clone());
        let vars = net.register(&mut tape);
        let fwd = net
            .synth_adjacency_var(&mut tape, &vars, xv, BatchNormMode::Batch)
            .unwrap();
        let sq = tape.mul(fwd.adjacency, fwd.adjacency);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(xv, &tape);

        let report = check_gradients(eval, &gx, &x0, 1e-5, 1e-4).unwrap();
        assert!(report.passed(), "rel err {}", report.max_rel_err);

        // and one layer weight for the parameter path
        let gw = grads.get(vars.layers[0].weight, &tape);
        let w0 = net.layers[0].weight.clone();
        let eval_w = |w: &Tensor| -> crate::error::Result<f64> {
            let mut net2 = net.clone();
            net2.layers[0].weight = w.clone();
            let mut tape = Tape::new();
            let xv = tape.constant(x0.clone());
            let vars = net2.register(&mut tape);
            let fwd = net2.synth_adjacency_var(&mut tape, &vars, xv, BatchNormMode::Batch)?;
            let sq = tape.mul(fwd.adjacency, fwd.adjacency);
            let loss = tape.sum_all(sq);
            Ok(tape.value(loss).as_scalar())
        };
        let report_w = check_gradients(eval_w, &gw, &w0, 1e-5, 1e-4).unwrap();
        assert!(report_w.passed(), "weight rel err {}", report_w.max_rel_err);
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = Rng::new(13);
        let mut net = tiny_net(&mut rng, 3, 8);
        let x = Tensor::rand_normal(&mut rng, 5, 3, 0.8);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = net.register(&mut tape);
        let fwd = net
            .synth_adjacency_var(&mut tape, &vars, xv, BatchNormMode::Batch)
            .unwrap();
        net.apply_batch_stats(&fwd.batch_stats);

        let dir = tempfile::tempdir().unwrap();
        net.save(dir.path()).unwrap();
        let loaded = HyperbolicStructureNet::load(dir.path()).unwrap();
        assert_eq!(loaded.curvature, net.curvature);
        assert_eq!(loaded.input_dim, net.input_dim);
        for (a, b) in net.layers[0]
            .weight
            .data()
            .iter()
            .zip(loaded.layers[0].weight.data())
        {
            assert_eq!(*a as f32, *b as f32);
        }
        for (a, b) in net.layers[1]
            .running_mean
            .iter()
            .zip(&loaded.layers[1].running_mean)
        {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn rejects_single_node() {
        let mut rng = Rng::new(14);
        let net = tiny_net(&mut rng, 3, 4);
        let x = Tensor::rand_normal(&mut rng, 1, 3, 1.0);
        assert!(net.synth_adjacency(&x, BatchNormMode::Batch).is_err());
    }
}
