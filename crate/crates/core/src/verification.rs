//! Oracle checks binding the event engine to the equivalent ANN: exact
//! equivalence, discretization-error audits, event-order invariance and
//! finite-difference gradient checks.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::ann::{
    ann_backward_float, ann_backward_integer, ann_forward_float, ann_forward_integer, forward_pass, ops,
    softmax_cross_entropy, Batch,
};
use crate::config::{EngineParams, InputMode, RoundingMode};
use crate::encoding::encode_input;
use crate::error::{Error, Result};
use crate::event::{run_example, EventOptions, ExampleResult, RunMode, Schedule};
use crate::network::{Layer, LayerParams, Network};
use crate::topology::{Activation, LayerSpec, Shape3};

/// Relative tolerance for weight-increment comparisons.
pub const WEIGHT_RTOL: f64 = 1e-9;
/// Floating-point slack on the discretization-error bound and the telescoping identity.
pub const SDE_TOL: f64 = 1e-9;

struct Draw(ChaCha8Rng);

impl Draw {
    fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }
    fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
    fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }
    fn int(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.0.next_u64() % (hi - lo + 1) as u64) as usize
    }
    fn chance(&mut self, p: f64) -> bool {
        self.unit() < p
    }
}

/// Shape of the randomized networks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialConfig {
    pub min_layers: usize,
    pub max_layers: usize,
    pub max_width: usize,
    /// Weights are drawn from `[-weight_scale * theta_ff, weight_scale * theta_ff]`.
    pub weight_scale: f64,
    /// Draws small convolution/pooling stacks instead of dense layers.
    pub conv: bool,
    pub options: EventOptions,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            min_layers: 2,
            max_layers: 4,
            max_width: 32,
            weight_scale: 2.0,
            conv: false,
            options: EventOptions::default(),
        }
    }
}

/// One randomized network with an input and a label, reproducible from `seed`.
#[derive(Clone, Debug)]
pub struct Trial {
    pub seed: u64,
    pub net: Network,
    pub sample: Vec<f64>,
    pub label: usize,
    pub params: EngineParams,
}

fn random_layer(d: &mut Draw, spec: LayerSpec, theta_ff: f64, scale: f64) -> Layer {
    let weights = (0..spec.weight_count())
        .map(|_| d.range(-scale * theta_ff, scale * theta_ff))
        .collect();
    let biases = (0..spec.bias_count()).map(|_| d.range(-theta_ff, theta_ff)).collect();
    Layer {
        spec,
        params: LayerParams {
            weights,
            biases,
            trainable: true,
        },
    }
}

fn random_activation(d: &mut Draw) -> Activation {
    if d.chance(0.5) {
        Activation::Relu
    } else {
        Activation::Linear
    }
}

impl Trial {
    pub fn generate(cfg: &TrialConfig, seed: u64) -> Result<Trial> {
        if cfg.min_layers < 1 || cfg.min_layers > cfg.max_layers || cfg.max_width < 2 {
            return Err(Error::config("invalid trial configuration"));
        }
        let mut d = Draw::new(seed);
        let theta_ff = d.range(0.5, 2.0);
        let theta_bp = d.range(0.5, 2.0);
        let depth = d.int(cfg.min_layers, cfg.max_layers);
        let classes = d.int(2, cfg.max_width.min(10));
        let mut layers = Vec::with_capacity(depth);
        let input;
        if cfg.conv {
            let side = d.int(2, 3) * 2;
            input = Shape3::new(d.int(1, 2), side, side);
            let mut shape = input;
            for _ in 0..depth.saturating_sub(1) {
                let spec = if shape.height % 2 == 0 && d.chance(0.3) {
                    LayerSpec::avg_pool(shape, 2)?
                } else {
                    let k = if d.chance(0.5) { 3 } else { 1 };
                    LayerSpec::convolution(shape, d.int(1, 3), k, random_activation(&mut d))
                };
                shape = spec.output;
                let mut layer = random_layer(&mut d, spec, theta_ff, cfg.weight_scale);
                if layer.spec.kind == crate::topology::LayerKind::AvgPool {
                    layer.params = crate::network::init_weights(&layer.spec, 0, 0)?;
                }
                layers.push(layer);
            }
            let spec = LayerSpec::fully_connected(shape, classes, Activation::Linear);
            layers.push(random_layer(&mut d, spec, theta_ff, cfg.weight_scale));
        } else {
            input = Shape3::flat(d.int(1, cfg.max_width));
            let mut shape = input;
            for l in 0..depth {
                let top = l + 1 == depth;
                let (n, act) = if top {
                    (classes, Activation::Linear)
                } else {
                    (d.int(1, cfg.max_width), random_activation(&mut d))
                };
                let spec = LayerSpec::fully_connected(shape, n, act);
                shape = spec.output;
                layers.push(random_layer(&mut d, spec, theta_ff, cfg.weight_scale));
            }
        }
        let net = Network::from_layers(input, layers, theta_ff, theta_bp)?;
        let input_mode = if d.chance(0.5) {
            InputMode::AnalogFirstLayer
        } else {
            InputMode::SpikeEncoded
        };
        let rounding = match d.int(0, 9) {
            0 => RoundingMode::Floor,
            1 => RoundingMode::Ceil,
            _ => RoundingMode::RoundHalfAway,
        };
        let params = EngineParams {
            eta: d.range(1e-3, 0.1),
            alpha: d.range(1.0, 16.0),
            rounding,
            input_mode,
            encode_steps: d.int(1, 16) as u32,
        };
        let sample = (0..input.len())
            .map(|_| if d.chance(0.2) { 0.0 } else { d.unit() })
            .collect();
        let label = d.int(0, classes - 1);
        Ok(Trial {
            seed,
            net,
            sample,
            label,
            params,
        })
    }

    pub fn run_event(&self, options: &EventOptions) -> Result<ExampleResult> {
        run_example(
            &self.net,
            &self.sample,
            RunMode::Train { label: self.label },
            &self.params,
            options,
        )
    }
}

/// Seed of trial `index` in a suite started from `seed`.
pub fn trial_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

fn grow<T: Copy + PartialOrd>(v: &mut Vec<T>, l: usize, value: T, zero: T) {
    if v.len() <= l {
        v.resize(l + 1, zero);
    }
    if value > v[l] {
        v[l] = value;
    }
}

/// Per-layer maxima of the discretization errors before the residual flush.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SdeReport {
    /// `max |act(𝕊) - S|` per hidden layer.
    pub forward: Vec<f64>,
    /// `max |𝕫 - Z|` per layer.
    pub backward: Vec<f64>,
    /// Largest relative violation of `V = theta * (𝕊 - S)`.
    pub telescoping: f64,
    /// ReLU neurons with `𝕊 <= 0`, `V <= 0` and a nonzero discretization error.
    pub relu_zero_violations: usize,
}

impl SdeReport {
    pub fn max_forward(&self) -> f64 {
        self.forward.iter().cloned().fold(0.0, f64::max)
    }

    pub fn max_backward(&self) -> f64 {
        self.backward.iter().cloned().fold(0.0, f64::max)
    }

    /// Bounds hold up to `SDE_TOL`: an integrator that lands on a threshold in
    /// exact arithmetic may stop one rounding error short of it in floating point.
    pub fn within_bounds(&self) -> bool {
        self.max_forward() < 1.0 + SDE_TOL
            && self.max_backward() < 1.0 + SDE_TOL
            && self.relu_zero_violations == 0
            && self.telescoping <= SDE_TOL
    }

    pub fn merge(&mut self, other: &SdeReport) {
        for (l, &v) in other.forward.iter().enumerate() {
            grow(&mut self.forward, l, v, 0.0);
        }
        for (l, &v) in other.backward.iter().enumerate() {
            grow(&mut self.backward, l, v, 0.0);
        }
        self.telescoping = self.telescoping.max(other.telescoping);
        self.relu_zero_violations += other.relu_zero_violations;
    }
}

/// Recomputes the real-valued pre-activations and error integrals from the
/// event engine's own counts and compares them with the pre-residual state.
pub fn sde_audit(net: &Network, sample: &[f64], label: usize, params: &EngineParams, res: &ExampleResult) -> Result<SdeReport> {
    let top = net.top();
    let mut report = SdeReport {
        forward: vec![0.0; top],
        backward: vec![0.0; net.depth()],
        ..SdeReport::default()
    };
    let theta = net.theta_ff;
    let mut prev = encode_input(sample, params);
    for l in 0..top {
        let layer = &net.layers[l];
        let pre = ops::forward(layer, &Batch::from_rows(&[prev.as_slice()], prev.len()));
        let snap = &res.pre_residual_forward[l];
        let relu = layer.spec.activation == Activation::Relu;
        for i in 0..pre.cols {
            let h = pre.data[i];
            let p = h / theta;
            let s = snap.counts[i] as f64;
            let v = snap.integrator[i];
            let target = if relu { p.max(0.0) } else { p };
            let sde = (target - s).abs();
            report.forward[l] = report.forward[l].max(sde);
            // V = h - theta * S, measured against the terms that were summed
            let scale = h.abs().max((theta * s).abs()).max(theta);
            report.telescoping = report.telescoping.max((h - theta * s - v).abs() / scale);
            if relu && p <= 0.0 && v <= 0.0 && sde != 0.0 {
                report.relu_zero_violations += 1;
            }
        }
        prev = res.layers[l].s.iter().map(|&s| s as f64).collect();
    }
    let (_, grad) = softmax_cross_entropy(&res.logits, label)?;
    let mut zz: Vec<f64> = grad.iter().map(|g| params.alpha * g / net.theta_bp).collect();
    for l in (0..net.depth()).rev() {
        let snap = &res.pre_residual_backward[l];
        for (i, &target) in zz.iter().enumerate() {
            let sde = (target - snap.counts[i] as f64).abs();
            report.backward[l] = report.backward[l].max(sde);
        }
        if l == 0 {
            break;
        }
        let st = &res.layers[l];
        let e: Vec<f64> = st
            .z
            .iter()
            .zip(&st.sprime)
            .map(|(&z, &g)| if g { z as f64 } else { 0.0 })
            .collect();
        let below = ops::backward_input(&net.layers[l], &Batch::from_rows(&[e.as_slice()], e.len()));
        zz = below.data.iter().map(|v| v / net.theta_bp).collect();
    }
    Ok(report)
}

/// Comparison of one event-engine run with the integer engine.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrialComparison {
    pub delta_s: Vec<i64>,
    pub delta_z: Vec<i64>,
    pub weight_rel_err: Vec<f64>,
    pub prediction_match: bool,
    pub sde: SdeReport,
}

impl TrialComparison {
    pub fn exact(&self) -> bool {
        self.delta_s.iter().all(|&d| d == 0)
            && self.delta_z.iter().all(|&d| d == 0)
            && self.weight_rel_err.iter().all(|&e| e <= WEIGHT_RTOL)
            && self.prediction_match
    }
}

/// Relative difference, measured against at least `floor`.
fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        0.0
    } else {
        diff / a.abs().max(b.abs()).max(floor)
    }
}

/// Magnitude of the largest single term `eta * S_j` summed into each
/// parameter increment (weights first, then biases). Increments whose terms
/// cancel are compared against this instead of their own near-zero value.
fn term_scale(layer: &Layer, input: &[f64], eta: f64, is_input: bool) -> Vec<f64> {
    let mut scale = vec![0.0; layer.params.weights.len() + layer.params.biases.len()];
    for i in 0..layer.spec.output.len() {
        layer.for_each_source(i, |j, widx| {
            // traces already carry eta, raw input does not
            let t = if is_input { eta * input[j].abs() } else { input[j].abs() };
            scale[widx] = f64::max(scale[widx], t);
        });
    }
    let nw = layer.params.weights.len();
    scale[nw..].iter_mut().for_each(|t| *t = eta);
    scale
}

pub fn compare_trial(trial: &Trial, options: &EventOptions) -> Result<TrialComparison> {
    let net = &trial.net;
    let res = trial.run_event(options)?;
    let acts = ann_forward_integer(net, &trial.sample, &trial.params)?;
    let (errs, inc) = ann_backward_integer(net, &acts, trial.label, &trial.params)?;
    let mut cmp = TrialComparison {
        delta_s: vec![0; net.depth()],
        delta_z: vec![0; net.depth()],
        weight_rel_err: vec![0.0; net.depth()],
        prediction_match: res.prediction == acts.prediction(),
        sde: sde_audit(net, &trial.sample, trial.label, &trial.params, &res)?,
    };
    for l in 0..net.top() {
        cmp.delta_s[l] = res.layers[l].s.iter().zip(&acts.s[l]).map(|(a, b)| (a - b).abs()).max().unwrap_or(0);
    }
    let grads = res.grads.as_ref().expect("training run");
    for l in 0..net.depth() {
        cmp.delta_z[l] = res.layers[l].z.iter().zip(&errs.z[l]).map(|(a, b)| (a - b).abs()).max().unwrap_or(0);
        let layer = &net.layers[l];
        if !layer.params.trainable {
            continue;
        }
        let input: &[f64] = if l == 0 { &acts.input } else { &res.layers[l - 1].x };
        let scale = term_scale(layer, input, trial.params.eta, l == 0);
        let (a, b) = (&grads.layers[l], &inc.layers[l]);
        cmp.weight_rel_err[l] = a
            .weights
            .iter()
            .chain(&a.biases)
            .zip(b.weights.iter().chain(&b.biases))
            .zip(&scale)
            .map(|((&x, &y), &t)| rel_err(x, y, t))
            .fold(0.0, f64::max);
    }
    Ok(cmp)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub max_delta_s: Vec<i64>,
    pub max_delta_z: Vec<i64>,
    pub max_weight_rel_err: Vec<f64>,
    pub prediction_mismatches: usize,
    pub failed_trials: usize,
    /// Seed of the first failing trial; `Trial::generate(cfg, seed)` rebuilds it.
    pub counterexample_seed: Option<u64>,
    pub sde: SdeReport,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.failed_trials == 0
    }
}

/// Runs `trials` randomized networks through both engines.
pub fn check_equivalence(cfg: &TrialConfig, trials: usize, seed: u64) -> Result<EquivalenceReport> {
    if trials == 0 {
        return Err(Error::config("trials must be at least 1"));
    }
    let results: Vec<(u64, TrialComparison)> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let s = trial_seed(seed, k);
            let trial = Trial::generate(cfg, s)?;
            Ok((s, compare_trial(&trial, &cfg.options)?))
        })
        .collect::<Result<_>>()?;
    let mut report = EquivalenceReport {
        trials,
        ..EquivalenceReport::default()
    };
    for (s, cmp) in results {
        for (l, &d) in cmp.delta_s.iter().enumerate() {
            grow(&mut report.max_delta_s, l, d, 0);
        }
        for (l, &d) in cmp.delta_z.iter().enumerate() {
            grow(&mut report.max_delta_z, l, d, 0);
        }
        for (l, &e) in cmp.weight_rel_err.iter().enumerate() {
            grow(&mut report.max_weight_rel_err, l, e, 0.0);
        }
        report.prediction_mismatches += usize::from(!cmp.prediction_match);
        report.sde.merge(&cmp.sde);
        if !cmp.exact() {
            report.failed_trials += 1;
            report.counterexample_seed.get_or_insert(s);
        }
    }
    Ok(report)
}

/// Runs many randomized trials and returns the merged discretization-error report.
pub fn sde_suite(cfg: &TrialConfig, trials: usize, seed: u64) -> Result<SdeReport> {
    let reports: Vec<SdeReport> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let trial = Trial::generate(cfg, trial_seed(seed, k))?;
            let res = trial.run_event(&cfg.options)?;
            sde_audit(&trial.net, &trial.sample, trial.label, &trial.params, &res)
        })
        .collect::<Result<_>>()?;
    let mut out = SdeReport::default();
    reports.iter().for_each(|r| out.merge(r));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrderReport {
    pub permutations: usize,
    /// Seed of the first schedule whose post-residual counts differ.
    pub mismatch_seed: Option<u64>,
}

impl OrderReport {
    pub fn passed(&self) -> bool {
        self.mismatch_seed.is_none()
    }
}

/// Re-runs a trial under `permutations` shuffled event schedules and compares
/// post-residual `S` and `Z` with the depth-first run.
pub fn order_invariance_check(trial: &Trial, permutations: usize, seed: u64) -> Result<OrderReport> {
    if permutations < 2 {
        return Err(Error::config("order invariance needs at least 2 permutations"));
    }
    let base_opts = EventOptions {
        schedule: Schedule::DepthFirst,
        ..EventOptions::default()
    };
    let base = trial.run_event(&base_opts)?;
    for k in 0..permutations {
        let s = trial_seed(seed, k);
        let opts = EventOptions {
            schedule: Schedule::Shuffled(s),
            ..base_opts
        };
        let run = trial.run_event(&opts)?;
        let same = base
            .layers
            .iter()
            .zip(&run.layers)
            .enumerate()
            .all(|(l, (a, b))| (l == trial.net.top() || a.s == b.s) && a.z == b.z);
        if !same {
            return Ok(OrderReport {
                permutations,
                mismatch_seed: Some(s),
            });
        }
    }
    Ok(OrderReport {
        permutations,
        mismatch_seed: None,
    })
}

/// Outcome of the order-invariance check over many networks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrderSuiteReport {
    pub networks: usize,
    pub permutations: usize,
    pub failures: usize,
    /// `(trial seed, schedule seed)` of the first mismatch.
    pub counterexample: Option<(u64, u64)>,
}

impl OrderSuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Runs [`order_invariance_check`] on `networks` randomized trials.
pub fn order_suite(cfg: &TrialConfig, networks: usize, permutations: usize, seed: u64) -> Result<OrderSuiteReport> {
    if networks == 0 {
        return Err(Error::config("order check needs at least one network"));
    }
    let results: Vec<(u64, OrderReport)> = (0..networks)
        .into_par_iter()
        .map(|k| {
            let s = trial_seed(seed, k);
            let trial = Trial::generate(cfg, s)?;
            Ok((s, order_invariance_check(&trial, permutations, s ^ seed)?))
        })
        .collect::<Result<_>>()?;
    let mut report = OrderSuiteReport {
        networks,
        permutations,
        failures: 0,
        counterexample: None,
    };
    for (s, r) in results {
        if let Some(p) = r.mismatch_seed {
            report.failures += 1;
            report.counterexample.get_or_insert((s, p));
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub checked: usize,
    /// Coordinates skipped because a perturbation moves some ReLU across its switching surface.
    pub excluded: usize,
    pub max_rel_err: f64,
    /// `(layer, parameter index)` of the worst coordinate; biases follow the weights.
    pub worst: Option<(usize, usize)>,
}

/// Absolute differences below this are treated as agreement (finite-difference noise floor).
pub const GRADCHECK_ABS_FLOOR: f64 = 1e-10;
const SWITCH_MARGIN: f64 = 1e-6;

fn scaled_loss_and_gates(net: &Network, input: &[f64], label: usize, alpha: f64) -> Result<(f64, Vec<f64>)> {
    let fwd = forward_pass(net, Batch::from_rows(&[input], input.len()), None)?;
    let (loss, _) = softmax_cross_entropy(&fwd.logits.data, label)?;
    let mut pre = Vec::new();
    for (l, p) in fwd.pre.iter().enumerate() {
        if net.layers[l].spec.activation == Activation::Relu {
            pre.extend_from_slice(&p.data);
        }
    }
    Ok((alpha * loss, pre))
}

fn param_mut(net: &mut Network, l: usize, idx: usize) -> &mut f64 {
    let p = &mut net.layers[l].params;
    let nw = p.weights.len();
    if idx < nw {
        &mut p.weights[idx]
    } else {
        &mut p.biases[idx - nw]
    }
}

/// Central differences of `alpha * loss` on `coords` random parameters against
/// the float engine's analytic gradient.
pub fn gradcheck(
    net: &Network,
    sample: &[f64],
    label: usize,
    params: &EngineParams,
    coords: usize,
    seed: u64,
    step: f64,
) -> Result<GradcheckReport> {
    if coords == 0 {
        return Err(Error::config("gradcheck needs at least one coordinate"));
    }
    let acts = ann_forward_float(net, sample, params)?;
    let analytic = ann_backward_float(net, &acts, label, params)?.gradients;
    let input = encode_input(sample, params);
    let (_, base_gates) = scaled_loss_and_gates(net, &input, label, params.alpha)?;
    let trainable: Vec<usize> = (0..net.depth()).filter(|&l| net.layers[l].params.trainable).collect();
    if trainable.is_empty() {
        return Err(Error::config("network has no trainable parameters"));
    }
    let mut d = Draw::new(seed);
    let mut work = net.clone();
    let mut report = GradcheckReport {
        checked: 0,
        excluded: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let near_switch = base_gates.iter().any(|p| p.abs() < SWITCH_MARGIN);
    for _ in 0..coords {
        let l = trainable[d.int(0, trainable.len() - 1)];
        let p = &net.layers[l].params;
        let idx = d.int(0, p.weights.len() + p.biases.len() - 1);
        let orig = *param_mut(&mut work, l, idx);
        *param_mut(&mut work, l, idx) = orig + step;
        let (plus, gates_plus) = scaled_loss_and_gates(&work, &input, label, params.alpha)?;
        *param_mut(&mut work, l, idx) = orig - step;
        let (minus, gates_minus) = scaled_loss_and_gates(&work, &input, label, params.alpha)?;
        *param_mut(&mut work, l, idx) = orig;
        let crosses = base_gates
            .iter()
            .zip(&gates_plus)
            .zip(&gates_minus)
            .any(|((&b, &a), &c)| (b > 0.0) != (a > 0.0) || (b > 0.0) != (c > 0.0));
        if near_switch || crosses {
            report.excluded += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * step);
        let nw = analytic.layers[l].weights.len();
        let a = if idx < nw {
            analytic.layers[l].weights[idx]
        } else {
            analytic.layers[l].biases[idx - nw]
        };
        let diff = (a - numeric).abs();
        let err = if diff < GRADCHECK_ABS_FLOOR { 0.0 } else { diff / a.abs().max(numeric.abs()) };
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some((l, idx));
        }
    }
    Ok(report)
}

/// Gradient check on a seeded 3-layer ReLU network with a random input.
pub fn gradcheck_suite(coords: usize, seed: u64) -> Result<GradcheckReport> {
    let topology = crate::topology::parse_topology("24-16-16-6")?;
    let net = Network::new(&topology, 1.0, 0.5, seed)?;
    let mut d = Draw::new(seed);
    let sample: Vec<f64> = (0..24).map(|_| d.range(0.0, 1.0)).collect();
    let label = d.int(0, 5);
    let params = EngineParams {
        alpha: 10.0,
        ..EngineParams::default()
    };
    gradcheck(&net, &sample, label, &params, coords, seed, 1e-4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::parse_topology;

    #[test]
    fn trials_are_reproducible() {
        let cfg = TrialConfig::default();
        let a = Trial::generate(&cfg, 42).unwrap();
        let b = Trial::generate(&cfg, 42).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.sample, b.sample);
        assert!(a.net.depth() >= 2 && a.net.depth() <= 4);
    }

    #[test]
    fn small_equivalence_suite_passes() {
        let report = check_equivalence(&TrialConfig::default(), 50, 7).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.sde.within_bounds(), "{:?}", report.sde);
    }

    #[test]
    fn conv_equivalence_suite_passes() {
        let cfg = TrialConfig {
            conv: true,
            ..TrialConfig::default()
        };
        let report = check_equivalence(&cfg, 30, 3).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn zero_trials_rejected() {
        assert!(check_equivalence(&TrialConfig::default(), 0, 1).is_err());
    }

    #[test]
    fn disabled_residual_is_caught_but_bounded() {
        let cfg = TrialConfig {
            options: EventOptions {
                residual: false,
                ..EventOptions::default()
            },
            ..TrialConfig::default()
        };
        let report = check_equivalence(&cfg, 100, 9).unwrap();
        assert!(!report.passed());
        assert!(report.counterexample_seed.is_some());
        assert!(report.sde.within_bounds(), "{:?}", report.sde);
    }

    #[test]
    fn injected_fault_is_caught() {
        let cfg = TrialConfig {
            options: EventOptions {
                fault_residual_boundary: Some(0.3),
                ..EventOptions::default()
            },
            ..TrialConfig::default()
        };
        let report = check_equivalence(&cfg, 100, 9).unwrap();
        assert!(!report.passed());
        let seed = report.counterexample_seed.unwrap();
        let trial = Trial::generate(&cfg, seed).unwrap();
        assert!(!compare_trial(&trial, &cfg.options).unwrap().exact());
    }

    #[test]
    fn zero_input_has_zero_sde() {
        let t = parse_topology("5-4-3").unwrap();
        let net = Network::new(&t, 1.0, 1.0, 1).unwrap();
        let params = EngineParams::default();
        let res = run_example(&net, &[0.0; 5], RunMode::Train { label: 0 }, &params, &EventOptions::default()).unwrap();
        let sde = sde_audit(&net, &[0.0; 5], 0, &params, &res).unwrap();
        assert_eq!(sde.max_forward(), 0.0);
    }

    #[test]
    fn order_invariance_holds() {
        let cfg = TrialConfig::default();
        for k in 0..10 {
            let trial = Trial::generate(&cfg, k).unwrap();
            assert!(order_invariance_check(&trial, 5, k).unwrap().passed());
        }
        let trial = Trial::generate(&cfg, 0).unwrap();
        assert!(order_invariance_check(&trial, 1, 0).is_err());
    }

    #[test]
    fn gradcheck_linear_network_is_tight() {
        let t = parse_topology("6-5-3").unwrap();
        let mut net = Network::new(&t, 0.7, 0.7, 4).unwrap();
        net.layers[0].spec.activation = Activation::Linear;
        let params = EngineParams {
            alpha: 3.0,
            ..EngineParams::default()
        };
        let sample = [0.1, 0.5, 0.9, 0.3, 0.0, 1.0];
        let r = gradcheck(&net, &sample, 1, &params, 40, 1, 1e-4).unwrap();
        assert_eq!(r.excluded, 0);
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn gradcheck_relu_network() {
        let t = parse_topology("12-10-8-4").unwrap();
        let net = Network::new(&t, 1.0, 0.5, 8).unwrap();
        let params = EngineParams {
            alpha: 10.0,
            ..EngineParams::default()
        };
        let sample: Vec<f64> = (0..12).map(|i| ((i * 7) % 12) as f64 / 11.0).collect();
        let r = gradcheck(&net, &sample, 2, &params, 100, 5, 1e-4).unwrap();
        assert!(r.checked > 50);
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn gradcheck_suite_passes_over_seeds() {
        for seed in 0..10 {
            let r = gradcheck_suite(100, seed).unwrap();
            assert!(r.checked >= 50, "seed {seed}: {r:?}");
            assert!(r.max_rel_err < 1e-4, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn order_suite_reports_counts() {
        let r = order_suite(&TrialConfig::default(), 5, 3, 9).unwrap();
        assert!(r.passed());
        assert_eq!((r.networks, r.permutations), (5, 3));
        assert!(order_suite(&TrialConfig::default(), 0, 3, 9).is_err());
    }
}
