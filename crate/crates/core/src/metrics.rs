//! Synaptic-operation accounting, spike-count bounds and sparsity reports.

use std::fmt::Write as _;

use crate::ann::{Batch, IntegerErrors};
use crate::config::{EngineParams, InputMode, RoundingMode};
use crate::event::{EventTrace, LayerState};
use crate::network::Network;
use crate::topology::LayerKind;

/// Upper bound on the spikes a single neuron emits for one example, residual
/// spike included: every standard spike lowers `|V|` by exactly `theta`, every
/// input raises it by at most `|w|`, and the residual spike only fires when at
/// least half a threshold (any nonzero amount for floor/ceil) is left.
pub fn neuron_spike_bound(n_in: usize, w_max: f64, b_max: f64, n_prev: f64, theta: f64, rounding: RoundingMode) -> f64 {
    let drive = (n_in as f64 * w_max * n_prev + b_max) / theta;
    match rounding {
        RoundingMode::RoundHalfAway => (drive + 0.5).floor(),
        RoundingMode::Floor | RoundingMode::Ceil => drive.floor() + 1.0,
    }
}

/// Largest input magnitude seen by the first layer: the pixel maximum for
/// analog input, the spike count of a full pixel for spike-encoded input.
pub fn input_max(params: &EngineParams, pixel_max: f64) -> f64 {
    match params.input_mode {
        InputMode::AnalogFirstLayer => pixel_max,
        InputMode::SpikeEncoded => (pixel_max * params.encode_steps as f64).round(),
    }
}

/// Per-neuron forward spike bound for every hidden layer.
pub fn forward_spike_bounds(net: &Network, input_max: f64, rounding: RoundingMode) -> Vec<f64> {
    let mut prev = input_max;
    let mut out = Vec::with_capacity(net.top());
    for layer in &net.layers[..net.top()] {
        let b = neuron_spike_bound(
            layer.max_in_connections(),
            layer.max_abs_weight(),
            layer.max_abs_bias(),
            prev,
            net.theta_ff,
            rounding,
        );
        out.push(b);
        prev = b;
    }
    out
}

/// Per-neuron bound on error spikes (gated or not) for every layer.
pub fn backward_spike_bounds(net: &Network, alpha: f64, rounding: RoundingMode) -> Vec<f64> {
    let depth = net.depth();
    let mut out = vec![0.0; depth];
    // |alpha * (softmax - onehot)| <= alpha
    out[depth - 1] = neuron_spike_bound(1, alpha, 0.0, 1.0, net.theta_bp, rounding);
    for l in (0..depth - 1).rev() {
        let above = &net.layers[l + 1];
        out[l] = neuron_spike_bound(
            above.max_out_connections(),
            above.max_abs_weight(),
            0.0,
            out[l + 1],
            net.theta_bp,
            rounding,
        );
    }
    out
}

/// `(n - n_min) / n_min`, or `None` when `n_min` is zero.
pub fn redundancy_ratio(n: u64, n_min: u64) -> Option<f64> {
    assert!(n >= n_min, "emitted spikes ({n}) below the accumulated count ({n_min})");
    (n_min > 0).then(|| (n - n_min) as f64 / n_min as f64)
}

/// Operation counts per layer, summed over examples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OpCounters {
    pub examples: u64,
    /// Accumulations caused by forward spikes arriving in each layer.
    pub forward_acc: Vec<u64>,
    /// Accumulations caused by error events emitted from each layer.
    pub backward_acc: Vec<u64>,
    /// Multiply-accumulates of the dense equivalent, per layer and pass.
    pub mac: Vec<u64>,
    /// Forward spikes emitted per layer.
    pub forward_spikes: Vec<u64>,
    /// Error spikes emitted per layer (before gating).
    pub backward_spikes: Vec<u64>,
    /// `sum |S|` and `sum |Z|` per layer.
    pub forward_min: Vec<u64>,
    pub backward_min: Vec<u64>,
}

impl OpCounters {
    pub fn new(net: &Network) -> Self {
        let depth = net.depth();
        Self {
            examples: 0,
            forward_acc: vec![0; depth],
            backward_acc: vec![0; depth],
            mac: vec![0; depth],
            forward_spikes: vec![0; depth],
            backward_spikes: vec![0; depth],
            forward_min: vec![0; depth],
            backward_min: vec![0; depth],
        }
    }

    fn count_example(&mut self, net: &Network) {
        self.examples += 1;
        for (m, layer) in self.mac.iter_mut().zip(&net.layers) {
            *m += layer.connection_count();
        }
    }

    /// Adds one event-engine example.
    pub fn add_event(&mut self, net: &Network, trace: &EventTrace, layers: &[LayerState]) {
        self.count_example(net);
        for l in 0..net.depth() {
            self.forward_acc[l] += trace.forward_synops[l];
            self.backward_acc[l] += trace.backward_synops[l];
            self.forward_spikes[l] += trace.forward_events[l];
            self.backward_spikes[l] += trace.error_spikes[l];
            if l < net.top() {
                self.forward_min[l] += layers[l].s.iter().map(|s| s.unsigned_abs()).sum::<u64>();
            }
            self.backward_min[l] += layers[l].z.iter().map(|z| z.unsigned_abs()).sum::<u64>();
        }
    }

    /// Adds one example using integer-ANN counts: each neuron emits exactly
    /// `|S|` forward and `|Z|` error spikes, and each gated error touches the
    /// neuron's incoming connections once.
    pub fn add_integer(&mut self, net: &Network, s: &[Vec<i64>], errors: &IntegerErrors) {
        self.count_example(net);
        for l in 0..net.depth() {
            let layer = &net.layers[l];
            if l < net.top() {
                let fs: u64 = s[l].iter().map(|v| v.unsigned_abs()).sum();
                self.forward_spikes[l] += fs;
                self.forward_min[l] += fs;
                let next = &net.layers[l + 1];
                self.forward_acc[l + 1] += s[l]
                    .iter()
                    .enumerate()
                    .map(|(j, v)| v.unsigned_abs() * next.out_connections(j) as u64)
                    .sum::<u64>();
            }
            let zs: u64 = errors.z[l].iter().map(|v| v.unsigned_abs()).sum();
            self.backward_spikes[l] += zs;
            self.backward_min[l] += zs;
            self.backward_acc[l] += errors.e[l]
                .iter()
                .enumerate()
                .map(|(i, v)| v.unsigned_abs() * layer.in_connections(i) as u64)
                .sum::<u64>();
        }
    }

    /// Adds a batch from the ANN engines. `out[l]` holds hidden-layer counts,
    /// `z[l]` and `e[l]` the error counts and gated errors of every layer, one
    /// row per example.
    pub fn add_batch(&mut self, net: &Network, conn: &ConnectionCounts, out: &[Batch], z: &[Batch], e: &[Batch]) {
        let rows = z[net.top()].rows;
        for _ in 0..rows {
            self.count_example(net);
        }
        for l in 0..net.depth() {
            if l < net.top() {
                let fs: f64 = out[l].data.iter().map(|v| v.abs()).sum();
                self.forward_spikes[l] += fs as u64;
                self.forward_min[l] += fs as u64;
                self.forward_acc[l + 1] += weighted(&out[l], &conn.outgoing[l + 1]);
            }
            let zs: f64 = z[l].data.iter().map(|v| v.abs()).sum();
            self.backward_spikes[l] += zs as u64;
            self.backward_min[l] += zs as u64;
            self.backward_acc[l] += weighted(&e[l], &conn.incoming[l]);
        }
    }

    pub fn merge(&mut self, other: &OpCounters) {
        fn add(a: &mut [u64], b: &[u64]) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.examples += other.examples;
        add(&mut self.forward_acc, &other.forward_acc);
        add(&mut self.backward_acc, &other.backward_acc);
        add(&mut self.mac, &other.mac);
        add(&mut self.forward_spikes, &other.forward_spikes);
        add(&mut self.backward_spikes, &other.backward_spikes);
        add(&mut self.forward_min, &other.forward_min);
        add(&mut self.backward_min, &other.backward_min);
    }
}

fn weighted(b: &Batch, per_column: &[u64]) -> u64 {
    (0..b.rows)
        .map(|r| {
            b.row(r)
                .iter()
                .zip(per_column)
                .map(|(v, &c)| v.abs() as u64 * c)
                .sum::<u64>()
        })
        .sum()
}

/// Connection counts per neuron, cached for repeated accounting.
#[derive(Clone, Debug)]
pub struct ConnectionCounts {
    /// `incoming[l][i]`: connections into neuron `i` of layer `l`.
    pub incoming: Vec<Vec<u64>>,
    /// `outgoing[l][j]`: connections from input `j` of layer `l` into that layer.
    pub outgoing: Vec<Vec<u64>>,
}

impl ConnectionCounts {
    pub fn new(net: &Network) -> Self {
        Self {
            incoming: net
                .layers
                .iter()
                .map(|l| (0..l.spec.output.len()).map(|i| l.in_connections(i) as u64).collect())
                .collect(),
            outgoing: net
                .layers
                .iter()
                .map(|l| (0..l.spec.input.len()).map(|j| l.out_connections(j) as u64).collect())
                .collect(),
        }
    }
}

/// Layers that enter the relative-operation comparison: pooling layers and an
/// analog first layer are left out.
pub fn compared_layers(net: &Network, input_mode: InputMode) -> Vec<bool> {
    net.layers
        .iter()
        .enumerate()
        .map(|(l, layer)| layer.spec.kind != LayerKind::AvgPool && !(l == 0 && input_mode == InputMode::AnalogFirstLayer))
        .collect()
}

/// Backward relative synaptic operations (ACC / MAC) per layer, `None` for
/// excluded layers, plus the mean over the included ones.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeOps {
    pub per_layer: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn relative_backprop_ops(counters: &OpCounters, included: &[bool]) -> RelativeOps {
    let per_layer: Vec<Option<f64>> = counters
        .backward_acc
        .iter()
        .zip(&counters.mac)
        .zip(included)
        .map(|((&acc, &mac), &inc)| (inc && mac > 0).then(|| acc as f64 / mac as f64))
        .collect();
    let used: Vec<f64> = per_layer.iter().flatten().copied().collect();
    let mean = if used.is_empty() {
        0.0
    } else {
        used.iter().sum::<f64>() / used.len() as f64
    };
    RelativeOps { per_layer, mean }
}

/// Spike counts of one layer against their bounds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerSpikeAudit {
    pub n_min: u64,
    pub n: u64,
    pub n_max: f64,
}

impl LayerSpikeAudit {
    pub fn holds(&self) -> bool {
        self.n_min <= self.n && (self.n as f64) <= self.n_max
    }
}

/// Checks `n_min <= n <= n_max` for every hidden layer (forward) and every
/// layer (backward) of one event-engine example.
pub fn audit_spike_counts(
    net: &Network,
    params: &EngineParams,
    pixel_max: f64,
    trace: &EventTrace,
    layers: &[LayerState],
) -> (Vec<LayerSpikeAudit>, Vec<LayerSpikeAudit>) {
    let fwd_bounds = forward_spike_bounds(net, input_max(params, pixel_max), params.rounding);
    let bwd_bounds = backward_spike_bounds(net, params.alpha, params.rounding);
    let forward = (0..net.top())
        .map(|l| LayerSpikeAudit {
            n_min: layers[l].s.iter().map(|s| s.unsigned_abs()).sum(),
            n: trace.forward_events[l],
            n_max: fwd_bounds[l] * layers[l].s.len() as f64,
        })
        .collect();
    let backward = (0..net.depth())
        .map(|l| LayerSpikeAudit {
            n_min: layers[l].z.iter().map(|z| z.unsigned_abs()).sum(),
            n: trace.error_spikes[l],
            n_max: bwd_bounds[l] * layers[l].z.len() as f64,
        })
        .collect();
    (forward, backward)
}

pub const SPARSITY_CSV_HEADER: &str = "epoch,layer,phase,acc_ops,mac_ops,rel_ops,n_min,n_max,redundancy";

/// Per-layer sparsity rows for the CSV above. Forward rows cover hidden
/// layers, backward rows every layer; `n_max` is left empty when no bound is given.
pub fn sparsity_rows(
    epoch: usize,
    counters: &OpCounters,
    forward_bounds: Option<&[f64]>,
    backward_bounds: Option<&[f64]>,
    net: &Network,
) -> String {
    let mut out = String::new();
    let widths: Vec<f64> = net.layers.iter().map(|l| l.spec.output.len() as f64).collect();
    let examples = counters.examples.max(1) as f64;
    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for l in 0..net.depth() {
        for (phase, acc, n, n_min, bound) in [
            (
                "forward",
                counters.forward_acc[l],
                counters.forward_spikes[l],
                counters.forward_min[l],
                forward_bounds.and_then(|b| b.get(l).copied()),
            ),
            (
                "backward",
                counters.backward_acc[l],
                counters.backward_spikes[l],
                counters.backward_min[l],
                backward_bounds.and_then(|b| b.get(l).copied()),
            ),
        ] {
            if phase == "forward" && l >= net.top() {
                continue;
            }
            let mac = counters.mac[l];
            let rel = if mac > 0 { acc as f64 / mac as f64 } else { 0.0 };
            // bounds are per neuron and example
            let n_max = bound.map(|b| b * widths[l] * examples);
            let redundancy = if n >= n_min { redundancy_ratio(n, n_min) } else { None };
            let _ = writeln!(
                out,
                "{epoch},{l},{phase},{acc},{mac},{rel},{n_min},{},{}",
                fmt_opt(n_max),
                fmt_opt(redundancy)
            );
        }
    }
    out
}
