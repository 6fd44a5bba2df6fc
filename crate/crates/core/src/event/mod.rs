//! Event-driven simulation of one example: signed integrate-and-fire forward
//! propagation, ternary error spikes on the way back, and residual flushes that
//! make the accumulated counts equal their rounded real-valued counterparts.

mod trace;

pub use trace::{EventTrace, Phase, SpikeEvent};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ann::{argmax, ops, softmax_cross_entropy, Batch};
use crate::config::{EngineParams, InputMode, RoundingMode};
use crate::encoding::input_spike_train;
use crate::error::{Error, Result};
use crate::network::{GradientAccumulator, Network};
use crate::topology::Activation;

/// Forward spike activation of a linear neuron.
#[inline]
pub fn spike_activation_linear(v: f64, theta_ff: f64) -> i8 {
    if v >= theta_ff {
        1
    } else if v <= -theta_ff {
        -1
    } else {
        0
    }
}

/// Forward spike activation of a ReLU neuron: negative spikes only while the
/// trace is positive, so the accumulated count never drops below zero.
#[inline]
pub fn spike_activation_relu(v: f64, x: f64, theta_ff: f64) -> i8 {
    if v >= theta_ff {
        1
    } else if v <= -theta_ff && x > 0.0 {
        -1
    } else {
        0
    }
}

#[inline]
pub fn spike_activation(activation: Activation, v: f64, x: f64, theta_ff: f64) -> i8 {
    match activation {
        Activation::Linear => spike_activation_linear(v, theta_ff),
        Activation::Relu => spike_activation_relu(v, x, theta_ff),
    }
}

#[inline]
pub fn error_spike_activation(u: f64, theta_bp: f64) -> i8 {
    spike_activation_linear(u, theta_bp)
}

/// Surrogate derivative evaluated once the forward pass is over.
#[inline]
pub fn surrogate_derivative(activation: Activation, v: f64, x: f64) -> bool {
    match activation {
        Activation::Linear => true,
        Activation::Relu => v > 0.0 || x > 0.0,
    }
}

/// Residual spike that moves `count` onto the rounded value of
/// `count + v / theta`. `boundary` is the fraction of `theta` at which
/// half-away rounding switches (0.5 unless a fault is injected).
#[inline]
pub fn residual_spike(v: f64, count: i64, theta: f64, rounding: RoundingMode, boundary: f64) -> i8 {
    match rounding {
        RoundingMode::RoundHalfAway => {
            let h = boundary * theta;
            if v > h || (count >= 0 && v == h) {
                1
            } else if v < -h || (count <= 0 && v == -h) {
                -1
            } else {
                0
            }
        }
        RoundingMode::Floor | RoundingMode::Ceil => rounding.apply(v / theta).clamp(-1.0, 1.0) as i8,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Last-in first-out work stack: each emitted spike is followed through
    /// before older pending spikes.
    DepthFirst,
    /// Pending spikes (and the input and settle orders) are processed in a
    /// seeded random order.
    Shuffled(u64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EventOptions {
    pub residual: bool,
    pub schedule: Schedule,
    pub log: bool,
    /// Replaces the half-threshold residual boundary, for fault-injection tests.
    pub fault_residual_boundary: Option<f64>,
}

impl Default for EventOptions {
    fn default() -> Self {
        Self {
            residual: true,
            schedule: Schedule::DepthFirst,
            log: false,
            fault_residual_boundary: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    Train { label: usize },
    Infer,
}

/// Snapshot of one neuron.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeuronState {
    pub v: f64,
    pub u: f64,
    pub x: f64,
    pub s: i64,
    pub z: i64,
    pub sprime: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub v: Vec<f64>,
    pub u: Vec<f64>,
    pub x: Vec<f64>,
    pub s: Vec<i64>,
    pub z: Vec<i64>,
    pub sprime: Vec<bool>,
}

impl LayerState {
    fn new(net: &Network, l: usize) -> Self {
        let layer = &net.layers[l];
        let n = layer.spec.output.len();
        Self {
            v: (0..n).map(|i| layer.bias_of(i)).collect(),
            u: vec![0.0; n],
            x: vec![0.0; n],
            s: vec![0; n],
            z: vec![0; n],
            sprime: vec![false; n],
        }
    }
}

/// Counts and integrator values of one layer captured just before its residual flush.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PreResidual {
    pub counts: Vec<i64>,
    pub integrator: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Forward,
    Frozen,
    Backward,
}

#[derive(Clone, Copy, Debug)]
struct Work {
    /// Forward: layer receiving the spike. Backward: layer that emitted the error.
    layer: usize,
    neuron: usize,
    sign: i8,
}

/// State of one example moving through the network.
pub struct Simulation<'a> {
    net: &'a Network,
    params: EngineParams,
    options: EventOptions,
    pub layers: Vec<LayerState>,
    /// Trace of the network input (`eta` times the encoded input).
    pub input_trace: Vec<f64>,
    pub trace: EventTrace,
    pub grads: GradientAccumulator,
    /// Forward snapshots of hidden layers, filled by the forward flush.
    pub pre_residual_forward: Vec<PreResidual>,
    /// Backward snapshots, filled by the backward flush (one per layer).
    pub pre_residual_backward: Vec<PreResidual>,
    stage: Stage,
    forward_flushed: usize,
    error_injected: bool,
    backward_flushed: usize,
    stack: Vec<Work>,
    rng: Option<ChaCha8Rng>,
}

impl<'a> Simulation<'a> {
    /// Fresh state: `V = b`, everything else zero.
    pub fn new(net: &'a Network, params: EngineParams, options: EventOptions) -> Self {
        let depth = net.depth();
        let rng = match options.schedule {
            Schedule::DepthFirst => None,
            Schedule::Shuffled(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        Self {
            net,
            params,
            options,
            layers: (0..depth).map(|l| LayerState::new(net, l)).collect(),
            input_trace: vec![0.0; net.input.len()],
            trace: EventTrace::new(depth, options.log),
            grads: GradientAccumulator::zeros(net),
            pre_residual_forward: vec![PreResidual::default(); net.top()],
            pre_residual_backward: vec![PreResidual::default(); depth],
            stage: Stage::Forward,
            forward_flushed: 0,
            error_injected: false,
            backward_flushed: 0,
            stack: Vec::new(),
            rng,
        }
    }

    pub fn network(&self) -> &Network {
        self.net
    }

    pub fn neuron(&self, layer: usize, i: usize) -> NeuronState {
        let st = &self.layers[layer];
        NeuronState {
            v: st.v[i],
            u: st.u[i],
            x: st.x[i],
            s: st.s[i],
            z: st.z[i],
            sprime: st.sprime[i],
        }
    }

    /// Raw top-layer integrators.
    pub fn logits(&self) -> &[f64] {
        &self.layers[self.net.top()].v
    }

    pub fn prediction(&self) -> usize {
        argmax(self.logits())
    }

    fn shuffle<T>(&mut self, items: &mut [T]) {
        if let Some(rng) = &mut self.rng {
            for i in (1..items.len()).rev() {
                let j = (rng.next_u64() % (i as u64 + 1)) as usize;
                items.swap(i, j);
            }
        }
    }

    fn pop(&mut self) -> Option<Work> {
        match &mut self.rng {
            None => self.stack.pop(),
            Some(rng) if !self.stack.is_empty() => {
                let k = (rng.next_u64() % self.stack.len() as u64) as usize;
                Some(self.stack.swap_remove(k))
            }
            Some(_) => None,
        }
    }

    fn require_stage(&self, stage: Stage, what: &str) -> Result<()> {
        if self.stage == stage {
            Ok(())
        } else {
            Err(Error::State(format!("{what} is not allowed in the {:?} stage", self.stage)))
        }
    }

    /// Fires `neuron` of hidden layer `l` until its integrator is back inside
    /// the threshold band, queueing one event per spike.
    fn settle(&mut self, l: usize, i: usize, phase: Phase) {
        let theta = self.net.theta_ff;
        let act = self.net.layers[l].spec.activation;
        let eta = self.params.eta;
        let st = &mut self.layers[l];
        loop {
            let s = spike_activation(act, st.v[i], st.x[i], theta);
            if s == 0 {
                break;
            }
            st.v[i] -= s as f64 * theta;
            st.s[i] += s as i64;
            st.x[i] = eta * st.s[i] as f64;
            self.trace.record(SpikeEvent {
                layer: l,
                neuron: i,
                sign: s,
                phase,
            });
            self.stack.push(Work {
                layer: l + 1,
                neuron: i,
                sign: s,
            });
        }
    }

    fn deliver_forward(&mut self, w: Work) {
        let net = self.net;
        let top = net.top();
        let layer = &net.layers[w.layer];
        let theta = net.theta_ff;
        let act = layer.spec.activation;
        let eta = self.params.eta;
        let sign = w.sign as f64;
        let st = &mut self.layers[w.layer];
        let stack = &mut self.stack;
        let trace = &mut self.trace;
        let mut synops = 0u64;
        layer.for_each_target(w.neuron, |i, widx| {
            synops += 1;
            st.v[i] += sign * layer.params.weights[widx];
            if w.layer == top {
                return;
            }
            loop {
                let s = spike_activation(act, st.v[i], st.x[i], theta);
                if s == 0 {
                    break;
                }
                st.v[i] -= s as f64 * theta;
                st.s[i] += s as i64;
                st.x[i] = eta * st.s[i] as f64;
                trace.record(SpikeEvent {
                    layer: w.layer,
                    neuron: i,
                    sign: s,
                    phase: Phase::Forward,
                });
                stack.push(Work {
                    layer: w.layer + 1,
                    neuron: i,
                    sign: s,
                });
            }
        });
        trace.forward_synops[w.layer] += synops;
    }

    fn drain_forward(&mut self) {
        while let Some(w) = self.pop() {
            self.deliver_forward(w);
        }
    }

    /// Processes a spike emitted by hidden layer `ev.layer` (or, for
    /// `Phase::Input`, input `ev.neuron`) and everything it triggers.
    pub fn propagate_forward_event(&mut self, ev: SpikeEvent) -> Result<()> {
        self.require_stage(Stage::Forward, "forward propagation")?;
        if ev.sign != 1 && ev.sign != -1 {
            return Err(Error::Internal(format!("spike sign {} is not ±1", ev.sign)));
        }
        let target = match ev.phase {
            Phase::Input => 0,
            Phase::Forward | Phase::ResidualForward => ev.layer + 1,
            _ => return Err(Error::Internal("backward event passed to forward propagation".into())),
        };
        if target > self.net.top() {
            return Err(Error::Internal(format!("layer {} has no successor", ev.layer)));
        }
        let width = if target == 0 {
            self.net.input.len()
        } else {
            self.net.layers[target - 1].spec.output.len()
        };
        if ev.neuron >= width {
            return Err(Error::Internal(format!("neuron {} out of range", ev.neuron)));
        }
        if target < self.forward_flushed {
            return Err(Error::State(format!("layer {target} was already flushed")));
        }
        self.stack.push(Work {
            layer: target,
            neuron: ev.neuron,
            sign: ev.sign,
        });
        self.drain_forward();
        Ok(())
    }

    /// Presents the input and runs standard forward propagation to quiescence.
    pub fn drive_input(&mut self, sample: &[f64]) -> Result<()> {
        self.require_stage(Stage::Forward, "input drive")?;
        let net = self.net;
        if sample.len() != net.input.len() {
            return Err(Error::Input(format!(
                "expected {} input values, got {}",
                net.input.len(),
                sample.len()
            )));
        }
        if sample.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("input contains non-finite values".into()));
        }
        let eta = self.params.eta;
        match self.params.input_mode {
            InputMode::AnalogFirstLayer => {
                let first = &net.layers[0];
                let sums = ops::forward(first, &Batch::from_rows(&[sample], sample.len()));
                self.layers[0].v.copy_from_slice(&sums.data);
                self.trace.input_macs += first.connection_count();
                for (x, &p) in self.input_trace.iter_mut().zip(sample) {
                    *x = eta * p;
                }
            }
            InputMode::SpikeEncoded => {
                let mut train = input_spike_train(sample, self.params.encode_steps);
                let mut counts = vec![0i64; sample.len()];
                self.shuffle(&mut train);
                for (j, sign) in train {
                    counts[j] += sign as i64;
                    self.input_trace[j] = eta * counts[j] as f64;
                    self.trace.record(SpikeEvent {
                        layer: 0,
                        neuron: j,
                        sign,
                        phase: Phase::Input,
                    });
                    self.stack.push(Work {
                        layer: 0,
                        neuron: j,
                        sign,
                    });
                    self.drain_forward();
                }
            }
        }
        // Neurons whose integrator starts outside the band (analog drive, large
        // biases) fire here, lowest layer first.
        for l in 0..net.top() {
            let mut order: Vec<usize> = (0..self.layers[l].v.len()).collect();
            self.shuffle(&mut order);
            for i in order {
                self.settle(l, i, Phase::Forward);
                self.drain_forward();
            }
        }
        Ok(())
    }

    /// Emits the residual spikes of hidden layer `l`. Layers must be flushed
    /// bottom-up.
    pub fn residual_flush_forward(&mut self, l: usize) -> Result<()> {
        self.require_stage(Stage::Forward, "forward flush")?;
        let top = self.net.top();
        if l >= top {
            return Err(Error::Internal(format!("layer {l} is not a hidden layer")));
        }
        if l != self.forward_flushed {
            return Err(Error::State(format!(
                "forward flush of layer {l} out of order (next is {})",
                self.forward_flushed
            )));
        }
        let st = &self.layers[l];
        self.pre_residual_forward[l] = PreResidual {
            counts: st.s.clone(),
            integrator: st.v.clone(),
        };
        let theta = self.net.theta_ff;
        let act = self.net.layers[l].spec.activation;
        let boundary = self.options.fault_residual_boundary.unwrap_or(0.5);
        let eta = self.params.eta;
        for i in 0..self.layers[l].v.len() {
            let st = &mut self.layers[l];
            let mut s = residual_spike(st.v[i], st.s[i], theta, self.params.rounding, boundary);
            if s < 0 && act == Activation::Relu && st.x[i] <= 0.0 {
                s = 0;
            }
            if s == 0 {
                continue;
            }
            st.v[i] -= s as f64 * theta;
            st.s[i] += s as i64;
            st.x[i] = eta * st.s[i] as f64;
            self.trace.record(SpikeEvent {
                layer: l,
                neuron: i,
                sign: s,
                phase: Phase::ResidualForward,
            });
            self.stack.push(Work {
                layer: l + 1,
                neuron: i,
                sign: s,
            });
            self.drain_forward();
        }
        self.forward_flushed += 1;
        Ok(())
    }

    /// Freezes the surrogate derivatives; forward processing ends here.
    pub fn freeze_surrogates(&mut self) -> Result<()> {
        self.require_stage(Stage::Forward, "surrogate freeze")?;
        if self.options.residual && self.forward_flushed != self.net.top() {
            return Err(Error::State("forward flush incomplete".into()));
        }
        for (st, layer) in self.layers.iter_mut().zip(&self.net.layers) {
            let act = layer.spec.activation;
            for i in 0..st.v.len() {
                st.sprime[i] = surrogate_derivative(act, st.v[i], st.x[i]);
            }
        }
        self.stage = Stage::Frozen;
        Ok(())
    }

    /// Accumulates a gated error of neuron `i` in layer `l`: weight increments
    /// of layer `l` plus error integration in layer `l-1`.
    fn deliver_backward(&mut self, w: Work) {
        let net = self.net;
        let l = w.layer;
        let layer = &net.layers[l];
        let delta = w.sign as f64;
        let theta = net.theta_bp;
        let trainable = layer.params.trainable;
        let lower = match l {
            0 => None,
            _ => Some(&mut self.layers[l - 1]),
        };
        let grads = &mut self.grads.layers[l];
        let stack = &mut self.stack;
        let trace = &mut self.trace;
        let mut synops = 0u64;
        let input_trace = &self.input_trace;
        match lower {
            None => {
                layer.for_each_source(w.neuron, |j, widx| {
                    synops += 1;
                    if trainable {
                        grads.weights[widx] -= delta * input_trace[j];
                    }
                });
            }
            Some(st) => {
                layer.for_each_source(w.neuron, |j, widx| {
                    synops += 1;
                    if trainable {
                        grads.weights[widx] -= delta * st.x[j];
                    }
                    st.u[j] += delta * layer.params.weights[widx];
                    loop {
                        let z = error_spike_activation(st.u[j], theta);
                        if z == 0 {
                            break;
                        }
                        st.u[j] -= z as f64 * theta;
                        st.z[j] += z as i64;
                        trace.error_spikes[l - 1] += 1;
                        if st.sprime[j] {
                            trace.record(SpikeEvent {
                                layer: l - 1,
                                neuron: j,
                                sign: z,
                                phase: Phase::Backward,
                            });
                            stack.push(Work {
                                layer: l - 1,
                                neuron: j,
                                sign: z,
                            });
                        }
                    }
                });
            }
        }
        if trainable {
            if let Some(b) = layer.bias_index(w.neuron) {
                grads.biases[b] -= delta * self.params.eta;
            }
        }
        trace.backward_synops[l] += synops;
    }

    fn drain_backward(&mut self) {
        while let Some(w) = self.pop() {
            self.deliver_backward(w);
        }
    }

    /// Processes a gated error event emitted by neuron `ev.neuron` of layer
    /// `ev.layer` and everything it triggers below.
    pub fn backpropagate_event(&mut self, ev: SpikeEvent) -> Result<()> {
        if self.stage == Stage::Forward {
            return Err(Error::State("error propagation before surrogate freeze".into()));
        }
        if ev.sign != 1 && ev.sign != -1 {
            return Err(Error::Internal(format!("error sign {} is not ±1", ev.sign)));
        }
        if !ev.phase.is_backward() {
            return Err(Error::Internal("forward event passed to backpropagation".into()));
        }
        if ev.layer >= self.net.depth() || ev.neuron >= self.layers[ev.layer].u.len() {
            return Err(Error::Internal(format!("neuron {}/{} out of range", ev.layer, ev.neuron)));
        }
        self.stage = Stage::Backward;
        self.stack.push(Work {
            layer: ev.layer,
            neuron: ev.neuron,
            sign: ev.sign,
        });
        self.drain_backward();
        Ok(())
    }

    /// Sets `U^L = alpha * (softmax(V^L) - onehot(label))` and drains the top
    /// layer while `|U| >= theta_bp`.
    pub fn inject_top_layer_error(&mut self, label: usize) -> Result<()> {
        if self.stage != Stage::Frozen || self.error_injected {
            return Err(Error::State("top-layer error needs a frozen, not yet injected state".into()));
        }
        let top = self.net.top();
        let (_, grad) = softmax_cross_entropy(self.logits(), label)?;
        let alpha = self.params.alpha;
        let theta = self.net.theta_bp;
        self.error_injected = true;
        self.stage = Stage::Backward;
        for (i, g) in grad.into_iter().enumerate() {
            self.layers[top].u[i] = alpha * g;
            loop {
                let st = &mut self.layers[top];
                let z = error_spike_activation(st.u[i], theta);
                if z == 0 {
                    break;
                }
                st.u[i] -= z as f64 * theta;
                st.z[i] += z as i64;
                self.emit_error(top, i, z, Phase::Backward);
            }
        }
        Ok(())
    }

    fn emit_error(&mut self, l: usize, i: usize, z: i8, phase: Phase) {
        self.trace.error_spikes[l] += 1;
        if !self.layers[l].sprime[i] {
            return;
        }
        self.trace.record(SpikeEvent {
            layer: l,
            neuron: i,
            sign: z,
            phase,
        });
        self.stack.push(Work {
            layer: l,
            neuron: i,
            sign: z,
        });
        self.drain_backward();
    }

    /// Emits the residual error spikes of layer `l`. Layers must be flushed
    /// top-down, starting with the top layer.
    pub fn residual_flush_backward(&mut self, l: usize) -> Result<()> {
        if !self.error_injected {
            return Err(Error::State("backward flush before error injection".into()));
        }
        let depth = self.net.depth();
        if l >= depth {
            return Err(Error::Internal(format!("layer {l} out of range")));
        }
        let expected = depth - 1 - self.backward_flushed.min(depth - 1);
        if self.backward_flushed >= depth || l != expected {
            return Err(Error::State(format!("backward flush of layer {l} out of order")));
        }
        let st = &self.layers[l];
        self.pre_residual_backward[l] = PreResidual {
            counts: st.z.clone(),
            integrator: st.u.clone(),
        };
        let theta = self.net.theta_bp;
        let boundary = self.options.fault_residual_boundary.unwrap_or(0.5);
        for i in 0..self.layers[l].u.len() {
            let st = &mut self.layers[l];
            let z = residual_spike(st.u[i], st.z[i], theta, self.params.rounding, boundary);
            if z == 0 {
                continue;
            }
            st.u[i] -= z as f64 * theta;
            st.z[i] += z as i64;
            self.emit_error(l, i, z, Phase::ResidualBackward);
        }
        self.backward_flushed += 1;
        Ok(())
    }

    /// Counts gated errors `E = S' * Z` of layer `l`.
    pub fn gated_errors(&self, l: usize) -> Vec<i64> {
        let st = &self.layers[l];
        st.z.iter().zip(&st.sprime).map(|(&z, &g)| if g { z } else { 0 }).collect()
    }
}

/// Outcome of one example.
#[derive(Debug)]
pub struct ExampleResult {
    pub prediction: usize,
    pub logits: Vec<f64>,
    /// Weight increments, present in training mode; not yet applied.
    pub grads: Option<GradientAccumulator>,
    pub trace: EventTrace,
    pub layers: Vec<LayerState>,
    pub pre_residual_forward: Vec<PreResidual>,
    pub pre_residual_backward: Vec<PreResidual>,
}

/// Runs one example: input drive, bottom-up forward flush, prediction and,
/// when training, surrogate freeze, error injection, backward propagation and
/// top-down backward flush.
pub fn run_example(
    net: &Network,
    sample: &[f64],
    mode: RunMode,
    params: &EngineParams,
    options: &EventOptions,
) -> Result<ExampleResult> {
    if let RunMode::Train { label } = mode {
        if label >= net.classes() {
            return Err(Error::Input(format!(
                "label {label} out of range for {} classes",
                net.classes()
            )));
        }
    }
    let mut sim = Simulation::new(net, *params, *options);
    sim.drive_input(sample)?;
    if options.residual {
        for l in 0..net.top() {
            sim.residual_flush_forward(l)?;
        }
    }
    let prediction = sim.prediction();
    if !options.residual {
        for l in 0..net.top() {
            sim.pre_residual_forward[l] = PreResidual {
                counts: sim.layers[l].s.clone(),
                integrator: sim.layers[l].v.clone(),
            };
        }
    }
    let grads = match mode {
        RunMode::Infer => None,
        RunMode::Train { label } => {
            sim.freeze_surrogates()?;
            sim.inject_top_layer_error(label)?;
            if options.residual {
                for l in (0..net.depth()).rev() {
                    sim.residual_flush_backward(l)?;
                }
            } else {
                for l in 0..net.depth() {
                    sim.pre_residual_backward[l] = PreResidual {
                        counts: sim.layers[l].z.clone(),
                        integrator: sim.layers[l].u.clone(),
                    };
                }
            }
            Some(std::mem::replace(&mut sim.grads, GradientAccumulator::zeros(net)))
        }
    };
    Ok(ExampleResult {
        prediction,
        logits: sim.logits().to_vec(),
        grads,
        trace: sim.trace,
        layers: sim.layers,
        pre_residual_forward: sim.pre_residual_forward,
        pre_residual_backward: sim.pre_residual_backward,
    })
}

/// Adds the increments to the trainable weights and zeroes them.
pub fn apply_updates(net: &mut Network, grads: &mut GradientAccumulator) -> Result<()> {
    net.apply_increments(grads)
        .map_err(|e| Error::Internal(format!("cannot apply increments: {e}")))?;
    grads.clear();
    Ok(())
}
