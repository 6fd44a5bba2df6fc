//! Network construction and the parameter store shared by both engines.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::topology::{LayerKind, LayerSpec, Shape3, Topology};

/// Rounds a value onto the f32 grid. Parameters always live on this grid so
/// that checkpoints (f32 payload) reload bit-exactly.
#[inline]
pub fn f32_grid(v: f64) -> f64 {
    v as f32 as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// Row-major: `[out][in]` for dense, `[oc][ic][ky][kx]` for convolution,
    /// `[py][px]` for pooling.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: LayerParams,
}

/// Uniform draw in [0, 1) from the top 53 bits of a 64-bit word.
fn unit_f64(word: u64) -> f64 {
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Draws layer parameters. Weights are uniform in `[-sqrt(6/fan_in), sqrt(6/fan_in)]`
/// from a ChaCha8 stream keyed by `(seed, layer_index)`; biases start at zero.
/// Pooling layers get fixed weights `1/area`.
pub fn init_weights(spec: &LayerSpec, layer_index: usize, seed: u64) -> Result<LayerParams> {
    let fan_in = spec.fan_in();
    if fan_in == 0 {
        return Err(Error::config(format!("layer {layer_index} has zero fan-in")));
    }
    if spec.kind == LayerKind::AvgPool {
        let area = spec.kernel * spec.kernel;
        return Ok(LayerParams {
            weights: vec![1.0 / area as f64; area],
            biases: Vec::new(),
            trainable: false,
        });
    }
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(layer_index as u64);
    let weights = (0..spec.weight_count())
        .map(|_| f32_grid((2.0 * unit_f64(rng.next_u64()) - 1.0) * bound))
        .collect();
    Ok(LayerParams {
        weights,
        biases: vec![0.0; spec.bias_count()],
        trainable: true,
    })
}

impl Layer {
    #[inline]
    pub fn weight(&self, index: usize) -> f64 {
        self.params.weights[index]
    }

    #[inline]
    pub fn bias_of(&self, neuron: usize) -> f64 {
        match self.spec.kind {
            LayerKind::FullyConnected => self.params.biases[neuron],
            LayerKind::Convolution => self.params.biases[neuron / self.spec.output.plane()],
            LayerKind::AvgPool => 0.0,
        }
    }

    /// Bias slot used by `neuron`, if the layer has biases.
    #[inline]
    pub fn bias_index(&self, neuron: usize) -> Option<usize> {
        match self.spec.kind {
            LayerKind::FullyConnected => Some(neuron),
            LayerKind::Convolution => Some(neuron / self.spec.output.plane()),
            LayerKind::AvgPool => None,
        }
    }

    /// Visits every output neuron fed by input `j`, with the weight index of the connection.
    #[inline]
    pub fn for_each_target(&self, j: usize, mut f: impl FnMut(usize, usize)) {
        let spec = &self.spec;
        match spec.kind {
            LayerKind::FullyConnected => {
                let n_in = spec.input.len();
                for i in 0..spec.output.len() {
                    f(i, i * n_in + j);
                }
            }
            LayerKind::Convolution => {
                let (h, w) = (spec.input.height, spec.input.width);
                let k = spec.kernel;
                let pad = spec.pad();
                let plane = h * w;
                let c = j / plane;
                let y = (j % plane) / w;
                let x = j % w;
                let ic = spec.input.channels;
                for oc in 0..spec.output.channels {
                    for ky in 0..k {
                        let Some(oy) = (y + pad).checked_sub(ky).filter(|&v| v < h) else {
                            continue;
                        };
                        for kx in 0..k {
                            let Some(ox) = (x + pad).checked_sub(kx).filter(|&v| v < w) else {
                                continue;
                            };
                            f(oc * plane + oy * w + ox, ((oc * ic + c) * k + ky) * k + kx);
                        }
                    }
                }
            }
            LayerKind::AvgPool => {
                let p = spec.kernel;
                let (h, w) = (spec.input.height, spec.input.width);
                let plane = h * w;
                let c = j / plane;
                let y = (j % plane) / w;
                let x = j % w;
                let (oh, ow) = (spec.output.height, spec.output.width);
                f(c * oh * ow + (y / p) * ow + x / p, (y % p) * p + x % p);
            }
        }
    }

    /// Visits every input neuron feeding output `i`, with the weight index of the connection.
    #[inline]
    pub fn for_each_source(&self, i: usize, mut f: impl FnMut(usize, usize)) {
        let spec = &self.spec;
        match spec.kind {
            LayerKind::FullyConnected => {
                let n_in = spec.input.len();
                for j in 0..n_in {
                    f(j, i * n_in + j);
                }
            }
            LayerKind::Convolution => {
                let (h, w) = (spec.output.height, spec.output.width);
                let k = spec.kernel;
                let pad = spec.pad();
                let plane = h * w;
                let oc = i / plane;
                let oy = (i % plane) / w;
                let ox = i % w;
                let ic = spec.input.channels;
                for c in 0..ic {
                    for ky in 0..k {
                        let Some(y) = (oy + ky).checked_sub(pad).filter(|&v| v < h) else {
                            continue;
                        };
                        for kx in 0..k {
                            let Some(x) = (ox + kx).checked_sub(pad).filter(|&v| v < w) else {
                                continue;
                            };
                            f(c * plane + y * w + x, ((oc * ic + c) * k + ky) * k + kx);
                        }
                    }
                }
            }
            LayerKind::AvgPool => {
                let p = spec.kernel;
                let (oh, ow) = (spec.output.height, spec.output.width);
                let c = i / (oh * ow);
                let oy = (i % (oh * ow)) / ow;
                let ox = i % ow;
                let (h, w) = (spec.input.height, spec.input.width);
                for dy in 0..p {
                    for dx in 0..p {
                        f(c * h * w + (oy * p + dy) * w + ox * p + dx, dy * p + dx);
                    }
                }
            }
        }
    }

    fn valid_taps(pos: usize, k: usize, pad: usize, size: usize) -> usize {
        (0..k)
            .filter(|&t| (pos + t).checked_sub(pad).is_some_and(|v| v < size))
            .count()
    }

    /// Number of connections arriving at output neuron `i`.
    pub fn in_connections(&self, i: usize) -> usize {
        let spec = &self.spec;
        match spec.kind {
            LayerKind::FullyConnected => spec.input.len(),
            LayerKind::Convolution => {
                let (h, w) = (spec.output.height, spec.output.width);
                let oy = (i % (h * w)) / w;
                let ox = i % w;
                spec.input.channels
                    * Self::valid_taps(oy, spec.kernel, spec.pad(), h)
                    * Self::valid_taps(ox, spec.kernel, spec.pad(), w)
            }
            LayerKind::AvgPool => spec.kernel * spec.kernel,
        }
    }

    /// Number of connections leaving input neuron `j`.
    pub fn out_connections(&self, j: usize) -> usize {
        let spec = &self.spec;
        match spec.kind {
            LayerKind::FullyConnected => spec.output.len(),
            LayerKind::Convolution => {
                // same padding with odd kernels is symmetric, so the tap count
                // seen from an input position mirrors the output case
                let (h, w) = (spec.input.height, spec.input.width);
                let y = (j % (h * w)) / w;
                let x = j % w;
                let k = spec.kernel;
                let hi = k - 1 - spec.pad();
                spec.output.channels
                    * Self::valid_taps(y, k, hi, h)
                    * Self::valid_taps(x, k, hi, w)
            }
            LayerKind::AvgPool => 1,
        }
    }

    /// Total number of synaptic connections (the dense MAC count of one pass).
    pub fn connection_count(&self) -> u64 {
        let spec = &self.spec;
        match spec.kind {
            LayerKind::FullyConnected => (spec.input.len() * spec.output.len()) as u64,
            LayerKind::Convolution => {
                let (h, w) = (spec.output.height, spec.output.width);
                let k = spec.kernel;
                let pad = spec.pad();
                let rows: usize = (0..h).map(|y| Self::valid_taps(y, k, pad, h)).sum();
                let cols: usize = (0..w).map(|x| Self::valid_taps(x, k, pad, w)).sum();
                (spec.output.channels * spec.input.channels * rows * cols) as u64
            }
            LayerKind::AvgPool => spec.input.len() as u64,
        }
    }

    /// Largest absolute weight.
    pub fn max_abs_weight(&self) -> f64 {
        self.params.weights.iter().fold(0.0, |m, w| m.max(w.abs()))
    }

    pub fn max_abs_bias(&self) -> f64 {
        self.params.biases.iter().fold(0.0, |m, b| m.max(b.abs()))
    }

    /// Largest per-neuron connection count in either direction.
    pub fn max_in_connections(&self) -> usize {
        self.spec.fan_in()
    }

    pub fn max_out_connections(&self) -> usize {
        match self.spec.kind {
            LayerKind::FullyConnected => self.spec.output.len(),
            LayerKind::Convolution => self.spec.output.channels * self.spec.kernel * self.spec.kernel,
            LayerKind::AvgPool => 1,
        }
    }
}

/// Ordered stack of layers with the two integration thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub input: Shape3,
    pub layers: Vec<Layer>,
    pub theta_ff: f64,
    pub theta_bp: f64,
}

impl Network {
    /// Builds a network with freshly initialized weights.
    pub fn new(topology: &Topology, theta_ff: f64, theta_bp: f64, seed: u64) -> Result<Self> {
        let layers = topology
            .layers
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                Ok(Layer {
                    spec: spec.clone(),
                    params: init_weights(spec, i, seed)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(topology.input, layers, theta_ff, theta_bp)
    }

    pub fn from_config(cfg: &NetworkConfig) -> Result<Self> {
        Self::new(&cfg.parsed_topology()?, cfg.theta_ff, cfg.theta_bp, cfg.seed)
    }

    /// Assembles a network from explicit layers, checking that shapes chain.
    pub fn from_layers(input: Shape3, layers: Vec<Layer>, theta_ff: f64, theta_bp: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        let mut shape = input;
        for (i, layer) in layers.iter().enumerate() {
            if layer.spec.input.len() != shape.len() {
                return Err(Error::Shape(format!(
                    "layer {i} expects {} inputs but receives {}",
                    layer.spec.input.len(),
                    shape.len()
                )));
            }
            if layer.params.weights.len() != layer.spec.weight_count()
                || layer.params.biases.len() != layer.spec.bias_count()
            {
                return Err(Error::Shape(format!("layer {i} parameters do not match its spec")));
            }
            shape = layer.spec.output;
        }
        if !(theta_ff > 0.0 && theta_bp > 0.0) {
            return Err(Error::config("thresholds must be positive"));
        }
        Ok(Self {
            input,
            layers,
            theta_ff,
            theta_bp,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn top(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn classes(&self) -> usize {
        self.layers[self.top()].spec.output.len()
    }

    pub fn topology(&self) -> Topology {
        Topology {
            input: self.input,
            layers: self.layers.iter().map(|l| l.spec.clone()).collect(),
        }
    }

    /// Adds the increments to every trainable layer. Pooling layers are left
    /// untouched whatever the accumulator holds for them.
    pub fn apply_increments(&mut self, increments: &GradientAccumulator) -> Result<()> {
        if increments.layers.len() != self.layers.len() {
            return Err(Error::Internal(format!(
                "accumulator has {} layers, network has {}",
                increments.layers.len(),
                self.layers.len()
            )));
        }
        for (i, (layer, inc)) in self.layers.iter().zip(&increments.layers).enumerate() {
            if layer.params.trainable
                && (inc.weights.len() != layer.params.weights.len()
                    || inc.biases.len() != layer.params.biases.len())
            {
                return Err(Error::Internal(format!("accumulator shape mismatch in layer {i}")));
            }
        }
        for (layer, inc) in self.layers.iter_mut().zip(&increments.layers) {
            if !layer.params.trainable {
                continue;
            }
            for (w, d) in layer.params.weights.iter_mut().zip(&inc.weights) {
                *w = f32_grid(*w + d);
            }
            for (b, d) in layer.params.biases.iter_mut().zip(&inc.biases) {
                *b = f32_grid(*b + d);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerIncrement {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Per-weight increment store, flushed into the weights once propagation ends.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientAccumulator {
    pub layers: Vec<LayerIncrement>,
}

impl GradientAccumulator {
    /// Zeroed accumulator; pooling layers get empty slots.
    pub fn zeros(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    if l.params.trainable {
                        LayerIncrement {
                            weights: vec![0.0; l.params.weights.len()],
                            biases: vec![0.0; l.params.biases.len()],
                        }
                    } else {
                        LayerIncrement::default()
                    }
                })
                .collect(),
        }
    }

    /// Element-wise sum; merging is order-insensitive up to float associativity.
    pub fn merge(&mut self, other: &GradientAccumulator) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Internal("cannot merge accumulators of different depth".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.weights.len() != b.weights.len() || a.biases.len() != b.biases.len() {
                return Err(Error::Internal("cannot merge accumulators of different shape".into()));
            }
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.biases.iter_mut().zip(&b.biases).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|x| *x *= factor);
            l.biases.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn clear(&mut self) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|x| *x = 0.0);
            l.biases.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|&x| x == 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{parse_topology, Activation};

    #[test]
    fn init_is_deterministic() {
        let t = parse_topology("28x28-15C5-P2-40C5-P2-300-10").unwrap();
        let a = Network::new(&t, 1.0, 1.0, 7).unwrap();
        let b = Network::new(&t, 1.0, 1.0, 7).unwrap();
        assert_eq!(a, b);
        let c = Network::new(&t, 1.0, 1.0, 8).unwrap();
        assert_ne!(a.layers[0].params.weights, c.layers[0].params.weights);
        // layers draw from different streams
        assert_ne!(a.layers[0].params.weights[..25], a.layers[2].params.weights[..25]);
    }

    #[test]
    fn init_bound_scales_with_fan_in() {
        let spec = LayerSpec::fully_connected(Shape3::flat(300), 10, Activation::Linear);
        let p = init_weights(&spec, 3, 42).unwrap();
        let bound = (6.0f64 / 300.0).sqrt();
        assert!((bound - 0.1414).abs() < 1e-4);
        assert!(p.weights.iter().all(|w| w.abs() <= bound));
        assert!(p.weights.iter().any(|w| w.abs() > 0.9 * bound));
        assert!(p.biases.iter().all(|&b| b == 0.0));
        assert!(p.weights.iter().all(|&w| w == f32_grid(w)));
    }

    #[test]
    fn pooling_weights_are_fixed() {
        let spec = LayerSpec::avg_pool(Shape3::new(2, 4, 4), 2).unwrap();
        let p = init_weights(&spec, 1, 0).unwrap();
        assert_eq!(p.weights, vec![0.25; 4]);
        assert!(!p.trainable);
        assert!(p.biases.is_empty());
    }

    #[test]
    fn zero_fan_in_is_rejected() {
        let spec = LayerSpec::fully_connected(Shape3::flat(0), 3, Activation::Linear);
        assert!(matches!(init_weights(&spec, 0, 0), Err(Error::Config(_))));
    }

    fn check_connectivity(topology: &str) {
        let t = parse_topology(topology).unwrap();
        let net = Network::new(&t, 1.0, 1.0, 1).unwrap();
        for layer in &net.layers {
            let mut forward = Vec::new();
            for j in 0..layer.spec.input.len() {
                let mut n = 0;
                layer.for_each_target(j, |i, w| {
                    forward.push((i, j, w));
                    n += 1;
                });
                assert_eq!(n, layer.out_connections(j));
            }
            let mut backward = Vec::new();
            for i in 0..layer.spec.output.len() {
                let mut n = 0;
                layer.for_each_source(i, |j, w| {
                    backward.push((i, j, w));
                    n += 1;
                });
                assert_eq!(n, layer.in_connections(i));
            }
            forward.sort_unstable();
            backward.sort_unstable();
            assert_eq!(forward, backward);
            assert_eq!(forward.len() as u64, layer.connection_count());
        }
    }

    #[test]
    fn forward_and_backward_connectivity_agree() {
        check_connectivity("6x5x2-3C3-P1-4C5-2");
        check_connectivity("8x8-2C3-P2-3C3-P2-5-3");
        check_connectivity("7-4-3");
    }

    #[test]
    fn increments_skip_pooling() {
        let t = parse_topology("4x4-2C3-P2-3").unwrap();
        let mut net = Network::new(&t, 1.0, 1.0, 3).unwrap();
        let before = net.clone();
        let mut inc = GradientAccumulator::zeros(&net);
        net.apply_increments(&inc).unwrap();
        assert_eq!(net, before);
        inc.layers[1].weights = vec![1.0; 4];
        inc.layers[2].weights[0] = -0.06;
        net.apply_increments(&inc).unwrap();
        assert_eq!(net.layers[1].params.weights, vec![0.25; 4]);
        let expected = f32_grid(before.layers[2].params.weights[0] - 0.06);
        assert_eq!(net.layers[2].params.weights[0], expected);
    }
}
