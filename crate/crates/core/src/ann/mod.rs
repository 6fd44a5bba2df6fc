//! The equivalent ANN over accumulated spike counts.
//!
//! With rounding enabled the forward pass computes `S = round(act((W S_prev + b) / theta_ff))`
//! and the backward pass `Z = round(W^T E / theta_bp)`, `E = S' * Z`: exactly the
//! accumulated responses of the event engine after its residual flush. With
//! rounding disabled the same dataflow gives the float relaxation used for
//! baseline training and gradient checks.

pub mod loss;
pub mod ops;
pub mod train;

use crate::config::{EngineParams, RoundingMode};
use crate::encoding::encode_input;
use crate::error::{Error, Result};
use crate::network::{GradientAccumulator, Network};
use crate::topology::Activation;

pub use loss::{argmax, softmax, softmax_cross_entropy};
pub use ops::Batch;

/// Batched forward pass. `out[l]` holds the activations transmitted by hidden
/// layer `l`; the top layer only produces raw `logits`.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub input: Batch,
    pub pre: Vec<Batch>,
    pub out: Vec<Batch>,
    pub logits: Batch,
}

impl ForwardPass {
    pub fn rows(&self) -> usize {
        self.input.rows
    }

    /// Activation fed into layer `l`.
    pub fn input_of(&self, l: usize) -> &Batch {
        if l == 0 {
            &self.input
        } else {
            &self.out[l - 1]
        }
    }
}

/// Batched backward pass; every vector has one entry per layer, top included.
#[derive(Clone, Debug)]
pub struct BackwardPass {
    /// Real-valued error integrals before rounding.
    pub zz: Vec<Batch>,
    /// Rounded (or, for the float engine, unrounded) error counts.
    pub z: Vec<Batch>,
    /// Gated errors `S' * Z`.
    pub e: Vec<Batch>,
}

#[inline]
fn surrogate(activation: Activation, pre: f64) -> f64 {
    match activation {
        Activation::Linear => 1.0,
        Activation::Relu => {
            if pre > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

pub fn forward_pass(net: &Network, input: Batch, rounding: Option<RoundingMode>) -> Result<ForwardPass> {
    if input.cols != net.input.len() {
        return Err(Error::Input(format!(
            "expected {} input values, got {}",
            net.input.len(),
            input.cols
        )));
    }
    let top = net.top();
    let mut pre = Vec::with_capacity(top);
    let mut out: Vec<Batch> = Vec::with_capacity(top);
    for (l, layer) in net.layers[..top].iter().enumerate() {
        let prev = if l == 0 { &input } else { &out[l - 1] };
        let mut p = ops::forward(layer, prev);
        p.data.iter_mut().for_each(|v| *v /= net.theta_ff);
        let mut o = p.clone();
        let relu = layer.spec.activation == Activation::Relu;
        for v in &mut o.data {
            if relu && *v < 0.0 {
                *v = 0.0;
            }
            if let Some(mode) = rounding {
                *v = mode.apply(*v);
            }
        }
        pre.push(p);
        out.push(o);
    }
    let prev = if top == 0 { &input } else { &out[top - 1] };
    let logits = ops::forward(&net.layers[top], prev);
    Ok(ForwardPass {
        input,
        pre,
        out,
        logits,
    })
}

/// Backward pass from `alpha * (softmax - onehot)` at the top. When `increments`
/// is given, `-eta * E ⊗ S_prev` is added to it for every trainable layer.
pub fn backward_pass(
    net: &Network,
    fwd: &ForwardPass,
    labels: &[usize],
    alpha: f64,
    rounding: Option<RoundingMode>,
    eta: f64,
    mut increments: Option<&mut GradientAccumulator>,
) -> Result<BackwardPass> {
    let top = net.top();
    if fwd.pre.len() != top || fwd.logits.cols != net.classes() {
        return Err(Error::State("forward pass does not belong to this network".into()));
    }
    if labels.len() != fwd.rows() {
        return Err(Error::Input("one label per example required".into()));
    }
    let round = |v: f64| match rounding {
        Some(mode) => mode.apply(v),
        None => v,
    };

    let classes = net.classes();
    let mut top_zz = Batch::zeros(fwd.rows(), classes);
    for (r, &label) in labels.iter().enumerate() {
        let (_, grad) = softmax_cross_entropy(fwd.logits.row(r), label)?;
        for (d, g) in top_zz.row_mut(r).iter_mut().zip(grad) {
            *d = alpha * g / net.theta_bp;
        }
    }

    let mut zz = vec![Batch::zeros(0, 0); top + 1];
    let mut z = vec![Batch::zeros(0, 0); top + 1];
    let mut e = vec![Batch::zeros(0, 0); top + 1];
    let mut top_z = top_zz.clone();
    top_z.data.iter_mut().for_each(|v| *v = round(*v));
    e[top] = top_z.clone();
    z[top] = top_z;
    zz[top] = top_zz;

    for l in (0..=top).rev() {
        let layer = &net.layers[l];
        if let Some(inc) = increments.as_deref_mut() {
            if layer.params.trainable {
                let slot = &mut inc.layers[l];
                ops::accumulate_outer(layer, &e[l], fwd.input_of(l), -eta, &mut slot.weights, &mut slot.biases);
            }
        }
        if l == 0 {
            break;
        }
        let mut below = ops::backward_input(layer, &e[l]);
        below.data.iter_mut().for_each(|v| *v /= net.theta_bp);
        let mut zl = below.clone();
        zl.data.iter_mut().for_each(|v| *v = round(*v));
        let act = net.layers[l - 1].spec.activation;
        let mut el = zl.clone();
        for (v, &p) in el.data.iter_mut().zip(&fwd.pre[l - 1].data) {
            *v *= surrogate(act, p);
        }
        zz[l - 1] = below;
        z[l - 1] = zl;
        e[l - 1] = el;
    }
    Ok(BackwardPass { zz, z, e })
}

fn to_ints(b: &Batch) -> Vec<i64> {
    b.data.iter().map(|&v| v as i64).collect()
}

/// Accumulated responses of one example under integer rounding.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegerActivations {
    /// Encoded input (pixels or input spike counts).
    pub input: Vec<f64>,
    /// Real-valued pre-activation per hidden layer, `(W S_prev + b) / theta_ff`.
    pub pre: Vec<Vec<f64>>,
    /// Rounded spike counts per hidden layer.
    pub s: Vec<Vec<i64>>,
    /// Raw top-layer sums.
    pub logits: Vec<f64>,
}

impl IntegerActivations {
    /// Surrogate derivative per hidden layer: `pre > 0` for ReLU, 1 for linear.
    pub fn sprime(&self, net: &Network) -> Vec<Vec<bool>> {
        self.pre
            .iter()
            .zip(&net.layers)
            .map(|(p, layer)| p.iter().map(|&v| surrogate(layer.spec.activation, v) > 0.0).collect())
            .collect()
    }

    pub fn prediction(&self) -> usize {
        argmax(&self.logits)
    }

    fn to_pass(&self) -> ForwardPass {
        let one = |v: &Vec<f64>| Batch::from_rows(&[v.as_slice()], v.len());
        ForwardPass {
            input: one(&self.input),
            pre: self.pre.iter().map(one).collect(),
            out: self
                .s
                .iter()
                .map(|s| one(&s.iter().map(|&v| v as f64).collect()))
                .collect(),
            logits: one(&self.logits),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntegerErrors {
    /// Real-valued error integrals per layer.
    pub zz: Vec<Vec<f64>>,
    pub z: Vec<Vec<i64>>,
    pub e: Vec<Vec<i64>>,
}

pub fn ann_forward_integer(net: &Network, sample: &[f64], params: &EngineParams) -> Result<IntegerActivations> {
    let input = encode_input(sample, params);
    let fwd = forward_pass(net, Batch::from_rows(&[input.as_slice()], input.len()), Some(params.rounding))?;
    Ok(IntegerActivations {
        input,
        pre: fwd.pre.iter().map(|b| b.data.clone()).collect(),
        s: fwd.out.iter().map(to_ints).collect(),
        logits: fwd.logits.data,
    })
}

pub fn ann_backward_integer(
    net: &Network,
    acts: &IntegerActivations,
    label: usize,
    params: &EngineParams,
) -> Result<(IntegerErrors, GradientAccumulator)> {
    if acts.s.len() != net.top() {
        return Err(Error::State("activations do not belong to this network".into()));
    }
    let fwd = acts.to_pass();
    let mut inc = GradientAccumulator::zeros(net);
    let bwd = backward_pass(net, &fwd, &[label], params.alpha, Some(params.rounding), params.eta, Some(&mut inc))?;
    Ok((
        IntegerErrors {
            zz: bwd.zz.iter().map(|b| b.data.clone()).collect(),
            z: bwd.z.iter().map(to_ints).collect(),
            e: bwd.e.iter().map(to_ints).collect(),
        },
        inc,
    ))
}

/// Float relaxation of the forward pass (no rounding).
#[derive(Clone, Debug, PartialEq)]
pub struct FloatActivations {
    pub input: Vec<f64>,
    pub pre: Vec<Vec<f64>>,
    pub out: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FloatGradients {
    /// Gated error signals per layer, on the same scale as the integer engine's `E`.
    pub errors: Vec<Vec<f64>>,
    /// `-eta * E ⊗ a_prev`, the update the float trainer applies.
    pub increments: GradientAccumulator,
    /// Exact gradient of `alpha * loss` with respect to every parameter.
    pub gradients: GradientAccumulator,
}

pub fn ann_forward_float(net: &Network, sample: &[f64], params: &EngineParams) -> Result<FloatActivations> {
    let input = encode_input(sample, params);
    let fwd = forward_pass(net, Batch::from_rows(&[input.as_slice()], input.len()), None)?;
    Ok(FloatActivations {
        input,
        pre: fwd.pre.into_iter().map(|b| b.data).collect(),
        out: fwd.out.into_iter().map(|b| b.data).collect(),
        logits: fwd.logits.data,
    })
}

/// Scale turning the gated error of layer `l` into the derivative of
/// `alpha * loss` with respect to that layer's weighted sums.
pub fn error_to_gradient_scale(net: &Network, l: usize) -> f64 {
    let depth = (net.top() - l) as i32;
    net.theta_bp * (net.theta_bp / net.theta_ff).powi(depth)
}

pub fn ann_backward_float(
    net: &Network,
    acts: &FloatActivations,
    label: usize,
    params: &EngineParams,
) -> Result<FloatGradients> {
    if acts.out.len() != net.top() {
        return Err(Error::State("activations do not belong to this network".into()));
    }
    let one = |v: &Vec<f64>| Batch::from_rows(&[v.as_slice()], v.len());
    let fwd = ForwardPass {
        input: one(&acts.input),
        pre: acts.pre.iter().map(one).collect(),
        out: acts.out.iter().map(one).collect(),
        logits: one(&acts.logits),
    };
    let mut increments = GradientAccumulator::zeros(net);
    let bwd = backward_pass(net, &fwd, &[label], params.alpha, None, params.eta, Some(&mut increments))?;
    let mut gradients = GradientAccumulator::zeros(net);
    for (l, layer) in net.layers.iter().enumerate() {
        if layer.params.trainable {
            let slot = &mut gradients.layers[l];
            let k = error_to_gradient_scale(net, l);
            ops::accumulate_outer(layer, &bwd.e[l], fwd.input_of(l), k, &mut slot.weights, &mut slot.biases);
        }
    }
    Ok(FloatGradients {
        errors: bwd.e.into_iter().map(|b| b.data).collect(),
        increments,
        gradients,
    })
}
