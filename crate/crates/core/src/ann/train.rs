//! Mini-batch training with the integer, float or event engine.
//!
//! Every batch is split into fixed chunks of `CHUNK` examples whose increments
//! are summed in chunk order, so results do not depend on the thread count.

use std::fmt;
use std::str::FromStr;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{argmax, backward_pass, forward_pass, softmax_cross_entropy, Batch};
use crate::config::{EngineParams, NetworkConfig};
use crate::data::{epoch_permutation, Dataset, Split};
use crate::encoding::encode_input;
use crate::error::{Error, Result};
use crate::event::{apply_updates, run_example, EventOptions, RunMode};
use crate::metrics::{compared_layers, relative_backprop_ops, ConnectionCounts, OpCounters, RelativeOps};
use crate::network::{GradientAccumulator, Network};

/// Examples per parallel work unit.
pub const CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Engine {
    Integer,
    Float,
    Event,
}

impl Engine {
    pub fn name(self) -> &'static str {
        match self {
            Engine::Integer => "integer",
            Engine::Float => "float",
            Engine::Event => "event",
        }
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "integer" => Ok(Engine::Integer),
            "float" => Ok(Engine::Float),
            "event" => Ok(Engine::Event),
            _ => Err(Error::config(format!("unknown engine {s:?} (integer, float, event)"))),
        }
    }
}

/// Outcome of running a set of examples through an engine.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub examples: usize,
    pub correct: usize,
    pub loss_sum: f64,
    pub predictions: Vec<usize>,
    pub counters: OpCounters,
}

impl Evaluation {
    fn empty(net: &Network) -> Self {
        Self {
            examples: 0,
            correct: 0,
            loss_sum: 0.0,
            predictions: Vec::new(),
            counters: OpCounters::new(net),
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.examples == 0 {
            0.0
        } else {
            self.correct as f64 / self.examples as f64
        }
    }

    pub fn loss(&self) -> f64 {
        if self.examples == 0 {
            0.0
        } else {
            self.loss_sum / self.examples as f64
        }
    }

    fn merge(&mut self, other: Evaluation) {
        self.examples += other.examples;
        self.correct += other.correct;
        self.loss_sum += other.loss_sum;
        self.predictions.extend(other.predictions);
        self.counters.merge(&other.counters);
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub accuracy: f64,
    pub loss: f64,
    pub relops: RelativeOps,
}

impl EpochRecord {
    pub fn csv_header(layers: usize) -> String {
        let mut h = "epoch,split,accuracy,loss,mean_bp_relops".to_string();
        for l in 0..layers {
            h.push_str(&format!(",bp_relops_{l}"));
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!(
            "{},{},{},{},{}",
            self.epoch,
            self.split.name(),
            self.accuracy,
            self.loss,
            self.relops.mean
        );
        for v in &self.relops.per_layer {
            r.push(',');
            if let Some(v) = v {
                r.push_str(&v.to_string());
            }
        }
        r
    }
}

/// Loads examples `idx` of `data`, encoded for the engine, with the CIFAR
/// augmentation drawn from `(seed, epoch, index)` when requested.
fn encoded_rows(data: &Dataset, idx: &[usize], params: &EngineParams, augment: Option<(u64, usize)>) -> Batch {
    let mut rows = Vec::with_capacity(idx.len());
    for &i in idx {
        let sample = match augment {
            Some((seed, epoch)) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d);
                rng.set_stream(((epoch as u64 + 1) << 32) | i as u64);
                data.sample_augmented(i, &mut rng)
            }
            None => data.sample(i),
        };
        rows.push(encode_input(&sample, params));
    }
    let cols = rows.first().map_or(0, Vec::len);
    Batch::from_rows(&rows, cols)
}

/// Runs one chunk through an ANN engine. With `increments` the weight
/// increments are accumulated; with `backward` the error pass is counted.
fn ann_chunk(
    net: &Network,
    conn: &ConnectionCounts,
    engine: Engine,
    input: Batch,
    labels: &[usize],
    params: &EngineParams,
    backward: bool,
    increments: Option<&mut GradientAccumulator>,
) -> Result<Evaluation> {
    let rounding = (engine == Engine::Integer).then_some(params.rounding);
    let fwd = forward_pass(net, input, rounding)?;
    let mut ev = Evaluation::empty(net);
    for (r, &label) in labels.iter().enumerate() {
        let logits = fwd.logits.row(r);
        let (loss, _) = softmax_cross_entropy(logits, label)?;
        let p = argmax(logits);
        ev.examples += 1;
        ev.correct += usize::from(p == label);
        ev.loss_sum += loss;
        ev.predictions.push(p);
    }
    if backward || increments.is_some() {
        let bwd = backward_pass(net, &fwd, labels, params.alpha, rounding, params.eta, increments)?;
        ev.counters.add_batch(net, conn, &fwd.out, &bwd.z, &bwd.e);
    }
    Ok(ev)
}

fn event_chunk(
    net: &Network,
    data: &Dataset,
    idx: &[usize],
    samples: Option<&Batch>,
    params: &EngineParams,
    backward: bool,
    increments: Option<&mut GradientAccumulator>,
) -> Result<Evaluation> {
    let mut ev = Evaluation::empty(net);
    let opts = EventOptions::default();
    let mut increments = increments;
    for (k, &i) in idx.iter().enumerate() {
        let label = data.label(i);
        let owned;
        let sample = match samples {
            Some(b) => b.row(k),
            None => {
                owned = data.sample(i);
                &owned
            }
        };
        let mode = if backward || increments.is_some() {
            RunMode::Train { label }
        } else {
            RunMode::Infer
        };
        let res = run_example(net, sample, mode, params, &opts)?;
        let (loss, _) = softmax_cross_entropy(&res.logits, label)?;
        ev.examples += 1;
        ev.correct += usize::from(res.prediction == label);
        ev.loss_sum += loss;
        ev.predictions.push(res.prediction);
        if let (Some(acc), Some(g)) = (increments.as_deref_mut(), res.grads.as_ref()) {
            acc.merge(g)?;
        }
        ev.counters.add_event(net, &res.trace, &res.layers);
    }
    Ok(ev)
}

/// Evaluates examples `idx` (all of `data` when `None`). With `backward` the
/// error pass is run against the labels and counted, without updating weights.
pub fn evaluate(
    net: &Network,
    data: &Dataset,
    idx: Option<&[usize]>,
    engine: Engine,
    params: &EngineParams,
    backward: bool,
) -> Result<Evaluation> {
    if data.shape.len() != net.input.len() {
        return Err(Error::Shape(format!(
            "dataset images have {} values, network expects {}",
            data.shape.len(),
            net.input.len()
        )));
    }
    let all: Vec<usize>;
    let idx = match idx {
        Some(i) => i,
        None => {
            all = (0..data.len()).collect();
            &all
        }
    };
    let conn = ConnectionCounts::new(net);
    let parts: Vec<Result<Evaluation>> = idx
        .par_chunks(CHUNK)
        .map(|chunk| match engine {
            Engine::Event => event_chunk(net, data, chunk, None, params, backward, None),
            _ => {
                let labels: Vec<usize> = chunk.iter().map(|&i| data.label(i)).collect();
                let input = encoded_rows(data, chunk, params, None);
                ann_chunk(net, &conn, engine, input, &labels, params, backward, None)
            }
        })
        .collect();
    let mut total = Evaluation::empty(net);
    for p in parts {
        total.merge(p?);
    }
    Ok(total)
}

/// Stateful trainer: network, optimizer state and the engine choice.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: Network,
    pub cfg: NetworkConfig,
    pub engine: Engine,
    velocity: Option<GradientAccumulator>,
    conn: ConnectionCounts,
    included: Vec<bool>,
}

impl Trainer {
    /// Validates `cfg`, except that `eta = 0` is accepted here to allow
    /// frozen-weight runs.
    pub fn new(net: Network, cfg: NetworkConfig, engine: Engine) -> Result<Self> {
        let mut checked = cfg.clone();
        if checked.eta == 0.0 {
            checked.eta = 1.0;
        }
        checked.validate().map_err(Error::Config)?;
        if cfg.parsed_topology()? != net.topology() {
            return Err(Error::Shape("network does not match the configured topology".into()));
        }
        let velocity = (cfg.momentum > 0.0).then(|| GradientAccumulator::zeros(&net));
        let conn = ConnectionCounts::new(&net);
        let included = compared_layers(&net, cfg.input_mode);
        Ok(Self {
            net,
            cfg,
            engine,
            velocity,
            conn,
            included,
        })
    }

    pub fn relops(&self, counters: &OpCounters) -> RelativeOps {
        relative_backprop_ops(counters, &self.included)
    }

    /// One update from examples `idx` of `data`.
    pub fn train_batch(&mut self, data: &Dataset, idx: &[usize], epoch: usize) -> Result<Evaluation> {
        if idx.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let params = EngineParams::for_batch(&self.cfg, idx.len());
        let augment = self.cfg.augment.then_some((self.cfg.seed, epoch));
        let net = &self.net;
        let conn = &self.conn;
        let engine = self.engine;
        let parts: Vec<Result<(Evaluation, GradientAccumulator)>> = idx
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut inc = GradientAccumulator::zeros(net);
                let input = encoded_rows(data, chunk, &params, augment);
                let ev = match engine {
                    Engine::Event => {
                        // the event engine encodes the raw sample itself
                        let samples = if augment.is_some() {
                            let mut rows = Vec::with_capacity(chunk.len());
                            for &i in chunk {
                                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5851_f42d_4c95_7f2d);
                                rng.set_stream(((epoch as u64 + 1) << 32) | i as u64);
                                rows.push(data.sample_augmented(i, &mut rng));
                            }
                            Some(Batch::from_rows(&rows, data.shape.len()))
                        } else {
                            None
                        };
                        event_chunk(net, data, chunk, samples.as_ref(), &params, true, Some(&mut inc))?
                    }
                    _ => {
                        let labels: Vec<usize> = chunk.iter().map(|&i| data.label(i)).collect();
                        ann_chunk(net, conn, engine, input, &labels, &params, true, Some(&mut inc))?
                    }
                };
                Ok((ev, inc))
            })
            .collect();
        let mut total = Evaluation::empty(net);
        let mut step = GradientAccumulator::zeros(net);
        for p in parts {
            let (ev, inc) = p?;
            total.merge(ev);
            step.merge(&inc)?;
        }
        match self.velocity.as_mut() {
            Some(v) => {
                v.scale(self.cfg.momentum);
                v.merge(&step)?;
                self.net.apply_increments(v)?;
            }
            None => apply_updates(&mut self.net, &mut step)?,
        }
        Ok(total)
    }

    /// One pass over `data` in the order fixed by `(seed, epoch)`. At most
    /// `limit` examples are used when given.
    pub fn train_epoch(&mut self, data: &Dataset, epoch: usize, limit: Option<usize>) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        let mut order = epoch_permutation(data.len(), self.cfg.seed, epoch);
        if let Some(n) = limit {
            order.truncate(n.max(1));
        }
        let mut total = Evaluation::empty(&self.net);
        for batch in order.chunks(self.cfg.batch_size) {
            let ev = self.train_batch(data, batch, epoch)?;
            if !ev.loss_sum.is_finite() {
                return Err(Error::State(format!("training diverged in epoch {epoch}")));
            }
            total.merge(ev);
        }
        Ok(EpochRecord {
            epoch,
            split: Split::Train,
            accuracy: total.accuracy(),
            loss: total.loss(),
            relops: self.relops(&total.counters),
        })
    }

    /// Test-split record for the current weights.
    pub fn test_record(&self, data: &Dataset, epoch: usize, limit: Option<usize>) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::Input("test set is empty".into()));
        }
        let idx: Vec<usize> = (0..limit.unwrap_or(data.len()).min(data.len())).collect();
        let params = EngineParams::for_batch(&self.cfg, 1);
        let ev = evaluate(&self.net, data, Some(&idx), self.engine, &params, true)?;
        Ok(EpochRecord {
            epoch,
            split: Split::Test,
            accuracy: ev.accuracy(),
            loss: ev.loss(),
            relops: self.relops(&ev.counters),
        })
    }
}

/// Limits on the examples used per epoch, mainly for the slow event engine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainLimits {
    pub train: Option<usize>,
    pub test: Option<usize>,
}

/// Trains for `cfg.epochs` epochs. After each epoch `on_epoch` receives the
/// train and test records and the current network. With zero epochs only the
/// initial test record (epoch 0) is produced.
pub fn train(
    net: Network,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &NetworkConfig,
    engine: Engine,
    limits: TrainLimits,
    mut on_epoch: impl FnMut(&[EpochRecord], &Network) -> Result<()>,
) -> Result<(Network, Vec<EpochRecord>)> {
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut trainer = Trainer::new(net, cfg.clone(), engine)?;
    let mut log = Vec::new();
    if cfg.epochs == 0 {
        let rec = trainer.test_record(test_set, 0, limits.test)?;
        on_epoch(std::slice::from_ref(&rec), &trainer.net)?;
        log.push(rec);
    }
    for epoch in 1..=cfg.epochs {
        let tr = trainer.train_epoch(train_set, epoch, limits.train)?;
        let te = trainer.test_record(test_set, epoch, limits.test)?;
        let pair = [tr, te];
        on_epoch(&pair, &trainer.net)?;
        log.extend(pair);
    }
    Ok((trainer.net, log))
}
