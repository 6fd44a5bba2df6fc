use std::fmt;
use std::io::Write;
use std::path::Path;

use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    /// Input spike delivered to the first layer (spike-encoded input only).
    /// `layer` is 0 and `neuron` is the input index.
    Input,
    Forward,
    Backward,
    ResidualForward,
    ResidualBackward,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Input => "input",
            Phase::Forward => "forward",
            Phase::Backward => "backward",
            Phase::ResidualForward => "residual_forward",
            Phase::ResidualBackward => "residual_backward",
        }
    }

    pub fn is_forward(self) -> bool {
        matches!(self, Phase::Forward | Phase::ResidualForward)
    }

    pub fn is_backward(self) -> bool {
        matches!(self, Phase::Backward | Phase::ResidualBackward)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One emitted spike. `layer` is the emitting layer; backward events carry the
/// gated error `delta`, so ungated error spikes never appear here.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpikeEvent {
    pub layer: usize,
    pub neuron: usize,
    pub sign: i8,
    pub phase: Phase,
}

/// Per-layer event counters for one or more examples, with an optional full log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EventTrace {
    pub input_events: u64,
    /// Forward spikes emitted by each layer, residual spikes included.
    pub forward_events: Vec<u64>,
    pub residual_forward_events: Vec<u64>,
    /// Gated error events emitted by each layer, residual ones included.
    pub backward_events: Vec<u64>,
    pub residual_backward_events: Vec<u64>,
    /// Ungated error spikes (`|z|` summed), which include the gated-off ones.
    pub error_spikes: Vec<u64>,
    /// Accumulations performed in each layer by arriving forward spikes.
    pub forward_synops: Vec<u64>,
    /// Accumulations caused by error events emitted from each layer.
    pub backward_synops: Vec<u64>,
    /// Multiply-accumulates of the analog first layer.
    pub input_macs: u64,
    pub log: Option<Vec<SpikeEvent>>,
}

impl EventTrace {
    pub fn new(layers: usize, logging: bool) -> Self {
        Self {
            input_events: 0,
            forward_events: vec![0; layers],
            residual_forward_events: vec![0; layers],
            backward_events: vec![0; layers],
            residual_backward_events: vec![0; layers],
            error_spikes: vec![0; layers],
            forward_synops: vec![0; layers],
            backward_synops: vec![0; layers],
            input_macs: 0,
            log: logging.then(Vec::new),
        }
    }

    pub(crate) fn record(&mut self, ev: SpikeEvent) {
        match ev.phase {
            Phase::Input => self.input_events += 1,
            Phase::Forward => self.forward_events[ev.layer] += 1,
            Phase::ResidualForward => {
                self.forward_events[ev.layer] += 1;
                self.residual_forward_events[ev.layer] += 1;
            }
            Phase::Backward => self.backward_events[ev.layer] += 1,
            Phase::ResidualBackward => {
                self.backward_events[ev.layer] += 1;
                self.residual_backward_events[ev.layer] += 1;
            }
        }
        if let Some(log) = &mut self.log {
            log.push(ev);
        }
    }

    /// Adds the counters of `other`; logs are concatenated when both have one.
    pub fn merge(&mut self, other: &EventTrace) {
        fn add(a: &mut Vec<u64>, b: &[u64]) {
            if a.len() < b.len() {
                a.resize(b.len(), 0);
            }
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.input_events += other.input_events;
        self.input_macs += other.input_macs;
        add(&mut self.forward_events, &other.forward_events);
        add(&mut self.residual_forward_events, &other.residual_forward_events);
        add(&mut self.backward_events, &other.backward_events);
        add(&mut self.residual_backward_events, &other.residual_backward_events);
        add(&mut self.error_spikes, &other.error_spikes);
        add(&mut self.forward_synops, &other.forward_synops);
        add(&mut self.backward_synops, &other.backward_synops);
        if let (Some(a), Some(b)) = (&mut self.log, &other.log) {
            a.extend_from_slice(b);
        }
    }

    /// Checks that the counters agree with the log, if there is one.
    pub fn log_consistent(&self) -> bool {
        let Some(log) = &self.log else {
            return true;
        };
        let n = self.forward_events.len();
        let mut fwd = vec![0u64; n];
        let mut bwd = vec![0u64; n];
        let mut input = 0;
        for ev in log {
            match ev.phase {
                Phase::Input => input += 1,
                p if p.is_forward() => fwd[ev.layer] += 1,
                _ => bwd[ev.layer] += 1,
            }
        }
        input == self.input_events && fwd == self.forward_events && bwd == self.backward_events
    }

    /// Writes the log as `phase,layer,neuron,sign` lines, gzip-compressed on request.
    pub fn write_log(&self, path: &Path, gzip: bool) -> Result<()> {
        let log = self
            .log
            .as_ref()
            .ok_or_else(|| Error::State("event logging was not enabled".into()))?;
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let out = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        if gzip {
            let mut enc = GzEncoder::new(out, Compression::default());
            write_lines(&mut enc, log).map_err(io)?;
            enc.finish().and_then(|mut w| w.flush()).map_err(io)
        } else {
            let mut out = out;
            write_lines(&mut out, log).map_err(io)?;
            out.flush().map_err(io)
        }
    }
}

fn write_lines(out: &mut impl Write, log: &[SpikeEvent]) -> std::io::Result<()> {
    for ev in log {
        writeln!(out, "{},{},{},{}", ev.phase, ev.layer, ev.neuron, ev.sign)?;
    }
    Ok(())
}
