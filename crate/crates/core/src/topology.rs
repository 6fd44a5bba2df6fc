//! Layer-string grammar used to describe feed-forward topologies, e.g.
//! `28x28-15C5-P2-40C5-P2-300-10`.
//!
//! The first token is the input shape (`HxW`, `HxWxC` or a bare neuron count).
//! Each following token is one layer:
//!
//! * `<n>C<k>`: convolution, `n` output channels, `k`x`k` kernel, stride 1, same padding
//! * `P<p>`: `p`x`p` average pooling with stride `p`
//! * `<n>`: fully connected layer with `n` outputs
//!
//! Hidden trainable layers use ReLU, pooling layers and the final layer are linear.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn flat(n: usize) -> Self {
        Self::new(n, 1, 1)
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    FullyConnected,
    Convolution,
    AvgPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
}

/// Static description of one layer. Neurons are indexed channel-major
/// (`c * H * W + y * W + x`) in both input and output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub activation: Activation,
    pub input: Shape3,
    pub output: Shape3,
    /// Kernel side for convolutions, window side for pooling, 0 for dense layers.
    pub kernel: usize,
    pub stride: usize,
}

impl LayerSpec {
    pub fn fully_connected(input: Shape3, outputs: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::FullyConnected,
            activation,
            input,
            output: Shape3::flat(outputs),
            kernel: 0,
            stride: 1,
        }
    }

    pub fn convolution(input: Shape3, out_channels: usize, kernel: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Convolution,
            activation,
            input,
            output: Shape3::new(out_channels, input.height, input.width),
            kernel,
            stride: 1,
        }
    }

    pub fn avg_pool(input: Shape3, pool: usize) -> Result<Self> {
        if pool == 0 || input.height % pool != 0 || input.width % pool != 0 {
            return Err(Error::config(format!(
                "pooling window {pool} does not divide spatial size {}x{}",
                input.height, input.width
            )));
        }
        Ok(Self {
            kind: LayerKind::AvgPool,
            activation: Activation::Linear,
            input,
            output: Shape3::new(input.channels, input.height / pool, input.width / pool),
            kernel: pool,
            stride: pool,
        })
    }

    /// Number of inputs feeding one output neuron (ignoring border clipping).
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::FullyConnected => self.input.len(),
            LayerKind::Convolution => self.input.channels * self.kernel * self.kernel,
            LayerKind::AvgPool => self.kernel * self.kernel,
        }
    }

    pub fn weight_dims(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::FullyConnected => vec![self.output.len(), self.input.len()],
            LayerKind::Convolution => vec![
                self.output.channels,
                self.input.channels,
                self.kernel,
                self.kernel,
            ],
            LayerKind::AvgPool => vec![self.kernel, self.kernel],
        }
    }

    pub fn weight_count(&self) -> usize {
        self.weight_dims().iter().product()
    }

    pub fn bias_count(&self) -> usize {
        match self.kind {
            LayerKind::FullyConnected => self.output.len(),
            LayerKind::Convolution => self.output.channels,
            LayerKind::AvgPool => 0,
        }
    }

    pub fn trainable(&self) -> bool {
        self.kind != LayerKind::AvgPool
    }

    /// Padding before the first row/column for same-size convolutions.
    pub fn pad(&self) -> usize {
        match self.kind {
            LayerKind::Convolution => (self.kernel - 1) / 2,
            _ => 0,
        }
    }
}

/// A parsed topology: input shape plus ordered layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    pub input: Shape3,
    pub layers: Vec<LayerSpec>,
}

impl Topology {
    pub fn classes(&self) -> usize {
        self.layers.last().map(|l| l.output.len()).unwrap_or(0)
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let input = self.input;
        if input.height == 1 && input.width == 1 {
            write!(f, "{}", input.channels)?;
        } else if input.channels == 1 {
            write!(f, "{}x{}", input.height, input.width)?;
        } else {
            write!(f, "{}x{}x{}", input.height, input.width, input.channels)?;
        }
        for layer in &self.layers {
            match layer.kind {
                LayerKind::FullyConnected => write!(f, "-{}", layer.output.len())?,
                LayerKind::Convolution => write!(f, "-{}C{}", layer.output.channels, layer.kernel)?,
                LayerKind::AvgPool => write!(f, "-P{}", layer.kernel)?,
            }
        }
        Ok(())
    }
}

enum Token {
    Conv { channels: usize, kernel: usize },
    Pool(usize),
    Dense(usize),
}

fn parse_number(s: &str, position: usize) -> Result<usize> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::Parse {
            position,
            message: format!("expected a positive integer, found {s:?}"),
        });
    }
    match s.parse::<usize>() {
        Ok(0) => Err(Error::Parse {
            position,
            message: "zero is not a valid size".into(),
        }),
        Ok(n) => Ok(n),
        Err(_) => Err(Error::Parse {
            position,
            message: format!("number {s:?} out of range"),
        }),
    }
}

fn parse_input(token: &str, default_channels: usize) -> Result<Shape3> {
    let parts: Vec<&str> = token.split('x').collect();
    let mut offset = 0;
    let mut dims = Vec::with_capacity(parts.len());
    for part in &parts {
        dims.push(parse_number(part, offset)?);
        offset += part.len() + 1;
    }
    match dims.as_slice() {
        [n] => Ok(Shape3::flat(*n)),
        [h, w] => Ok(Shape3::new(default_channels, *h, *w)),
        [h, w, c] => Ok(Shape3::new(*c, *h, *w)),
        _ => Err(Error::Parse {
            position: 0,
            message: format!("input shape {token:?} must be H, HxW or HxWxC"),
        }),
    }
}

fn parse_layer(token: &str, position: usize) -> Result<Token> {
    if let Some(rest) = token.strip_prefix('P') {
        return Ok(Token::Pool(parse_number(rest, position + 1)?));
    }
    if let Some(idx) = token.find('C') {
        let channels = parse_number(&token[..idx], position)?;
        let kernel = parse_number(&token[idx + 1..], position + idx + 1)?;
        return Ok(Token::Conv { channels, kernel });
    }
    Ok(Token::Dense(parse_number(token, position)?))
}

/// Parses a topology string; `HxW` inputs get a single channel.
pub fn parse_topology(s: &str) -> Result<Topology> {
    parse_topology_with_channels(s, 1)
}

/// Parses a topology string, using `default_channels` when the input token
/// is `HxW` without an explicit channel count.
pub fn parse_topology_with_channels(s: &str, default_channels: usize) -> Result<Topology> {
    let mut tokens = Vec::new();
    let mut start = 0;
    for piece in s.split('-') {
        tokens.push((start, piece));
        start += piece.len() + 1;
    }
    if tokens.len() < 2 {
        return Err(Error::Parse {
            position: s.len(),
            message: "expected at least one layer after the input shape".into(),
        });
    }

    let input = parse_input(tokens[0].1, default_channels)?;
    let mut shape = input;
    let mut layers = Vec::with_capacity(tokens.len() - 1);
    let last = tokens.len() - 2;
    for (i, &(position, token)) in tokens[1..].iter().enumerate() {
        let activation = if i == last {
            Activation::Linear
        } else {
            Activation::Relu
        };
        let layer = match parse_layer(token, position)? {
            Token::Dense(n) => LayerSpec::fully_connected(shape, n, activation),
            Token::Conv { channels, kernel } => {
                LayerSpec::convolution(shape, channels, kernel, activation)
            }
            Token::Pool(p) => {
                if i == last {
                    return Err(Error::config("the final layer must be trainable, not pooling"));
                }
                LayerSpec::avg_pool(shape, p)?
            }
        };
        shape = layer.output;
        layers.push(layer);
    }
    Ok(Topology { input, layers })
}
