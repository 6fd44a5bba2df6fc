//! Input presentation shared by both engines.

use crate::config::{EngineParams, InputMode};

/// The accumulated input seen by the first layer: raw pixel values in analog
/// mode, signed spike counts `round(p * steps)` in spike-encoded mode.
pub fn encode_input(sample: &[f64], params: &EngineParams) -> Vec<f64> {
    match params.input_mode {
        InputMode::AnalogFirstLayer => sample.to_vec(),
        InputMode::SpikeEncoded => sample
            .iter()
            .map(|&p| spike_count(p, params.encode_steps) as f64)
            .collect(),
    }
}

pub fn spike_count(pixel: f64, steps: u32) -> i64 {
    (pixel * steps as f64).round() as i64
}

/// Input spike train as `(input index, sign)` pairs, emitted sweep by sweep:
/// in sweep `k` every pixel whose count exceeds `k` fires once.
pub fn input_spike_train(sample: &[f64], steps: u32) -> Vec<(usize, i8)> {
    let counts: Vec<i64> = sample.iter().map(|&p| spike_count(p, steps)).collect();
    let sweeps = counts.iter().map(|c| c.unsigned_abs()).max().unwrap_or(0);
    let mut train = Vec::new();
    for sweep in 0..sweeps {
        for (j, &c) in counts.iter().enumerate() {
            if c.unsigned_abs() > sweep {
                train.push((j, c.signum() as i8));
            }
        }
    }
    train
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_pixel_gives_five_spikes() {
        assert_eq!(input_spike_train(&[0.5], 10), vec![(0, 1); 5]);
    }

    #[test]
    fn zero_image_is_silent() {
        assert!(input_spike_train(&[0.0; 16], 10).is_empty());
    }

    #[test]
    fn negative_values_emit_negative_spikes() {
        let train = input_spike_train(&[-0.2, 0.3], 10);
        let neg = train.iter().filter(|&&(j, s)| j == 0 && s == -1).count();
        let pos = train.iter().filter(|&&(j, s)| j == 1 && s == 1).count();
        assert_eq!((neg, pos, train.len()), (2, 3, 5));
    }

    #[test]
    fn encoded_counts_match_spike_train() {
        let sample = [0.04, 0.96, 0.55, 0.25];
        let params = EngineParams {
            input_mode: InputMode::SpikeEncoded,
            encode_steps: 10,
            ..EngineParams::default()
        };
        let counts = encode_input(&sample, &params);
        assert_eq!(counts, vec![0.0, 10.0, 6.0, 3.0]);
        let train = input_spike_train(&sample, 10);
        for (j, &c) in counts.iter().enumerate() {
            let n: i64 = train.iter().filter(|e| e.0 == j).map(|e| e.1 as i64).sum();
            assert_eq!(n as f64, c);
        }
    }
}
