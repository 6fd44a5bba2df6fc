//! Dataset loaders and checkpoint persistence.

mod checkpoint;
mod cifar;
mod mnist;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use cifar::{load_cifar10, load_cifar10_binary, CIFAR_RECORD};
pub use mnist::{load_mnist, load_mnist_idx};

use std::io::Read;
use std::path::Path;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::DatasetKind;
use crate::error::{Error, Result};
use crate::topology::Shape3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Images stored as bytes in channel-major order, converted on access to
/// `byte / 255` and then `(p - mean[c]) / std[c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: Shape3,
    pub classes: usize,
    pub split: Split,
    pixels: Vec<u8>,
    labels: Vec<u8>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Dataset {
    pub fn new(shape: Shape3, classes: usize, split: Split, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if pixels.len() != labels.len() * shape.len() {
            return Err(Error::Input(format!(
                "{} pixel bytes do not hold {} images of {} values",
                pixels.len(),
                labels.len(),
                shape.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            shape,
            classes,
            split,
            pixels,
            labels,
            mean: vec![0.0; shape.channels],
            std: vec![1.0; shape.channels],
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn raw(&self, i: usize) -> &[u8] {
        let n = self.shape.len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Writes example `i` into `out` (length `shape.len()`).
    pub fn sample_into(&self, i: usize, out: &mut [f64]) {
        let plane = self.shape.plane();
        for (k, (o, &b)) in out.iter_mut().zip(self.raw(i)).enumerate() {
            let c = k / plane;
            *o = (b as f64 / 255.0 - self.mean[c]) / self.std[c];
        }
    }

    pub fn sample(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.shape.len()];
        self.sample_into(i, &mut out);
        out
    }

    /// Example `i` after a random shift within a 4-pixel zero padding and a
    /// random horizontal flip.
    pub fn sample_augmented(&self, i: usize, rng: &mut impl RngCore) -> Vec<f64> {
        let base = self.sample(i);
        let (h, w) = (self.shape.height, self.shape.width);
        let dy = (rng.next_u32() % 9) as isize - 4;
        let dx = (rng.next_u32() % 9) as isize - 4;
        let flip = rng.next_u32() & 1 == 1;
        let mut out = vec![0.0; base.len()];
        for c in 0..self.shape.channels {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = x as isize + dx;
                    let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        out[(c * h + y) * w + x] = base[(c * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
        out
    }

    /// Per-channel mean and standard deviation of the `[0, 1]` pixel values.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let ch = self.shape.channels;
        let plane = self.shape.plane();
        let mut sum = vec![0.0; ch];
        let mut sq = vec![0.0; ch];
        for img in self.pixels.chunks(self.shape.len()) {
            for (c, pl) in img.chunks(plane).enumerate() {
                for &b in pl {
                    let p = b as f64 / 255.0;
                    sum[c] += p;
                    sq[c] += p * p;
                }
            }
        }
        let n = (self.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-12))
            .collect();
        (mean, std)
    }

    pub fn set_normalization(&mut self, mean: Vec<f64>, std: Vec<f64>) -> Result<()> {
        if mean.len() != self.shape.channels || std.len() != self.shape.channels || std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Input("normalization needs one mean and one positive std per channel".into()));
        }
        self.mean = mean;
        self.std = std;
        Ok(())
    }

    /// The first `n` examples (all of them if `n` is larger).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            pixels: self.pixels[..n * self.shape.len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            shape: self.shape,
            classes: self.classes,
            split: self.split,
            pixels: Vec::new(),
            labels: Vec::new(),
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }
}

/// Permutation of `0..n` for one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        idx.swap(i, j);
    }
    idx
}

/// Reads a whole file, transparently inflating `.gz` files.
pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(bytes.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

/// Finds `name` or `name.gz` in `dir`.
pub(crate) fn locate(dir: &Path, names: &[&str]) -> Result<std::path::PathBuf> {
    for name in names {
        for candidate in [dir.join(name), dir.join(format!("{name}.gz"))] {
            if candidate.is_file() {
                return Ok(candidate);
            }
        }
    }
    Err(Error::io(
        dir.join(names[0]),
        std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
    ))
}

/// Loads the train and test splits of a dataset directory. CIFAR-10 splits are
/// standardized with train-split statistics when `standardize` is set.
pub fn load_dataset(kind: DatasetKind, dir: &Path, standardize: bool) -> Result<(Dataset, Dataset)> {
    match kind {
        DatasetKind::Mnist => Ok((load_mnist(dir, Split::Train)?, load_mnist(dir, Split::Test)?)),
        DatasetKind::Cifar10 => {
            let mut train = load_cifar10(dir, Split::Train)?;
            let mut test = load_cifar10(dir, Split::Test)?;
            if standardize {
                let (mean, std) = train.channel_stats();
                train.set_normalization(mean.clone(), std.clone())?;
                test.set_normalization(mean, std)?;
            }
            Ok((train, test))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let shape = Shape3::new(2, 2, 2);
        let pixels = vec![0, 255, 51, 102, 10, 20, 30, 40, 255, 255, 255, 255, 0, 0, 0, 0];
        Dataset::new(shape, 3, Split::Train, pixels, vec![2, 0]).unwrap()
    }

    #[test]
    fn bytes_scale_to_unit_interval() {
        let d = tiny();
        let s = d.sample(0);
        assert_eq!(s[0], 0.0);
        assert_eq!(s[1], 1.0);
        assert!((s[2] - 0.2).abs() < 1e-15);
        assert_eq!(d.label(0), 2);
    }

    #[test]
    fn standardized_channels_have_zero_mean() {
        let mut d = tiny();
        let (m, s) = d.channel_stats();
        d.set_normalization(m, s).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..d.len()).flat_map(|i| d.sample(i)[c * 4..c * 4 + 4].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
        }
    }

    #[test]
    fn labels_checked() {
        let r = Dataset::new(Shape3::flat(1), 2, Split::Test, vec![0], vec![5]);
        assert!(r.is_err());
    }

    #[test]
    fn permutation_is_pure() {
        assert_eq!(epoch_permutation(50, 3, 1), epoch_permutation(50, 3, 1));
        assert_ne!(epoch_permutation(50, 3, 1), epoch_permutation(50, 3, 2));
        let mut p = epoch_permutation(50, 3, 0);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn augmentation_keeps_shape() {
        let d = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let s = d.sample_augmented(1, &mut rng);
            assert_eq!(s.len(), 8);
            assert!(s[..4].iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }
}
