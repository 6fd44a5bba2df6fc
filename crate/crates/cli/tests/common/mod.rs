#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spikegrad"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn spikegrad")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small linear congruential generator so fixtures need no extra crates.
pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Self(seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407))
    }

    pub fn next(&mut self) -> u32 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (self.0 >> 33) as u32
    }
}

/// Class `k` lights a horizontal band of rows `2k+4..2k+6` on top of noise.
fn digit_like(label: u8, rng: &mut Lcg) -> Vec<u8> {
    let mut img = vec![0u8; 28 * 28];
    for (i, p) in img.iter_mut().enumerate() {
        let row = i / 28;
        let band = row >= 2 * label as usize + 4 && row < 2 * label as usize + 6;
        *p = if band { 200 + (rng.next() % 56) as u8 } else { (rng.next() % 40) as u8 };
    }
    img
}

fn idx_pair(dir: &Path, prefix: &str, n: usize, rng: &mut Lcg) {
    let mut img = Vec::new();
    img.extend_from_slice(&0x803u32.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&28u32.to_be_bytes());
    img.extend_from_slice(&28u32.to_be_bytes());
    let mut lab = Vec::new();
    lab.extend_from_slice(&0x801u32.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    for i in 0..n {
        let label = (i % 10) as u8;
        img.extend(digit_like(label, rng));
        lab.push(label);
    }
    std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), img).unwrap();
    std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lab).unwrap();
}

/// Writes a synthetic MNIST-format dataset into `dir`.
pub fn synthetic_mnist(dir: &Path, train: usize, test: usize) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = Lcg::new(7);
    idx_pair(dir, "train", train, &mut rng);
    idx_pair(dir, "t10k", test, &mut rng);
    dir.to_path_buf()
}

/// Writes CIFAR-10 binary batches (five train files, one test file) whose
/// classes differ in mean colour.
pub fn synthetic_cifar(dir: &Path, per_train_file: usize, test: usize) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = Lcg::new(11);
    let mut write = |name: &str, n: usize, offset: usize| {
        let mut bytes = Vec::with_capacity(n * 3073);
        for i in 0..n {
            let label = ((i + offset) % 10) as u8;
            bytes.push(label);
            for c in 0..3u8 {
                let base = 40 + 20 * ((label + c * 3) % 10);
                for _ in 0..1024 {
                    bytes.push(base + (rng.next() % 30) as u8);
                }
            }
        }
        std::fs::write(dir.join(name), bytes).unwrap();
    };
    for k in 1..=5 {
        write(&format!("data_batch_{k}.bin"), per_train_file, k);
    }
    write("test_batch.bin", test, 0);
    dir.to_path_buf()
}

/// Writes a config for `topology` on the MNIST-format data in `data`.
/// `extra` holds `key = value` lines that replace or extend the defaults.
pub fn write_config(path: &Path, topology: &str, data: &Path, extra: &str) {
    let mut lines = vec![
        ("topology", format!("\"{topology}\"")),
        ("alpha", "16.0".into()),
        ("eta", "0.3".into()),
        ("epochs", "2".into()),
        ("batch_size", "16".into()),
        ("seed", "3".into()),
        ("dataset", "\"mnist\"".into()),
        ("dataset_path", format!("\"{}\"", data.display())),
    ];
    for line in extra.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').unwrap();
        let (k, v) = (k.trim(), v.trim().to_string());
        match lines.iter_mut().find(|(key, _)| *key == k) {
            Some(slot) => slot.1 = v,
            None => lines.push((Box::leak(k.to_string().into_boxed_str()), v)),
        }
    }
    let text: String = lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    std::fs::write(path, text).unwrap();
}
