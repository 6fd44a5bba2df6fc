//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! MNIST is read from `SPIKEGRAD_MNIST_DIR` (default `/root/data/mnist`).
//! CIFAR-10 runs on synthetic data written in the CIFAR binary format.

mod common;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;

use spikegrad_core::ann::train::{evaluate, Engine};
use spikegrad_core::config::EngineParams;
use spikegrad_core::data::{load_checkpoint, load_dataset, load_mnist, Split};
use spikegrad_core::event::{run_example, EventOptions, RunMode};
use spikegrad_core::network::Network;
use spikegrad_core::metrics::{audit_spike_counts, redundancy_ratio, OpCounters};
use spikegrad_core::verification::{
    check_equivalence, compare_trial, gradcheck_suite, order_invariance_check, order_suite, Trial, TrialConfig,
};

use common::*;

const SEED: u64 = 2024;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn fail(detail: impl Into<String>) -> Outcome {
    outcome(false, detail)
}

fn report(id: &str, name: &str, started: Instant, o: &Outcome) {
    let line = format!(
        "criterion {id} {name}: {} [{:.1}s] {}",
        if o.passed { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64(),
        o.detail
    );
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("SPIKEGRAD_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("/root/data/mnist"));
    load_mnist(&dir, Split::Test).ok().map(|_| dir)
}

/// Runs `spikegrad train` and returns the final test accuracy in percent.
fn train_cli(config: &Path, data: &Path, out_dir: &Path, extra: &[&str]) -> Result<f64, String> {
    let mut args = vec![
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--engine",
        "integer",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let out = run(&args);
    if code(&out) != 0 {
        return Err(format!("train exited {}: {}", code(&out), stderr(&out).trim()));
    }
    stdout(&out)
        .lines()
        .find_map(|l| l.strip_prefix("final test accuracy "))
        .and_then(|s| s.trim_end_matches('%').parse().ok())
        .ok_or_else(|| "no final accuracy printed".to_string())
}

fn criterion_1_2() -> (Outcome, Outcome) {
    let t = Instant::now();
    let dense = match check_equivalence(&TrialConfig::default(), 1000, SEED) {
        Ok(r) => r,
        Err(e) => return (fail(e.to_string()), fail(e.to_string())),
    };
    let conv_cfg = TrialConfig {
        conv: true,
        ..TrialConfig::default()
    };
    let conv = match check_equivalence(&conv_cfg, 200, SEED) {
        Ok(r) => r,
        Err(e) => return (fail(e.to_string()), fail(e.to_string())),
    };
    let elapsed = t.elapsed();
    let c1 = outcome(
        dense.passed() && conv.passed() && elapsed < Duration::from_secs(120),
        format!(
            "1000 dense + 200 conv trials, failed {}+{}, max |dS| {:?}, max |dZ| {:?}, max w rel err {:.2e}, counterexample {:?}",
            dense.failed_trials,
            conv.failed_trials,
            dense.max_delta_s,
            dense.max_delta_z,
            dense
                .max_weight_rel_err
                .iter()
                .chain(&conv.max_weight_rel_err)
                .cloned()
                .fold(0.0, f64::max),
            dense.counterexample_seed.or(conv.counterexample_seed)
        ),
    );
    let mut sde = dense.sde.clone();
    sde.merge(&conv.sde);
    let c2 = outcome(
        sde.within_bounds(),
        format!(
            "max |S_pre - S| {:.9}, max |Z_pre - Z| {:.9}, ReLU zero-case violations {}",
            sde.max_forward(),
            sde.max_backward(),
            sde.relu_zero_violations
        ),
    );
    (c1, c2)
}

fn criterion_3() -> Outcome {
    let t = Instant::now();
    match gradcheck_suite(100, SEED) {
        Ok(r) => outcome(
            r.checked + r.excluded >= 100 && r.checked > 0 && r.max_rel_err < 1e-4 && t.elapsed() < Duration::from_secs(60),
            format!(
                "3-layer ReLU net, {} coordinates checked, {} excluded at switching surfaces, max rel err {:.2e}",
                r.checked, r.excluded, r.max_rel_err
            ),
        ),
        Err(e) => fail(e.to_string()),
    }
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    match order_suite(&TrialConfig::default(), 100, 10, SEED) {
        Ok(r) => outcome(
            r.passed() && t.elapsed() < Duration::from_secs(60),
            format!(
                "{} networks x {} permutations, {} mismatches {:?}",
                r.networks, r.permutations, r.failures, r.counterexample
            ),
        ),
        Err(e) => fail(e.to_string()),
    }
}

fn criterion_6(ckpt: &Path, mnist: &Path) -> Outcome {
    let (cfg, net) = match load_checkpoint(ckpt) {
        Ok(v) => v,
        Err(e) => return fail(e.to_string()),
    };
    let test = match load_mnist(mnist, Split::Test) {
        Ok(d) => d,
        Err(e) => return fail(e.to_string()),
    };
    let params = EngineParams::for_batch(&cfg, 1);
    let opts = EventOptions::default();
    let results: Vec<Result<(bool, OpCounters), String>> = (0..test.len())
        .into_par_iter()
        .map(|i| {
            let res = run_example(&net, &test.sample(i), RunMode::Train { label: test.label(i) }, &params, &opts)
                .map_err(|e| e.to_string())?;
            let (f, b) = audit_spike_counts(&net, &params, 1.0, &res.trace, &res.layers);
            let mut c = OpCounters::new(&net);
            c.add_event(&net, &res.trace, &res.layers);
            Ok((f.iter().chain(&b).all(|a| a.holds()), c))
        })
        .collect();
    let mut violations = 0;
    let mut total = OpCounters::new(&net);
    for r in results {
        match r {
            Ok((ok, c)) => {
                violations += usize::from(!ok);
                total.merge(&c);
            }
            Err(e) => return fail(e),
        }
    }
    let mut ratios = Vec::new();
    for l in 0..net.top() {
        let (n, n_min) = (total.forward_spikes[l], total.forward_min[l]);
        ratios.push(if n >= n_min { redundancy_ratio(n, n_min) } else { None });
    }
    let finite = ratios.iter().all(|r| r.is_some_and(f64::is_finite));
    outcome(
        violations == 0 && finite,
        format!(
            "{} test images, {} with a layer outside [n_min, n_max], forward redundancy per hidden layer {:?}",
            test.len(),
            violations,
            ratios
        ),
    )
}

fn criterion_7(ckpt: &Path, mnist: &Path) -> Outcome {
    let (cfg, net) = match load_checkpoint(ckpt) {
        Ok(v) => v,
        Err(e) => return fail(e.to_string()),
    };
    let test = match load_mnist(mnist, Split::Test) {
        Ok(d) => d,
        Err(e) => return fail(e.to_string()),
    };
    let params = EngineParams::for_batch(&cfg, 1);
    let (deep, near) = (0, net.top());
    let idx: Vec<usize> = (0..test.len()).collect();
    let mut lower = 0;
    let mut batches = 0;
    let (mut sum_deep, mut sum_near) = (0.0, 0.0);
    for batch in idx.chunks(cfg.batch_size) {
        let ev = match evaluate(&net, &test, Some(batch), Engine::Integer, &params, true) {
            Ok(ev) => ev,
            Err(e) => return fail(e.to_string()),
        };
        let c = &ev.counters;
        let rel = |l: usize| c.backward_acc[l] as f64 / c.mac[l] as f64;
        batches += 1;
        lower += usize::from(rel(deep) < rel(near));
        sum_deep += rel(deep);
        sum_near += rel(near);
    }
    let frac = lower as f64 / batches as f64;
    outcome(
        frac >= 0.9,
        format!(
            "layer {deep} below layer {near} in {lower}/{batches} test batches ({:.1}%), mean rel_ops {:.4} vs {:.4}",
            100.0 * frac,
            sum_deep / batches as f64,
            sum_near / batches as f64
        ),
    )
}

fn criterion_8(ckpt: &Path, mnist: &Path, work: &Path) -> Outcome {
    let t = Instant::now();
    let mut preds = Vec::new();
    for engine in ["integer", "event"] {
        let p = work.join(format!("pred_{engine}.txt"));
        let out = run(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            mnist.to_str().unwrap(),
            "--engine",
            engine,
            "--limit",
            "1000",
            "--predictions",
            p.to_str().unwrap(),
        ]);
        if code(&out) != 0 {
            return fail(format!("eval --engine {engine} exited {}: {}", code(&out), stderr(&out).trim()));
        }
        match std::fs::read_to_string(&p) {
            Ok(text) => preds.push(text.lines().map(str::to_string).collect::<Vec<_>>()),
            Err(e) => return fail(e.to_string()),
        }
    }
    let mismatches = preds[0].iter().zip(&preds[1]).filter(|(a, b)| a != b).count();
    outcome(
        preds[0].len() == 1000 && preds[1].len() == 1000 && mismatches == 0 && t.elapsed() < Duration::from_secs(600),
        format!("1000 test images, {mismatches} prediction mismatches"),
    )
}

fn criterion_9(work: &Path) -> Outcome {
    let data = synthetic_cifar(&work.join("cifar"), 16, 8);
    let out_dir = work.join("cifar_run");
    let config = repo_root().join("configs/cifar10.toml");
    let acc = match train_cli(&config, &data, &out_dir, &["--epochs", "1"]) {
        Ok(a) => a,
        Err(e) => return fail(e),
    };
    let log = std::fs::read_to_string(out_dir.join("train_log.csv")).unwrap_or_default();
    let losses: Vec<f64> = log
        .lines()
        .skip(2)
        .filter_map(|l| l.split(',').nth(3).and_then(|v| v.parse().ok()))
        .collect();
    let (cfg, net) = match load_checkpoint(&out_dir.join("model.spkg")) {
        Ok(v) => v,
        Err(e) => return fail(e.to_string()),
    };
    if cfg.alpha != 500.0 {
        return fail(format!("config alpha {} instead of 500", cfg.alpha));
    }
    let finite_weights = net
        .layers
        .iter()
        .all(|l| l.params.weights.iter().chain(&l.params.biases).all(|v| v.is_finite()));
    let (_, test) = match load_dataset(cfg.dataset, &data, cfg.standardize) {
        Ok(v) => v,
        Err(e) => return fail(e.to_string()),
    };
    let params = EngineParams::for_batch(&cfg, 1);
    // divergence: test loss after training above the loss of the untrained net
    let initial_loss = match Network::from_config(&cfg)
        .and_then(|init| evaluate(&init, &test, None, Engine::Integer, &params, false))
    {
        Ok(ev) => ev.loss(),
        Err(e) => return fail(e.to_string()),
    };
    let stable = losses.len() == 2
        && losses.iter().all(|l| l.is_finite())
        && finite_weights
        && losses[1] <= initial_loss;
    let opts = EventOptions::default();
    let mut exact = 0;
    let mut sde_ok = true;
    let batch = 2;
    for i in 0..batch {
        let trial = Trial {
            seed: i as u64,
            net: net.clone(),
            sample: test.sample(i),
            label: test.label(i),
            params,
        };
        match compare_trial(&trial, &opts) {
            Ok(c) => {
                exact += usize::from(c.exact());
                sde_ok &= c.sde.within_bounds();
            }
            Err(e) => return fail(e.to_string()),
        }
    }
    let trial = Trial {
        seed: 0,
        net,
        sample: test.sample(0),
        label: test.label(0),
        params,
    };
    let bounds_ok = match trial.run_event(&opts) {
        Ok(res) => {
            let xmax = test
                .mean
                .iter()
                .zip(&test.std)
                .map(|(m, s)| ((1.0 - m) / s).abs().max((m / s).abs()))
                .fold(0.0, f64::max);
            let (f, b) = audit_spike_counts(&trial.net, &params, xmax, &res.trace, &res.layers);
            f.iter().chain(&b).all(|a| a.holds())
        }
        Err(e) => return fail(e.to_string()),
    };
    let order_ok = match order_invariance_check(&trial, 2, SEED) {
        Ok(r) => r.passed(),
        Err(e) => return fail(e.to_string()),
    };
    outcome(
        stable && exact == batch && sde_ok && bounds_ok && order_ok,
        format!(
            "synthetic CIFAR-format data, 1 epoch at alpha 500, initial test loss {initial_loss:.4}, train/test loss {losses:?}, test accuracy {acc:.2}%; \
             on {batch} examples: engines exact {exact}/{batch}, SDE bounds {sde_ok}, spike bounds {bounds_ok}, order invariance {order_ok}"
        ),
    )
}

fn main() {
    let total = Instant::now();
    let work = tempfile::tempdir().expect("temp dir");
    let mut all = true;
    let mut record = |id: &str, name: &str, t: Instant, o: Outcome| {
        all &= o.passed;
        report(id, name, t, &o);
    };

    let t = Instant::now();
    let (c1, c2) = criterion_1_2();
    record("1", "exact equivalence", t, c1);
    record("2", "discretization error bounds", t, c2);
    let t = Instant::now();
    record("3", "gradient check", t, criterion_3());
    let t = Instant::now();
    record("4", "order invariance", t, criterion_4());

    let mnist = mnist_dir();
    let fc_ckpt = work.path().join("fc/model.spkg");
    let t = Instant::now();
    let c5a = match &mnist {
        None => fail("MNIST not found; set SPIKEGRAD_MNIST_DIR"),
        Some(dir) => match train_cli(&repo_root().join("configs/mnist_fc.toml"), dir, &work.path().join("fc"), &[]) {
            Ok(acc) => outcome(
                acc >= 97.0 && t.elapsed() < Duration::from_secs(30 * 60),
                format!("784-300-10, integer engine, alpha 100, test accuracy {acc:.2}%"),
            ),
            Err(e) => fail(e),
        },
    };
    record("5a", "MNIST fully connected", t, c5a);

    let t = Instant::now();
    let c5b = match &mnist {
        None => fail("MNIST not found; set SPIKEGRAD_MNIST_DIR"),
        Some(dir) => match train_cli(&repo_root().join("configs/mnist_conv.toml"), dir, &work.path().join("conv"), &[]) {
            Ok(acc) => outcome(
                acc >= 98.5 && t.elapsed() < Duration::from_secs(3 * 3600),
                format!("28x28-15C5-P2-40C5-P2-300-10, integer engine, test accuracy {acc:.2}%"),
            ),
            Err(e) => fail(e),
        },
    };
    record("5b", "MNIST convolutional", t, c5b);

    let have_fc = fc_ckpt.is_file();
    for (id, name) in [("6", "spike-count bounds"), ("7", "backward sparsity trend"), ("8", "engine agreement end-to-end")] {
        let t = Instant::now();
        let o = match (&mnist, have_fc) {
            (Some(dir), true) => match id {
                "6" => criterion_6(&fc_ckpt, dir),
                "7" => criterion_7(&fc_ckpt, dir),
                _ => criterion_8(&fc_ckpt, dir, work.path()),
            },
            _ => fail("needs MNIST and the checkpoint from criterion 5a"),
        };
        record(id, name, t, o);
    }

    let t = Instant::now();
    record("9", "CIFAR-10 topology", t, criterion_9(work.path()));

    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "acceptance: {} in {:.1}s",
        if all { "all criteria PASS" } else { "some criteria FAIL" },
        total.elapsed().as_secs_f64()
    );
    drop(out);
    if !all {
        std::process::exit(1);
    }
}
