use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use spikegrad_core::ann::train::{evaluate, train as run_training, Engine, EpochRecord, TrainLimits};
use spikegrad_core::config::{DatasetKind, EngineParams, NetworkConfig};
use spikegrad_core::data::{load_checkpoint, load_cifar10, load_dataset, load_mnist, save_checkpoint, Dataset, Split};
use spikegrad_core::error::Error;
use spikegrad_core::event::EventOptions;
use spikegrad_core::metrics::{
    backward_spike_bounds, compared_layers, forward_spike_bounds, input_max, redundancy_ratio, relative_backprop_ops,
    sparsity_rows, SPARSITY_CSV_HEADER,
};
use spikegrad_core::network::Network;
use spikegrad_core::verification::{check_equivalence, gradcheck_suite, order_suite, TrialConfig};

use crate::manifest::RunManifest;
use crate::{io_failure, EvalArgs, Failure, TraceArgs, TrainArgs, VerifyArgs, EXIT_VERIFY};

type Result<T> = std::result::Result<T, Failure>;

/// Largest gradcheck relative error accepted by `verify`.
const GRADCHECK_RTOL: f64 = 1e-4;

fn engine(s: &str) -> Result<Engine> {
    s.parse::<Engine>().map_err(Failure::from)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

/// Test split, standardized with train-split statistics when configured.
fn load_test(cfg: &NetworkConfig, dir: &Path) -> Result<Dataset> {
    Ok(match cfg.dataset {
        DatasetKind::Mnist => load_mnist(dir, Split::Test)?,
        DatasetKind::Cifar10 if !cfg.standardize => load_cifar10(dir, Split::Test)?,
        DatasetKind::Cifar10 => load_dataset(cfg.dataset, dir, true)?.1,
    })
}

fn check_shape(net: &Network, data: &Dataset) -> Result<()> {
    if data.shape.len() != net.input.len() {
        return Err(Error::Shape(format!(
            "dataset images have {} values ({}x{}x{}), the network expects {}",
            data.shape.len(),
            data.shape.height,
            data.shape.width,
            data.shape.channels,
            net.input.len()
        ))
        .into());
    }
    Ok(())
}

/// Largest absolute input value after normalization.
fn pixel_max(data: &Dataset) -> f64 {
    data.mean
        .iter()
        .zip(&data.std)
        .map(|(m, s)| ((1.0 - m) / s).abs().max((m / s).abs()))
        .fold(0.0, f64::max)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = NetworkConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.eta {
        cfg.eta = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(d) = &a.data {
        cfg.dataset_path = d.to_string_lossy().into_owned();
    }
    cfg.validate().map_err(Error::Config)?;
    let engine = engine(&a.engine)?;

    let out = &a.common.out_dir;
    create_dir(out)?;
    let mut manifest = RunManifest::new(out, "train", engine.name(), &cfg);
    manifest.train_limit = a.train_limit;
    manifest.test_limit = a.test_limit;
    manifest.write()?;

    let (train_set, test_set) = load_dataset(cfg.dataset, Path::new(&cfg.dataset_path), cfg.standardize)?;
    let net = Network::from_config(&cfg)?;
    check_shape(&net, &train_set)?;

    let log_path = out.join("train_log.csv");
    let mut log = fs::File::create(&log_path).map_err(|e| io_failure(&log_path, e))?;
    writeln!(log, "{}\n{}", manifest.reference(), EpochRecord::csv_header(net.depth()))
        .map_err(|e| io_failure(&log_path, e))?;
    manifest.add_output(&log_path);

    let limits = TrainLimits {
        train: a.train_limit,
        test: a.test_limit,
    };
    let mut checkpoints = Vec::new();
    let (net, records) = run_training(net, &train_set, &test_set, &cfg, engine, limits, |rows, net| {
        for r in rows {
            writeln!(log, "{}", r.csv_row()).map_err(|e| Error::Io {
                path: log_path.clone(),
                source: e,
            })?;
            println!(
                "epoch {} {} accuracy {:.2}% loss {:.4} mean_bp_relops {:.4}",
                r.epoch,
                r.split.name(),
                100.0 * r.accuracy,
                r.loss,
                r.relops.mean
            );
        }
        let epoch = rows[0].epoch;
        if a.checkpoint_every > 0 && epoch > 0 && epoch % a.checkpoint_every == 0 {
            let path = out.join(format!("epoch_{epoch:03}.spkg"));
            save_checkpoint(net, &cfg, &path)?;
            checkpoints.push(path);
        }
        Ok(())
    })?;
    for p in &checkpoints {
        manifest.add_output(p);
    }
    let model = out.join("model.spkg");
    save_checkpoint(&net, &cfg, &model)?;
    manifest.add_output(&model);
    manifest.finish()?;

    if let Some(last) = records.iter().rev().find(|r| r.split == Split::Test) {
        println!("final test accuracy {:.2}%", 100.0 * last.accuracy);
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let engine = engine(&a.engine)?;
    let (cfg, net) = load_checkpoint(&a.checkpoint)?;
    let dir = a.data.clone().unwrap_or_else(|| PathBuf::from(&cfg.dataset_path));
    let test = load_test(&cfg, &dir)?;
    check_shape(&net, &test)?;
    let n = a.limit.unwrap_or(test.len()).min(test.len());
    let idx: Vec<usize> = (0..n).collect();
    let params = EngineParams::for_batch(&cfg, 1);
    let ev = evaluate(&net, &test, Some(&idx), engine, &params, false)?;
    println!(
        "engine {} examples {} correct {} accuracy {:.2}%",
        engine,
        ev.examples,
        ev.correct,
        100.0 * ev.accuracy()
    );
    if engine == Engine::Event {
        println!("layer,spikes,min_spikes,redundancy");
        let c = &ev.counters;
        for l in 0..net.top() {
            let (s, m) = (c.forward_spikes[l], c.forward_min[l]);
            let r = if s >= m { redundancy_ratio(s, m) } else { None };
            println!("{l},{s},{m},{}", r.map(|v| format!("{v:.6}")).unwrap_or_default());
        }
    }
    if let Some(path) = &a.predictions {
        let mut text = String::with_capacity(ev.predictions.len() * 2);
        for p in &ev.predictions {
            let _ = writeln!(text, "{p}");
        }
        write_file(path, &text)?;
    }
    Ok(())
}

pub fn verify(a: VerifyArgs) -> Result<()> {
    let options = EventOptions {
        fault_residual_boundary: a.fault_residual_boundary,
        ..EventOptions::default()
    };
    let dense = TrialConfig {
        options,
        ..TrialConfig::default()
    };
    let eq = check_equivalence(&dense, a.trials, a.seed)?;
    let conv = if a.conv_trials > 0 {
        let cfg = TrialConfig {
            conv: true,
            ..dense
        };
        Some(check_equivalence(&cfg, a.conv_trials, a.seed)?)
    } else {
        None
    };
    let grad = gradcheck_suite(a.gradcheck_coords, a.seed)?;
    let order = order_suite(&dense, a.order_networks, a.permutations, a.seed)?;

    let mut failed = Vec::new();
    for (name, r) in std::iter::once(("dense", &eq)).chain(conv.as_ref().map(|c| ("conv", c))) {
        println!(
            "equivalence[{name}] trials {} failed {} max_dS {:?} max_dZ {:?} max_w_rel {:?} prediction_mismatches {}",
            r.trials, r.failed_trials, r.max_delta_s, r.max_delta_z, r.max_weight_rel_err, r.prediction_mismatches
        );
        println!(
            "sde[{name}] max_forward {:.9} max_backward {:.9} telescoping {:.3e} relu_zero_violations {}",
            r.sde.max_forward(),
            r.sde.max_backward(),
            r.sde.telescoping,
            r.sde.relu_zero_violations
        );
        if !r.passed() {
            failed.push(format!(
                "equivalence[{name}] counterexample seed {}",
                r.counterexample_seed.unwrap_or_default()
            ));
        }
        if !r.sde.within_bounds() {
            failed.push(format!("sde[{name}] bounds violated"));
        }
    }
    println!(
        "gradcheck checked {} excluded {} max_rel_err {:.3e}",
        grad.checked, grad.excluded, grad.max_rel_err
    );
    if grad.checked == 0 || grad.max_rel_err >= GRADCHECK_RTOL {
        failed.push(format!("gradcheck worst coordinate {:?}", grad.worst));
    }
    println!(
        "order networks {} permutations {} failures {}",
        order.networks, order.permutations, order.failures
    );
    if let Some((t, p)) = order.counterexample {
        failed.push(format!("order counterexample trial seed {t} schedule seed {p}"));
    }

    if let Some(path) = &a.json {
        let report = serde_json::json!({
            "passed": failed.is_empty(),
            "failures": failed,
            "equivalence": {
                "trials": eq.trials,
                "failed_trials": eq.failed_trials,
                "counterexample_seed": eq.counterexample_seed,
                "max_delta_s": eq.max_delta_s,
                "max_delta_z": eq.max_delta_z,
                "max_weight_rel_err": eq.max_weight_rel_err,
                "prediction_mismatches": eq.prediction_mismatches,
                "sde_max_forward": eq.sde.max_forward(),
                "sde_max_backward": eq.sde.max_backward(),
            },
            "conv_equivalence": conv.as_ref().map(|c| serde_json::json!({
                "trials": c.trials,
                "failed_trials": c.failed_trials,
                "counterexample_seed": c.counterexample_seed,
            })),
            "gradcheck": {
                "checked": grad.checked,
                "excluded": grad.excluded,
                "max_rel_err": grad.max_rel_err,
            },
            "order": {
                "networks": order.networks,
                "permutations": order.permutations,
                "failures": order.failures,
            },
        });
        write_file(path, &format!("{report:#}\n"))?;
    }
    if failed.is_empty() {
        println!("verification passed");
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_VERIFY,
            message: format!("verification failed: {}", failed.join("; ")),
        })
    }
}

fn checkpoint_files(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| io_failure(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "spkg"))
        .collect();
    files.sort();
    // the final model duplicates the last epoch checkpoint
    if files.iter().any(|p| epoch_of(p) > 0) {
        files.retain(|p| epoch_of(p) > 0);
    }
    if files.is_empty() {
        return Err(io_failure(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no .spkg checkpoints in directory"),
        ));
    }
    Ok(files)
}

/// Epoch encoded in `epoch_NNN.spkg`, 0 otherwise.
fn epoch_of(path: &Path) -> usize {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix("epoch_"))
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

pub fn trace(a: TraceArgs) -> Result<()> {
    let engine = engine(&a.engine)?;
    let files = checkpoint_files(&a.checkpoint)?;
    let nets = files
        .iter()
        .map(|f| load_checkpoint(f).map_err(Failure::from))
        .collect::<Result<Vec<_>>>()?;
    let cfg = &nets[0].0;
    let alphas = match &a.alpha_list {
        Some(list) if list.is_empty() => return Err(Failure::usage("--alpha-list is empty")),
        Some(list) => list.clone(),
        None => vec![a.alpha.unwrap_or(cfg.alpha)],
    };
    if let Some(bad) = alphas.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Failure::usage(format!("alpha must be positive (got {bad})")));
    }
    let dir = a.data.clone().unwrap_or_else(|| PathBuf::from(&cfg.dataset_path));
    let test = load_test(cfg, &dir)?;
    let n = a.limit.unwrap_or(test.len()).min(test.len());
    let idx: Vec<usize> = (0..n).collect();
    let xmax = pixel_max(&test);

    let depth = nets[0].1.depth();
    let mut sparsity = format!("alpha,checkpoint,{SPARSITY_CSV_HEADER}\n");
    let mut relops = String::from("alpha,checkpoint,");
    relops.push_str(&EpochRecord::csv_header(depth));
    relops.push('\n');
    for &alpha in &alphas {
        for (file, (ccfg, net)) in files.iter().zip(&nets) {
            check_shape(net, &test)?;
            let name = file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let params = EngineParams {
                alpha,
                ..EngineParams::for_batch(ccfg, 1)
            };
            let ev = evaluate(net, &test, Some(&idx), engine, &params, true)?;
            let fwd = forward_spike_bounds(net, input_max(&params, xmax), params.rounding);
            let bwd = backward_spike_bounds(net, alpha, params.rounding);
            let epoch = epoch_of(file);
            for line in sparsity_rows(epoch, &ev.counters, Some(&fwd), Some(&bwd), net).lines() {
                let _ = writeln!(sparsity, "{alpha},{name},{line}");
            }
            let record = EpochRecord {
                epoch,
                split: Split::Test,
                accuracy: ev.accuracy(),
                loss: ev.loss(),
                relops: relative_backprop_ops(&ev.counters, &compared_layers(net, ccfg.input_mode)),
            };
            let _ = writeln!(relops, "{alpha},{name},{}", record.csv_row());
            println!(
                "alpha {alpha} {name} accuracy {:.2}% mean_bp_relops {:.4}",
                100.0 * record.accuracy,
                record.relops.mean
            );
        }
    }
    create_dir(&a.common.out_dir)?;
    write_file(&a.common.out_dir.join("sparsity.csv"), &sparsity)?;
    write_file(&a.common.out_dir.join("relops.csv"), &relops)?;
    Ok(())
}
