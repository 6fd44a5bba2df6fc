mod common;

use common::*;

#[test]
fn unknown_flag_is_usage_error() {
    let out = run(&["train", "--no-such-flag"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

#[test]
fn verify_rejects_zero_trials() {
    assert_eq!(code(&run(&["verify", "--trials", "0"])), 2);
}

#[test]
fn verify_small_run_passes() {
    let out = run(&[
        "verify",
        "--trials",
        "60",
        "--conv-trials",
        "6",
        "--order-networks",
        "5",
        "--permutations",
        "3",
    ]);
    assert_eq!(code(&out), 0, "{}{}", stdout(&out), stderr(&out));
    assert!(stdout(&out).contains("verification passed"));
}

#[test]
fn injected_fault_is_caught() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("report.json");
    let out = run(&[
        "verify",
        "--trials",
        "60",
        "--conv-trials",
        "0",
        "--order-networks",
        "2",
        "--fault-residual-boundary",
        "0.3",
        "--json",
        json.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("counterexample seed"), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(report["passed"], false);
    assert!(report["equivalence"]["counterexample_seed"].is_u64());
}

#[test]
fn train_writes_log_checkpoints_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_mnist(&dir.path().join("mnist"), 200, 50);
    let cfg = dir.path().join("run.toml");
    write_config(&cfg, "28x28-24-10", &data, "");
    let out_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--engine",
        "integer",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("final test accuracy"));
    for f in ["manifest.json", "train_log.csv", "model.spkg", "epoch_001.spkg", "epoch_002.spkg"] {
        assert!(out_dir.join(f).is_file(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["topology"], "28x28-24-10");
    assert!(manifest["finished_at"].is_f64());
    let run_id = manifest["run_id"].as_str().unwrap();
    let log = std::fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
    assert!(log.lines().next().unwrap().contains(run_id));
    assert_eq!(log.lines().count(), 2 + 4);

    // learned something on the easy synthetic classes
    let eval = run(&["eval", "--checkpoint", out_dir.join("model.spkg").to_str().unwrap()]);
    assert_eq!(code(&eval), 0, "{}", stderr(&eval));
    assert!(stdout(&eval).contains("accuracy 100.00%"), "{}", stdout(&eval));
}

#[test]
fn zero_epochs_evaluates_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_mnist(&dir.path().join("mnist"), 20, 20);
    let cfg = dir.path().join("run.toml");
    write_config(&cfg, "28x28-8-10", &data, "");
    let out_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--epochs",
        "0",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(out_dir.join("manifest.json").is_file());
    let log = std::fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
    let rows: Vec<&str> = log.lines().skip(2).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("0,test,"));
}

#[test]
fn invalid_config_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    write_config(&cfg, "28x28-8-10", dir.path(), "theta_ff = -1.0\nbatch_size = 0\n");
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("theta_ff") && err.contains("batch_size"), "{err}");
}

#[test]
fn missing_dataset_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    write_config(&cfg, "28x28-8-10", &dir.path().join("nowhere"), "");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn eval_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = run(&["eval", "--checkpoint", dir.path().join("none.spkg").to_str().unwrap()]);
    assert_eq!(code(&missing), 3);

    // a checkpoint for 16-pixel inputs against 28x28 images
    let data = synthetic_mnist(&dir.path().join("mnist"), 10, 10);
    let cfg = dir.path().join("small.toml");
    write_config(&cfg, "16-4-10", &data, "");
    let out_dir = dir.path().join("small");
    let config = spikegrad_core::config::NetworkConfig::load(&cfg).unwrap();
    let net = spikegrad_core::network::Network::from_config(&config).unwrap();
    std::fs::create_dir_all(&out_dir).unwrap();
    let ckpt = out_dir.join("model.spkg");
    spikegrad_core::data::save_checkpoint(&net, &config, &ckpt).unwrap();
    let out = run(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn untrained_network_is_near_chance_and_engines_agree() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_mnist(&dir.path().join("mnist"), 10, 400);
    let cfg = dir.path().join("run.toml");
    write_config(&cfg, "28x28-32-10", &data, "");
    let config = spikegrad_core::config::NetworkConfig::load(&cfg).unwrap();
    let net = spikegrad_core::network::Network::from_config(&config).unwrap();
    let ckpt = dir.path().join("init.spkg");
    spikegrad_core::data::save_checkpoint(&net, &config, &ckpt).unwrap();
    let mut preds = Vec::new();
    for engine in ["integer", "event"] {
        let p = dir.path().join(format!("{engine}.txt"));
        let out = run(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--engine",
            engine,
            "--predictions",
            p.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let text = stdout(&out);
        let acc: f64 = text
            .split("accuracy ")
            .nth(1)
            .and_then(|s| s.split('%').next())
            .unwrap()
            .parse()
            .unwrap();
        assert!(acc < 35.0, "{text}");
        if engine == "event" {
            assert!(text.contains("layer,spikes,min_spikes,redundancy"));
        }
        preds.push(std::fs::read_to_string(p).unwrap());
    }
    assert_eq!(preds[0], preds[1]);
}

#[test]
fn trace_sweeps_alpha_and_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_mnist(&dir.path().join("mnist"), 100, 40);
    let cfg = dir.path().join("run.toml");
    write_config(&cfg, "28x28-16-10", &data, "");
    let run_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        run_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let trace = |out: &str| {
        run(&[
            "trace",
            "--checkpoint",
            run_dir.to_str().unwrap(),
            "--alpha-list",
            "50,100",
            "--out-dir",
            out,
        ])
    };
    let a = dir.path().join("t1");
    let b = dir.path().join("t2");
    assert_eq!(code(&trace(a.to_str().unwrap())), 0);
    assert_eq!(code(&trace(b.to_str().unwrap())), 0);
    for f in ["sparsity.csv", "relops.csv"] {
        let x = std::fs::read(a.join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.join(f)).unwrap(), "{f} differs between runs");
    }
    let relops = std::fs::read_to_string(a.join("relops.csv")).unwrap();
    let alphas: std::collections::BTreeSet<&str> =
        relops.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(alphas.into_iter().collect::<Vec<_>>(), vec!["100", "50"]);
    // two epoch checkpoints per alpha
    assert_eq!(relops.lines().count(), 1 + 4);

    let empty = run(&["trace", "--checkpoint", run_dir.to_str().unwrap(), "--alpha-list", ""]);
    assert_eq!(code(&empty), 2);
}

#[test]
fn thread_count_does_not_change_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_mnist(&dir.path().join("mnist"), 120, 20);
    let cfg = dir.path().join("run.toml");
    write_config(&cfg, "28x28-12-10", &data, "epochs = 1\n");
    let mut models = Vec::new();
    for threads in ["1", "3"] {
        let out_dir = dir.path().join(format!("t{threads}"));
        let out = run(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--threads",
            threads,
            "--out-dir",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        models.push(std::fs::read(out_dir.join("model.spkg")).unwrap());
    }
    assert_eq!(models[0], models[1]);
}
