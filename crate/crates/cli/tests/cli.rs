use std::fs;
use std::path::Path;
use std::process::Command;

use iia::contrastive::{NetArch, TclModel};
use iia::io::{read_bundle, ModelFile, S_FILE};
use iia::simgen::InnovationTruth;
use iia_cli::config::{load_config, ExperimentConfig, SweepConfig};
use iia_cli::results::{read_rows, RESULTS_HEADER};
use iia_cli::{cmd_eval, cmd_gen, cmd_sweep, cmd_train, runner, sweep_run};

fn iia(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_iia"))
        .args(args)
        .env("IIA_OUT_DIR", out)
        .output()
        .expect("binary runs")
}

fn small(method: &str) -> ExperimentConfig {
    ExperimentConfig {
        method: method.into(),
        n: 2,
        len: 2048,
        segments: 8,
        num_freq: 4,
        epochs: Some(3),
        ..ExperimentConfig::default()
    }
}

#[test]
fn gen_writes_bundle_of_requested_size_reproducibly() {
    let root = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        n: 20,
        layers: 3,
        len: 1 << 16,
        out: Some(root.path().join("a")),
        ..ExperimentConfig::default()
    };
    let made = cmd_gen(&cfg, root.path()).unwrap();
    assert_eq!(made.len(), 1);
    let b = read_bundle(&made[0].0).unwrap();
    assert_eq!((b.x.len(), b.x.dim()), (1 << 16, 20));
    assert_eq!(b.s.as_ref().unwrap().len(), 1 << 16);
    assert_eq!(b.u.as_ref().unwrap().len(), 1 << 16);

    let again = ExperimentConfig {
        out: Some(root.path().join("b")),
        ..cfg
    };
    cmd_gen(&again, root.path()).unwrap();
    for f in ["x.csv", "s.csv", "u.csv", "truth.json"] {
        let a = fs::read(root.path().join("a").join(f)).unwrap();
        let b = fs::read(root.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between identical runs");
    }
}

#[test]
fn hmm_bundle_has_row_stochastic_transition() {
    let root = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        method: "hmm".into(),
        n: 5,
        states: 11,
        len: 4096,
        ..ExperimentConfig::default()
    };
    let made = cmd_gen(&cfg, root.path()).unwrap();
    let truth = read_bundle(&made[0].0).unwrap().truth.unwrap();
    let InnovationTruth::Hmm(h) = truth.innovations else {
        panic!("expected HMM truth")
    };
    assert_eq!(h.transition.shape(), (11, 11));
    for i in 0..11 {
        let row = h.transition.row(i);
        assert!(row.iter().all(|&a| a >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(made[0].1.pass);
}

#[test]
fn train_then_eval_appends_one_row_each() {
    let root = tempfile::tempdir().unwrap();
    let data_dir = cmd_gen(&small("tcl"), root.path()).unwrap().remove(0).0;
    let cfg = ExperimentConfig {
        data: Some(data_dir.clone()),
        ..small("tcl")
    };
    let run = cmd_train(&cfg, root.path()).unwrap().remove(0);
    let model_path = run.join("model.json");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&model_path).unwrap()).unwrap();
    assert_eq!(json["kind"], "tcl");
    assert!(run.join("train_log.csv").is_file() && run.join("run.json").is_file());

    let eval_cfg = ExperimentConfig {
        model: Some(model_path),
        ..cfg
    };
    let results = root.path().join("results.csv");
    for k in 1..=2 {
        let row = cmd_eval(&eval_cfg, root.path()).unwrap();
        assert!(row.mcc.is_some());
        let rows = read_rows(&results).unwrap();
        assert_eq!(rows.len(), k);
    }
    let header = fs::read_to_string(&results)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert_eq!(header, RESULTS_HEADER.join(","));
    assert!(run.join("s_hat.csv").is_file());
}

#[test]
fn oracle_model_scores_one_and_missing_truth_leaves_blank() {
    let root = tempfile::tempdir().unwrap();
    let data_dir = cmd_gen(&small("tcl"), root.path()).unwrap().remove(0).0;
    let truth = read_bundle(&data_dir).unwrap().truth.unwrap();
    let mut oracle = TclModel::new(
        2,
        8,
        &NetArch {
            layers: 1,
            ..NetArch::default()
        },
        0,
    )
    .unwrap();
    oracle.h_net = truth.model.analytic_inverse().unwrap();
    let model_path = root.path().join("oracle.json");
    ModelFile::Tcl(oracle).save(&model_path).unwrap();
    let cfg = ExperimentConfig {
        data: Some(data_dir.clone()),
        model: Some(model_path),
        ..small("tcl")
    };
    let row = cmd_eval(&cfg, root.path()).unwrap();
    assert!((row.mcc.unwrap() - 1.0).abs() < 1e-9, "{:?}", row.mcc);

    fs::remove_file(data_dir.join(S_FILE)).unwrap();
    let row = cmd_eval(&cfg, root.path()).unwrap();
    assert!(row.mcc.is_none() && row.mcc_spearman.is_none());
    let last = fs::read_to_string(root.path().join("results.csv")).unwrap();
    let fields: Vec<&str> = last.lines().last().unwrap().split(',').collect();
    assert_eq!(fields[8], "");
    assert_eq!(fields[12], "ok");
}

#[test]
fn unknown_method_is_a_usage_error() {
    let root = tempfile::tempdir().unwrap();
    let out = iia(&["train", "--set", "method=vae", "--set", "data=nowhere"], root.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown method"));
    let out = iia(&["gen", "--set", "bogus=1"], root.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn binary_gen_honours_out_dir_env() {
    let root = tempfile::tempdir().unwrap();
    let out = iia(
        &["gen", "--set", "n=2", "--set", "N=256", "--set", "num_freq=4"],
        root.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("variability rank 4/4"), "{stdout}");
    let data = fs::read_dir(root.path().join("data")).unwrap().count();
    assert_eq!(data, 1);
}

#[test]
fn hmm_defaults_to_twenty_restarts() {
    let cfg: ExperimentConfig = load_config(None, &["method=hmm".to_string()]).unwrap();
    assert_eq!(cfg.restarts, 20);
    assert_eq!(iia::hmm::HmmConfig::default().restarts, 20);
}

#[test]
fn config_hash_ignores_key_order_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    fs::write(&a, r#"{"method": "gcl", "n": 3, "L": 2, "seeds": [1, 2]}"#).unwrap();
    fs::write(&b, r#"{"seeds": [1, 2], "L": 2, "n": 3, "method": "gcl"}"#).unwrap();
    let ca: ExperimentConfig = load_config(Some(&a), &[]).unwrap();
    let cb: ExperimentConfig = load_config(Some(&b), &[]).unwrap();
    assert_eq!(ca.hash(), cb.hash());
    let cc: ExperimentConfig = load_config(Some(&a), &["n=4".into()]).unwrap();
    assert_eq!(cc.n, 4);
    assert_ne!(cc.hash(), ca.hash());
    let dup: ExperimentConfig = load_config(None, &["seeds=[3,3]".into()]).unwrap();
    assert!(dup.validate().is_err());
}

#[test]
fn sweep_covers_the_grid_and_charts_each_curve() {
    let root = tempfile::tempdir().unwrap();
    let sweep = SweepConfig {
        base: ExperimentConfig {
            n: 2,
            segments: 16,
            num_freq: 4,
            epochs: Some(1),
            seeds: vec![0, 1, 2],
            threads: 2,
            ..ExperimentConfig::default()
        },
        methods: vec!["nsvica".into(), "adnvar".into()],
        layer_values: vec![1, 3, 5],
        len_values: vec![1 << 14, 1 << 16],
    };
    assert_eq!(sweep.runs().unwrap().len(), 36);
    let (dir, rows) = cmd_sweep(&sweep, root.path()).unwrap();
    assert_eq!(rows.len(), 36);
    assert!(rows.iter().all(|r| r.is_ok()), "{rows:?}");
    assert_eq!(read_rows(&dir.join("results.csv")).unwrap(), rows);
    assert_eq!(fs::read_dir(dir.join("runs")).unwrap().count(), 36);
    for (panel, method) in [("tcl", "nsvica"), ("gcl", "adnvar")] {
        let svg = fs::read_to_string(dir.join(format!("mcc_{panel}.svg"))).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 3, "{panel}");
        for l in [1, 3, 5] {
            assert!(svg.contains(&format!("{method} L={l}")));
        }
    }
}

#[test]
fn run_record_reproduces_its_row() {
    let cfg = small("nica-tcl").for_run(4);
    let (first, record) = sweep_run(&cfg);
    let (second, _) = sweep_run(&record.config);
    assert_eq!(record.config_hash, cfg.hash());
    let strip = |mut r: iia_cli::results::ResultRow| {
        r.runtime_s = 0.0;
        r
    };
    assert_eq!(strip(first), strip(second));
}

#[test]
fn failed_runs_are_recorded_not_fatal() {
    // 40 points cannot hold 16 NSVICA segments of length >= n
    let sweep = SweepConfig {
        base: ExperimentConfig {
            n: 3,
            segments: 16,
            seeds: vec![0],
            threads: 1,
            ..ExperimentConfig::default()
        },
        methods: vec!["nsvica".into()],
        layer_values: vec![1],
        len_values: vec![40, 4096],
    };
    let root = tempfile::tempdir().unwrap();
    let (_, rows) = cmd_sweep(&sweep, root.path()).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].status.starts_with("failed"));
    assert!(rows[1].is_ok());
}

#[test]
fn variability_of_generated_truth() {
    let cfg = small("gcl");
    let data = runner::generate(&cfg, 3).unwrap();
    assert!(runner::truth_variability(&data.truth).unwrap().pass);
}
