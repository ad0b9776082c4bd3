use std::fs;
use std::path::Path;
use std::process::Command;

use haluprobe::cli::run;
use haluprobe::eval::EvalReport;
use tempfile::tempdir;

fn sh(args: &[&str]) -> i32 {
    let mut v = vec!["haluprobe", "--log-level", "error"];
    v.extend_from_slice(args);
    run(v)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_config(dir: &Path, halu_fraction: f64) -> String {
    let path = dir.join("config.json");
    let cfg = serde_json::json!({
        "synth": {
            "n_traces": 60,
            "prompt_len": [3, 5],
            "gen_len": [4, 6],
            "halu_fraction": halu_fraction,
            "meta": {
                "model_name": "tiny", "num_layers": 2, "num_heads": 2, "hidden_dim": 4,
                "ffn_dim": 6, "vocab_size": 50, "topk": 4,
                "sections_present": ["attention", "hidden", "activation", "logit"]
            },
            "effects": {"lookback_delta": 0.1, "rank_delta": 2, "hidden_shift": 1.0}
        },
        "train": {"epochs": 100, "mlp_hidden": [4]}
    });
    fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn synth_extract_train_eval_pipeline() {
    let tmp = tempdir().unwrap();
    let t = tmp.path();
    let cfg = small_config(t, 0.5);
    let traces = t.join("traces");
    assert_eq!(sh(&["--config", &cfg, "synth", "--out", p(&traces), "--seed", "3"]), 0);
    assert_eq!(sh(&["validate", "--trace-dir", p(&traces)]), 0);
    let table = t.join("table");
    assert_eq!(
        sh(&["extract", "--trace-dir", p(&traces), "--out", p(&table), "--strategy", "win:2,1", "--features", "lookback_ratio,max_token_rank"]),
        0
    );
    assert!(fs::read_dir(&table).unwrap().count() > 0);
    let model = t.join("model");
    assert_eq!(
        sh(&["--config", &cfg, "train", "--trace-dir", p(&traces), "--out", p(&model), "--strategy", "all", "--features", "lookback_ratio,max_token_rank", "--split-seed", "4"]),
        0
    );
    assert!(model.join("run.json").exists());
    let eval = t.join("eval");
    assert_eq!(sh(&["eval", "--trace-dir", p(&traces), "--model", p(&model), "--out", p(&eval)]), 0);
    let report: EvalReport = serde_json::from_slice(&fs::read(eval.join("eval.json")).unwrap()).unwrap();
    // 60 traces, 20% held out per class
    assert!((10..=14).contains(&report.response.total()), "{}", report.response.total());
    assert!(report.response.accuracy >= 0.8, "{}", report.response.accuracy);
    let preds = fs::read_to_string(eval.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), report.response.total() + 1);
    // a model trained on other features cannot score this table
    let bad = t.join("bad");
    assert_eq!(
        sh(&["eval", "--trace-dir", p(&traces), "--model", p(&model), "--out", p(&bad), "--features", "hidden_state"]),
        2
    );
}

#[test]
fn experiment_commands_write_their_reports() {
    let tmp = tempdir().unwrap();
    let t = tmp.path();
    let cfg = small_config(t, 0.5);
    let a = t.join("a");
    let b = t.join("b");
    assert_eq!(sh(&["--config", &cfg, "synth", "--out", p(&a), "--seed", "1", "--dataset-name", "a"]), 0);
    assert_eq!(sh(&["--config", &cfg, "synth", "--out", p(&b), "--seed", "2", "--dataset-name", "b"]), 0);
    let out = t.join("out");
    let feats = "lookback_ratio,hidden_state";
    assert_eq!(sh(&["--config", &cfg, "ablate", "--trace-dir", p(&a), "--out", p(&out.join("abl")), "--features", feats]), 0);
    assert!(out.join("abl/ablation.csv").exists());
    assert_eq!(
        sh(&["--config", &cfg, "tokens", "--trace-dir", p(&a), "--out", p(&out.join("tok")), "--strategy", "all", "--strategy", "last", "--features", feats]),
        0
    );
    let tok = fs::read_to_string(out.join("tok/token_study.csv")).unwrap();
    assert_eq!(tok.lines().count(), 3);
    assert_eq!(
        sh(&[
            "--config", &cfg, "transfer", "--train-set", p(&a), "--train-set", p(&b), "--feature-set", "att=lookback_ratio",
            "--feature-set", "hid=hidden_state", "--out", p(&out.join("tr")),
        ]),
        0
    );
    assert_eq!(fs::read_to_string(out.join("tr/transfer.csv")).unwrap().lines().count(), 1 + 8);
    assert_eq!(sh(&["curves", "--trace-dir", p(&a), "--compare", p(&b), "--axis", "head", "--out", p(&out.join("cur"))]), 0);
    assert_eq!(sh(&["bench", "--trace-dir", p(&a), "--features", "lookback_ratio", "--out", p(&out.join("bench"))]), 0);
    assert!(out.join("bench/overhead.csv").exists());
}

#[test]
fn exit_codes() {
    let tmp = tempdir().unwrap();
    let t = tmp.path();
    assert_eq!(sh(&["synth", "--bogus"]), 1);
    assert_eq!(sh(&["validate", "--trace-dir", p(&t.join("missing"))]), 2);
    let one_class = small_config(t, 0.0);
    let traces = t.join("f");
    assert_eq!(sh(&["--config", &one_class, "synth", "--out", p(&traces)]), 0);
    assert_eq!(sh(&["train", "--trace-dir", p(&traces), "--out", p(&t.join("m"))]), 2);
    let mixed = small_config(t, 0.5);
    let traces = t.join("g");
    assert_eq!(sh(&["--config", &mixed, "synth", "--out", p(&traces)]), 0);
    assert_eq!(
        sh(&["train", "--trace-dir", p(&traces), "--out", p(&t.join("m2")), "--features", "max_token_rank", "--learning-rate", "1e308", "--minibatch", "4", "--epochs", "5"]),
        3
    );
}

#[test]
fn binary_reports_the_error_class() {
    let tmp = tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_haluprobe"))
        .args(["validate", "--trace-dir"])
        .arg(tmp.path().join("nope"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error"), "{err}");
    let help = Command::new(env!("CARGO_BIN_EXE_haluprobe")).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    for sub in ["synth", "extract", "train", "eval", "ablate", "tokens", "transfer", "curves", "bench", "validate"] {
        assert!(String::from_utf8_lossy(&help.stdout).contains(sub), "{sub}");
    }
}
