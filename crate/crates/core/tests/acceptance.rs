//! One PASS/FAIL line per headline criterion. Tolerances are pinned here
//! and never adjusted to make a run pass.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::oracle::{oracle_row, random_small_set, rel_err};
use haluprobe::detect::{grad_check, load_model, save_model, train, Family, TrainConfig};
use haluprobe::eval::{bench_overhead, evaluate, run_token_study, run_transfer, split_traces, Protocol};
use haluprobe::features::{
    attention_entropy, extract_feature_table, lookback_ratio, truncated_jsd, FeatureConfig, FeatureId,
    HeadGranularity, DEFAULT_EPSILON,
};
use haluprobe::selection::SelectionStrategy;
use haluprobe::synth::{default_meta, generate, Effects, SpanMode, SynthConfig};
use haluprobe::trace::{load_trace_set, write_trace_set, InferenceTrace, LogitStats, TraceLabel, TraceShape};
use statrs::distribution::{ContinuousCDF, Normal};

const ORACLE_TOL: f64 = 1e-6;
const ORACLE_SECS: f64 = 10.0;
const CLOSED_TOL: f64 = 1e-9;
const GRAD_TOL_LOGREG: f64 = 1e-5;
const GRAD_TOL_NET: f64 = 1e-4;
const GRAD_SECS: f64 = 30.0;
const PLANTED_MIN_ACC: f64 = 0.90;
const BAYES_TOL: f64 = 0.03;
const NULL_TOL: f64 = 0.05;
const PLANTED_SECS: f64 = 120.0;
const TOKEN_GAP: f64 = 0.03;
const TOKEN_SEEDS: u64 = 5;
const TRANSFER_DIAG_MIN: f64 = 0.8;
const TRANSFER_OFF_MAX: f64 = 0.55;
/// Lookback time ratio for doubled L: factor 2 with a band for fixed
/// per-unit costs and timer noise.
const LAYER_RATIO_BAND: (f64, f64) = (1.4, 2.8);
const MIN_MUTANTS: usize = 10;

type Check = Result<String, String>;
type Named = (&'static str, fn() -> Check);

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn feature_oracle() -> Check {
    let start = Instant::now();
    let sets = random_small_set(120, 11);
    let n_traces: usize = sets.iter().map(|s| s.len()).sum();
    let strategies: Vec<SelectionStrategy> =
        ["all", "per", "first", "last", "win:2,1", "win:3,2"].iter().map(|s| s.parse().unwrap()).collect();
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut seen = std::collections::BTreeSet::new();
    for set in &sets {
        for g in [HeadGranularity::LayerMean, HeadGranularity::PerHead] {
            let config = FeatureConfig::default().with_granularity(g);
            for &strategy in &strategies {
                let table = extract_feature_table(set, &config, strategy).map_err(|e| e.to_string())?;
                for row in &table.rows {
                    let tr = set.traces.iter().find(|t| t.trace_id == row.trace_id).unwrap();
                    let want = oracle_row(tr, row.unit, &table.layout, &config);
                    for (k, (&got, &exp)) in row.values.iter().zip(&want).enumerate() {
                        worst = worst.max(rel_err(got, exp));
                        seen.insert(table.layout[k].feature);
                        checked += 1;
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        n_traces >= 100 && seen.len() == 10 && worst <= ORACLE_TOL && secs < ORACLE_SECS,
        format!("{n_traces} traces, {} features, {checked} values, max rel err {worst:.2e}, {secs:.2}s", seen.len()),
    )
}

fn attention_trace(prompt_len: usize, rows: Vec<Vec<f32>>, layers: usize) -> InferenceTrace {
    let mut att = Vec::new();
    for r in &rows {
        for _ in 0..layers {
            att.extend_from_slice(r);
        }
    }
    InferenceTrace {
        trace_id: "closed".into(),
        prompt_len,
        gen_len: rows.len(),
        shape: TraceShape {
            layers,
            heads: 1,
            hidden_dim: 1,
            ffn_dim: 1,
            topk: 2,
        },
        attention: Some(att),
        hidden: None,
        activation: None,
        logits: None,
        label: TraceLabel::Factual,
        problematic_spans: vec![],
    }
}

fn closed_forms() -> Check {
    let mut worst = 0.0f64;
    let mut note = |v: f64, want: f64| worst = worst.max((v - want).abs());
    for n in [2usize, 3, 5, 8, 13] {
        // context of n at t = 0 with prompt n - 1: uniform row
        let tr = attention_trace(n - 1, vec![vec![1.0 / n as f32; n]], 1);
        note(lookback_ratio(&tr, 0, 0, 0).unwrap(), (n - 1) as f64 / n as f64);
        let h = attention_entropy(&tr, 0, 0, 0, DEFAULT_EPSILON).unwrap();
        // f32 storage of 1/n perturbs the entropy below the tolerance only for powers of two
        if n.is_power_of_two() {
            note(h, (n as f64).ln());
        }
        let mut onehot = vec![0.0f32; n];
        onehot[n / 2] = 1.0;
        let tr = attention_trace(n - 1, vec![onehot], 1);
        note(attention_entropy(&tr, 0, 0, 0, DEFAULT_EPSILON).unwrap(), 0.0);
    }
    for k in [2usize, 4, 16, 64] {
        let tr = attention_trace(k - 1, vec![vec![1.0 / k as f32; k]], 1);
        note(attention_entropy(&tr, 0, 0, 0, DEFAULT_EPSILON).unwrap(), (k as f64).ln());
    }
    let stats = |ids: [u32; 2]| LogitStats {
        chosen_prob: 1.0,
        chosen_rank: 1,
        topk_probs: vec![1.0, 0.0],
        topk_ids: ids.to_vec(),
        tail_mass: 0.0,
    };
    note(truncated_jsd(&stats([1, 2]), &stats([3, 4])), std::f64::consts::LN_2);
    // avg_jsd at the final layer through the full extraction path
    let set = generate(
        &SynthConfig {
            n_traces: 6,
            effects: Effects::moderate(),
            ..SynthConfig::default()
        },
        3,
    )
    .unwrap();
    let last = set.meta.num_layers - 1;
    let table = extract_feature_table(&set, &FeatureConfig::new(vec![FeatureId::AvgJsd]), SelectionStrategy::PerToken)
        .map_err(|e| e.to_string())?;
    let col = table.layout.iter().position(|d| d.layer == Some(last)).unwrap();
    for row in &table.rows {
        note(row.values[col], 0.0);
    }
    ensure(worst <= CLOSED_TOL, format!("max abs deviation {worst:.2e}"))
}

fn gradient_checks() -> Check {
    let start = Instant::now();
    let table = common::mean_shift(32, 5, 1.0, 70);
    let c = TrainConfig::default();
    let g = |f| grad_check(f, &table, &c).map_err(|e| e.to_string());
    let (lr, mlp, sm) = (g(Family::Logreg)?, g(Family::Mlp)?, g(Family::Siamese)?);
    let secs = start.elapsed().as_secs_f64();
    ensure(
        lr < GRAD_TOL_LOGREG && mlp < GRAD_TOL_NET && sm < GRAD_TOL_NET && secs < GRAD_SECS,
        format!("logreg {lr:.2e}, mlp {mlp:.2e}, siamese {sm:.2e}, {secs:.2}s"),
    )
}

fn held_out_accuracy(set: &haluprobe::trace::TraceSet, family: Family, fc: &FeatureConfig, test_fraction: f64) -> Result<f64, String> {
    let table = extract_feature_table(set, fc, SelectionStrategy::AllTokens).map_err(|e| e.to_string())?;
    let split = split_traces(set, test_fraction, 0).map_err(|e| e.to_string())?;
    let model = train(family, &table.filter_traces(&split.train), &TrainConfig::default()).map_err(|e| e.to_string())?;
    let r = evaluate(&model, &table.filter_traces(&split.test), 0.5).map_err(|e| e.to_string())?;
    Ok(r.response.accuracy)
}

fn planted_detection() -> Check {
    let start = Instant::now();
    let planted = generate(
        &SynthConfig {
            n_traces: 2000,
            effects: Effects::moderate(),
            ..SynthConfig::default()
        },
        1,
    )
    .map_err(|e| e.to_string())?;
    let fc = FeatureConfig::default();
    let lr = held_out_accuracy(&planted, Family::Logreg, &fc, 0.2)?;
    let mlp = held_out_accuracy(&planted, Family::Mlp, &fc, 0.2)?;

    // pure mean shift: one token, hidden state only, shift 1 against unit noise
    let (shift, sigma) = (1.0, 1.0);
    let bayes_cfg = SynthConfig {
        n_traces: 10_000,
        gen_len: (1, 1),
        noise_sigma: sigma,
        effects: Effects::only(FeatureId::HiddenState, shift),
        ..SynthConfig::default()
    };
    let bayes_set = generate(&bayes_cfg, 2).map_err(|e| e.to_string())?;
    let bayes = Normal::new(0.0, 1.0).unwrap().cdf(shift / (2.0 * sigma));
    let hid = held_out_accuracy(&bayes_set, Family::Logreg, &FeatureConfig::new(vec![FeatureId::HiddenState]), 0.5)?;

    let null = generate(
        &SynthConfig {
            n_traces: 2000,
            ..SynthConfig::default()
        },
        4,
    )
    .map_err(|e| e.to_string())?;
    // 0.5 held out so the chance band is about 3 standard errors wide
    let null_acc = held_out_accuracy(&null, Family::Logreg, &fc, 0.5)?;
    let secs = start.elapsed().as_secs_f64();
    ensure(
        lr >= PLANTED_MIN_ACC
            && mlp >= PLANTED_MIN_ACC
            && (hid - bayes).abs() <= BAYES_TOL
            && (null_acc - 0.5).abs() <= NULL_TOL
            && secs < PLANTED_SECS,
        format!(
            "logreg {lr:.3}, mlp {mlp:.3}, mean-shift {hid:.3} vs Bayes {bayes:.3}, null {null_acc:.3}, {secs:.1}s"
        ),
    )
}

fn token_ordering() -> Check {
    let scale = 1.6;
    let m = Effects::moderate();
    let effects = Effects {
        lookback_delta: m.lookback_delta * scale,
        entropy_delta: m.entropy_delta * scale,
        hidden_shift: m.hidden_shift * scale,
        activation_delta: (m.activation_delta * scale).min(0.9),
        ..Effects::default()
    };
    let cfg = SynthConfig {
        n_traces: 2000,
        gen_len: (40, 48),
        effects,
        noise_sigma: 1.0,
        trace_sigma: 1.1,
        span_mode: SpanMode::LocalizedSpans { span_len: 8 },
        ..SynthConfig::default()
    };
    let names = ["win:4,2", "win:2,1", "per", "first", "last", "all"];
    let strategies: Vec<SelectionStrategy> = names.iter().map(|s| s.parse().unwrap()).collect();
    let mut mean = [0.0f64; 6];
    for seed in 0..TOKEN_SEEDS {
        let set = generate(&cfg, seed).map_err(|e| e.to_string())?;
        let protocol = Protocol {
            split_seed: seed,
            ..Protocol::default()
        };
        let rep = run_token_study(&set, &strategies, Family::Logreg, &FeatureConfig::default(), &protocol)
            .map_err(|e| e.to_string())?;
        for (k, name) in names.iter().enumerate() {
            mean[k] += rep.accuracy(name).ok_or(format!("{name} failed"))? / TOKEN_SEEDS as f64;
        }
    }
    let [w42, w21, per, first, last, all] = mean;
    let base = first.max(last).max(all);
    ensure(
        w42 >= w21 && w21 - per >= TOKEN_GAP && per - base >= TOKEN_GAP,
        format!(
            "{TOKEN_SEEDS}-seed means: win:4,2 {w42:.3}, win:2,1 {w21:.3}, per {per:.3}, first {first:.3}, last {last:.3}, all {all:.3}"
        ),
    )
}

fn transfer_asymmetry() -> Check {
    let mk = |name: &str, e: Effects, seed| {
        let mut set = generate(
            &SynthConfig {
                n_traces: 1000,
                effects: e,
                ..SynthConfig::default()
            },
            seed,
        )
        .unwrap();
        set.dataset_name = name.into();
        set
    };
    let a = mk("A", Effects::only(FeatureId::LookbackRatio, 0.08), 1);
    let b = mk("B", Effects::only(FeatureId::MaxTokenRank, 2.0), 2);
    let sets = [a, b];
    let fs = vec![("all".to_string(), FeatureId::ALL.to_vec())];
    let mut ok = true;
    let mut parts = Vec::new();
    for family in Family::ALL {
        let rep = run_transfer(
            &sets,
            &sets,
            &fs,
            family,
            SelectionStrategy::AllTokens,
            &FeatureConfig::default(),
            &Protocol::default(),
        )
        .map_err(|e| e.to_string())?;
        let (mut dmin, mut omax) = (f64::INFINITY, f64::NEG_INFINITY);
        for c in &rep.cells {
            let acc = c.response.map(|m| m.accuracy).ok_or(format!("{family}: {:?}", c.error))?;
            if c.diagonal {
                dmin = dmin.min(acc);
            } else {
                omax = omax.max(acc);
            }
        }
        ok &= dmin >= TRANSFER_DIAG_MIN && omax <= TRANSFER_OFF_MAX;
        parts.push(format!("{family} diag>={dmin:.3} off<={omax:.3}"));
    }
    ensure(ok, parts.join(", "))
}

fn overhead_report() -> Check {
    const TABLE: [(FeatureId, &str, &str, &str); 8] = [
        (FeatureId::LookbackRatio, "Attention Lookback Ratio", "O(w·H·L)", "O(w·H·L)"),
        (FeatureId::AttentionEntropy, "Attention Allocation Sharpness", "O(w·H·L)", "O(w·H·L·log w)"),
        (FeatureId::HiddenState, "Last Layer Hidden State", "O(w·d)", "O(w·d)"),
        (FeatureId::ActivationMapDiff, "Activation Map", "O(w·d·m)", "O(w·d·m)"),
        (FeatureId::ActivationEntropy, "Activation Entropy", "O(w·m)", "O(w·m·log m)"),
        (FeatureId::MinTokenProb, "Min Token Probabilities", "O(w·L)", "O(w·L)"),
        (FeatureId::MaxTokenRank, "Max Token Ranks", "O(w·L)", "O(w·L·log w)"),
        (FeatureId::JointTokenProb, "Joint Token Probabilities", "O(w·L)", "O(w·L·w)"),
    ];
    let cfg = |layers| SynthConfig {
        n_traces: 200,
        meta: haluprobe::trace::TraceMeta {
            num_layers: layers,
            ..default_meta()
        },
        ..SynthConfig::default()
    };
    let set = generate(&cfg(4), 5).map_err(|e| e.to_string())?;
    let feats: Vec<FeatureId> = TABLE.iter().map(|r| r.0).collect();
    let rep = bench_overhead(&set, &feats, 7).map_err(|e| e.to_string())?;
    let mut ok = rep.rows.len() == 8 && rep.strategy == SelectionStrategy::window(8, 4);
    for (f, name, storage, compute) in TABLE {
        let row = rep.get(f).ok_or(format!("{f} missing"))?;
        ok &= row.name == name && row.storage == storage && row.compute == compute && row.seconds_per_token > 0.0;
    }
    let doubled = generate(&cfg(8), 5).map_err(|e| e.to_string())?;
    let t4 = bench_overhead(&set, &[FeatureId::LookbackRatio], 9).map_err(|e| e.to_string())?.rows[0].seconds_per_token;
    let t8 = bench_overhead(&doubled, &[FeatureId::LookbackRatio], 9).map_err(|e| e.to_string())?.rows[0].seconds_per_token;
    let ratio = t8 / t4;
    ok &= (LAYER_RATIO_BAND.0..=LAYER_RATIO_BAND.1).contains(&ratio);
    ensure(
        ok,
        format!(
            "{} rows, strings verbatim, {} tokens, lookback L=8/L=4 time ratio {ratio:.2} (band {:?})",
            rep.rows.len(),
            rep.total_tokens,
            LAYER_RATIO_BAND
        ),
    )
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn serialization() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let t = tmp.path();
    let set = generate(
        &SynthConfig {
            n_traces: 30,
            effects: Effects::moderate(),
            span_mode: SpanMode::LocalizedSpans { span_len: 3 },
            ..SynthConfig::default()
        },
        7,
    )
    .map_err(|e| e.to_string())?;
    write_trace_set(&set, t.join("a")).map_err(|e| e.to_string())?;
    let back = load_trace_set(t.join("a")).map_err(|e| e.to_string())?;
    write_trace_set(&back, t.join("b")).map_err(|e| e.to_string())?;
    let traces_ok = back == set && dir_bytes(&t.join("a")) == dir_bytes(&t.join("b"));

    let table = common::mean_shift(200, 4, 1.5, 90);
    let mut models_ok = true;
    for family in Family::ALL {
        let m = train(family, &table, &TrainConfig { epochs: 30, ..TrainConfig::default() }).map_err(|e| e.to_string())?;
        let (p, q) = (t.join(format!("m-{family}")), t.join(format!("n-{family}")));
        save_model(&m, &p).map_err(|e| e.to_string())?;
        let loaded = load_model(&p).map_err(|e| e.to_string())?;
        save_model(&loaded, &q).map_err(|e| e.to_string())?;
        models_ok &= loaded == m && dir_bytes(&p) == dir_bytes(&q);
    }

    let base = t.join("base");
    write_trace_set(&common::mutant_base(5), &base).map_err(|e| e.to_string())?;
    load_trace_set(&base).map_err(|e| format!("unmutated base rejected: {e}"))?;
    let mutants = common::trace_mutants();
    let mut wrong = Vec::new();
    for (i, (name, class, mutate)) in mutants.iter().enumerate() {
        let dir = t.join(format!("mut{i}"));
        common::copy_dir(&base, &dir);
        mutate(&dir);
        match load_trace_set(&dir) {
            Ok(_) => wrong.push(format!("{name}: loaded")),
            Err(e) if e.class() != *class => wrong.push(format!("{name}: {} not {class}", e.class())),
            Err(_) => {}
        }
    }
    ensure(
        traces_ok && models_ok && mutants.len() >= MIN_MUTANTS && wrong.is_empty(),
        format!(
            "trace round-trip {traces_ok}, model round-trips {models_ok}, {}/{} mutants rejected with their class{}",
            mutants.len() - wrong.len(),
            mutants.len(),
            if wrong.is_empty() { String::new() } else { format!(" ({})", wrong.join("; ")) }
        ),
    )
}

fn main() {
    let checks: [Named; 8] = [
        ("feature oracle", feature_oracle),
        ("closed forms", closed_forms),
        ("gradient checks", gradient_checks),
        ("planted detection", planted_detection),
        ("token strategy ordering", token_ordering),
        ("transfer asymmetry", transfer_asymmetry),
        ("overhead report", overhead_report),
        ("serialization", serialization),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
