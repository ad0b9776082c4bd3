mod common;

use haluprobe::features::{extract_feature_table, FeatureConfig, FeatureId};
use haluprobe::selection::SelectionStrategy;
use haluprobe::synth::{default_meta, expected_separation, generate, Effects, SpanMode, SynthConfig};
use haluprobe::trace::{write_trace_set, Label, TraceLabel, TraceMeta};
use tempfile::tempdir;

fn base() -> SynthConfig {
    SynthConfig {
        n_traces: 40,
        prompt_len: (3, 6),
        gen_len: (4, 8),
        meta: TraceMeta {
            num_layers: 3,
            num_heads: 2,
            hidden_dim: 6,
            ffn_dim: 8,
            vocab_size: 100,
            topk: 6,
            ..default_meta()
        },
        ..SynthConfig::default()
    }
}

fn bytes_of(cfg: &SynthConfig, seed: u64) -> Vec<Vec<u8>> {
    let dir = tempdir().unwrap();
    write_trace_set(&generate(cfg, seed).unwrap(), dir.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    names.iter().map(|p| std::fs::read(p).unwrap()).collect()
}

/// Mean per-token gap (halu minus factual) averaged over all columns.
fn per_token_gap(cfg: &SynthConfig, seed: u64, feature: FeatureId) -> f64 {
    let set = generate(cfg, seed).unwrap();
    let t = extract_feature_table(&set, &FeatureConfig::new(vec![feature]), SelectionStrategy::PerToken).unwrap();
    let (mut h, mut nh, mut f, mut nf) = (0.0, 0.0, 0.0, 0.0);
    for r in &t.rows {
        let v = r.values.iter().sum::<f64>() / r.values.len() as f64;
        if r.label == Some(Label::Hallucinated) {
            h += v;
            nh += 1.0;
        } else {
            f += v;
            nf += 1.0;
        }
    }
    h / nh - f / nf
}

#[test]
fn same_seed_gives_identical_bytes_and_other_seeds_differ() {
    let cfg = SynthConfig {
        effects: Effects::moderate(),
        ..base()
    };
    assert_eq!(bytes_of(&cfg, 7), bytes_of(&cfg, 7));
    assert_ne!(bytes_of(&cfg, 7), bytes_of(&cfg, 8));
}

#[test]
fn label_fraction_extremes() {
    for (frac, want) in [(0.0, TraceLabel::Factual), (1.0, TraceLabel::Hallucinated)] {
        let set = generate(&SynthConfig { halu_fraction: frac, ..base() }, 1).unwrap();
        assert!(set.traces.iter().all(|t| t.label == want));
    }
    // Bernoulli per trace: 1000 draws at 0.5 stay within 4 sd of 500
    let set = generate(&SynthConfig { n_traces: 1000, gen_len: (1, 2), ..base() }, 1).unwrap();
    let halu = set.traces.iter().filter(|t| t.label == TraceLabel::Hallucinated).count();
    assert!((437..=563).contains(&halu), "{halu}");
}

#[test]
fn generated_sets_pass_validation_with_every_option() {
    let mut cfg = SynthConfig {
        effects: Effects::moderate(),
        trace_sigma: 0.2,
        span_mode: SpanMode::LocalizedSpans { span_len: 2 },
        effect_layers: Some(vec![1]),
        ..base()
    };
    generate(&cfg, 3).unwrap().validate().unwrap();
    cfg.base.self_mass = None;
    cfg.span_mode = SpanMode::WholeResponse;
    generate(&cfg, 4).unwrap().validate().unwrap();
}

#[test]
fn localized_spans_stay_inside_the_response() {
    let cfg = SynthConfig {
        span_mode: SpanMode::LocalizedSpans { span_len: 3 },
        gen_len: (6, 10),
        effects: Effects::moderate(),
        ..base()
    };
    let set = generate(&cfg, 5).unwrap();
    for tr in &set.traces {
        if tr.label == TraceLabel::Hallucinated {
            let s = tr.problematic_spans[0];
            assert_eq!(s.len(), 3);
            assert!(s.start >= 1 && s.end < tr.gen_len, "{s:?} in {}", tr.gen_len);
        } else {
            assert!(tr.problematic_spans.is_empty());
        }
    }
}

#[test]
fn rank_effect_is_exact_without_noise() {
    let cfg = SynthConfig {
        effects: Effects::only(FeatureId::MaxTokenRank, 5.0),
        noise_sigma: 0.0,
        ..base()
    };
    let gap = per_token_gap(&cfg, 2, FeatureId::MaxTokenRank);
    assert!((gap - 5.0).abs() < 1e-9, "{gap}");
    assert!((expected_separation(&cfg, FeatureId::MaxTokenRank).unwrap() - 5.0).abs() < 1e-9);
}

#[test]
fn null_effects_give_zero_expected_separation() {
    for f in FeatureId::ALL {
        assert_eq!(expected_separation(&base(), f).unwrap(), 0.0, "{f}");
    }
}

#[test]
fn lookback_gap_grows_with_the_planted_delta() {
    let mut last = f64::NEG_INFINITY;
    for delta in [0.0, 0.05, 0.1, 0.2] {
        let cfg = SynthConfig {
            n_traces: 200,
            effects: Effects::only(FeatureId::LookbackRatio, delta),
            ..base()
        };
        let gap = per_token_gap(&cfg, 11, FeatureId::LookbackRatio);
        let want = expected_separation(&cfg, FeatureId::LookbackRatio).unwrap();
        assert!(gap < 0.0 || delta == 0.0, "more self mass lowers the lookback ratio");
        assert!((gap.abs() - want).abs() < 0.02, "delta {delta}: measured {gap}, expected {want}");
        assert!(want > last);
        last = want;
    }
}

#[test]
fn infeasible_configs_are_config_errors() {
    let cases: Vec<SynthConfig> = vec![
        SynthConfig { n_traces: 0, ..base() },
        SynthConfig { gen_len: (5, 3), ..base() },
        SynthConfig { halu_fraction: 1.5, ..base() },
        SynthConfig { noise_sigma: -1.0, ..base() },
        SynthConfig {
            effects: Effects { activation_delta: 2.0, ..Effects::default() },
            ..base()
        },
        SynthConfig {
            span_mode: SpanMode::LocalizedSpans { span_len: 8 },
            ..base()
        },
    ];
    for (i, c) in cases.iter().enumerate() {
        assert_eq!(generate(c, 0).unwrap_err().class(), "config", "case {i}");
    }
    let localized = SynthConfig {
        span_mode: SpanMode::LocalizedSpans { span_len: 2 },
        ..base()
    };
    assert_eq!(expected_separation(&localized, FeatureId::LookbackRatio).unwrap_err().class(), "config");
}

#[test]
fn config_round_trips_through_json() {
    let cfg = SynthConfig {
        effects: Effects::moderate(),
        span_mode: SpanMode::LocalizedSpans { span_len: 2 },
        effect_layers: Some(vec![0, 2]),
        ..base()
    };
    let text = serde_json::to_string(&cfg).unwrap();
    let back: SynthConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
}
