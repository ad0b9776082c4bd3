#![allow(dead_code)]

pub mod oracle;

use haluprobe::features::{FeatureDescriptor, FeatureId, FeatureRow, FeatureTable};
use haluprobe::selection::SelectionStrategy;
use haluprobe::trace::{Label, Span};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Plain table whose columns are labeled as hidden-state dims.
pub fn table_from(xs: &[Vec<f64>], halu: &[bool]) -> FeatureTable {
    let d = xs.first().map(|x| x.len()).unwrap_or(0);
    FeatureTable {
        layout: (0..d)
            .map(|k| FeatureDescriptor {
                feature: FeatureId::HiddenState,
                layer: Some(0),
                head: None,
                dim: Some(k),
            })
            .collect(),
        strategy: SelectionStrategy::AllTokens,
        dataset_name: "test".into(),
        rows: xs
            .iter()
            .zip(halu)
            .enumerate()
            .map(|(i, (x, &h))| FeatureRow {
                trace_id: format!("r{i}"),
                unit: Span::new(0, 1),
                label: Some(Label::from_halu(h)),
                values: x.clone(),
            })
            .collect(),
    }
}

/// Two isotropic Gaussians with unit variance whose means are
/// `mean_gap` apart along the first axis, equal priors.
pub fn mean_shift(n: usize, dim: usize, mean_gap: f64, seed: u64) -> FeatureTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let h = i % 2 == 0;
        let mut x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        x[0] += if h { mean_gap / 2.0 } else { -mean_gap / 2.0 };
        xs.push(x);
        ys.push(h);
    }
    table_from(&xs, &ys)
}

pub fn accuracy(probs: &[f64], table: &FeatureTable) -> f64 {
    let hits = probs
        .iter()
        .zip(&table.rows)
        .filter(|(p, r)| (**p >= 0.5) == r.label.unwrap().is_halu())
        .count();
    hits as f64 / probs.len() as f64
}

/// Small labeled synthetic set with every section present.
pub fn small_set(n: usize, seed: u64) -> haluprobe::trace::TraceSet {
    use haluprobe::synth::{generate, Effects, SpanMode, SynthConfig};
    let cfg = SynthConfig {
        n_traces: n,
        prompt_len: (2, 5),
        gen_len: (4, 7),
        effects: Effects::moderate(),
        span_mode: SpanMode::LocalizedSpans { span_len: 2 },
        ..SynthConfig::default()
    };
    generate(&cfg, seed).unwrap()
}

pub fn copy_dir(from: &std::path::Path, to: &std::path::Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        std::fs::copy(e.path(), to.join(e.file_name())).unwrap();
    }
}

fn patch_f32(path: &std::path::Path, index: usize, f: impl Fn(f32) -> f32) {
    let mut bytes = std::fs::read(path).unwrap();
    let at = index * 4;
    let v = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    bytes[at..at + 4].copy_from_slice(&f(v).to_le_bytes());
    std::fs::write(path, bytes).unwrap();
}

fn patch_manifest(dir: &std::path::Path, f: impl Fn(&mut serde_json::Value)) {
    let path = dir.join("manifest.json");
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    f(&mut v);
    std::fs::write(&path, serde_json::to_vec_pretty(&v).unwrap()).unwrap();
}

fn truncate(path: &std::path::Path, drop: usize) {
    let bytes = std::fs::read(path).unwrap();
    std::fs::write(path, &bytes[..bytes.len() - drop]).unwrap();
}

pub type Mutant = (&'static str, &'static str, fn(&std::path::Path));

/// Corruptions of a written trace set: (name, expected error class,
/// mutation applied to the set directory). The first trace must be
/// hallucinated with at least one span and the set must use topk 8.
pub fn trace_mutants() -> Vec<Mutant> {
    vec![
        ("truncated attention blob", "format", |d| truncate(&d.join("attention.bin"), 4)),
        ("truncated logit blob", "format", |d| truncate(&d.join("logits.bin"), 7)),
        ("trailing bytes in hidden blob", "format", |d| {
            let p = d.join("hidden.bin");
            let mut b = std::fs::read(&p).unwrap();
            b.extend_from_slice(&[0, 0, 0, 0]);
            std::fs::write(&p, b).unwrap();
        }),
        ("attention row does not sum to one", "validation", |d| {
            patch_f32(&d.join("attention.bin"), 0, |v| v + 0.25)
        }),
        ("negative attention weight", "validation", |d| {
            // move mass between two entries of the first row so the sum is kept
            patch_f32(&d.join("attention.bin"), 0, |v| v - 2.0);
            patch_f32(&d.join("attention.bin"), 1, |v| v + 2.0);
        }),
        ("top-k plus tail does not sum to one", "validation", |d| {
            // record 0: prob, rank, 8 probs, 8 ids, tail
            patch_f32(&d.join("logits.bin"), 2 + 16, |v| v + 0.5)
        }),
        ("non-finite hidden value", "validation", |d| patch_f32(&d.join("hidden.bin"), 3, |_| f32::NAN)),
        ("span past the response end", "validation", |d| {
            patch_manifest(d, |m| {
                let t = &mut m["traces"][0];
                let n = t["gen_len"].as_u64().unwrap();
                t["problematic_spans"][0] = serde_json::json!([0, n + 1]);
            })
        }),
        ("span on a factual trace", "validation", |d| {
            patch_manifest(d, |m| m["traces"][0]["label"] = serde_json::json!("factual"))
        }),
        ("bad magic", "format", |d| patch_manifest(d, |m| m["magic"] = serde_json::json!("XXXX1"))),
        ("future format version", "unsupported_version", |d| {
            patch_manifest(d, |m| m["format_version"] = serde_json::json!(2))
        }),
        ("duplicate trace id", "validation", |d| {
            patch_manifest(d, |m| {
                let id = m["traces"][0]["trace_id"].clone();
                m["traces"][1]["trace_id"] = id;
            })
        }),
    ]
}

/// Set that the mutants in [`trace_mutants`] expect: a hallucinated trace
/// with spans first.
pub fn mutant_base(seed: u64) -> haluprobe::trace::TraceSet {
    let mut set = small_set(12, seed);
    let i = set
        .traces
        .iter()
        .position(|t| !t.problematic_spans.is_empty())
        .expect("no hallucinated trace with spans");
    set.traces.swap(0, i);
    set
}
