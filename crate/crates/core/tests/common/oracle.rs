//! Naive 64-bit reimplementation of every feature, used as a test oracle.
//! Indexing into the raw buffers is done here from scratch rather than via
//! the crate's accessors.

use std::collections::BTreeMap;

use haluprobe::features::{FeatureConfig, FeatureDescriptor, FeatureId, HeadGranularity};
use haluprobe::trace::{InferenceTrace, LogitStats, Section, Span, TraceLabel, TraceMeta, TraceSet, TraceShape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const EPS: f64 = 1e-12;

fn att_row(tr: &InferenceTrace, t: usize, l: usize, h: usize) -> Vec<f64> {
    let (nl, nh) = (tr.shape.layers, tr.shape.heads);
    let att = tr.attention.as_ref().unwrap();
    let mut pos = 0;
    for s in 0..tr.gen_len {
        for ll in 0..nl {
            for hh in 0..nh {
                let n = tr.prompt_len + s + 1;
                if (s, ll, hh) == (t, l, h) {
                    return att[pos..pos + n].iter().map(|&x| x as f64).collect();
                }
                pos += n;
            }
        }
    }
    panic!("row ({t},{l},{h}) not found");
}

fn dense(v: &[f32], t: usize, l: usize, layers: usize, width: usize) -> Vec<f64> {
    let start = (t * layers + l) * width;
    v[start..start + width].iter().map(|&x| x as f64).collect()
}

fn logit(tr: &InferenceTrace, t: usize, l: usize) -> &LogitStats {
    &tr.logits.as_ref().unwrap()[t * tr.shape.layers + l]
}

fn entropy(w: &[f64]) -> f64 {
    let total: f64 = w.iter().sum();
    let mut h = 0.0;
    for &x in w {
        let p = x / total;
        if p > EPS {
            h -= p * p.ln();
        }
    }
    h
}

fn kl_half(p: f64, q: f64) -> f64 {
    let m = (p + q) / 2.0;
    let mut s = 0.0;
    if p > 0.0 {
        s += p * (p / m).ln();
    }
    if q > 0.0 {
        s += q * (q / m).ln();
    }
    s / 2.0
}

pub fn jsd(a: &LogitStats, b: &LogitStats) -> f64 {
    let mut pa = BTreeMap::new();
    let mut pb = BTreeMap::new();
    for (&i, &p) in a.topk_ids.iter().zip(&a.topk_probs) {
        pa.insert(i, p as f64);
    }
    for (&i, &p) in b.topk_ids.iter().zip(&b.topk_probs) {
        pb.insert(i, p as f64);
    }
    let mut ids: Vec<u32> = pa.keys().chain(pb.keys()).copied().collect();
    ids.sort();
    ids.dedup();
    let mut js = 0.0;
    for id in ids {
        js += kl_half(*pa.get(&id).unwrap_or(&0.0), *pb.get(&id).unwrap_or(&0.0));
    }
    js + kl_half(a.tail_mass as f64, b.tail_mass as f64)
}

/// One per-token attention-type value.
pub fn attention_feature(tr: &InferenceTrace, f: FeatureId, t: usize, l: usize, h: usize) -> f64 {
    let row = att_row(tr, t, l, h);
    let total: f64 = row.iter().sum();
    match f {
        FeatureId::LookbackRatio => row[..row.len() - 1].iter().sum::<f64>() / total,
        FeatureId::AttentionEntropy => entropy(&row),
        FeatureId::KeyTokenRatio => row[..tr.prompt_len].iter().sum::<f64>() / total,
        _ => unreachable!(),
    }
}

pub fn activation_entropy(tr: &InferenceTrace, t: usize, l: usize) -> f64 {
    let a = dense(tr.activation.as_ref().unwrap(), t, l, tr.shape.layers, tr.shape.ffn_dim);
    let r: Vec<f64> = a.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
    if r.iter().sum::<f64>() == 0.0 {
        (a.len() as f64).ln()
    } else {
        entropy(&r)
    }
}

pub fn map_diff(tr: &InferenceTrace, t: usize, l: usize) -> f64 {
    let (nl, m) = (tr.shape.layers, tr.shape.ffn_dim);
    let a = dense(tr.activation.as_ref().unwrap(), t, l, nl, m);
    let b = dense(tr.activation.as_ref().unwrap(), t - 1, l, nl, m);
    let mut sq = 0.0;
    for k in 0..m {
        sq += (a[k] - b[k]) * (a[k] - b[k]);
    }
    (sq / m as f64).sqrt()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Value of one layout column for one unit, from first principles.
pub fn column(tr: &InferenceTrace, unit: Span, d: &FeatureDescriptor, g: HeadGranularity) -> f64 {
    let toks: Vec<usize> = (unit.start..unit.end).collect();
    let nl = tr.shape.layers;
    let l = d.layer.unwrap();
    match d.feature {
        f @ (FeatureId::LookbackRatio | FeatureId::AttentionEntropy | FeatureId::KeyTokenRatio) => {
            let heads: Vec<usize> = match (g, d.head) {
                (HeadGranularity::PerHead, Some(h)) => vec![h],
                _ => (0..tr.shape.heads).collect(),
            };
            let per_head: Vec<f64> = heads
                .iter()
                .map(|&h| mean(&toks.iter().map(|&t| attention_feature(tr, f, t, l, h)).collect::<Vec<_>>()))
                .collect();
            mean(&per_head)
        }
        FeatureId::HiddenState => {
            let k = d.dim.unwrap();
            mean(&toks
                .iter()
                .map(|&t| dense(tr.hidden.as_ref().unwrap(), t, nl - 1, nl, tr.shape.hidden_dim)[k])
                .collect::<Vec<_>>())
        }
        FeatureId::ActivationEntropy => mean(&toks.iter().map(|&t| activation_entropy(tr, t, l)).collect::<Vec<_>>()),
        FeatureId::ActivationMapDiff => {
            let v: Vec<f64> = toks.iter().filter(|&&t| t >= 1).map(|&t| map_diff(tr, t, l)).collect();
            if v.is_empty() {
                0.0
            } else {
                mean(&v)
            }
        }
        FeatureId::MinTokenProb => toks
            .iter()
            .map(|&t| logit(tr, t, l).chosen_prob as f64)
            .fold(f64::INFINITY, f64::min),
        FeatureId::MaxTokenRank => toks.iter().map(|&t| logit(tr, t, l).chosen_rank).max().unwrap() as f64,
        FeatureId::JointTokenProb => toks
            .iter()
            .map(|&t| (logit(tr, t, l).chosen_prob as f64).max(EPS).ln())
            .sum(),
        FeatureId::AvgJsd => {
            if l == nl - 1 {
                0.0
            } else {
                mean(&toks.iter().map(|&t| jsd(logit(tr, t, l), logit(tr, t, nl - 1))).collect::<Vec<_>>())
            }
        }
    }
}

/// Relative error with a tiny floor so exact zeros compare cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs()).max(1e-9)
}

pub fn oracle_row(tr: &InferenceTrace, unit: Span, layout: &[FeatureDescriptor], config: &FeatureConfig) -> Vec<f64> {
    layout
        .iter()
        .map(|d| column(tr, unit, d, config.head_granularity))
        .collect()
}

fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // heavy-tailed so some rows are peaked and some entries near zero
    let mut w: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (2.0 * z).exp()
        })
        .collect();
    if n > 1 && rng.random_bool(0.15) {
        let k = rng.random_range(0..n);
        w[k] = 0.0;
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

fn random_logits(rng: &mut ChaCha8Rng, vocab: usize, k: usize) -> LogitStats {
    let p = random_weights(rng, vocab);
    let mut order: Vec<usize> = (0..vocab).collect();
    order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    let topk_probs: Vec<f32> = order[..k].iter().map(|&i| p[i] as f32).collect();
    let topk_ids: Vec<u32> = order[..k].iter().map(|&i| i as u32).collect();
    let tail = 1.0 - topk_probs.iter().map(|&x| x as f64).sum::<f64>();
    let rank = rng.random_range(0..vocab);
    LogitStats {
        chosen_prob: p[order[rank]] as f32,
        chosen_rank: rank as u32 + 1,
        topk_probs,
        topk_ids,
        tail_mass: tail.max(0.0) as f32,
    }
}

/// A set of small random traces (T_out <= 4, L <= 2, H <= 2) built
/// without the synthetic generator.
pub fn random_small_set(n: usize, seed: u64) -> Vec<TraceSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sets = Vec::new();
    let mut left = n;
    while left > 0 {
        let layers = rng.random_range(1..=2);
        let heads = rng.random_range(1..=2);
        let meta = TraceMeta {
            model_name: "oracle".into(),
            num_layers: layers,
            num_heads: heads,
            hidden_dim: 3,
            ffn_dim: 5,
            vocab_size: 12,
            topk: 4,
            sections_present: Section::ALL.into_iter().collect(),
        };
        let shape = TraceShape {
            layers,
            heads,
            hidden_dim: 3,
            ffn_dim: 5,
            topk: 4,
        };
        let mut set = TraceSet::new(meta, format!("oracle-{}", sets.len()));
        for _ in 0..left.min(10) {
            let prompt_len = rng.random_range(0..=3);
            let gen_len = rng.random_range(1..=4);
            let mut att = Vec::new();
            for t in 0..gen_len {
                for _ in 0..layers * heads {
                    att.extend(random_weights(&mut rng, prompt_len + t + 1).into_iter().map(|x| x as f32));
                }
            }
            let normal = |len: usize, rng: &mut ChaCha8Rng| -> Vec<f32> {
                (0..len).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect()
            };
            let hidden = normal(gen_len * layers * 3, &mut rng);
            let mut activation = normal(gen_len * layers * 5, &mut rng);
            if rng.random_bool(0.2) {
                // an all-negative map exercises the ln m convention
                activation[..5].iter_mut().for_each(|x| *x = -x.abs() - 0.1);
            }
            let logits = (0..gen_len * layers).map(|_| random_logits(&mut rng, 12, 4)).collect();
            let halu = rng.random_bool(0.5);
            let spans = if halu && gen_len > 1 && rng.random_bool(0.5) {
                vec![Span::new(gen_len - 1, gen_len)]
            } else {
                vec![]
            };
            set.traces.push(InferenceTrace {
                trace_id: format!("o{}", set.traces.len()),
                prompt_len,
                gen_len,
                shape,
                attention: Some(att),
                hidden: Some(hidden),
                activation: Some(activation),
                logits: Some(logits),
                label: if halu { TraceLabel::Hallucinated } else { TraceLabel::Factual },
                problematic_spans: spans,
            });
        }
        left -= set.traces.len();
        sets.push(set);
    }
    sets
}
