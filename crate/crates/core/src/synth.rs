//! Seeded synthetic trace sets with planted hallucination effects.
//!
//! Every quantity is a deterministic "profile" perturbed by noise. With all
//! noise switched off the profile values are exact, which is what
//! [`expected_separation`] computes from.
//!
//! Attention row of length `n`: the token itself gets mass `s`, one randomly
//! chosen earlier position gets an extra share `c` of the remaining mass,
//! and the rest is spread uniformly. Hallucinated tokens raise `s` by
//! `lookback_delta` and `c` by `entropy_delta`.
//!
//! Logit lens: the chosen token sits at rank `r` with probability `p`; the
//! `r - 1` tokens above split part of the free mass evenly, the remainder
//! decays geometrically below. Hallucinated tokens lower `p` by
//! `minprob_delta`, raise `r` by `rank_delta`, and at non-final layers swap
//! a `jsd_delta` share of the below-ids for fresh ids.
//!
//! Activations: a block of active neurons at level 1 and a resting block at
//! `inactive_level`; hallucinated tokens scale the resting block by
//! `1 - activation_delta` and add an alternating `activation_jitter`
//! pattern to the active block. Hidden states are zero-mean noise with a
//! last-layer shift of norm `hidden_shift` along the all-ones direction.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureId;
use crate::trace::{InferenceTrace, LogitStats, Section, Span, TraceLabel, TraceMeta, TraceSet};

/// Share of the free logit mass given to tokens ranked above the chosen one.
const ABOVE_SHARE: f64 = 0.5;
/// Upper bound on `rank * chosen_prob`, leaving room for the other tokens.
const RANK_MASS_CAP: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Effects {
    pub lookback_delta: f64,
    pub entropy_delta: f64,
    pub minprob_delta: f64,
    pub rank_delta: u32,
    pub hidden_shift: f64,
    pub activation_delta: f64,
    pub activation_jitter: f64,
    pub jsd_delta: f64,
}

impl Default for Effects {
    fn default() -> Self {
        Effects {
            lookback_delta: 0.0,
            entropy_delta: 0.0,
            minprob_delta: 0.0,
            rank_delta: 0,
            hidden_shift: 0.0,
            activation_delta: 0.0,
            activation_jitter: 0.0,
            jsd_delta: 0.0,
        }
    }
}

impl Effects {
    /// Moderate effects on every feature.
    pub fn moderate() -> Self {
        Effects {
            lookback_delta: 0.08,
            entropy_delta: 0.15,
            minprob_delta: 0.15,
            rank_delta: 1,
            hidden_shift: 1.0,
            activation_delta: 0.3,
            activation_jitter: 0.2,
            jsd_delta: 0.5,
        }
    }

    /// Effects that only the given feature responds to directly.
    pub fn only(feature: FeatureId, size: f64) -> Self {
        let mut e = Effects::default();
        match feature {
            FeatureId::LookbackRatio | FeatureId::KeyTokenRatio => e.lookback_delta = size,
            FeatureId::AttentionEntropy => e.entropy_delta = size,
            FeatureId::HiddenState => e.hidden_shift = size,
            FeatureId::ActivationEntropy => e.activation_delta = size,
            FeatureId::ActivationMapDiff => e.activation_jitter = size,
            FeatureId::MinTokenProb | FeatureId::JointTokenProb => e.minprob_delta = size,
            FeatureId::MaxTokenRank => e.rank_delta = size.round() as u32,
            FeatureId::AvgJsd => e.jsd_delta = size,
        }
        e
    }
}

/// Resting profile every token starts from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseProfile {
    /// Attention mass on the token itself; `None` means uniform rows.
    pub self_mass: Option<f64>,
    pub focus: f64,
    pub chosen_prob: f64,
    /// Fraction of FFN neurons in the active block.
    pub active_fraction: f64,
    pub inactive_level: f64,
}

impl Default for BaseProfile {
    fn default() -> Self {
        BaseProfile {
            self_mass: Some(0.3),
            focus: 0.2,
            chosen_prob: 0.6,
            active_fraction: 0.5,
            inactive_level: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SpanMode {
    WholeResponse,
    /// One span of `span_len` tokens per hallucinated response, never
    /// touching the first or last token.
    LocalizedSpans { span_len: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub dataset_name: String,
    pub n_traces: usize,
    /// Inclusive range.
    pub prompt_len: (usize, usize),
    /// Inclusive range.
    pub gen_len: (usize, usize),
    pub meta: TraceMeta,
    pub halu_fraction: f64,
    pub effects: Effects,
    /// Per-entry noise scale.
    pub noise_sigma: f64,
    /// Per-trace baseline jitter shared by all tokens of a response.
    pub trace_sigma: f64,
    pub span_mode: SpanMode,
    /// Layers carrying the attention and logit effects; `None` = all.
    pub effect_layers: Option<Vec<usize>>,
    pub base: BaseProfile,
}

pub fn default_meta() -> TraceMeta {
    TraceMeta {
        model_name: "synthetic".into(),
        num_layers: 4,
        num_heads: 4,
        hidden_dim: 16,
        ffn_dim: 32,
        vocab_size: 1000,
        topk: 8,
        sections_present: Section::ALL.into_iter().collect(),
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dataset_name: "synth".into(),
            n_traces: 100,
            prompt_len: (8, 16),
            gen_len: (8, 16),
            meta: default_meta(),
            halu_fraction: 0.5,
            effects: Effects::default(),
            noise_sigma: 0.3,
            trace_sigma: 0.0,
            span_mode: SpanMode::WholeResponse,
            effect_layers: None,
            base: BaseProfile::default(),
        }
    }
}

impl SynthConfig {
    pub fn effect_layer_set(&self) -> BTreeSet<usize> {
        match &self.effect_layers {
            Some(v) => v.iter().copied().collect(),
            None => (0..self.meta.num_layers).collect(),
        }
    }

    fn active_count(&self) -> usize {
        ((self.base.active_fraction * self.meta.ffn_dim as f64).round() as usize).clamp(1, self.meta.ffn_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.meta.validate()?;
        if self.n_traces == 0 {
            return bad("n_traces must be >= 1".into());
        }
        let (pa, pb) = self.prompt_len;
        let (ga, gb) = self.gen_len;
        if pa < 1 || pa > pb || ga < 1 || ga > gb {
            return bad("length ranges must satisfy 1 <= min <= max".into());
        }
        if !(0.0..=1.0).contains(&self.halu_fraction) {
            return bad("halu_fraction outside [0,1]".into());
        }
        if !(self.noise_sigma >= 0.0 && self.trace_sigma >= 0.0) {
            return bad("noise scales must be >= 0".into());
        }
        let e = &self.effects;
        let b = &self.base;
        let nonneg = [
            ("lookback_delta", e.lookback_delta),
            ("entropy_delta", e.entropy_delta),
            ("minprob_delta", e.minprob_delta),
            ("hidden_shift", e.hidden_shift),
            ("activation_delta", e.activation_delta),
            ("activation_jitter", e.activation_jitter),
            ("jsd_delta", e.jsd_delta),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0"));
            }
        }
        let max_self = b.self_mass.unwrap_or(1.0 / (pa + 1) as f64) + e.lookback_delta;
        if let Some(s) = b.self_mass {
            if !(0.0..=1.0).contains(&s) {
                return bad("base self_mass outside [0,1]".into());
            }
        }
        if max_self > 1.0 {
            return bad(format!(
                "lookback_delta {} leaves negative attention mass for earlier tokens",
                e.lookback_delta
            ));
        }
        if !(0.0..=1.0).contains(&b.focus) || b.focus + e.entropy_delta > 1.0 {
            return bad("focus + entropy_delta must lie in [0,1]".into());
        }
        if !(b.chosen_prob > 0.0 && b.chosen_prob <= 1.0) || b.chosen_prob - e.minprob_delta <= 0.0 {
            return bad("chosen_prob - minprob_delta must lie in (0,1]".into());
        }
        if !(b.active_fraction > 0.0 && b.active_fraction <= 1.0) || !(0.0..=1.0).contains(&b.inactive_level) {
            return bad("active_fraction must lie in (0,1] and inactive_level in [0,1]".into());
        }
        if e.activation_delta > 1.0 {
            return bad("activation_delta must be <= 1".into());
        }
        if e.activation_jitter >= 1.0 {
            return bad("activation_jitter must be < 1 so active neurons stay positive".into());
        }
        if e.jsd_delta > 1.0 {
            return bad("jsd_delta must be <= 1".into());
        }
        let listed = e.rank_delta as usize + 2 + 2 * self.meta.topk;
        if self.meta.has(Section::Logit) && listed > self.meta.vocab_size {
            return bad(format!("vocab_size must be at least {listed} for these effects"));
        }
        if let Some(layers) = &self.effect_layers {
            if layers.iter().any(|&l| l >= self.meta.num_layers) {
                return bad("effect layer out of range".into());
            }
        }
        if let SpanMode::LocalizedSpans { span_len } = self.span_mode {
            if span_len == 0 || ga < span_len + 2 {
                return bad(format!(
                    "localized spans of {span_len} tokens need gen_len >= {} and span_len >= 1",
                    span_len + 2
                ));
            }
        }
        Ok(())
    }
}

/// Noise-free attention row weights for a row of `n` positions:
/// `(self, focus, each other earlier position)`.
pub(crate) fn attention_profile(n: usize, self_mass: f64, focus: f64) -> (f64, f64, f64) {
    let prev = (n - 1) as f64;
    let rest = 1.0 - self_mass;
    let other = rest * (1.0 - focus) / prev;
    (self_mass, rest * focus + other, other)
}

/// Noise-free ranked probabilities: `r - 1` above entries, the chosen one,
/// then `k` geometrically decaying below entries; returns
/// `(entries, chosen_index, unlisted tail mass)`.
pub(crate) fn logit_profile(chosen_prob: f64, rank: usize, k: usize) -> (Vec<f64>, usize, f64) {
    let p = chosen_prob.min(RANK_MASS_CAP / rank as f64);
    let free = 1.0 - rank as f64 * p;
    let mut entries = Vec::with_capacity(rank + k);
    let below_mass = if rank > 1 {
        let a = p + free * ABOVE_SHARE / (rank - 1) as f64;
        entries.extend(std::iter::repeat_n(a, rank - 1));
        free * (1.0 - ABOVE_SHARE)
    } else {
        free
    };
    entries.push(p);
    let ratio = if below_mass > 0.0 {
        (1.0 - 0.95 * p / below_mass).max(0.5)
    } else {
        0.5
    };
    let mut w = below_mass * (1.0 - ratio);
    for _ in 0..k {
        entries.push(w);
        w *= ratio;
    }
    let tail = below_mass * ratio.powi(k as i32);
    (entries, rank - 1, tail)
}

/// Noise-free activation map of width `m` with `active` leading neurons.
pub(crate) fn activation_profile(m: usize, active: usize, resting: f64, jitter: f64, t: usize) -> Vec<f64> {
    let sign = if t.is_multiple_of(2) { 1.0 } else { -1.0 };
    (0..m)
        .map(|j| {
            if j < active {
                let alt = if j % 2 == 0 { 1.0 } else { -1.0 };
                1.0 + jitter * sign * alt
            } else {
                resting
            }
        })
        .collect()
}

struct TokenPlan {
    affected: bool,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn lognormal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        (sigma * normal(rng)).exp()
    } else {
        1.0
    }
}

fn generate_trace(config: &SynthConfig, seed: u64, index: usize) -> InferenceTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let meta = &config.meta;
    let (layers, heads) = (meta.num_layers, meta.num_heads);
    let effects = &config.effects;
    let base = &config.base;
    let effect_layers = config.effect_layer_set();
    let (sigma, tau) = (config.noise_sigma, config.trace_sigma);

    let halu = rng.random::<f64>() < config.halu_fraction;
    let prompt_len = rng.random_range(config.prompt_len.0..=config.prompt_len.1);
    let gen_len = rng.random_range(config.gen_len.0..=config.gen_len.1);

    let mut spans = Vec::new();
    let plan: Vec<TokenPlan> = match (halu, config.span_mode) {
        (false, _) => (0..gen_len).map(|_| TokenPlan { affected: false }).collect(),
        (true, SpanMode::WholeResponse) => (0..gen_len).map(|_| TokenPlan { affected: true }).collect(),
        (true, SpanMode::LocalizedSpans { span_len }) => {
            let start = rng.random_range(1..=gen_len - span_len - 1);
            let span = Span::new(start, start + span_len);
            spans.push(span);
            (0..gen_len).map(|t| TokenPlan { affected: span.contains(t) }).collect()
        }
    };
    let hit = |t: usize, l: usize| plan[t].affected && effect_layers.contains(&l);

    // per-response baselines
    let self_jitter = lognormal(&mut rng, tau);
    let prob_jitter = lognormal(&mut rng, tau);
    let resting_jitter = lognormal(&mut rng, tau);
    let hidden_offset: Vec<f64> = (0..meta.hidden_dim).map(|_| tau * normal(&mut rng)).collect();

    let attention = meta.has(Section::Attention).then(|| {
        let mut att = Vec::with_capacity(crate::trace::attention_len(prompt_len, gen_len, layers, heads));
        for t in 0..gen_len {
            let n = prompt_len + t + 1;
            for l in 0..layers {
                let on = hit(t, l);
                let s = base.self_mass.unwrap_or(1.0 / n as f64) + if on { effects.lookback_delta } else { 0.0 };
                let c = base.focus + if on { effects.entropy_delta } else { 0.0 };
                let (w_self, w_focus, w_other) = attention_profile(n, s, c);
                for _ in 0..heads {
                    let focus = rng.random_range(0..n - 1);
                    let mut row: Vec<f64> = (0..n)
                        .map(|i| {
                            let w = if i == n - 1 {
                                w_self * self_jitter
                            } else if i == focus {
                                w_focus
                            } else {
                                w_other
                            };
                            w * lognormal(&mut rng, sigma)
                        })
                        .collect();
                    let total: f64 = row.iter().sum();
                    row.iter_mut().for_each(|w| *w /= total);
                    att.extend(row.into_iter().map(|w| w as f32));
                }
            }
        }
        att
    });

    let hidden = meta.has(Section::Hidden).then(|| {
        let d = meta.hidden_dim;
        let unit = 1.0 / (d as f64).sqrt();
        let mut out = Vec::with_capacity(gen_len * layers * d);
        for step in plan.iter().take(gen_len) {
            for l in 0..layers {
                let shift = if step.affected && l == layers - 1 {
                    effects.hidden_shift * unit
                } else {
                    0.0
                };
                for off in &hidden_offset {
                    out.push((shift + off + sigma * normal(&mut rng)) as f32);
                }
            }
        }
        out
    });

    let activation = meta.has(Section::Activation).then(|| {
        let m = meta.ffn_dim;
        let active = config.active_count();
        let mut out = Vec::with_capacity(gen_len * layers * m);
        for (t, step) in plan.iter().enumerate().take(gen_len) {
            for _l in 0..layers {
                let affected = step.affected;
                let resting = base.inactive_level
                    * resting_jitter
                    * if affected { 1.0 - effects.activation_delta } else { 1.0 };
                let jitter = if affected { effects.activation_jitter } else { 0.0 };
                for v in activation_profile(m, active, resting, jitter, t) {
                    out.push((v + sigma * normal(&mut rng)) as f32);
                }
            }
        }
        out
    });

    let logits = meta.has(Section::Logit).then(|| {
        let k = meta.topk;
        let mut out = Vec::with_capacity(gen_len * layers);
        for t in 0..gen_len {
            // ids: chosen, up to rank_delta above, 2k below/fresh candidates
            let need = 1 + effects.rank_delta as usize + 2 * k;
            let ids: Vec<u32> = sample(&mut rng, meta.vocab_size, need).into_iter().map(|i| i as u32).collect();
            for l in 0..layers {
                let on = hit(t, l);
                let rank = 1 + if on { effects.rank_delta as usize } else { 0 };
                let p = (base.chosen_prob - if on { effects.minprob_delta } else { 0.0 }) * prob_jitter;
                let (probs, chosen, tail) = logit_profile(p.min(1.0), rank, k);
                let swaps = if on && l != layers - 1 {
                    (effects.jsd_delta * k as f64).round() as usize
                } else {
                    0
                };
                // entry order: above ids, chosen id, below ids
                let mut entry_ids = Vec::with_capacity(probs.len());
                entry_ids.extend_from_slice(&ids[1..rank]);
                entry_ids.push(ids[0]);
                for j in 0..k {
                    let below = 1 + effects.rank_delta as usize + j;
                    entry_ids.push(if j < swaps { ids[below + k] } else { ids[below] });
                }
                let mut noisy: Vec<(usize, f64)> = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| (i, w * lognormal(&mut rng, sigma)))
                    .collect();
                let noisy_tail = tail * lognormal(&mut rng, sigma);
                let total: f64 = noisy.iter().map(|e| e.1).sum::<f64>() + noisy_tail;
                noisy.iter_mut().for_each(|e| e.1 /= total);
                noisy.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                let pos = noisy.iter().position(|e| e.0 == chosen).unwrap_or(0);
                let topk_probs: Vec<f32> = noisy[..k].iter().map(|e| e.1 as f32).collect();
                let topk_sum: f64 = topk_probs.iter().map(|&x| x as f64).sum();
                out.push(LogitStats {
                    chosen_prob: noisy[pos].1 as f32,
                    chosen_rank: pos as u32 + 1,
                    topk_ids: noisy[..k].iter().map(|e| entry_ids[e.0]).collect(),
                    topk_probs,
                    tail_mass: (1.0 - topk_sum).max(0.0) as f32,
                });
            }
        }
        out
    });

    InferenceTrace {
        trace_id: format!("{}-{index:06}", config.dataset_name),
        prompt_len,
        gen_len,
        shape: meta.shape(),
        attention,
        hidden,
        activation,
        logits,
        label: if halu { TraceLabel::Hallucinated } else { TraceLabel::Factual },
        problematic_spans: spans,
    }
}

/// Generates `config.n_traces` traces. Trace `i` draws from its own stream
/// derived from `(seed, i)`, so output is independent of thread count.
pub fn generate(config: &SynthConfig, seed: u64) -> Result<TraceSet> {
    config.validate()?;
    let traces: Vec<InferenceTrace> = (0..config.n_traces)
        .into_par_iter()
        .map(|i| generate_trace(config, seed, i))
        .collect();
    Ok(TraceSet {
        meta: config.meta.clone(),
        traces,
        dataset_name: config.dataset_name.clone(),
    })
}

fn profile_entropy(weights: &[(f64, f64)]) -> f64 {
    // (weight, multiplicity)
    let total: f64 = weights.iter().map(|(w, c)| w * c).sum();
    weights
        .iter()
        .filter(|(w, _)| *w > 0.0)
        .map(|(w, c)| {
            let p = w / total;
            -c * p * p.ln()
        })
        .sum()
}

/// Noise-free per-token value of `feature` at `layer` (head-mean for
/// attention; projection on the shift direction for hidden states).
fn profile_value(config: &SynthConfig, feature: FeatureId, prompt_len: usize, t: usize, layer: usize, halu: bool) -> f64 {
    let e = &config.effects;
    let b = &config.base;
    let on = halu && config.effect_layer_set().contains(&layer);
    let n = prompt_len + t + 1;
    let s = b.self_mass.unwrap_or(1.0 / n as f64) + if on { e.lookback_delta } else { 0.0 };
    let c = b.focus + if on { e.entropy_delta } else { 0.0 };
    let rank = 1 + if on { e.rank_delta as usize } else { 0 };
    let p = b.chosen_prob - if on { e.minprob_delta } else { 0.0 };
    let capped = p.min(RANK_MASS_CAP / rank as f64);
    match feature {
        FeatureId::LookbackRatio => 1.0 - s,
        FeatureId::AttentionEntropy => {
            let (ws, wf, wo) = attention_profile(n, s, c);
            profile_entropy(&[(ws, 1.0), (wf, 1.0), (wo, (n - 2) as f64)])
        }
        // focus position is uniform over earlier positions
        FeatureId::KeyTokenRatio => (1.0 - s) * prompt_len as f64 / (n - 1) as f64,
        FeatureId::HiddenState => {
            if halu {
                e.hidden_shift
            } else {
                0.0
            }
        }
        FeatureId::ActivationEntropy | FeatureId::ActivationMapDiff => {
            let m = config.meta.ffn_dim;
            let active = config.active_count();
            let resting = b.inactive_level * if halu { 1.0 - e.activation_delta } else { 1.0 };
            let jitter = if halu { e.activation_jitter } else { 0.0 };
            if feature == FeatureId::ActivationEntropy {
                let map = activation_profile(m, active, resting, jitter, t);
                let w: Vec<(f64, f64)> = map.into_iter().map(|v| (v, 1.0)).collect();
                profile_entropy(&w)
            } else if t == 0 {
                0.0
            } else {
                // consecutive maps differ by the flipped jitter on active neurons
                2.0 * jitter * (active as f64 / m as f64).sqrt()
            }
        }
        FeatureId::MinTokenProb => capped,
        FeatureId::JointTokenProb => capped.ln(),
        FeatureId::MaxTokenRank => rank as f64,
        FeatureId::AvgJsd => {
            let last = config.meta.num_layers - 1;
            if layer == last || !on {
                return 0.0;
            }
            let k = config.meta.topk;
            // a final layer carrying different rank/prob effects is not covered
            let (probs, chosen, _) = logit_profile(capped, rank, k);
            let swaps = (e.jsd_delta * k as f64).round() as usize;
            let swapped_in_topk: f64 = probs[chosen + 1..]
                .iter()
                .enumerate()
                .filter(|(j, _)| *j < swaps && chosen + 1 + j < k)
                .map(|(_, w)| w)
                .sum();
            swapped_in_topk * std::f64::consts::LN_2
        }
    }
}

/// Expected cohort gap of `feature` under per-token units with noise off,
/// oriented so a planted effect gives a positive value. Layered features
/// average over the effect layers (JSD excludes the final layer); the hidden
/// state is projected onto the planted shift direction.
pub fn expected_separation(config: &SynthConfig, feature: FeatureId) -> Result<f64> {
    config.validate()?;
    if config.span_mode != SpanMode::WholeResponse {
        return Err(Error::Config("expected_separation is defined for whole-response sets".into()));
    }
    let last = config.meta.num_layers - 1;
    let layers: Vec<usize> = match feature {
        FeatureId::HiddenState => vec![last],
        FeatureId::ActivationEntropy | FeatureId::ActivationMapDiff => vec![0],
        FeatureId::AvgJsd => config.effect_layer_set().into_iter().filter(|&l| l != last).collect(),
        _ => config.effect_layer_set().into_iter().collect(),
    };
    if layers.is_empty() {
        return Ok(0.0);
    }
    if feature == FeatureId::AvgJsd && config.effect_layer_set().contains(&last)
        && (config.effects.rank_delta > 0 || config.effects.minprob_delta > 0.0)
    {
        return Err(Error::Config(
            "JSD gap has no closed form when the final layer carries rank/prob effects".into(),
        ));
    }
    let (mut sum, mut count) = (0.0, 0.0);
    for prompt_len in config.prompt_len.0..=config.prompt_len.1 {
        for gen_len in config.gen_len.0..=config.gen_len.1 {
            // the map difference is undefined at the first token
            let first = usize::from(feature == FeatureId::ActivationMapDiff);
            for t in first..gen_len {
                for &l in &layers {
                    let h = profile_value(config, feature, prompt_len, t, l, true);
                    let f = profile_value(config, feature, prompt_len, t, l, false);
                    sum += h - f;
                    count += 1.0;
                }
            }
        }
    }
    if count == 0.0 {
        return Ok(0.0);
    }
    Ok(feature.halu_direction() * sum / count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_traces: 12,
            meta: TraceMeta {
                num_layers: 2,
                num_heads: 2,
                hidden_dim: 4,
                ffn_dim: 6,
                vocab_size: 64,
                topk: 4,
                ..default_meta()
            },
            effects: Effects::moderate(),
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generated_sets_validate() {
        let set = generate(&small(), 7).unwrap();
        assert_eq!(set.len(), 12);
        set.validate().unwrap();
        let mut cfg = small();
        cfg.span_mode = SpanMode::LocalizedSpans { span_len: 3 };
        cfg.gen_len = (6, 9);
        let set = generate(&cfg, 3).unwrap();
        set.validate().unwrap();
        for tr in &set.traces {
            match tr.label {
                TraceLabel::Hallucinated => {
                    assert_eq!(tr.problematic_spans.len(), 1);
                    let s = tr.problematic_spans[0];
                    assert!(s.start >= 1 && s.end < tr.gen_len && s.len() == 3);
                }
                _ => assert!(tr.problematic_spans.is_empty()),
            }
        }
    }

    #[test]
    fn zero_fraction_is_all_factual() {
        let mut cfg = small();
        cfg.halu_fraction = 0.0;
        let set = generate(&cfg, 1).unwrap();
        assert!(set.traces.iter().all(|t| t.label == TraceLabel::Factual && t.problematic_spans.is_empty()));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small(), 7).unwrap();
        let b = generate(&small(), 7).unwrap();
        let c = generate(&small(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn infeasible_effects_are_config_errors() {
        let mut cfg = small();
        cfg.effects.lookback_delta = 0.8;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = small();
        cfg.base.self_mass = None;
        cfg.prompt_len = (1, 4);
        cfg.effects.lookback_delta = 0.6;
        assert!(cfg.validate().is_err());
        let mut cfg = small();
        cfg.effects.minprob_delta = 0.6;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_effects_give_zero_gap() {
        let mut cfg = small();
        cfg.effects = Effects::default();
        for f in FeatureId::ALL {
            assert_eq!(expected_separation(&cfg, f).unwrap(), 0.0, "{f}");
        }
    }

    #[test]
    fn lookback_gap_is_the_delta() {
        let mut cfg = small();
        cfg.effects = Effects::only(FeatureId::LookbackRatio, 0.1);
        cfg.base.self_mass = None;
        let gap = expected_separation(&cfg, FeatureId::LookbackRatio).unwrap();
        assert!((gap - 0.1).abs() < 1e-12);
    }

    #[test]
    fn logit_profile_is_a_distribution() {
        for (p, r) in [(0.6, 1), (0.6, 6), (0.05, 1), (0.3, 3)] {
            let (probs, chosen, tail) = logit_profile(p, r, 8);
            let sum: f64 = probs.iter().sum::<f64>() + tail;
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(probs.windows(2).all(|w| w[0] >= w[1]), "{p} {r}: {probs:?}");
            assert_eq!(chosen, r - 1);
        }
    }
}
