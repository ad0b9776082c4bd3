//! Internal-state features computed from a trace.
//!
//! Attention features work on one `(token, layer, head)` row; activation
//! features on one `(token, layer)` activation map; logit features on a
//! token unit at one layer. All computation is in f64 over the stored f32
//! values. Logs are natural.

mod table;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{InferenceTrace, LogitStats, Section, Span};

pub(crate) use table::unit_vector;
pub use table::{
    extract_feature_table, read_feature_table, Aggregation, FeatureConfig, FeatureDescriptor, FeatureRow,
    FeatureTable, HeadGranularity, KeyTokenMask,
};

pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureId {
    LookbackRatio,
    AttentionEntropy,
    KeyTokenRatio,
    HiddenState,
    ActivationMapDiff,
    ActivationEntropy,
    MinTokenProb,
    MaxTokenRank,
    JointTokenProb,
    AvgJsd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureGroup {
    Attention,
    Activation,
    Logit,
}

impl FeatureId {
    pub const ALL: [FeatureId; 10] = [
        FeatureId::LookbackRatio,
        FeatureId::AttentionEntropy,
        FeatureId::KeyTokenRatio,
        FeatureId::HiddenState,
        FeatureId::ActivationMapDiff,
        FeatureId::ActivationEntropy,
        FeatureId::MinTokenProb,
        FeatureId::MaxTokenRank,
        FeatureId::JointTokenProb,
        FeatureId::AvgJsd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureId::LookbackRatio => "lookback_ratio",
            FeatureId::AttentionEntropy => "attention_entropy",
            FeatureId::KeyTokenRatio => "key_token_ratio",
            FeatureId::HiddenState => "hidden_state",
            FeatureId::ActivationMapDiff => "activation_map_diff",
            FeatureId::ActivationEntropy => "activation_entropy",
            FeatureId::MinTokenProb => "min_token_prob",
            FeatureId::MaxTokenRank => "max_token_rank",
            FeatureId::JointTokenProb => "joint_token_prob",
            FeatureId::AvgJsd => "avg_jsd",
        }
    }

    pub fn section(self) -> Section {
        match self.group() {
            FeatureGroup::Attention => Section::Attention,
            FeatureGroup::Logit => Section::Logit,
            FeatureGroup::Activation if self == FeatureId::HiddenState => Section::Hidden,
            FeatureGroup::Activation => Section::Activation,
        }
    }

    pub fn group(self) -> FeatureGroup {
        match self {
            FeatureId::LookbackRatio | FeatureId::AttentionEntropy | FeatureId::KeyTokenRatio => {
                FeatureGroup::Attention
            }
            FeatureId::HiddenState | FeatureId::ActivationMapDiff | FeatureId::ActivationEntropy => {
                FeatureGroup::Activation
            }
            _ => FeatureGroup::Logit,
        }
    }

    /// Whether the feature is computed per token and averaged within a unit
    /// (as opposed to being defined on the unit directly).
    pub fn is_per_token(self) -> bool {
        !matches!(
            self,
            FeatureId::MinTokenProb | FeatureId::MaxTokenRank | FeatureId::JointTokenProb | FeatureId::AvgJsd
        )
    }

    /// Sign of the shift a hallucinated unit shows relative to a factual
    /// one under the synthetic generator's planted effects.
    pub fn halu_direction(self) -> f64 {
        match self {
            FeatureId::LookbackRatio
            | FeatureId::AttentionEntropy
            | FeatureId::KeyTokenRatio
            | FeatureId::ActivationEntropy
            | FeatureId::MinTokenProb
            | FeatureId::JointTokenProb => -1.0,
            _ => 1.0,
        }
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureId::ALL
            .into_iter()
            .find(|f| f.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown feature '{s}'")))
    }
}

/// Parses `all` or a comma list of feature names.
pub fn parse_feature_list(s: &str) -> Result<Vec<FeatureId>> {
    if s.trim() == "all" {
        return Ok(FeatureId::ALL.to_vec());
    }
    let mut out: Vec<FeatureId> = s
        .split(',')
        .filter(|x| !x.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(Error::Config("empty feature list".into()));
    }
    Ok(out)
}

fn row_sum(row: &[f32]) -> f64 {
    row.iter().map(|&a| a as f64).sum()
}

fn nonzero_total(total: f64, what: &str) -> Result<f64> {
    if total > 0.0 && total.is_finite() {
        Ok(total)
    } else {
        Err(Error::Undefined(format!("{what} has zero total mass")))
    }
}

/// Share of the row's mass on positions strictly before the generating
/// token; the denominator includes the token itself.
pub fn lookback_ratio(trace: &InferenceTrace, t: usize, l: usize, h: usize) -> Result<f64> {
    let row = trace.attention_row(t, l, h)?;
    let total = nonzero_total(row_sum(row), "attention row")?;
    let (prev, _own) = row.split_at(row.len() - 1);
    Ok(row_sum(prev) / total)
}

/// Shannon entropy of `weights` after renormalization; terms with
/// probability `<= eps` contribute nothing.
pub fn entropy_of(weights: impl Iterator<Item = f64> + Clone, eps: f64) -> Option<f64> {
    let total: f64 = weights.clone().sum();
    if !(total > 0.0 && total.is_finite()) {
        return None;
    }
    let h = weights
        .map(|w| w / total)
        .filter(|&p| p > eps)
        .map(|p| -p * p.ln())
        .sum::<f64>();
    Some(h.max(0.0))
}

pub fn attention_entropy(trace: &InferenceTrace, t: usize, l: usize, h: usize, eps: f64) -> Result<f64> {
    let row = trace.attention_row(t, l, h)?;
    entropy_of(row.iter().map(|&a| a as f64), eps)
        .ok_or_else(|| Error::Undefined("attention row has zero total mass".into()))
}

/// Attention mass on `mask` positions over total row mass. `mask` must be
/// strictly increasing and inside the attended range; an empty mask gives 0.
pub fn key_token_ratio(trace: &InferenceTrace, t: usize, l: usize, h: usize, mask: &[usize]) -> Result<f64> {
    let row = trace.attention_row(t, l, h)?;
    if mask.is_empty() {
        return Ok(0.0);
    }
    if mask.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("key-token mask must be strictly increasing".into()));
    }
    if let Some(&last) = mask.last() {
        if last >= row.len() {
            return Err(Error::Bounds(format!(
                "key-token position {last} outside {} attended positions",
                row.len()
            )));
        }
    }
    let total = nonzero_total(row_sum(row), "attention row")?;
    Ok(mask.iter().map(|&i| row[i] as f64).sum::<f64>() / total)
}

/// Ratio of mass on the prompt positions; the default key-token mask.
pub(crate) fn prompt_mass_ratio(trace: &InferenceTrace, t: usize, l: usize, h: usize) -> Result<f64> {
    let row = trace.attention_row(t, l, h)?;
    let total = nonzero_total(row_sum(row), "attention row")?;
    Ok(row_sum(&row[..trace.prompt_len]) / total)
}

/// Last-layer hidden state for token `t`.
pub fn hidden_state_feature(trace: &InferenceTrace, t: usize) -> Result<Vec<f64>> {
    let last = trace.shape.layers - 1;
    Ok(trace.hidden_vec(t, last)?.iter().map(|&x| x as f64).collect())
}

/// Entropy of the activation map after clipping negatives to zero. A map
/// with no positive entries returns `ln m`.
pub fn activation_entropy(trace: &InferenceTrace, t: usize, l: usize, eps: f64) -> Result<f64> {
    let act = trace.activation_vec(t, l)?;
    let clipped = act.iter().map(|&a| (a as f64).max(0.0));
    Ok(entropy_of(clipped, eps).unwrap_or_else(|| (act.len() as f64).ln()))
}

/// `||a_t - a_{t-1}||_2 / sqrt(m)` at layer `l`; undefined for `t = 0`.
pub fn activation_map_diff(trace: &InferenceTrace, t: usize, l: usize) -> Result<f64> {
    if t == 0 {
        return Err(Error::Undefined("activation map difference for the first token".into()));
    }
    let cur = trace.activation_vec(t, l)?;
    let prev = trace.activation_vec(t - 1, l)?;
    let sq: f64 = cur
        .iter()
        .zip(prev)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok((sq / cur.len() as f64).sqrt())
}

fn unit_stats<'a>(trace: &'a InferenceTrace, unit: &Span, l: usize) -> Result<Vec<&'a LogitStats>> {
    if unit.is_empty() {
        return Err(Error::Config("empty token unit".into()));
    }
    (unit.start..unit.end).map(|t| trace.logit_stats(t, l)).collect()
}

pub fn min_token_prob(trace: &InferenceTrace, unit: &Span, l: usize) -> Result<f64> {
    Ok(unit_stats(trace, unit, l)?
        .iter()
        .map(|s| s.chosen_prob as f64)
        .fold(f64::INFINITY, f64::min))
}

pub fn max_token_rank(trace: &InferenceTrace, unit: &Span, l: usize) -> Result<u32> {
    Ok(unit_stats(trace, unit, l)?
        .iter()
        .map(|s| s.chosen_rank)
        .max()
        .unwrap_or(1))
}

/// Log of the product of chosen-token probabilities over the unit.
pub fn joint_token_prob(trace: &InferenceTrace, unit: &Span, l: usize, eps: f64) -> Result<f64> {
    Ok(unit_stats(trace, unit, l)?
        .iter()
        .map(|s| (s.chosen_prob as f64).max(eps).ln())
        .sum::<f64>()
        .min(0.0))
}

/// Jensen-Shannon divergence between two truncated distributions. Each is
/// supported on the union of both top-K id sets plus one bucket holding its
/// own tail mass; an id outside a distribution's top-K gets 0 there.
pub fn truncated_jsd(a: &LogitStats, b: &LogitStats) -> f64 {
    let mut pa: Vec<(u32, f64)> = a.topk_ids.iter().zip(&a.topk_probs).map(|(&i, &p)| (i, p as f64)).collect();
    let mut pb: Vec<(u32, f64)> = b.topk_ids.iter().zip(&b.topk_probs).map(|(&i, &p)| (i, p as f64)).collect();
    pa.sort_by_key(|e| e.0);
    pb.sort_by_key(|e| e.0);

    let term = |p: f64, q: f64| -> f64 {
        let m = 0.5 * (p + q);
        let mut s = 0.0;
        if p > 0.0 {
            s += p * (p / m).ln();
        }
        if q > 0.0 {
            s += q * (q / m).ln();
        }
        0.5 * s
    };

    let (mut i, mut j, mut js) = (0, 0, 0.0);
    while i < pa.len() || j < pb.len() {
        match (pa.get(i), pb.get(j)) {
            (Some(x), Some(y)) if x.0 == y.0 => {
                js += term(x.1, y.1);
                i += 1;
                j += 1;
            }
            (Some(x), Some(y)) if x.0 < y.0 => {
                js += term(x.1, 0.0);
                i += 1;
            }
            (Some(x), None) => {
                js += term(x.1, 0.0);
                i += 1;
            }
            (_, Some(y)) => {
                js += term(0.0, y.1);
                j += 1;
            }
            (None, None) => unreachable!(),
        }
    }
    js += term(a.tail_mass as f64, b.tail_mass as f64);
    js.clamp(0.0, std::f64::consts::LN_2)
}

/// Mean JSD between layer `l` and the final layer over the unit's tokens.
pub fn avg_jsd(trace: &InferenceTrace, unit: &Span, l: usize) -> Result<f64> {
    let last = trace.shape.layers - 1;
    let here = unit_stats(trace, unit, l)?;
    if l == last {
        return Ok(0.0);
    }
    let fin = unit_stats(trace, unit, last)?;
    let total: f64 = here.iter().zip(&fin).map(|(a, b)| truncated_jsd(a, b)).sum();
    Ok(total / unit.len() as f64)
}
