use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    activation_entropy, activation_map_diff, attention_entropy, avg_jsd, hidden_state_feature, joint_token_prob,
    key_token_ratio, lookback_ratio, max_token_rank, min_token_prob, prompt_mass_ratio, FeatureId, DEFAULT_EPSILON,
};
use crate::error::{Error, Result};
use crate::selection::{enumerate_spans, training_label, SelectionStrategy};
use crate::trace::{InferenceTrace, Label, Span, TraceMeta, TraceSet};

const TABLE_MAGIC: &str = "HPFT1";
const TABLE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadGranularity {
    PerHead,
    LayerMean,
}

impl std::str::FromStr for HeadGranularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "per_head" => Ok(HeadGranularity::PerHead),
            "layer_mean" => Ok(HeadGranularity::LayerMean),
            other => Err(Error::Config(format!("unknown granularity '{other}' (per_head|layer_mean)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source", content = "positions")]
pub enum KeyTokenMask {
    PromptTokens,
    /// Absolute sequence positions; positions a step cannot attend to are
    /// dropped for that step.
    ExplicitMask(Vec<usize>),
}

/// How per-token features combine inside a unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    /// Only valid with the all-tokens strategy.
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub enabled_features: Vec<FeatureId>,
    pub head_granularity: HeadGranularity,
    pub key_token_mask: KeyTokenMask,
    pub epsilon: f64,
    pub aggregation: Aggregation,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig::new(FeatureId::ALL.to_vec())
    }
}

impl FeatureConfig {
    pub fn new(mut features: Vec<FeatureId>) -> Self {
        features.sort();
        features.dedup();
        FeatureConfig {
            enabled_features: features,
            head_granularity: HeadGranularity::LayerMean,
            key_token_mask: KeyTokenMask::PromptTokens,
            epsilon: DEFAULT_EPSILON,
            aggregation: Aggregation::Mean,
        }
    }

    pub fn with_granularity(mut self, g: HeadGranularity) -> Self {
        self.head_granularity = g;
        self
    }

    pub fn validate(&self, meta: &TraceMeta, strategy: SelectionStrategy) -> Result<()> {
        if self.enabled_features.is_empty() {
            return Err(Error::Config("no features enabled".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1e-3) {
            return Err(Error::Config(format!("epsilon {} outside (0, 1e-3)", self.epsilon)));
        }
        if self.aggregation == Aggregation::Max && strategy != SelectionStrategy::AllTokens {
            return Err(Error::Config("max aggregation is only available with the all-tokens strategy".into()));
        }
        let missing: Vec<&str> = self
            .enabled_features
            .iter()
            .filter(|f| !meta.has(f.section()))
            .map(|f| f.name())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "trace set lacks sections required by features: {}",
                missing.join(", ")
            )));
        }
        Ok(())
    }

    /// Column descriptors in output order.
    pub fn layout(&self, meta: &TraceMeta) -> Vec<FeatureDescriptor> {
        let mut out = Vec::new();
        for &f in &self.enabled_features {
            let d = |layer, head, dim| FeatureDescriptor { feature: f, layer, head, dim };
            match f {
                FeatureId::LookbackRatio | FeatureId::AttentionEntropy | FeatureId::KeyTokenRatio => {
                    for l in 0..meta.num_layers {
                        match self.head_granularity {
                            HeadGranularity::LayerMean => out.push(d(Some(l), None, None)),
                            HeadGranularity::PerHead => {
                                out.extend((0..meta.num_heads).map(|h| d(Some(l), Some(h), None)))
                            }
                        }
                    }
                }
                FeatureId::HiddenState => {
                    let last = meta.num_layers - 1;
                    out.extend((0..meta.hidden_dim).map(|k| d(Some(last), None, Some(k))));
                }
                _ => out.extend((0..meta.num_layers).map(|l| d(Some(l), None, None))),
            }
        }
        out
    }
}

/// Identifies one column of a feature vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub feature: FeatureId,
    pub layer: Option<usize>,
    pub head: Option<usize>,
    pub dim: Option<usize>,
}

impl fmt::Display for FeatureDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.feature.name())?;
        if let Some(l) = self.layer {
            write!(f, "/l{l}")?;
        }
        if let Some(h) = self.head {
            write!(f, "/h{h}")?;
        }
        if let Some(d) = self.dim {
            write!(f, "/d{d}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub trace_id: String,
    pub unit: Span,
    pub label: Option<Label>,
    #[serde(skip)]
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub layout: Vec<FeatureDescriptor>,
    pub strategy: SelectionStrategy,
    pub dataset_name: String,
    pub rows: Vec<FeatureRow>,
}

fn aggregate(values: impl Iterator<Item = Result<f64>>, agg: Aggregation) -> Result<f64> {
    let (mut acc, mut n) = (match agg {
        Aggregation::Mean => 0.0,
        Aggregation::Max => f64::NEG_INFINITY,
    }, 0usize);
    for v in values {
        let v = v?;
        acc = match agg {
            Aggregation::Mean => acc + v,
            Aggregation::Max => acc.max(v),
        };
        n += 1;
    }
    Ok(match (agg, n) {
        (_, 0) => 0.0,
        (Aggregation::Mean, n) => acc / n as f64,
        (Aggregation::Max, _) => acc,
    })
}

fn attention_value(
    trace: &InferenceTrace,
    f: FeatureId,
    t: usize,
    l: usize,
    h: usize,
    config: &FeatureConfig,
) -> Result<f64> {
    match f {
        FeatureId::LookbackRatio => lookback_ratio(trace, t, l, h),
        FeatureId::AttentionEntropy => attention_entropy(trace, t, l, h, config.epsilon),
        FeatureId::KeyTokenRatio => match &config.key_token_mask {
            KeyTokenMask::PromptTokens => prompt_mass_ratio(trace, t, l, h),
            KeyTokenMask::ExplicitMask(pos) => {
                let n = trace.context_len(t);
                let mut mask: Vec<usize> = pos.iter().copied().filter(|&p| p < n).collect();
                mask.sort_unstable();
                mask.dedup();
                key_token_ratio(trace, t, l, h, &mask)
            }
        },
        _ => unreachable!("not an attention feature"),
    }
}

/// Feature vector of one unit, ordered as `config.layout(meta)`.
pub(crate) fn unit_vector(trace: &InferenceTrace, unit: &Span, config: &FeatureConfig) -> Result<Vec<f64>> {
    let shape = trace.shape;
    let agg = config.aggregation;
    let mut out = Vec::new();
    for &f in &config.enabled_features {
        match f {
            FeatureId::LookbackRatio | FeatureId::AttentionEntropy | FeatureId::KeyTokenRatio => {
                for l in 0..shape.layers {
                    let per_head = (0..shape.heads)
                        .map(|h| aggregate((unit.start..unit.end).map(|t| attention_value(trace, f, t, l, h, config)), agg))
                        .collect::<Result<Vec<f64>>>()?;
                    match config.head_granularity {
                        HeadGranularity::PerHead => out.extend(per_head),
                        HeadGranularity::LayerMean => {
                            out.push(per_head.iter().sum::<f64>() / shape.heads as f64)
                        }
                    }
                }
            }
            FeatureId::HiddenState => {
                let mut acc = vec![
                    match agg {
                        Aggregation::Mean => 0.0,
                        Aggregation::Max => f64::NEG_INFINITY,
                    };
                    shape.hidden_dim
                ];
                for t in unit.start..unit.end {
                    for (a, v) in acc.iter_mut().zip(hidden_state_feature(trace, t)?) {
                        *a = match agg {
                            Aggregation::Mean => *a + v,
                            Aggregation::Max => a.max(v),
                        };
                    }
                }
                if agg == Aggregation::Mean {
                    acc.iter_mut().for_each(|a| *a /= unit.len() as f64);
                }
                out.extend(acc);
            }
            FeatureId::ActivationEntropy => {
                for l in 0..shape.layers {
                    out.push(aggregate(
                        (unit.start..unit.end).map(|t| activation_entropy(trace, t, l, config.epsilon)),
                        agg,
                    )?);
                }
            }
            FeatureId::ActivationMapDiff => {
                // first response token has no predecessor; a unit made only of
                // it scores 0
                for l in 0..shape.layers {
                    out.push(aggregate(
                        (unit.start.max(1)..unit.end).map(|t| activation_map_diff(trace, t, l)),
                        agg,
                    )?);
                }
            }
            FeatureId::MinTokenProb => {
                for l in 0..shape.layers {
                    out.push(min_token_prob(trace, unit, l)?);
                }
            }
            FeatureId::MaxTokenRank => {
                for l in 0..shape.layers {
                    out.push(max_token_rank(trace, unit, l)? as f64);
                }
            }
            FeatureId::JointTokenProb => {
                for l in 0..shape.layers {
                    out.push(joint_token_prob(trace, unit, l, config.epsilon)?);
                }
            }
            FeatureId::AvgJsd => {
                for l in 0..shape.layers {
                    out.push(avg_jsd(trace, unit, l)?);
                }
            }
        }
    }
    if let Some(pos) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::Undefined(format!(
            "non-finite feature value at column {pos} for trace '{}'",
            trace.trace_id
        )));
    }
    Ok(out)
}

/// One row per selected unit per trace, in trace order then unit order.
pub fn extract_feature_table(
    set: &TraceSet,
    config: &FeatureConfig,
    strategy: SelectionStrategy,
) -> Result<FeatureTable> {
    config.validate(&set.meta, strategy)?;
    strategy.validate()?;
    let layout = config.layout(&set.meta);
    let per_trace: Vec<Vec<FeatureRow>> = set
        .traces
        .par_iter()
        .map(|trace| {
            enumerate_spans(trace.gen_len, strategy)?
                .into_iter()
                .map(|unit| {
                    Ok(FeatureRow {
                        trace_id: trace.trace_id.clone(),
                        unit,
                        label: training_label(trace, &unit, strategy).ok(),
                        values: unit_vector(trace, &unit, config)?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let rows: Vec<FeatureRow> = per_trace.into_iter().flatten().collect();
    debug_assert!(rows.iter().all(|r| r.values.len() == layout.len()));
    Ok(FeatureTable {
        layout,
        strategy,
        dataset_name: set.dataset_name.clone(),
        rows,
    })
}

impl FeatureTable {
    pub fn n_features(&self) -> usize {
        self.layout.len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Keeps only the columns belonging to `features`.
    pub fn project(&self, features: &[FeatureId]) -> FeatureTable {
        let keep: Vec<usize> = self
            .layout
            .iter()
            .enumerate()
            .filter(|(_, d)| features.contains(&d.feature))
            .map(|(i, _)| i)
            .collect();
        FeatureTable {
            layout: keep.iter().map(|&i| self.layout[i]).collect(),
            strategy: self.strategy,
            dataset_name: self.dataset_name.clone(),
            rows: self
                .rows
                .iter()
                .map(|r| FeatureRow {
                    values: keep.iter().map(|&i| r.values[i]).collect(),
                    ..r.clone()
                })
                .collect(),
        }
    }

    /// Rows whose trace id is in `ids`, order preserved.
    pub fn filter_traces(&self, ids: &HashSet<String>) -> FeatureTable {
        FeatureTable {
            layout: self.layout.clone(),
            strategy: self.strategy,
            dataset_name: self.dataset_name.clone(),
            rows: self.rows.iter().filter(|r| ids.contains(&r.trace_id)).cloned().collect(),
        }
    }

    /// Row indices grouped by trace, groups in first-appearance order.
    pub fn trace_groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, r) in self.rows.iter().enumerate() {
            match groups.last_mut() {
                Some((id, idx)) if *id == r.trace_id => idx.push(i),
                _ => groups.push((r.trace_id.clone(), vec![i])),
            }
        }
        groups
    }

    pub fn column_names(&self) -> Vec<String> {
        self.layout.iter().map(|d| d.to_string()).collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        let mut header = self.column_names();
        header.extend(["unit_start", "unit_end", "trace_id", "label"].map(String::from));
        out.push_str(&header.join(","));
        out.push('\n');
        for r in &self.rows {
            for v in &r.values {
                out.push_str(&v.to_string());
                out.push(',');
            }
            let label = r.label.map(Label::as_str).unwrap_or("");
            out.push_str(&format!("{},{},{},{}\n", r.unit.start, r.unit.end, csv_field(&r.trace_id), label));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Writes `features.csv`, `features.json` (layout and row keys) and
    /// `features.bin` (row-major binary32, little-endian) under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.write_csv(dir.join("features.csv"))?;
        let manifest = TableManifest {
            magic: TABLE_MAGIC.into(),
            format_version: TABLE_VERSION,
            dataset_name: self.dataset_name.clone(),
            strategy: self.strategy,
            layout: self.layout.clone(),
            rows: self.rows.clone(),
        };
        let jpath = dir.join("features.json");
        let text = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json(&jpath, e))?;
        fs::write(&jpath, text).map_err(|e| Error::io(&jpath, e))?;
        let bpath = dir.join("features.bin");
        let mut f = fs::File::create(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let mut buf = Vec::with_capacity(self.rows.len() * self.layout.len() * 4);
        for r in &self.rows {
            for &v in &r.values {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        f.write_all(&buf).map_err(|e| Error::io(&bpath, e))
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Serialize, Deserialize)]
struct TableManifest {
    magic: String,
    format_version: u32,
    dataset_name: String,
    strategy: SelectionStrategy,
    layout: Vec<FeatureDescriptor>,
    rows: Vec<FeatureRow>,
}

/// Reads a table written by [`FeatureTable::write`]. Values come back at
/// binary32 precision.
pub fn read_feature_table(dir: impl AsRef<Path>) -> Result<FeatureTable> {
    let dir = dir.as_ref();
    let jpath = dir.join("features.json");
    let text = fs::read(&jpath).map_err(|e| Error::io(&jpath, e))?;
    let manifest: TableManifest = serde_json::from_slice(&text).map_err(|e| Error::json(&jpath, e))?;
    if manifest.magic != TABLE_MAGIC {
        return Err(Error::Format {
            file: jpath,
            offset: 0,
            reason: format!("bad magic '{}'", manifest.magic),
        });
    }
    if manifest.format_version != TABLE_VERSION {
        return Err(Error::UnsupportedVersion {
            found: manifest.format_version,
            expected: TABLE_VERSION,
        });
    }
    let bpath = dir.join("features.bin");
    let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let width = manifest.layout.len();
    let expected = manifest.rows.len() * width * 4;
    if bytes.len() != expected {
        return Err(Error::Format {
            file: bpath,
            offset: bytes.len().min(expected) as u64,
            reason: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    let mut rows = manifest.rows;
    for (i, r) in rows.iter_mut().enumerate() {
        let chunk = &bytes[i * width * 4..(i + 1) * width * 4];
        r.values = chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
    }
    Ok(FeatureTable {
        layout: manifest.layout,
        strategy: manifest.strategy,
        dataset_name: manifest.dataset_name,
        rows,
    })
}
