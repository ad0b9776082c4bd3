//! In-memory trace model: per-response internal states captured during
//! generation, plus set-level metadata shared by every trace.
//!
//! Attention is stored ragged: for each generated step `t`, each layer and
//! each head there is one row over the `prompt_len + t + 1` positions the
//! step attended to (prompt, earlier generated tokens, and itself). Rows are
//! laid out `t`-major, then layer, then head. Hidden states are post-block
//! outputs, `[gen_len][layers][hidden_dim]`; activations are FFN activation
//! maps, `[gen_len][layers][ffn_dim]`; logit statistics are logit-lens
//! reductions per `(t, layer)`.

mod format;

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{load_trace_set, write_trace_set, FORMAT_VERSION, MAGIC};

/// Tolerance for simplex checks on stored rows.
pub const SIMPLEX_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Attention,
    Hidden,
    Activation,
    Logit,
}

impl Section {
    pub const ALL: [Section; 4] = [
        Section::Attention,
        Section::Hidden,
        Section::Activation,
        Section::Logit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Section::Attention => "attention",
            Section::Hidden => "hidden",
            Section::Activation => "activation",
            Section::Logit => "logit",
        }
    }

    pub fn blob_file(self) -> &'static str {
        match self {
            Section::Attention => "attention.bin",
            Section::Hidden => "hidden.bin",
            Section::Activation => "activation.bin",
            Section::Logit => "logits.bin",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub model_name: String,
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// Logit-lens truncation width.
    pub topk: usize,
    pub sections_present: BTreeSet<Section>,
}

impl TraceMeta {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("topk", self.topk),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::validation("<meta>", format!("{name} must be >= 1")));
            }
        }
        if self.topk > self.vocab_size {
            return Err(Error::validation("<meta>", "topk must not exceed vocab_size"));
        }
        if self.sections_present.is_empty() {
            return Err(Error::validation("<meta>", "sections_present is empty"));
        }
        // ranks and vocab ids are stored as binary32
        if self.has(Section::Logit) && self.vocab_size > (1 << 24) {
            return Err(Error::validation(
                "<meta>",
                "vocab_size exceeds 2^24, ids are not exact in binary32",
            ));
        }
        Ok(())
    }

    pub fn has(&self, section: Section) -> bool {
        self.sections_present.contains(&section)
    }

    pub fn shape(&self) -> TraceShape {
        TraceShape {
            layers: self.num_layers,
            heads: self.num_heads,
            hidden_dim: self.hidden_dim,
            ffn_dim: self.ffn_dim,
            topk: self.topk,
        }
    }
}

/// Tensor dimensions a trace was captured with. Copied from [`TraceMeta`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceShape {
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub topk: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceLabel {
    Factual,
    Hallucinated,
    Unlabeled,
}

/// Binary label of a response or a token unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Factual,
    Hallucinated,
}

impl Label {
    pub fn is_halu(self) -> bool {
        self == Label::Hallucinated
    }

    pub fn from_halu(halu: bool) -> Self {
        if halu {
            Label::Hallucinated
        } else {
            Label::Factual
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Factual => "factual",
            Label::Hallucinated => "hallucinated",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl TraceLabel {
    pub fn known(self) -> Option<Label> {
        match self {
            TraceLabel::Factual => Some(Label::Factual),
            TraceLabel::Hallucinated => Some(Label::Hallucinated),
            TraceLabel::Unlabeled => None,
        }
    }
}

impl From<Label> for TraceLabel {
    fn from(l: Label) -> Self {
        match l {
            Label::Factual => TraceLabel::Factual,
            Label::Hallucinated => TraceLabel::Hallucinated,
        }
    }
}

/// Half-open range of generated-token indices, serialized as `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn contains(&self, t: usize) -> bool {
        self.start <= t && t < self.end
    }
}

impl From<[usize; 2]> for Span {
    fn from(v: [usize; 2]) -> Self {
        Span::new(v[0], v[1])
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

/// Logit-lens statistics for one generated token at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitStats {
    pub chosen_prob: f32,
    pub chosen_rank: u32,
    /// Descending top-K probabilities.
    pub topk_probs: Vec<f32>,
    pub topk_ids: Vec<u32>,
    pub tail_mass: f32,
}

impl LogitStats {
    /// Floats per record in `logits.bin`: prob, rank, K probs, K ids, tail.
    pub fn record_len(topk: usize) -> usize {
        3 + 2 * topk
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceTrace {
    pub trace_id: String,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub shape: TraceShape,
    pub attention: Option<Vec<f32>>,
    pub hidden: Option<Vec<f32>>,
    pub activation: Option<Vec<f32>>,
    pub logits: Option<Vec<LogitStats>>,
    pub label: TraceLabel,
    pub problematic_spans: Vec<Span>,
}

/// Number of attention floats stored for a trace.
pub fn attention_len(prompt_len: usize, gen_len: usize, layers: usize, heads: usize) -> usize {
    layers * heads * (gen_len * prompt_len + gen_len * (gen_len + 1) / 2)
}

impl InferenceTrace {
    /// Number of positions attended by generated step `t`.
    pub fn context_len(&self, t: usize) -> usize {
        self.prompt_len + t + 1
    }

    /// Absolute position of generated step `t` in the full sequence.
    pub fn position(&self, t: usize) -> usize {
        self.prompt_len + t
    }

    fn check_token(&self, t: usize) -> Result<()> {
        if t >= self.gen_len {
            return Err(Error::Bounds(format!(
                "token {t} >= gen_len {} in trace '{}'",
                self.gen_len, self.trace_id
            )));
        }
        Ok(())
    }

    fn check_layer(&self, l: usize) -> Result<()> {
        if l >= self.shape.layers {
            return Err(Error::Bounds(format!(
                "layer {l} >= num_layers {}",
                self.shape.layers
            )));
        }
        Ok(())
    }

    /// Offset of row `(t, l, h)` inside the ragged attention buffer.
    pub fn attention_offset(&self, t: usize, l: usize, h: usize) -> usize {
        let (lh, ctx) = (self.shape.layers * self.shape.heads, self.context_len(t));
        let before = lh * (t * self.prompt_len + t * (t + 1) / 2);
        before + (l * self.shape.heads + h) * ctx
    }

    pub fn attention_row(&self, t: usize, l: usize, h: usize) -> Result<&[f32]> {
        let att = self
            .attention
            .as_deref()
            .ok_or(Error::MissingSection("attention"))?;
        self.check_token(t)?;
        self.check_layer(l)?;
        if h >= self.shape.heads {
            return Err(Error::Bounds(format!(
                "head {h} >= num_heads {}",
                self.shape.heads
            )));
        }
        let off = self.attention_offset(t, l, h);
        Ok(&att[off..off + self.context_len(t)])
    }

    pub fn hidden_vec(&self, t: usize, l: usize) -> Result<&[f32]> {
        let hidden = self.hidden.as_deref().ok_or(Error::MissingSection("hidden"))?;
        self.check_token(t)?;
        self.check_layer(l)?;
        let d = self.shape.hidden_dim;
        let off = (t * self.shape.layers + l) * d;
        Ok(&hidden[off..off + d])
    }

    pub fn activation_vec(&self, t: usize, l: usize) -> Result<&[f32]> {
        let act = self
            .activation
            .as_deref()
            .ok_or(Error::MissingSection("activation"))?;
        self.check_token(t)?;
        self.check_layer(l)?;
        let m = self.shape.ffn_dim;
        let off = (t * self.shape.layers + l) * m;
        Ok(&act[off..off + m])
    }

    pub fn logit_stats(&self, t: usize, l: usize) -> Result<&LogitStats> {
        let logits = self.logits.as_deref().ok_or(Error::MissingSection("logit"))?;
        self.check_token(t)?;
        self.check_layer(l)?;
        Ok(&logits[t * self.shape.layers + l])
    }

    pub fn has(&self, section: Section) -> bool {
        match section {
            Section::Attention => self.attention.is_some(),
            Section::Hidden => self.hidden.is_some(),
            Section::Activation => self.activation.is_some(),
            Section::Logit => self.logits.is_some(),
        }
    }

    /// Checks every trace invariant against `meta`. Sums use 64-bit
    /// accumulation.
    pub fn validate(&self, meta: &TraceMeta) -> Result<()> {
        let id = self.trace_id.as_str();
        if id.is_empty() {
            return Err(Error::validation(id, "empty trace_id"));
        }
        if self.gen_len == 0 {
            return Err(Error::validation(id, "gen_len must be >= 1"));
        }
        if self.shape != meta.shape() {
            return Err(Error::validation(id, "trace shape differs from meta"));
        }
        for s in Section::ALL {
            if self.has(s) != meta.has(s) {
                return Err(Error::validation(
                    id,
                    format!("section '{}' presence differs from meta", s.name()),
                ));
            }
        }
        self.validate_spans()?;
        let (l, h) = (meta.num_layers, meta.num_heads);

        if let Some(att) = &self.attention {
            let expected = attention_len(self.prompt_len, self.gen_len, l, h);
            if att.len() != expected {
                return Err(Error::validation(
                    id,
                    format!("attention has {} floats, expected {expected}", att.len()),
                ));
            }
            for t in 0..self.gen_len {
                for li in 0..l {
                    for hi in 0..h {
                        let row = self.attention_row(t, li, hi)?;
                        let mut sum = 0.0f64;
                        for &a in row {
                            if !a.is_finite() || a < 0.0 {
                                return Err(Error::validation(
                                    id,
                                    format!("attention entry {a} at (t={t}, l={li}, h={hi}) is negative or non-finite"),
                                ));
                            }
                            sum += a as f64;
                        }
                        if (sum - 1.0).abs() > SIMPLEX_TOL {
                            return Err(Error::validation(
                                id,
                                format!("attention row (t={t}, l={li}, h={hi}) sums to {sum}"),
                            ));
                        }
                    }
                }
            }
        }

        let check_dense = |name: &str, data: &Option<Vec<f32>>, width: usize| -> Result<()> {
            if let Some(v) = data {
                let expected = self.gen_len * l * width;
                if v.len() != expected {
                    return Err(Error::validation(
                        id,
                        format!("{name} has {} floats, expected {expected}", v.len()),
                    ));
                }
                if let Some(pos) = v.iter().position(|x| !x.is_finite()) {
                    return Err(Error::validation(
                        id,
                        format!("{name} value at index {pos} is non-finite"),
                    ));
                }
            }
            Ok(())
        };
        check_dense("hidden", &self.hidden, meta.hidden_dim)?;
        check_dense("activation", &self.activation, meta.ffn_dim)?;

        if let Some(logits) = &self.logits {
            if logits.len() != self.gen_len * l {
                return Err(Error::validation(
                    id,
                    format!("logit section has {} records, expected {}", logits.len(), self.gen_len * l),
                ));
            }
            for (i, rec) in logits.iter().enumerate() {
                let (t, li) = (i / l, i % l);
                validate_logit(id, rec, meta, t, li)?;
            }
        }
        Ok(())
    }

    fn validate_spans(&self) -> Result<()> {
        let id = self.trace_id.as_str();
        if !self.problematic_spans.is_empty() && self.label != TraceLabel::Hallucinated {
            return Err(Error::validation(
                id,
                "problematic_spans present but label is not hallucinated",
            ));
        }
        for s in &self.problematic_spans {
            if s.is_empty() || s.end > self.gen_len {
                return Err(Error::validation(
                    id,
                    format!("span [{}, {}) outside [0, {})", s.start, s.end, self.gen_len),
                ));
            }
        }
        Ok(())
    }
}

fn validate_logit(id: &str, rec: &LogitStats, meta: &TraceMeta, t: usize, l: usize) -> Result<()> {
    let at = format!("(t={t}, l={l})");
    let k = meta.topk;
    if rec.topk_probs.len() != k || rec.topk_ids.len() != k {
        return Err(Error::validation(id, format!("logit record {at} does not hold K={k} entries")));
    }
    let unit = |x: f32| x.is_finite() && (0.0..=1.0).contains(&x);
    if !unit(rec.chosen_prob) {
        return Err(Error::validation(id, format!("chosen_prob {} at {at} outside [0,1]", rec.chosen_prob)));
    }
    if rec.chosen_rank == 0 || rec.chosen_rank as usize > meta.vocab_size {
        return Err(Error::validation(id, format!("chosen_rank {} at {at} outside [1, V]", rec.chosen_rank)));
    }
    if !unit(rec.tail_mass) {
        return Err(Error::validation(id, format!("tail_mass {} at {at} outside [0,1]", rec.tail_mass)));
    }
    let mut sum = rec.tail_mass as f64;
    for (j, &p) in rec.topk_probs.iter().enumerate() {
        if !unit(p) {
            return Err(Error::validation(id, format!("topk prob {p} at {at} outside [0,1]")));
        }
        if j > 0 && p > rec.topk_probs[j - 1] {
            return Err(Error::validation(id, format!("topk probs at {at} are not non-increasing")));
        }
        sum += p as f64;
    }
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::validation(id, format!("topk probs + tail_mass at {at} sum to {sum}")));
    }
    if rec.chosen_rank > 1 && rec.chosen_prob as f64 > rec.topk_probs[0] as f64 + 1e-6 {
        return Err(Error::validation(
            id,
            format!("chosen_prob exceeds top-1 probability with rank {} at {at}", rec.chosen_rank),
        ));
    }
    let mut seen = HashSet::with_capacity(k);
    for &v in &rec.topk_ids {
        if v as usize >= meta.vocab_size || !seen.insert(v) {
            return Err(Error::validation(id, format!("invalid or duplicate vocab id {v} at {at}")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceSet {
    pub meta: TraceMeta,
    pub traces: Vec<InferenceTrace>,
    pub dataset_name: String,
}

impl TraceSet {
    pub fn new(meta: TraceMeta, dataset_name: impl Into<String>) -> Self {
        TraceSet {
            meta,
            traces: Vec::new(),
            dataset_name: dataset_name.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        let mut ids = HashSet::with_capacity(self.traces.len());
        for tr in &self.traces {
            if !ids.insert(tr.trace_id.as_str()) {
                return Err(Error::validation(&tr.trace_id, "duplicate trace_id"));
            }
            tr.validate(&self.meta)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.traces.iter().map(|t| t.gen_len).sum()
    }

    /// Splits the set into (hallucinated, factual) cohorts; unlabeled traces
    /// are dropped.
    pub fn split_by_label(&self) -> (TraceSet, TraceSet) {
        let mut halu = TraceSet::new(self.meta.clone(), format!("{}:hallucinated", self.dataset_name));
        let mut fact = TraceSet::new(self.meta.clone(), format!("{}:factual", self.dataset_name));
        for tr in &self.traces {
            match tr.label {
                TraceLabel::Hallucinated => halu.traces.push(tr.clone()),
                TraceLabel::Factual => fact.traces.push(tr.clone()),
                TraceLabel::Unlabeled => {}
            }
        }
        (halu, fact)
    }

    pub fn subset(&self, indices: &[usize]) -> TraceSet {
        TraceSet {
            meta: self.meta.clone(),
            traces: indices.iter().map(|&i| self.traces[i].clone()).collect(),
            dataset_name: self.dataset_name.clone(),
        }
    }
}
