//! Token selection: which generated-token ranges are scored as one unit,
//! how units are labeled, and how unit decisions combine into a response
//! decision (logical OR).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{InferenceTrace, Label, Span, TraceLabel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionStrategy {
    AllTokens,
    PerToken,
    FirstToken,
    LastToken,
    SlicedWindow {
        window: usize,
        stride: usize,
        /// Enumerate only full windows (starts `0..=T_out - w`).
        #[serde(default)]
        strict: bool,
    },
}

impl SelectionStrategy {
    pub fn window(window: usize, stride: usize) -> Self {
        SelectionStrategy::SlicedWindow {
            window,
            stride,
            strict: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let SelectionStrategy::SlicedWindow { window, stride, .. } = *self {
            if stride == 0 || window == 0 || stride > window {
                return Err(Error::Config(format!(
                    "sliced window requires 1 <= stride <= window, got win:{window},{stride}"
                )));
            }
        }
        Ok(())
    }

    /// Strategies that emit exactly one unit per response.
    pub fn is_single_unit(&self) -> bool {
        matches!(
            self,
            SelectionStrategy::AllTokens | SelectionStrategy::FirstToken | SelectionStrategy::LastToken
        )
    }

    pub fn with_strict(self, strict_windows: bool) -> Self {
        match self {
            SelectionStrategy::SlicedWindow { window, stride, .. } => SelectionStrategy::SlicedWindow {
                window,
                stride,
                strict: strict_windows,
            },
            other => other,
        }
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionStrategy::AllTokens => f.write_str("all"),
            SelectionStrategy::PerToken => f.write_str("per"),
            SelectionStrategy::FirstToken => f.write_str("first"),
            SelectionStrategy::LastToken => f.write_str("last"),
            SelectionStrategy::SlicedWindow { window, stride, .. } => write!(f, "win:{window},{stride}"),
        }
    }
}

impl FromStr for SelectionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let strategy = match s {
            "all" => SelectionStrategy::AllTokens,
            "per" => SelectionStrategy::PerToken,
            "first" => SelectionStrategy::FirstToken,
            "last" => SelectionStrategy::LastToken,
            _ => {
                let body = s
                    .strip_prefix("win:")
                    .ok_or_else(|| Error::Config(format!("unknown strategy '{s}' (all|per|first|last|win:W,S)")))?;
                let (w, st) = body
                    .split_once(',')
                    .ok_or_else(|| Error::Config(format!("window strategy '{s}' must be win:W,S")))?;
                let parse = |x: &str| {
                    x.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad window parameter '{x}' in '{s}'")))
                };
                SelectionStrategy::window(parse(w)?, parse(st)?)
            }
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

/// A contiguous range of generated tokens scored as one classification
/// instance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUnit {
    pub trace_id: String,
    pub start: usize,
    pub end: usize,
    pub label: Option<Label>,
}

impl TokenUnit {
    pub fn span(&self) -> Span {
        Span::new(self.start, self.end)
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn tokens(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

/// Enumerates the token ranges a strategy scores for a response of
/// `gen_len` tokens.
pub fn enumerate_spans(gen_len: usize, strategy: SelectionStrategy) -> Result<Vec<Span>> {
    strategy.validate()?;
    if gen_len == 0 {
        return Err(Error::Config("cannot select tokens from an empty response".into()));
    }
    let spans = match strategy {
        SelectionStrategy::AllTokens => vec![Span::new(0, gen_len)],
        SelectionStrategy::PerToken => (0..gen_len).map(|t| Span::new(t, t + 1)).collect(),
        SelectionStrategy::FirstToken => vec![Span::new(0, 1)],
        SelectionStrategy::LastToken => vec![Span::new(gen_len - 1, gen_len)],
        SelectionStrategy::SlicedWindow { window, stride, strict } => {
            if strict && window >= gen_len {
                // no full window fits; the whole response stands in for it
                vec![Span::new(0, gen_len)]
            } else if strict {
                (0..=gen_len - window)
                    .step_by(stride)
                    .map(|s| Span::new(s, s + window))
                    .collect()
            } else {
                let mut out: Vec<Span> = Vec::new();
                let mut start = 0;
                while start < gen_len {
                    let span = Span::new(start, (start + window).min(gen_len));
                    if out.last() != Some(&span) {
                        out.push(span);
                    }
                    start += stride;
                }
                out
            }
        }
    };
    Ok(spans)
}

/// Units for `trace`, sorted by start, labeled with [`unit_label`] where the
/// trace is labeled.
pub fn enumerate_units(trace: &InferenceTrace, strategy: SelectionStrategy) -> Result<Vec<TokenUnit>> {
    let spans = enumerate_spans(trace.gen_len, strategy)?;
    Ok(spans
        .into_iter()
        .map(|span| TokenUnit {
            trace_id: trace.trace_id.clone(),
            start: span.start,
            end: span.end,
            label: unit_label(trace, &span).ok(),
        })
        .collect())
}

/// Span-overlap labeling. A hallucinated trace without spans labels every
/// unit hallucinated.
pub fn unit_label(trace: &InferenceTrace, unit: &Span) -> Result<Label> {
    match trace.label {
        TraceLabel::Unlabeled => Err(Error::Config(format!(
            "trace '{}' is unlabeled",
            trace.trace_id
        ))),
        TraceLabel::Factual => Ok(Label::Factual),
        TraceLabel::Hallucinated if trace.problematic_spans.is_empty() => Ok(Label::Hallucinated),
        TraceLabel::Hallucinated => Ok(Label::from_halu(
            trace.problematic_spans.iter().any(|s| s.overlaps(unit)),
        )),
    }
}

/// Training label for a unit under `strategy`. Strategies that score one
/// unit per response stand in for the response decision and take the
/// response label; multi-unit strategies use span overlap.
pub fn training_label(trace: &InferenceTrace, unit: &Span, strategy: SelectionStrategy) -> Result<Label> {
    if strategy.is_single_unit() {
        trace.label.known().ok_or_else(|| {
            Error::Config(format!("trace '{}' is unlabeled", trace.trace_id))
        })
    } else {
        unit_label(trace, unit)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnitPrediction {
    pub prob: f64,
    pub unit: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResponseDecision {
    pub label: Label,
    pub trigger_units: Vec<Span>,
}

/// OR over units: the response is hallucinated iff some unit scores at or
/// above `threshold`.
pub fn aggregate_decision(predictions: &[UnitPrediction], threshold: f64) -> Result<ResponseDecision> {
    if predictions.is_empty() {
        return Err(Error::Config("no unit predictions to aggregate".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (0,1)")));
    }
    let trigger_units: Vec<Span> = predictions
        .iter()
        .filter(|p| p.prob >= threshold)
        .map(|p| p.unit)
        .collect();
    Ok(ResponseDecision {
        label: Label::from_halu(!trigger_units.is_empty()),
        trigger_units,
    })
}
