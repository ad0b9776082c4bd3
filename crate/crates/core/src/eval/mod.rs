//! Metrics, seeded splits and the experiment protocols: feature ablation,
//! token-strategy study, cross-dataset transfer, cohort curves and
//! overhead benchmarking.

mod bench;
mod curves;
mod experiments;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{DetectorModel, TrainConfig};
use crate::error::{Error, Result};
use crate::features::FeatureTable;
use crate::selection::{aggregate_decision, UnitPrediction};
use crate::trace::{Label, TraceLabel, TraceSet};

pub use bench::{bench_overhead, complexity, OverheadReport, OverheadRow, MIN_STABLE_TOKENS};
pub use curves::{cohort_curves, CohortCurve, CurveAxis};
pub use experiments::{
    run_ablation, run_token_study, run_transfer, AblationReport, AblationRow, TokenReport, TokenRow, TransferCell,
    TransferReport,
};

/// Confusion counts with hallucinated as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// `None` when there are no hallucinated examples.
    pub recall_halu: Option<f64>,
    /// `None` when there are no factual examples.
    pub recall_fact: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Metrics {
    /// From `(predicted, actual)` pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> Metrics {
        let mut m = Metrics::default();
        for (pred, truth) in pairs {
            match (pred.is_halu(), truth.is_halu()) {
                (true, true) => m.tp += 1,
                (true, false) => m.fp += 1,
                (false, false) => m.tn += 1,
                (false, true) => m.fn_ += 1,
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { None } else { Some(a as f64 / b as f64) };
        m.accuracy = ratio(m.tp + m.tn, m.total()).unwrap_or(0.0);
        m.recall_halu = ratio(m.tp, m.tp + m.fn_);
        m.recall_fact = ratio(m.tn, m.tn + m.fp);
        m
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// After OR-aggregation of unit decisions per response.
    pub response: Metrics,
    /// Present when the strategy scores more than one unit per response.
    pub unit: Option<Metrics>,
}

/// Scores every labeled row of `table` and aggregates per response. The
/// response truth is the OR of its unit labels, which equals the response
/// label for every strategy.
pub fn evaluate(model: &DetectorModel, table: &FeatureTable, threshold: f64) -> Result<EvalReport> {
    let probs = model.predict_table(table)?;
    evaluate_probs(&probs, table, threshold)
}

pub fn evaluate_probs(probs: &[f64], table: &FeatureTable, threshold: f64) -> Result<EvalReport> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (0,1)")));
    }
    let mut unit_pairs = Vec::new();
    let mut resp_pairs = Vec::new();
    for (_, idx) in table.trace_groups() {
        let labeled: Vec<usize> = idx.into_iter().filter(|&i| table.rows[i].label.is_some()).collect();
        if labeled.is_empty() {
            continue;
        }
        let preds: Vec<UnitPrediction> = labeled
            .iter()
            .map(|&i| UnitPrediction {
                prob: probs[i],
                unit: table.rows[i].unit,
            })
            .collect();
        let decision = aggregate_decision(&preds, threshold)?;
        let truth = Label::from_halu(labeled.iter().any(|&i| table.rows[i].label == Some(Label::Hallucinated)));
        resp_pairs.push((decision.label, truth));
        for &i in &labeled {
            unit_pairs.push((Label::from_halu(probs[i] >= threshold), table.rows[i].label.unwrap()));
        }
    }
    if resp_pairs.is_empty() {
        return Err(Error::Config("no labeled rows to evaluate".into()));
    }
    let multi = !table.strategy.is_single_unit() && unit_pairs.len() > resp_pairs.len();
    Ok(EvalReport {
        response: Metrics::from_pairs(resp_pairs),
        unit: multi.then(|| Metrics::from_pairs(unit_pairs)),
    })
}

/// Shared knobs of every experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Protocol {
    pub train: TrainConfig,
    pub test_fraction: f64,
    /// Seeds the train/test split.
    pub split_seed: u64,
    pub threshold: f64,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            train: TrainConfig::default(),
            test_fraction: 0.2,
            split_seed: 0,
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: HashSet<String>,
    pub test: HashSet<String>,
}

/// Stratified split of labeled traces; each class contributes
/// `round(test_fraction * n_class)` traces to the test side. Unlabeled
/// traces are left out of both sides.
pub fn split_traces(set: &TraceSet, test_fraction: f64, seed: u64) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test_fraction {test_fraction} outside (0,1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: HashSet::new(),
        test: HashSet::new(),
    };
    for class in [TraceLabel::Factual, TraceLabel::Hallucinated] {
        let mut ids: Vec<&str> = set
            .traces
            .iter()
            .filter(|t| t.label == class)
            .map(|t| t.trace_id.as_str())
            .collect();
        ids.shuffle(&mut rng);
        let n_test = (test_fraction * ids.len() as f64).round() as usize;
        for (i, id) in ids.into_iter().enumerate() {
            if i < n_test {
                split.test.insert(id.to_string());
            } else {
                split.train.insert(id.to_string());
            }
        }
    }
    Ok(split)
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push(b'\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_text(text: &str, path: &Path) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}
