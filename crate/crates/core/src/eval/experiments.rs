use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, fmt_opt, split_traces, write_json, write_text, EvalReport, Metrics, Protocol};
use crate::detect::{train, Family};
use crate::error::{Error, Result};
use crate::features::{extract_feature_table, FeatureConfig, FeatureId, FeatureTable};
use crate::selection::SelectionStrategy;
use crate::trace::TraceSet;

fn metric_cols(m: Option<&Metrics>) -> String {
    match m {
        Some(m) => format!(
            "{:.6},{},{},{},{},{},{}",
            m.accuracy,
            fmt_opt(m.recall_halu),
            fmt_opt(m.recall_fact),
            m.tp,
            m.fp,
            m.tn,
            m.fn_
        ),
        None => ",,,,,,".into(),
    }
}

const METRIC_HEADER: &str = "accuracy,recall_halu,recall_fact,tp,fp,tn,fn";

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Train on `train_t`, score `test_t`; errors become the cell's message.
fn fit_and_score(
    family: Family,
    train_t: &FeatureTable,
    test_t: &FeatureTable,
    protocol: &Protocol,
) -> std::result::Result<EvalReport, String> {
    let model = train(family, train_t, &protocol.train).map_err(|e| e.to_string())?;
    evaluate(&model, test_t, protocol.threshold).map_err(|e| e.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub feature: FeatureId,
    pub family: Family,
    pub response: Option<Metrics>,
    pub unit: Option<Metrics>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dataset_name: String,
    pub strategy: SelectionStrategy,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn get(&self, feature: FeatureId, family: Family) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.feature == feature && r.family == family)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(self, &dir.join("ablation.json"))?;
        let mut csv = format!("feature,family,{METRIC_HEADER},error\n");
        for r in &self.rows {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                r.feature,
                r.family,
                metric_cols(r.response.as_ref()),
                csv_escape(r.error.as_deref().unwrap_or(""))
            ));
        }
        write_text(&csv, &dir.join("ablation.csv"))
    }
}

/// One model per (enabled feature, family), each trained with that feature
/// as the sole input. Features are extracted once and projected per cell.
pub fn run_ablation(
    set: &TraceSet,
    strategy: SelectionStrategy,
    families: &[Family],
    fconfig: &FeatureConfig,
    protocol: &Protocol,
) -> Result<AblationReport> {
    let full = extract_feature_table(set, fconfig, strategy)?;
    let split = split_traces(set, protocol.test_fraction, protocol.split_seed)?;
    let train_t = full.filter_traces(&split.train);
    let test_t = full.filter_traces(&split.test);
    let cells: Vec<(FeatureId, Family)> = fconfig
        .enabled_features
        .iter()
        .flat_map(|&f| families.iter().map(move |&fam| (f, fam)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(feature, family)| {
            let result = fit_and_score(family, &train_t.project(&[feature]), &test_t.project(&[feature]), protocol);
            match result {
                Ok(r) => AblationRow {
                    feature,
                    family,
                    response: Some(r.response),
                    unit: r.unit,
                    error: None,
                },
                Err(e) => {
                    log::warn!("ablation cell {feature}/{family} failed: {e}");
                    AblationRow {
                        feature,
                        family,
                        response: None,
                        unit: None,
                        error: Some(e),
                    }
                }
            }
        })
        .collect();
    Ok(AblationReport {
        dataset_name: set.dataset_name.clone(),
        strategy,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenRow {
    pub strategy: String,
    pub response: Option<Metrics>,
    pub unit: Option<Metrics>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenReport {
    pub dataset_name: String,
    pub family: Family,
    pub rows: Vec<TokenRow>,
}

impl TokenReport {
    pub fn accuracy(&self, strategy: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.strategy == strategy)
            .and_then(|r| r.response.map(|m| m.accuracy))
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(self, &dir.join("token_study.json"))?;
        let mut csv = format!("strategy,{METRIC_HEADER},unit_accuracy,error\n");
        for r in &self.rows {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                r.strategy,
                metric_cols(r.response.as_ref()),
                fmt_opt(r.unit.map(|m| m.accuracy)),
                csv_escape(r.error.as_deref().unwrap_or(""))
            ));
        }
        write_text(&csv, &dir.join("token_study.csv"))
    }
}

/// Same features and trace split for every strategy; response-level
/// accuracy per strategy.
pub fn run_token_study(
    set: &TraceSet,
    strategies: &[SelectionStrategy],
    family: Family,
    fconfig: &FeatureConfig,
    protocol: &Protocol,
) -> Result<TokenReport> {
    if strategies.is_empty() {
        return Err(Error::Config("token study needs at least one strategy".into()));
    }
    let split = split_traces(set, protocol.test_fraction, protocol.split_seed)?;
    let rows = strategies
        .par_iter()
        .map(|&strategy| {
            let result = extract_feature_table(set, fconfig, strategy)
                .map_err(|e| e.to_string())
                .and_then(|t| {
                    fit_and_score(family, &t.filter_traces(&split.train), &t.filter_traces(&split.test), protocol)
                });
            match result {
                Ok(r) => TokenRow {
                    strategy: strategy.to_string(),
                    response: Some(r.response),
                    unit: r.unit,
                    error: None,
                },
                Err(e) => TokenRow {
                    strategy: strategy.to_string(),
                    response: None,
                    unit: None,
                    error: Some(e),
                },
            }
        })
        .collect();
    Ok(TokenReport {
        dataset_name: set.dataset_name.clone(),
        family,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub train_dataset: String,
    pub test_dataset: String,
    pub features: String,
    /// Scored on the held-out split of the training set.
    pub diagonal: bool,
    pub response: Option<Metrics>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub family: Family,
    pub strategy: SelectionStrategy,
    pub cells: Vec<TransferCell>,
}

impl TransferReport {
    pub fn accuracy(&self, train: &str, test: &str, features: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.train_dataset == train && c.test_dataset == test && c.features == features)
            .and_then(|c| c.response.map(|m| m.accuracy))
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(self, &dir.join("transfer.json"))?;
        let mut csv = format!("train_dataset,test_dataset,features,diagonal,{METRIC_HEADER},error\n");
        for c in &self.cells {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                csv_escape(&c.train_dataset),
                csv_escape(&c.test_dataset),
                csv_escape(&c.features),
                c.diagonal,
                metric_cols(c.response.as_ref()),
                csv_escape(c.error.as_deref().unwrap_or(""))
            ));
        }
        write_text(&csv, &dir.join("transfer.csv"))
    }
}

/// Full grid of (train set, test set, feature set). Models are trained on
/// the training split of their set; a cell whose test set is the training
/// set (same dataset name) scores the held-out split, other cells score
/// the whole test set.
pub fn run_transfer(
    train_sets: &[TraceSet],
    test_sets: &[TraceSet],
    feature_sets: &[(String, Vec<FeatureId>)],
    family: Family,
    strategy: SelectionStrategy,
    fconfig: &FeatureConfig,
    protocol: &Protocol,
) -> Result<TransferReport> {
    if train_sets.is_empty() || test_sets.is_empty() {
        return Err(Error::Config("transfer needs at least one training and one test set".into()));
    }
    if feature_sets.is_empty() || feature_sets.iter().any(|(_, f)| f.is_empty()) {
        return Err(Error::Config("transfer needs non-empty feature sets".into()));
    }
    let mut union: Vec<FeatureId> = feature_sets.iter().flat_map(|(_, f)| f.iter().copied()).collect();
    union.sort();
    union.dedup();
    let config = FeatureConfig {
        enabled_features: union,
        ..fconfig.clone()
    };
    let mut tables: BTreeMap<String, FeatureTable> = BTreeMap::new();
    for set in train_sets.iter().chain(test_sets) {
        if !tables.contains_key(&set.dataset_name) {
            tables.insert(set.dataset_name.clone(), extract_feature_table(set, &config, strategy)?);
        }
    }
    let splits = train_sets
        .iter()
        .map(|s| Ok((s.dataset_name.clone(), split_traces(s, protocol.test_fraction, protocol.split_seed)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;

    let jobs: Vec<(usize, usize)> = (0..train_sets.len())
        .flat_map(|i| (0..feature_sets.len()).map(move |k| (i, k)))
        .collect();
    let cells: Vec<Vec<TransferCell>> = jobs
        .par_iter()
        .map(|&(i, k)| {
            let train_name = &train_sets[i].dataset_name;
            let (fname, feats) = &feature_sets[k];
            let split = &splits[train_name];
            let train_t = tables[train_name].filter_traces(&split.train).project(feats);
            let model = train(family, &train_t, &protocol.train);
            test_sets
                .iter()
                .map(|test| {
                    let diagonal = &test.dataset_name == train_name;
                    let full = tables[&test.dataset_name].project(feats);
                    let test_t = if diagonal { full.filter_traces(&split.test) } else { full };
                    let result = model
                        .as_ref()
                        .map_err(|e| e.to_string())
                        .and_then(|m| evaluate(m, &test_t, protocol.threshold).map_err(|e| e.to_string()));
                    TransferCell {
                        train_dataset: train_name.clone(),
                        test_dataset: test.dataset_name.clone(),
                        features: fname.clone(),
                        diagonal,
                        response: result.as_ref().ok().map(|r| r.response),
                        error: result.err(),
                    }
                })
                .collect()
        })
        .collect();
    Ok(TransferReport {
        family,
        strategy,
        cells: cells.into_iter().flatten().collect(),
    })
}
