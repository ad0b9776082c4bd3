use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{write_json, write_text};
use crate::error::{Error, Result};
use crate::features::{extract_feature_table, FeatureConfig, FeatureId};
use crate::selection::SelectionStrategy;
use crate::trace::TraceSet;

/// Below this many generated tokens per-token timings are noisy.
pub const MIN_STABLE_TOKENS: usize = 1000;

/// Display name, storage and compute complexity of a feature, and whether
/// the strings are the reference overhead strings (`true`) or were
/// derived here.
pub fn complexity(feature: FeatureId) -> (&'static str, &'static str, &'static str, bool) {
    match feature {
        FeatureId::LookbackRatio => ("Attention Lookback Ratio", "O(w·H·L)", "O(w·H·L)", true),
        FeatureId::AttentionEntropy => ("Attention Allocation Sharpness", "O(w·H·L)", "O(w·H·L·log w)", true),
        FeatureId::HiddenState => ("Last Layer Hidden State", "O(w·d)", "O(w·d)", true),
        FeatureId::ActivationMapDiff => ("Activation Map", "O(w·d·m)", "O(w·d·m)", true),
        FeatureId::ActivationEntropy => ("Activation Entropy", "O(w·m)", "O(w·m·log m)", true),
        FeatureId::MinTokenProb => ("Min Token Probabilities", "O(w·L)", "O(w·L)", true),
        FeatureId::MaxTokenRank => ("Max Token Ranks", "O(w·L)", "O(w·L·log w)", true),
        FeatureId::JointTokenProb => ("Joint Token Probabilities", "O(w·L)", "O(w·L·w)", true),
        FeatureId::KeyTokenRatio => ("Key Token Attention Ratio", "O(w·H·L)", "O(w·H·L)", false),
        FeatureId::AvgJsd => ("Avg. Distribution Divergence", "O(w·L·K)", "O(w·L·K·log K)", false),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    pub feature: FeatureId,
    pub name: String,
    pub storage: String,
    pub compute: String,
    pub from_table: bool,
    /// Median over repetitions of wall seconds / generated tokens.
    pub seconds_per_token: f64,
    pub samples: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub strategy: SelectionStrategy,
    pub total_tokens: usize,
    pub repetitions: usize,
    pub warning: Option<String>,
    pub rows: Vec<OverheadRow>,
}

impl OverheadReport {
    pub fn get(&self, feature: FeatureId) -> Option<&OverheadRow> {
        self.rows.iter().find(|r| r.feature == feature)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(self, &dir.join("overhead.json"))?;
        let mut csv = String::from("feature,name,storage,compute,from_table,seconds_per_token\n");
        for r in &self.rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{:e}\n",
                r.feature, r.name, r.storage, r.compute, r.from_table, r.seconds_per_token
            ));
        }
        write_text(&csv, &dir.join("overhead.csv"))
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Times single-feature extraction under `win:8,4` on one thread,
/// `repetitions` (>= 5) times per feature.
pub fn bench_overhead(set: &TraceSet, features: &[FeatureId], repetitions: usize) -> Result<OverheadReport> {
    if repetitions < 5 {
        return Err(Error::Config("overhead timing needs at least 5 repetitions".into()));
    }
    if features.is_empty() {
        return Err(Error::Config("no features to benchmark".into()));
    }
    let strategy = SelectionStrategy::window(8, 4);
    let tokens = set.total_tokens();
    if tokens == 0 {
        return Err(Error::Config("trace set has no generated tokens".into()));
    }
    let warning = (tokens < MIN_STABLE_TOKENS).then(|| {
        format!("only {tokens} generated tokens; timings below {MIN_STABLE_TOKENS} tokens are unstable")
    });
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("cannot build timing pool: {e}")))?;
    let mut rows = Vec::with_capacity(features.len());
    for &feature in features {
        let config = FeatureConfig::new(vec![feature]);
        config.validate(&set.meta, strategy)?;
        let mut samples = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let start = Instant::now();
            let table = pool.install(|| extract_feature_table(set, &config, strategy))?;
            let secs = start.elapsed().as_secs_f64();
            std::hint::black_box(&table);
            samples.push(secs.max(f64::MIN_POSITIVE) / tokens as f64);
        }
        let (name, storage, compute, from_table) = complexity(feature);
        rows.push(OverheadRow {
            feature,
            name: name.into(),
            storage: storage.into(),
            compute: compute.into(),
            from_table,
            seconds_per_token: median(&mut samples.clone()),
            samples,
        });
    }
    Ok(OverheadReport {
        strategy,
        total_tokens: tokens,
        repetitions,
        warning,
        rows,
    })
}
