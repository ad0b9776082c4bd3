//! Command-line front end. `run` returns the process exit status: 0 ok,
//! 1 usage, 2 data/validation, 3 training divergence. Diagnostics go to
//! stderr; results only to files under `--out`.
//!
//! A JSON file passed with `--config` may set any flag by its snake_case
//! name (plus `train` and `synth` objects); flags given on the command
//! line win over the file.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::detect::{load_model, save_model, train, Batch, Family, TrainConfig};
use crate::error::Error;
use crate::eval::{
    bench_overhead, cohort_curves, evaluate, run_ablation, run_token_study, run_transfer, split_traces, CurveAxis,
    Protocol,
};
use crate::features::{extract_feature_table, parse_feature_list, FeatureConfig, FeatureId, HeadGranularity};
use crate::selection::SelectionStrategy;
use crate::synth::{generate, SynthConfig};
use crate::trace::{load_trace_set, write_trace_set, TraceSet};

const RUN_FILE: &str = "run.json";
const DEFAULT_TOKEN_STRATEGIES: [&str; 6] = ["all", "per", "first", "last", "win:2,1", "win:4,2"];

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{} error: {e}", e.class()),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => e.exit_code(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "haluprobe", version, about = "Hallucination detection from recorded inference states")]
struct Cli {
    /// JSON file mirroring the flags; explicit flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Threads for parallel stages (default: available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Info)]
    log_level: LogLevel,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic trace set with planted effects.
    Synth(SynthArgs),
    /// Extract a feature table.
    Extract(ExtractArgs),
    /// Train a detector on the training split.
    Train(TrainArgs),
    /// Score a saved detector.
    Eval(EvalArgs),
    /// One model per (feature, family) pair.
    Ablate(AblateArgs),
    /// Compare token selection strategies.
    Tokens(TokensArgs),
    /// Cross-dataset generalization grid.
    Transfer(TransferArgs),
    /// Per-layer or per-head cohort curves.
    Curves(CurvesArgs),
    /// Feature extraction overhead.
    Bench(BenchArgs),
    /// Load and validate a trace set.
    Validate(ValidateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_traces: Option<usize>,
    #[arg(long)]
    dataset_name: Option<String>,
}

#[derive(Args, Debug, Default)]
struct FeatureArgs {
    /// all | per | first | last | win:W,S
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<SelectionStrategy>,
    /// Comma list of feature names, or `all`.
    #[arg(long, value_parser = parse_features)]
    features: Option<FeatureList>,
    /// per_head | layer_mean
    #[arg(long, value_parser = parse_granularity)]
    granularity: Option<HeadGranularity>,
    /// Only full windows for win:W,S.
    #[arg(long)]
    strict_windows: bool,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long, value_parser = parse_family)]
    family: Option<Family>,
    /// Seeds initialization and sampling inside training.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    l2: Option<f64>,
    /// Minibatch size; full batch when absent.
    #[arg(long)]
    minibatch: Option<usize>,
    /// Hidden widths for mlp/siamese, e.g. 64,32.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
}

#[derive(Args, Debug, Default)]
struct SplitFlags {
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    feat: FeatureArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    feat: FeatureArgs,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    split: SplitFlags,
    /// Which traces to train on.
    #[arg(long, value_enum)]
    subset: Option<Subset>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    /// Directory written by `train`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    feat: FeatureArgs,
    #[command(flatten)]
    split: SplitFlags,
    /// Which traces to score.
    #[arg(long, value_enum)]
    subset: Option<Subset>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    feat: FeatureArgs,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    split: SplitFlags,
    /// Comma list of families or `all`; defaults to --family.
    #[arg(long = "families", value_delimiter = ',')]
    families: Option<Vec<String>>,
}

#[derive(Args, Debug)]
struct TokensArgs {
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Repeatable; defaults to all, per, first, last, win:2,1, win:4,2.
    #[arg(long = "strategy", value_parser = parse_strategy)]
    strategies: Vec<SelectionStrategy>,
    #[arg(long, value_parser = parse_features)]
    features: Option<FeatureList>,
    #[arg(long, value_parser = parse_granularity)]
    granularity: Option<HeadGranularity>,
    #[arg(long)]
    strict_windows: bool,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    split: SplitFlags,
}

#[derive(Args, Debug)]
struct TransferArgs {
    /// Training trace set (repeatable).
    #[arg(long = "train-set")]
    train_sets: Vec<PathBuf>,
    /// Test trace set (repeatable); defaults to the training sets.
    #[arg(long = "test-set")]
    test_sets: Vec<PathBuf>,
    /// NAME=LIST feature set (repeatable); defaults to all=all.
    #[arg(long = "feature-set")]
    feature_sets: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    feat: FeatureArgs,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    split: SplitFlags,
}

#[derive(Args, Debug)]
struct CurvesArgs {
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    /// Second cohort; without it the set is split by label
    /// (hallucinated = A, factual = B).
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long, value_parser = parse_feature)]
    feature: Option<FeatureId>,
    #[arg(long, value_enum)]
    axis: Option<Axis>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    trace_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_features)]
    features: Option<FeatureList>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    trace_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Subset {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Axis {
    Layer,
    Head,
}

fn parse_strategy(s: &str) -> std::result::Result<SelectionStrategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parsed `--features` value; a newtype so clap treats it as one value.
#[derive(Clone, Debug)]
struct FeatureList(Vec<FeatureId>);

fn parse_features(s: &str) -> std::result::Result<FeatureList, String> {
    parse_feature_list(s).map(FeatureList).map_err(|e| e.to_string())
}

fn parse_feature(s: &str) -> std::result::Result<FeatureId, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_granularity(s: &str) -> std::result::Result<HeadGranularity, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_family(s: &str) -> std::result::Result<Family, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Contents of `--config`. Strings use the same syntax as the flags.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    workers: Option<usize>,
    trace_dir: Option<PathBuf>,
    compare: Option<PathBuf>,
    model: Option<PathBuf>,
    out: Option<PathBuf>,
    strategy: Option<String>,
    strategies: Option<Vec<String>>,
    features: Option<String>,
    feature: Option<String>,
    feature_sets: Option<BTreeMap<String, String>>,
    granularity: Option<String>,
    strict_windows: Option<bool>,
    family: Option<String>,
    families: Option<Vec<String>>,
    seed: Option<u64>,
    threshold: Option<f64>,
    test_fraction: Option<f64>,
    split_seed: Option<u64>,
    subset: Option<Subset>,
    axis: Option<Axis>,
    repetitions: Option<usize>,
    n_traces: Option<usize>,
    dataset_name: Option<String>,
    train_sets: Option<Vec<PathBuf>>,
    test_sets: Option<Vec<PathBuf>>,
    train: Option<TrainConfig>,
    synth: Option<SynthConfig>,
}

impl FileConfig {
    fn load(path: &Path) -> CliResult<FileConfig> {
        let text = fs::read(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        serde_json::from_slice(&text).map_err(|e| {
            CliError::Core(Error::Json {
                path: path.into(),
                source: e,
            })
        })
    }
}

/// Provenance written next to a trained model so `eval` can rebuild the
/// same features without repeating every flag.
#[derive(Debug, Serialize, Deserialize)]
struct RunRecord {
    family: Family,
    strategy: String,
    features: Vec<FeatureId>,
    granularity: HeadGranularity,
    test_fraction: f64,
    split_seed: u64,
    subset: Subset,
    train: TrainConfig,
}

fn cfg_parse<T: std::str::FromStr<Err = Error>>(v: Option<&String>) -> CliResult<Option<T>> {
    Ok(v.map(|s| s.parse()).transpose()?)
}

fn required<T>(v: Option<T>, flag: &str) -> CliResult<T> {
    v.ok_or_else(|| CliError::Usage(format!("--{flag} is required (flag or config file)")))
}

struct Resolved {
    strategy: SelectionStrategy,
    fconfig: FeatureConfig,
}

fn resolve_features(a: &FeatureArgs, file: &FileConfig, fallback: Option<&RunRecord>) -> CliResult<Resolved> {
    let strategy = match a.strategy {
        Some(s) => s,
        None => match cfg_parse(file.strategy.as_ref())? {
            Some(s) => s,
            None => fallback
                .map(|r| r.strategy.parse())
                .transpose()?
                .unwrap_or(SelectionStrategy::AllTokens),
        },
    };
    let strict = a.strict_windows || file.strict_windows.unwrap_or(false);
    let features = match &a.features {
        Some(f) => f.0.clone(),
        None => match &file.features {
            Some(s) => parse_feature_list(s)?,
            None => fallback
                .map(|r| r.features.clone())
                .unwrap_or_else(|| FeatureId::ALL.to_vec()),
        },
    };
    let granularity = a
        .granularity
        .or(cfg_parse(file.granularity.as_ref())?)
        .or(fallback.map(|r| r.granularity))
        .unwrap_or(HeadGranularity::LayerMean);
    Ok(Resolved {
        strategy: strategy.with_strict(strict),
        fconfig: FeatureConfig::new(features).with_granularity(granularity),
    })
}

fn resolve_family(t: &TrainFlags, file: &FileConfig) -> CliResult<Family> {
    Ok(t.family.or(cfg_parse(file.family.as_ref())?).unwrap_or(Family::Logreg))
}

fn resolve_train(t: &TrainFlags, file: &FileConfig) -> CliResult<TrainConfig> {
    let mut c = file.train.clone().unwrap_or_default();
    if let Some(seed) = t.seed.or(file.seed) {
        c.seed = seed;
    }
    if let Some(v) = t.learning_rate {
        c.learning_rate = v;
    }
    if let Some(v) = t.epochs {
        c.epochs = v;
    }
    if let Some(v) = t.l2 {
        c.l2 = v;
    }
    if let Some(v) = t.minibatch {
        c.batch = Batch::Minibatch(v);
    }
    if let Some(v) = &t.hidden {
        c.mlp_hidden = v.clone();
    }
    c.validate()?;
    Ok(c)
}

fn resolve_protocol(s: &SplitFlags, train: TrainConfig, file: &FileConfig) -> Protocol {
    let d = Protocol::default();
    Protocol {
        train,
        test_fraction: s.test_fraction.or(file.test_fraction).unwrap_or(d.test_fraction),
        split_seed: s.split_seed.or(file.split_seed).unwrap_or(d.split_seed),
        threshold: s.threshold.or(file.threshold).unwrap_or(d.threshold),
    }
}

fn load_set(dir: &Path) -> CliResult<TraceSet> {
    log::info!("loading trace set {}", dir.display());
    Ok(load_trace_set(dir)?)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let mut text = serde_json::to_vec_pretty(value).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    text.push(b'\n');
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| {
        CliError::Core(Error::Io {
            path: dir.into(),
            source: e,
        })
    })
}

fn cmd_synth(a: &SynthArgs, file: &FileConfig) -> CliResult<()> {
    let out = required(a.out.clone().or(file.out.clone()), "out")?;
    let mut config = file.synth.clone().unwrap_or_default();
    if let Some(n) = a.n_traces.or(file.n_traces) {
        config.n_traces = n;
    }
    if let Some(name) = a.dataset_name.clone().or(file.dataset_name.clone()) {
        config.dataset_name = name;
    }
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let set = generate(&config, seed)?;
    write_trace_set(&set, &out)?;
    log::info!("wrote {} traces to {}", set.len(), out.display());
    Ok(())
}

fn cmd_extract(a: &ExtractArgs, file: &FileConfig) -> CliResult<()> {
    let dir = required(a.trace_dir.clone().or(file.trace_dir.clone()), "trace-dir")?;
    let out = required(a.out.clone().or(file.out.clone()), "out")?;
    let r = resolve_features(&a.feat, file, None)?;
    let set = load_set(&dir)?;
    let table = extract_feature_table(&set, &r.fconfig, r.strategy)?;
    table.write(&out)?;
    log::info!("{} rows x {} columns -> {}", table.len(), table.n_features(), out.display());
    Ok(())
}

fn subset_ids(set: &TraceSet, subset: Subset, protocol: &Protocol) -> CliResult<Option<std::collections::HashSet<String>>> {
    if subset == Subset::All {
        return Ok(None);
    }
    let split = split_traces(set, protocol.test_fraction, protocol.split_seed)?;
    Ok(Some(if subset == Subset::Train { split.train } else { split.test }))
}

fn cmd_train(a: &TrainArgs, file: &FileConfig) -> CliResult<()> {
    let dir = required(a.trace_dir.clone().or(file.trace_dir.clone()), "trace-dir")?;
    let out = required(a.out.clone().or(file.out.clone()), "out")?;
    let r = resolve_features(&a.feat, file, None)?;
    let family = resolve_family(&a.train, file)?;
    let protocol = resolve_protocol(&a.split, resolve_train(&a.train, file)?, file);
    let subset = a.subset.or(file.subset).unwrap_or(Subset::Train);
    let set = load_set(&dir)?;
    let mut table = extract_feature_table(&set, &r.fconfig, r.strategy)?;
    if let Some(ids) = subset_ids(&set, subset, &protocol)? {
        table = table.filter_traces(&ids);
    }
    let model = train(family, &table, &protocol.train)?;
    save_model(&model, &out)?;
    let record = RunRecord {
        family,
        strategy: r.strategy.to_string(),
        features: r.fconfig.enabled_features.clone(),
        granularity: r.fconfig.head_granularity,
        test_fraction: protocol.test_fraction,
        split_seed: protocol.split_seed,
        subset,
        train: protocol.train.clone(),
    };
    write_json(&record, &out.join(RUN_FILE))?;
    log::info!("trained {family} on {} rows -> {}", table.len(), out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs, file: &FileConfig) -> CliResult<()> {
    let dir = required(a.trace_dir.clone().or(file.trace_dir.clone()), "trace-dir")?;
    let model_dir = required(a.model.clone().or(file.model.clone()), "model")?;
    let out = required(a.out.clone().or(file.out.clone()), "out")?;
    let model = load_model(&model_dir)?;
    let run_path = model_dir.join(RUN_FILE);
    let record: Option<RunRecord> = if run_path.exists() {
        let text = fs::read(&run_path).map_err(|e| Error::Io {
            path: run_path.clone(),
            source: e,
        })?;
        Some(serde_json::from_slice(&text).map_err(|e| Error::Json {
            path: run_path.clone(),
            source: e,
        })?)
    } else {
        None
    };
    let r = resolve_features(&a.feat, file, record.as_ref())?;
    let d = Protocol::default();
    let protocol = Protocol {
        test_fraction: a
            .split
            .test_fraction
            .or(file.test_fraction)
            .or(record.as_ref().map(|r| r.test_fraction))
            .unwrap_or(d.test_fraction),
        split_seed: a
            .split
            .split_seed
            .or(file.split_seed)
            .or(record.as_ref().map(|r| r.split_seed))
            .unwrap_or(d.split_seed),
        threshold: a.split.threshold.or(file.threshold).unwrap_or(d.threshold),
        ..d
    };
    let subset = a.subset.or(file.subset).unwrap_or(Subset::Test);
    let set = load_set(&dir)?;
    let mut table = extract_feature_table(&set, &r.fconfig, r.strategy)?;
    if let Some(ids) = subset_ids(&set, subset, &protocol)? {
        table = table.filter_traces(&ids);
    }
    let report = evaluate(&model, &table, protocol.threshold)?;
    create_dir(&out)?;
    write_json(&report, &out.join("eval.json"))?;
    let probs = model.predict_table(&table)?;
    let mut csv = String::from("trace_id,unit_start,unit_end,label,prob\n");
    for (row, p) in table.rows.iter().zip(&probs) {
        csv.push_str(&format!(
            "{},{},{},{},{:.9}\n",
            row.trace_id,
            row.unit.start,
            row.unit.end,
            row.label.map(|l| l.as_str()).unwrap_or(""),
            p
        ));
    }
    fs::write(out.join("predictions.csv"), csv).map_err(|e| Error::Io {
        path: out.join("predictions.csv"),
        source: e,
    })?;
    log::info!("response accuracy {:.4} on {} responses", report.response.accuracy, report.response.total());
    Ok(())
}

fn cmd_ablate(a: &AblateArgs, file: &FileConfig) -> CliResult<()> {
    let dir = required(a.trace_dir.clone().or(file.trace_dir.clone()), "trace-dir")?;
    let out = required(a.out.clone().or(file.out.clone()), "out")?;
    let r = resolve_features(&a.feat, file, None)?;
    let protocol = resolve_protocol(&a.split, resolve_train(&a.train, file)?, file);
    let names = a.families.clone().or(file.families.clone());
    let families = match names {
        Some(list) if list.iter().any(|s| s.trim() == "all") => Family::ALL.to_vec(),
        Some(list) => list.iter().map(|s| s.parse()).collect::<Result<Vec<Family>, Error>>()?,
        None => vec![resolve_family(&a.train, file)?],
    };
    let set = load_set(&dir)?;
    let report = run_ablation(&set, r.strategy, &families, &r.fconfig, &protocol)?;
    report.write(&out)?;
    Ok(())
}

fn cmd_tokens(a: &TokensArgs, file: &FileConfig) -> CliResult<()> {
    let dir = required(a.trace_dir.clone().or(file.trace_dir.clone()), "trace-dir")?;
    let out = required(a.out.clone().or(file.out.clone()), "out")?;
    let strict = a.strict_windows || file.strict_windows.unwrap_or(false);
    let strategies: Vec<SelectionStrategy> = if !a.strategies.is_empty() {
        a.strategies.clone()
    } else if let Some(list) = &file.strategies {
        list.iter().map(|s| s.parse()).collect::<Result<_, Error>>()?
    } else {
        DEFAULT_TOKEN_STRATEGIES.iter().map(|s| s.parse()).collect::<Result<_, Error>>()?
    };
    let strategies: Vec<_> = strategies.into_iter().map(|s| s.with_strict(strict)).collect();
    let feat = FeatureArgs {
        features: a.features.clone(),
        granularity: a.granularity,
        ..FeatureArgs::default()
    };
    let r = resolve_features(&feat, file, None)?;
    let family = resolve_family(&a.train, file)?;
    let protocol = resolve_protocol(&a.split, resolve_train(&a.train, file)?, file);
    let set = load_set(&dir)?;
    let report = run_token_study(&set, &strategies, family, &r.fconfig, &protocol)?;
    report.write(&out)?;
    Ok(())
}

fn parse_feature_set(s: &str) -> CliResult<(String, Vec<FeatureId>)> {
    let (name, list) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("feature set '{s}' must be NAME=LIST")))?;
    Ok((name.trim().to_string(), parse_feature_list(list)?))
}

fn cmd_transfer(a: &TransferArgs, file: &FileConfig) -> CliResult<()> {
    let out = required(a.out.clone().or(file.out.clone()), "out")?;
    let train_dirs = if a.train_sets.is_empty() {
        file.train_sets.clone().unwrap_or_default()
    } else {
        a.train_sets.clone()
    };
    if train_dirs.is_empty() {
        return Err(CliError::Usage("at least one --train-set is required".into()));
    }
    let test_dirs = if !a.test_sets.is_empty() {
        a.test_sets.clone()
    } else {
        file.test_sets.clone().unwrap_or_else(|| train_dirs.clone())
    };
    let feature_sets: Vec<(String, Vec<FeatureId>)> = if !a.feature_sets.is_empty() {
        a.feature_sets.iter().map(|s| parse_feature_set(s)).collect::<CliResult<_>>()?
    } else if let Some(map) = &file.feature_sets {
        map.iter()
            .map(|(k, v)| Ok((k.clone(), parse_feature_list(v)?)))
            .collect::<CliResult<_>>()?
    } else {
        vec![("all".into(), FeatureId::ALL.to_vec())]
    };
    let r = resolve_features(&a.feat, file, None)?;
    let family = resolve_family(&a.train, file)?;
    let protocol = resolve_protocol(&a.split, resolve_train(&a.train, file)?, file);
    let train_sets = train_dirs.iter().map(|d| load_set(d)).collect::<CliResult<Vec<_>>>()?;
    let test_sets = test_dirs.iter().map(|d| load_set(d)).collect::<CliResult<Vec<_>>>()?;
    let report = run_transfer(
        &train_sets,
        &test_sets,
        &feature_sets,
        family,
        r.strategy,
        &r.fconfig,
        &protocol,
    )?;
    report.write(&out)?;
    Ok(())
}

fn cmd_curves(a: &CurvesArgs, file: &FileConfig) -> CliResult<()> {
    let dir = required(a.trace_dir.clone().or(file.trace_dir.clone()), "trace-dir")?;
    let out = required(a.out.clone().or(file.out.clone()), "out")?;
    let feature = match a.feature {
        Some(f) => f,
        None => cfg_parse(file.feature.as_ref())?.unwrap_or(FeatureId::LookbackRatio),
    };
    let axis = match a.axis.or(file.axis).unwrap_or(Axis::Layer) {
        Axis::Layer => CurveAxis::Layer,
        Axis::Head => CurveAxis::Head,
    };
    let set = load_set(&dir)?;
    let (ca, cb) = match a.compare.clone().or(file.compare.clone()) {
        Some(other) => (set, load_set(&other)?),
        None => {
            let (fact, halu) = set.split_by_label();
            (halu, fact)
        }
    };
    let curve = cohort_curves(&ca, &cb, feature, axis)?;
    curve.write(&out)?;
    Ok(())
}

fn cmd_bench(a: &BenchArgs, file: &FileConfig) -> CliResult<()> {
    let dir = required(a.trace_dir.clone().or(file.trace_dir.clone()), "trace-dir")?;
    let out = required(a.out.clone().or(file.out.clone()), "out")?;
    let features = match &a.features {
        Some(f) => f.0.clone(),
        None => match &file.features {
            Some(s) => parse_feature_list(s)?,
            None => FeatureId::ALL.to_vec(),
        },
    };
    let reps = a.repetitions.or(file.repetitions).unwrap_or(5);
    let set = load_set(&dir)?;
    let report = bench_overhead(&set, &features, reps)?;
    report.write(&out)?;
    Ok(())
}

fn cmd_validate(a: &ValidateArgs, file: &FileConfig) -> CliResult<()> {
    let dir = required(a.trace_dir.clone().or(file.trace_dir.clone()), "trace-dir")?;
    let set = load_set(&dir)?;
    set.validate()?;
    log::info!("{}: {} traces, {} generated tokens, valid", set.dataset_name, set.len(), set.total_tokens());
    Ok(())
}

fn init_logging(level: LogLevel) {
    let filter = match level {
        LogLevel::Error => log::LevelFilter::Error,
        LogLevel::Warn => log::LevelFilter::Warn,
        LogLevel::Info => log::LevelFilter::Info,
        LogLevel::Debug => log::LevelFilter::Debug,
    };
    // a second call (in-process tests) keeps the first logger
    let _ = env_logger::Builder::new()
        .filter_level(filter)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let workers = cli.workers.or(file.workers).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Synth(a) => cmd_synth(a, &file),
        Command::Extract(a) => cmd_extract(a, &file),
        Command::Train(a) => cmd_train(a, &file),
        Command::Eval(a) => cmd_eval(a, &file),
        Command::Ablate(a) => cmd_ablate(a, &file),
        Command::Tokens(a) => cmd_tokens(a, &file),
        Command::Transfer(a) => cmd_transfer(a, &file),
        Command::Curves(a) => cmd_curves(a, &file),
        Command::Bench(a) => cmd_bench(a, &file),
        Command::Validate(a) => cmd_validate(a, &file),
    })
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // help/version go to stdout, real errors to stderr
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    init_logging(cli.log_level);
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("haluprobe: {e}");
            e.exit_code()
        }
    }
}
