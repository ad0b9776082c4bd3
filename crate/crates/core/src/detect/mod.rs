//! Detector families trained from scratch on feature tables: logistic
//! regression, MLP, a siamese distance model and a soft-voting ensemble.

mod io;
pub mod network;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureDescriptor, FeatureTable};
use crate::trace::Label;
use network::{flatten_grads, Dense, Network};

pub use io::{load_model, save_model, MODEL_MAGIC, MODEL_VERSION};

/// Step halvings tried before a full-batch step is declared converged.
const MAX_HALVINGS: usize = 40;
/// Added inside the square root of pair distances.
const DIST_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Logreg,
    Mlp,
    Siamese,
    Ensemble,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Logreg, Family::Mlp, Family::Siamese, Family::Ensemble];

    pub fn name(self) -> &'static str {
        match self {
            Family::Logreg => "logreg",
            Family::Mlp => "mlp",
            Family::Siamese => "siamese",
            Family::Ensemble => "ensemble",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown detector family '{s}' (logreg|mlp|siamese|ensemble)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batch {
    Full,
    Minibatch(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SiameseConfig {
    pub embedding_dim: usize,
    pub margin: f64,
    /// Size of the fixed, class-balanced pair set sampled once per run.
    pub pairs_per_epoch: usize,
}

impl Default for SiameseConfig {
    fn default() -> Self {
        SiameseConfig {
            embedding_dim: 16,
            margin: 1.0,
            pairs_per_epoch: 2048,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub members: usize,
    pub member_family: Family,
    /// Equal member weights instead of accuracy-proportional ones.
    pub uniform: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            members: 3,
            member_family: Family::Logreg,
            uniform: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub batch: Batch,
    pub mlp_hidden: Vec<usize>,
    pub siamese: SiameseConfig,
    pub ensemble: EnsembleConfig,
    /// Inverse-frequency class weights in the loss.
    pub class_weighting: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1.0,
            epochs: 300,
            l2: 1e-3,
            batch: Batch::Full,
            mlp_hidden: vec![64, 32],
            siamese: SiameseConfig::default(),
            ensemble: EnsembleConfig::default(),
            class_weighting: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and > 0");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad("l2 must be finite and >= 0");
        }
        if self.batch == Batch::Minibatch(0) {
            return bad("minibatch size must be >= 1");
        }
        if self.mlp_hidden.contains(&0) {
            return bad("hidden widths must be >= 1");
        }
        let s = &self.siamese;
        if s.embedding_dim == 0 || s.margin.is_nan() || s.margin <= 0.0 || s.pairs_per_epoch == 0 {
            return bad("siamese needs embedding_dim >= 1, margin > 0 and pairs_per_epoch >= 1");
        }
        if self.ensemble.members < 2 || self.ensemble.member_family == Family::Ensemble {
            return bad("ensemble needs >= 2 non-ensemble members");
        }
        Ok(())
    }
}

/// Per-dimension z-scoring fitted on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Dimensions with zero variance; their stddev is stored as 1.
    pub degenerate: Vec<usize>,
}

impl Standardizer {
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::Layout(format!(
                "vector has {} values, standardizer expects {}",
                x.len(),
                self.mean.len()
            )));
        }
        Ok(x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }
}

pub fn fit_standardizer(table: &FeatureTable) -> Result<Standardizer> {
    let rows: Vec<&[f64]> = table.rows.iter().map(|r| r.values.as_slice()).collect();
    fit_rows(&rows, table.n_features())
}

fn fit_rows(rows: &[&[f64]], dim: usize) -> Result<Standardizer> {
    if rows.is_empty() {
        return Err(Error::Training("cannot fit a standardizer on an empty table".into()));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        mean.iter_mut().zip(r.iter()).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in rows {
        var.iter_mut()
            .zip(r.iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m) * (v - m));
    }
    let mut degenerate = Vec::new();
    let std = var
        .into_iter()
        .enumerate()
        .map(|(j, s)| {
            let sd = (s / n).sqrt();
            // relative test keeps constant columns with rounding noise out
            if sd <= 1e-12 * mean[j].abs().max(1e-300) || sd == 0.0 {
                degenerate.push(j);
                1.0
            } else {
                sd
            }
        })
        .collect();
    Ok(Standardizer { mean, std, degenerate })
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelBody {
    /// Logistic regression (no hidden layer) or MLP; one output logit.
    Classifier(Network),
    Siamese {
        encoder: Network,
        margin: f64,
        /// Mean embedding of factual rows.
        proto_fact: Vec<f64>,
        /// Mean embedding of hallucinated rows.
        proto_halu: Vec<f64>,
        temperature: f64,
    },
    Ensemble {
        members: Vec<DetectorModel>,
        weights: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorModel {
    pub family: Family,
    pub layout: Vec<FeatureDescriptor>,
    /// `None` for ensembles; members standardize on their own.
    pub standardizer: Option<Standardizer>,
    pub seed: u64,
    pub body: ModelBody,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn euclid(a: ArrayView1<f64>, b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl DetectorModel {
    pub fn n_features(&self) -> usize {
        self.layout.len()
    }

    /// Errors unless the model belongs to `family`.
    pub fn expect_family(&self, family: Family) -> Result<()> {
        if self.family != family {
            return Err(Error::Model(format!(
                "model is a {} detector, not {family}",
                self.family
            )));
        }
        Ok(())
    }

    pub fn check_layout(&self, layout: &[FeatureDescriptor]) -> Result<()> {
        if layout != self.layout.as_slice() {
            let first = layout.iter().zip(&self.layout).position(|(a, b)| a != b);
            return Err(Error::Layout(format!(
                "table has {} columns, model was trained on {}{}",
                layout.len(),
                self.layout.len(),
                first.map(|i| format!("; first difference at column {i}")).unwrap_or_default()
            )));
        }
        Ok(())
    }

    /// Hallucination probability for one raw feature vector.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features() {
            return Err(Error::Layout(format!(
                "vector has {} values, model expects {}",
                x.len(),
                self.n_features()
            )));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Undefined(format!("non-finite input at column {i}")));
        }
        let z = match &self.standardizer {
            Some(s) => s.apply(x)?,
            None => x.to_vec(),
        };
        Ok(self.score(&z))
    }

    fn score(&self, z: &[f64]) -> f64 {
        let row = ndarray::ArrayView2::from_shape((1, z.len()), z).expect("row shape");
        match &self.body {
            ModelBody::Classifier(net) => sigmoid(net.forward(row)[[0, 0]]),
            ModelBody::Siamese {
                encoder,
                proto_fact,
                proto_halu,
                temperature,
                ..
            } => {
                let e = encoder.forward(row);
                let e = e.row(0);
                sigmoid((euclid(e, proto_fact) - euclid(e, proto_halu)) / temperature)
            }
            ModelBody::Ensemble { members, weights } => members
                .iter()
                .zip(weights)
                .map(|(m, w)| w * m.predict(z).unwrap_or(0.5))
                .sum::<f64>()
                .clamp(0.0, 1.0),
        }
    }

    pub fn predict_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        rows.par_iter().map(|r| self.predict(r)).collect()
    }

    /// Predictions for every row of `table` after a layout check.
    pub fn predict_table(&self, table: &FeatureTable) -> Result<Vec<f64>> {
        self.check_layout(&table.layout)?;
        table.rows.par_iter().map(|r| self.predict(&r.values)).collect()
    }
}

/// Convenience accessor used by the CLI and the FFI.
pub fn predict(model: &DetectorModel, x: &[f64]) -> Result<f64> {
    model.predict(x)
}

pub fn apply_standardizer(model: &DetectorModel, x: &[f64]) -> Result<Vec<f64>> {
    match &model.standardizer {
        Some(s) => s.apply(x),
        None => Err(Error::Model("ensemble models have no standardizer of their own".into())),
    }
}

struct Labeled {
    x: Array2<f64>,
    y: Vec<f64>,
    standardizer: Standardizer,
}

fn labeled_rows(table: &FeatureTable) -> Result<Vec<(&[f64], bool)>> {
    let rows: Vec<(&[f64], bool)> = table
        .rows
        .iter()
        .filter_map(|r| r.label.map(|l| (r.values.as_slice(), l.is_halu())))
        .collect();
    let halu = rows.iter().filter(|r| r.1).count();
    if halu == 0 || halu == rows.len() {
        return Err(Error::Training(format!(
            "training needs both classes; got {halu} hallucinated of {} labeled rows",
            rows.len()
        )));
    }
    Ok(rows)
}

fn prepare(rows: &[(&[f64], bool)], dim: usize) -> Result<Labeled> {
    let raw: Vec<&[f64]> = rows.iter().map(|r| r.0).collect();
    let standardizer = fit_rows(&raw, dim)?;
    let mut x = Array2::zeros((rows.len(), dim));
    for (i, (v, _)) in rows.iter().enumerate() {
        for (j, val) in v.iter().enumerate() {
            x[[i, j]] = (val - standardizer.mean[j]) / standardizer.std[j];
        }
    }
    Ok(Labeled {
        x,
        y: rows.iter().map(|r| if r.1 { 1.0 } else { 0.0 }).collect(),
        standardizer,
    })
}

fn class_weights(y: &[f64], enabled: bool) -> Vec<f64> {
    if !enabled {
        return vec![1.0; y.len()];
    }
    let n = y.len() as f64;
    let pos = y.iter().filter(|&&v| v > 0.5).count() as f64;
    let (wp, wn) = (n / (2.0 * pos), n / (2.0 * (n - pos)));
    y.iter().map(|&v| if v > 0.5 { wp } else { wn }).collect()
}

/// A differentiable training loss over a subset of items.
trait Objective: Sync {
    fn n_items(&self) -> usize;
    /// Loss and gradient over `items` (all items when `None`).
    fn eval(&self, net: &Network, items: Option<&[usize]>, with_grad: bool) -> (f64, Vec<Dense>);
}

struct BceObjective<'a> {
    x: &'a Array2<f64>,
    y: &'a [f64],
    w: Vec<f64>,
    l2: f64,
}

impl Objective for BceObjective<'_> {
    fn n_items(&self) -> usize {
        self.y.len()
    }

    fn eval(&self, net: &Network, items: Option<&[usize]>, with_grad: bool) -> (f64, Vec<Dense>) {
        let owned;
        let (x, idx): (ndarray::ArrayView2<f64>, Vec<usize>) = match items {
            Some(ix) => {
                owned = self.x.select(Axis(0), ix);
                (owned.view(), ix.to_vec())
            }
            None => (self.x.view(), (0..self.y.len()).collect()),
        };
        let (out, tape) = net.forward_tape(x);
        let wsum: f64 = idx.iter().map(|&i| self.w[i]).sum();
        let mut loss = 0.0;
        let mut d_out = Array2::zeros((idx.len(), 1));
        for (r, &i) in idx.iter().enumerate() {
            let z = out[[r, 0]];
            loss += self.w[i] * (softplus(z) - self.y[i] * z);
            d_out[[r, 0]] = self.w[i] * (sigmoid(z) - self.y[i]) / wsum;
        }
        let loss = loss / wsum + net.l2_penalty(self.l2);
        if !with_grad {
            return (loss, Vec::new());
        }
        let mut grads = net.backward(&tape, d_out);
        net.add_l2_grad(&mut grads, self.l2);
        (loss, grads)
    }
}

struct PairObjective<'a> {
    x: &'a Array2<f64>,
    pairs: &'a [(usize, usize, bool)],
    margin: f64,
    l2: f64,
}

impl PairObjective<'_> {
    /// Contrastive loss of one pair of embeddings and its gradient with
    /// respect to the first one (the second gets the negation).
    fn pair_term(&self, a: ArrayView1<f64>, b: ArrayView1<f64>, same: bool) -> (f64, Array1<f64>) {
        let diff = &a - &b;
        let sq = diff.dot(&diff);
        if same {
            (sq, diff * 2.0)
        } else {
            let d = (sq + DIST_EPS).sqrt();
            if d >= self.margin {
                (0.0, Array1::zeros(diff.len()))
            } else {
                let gap = self.margin - d;
                (gap * gap, diff * (-2.0 * gap / d))
            }
        }
    }
}

impl Objective for PairObjective<'_> {
    fn n_items(&self) -> usize {
        self.pairs.len()
    }

    fn eval(&self, net: &Network, items: Option<&[usize]>, with_grad: bool) -> (f64, Vec<Dense>) {
        let (emb, tape) = net.forward_tape(self.x.view());
        let all: Vec<usize>;
        let idx = match items {
            Some(ix) => ix,
            None => {
                all = (0..self.pairs.len()).collect();
                &all
            }
        };
        let p = idx.len() as f64;
        let mut loss = 0.0;
        let mut d_emb = Array2::zeros(emb.raw_dim());
        for &k in idx {
            let (i, j, same) = self.pairs[k];
            let (l, g) = self.pair_term(emb.row(i), emb.row(j), same);
            loss += l;
            if with_grad {
                d_emb.row_mut(i).scaled_add(1.0 / p, &g);
                d_emb.row_mut(j).scaled_add(-1.0 / p, &g);
            }
        }
        let loss = loss / p + net.l2_penalty(self.l2);
        if !with_grad {
            return (loss, Vec::new());
        }
        let mut grads = net.backward(&tape, d_emb);
        net.add_l2_grad(&mut grads, self.l2);
        (loss, grads)
    }
}

/// Full-batch gradient descent. A step that would raise the loss is halved
/// until it does not; the step grows back toward the configured rate after
/// each accepted step, so the loss sequence never increases.
fn descend_full(obj: &dyn Objective, mut net: Network, config: &TrainConfig, history: &mut Vec<f64>) -> Result<Network> {
    let (mut loss, mut grads) = obj.eval(&net, None, true);
    history.push(loss);
    if !loss.is_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            reason: format!("initial loss is {loss}"),
        });
    }
    let mut step = config.learning_rate;
    for epoch in 1..=config.epochs {
        let mut accepted = false;
        let mut last_finite = true;
        for _ in 0..=MAX_HALVINGS {
            let cand = net.stepped(&grads, step);
            let (c_loss, c_grads) = obj.eval(&cand, None, true);
            last_finite = c_loss.is_finite();
            if last_finite && c_loss <= loss {
                net = cand;
                loss = c_loss;
                grads = c_grads;
                history.push(loss);
                accepted = true;
                step = (step * 2.0).min(config.learning_rate);
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            if !last_finite {
                return Err(Error::Divergence {
                    epoch,
                    reason: "loss is non-finite for every step size tried".into(),
                });
            }
            log::debug!("descent stalled at epoch {epoch}, loss {loss:.6e}; treating as converged");
            break;
        }
        log::trace!("epoch {epoch}: loss {loss:.6e}");
    }
    Ok(net)
}

/// Shuffled minibatch gradient descent at a fixed rate; no monotonicity.
fn descend_minibatch(
    obj: &dyn Objective,
    mut net: Network,
    config: &TrainConfig,
    size: usize,
    history: &mut Vec<f64>,
) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(7);
    let mut order: Vec<usize> = (0..obj.n_items()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(size) {
            let (loss, grads) = obj.eval(&net, Some(batch), true);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    reason: format!("minibatch loss is {loss}"),
                });
            }
            net = net.stepped(&grads, config.learning_rate);
        }
        let (loss, _) = obj.eval(&net, None, false);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                reason: format!("loss is {loss}"),
            });
        }
        history.push(loss);
    }
    Ok(net)
}

fn descend(obj: &dyn Objective, net: Network, config: &TrainConfig, history: &mut Vec<f64>) -> Result<Network> {
    match config.batch {
        Batch::Full => descend_full(obj, net, config, history),
        Batch::Minibatch(size) => descend_minibatch(obj, net, config, size, history),
    }
}

fn init_rng(config: &TrainConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(config.seed)
}

fn train_classifier(
    table: &FeatureTable,
    config: &TrainConfig,
    family: Family,
    history: &mut Vec<f64>,
) -> Result<DetectorModel> {
    config.validate()?;
    let rows = labeled_rows(table)?;
    let data = prepare(&rows, table.n_features())?;
    let mut widths = vec![table.n_features()];
    if family == Family::Mlp {
        widths.extend(&config.mlp_hidden);
    }
    widths.push(1);
    let net = match family {
        Family::Logreg => Network::zeros(&widths),
        _ => Network::init(&widths, &mut init_rng(config)),
    };
    let obj = BceObjective {
        x: &data.x,
        y: &data.y,
        w: class_weights(&data.y, config.class_weighting),
        l2: config.l2,
    };
    let mut net = descend(&obj, net, config, history)?;
    net.round_to_f32();
    Ok(DetectorModel {
        family,
        layout: table.layout.clone(),
        standardizer: Some(data.standardizer),
        seed: config.seed,
        body: ModelBody::Classifier(net),
    })
}

/// Weighted logistic regression; weights start at zero.
pub fn train_logreg(table: &FeatureTable, config: &TrainConfig) -> Result<DetectorModel> {
    train_classifier(table, config, Family::Logreg, &mut Vec::new())
}

pub fn train_mlp(table: &FeatureTable, config: &TrainConfig) -> Result<DetectorModel> {
    train_classifier(table, config, Family::Mlp, &mut Vec::new())
}

fn sample_pairs(y: &[f64], count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize, bool)>> {
    let halu: Vec<usize> = (0..y.len()).filter(|&i| y[i] > 0.5).collect();
    let fact: Vec<usize> = (0..y.len()).filter(|&i| y[i] <= 0.5).collect();
    if halu.len() < 2 || fact.len() < 2 {
        return Err(Error::Training(format!(
            "siamese pairs need >= 2 rows per class, got {} hallucinated and {} factual",
            halu.len(),
            fact.len()
        )));
    }
    let same = |pool: &[usize], rng: &mut ChaCha8Rng| {
        let a = rng.random_range(0..pool.len());
        let mut b = rng.random_range(0..pool.len() - 1);
        if b >= a {
            b += 1;
        }
        (pool[a], pool[b], true)
    };
    Ok((0..count)
        .map(|k| match k % 4 {
            0 => same(&halu, rng),
            1 => same(&fact, rng),
            _ => (
                halu[rng.random_range(0..halu.len())],
                fact[rng.random_range(0..fact.len())],
                false,
            ),
        })
        .collect())
}

fn weighted_bce(gaps: &[f64], y: &[f64], w: &[f64], temperature: f64) -> f64 {
    gaps.iter()
        .zip(y.iter().zip(w))
        .map(|(g, (t, wi))| {
            let z = g / temperature;
            wi * (softplus(z) - t * z)
        })
        .sum::<f64>()
}

/// Golden-section search on `log T` for the temperature minimizing the
/// weighted cross-entropy of `sigmoid(gap / T)`.
fn fit_temperature(gaps: &[f64], y: &[f64], w: &[f64]) -> f64 {
    let scale = gaps.iter().map(|g| g.abs()).sum::<f64>() / gaps.len() as f64 + 1e-12;
    let f = |u: f64| weighted_bce(gaps, y, w, u.exp());
    let (mut a, mut b) = ((scale * 1e-4).ln(), (scale * 1e4).ln());
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..100 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    ((a + b) / 2.0).exp()
}

/// Shared-weight encoder trained with a contrastive loss over a fixed,
/// class-balanced pair set; scores by distance to class prototypes.
pub fn train_siamese(table: &FeatureTable, config: &TrainConfig) -> Result<DetectorModel> {
    siamese_inner(table, config, &mut Vec::new())
}

fn siamese_inner(table: &FeatureTable, config: &TrainConfig, history: &mut Vec<f64>) -> Result<DetectorModel> {
    config.validate()?;
    let rows = labeled_rows(table)?;
    let data = prepare(&rows, table.n_features())?;
    let mut rng = init_rng(config);
    let mut widths = vec![table.n_features()];
    widths.extend(&config.mlp_hidden);
    widths.push(config.siamese.embedding_dim);
    let net = Network::init(&widths, &mut rng);
    let pairs = sample_pairs(&data.y, config.siamese.pairs_per_epoch, &mut rng)?;
    let obj = PairObjective {
        x: &data.x,
        pairs: &pairs,
        margin: config.siamese.margin,
        l2: config.l2,
    };
    let mut encoder = descend(&obj, net, config, history)?;
    encoder.round_to_f32();

    let emb = encoder.forward(data.x.view());
    let e = config.siamese.embedding_dim;
    let mut protos = [vec![0.0; e], vec![0.0; e]];
    let mut counts = [0.0f64; 2];
    for (row, &t) in emb.rows().into_iter().zip(&data.y) {
        let c = (t > 0.5) as usize;
        counts[c] += 1.0;
        protos[c].iter_mut().zip(row.iter()).for_each(|(p, v)| *p += v);
    }
    for c in 0..2 {
        protos[c].iter_mut().for_each(|p| *p /= counts[c]);
    }
    let [proto_fact, proto_halu] = protos;
    let gaps: Vec<f64> = emb
        .rows()
        .into_iter()
        .map(|r| euclid(r, &proto_fact) - euclid(r, &proto_halu))
        .collect();
    let temperature = fit_temperature(&gaps, &data.y, &class_weights(&data.y, config.class_weighting));
    Ok(DetectorModel {
        family: Family::Siamese,
        layout: table.layout.clone(),
        standardizer: Some(data.standardizer),
        seed: config.seed,
        body: ModelBody::Siamese {
            encoder,
            margin: config.siamese.margin,
            proto_fact,
            proto_halu,
            temperature,
        },
    })
}

/// Unit-level accuracy at threshold 0.5 over labeled rows.
fn unit_accuracy(model: &DetectorModel, table: &FeatureTable) -> Result<f64> {
    let probs = model.predict_table(table)?;
    let (mut hit, mut n) = (0usize, 0usize);
    for (p, r) in probs.iter().zip(&table.rows) {
        if let Some(l) = r.label {
            n += 1;
            hit += ((*p >= 0.5) == l.is_halu()) as usize;
        }
    }
    Ok(if n == 0 { 0.0 } else { hit as f64 / n as f64 })
}

/// Soft vote over trained members. Weights are proportional to each
/// member's training accuracy on `table` unless `uniform`.
pub fn train_ensemble(members: Vec<DetectorModel>, table: &FeatureTable, uniform: bool) -> Result<DetectorModel> {
    if members.len() < 2 {
        return Err(Error::Config("an ensemble needs at least 2 members".into()));
    }
    for m in &members {
        m.check_layout(&table.layout)?;
    }
    let raw: Vec<f64> = if uniform {
        vec![1.0; members.len()]
    } else {
        members.iter().map(|m| unit_accuracy(m, table)).collect::<Result<_>>()?
    };
    let total: f64 = raw.iter().sum();
    let weights = if total > 0.0 {
        raw.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / members.len() as f64; members.len()]
    };
    Ok(DetectorModel {
        family: Family::Ensemble,
        layout: table.layout.clone(),
        standardizer: None,
        seed: members[0].seed,
        body: ModelBody::Ensemble { members, weights },
    })
}

/// Bootstrap resample of `table`'s labeled rows holding both classes.
fn bootstrap(table: &FeatureTable, rng: &mut ChaCha8Rng) -> FeatureTable {
    let labeled: Vec<usize> = (0..table.len()).filter(|&i| table.rows[i].label.is_some()).collect();
    loop {
        let pick: Vec<usize> = (0..labeled.len()).map(|_| labeled[rng.random_range(0..labeled.len())]).collect();
        let halu = pick.iter().filter(|&&i| table.rows[i].label == Some(Label::Hallucinated)).count();
        if halu > 1 && halu + 1 < pick.len() {
            return FeatureTable {
                rows: pick.iter().map(|&i| table.rows[i].clone()).collect(),
                ..table.clone_empty()
            };
        }
    }
}

impl FeatureTable {
    fn clone_empty(&self) -> FeatureTable {
        FeatureTable {
            layout: self.layout.clone(),
            strategy: self.strategy,
            dataset_name: self.dataset_name.clone(),
            rows: Vec::new(),
        }
    }
}

/// Trains any family. Ensembles train `config.ensemble.members` members of
/// `config.ensemble.member_family` on bootstrap resamples.
pub fn train(family: Family, table: &FeatureTable, config: &TrainConfig) -> Result<DetectorModel> {
    match family {
        Family::Logreg => train_logreg(table, config),
        Family::Mlp => train_mlp(table, config),
        Family::Siamese => train_siamese(table, config),
        Family::Ensemble => {
            config.validate()?;
            labeled_rows(table)?;
            let members = (0..config.ensemble.members)
                .into_par_iter()
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                    rng.set_stream(100 + i as u64);
                    let sample = bootstrap(table, &mut rng);
                    let cfg = TrainConfig {
                        seed: config.seed.wrapping_add(i as u64 + 1),
                        ..config.clone()
                    };
                    train(config.ensemble.member_family, &sample, &cfg)
                })
                .collect::<Result<Vec<_>>>()?;
            train_ensemble(members, table, config.ensemble.uniform)
        }
    }
}

/// Trains a single-model family and returns the training loss after
/// initialization and after every accepted step (full batch) or epoch
/// (minibatch).
pub fn train_with_history(family: Family, table: &FeatureTable, config: &TrainConfig) -> Result<(DetectorModel, Vec<f64>)> {
    let mut history = Vec::new();
    let model = match family {
        Family::Logreg | Family::Mlp => train_classifier(table, config, family, &mut history)?,
        Family::Siamese => siamese_inner(table, config, &mut history)?,
        Family::Ensemble => return Err(Error::Config("ensembles have no single loss history".into())),
    };
    Ok((model, history))
}

/// Largest relative gap between analytic and central-difference gradients
/// (step 1e-4, 64-bit) of the training loss at the seeded initial point.
/// Relative error is `|a - n| / max(|a|, |n|, 1e-4)`.
pub fn grad_check(family: Family, table: &FeatureTable, config: &TrainConfig) -> Result<f64> {
    const STEP: f64 = 1e-4;
    config.validate()?;
    let rows = labeled_rows(table)?;
    if rows.len() > 32 {
        return Err(Error::Config(format!("grad_check takes at most 32 rows, got {}", rows.len())));
    }
    let data = prepare(&rows, table.n_features())?;
    let mut rng = init_rng(config);
    let mut widths = vec![table.n_features()];
    let pairs: Vec<(usize, usize, bool)>;
    let obj: Box<dyn Objective + '_> = match family {
        Family::Logreg | Family::Mlp => {
            if family == Family::Mlp {
                widths.extend(&config.mlp_hidden);
            }
            widths.push(1);
            Box::new(BceObjective {
                x: &data.x,
                y: &data.y,
                w: class_weights(&data.y, config.class_weighting),
                l2: config.l2,
            })
        }
        Family::Siamese => {
            widths.extend(&config.mlp_hidden);
            widths.push(config.siamese.embedding_dim);
            let n = data.y.len();
            pairs = (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .map(|(i, j)| (i, j, (data.y[i] > 0.5) == (data.y[j] > 0.5)))
                .collect();
            Box::new(PairObjective {
                x: &data.x,
                pairs: &pairs,
                margin: config.siamese.margin,
                l2: config.l2,
            })
        }
        Family::Ensemble => {
            return Err(Error::Config("grad_check applies to logreg, mlp and siamese".into()));
        }
    };
    // random start so logreg weights are not all zero
    let net = Network::init(&widths, &mut rng);
    let (_, grads) = obj.eval(&net, None, true);
    let analytic = flatten_grads(&grads);
    let theta = net.flat();
    let worst = (0..theta.len())
        .into_par_iter()
        .map(|k| {
            let mut probe = net.clone();
            let mut p = theta.clone();
            p[k] = theta[k] + STEP;
            probe.set_flat(&p);
            let up = obj.eval(&probe, None, false).0;
            p[k] = theta[k] - STEP;
            probe.set_flat(&p);
            let down = obj.eval(&probe, None, false).0;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[k];
            (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4)
        })
        .reduce(|| 0.0, f64::max);
    Ok(worst)
}
