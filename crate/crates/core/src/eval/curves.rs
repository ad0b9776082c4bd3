use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::write_text;
use crate::error::{Error, Result};
use crate::features::{unit_vector, FeatureConfig, FeatureGroup, FeatureId, HeadGranularity};
use crate::trace::{InferenceTrace, Span, TraceSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveAxis {
    Layer,
    Head,
}

/// Per-index cohort means with standard errors (sample sd / sqrt n) of
/// per-response values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortCurve {
    pub feature: FeatureId,
    pub axis: CurveAxis,
    pub layer: Vec<usize>,
    pub head: Vec<Option<usize>>,
    pub mean_a: Vec<f64>,
    pub se_a: Vec<f64>,
    pub mean_b: Vec<f64>,
    pub se_b: Vec<f64>,
    pub n_a: usize,
    pub n_b: usize,
}

impl CohortCurve {
    pub fn len(&self) -> usize {
        self.layer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layer.is_empty()
    }

    /// `mean_a - mean_b` per index.
    pub fn gap(&self) -> Vec<f64> {
        self.mean_a.iter().zip(&self.mean_b).map(|(a, b)| a - b).collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut csv = String::from("layer,head,mean_a,se_a,mean_b,se_b,n_a,n_b\n");
        for i in 0..self.len() {
            csv.push_str(&format!(
                "{},{},{:.9},{:.9},{:.9},{:.9},{},{}\n",
                self.layer[i],
                self.head[i].map(|h| h.to_string()).unwrap_or_default(),
                self.mean_a[i],
                self.se_a[i],
                self.mean_b[i],
                self.se_b[i],
                self.n_a,
                self.n_b
            ));
        }
        write_text(&csv, path.as_ref())
    }

    /// Writes `curves_<feature>.csv` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.write_csv(dir.join(format!("curves_{}.csv", self.feature)))
    }
}

/// Per-layer RMS of the hidden state, averaged over generated tokens.
fn hidden_rms(trace: &InferenceTrace) -> Result<Vec<f64>> {
    let layers = trace.shape.layers;
    let mut out = vec![0.0; layers];
    for t in 0..trace.gen_len {
        for (l, acc) in out.iter_mut().enumerate() {
            let v = trace.hidden_vec(t, l)?;
            *acc += (v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / v.len() as f64).sqrt();
        }
    }
    out.iter_mut().for_each(|v| *v /= trace.gen_len as f64);
    Ok(out)
}

fn response_values(trace: &InferenceTrace, feature: FeatureId, config: &FeatureConfig) -> Result<Vec<f64>> {
    if feature == FeatureId::HiddenState {
        hidden_rms(trace)
    } else {
        unit_vector(trace, &Span::new(0, trace.gen_len), config)
    }
}

fn mean_se(values: &[Vec<f64>], width: usize) -> (Vec<f64>, Vec<f64>) {
    let n = values.len() as f64;
    let mut mean = vec![0.0; width];
    for v in values {
        mean.iter_mut().zip(v).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1.0));
    let se = (0..width)
        .map(|j| {
            if values.len() < 2 {
                return 0.0;
            }
            let ss: f64 = values.iter().map(|v| (v[j] - mean[j]).powi(2)).sum();
            (ss / (n - 1.0)).sqrt() / n.sqrt()
        })
        .collect();
    (mean, se)
}

/// Compares two cohorts (e.g. hallucinated vs factual, or with vs without
/// retrieval) on one feature. Per-token features are averaged over each
/// response; logit features treat the whole response as one unit; the
/// hidden state is summarized by its per-layer RMS.
pub fn cohort_curves(a: &TraceSet, b: &TraceSet, feature: FeatureId, axis: CurveAxis) -> Result<CohortCurve> {
    if a.meta.shape() != b.meta.shape() {
        return Err(Error::Layout("cohorts come from different model shapes".into()));
    }
    if axis == CurveAxis::Head && feature.group() != FeatureGroup::Attention {
        return Err(Error::Config(format!("{feature} has no per-head values")));
    }
    for set in [a, b] {
        if !set.meta.has(feature.section()) {
            return Err(Error::MissingSection(feature.section().name()));
        }
        if set.is_empty() {
            return Err(Error::Config(format!("cohort '{}' is empty", set.dataset_name)));
        }
    }
    let granularity = match axis {
        CurveAxis::Layer => HeadGranularity::LayerMean,
        CurveAxis::Head => HeadGranularity::PerHead,
    };
    let config = FeatureConfig::new(vec![feature]).with_granularity(granularity);
    let shape = a.meta.shape();
    let (layer, head): (Vec<usize>, Vec<Option<usize>>) = match axis {
        CurveAxis::Layer => ((0..shape.layers).collect(), vec![None; shape.layers]),
        CurveAxis::Head => (0..shape.layers)
            .flat_map(|l| (0..shape.heads).map(move |h| (l, Some(h))))
            .unzip(),
    };
    let collect = |set: &TraceSet| -> Result<Vec<Vec<f64>>> {
        set.traces.par_iter().map(|t| response_values(t, feature, &config)).collect()
    };
    let (va, vb) = (collect(a)?, collect(b)?);
    let (mean_a, se_a) = mean_se(&va, layer.len());
    let (mean_b, se_b) = mean_se(&vb, layer.len());
    Ok(CohortCurve {
        feature,
        axis,
        layer,
        head,
        mean_a,
        se_a,
        mean_b,
        se_b,
        n_a: va.len(),
        n_b: vb.len(),
    })
}
