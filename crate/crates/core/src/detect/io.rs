//! `model.json` + `params.bin` persistence.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::Network;
use super::{DetectorModel, Family, ModelBody, Standardizer};
use crate::error::{Error, Result};
use crate::features::FeatureDescriptor;

pub const MODEL_MAGIC: &str = "HPMD1";
pub const MODEL_VERSION: u32 = 1;
const MODEL_JSON: &str = "model.json";
const PARAMS_BIN: &str = "params.bin";

#[derive(Serialize, Deserialize)]
struct ModelFile {
    magic: String,
    format_version: u32,
    /// Number of binary32 values in `params.bin`.
    param_count: usize,
    #[serde(flatten)]
    model: ModelDoc,
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    family: Family,
    seed: u64,
    layout: Vec<FeatureDescriptor>,
    standardizer: Option<Standardizer>,
    body: BodyDoc,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum BodyDoc {
    Network {
        widths: Vec<usize>,
        param_offset: usize,
    },
    Siamese {
        widths: Vec<usize>,
        param_offset: usize,
        margin: f64,
        proto_fact: Vec<f64>,
        proto_halu: Vec<f64>,
        temperature: f64,
    },
    Ensemble {
        weights: Vec<f64>,
        members: Vec<ModelDoc>,
    },
}

fn push_net(net: &Network, blob: &mut Vec<f32>) -> usize {
    let offset = blob.len();
    blob.extend(net.flat().into_iter().map(|v| v as f32));
    offset
}

fn to_doc(model: &DetectorModel, blob: &mut Vec<f32>) -> ModelDoc {
    let body = match &model.body {
        ModelBody::Classifier(net) => BodyDoc::Network {
            widths: net.widths.clone(),
            param_offset: push_net(net, blob),
        },
        ModelBody::Siamese {
            encoder,
            margin,
            proto_fact,
            proto_halu,
            temperature,
        } => BodyDoc::Siamese {
            widths: encoder.widths.clone(),
            param_offset: push_net(encoder, blob),
            margin: *margin,
            proto_fact: proto_fact.clone(),
            proto_halu: proto_halu.clone(),
            temperature: *temperature,
        },
        ModelBody::Ensemble { members, weights } => BodyDoc::Ensemble {
            weights: weights.clone(),
            members: members.iter().map(|m| to_doc(m, blob)).collect(),
        },
    };
    ModelDoc {
        family: model.family,
        seed: model.seed,
        layout: model.layout.clone(),
        standardizer: model.standardizer.clone(),
        body,
    }
}

/// Writes `model.json` and `params.bin` under `dir`. Parameters are stored
/// at binary32, which is the precision training leaves them at.
pub fn save_model(model: &DetectorModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let doc = to_doc(model, &mut blob);
    let file = ModelFile {
        magic: MODEL_MAGIC.into(),
        format_version: MODEL_VERSION,
        param_count: blob.len(),
        model: doc,
    };
    let jpath = dir.join(MODEL_JSON);
    let mut text = serde_json::to_vec_pretty(&file).map_err(|e| Error::json(&jpath, e))?;
    text.push(b'\n');
    fs::write(&jpath, text).map_err(|e| Error::io(&jpath, e))?;
    let bytes: Vec<u8> = blob.iter().flat_map(|v| v.to_le_bytes()).collect();
    let bpath = dir.join(PARAMS_BIN);
    fs::write(&bpath, bytes).map_err(|e| Error::io(&bpath, e))
}

fn load_net(widths: &[usize], offset: usize, params: &[f64]) -> Result<Network> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::Model(format!("invalid layer widths {widths:?}")));
    }
    let count: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let end = offset
        .checked_add(count)
        .filter(|&e| e <= params.len())
        .ok_or_else(|| {
            Error::Model(format!(
                "network needs params [{offset}, {offset}+{count}) but the blob holds {}",
                params.len()
            ))
        })?;
    Ok(Network::from_flat(widths, &params[offset..end]))
}

fn from_doc(doc: ModelDoc, params: &[f64]) -> Result<DetectorModel> {
    let n = doc.layout.len();
    let body = match (doc.family, doc.body) {
        (Family::Logreg | Family::Mlp, BodyDoc::Network { widths, param_offset }) => {
            let net = load_net(&widths, param_offset, params)?;
            if doc.family == Family::Logreg && widths.len() != 2 {
                return Err(Error::Model("logreg model must have no hidden layer".into()));
            }
            if net.output_dim() != 1 {
                return Err(Error::Model("classifier must have one output".into()));
            }
            ModelBody::Classifier(net)
        }
        (
            Family::Siamese,
            BodyDoc::Siamese {
                widths,
                param_offset,
                margin,
                proto_fact,
                proto_halu,
                temperature,
            },
        ) => {
            let encoder = load_net(&widths, param_offset, params)?;
            let e = encoder.output_dim();
            if proto_fact.len() != e || proto_halu.len() != e || temperature.is_nan() || temperature <= 0.0 {
                return Err(Error::Model("siamese prototypes or temperature are inconsistent".into()));
            }
            ModelBody::Siamese {
                encoder,
                margin,
                proto_fact,
                proto_halu,
                temperature,
            }
        }
        (Family::Ensemble, BodyDoc::Ensemble { weights, members }) => {
            let members = members
                .into_iter()
                .map(|m| from_doc(m, params))
                .collect::<Result<Vec<_>>>()?;
            let sum: f64 = weights.iter().sum();
            if weights.len() != members.len() || weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Model("ensemble weights must be >= 0, sum to 1, one per member".into()));
            }
            if members.iter().any(|m| m.layout != doc.layout) {
                return Err(Error::Layout("ensemble member layout differs from the ensemble".into()));
            }
            ModelBody::Ensemble { members, weights }
        }
        (family, _) => {
            return Err(Error::Model(format!("family tag '{family}' does not match the stored body")));
        }
    };
    match (&body, &doc.standardizer) {
        (ModelBody::Ensemble { .. }, _) => {}
        (_, Some(s)) if s.mean.len() == n && s.std.len() == n && s.std.iter().all(|&v| v > 0.0) => {}
        _ => return Err(Error::Model("standardizer missing or inconsistent with layout".into())),
    }
    if let ModelBody::Classifier(net) | ModelBody::Siamese { encoder: net, .. } = &body {
        if net.input_dim() != n {
            return Err(Error::Layout(format!(
                "network input width {} differs from layout length {n}",
                net.input_dim()
            )));
        }
    }
    Ok(DetectorModel {
        family: doc.family,
        layout: doc.layout,
        standardizer: doc.standardizer,
        seed: doc.seed,
        body,
    })
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<DetectorModel> {
    let dir = dir.as_ref();
    let jpath = dir.join(MODEL_JSON);
    let text = fs::read(&jpath).map_err(|e| Error::io(&jpath, e))?;
    let raw: serde_json::Value = serde_json::from_slice(&text).map_err(|e| Error::json(&jpath, e))?;
    if raw.get("magic").and_then(|v| v.as_str()) != Some(MODEL_MAGIC) {
        return Err(Error::Model(format!("{} is not a model file", jpath.display())));
    }
    let version = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0);
    if version != MODEL_VERSION as u64 {
        return Err(Error::UnsupportedVersion {
            found: version as u32,
            expected: MODEL_VERSION,
        });
    }
    let file: ModelFile = serde_json::from_value(raw).map_err(|e| Error::json(&jpath, e))?;
    let bpath = dir.join(PARAMS_BIN);
    let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if bytes.len() != file.param_count * 4 {
        return Err(Error::Model(format!(
            "params.bin holds {} bytes, model.json declares {} parameters",
            bytes.len(),
            file.param_count
        )));
    }
    let params: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    from_doc(file.model, &params)
}
