use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ann_forward, LayerKind, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to every sampled channel maximum.
pub const EPSILON_STAT: f32 = 1e-5;

/// Channel maximum assumed for the network input (inputs live in `[0, 1]`).
pub const INPUT_MAX: f32 = 1.0;

/// Per-layer, per-channel maxima of sampled activations.
///
/// Serializes as a JSON object mapping layer id to an array of maxima.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormStats {
    layers: BTreeMap<String, Vec<f32>>,
}

impl NormStats {
    pub fn new(layers: BTreeMap<String, Vec<f32>>) -> Self {
        NormStats { layers }
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.layers.get(id).map(Vec::as_slice)
    }

    pub fn require(&self, id: &str) -> Result<&[f32]> {
        let v = self.get(id).ok_or_else(|| Error::MissingStats(id.to_string()))?;
        if let Some((channel, &value)) = v.iter().enumerate().find(|(_, &m)| !(m > 0.0)) {
            return Err(Error::NonPositiveMax {
                layer: id.to_string(),
                channel,
                value,
            });
        }
        Ok(v)
    }

    pub fn layers(&self) -> &BTreeMap<String, Vec<f32>> {
        &self.layers
    }

    pub fn insert(&mut self, id: impl Into<String>, maxima: Vec<f32>) {
        self.layers.insert(id.into(), maxima);
    }

    /// Multiply every maximum by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        NormStats {
            layers: self
                .layers
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|m| m * factor).collect()))
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Sample the channel-wise maximum of every non-input layer.
///
/// The maximum runs over all samples and spatial positions and is floored at
/// [`EPSILON_STAT`]. Output layers are aliases and carry no stats of their own.
pub fn sample_activation_stats(graph: &ModelGraph, samples: &[Tensor]) -> Result<NormStats> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    if let Some(bn) = graph
        .layers()
        .iter()
        .find(|l| matches!(l.kind, LayerKind::BatchNorm(_)))
    {
        return Err(Error::Unsupported {
            layer: bn.id.clone(),
            detail: "fold batchnorm layers before sampling statistics".into(),
        });
    }
    let mut maxima: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for sample in samples {
        let acts = ann_forward(graph, sample)?;
        for layer in graph.layers() {
            if matches!(layer.kind, LayerKind::Input { .. } | LayerKind::Output) {
                continue;
            }
            let cm = acts[&layer.id].channel_max();
            let entry = maxima
                .entry(layer.id.clone())
                .or_insert_with(|| vec![EPSILON_STAT; cm.len()]);
            for (m, v) in entry.iter_mut().zip(cm) {
                *m = m.max(v);
            }
        }
    }
    Ok(NormStats::new(maxima))
}
