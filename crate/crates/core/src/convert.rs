//! Channel-wise weight normalization.
//!
//! Every activation is expressed in units of its sampled channel maximum `M`.
//! For a linear layer with output channel `j` and input channel `i`:
//!
//! ```text
//! w'[j, i] = w[j, i] * M_in[i] / M_out[j]
//! b'[j]    = b[j] / M_out[j]
//! ```
//!
//! which turns `a = relu(W x + b)` into `a / M_out = relu(W' (x / M_in) + b')`.
//! [`BiasRule::Printed`] keeps the alternative `b' = b * M_in / M_out` form for
//! comparison; it does not preserve that equivalence.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ConversionMeta, LayerKind, LayerSpec, Linear, ModelFile, ModelGraph, NormStats, INPUT_MAX};
use crate::tensor::{concat_channels, conv2d, convtranspose2d, maxpool2d, relu, Kernel, Tensor};

/// Spike threshold, in the units every membrane potential is expressed in.
pub const V_THR: f32 = 1.0;
/// Initial membrane potential as a fraction of the threshold.
pub const V_INIT_FRACTION: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasRule {
    /// `b' = b / M_out`; preserves the normalized forward pass.
    #[default]
    Derived,
    /// `b' = b * M_in / M_out` with `M_in` the largest input-channel maximum.
    Printed,
}

impl fmt::Display for BiasRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BiasRule::Derived => "derived",
            BiasRule::Printed => "printed",
        })
    }
}

impl FromStr for BiasRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "derived" => Ok(BiasRule::Derived),
            "printed" => Ok(BiasRule::Printed),
            other => Err(Error::Manifest(format!("unknown bias rule `{other}`"))),
        }
    }
}

/// Channel maxima resolved for every layer output of a BN-free graph.
///
/// A linear layer whose only consumer is a ReLU is normalized by the ReLU's
/// maxima; maxpool keeps its own sampled output maxima; concat concatenates
/// its predecessors' maxima; everything else inherits from its predecessor.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelScales {
    scales: BTreeMap<String, Vec<f32>>,
}

impl ChannelScales {
    pub fn resolve(graph: &ModelGraph, stats: &NormStats) -> Result<Self> {
        let mut scales: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        for layer in graph.layers() {
            let pred = |i: usize| scales[&layer.inputs[i]].clone();
            let m = match &layer.kind {
                LayerKind::Input { shape } => vec![INPUT_MAX; shape.channels],
                LayerKind::Conv(_) | LayerKind::ConvTranspose(_) => {
                    stats.require(normalization_point(graph, layer)?)?.to_vec()
                }
                LayerKind::Relu => {
                    let p = graph.layer(&layer.inputs[0]).expect("validated");
                    if is_linear(p) {
                        stats.require(&layer.id)?.to_vec()
                    } else {
                        pred(0)
                    }
                }
                LayerKind::MaxPool(_) => stats.require(&layer.id)?.to_vec(),
                LayerKind::Concat => layer.inputs.iter().flat_map(|p| scales[p].clone()).collect(),
                LayerKind::Output => pred(0),
                LayerKind::BatchNorm(_) => {
                    return Err(Error::Unsupported {
                        layer: layer.id.clone(),
                        detail: "fold batchnorm layers before conversion".into(),
                    })
                }
            };
            let expected = graph.shape_of(&layer.id).expect("validated").channels;
            if m.len() != expected {
                return Err(Error::Shape {
                    layer: Some(layer.id.clone()),
                    detail: format!("{} channel maxima for {expected} channels", m.len()),
                });
            }
            scales.insert(layer.id.clone(), m);
        }
        Ok(ChannelScales { scales })
    }

    /// Maxima of a layer's output channels.
    pub fn get(&self, id: &str) -> &[f32] {
        &self.scales[id]
    }

    /// Maxima of a layer's input channels (its first predecessor's output).
    pub fn input_of(&self, graph: &ModelGraph, id: &str) -> &[f32] {
        let l = graph.layer(id).expect("layer exists");
        &self.scales[&l.inputs[0]]
    }
}

fn is_linear(l: &LayerSpec) -> bool {
    matches!(l.kind, LayerKind::Conv(_) | LayerKind::ConvTranspose(_))
}

/// The layer whose sampled maxima normalize a linear layer's output.
fn normalization_point<'g>(graph: &'g ModelGraph, layer: &'g LayerSpec) -> Result<&'g str> {
    let consumers = graph.consumers(&layer.id);
    let relus = consumers.iter().filter(|c| matches!(c.kind, LayerKind::Relu)).count();
    match (relus, consumers.len()) {
        (0, _) => Ok(&layer.id),
        (1, 1) => Ok(&consumers[0].id),
        _ => Err(Error::Unsupported {
            layer: layer.id.clone(),
            detail: "a linear layer feeding a relu must feed nothing else".into(),
        }),
    }
}

/// A BN-free graph with normalized weights, ready to drive the spiking engine.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvertedModel {
    graph: ModelGraph,
    stats: NormStats,
    scales: ChannelScales,
    pub v_thr: f32,
    pub v_init: f32,
    pub bias_rule: BiasRule,
}

pub fn normalize_weights(graph: &ModelGraph, stats: &NormStats) -> Result<ConvertedModel> {
    normalize_weights_with(graph, stats, BiasRule::Derived)
}

pub fn normalize_weights_with(graph: &ModelGraph, stats: &NormStats, rule: BiasRule) -> Result<ConvertedModel> {
    let scales = ChannelScales::resolve(graph, stats)?;
    let layers = graph
        .layers()
        .iter()
        .map(|l| {
            let mut l = l.clone();
            let id = l.id.clone();
            let (m_in, m_out) = (|| scales.input_of(graph, &id), || scales.get(&id));
            match &mut l.kind {
                LayerKind::Conv(lin) => rescale(lin, m_in(), m_out(), false, rule, Direction::Normalize),
                LayerKind::ConvTranspose(lin) => rescale(lin, m_in(), m_out(), true, rule, Direction::Normalize),
                _ => {}
            }
            l
        })
        .collect();
    let v_thr = V_THR;
    Ok(ConvertedModel {
        graph: ModelGraph::new(layers)?,
        stats: stats.clone(),
        scales,
        v_thr,
        v_init: V_INIT_FRACTION * v_thr,
        bias_rule: rule,
    })
}

#[derive(Clone, Copy)]
enum Direction {
    Normalize,
    Restore,
}

fn rescale(lin: &mut Linear, m_in: &[f32], m_out: &[f32], transposed: bool, rule: BiasRule, dir: Direction) {
    let apply = |v: f64, num: f64, den: f64| -> f32 {
        (match dir {
            Direction::Normalize => v * num / den,
            Direction::Restore => v * den / num,
        }) as f32
    };
    let [d0, d1, kh, kw] = lin.weights.dims();
    let taps = kh * kw;
    let src = lin.weights.data();
    let mut data = Vec::with_capacity(src.len());
    for a in 0..d0 {
        for b in 0..d1 {
            let (o, i) = if transposed { (b, a) } else { (a, b) };
            let (mi, mo) = (f64::from(m_in[i]), f64::from(m_out[o]));
            let base = (a * d1 + b) * taps;
            data.extend(src[base..base + taps].iter().map(|&w| apply(f64::from(w), mi, mo)));
        }
    }
    lin.weights = Kernel::new(lin.weights.dims(), data).expect("dims unchanged");
    let bias_in = match rule {
        BiasRule::Derived => 1.0,
        BiasRule::Printed => f64::from(m_in.iter().fold(0.0f32, |a, &b| a.max(b))),
    };
    lin.bias = lin
        .bias
        .iter()
        .zip(m_out)
        .map(|(&b, &mo)| apply(f64::from(b), bias_in, f64::from(mo)))
        .collect();
}

impl ConvertedModel {
    /// Graph holding the normalized weights.
    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn scales(&self) -> &ChannelScales {
        &self.scales
    }

    /// Recover the un-normalized graph.
    pub fn denormalize(&self) -> Result<ModelGraph> {
        let layers = self
            .graph
            .layers()
            .iter()
            .map(|l| {
                let mut l = l.clone();
                let id = l.id.clone();
                let (m_in, m_out) = (|| self.scales.input_of(&self.graph, &id), || self.scales.get(&id));
                match &mut l.kind {
                    LayerKind::Conv(lin) => rescale(lin, m_in(), m_out(), false, self.bias_rule, Direction::Restore),
                    LayerKind::ConvTranspose(lin) => {
                        rescale(lin, m_in(), m_out(), true, self.bias_rule, Direction::Restore)
                    }
                    _ => {}
                }
                l
            })
            .collect();
        ModelGraph::new(layers)
    }

    /// ANN pass in normalized units using the normalized weights.
    ///
    /// Linear layers use `(w', b')` directly; max pooling rescales each
    /// channel by `M_in / M_out`.
    pub fn normalized_forward(&self, input: &Tensor) -> Result<BTreeMap<String, Tensor>> {
        let g = &self.graph;
        if input.shape() != g.input_shape() {
            return Err(Error::Shape {
                layer: Some(g.input().id.clone()),
                detail: format!("input is {}, graph expects {}", input.shape(), g.input_shape()),
            });
        }
        let mut acts: BTreeMap<String, Tensor> = BTreeMap::new();
        for layer in g.layers() {
            let pred = |i: usize| &acts[&layer.inputs[i]];
            let out = match &layer.kind {
                LayerKind::Input { .. } => Ok(input.map(|v| v / INPUT_MAX)),
                LayerKind::Conv(l) => conv2d(pred(0), &l.weights, &l.bias, l.stride, l.padding),
                LayerKind::ConvTranspose(l) => convtranspose2d(pred(0), &l.weights, &l.bias, l.stride, l.padding),
                LayerKind::Relu => Ok(relu(pred(0))),
                LayerKind::MaxPool(p) => {
                    let m_in = self.scales.input_of(g, &layer.id);
                    let m_out = self.scales.get(&layer.id);
                    maxpool2d(pred(0), p.kernel, p.stride, p.padding)
                        .map(|t| t.map_channels(|c, v| v * (m_in[c] / m_out[c])))
                }
                LayerKind::Concat => {
                    let parts: Vec<&Tensor> = layer.inputs.iter().map(|p| &acts[p]).collect();
                    concat_channels(&parts)
                }
                LayerKind::Output => Ok(pred(0).clone()),
                LayerKind::BatchNorm(_) => unreachable!("converted graphs are BN-free"),
            }
            .map_err(|e| e.in_layer(&layer.id))?;
            acts.insert(layer.id.clone(), out);
        }
        Ok(acts)
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            graph: self.graph.clone(),
            conversion: Some(ConversionMeta {
                v_thr: self.v_thr,
                v_init: self.v_init,
                bias_rule: self.bias_rule.to_string(),
                stats: self.stats.clone(),
            }),
            weights_file: "converted.bin".into(),
        }
    }

    pub fn from_file(file: &ModelFile) -> Result<Self> {
        let meta = file
            .conversion
            .as_ref()
            .ok_or_else(|| Error::Manifest("model is not converted".into()))?;
        let scales = ChannelScales::resolve(&file.graph, &meta.stats)?;
        if !(meta.v_thr > 0.0) || !(0.0..meta.v_thr).contains(&meta.v_init) {
            return Err(Error::Manifest(format!(
                "invalid thresholds v_thr={} v_init={}",
                meta.v_thr, meta.v_init
            )));
        }
        Ok(ConvertedModel {
            graph: file.graph.clone(),
            stats: meta.stats.clone(),
            scales,
            v_thr: meta.v_thr,
            v_init: meta.v_init,
            bias_rule: meta.bias_rule.parse()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ann_forward, testing::*};
    use crate::tensor::Shape;

    fn one_conv(w: f32, b: f32) -> ModelGraph {
        ModelGraph::new(vec![
            input(Shape::new(1, 2, 2)),
            conv("c", "in", Kernel::new([1, 1, 1, 1], vec![w]).unwrap(), vec![b], 1, 0),
            relu_layer("r", "c"),
            output("out", "r"),
        ])
        .unwrap()
    }

    fn weights_of(m: &ConvertedModel) -> (f32, f32) {
        match &m.graph().layer("c").unwrap().kind {
            LayerKind::Conv(l) => (l.weights.data()[0], l.bias[0]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn equal_maxima_leave_weights() {
        let mut stats = NormStats::default();
        stats.insert("r", vec![1.0]);
        stats.insert("c", vec![1.0]);
        let m = normalize_weights(&one_conv(0.3, 0.0), &stats).unwrap();
        assert_eq!(weights_of(&m), (0.3, 0.0));
    }

    #[test]
    fn scaling_rule_by_hand() {
        // second layer: w=0.8, M_in=2, M_out=4, b=1 -> w'=0.4, b'=0.25
        let g = ModelGraph::new(vec![
            input(Shape::new(1, 2, 2)),
            conv(
                "a",
                "in",
                Kernel::new([1, 1, 1, 1], vec![1.0]).unwrap(),
                vec![0.0],
                1,
                0,
            ),
            relu_layer("ra", "a"),
            conv(
                "c",
                "ra",
                Kernel::new([1, 1, 1, 1], vec![0.8]).unwrap(),
                vec![1.0],
                1,
                0,
            ),
            relu_layer("r", "c"),
            output("out", "r"),
        ])
        .unwrap();
        let mut stats = NormStats::default();
        stats.insert("ra", vec![2.0]);
        stats.insert("r", vec![4.0]);
        let m = normalize_weights(&g, &stats).unwrap();
        assert_eq!(weights_of(&m), (0.4, 0.25));
        let printed = normalize_weights_with(&g, &stats, BiasRule::Printed).unwrap();
        assert_eq!(weights_of(&printed), (0.4, 0.5));
    }

    #[test]
    fn denormalize_roundtrip() {
        let g = one_conv(-0.37, 0.11);
        let mut stats = NormStats::default();
        stats.insert("r", vec![0.7]);
        let m = normalize_weights(&g, &stats).unwrap();
        let back = m.denormalize().unwrap();
        let (w, b) = match &back.layer("c").unwrap().kind {
            LayerKind::Conv(l) => (l.weights.data()[0], l.bias[0]),
            _ => unreachable!(),
        };
        assert!((w + 0.37).abs() <= 1e-6 * 0.37);
        assert!((b - 0.11).abs() <= 1e-6 * 0.11);
    }

    #[test]
    fn normalized_forward_matches_scaled_ann() {
        let g = one_conv(0.9, 0.05);
        let x = Tensor::new(Shape::new(1, 2, 2), vec![0.1, 0.5, 0.25, 1.0]).unwrap();
        let stats = crate::graph::sample_activation_stats(&g, std::slice::from_ref(&x)).unwrap();
        let m = normalize_weights(&g, &stats).unwrap();
        let ann = ann_forward(&g, &x).unwrap();
        let norm = m.normalized_forward(&x).unwrap();
        let max = stats.get("r").unwrap()[0];
        for (a, n) in ann["out"].data().iter().zip(norm["out"].data()) {
            assert!((a / max - n).abs() <= 1e-6);
        }
    }

    #[test]
    fn missing_stats_rejected() {
        let err = normalize_weights(&one_conv(1.0, 0.0), &NormStats::default()).unwrap_err();
        assert!(matches!(err, Error::MissingStats(ref id) if id == "r"));
    }

    #[test]
    fn file_roundtrip_keeps_conversion() {
        let g = one_conv(0.5, 0.1);
        let x = Tensor::full(Shape::new(1, 2, 2), 0.5f32);
        let stats = crate::graph::sample_activation_stats(&g, &[x]).unwrap();
        let m = normalize_weights(&g, &stats).unwrap();
        let (mf, blob) = m.to_file().encode().unwrap();
        let back = ConvertedModel::from_file(&ModelFile::decode(&mf, &blob).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(String::from_utf8(mf).unwrap().contains("\"converted\": true"));
    }
}
