//! Turning a converted graph into a schedule of spiking stages.

use std::collections::BTreeMap;

use super::coding::CodingConfig;
use super::maxpool::PoolStats;
use super::neuron::LinearWeights;
use crate::convert::ConvertedModel;
use crate::error::{Error, Result};
use crate::graph::{LayerKind, Linear, Pool};
use crate::tensor::Shape;

#[derive(Debug, Clone)]
pub enum StageKind {
    Input,
    SpikeLinear(LinearWeights),
    SpikeMaxpool { pool: Pool, stats: PoolStats },
    SpikeConcat,
    OutputDecode,
}

impl StageKind {
    pub fn name(&self) -> &'static str {
        match self {
            StageKind::Input => "input",
            StageKind::SpikeLinear(w) if w.transposed => "spike_convtranspose",
            StageKind::SpikeLinear(_) => "spike_conv",
            StageKind::SpikeMaxpool { .. } => "spike_maxpool",
            StageKind::SpikeConcat => "spike_concat",
            StageKind::OutputDecode => "output",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub id: String,
    pub kind: StageKind,
    /// Source stages, with ReLU layers already resolved away.
    pub inputs: Vec<String>,
    pub shape: Shape,
    /// For linear stages: synapses leaving each presynaptic spatial position
    /// into this stage (identical for every input channel).
    pub synapses: Vec<u64>,
}

/// Executable schedule in canonical graph order.
#[derive(Debug, Clone)]
pub struct SnnPlan {
    pub stages: Vec<Stage>,
    pub coding: CodingConfig,
    pub v_thr: f64,
    pub v_init: f64,
    pub input_shape: Shape,
}

impl SnnPlan {
    pub fn stage(&self, id: &str) -> Option<&Stage> {
        self.stages.iter().find(|s| s.id == id)
    }

    pub fn outputs(&self) -> impl Iterator<Item = &Stage> {
        self.stages.iter().filter(|s| matches!(s.kind, StageKind::OutputDecode))
    }
}

/// Build the spiking schedule for `model` under `coding`.
///
/// ReLU layers disappear: spiking neurons never emit negative values, so a
/// ReLU simply forwards its predecessor's train.
pub fn build_snn(model: &ConvertedModel, coding: CodingConfig) -> Result<SnnPlan> {
    coding.validate()?;
    let graph = model.graph();
    let scales = model.scales();
    let mut alias: BTreeMap<String, String> = BTreeMap::new();
    let mut stages = Vec::new();
    for layer in graph.layers() {
        let inputs: Vec<String> = layer.inputs.iter().map(|i| alias[i].clone()).collect();
        let shape = graph.shape_of(&layer.id).expect("validated");
        let (kind, synapses) = match &layer.kind {
            LayerKind::Input { .. } => (StageKind::Input, Vec::new()),
            LayerKind::Relu => {
                alias.insert(layer.id.clone(), inputs[0].clone());
                continue;
            }
            LayerKind::Conv(lin) | LayerKind::ConvTranspose(lin) => {
                let transposed = matches!(layer.kind, LayerKind::ConvTranspose(_));
                let in_shape = graph.shape_of(&layer.inputs[0]).expect("validated");
                let syn = synapse_counts(lin, transposed, in_shape, shape);
                (StageKind::SpikeLinear(widen(lin, transposed)), syn)
            }
            LayerKind::MaxPool(pool) => {
                let stats = PoolStats {
                    m_in: scales.input_of(graph, &layer.id).to_vec(),
                    m_out: scales.get(&layer.id).to_vec(),
                };
                (StageKind::SpikeMaxpool { pool: *pool, stats }, Vec::new())
            }
            LayerKind::Concat => {
                if let Some(i) = inputs.iter().find(|i| *i == &graph.input().id) {
                    return Err(Error::Unsupported {
                        layer: layer.id.clone(),
                        detail: format!("concat of the raw input `{i}` has no spike train"),
                    });
                }
                (StageKind::SpikeConcat, Vec::new())
            }
            LayerKind::Output => {
                if inputs[0] == graph.input().id {
                    return Err(Error::Unsupported {
                        layer: layer.id.clone(),
                        detail: "output reads the raw input; no spiking layer in between".into(),
                    });
                }
                (StageKind::OutputDecode, Vec::new())
            }
            LayerKind::BatchNorm(_) => {
                return Err(Error::Unsupported {
                    layer: layer.id.clone(),
                    detail: "fold batchnorm layers before building the spiking plan".into(),
                })
            }
        };
        alias.insert(layer.id.clone(), layer.id.clone());
        stages.push(Stage {
            id: layer.id.clone(),
            kind,
            inputs,
            shape,
            synapses,
        });
    }
    Ok(SnnPlan {
        stages,
        coding,
        v_thr: f64::from(model.v_thr),
        v_init: f64::from(model.v_init),
        input_shape: graph.input_shape(),
    })
}

fn widen(lin: &Linear, transposed: bool) -> LinearWeights {
    LinearWeights {
        kernel: lin.weights.cast(),
        bias: lin.bias.iter().map(|&b| f64::from(b)).collect(),
        stride: lin.stride,
        padding: lin.padding,
        transposed,
    }
}

/// Output positions along one axis that input position `i` contributes to.
fn axis_fanout(i: usize, k: usize, s: usize, p: usize, n_out: usize, transposed: bool) -> u64 {
    (0..k)
        .filter(|&ky| {
            if transposed {
                let o = (i * s + ky) as isize - p as isize;
                o >= 0 && (o as usize) < n_out
            } else {
                let num = (i + p) as isize - ky as isize;
                num >= 0 && (num as usize).is_multiple_of(s) && (num as usize / s) < n_out
            }
        })
        .count() as u64
}

fn synapse_counts(lin: &Linear, transposed: bool, input: Shape, output: Shape) -> Vec<u64> {
    let [_, _, kh, kw] = lin.weights.dims();
    let (s, p) = (lin.stride, lin.padding);
    let fy: Vec<u64> = (0..input.height)
        .map(|y| axis_fanout(y, kh, s, p, output.height, transposed))
        .collect();
    let fx: Vec<u64> = (0..input.width)
        .map(|x| axis_fanout(x, kw, s, p, output.width, transposed))
        .collect();
    let out_ch = output.channels as u64;
    fy.iter()
        .flat_map(|&a| fx.iter().map(move |&b| out_ch * a * b))
        .collect()
}
