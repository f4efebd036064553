use std::collections::BTreeMap;

use super::{LayerKind, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::{concat_channels, conv2d, convtranspose2d, maxpool2d, relu, Tensor};

/// Activation of every layer, keyed by layer id.
pub type Activations = BTreeMap<String, Tensor>;

/// Reference ANN pass in canonical topological order.
pub fn ann_forward(graph: &ModelGraph, input: &Tensor) -> Result<Activations> {
    if input.shape() != graph.input_shape() {
        return Err(Error::Shape {
            layer: Some(graph.input().id.clone()),
            detail: format!("input is {}, graph expects {}", input.shape(), graph.input_shape()),
        });
    }
    let mut acts = Activations::new();
    for layer in graph.layers() {
        let pred = |i: usize| &acts[&layer.inputs[i]];
        let out = match &layer.kind {
            LayerKind::Input { .. } => Ok(input.clone()),
            LayerKind::Conv(l) => conv2d(pred(0), &l.weights, &l.bias, l.stride, l.padding),
            LayerKind::ConvTranspose(l) => convtranspose2d(pred(0), &l.weights, &l.bias, l.stride, l.padding),
            LayerKind::BatchNorm(bn) => {
                let scale: Vec<f32> = bn
                    .gamma
                    .iter()
                    .zip(&bn.running_var)
                    .map(|(g, v)| g / (v + bn.epsilon).sqrt())
                    .collect();
                Ok(pred(0).map_channels(|c, x| (x - bn.running_mean[c]) * scale[c] + bn.beta[c]))
            }
            LayerKind::Relu => Ok(relu(pred(0))),
            LayerKind::MaxPool(p) => maxpool2d(pred(0), p.kernel, p.stride, p.padding),
            LayerKind::Concat => {
                let parts: Vec<&Tensor> = layer.inputs.iter().map(|p| &acts[p]).collect();
                concat_channels(&parts)
            }
            LayerKind::Output => Ok(pred(0).clone()),
        }
        .map_err(|e| e.in_layer(&layer.id))?;
        acts.insert(layer.id.clone(), out);
    }
    Ok(acts)
}
