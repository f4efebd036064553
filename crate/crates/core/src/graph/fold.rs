use std::collections::HashMap;

use super::{LayerKind, LayerSpec, ModelGraph};
use crate::error::{Error, Result};

/// Fold every batchnorm into the conv or transposed conv that feeds it.
///
/// For output channel `o`: `w' = w * s`, `b' = (b - mean) * s + beta` with
/// `s = gamma / sqrt(var + eps)`. Consumers of the batchnorm are rewired to
/// the folded conv, which keeps its own id.
pub fn fold_batchnorm(graph: &ModelGraph) -> Result<ModelGraph> {
    let mut rename: HashMap<String, String> = HashMap::new();
    let mut folded: HashMap<String, LayerSpec> = HashMap::new();

    for layer in graph.layers() {
        let LayerKind::BatchNorm(bn) = &layer.kind else {
            continue;
        };
        let pred_id = &layer.inputs[0];
        let pred = graph.layer(pred_id).expect("validated graph");
        let transposed = match pred.kind {
            LayerKind::Conv(_) => false,
            LayerKind::ConvTranspose(_) => true,
            _ => {
                return Err(Error::Unsupported {
                    layer: layer.id.clone(),
                    detail: format!(
                        "batchnorm must follow a conv or convtranspose, found {} `{pred_id}`",
                        pred.kind.name()
                    ),
                })
            }
        };
        if graph.consumers(pred_id).len() != 1 {
            return Err(Error::Unsupported {
                layer: layer.id.clone(),
                detail: format!("conv `{pred_id}` feeds layers other than this batchnorm"),
            });
        }
        let mut spec = pred.clone();
        let lin = match &mut spec.kind {
            LayerKind::Conv(l) | LayerKind::ConvTranspose(l) => l,
            _ => unreachable!(),
        };
        let scale: Vec<f64> = bn
            .gamma
            .iter()
            .zip(&bn.running_var)
            .map(|(&g, &v)| f64::from(g) / (f64::from(v) + f64::from(bn.epsilon)).sqrt())
            .collect();
        let wide = lin.weights.cast::<f64>().scale_channels(|a, b| {
            let o = if transposed { b } else { a };
            scale[o]
        });
        lin.weights = wide.cast::<f32>();
        lin.bias = lin
            .bias
            .iter()
            .enumerate()
            .map(|(o, &b)| ((f64::from(b) - f64::from(bn.running_mean[o])) * scale[o] + f64::from(bn.beta[o])) as f32)
            .collect();
        folded.insert(pred_id.clone(), spec);
        rename.insert(layer.id.clone(), pred_id.clone());
    }

    let layers = graph
        .layers()
        .iter()
        .filter(|l| !matches!(l.kind, LayerKind::BatchNorm(_)))
        .map(|l| {
            let mut l = folded.get(&l.id).cloned().unwrap_or_else(|| l.clone());
            for p in &mut l.inputs {
                if let Some(r) = rename.get(p) {
                    *p = r.clone();
                }
            }
            l
        })
        .collect();
    ModelGraph::new(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::testing::*;
    use crate::graph::{ann_forward, BatchNorm};
    use crate::tensor::{Kernel, Shape, Tensor};

    fn bn_graph(gamma: f32, beta: f32, mean: f32, var: f32, eps: f32) -> ModelGraph {
        ModelGraph::new(vec![
            input(Shape::new(1, 2, 2)),
            conv(
                "c",
                "in",
                Kernel::new([1, 1, 1, 1], vec![0.75]).unwrap(),
                vec![0.25],
                1,
                0,
            ),
            LayerSpec::new(
                "bn",
                LayerKind::BatchNorm(BatchNorm {
                    gamma: vec![gamma],
                    beta: vec![beta],
                    running_mean: vec![mean],
                    running_var: vec![var],
                    epsilon: eps,
                }),
                &["c"],
            ),
            relu_layer("r", "bn"),
            output("out", "r"),
        ])
        .unwrap()
    }

    fn conv_params(g: &ModelGraph) -> (Vec<f32>, Vec<f32>) {
        match &g.layer("c").unwrap().kind {
            LayerKind::Conv(l) => (l.weights.data().to_vec(), l.bias.clone()),
            _ => unreachable!(),
        }
    }

    #[test]
    fn identity_bn_leaves_weights() {
        let f = fold_batchnorm(&bn_graph(1.0, 0.0, 0.0, 1.0, 0.0)).unwrap();
        assert!(!f.has_batchnorm());
        assert_eq!(conv_params(&f), (vec![0.75], vec![0.25]));
        assert_eq!(f.layer("r").unwrap().inputs, vec!["c".to_string()]);
    }

    #[test]
    fn pure_scale_doubles() {
        let f = fold_batchnorm(&bn_graph(2.0, 0.0, 0.0, 1.0, 0.0)).unwrap();
        assert_eq!(conv_params(&f), (vec![1.5], vec![0.5]));
    }

    #[test]
    fn folded_forward_matches() {
        let g = bn_graph(1.7, -0.2, 0.3, 0.6, 1e-5);
        let f = fold_batchnorm(&g).unwrap();
        let x = Tensor::new(Shape::new(1, 2, 2), vec![0.1, 0.9, 0.4, 0.0]).unwrap();
        let a = ann_forward(&g, &x).unwrap();
        let b = ann_forward(&f, &x).unwrap();
        for (u, v) in a["out"].data().iter().zip(b["out"].data()) {
            assert!((u - v).abs() <= 1e-4 * u.abs().max(1.0));
        }
    }

    #[test]
    fn bn_after_relu_rejected() {
        let g = ModelGraph::new(vec![
            input(Shape::new(1, 2, 2)),
            relu_layer("r", "in"),
            LayerSpec::new(
                "bn",
                LayerKind::BatchNorm(BatchNorm {
                    gamma: vec![1.0],
                    beta: vec![0.0],
                    running_mean: vec![0.0],
                    running_var: vec![1.0],
                    epsilon: 0.0,
                }),
                &["r"],
            ),
            output("out", "bn"),
        ])
        .unwrap();
        assert!(matches!(fold_batchnorm(&g), Err(Error::Unsupported { .. })));
    }
}
