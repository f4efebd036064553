//! The ANN as a validated layer DAG.
//!
//! A [`ModelGraph`] is always held in canonical topological order (Kahn's
//! algorithm, ties broken by layer id), so two manifests describing the same
//! network serialize to the same bytes no matter how their layers were listed.

mod fold;
mod format;
mod forward;
mod stats;

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{transposed_output, window_output, Kernel, Shape};

pub use fold::fold_batchnorm;
pub use format::{load_model, load_model_files, save_model, save_model_files, ConversionMeta, ModelFile};
pub use forward::{ann_forward, Activations};
pub use stats::{sample_activation_stats, NormStats, EPSILON_STAT, INPUT_MAX};

/// Conv or transposed-conv parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weights: Kernel<f32>,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub padding: usize,
}

impl Linear {
    /// Number of output channels, given whether the kernel is transposed.
    fn out_channels(&self, transposed: bool) -> usize {
        let d = self.weights.dims();
        if transposed {
            d[1]
        } else {
            d[0]
        }
    }

    fn in_channels(&self, transposed: bool) -> usize {
        let d = self.weights.dims();
        if transposed {
            d[0]
        } else {
            d[1]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub epsilon: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Input { shape: Shape },
    Conv(Linear),
    ConvTranspose(Linear),
    BatchNorm(BatchNorm),
    Relu,
    MaxPool(Pool),
    Concat,
    Output,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv(_) => "conv",
            LayerKind::ConvTranspose(_) => "convtranspose",
            LayerKind::BatchNorm(_) => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool(_) => "maxpool",
            LayerKind::Concat => "concat",
            LayerKind::Output => "output",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub id: String,
    pub inputs: Vec<String>,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        LayerSpec {
            id: id.into(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    layers: Vec<LayerSpec>,
    shapes: Vec<Shape>,
    index: HashMap<String, usize>,
}

impl ModelGraph {
    /// Validate, canonically order and shape-check a set of layers.
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let mut index = HashMap::with_capacity(layers.len());
        for (i, l) in layers.iter().enumerate() {
            if l.id.is_empty() {
                return Err(Error::Graph("empty layer id".into()));
            }
            if index.insert(l.id.clone(), i).is_some() {
                return Err(Error::Graph(format!("duplicate layer id `{}`", l.id)));
            }
        }
        let mut inputs = 0;
        let mut outputs = 0;
        for l in &layers {
            for p in &l.inputs {
                if !index.contains_key(p) {
                    return Err(Error::DanglingReference {
                        layer: l.id.clone(),
                        missing: p.clone(),
                    });
                }
            }
            let arity_ok = match &l.kind {
                LayerKind::Input { .. } => {
                    inputs += 1;
                    l.inputs.is_empty()
                }
                LayerKind::Concat => !l.inputs.is_empty(),
                LayerKind::Output => {
                    outputs += 1;
                    l.inputs.len() == 1
                }
                _ => l.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(Error::Graph(format!(
                    "layer `{}` ({}) has {} predecessors",
                    l.id,
                    l.kind.name(),
                    l.inputs.len()
                )));
            }
        }
        if inputs != 1 {
            return Err(Error::Graph(format!(
                "expected exactly one input layer, found {inputs}"
            )));
        }
        if outputs == 0 {
            return Err(Error::Graph("graph has no output layer".into()));
        }

        let order = canonical_order(&layers, &index)?;
        let mut slots: Vec<Option<LayerSpec>> = layers.into_iter().map(Some).collect();
        let layers: Vec<LayerSpec> = order
            .into_iter()
            .map(|i| slots[i].take().expect("each layer visited once"))
            .collect();
        let index: HashMap<String, usize> = layers.iter().enumerate().map(|(i, l)| (l.id.clone(), i)).collect();

        let mut shapes: Vec<Shape> = Vec::with_capacity(layers.len());
        for l in &layers {
            let preds: Vec<Shape> = l.inputs.iter().map(|p| shapes[index[p]]).collect();
            shapes.push(infer_shape(l, &preds).map_err(|e| e.in_layer(&l.id))?);
        }
        Ok(ModelGraph { layers, shapes, index })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.index.get(id).map(|&i| &self.layers[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Inferred output shape of a layer.
    pub fn shape_of(&self, id: &str) -> Option<Shape> {
        self.index.get(id).map(|&i| self.shapes[i])
    }

    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn input(&self) -> &LayerSpec {
        self.layers
            .iter()
            .find(|l| matches!(l.kind, LayerKind::Input { .. }))
            .expect("validated graph has an input")
    }

    pub fn input_shape(&self) -> Shape {
        match self.input().kind {
            LayerKind::Input { shape } => shape,
            _ => unreachable!(),
        }
    }

    pub fn outputs(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| matches!(l.kind, LayerKind::Output))
    }

    /// Ids of layers that read from `id`, in canonical order.
    pub fn consumers(&self, id: &str) -> Vec<&LayerSpec> {
        self.layers
            .iter()
            .filter(|l| l.inputs.iter().any(|p| p == id))
            .collect()
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l.kind, LayerKind::BatchNorm(_)))
    }

    pub fn into_layers(self) -> Vec<LayerSpec> {
        self.layers
    }
}

fn canonical_order(layers: &[LayerSpec], index: &HashMap<String, usize>) -> Result<Vec<usize>> {
    let mut indegree: Vec<usize> = layers.iter().map(|l| l.inputs.len()).collect();
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); layers.len()];
    for (i, l) in layers.iter().enumerate() {
        for p in &l.inputs {
            succ[index[p]].push(i);
        }
    }
    let mut ready: BTreeSet<(&str, usize)> = layers
        .iter()
        .enumerate()
        .filter(|(i, _)| indegree[*i] == 0)
        .map(|(i, l)| (l.id.as_str(), i))
        .collect();
    let mut order = Vec::with_capacity(layers.len());
    while let Some(first) = ready.pop_first() {
        let i = first.1;
        order.push(i);
        for &s in &succ[i] {
            // a layer listing the same predecessor twice has that edge counted twice
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.insert((layers[s].id.as_str(), s));
            }
        }
    }
    if order.len() != layers.len() {
        let stuck: Vec<&str> = layers
            .iter()
            .enumerate()
            .filter(|(i, _)| indegree[*i] > 0)
            .map(|(_, l)| l.id.as_str())
            .collect();
        return Err(Error::Graph(format!("cycle through layers {stuck:?}")));
    }
    Ok(order)
}

fn infer_shape(layer: &LayerSpec, preds: &[Shape]) -> Result<Shape> {
    match &layer.kind {
        LayerKind::Input { shape } => {
            if shape.is_empty() {
                return Err(Error::shape("input shape has a zero extent"));
            }
            Ok(*shape)
        }
        LayerKind::Conv(lin) | LayerKind::ConvTranspose(lin) => {
            let transposed = matches!(layer.kind, LayerKind::ConvTranspose(_));
            let s = preds[0];
            let [_, _, kh, kw] = lin.weights.dims();
            if lin.in_channels(transposed) != s.channels {
                return Err(Error::shape(format!(
                    "kernel expects {} input channels, predecessor produces {s}",
                    lin.in_channels(transposed)
                )));
            }
            let out_ch = lin.out_channels(transposed);
            if lin.bias.len() != out_ch {
                return Err(Error::shape(format!(
                    "{} bias values for {out_ch} output channels",
                    lin.bias.len()
                )));
            }
            let dims = if transposed {
                transposed_output(s.height, kh, lin.stride, lin.padding).zip(transposed_output(
                    s.width,
                    kw,
                    lin.stride,
                    lin.padding,
                ))
            } else {
                window_output(s.height, kh, lin.stride, lin.padding).zip(window_output(
                    s.width,
                    kw,
                    lin.stride,
                    lin.padding,
                ))
            };
            let (h, w) = dims.ok_or_else(|| {
                Error::shape(format!(
                    "{kh}x{kw} kernel, stride {}, padding {} gives empty output for {s}",
                    lin.stride, lin.padding
                ))
            })?;
            Ok(Shape::new(out_ch, h, w))
        }
        LayerKind::BatchNorm(bn) => {
            let s = preds[0];
            let n = s.channels;
            if [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]
                .iter()
                .any(|v| v.len() != n)
            {
                return Err(Error::shape(format!("batchnorm parameters do not match {n} channels")));
            }
            Ok(s)
        }
        LayerKind::Relu | LayerKind::Output => Ok(preds[0]),
        LayerKind::MaxPool(p) => {
            let s = preds[0];
            let dims = window_output(s.height, p.kernel, p.stride, p.padding)
                .zip(window_output(s.width, p.kernel, p.stride, p.padding));
            let (h, w) =
                dims.ok_or_else(|| Error::shape(format!("pool kernel {} larger than padded input {s}", p.kernel)))?;
            if p.padding >= p.kernel {
                return Err(Error::shape("pool padding must be smaller than the kernel"));
            }
            Ok(Shape::new(s.channels, h, w))
        }
        LayerKind::Concat => {
            let first = preds[0];
            let mut channels = 0;
            for s in preds {
                if s.height != first.height || s.width != first.width {
                    return Err(Error::shape(format!("concat inputs {s} and {first} differ spatially")));
                }
                channels += s.channels;
            }
            Ok(Shape::new(channels, first.height, first.width))
        }
    }
}


#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;

    #[test]
    fn identity_graph_has_three_layers() {
        let g = identity_graph();
        assert_eq!(g.layers().len(), 3);
        assert_eq!(g.shape_of("out"), Some(Shape::new(1, 4, 4)));
    }

    #[test]
    fn dangling_reference_names_missing_id() {
        let err = ModelGraph::new(vec![input(Shape::new(1, 2, 2)), output("out", "ghost")]).unwrap_err();
        match err {
            Error::DanglingReference { layer, missing } => {
                assert_eq!(layer, "out");
                assert_eq!(missing, "ghost");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn cycles_are_rejected() {
        let err = ModelGraph::new(vec![
            input(Shape::new(1, 2, 2)),
            relu_layer("a", "b"),
            relu_layer("b", "a"),
            output("out", "a"),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::Graph(_)), "{err}");
    }

    #[test]
    fn multiple_inputs_rejected() {
        let mut second = input(Shape::new(1, 2, 2));
        second.id = "in2".into();
        let err = ModelGraph::new(vec![input(Shape::new(1, 2, 2)), second, output("out", "in")]);
        assert!(err.is_err());
    }

    #[test]
    fn only_concat_takes_several_inputs() {
        let layers = vec![
            input(Shape::new(1, 2, 2)),
            LayerSpec::new("r", LayerKind::Relu, &["in", "in"]),
            output("out", "r"),
        ];
        assert!(ModelGraph::new(layers).is_err());
    }

    #[test]
    fn shape_error_names_layer() {
        let err = ModelGraph::new(vec![
            input(Shape::new(2, 4, 4)),
            conv(
                "bad",
                "in",
                Kernel::new([1, 3, 1, 1], vec![1.0; 3]).unwrap(),
                vec![0.0],
                1,
                0,
            ),
            output("out", "bad"),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("`bad`"), "{err}");
    }

    #[test]
    fn canonical_order_ignores_listing_order() {
        let a = identity_graph();
        let mut layers = a.clone().into_layers();
        layers.reverse();
        let b = ModelGraph::new(layers).unwrap();
        assert_eq!(a, b);
    }
}
