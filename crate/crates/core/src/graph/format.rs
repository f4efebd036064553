//! Model file format: a JSON manifest plus a raw little-endian `f32` blob.
//!
//! Field names are documented in `FORMAT.md` at the repository root.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BatchNorm, LayerKind, LayerSpec, Linear, ModelGraph, NormStats, Pool};
use crate::error::{Error, Result};
use crate::tensor::{Kernel, Shape};

pub const FORMAT_NAME: &str = "spikeconv-model";
pub const FORMAT_VERSION: u32 = 1;
const DEFAULT_BLOB: &str = "weights.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct BlobRef {
    offset: usize,
    length: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    id: String,
    kind: String,
    #[serde(default)]
    inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shape: Option<Shape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel_shape: Option<[usize; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gamma: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    running_mean: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    running_var: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epsilon: Option<f32>,
}

/// Conversion metadata carried by converted models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConversionMeta {
    pub v_thr: f32,
    pub v_init: f32,
    pub bias_rule: String,
    pub stats: NormStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    weights_file: String,
    input_shape: Shape,
    #[serde(default)]
    converted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    conversion: Option<ConversionMeta>,
    layers: Vec<LayerEntry>,
}

/// A decoded model file: the graph plus optional conversion metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub graph: ModelGraph,
    pub conversion: Option<ConversionMeta>,
    /// Blob file name recorded in the manifest, relative to the manifest.
    pub weights_file: String,
}

impl ModelFile {
    pub fn plain(graph: ModelGraph) -> Self {
        ModelFile {
            graph,
            conversion: None,
            weights_file: DEFAULT_BLOB.into(),
        }
    }

    pub fn decode(manifest: &[u8], blob: &[u8]) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(manifest).map_err(|e| Error::Manifest(e.to_string()))?;
        if m.format != FORMAT_NAME {
            return Err(Error::Manifest(format!("unknown format `{}`", m.format)));
        }
        if m.version != FORMAT_VERSION {
            return Err(Error::Manifest(format!("unsupported version {}", m.version)));
        }
        if m.converted != m.conversion.is_some() {
            return Err(Error::Manifest(
                "`converted` flag and `conversion` block disagree".into(),
            ));
        }
        let reader = BlobReader { blob };
        let layers = m
            .layers
            .iter()
            .map(|e| decode_layer(e, &reader))
            .collect::<Result<Vec<_>>>()?;
        let graph = ModelGraph::new(layers)?;
        if graph.input_shape() != m.input_shape {
            return Err(Error::Manifest(format!(
                "input_shape {} disagrees with input layer shape {}",
                m.input_shape,
                graph.input_shape()
            )));
        }
        for e in &m.layers {
            if let Some(declared) = e.shape {
                let inferred = graph.shape_of(&e.id).expect("layer exists");
                if declared != inferred {
                    return Err(Error::Shape {
                        layer: Some(e.id.clone()),
                        detail: format!("declared shape {declared}, inferred {inferred}"),
                    });
                }
            }
        }
        Ok(ModelFile {
            graph,
            conversion: m.conversion,
            weights_file: m.weights_file,
        })
    }

    /// Canonical serialization: layers in canonical order, blob slices laid
    /// out contiguously in that order, every conv bias written explicitly.
    pub fn encode(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut blob = BlobWriter::default();
        let layers = self
            .graph
            .layers()
            .iter()
            .map(|l| {
                let shape = self.graph.shape_of(&l.id);
                encode_layer(l, shape, &mut blob)
            })
            .collect();
        let m = Manifest {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            weights_file: self.weights_file.clone(),
            input_shape: self.graph.input_shape(),
            converted: self.conversion.is_some(),
            conversion: self.conversion.clone(),
            layers,
        };
        let mut text = serde_json::to_vec_pretty(&m)?;
        text.push(b'\n');
        Ok((text, blob.bytes))
    }

    /// Write `manifest_path` and the blob named in `weights_file` next to it.
    pub fn write(&self, manifest_path: &Path) -> Result<()> {
        let (m, w) = self.encode()?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        fs::write(manifest_path, m)?;
        fs::write(dir.join(&self.weights_file), w)?;
        Ok(())
    }

    pub fn read(manifest_path: &Path) -> Result<Self> {
        let m = fs::read(manifest_path)?;
        let name: serde_json::Value = serde_json::from_slice(&m).map_err(|e| Error::Manifest(e.to_string()))?;
        let weights_file = name
            .get("weights_file")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Manifest("missing `weights_file`".into()))?;
        if Path::new(weights_file).components().count() != 1 {
            return Err(Error::Manifest(format!(
                "weights_file `{weights_file}` must be a bare file name"
            )));
        }
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let w = fs::read(dir.join(weights_file))?;
        Self::decode(&m, &w)
    }
}

pub fn load_model(manifest: &[u8], weights: &[u8]) -> Result<ModelGraph> {
    Ok(ModelFile::decode(manifest, weights)?.graph)
}

pub fn save_model(graph: &ModelGraph) -> Result<(Vec<u8>, Vec<u8>)> {
    ModelFile::plain(graph.clone()).encode()
}

pub fn load_model_files(manifest_path: &Path) -> Result<ModelFile> {
    ModelFile::read(manifest_path)
}

pub fn save_model_files(file: &ModelFile, manifest_path: &Path) -> Result<()> {
    file.write(manifest_path)
}

struct BlobReader<'a> {
    blob: &'a [u8],
}

impl BlobReader<'_> {
    fn slice(&self, layer: &str, r: BlobRef, expected: usize) -> Result<Vec<f32>> {
        let end = r.offset.checked_add(r.length);
        if end.is_none_or(|e| e > self.blob.len()) {
            return Err(Error::WeightSlice {
                layer: layer.into(),
                offset: r.offset,
                length: r.length,
                blob_len: self.blob.len(),
            });
        }
        if r.length != expected * 4 {
            return Err(Error::Shape {
                layer: Some(layer.into()),
                detail: format!("slice holds {} bytes, expected {} values", r.length, expected),
            });
        }
        let values: Vec<f32> = self.blob[r.offset..r.offset + r.length]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Manifest(format!("layer `{layer}`: non-finite weight")));
        }
        Ok(values)
    }
}

#[derive(Default)]
struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, values: &[f32]) -> BlobRef {
        let offset = self.bytes.len();
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        BlobRef {
            offset,
            length: values.len() * 4,
        }
    }
}

fn require<T>(v: Option<T>, layer: &str, field: &str) -> Result<T> {
    v.ok_or_else(|| Error::Manifest(format!("layer `{layer}`: missing `{field}`")))
}

fn decode_layer(e: &LayerEntry, blob: &BlobReader<'_>) -> Result<LayerSpec> {
    let id = e.id.as_str();
    let kind = match e.kind.as_str() {
        "input" => LayerKind::Input {
            shape: require(e.shape, id, "shape")?,
        },
        "conv" | "convtranspose" => {
            let dims = require(e.kernel_shape, id, "kernel_shape")?;
            let transposed = e.kind == "convtranspose";
            let out_ch = if transposed { dims[1] } else { dims[0] };
            let weights = blob.slice(id, require(e.weights, id, "weights")?, dims.iter().product())?;
            let bias = match e.bias {
                Some(r) => blob.slice(id, r, out_ch)?,
                None => vec![0.0; out_ch],
            };
            let lin = Linear {
                weights: Kernel::new(dims, weights).map_err(|err| err.in_layer(id))?,
                bias,
                stride: e.stride.unwrap_or(1),
                padding: e.padding.unwrap_or(0),
            };
            if lin.stride == 0 {
                return Err(Error::Manifest(format!("layer `{id}`: stride must be positive")));
            }
            if transposed {
                LayerKind::ConvTranspose(lin)
            } else {
                LayerKind::Conv(lin)
            }
        }
        "batchnorm" => {
            let n = e
                .gamma
                .map(|r| r.length / 4)
                .ok_or_else(|| Error::Manifest(format!("layer `{id}`: missing `gamma`")))?;
            LayerKind::BatchNorm(BatchNorm {
                gamma: blob.slice(id, require(e.gamma, id, "gamma")?, n)?,
                beta: blob.slice(id, require(e.beta, id, "beta")?, n)?,
                running_mean: blob.slice(id, require(e.running_mean, id, "running_mean")?, n)?,
                running_var: blob.slice(id, require(e.running_var, id, "running_var")?, n)?,
                epsilon: require(e.epsilon, id, "epsilon")?,
            })
        }
        "relu" => LayerKind::Relu,
        "maxpool" => {
            let pool = Pool {
                kernel: require(e.kernel, id, "kernel")?,
                stride: e.stride.unwrap_or(1),
                padding: e.padding.unwrap_or(0),
            };
            if pool.kernel == 0 || pool.stride == 0 {
                return Err(Error::Manifest(format!(
                    "layer `{id}`: pool kernel and stride must be positive"
                )));
            }
            LayerKind::MaxPool(pool)
        }
        "concat" => LayerKind::Concat,
        "output" => LayerKind::Output,
        other => return Err(Error::Manifest(format!("layer `{id}`: unknown kind `{other}`"))),
    };
    Ok(LayerSpec {
        id: e.id.clone(),
        inputs: e.inputs.clone(),
        kind,
    })
}

fn encode_layer(l: &LayerSpec, shape: Option<Shape>, blob: &mut BlobWriter) -> LayerEntry {
    let mut e = LayerEntry {
        id: l.id.clone(),
        kind: l.kind.name().into(),
        inputs: l.inputs.clone(),
        shape,
        kernel_shape: None,
        kernel: None,
        stride: None,
        padding: None,
        weights: None,
        bias: None,
        gamma: None,
        beta: None,
        running_mean: None,
        running_var: None,
        epsilon: None,
    };
    match &l.kind {
        LayerKind::Conv(lin) | LayerKind::ConvTranspose(lin) => {
            e.kernel_shape = Some(lin.weights.dims());
            e.stride = Some(lin.stride);
            e.padding = Some(lin.padding);
            e.weights = Some(blob.push(lin.weights.data()));
            e.bias = Some(blob.push(&lin.bias));
        }
        LayerKind::BatchNorm(bn) => {
            e.gamma = Some(blob.push(&bn.gamma));
            e.beta = Some(blob.push(&bn.beta));
            e.running_mean = Some(blob.push(&bn.running_mean));
            e.running_var = Some(blob.push(&bn.running_var));
            e.epsilon = Some(bn.epsilon);
        }
        LayerKind::MaxPool(p) => {
            e.kernel = Some(p.kernel);
            e.stride = Some(p.stride);
            e.padding = Some(p.padding);
        }
        LayerKind::Input { .. } | LayerKind::Relu | LayerKind::Concat | LayerKind::Output => {}
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::testing::identity_graph;

    const MINIMAL: &str = r#"{
      "format": "spikeconv-model", "version": 1, "weights_file": "weights.bin",
      "input_shape": [1, 4, 4],
      "layers": [
        {"id": "in", "kind": "input", "shape": [1, 4, 4]},
        {"id": "c", "kind": "conv", "inputs": ["in"], "kernel_shape": [1, 1, 1, 1],
         "weights": {"offset": 0, "length": 4}},
        {"id": "out", "kind": "output", "inputs": ["c"]}
      ]
    }"#;

    #[test]
    fn minimal_manifest_loads() {
        let g = load_model(MINIMAL.as_bytes(), &1.0f32.to_le_bytes()).unwrap();
        assert_eq!(g.layers().len(), 3);
        assert_eq!(g, identity_graph());
    }

    #[test]
    fn missing_bias_serializes_as_explicit_zero() {
        let g = load_model(MINIMAL.as_bytes(), &1.0f32.to_le_bytes()).unwrap();
        let (m, w) = save_model(&g).unwrap();
        assert_eq!(w.len(), 8);
        assert_eq!(&w[4..], &0.0f32.to_le_bytes());
        let text = String::from_utf8(m).unwrap();
        assert!(text.contains("\"bias\""));
    }

    #[test]
    fn out_of_range_slice_rejected() {
        let err = load_model(MINIMAL.as_bytes(), &[0u8; 2]).unwrap_err();
        assert!(
            matches!(err, Error::WeightSlice { ref layer, .. } if layer == "c"),
            "{err}"
        );
    }

    #[test]
    fn dangling_reference_rejected_with_id() {
        let bad = MINIMAL.replace(r#""inputs": ["c"]"#, r#""inputs": ["nowhere"]"#);
        let err = load_model(bad.as_bytes(), &1.0f32.to_le_bytes()).unwrap_err();
        assert!(err.to_string().contains("nowhere"), "{err}");
    }

    #[test]
    fn malformed_manifest_rejected() {
        assert!(matches!(load_model(b"{not json", &[]), Err(Error::Manifest(_))));
        let bad = MINIMAL.replace("\"conv\"", "\"deconv9\"");
        assert!(load_model(bad.as_bytes(), &1.0f32.to_le_bytes()).is_err());
    }

    #[test]
    fn declared_shape_mismatch_rejected() {
        let bad = MINIMAL.replace(
            r#"{"id": "out", "kind": "output", "inputs": ["c"]}"#,
            r#"{"id": "out", "kind": "output", "inputs": ["c"], "shape": [2, 4, 4]}"#,
        );
        let err = load_model(bad.as_bytes(), &1.0f32.to_le_bytes()).unwrap_err();
        assert!(err.to_string().contains("`out`"), "{err}");
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let g = load_model(MINIMAL.as_bytes(), &1.0f32.to_le_bytes()).unwrap();
        let (m1, w1) = save_model(&g).unwrap();
        let (m2, w2) = save_model(&load_model(&m1, &w1).unwrap()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(w1, w2);
    }
}
