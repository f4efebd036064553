//! Seeded fixture networks and their input sets.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spikeconv::graph::{
    ann_forward, fold_batchnorm, sample_activation_stats, BatchNorm, LayerKind, LayerSpec, Linear, ModelFile,
    ModelGraph, Pool,
};
use spikeconv::{Kernel, Shape, Tensor};

use crate::{tensorset, Invalid};

/// One entry of an architecture recipe. Convolution blocks expand to
/// `conv [-> batchnorm] [-> relu]` layers named `{id}`, `{id}.bn`, `{id}.act`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Block {
    Conv {
        id: String,
        input: String,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        batchnorm: bool,
        #[serde(default = "yes")]
        relu: bool,
    },
    ConvTranspose {
        id: String,
        input: String,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        batchnorm: bool,
        #[serde(default = "yes")]
        relu: bool,
    },
    MaxPool {
        id: String,
        input: String,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Concat {
        id: String,
        inputs: Vec<String>,
    },
    Output {
        id: String,
        input: String,
    },
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

/// Weight and input distributions.
///
/// Weights are `scale * (offset + u)` with `u` uniform in `[-1, 1]` and
/// `scale = gain / (offset * taps)`, where `taps` is the number of inputs
/// reaching one output. Each output channel then sums its inputs with gain
/// `gain` on average, so activations stay O(1) through depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub weight_gain: f64,
    pub weight_offset: f64,
    pub bias_range: [f32; 2],
    /// Inputs are drawn uniformly from this range, per pixel.
    pub input_range: [f32; 2],
}

impl Default for Distribution {
    fn default() -> Self {
        Distribution {
            weight_gain: 1.0,
            weight_offset: 0.5,
            bias_range: [0.01, 0.05],
            input_range: [0.0, 0.5],
        }
    }
}

/// Where the adversarial evaluation input pushes an activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialSpec {
    /// Layer whose activation is driven; its channel maxima come from the
    /// sample set.
    pub layer: String,
    pub channel: usize,
    /// Target activation as a multiple of the sampled channel maximum.
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub name: String,
    pub seed: u64,
    pub input_shape: Shape,
    pub blocks: Vec<Block>,
    #[serde(default)]
    pub distribution: Distribution,
    pub samples: usize,
    /// Use the first stats sample as the evaluation input instead of a
    /// held-out draw.
    #[serde(default)]
    pub eval_from_samples: bool,
    #[serde(default)]
    pub adversarial: Option<AdversarialSpec>,
}

/// What the adversarial search produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialInfo {
    pub layer: String,
    pub channel: usize,
    /// Flat index of the driven neuron within the layer's output.
    pub neuron: usize,
    pub factor: f64,
    /// Achieved activation over sampled maximum.
    pub achieved: f64,
    /// Multiplier applied to the held-out base input.
    pub input_scale: f64,
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub spec: FixtureSpec,
    pub graph: ModelGraph,
    pub samples: Vec<Tensor>,
    pub eval: Tensor,
    pub adversarial: Option<AdversarialInfo>,
}

#[derive(Serialize)]
struct FixtureRecord<'a> {
    spec: &'a FixtureSpec,
    adversarial: &'a Option<AdversarialInfo>,
}

fn cbr(id: &str, input: &str, out: usize, kernel: usize, stride: usize, padding: usize) -> Block {
    Block::Conv {
        id: id.into(),
        input: input.into(),
        out_channels: out,
        kernel,
        stride,
        padding,
        batchnorm: true,
        relu: true,
    }
}

fn pool5(id: &str, input: &str) -> Block {
    Block::MaxPool {
        id: id.into(),
        input: input.into(),
        kernel: 5,
        stride: 1,
        padding: 2,
    }
}

fn f1_blocks() -> Vec<Block> {
    vec![
        cbr("c1", "in", 32, 3, 1, 1),
        cbr("c2", "c1.act", 64, 3, 2, 1),
        cbr("c3", "c2.act", 64, 3, 1, 1),
        cbr("sppf.cv1", "c3.act", 32, 1, 1, 0),
        pool5("sppf.m1", "sppf.cv1.act"),
        pool5("sppf.m2", "sppf.m1"),
        pool5("sppf.m3", "sppf.m2"),
        Block::Concat {
            id: "sppf.cat".into(),
            inputs: vec![
                "sppf.cv1.act".into(),
                "sppf.m1".into(),
                "sppf.m2".into(),
                "sppf.m3".into(),
            ],
        },
        cbr("sppf.cv2", "sppf.cat", 64, 1, 1, 0),
        Block::ConvTranspose {
            id: "up".into(),
            input: "sppf.cv2.act".into(),
            out_channels: 32,
            kernel: 2,
            stride: 2,
            padding: 0,
            batchnorm: true,
            relu: true,
        },
        cbr("c4", "up.act", 32, 3, 1, 1),
        Block::Conv {
            id: "head".into(),
            input: "c4.act".into(),
            out_channels: 8,
            kernel: 1,
            stride: 1,
            padding: 0,
            batchnorm: false,
            relu: true,
        },
        Block::Output {
            id: "out".into(),
            input: "head.act".into(),
        },
    ]
}

/// The built-in fixtures `F1`, `F2` and `F3`.
pub fn builtin(name: &str) -> Result<FixtureSpec> {
    let spec = match name.to_ascii_uppercase().as_str() {
        "F1" => FixtureSpec {
            name: "F1".into(),
            seed: 1,
            input_shape: Shape::new(3, 16, 16),
            blocks: f1_blocks(),
            distribution: Distribution::default(),
            samples: 16,
            eval_from_samples: false,
            adversarial: None,
        },
        "F2" => FixtureSpec {
            name: "F2".into(),
            adversarial: Some(AdversarialSpec {
                layer: "head.act".into(),
                channel: 0,
                factor: 1.5,
            }),
            ..builtin("F1")?
        },
        "F3" => FixtureSpec {
            name: "F3".into(),
            seed: 3,
            input_shape: Shape::new(2, 6, 6),
            blocks: vec![
                Block::Conv {
                    id: "c1".into(),
                    input: "in".into(),
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    batchnorm: false,
                    relu: true,
                },
                Block::MaxPool {
                    id: "pool".into(),
                    input: "c1.act".into(),
                    kernel: 2,
                    stride: 2,
                    padding: 0,
                },
                Block::Output {
                    id: "out".into(),
                    input: "pool".into(),
                },
            ],
            distribution: Distribution::default(),
            samples: 16,
            eval_from_samples: true,
            adversarial: None,
        },
        other => bail!(Invalid(format!("unknown fixture `{other}` (expected F1, F2 or F3)"))),
    };
    Ok(spec)
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    dist: &'a Distribution,
    samples: &'a [Tensor],
    layers: Vec<LayerSpec>,
}

/// Redraws allowed per block before giving up on keeping every channel alive.
const REDRAWS: usize = 64;
/// A channel counts as alive when its sampled maximum reaches this fraction
/// of the strongest channel in the same layer.
const ALIVE_RATIO: f32 = 0.02;

impl Builder<'_> {
    /// The layers so far, closed off with a probe output so shapes resolve.
    fn partial(&self) -> Result<ModelGraph> {
        let mut layers = self.layers.clone();
        let last = layers.last().map(|l| l.id.clone()).unwrap_or_default();
        layers.push(LayerSpec::new("__probe", LayerKind::Output, &[&last]));
        Ok(ModelGraph::new(layers)?)
    }

    fn channels_of(&self, id: &str) -> Result<usize> {
        let g = self.partial()?;
        g.shape_of(id)
            .map(|s| s.channels)
            .ok_or_else(|| Invalid(format!("recipe references unknown layer `{id}`")).into())
    }

    fn uniform(&mut self, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        (0..n).map(|_| self.rng.gen_range(lo..hi)).collect()
    }

    /// Sampled per-channel maxima of `id` are all within `ALIVE_RATIO` of
    /// the layer's strongest channel.
    fn alive(&self, id: &str) -> Result<bool> {
        let g = self.partial()?;
        let stats = sample_activation_stats(&fold_batchnorm(&g)?, self.samples)?;
        let m = stats.require(id)?;
        let top = m.iter().copied().fold(0.0f32, f32::max);
        Ok(top > 0.0 && m.iter().all(|&v| v >= ALIVE_RATIO * top))
    }

    /// Append a linear block, redrawing it until no output channel is dead
    /// on the sample set.
    #[allow(clippy::too_many_arguments)]
    fn block(
        &mut self,
        id: &str,
        input: &str,
        out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        batchnorm: bool,
        relu: bool,
        transposed: bool,
    ) -> Result<()> {
        let keep = self.layers.len();
        for _ in 0..REDRAWS {
            self.layers.truncate(keep);
            self.linear(id, input, out, kernel, stride, padding, batchnorm, relu, transposed)?;
            let last = self.layers.last().expect("block pushed layers").id.clone();
            if !relu || self.alive(&last)? {
                return Ok(());
            }
        }
        bail!(Invalid(format!(
            "block `{id}` keeps dead channels after {REDRAWS} draws"
        )))
    }

    #[allow(clippy::too_many_arguments)]
    fn linear(
        &mut self,
        id: &str,
        input: &str,
        out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        batchnorm: bool,
        relu: bool,
        transposed: bool,
    ) -> Result<()> {
        let in_ch = self.channels_of(input)?;
        // a transposed conv with stride s reaches each output through k²/s² taps
        let taps = if transposed {
            (in_ch * kernel * kernel / (stride * stride)).max(1)
        } else {
            in_ch * kernel * kernel
        };
        let rho = self.dist.weight_offset;
        let scale = self.dist.weight_gain / (rho * taps as f64);
        let dims = if transposed {
            [in_ch, out, kernel, kernel]
        } else {
            [out, in_ch, kernel, kernel]
        };
        let n = out * in_ch * kernel * kernel;
        let draws: Vec<f32> = (0..n)
            .map(|_| (scale * (rho + self.rng.gen_range(-1.0..1.0))) as f32)
            .collect();
        let weights = Kernel::new(dims, draws)?;
        let [lo, hi] = self.dist.bias_range;
        let lin = Linear {
            weights,
            bias: self.uniform(out, lo, hi),
            stride,
            padding,
        };
        let kind = if transposed {
            LayerKind::ConvTranspose(lin)
        } else {
            LayerKind::Conv(lin)
        };
        self.layers.push(LayerSpec::new(id, kind, &[input]));
        let mut last = id.to_string();
        if batchnorm {
            let bn = BatchNorm {
                gamma: self.uniform(out, 0.8, 1.2),
                beta: self.uniform(out, 0.0, 0.02),
                running_mean: self.uniform(out, -0.02, 0.02),
                running_var: self.uniform(out, 0.5, 1.5),
                epsilon: 1e-5,
            };
            let bn_id = format!("{id}.bn");
            self.layers
                .push(LayerSpec::new(&bn_id, LayerKind::BatchNorm(bn), &[&last]));
            last = bn_id;
        }
        if relu {
            self.layers
                .push(LayerSpec::new(format!("{id}.act"), LayerKind::Relu, &[&last]));
        }
        Ok(())
    }
}

pub fn build_graph(spec: &FixtureSpec, samples: &[Tensor], rng: &mut ChaCha8Rng) -> Result<ModelGraph> {
    let mut b = Builder {
        rng,
        dist: &spec.distribution,
        samples,
        layers: vec![LayerSpec::new(
            "in",
            LayerKind::Input {
                shape: spec.input_shape,
            },
            &[],
        )],
    };
    for block in &spec.blocks {
        match block {
            Block::Conv {
                id,
                input,
                out_channels,
                kernel,
                stride,
                padding,
                batchnorm,
                relu,
            } => b.block(
                id,
                input,
                *out_channels,
                *kernel,
                *stride,
                *padding,
                *batchnorm,
                *relu,
                false,
            )?,
            Block::ConvTranspose {
                id,
                input,
                out_channels,
                kernel,
                stride,
                padding,
                batchnorm,
                relu,
            } => b.block(
                id,
                input,
                *out_channels,
                *kernel,
                *stride,
                *padding,
                *batchnorm,
                *relu,
                true,
            )?,
            Block::MaxPool {
                id,
                input,
                kernel,
                stride,
                padding,
            } => {
                let pool = Pool {
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                };
                b.layers.push(LayerSpec::new(id, LayerKind::MaxPool(pool), &[input]));
            }
            Block::Concat { id, inputs } => {
                let refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
                b.layers.push(LayerSpec::new(id, LayerKind::Concat, &refs));
            }
            Block::Output { id, input } => {
                b.layers.push(LayerSpec::new(id, LayerKind::Output, &[input]));
            }
        }
        b.partial().context("fixture recipe")?;
    }
    Ok(ModelGraph::new(b.layers)?)
}

fn draw_input(rng: &mut ChaCha8Rng, shape: Shape, range: [f32; 2]) -> Tensor {
    Tensor::from_fn(shape, |_, _, _| rng.gen_range(range[0]..range[1]))
}

/// Ratio of the strongest activation in `(layer, channel)` to its sampled
/// maximum, and the neuron where it occurs.
fn peak_ratio(graph: &ModelGraph, x: &Tensor, layer: &str, channel: usize, max: f32) -> Result<(f64, usize)> {
    let acts = ann_forward(graph, x)?;
    let a = &acts[layer];
    let plane = a.shape().plane();
    let (i, v) =
        a.channel(channel).iter().enumerate().fold(
            (0, f32::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        );
    Ok((f64::from(v) / f64::from(max), channel * plane + i))
}

const ATTEMPTS_PER_CHANNEL: usize = 16;

/// Scale a held-out input until a designated activation reaches `factor`
/// times its sampled maximum. Bisection on the scale, keeping every pixel
/// within `[0, 1]`. Channels are tried in order starting from the requested
/// one; the one used is recorded.
fn adversarial_input(
    graph: &ModelGraph,
    samples: &[Tensor],
    spec: &FixtureSpec,
    adv: &AdversarialSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, AdversarialInfo)> {
    let folded = fold_batchnorm(graph)?;
    let stats = sample_activation_stats(&folded, samples)?;
    let maxima = stats.require(&adv.layer)?;
    ensure!(
        adv.channel < maxima.len(),
        Invalid(format!("layer `{}` has no channel {}", adv.layer, adv.channel))
    );
    for offset in 0..maxima.len() {
        let channel = (adv.channel + offset) % maxima.len();
        let max = maxima[channel];
        for _attempt in 0..ATTEMPTS_PER_CHANNEL {
            let base = draw_input(rng, spec.input_shape, spec.distribution.input_range);
            let top = base.data().iter().copied().fold(0.0f32, f32::max);
            if top <= 0.0 {
                continue;
            }
            let ratio_at = |c: f64| -> Result<(f64, usize, Tensor)> {
                let x = base.map(|v| (f64::from(v) * c) as f32);
                let (r, n) = peak_ratio(&folded, &x, &adv.layer, channel, max)?;
                Ok((r, n, x))
            };
            let (mut lo, mut hi) = (0.0, 1.0 / f64::from(top));
            if ratio_at(hi)?.0 < adv.factor || ratio_at(lo)?.0 > adv.factor {
                continue;
            }
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if ratio_at(mid)?.0 < adv.factor {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let (achieved, neuron, x) = ratio_at(hi)?;
            ensure!(
                x.data().iter().all(|v| (0.0..=1.0).contains(v)),
                "adversarial input out of range"
            );
            return Ok((
                x,
                AdversarialInfo {
                    layer: adv.layer.clone(),
                    channel,
                    neuron,
                    factor: adv.factor,
                    achieved,
                    input_scale: hi,
                },
            ));
        }
    }
    bail!(Invalid(format!(
        "no held-out input reaches {}x the sampled maximum of `{}`",
        adv.factor, adv.layer
    )))
}

impl FixtureSpec {
    pub fn generate(&self) -> Result<Fixture> {
        ensure!(self.samples > 0, Invalid("fixture needs at least one sample".into()));
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let samples: Vec<Tensor> = (0..self.samples)
            .map(|_| draw_input(&mut rng, self.input_shape, self.distribution.input_range))
            .collect();
        let graph = build_graph(self, &samples, &mut rng)?;
        let (eval, adversarial) = match &self.adversarial {
            Some(adv) => {
                let (x, info) = adversarial_input(&graph, &samples, self, adv, &mut rng)?;
                (x, Some(info))
            }
            None if self.eval_from_samples => (samples[0].clone(), None),
            None => (
                draw_input(&mut rng, self.input_shape, self.distribution.input_range),
                None,
            ),
        };
        Ok(Fixture {
            spec: self.clone(),
            graph,
            samples,
            eval,
            adversarial,
        })
    }
}

impl Fixture {
    /// Writes `model.json`, `weights.bin`, `samples.tset`, `eval.tset` and
    /// `fixture.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        ModelFile::plain(self.graph.clone()).write(&dir.join("model.json"))?;
        tensorset::write(&dir.join("samples.tset"), &self.samples)?;
        tensorset::write(&dir.join("eval.tset"), std::slice::from_ref(&self.eval))?;
        let record = FixtureRecord {
            spec: &self.spec,
            adversarial: &self.adversarial,
        };
        let mut json = serde_json::to_string_pretty(&record)?;
        json.push('\n');
        fs::write(dir.join("fixture.json"), json)?;
        Ok(())
    }

    pub fn read_adversarial(dir: &Path) -> Result<Option<AdversarialInfo>> {
        #[derive(Deserialize)]
        struct Record {
            adversarial: Option<AdversarialInfo>,
        }
        let text = fs::read_to_string(dir.join("fixture.json"))?;
        Ok(serde_json::from_str::<Record>(&text)?.adversarial)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f3_is_small_and_bn_free() {
        let f = builtin("F3").unwrap().generate().unwrap();
        assert!(!f.graph.has_batchnorm());
        assert_eq!(f.graph.layers().len(), 5);
        assert_eq!(f.eval, f.samples[0]);
    }

    #[test]
    fn same_spec_same_fixture() {
        let a = builtin("F3").unwrap().generate().unwrap();
        let b = builtin("F3").unwrap().generate().unwrap();
        assert_eq!(a.graph, b.graph);
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn spec_roundtrips_through_json() {
        let spec = builtin("F2").unwrap();
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<FixtureSpec>(&text).unwrap(), spec);
    }

    #[test]
    fn unknown_reference_rejected() {
        let mut spec = builtin("F3").unwrap();
        spec.blocks[1] = Block::MaxPool {
            id: "pool".into(),
            input: "nope".into(),
            kernel: 2,
            stride: 2,
            padding: 0,
        };
        assert!(spec.generate().is_err());
    }
}
