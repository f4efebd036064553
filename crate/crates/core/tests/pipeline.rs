use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikeconv::convert::normalize_weights;
use spikeconv::graph::{sample_activation_stats, LayerKind, LayerSpec, Linear, ModelGraph, NormStats, Pool};
use spikeconv::snn::{
    build_snn, decode_output, run_snn, spike_maxpool, CodingConfig, Incoming, PoolStats, Scheme, SpikeTrain,
};
use spikeconv::tensor::maxpool2d;
use spikeconv::{IntTensor, Kernel, Shape, Tensor};

fn conv(id: &str, input: &str, w: Kernel, b: Vec<f32>, stride: usize, padding: usize) -> LayerSpec {
    let lin = Linear {
        weights: w,
        bias: b,
        stride,
        padding,
    };
    LayerSpec::new(id, LayerKind::Conv(lin), &[input])
}

/// One spiking layer passing its input straight through.
fn identity_layer(shape: Shape) -> ModelGraph {
    let c = shape.channels;
    let mut w = vec![0.0; c * c];
    for i in 0..c {
        w[i * c + i] = 1.0;
    }
    ModelGraph::new(vec![
        LayerSpec::new("in", LayerKind::Input { shape }, &[]),
        conv("c", "in", Kernel::new([c, c, 1, 1], w).unwrap(), vec![0.0; c], 1, 0),
        LayerSpec::new("out", LayerKind::Output, &["c"]),
    ])
    .unwrap()
}

fn unit_stats(g: &ModelGraph) -> NormStats {
    let mut s = NormStats::default();
    for l in g.layers() {
        s.insert(l.id.clone(), vec![1.0; g.shape_of(&l.id).unwrap().channels]);
    }
    s
}

fn quantized(x: f32, t: u32) -> f64 {
    let t = f64::from(t);
    ((f64::from(x) * t + 0.5).floor().clamp(0.0, t)) / t
}

#[test]
fn single_layer_rounds_half_up() {
    let grid: Vec<f32> = (0..=1000).map(|i| i as f32 / 1000.0).collect();
    let g = identity_layer(Shape::new(1, 1, grid.len()));
    let model = normalize_weights(&g, &unit_stats(&g)).unwrap();
    let x = Tensor::new(g.input_shape(), grid.clone()).unwrap();
    for t in [4u32, 5, 8, 64] {
        for scheme in [Scheme::Rate, Scheme::Stdi] {
            for f_c in (1..=t).filter(|f| t % f == 0) {
                let coding = CodingConfig::new(scheme, t, f_c).unwrap();
                let out = run_snn(&build_snn(&model, coding).unwrap(), &x).unwrap();
                for (&xi, &r) in grid.iter().zip(out.outputs["out"].data()) {
                    assert_eq!(r, quantized(xi, t), "x={xi} T={t} f_c={f_c} {scheme}");
                }
            }
        }
    }
}

#[test]
fn five_steps_give_six_levels() {
    let grid: Vec<f32> = (0..=1000).map(|i| i as f32 / 1000.0).collect();
    let g = identity_layer(Shape::new(1, 1, grid.len()));
    let model = normalize_weights(&g, &unit_stats(&g)).unwrap();
    let x = Tensor::new(g.input_shape(), grid).unwrap();
    let out = run_snn(&build_snn(&model, CodingConfig::rate(5, 1).unwrap()).unwrap(), &x).unwrap();
    let mut levels: Vec<u64> = out.outputs["out"].data().iter().map(|r| (r * 5.0) as u64).collect();
    levels.dedup();
    assert_eq!(levels, vec![0, 1, 2, 3, 4, 5]);
}

fn random_train(rng: &mut ChaCha8Rng, shape: Shape, coding: &CodingConfig) -> SpikeTrain {
    // rate: at most f_c per step; stdi: the greedy schedule of a random whole value
    let steps = coding.compressed_timesteps();
    let mut counts = vec![IntTensor::zeros(shape); steps as usize];
    for n in 0..shape.len() {
        match coding.scheme {
            Scheme::Rate => {
                for c in counts.iter_mut() {
                    c.data_mut()[n] = rng.gen_range(0..=coding.compression);
                }
            }
            Scheme::Stdi => {
                let mut u = rng.gen_range(0..=coding.timesteps * 2);
                for (t, c) in counts.iter_mut().enumerate() {
                    let w = coding.spike_weight(t as u32 + 1);
                    c.data_mut()[n] = u / w;
                    u %= w;
                }
            }
        }
    }
    SpikeTrain {
        layer: "src".into(),
        counts,
    }
}

#[test]
fn spike_maxpool_is_lossless() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for kernel in [2usize, 3, 5] {
        for stride in [1usize, 2] {
            for case in 0..200 {
                let scheme = if case % 2 == 0 { Scheme::Rate } else { Scheme::Stdi };
                let coding = CodingConfig::new(scheme, 16, [1, 4, 16][case % 3]).unwrap();
                let shape = Shape::new(2, kernel + rng.gen_range(0..4), kernel + rng.gen_range(0..4));
                let padding = if stride == 1 { kernel / 2 } else { 0 };
                let train = random_train(&mut rng, shape, &coding);
                let m: Vec<f32> = (0..2).map(|_| rng.gen_range(0.1f32..4.0)).collect();
                let stats = PoolStats {
                    m_in: m.clone(),
                    m_out: m,
                };
                let pool = Pool {
                    kernel,
                    stride,
                    padding,
                };
                let (out, _) = spike_maxpool("mp", Incoming::Train(&train), &stats, pool, &coding, 1.0).unwrap();
                let lhs = decode_output(&out, &coding).unwrap();
                let rhs = maxpool2d(&decode_output(&train, &coding).unwrap(), kernel, stride, padding).unwrap();
                assert_eq!(lhs, rhs, "k={kernel} s={stride} case {case}");
            }
        }
    }
}

fn small_net(rng: &mut ChaCha8Rng) -> ModelGraph {
    let mut kernel = |dims: [usize; 4]| {
        let n: usize = dims.iter().product();
        let a = (6.0 / (dims[1] * dims[2] * dims[3]) as f32).sqrt();
        Kernel::new(dims, (0..n).map(|_| rng.gen_range(-a..a)).collect()).unwrap()
    };
    let pool = Pool {
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    let (k1, k2, k3) = (kernel([4, 2, 3, 3]), kernel([4, 8, 1, 1]), kernel([4, 2, 2, 2]));
    ModelGraph::new(vec![
        LayerSpec::new(
            "in",
            LayerKind::Input {
                shape: Shape::new(2, 6, 6),
            },
            &[],
        ),
        conv("c1", "in", k1, vec![0.05; 4], 1, 1),
        LayerSpec::new("r1", LayerKind::Relu, &["c1"]),
        LayerSpec::new("mp", LayerKind::MaxPool(pool), &["r1"]),
        LayerSpec::new("cat", LayerKind::Concat, &["r1", "mp"]),
        conv("c2", "cat", k2, vec![0.02; 4], 1, 0),
        LayerSpec::new("r2", LayerKind::Relu, &["c2"]),
        LayerSpec::new(
            "up",
            LayerKind::ConvTranspose(Linear {
                weights: Kernel::new([4, 2, 2, 2], k3.data().to_vec()).unwrap(),
                bias: vec![0.03; 2],
                stride: 2,
                padding: 0,
            }),
            &["r2"],
        ),
        LayerSpec::new("r3", LayerKind::Relu, &["up"]),
        LayerSpec::new("out", LayerKind::Output, &["r3"]),
    ])
    .unwrap()
}

fn inputs(rng: &mut ChaCha8Rng, shape: Shape, n: usize) -> Vec<Tensor> {
    (0..n)
        .map(|_| Tensor::from_fn(shape, |_, _, _| rng.gen_range(0.0f32..1.0)))
        .collect()
}

#[test]
fn compression_does_not_change_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let g = small_net(&mut rng);
    let samples = inputs(&mut rng, g.input_shape(), 8);
    let model = normalize_weights(&g, &sample_activation_stats(&g, &samples).unwrap()).unwrap();
    let x = &inputs(&mut rng, g.input_shape(), 1)[0];
    for scheme in [Scheme::Rate, Scheme::Stdi] {
        let base = run_snn(
            &build_snn(&model, CodingConfig::new(scheme, 64, 1).unwrap()).unwrap(),
            x,
        )
        .unwrap();
        for f_c in [4u32, 16, 64] {
            let coding = CodingConfig::new(scheme, 64, f_c).unwrap();
            let out = run_snn(&build_snn(&model, coding).unwrap(), x).unwrap();
            assert_eq!(out.outputs, base.outputs, "{scheme} f_c={f_c}");
        }
    }
}

#[test]
fn error_shrinks_with_timesteps() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = small_net(&mut rng);
    let samples = inputs(&mut rng, g.input_shape(), 8);
    let model = normalize_weights(&g, &sample_activation_stats(&g, &samples).unwrap()).unwrap();
    let x = &samples[0];
    let ann = model.normalized_forward(x).unwrap();
    let err = |t: u32| {
        let out = run_snn(&build_snn(&model, CodingConfig::stdi(t, 1).unwrap()).unwrap(), x).unwrap();
        ann["out"].cast::<f64>().max_abs_diff(&out.outputs["out"]).unwrap()
    };
    let (e4, e16, e256) = (err(4), err(16), err(256));
    assert!(e256 <= e16 && e16 <= e4, "{e4} {e16} {e256}");
    assert!(e256 < 0.05);
}

#[test]
fn telemetry_counts_every_emitted_spike() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = small_net(&mut rng);
    let samples = inputs(&mut rng, g.input_shape(), 4);
    let model = normalize_weights(&g, &sample_activation_stats(&g, &samples).unwrap()).unwrap();
    let out = run_snn(
        &build_snn(&model, CodingConfig::rate(32, 8).unwrap()).unwrap(),
        &samples[1],
    )
    .unwrap();
    let t = &out.telemetry;
    let by_kind = |k: &str| t.stages.iter().filter(|s| s.kind == k).map(|s| s.spikes).sum::<u64>();
    assert_eq!(by_kind("spike_concat"), 0);
    assert_eq!(
        t.total_spikes(),
        by_kind("spike_conv") + by_kind("spike_convtranspose") + by_kind("spike_maxpool")
    );
    assert!(t.stages.iter().all(|s| s.max_burst <= 8));
    // the output stage decodes the transposed conv's spikes
    let up = t.stages.iter().find(|s| s.id == "up").unwrap();
    let decoded: f64 = out.outputs["out"].data().iter().sum();
    assert_eq!(decoded * 32.0, up.spikes as f64);
}
