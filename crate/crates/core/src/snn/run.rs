use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::coding::CodingConfig;
use super::maxpool::spike_maxpool;
use super::neuron::{accumulate_phase, encode_input, fire_phase, Incoming, InjectionPlan, NeuronLayerState};
use super::plan::{SnnPlan, StageKind};
use super::train::{decode_output, SpikeTrain};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Per-stage record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTelemetry {
    pub id: String,
    pub kind: String,
    pub neurons: u64,
    /// Spikes emitted by this stage over the whole run (burst sizes summed).
    pub spikes: u64,
    pub max_burst: u32,
    /// Incoming spikes weighted by their outgoing synapse count. Linear
    /// stages only; not part of the paper's operation count.
    pub synaptic_events: u64,
    pub residual_min: f64,
    pub residual_mean: f64,
    pub residual_max: f64,
    pub accumulate_ms: f64,
    pub fire_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub coding: CodingConfig,
    pub input_pixels: u64,
    pub stages: Vec<StageTelemetry>,
}

impl Telemetry {
    pub fn total_spikes(&self) -> u64 {
        self.stages.iter().map(|s| s.spikes).sum()
    }

    pub fn total_synaptic_events(&self) -> u64 {
        self.stages.iter().map(|s| s.synaptic_events).sum()
    }
}

/// Firing ratios per output layer, in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedOutput {
    pub outputs: BTreeMap<String, Tensor<f64>>,
    pub telemetry: Telemetry,
}

enum Signal {
    Train(SpikeTrain),
    Injection(InjectionPlan),
}

impl Signal {
    fn incoming(&self) -> Incoming<'_> {
        match self {
            Signal::Train(t) => Incoming::Train(t),
            Signal::Injection(p) => Incoming::Injection(p),
        }
    }
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn residual_summary(state: &NeuronLayerState) -> (f64, f64, f64) {
    let d = state.v_mem().data();
    if d.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, d.iter().sum::<f64>() / d.len() as f64, max)
}

fn record(id: &str, kind: &str, shape: Shape) -> StageTelemetry {
    StageTelemetry {
        id: id.to_string(),
        kind: kind.to_string(),
        neurons: shape.len() as u64,
        spikes: 0,
        max_burst: 0,
        synaptic_events: 0,
        residual_min: 0.0,
        residual_mean: 0.0,
        residual_max: 0.0,
        accumulate_ms: 0.0,
        fire_ms: 0.0,
    }
}

fn synaptic_events(incoming: &SpikeTrain, synapses: &[u64]) -> u64 {
    if synapses.is_empty() {
        return 0;
    }
    incoming
        .per_neuron_totals()
        .iter()
        .enumerate()
        .map(|(n, &s)| s * synapses[n % synapses.len()])
        .sum()
}

/// Run every stage in order; each one accumulates its whole input before
/// firing, and its train is complete before any successor starts.
pub fn run_snn(plan: &SnnPlan, input: &Tensor) -> Result<DecodedOutput> {
    let coding = &plan.coding;
    if input.shape() != plan.input_shape {
        return Err(Error::Shape {
            layer: None,
            detail: format!("input is {}, plan expects {}", input.shape(), plan.input_shape),
        });
    }
    let mut signals: BTreeMap<&str, Signal> = BTreeMap::new();
    let mut outputs = BTreeMap::new();
    let mut stages = Vec::with_capacity(plan.stages.len());
    for stage in &plan.stages {
        let mut rec = record(&stage.id, stage.kind.name(), stage.shape);
        let signal = match &stage.kind {
            StageKind::Input => Signal::Injection(encode_input(input, coding)?),
            StageKind::SpikeLinear(weights) => {
                let source = &signals[stage.inputs[0].as_str()];
                let start = Instant::now();
                let mut state = NeuronLayerState::new(&stage.id, stage.shape, plan.v_init, plan.v_thr);
                accumulate_phase(&mut state, source.incoming(), weights, coding)?;
                if let Signal::Train(t) = source {
                    rec.synaptic_events = synaptic_events(t, &stage.synapses);
                }
                rec.accumulate_ms = ms(start);
                let start = Instant::now();
                let train = fire_phase(&mut state, coding)?;
                rec.fire_ms = ms(start);
                (rec.residual_min, rec.residual_mean, rec.residual_max) = residual_summary(&state);
                Signal::Train(train)
            }
            StageKind::SpikeMaxpool { pool, stats } => {
                let source = &signals[stage.inputs[0].as_str()];
                let start = Instant::now();
                let (train, state) = spike_maxpool(&stage.id, source.incoming(), stats, *pool, coding, plan.v_thr)?;
                rec.fire_ms = ms(start);
                (rec.residual_min, rec.residual_mean, rec.residual_max) = residual_summary(&state);
                Signal::Train(train)
            }
            StageKind::SpikeConcat => {
                let parts = stage
                    .inputs
                    .iter()
                    .map(|i| match &signals[i.as_str()] {
                        Signal::Train(t) => Ok(t),
                        Signal::Injection(_) => Err(Error::Unsupported {
                            layer: stage.id.clone(),
                            detail: "concat of an analog injection".into(),
                        }),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Signal::Train(SpikeTrain::concat(&stage.id, &parts).map_err(|e| e.in_layer(&stage.id))?)
            }
            StageKind::OutputDecode => {
                match &signals[stage.inputs[0].as_str()] {
                    Signal::Train(t) => {
                        outputs.insert(stage.id.clone(), decode_output(t, coding)?);
                    }
                    Signal::Injection(_) => {
                        return Err(Error::Unsupported {
                            layer: stage.id.clone(),
                            detail: "output of an analog injection".into(),
                        })
                    }
                }
                stages.push(rec);
                continue;
            }
        };
        if let Signal::Train(t) = &signal {
            // concat forwards spikes already counted at their source
            if !matches!(stage.kind, StageKind::SpikeConcat) {
                rec.spikes = t.total_spikes();
                rec.max_burst = t.max_burst();
            }
        }
        stages.push(rec);
        signals.insert(&stage.id, signal);
    }
    Ok(DecodedOutput {
        outputs,
        telemetry: Telemetry {
            coding: *coding,
            input_pixels: plan.input_shape.len() as u64,
            stages,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convert::normalize_weights;
    use crate::graph::{testing::identity_graph, NormStats};
    use crate::snn::build_snn;

    fn identity_plan(coding: CodingConfig) -> SnnPlan {
        let g = identity_graph();
        let mut stats = NormStats::default();
        for l in g.layers() {
            stats.insert(l.id.clone(), vec![1.0]);
        }
        build_snn(&normalize_weights(&g, &stats).unwrap(), coding).unwrap()
    }

    #[test]
    fn identity_network_quantizes_input() {
        let t = 16u32;
        let plan = identity_plan(CodingConfig::rate(t, 4).unwrap());
        let x = Tensor::from_fn(Shape::new(1, 4, 4), |_, y, x| (y * 4 + x) as f32 / 15.0);
        let out = run_snn(&plan, &x).unwrap();
        let r = &out.outputs["out"];
        for (&a, &b) in x.data().iter().zip(r.data()) {
            assert!((f64::from(a) - b).abs() <= 0.5 / f64::from(t) + 1e-12);
        }
        assert_eq!(out.telemetry.input_pixels, 16);
        let conv = &out.telemetry.stages[1];
        assert_eq!(conv.spikes as f64, r.data().iter().sum::<f64>() * f64::from(t));
        assert_eq!(conv.synaptic_events, 0);
    }

    #[test]
    fn wrong_input_shape() {
        let plan = identity_plan(CodingConfig::stdi(8, 1).unwrap());
        assert!(run_snn(&plan, &Tensor::zeros(Shape::new(1, 2, 2))).is_err());
    }

    #[test]
    fn telemetry_serializes() {
        let plan = identity_plan(CodingConfig::stdi(8, 2).unwrap());
        let out = run_snn(&plan, &Tensor::full(Shape::new(1, 4, 4), 0.3)).unwrap();
        let json = serde_json::to_string(&out.telemetry).unwrap();
        let back: Telemetry = serde_json::from_str(&json).unwrap();
        assert_eq!(back.total_spikes(), out.telemetry.total_spikes());
    }
}
