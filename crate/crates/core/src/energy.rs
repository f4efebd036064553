//! Operation counts, the energy model and ANN/SNN output comparison.
//!
//! ANN cost is priced as multiply-accumulates, SNN cost as one accumulate per
//! emitted spike plus one MAC per input pixel (the analog first layer). Bias
//! additions are left out on both sides.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{LayerKind, ModelGraph};
use crate::snn::Telemetry;
use crate::tensor::Tensor;

/// Joules per operation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyConstants {
    pub mac_joules: f64,
    pub ac_joules: f64,
}

impl Default for EnergyConstants {
    fn default() -> Self {
        EnergyConstants {
            mac_joules: 4.6e-12,
            ac_joules: 0.9e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOps {
    pub id: String,
    pub kind: String,
    pub ann_macs: u64,
    pub snn_acs: u64,
    /// Spikes times outgoing synapses; not part of the paper's count.
    pub fanout_acs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub ann_mac_count: u64,
    pub snn_ac_count: u64,
    pub input_mac_count: u64,
    pub fanout_ac_count: u64,
    pub energy_ann_joules: f64,
    pub energy_snn_joules: f64,
    pub constants: EnergyConstants,
    pub layers: Vec<LayerOps>,
}

/// MACs of one layer: `out_elems * in_ch * kh * kw` for conv and transposed
/// conv, zero elsewhere.
pub fn layer_macs(graph: &ModelGraph, id: &str) -> u64 {
    let Some(layer) = graph.layer(id) else { return 0 };
    let (LayerKind::Conv(lin) | LayerKind::ConvTranspose(lin)) = &layer.kind else {
        return 0;
    };
    let [_, _, kh, kw] = lin.weights.dims();
    let in_ch = graph.shape_of(&layer.inputs[0]).expect("validated").channels;
    let out = graph.shape_of(id).expect("validated").len();
    (out * in_ch * kh * kw) as u64
}

/// Total and per-layer ANN MAC count, in canonical order.
pub fn count_ann_flops(graph: &ModelGraph) -> (u64, Vec<(String, u64)>) {
    let per: Vec<(String, u64)> = graph
        .layers()
        .iter()
        .map(|l| (l.id.clone(), layer_macs(graph, &l.id)))
        .collect();
    (per.iter().map(|(_, m)| m).sum(), per)
}

/// SNN operation count from a completed run: total spikes and input pixels.
pub fn count_snn_flops(telemetry: &Telemetry) -> (u64, u64) {
    (telemetry.total_spikes(), telemetry.input_pixels)
}

impl EnergyReport {
    pub fn new(graph: &ModelGraph, telemetry: &Telemetry, constants: EnergyConstants) -> Self {
        let mut layers: Vec<LayerOps> = graph
            .layers()
            .iter()
            .map(|l| LayerOps {
                id: l.id.clone(),
                kind: l.kind.name().to_string(),
                ann_macs: layer_macs(graph, &l.id),
                snn_acs: 0,
                fanout_acs: 0,
            })
            .collect();
        for s in &telemetry.stages {
            if let Some(l) = layers.iter_mut().find(|l| l.id == s.id) {
                l.snn_acs = s.spikes;
                l.fanout_acs = s.synaptic_events;
            }
        }
        let ann_mac_count = layers.iter().map(|l| l.ann_macs).sum();
        let snn_ac_count = layers.iter().map(|l| l.snn_acs).sum();
        let fanout_ac_count = layers.iter().map(|l| l.fanout_acs).sum();
        let input_mac_count = telemetry.input_pixels;
        EnergyReport {
            ann_mac_count,
            snn_ac_count,
            input_mac_count,
            fanout_ac_count,
            energy_ann_joules: ann_mac_count as f64 * constants.mac_joules,
            energy_snn_joules: snn_energy(snn_ac_count, input_mac_count, constants),
            constants,
            layers,
        }
    }

    pub const CSV_HEADER: [&'static str; 6] = [
        "ann_macs",
        "snn_acs",
        "input_macs",
        "fanout_acs",
        "energy_ann_j",
        "energy_snn_j",
    ];

    pub fn csv_fields(&self) -> [String; 6] {
        [
            self.ann_mac_count.to_string(),
            self.snn_ac_count.to_string(),
            self.input_mac_count.to_string(),
            self.fanout_ac_count.to_string(),
            format!("{:e}", self.energy_ann_joules),
            format!("{:e}", self.energy_snn_joules),
        ]
    }
}

pub fn snn_energy(acs: u64, input_macs: u64, c: EnergyConstants) -> f64 {
    acs as f64 * c.ac_joules + input_macs as f64 * c.mac_joules
}

/// Error metrics between a channel-normalized ANN output and a decoded SNN
/// output of the same shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub max_abs: f64,
    pub mse: f64,
    pub argmax_agree: bool,
}

fn argmax(v: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, x) in v.enumerate() {
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.map(|(i, _)| i)
}

pub fn compare_outputs(ann: &Tensor, snn: &Tensor<f64>) -> Result<Comparison> {
    if ann.shape() != snn.shape() {
        return Err(Error::shape(format!(
            "cannot compare {} with {}",
            ann.shape(),
            snn.shape()
        )));
    }
    let (mut max_abs, mut sq) = (0.0f64, 0.0f64);
    for (&a, &s) in ann.data().iter().zip(snn.data()) {
        let d = (f64::from(a) - s).abs();
        max_abs = max_abs.max(d);
        sq += d * d;
    }
    let n = ann.data().len().max(1) as f64;
    Ok(Comparison {
        max_abs,
        mse: sq / n,
        argmax_agree: argmax(ann.data().iter().map(|&a| f64::from(a))) == argmax(snn.data().iter().copied()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::testing::*;
    use crate::snn::{CodingConfig, StageTelemetry};
    use crate::tensor::{Kernel, Shape};

    #[test]
    fn identity_conv_macs() {
        let (total, per) = count_ann_flops(&identity_graph());
        assert_eq!(total, 16);
        assert_eq!(per.iter().filter(|(_, m)| *m > 0).count(), 1);
    }

    #[test]
    fn closed_form_conv_macs() {
        let g = ModelGraph::new(vec![
            input(Shape::new(4, 8, 8)),
            conv(
                "c",
                "in",
                Kernel::new([8, 4, 3, 3], vec![0.0; 288]).unwrap(),
                vec![0.0; 8],
                1,
                1,
            ),
            output("out", "c"),
        ])
        .unwrap();
        assert_eq!(count_ann_flops(&g).0, 18_432);
    }

    fn telemetry(spikes: u64, pixels: u64) -> Telemetry {
        Telemetry {
            coding: CodingConfig::rate(4, 1).unwrap(),
            input_pixels: pixels,
            stages: vec![StageTelemetry {
                id: "c".into(),
                kind: "spike_conv".into(),
                neurons: 1,
                spikes,
                max_burst: 1,
                synaptic_events: 0,
                residual_min: 0.0,
                residual_mean: 0.0,
                residual_max: 0.0,
                accumulate_ms: 0.0,
                fire_ms: 0.0,
            }],
        }
    }

    #[test]
    fn zero_spike_run() {
        assert_eq!(count_snn_flops(&telemetry(0, 192)), (0, 192));
    }

    #[test]
    fn thousand_acs_is_point_nine_nanojoule() {
        let e = snn_energy(1000, 0, EnergyConstants::default());
        assert!((e - 0.9e-9).abs() < 1e-21);
    }

    #[test]
    fn report_totals_are_layer_sums() {
        let g = identity_graph();
        let r = EnergyReport::new(&g, &telemetry(7, 16), EnergyConstants::default());
        assert_eq!(r.snn_ac_count, r.layers.iter().map(|l| l.snn_acs).sum::<u64>());
        assert_eq!(r.ann_mac_count, r.layers.iter().map(|l| l.ann_macs).sum::<u64>());
        assert_eq!(r.energy_snn_joules, 7.0 * 0.9e-12 + 16.0 * 4.6e-12);
    }

    #[test]
    fn comparisons() {
        let a = Tensor::new(Shape::new(1, 1, 3), vec![0.1, 0.9, 0.3]).unwrap();
        let same = compare_outputs(&a, &a.cast()).unwrap();
        assert_eq!((same.max_abs, same.mse, same.argmax_agree), (0.0, 0.0, true));
        let shifted = compare_outputs(&a, &a.cast::<f64>().map(|v| v + 0.25)).unwrap();
        assert!((shifted.max_abs - 0.25).abs() < 1e-12);
        assert!(shifted.argmax_agree);
        assert!(compare_outputs(&a, &Tensor::zeros(Shape::new(1, 1, 2))).is_err());
    }
}
