//! Temporally separated spiking execution of a converted model.

mod coding;
mod maxpool;
mod neuron;
pub mod oracle;
mod plan;
mod run;
mod train;

pub use coding::{CodingConfig, Scheme};
pub use maxpool::{spike_maxpool, PoolStats};
pub use neuron::{
    accumulate_phase, encode_input, fire_phase, fire_phase_rate, fire_phase_stdi, Incoming, InjectionPlan,
    LinearWeights, NeuronLayerState, Phase,
};
pub use plan::{build_snn, SnnPlan, Stage, StageKind};
pub use run::{run_snn, DecodedOutput, StageTelemetry, Telemetry};
pub use train::{decode_output, SpikeTrain};
