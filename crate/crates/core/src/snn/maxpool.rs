//! Max pooling on membrane potentials rather than on spikes.
//!
//! The incoming train is integrated back to a potential, restored to
//! activation scale with the input channel maxima, pooled, re-normalized with
//! the output channel maxima and fired again with the active scheme.

use super::coding::CodingConfig;
use super::neuron::{fire_phase, Incoming, NeuronLayerState};
use super::train::SpikeTrain;
use crate::error::{Error, Result};
use crate::graph::Pool;
use crate::tensor::maxpool2d;

/// Channel maxima on both sides of a pooling layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolStats {
    pub m_in: Vec<f32>,
    pub m_out: Vec<f32>,
}

/// Returns the outgoing train and the pooling layer's final state.
pub fn spike_maxpool(
    id: &str,
    incoming: Incoming<'_>,
    stats: &PoolStats,
    pool: Pool,
    coding: &CodingConfig,
    v_thr: f64,
) -> Result<(SpikeTrain, NeuronLayerState)> {
    // accumulation: raw integrated units, not divided by T
    let u_in = incoming.units(coding)?;
    let channels = u_in.shape().channels;
    if stats.m_in.len() != channels || stats.m_out.len() != channels {
        return Err(Error::MissingStats(id.to_string()));
    }
    // restore normalization
    let restored = u_in.map_channels(|c, u| f64::from(stats.m_in[c]) * u);
    // pooling: -inf padding never wins
    let pooled = maxpool2d(&restored, pool.kernel, pool.stride, pool.padding).map_err(|e| e.in_layer(id))?;
    // re-normalization
    let u_out = pooled.map_channels(|c, v| v / f64::from(stats.m_out[c]));
    // firing
    let mut state = NeuronLayerState::with_potential(id, u_out.map(|u| u * v_thr), v_thr);
    let mut train = fire_phase(&mut state, coding)?;
    train.layer = id.to_string();
    Ok((train, state))
}
