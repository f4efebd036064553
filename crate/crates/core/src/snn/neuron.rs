//! Integrate-and-fire layer state under temporal separation.
//!
//! A layer first consumes its entire incoming train (accumulate phase), then
//! releases everything it holds (fire phase). Potentials are `f64` and
//! expressed in the same units as the threshold.

use super::coding::{CodingConfig, Scheme};
use super::train::SpikeTrain;
use crate::error::{Error, Result};
use crate::tensor::{conv2d, convtranspose2d, IntTensor, Kernel, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Accumulating,
    Firing,
    Done,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Accumulating => "accumulating",
            Phase::Firing => "firing",
            Phase::Done => "done",
        }
    }
}

/// Membrane state of one layer during a run.
#[derive(Debug, Clone)]
pub struct NeuronLayerState {
    pub id: String,
    v_mem: Tensor<f64>,
    v_thr: f64,
    /// Uncompressed timesteps of bias accumulated so far.
    bias_steps: u64,
    phase: Phase,
}

impl NeuronLayerState {
    /// Fresh layer with every membrane at `v_init`.
    pub fn new(id: impl Into<String>, shape: Shape, v_init: f64, v_thr: f64) -> Self {
        Self::with_potential(id, Tensor::full(shape, v_init), v_thr)
    }

    pub fn with_potential(id: impl Into<String>, v_mem: Tensor<f64>, v_thr: f64) -> Self {
        NeuronLayerState {
            id: id.into(),
            v_mem,
            v_thr,
            bias_steps: 0,
            phase: Phase::Accumulating,
        }
    }

    pub fn v_mem(&self) -> &Tensor<f64> {
        &self.v_mem
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn bias_steps(&self) -> u64 {
        self.bias_steps
    }

    fn expect(&self, phase: Phase, action: &'static str) -> Result<()> {
        if self.phase != phase {
            return Err(Error::Phase {
                layer: self.id.clone(),
                action,
                phase: self.phase.name(),
            });
        }
        Ok(())
    }

    /// Leave the accumulate phase: negative potentials are clamped to zero.
    fn begin_firing(&mut self) -> Result<()> {
        self.expect(Phase::Accumulating, "fire")?;
        self.phase = Phase::Firing;
        for v in self.v_mem.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        Ok(())
    }
}

/// Input encoding plan.
///
/// Rate coding injects `f_c * x` at each of the `T_c` compressed steps;
/// weighted-spike coding injects `T * x` once. Either way the first layer
/// receives `T * x` in total.
#[derive(Debug, Clone)]
pub struct InjectionPlan {
    values: Tensor<f64>,
    coding: CodingConfig,
}

impl InjectionPlan {
    pub fn scheme(&self) -> Scheme {
        self.coding.scheme
    }

    /// Number of steps that receive an injection.
    pub fn steps(&self) -> u32 {
        match self.coding.scheme {
            Scheme::Rate => self.coding.compressed_timesteps(),
            Scheme::Stdi => 1,
        }
    }

    /// Potential injected at each injecting step.
    pub fn per_step(&self) -> Tensor<f64> {
        let scale = match self.coding.scheme {
            Scheme::Rate => f64::from(self.coding.compression),
            Scheme::Stdi => f64::from(self.coding.timesteps),
        };
        self.values.map(|x| x * scale)
    }

    /// Whole injected potential, `T * x`.
    pub fn total_units(&self) -> Tensor<f64> {
        let t = f64::from(self.coding.timesteps);
        self.values.map(|x| x * t)
    }

    pub fn shape(&self) -> Shape {
        self.values.shape()
    }
}

pub fn encode_input(input: &Tensor, coding: &CodingConfig) -> Result<InjectionPlan> {
    coding.validate()?;
    if let Some((index, &value)) = input
        .data()
        .iter()
        .enumerate()
        .find(|(_, &v)| !(0.0..=1.0).contains(&v))
    {
        return Err(Error::InputRange { index, value });
    }
    Ok(InjectionPlan {
        values: input.cast(),
        coding: *coding,
    })
}

/// What a layer accumulates from.
#[derive(Debug, Clone, Copy)]
pub enum Incoming<'a> {
    Train(&'a SpikeTrain),
    Injection(&'a InjectionPlan),
}

impl Incoming<'_> {
    /// Integrated incoming value per presynaptic neuron.
    pub fn units(&self, coding: &CodingConfig) -> Result<Tensor<f64>> {
        match self {
            Incoming::Train(t) => t.integrate(coding),
            Incoming::Injection(p) => Ok(p.total_units()),
        }
    }
}

/// A conv or transposed conv with normalized weights, widened to `f64`.
#[derive(Debug, Clone)]
pub struct LinearWeights {
    pub kernel: Kernel<f64>,
    /// Normalized bias `b'` per output channel.
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl LinearWeights {
    pub fn apply(&self, input: &Tensor<f64>, bias: &[f64]) -> Result<Tensor<f64>> {
        if self.transposed {
            convtranspose2d(input, &self.kernel, bias, self.stride, self.padding)
        } else {
            conv2d(input, &self.kernel, bias, self.stride, self.padding)
        }
    }
}

/// Consume the whole incoming train.
///
/// Rate: `V += sum_t W s(t) + T_c * (f_c * b')`. Weighted spikes:
/// `V += sum_t W s(t) tau(t) + T * b'`. The time sum is taken before the
/// linear map, which is exact because spike counts and weights are integers.
pub fn accumulate_phase(
    state: &mut NeuronLayerState,
    incoming: Incoming<'_>,
    weights: &LinearWeights,
    coding: &CodingConfig,
) -> Result<()> {
    state.expect(Phase::Accumulating, "accumulate")?;
    let units = incoming.units(coding)?;
    let steps = f64::from(coding.timesteps);
    let bias: Vec<f64> = weights.bias.iter().map(|b| b * steps).collect();
    let drive = weights.apply(&units, &bias).map_err(|e| e.in_layer(&state.id))?;
    if drive.shape() != state.v_mem.shape() {
        return Err(Error::Shape {
            layer: Some(state.id.clone()),
            detail: format!("drive {} for state {}", drive.shape(), state.v_mem.shape()),
        });
    }
    for (v, d) in state.v_mem.data_mut().iter_mut().zip(drive.data()) {
        *v += d;
    }
    state.bias_steps += u64::from(coding.timesteps);
    Ok(())
}

/// Largest `q` with `q * unit <= v`, for `v >= 0`.
#[inline]
pub(crate) fn whole_units(v: f64, unit: f64) -> u64 {
    let mut q = (v / unit).floor();
    while q > 0.0 && q * unit > v {
        q -= 1.0;
    }
    while (q + 1.0) * unit <= v {
        q += 1.0;
    }
    q as u64
}

fn fire(state: &mut NeuronLayerState, coding: &CodingConfig) -> Result<SpikeTrain> {
    state.begin_firing()?;
    let steps = coding.compressed_timesteps();
    let cap = coding.burst_cap().map_or(u64::MAX, u64::from);
    let shape = state.v_mem.shape();
    let mut counts = Vec::with_capacity(steps as usize);
    for t in 1..=steps {
        let unit = f64::from(coding.spike_weight(t)) * state.v_thr;
        let mut step = IntTensor::zeros(shape);
        for (v, s) in state.v_mem.data_mut().iter_mut().zip(step.data_mut()) {
            let k = whole_units(*v, unit).min(cap).min(u64::from(u32::MAX));
            if k > 0 {
                *v -= k as f64 * unit;
                *s = k as u32;
            }
        }
        counts.push(step);
    }
    state.phase = Phase::Done;
    Ok(SpikeTrain {
        layer: state.id.clone(),
        counts,
    })
}

/// Rate firing with burst spikes: at each compressed step emit
/// `min(floor(V / v_thr), f_c)` and subtract what was emitted.
pub fn fire_phase_rate(state: &mut NeuronLayerState, coding: &CodingConfig) -> Result<SpikeTrain> {
    if coding.scheme != Scheme::Rate {
        return Err(Error::Coding("fire_phase_rate needs the rate scheme".into()));
    }
    fire(state, coding)
}

/// Weighted-spike firing: the threshold at compressed step `t` is
/// `tau(t) * v_thr`; each step emits `floor(V / (tau(t) v_thr))` (optionally
/// capped) and subtracts it. The last step has `tau = 1`, so less than one
/// threshold remains afterwards.
pub fn fire_phase_stdi(state: &mut NeuronLayerState, coding: &CodingConfig) -> Result<SpikeTrain> {
    if coding.scheme != Scheme::Stdi {
        return Err(Error::Coding("fire_phase_stdi needs the stdi scheme".into()));
    }
    fire(state, coding)
}

/// Fire with whichever scheme `coding` selects.
pub fn fire_phase(state: &mut NeuronLayerState, coding: &CodingConfig) -> Result<SpikeTrain> {
    fire(state, coding)
}
