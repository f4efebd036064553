use serde::{Deserialize, Serialize};

use super::coding::CodingConfig;
use crate::error::{Error, Result};
use crate::tensor::{IntTensor, Shape, Tensor};

/// Spike counts a layer emits over the compressed timesteps.
///
/// `counts[t]` holds what was emitted at compressed step `t + 1`; a count
/// above one is a burst.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpikeTrain {
    pub layer: String,
    pub counts: Vec<IntTensor>,
}

impl SpikeTrain {
    pub fn empty(layer: impl Into<String>, shape: Shape, steps: usize) -> Self {
        SpikeTrain {
            layer: layer.into(),
            counts: vec![IntTensor::zeros(shape); steps],
        }
    }

    pub fn shape(&self) -> Option<Shape> {
        self.counts.first().map(IntTensor::shape)
    }

    pub fn total_spikes(&self) -> u64 {
        self.counts.iter().map(IntTensor::total).sum()
    }

    /// Largest single burst anywhere in the train.
    pub fn max_burst(&self) -> u32 {
        self.counts.iter().map(IntTensor::max).max().unwrap_or(0)
    }

    /// Spikes emitted per neuron, summed over time.
    pub fn per_neuron_totals(&self) -> Vec<u64> {
        let n = self.shape().map_or(0, |s| s.len());
        let mut out = vec![0u64; n];
        for step in &self.counts {
            for (o, &c) in out.iter_mut().zip(step.data()) {
                *o += u64::from(c);
            }
        }
        out
    }

    /// Raw accumulated value per neuron, `sum_t s(t) * weight(t)`, in units of
    /// the threshold. Exact: every term is an integer.
    pub fn integrate(&self, coding: &CodingConfig) -> Result<Tensor<f64>> {
        let steps = coding.compressed_timesteps() as usize;
        if self.counts.len() != steps {
            return Err(Error::Coding(format!(
                "train `{}` has {} steps, coding expects {steps}",
                self.layer,
                self.counts.len()
            )));
        }
        let shape = self
            .shape()
            .ok_or_else(|| Error::Coding(format!("train `{}` is empty", self.layer)))?;
        let mut acc = vec![0u64; shape.len()];
        for (t, step) in self.counts.iter().enumerate() {
            let w = u64::from(coding.spike_weight(t as u32 + 1));
            for (a, &c) in acc.iter_mut().zip(step.data()) {
                *a += u64::from(c) * w;
            }
        }
        Tensor::new(shape, acc.into_iter().map(|v| v as f64).collect())
    }

    /// Channel-wise concatenation, step by step.
    pub fn concat(layer: impl Into<String>, parts: &[&SpikeTrain]) -> Result<SpikeTrain> {
        let steps = parts.first().map_or(0, |p| p.counts.len());
        if parts.iter().any(|p| p.counts.len() != steps) {
            return Err(Error::Coding("concat of trains with different lengths".into()));
        }
        let mut counts = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut channels = 0;
            let first = parts[0].counts[t].shape();
            let mut data = Vec::new();
            for p in parts {
                let s = p.counts[t].shape();
                if s.height != first.height || s.width != first.width {
                    return Err(Error::shape(format!("cannot concat trains {s} and {first}")));
                }
                channels += s.channels;
                data.extend_from_slice(p.counts[t].data());
            }
            counts.push(IntTensor::new(Shape::new(channels, first.height, first.width), data)?);
        }
        Ok(SpikeTrain {
            layer: layer.into(),
            counts,
        })
    }
}

/// Firing ratio per neuron.
///
/// Rate: `r = sum_t s(t) / (T_c * f_c)`. Weighted spikes: `r = sum_t s(t) tau(t) / T`.
pub fn decode_output(train: &SpikeTrain, coding: &CodingConfig) -> Result<Tensor<f64>> {
    let t = f64::from(coding.timesteps);
    Ok(train.integrate(coding)?.map(|u| u / t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn train(steps: Vec<Vec<u32>>) -> SpikeTrain {
        SpikeTrain {
            layer: "l".into(),
            counts: steps
                .into_iter()
                .map(|d| IntTensor::new(Shape::new(1, 1, d.len()), d).unwrap())
                .collect(),
        }
    }

    #[test]
    fn empty_train_decodes_zero() {
        let c = CodingConfig::rate(8, 2).unwrap();
        let t = SpikeTrain::empty("l", Shape::new(2, 2, 2), 4);
        assert!(decode_output(&t, &c).unwrap().data().iter().all(|&r| r == 0.0));
    }

    #[test]
    fn rate_decode_divides_by_total_timesteps() {
        let c = CodingConfig::rate(64, 16).unwrap();
        let t = train(vec![vec![10], vec![10], vec![10], vec![10]]);
        assert_eq!(decode_output(&t, &c).unwrap().data(), &[0.625]);
    }

    #[test]
    fn stdi_decode_weights_by_time() {
        let c = CodingConfig::stdi(4, 1).unwrap();
        let t = train(vec![vec![1], vec![0], vec![1], vec![0]]);
        assert_eq!(decode_output(&t, &c).unwrap().data(), &[1.5]);
    }

    #[test]
    fn length_mismatch_rejected() {
        let c = CodingConfig::stdi(4, 1).unwrap();
        assert!(decode_output(&train(vec![vec![1]]), &c).is_err());
    }

    #[test]
    fn concat_keeps_channel_order() {
        let a = train(vec![vec![1, 2]]);
        let b = train(vec![vec![3, 4]]);
        let c = SpikeTrain::concat("c", &[&a, &b]).unwrap();
        assert_eq!(c.counts[0].shape(), Shape::new(2, 1, 2));
        assert_eq!(c.counts[0].data(), &[1, 2, 3, 4]);
        assert_eq!(c.total_spikes(), 10);
    }
}
