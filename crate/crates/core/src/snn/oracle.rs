//! Brute-force single-neuron references.
//!
//! Deliberately literal: inputs are summed one timestep at a time and spikes
//! are released one threshold at a time. Used as test oracles for the layer
//! implementations.

use super::coding::CodingConfig;

/// Temporally separated schedule for one neuron.
///
/// `inputs` holds the potential delivered at each uncompressed timestep.
/// Returns the spike count released at each compressed step.
pub fn single_neuron_oracle(inputs: &[f64], coding: &CodingConfig, v_init: f64, v_thr: f64) -> Vec<u32> {
    let mut v = v_init;
    for x in inputs {
        v += x;
    }
    if v < 0.0 {
        v = 0.0;
    }
    let mut schedule = Vec::new();
    for t in 1..=coding.compressed_timesteps() {
        let threshold = f64::from(coding.spike_weight(t)) * v_thr;
        let mut s = 0u32;
        while v >= threshold && coding.burst_cap().is_none_or(|cap| s < cap) {
            v -= threshold;
            s += 1;
        }
        schedule.push(s);
    }
    schedule
}

/// Classic integrate-and-fire trace without temporal separation: integrate
/// and test the threshold every timestep, at most one spike per step.
pub fn streaming_if_trace(inputs: &[f64], v_init: f64, v_thr: f64) -> Vec<bool> {
    let mut v = v_init;
    inputs
        .iter()
        .map(|x| {
            v += x;
            let spike = v >= v_thr;
            if spike {
                v -= v_thr;
            }
            spike
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streaming_trace_spikes_at_one_three_five() {
        let trace = streaming_if_trace(&[0.62; 5], 0.5, 1.0);
        let at: Vec<usize> = trace
            .iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(|(t, _)| t + 1)
            .collect();
        assert_eq!(at, vec![1, 3, 5]);
    }

    #[test]
    fn separated_schedule_front_loads_the_same_count() {
        let c = CodingConfig::rate(5, 1).unwrap();
        assert_eq!(single_neuron_oracle(&[0.62; 5], &c, 0.5, 1.0), vec![1, 1, 1, 0, 0]);
    }

    #[test]
    fn negative_drive_is_silent() {
        let c = CodingConfig::stdi(4, 1).unwrap();
        assert_eq!(single_neuron_oracle(&[-2.0; 4], &c, 0.5, 1.0), vec![0; 4]);
    }
}
