use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikeconv::snn::oracle::{single_neuron_oracle, streaming_if_trace};
use spikeconv::snn::{decode_output, fire_phase_rate, fire_phase_stdi, CodingConfig, NeuronLayerState};
use spikeconv::{Shape, Tensor};

fn state(v: f64) -> NeuronLayerState {
    NeuronLayerState::with_potential("n", Tensor::full(Shape::new(1, 1, 1), v), 1.0)
}

fn schedule(t: &spikeconv::snn::SpikeTrain) -> Vec<u32> {
    t.counts.iter().map(|c| c.data()[0]).collect()
}

#[test]
fn rate_firing_agrees_with_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..10_000 {
        let f_c = [1u32, 4, 16, 64][rng.gen_range(0..4)];
        let t_c = rng.gen_range(1..=64 / f_c);
        let t = f_c * t_c;
        let coding = CodingConfig::rate(t, f_c).unwrap();
        let inputs: Vec<f64> = if case % 2 == 0 {
            (0..t).map(|_| rng.gen_range(-0.3..1.3)).collect()
        } else {
            // whole-unit drives hit the threshold boundaries exactly
            (0..t).map(|_| f64::from(rng.gen_range(-1i32..3))).collect()
        };
        let v_init = if case % 3 == 0 { 0.0 } else { 0.5 };
        let mut v = v_init;
        for x in &inputs {
            v += x;
        }
        let mut s = state(v);
        let got = fire_phase_rate(&mut s, &coding).unwrap();
        assert_eq!(
            schedule(&got),
            single_neuron_oracle(&inputs, &coding, v_init, 1.0),
            "case {case}"
        );
        assert!(got.max_burst() <= f_c);
    }
}

#[test]
fn stdi_firing_agrees_with_oracle_exhaustively() {
    for t_c in 1..=8u32 {
        let coding = CodingConfig::stdi(t_c, 1).unwrap();
        for u in 0..=t_c * (t_c + 1) / 2 {
            let v = f64::from(u);
            let mut s = state(v);
            let got = fire_phase_stdi(&mut s, &coding).unwrap();
            assert_eq!(schedule(&got), single_neuron_oracle(&[v], &coding, 0.0, 1.0));
            assert_eq!(decode_output(&got, &coding).unwrap().data()[0], v / f64::from(t_c));
            assert_eq!(s.v_mem().data()[0], 0.0);
        }
    }
}

#[test]
fn stdi_weights_are_non_increasing_in_time() {
    let coding = CodingConfig::stdi(16, 2).unwrap();
    for u in 0..200 {
        let t = fire_phase_stdi(&mut state(f64::from(u) + 0.25), &coding).unwrap();
        assert!(t.counts.iter().all(|c| c.data()[0] <= u));
    }
}

#[test]
fn negative_potential_never_fires() {
    let rate = CodingConfig::rate(16, 4).unwrap();
    let stdi = CodingConfig::stdi(16, 4).unwrap();
    assert_eq!(fire_phase_rate(&mut state(-5.0), &rate).unwrap().total_spikes(), 0);
    assert_eq!(fire_phase_stdi(&mut state(-5.0), &stdi).unwrap().total_spikes(), 0);
    assert_eq!(single_neuron_oracle(&[-5.0], &stdi, 0.0, 1.0), vec![0; 4]);
}

#[test]
fn separation_keeps_the_streaming_count() {
    // a streaming neuron spikes at t = 1, 3, 5; the separated one emits the
    // same three spikes, front-loaded
    let inputs = [0.62; 5];
    let streaming = streaming_if_trace(&inputs, 0.5, 1.0);
    let coding = CodingConfig::rate(5, 1).unwrap();
    let separated = fire_phase_rate(&mut state(0.5 + 5.0 * 0.62), &coding).unwrap();
    assert_eq!(
        streaming.iter().filter(|&&s| s).count() as u64,
        separated.total_spikes()
    );
    assert_eq!(decode_output(&separated, &coding).unwrap().data()[0], 0.6);
}

#[test]
fn stdi_spike_economy() {
    let stdi = CodingConfig::stdi(64, 1).unwrap();
    let rate = CodingConfig::rate(64 * 33, 33).unwrap();
    let mut ratios = 0.0;
    for u in 1..=2080u32 {
        let s = fire_phase_stdi(&mut state(f64::from(u)), &stdi).unwrap().total_spikes();
        let r = fire_phase_rate(&mut state(f64::from(u)), &rate).unwrap().total_spikes();
        assert_eq!(r, u64::from(u));
        assert!(s <= r);
        ratios += s as f64 / r as f64;
    }
    assert!(ratios / 2080.0 <= 0.5);
}

proptest! {
    #[test]
    fn stdi_residual_below_one_threshold(v in 0.0f64..500.0, t_c in 1u32..16) {
        let coding = CodingConfig::stdi(t_c, 1).unwrap();
        let mut s = state(v);
        fire_phase_stdi(&mut s, &coding).unwrap();
        let r = s.v_mem().data()[0];
        prop_assert!((0.0..1.0).contains(&r));
    }

    #[test]
    fn rate_decode_stays_in_unit_range(v in -10.0f64..200.0, f in 0usize..4, t_c in 1u32..8) {
        let f_c = [1u32, 2, 4, 8][f];
        let coding = CodingConfig::rate(f_c * t_c, f_c).unwrap();
        let t = fire_phase_rate(&mut state(v), &coding).unwrap();
        let r = decode_output(&t, &coding).unwrap().data()[0];
        prop_assert!((0.0..=1.0).contains(&r));
    }

    #[test]
    fn stdi_no_more_spikes_than_rate(u in 0u32..5000, t_c in 1u32..32) {
        let stdi = CodingConfig::stdi(t_c, 1).unwrap();
        let s = fire_phase_stdi(&mut state(f64::from(u)), &stdi).unwrap().total_spikes();
        prop_assert!(s <= u64::from(u));
    }
}
