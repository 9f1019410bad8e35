use nap_core::expert::Normalization;
use nap_core::gridworld::{Observation, OBS_CHANNELS};
use nap_core::neural::{
    action_net_forward, backprop, cost_net_forward, init_params, position_net_forward, Head,
    ModelParams, NetworkDescription, Tape, Upstream,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;

/// Scalar probe `<u, output>` and its tape.
fn probe(params: &ModelParams, obs: &Observation, u: &[f64]) -> (f64, Tape) {
    let (out, tape) = match params.description.head {
        Head::Cost { .. } => {
            let (c, tape) = cost_net_forward(params, obs).unwrap();
            (c.values().to_vec(), tape)
        }
        Head::Position => {
            let (s, g, tape) = position_net_forward(params, obs).unwrap();
            ([s, g].concat(), tape)
        }
        Head::Action { .. } => action_net_forward(params, obs).unwrap(),
    };
    (out.iter().zip(u).map(|(a, b)| a * b).sum(), tape)
}

fn check(seed: u64, head: Head) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rng.gen_range(2..=3), rng.gen_range(2..=3));
    let mut desc = NetworkDescription::new(head, h, w);
    desc.trunk_channels = vec![rng.gen_range(2..=4); rng.gen_range(1..=2)];
    let mut params = init_params(&desc, Normalization::identity(OBS_CHANNELS), seed).unwrap();
    for t in params
        .tensors
        .iter_mut()
        .filter(|t| t.name.ends_with(".bias"))
    {
        t.tensor
            .data
            .iter_mut()
            .for_each(|x| *x = rng.gen_range(-0.3..0.3));
    }
    let obs = Observation {
        height: h,
        width: w,
        data: (0..OBS_CHANNELS * h * w)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    };
    let outputs = match head {
        Head::Cost { horizon } => horizon * h * w,
        Head::Position => 2 * h * w,
        Head::Action { num_actions } => num_actions,
    };
    let u: Vec<f64> = (0..outputs).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (_, tape) = probe(&params, &obs, &u);
    let signature = tape.kink_signature();
    let grads = match head {
        Head::Cost { horizon } => {
            let up = nap_core::tdsp::CostTensor::new(horizon, h * w, u.clone()).unwrap();
            backprop(&params, &tape, Upstream::Cost(&up)).unwrap()
        }
        Head::Position => {
            let (s, g) = u.split_at(h * w);
            backprop(&params, &tape, Upstream::Position { start: s, goal: g }).unwrap()
        }
        Head::Action { .. } => backprop(&params, &tape, Upstream::Action(&u)).unwrap(),
    };

    let mut checked = 0;
    for ti in 0..params.tensors.len() {
        for k in 0..params.tensors[ti].tensor.data.len() {
            let original = params.tensors[ti].tensor.data[k];
            params.tensors[ti].tensor.data[k] = original + H;
            let (plus, tp) = probe(&params, &obs, &u);
            params.tensors[ti].tensor.data[k] = original - H;
            let (minus, tm) = probe(&params, &obs, &u);
            params.tensors[ti].tensor.data[k] = original;
            let near_kink = tp.min_abs_kink_input() < 1e-6
                || tm.min_abs_kink_input() < 1e-6
                || tp.kink_signature() != signature
                || tm.kink_signature() != signature;
            if near_kink {
                continue;
            }
            let numeric = (plus - minus) / (2.0 * H);
            let analytic = grads.0[ti].data[k];
            let scale = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic - numeric).abs() / scale < 1e-4,
                "seed {seed} {} [{k}]: backprop {analytic} vs numeric {numeric}",
                params.tensors[ti].name
            );
            checked += 1;
        }
    }
    checked
}

#[test]
fn cost_head_matches_finite_differences() {
    let checked: usize = (0..8).map(|s| check(s, Head::Cost { horizon: 2 })).sum();
    assert!(checked > 100);
}

#[test]
fn position_head_matches_finite_differences() {
    let checked: usize = (100..108).map(|s| check(s, Head::Position)).sum();
    assert!(checked > 100);
}

#[test]
fn action_head_matches_finite_differences() {
    let checked: usize = (200..208)
        .map(|s| check(s, Head::Action { num_actions: 5 }))
        .sum();
    assert!(checked > 100);
}
