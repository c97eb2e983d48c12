use fairmeta::nn::{self, adam_step, init_params, sgd_step, AdamState, MlpSpec, ParamGrads, ParameterSet};
use fairmeta::{Tape, Tensor};
use proptest::prelude::*;

fn theta(values: &[f64]) -> ParameterSet {
    ParameterSet::new(vec![("w".into(), Tensor::vector(values.to_vec()))]).unwrap()
}

fn grads(values: &[f64]) -> ParamGrads {
    let mut g = ParamGrads::new();
    g.insert("w", Tensor::vector(values.to_vec()));
    g
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, logits in prop::collection::vec(-50.0f64..50.0, 12)) {
        let t = Tensor::matrix(rows, 12 / rows.max(1), logits[..rows * (12 / rows)].to_vec()).unwrap();
        let p = t.softmax().unwrap();
        for r in 0..rows {
            let row = p.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn cross_entropy_nonnegative(logits in prop::collection::vec(-30.0f64..30.0, 6), label in 0usize..3) {
        let tape = Tape::new();
        let l = tape.constant(Tensor::matrix(2, 3, logits).unwrap());
        prop_assert!(nn::cross_entropy(l, &[label, 2 - label]).unwrap().item() >= 0.0);
    }

    #[test]
    fn sgd_step_is_affine(
        th in prop::collection::vec(-5.0f64..5.0, 4),
        g1 in prop::collection::vec(-5.0f64..5.0, 4),
        g2 in prop::collection::vec(-5.0f64..5.0, 4),
        lr in 1e-3f64..1.0,
    ) {
        let sum: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
        let once = sgd_step(&theta(&th), &grads(&sum), lr).unwrap();
        let twice = sgd_step(&sgd_step(&theta(&th), &grads(&g1), lr).unwrap(), &grads(&g2), lr).unwrap();
        for (a, b) in once.flatten().iter().zip(twice.flatten()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn init_is_deterministic_and_bounded() {
    let spec = MlpSpec::new(2, vec![4], 3).unwrap();
    let a = init_params(&spec, 7).unwrap();
    assert_eq!(a, init_params(&spec, 7).unwrap());
    assert_ne!(a, init_params(&spec, 8).unwrap());
    for (name, t) in a.iter() {
        let shape = t.shape();
        if name.ends_with("bias") {
            assert!(t.data().iter().all(|&v| v == 0.0));
        } else {
            let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            assert!(t.data().iter().all(|&v| v.abs() <= bound));
        }
    }
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let (next, state) = adam_step(&theta(&[1.0]), &grads(&[1.0]), &AdamState::new(&theta(&[1.0])), 0.001).unwrap();
    assert!((next.flatten()[0] - 0.999).abs() < 1e-8);
    assert_eq!(state.t, 1);
    let (same, _) = adam_step(&theta(&[1.0]), &grads(&[0.0]), &AdamState::new(&theta(&[1.0])), 0.001).unwrap();
    assert_eq!(same.flatten(), vec![1.0]);
}

#[test]
fn chained_inner_steps_follow_closed_form() {
    // f = sum(theta^2), two steps of 0.4 from 1: 1 * (1 - 0.8)^2.
    let tape = Tape::new();
    let p = theta(&[1.0]);
    let mut b = p.bind(&tape);
    for _ in 0..2 {
        let loss = b.vars()[0].square().unwrap().sum().unwrap();
        let g = tape.backward(loss, true).unwrap();
        b = b.sgd_step(&g, 0.4).unwrap();
    }
    assert!((b.values().flatten()[0] - 0.04).abs() < 1e-15);
}
