//! Network gradients against finite differences, learner convergence and
//! model serialisation.

mod common;

use common::{max_gradient_error, single_transition};
use microroute::rl::{
    deserialize_model, dqn_update, serialize_model, LearnerParams, Optimizer, OptimizerKind, QModel, Transition,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for sizes in [[12, 8, 5], [12, 32, 5]] {
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let model = QModel::random(&sizes, &mut rng);
            worst = worst.max(max_gradient_error(&model, &mut rng));
        }
        assert!(worst < 1e-4, "{sizes:?}: max relative error {worst:e}");
    }
}

#[test]
fn gradient_of_deeper_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let model = QModel::random(&[16, 10, 7, 5], &mut rng);
        let err = max_gradient_error(&model, &mut rng);
        assert!(err < 1e-4, "max relative error {err:e}");
    }
}

#[test]
fn single_transition_converges_to_reward() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = LearnerParams::default();
    for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        let params = LearnerParams {
            optimizer: kind,
            learning_rate: if kind == OptimizerKind::Sgd {
                0.05
            } else {
                params.learning_rate
            },
            ..params.clone()
        };
        let mut online = QModel::random(&[12, 32, 5], &mut rng);
        let target = online.clone();
        let mut opt = Optimizer::new(kind, &online);
        let t = single_transition(&mut rng, 1.0);
        for _ in 0..500 {
            dqn_update(&mut online, &target, &mut opt, std::slice::from_ref(&t), &params).unwrap();
        }
        let q = online.forward(t.state.as_slice()).unwrap()[t.action.index()];
        assert!((q - 1.0).abs() < 0.05, "{kind:?}: Q = {q}");
    }
}

#[test]
fn small_step_decreases_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = LearnerParams {
        optimizer: OptimizerKind::Sgd,
        learning_rate: 1e-3,
        ..LearnerParams::default()
    };
    for _ in 0..20 {
        let mut online = QModel::random(&[12, 16, 5], &mut rng);
        let target = online.clone();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &online);
        let batch: Vec<Transition> = (0..8)
            .map(|_| {
                let r = rng.gen_range(-1.0..1.0);
                single_transition(&mut rng, r)
            })
            .collect();
        let before = dqn_update(&mut online, &target, &mut opt, &batch, &params).unwrap();
        let after = dqn_update(&mut online, &target, &mut opt, &batch, &params).unwrap();
        assert!(after <= before, "loss rose from {before} to {after}");
    }
}

#[test]
fn serialisation_roundtrip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let mut model = QModel::random(&[16, 32, 5], &mut rng);
        model.step_counter = rng.gen();
        let bytes = serialize_model(&model);
        let back = deserialize_model(&bytes).unwrap();
        let bits = |m: &QModel| {
            m.weights
                .iter()
                .chain(&m.biases)
                .flatten()
                .map(|x| x.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&model), bits(&back));
        assert_eq!(model, back);
        assert_eq!(serialize_model(&back), bytes);
    }
}
