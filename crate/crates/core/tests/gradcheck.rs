mod common;

use common::{joint_model_check, loss_cases, op_cases};
use mdnet::model::Squash;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn tensor_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (name, case) in op_cases() {
        for trial in 0..20 {
            let e = case(&mut rng);
            assert!(e < 1e-5, "{name} trial {trial}: relative error {e:e}");
        }
    }
}

#[test]
fn losses_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (name, case) in loss_cases() {
        for trial in 0..5 {
            let e = case(&mut rng);
            assert!(e < 1e-5, "{name} trial {trial}: relative error {e:e}");
        }
    }
}

#[test]
fn joint_loss_parameter_gradients() {
    for seed in 3..9 {
        for (normalize, squash) in [(false, Squash::Logistic), (true, Squash::Logistic), (false, Squash::Softsign)] {
            let e = joint_model_check(seed, normalize, squash, false);
            assert!(e < 1e-3, "seed {seed} normalize {normalize} {squash:?}: relative error {e:e}");
        }
    }
}
