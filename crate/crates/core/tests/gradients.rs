mod common;

use common::*;
use retrieval_lab::encoder::{encode_with_grad, forward, Intermediate};
use retrieval_lab::numerics::Rng;

#[test]
fn cl_gradient_various_shapes() {
    for (seed, dim, negs) in [(1, 3, 1), (2, 8, 4), (3, 16, 10), (4, 2, 7)] {
        let err = check_cl(seed, dim, negs);
        assert!(err < FD_TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn clp_gradient_across_lambda() {
    for (i, lambda) in [0.0, 0.1, 0.5, 1.0].into_iter().enumerate() {
        for seed in 0..5 {
            let err = check_clp(100 * i as u64 + seed, 8, 4, 2, lambda);
            assert!(err < FD_TOL, "lambda {lambda} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn cosine_gradient() {
    for seed in 0..20 {
        let err = check_cosine(seed, 2 + seed as usize % 9);
        assert!(err < FD_TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn encoder_gradient_dense_and_moe() {
    for seed in 0..10 {
        for moe in [false, true] {
            let err = check_encoder(seed, 8, moe);
            assert!(err < FD_TOL, "seed {seed} moe {moe}: {err:e}");
        }
    }
}

#[test]
fn moe_gradient_reaches_only_routed_experts() {
    let config = small_config(8, true);
    let params = jittered_params(&config, 3);
    let mut rng = Rng::new(8);
    for _ in 0..30 {
        let text = random_text(&mut rng, 4);
        let pass = forward(&params, &config, &text).unwrap();
        let routed: Vec<usize> = pass.routes().into_iter().map(Option::unwrap).collect();
        let upstream = random_vec(&mut rng, 8);
        let g = encode_with_grad(&params, &config, &text, &upstream).unwrap();
        let Intermediate::Moe { experts, .. } = &g.intermediate else {
            panic!("dense grads")
        };
        for (e, ex) in experts.iter().enumerate() {
            let touched = ex.w_up.as_slice().iter().any(|v| *v != 0.0);
            assert_eq!(
                touched,
                routed.contains(&e),
                "{text}: expert {e}, routes {routed:?}"
            );
        }
    }
}
