//! Exact properties of the per-category private block: gradient routing,
//! growth, and single-step column independence.

use gvae_core::losses::term_grads;
use gvae_core::model::{
    backward_traced, decode, forward, ConditionVector, CvaeParams, Dims, DEC_WP_INDEX, LATENT_DIM,
};
use gvae_core::ndcore::{sample_standard_normal, SeededRng, Tensor2};
use gvae_core::optim::sgd_step;
use proptest::prelude::*;

fn setup(seed: u64, n_categories: usize, batch: usize) -> (CvaeParams, Tensor2, Tensor2) {
    let dims = Dims { input: 6, hidden: 5 };
    let mut p = CvaeParams::init(dims, seed);
    for k in 1..n_categories {
        p = p.grow(seed.wrapping_add(k as u64));
    }
    let mut rng = SeededRng::new(seed ^ 0xABCD);
    let x = Tensor2::from_fn(dims.input, batch, |_, _| rng.next_f64());
    let eps = sample_standard_normal(LATENT_DIM, batch, &mut rng);
    (p, x, eps)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn private_gradient_is_delta_in_hot_column_and_zero_elsewhere(
        seed in any::<u64>(), n in 1usize..6, hot_pick in 0usize..6, batch in 1usize..5,
    ) {
        let hot = hot_pick % n;
        let (p, x, eps) = setup(seed, n, batch);
        let c = ConditionVector::one_hot(n, hot).unwrap();
        let cache = forward(&p, &x, &c.into(), &eps).unwrap();
        let out = term_grads(&cache.stats, &x, &cache.x_hat, 1.0).unwrap();
        let bp = backward_traced(&p, &cache, &out).unwrap();
        let g = &bp.grads.dec_wp;
        let delta_sum = bp.dec_delta1.sum_cols();
        for j in 0..n {
            for r in 0..g.rows() {
                if j == hot {
                    // by value: a dead unit's sum may be -0.0 against +0.0
                    prop_assert_eq!(g.get(r, j), delta_sum.get(r, 0));
                } else {
                    prop_assert_eq!(g.get(r, j).to_bits(), 0.0f64.to_bits());
                }
            }
        }
    }

    #[test]
    fn growth_leaves_existing_outputs_bit_identical(seed in any::<u64>(), n in 1usize..6, batch in 1usize..5) {
        let (p, _, _) = setup(seed, n, batch);
        let z = sample_standard_normal(LATENT_DIM, batch, &mut SeededRng::new(seed));
        let grown = p.grow(seed.wrapping_mul(3));
        prop_assert_eq!(grown.n_categories(), n + 1);
        for k in 0..n {
            let before = decode(&p, &z, &ConditionVector::one_hot(n, k).unwrap()).unwrap();
            let after = decode(&grown, &z, &ConditionVector::one_hot(n + 1, k).unwrap()).unwrap();
            prop_assert!(before.bit_eq(&after));
        }
        let before = decode(&p, &z, &ConditionVector::zero(n)).unwrap();
        let after = decode(&grown, &z, &ConditionVector::zero(n + 1)).unwrap();
        prop_assert!(before.bit_eq(&after));
        for (i, (a, b)) in p.tensors().iter().zip(grown.tensors()).enumerate() {
            if i != DEC_WP_INDEX {
                prop_assert!(a.bit_eq(b));
            }
        }
    }

    #[test]
    fn one_sgd_step_moves_only_the_trained_column(seed in any::<u64>(), n in 2usize..6, hot_pick in 0usize..6) {
        let hot = hot_pick % n;
        let (p, x, eps) = setup(seed, n, 4);
        let c = ConditionVector::one_hot(n, hot).unwrap();
        let cache = forward(&p, &x, &c.into(), &eps).unwrap();
        let out = term_grads(&cache.stats, &x, &cache.x_hat, 1.0).unwrap();
        let g = backward_traced(&p, &cache, &out).unwrap().grads;
        let q = sgd_step(&p, &g, 0.5).unwrap();
        for j in 0..n {
            if j == hot {
                continue;
            }
            for r in 0..p.dec_wp.rows() {
                prop_assert_eq!(q.dec_wp.get(r, j).to_bits(), p.dec_wp.get(r, j).to_bits());
            }
        }
    }
}
