//! Analytic gradients of the three loss terms against central differences on
//! a toy network: 4 pixels, 3 hidden units, 2 categories.

use gvae_core::losses::{loss_cyc, loss_mem, loss_new, term_grads, LossReport};
use gvae_core::model::{backward, forward, ConditionVector, Conditioning, CvaeParams, Dims, LATENT_DIM};
use gvae_core::ndcore::{finite_difference_grad, relative_error, sample_standard_normal, SeededRng, Tensor2};
use gvae_core::Result;

const TOY: Dims = Dims { input: 4, hidden: 3 };
const EPSILON: f64 = 1e-4;
const TOLERANCE: f64 = 1e-4;
// Below this magnitude both gradients count as zero; the differencing error
// at EPSILON is around 1e-9 here.
const FLOOR: f64 = 1e-5;
const INSTANCES: u64 = 25;
// Central differences straddle a ReLU kink when a pre-activation is within
// about EPSILON of zero; such draws are replaced.
const KINK_MARGIN: f64 = 1e-2;

struct Instance {
    params: CvaeParams,
    x: Tensor2,
    category: usize,
    eps: Tensor2,
    eps_cyc: Tensor2,
}

/// The `index`-th toy instance whose passes (`first`, and the cycle pass
/// fed with the first reconstruction) stay clear of ReLU kinks.
fn instance(index: u64) -> Instance {
    (0..)
        .map(|attempt| draw(index * 1000 + attempt))
        .find(|inst| {
            let cond: Conditioning = ConditionVector::one_hot(2, inst.category).unwrap().into();
            let other: Conditioning = ConditionVector::one_hot(2, 1 - inst.category).unwrap().into();
            let first = forward(&inst.params, &inst.x, &cond, &inst.eps).unwrap();
            let cyc = forward(&inst.params, &first.x_hat, &cond, &inst.eps_cyc).unwrap();
            let mem = forward(&inst.params, &inst.x, &other, &inst.eps).unwrap();
            let mixed = forward(&inst.params, &inst.x, &mixed_conditions(), &inst.eps).unwrap();
            [first, cyc, mem, mixed].iter().all(|c| c.relu_margin() > KINK_MARGIN)
        })
        .expect("some draw avoids the kinks")
}

fn mixed_conditions() -> Conditioning {
    Conditioning::PerExample(vec![
        ConditionVector::one_hot(2, 0).unwrap(),
        ConditionVector::one_hot(2, 1).unwrap(),
        ConditionVector::zero(2),
    ])
}

fn draw(seed: u64) -> Instance {
    let mut rng = SeededRng::new(seed);
    let mut params = CvaeParams::init(TOY, seed).grow(seed + 1);
    // biases start at zero; perturb them so their gradients are exercised
    for t in [&mut params.enc_b1, &mut params.dec_b1, &mut params.dec_b2, &mut params.enc_b_mu] {
        for v in t.data_mut() {
            *v = rng.uniform(-0.3, 0.3);
        }
    }
    let batch = 3;
    let x = Tensor2::from_fn(TOY.input, batch, |_, _| rng.uniform(0.05, 0.95));
    Instance {
        params,
        x,
        category: rng.below(2),
        eps: sample_standard_normal(LATENT_DIM, batch, &mut rng),
        eps_cyc: sample_standard_normal(LATENT_DIM, batch, &mut rng),
    }
}

type LossFn = fn(&gvae_core::model::LatentStats, &Tensor2, &Tensor2) -> Result<LossReport>;

/// Loss of one pass whose input is also its target.
fn pass_loss(params: &CvaeParams, input: &Tensor2, cond: &Conditioning, eps: &Tensor2, loss: LossFn) -> f64 {
    let cache = forward(params, input, cond, eps).unwrap();
    loss(&cache.stats, input, &cache.x_hat).unwrap().total
}

fn pass_grad(params: &CvaeParams, input: &Tensor2, cond: &Conditioning, eps: &Tensor2) -> Vec<f64> {
    let cache = forward(params, input, cond, eps).unwrap();
    let out = term_grads(&cache.stats, input, &cache.x_hat, 1.0).unwrap();
    backward(params, &cache, &out).unwrap().to_flat()
}

fn compare(label: &str, seed: u64, analytic: &[f64], numeric: &[f64]) {
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let r = relative_error(*a, *n, FLOOR);
        assert!(r < TOLERANCE, "{label} instance {seed} param {i}: analytic {a} numeric {n} rel {r}");
    }
}

fn with_flat(params: &CvaeParams, flat: &[f64]) -> CvaeParams {
    let mut p = params.clone();
    p.set_flat(flat);
    p
}

#[test]
fn new_term_gradients() {
    for seed in 0..INSTANCES {
        let inst = instance(seed);
        let cond: Conditioning = ConditionVector::one_hot(2, inst.category).unwrap().into();
        let flat = inst.params.to_flat();
        let numeric = finite_difference_grad(
            |v| pass_loss(&with_flat(&inst.params, v), &inst.x, &cond, &inst.eps, loss_new),
            &flat,
            EPSILON,
        );
        compare("new", seed, &pass_grad(&inst.params, &inst.x, &cond, &inst.eps), &numeric);
    }
}

#[test]
fn memory_term_gradients() {
    // replay images are plain inputs conditioned on an older category
    for seed in 0..INSTANCES {
        let inst = instance(100 + seed);
        let mem_category = 1 - inst.category;
        let cond: Conditioning = ConditionVector::one_hot(2, mem_category).unwrap().into();
        let flat = inst.params.to_flat();
        let numeric = finite_difference_grad(
            |v| pass_loss(&with_flat(&inst.params, v), &inst.x, &cond, &inst.eps, loss_mem),
            &flat,
            EPSILON,
        );
        compare("mem", seed, &pass_grad(&inst.params, &inst.x, &cond, &inst.eps), &numeric);
    }
}

#[test]
fn cycle_term_gradients_hold_first_reconstruction_fixed() {
    for seed in 0..INSTANCES {
        let inst = instance(200 + seed);
        let cond: Conditioning = ConditionVector::one_hot(2, inst.category).unwrap().into();
        let x_hat = forward(&inst.params, &inst.x, &cond, &inst.eps).unwrap().x_hat;
        let flat = inst.params.to_flat();
        let numeric = finite_difference_grad(
            |v| pass_loss(&with_flat(&inst.params, v), &x_hat, &cond, &inst.eps_cyc, loss_cyc),
            &flat,
            EPSILON,
        );
        compare("cyc", seed, &pass_grad(&inst.params, &x_hat, &cond, &inst.eps_cyc), &numeric);
    }
}

#[test]
fn mixed_conditions_in_one_batch() {
    for seed in 0..INSTANCES {
        let inst = instance(300 + seed);
        let cond = mixed_conditions();
        let flat = inst.params.to_flat();
        let numeric = finite_difference_grad(
            |v| pass_loss(&with_flat(&inst.params, v), &inst.x, &cond, &inst.eps, loss_new),
            &flat,
            EPSILON,
        );
        compare("mixed", seed, &pass_grad(&inst.params, &inst.x, &cond, &inst.eps), &numeric);
    }
}
