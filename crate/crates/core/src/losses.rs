//! Loss terms for the three passes of a training step.
//!
//! Every term has the same form: a KL penalty pulling the encoder posterior
//! toward `N(0, I)` plus binary cross-entropy between a target and a
//! reconstruction. Reductions sum over latent dimensions / pixels and average
//! over the batch.
//!
//! | term  | encoder input | target                   | prediction              |
//! |-------|---------------|--------------------------|-------------------------|
//! | `new` | real image `x`| `x`                      | `x̂`                     |
//! | `cyc` | `x̂` (detached)| `x̂` (detached)           | second-pass output `x̌`  |
//! | `mem` | replayed `x_m`| `x_m`                    | `x̂_m`                   |

use std::fmt;

use crate::error::{Error, Result};
use crate::model::{LatentStats, OutputGrads};
use crate::ndcore::Tensor2;

/// BCE predictions are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before `ln`.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Term {
    New,
    Cyc,
    Mem,
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Term::New => "new",
            Term::Cyc => "cyc",
            Term::Mem => "mem",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub kl: f64,
    pub bce: f64,
    pub total: f64,
    pub term: Term,
}

impl LossReport {
    fn new(term: Term, kl: f64, bce: f64) -> Self {
        LossReport { kl, bce, total: kl + bce, term }
    }

    /// A term that did not run this step (for example replay with an empty bank).
    pub fn absent(term: Term) -> Self {
        LossReport { kl: 0.0, bce: 0.0, total: 0.0, term }
    }
}

/// `½ Σ_d (μ² + exp(log σ²) − log σ² − 1)`, averaged over the batch.
pub fn kl_std_normal(mu: &Tensor2, log_var: &Tensor2) -> Result<f64> {
    if mu.shape() != log_var.shape() {
        return Err(Error::Shape { op: "kl_std_normal", left: mu.shape(), right: log_var.shape() });
    }
    let batch = mu.cols().max(1) as f64;
    let total: f64 = mu
        .data()
        .iter()
        .zip(log_var.data())
        .map(|(&m, &lv)| m * m + lv.exp() - lv - 1.0)
        .sum();
    Ok(0.5 * total / batch)
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
}

/// `−Σ [t ln p + (1 − t) ln(1 − p)]` over pixels, averaged over the batch.
pub fn bce(target: &Tensor2, prediction: &Tensor2) -> Result<f64> {
    if target.shape() != prediction.shape() {
        return Err(Error::Shape { op: "bce", left: target.shape(), right: prediction.shape() });
    }
    let batch = target.cols().max(1) as f64;
    let total: f64 = target
        .data()
        .iter()
        .zip(prediction.data())
        .map(|(&t, &p)| {
            let p = clamp_prob(p);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / batch)
}

fn term_report(term: Term, stats: &LatentStats, target: &Tensor2, prediction: &Tensor2) -> Result<LossReport> {
    let kl = kl_std_normal(&stats.mu, &stats.log_var)?;
    let rec = bce(target, prediction)?;
    Ok(LossReport::new(term, kl, rec))
}

/// Loss on the current category's real images.
pub fn loss_new(stats: &LatentStats, x_true: &Tensor2, x_hat: &Tensor2) -> Result<LossReport> {
    term_report(Term::New, stats, x_true, x_hat)
}

/// Loss on replayed images, treated as ground truth.
pub fn loss_mem(stats_mem: &LatentStats, x_mem: &Tensor2, x_hat_mem: &Tensor2) -> Result<LossReport> {
    term_report(Term::Mem, stats_mem, x_mem, x_hat_mem)
}

/// Circulatory loss: the first-pass reconstruction `x_hat_detached` is the
/// target and `x_check`, the reconstruction of `x_hat_detached`, is the
/// prediction.
pub fn loss_cyc(stats_cyc: &LatentStats, x_hat_detached: &Tensor2, x_check: &Tensor2) -> Result<LossReport> {
    term_report(Term::Cyc, stats_cyc, x_hat_detached, x_check)
}

/// `ζ_new + λ1 ζ_cyc + λ2 ζ_mem`.
pub fn loss_total(new: &LossReport, cyc: &LossReport, mem: &LossReport, lambda1: f64, lambda2: f64) -> f64 {
    new.total + lambda1 * cyc.total + lambda2 * mem.total
}

/// Output-side gradients of `weight · (KL + BCE)` for one pass.
///
/// With `p = sigmoid(a)` the BCE gradient with respect to the pre-activation
/// `a` is `(p − t) / B`. Where the clamp is active the loss is locally
/// constant in `p`, so the gradient there is zero.
pub fn term_grads(stats: &LatentStats, target: &Tensor2, prediction: &Tensor2, weight: f64) -> Result<OutputGrads> {
    if target.shape() != prediction.shape() {
        return Err(Error::Shape { op: "term_grads", left: target.shape(), right: prediction.shape() });
    }
    let scale = weight / target.cols().max(1) as f64;
    let d_out_pre = prediction.zip_map(target, "term_grads", |p, t| {
        if (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
            scale * (p - t)
        } else {
            0.0
        }
    })?;
    let d_mu = stats.mu.scale(scale);
    let d_log_var = stats.log_var.map(|lv| scale * 0.5 * (lv.exp() - 1.0));
    Ok(OutputGrads { d_out_pre, d_mu, d_log_var })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::SeededRng;
    use proptest::prelude::*;

    fn stats(mu: Tensor2, log_var: Tensor2) -> LatentStats {
        let z = mu.clone();
        let eps = Tensor2::zeros(mu.rows(), mu.cols());
        LatentStats { mu, log_var, z, eps }
    }

    // Scalar-loop oracles, written independently of the tensor code.
    fn kl_oracle(mu: &[f64], lv: &[f64], batch: usize) -> f64 {
        let mut s = 0.0;
        for i in 0..mu.len() {
            s += 0.5 * (mu[i] * mu[i] + lv[i].exp() - lv[i] - 1.0);
        }
        s / batch as f64
    }

    fn bce_oracle(t: &[f64], p: &[f64], batch: usize) -> f64 {
        let mut s = 0.0;
        for i in 0..t.len() {
            let q = p[i].clamp(1e-7, 1.0 - 1e-7);
            s -= t[i] * q.ln() + (1.0 - t[i]) * (1.0 - q).ln();
        }
        s / batch as f64
    }

    #[test]
    fn kl_known_values() {
        let z = Tensor2::zeros(2, 3);
        assert_eq!(kl_std_normal(&z, &z).unwrap(), 0.0);
        let one = Tensor2::filled(1, 1, 1.0);
        let zero = Tensor2::zeros(1, 1);
        assert_eq!(kl_std_normal(&one, &zero).unwrap(), 0.5);
        let lv = Tensor2::filled(1, 1, 4f64.ln());
        let expected = 0.5 * (4.0 - 4f64.ln() - 1.0);
        assert!((kl_std_normal(&zero, &lv).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.80685).abs() < 1e-5);
    }

    #[test]
    fn bce_known_values() {
        let half = Tensor2::filled(1, 1, 0.5);
        assert!((bce(&half, &half).unwrap() - 2f64.ln()).abs() < 1e-15);
        let one = Tensor2::filled(1, 1, 1.0);
        let near = Tensor2::filled(1, 1, 1.0 - 1e-7);
        assert!((bce(&one, &near).unwrap() - 1e-7).abs() < 1e-12);
        // exact 0 and 1 predictions are clamped rather than producing inf
        let zero = Tensor2::zeros(1, 1);
        assert!(bce(&one, &zero).unwrap().is_finite());
        assert!(bce(&zero, &one).unwrap().is_finite());
    }

    #[test]
    fn random_eight_pixel_case_matches_oracle() {
        let mut rng = SeededRng::new(8);
        let t = Tensor2::from_fn(4, 2, |_, _| rng.next_f64());
        let p = Tensor2::from_fn(4, 2, |_, _| rng.uniform(0.01, 0.99));
        let got = bce(&t, &p).unwrap();
        let want = bce_oracle(t.data(), p.data(), 2);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn reports_are_additive_and_share_one_formula() {
        let mut rng = SeededRng::new(4);
        let mu = Tensor2::from_fn(2, 3, |_, _| rng.uniform(-1.0, 1.0));
        let lv = Tensor2::from_fn(2, 3, |_, _| rng.uniform(-1.0, 1.0));
        let s = stats(mu.clone(), lv.clone());
        let a = Tensor2::from_fn(5, 3, |_, _| rng.next_f64());
        let b = Tensor2::from_fn(5, 3, |_, _| rng.uniform(0.05, 0.95));
        let n = loss_new(&s, &a, &b).unwrap();
        let m = loss_mem(&s, &a, &b).unwrap();
        let c = loss_cyc(&s, &a, &b).unwrap();
        assert_eq!(n.total, n.kl + n.bce);
        assert_eq!(n.kl, kl_std_normal(&mu, &lv).unwrap());
        assert_eq!(n.bce, bce(&a, &b).unwrap());
        assert_eq!(n.total, m.total);
        assert_eq!(n.total, c.total);
        assert_eq!((n.term, m.term, c.term), (Term::New, Term::Mem, Term::Cyc));
    }

    #[test]
    fn collapsed_posterior_and_perfect_fit_is_near_zero() {
        let s = stats(Tensor2::zeros(2, 2), Tensor2::zeros(2, 2));
        let x = Tensor2::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        let r = loss_new(&s, &x, &x).unwrap();
        assert_eq!(r.kl, 0.0);
        assert!(r.total < 1e-5);
        let m = loss_mem(&s, &x, &x).unwrap();
        assert_eq!(m.total, bce(&x, &x).unwrap());
    }

    #[test]
    fn cyc_reaches_entropy_floor_when_second_pass_matches() {
        let s = stats(Tensor2::zeros(2, 1), Tensor2::zeros(2, 1));
        let target = Tensor2::from_rows(&[&[0.2], &[0.7], &[0.5]]).unwrap();
        let floor = loss_cyc(&s, &target, &target).unwrap().bce;
        let off = loss_cyc(&s, &target, &target.map(|v| v * 0.9 + 0.05)).unwrap().bce;
        assert!(floor < off);
        let entropy: f64 = target.data().iter().map(|&t| -(t * t.ln() + (1.0 - t) * (1.0 - t).ln())).sum();
        assert!((floor - entropy).abs() < 1e-12);
    }

    #[test]
    fn total_weights() {
        let n = LossReport::new(Term::New, 1.0, 2.0);
        let c = LossReport::new(Term::Cyc, 0.5, 0.25);
        let m = LossReport::new(Term::Mem, 4.0, 1.0);
        assert_eq!(loss_total(&n, &c, &m, 0.0, 0.0), n.total);
        assert_eq!(loss_total(&n, &c, &m, 1.0, 1.0), n.total + c.total + m.total);
        let base = loss_total(&n, &c, &m, 0.0, 1.0);
        assert!((loss_total(&n, &c, &m, 2.0, 1.0) - base - 2.0 * c.total).abs() < 1e-15);
    }

    #[test]
    fn output_grads_match_finite_differences() {
        let mut rng = SeededRng::new(21);
        let pre = Tensor2::from_fn(3, 2, |_, _| rng.uniform(-2.0, 2.0));
        let t = Tensor2::from_fn(3, 2, |_, _| rng.next_f64());
        let mu = Tensor2::from_fn(2, 2, |_, _| rng.uniform(-1.0, 1.0));
        let lv = Tensor2::from_fn(2, 2, |_, _| rng.uniform(-1.0, 1.0));
        let loss = |pre: &Tensor2, mu: &Tensor2, lv: &Tensor2| {
            kl_std_normal(mu, lv).unwrap() + bce(&t, &crate::ndcore::sigmoid(pre)).unwrap()
        };
        let g = term_grads(&stats(mu.clone(), lv.clone()), &t, &crate::ndcore::sigmoid(&pre), 1.0).unwrap();
        let h = 1e-5;
        for i in 0..6 {
            let mut a = pre.clone();
            a.data_mut()[i] += h;
            let mut b = pre.clone();
            b.data_mut()[i] -= h;
            let fd = (loss(&a, &mu, &lv) - loss(&b, &mu, &lv)) / (2.0 * h);
            assert!((fd - g.d_out_pre.data()[i]).abs() < 1e-8);
        }
        for i in 0..4 {
            let mut a = mu.clone();
            a.data_mut()[i] += h;
            let mut b = mu.clone();
            b.data_mut()[i] -= h;
            let fd = (loss(&pre, &a, &lv) - loss(&pre, &b, &lv)) / (2.0 * h);
            assert!((fd - g.d_mu.data()[i]).abs() < 1e-8);
            let mut a = lv.clone();
            a.data_mut()[i] += h;
            let mut b = lv.clone();
            b.data_mut()[i] -= h;
            let fd = (loss(&pre, &mu, &a) - loss(&pre, &mu, &b)) / (2.0 * h);
            assert!((fd - g.d_log_var.data()[i]).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn kl_matches_oracle_and_is_nonnegative(seed in any::<u64>(), d in 1usize..4, b in 1usize..5) {
            let mut rng = SeededRng::new(seed);
            let mu = Tensor2::from_fn(d, b, |_, _| rng.uniform(-3.0, 3.0));
            let lv = Tensor2::from_fn(d, b, |_, _| rng.uniform(-5.0, 5.0));
            let kl = kl_std_normal(&mu, &lv).unwrap();
            prop_assert!(kl >= 0.0);
            prop_assert!((kl - kl_oracle(mu.data(), lv.data(), b)).abs() < 1e-12);
        }

        #[test]
        fn bce_matches_oracle_and_target_is_floor(seed in any::<u64>(), n in 1usize..10, b in 1usize..5) {
            let mut rng = SeededRng::new(seed);
            let t = Tensor2::from_fn(n, b, |_, _| rng.next_f64());
            let p = Tensor2::from_fn(n, b, |_, _| rng.next_f64());
            let got = bce(&t, &p).unwrap();
            prop_assert!((got - bce_oracle(t.data(), p.data(), b)).abs() < 1e-12);
            let t_clamped = t.map(clamp_prob);
            prop_assert!(got >= bce(&t, &t_clamped).unwrap() - 1e-12);
        }

        #[test]
        fn losses_ignore_batch_order(seed in any::<u64>(), b in 2usize..6) {
            let mut rng = SeededRng::new(seed);
            let mu = Tensor2::from_fn(2, b, |_, _| rng.uniform(-1.0, 1.0));
            let lv = Tensor2::from_fn(2, b, |_, _| rng.uniform(-1.0, 1.0));
            let t = Tensor2::from_fn(6, b, |_, _| rng.next_f64());
            let p = Tensor2::from_fn(6, b, |_, _| rng.uniform(0.01, 0.99));
            let mut perm: Vec<usize> = (0..b).collect();
            rng.shuffle(&mut perm);
            let s = stats(mu.clone(), lv.clone());
            let sp = stats(mu.select_columns(&perm), lv.select_columns(&perm));
            let a = loss_new(&s, &t, &p).unwrap();
            let bp = loss_new(&sp, &t.select_columns(&perm), &p.select_columns(&perm)).unwrap();
            prop_assert!((a.total - bp.total).abs() < 1e-12);
        }

        #[test]
        fn total_is_monotone(l1 in 0.0f64..5.0, l2 in 0.0f64..5.0, bump in 0.0f64..3.0) {
            let n = LossReport::new(Term::New, 1.0, 1.0);
            let c = LossReport::new(Term::Cyc, 0.5, 0.5);
            let m = LossReport::new(Term::Mem, 0.3, 0.2);
            let base = loss_total(&n, &c, &m, l1, l2);
            let c2 = LossReport::new(Term::Cyc, 0.5 + bump, 0.5);
            let m2 = LossReport::new(Term::Mem, 0.3, 0.2 + bump);
            let n2 = LossReport::new(Term::New, 1.0 + bump, 1.0);
            prop_assert!(loss_total(&n, &c2, &m, l1, l2) >= base);
            prop_assert!(loss_total(&n, &c, &m2, l1, l2) >= base);
            prop_assert!(loss_total(&n2, &c, &m, l1, l2) >= base);
        }
    }
}
