//! Scalar objectives and their derivatives in the network output `f`.
//!
//! All sigmoid and log terms go through the sign-split forms below
//! ([`sigmoid`], [`softplus`], [`log_sigmoid`]); they never overflow for
//! `|f| ≤ 700` and agree with the textbook formulas to a few ulps.
//!
//! The soft-label loss is the nonnegative divergence `KL(p ‖ μ(f))` with
//! `μ(f) = 1/(1+e^{−f})`; its derivative in `f` is `μ(f) − p`.

use crate::error::{Error, Result};

/// `1/(1+e^{−f})`.
#[inline]
pub fn sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

/// `ln(1+e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln μ(f) = −softplus(−f)`.
#[inline]
pub fn log_sigmoid(f: f64) -> f64 {
    -softplus(-f)
}

/// `ψ(x) = x − ln(1+x)` for `x > −1`, evaluated without cancellation near 0.
fn psi(x: f64) -> f64 {
    if x.abs() < 0.1 {
        // alternating series x²/2 − x³/3 + x⁴/4 − …; 0.1^18 is below an ulp
        let mut term = x * x;
        let mut acc = 0.0;
        for k in 2..=20 {
            acc += term / k as f64;
            term *= -x;
        }
        acc
    } else {
        x - x.ln_1p()
    }
}

fn check_prob(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::Probability(p))
    }
}

fn check_label(y: f64) -> Result<()> {
    if y == 1.0 || y == -1.0 {
        Ok(())
    } else {
        Err(Error::Label(y))
    }
}

/// `KL(p ‖ μ(f))`, checked.
pub fn kl_loss(p: f64, f: f64) -> Result<f64> {
    check_prob(p)?;
    Ok(kl(p, f))
}

/// Unchecked [`kl_loss`].
///
/// With `r = p − q`, `q = μ(f)`:
/// `KL = p·ψ(−r/p) + (1−p)·ψ(r/(1−p))`. Both terms are nonnegative, so the
/// sum has no cancellation even when `q ≈ p`. When `q` or `1−q` underflows
/// relative to `p`, the logarithm is taken directly from [`log_sigmoid`].
pub fn kl(p: f64, f: f64) -> f64 {
    let q = sigmoid(f);
    let r = p - q;
    let pc = 1.0 - p;
    kl_term(p, -r / p, || log_sigmoid(f) - p.ln()) + kl_term(pc, r / pc, || log_sigmoid(-f) - pc.ln())
}

// weight·ψ(x) where 1 + x is the ratio whose log `log_ratio` returns accurately.
#[inline]
fn kl_term(weight: f64, x: f64, log_ratio: impl Fn() -> f64) -> f64 {
    if x.abs() < 0.5 {
        weight * psi(x)
    } else {
        weight * (x - log_ratio())
    }
}

/// `∂/∂f KL(p ‖ μ(f)) = μ(f) − p`, checked.
pub fn kl_grad(p: f64, f: f64) -> Result<f64> {
    check_prob(p)?;
    Ok(sigmoid(f) - p)
}

/// `ln(1 + e^{−y f})`, checked.
pub fn hard_loss(y: f64, f: f64) -> Result<f64> {
    check_label(y)?;
    Ok(softplus(-y * f))
}

/// `∂/∂f ln(1 + e^{−y f}) = −y/(1 + e^{y f})`, checked.
pub fn hard_grad(y: f64, f: f64) -> Result<f64> {
    check_label(y)?;
    Ok(-y * sigmoid(-y * f))
}

/// Fraction of samples with `y_i f_i ≤ 0`; an output of exactly 0 is an error.
pub fn class_error(ys: &[f64], fs: &[f64]) -> Result<f64> {
    if ys.len() != fs.len() {
        return Err(Error::Shape(format!("{} labels vs {} outputs", ys.len(), fs.len())));
    }
    if ys.is_empty() {
        return Ok(0.0);
    }
    Ok(misclassified(ys, fs) as f64 / ys.len() as f64)
}

pub(crate) fn misclassified(ys: &[f64], fs: &[f64]) -> usize {
    ys.iter().zip(fs).filter(|(y, f)| *y * *f <= 0.0).count()
}

/// Binary entropy in nats, `0·ln 0 := 0`.
pub fn entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("entropy of p = {p}")));
    }
    let h = |x: f64| if x == 0.0 { 0.0 } else { -x * x.ln() };
    Ok(h(p) + h(1.0 - p))
}

/// Mean binary entropy over a set of soft labels.
pub fn mean_entropy(ps: &[f64]) -> Result<f64> {
    if ps.is_empty() {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for &p in ps {
        s += entropy(p)?;
    }
    Ok(s / ps.len() as f64)
}

/// Batch risks at one iterate.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RiskSnapshot {
    /// Mean KL to the soft labels; `None` without a teacher.
    pub r_kl: Option<f64>,
    /// Mean logistic loss on the hard labels.
    pub r_hard: f64,
    /// Misclassification rate.
    pub r_class: f64,
    /// Mean KL of the frozen-pattern outputs at the reference weights.
    pub r_kl_at_ref: Option<f64>,
    /// Mean soft-label entropy.
    pub entropy_bar: Option<f64>,
}

/// Averages the per-sample losses.
///
/// `probs` are the teacher's soft labels (if any) and `fs_at_ref` the
/// frozen-pattern outputs at the reference weights (if recorded).
pub fn batch_risks(
    ys: &[f64],
    probs: Option<&[f64]>,
    fs: &[f64],
    fs_at_ref: Option<&[f64]>,
) -> Result<RiskSnapshot> {
    let n = ys.len();
    let len_ok = fs.len() == n
        && probs.is_none_or(|p| p.len() == n)
        && fs_at_ref.is_none_or(|r| r.len() == n);
    if !len_ok {
        return Err(Error::Shape("inconsistent lengths in batch_risks".into()));
    }
    if let Some(&y) = ys.iter().find(|y| **y != 1.0 && **y != -1.0) {
        return Err(Error::Label(y));
    }
    if let Some(ps) = probs {
        if let Some(&p) = ps.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::Probability(p));
        }
    }
    let inv_n = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let mean_kl = |outs: &[f64], ps: &[f64]| ps.iter().zip(outs).map(|(&p, &f)| kl(p, f)).sum::<f64>() * inv_n;

    let r_hard = ys.iter().zip(fs).map(|(&y, &f)| softplus(-y * f)).sum::<f64>() * inv_n;
    Ok(RiskSnapshot {
        r_kl: probs.map(|ps| mean_kl(fs, ps)),
        r_hard,
        r_class: misclassified(ys, fs) as f64 * inv_n,
        r_kl_at_ref: match (probs, fs_at_ref) {
            (Some(ps), Some(rf)) => Some(mean_kl(rf, ps)),
            _ => None,
        },
        entropy_bar: probs.map(mean_entropy).transpose()?,
    })
}

/// Pinsker sandwich `2(p−q)² ≤ KL(p‖q) ≤ 2(p−q)²/min(q, 1−q)` and the bound
/// `|μ(f) − p| ≤ KL + H(p)`, evaluated for one `(p, f)` pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairCheck {
    pub kl: f64,
    pub pinsker_lower: f64,
    pub pinsker_upper: f64,
    pub grad_abs: f64,
    pub grad_bound: f64,
}

/// Relative allowance for rounding in [`PairCheck::holds`]. The lower Pinsker
/// bound is tight to fourth order at `p = q = 1/2`.
pub const PAIR_REL_TOL: f64 = 1e-12;

impl PairCheck {
    pub fn new(p: f64, f: f64) -> Result<Self> {
        check_prob(p)?;
        let q = sigmoid(f);
        let r = p - q;
        let k = kl(p, f);
        let min_q = sigmoid(-f.abs());
        Ok(PairCheck {
            kl: k,
            pinsker_lower: 2.0 * r * r,
            pinsker_upper: 2.0 * r * r / min_q,
            grad_abs: r.abs(),
            grad_bound: k + entropy(p)?,
        })
    }

    pub fn lower_holds(&self) -> bool {
        self.pinsker_lower <= self.kl * (1.0 + PAIR_REL_TOL)
    }

    pub fn upper_holds(&self) -> bool {
        self.kl <= self.pinsker_upper * (1.0 + PAIR_REL_TOL)
    }

    pub fn grad_holds(&self) -> bool {
        self.grad_abs <= self.grad_bound * (1.0 + PAIR_REL_TOL)
    }

    pub fn holds(&self) -> bool {
        self.lower_holds() && self.upper_holds() && self.grad_holds()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // textbook formula, used as an oracle away from cancellation
    fn kl_naive(p: f64, f: f64) -> f64 {
        let q = 1.0 / (1.0 + (-f).exp());
        let qc = 1.0 / (1.0 + f.exp());
        p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / qc).ln()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_loss(0.5, 0.0).unwrap(), 0.0);
        assert!(kl_loss(sigmoid(3.0), 3.0).unwrap().abs() < 1e-16);
        let expected = 0.88 * 1.76f64.ln() + 0.12 * 0.24f64.ln();
        let got = kl_loss(0.88, 0.0).unwrap();
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        assert!((got - 0.3262).abs() < 5e-5);
        assert!(kl_loss(0.0, 1.0).is_err());
        assert!(kl_loss(1.0, 1.0).is_err());
    }

    #[test]
    fn kl_is_finite_for_extreme_logits() {
        for f in [-700.0, -50.0, 50.0, 700.0] {
            let v = kl_loss(0.3, f).unwrap();
            assert!(v.is_finite() && v > 0.0, "f = {f}: {v}");
        }
        // KL(0.3 ‖ μ(700)) = 0.7·700 + 0.3·ln 0.3 + 0.7·ln 0.7 up to e^{-700}
        let expect = 0.7 * 700.0 + 0.3 * 0.3f64.ln() + 0.7 * 0.7f64.ln();
        assert!((kl_loss(0.3, 700.0).unwrap() - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn kl_grad_examples() {
        assert_eq!(kl_grad(0.5, 0.0).unwrap(), 0.0);
        assert!((kl_grad(0.2, 0.0).unwrap() - 0.3).abs() < 1e-16);
    }

    #[test]
    fn hard_examples() {
        assert!((hard_loss(1.0, 0.0).unwrap() - 2f64.ln()).abs() < 1e-16);
        let expected = (1.0 + 2f64.exp()).ln();
        assert!((hard_loss(-1.0, 2.0).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 2.1269).abs() < 5e-5);
        assert!(hard_loss(0.0, 1.0).is_err());
        assert!(hard_grad(2.0, 1.0).is_err());
    }

    #[test]
    fn class_error_examples() {
        assert_eq!(class_error(&[1.0, -1.0], &[0.2, -3.0]).unwrap(), 0.0);
        assert_eq!(class_error(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), 1.0);
        // hand count: sample 2 (−1·0.2 < 0) and sample 3 (+1·−0.1 < 0)
        let e = class_error(&[1.0, -1.0, 1.0], &[0.3, 0.2, -0.1]).unwrap();
        assert!((e - 2.0 / 3.0).abs() < 1e-16);
        assert!(class_error(&[1.0], &[]).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(0.5).unwrap() - 2f64.ln()).abs() < 1e-16);
        assert_eq!(entropy(0.0).unwrap(), 0.0);
        assert_eq!(entropy(1.0).unwrap(), 0.0);
        let e = entropy(0.88).unwrap();
        let oracle = -0.88 * 0.88f64.ln() - 0.12 * 0.12f64.ln();
        assert!((e - oracle).abs() < 1e-15);
        assert!((e - 0.3669).abs() < 5e-5);
        assert!(entropy(1.5).is_err());
    }

    #[test]
    fn batch_risks_single_sample_reduces() {
        let s = batch_risks(&[1.0], Some(&[0.7]), &[0.4], Some(&[0.1])).unwrap();
        assert_eq!(s.r_kl, Some(kl(0.7, 0.4)));
        assert_eq!(s.r_hard, hard_loss(1.0, 0.4).unwrap());
        assert_eq!(s.r_class, 0.0);
        assert_eq!(s.r_kl_at_ref, Some(kl(0.7, 0.1)));
        assert_eq!(s.entropy_bar, Some(entropy(0.7).unwrap()));
    }

    #[test]
    fn batch_risks_zero_at_teacher_logits() {
        let z = [0.3, -0.2, 0.45];
        let ps: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        let s = batch_risks(&[1.0, -1.0, 1.0], Some(&ps), &z, None).unwrap();
        assert!(s.r_kl.unwrap().abs() < 1e-16);
    }

    #[test]
    fn batch_risks_matches_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 8;
        let ys: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
        let ps: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let fs: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let rf: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let s = batch_risks(&ys, Some(&ps), &fs, Some(&rf)).unwrap();

        let (mut kl_sum, mut hard_sum, mut err, mut ref_sum, mut h_sum) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            kl_sum += kl_naive(ps[i], fs[i]);
            ref_sum += kl_naive(ps[i], rf[i]);
            hard_sum += (1.0 + (-ys[i] * fs[i]).exp()).ln();
            if ys[i] * fs[i] <= 0.0 {
                err += 1.0;
            }
            h_sum += -ps[i] * ps[i].ln() - (1.0 - ps[i]) * (1.0 - ps[i]).ln();
        }
        let nf = n as f64;
        assert!((s.r_kl.unwrap() - kl_sum / nf).abs() < 1e-12);
        assert!((s.r_kl_at_ref.unwrap() - ref_sum / nf).abs() < 1e-12);
        assert!((s.r_hard - hard_sum / nf).abs() < 1e-12);
        assert_eq!(s.r_class, err / nf);
        assert!((s.entropy_bar.unwrap() - h_sum / nf).abs() < 1e-12);
    }

    #[test]
    fn kl_grad_matches_finite_difference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let h = 1e-5;
        for _ in 0..1000 {
            let p: f64 = rng.random_range(0.01..0.99);
            let f: f64 = rng.random_range(-6.0..6.0);
            let fd = (kl(p, f + h) - kl(p, f - h)) / (2.0 * h);
            let g = kl_grad(p, f).unwrap();
            // absolute floor for gradients that are themselves ~0
            let rel = (fd - g).abs() / g.abs().max(1e-3);
            assert!(rel <= 1e-7, "p={p} f={f}: fd {fd} vs {g}");
        }
    }

    #[test]
    fn hard_grad_matches_finite_difference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let h = 1e-5;
        for _ in 0..1000 {
            let y = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let f: f64 = rng.random_range(-6.0..6.0);
            let fd = (hard_loss(y, f + h).unwrap() - hard_loss(y, f - h).unwrap()) / (2.0 * h);
            let g = hard_grad(y, f).unwrap();
            let rel = (fd - g).abs() / g.abs().max(1e-3);
            assert!(rel <= 1e-7, "y={y} f={f}: fd {fd} vs {g}");
        }
    }

    proptest! {
        #[test]
        fn kl_agrees_with_naive_formula(p in 0.01f64..0.99, f in -20.0f64..20.0) {
            let a = kl(p, f);
            let b = kl_naive(p, f);
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }

        #[test]
        fn pinsker_sandwich_and_gradient_bound(p in 1e-6f64..(1.0 - 1e-6), f in -40.0f64..40.0) {
            let c = PairCheck::new(p, f).unwrap();
            prop_assert!(c.lower_holds(), "{:?}", c);
            prop_assert!(c.upper_holds(), "{:?}", c);
            prop_assert!(c.grad_holds(), "{:?}", c);
        }

        #[test]
        fn pinsker_near_half(p in 0.5f64 - 1e-6..0.5 + 1e-6, df in -1e-6f64..1e-6) {
            let c = PairCheck::new(p, df).unwrap();
            prop_assert!(c.holds(), "{:?}", c);
        }

        #[test]
        fn gradients_are_bounded(p in 0.001f64..0.999, f in -700.0f64..700.0) {
            prop_assert!(kl_grad(p, f).unwrap().abs() <= 1.0);
            prop_assert!(hard_grad(1.0, f).unwrap().abs() <= 1.0);
            prop_assert!(hard_loss(-1.0, f).unwrap().is_finite());
        }
    }
}
