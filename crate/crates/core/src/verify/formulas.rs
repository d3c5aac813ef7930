//! Closed-form widths, schedules and concentration bounds.

use std::f64::consts::{E, LN_2, PI};

use crate::error::{Error, Result};

/// `96 / (1 + e²)`.
pub fn c1() -> f64 {
    96.0 / (1.0 + E * E)
}

/// `32·C₁`.
pub fn c2() -> f64 {
    32.0 * c1()
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} = {v} must be positive and finite")))
    }
}

fn probability(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} = {v} must lie in (0, 1]")))
    }
}

fn log_term(n: usize, delta: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    probability("delta", delta)?;
    Ok((2.0 * n as f64 / delta).ln())
}

/// `√(2/π)/c + 3√ln(2n/δ)`, the bracket shared by the soft-label widths.
fn soft_bracket(c: f64, n: usize, delta: f64) -> Result<f64> {
    positive("c", c)?;
    Ok((2.0 / PI).sqrt() / c + 3.0 * log_term(n, delta)?.sqrt())
}

/// Soft-label width for averaged KL risk at most `beta`.
pub fn theorem1_width(beta: f64, c: f64, n: usize, delta: f64) -> Result<f64> {
    positive("beta", beta)?;
    Ok(c1() / beta * soft_bracket(c, n, delta)?.powi(2))
}

/// Soft-label width for averaged classification error at most `epsilon`.
pub fn corollary2_width(epsilon: f64, gamma: f64, c: f64, n: usize, delta: f64) -> Result<f64> {
    positive("epsilon", epsilon)?;
    positive("gamma", gamma)?;
    Ok(c2() / (gamma * gamma * epsilon) * soft_bracket(c, n, delta)?.powi(2))
}

/// `ln(2 / (ln 2·β))`.
pub fn hard_log(beta: f64) -> Result<f64> {
    positive("beta", beta)?;
    Ok((2.0 / (LN_2 * beta)).ln())
}

/// Hard-label width for averaged logistic risk at most `beta`.
pub fn proposition3_width(beta: f64, gamma: f64, c: f64, n: usize, delta: f64) -> Result<f64> {
    positive("gamma", gamma)?;
    positive("c", c)?;
    let l = hard_log(beta)?;
    let bracket = 2.0 * 2f64.sqrt() / (c * PI.sqrt()) * l + 3.0 * log_term(n, delta)?.sqrt();
    Ok(16.0 / gamma.powi(4) * bracket * bracket)
}

/// Smallest even integer `≥ x`.
pub fn even_ceil(x: f64) -> Result<u64> {
    if !(x >= 0.0) || !x.is_finite() || x > 9.0e15 {
        return Err(Error::InvalidArgument(format!("width {x} is not representable")));
    }
    let k = x.ceil() as u64;
    Ok((k + k % 2).max(2))
}

/// Step size, iteration count and projection radius.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Schedule {
    pub eta: f64,
    pub iters: usize,
    pub radius: f64,
}

fn iters_at_least(x: f64) -> Result<usize> {
    if !x.is_finite() || x > 1e15 {
        return Err(Error::InvalidArgument(format!("iteration count {x} is not representable")));
    }
    Ok((x.ceil() as usize).max(1))
}

/// `η = β/3`, `T = ⌈9/β²⌉`, `B = 1`.
pub fn theorem1_schedule(beta: f64) -> Result<Schedule> {
    positive("beta", beta)?;
    Ok(Schedule {
        eta: beta / 3.0,
        iters: iters_at_least(9.0 / (beta * beta))?,
        radius: 1.0,
    })
}

/// Entropy-aware variant: `η = β/(3H)`, `T = ⌈9HB²/β²⌉`, capped at `η = 1`.
pub fn theorem1_schedule_entropy(beta: f64, entropy: f64, radius: f64) -> Result<Schedule> {
    positive("beta", beta)?;
    positive("entropy", entropy)?;
    positive("radius", radius)?;
    Ok(Schedule {
        eta: (beta / (3.0 * entropy)).min(1.0),
        iters: iters_at_least(9.0 * entropy * radius * radius / (beta * beta))?,
        radius,
    })
}

/// `η = γ²ε/3`, `T = ⌈9/(γ⁴ε²)⌉`, `B = 1`.
pub fn corollary2_schedule(epsilon: f64, gamma: f64) -> Result<Schedule> {
    positive("epsilon", epsilon)?;
    positive("gamma", gamma)?;
    Ok(Schedule {
        eta: gamma * gamma * epsilon / 3.0,
        iters: iters_at_least(9.0 / (gamma.powi(4) * epsilon * epsilon))?,
        radius: 1.0,
    })
}

/// `B = (2/γ)·L`, `T = ⌈8L²/(γ²η·ln2·β)⌉` with `L = ln(2/(ln2·β))`.
pub fn proposition3_schedule(beta: f64, gamma: f64, eta: f64) -> Result<Schedule> {
    positive("gamma", gamma)?;
    positive("eta", eta)?;
    if eta > 1.0 {
        return Err(Error::InvalidArgument(format!("step size {eta} must be at most 1")));
    }
    let l = hard_log(beta)?;
    Ok(Schedule {
        eta,
        iters: iters_at_least(8.0 / (gamma * gamma * eta) * l * l / (LN_2 * beta))?,
        radius: 2.0 / gamma * l,
    })
}

/// Shrinks `T` to `max_iters`, raising `η` to keep `ηT` (never above 1).
pub fn cap_iterations(s: Schedule, max_iters: usize) -> Schedule {
    if s.iters <= max_iters {
        return s;
    }
    let budget = s.eta * s.iters as f64;
    Schedule {
        eta: (budget / max_iters as f64).min(1.0),
        iters: max_iters,
        radius: s.radius,
    }
}

/// `√(2 ln(2n/δ)/m)`: deviation of `f_i^0(U)` from `z_i`.
pub fn subsample_bound(n: usize, m: usize, delta: f64) -> Result<f64> {
    Ok((2.0 * log_term(n, delta)? / m as f64).sqrt())
}

/// `√2·B√m/(c√π) + 2√(m ln(2n/δ))`: flip-set cardinality.
pub fn flip_count_bound(radius: f64, c: f64, m: usize, n: usize, delta: f64) -> Result<f64> {
    positive("c", c)?;
    let m = m as f64;
    Ok(2f64.sqrt() * radius * m.sqrt() / (c * PI.sqrt()) + 2.0 * (m * log_term(n, delta)?).sqrt())
}

/// `(1/√m)(√2·B·D/(c√π) + 2D√ln(2n/δ))`: drift of a frozen-pattern output
/// evaluated at weights with rows of norm at most `D/√m`. `D = B` gives the
/// drift at `W(0)`.
pub fn frozen_drift_bound(radius: f64, row_scale: f64, c: f64, m: usize, n: usize, delta: f64) -> Result<f64> {
    positive("c", c)?;
    let l = log_term(n, delta)?.sqrt();
    Ok((2f64.sqrt() * radius * row_scale / (c * PI.sqrt()) + 2.0 * row_scale * l) / (m as f64).sqrt())
}

/// `32/γ²`: classification error per unit KL risk at margin `γ ≤ 1`.
pub fn lemma1_factor(gamma: f64) -> Result<f64> {
    positive("gamma", gamma)?;
    Ok(32.0 / (gamma * gamma))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants() {
        // 96 / (1 + 7.38905609893065)
        assert!((c1() - 11.443_480_514_123_287).abs() < 1e-12);
        assert!((c2() - 366.191_376_451_945_2).abs() < 1e-10);
    }

    #[test]
    fn theorem1_width_hand_value() {
        // (C1/0.5)·(√(2/π) + 3√ln 400)²
        let bracket = 0.797_884_560_802_865_4 + 3.0 * 400f64.ln().sqrt();
        let want = 2.0 * 11.443_480_514_123_287 * bracket * bracket;
        let got = theorem1_width(0.5, 1.0, 20, 0.1).unwrap();
        assert!((got - want).abs() < 1e-8 * want, "{got} vs {want}");
        assert!((got - 1_516.900_106_297_62).abs() < 1e-8);
        assert_eq!(even_ceil(got).unwrap(), 1518);
    }

    #[test]
    fn corollary2_width_hand_value() {
        let got = corollary2_width(0.3, 0.4, 1.0, 20, 0.1).unwrap();
        // C2/(0.16·0.3) · bracket²
        let bracket: f64 = 0.797_884_560_802_865_4 + 3.0 * 400f64.ln().sqrt();
        let want = 366.191_376_451_945_2 / 0.048 * bracket * bracket;
        assert!((got - want).abs() < 1e-6 * want);
        assert!((got - 505_633.368_765_873_4).abs() < 1e-6, "{got}");
    }

    #[test]
    fn proposition3_hand_values() {
        let l = (2.0 / (std::f64::consts::LN_2 * 0.5)).ln();
        assert!((hard_log(0.5).unwrap() - 1.752_807_281_701_555).abs() < 1e-14);
        let s = proposition3_schedule(0.5, 0.4, 1.0).unwrap();
        assert!((s.radius - 5.0 * l).abs() < 1e-12);
        assert_eq!(s.iters, 444);
        let m = proposition3_width(0.5, 0.4, 1.0, 20, 0.1).unwrap();
        let bracket = 2.0 * 2f64.sqrt() / std::f64::consts::PI.sqrt() * l + 3.0 * 400f64.ln().sqrt();
        assert!((m - 625.0 * bracket * bracket).abs() < 1e-9 * m);
        assert!((m - 64_266.258_256_297_37).abs() < 1e-6);
    }

    #[test]
    fn schedules() {
        let s = theorem1_schedule(0.5).unwrap();
        assert_eq!(s.iters, 36);
        assert!((s.eta - 0.5 / 3.0).abs() < 1e-16);
        assert_eq!(s.radius, 1.0);
        assert_eq!(corollary2_schedule(0.3, 0.4).unwrap().iters, 3907);
        assert_eq!(corollary2_schedule(1.0, 1.0).unwrap().iters, 9);
        assert_eq!(theorem1_schedule(1.0).unwrap().iters, 9);
        let e = theorem1_schedule_entropy(0.5, 0.5, 1.0).unwrap();
        assert_eq!(e.iters, 18);
        assert!((e.eta - 1.0 / 3.0).abs() < 1e-16);
        assert!(proposition3_schedule(0.5, 0.4, 1.5).is_err());
    }

    #[test]
    fn capping_preserves_eta_t() {
        let s = Schedule {
            eta: 0.01,
            iters: 1_000_000,
            radius: 1.0,
        };
        let c = cap_iterations(s, 100_000);
        assert_eq!(c.iters, 100_000);
        assert!((c.eta - 0.1).abs() < 1e-15);
        let c = cap_iterations(s, 1000);
        assert_eq!(c.eta, 1.0);
        assert_eq!(cap_iterations(s, 2_000_000), s);
    }

    #[test]
    fn hard_width_exceeds_soft_width_for_small_margins() {
        // at γ ≤ ε the hard-label width dominates once γ is small enough
        for (gamma, eps) in [(0.05, 0.1), (0.02, 0.1), (0.01, 0.3), (0.05, 0.05)] {
            let soft = corollary2_width(eps, gamma, 1.0, 20, 0.1).unwrap();
            let hard = proposition3_width(eps * std::f64::consts::LN_2, gamma, 1.0, 20, 0.1).unwrap();
            assert!(hard > soft, "γ={gamma} ε={eps}: {hard} vs {soft}");
        }
        // not at γ = ε = 0.3
        let soft = corollary2_width(0.3, 0.3, 1.0, 20, 0.1).unwrap();
        let hard = proposition3_width(0.3 * std::f64::consts::LN_2, 0.3, 1.0, 20, 0.1).unwrap();
        assert!(hard < soft);
    }

    #[test]
    fn concentration_bounds() {
        let b = subsample_bound(20, 1024, 0.1).unwrap();
        assert!((b - (2.0 * 400f64.ln() / 1024.0).sqrt()).abs() < 1e-15);
        assert_eq!(subsample_bound(1, 8, 1.0).unwrap(), (2.0 * 2f64.ln() / 8.0).sqrt());
        let s = flip_count_bound(1.0, 1.0, 1024, 10, 0.1).unwrap();
        let want = 2f64.sqrt() * 32.0 / std::f64::consts::PI.sqrt() + 2.0 * (1024.0 * 200f64.ln()).sqrt();
        assert!((s - want).abs() < 1e-10);
        // |S|·B/m with S at its bound equals the W(0) drift bound
        let drift = frozen_drift_bound(1.0, 1.0, 1.0, 1024, 10, 0.1).unwrap();
        assert!((drift - s / 1024.0).abs() < 1e-14);
        assert!(subsample_bound(20, 64, 0.0).is_err());
    }

    #[test]
    fn even_ceiling() {
        assert_eq!(even_ceil(0.0).unwrap(), 2);
        assert_eq!(even_ceil(2.0).unwrap(), 2);
        assert_eq!(even_ceil(2.1).unwrap(), 4);
        assert_eq!(even_ceil(3.0).unwrap(), 4);
        assert!(even_ceil(f64::NAN).is_err());
    }
}
