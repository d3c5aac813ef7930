//! Numerical checks of the bounds: Monte Carlo tests of the probabilistic
//! lemmas, exact checks of the proved inequalities, end-to-end runs at the
//! prescribed widths and schedules, the minimal-width sweep and the MNIST
//! replication.

pub mod endtoend;
pub mod formulas;
pub mod lemmas;
pub mod sweep;
pub mod table1;

use std::fmt;
use std::io::Write;
use std::path::Path;

use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::optim::PairAudit;

pub use endtoend::{run_corollary2, run_proposition3, run_theorem1, EndToEnd, EndToEndConfig, SeedOutcome};
pub use lemmas::{check_descent, check_flip_bound, check_subsample, descent_instance, DescentInstance, FlipCheckConfig};
pub use sweep::{sweep_min_neurons, SweepConfig, SweepResult, SweepRow};
pub use table1::{replicate_table1, Table1Config, Table1Result};

/// Confidence level of [`BoundReport::rate_upper`].
pub const CONFIDENCE: f64 = 0.95;

/// Outcome of one repeated check.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BoundReport {
    pub check_name: String,
    pub trials: usize,
    pub violations: usize,
    pub empirical_rate: f64,
    /// `δ`, `3δ`, or 0 for proved inequalities.
    pub allowed_rate: f64,
    /// One-sided Clopper–Pearson upper limit on the violation probability.
    pub rate_upper: f64,
    /// Min and median over trials of `bound − observed`.
    pub slack_min: f64,
    pub slack_median: f64,
    pub pass: bool,
    /// A proved inequality: any violation is a defect rather than chance.
    pub deterministic: bool,
    /// Extra named quantities, in insertion order.
    pub details: Vec<(String, f64)>,
}

/// One trial: was the bound violated, and by how much did it hold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialOutcome {
    pub violated: bool,
    pub slack: f64,
}

impl BoundReport {
    pub fn from_trials(
        check_name: impl Into<String>,
        outcomes: &[TrialOutcome],
        allowed_rate: f64,
        deterministic: bool,
    ) -> Self {
        let trials = outcomes.len();
        let violations = outcomes.iter().filter(|o| o.violated).count();
        let empirical_rate = if trials == 0 { 0.0 } else { violations as f64 / trials as f64 };
        let mut slacks: Vec<f64> = outcomes.iter().map(|o| o.slack).collect();
        slacks.sort_by(f64::total_cmp);
        let (slack_min, slack_median) = if slacks.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let k = slacks.len();
            let med = if k % 2 == 1 {
                slacks[k / 2]
            } else {
                0.5 * (slacks[k / 2 - 1] + slacks[k / 2])
            };
            (slacks[0], med)
        };
        let pass = if deterministic {
            violations == 0
        } else {
            empirical_rate <= allowed_rate
        };
        BoundReport {
            check_name: check_name.into(),
            trials,
            violations,
            empirical_rate,
            allowed_rate,
            rate_upper: clopper_pearson_upper(violations, trials, CONFIDENCE),
            slack_min,
            slack_median,
            pass,
            deterministic,
            details: Vec::new(),
        }
    }

    /// A proved inequality checked `trials` times, summarised by counts and
    /// the worst slack.
    pub fn from_counts(check_name: impl Into<String>, trials: usize, violations: usize, slack_min: f64) -> Self {
        BoundReport {
            check_name: check_name.into(),
            trials,
            violations,
            empirical_rate: if trials == 0 { 0.0 } else { violations as f64 / trials as f64 },
            allowed_rate: 0.0,
            rate_upper: clopper_pearson_upper(violations, trials, CONFIDENCE),
            slack_min,
            slack_median: f64::NAN,
            pass: violations == 0,
            deterministic: true,
            details: Vec::new(),
        }
    }

    /// Pinsker-sandwich and gradient-bound audit as a proved-inequality report.
    pub fn from_pair_audit(check_name: impl Into<String>, audit: &PairAudit) -> Self {
        BoundReport::from_counts(check_name, audit.checked as usize, audit.violations() as usize, f64::NAN)
            .with_detail("lower_violations", audit.lower_violations as f64)
            .with_detail("upper_violations", audit.upper_violations as f64)
            .with_detail("grad_violations", audit.grad_violations as f64)
    }

    pub fn with_detail(mut self, name: impl Into<String>, value: f64) -> Self {
        self.details.push((name.into(), value));
        self
    }

    pub fn detail(&self, name: &str) -> Option<f64> {
        self.details.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }

    /// Also requires the upper confidence limit to stay below the allowed rate.
    pub fn passes_with_confidence(&self) -> bool {
        self.pass && self.rate_upper <= self.allowed_rate
    }
}

impl fmt::Display for BoundReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {}/{} violations (rate {:.4}, {:.0}% upper {:.4}, allowed {:.4}), slack min {:.4e} median {:.4e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.check_name,
            self.violations,
            self.trials,
            self.empirical_rate,
            CONFIDENCE * 100.0,
            self.rate_upper,
            self.allowed_rate,
            self.slack_min,
            self.slack_median,
        )?;
        if self.deterministic {
            f.write_str(" [proved]")?;
        }
        for (k, v) in &self.details {
            write!(f, " {k}={v:.6e}")?;
        }
        Ok(())
    }
}

/// Upper limit `u` with `P(Bin(trials, u) ≤ violations) = 1 − confidence`.
pub fn clopper_pearson_upper(violations: usize, trials: usize, confidence: f64) -> f64 {
    if trials == 0 || violations >= trials {
        return 1.0;
    }
    if violations == 0 {
        return -((1.0 - confidence).ln() / trials as f64).exp_m1();
    }
    // the Beta(k+1, n−k) quantile, by bisection on its CDF
    let (a, b) = (violations as f64 + 1.0, (trials - violations) as f64);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if beta_reg(a, b, mid) < confidence {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

pub const REPORT_CSV_HEADER: &str =
    "check_name,trials,violations,empirical_rate,allowed_rate,rate_upper,slack_min,slack_median,pass,deterministic";

pub fn write_reports_csv<W: Write>(reports: &[BoundReport], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{REPORT_CSV_HEADER}")?;
    for r in reports {
        writeln!(
            out,
            "{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{}",
            r.check_name,
            r.trials,
            r.violations,
            r.empirical_rate,
            r.allowed_rate,
            r.rate_upper,
            r.slack_min,
            r.slack_median,
            r.pass,
            r.deterministic
        )?;
    }
    out.flush()
}

pub fn save_reports_csv(reports: &[BoundReport], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_reports_csv(reports, std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
}
