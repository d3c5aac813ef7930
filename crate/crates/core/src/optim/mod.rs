//! Full-batch projected gradient descent.
//!
//! Each iteration takes `Ŵ_j = W_j − η∇_{W_j}R` and projects every row back
//! onto `‖W_j − W_j(0)‖₂ ≤ B/√m` (no projection when `B = ∞`). The loop
//! records risks, the distance to a reference `W̄`, the frozen-pattern risk
//! at `W̄` and flip counts at every iterate `t = 0..T−1`, before its step.
//!
//! Two engines produce the same trajectory:
//!
//! * [`dense`] stores every row and is parallel over neuron chunks.
//! * [`shared`] groups neurons that share an output sign and their entire
//!   activation history. Such neurons receive identical gradients, so a
//!   group stores one displacement `Δ` and `W_j(t) = W_j(0) + Δ`. Groups are
//!   split the moment their members' patterns diverge. This is exact and
//!   makes very wide students on low-dimensional data affordable.

pub mod dense;
pub mod shared;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::dataio::LabeledDataset;
use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};
use crate::losses::{self, batch_risks, PairCheck, RiskSnapshot};
use crate::model::{self, NetworkParams};
use crate::teacher::{ReferenceWeights, TeacherLabels};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// KL to the teacher's soft labels.
    Soft,
    /// Logistic loss on the hard labels.
    Hard,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Soft => "soft",
            LossKind::Hard => "hard",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(LossKind::Soft),
            "hard" => Ok(LossKind::Hard),
            other => Err(Error::InvalidArgument(format!("unknown loss kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Engine {
    /// Shared displacements when neurons collapse into few groups, dense otherwise.
    #[default]
    Auto,
    Dense,
    Shared,
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Engine::Auto => "auto",
            Engine::Dense => "dense",
            Engine::Shared => "shared",
        })
    }
}

impl FromStr for Engine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Engine::Auto),
            "dense" => Ok(Engine::Dense),
            "shared" => Ok(Engine::Shared),
            other => Err(Error::InvalidArgument(format!("unknown engine {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Allowed negative residual of the per-iteration descent inequality.
    pub descent: f64,
    /// Allowed excess of `‖W_j − W_j(0)‖` over `B/√m`.
    pub membership: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            descent: 1e-8,
            membership: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub eta: f64,
    /// `B`; `f64::INFINITY` disables projection.
    pub radius: f64,
    pub iters: usize,
    pub seed: u64,
    pub record_reference: Option<ReferenceWeights>,
    /// Track `max_i |S_i^t|`.
    pub record_flips: bool,
    pub engine: Engine,
    pub tolerances: Tolerances,
    /// Stop as soon as `Σ_t R(W(t))` exceeds this.
    pub error_budget: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_kind: LossKind::Soft,
            eta: 0.1,
            radius: 1.0,
            iters: 100,
            seed: 0,
            record_reference: None,
            record_flips: false,
            engine: Engine::Auto,
            tolerances: Tolerances::default(),
            error_budget: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // η = 0 is allowed for frozen runs
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidArgument(format!("step size {} must be finite and ≥ 0", self.eta)));
        }
        if !(self.radius > 0.0) {
            return Err(Error::InvalidArgument(format!("radius {} must be positive", self.radius)));
        }
        if self.iters == 0 {
            return Err(Error::InvalidArgument("need at least one iteration".into()));
        }
        if let Some(b) = self.error_budget {
            if !(b >= 0.0) {
                return Err(Error::InvalidArgument(format!("error budget {b} must be ≥ 0")));
            }
        }
        Ok(())
    }

    /// Per-row bound `B/√m`.
    pub fn row_bound(&self, m: usize) -> f64 {
        self.radius / (m as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TraceRow {
    pub t: usize,
    pub risks: RiskSnapshot,
    /// `‖W(t) − W̄‖_F`.
    pub frob_dev: Option<f64>,
    /// `max_i |S_i^t|`.
    pub max_flip: Option<usize>,
    /// Rows clipped by the projection in the step out of `W(t)`.
    pub clipped_rows: usize,
    /// `max_i |f_i^t(W̄)|`.
    pub max_abs_ref_output: Option<f64>,
}

/// Pinsker-sandwich and gradient-bound audit over every `(p_i, μ(f))` pair
/// seen during a run, at both the iterates and the reference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct PairAudit {
    pub checked: u64,
    pub lower_violations: u64,
    pub upper_violations: u64,
    pub grad_violations: u64,
}

impl PairAudit {
    pub fn violations(&self) -> u64 {
        self.lower_violations + self.upper_violations + self.grad_violations
    }

    pub fn merge(&mut self, other: &PairAudit) {
        self.checked += other.checked;
        self.lower_violations += other.lower_violations;
        self.upper_violations += other.upper_violations;
        self.grad_violations += other.grad_violations;
    }

    fn record(&mut self, probs: &[f64], fs: &[f64]) {
        for (&p, &f) in probs.iter().zip(fs) {
            if let Ok(c) = PairCheck::new(p, f) {
                self.checked += 1;
                self.lower_violations += u64::from(!c.lower_holds());
                self.upper_violations += u64::from(!c.upper_holds());
                self.grad_violations += u64::from(!c.grad_holds());
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    pub final_params: NetworkParams,
    /// `‖W(T) − W̄‖_F`.
    pub final_frob_dev: Option<f64>,
    pub pair_audit: PairAudit,
    pub loss_kind: LossKind,
    pub eta: f64,
    pub radius: f64,
    /// Engine that actually ran.
    pub engine: Engine,
    /// The error budget ran out before `iters` iterations.
    pub stopped_early: bool,
}

impl TrainTrace {
    /// `(1/T) Σ_t` of a per-row quantity.
    pub fn mean_over_iterations(&self, f: impl Fn(&TraceRow) -> f64) -> f64 {
        if self.rows.is_empty() {
            return f64::NAN;
        }
        self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_r_kl(&self) -> f64 {
        self.mean_over_iterations(|r| r.risks.r_kl.unwrap_or(f64::NAN))
    }

    pub fn mean_r_hard(&self) -> f64 {
        self.mean_over_iterations(|r| r.risks.r_hard)
    }

    pub fn mean_r_class(&self) -> f64 {
        self.mean_over_iterations(|r| r.risks.r_class)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,r_kl,r_hard,r_class,r_kl_ref,frob_dev,max_flip,clipped_rows")?;
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.16e}"));
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{:.16e},{:.16e},{},{},{},{}",
                r.t,
                opt(r.risks.r_kl),
                r.risks.r_hard,
                r.risks.r_class,
                opt(r.risks.r_kl_at_ref),
                opt(r.frob_dev),
                r.max_flip.map_or_else(|| "nan".to_string(), |v| v.to_string()),
                r.clipped_rows
            )?;
        }
        out.flush()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }
}

/// State handed to observers at each iterate, before its step.
#[derive(Debug, Clone, Copy)]
pub struct StepView<'a> {
    pub t: usize,
    pub weights: &'a Matrix,
    /// `W_j(t)ᵀx_i` at `pre[j·n + i]`.
    pub pre: &'a [f64],
    pub outputs: &'a [f64],
    /// `f_i^t(W̄)` when a reference is recorded.
    pub ref_outputs: Option<&'a [f64]>,
}

/// Projection of `w` onto the ball of radius `bound` around `w0`. A row
/// already inside is returned unchanged.
pub fn project_row(w: &[f64], w0: &[f64], bound: f64) -> Vec<f64> {
    let mut out = w.to_vec();
    project_in_place(&mut out, w0, bound);
    out
}

/// In-place [`project_row`]; returns whether the row was clipped.
#[inline]
pub(crate) fn project_in_place(w: &mut [f64], w0: &[f64], bound: f64) -> bool {
    if bound.is_infinite() {
        return false;
    }
    let dev2: f64 = w.iter().zip(w0).map(|(a, b)| (a - b) * (a - b)).sum();
    let dev = dev2.sqrt();
    if dev <= bound {
        return false;
    }
    let s = bound / dev;
    for (wi, w0i) in w.iter_mut().zip(w0) {
        *wi = w0i + s * (*wi - w0i);
    }
    true
}

/// Descent step followed by row-wise projection. Returns the new parameters
/// and the number of clipped rows.
pub fn pgd_step(params: &NetworkParams, grad: &Matrix, eta: f64, radius: f64) -> Result<(NetworkParams, usize)> {
    if !grad.same_shape(&params.weights) {
        return Err(Error::Shape("gradient shape differs from the weights".into()));
    }
    let d = params.dim();
    if let Some(idx) = grad.as_slice().iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            row: idx / d.max(1),
            col: idx % d.max(1),
        });
    }
    let bound = radius / (params.width() as f64).sqrt();
    let mut w = params.weights.clone();
    let mut clipped = 0;
    for j in 0..params.width() {
        let row = w.row_mut(j);
        for (wk, gk) in row.iter_mut().zip(grad.row(j)) {
            *wk -= eta * gk;
        }
        clipped += usize::from(project_in_place(row, params.init_weights.row(j), bound));
    }
    Ok((params.with_weights(w)?, clipped))
}

/// What the student is fitted to.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Targets<'a> {
    pub kind: LossKind,
    pub ys: &'a [f64],
    pub probs: Option<&'a [f64]>,
}

impl<'a> Targets<'a> {
    pub fn new(kind: LossKind, ds: &'a LabeledDataset, labels: Option<&'a TeacherLabels>) -> Result<Self> {
        let probs = labels.map(|l| l.probs.as_slice());
        if let Some(p) = probs {
            if p.len() != ds.n() {
                return Err(Error::Shape(format!("{} soft labels for {} samples", p.len(), ds.n())));
            }
        }
        if kind == LossKind::Soft && probs.is_none() {
            return Err(Error::InvalidArgument("soft-label training needs teacher labels".into()));
        }
        Ok(Targets { kind, ys: &ds.labels, probs })
    }

    /// `∂ℓ/∂f_i`.
    pub fn output_grads(&self, fs: &[f64]) -> Vec<f64> {
        match self.kind {
            LossKind::Soft => {
                let ps = self.probs.expect("checked in Targets::new");
                ps.iter().zip(fs).map(|(&p, &f)| losses::sigmoid(f) - p).collect()
            }
            LossKind::Hard => self.ys.iter().zip(fs).map(|(&y, &f)| -y * losses::sigmoid(-y * f)).collect(),
        }
    }
}

/// `∇_W R` for the given loss, computed row by row from the definition.
pub fn risk_gradient(
    params: &NetworkParams,
    ds: &LabeledDataset,
    labels: Option<&TeacherLabels>,
    loss_kind: LossKind,
) -> Result<Matrix> {
    if ds.d() != params.dim() {
        return Err(Error::Shape("dataset and network dimensions differ".into()));
    }
    let targets = Targets::new(loss_kind, ds, labels)?;
    let fs = model::forward_batch(params, &ds.inputs)?;
    let gs = targets.output_grads(&fs);
    let n = ds.n() as f64;
    let mut grad = Matrix::zeros(params.width(), params.dim());
    for (i, x) in ds.inputs.iter_rows().enumerate() {
        let gi = model::output_grad(params, x)?;
        for (acc, v) in grad.as_mut_slice().iter_mut().zip(gi.as_slice()) {
            *acc += gs[i] * v / n;
        }
    }
    Ok(grad)
}

/// Runs `cfg.iters` PGD iterations from `params0`.
///
/// `labels` supplies soft labels; it is required for [`LossKind::Soft`] and
/// optional for hard-label runs, where it only adds the KL columns.
pub fn train(
    params0: &NetworkParams,
    ds: &LabeledDataset,
    labels: Option<&TeacherLabels>,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    cfg.validate()?;
    check_inputs(params0, ds, cfg)?;
    let targets = Targets::new(cfg.loss_kind, ds, labels)?;
    match resolve_engine(params0, ds, cfg) {
        Engine::Shared => shared::run(params0, ds, targets, cfg),
        _ => dense::run(params0, ds, targets, cfg, &mut |_| {}),
    }
}

/// Like [`train`] on the dense engine, calling `observer` at every iterate.
pub fn train_observed(
    params0: &NetworkParams,
    ds: &LabeledDataset,
    labels: Option<&TeacherLabels>,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&StepView<'_>),
) -> Result<TrainTrace> {
    cfg.validate()?;
    check_inputs(params0, ds, cfg)?;
    if cfg.engine == Engine::Shared {
        return Err(Error::InvalidArgument("observers need the dense engine".into()));
    }
    let targets = Targets::new(cfg.loss_kind, ds, labels)?;
    dense::run(params0, ds, targets, cfg, &mut observer)
}

fn check_inputs(params0: &NetworkParams, ds: &LabeledDataset, cfg: &TrainConfig) -> Result<()> {
    if ds.d() != params0.dim() {
        return Err(Error::Shape(format!("data dimension {} vs network {}", ds.d(), params0.dim())));
    }
    if !params0.weights.same_shape(&params0.init_weights) || params0.weights.rows() != params0.width() {
        return Err(Error::Shape("network weights inconsistent with its width".into()));
    }
    if let Some(r) = &cfg.record_reference {
        if !r.w_bar.same_shape(&params0.weights) {
            return Err(Error::Shape("reference weights differ in shape from the network".into()));
        }
    }
    Ok(())
}

/// Width below which [`Engine::Auto`] never considers sharing.
pub const SHARED_MIN_WIDTH: usize = 4096;

fn resolve_engine(params0: &NetworkParams, ds: &LabeledDataset, cfg: &TrainConfig) -> Engine {
    match cfg.engine {
        Engine::Dense => Engine::Dense,
        Engine::Shared => Engine::Shared,
        Engine::Auto => {
            let m = params0.width();
            if m < SHARED_MIN_WIDTH || params0.weights != params0.init_weights {
                return Engine::Dense;
            }
            let groups = shared::count_initial_groups(params0, ds);
            if groups * 8 <= m {
                Engine::Shared
            } else {
                Engine::Dense
            }
        }
    }
}

/// Per-iterate bookkeeping common to both engines.
pub(crate) struct Recorder<'a> {
    pub targets: Targets<'a>,
    pub rows: Vec<TraceRow>,
    pub audit: PairAudit,
    cumulative_error: f64,
    budget: Option<f64>,
}

impl<'a> Recorder<'a> {
    pub fn new(targets: Targets<'a>, cfg: &TrainConfig) -> Self {
        Recorder {
            targets,
            rows: Vec::with_capacity(cfg.iters.min(1 << 20)),
            audit: PairAudit::default(),
            cumulative_error: 0.0,
            budget: cfg.error_budget,
        }
    }

    /// Whether the error budget has been exceeded.
    pub fn exhausted(&self) -> bool {
        self.budget.is_some_and(|b| self.cumulative_error > b)
    }

    /// Appends the row for iterate `t`; fails on non-finite outputs or risks.
    pub fn push(
        &mut self,
        t: usize,
        fs: &[f64],
        ref_fs: Option<&[f64]>,
        frob_dev: Option<f64>,
        max_flip: Option<usize>,
    ) -> std::result::Result<(), usize> {
        let finite = fs.iter().all(|f| f.is_finite()) && ref_fs.is_none_or(|r| r.iter().all(|f| f.is_finite()));
        if !finite {
            return Err(t);
        }
        let risks = batch_risks(self.targets.ys, self.targets.probs, fs, ref_fs).map_err(|_| t)?;
        let risk_ok = risks.r_hard.is_finite()
            && risks.r_kl.is_none_or(f64::is_finite)
            && risks.r_kl_at_ref.is_none_or(f64::is_finite);
        if !risk_ok {
            return Err(t);
        }
        self.cumulative_error += risks.r_class;
        if let Some(ps) = self.targets.probs {
            self.audit.record(ps, fs);
            if let Some(r) = ref_fs {
                self.audit.record(ps, r);
            }
        }
        self.rows.push(TraceRow {
            t,
            risks,
            frob_dev,
            max_flip,
            clipped_rows: 0,
            max_abs_ref_output: ref_fs.map(|r| r.iter().fold(0.0, |a: f64, v| a.max(v.abs()))),
        });
        Ok(())
    }

    pub fn set_clipped(&mut self, clipped: usize) {
        if let Some(r) = self.rows.last_mut() {
            r.clipped_rows = clipped;
        }
    }

    pub fn finish(
        self,
        final_params: NetworkParams,
        final_frob_dev: Option<f64>,
        cfg: &TrainConfig,
        engine: Engine,
    ) -> TrainTrace {
        let stopped_early = self.rows.len() < cfg.iters;
        TrainTrace {
            rows: self.rows,
            final_params,
            final_frob_dev,
            pair_audit: self.audit,
            loss_kind: cfg.loss_kind,
            eta: cfg.eta,
            radius: cfg.radius,
            engine,
            stopped_early,
        }
    }
}

/// Largest `‖W_j − W_j(0)‖₂` over rows.
pub fn max_row_deviation(params: &NetworkParams) -> f64 {
    params
        .weights
        .iter_rows()
        .zip(params.init_weights.iter_rows())
        .map(|(w, w0)| {
            let d: Vec<f64> = w.iter().zip(w0).map(|(a, b)| a - b).collect();
            norm(&d)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SynthSpec};
    use crate::linalg::dot;
    use crate::teacher::{build_reference, teacher_logits, TeacherSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn setup(n: usize, d: usize, m: usize, seed: u64) -> (LabeledDataset, TeacherLabels, NetworkParams, TeacherSpec) {
        let (ds, u) = generate_synthetic(&SynthSpec {
            n,
            d,
            target_half_margin: 0.1,
            direction_seed: seed,
            sample_seed: seed + 100,
        })
        .unwrap();
        let spec = TeacherSpec::ClosedFormLinear { u };
        let labels = teacher_logits(&spec, &ds).unwrap();
        let p = model::init_symmetric(m, d, seed + 7).unwrap();
        (ds, labels, p, spec)
    }

    #[test]
    fn projection_examples() {
        let w0 = [1.0, 2.0, 3.0];
        let inside = [1.3, 2.0, 3.0];
        assert_eq!(project_row(&inside, &w0, 0.5), inside.to_vec());
        let out = project_row(&[2.0, 2.0, 3.0], &w0, 0.5);
        assert_eq!(out, vec![1.5, 2.0, 3.0]);
        assert_eq!(project_row(&out, &w0, 0.5), out);
        assert_eq!(project_row(&[9.0, 9.0, 9.0], &w0, f64::INFINITY), vec![9.0; 3]);
    }

    #[test]
    fn projection_is_optimal_against_sampled_feasible_points() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let w0: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let w: Vec<f64> = (0..3).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let bound: f64 = rng.random_range(0.05..1.5);
            let p = project_row(&w, &w0, bound);
            let dp: f64 = p.iter().zip(&w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            // brute-force oracle: feasible points on a grid over the ball
            for _ in 0..200 {
                let dir: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
                let r = bound * rng.random::<f64>().cbrt() / norm(&dir);
                let v: Vec<f64> = w0.iter().zip(&dir).map(|(a, b)| a + r * b).collect();
                let dv: f64 = v.iter().zip(&w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                assert!(dp <= dv + 1e-12);
            }
        }
    }

    #[test]
    fn pgd_step_hand_example() {
        // m = 1 is outside the symmetric family but fine for a single step
        let p = NetworkParams {
            out_signs: vec![1.0],
            weights: Matrix::from_vec(1, 1, vec![0.5]).unwrap(),
            init_weights: Matrix::from_vec(1, 1, vec![0.2]).unwrap(),
        };
        let g = Matrix::from_vec(1, 1, vec![-2.0]).unwrap();
        let (q, clipped) = pgd_step(&p, &g, 0.1, 1.0).unwrap();
        // 0.5 + 0.2 = 0.7, deviation 0.5 ≤ 1
        assert!((q.weights.as_slice()[0] - 0.7).abs() < 1e-15);
        assert_eq!(clipped, 0);
        let (q, clipped) = pgd_step(&p, &g, 1.0, 1.0).unwrap();
        // 0.5 + 2 = 2.5, deviation 2.3 → clipped to 0.2 + 1
        assert!((q.weights.as_slice()[0] - 1.2).abs() < 1e-15);
        assert_eq!(clipped, 1);
        let zero = Matrix::zeros(1, 1);
        assert_eq!(pgd_step(&p, &zero, 0.3, 1.0).unwrap().0, p);
        let bad = Matrix::from_vec(1, 1, vec![f64::NAN]).unwrap();
        assert!(matches!(pgd_step(&p, &bad, 0.1, 1.0), Err(Error::NonFiniteGradient { row: 0, col: 0 })));
    }

    #[test]
    fn gradient_vanishes_at_matching_soft_labels() {
        let (ds, _, p, _) = setup(6, 4, 8, 1);
        let mut w = p.weights.clone();
        for (k, v) in w.as_mut_slice().iter_mut().enumerate() {
            *v += 0.1 * ((k as f64) * 0.7).sin();
        }
        let p = p.with_weights(w).unwrap();
        let fs = model::forward_batch(&p, &ds.inputs).unwrap();
        let spec = TeacherSpec::WideNetLogits {
            logits: fs,
            note: String::new(),
        };
        let l = teacher_logits(&spec, &ds).unwrap();
        let g = risk_gradient(&p, &ds, Some(&l), LossKind::Soft).unwrap();
        assert!(g.frobenius_norm() < 1e-15);
    }

    #[test]
    fn risk_gradient_matches_finite_difference() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let h = 1e-6;
        let mut done = 0;
        while done < 10 {
            let (ds, labels, p, _) = setup(5, 3, 6, rng.random_range(0..1000));
            let mut w = p.weights.clone();
            for v in w.as_mut_slice() {
                *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
            let p = p.with_weights(w).unwrap();
            let near_kink = p
                .weights
                .iter_rows()
                .any(|r| ds.inputs.iter_rows().any(|x| dot(r, x).abs() < 1e-4));
            if near_kink {
                continue;
            }
            for kind in [LossKind::Soft, LossKind::Hard] {
                let g = risk_gradient(&p, &ds, Some(&labels), kind).unwrap();
                let risk = |q: &NetworkParams| {
                    let fs = model::forward_batch(q, &ds.inputs).unwrap();
                    let s = batch_risks(&ds.labels, Some(&labels.probs), &fs, None).unwrap();
                    match kind {
                        LossKind::Soft => s.r_kl.unwrap(),
                        LossKind::Hard => s.r_hard,
                    }
                };
                for idx in 0..g.as_slice().len() {
                    let mut a = p.clone();
                    a.weights.as_mut_slice()[idx] += h;
                    let mut b = p.clone();
                    b.weights.as_mut_slice()[idx] -= h;
                    let fd = (risk(&a) - risk(&b)) / (2.0 * h);
                    let an = g.as_slice()[idx];
                    assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-4), "{kind}: {fd} vs {an}");
                }
            }
            done += 1;
        }
    }

    #[test]
    fn frozen_run_keeps_weights_and_reports_initial_risk() {
        let (ds, labels, p, _) = setup(8, 4, 16, 2);
        let cfg = TrainConfig {
            eta: 0.0,
            iters: 1,
            ..TrainConfig::default()
        };
        let tr = train(&p, &ds, Some(&labels), &cfg).unwrap();
        assert_eq!(tr.rows.len(), 1);
        assert_eq!(tr.final_params.weights, p.weights);
        let expected = labels.probs.iter().map(|&q| losses::kl(q, 0.0)).sum::<f64>() / ds.n() as f64;
        assert!((tr.rows[0].risks.r_kl.unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn membership_and_determinism() {
        let (ds, labels, p, spec) = setup(12, 5, 32, 3);
        let cfg = TrainConfig {
            eta: 0.5,
            radius: 0.7,
            iters: 60,
            record_reference: Some(build_reference(&p, &spec, 1.0).unwrap()),
            record_flips: true,
            ..TrainConfig::default()
        };
        let a = train(&p, &ds, Some(&labels), &cfg).unwrap();
        let b = train(&p, &ds, Some(&labels), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 60);
        assert!(max_row_deviation(&a.final_params) <= cfg.row_bound(32) + 1e-12);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,r_kl,r_hard,r_class,r_kl_ref,frob_dev,max_flip,clipped_rows\n"));
        assert_eq!(text.lines().count(), 61);
    }

    #[test]
    fn soft_needs_labels() {
        let (ds, _, p, _) = setup(4, 3, 4, 4);
        assert!(train(&p, &ds, None, &TrainConfig::default()).is_err());
        let bad = TrainConfig {
            iters: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn observer_sees_every_iterate() {
        let (ds, labels, p, _) = setup(4, 3, 8, 5);
        let cfg = TrainConfig {
            iters: 7,
            ..TrainConfig::default()
        };
        let mut seen = Vec::new();
        let tr = train_observed(&p, &ds, Some(&labels), &cfg, |v| {
            assert_eq!(v.pre.len(), 8 * 4);
            seen.push((v.t, v.outputs.to_vec()));
        })
        .unwrap();
        assert_eq!(seen.len(), 7);
        for ((t, fs), row) in seen.iter().zip(&tr.rows) {
            assert_eq!(*t, row.t);
            let s = batch_risks(&ds.labels, Some(&labels.probs), fs, None).unwrap();
            assert_eq!(s.r_kl, row.risks.r_kl);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn projection_is_idempotent_and_feasible(
            w in proptest::collection::vec(-5.0f64..5.0, 4),
            w0 in proptest::collection::vec(-5.0f64..5.0, 4),
            bound in 1e-6f64..3.0,
        ) {
            let p = project_row(&w, &w0, bound);
            let dev: Vec<f64> = p.iter().zip(&w0).map(|(a, b)| a - b).collect();
            prop_assert!(norm(&dev) <= bound * (1.0 + 1e-12));
            let q = project_row(&p, &w0, bound);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }

        #[test]
        fn risk_gradient_norm_at_most_one(seed in 0u64..500, scale in 0.0f64..3.0) {
            let (ds, labels, p, _) = setup(6, 4, 10, seed);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut w = p.weights.clone();
            for v in w.as_mut_slice() { *v += scale * rng.sample::<f64, _>(StandardNormal); }
            let p = p.with_weights(w).unwrap();
            for kind in [LossKind::Soft, LossKind::Hard] {
                let g = risk_gradient(&p, &ds, Some(&labels), kind).unwrap();
                prop_assert!(g.frobenius_norm() <= 1.0);
            }
        }
    }
}
