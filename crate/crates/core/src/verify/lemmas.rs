//! Supporting lemmas: initial-feature approximation of the teacher, the
//! per-iteration descent inequality and the flip-set bounds.

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::formulas::{flip_count_bound, frozen_drift_bound, subsample_bound};
use super::{BoundReport, TrialOutcome};
use crate::dataio::{generate_synthetic, LabeledDataset, SynthSpec};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::losses::mean_entropy;
use crate::model::{forward_frozen, init_symmetric, ActivationPattern, NetworkParams};
use crate::optim::{self, Engine, LossKind, TrainConfig, TrainTrace};
use crate::par;
use crate::rng::{child_seed, substream, Stream};
use crate::teacher::{build_reference, teacher_logits, ReferenceWeights, TeacherLabels, TeacherSpec};

/// `max_i |f_i^0(U) − z_i|` for one initialisation.
pub fn subsample_deviation(params: &NetworkParams, ds: &LabeledDataset, spec: &TeacherSpec, logits: &[f64]) -> Result<f64> {
    let r = build_reference(params, spec, 1.0)?;
    let pattern = ActivationPattern::of(&params.init_weights, &ds.inputs)?;
    let mut worst = 0.0f64;
    for (i, (x, z)) in ds.inputs.iter_rows().zip(logits).enumerate() {
        let f = forward_frozen(&pattern, i, &r.u, &params.out_signs, x)?;
        worst = worst.max((f - z).abs());
    }
    Ok(worst)
}

/// Fresh symmetric initialisations on a fixed dataset; a trial violates when
/// some sample has `|f_i^0(U) − z_i| > √(2 ln(2n/δ)/m)`.
pub fn check_subsample(
    ds: &LabeledDataset,
    spec: &TeacherSpec,
    m: usize,
    delta: f64,
    trials: usize,
    seed: u64,
) -> Result<BoundReport> {
    if !matches!(spec, TeacherSpec::ClosedFormLinear { .. }) {
        return Err(Error::InvalidArgument("the sub-sample check needs the closed-form teacher".into()));
    }
    let labels = teacher_logits(spec, ds)?;
    let bound = subsample_bound(ds.n(), m, delta)?;
    let devs = par::map_range(trials, |t| {
        let params = init_symmetric(m, ds.d(), child_seed(seed, Stream::Trial, t as u64))?;
        subsample_deviation(&params, ds, spec, &labels.logits)
    });
    let outcomes = devs
        .into_iter()
        .map(|d| {
            d.map(|dev| TrialOutcome {
                violated: dev > bound,
                slack: bound - dev,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BoundReport::from_trials(format!("subsample m={m} n={} delta={delta}", ds.n()), &outcomes, delta, false)
        .with_detail("bound", bound))
}

/// Per-iteration and telescoped descent inequalities along `trace`, which
/// must have been recorded against `reference`. `entropy` is `H`, the mean
/// binary entropy of the soft labels; `tolerance` bounds the admissible
/// negative residual.
pub fn check_descent(
    trace: &TrainTrace,
    reference: &ReferenceWeights,
    params0: &NetworkParams,
    entropy: f64,
    tolerance: f64,
) -> Result<BoundReport> {
    if trace.stopped_early {
        return Err(Error::InvalidArgument("the descent check needs a complete trace".into()));
    }
    let missing = || Error::InvalidArgument("trace lacks the KL, reference-risk or distance columns".into());
    let t_len = trace.rows.len();
    let mut risk = Vec::with_capacity(t_len);
    let mut ref_risk = Vec::with_capacity(t_len);
    let mut dev = Vec::with_capacity(t_len + 1);
    for r in &trace.rows {
        risk.push(r.risks.r_kl.ok_or_else(missing)?);
        ref_risk.push(r.risks.r_kl_at_ref.ok_or_else(missing)?);
        dev.push(r.frob_dev.ok_or_else(missing)?);
    }
    dev.push(trace.final_frob_dev.ok_or_else(missing)?);
    if t_len == 0 {
        return Err(missing());
    }

    let m = params0.width();
    let radius = trace.radius;
    if radius.is_finite() {
        let bound = radius / (m as f64).sqrt();
        for j in 0..m {
            let off: f64 = reference
                .w_bar
                .row(j)
                .iter()
                .zip(params0.init_weights.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if off > bound * (1.0 + 1e-12) {
                return Err(Error::InvalidArgument(format!(
                    "reference row {j} lies {off} from W(0), outside the feasible radius {bound}"
                )));
            }
        }
    }

    let eta = trace.eta;
    let lead = 2.0 * eta - eta * eta;
    let mut outcomes = Vec::with_capacity(t_len + 2);
    for t in 0..t_len {
        let rhs = dev[t] * dev[t] - dev[t + 1] * dev[t + 1] + 2.0 * eta * ref_risk[t] + eta * eta * entropy;
        let residual = rhs - lead * risk[t];
        outcomes.push(TrialOutcome {
            violated: residual < -tolerance,
            slack: residual,
        });
    }
    let tf = t_len as f64;
    let mean_risk = risk.iter().sum::<f64>() / tf;
    let mean_ref = ref_risk.iter().sum::<f64>() / tf;
    let telescoped = (dev[0] * dev[0] - dev[t_len] * dev[t_len]) / tf + 2.0 * eta * mean_ref + eta * eta * entropy
        - lead * mean_risk;
    outcomes.push(TrialOutcome {
        violated: telescoped < -tolerance,
        slack: telescoped,
    });
    let mut report_details = vec![("telescoped_slack", telescoped), ("mean_r_kl", mean_risk), ("mean_r_kl_ref", mean_ref)];
    if eta > 0.0 && eta <= 1.0 {
        let b2 = if radius.is_finite() { radius * radius } else { dev[0] * dev[0] };
        let simplified = b2 / (eta * tf) + 2.0 * mean_ref + eta * entropy - mean_risk;
        outcomes.push(TrialOutcome {
            violated: simplified < -tolerance,
            slack: simplified,
        });
        report_details.push(("simplified_slack", simplified));
    }
    let mut report = BoundReport::from_trials(format!("descent eta={eta} T={t_len}"), &outcomes, 0.0, true);
    for (k, v) in report_details {
        report = report.with_detail(k, v);
    }
    Ok(report)
}

/// A random soft-label training instance for the descent check.
#[derive(Debug, Clone, PartialEq)]
pub struct DescentInstance {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub iters: usize,
    pub eta: f64,
    pub radius: f64,
    pub seed: u64,
    /// Random Monte Carlo teacher instead of the closed-form one.
    pub mc_teacher: bool,
}

impl Default for DescentInstance {
    fn default() -> Self {
        DescentInstance {
            n: 32,
            d: 10,
            m: 64,
            iters: 200,
            eta: 0.1,
            radius: 1.0,
            seed: 0,
            mc_teacher: true,
        }
    }
}

const MC_KEYS: usize = 256;

/// Random teacher responses: Gaussian directions with uniform norms in `[0, 1]`.
pub fn random_mc_teacher(d: usize, keys: usize, seed: u64) -> Result<TeacherSpec> {
    let mut rng = substream(seed, Stream::McTeacher, u64::MAX >> 32);
    let mut values = Matrix::zeros(keys, d);
    for k in 0..keys {
        let row = values.row_mut(k);
        for v in row.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let r: f64 = rng.random();
        let s = r / crate::linalg::norm(row);
        for v in row.iter_mut() {
            *v *= s * (1.0 - f64::EPSILON);
        }
    }
    TeacherSpec::monte_carlo(values, seed)
}

/// Builds data, teacher and initialisation from `inst.seed`, trains with the
/// reference `W̄ = W(0) + min(1, B)·U` and checks the descent inequalities.
pub fn descent_instance(inst: &DescentInstance) -> Result<(TrainTrace, BoundReport)> {
    let (ds, u) = generate_synthetic(&SynthSpec {
        n: inst.n,
        d: inst.d,
        target_half_margin: 0.05,
        direction_seed: child_seed(inst.seed, Stream::Direction, 0),
        sample_seed: child_seed(inst.seed, Stream::Samples, 0),
    })?;
    let spec = if inst.mc_teacher {
        random_mc_teacher(inst.d, MC_KEYS, inst.seed)?
    } else {
        TeacherSpec::ClosedFormLinear { u }
    };
    let labels = teacher_logits(&spec, &ds)?;
    let params = init_symmetric(inst.m, inst.d, child_seed(inst.seed, Stream::Init, 0))?;
    let reference = build_reference(&params, &spec, inst.radius.min(1.0))?;
    let cfg = TrainConfig {
        loss_kind: LossKind::Soft,
        eta: inst.eta,
        radius: inst.radius,
        iters: inst.iters,
        seed: inst.seed,
        record_reference: Some(reference.clone()),
        engine: Engine::Dense,
        ..TrainConfig::default()
    };
    let trace = optim::train(&params, &ds, Some(&labels), &cfg)?;
    let h = mean_entropy(&labels.probs)?;
    let report = check_descent(&trace, &reference, &params, h, cfg.tolerances.descent)?;
    Ok((trace, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlipCheckConfig {
    pub m: usize,
    pub radius: f64,
    pub delta: f64,
    pub trials: usize,
    pub iters: usize,
    pub eta: f64,
    pub loss_kind: LossKind,
    pub seed: u64,
}

impl Default for FlipCheckConfig {
    fn default() -> Self {
        FlipCheckConfig {
            m: 1024,
            radius: 1.0,
            delta: 0.1,
            trials: 200,
            iters: 100,
            eta: 1.0,
            loss_kind: LossKind::Soft,
            seed: 0,
        }
    }
}

struct FlipTrial {
    violated: bool,
    flip_slack: f64,
    worst_ratio: f64,
    max_flips: usize,
}

/// Runs PGD from fresh initialisations and checks, at every iterate and
/// sample, the flip-set cardinality bound and the frozen-pattern drift
/// bounds at `W(0)` and at `U` (rows of norm `≤ 1/√m`). A trial violates
/// when any of them fails anywhere.
pub fn check_flip_bound(
    ds: &LabeledDataset,
    spec: &TeacherSpec,
    labels: &TeacherLabels,
    cfg: &FlipCheckConfig,
) -> Result<BoundReport> {
    let (n, m) = (ds.n(), cfg.m);
    let c = ds.norm_floor;
    let flip_bound = flip_count_bound(cfg.radius, c, m, n, cfg.delta)?;
    let drift_w0 = frozen_drift_bound(cfg.radius, cfg.radius, c, m, n, cfg.delta)?;
    let drift_u = frozen_drift_bound(cfg.radius, 1.0, c, m, n, cfg.delta)?;
    let results = par::map_range(cfg.trials, |t| {
        flip_trial(ds, spec, labels, cfg, t as u64, flip_bound, drift_w0, drift_u)
    });
    let mut outcomes = Vec::with_capacity(cfg.trials);
    let mut worst_ratio = 0.0f64;
    let mut max_flips = 0usize;
    for r in results {
        let r = r?;
        worst_ratio = worst_ratio.max(r.worst_ratio);
        max_flips = max_flips.max(r.max_flips);
        outcomes.push(TrialOutcome {
            violated: r.violated,
            slack: r.flip_slack,
        });
    }
    Ok(BoundReport::from_trials(
        format!("flips m={m} n={n} B={} delta={} T={}", cfg.radius, cfg.delta, cfg.iters),
        &outcomes,
        cfg.delta,
        false,
    )
    .with_detail("flip_bound", flip_bound)
    .with_detail("drift_w0_bound", drift_w0)
    .with_detail("drift_u_bound", drift_u)
    .with_detail("max_flips", max_flips as f64)
    .with_detail("worst_observed_over_bound", worst_ratio))
}

#[allow(clippy::too_many_arguments)]
fn flip_trial(
    ds: &LabeledDataset,
    spec: &TeacherSpec,
    labels: &TeacherLabels,
    cfg: &FlipCheckConfig,
    trial: u64,
    flip_bound: f64,
    drift_w0: f64,
    drift_u: f64,
) -> Result<FlipTrial> {
    let (n, m) = (ds.n(), cfg.m);
    let params = init_symmetric(m, ds.d(), child_seed(cfg.seed, Stream::Trial, trial))?;
    let u = build_reference(&params, spec, 1.0)?.u;
    let neuron_major = |w: &Matrix| {
        let mut out = vec![0.0; m * n];
        for (j, row) in w.iter_rows().enumerate() {
            for (i, x) in ds.inputs.iter_rows().enumerate() {
                out[j * n + i] = dot(row, x);
            }
        }
        out
    };
    let pre0 = neuron_major(&params.init_weights);
    let pre_u = neuron_major(&u);
    let signs = &params.out_signs;
    let inv_sqrt_m = 1.0 / (m as f64).sqrt();
    let frozen = |pre_t: &[f64], eval: &[f64]| -> Vec<f64> {
        let mut f = vec![0.0; n];
        for j in 0..m {
            let a = signs[j];
            for i in 0..n {
                if pre_t[j * n + i] >= 0.0 {
                    f[i] += a * eval[j * n + i];
                }
            }
        }
        f.iter_mut().for_each(|v| *v *= inv_sqrt_m);
        f
    };
    let f0_u = frozen(&pre0, &pre_u);

    let mut st = FlipTrial {
        violated: false,
        flip_slack: f64::INFINITY,
        worst_ratio: 0.0,
        max_flips: 0,
    };
    let mut f_w0: Option<Vec<f64>> = None;
    let train_cfg = TrainConfig {
        loss_kind: cfg.loss_kind,
        eta: cfg.eta,
        radius: cfg.radius,
        iters: cfg.iters,
        seed: trial,
        engine: Engine::Dense,
        ..TrainConfig::default()
    };
    optim::train_observed(&params, ds, Some(labels), &train_cfg, |view| {
        let base = f_w0.get_or_insert_with(|| view.outputs.to_vec());
        let ft_w0 = frozen(view.pre, &pre0);
        let ft_u = frozen(view.pre, &pre_u);
        for i in 0..n {
            let flips = (0..m)
                .filter(|&j| (view.pre[j * n + i] > 0.0) != (pre0[j * n + i] > 0.0))
                .count();
            let dw = (ft_w0[i] - base[i]).abs();
            let du = (ft_u[i] - f0_u[i]).abs();
            st.max_flips = st.max_flips.max(flips);
            st.flip_slack = st.flip_slack.min(flip_bound - flips as f64);
            st.worst_ratio = st
                .worst_ratio
                .max(flips as f64 / flip_bound)
                .max(dw / drift_w0)
                .max(du / drift_u);
            if flips as f64 > flip_bound || dw > drift_w0 || du > drift_u {
                st.violated = true;
            }
        }
    })?;
    Ok(st)
}
