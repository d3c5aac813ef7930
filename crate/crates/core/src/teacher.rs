//! Soft labels from a kernel teacher and the reference weights built from it.
//!
//! A teacher is a bounded map `v: ℝ^d → ℝ^d`; its logit on `x_i` is
//! `z_i = E_{g∼N(0,I)}[1(gᵀx_i > 0)·x_iᵀv(g)]` and the soft label is
//! `p_i = μ(z_i)`. Against a student initialised at `W(0)` the reference
//! weights are `U_j = (a_j/√m)·v(W_j(0))` and `W̄ = W(0) + scale·U`.

use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::dataio::LabeledDataset;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::losses::sigmoid;
use crate::model::NetworkParams;
use crate::optim::{self, LossKind, TrainConfig};
use crate::rng::{substream, Stream};

/// Minimum number of Monte Carlo directions for a usable teacher.
pub const MIN_MC_SAMPLES: usize = 100;

const NORM_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum TeacherSpec {
    /// Constant `v ≡ u` with `‖u‖₂ = 1`; then `z_i = x_iᵀu/2`.
    ClosedFormLinear { u: Vec<f64> },
    /// Piecewise-constant `v`: row `k` of `values` is the response at the
    /// Gaussian direction `keys[k]`, and `v(z)` is the response of the
    /// nearest key.
    MonteCarloRkhs { keys: Matrix, values: Matrix, seed: u64 },
    /// Logits computed elsewhere, e.g. by a wide network.
    WideNetLogits { logits: Vec<f64>, note: String },
}

impl TeacherSpec {
    /// Draws `values.rows()` Gaussian keys from `seed` and attaches `values`.
    pub fn monte_carlo(values: Matrix, seed: u64) -> Result<Self> {
        let (k, d) = (values.rows(), values.cols());
        let mut keys = Matrix::zeros(k, d);
        for (r, row) in keys.as_mut_slice().chunks_mut(d.max(1)).enumerate() {
            let mut rng = substream(seed, Stream::McTeacher, r as u64);
            for v in row {
                *v = rng.sample(StandardNormal);
            }
        }
        let spec = TeacherSpec::MonteCarloRkhs { keys, values, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TeacherSpec::ClosedFormLinear { u } => {
                let r = norm(u);
                if (r - 1.0).abs() > NORM_SLACK {
                    return Err(Error::Teacher(format!("direction has norm {r}, expected 1")));
                }
            }
            TeacherSpec::MonteCarloRkhs { keys, values, .. } => {
                if !keys.same_shape(values) {
                    return Err(Error::Shape("teacher keys and responses differ in shape".into()));
                }
                if values.rows() < MIN_MC_SAMPLES {
                    return Err(Error::Teacher(format!(
                        "{} Monte Carlo directions is too coarse (need at least {MIN_MC_SAMPLES})",
                        values.rows()
                    )));
                }
                if let Some((k, r)) = values
                    .iter_rows()
                    .map(norm)
                    .enumerate()
                    .find(|(_, r)| *r > 1.0 + NORM_SLACK)
                {
                    return Err(Error::Teacher(format!("response {k} has norm {r} > 1")));
                }
            }
            TeacherSpec::WideNetLogits { logits, .. } => {
                if let Some(z) = logits.iter().find(|z| !z.is_finite()) {
                    return Err(Error::Teacher(format!("non-finite teacher logit {z}")));
                }
            }
        }
        Ok(())
    }

    /// `v(z)`; `None` for pass-through logits.
    pub fn response(&self, z: &[f64]) -> Option<Vec<f64>> {
        match self {
            TeacherSpec::ClosedFormLinear { u } => Some(u.clone()),
            TeacherSpec::MonteCarloRkhs { keys, values, .. } => {
                let k = nearest_row(keys, z);
                Some(values.row(k).to_vec())
            }
            TeacherSpec::WideNetLogits { .. } => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            TeacherSpec::ClosedFormLinear { .. } => "closed-form",
            TeacherSpec::MonteCarloRkhs { .. } => "mc",
            TeacherSpec::WideNetLogits { .. } => "widenet",
        }
    }
}

fn nearest_row(m: &Matrix, z: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, row) in m.iter_rows().enumerate() {
        let d2: f64 = row.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 < best.0 {
            best = (d2, k);
        }
    }
    best.1
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherLabels {
    /// `z_i`.
    pub logits: Vec<f64>,
    /// `p_i = μ(z_i)`.
    pub probs: Vec<f64>,
    /// `min_i y_i z_i`.
    pub margin: f64,
    /// Per-sample standard errors of Monte Carlo logits.
    pub std_errors: Option<Vec<f64>>,
    pub spec: TeacherSpec,
}

impl TeacherLabels {
    /// The margin clamped to at most 1, or `None` when it is not positive.
    pub fn bound_margin(&self) -> Option<f64> {
        (self.margin > 0.0).then(|| self.margin.min(1.0))
    }
}

/// `min_i y_i z_i`.
pub fn estimate_margin(labels: &[f64], logits: &[f64]) -> f64 {
    labels
        .iter()
        .zip(logits)
        .map(|(y, z)| y * z)
        .fold(f64::INFINITY, f64::min)
}

/// Teacher logits, soft labels and margin on `ds`.
pub fn teacher_logits(spec: &TeacherSpec, ds: &LabeledDataset) -> Result<TeacherLabels> {
    spec.validate()?;
    let (logits, std_errors) = match spec {
        TeacherSpec::ClosedFormLinear { u } => {
            if u.len() != ds.d() {
                return Err(Error::Shape(format!("teacher direction has {} entries, data {}", u.len(), ds.d())));
            }
            (ds.inputs.iter_rows().map(|x| dot(x, u) / 2.0).collect(), None)
        }
        TeacherSpec::MonteCarloRkhs { keys, values, .. } => {
            if keys.cols() != ds.d() {
                return Err(Error::Shape("teacher dimension differs from data".into()));
            }
            let per_sample = crate::par::map_range(ds.n(), |i| mc_logit(keys, values, ds.inputs.row(i)));
            let (z, se): (Vec<f64>, Vec<f64>) = per_sample.into_iter().unzip();
            (z, Some(se))
        }
        TeacherSpec::WideNetLogits { logits, .. } => {
            if logits.len() != ds.n() {
                return Err(Error::Shape(format!("{} teacher logits for {} samples", logits.len(), ds.n())));
            }
            (logits.clone(), None)
        }
    };
    labels_from_logits(spec.clone(), logits, std_errors, &ds.labels)
}

fn labels_from_logits(
    spec: TeacherSpec,
    logits: Vec<f64>,
    std_errors: Option<Vec<f64>>,
    ys: &[f64],
) -> Result<TeacherLabels> {
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    if let Some(&p) = probs.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::Probability(p));
    }
    let margin = estimate_margin(ys, &logits);
    if margin <= 0.0 {
        log::warn!("teacher margin {margin} is not positive; margin-based bounds will be skipped");
    }
    Ok(TeacherLabels {
        logits,
        probs,
        margin,
        std_errors,
        spec,
    })
}

// (1/K) Σ_k 1(g_kᵀx > 0)·xᵀv_k and its standard error.
fn mc_logit(keys: &Matrix, values: &Matrix, x: &[f64]) -> (f64, f64) {
    let k = keys.rows() as f64;
    let (mut s, mut s2) = (0.0, 0.0);
    for (g, v) in keys.iter_rows().zip(values.iter_rows()) {
        if dot(g, x) > 0.0 {
            let t = dot(x, v);
            s += t;
            s2 += t * t;
        }
    }
    let mean = s / k;
    let var = ((s2 / k - mean * mean) * k / (k - 1.0)).max(0.0);
    (mean, (var / k).sqrt())
}

/// Outcome of [`train_wide_teacher`].
#[derive(Debug, Clone)]
pub struct WideTeacher {
    pub spec: TeacherSpec,
    pub params: NetworkParams,
    pub train_accuracy: f64,
}

/// Trains a `width`-neuron network on the hard labels by unprojected
/// full-batch gradient descent and returns its logits on `ds`.
pub fn train_wide_teacher(ds: &LabeledDataset, width: usize, epochs: usize, eta: f64, seed: u64) -> Result<WideTeacher> {
    let init_seed = crate::rng::child_seed(seed, Stream::WideTeacher, 0);
    let params0 = crate::model::init_symmetric(width, ds.d(), init_seed)?;
    let cfg = TrainConfig {
        loss_kind: LossKind::Hard,
        eta,
        radius: f64::INFINITY,
        iters: epochs.max(1),
        seed,
        ..TrainConfig::default()
    };
    let trace = optim::train(&params0, ds, None, &cfg).map_err(|e| match e {
        Error::NonFiniteRisk { t, .. } => Error::TeacherDiverged(t),
        other => other,
    })?;
    let logits = crate::model::forward_batch(&trace.final_params, &ds.inputs)?;
    if let Some(t) = logits.iter().position(|z| !z.is_finite()) {
        return Err(Error::TeacherDiverged(t));
    }
    let correct = logits.iter().zip(&ds.labels).filter(|(z, y)| *y * **z > 0.0).count();
    let train_accuracy = correct as f64 / ds.n() as f64;
    log::info!("wide teacher: width {width}, {epochs} epochs, train accuracy {train_accuracy:.4}");
    Ok(WideTeacher {
        spec: TeacherSpec::WideNetLogits {
            logits,
            note: format!("width={width} epochs={epochs} eta={eta} seed={seed} dataset={}", ds.name),
        },
        params: trace.final_params,
        train_accuracy,
    })
}

/// `U` and `W̄ = W(0) + scale·U`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceWeights {
    pub u: Matrix,
    pub w_bar: Matrix,
    pub scale: f64,
}

impl ReferenceWeights {
    /// `W̄` packaged as a checkpoint-compatible network.
    pub fn as_params(&self, params: &NetworkParams) -> Result<NetworkParams> {
        params.with_weights(self.w_bar.clone())
    }
}

pub fn build_reference(params: &NetworkParams, spec: &TeacherSpec, scale: f64) -> Result<ReferenceWeights> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!("reference scale {scale} must be positive and finite")));
    }
    spec.validate()?;
    if let TeacherSpec::WideNetLogits { .. } = spec {
        return Err(Error::Teacher("pass-through logits have no pointwise response to build U from".into()));
    }
    let (m, d) = (params.width(), params.dim());
    let inv_sqrt_m = 1.0 / (m as f64).sqrt();
    let mut u = Matrix::zeros(m, d);
    for j in 0..m {
        let v = spec.response(params.init_weights.row(j)).expect("pointwise teacher");
        if v.len() != d {
            return Err(Error::Shape("teacher response dimension differs from the network".into()));
        }
        let c = params.out_signs[j] * inv_sqrt_m;
        for (dst, vk) in u.row_mut(j).iter_mut().zip(&v) {
            *dst = c * vk;
        }
    }
    let w_bar = params.init_weights.add(&u.scale(scale))?;
    Ok(ReferenceWeights { u, w_bar, scale })
}

/// Writes `i,y,z,p`.
pub fn write_labels_csv(ds: &LabeledDataset, labels: &TeacherLabels, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "i,y,z,p").map_err(io)?;
    for (i, ((y, z), p)) in ds.labels.iter().zip(&labels.logits).zip(&labels.probs).enumerate() {
        writeln!(w, "{i},{y},{z:?},{p:?}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads the `z` column of a labels CSV as pass-through logits.
pub fn read_labels_csv(path: &Path) -> Result<Vec<f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let z_col = rdr
        .headers()?
        .iter()
        .position(|h| h == "z")
        .ok_or_else(|| Error::Teacher(format!("{}: no z column", path.display())))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let z = rec
            .get(z_col)
            .and_then(|s| s.trim().parse::<f64>().ok())
            .ok_or_else(|| Error::Teacher(format!("{}: bad logit in row {}", path.display(), out.len() + 1)))?;
        out.push(z);
    }
    Ok(out)
}
