//! Smallest width on a grid whose mean-over-iterations classification error
//! reaches a target, per margin and label regime.

use std::f64::consts::LN_2;
use std::io::Write;
use std::path::Path;

use super::formulas::{cap_iterations, corollary2_schedule, proposition3_schedule, Schedule};
use crate::dataio::{generate_synthetic, LabeledDataset, SynthSpec};
use crate::error::{Error, Result};
use crate::model::init_symmetric;
use crate::optim::{self, LossKind, TrainConfig};
use crate::par;
use crate::rng::{child_seed, Stream};
use crate::teacher::{teacher_logits, TeacherLabels, TeacherSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub gammas: Vec<f64>,
    pub epsilon: f64,
    pub kinds: Vec<LossKind>,
    /// Ascending even widths.
    pub m_grid: Vec<usize>,
    pub seeds: usize,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    /// Longer schedules are shortened to this many iterations at the same `ηT`.
    pub max_iters: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            gammas: vec![0.4, 0.2, 0.1, 0.05],
            epsilon: 0.1,
            kinds: vec![LossKind::Soft, LossKind::Hard],
            m_grid: doubling_grid(2, 256),
            seeds: 3,
            n: 20,
            d: 10,
            seed: 0,
            max_iters: 20_000,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.gammas.is_empty() || self.kinds.is_empty() || self.m_grid.is_empty() {
            return bad("sweep needs at least one margin, label kind and width".into());
        }
        if let Some(g) = self.gammas.iter().find(|g| !(**g > 0.0 && **g <= 0.5)) {
            return bad(format!("margin {g} outside (0, 1/2]"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("target error {} outside (0, 1)", self.epsilon));
        }
        if self.m_grid.iter().any(|m| *m < 2 || m % 2 == 1) {
            return bad("widths must be even and at least 2".into());
        }
        if self.m_grid.windows(2).any(|w| w[0] >= w[1]) {
            return bad("width grid must be strictly ascending".into());
        }
        if self.seeds == 0 || self.max_iters == 0 {
            return bad("need at least one seed and one iteration".into());
        }
        Ok(())
    }
}

/// `lo, 2·lo, 4·lo, …` up to and including `hi`.
pub fn doubling_grid(lo: usize, hi: usize) -> Vec<usize> {
    std::iter::successors(Some(lo.max(1)), |m| m.checked_mul(2))
        .take_while(|m| *m <= hi)
        .collect()
}

/// Schedule each label regime gets at margin `gamma` and target `epsilon`:
/// soft labels use the classification-error corollary; hard labels the
/// logistic-loss proposition at `β = ε ln 2`, `η = 1`.
pub fn prescribed_schedule(kind: LossKind, epsilon: f64, gamma: f64) -> Result<Schedule> {
    match kind {
        LossKind::Soft => corollary2_schedule(epsilon, gamma),
        LossKind::Hard => proposition3_schedule(epsilon * LN_2, gamma, 1.0),
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub loss_kind: LossKind,
    pub epsilon: f64,
    /// `None` when no width on the grid reaches the target.
    pub m_star: Option<usize>,
    pub seeds: usize,
    /// Seed-averaged error at `m_star`.
    pub mean_error: f64,
    pub eta: f64,
    pub radius: f64,
    pub iters: usize,
    pub iters_prescribed: usize,
}

/// One attempted `(γ, kind, m)`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SweepCell {
    pub gamma: f64,
    pub loss_kind: LossKind,
    pub m: usize,
    /// Seed-averaged error; a lower bound when the run was cut short.
    pub mean_error: f64,
    pub reached: bool,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub epsilon: f64,
    pub rows: Vec<SweepRow>,
    pub cells: Vec<SweepCell>,
}

fn dataset(cfg: &SweepConfig, gamma: f64) -> Result<(LabeledDataset, TeacherLabels)> {
    let (ds, u) = generate_synthetic(&SynthSpec {
        n: cfg.n,
        d: cfg.d,
        target_half_margin: gamma,
        direction_seed: child_seed(cfg.seed, Stream::Direction, 0),
        sample_seed: child_seed(cfg.seed, Stream::Samples, 0),
    })?;
    let labels = teacher_logits(&TeacherSpec::ClosedFormLinear { u }, &ds)?;
    Ok((ds, labels))
}

/// Error averaged over seeds at width `m`, stopping as soon as the total
/// budget `ε·T·seeds` is spent.
fn evaluate_width(
    ds: &LabeledDataset,
    labels: &TeacherLabels,
    kind: LossKind,
    schedule: &Schedule,
    m: usize,
    cfg: &SweepConfig,
) -> Result<SweepCell> {
    let total = cfg.epsilon * schedule.iters as f64 * cfg.seeds as f64;
    let mut spent = 0.0;
    let mut stopped_early = false;
    for s in 0..cfg.seeds {
        let params = init_symmetric(m, ds.d(), child_seed(cfg.seed, Stream::Init, s as u64))?;
        let train_cfg = TrainConfig {
            loss_kind: kind,
            eta: schedule.eta,
            radius: schedule.radius,
            iters: schedule.iters,
            seed: s as u64,
            error_budget: Some((total - spent).max(0.0)),
            ..TrainConfig::default()
        };
        let trace = optim::train(&params, ds, Some(labels), &train_cfg)?;
        spent += trace.rows.iter().map(|r| r.risks.r_class).sum::<f64>();
        if trace.stopped_early {
            stopped_early = true;
            break;
        }
    }
    let mean_error = spent / (schedule.iters as f64 * cfg.seeds as f64);
    Ok(SweepCell {
        gamma: 0.0,
        loss_kind: kind,
        m,
        mean_error,
        reached: !stopped_early && mean_error <= cfg.epsilon,
        stopped_early,
    })
}

fn sweep_cell(cfg: &SweepConfig, gamma: f64, kind: LossKind) -> Result<(SweepRow, Vec<SweepCell>)> {
    let (ds, labels) = dataset(cfg, gamma)?;
    let prescribed = prescribed_schedule(kind, cfg.epsilon, gamma)?;
    let schedule = cap_iterations(prescribed, cfg.max_iters);
    log::info!(
        "sweep gamma={gamma} {kind}: eta={} B={} T={} (prescribed T={})",
        schedule.eta,
        schedule.radius,
        schedule.iters,
        prescribed.iters
    );
    let mut cells = Vec::new();
    let mut found = None;
    for &m in &cfg.m_grid {
        let mut cell = evaluate_width(&ds, &labels, kind, &schedule, m, cfg)?;
        cell.gamma = gamma;
        log::debug!("  m={m}: mean error {:.4} reached={}", cell.mean_error, cell.reached);
        let reached = cell.reached;
        let err = cell.mean_error;
        cells.push(cell);
        if reached {
            found = Some((m, err));
            break;
        }
    }
    let row = SweepRow {
        gamma,
        loss_kind: kind,
        epsilon: cfg.epsilon,
        m_star: found.map(|(m, _)| m),
        seeds: cfg.seeds,
        mean_error: found.map_or(f64::NAN, |(_, e)| e),
        eta: schedule.eta,
        radius: schedule.radius,
        iters: schedule.iters,
        iters_prescribed: prescribed.iters,
    };
    Ok((row, cells))
}

/// Runs every `(γ, kind)` pair as an independent job and scans the width
/// grid upwards until the seed-averaged error is at most `ε`.
pub fn sweep_min_neurons(cfg: &SweepConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let jobs: Vec<(f64, LossKind)> = cfg
        .gammas
        .iter()
        .flat_map(|&g| cfg.kinds.iter().map(move |&k| (g, k)))
        .collect();
    let results = par::map_range(jobs.len(), |i| sweep_cell(cfg, jobs[i].0, jobs[i].1))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(results.len());
    let mut cells = Vec::new();
    for (row, c) in results {
        rows.push(row);
        cells.extend(c);
    }
    Ok(SweepResult {
        epsilon: cfg.epsilon,
        rows,
        cells,
    })
}

/// Outcome of the two directional comparisons.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalChecks {
    /// `(γ, m_star(soft) ≤ m_star(hard))` where both are reached.
    pub soft_le_hard: Vec<(f64, bool)>,
    /// `(γ, m_star(hard)/m_star(soft))` in decreasing `γ`.
    pub ratios: Vec<(f64, f64)>,
    pub ratio_nondecreasing: bool,
}

impl DirectionalChecks {
    pub fn pass(&self) -> bool {
        self.soft_le_hard.iter().all(|(_, ok)| *ok) && self.ratio_nondecreasing
    }
}

impl SweepResult {
    pub fn m_star(&self, gamma: f64, kind: LossKind) -> Option<usize> {
        self.rows
            .iter()
            .find(|r| r.gamma == gamma && r.loss_kind == kind)
            .and_then(|r| r.m_star)
    }

    pub fn directional_checks(&self) -> DirectionalChecks {
        let mut gammas: Vec<f64> = self.rows.iter().map(|r| r.gamma).collect();
        gammas.sort_by(|a, b| b.total_cmp(a));
        gammas.dedup();
        let mut soft_le_hard = Vec::new();
        let mut ratios = Vec::new();
        for g in gammas {
            if let (Some(s), Some(h)) = (self.m_star(g, LossKind::Soft), self.m_star(g, LossKind::Hard)) {
                soft_le_hard.push((g, s <= h));
                ratios.push((g, h as f64 / s as f64));
            }
        }
        let ratio_nondecreasing = ratios.windows(2).all(|w| w[1].1 >= w[0].1);
        DirectionalChecks {
            soft_le_hard,
            ratios,
            ratio_nondecreasing,
        }
    }

    pub fn write_rows_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{SWEEP_CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{:.16e},{:.16e},{:.16e},{},{}",
                r.gamma,
                r.loss_kind,
                r.epsilon,
                r.m_star.map_or_else(|| "nan".to_string(), |m| m.to_string()),
                r.m_star.is_some(),
                r.seeds,
                r.mean_error,
                r.eta,
                r.radius,
                r.iters,
                r.iters_prescribed
            )?;
        }
        out.flush()
    }

    pub fn write_cells_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{SWEEP_CELLS_CSV_HEADER}")?;
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{:.16e},{},{}",
                c.gamma, c.loss_kind, c.m, c.mean_error, c.reached, c.stopped_early
            )?;
        }
        out.flush()
    }

    /// Writes the per-margin rows to `path` and the attempted cells next to
    /// it with a `.cells.csv` suffix.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_rows_csv(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))?;
        let cells = path.with_extension("cells.csv");
        let f = std::fs::File::create(&cells).map_err(|e| Error::io(&cells, e))?;
        self.write_cells_csv(std::io::BufWriter::new(f)).map_err(|e| Error::io(&cells, e))
    }
}

pub const SWEEP_CSV_HEADER: &str = "gamma,loss_kind,epsilon,m_star,reached,seeds,mean_error,eta,radius,iters,iters_prescribed";
pub const SWEEP_CELLS_CSV_HEADER: &str = "gamma,loss_kind,m,mean_error,reached,stopped_early";
