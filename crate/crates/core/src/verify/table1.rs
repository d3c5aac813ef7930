//! Soft- versus hard-label students of width 4 on binary MNIST, with all
//! digits and with the digits 1, 7, 4, 9 removed.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::dataio::{load_mnist_binary, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{forward_batch, init_symmetric, NetworkParams};
use crate::optim::{self, LossKind, TrainConfig};
use crate::rng::{child_seed, Stream};
use crate::teacher::{teacher_logits, train_wide_teacher};

#[derive(Debug, Clone, PartialEq)]
pub struct Table1Config {
    pub images: PathBuf,
    pub labels: PathBuf,
    /// Leading rows used for training; the rest are held out.
    pub train_n: usize,
    /// Cap on held-out rows.
    pub heldout_n: Option<usize>,
    pub reduced_exclude: Vec<u8>,
    pub teacher_width: usize,
    pub teacher_epochs: usize,
    pub teacher_eta: f64,
    /// The teacher must reach this training accuracy.
    pub min_teacher_accuracy: f64,
    pub student_width: usize,
    pub student_iters: usize,
    pub student_eta: f64,
    /// `f64::INFINITY` trains without projection.
    pub student_radius: f64,
    pub seeds: usize,
    pub seed: u64,
}

impl Table1Config {
    pub fn new(images: impl Into<PathBuf>, labels: impl Into<PathBuf>) -> Self {
        Table1Config {
            images: images.into(),
            labels: labels.into(),
            train_n: 2000,
            heldout_n: None,
            reduced_exclude: vec![1, 7, 4, 9],
            teacher_width: 512,
            teacher_epochs: 300,
            teacher_eta: 1000.0,
            min_teacher_accuracy: 0.95,
            student_width: 4,
            student_iters: 1000,
            student_eta: 50.0,
            student_radius: f64::INFINITY,
            seeds: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Table1Row {
    pub dataset: String,
    pub train_n: usize,
    pub heldout_n: usize,
    pub teacher_train_accuracy: f64,
    pub teacher_heldout_accuracy: f64,
    /// Held-out accuracy per seed.
    pub soft_accuracy: Vec<f64>,
    pub hard_accuracy: Vec<f64>,
}

impl Table1Row {
    pub fn soft_mean(&self) -> f64 {
        mean(&self.soft_accuracy)
    }

    pub fn hard_mean(&self) -> f64 {
        mean(&self.hard_accuracy)
    }

    /// Soft minus hard, in accuracy points (×100).
    pub fn gap(&self) -> f64 {
        100.0 * (self.soft_mean() - self.hard_mean())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table1Result {
    /// All digits first, then the reduced set.
    pub rows: Vec<Table1Row>,
}

impl Table1Result {
    pub fn soft_beats_hard_everywhere(&self) -> bool {
        self.rows.iter().all(|r| r.soft_mean() >= r.hard_mean())
    }

    pub fn gap_shrinks_on_reduced(&self) -> bool {
        matches!(self.rows.as_slice(), [all, reduced] if all.gap() > reduced.gap())
    }

    pub fn pass(&self) -> bool {
        self.soft_beats_hard_everywhere() && self.gap_shrinks_on_reduced()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{TABLE1_CSV_HEADER}")?;
        for r in &self.rows {
            for (kind, accs) in [("soft", &r.soft_accuracy), ("hard", &r.hard_accuracy)] {
                for (s, a) in accs.iter().enumerate() {
                    writeln!(
                        out,
                        "{},{kind},{s},{:.16e},{},{},{:.16e}",
                        r.dataset, a, r.train_n, r.heldout_n, r.teacher_train_accuracy
                    )?;
                }
            }
        }
        out.flush()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }
}

pub const TABLE1_CSV_HEADER: &str = "dataset,loss_kind,seed,heldout_accuracy,train_n,heldout_n,teacher_train_accuracy";

/// Fraction of rows with `y·f > 0`.
pub fn accuracy(params: &NetworkParams, ds: &LabeledDataset) -> Result<f64> {
    let fs = forward_batch(params, &ds.inputs)?;
    let correct = fs.iter().zip(&ds.labels).filter(|(f, y)| **y * **f > 0.0).count();
    Ok(correct as f64 / ds.n() as f64)
}

fn configuration(cfg: &Table1Config, exclude: &[u8]) -> Result<Table1Row> {
    let cap = cfg.heldout_n.map(|h| cfg.train_n + h);
    let full = load_mnist_binary(&cfg.images, &cfg.labels, exclude, cap)?;
    if full.n() <= cfg.train_n {
        return Err(Error::Dataset(format!(
            "{} has {} images, none left after {} training rows",
            full.name,
            full.n(),
            cfg.train_n
        )));
    }
    let (train, heldout) = full.split_prefix(cfg.train_n)?;
    let teacher = train_wide_teacher(&train, cfg.teacher_width, cfg.teacher_epochs, cfg.teacher_eta, cfg.seed)?;
    if teacher.train_accuracy < cfg.min_teacher_accuracy {
        return Err(Error::Teacher(format!(
            "teacher reached only {:.4} training accuracy on {} (need {})",
            teacher.train_accuracy, full.name, cfg.min_teacher_accuracy
        )));
    }
    let teacher_heldout_accuracy = accuracy(&teacher.params, &heldout)?;
    let labels = teacher_logits(&teacher.spec, &train)?;

    let mut soft_accuracy = Vec::with_capacity(cfg.seeds);
    let mut hard_accuracy = Vec::with_capacity(cfg.seeds);
    for s in 0..cfg.seeds {
        let params = init_symmetric(cfg.student_width, train.d(), child_seed(cfg.seed, Stream::Init, s as u64))?;
        for kind in [LossKind::Soft, LossKind::Hard] {
            let tc = TrainConfig {
                loss_kind: kind,
                eta: cfg.student_eta,
                radius: cfg.student_radius,
                iters: cfg.student_iters,
                seed: s as u64,
                ..TrainConfig::default()
            };
            let trace = optim::train(&params, &train, Some(&labels), &tc)?;
            let acc = accuracy(&trace.final_params, &heldout)?;
            log::info!("{} seed {s} {kind}: held-out accuracy {acc:.4}", full.name);
            match kind {
                LossKind::Soft => soft_accuracy.push(acc),
                LossKind::Hard => hard_accuracy.push(acc),
            }
        }
    }
    Ok(Table1Row {
        dataset: full.name.clone(),
        train_n: train.n(),
        heldout_n: heldout.n(),
        teacher_train_accuracy: teacher.train_accuracy,
        teacher_heldout_accuracy,
        soft_accuracy,
        hard_accuracy,
    })
}

/// Trains one teacher and `seeds` soft/hard student pairs per digit
/// configuration and reports held-out accuracies.
pub fn replicate_table1(cfg: &Table1Config) -> Result<Table1Result> {
    if cfg.seeds == 0 || cfg.train_n == 0 {
        return Err(Error::InvalidArgument("need at least one seed and one training row".into()));
    }
    let rows = [Vec::new(), cfg.reduced_exclude.clone()]
        .iter()
        .map(|ex| configuration(cfg, ex))
        .collect::<Result<Vec<_>>>()?;
    Ok(Table1Result { rows })
}
