use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "kdbound", version, about = "Soft- versus hard-label training of two-layer ReLU students, with numerical checks of the neuron-count bounds")]
pub struct Cli {
    /// TOML file with per-command defaults; flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for independent trials and sweep cells.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Build datasets.
    #[command(subcommand)]
    Data(DataCmd),
    /// Train one student by projected gradient descent.
    Train(TrainArgs),
    /// Check one bound.
    #[command(subcommand)]
    Verify(VerifyCmd),
    /// Smallest width reaching a target error, per margin and label kind.
    Sweep(SweepArgs),
    /// Soft- versus hard-label students on binary MNIST.
    Table1(Table1Args),
    /// Re-run the command recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataCmd {
    /// Margin-controlled points on the unit sphere.
    Synth(SynthArgs),
    /// Binary MNIST from idx files.
    Mnist(MnistArgs),
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerifyCmd {
    /// Sub-sample lemma over fresh initialisations.
    Subsample(SubsampleArgs),
    /// Per-iteration and telescoped descent inequalities.
    Descent(DescentArgs),
    /// Flip-set cardinality and frozen-pattern drift bounds.
    Flips(FlipArgs),
    /// Averaged KL risk at the prescribed width and schedule.
    Theorem1(Theorem1Args),
    /// Averaged classification error at the prescribed width and schedule.
    Corollary2(Corollary2Args),
    /// Hard-label averaged logistic risk at the prescribed radius, width and schedule.
    Proposition3(Proposition3Args),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherKind {
    ClosedForm,
    Mc,
    Widenet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelKind {
    Soft,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineArg {
    Auto,
    Dense,
    Shared,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 20)]
    pub d: usize,
    /// Half-margin: every point has `|xᵀu| ≥ 2·gamma`.
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    /// Gaussian noise level added before renormalising.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset CSV; the direction goes next to it as `.direction.txt`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MnistArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Digits to drop, e.g. `1,7,4,9`.
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<u8>,
    #[arg(long)]
    pub max_n: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset CSV.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = TeacherKind::ClosedForm)]
    pub teacher: TeacherKind,
    /// Unit direction for the closed-form teacher; defaults to the dataset's `.direction.txt`.
    #[arg(long)]
    pub direction: Option<PathBuf>,
    #[arg(long = "labels", value_enum, default_value_t = LabelKind::Soft)]
    pub label_kind: LabelKind,
    #[arg(long, default_value_t = 0.1)]
    pub eta: f64,
    /// Projection radius; `inf` disables projection.
    #[arg(long = "B", alias = "radius", default_value_t = 1.0)]
    #[serde(serialize_with = "float_or_word")]
    pub radius: f64,
    #[arg(long = "T", alias = "iters", default_value_t = 100)]
    pub iters: usize,
    #[arg(long, default_value_t = 64)]
    pub m: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = EngineArg::Auto)]
    pub engine: EngineArg,
    /// Sampled keys of the Monte Carlo teacher.
    #[arg(long, default_value_t = 256)]
    pub mc_keys: usize,
    #[arg(long, default_value_t = 512)]
    pub teacher_width: usize,
    #[arg(long, default_value_t = 300)]
    pub teacher_epochs: usize,
    #[arg(long, default_value_t = 1000.0)]
    pub teacher_eta: f64,
    /// Record `W̄ = W(0) + min(1, B)·U` columns (pointwise teachers only).
    #[arg(long)]
    pub record_reference: bool,
    /// Record the largest flip set per iterate.
    #[arg(long)]
    pub record_flips: bool,
    /// Trace CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Final weights; defaults to the trace path with a `.ckpt` extension.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SubsampleArgs {
    #[arg(long, default_value_t = 1024)]
    pub m: usize,
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub d: usize,
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    #[arg(long, default_value_t = 500)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DescentArgs {
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub d: usize,
    #[arg(long, default_value_t = 64)]
    pub m: usize,
    #[arg(long = "T", alias = "iters", default_value_t = 200)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.1)]
    pub eta: f64,
    #[arg(long = "B", alias = "radius", default_value_t = 1.0)]
    #[serde(serialize_with = "float_or_word")]
    pub radius: f64,
    /// Independent instances, seeded `seed, seed+1, …`.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    #[arg(long, value_enum, default_value_t = TeacherKind::Mc)]
    pub teacher: TeacherKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FlipArgs {
    #[arg(long, default_value_t = 1024)]
    pub m: usize,
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub d: usize,
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    #[arg(long = "B", alias = "radius", default_value_t = 1.0)]
    #[serde(serialize_with = "float_or_word")]
    pub radius: f64,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long = "T", alias = "iters", default_value_t = 100)]
    pub iters: usize,
    #[arg(long, default_value_t = 1.0)]
    pub eta: f64,
    #[arg(long = "labels", value_enum, default_value_t = LabelKind::Soft)]
    pub label_kind: LabelKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EndToEndArgs {
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub d: usize,
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    #[arg(long, default_value_t = 50)]
    pub seeds: usize,
    #[arg(long, default_value_t = 4_000_000)]
    pub width_ceiling: u64,
    #[arg(long, value_enum, default_value_t = EngineArg::Auto)]
    pub engine: EngineArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report CSV; per-seed outcomes go next to it as `.seeds.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Trace CSV of the first seed.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct Theorem1Args {
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.25)]
    pub gamma: f64,
    /// Use `η = β/(3H)`, `T = ⌈9H/β²⌉` with the soft-label entropy `H`.
    #[arg(long)]
    pub entropy_aware: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: EndToEndArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct Corollary2Args {
    #[arg(long, default_value_t = 0.3)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0.4)]
    pub gamma: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: EndToEndArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct Proposition3Args {
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.4)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub eta: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: EndToEndArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "0.4,0.2,0.1,0.05")]
    pub gammas: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "soft,hard")]
    pub kinds: Vec<LabelKind>,
    /// `lo:hi:x2` for a doubling grid, or a comma-separated list.
    #[arg(long, default_value = "2:256:x2")]
    pub m_grid: String,
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub d: usize,
    #[arg(long, default_value_t = 20_000)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Result CSV; attempted cells go next to it as `.cells.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct Table1Args {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub train_n: usize,
    #[arg(long)]
    pub heldout_n: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,7,4,9")]
    pub reduced_exclude: Vec<u8>,
    #[arg(long, default_value_t = 512)]
    pub teacher_width: usize,
    #[arg(long, default_value_t = 300)]
    pub teacher_epochs: usize,
    #[arg(long, default_value_t = 1000.0)]
    pub teacher_eta: f64,
    #[arg(long, default_value_t = 0.95)]
    pub min_teacher_accuracy: f64,
    #[arg(long, default_value_t = 4)]
    pub student_width: usize,
    #[arg(long, default_value_t = 1000)]
    pub student_iters: usize,
    #[arg(long, default_value_t = 50.0)]
    pub student_eta: f64,
    #[arg(long, default_value_t = f64::INFINITY)]
    #[serde(serialize_with = "float_or_word")]
    pub student_radius: f64,
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

// `inf` would otherwise serialise as null
fn float_or_word<S: serde::Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(&v.to_string())
    }
}

impl Command {
    /// Space-separated subcommand path, e.g. `verify descent`.
    pub fn path(&self) -> &'static str {
        match self {
            Command::Data(DataCmd::Synth(_)) => "data synth",
            Command::Data(DataCmd::Mnist(_)) => "data mnist",
            Command::Train(_) => "train",
            Command::Verify(VerifyCmd::Subsample(_)) => "verify subsample",
            Command::Verify(VerifyCmd::Descent(_)) => "verify descent",
            Command::Verify(VerifyCmd::Flips(_)) => "verify flips",
            Command::Verify(VerifyCmd::Theorem1(_)) => "verify theorem1",
            Command::Verify(VerifyCmd::Corollary2(_)) => "verify corollary2",
            Command::Verify(VerifyCmd::Proposition3(_)) => "verify proposition3",
            Command::Sweep(_) => "sweep",
            Command::Table1(_) => "table1",
            Command::Rerun(_) => "rerun",
        }
    }

    /// Primary output file.
    pub fn out(&self) -> Option<&PathBuf> {
        Some(match self {
            Command::Data(DataCmd::Synth(a)) => &a.out,
            Command::Data(DataCmd::Mnist(a)) => &a.out,
            Command::Train(a) => &a.out,
            Command::Verify(VerifyCmd::Subsample(a)) => &a.out,
            Command::Verify(VerifyCmd::Descent(a)) => &a.out,
            Command::Verify(VerifyCmd::Flips(a)) => &a.out,
            Command::Verify(VerifyCmd::Theorem1(a)) => &a.common.out,
            Command::Verify(VerifyCmd::Corollary2(a)) => &a.common.out,
            Command::Verify(VerifyCmd::Proposition3(a)) => &a.common.out,
            Command::Sweep(a) => &a.out,
            Command::Table1(a) => &a.out,
            Command::Rerun(_) => return None,
        })
    }

    /// Files read by the command.
    pub fn inputs(&self) -> Vec<PathBuf> {
        match self {
            Command::Data(DataCmd::Mnist(a)) => vec![a.images.clone(), a.labels.clone()],
            Command::Train(a) => std::iter::once(a.data.clone()).chain(a.direction.clone()).collect(),
            Command::Table1(a) => vec![a.images.clone(), a.labels.clone()],
            _ => Vec::new(),
        }
    }
}

/// `lo:hi:x2` or `a,b,c`.
pub fn parse_m_grid(s: &str) -> anyhow::Result<Vec<usize>> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [lo, hi, step] => {
            let factor: usize = step
                .strip_prefix('x')
                .ok_or_else(|| anyhow::anyhow!("grid step {step:?} must look like x2"))?
                .parse()?;
            let (lo, hi): (usize, usize) = (lo.parse()?, hi.parse()?);
            anyhow::ensure!(factor >= 2 && lo >= 1, "grid {s:?} needs lo ≥ 1 and factor ≥ 2");
            let mut out = Vec::new();
            let mut m = lo;
            while m <= hi {
                out.push(m);
                m = m.checked_mul(factor).ok_or_else(|| anyhow::anyhow!("grid {s:?} overflows"))?;
            }
            Ok(out)
        }
        [list] => list
            .split(',')
            .map(|v| v.trim().parse::<usize>().map_err(Into::into))
            .collect(),
        _ => anyhow::bail!("width grid {s:?} must be lo:hi:xK or a comma-separated list"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn grids() {
        assert_eq!(parse_m_grid("2:256:x2").unwrap(), vec![2, 4, 8, 16, 32, 64, 128, 256]);
        assert_eq!(parse_m_grid("2:20:x3").unwrap(), vec![2, 6, 18]);
        assert_eq!(parse_m_grid("4,8, 12").unwrap(), vec![4, 8, 12]);
        assert!(parse_m_grid("2:256:2").is_err());
        assert!(parse_m_grid("a,b").is_err());
        assert!(parse_m_grid("1:2").is_err());
    }

    #[test]
    fn infinite_radius_parses() {
        let cli = Cli::try_parse_from(["kdbound", "train", "--data", "d.csv", "--B", "inf", "--out", "t.csv"]).unwrap();
        match cli.command {
            Command::Train(a) => assert!(a.radius.is_infinite()),
            _ => unreachable!(),
        }
    }

    #[test]
    fn unknown_flags_are_rejected() {
        assert!(Cli::try_parse_from(["kdbound", "sweep", "--out", "s.csv", "--bogus", "1"]).is_err());
    }
}
