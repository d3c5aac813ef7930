use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use kdbound::dataio::{self, LabeledDataset, SynthSpec};
use kdbound::model;
use kdbound::optim::{self, Engine, LossKind, TrainConfig};
use kdbound::rng::{child_seed, Stream};
use kdbound::teacher::{self, TeacherLabels, TeacherSpec};
use kdbound::verify::{
    self, lemmas, BoundReport, DescentInstance, EndToEnd, EndToEndConfig, FlipCheckConfig, SweepConfig,
    Table1Config,
};

use crate::args::*;
use crate::manifest::{manifest_path, RunManifest};
use crate::Outcome;

pub fn execute(cli: &Cli, argv: &[OsString]) -> Result<Outcome> {
    if let Some(out) = cli.command.out() {
        let path = manifest_path(out);
        RunManifest::new(cli, argv)?.save(&path)?;
        log::info!("manifest written to {}", path.display());
    }
    match &cli.command {
        Command::Data(DataCmd::Synth(a)) => data_synth(a),
        Command::Data(DataCmd::Mnist(a)) => data_mnist(a),
        Command::Train(a) => train(a),
        Command::Verify(VerifyCmd::Subsample(a)) => verify_subsample(a),
        Command::Verify(VerifyCmd::Descent(a)) => verify_descent(a),
        Command::Verify(VerifyCmd::Flips(a)) => verify_flips(a),
        Command::Verify(VerifyCmd::Theorem1(a)) => {
            let cfg = EndToEndConfig {
                entropy_aware: a.entropy_aware,
                ..end_to_end_config(&a.common, a.gamma)
            };
            finish_end_to_end(verify::run_theorem1(a.beta, &cfg)?, &a.common)
        }
        Command::Verify(VerifyCmd::Corollary2(a)) => {
            let cfg = end_to_end_config(&a.common, a.gamma);
            finish_end_to_end(verify::run_corollary2(a.epsilon, &cfg)?, &a.common)
        }
        Command::Verify(VerifyCmd::Proposition3(a)) => {
            let cfg = end_to_end_config(&a.common, a.gamma);
            finish_end_to_end(verify::run_proposition3(a.beta, a.eta, &cfg)?, &a.common)
        }
        Command::Sweep(a) => run_sweep(a),
        Command::Table1(a) => run_table1(a),
        Command::Rerun(_) => unreachable!("handled before dispatch"),
    }
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn engine(e: EngineArg) -> Engine {
    match e {
        EngineArg::Auto => Engine::Auto,
        EngineArg::Dense => Engine::Dense,
        EngineArg::Shared => Engine::Shared,
    }
}

fn loss_kind(k: LabelKind) -> LossKind {
    match k {
        LabelKind::Soft => LossKind::Soft,
        LabelKind::Hard => LossKind::Hard,
    }
}

/// Synthetic data from one seed, split into named substreams.
fn synthetic(n: usize, d: usize, gamma: f64, seed: u64) -> Result<(LabeledDataset, Vec<f64>)> {
    Ok(dataio::generate_synthetic(&SynthSpec {
        n,
        d,
        target_half_margin: gamma,
        direction_seed: child_seed(seed, Stream::Direction, 0),
        sample_seed: child_seed(seed, Stream::Samples, 0),
    })?)
}

fn write_direction(u: &[f64], path: &Path) -> Result<()> {
    let text: String = u.iter().map(|v| format!("{v:?}\n")).collect();
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_direction(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading direction {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<f64>()
                .with_context(|| format!("{}: bad value {l:?}", path.display()))
        })
        .collect()
}

fn maybe_noise(ds: LabeledDataset, sigma: f64, seed: u64) -> Result<LabeledDataset> {
    if sigma == 0.0 {
        return Ok(ds);
    }
    Ok(dataio::add_gaussian_noise(&ds, sigma, child_seed(seed, Stream::Noise, 0))?)
}

fn data_synth(a: &SynthArgs) -> Result<Outcome> {
    let (ds, u) = synthetic(a.n, a.d, a.gamma, a.seed)?;
    let ds = maybe_noise(ds, a.noise, a.seed)?;
    ensure_parent(&a.out)?;
    dataio::write_dataset_csv(&ds, &a.out)?;
    let dir_path = sibling(&a.out, "direction.txt");
    write_direction(&u, &dir_path)?;
    let margin = teacher::teacher_logits(&TeacherSpec::ClosedFormLinear { u }, &ds)?.margin;
    println!(
        "{}: n={} d={} norm floor {:.6} teacher margin {:.6}; direction in {}",
        a.out.display(),
        ds.n(),
        ds.d(),
        ds.norm_floor,
        margin,
        dir_path.display()
    );
    Ok(Outcome::Done)
}

fn data_mnist(a: &MnistArgs) -> Result<Outcome> {
    let ds = dataio::load_mnist_binary(&a.images, &a.labels, &a.exclude, a.max_n)?;
    let ds = maybe_noise(ds, a.noise, a.seed)?;
    ensure_parent(&a.out)?;
    dataio::write_dataset_csv(&ds, &a.out)?;
    let positives = ds.labels.iter().filter(|y| **y > 0.0).count();
    println!(
        "{}: n={} d={} positive fraction {:.4} norm floor {:.6}",
        a.out.display(),
        ds.n(),
        ds.d(),
        positives as f64 / ds.n() as f64,
        ds.norm_floor
    );
    Ok(Outcome::Done)
}

fn train(a: &TrainArgs) -> Result<Outcome> {
    let ds = dataio::read_dataset_csv(&a.data)?;
    let spec = match a.teacher {
        TeacherKind::ClosedForm => {
            let path = a.direction.clone().unwrap_or_else(|| sibling(&a.data, "direction.txt"));
            TeacherSpec::ClosedFormLinear {
                u: read_direction(&path)?,
            }
        }
        TeacherKind::Mc => lemmas::random_mc_teacher(ds.d(), a.mc_keys, a.seed)?,
        TeacherKind::Widenet => teacher::train_wide_teacher(&ds, a.teacher_width, a.teacher_epochs, a.teacher_eta, a.seed)?.spec,
    };
    let labels: TeacherLabels = teacher::teacher_logits(&spec, &ds)?;
    let params = model::init_symmetric(a.m, ds.d(), child_seed(a.seed, Stream::Init, 0))?;
    let reference = if a.record_reference {
        if matches!(spec, TeacherSpec::WideNetLogits { .. }) {
            bail!("--record-reference needs a pointwise teacher (closed-form or mc)");
        }
        Some(teacher::build_reference(&params, &spec, a.radius.min(1.0))?)
    } else {
        None
    };
    let cfg = TrainConfig {
        loss_kind: loss_kind(a.label_kind),
        eta: a.eta,
        radius: a.radius,
        iters: a.iters,
        seed: a.seed,
        record_reference: reference.clone(),
        record_flips: a.record_flips,
        engine: engine(a.engine),
        ..TrainConfig::default()
    };
    let trace = optim::train(&params, &ds, Some(&labels), &cfg)?;
    ensure_parent(&a.out)?;
    trace.save_csv(&a.out)?;
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| sibling(&a.out, "ckpt"));
    model::save_checkpoint(&trace.final_params, &ckpt)?;
    teacher::write_labels_csv(&ds, &labels, &sibling(&a.out, "labels.csv"))?;
    println!(
        "{} rows ({} engine): mean R_KL {:.6e}, mean R_h {:.6e}, mean R {:.6e}, teacher margin {:.6}",
        trace.rows.len(),
        trace.engine,
        trace.mean_r_kl(),
        trace.mean_r_hard(),
        trace.mean_r_class(),
        labels.margin
    );
    let mut reports = vec![BoundReport::from_pair_audit("pinsker pairs", &trace.pair_audit)];
    if let Some(r) = &reference {
        if a.label_kind == LabelKind::Soft {
            let h = kdbound::losses::mean_entropy(&labels.probs)?;
            reports.push(lemmas::check_descent(&trace, r, &params, h, cfg.tolerances.descent)?);
        }
    }
    print_reports(&reports);
    Ok(outcome(&reports))
}

fn print_reports(reports: &[BoundReport]) {
    for r in reports {
        println!("{r}");
    }
}

fn outcome(reports: &[BoundReport]) -> Outcome {
    if reports.iter().any(|r| r.deterministic && !r.pass) {
        Outcome::DeterministicFailure
    } else {
        Outcome::Done
    }
}

fn save_reports(reports: &[BoundReport], out: &Path) -> Result<()> {
    ensure_parent(out)?;
    verify::save_reports_csv(reports, out)?;
    Ok(())
}

fn verify_subsample(a: &SubsampleArgs) -> Result<Outcome> {
    let (ds, u) = synthetic(a.n, a.d, a.gamma, a.seed)?;
    let spec = TeacherSpec::ClosedFormLinear { u };
    let r = lemmas::check_subsample(&ds, &spec, a.m, a.delta, a.trials, a.seed)?;
    let reports = vec![r];
    save_reports(&reports, &a.out)?;
    print_reports(&reports);
    Ok(outcome(&reports))
}

fn verify_descent(a: &DescentArgs) -> Result<Outcome> {
    let mc_teacher = match a.teacher {
        TeacherKind::Mc => true,
        TeacherKind::ClosedForm => false,
        TeacherKind::Widenet => bail!("the descent check needs a pointwise teacher (closed-form or mc)"),
    };
    let mut reports = Vec::with_capacity(a.runs + 1);
    let mut audit = optim::PairAudit::default();
    for r in 0..a.runs {
        let (trace, report) = verify::descent_instance(&DescentInstance {
            n: a.n,
            d: a.d,
            m: a.m,
            iters: a.iters,
            eta: a.eta,
            radius: a.radius,
            seed: a.seed + r as u64,
            mc_teacher,
        })?;
        audit.merge(&trace.pair_audit);
        reports.push(report);
    }
    reports.push(BoundReport::from_pair_audit("pinsker pairs", &audit));
    save_reports(&reports, &a.out)?;
    print_reports(&reports);
    Ok(outcome(&reports))
}

fn verify_flips(a: &FlipArgs) -> Result<Outcome> {
    let (ds, u) = synthetic(a.n, a.d, a.gamma, a.seed)?;
    let spec = TeacherSpec::ClosedFormLinear { u };
    let labels = teacher::teacher_logits(&spec, &ds)?;
    let r = verify::check_flip_bound(
        &ds,
        &spec,
        &labels,
        &FlipCheckConfig {
            m: a.m,
            radius: a.radius,
            delta: a.delta,
            trials: a.trials,
            iters: a.iters,
            eta: a.eta,
            loss_kind: loss_kind(a.label_kind),
            seed: a.seed,
        },
    )?;
    let reports = vec![r];
    save_reports(&reports, &a.out)?;
    print_reports(&reports);
    Ok(outcome(&reports))
}

fn end_to_end_config(a: &EndToEndArgs, gamma: f64) -> EndToEndConfig {
    EndToEndConfig {
        n: a.n,
        d: a.d,
        gamma,
        delta: a.delta,
        seeds: a.seeds,
        seed: a.seed,
        width_ceiling: a.width_ceiling,
        engine: engine(a.engine),
        entropy_aware: false,
        keep_first_trace: a.trace.is_some(),
    }
}

fn finish_end_to_end(e: EndToEnd, a: &EndToEndArgs) -> Result<Outcome> {
    let reports = e.reports();
    save_reports(&reports, &a.out)?;
    let seeds_path = sibling(&a.out, "seeds.csv");
    let f = std::fs::File::create(&seeds_path).with_context(|| format!("writing {}", seeds_path.display()))?;
    let mut w = std::io::BufWriter::new(f);
    writeln!(w, "seed,value,target,holds,mean_r_kl,mean_r_hard,mean_r_class,max_abs_ref_output,engine")?;
    for s in &e.seeds {
        writeln!(
            w,
            "{},{:.16e},{},{},{:.16e},{:.16e},{:.16e},{},{}",
            s.seed,
            s.value,
            s.target,
            s.holds,
            s.mean_r_kl,
            s.mean_r_hard,
            s.mean_r_class,
            s.max_abs_ref_output.map_or_else(|| "nan".into(), |v| format!("{v:.16e}")),
            s.engine
        )?;
    }
    w.flush()?;
    if let (Some(path), Some(trace)) = (&a.trace, &e.first_trace) {
        ensure_parent(path)?;
        trace.save_csv(path)?;
    }
    println!(
        "width m={} eta={} T={} B={} observed margin {:.6}",
        e.width, e.schedule.eta, e.schedule.iters, e.schedule.radius, e.observed_margin
    );
    print_reports(&reports);
    Ok(outcome(&reports))
}

fn run_sweep(a: &SweepArgs) -> Result<Outcome> {
    let cfg = SweepConfig {
        gammas: a.gammas.clone(),
        epsilon: a.epsilon,
        kinds: a.kinds.iter().map(|k| loss_kind(*k)).collect(),
        m_grid: parse_m_grid(&a.m_grid)?,
        seeds: a.seeds,
        n: a.n,
        d: a.d,
        seed: a.seed,
        max_iters: a.max_iters,
    };
    let r = verify::sweep_min_neurons(&cfg)?;
    ensure_parent(&a.out)?;
    r.save_csv(&a.out)?;
    for row in &r.rows {
        println!(
            "gamma={} {}: m_star={} mean error {:.4} (eta={:.4e} B={:.4} T={} of prescribed {})",
            row.gamma,
            row.loss_kind,
            row.m_star.map_or_else(|| "unreachable".into(), |m| m.to_string()),
            row.mean_error,
            row.eta,
            row.radius,
            row.iters,
            row.iters_prescribed
        );
    }
    let c = r.directional_checks();
    println!(
        "soft <= hard at every margin: {}; hard/soft ratios {:?}, non-decreasing: {}",
        c.soft_le_hard.iter().all(|(_, ok)| *ok),
        c.ratios,
        c.ratio_nondecreasing
    );
    Ok(Outcome::Done)
}

fn run_table1(a: &Table1Args) -> Result<Outcome> {
    let cfg = Table1Config {
        train_n: a.train_n,
        heldout_n: a.heldout_n,
        reduced_exclude: a.reduced_exclude.clone(),
        teacher_width: a.teacher_width,
        teacher_epochs: a.teacher_epochs,
        teacher_eta: a.teacher_eta,
        min_teacher_accuracy: a.min_teacher_accuracy,
        student_width: a.student_width,
        student_iters: a.student_iters,
        student_eta: a.student_eta,
        student_radius: a.student_radius,
        seeds: a.seeds,
        seed: a.seed,
        ..Table1Config::new(&a.images, &a.labels)
    };
    let r = verify::replicate_table1(&cfg)?;
    ensure_parent(&a.out)?;
    r.save_csv(&a.out)?;
    for row in &r.rows {
        println!(
            "{}: teacher train {:.4} held-out {:.4}; student held-out soft {:.4} hard {:.4} (gap {:+.2} points)",
            row.dataset,
            row.teacher_train_accuracy,
            row.teacher_heldout_accuracy,
            row.soft_mean(),
            row.hard_mean(),
            row.gap()
        );
    }
    println!(
        "soft >= hard on both: {}; gap larger on all digits: {}",
        r.soft_beats_hard_everywhere(),
        r.gap_shrinks_on_reduced()
    );
    Ok(Outcome::Done)
}
