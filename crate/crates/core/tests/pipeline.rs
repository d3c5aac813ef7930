use kdbound::dataio::{generate_synthetic, read_dataset_csv, write_dataset_csv, SynthSpec};
use kdbound::model::{forward_batch, init_symmetric, load_checkpoint, save_checkpoint};
use kdbound::optim::{train, Engine, LossKind, TrainConfig};
use kdbound::teacher::{build_reference, teacher_logits, TeacherSpec};
use kdbound::verify::endtoend::{run_theorem1, EndToEndConfig};
use kdbound::verify::sweep::{sweep_min_neurons, SweepConfig, SWEEP_CELLS_CSV_HEADER, SWEEP_CSV_HEADER};
use kdbound::verify::{save_reports_csv, REPORT_CSV_HEADER};

fn synthetic(n: usize, d: usize, gamma: f64, seed: u64) -> (kdbound::dataio::LabeledDataset, TeacherSpec) {
    let (ds, u) = generate_synthetic(&SynthSpec {
        n,
        d,
        target_half_margin: gamma,
        direction_seed: seed,
        sample_seed: seed + 1,
    })
    .unwrap();
    (ds, TeacherSpec::ClosedFormLinear { u })
}

#[test]
fn data_train_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, spec) = synthetic(16, 4, 0.2, 3);
    let path = dir.path().join("ds.csv");
    write_dataset_csv(&ds, &path).unwrap();
    let back = read_dataset_csv(&path).unwrap();
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.inputs, ds.inputs);

    let labels = teacher_logits(&spec, &back).unwrap();
    let params = init_symmetric(32, 4, 9).unwrap();
    let cfg = TrainConfig {
        eta: 0.3,
        iters: 50,
        record_reference: Some(build_reference(&params, &spec, 1.0).unwrap()),
        ..TrainConfig::default()
    };
    let trace = train(&params, &back, Some(&labels), &cfg).unwrap();
    assert_eq!(trace.rows.len(), 50);
    assert!(trace.rows.last().unwrap().risks.r_kl.unwrap() < trace.rows[0].risks.r_kl.unwrap());
    assert_eq!(trace.pair_audit.violations(), 0);

    let ckpt = dir.path().join("w.ckpt");
    save_checkpoint(&trace.final_params, &ckpt).unwrap();
    let loaded = load_checkpoint(&ckpt).unwrap();
    assert_eq!(loaded, trace.final_params);
    assert_eq!(
        forward_batch(&loaded, &back.inputs).unwrap(),
        forward_batch(&trace.final_params, &back.inputs).unwrap()
    );
}

#[test]
fn error_budget_stops_training_early() {
    let (ds, spec) = synthetic(12, 3, 0.2, 5);
    let labels = teacher_logits(&spec, &ds).unwrap();
    let params = init_symmetric(8, 3, 1).unwrap();
    // every sample is misclassified at the zero initial output
    let cfg = TrainConfig {
        eta: 0.01,
        iters: 100,
        error_budget: Some(0.5),
        ..TrainConfig::default()
    };
    let trace = train(&params, &ds, Some(&labels), &cfg).unwrap();
    assert!(trace.stopped_early);
    assert_eq!(trace.rows.len(), 1);
    assert_eq!(trace.rows[0].risks.r_class, 1.0);

    let open = TrainConfig {
        error_budget: Some(1e9),
        ..cfg
    };
    let full = train(&params, &ds, Some(&labels), &open).unwrap();
    assert!(!full.stopped_early);
    assert_eq!(full.rows.len(), 100);
}

#[test]
fn wide_engines_agree() {
    let (ds, spec) = synthetic(20, 3, 0.25, 11);
    let labels = teacher_logits(&spec, &ds).unwrap();
    let params = init_symmetric(4096, 3, 2).unwrap();
    let run = |engine| {
        let cfg = TrainConfig {
            eta: 0.2,
            iters: 30,
            engine,
            record_reference: Some(build_reference(&params, &spec, 1.0).unwrap()),
            ..TrainConfig::default()
        };
        train(&params, &ds, Some(&labels), &cfg).unwrap()
    };
    let dense = run(Engine::Dense);
    let shared = run(Engine::Shared);
    assert_eq!(shared.engine, Engine::Shared);
    for (a, b) in dense.rows.iter().zip(&shared.rows) {
        assert!((a.risks.r_kl.unwrap() - b.risks.r_kl.unwrap()).abs() < 1e-10);
        assert!((a.frob_dev.unwrap() - b.frob_dev.unwrap()).abs() < 1e-10);
        assert_eq!(a.risks.r_class, b.risks.r_class);
    }
}

#[test]
fn theorem1_smoke_writes_reports() {
    let cfg = EndToEndConfig {
        seeds: 4,
        ..EndToEndConfig::default()
    };
    let e = run_theorem1(0.9, &cfg).unwrap();
    assert!(e.deterministic_pass());
    assert_eq!(e.seeds.len(), 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    save_reports_csv(&e.reports(), &path).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.starts_with(REPORT_CSV_HEADER));
    assert_eq!(text.lines().count(), 1 + e.reports().len());
}

#[test]
fn small_sweep_writes_both_tables() {
    let cfg = SweepConfig {
        gammas: vec![0.4],
        kinds: vec![LossKind::Soft, LossKind::Hard],
        m_grid: vec![2, 4, 8],
        seeds: 1,
        epsilon: 0.3,
        max_iters: 300,
        ..SweepConfig::default()
    };
    let r = sweep_min_neurons(&cfg).unwrap();
    assert_eq!(r.rows.len(), 2);
    assert!(r.rows.iter().all(|row| row.iters <= 300));
    for row in &r.rows {
        let scanned: Vec<_> = r.cells.iter().filter(|c| c.loss_kind == row.loss_kind).collect();
        match row.m_star {
            Some(m) => assert_eq!(scanned.last().unwrap().m, m),
            None => assert_eq!(scanned.len(), 3),
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.csv");
    r.save_csv(&path).unwrap();
    assert!(std::fs::read_to_string(&path).unwrap().starts_with(SWEEP_CSV_HEADER));
    let cells = std::fs::read_to_string(path.with_extension("cells.csv")).unwrap();
    assert!(cells.starts_with(SWEEP_CELLS_CSV_HEADER));
}
