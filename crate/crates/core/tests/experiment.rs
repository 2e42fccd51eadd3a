use std::fs;
use std::path::{Path, PathBuf};

use lqsgd::comm::Ledger;
use lqsgd::compress::CompressorSpec;
use lqsgd::experiment::{
    compare_csv, compare_markdown, compare_report, load_report, run_experiment, AttackSpec, ExperimentSpec,
};
use lqsgd::Error;

fn grid(out: &Path) -> ExperimentSpec {
    let mut spec = ExperimentSpec::smoke(out);
    spec.compressors = vec![CompressorSpec::Identity, CompressorSpec::lqsgd(1, 8, 1.0)];
    spec.seeds = vec![3, 4];
    spec.epochs = 2;
    spec.workers = 2;
    spec
}

fn read(p: PathBuf) -> String {
    fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn empty_compressor_list_is_rejected_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut spec = ExperimentSpec::smoke(&out);
    spec.compressors.clear();
    assert!(matches!(run_experiment(&spec), Err(Error::Config(_))));
    assert!(!out.exists());
}

#[test]
fn single_cell_writes_report_and_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec::smoke(dir.path());
    let outcome = run_experiment(&spec).unwrap();
    assert_eq!(outcome.rows.len(), 1);
    let cell = spec.cell_dir(&spec.compressors[0], 0);
    let report = load_report(&cell).unwrap();
    assert_eq!(report.compressor, "identity");
    let ledger = Ledger::load_csv(&cell.join("ledger.csv")).unwrap();
    assert_eq!(ledger.total_payload_bits(), report.epochs.iter().map(|e| e.payload_bits).sum::<u64>());
    // 16×12 weights, 32 bits each, every step.
    assert_eq!(ledger.total_payload_bits(), (report.steps_per_epoch * 16 * 12 * 32) as u64);
    for f in ["metrics.csv", "timing.json"] {
        assert!(cell.join(f).is_file(), "{f}");
    }
    for f in ["spec.json", "summary.csv"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn two_by_two_grid_has_one_row_per_cell_with_seeded_contents() {
    let dir = tempfile::tempdir().unwrap();
    let spec = grid(dir.path());
    let rows = run_experiment(&spec).unwrap().rows;
    let keys: Vec<_> = rows.iter().map(|r| (r.compressor.as_str(), r.seed)).collect();
    assert_eq!(keys, [("identity", 3), ("identity", 4), ("lqsgd-r1-b8-a1", 3), ("lqsgd-r1-b8-a1", 4)]);
    assert_eq!(read(dir.path().join("summary.csv")).lines().count(), 5);
    for (c, seed) in spec.cells() {
        let solo = lqsgd::training::train(&spec.task.build(seed).unwrap(), &spec.train_config(c, seed)).unwrap();
        assert_eq!(read(spec.cell_dir(c, seed).join("report.json")), solo.to_json().unwrap());
    }
    assert_ne!(rows[0].final_distance, rows[1].final_distance);
}

#[test]
fn reruns_are_byte_identical_regardless_of_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let a = grid(&dir.path().join("a"));
    let mut b = grid(&dir.path().join("b"));
    b.jobs = 4;
    run_experiment(&a).unwrap();
    run_experiment(&b).unwrap();
    assert_eq!(read(a.out.join("summary.csv")), read(b.out.join("summary.csv")));
    for (c, seed) in a.cells() {
        for f in ["report.json", "metrics.csv", "ledger.csv"] {
            assert_eq!(read(a.cell_dir(c, seed).join(f)), read(b.cell_dir(c, seed).join(f)), "{f}");
        }
    }
}

#[test]
fn compare_single_report() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec::smoke(dir.path());
    run_experiment(&spec).unwrap();
    let rows = compare_report(&[spec.cell_dir(&spec.compressors[0], 0)]).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].size_ratio_vs_identity, Some(1.0));
    assert!(rows[0].compute_s_per_epoch.is_some());
    assert_eq!(compare_markdown(&rows).lines().count(), 3);
    let mut csv = Vec::new();
    compare_csv(&rows, &mut csv).unwrap();
    assert!(String::from_utf8(csv).unwrap().starts_with("compressor,seed,accuracy"));
}

#[test]
fn compare_ratio_matches_the_ledgers() {
    let dir = tempfile::tempdir().unwrap();
    let spec = grid(dir.path());
    run_experiment(&spec).unwrap();
    let paths: Vec<PathBuf> = spec.cells().into_iter().map(|(c, s)| spec.cell_dir(c, s)).collect();
    let rows = compare_report(&paths).unwrap();
    let bits = |p: &Path| Ledger::load_csv(&p.join("ledger.csv")).unwrap().total_payload_bits() as f64;
    let want = bits(&paths[0]) / bits(&paths[2]);
    let got = rows[2].size_ratio_vs_identity.unwrap();
    assert!((got - want).abs() < 1e-9 * want, "{got} vs {want}");
    // 16×12 at rank 1, 8 bits: 192·32 / (28·8).
    assert!((want - 192.0 * 32.0 / 224.0).abs() < 1e-9);
}

#[test]
fn compare_reports_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(compare_report(&[dir.path().join("missing.json")]), Err(Error::Io(_))));
    let bogus = dir.path().join("bogus.json");
    fs::write(&bogus, "{\"hello\": 1}").unwrap();
    assert!(matches!(compare_report(&[bogus]), Err(Error::Format(_))));
    assert!(matches!(compare_report(&[]), Err(Error::Config(_))));
}

#[test]
fn attack_grid_writes_images_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ExperimentSpec::smoke(dir.path());
    spec.compressors = vec![CompressorSpec::Identity, CompressorSpec::lqsgd(1, 4, 1.0)];
    spec.attack = Some(AttackSpec { steps: 20, restarts: 1, ..Default::default() });
    let outcome = run_experiment(&spec).unwrap();
    assert_eq!(outcome.attacks.len(), 2);
    assert_eq!(read(dir.path().join("attack.csv")).lines().count(), 3);
    let cell = spec.cell_dir(&spec.compressors[1], 0);
    let pgm = fs::read(cell.join("attack_reconstruction.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
    assert_eq!(pgm.len(), b"P5\n8 8\n255\n".len() + 64);
}

#[test]
fn toml_grid_round_trip() {
    let text = r#"
        seeds = [1, 2]
        epochs = 1
        workers = 2
        [task]
        kind = "quadratic"
        rows = 6
        cols = 5
        samples = 64
        [[compressors]]
        method = "identity"
        [[compressors]]
        method = "topk"
        k_fraction = 0.25
    "#;
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ExperimentSpec::from_toml(text).unwrap();
    spec.out = dir.path().to_path_buf();
    let rows = run_experiment(&spec).unwrap().rows;
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| !r.diverged));
    let echoed: ExperimentSpec = serde_json::from_str(&read(dir.path().join("spec.json"))).unwrap();
    assert_eq!(echoed, spec);
}
