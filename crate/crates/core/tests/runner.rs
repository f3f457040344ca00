//! End-to-end runs of every mode at toy size.

use std::path::Path;

use ntl::attacks::{AttackConfig, AttackMethod};
use ntl::augmentation::AugConfig;
use ntl::domains::{PatchSpec, SyntheticShiftSpec};
use ntl::runner::{load_run, read_history, report, run_experiment, DatasetSpec, ExperimentConfig, Mode, OWNERSHIP_COLUMNS};
use ntl::Error;

fn toy(mode: Mode, root: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(mode);
    c.seeds = vec![3, 4];
    c.output_dir = root.to_path_buf();
    c.dataset = DatasetSpec::Synthetic {
        data_seed: 3,
        image_size: 16,
        train: 60,
        test: 40,
        shift: SyntheticShiftSpec::strong_tint(),
    };
    c.ntl.epochs = 1;
    c
}

fn tiny_aug() -> AugConfig {
    AugConfig {
        dis_list: vec![0.1, 0.5],
        num_directions: 1,
        gan_epochs: 1,
        aug_epochs: 1,
        latent_dim: 8,
        samples_per_cell: Some(20),
        ..Default::default()
    }
}

/// Every number in report.txt shows up in some seed's report.json or in
/// summary.json.
fn assert_traceable(dir: &Path) {
    let text = std::fs::read_to_string(dir.join("report.txt")).unwrap();
    let mut sources = std::fs::read_to_string(dir.join("summary.json")).unwrap();
    let (config, _, _) = load_run(dir).unwrap();
    for seed in &config.seeds {
        sources.push_str(&std::fs::read_to_string(dir.join(format!("seed-{seed}/report.json"))).unwrap());
    }
    let values: Vec<f64> = sources
        .split(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-' || c == 'e'))
        .filter_map(|t| t.parse().ok())
        .collect();
    for line in text.lines().filter(|l| !l.starts_with("run ") && !l.contains("budget")) {
        for token in line.split(|c: char| c.is_whitespace() || c == '/' || c == '±') {
            if !token.contains('.') {
                continue;
            }
            let Ok(shown) = token.parse::<f64>() else { continue };
            assert!(
                values.iter().any(|v| (v - shown).abs() <= 5e-5),
                "{token} in report.txt has no source record"
            );
        }
    }
}

#[test]
fn supervised_and_target_specified_runs() {
    let root = tempfile::tempdir().unwrap();
    for mode in [Mode::Supervised, Mode::TargetSpecified] {
        let mut cfg = toy(mode, root.path());
        cfg.probe = Some(Default::default());
        let run = run_experiment(&cfg).unwrap();
        assert_eq!(run.seeds.len(), 2);
        for seed in [3, 4] {
            let seed_dir = run.dir.join(format!("seed-{seed}"));
            let history = read_history(&seed_dir.join("history.jsonl")).unwrap();
            assert_eq!(history.len(), 1);
            assert!(history[0].mi.is_some());
            assert!(seed_dir.join("model.ckpt").exists());
        }
        assert!(run.seeds.iter().all(|r| r.target_acc.is_some()));
        assert_traceable(&run.dir);
        let rendered = report(std::slice::from_ref(&run.dir)).unwrap();
        assert!(rendered.text.contains("source"));
        assert_eq!(rendered.csv.lines().next().unwrap(), "run,seed,source,target");
    }
}

#[test]
fn reruns_create_new_directories_and_match() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = toy(Mode::TargetSpecified, root.path());
    cfg.seeds = vec![5];
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_ne!(a.dir, b.dir);
    assert_eq!(a.seeds, b.seeds);
    let read = |d: &Path| std::fs::read(d.join("seed-5/history.jsonl")).unwrap();
    assert_eq!(read(&a.dir), read(&b.dir));
}

#[test]
fn ownership_run_has_table_layout() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = toy(Mode::Ownership, root.path());
    cfg.seeds = vec![3];
    cfg.patch = Some(PatchSpec::DIGITS);
    cfg.attacks = AttackMethod::ALL
        .iter()
        .map(|&m| AttackConfig {
            epochs: 1,
            ..AttackConfig::with_method(m)
        })
        .collect();
    let run = run_experiment(&cfg).unwrap();
    let seed = &run.seeds[0];
    assert_eq!(seed.attacks.len(), 6);
    assert!(seed.baseline_verification.is_some() && seed.verification.is_some());
    assert!(seed.attacks.iter().all(|a| a.before == *seed.verification.as_ref().unwrap()));
    let overwrite = seed.attacks.iter().find(|a| a.method == AttackMethod::Overwrite).unwrap();
    assert!(overwrite.trigger_accuracy.is_some());
    assert!(run.dir.join("seed-3/supervised.ckpt").exists());

    let rendered = report(std::slice::from_ref(&run.dir)).unwrap();
    let header: Vec<&str> = rendered.csv.lines().next().unwrap().split(',').collect();
    assert_eq!(header[2..], OWNERSHIP_COLUMNS);
    let row: Vec<&str> = rendered.csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row.len(), 10);
    assert!(row[2..].iter().all(|cell| cell.contains('/')));
    assert_traceable(&run.dir);
}

#[test]
fn source_only_and_authorization_runs() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = toy(Mode::SourceOnly, root.path());
    cfg.seeds = vec![3];
    cfg.aug = Some(tiny_aug());
    let run = run_experiment(&cfg).unwrap();
    assert_eq!(run.seeds[0].aux_cells.len(), 2);
    assert!(run.dir.join("seed-3/aux/manifest.toml").exists());

    cfg.mode = Mode::Authorization;
    cfg.patch = Some(PatchSpec::DIGITS);
    let run = run_experiment(&cfg).unwrap();
    let auth = run.seeds[0].authorization.as_ref().unwrap();
    assert_eq!(auth.unauthorized.len(), 3);
    assert_traceable(&run.dir);
}

#[test]
fn invalid_config_writes_nothing() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = toy(Mode::Authorization, root.path().join("out").as_path());
    cfg.ntl.batch_size = 0;
    let err = run_experiment(&cfg).unwrap_err();
    assert!(err.is_validation());
    let Error::InvalidConfig(list) = err else { unreachable!() };
    assert!(list.len() >= 3, "{list:?}");
    assert!(!root.path().join("out").exists());
}

#[test]
fn report_rejects_incomplete_runs() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = toy(Mode::Supervised, root.path());
    cfg.seeds = vec![3];
    let run = run_experiment(&cfg).unwrap();
    std::fs::remove_file(run.dir.join("seed-3/report.json")).unwrap();
    match report(std::slice::from_ref(&run.dir)) {
        Err(Error::IncompleteRun { missing, .. }) => assert_eq!(missing, "seed-3/report.json"),
        other => panic!("expected an incomplete-run error, got {other:?}"),
    }
}

#[test]
fn shipped_configs_validate_and_round_trip() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap();
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap().to_toml().unwrap(), text);
        seen += 1;
    }
    assert_eq!(seen, 4);
}
