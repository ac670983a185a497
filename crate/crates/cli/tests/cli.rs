use std::path::{Path, PathBuf};
use std::process::Command;

use ringfed::federation::ScheduleKind;
use ringfed_cli::commands::{self, Options};
use ringfed_cli::{CliError, ScenarioConfig};

const TINY: &str = r#"
name = "tiny"

[seeds]
master = 3

[task]
extent = [24, 24]

[centers]
count = 3
per_center = 3
validation = 2
test = 4

[schedule]
runs = ["svcl", "icl", "mixed"]
epochs_initial = 1
epochs_visit = 1
rounds = 2
icl_epochs_visit = 1

[training]
subepochs = 1
volumes_per_subepoch = 2
patches_per_subepoch = 4
batch_size = 4

[optimizer]
monitor_validation = false

[sweep]
fractions = [1.0]
epochs = 2
"#;

fn bundled(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn quiet(out: &Path) -> Options {
    let mut o = Options::new(out);
    o.plots = false;
    o
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ringfed"))
}

#[test]
fn bilateral_gives_two_snapshots_and_one_transfer() {
    let (cfg, text) = ScenarioConfig::load(&bundled("bilateral.cfg")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = commands::run(&cfg, &text, &quiet(dir.path())).unwrap();
    let h = out.seeds[0].find(ScheduleKind::Svcl, false).next().unwrap();
    assert_eq!(h.snapshots.len(), 2);
    assert_eq!(h.ledger.len(), 1);
    let ledger = std::fs::read_to_string(dir.path().join("ledger.csv")).unwrap();
    // header plus one transfer for each of the two single-visit runs
    assert_eq!(ledger.lines().count(), 3);
}

#[test]
fn sevencenter_icl_ledger_totals() {
    let (mut cfg, _) = ScenarioConfig::load(&bundled("sevencenter.cfg")).unwrap();
    cfg.schedule.runs = vec!["icl".into()];
    cfg.seeds.repeats = 1;
    cfg.centers.per_center = 1;
    cfg.centers.validation = 1;
    cfg.centers.test = 1;
    cfg.training.subepochs = 1;
    cfg.training.volumes_per_subepoch = 1;
    cfg.training.patches_per_subepoch = 1;
    cfg.training.batch_size = 1;
    cfg.optimizer.monitor_validation = false;
    let (cfg, seeds) = commands::simulate(&cfg, &Options::new("unused")).unwrap();
    let totals = seeds[0].histories[0].ledger.totals();
    let r = cfg.schedule.rounds;
    for i in 1..7 {
        assert_eq!(totals[&(i, i + 1)], r);
    }
    assert_eq!(totals[&(7, 1)], r - 1);
}

#[test]
fn run_writes_every_artifact_deterministically() {
    let cfg = ScenarioConfig::parse(TINY).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    commands::run(&cfg, TINY, &Options::new(a.path())).unwrap();
    commands::run(&cfg, TINY, &quiet(b.path())).unwrap();
    for f in ["metrics.csv", "ledger.csv", "summary.csv", "plots/sensitivity-s3.csv"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    assert!(a.path().join("plots/sensitivity-s3.svg").exists());
    assert!(!b.path().join("plots/sensitivity-s3.svg").exists());
    assert!(a.path().join("checkpoints/icl-s3.ckpt").exists());
    ringfed::checkpoint::load(&a.path().join("checkpoints/svcl-s3.ckpt")).unwrap();

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_sha256"], ringfed_cli::artifacts::hex_sha256(TINY.as_bytes()));
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
    let files: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(files.contains(&"metrics.csv") && files.contains(&"checkpoints/icl-s3.ckpt"));
}

#[test]
fn sweep_at_full_fraction_is_the_mixed_run() {
    let cfg = ScenarioConfig::parse(TINY).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let sw = commands::sweep(&cfg, TINY, &quiet(dir.path())).unwrap();
    assert_eq!(sw.medians.len(), 1);
    let summary = std::fs::read_to_string(dir.path().join("sweep_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);

    let mut mixed = cfg.clone();
    mixed.schedule.runs = vec!["mixed".into()];
    mixed.schedule.mixed_epochs = Some(cfg.sweep.epochs);
    let (_, seeds) = commands::simulate(&mixed, &Options::new("unused")).unwrap();
    let m = &seeds[0].histories[0];
    assert_eq!(m.final_model, sw.points[0].history.final_model);
    assert_eq!(m.final_report(), sw.points[0].history.final_report());
}

#[test]
fn compare_single_input_passes_curves_through() {
    let cfg = ScenarioConfig::parse(TINY).unwrap();
    let dir = tempfile::tempdir().unwrap();
    commands::compare(&[(cfg, TINY.to_string())], &quiet(dir.path())).unwrap();
    let table = std::fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    let metrics = std::fs::read_to_string(dir.path().join("tiny/metrics.csv")).unwrap();
    let stripped: Vec<&str> = table.lines().map(|l| l.split_once(',').unwrap().1).collect();
    assert_eq!(stripped, metrics.lines().collect::<Vec<_>>());
}

#[test]
fn compare_rejects_different_test_sets() {
    let a = ScenarioConfig::parse(TINY).unwrap();
    let mut b = a.clone();
    b.name = "other".into();
    b.centers.test = 5;
    let dir = tempfile::tempdir().unwrap();
    let err = commands::compare(&[(a.clone(), TINY.into()), (b, TINY.into())], &quiet(dir.path())).unwrap_err();
    assert!(matches!(err, CliError::Config(_)));
    assert!(!dir.path().join("compare.csv").exists());

    // a different training set over the same test set is fine
    let mut c = a.clone();
    c.name = "more".into();
    c.centers.per_center = 4;
    commands::compare(&[(a, TINY.into()), (c, TINY.into())], &quiet(dir.path())).unwrap();
    assert!(dir.path().join("compare.csv").exists());
}

#[test]
fn seed_override_replaces_the_master_seed() {
    let cfg = ScenarioConfig::parse(TINY).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut opts = quiet(dir.path());
    opts.seed_override = Some(9);
    let out = commands::run(&cfg, TINY, &opts).unwrap();
    assert_eq!(out.seeds[0].seed, 9);
    assert!(dir.path().join("checkpoints/svcl-s9.ckpt").exists());
}

#[test]
fn binary_exit_codes_and_output_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.cfg");
    std::fs::write(&cfg_path, TINY).unwrap();

    let env_out = dir.path().join("from-env");
    let status = bin()
        .args(["run", "--no-plots", "--workers", "2", "--config"])
        .arg(&cfg_path)
        .env("RINGFED_OUT", &env_out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(env_out.join("metrics.csv").exists());

    let flag_out = dir.path().join("from-flag");
    let status = bin()
        .args(["run", "--no-plots", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&flag_out)
        .env("RINGFED_OUT", &env_out)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(
        std::fs::read(env_out.join("metrics.csv")).unwrap(),
        std::fs::read(flag_out.join("metrics.csv")).unwrap()
    );

    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, format!("{TINY}\n[extra]\nkey = 1\n")).unwrap();
    let status = bin().args(["run", "--config"]).arg(&bad).env("RINGFED_OUT", &env_out).status().unwrap();
    assert_eq!(status.code(), Some(2));

    let missing = dir.path().join("nope.cfg");
    let status = bin().args(["run", "--config"]).arg(&missing).status().unwrap();
    assert_eq!(status.code(), Some(4));

    // a regular file where the output directory should go
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, b"x").unwrap();
    let status = bin()
        .args(["run", "--no-plots", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(blocker.join("sub"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(4));

    // a learning rate large enough to overflow
    let wild = dir.path().join("wild.cfg");
    std::fs::write(&wild, TINY.replace("monitor_validation = false", "monitor_validation = false\nlr = 1e30")).unwrap();
    let status = bin().args(["run", "--no-plots", "--config"]).arg(&wild).arg("--out").arg(dir.path().join("w")).status().unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn schema_subcommand_prints_the_reference() {
    let out = bin().arg("schema").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("[schedule]") && text.contains("min_component_voxels"));
}

#[test]
fn bundled_scenarios_and_schema_example_parse() {
    for f in ["bilateral.cfg", "sevencenter.cfg"] {
        ScenarioConfig::load(&bundled(f)).unwrap();
    }
    // the schema's example block is itself a valid scenario carrying the defaults
    let schema = ringfed_cli::SCHEMA;
    let start = schema.find("```toml\n").unwrap() + 8;
    let end = start + schema[start..].find("```").unwrap();
    let example = ScenarioConfig::parse(&schema[start..end]).unwrap();
    let mut defaults = ScenarioConfig::parse("name = \"example\"").unwrap();
    defaults.output_dir = example.output_dir.clone();
    assert_eq!(example, defaults);
}
