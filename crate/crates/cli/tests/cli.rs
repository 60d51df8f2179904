use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mdkd::distill::SoftTargetStore;
use mdkd::pipeline::{sha256_file, EvalReport, ExperimentConfig};
use mdkd::synthetic::{example_config, generate, SyntheticSpec};

const TINY: &[(&str, &str)] = &[
    ("model.embed_dim", "8"),
    ("model.hidden_dim", "8"),
    ("train.generic.epochs", "3"),
    ("train.teacher.epochs", "2"),
    ("train.student.epochs", "2"),
    ("distill.top_k", "4"),
];

/// Writes a tiny synthetic task plus `experiment.toml` and returns the config path.
fn setup(dir: &Path) -> PathBuf {
    let spec = SyntheticSpec {
        train_per_domain: 40,
        dev_per_domain: 10,
        test_per_domain: 10,
        generic_train: 200,
        generic_dev: 10,
        ..Default::default()
    };
    generate(&spec).unwrap().write(dir).unwrap();
    let mut cfg = ExperimentConfig::from_toml(&example_config(2)).unwrap();
    for (k, v) in TINY {
        cfg.apply_override(k, v).unwrap();
    }
    let path = dir.join("experiment.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn mdkd(config: Option<&Path>, out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mdkd"));
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.arg("--out").arg(out).args(args);
    cmd.output().unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_for_every_subcommand() {
    let tmp = tempfile::tempdir().unwrap();
    for sub in [vec![], vec!["preprocess"], vec!["select"], vec!["train"], vec!["distill-targets"], vec!["evaluate"], vec!["run"], vec!["synthetic"]] {
        let mut args = sub.clone();
        args.push("--help");
        let o = mdkd(None, tmp.path(), &args);
        assert_eq!(code(&o), 0, "{sub:?}");
        assert!(!o.stdout.is_empty());
    }
    let o = mdkd(None, tmp.path(), &["select", "--help"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("selection.alpha"));
}

#[test]
fn usage_and_config_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let out = tmp.path().join("run");
    assert_eq!(code(&mdkd(None, &out, &["no-such-command"])), 1);
    assert_eq!(code(&mdkd(None, &out, &["preprocess"])), 1);
    assert_eq!(code(&mdkd(Some(&cfg), &out, &["train", "--stage", "nope"])), 1);
    let o = mdkd(Some(&cfg), &out, &["--override", "distill.nope=1", "preprocess"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("distill.nope"), "{}", stderr(&o));
    assert_eq!(code(&mdkd(Some(&cfg), &out, &["--override", "distill.lambda=2", "preprocess"])), 1);
}

#[test]
fn missing_input_exits_2_naming_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    std::fs::remove_file(tmp.path().join("dom0.dev.src")).unwrap();
    let o = mdkd(Some(&cfg), &tmp.path().join("run"), &["preprocess"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("dom0.dev.src"), "{}", stderr(&o));
}

#[test]
fn stages_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let out = tmp.path().join("run");
    let cfg = Some(cfg.as_path());

    ok(&mdkd(cfg, &out, &["preprocess"]));
    let codes = std::fs::read(out.join("data/bpe.codes")).unwrap();
    let vocab = std::fs::read(out.join("data/vocab.txt")).unwrap();
    ok(&mdkd(cfg, &out, &["preprocess"]));
    assert_eq!(std::fs::read(out.join("data/bpe.codes")).unwrap(), codes);
    assert_eq!(std::fs::read(out.join("data/vocab.txt")).unwrap(), vocab);

    let o = mdkd(cfg, &out, &["train", "--stage", "teacher"]);
    assert_eq!(code(&o), 1, "teachers need the generic model and rankings");

    ok(&mdkd(cfg, &out, &["select"]));
    ok(&mdkd(cfg, &out, &["train", "--stage", "generic"]));
    let generic = sha256_file(&out.join("generic/final.bin")).unwrap();
    ok(&mdkd(cfg, &out, &["train", "--stage", "teacher"]));

    let o = mdkd(cfg, &out, &["train", "--stage", "student"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains(".kdst"), "{}", stderr(&o));
    ok(&mdkd(cfg, &out, &["train", "--stage", "baseline"]));

    let printed = ok(&mdkd(cfg, &out, &["distill-targets"]));
    assert!(printed.contains("dom0: 40 sentences, K = 4"), "{printed}");
    ok(&mdkd(cfg, &out, &["train", "--stage", "student"]));
    let table = ok(&mdkd(cfg, &out, &["evaluate"]));

    let text = std::fs::read_to_string(out.join("eval/report.json")).unwrap();
    let report: EvalReport = serde_json::from_str(&text).unwrap();
    let again: EvalReport = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
    assert_eq!(report, again);
    for system in ["generic", "teacher", "ensemble", "student", "baseline", "delta"] {
        assert!(table.lines().any(|l| l.starts_with(system)), "{system} missing from\n{table}");
    }
    let student = format!("{:.2}", report.mean("student").unwrap());
    assert!(table.lines().any(|l| l.starts_with("student") && l.trim_end().ends_with(&student)));

    // rerunning a finished stage reproduces its model
    ok(&mdkd(cfg, &out, &["train", "--stage", "generic"]));
    assert_eq!(sha256_file(&out.join("generic/final.bin")).unwrap(), generic);
}

#[test]
fn training_resumes_after_losing_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let out = tmp.path().join("run");
    let cfg = Some(cfg.as_path());
    ok(&mdkd(cfg, &out, &["preprocess"]));
    ok(&mdkd(cfg, &out, &["train", "--stage", "generic"]));
    let full = sha256_file(&out.join("generic/final.bin")).unwrap();
    let steps = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    for f in ["epoch_0002.bin", "epoch_0003.bin", "epoch_0003.opt"] {
        std::fs::remove_file(out.join("generic/ckpt").join(f)).unwrap();
    }
    ok(&mdkd(cfg, &out, &["train", "--stage", "generic"]));
    assert_eq!(sha256_file(&out.join("generic/final.bin")).unwrap(), full);
    assert_eq!(std::fs::read_to_string(out.join("manifest.json")).unwrap(), steps);
}

#[test]
fn seed_override_changes_the_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let cfg = Some(cfg.as_path());
    let mut sums = Vec::new();
    for (run, seed) in [("a", "1"), ("b", "2"), ("c", "1")] {
        let out = tmp.path().join(run);
        ok(&mdkd(cfg, &out, &["--seed", seed, "preprocess"]));
        ok(&mdkd(cfg, &out, &["--seed", seed, "train", "--stage", "generic"]));
        sums.push(sha256_file(&out.join("generic/final.bin")).unwrap());
    }
    assert_ne!(sums[0], sums[1]);
    assert_eq!(sums[0], sums[2]);
    // a run directory refuses a different seed
    assert_eq!(code(&mdkd(cfg, &tmp.path().join("a"), &["--seed", "2", "preprocess"])), 1);
}

#[test]
fn full_selection_lists_every_generic_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let out = tmp.path().join("run");
    let args = ["--override", "selection.alpha=1", "--override", "selection.beta=1"];
    ok(&mdkd(Some(&cfg), &out, &[&args[..], &["preprocess"]].concat()));
    ok(&mdkd(Some(&cfg), &out, &[&args[..], &["select"]].concat()));
    let n = std::fs::read_to_string(out.join("data/generic.train.src")).unwrap().lines().count();
    for epoch in [1, 2] {
        let text = std::fs::read_to_string(out.join(format!("select/dom0/subsets/epoch_{epoch:04}.txt"))).unwrap();
        let mut idx: Vec<usize> = text.lines().map(|l| l.parse().unwrap()).collect();
        idx.sort_unstable();
        assert_eq!(idx, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn top_one_store_holds_certain_targets() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let out = tmp.path().join("run");
    ok(&mdkd(Some(&cfg), &out, &["--override", "distill.top_k=1", "run"]));
    let store = SoftTargetStore::load(&out.join("stores/dom1.kdst"), "dom1").unwrap();
    assert_eq!(store.top_k, 1);
    assert!(store.sentences.values().flat_map(|s| &s.positions).all(|p| p.len() == 1 && p[0].1 == 1.0));
}

#[test]
fn synthetic_writes_a_runnable_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("syn");
    let o = Command::new(env!("CARGO_BIN_EXE_mdkd"))
        .args(["synthetic", "--domains", "3"])
        .arg(&dir)
        .output()
        .unwrap();
    ok(&o);
    let cfg = ExperimentConfig::load(&dir.join("experiment.toml")).unwrap();
    assert_eq!(cfg.domains.len(), 3);
    cfg.check_inputs_exist().unwrap();
}
