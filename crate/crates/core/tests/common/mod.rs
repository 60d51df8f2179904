#![allow(dead_code)]

use std::path::Path;

use mdkd::pipeline::ExperimentConfig;
use mdkd::synthetic::{example_config, generate, SyntheticSpec};

/// Writes the synthetic corpora for `spec` into `dir` and returns the matching
/// experiment config with `overrides` applied and paths resolved.
pub fn synthetic_config(dir: &Path, spec: &SyntheticSpec, overrides: &[(&str, &str)]) -> ExperimentConfig {
    generate(spec).unwrap().write(dir).unwrap();
    let mut cfg = ExperimentConfig::from_toml(&example_config(spec.num_domains)).unwrap();
    for (k, v) in overrides {
        cfg.apply_override(k, v).unwrap();
    }
    cfg.resolve_paths(dir);
    cfg
}

/// A corpus and schedule small enough for a full pipeline run in a few seconds.
pub fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        train_per_domain: 40,
        dev_per_domain: 10,
        test_per_domain: 10,
        generic_train: 200,
        generic_dev: 10,
        ..Default::default()
    }
}

pub const TINY_OVERRIDES: &[(&str, &str)] = &[
    ("model.embed_dim", "8"),
    ("model.hidden_dim", "8"),
    ("train.generic.epochs", "3"),
    ("train.teacher.epochs", "2"),
    ("train.student.epochs", "2"),
    ("distill.top_k", "4"),
];

pub fn tiny_config(dir: &Path) -> ExperimentConfig {
    synthetic_config(dir, &tiny_spec(), TINY_OVERRIDES)
}

/// Bytes of every file under `dir`, keyed by relative path.
pub fn snapshot(dir: &Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut std::collections::BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}
