//! Experiment configuration (TOML).
//!
//! Relative corpus paths are resolved against the directory of the config file.
//! Every section except `generic` and `domains` may be omitted.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{FinalSelection, TrainConfig};
use crate::selection::SelectionSchedule;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenericPaths {
    pub train_src: PathBuf,
    pub train_tgt: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_src: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_tgt: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainPaths {
    pub tag: String,
    pub train_src: PathBuf,
    pub train_tgt: PathBuf,
    pub dev_src: PathBuf,
    pub dev_tgt: PathBuf,
    pub test_src: PathBuf,
    pub test_tgt: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub bpe_merges: usize,
    pub max_len: usize,
    pub max_ratio: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { bpe_merges: 40_000, max_len: 250, max_ratio: 1.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub order: usize,
    /// Interpolation weights, unigram first; empty means uniform.
    pub weights: Vec<f64>,
    /// Per-word rather than per-sentence cross-entropy.
    pub normalized: bool,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig { order: 3, weights: Vec::new(), normalized: true }
    }
}

impl LmConfig {
    pub fn resolved_weights(&self) -> Vec<f64> {
        if self.weights.is_empty() {
            crate::lm::uniform_weights(self.order)
        } else {
            self.weights.clone()
        }
    }
}

/// Model dimensions; the vocabulary size comes from preprocessing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_decode_len: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims { embed_dim: 16, hidden_dim: 32, max_decode_len: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub lambda: f64,
    pub top_k: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { lambda: 0.7, top_k: 8 }
    }
}

/// The schedule without `|G|`, which is known only after preprocessing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub alpha: f64,
    pub beta: f64,
    pub nu: u32,
    pub integer_exponent: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { alpha: 0.5, beta: 0.7, nu: 1, integer_exponent: false }
    }
}

impl ScheduleConfig {
    pub fn with_size(&self, generic_size: usize) -> SelectionSchedule {
        SelectionSchedule {
            alpha: self.alpha,
            beta: self.beta,
            nu: self.nu,
            generic_size,
            integer_exponent: self.integer_exponent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageTraining {
    #[serde(default = "generic_training")]
    pub generic: TrainConfig,
    #[serde(default = "teacher_training")]
    pub teacher: TrainConfig,
    #[serde(default = "student_training")]
    pub student: TrainConfig,
}

fn generic_training() -> TrainConfig {
    TrainConfig { select: FinalSelection::AverageLast, ..Default::default() }
}

fn teacher_training() -> TrainConfig {
    TrainConfig { select: FinalSelection::BestDevLoss, ..Default::default() }
}

fn student_training() -> TrainConfig {
    TrainConfig { select: FinalSelection::BestDevBleu, ..Default::default() }
}

impl Default for StageTraining {
    fn default() -> Self {
        StageTraining {
            generic: generic_training(),
            teacher: teacher_training(),
            student: student_training(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Share of the generic training corpus mixed into student training.
    #[serde(default = "default_generic_fraction")]
    pub student_generic_fraction: f64,
    pub generic: GenericPaths,
    pub domains: Vec<DomainPaths>,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub lm: LmConfig,
    #[serde(default)]
    pub model: ModelDims,
    /// Student dimensions when they differ from the generic model's. A student
    /// of a different shape starts from a fresh initialisation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student_model: Option<ModelDims>,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub selection: ScheduleConfig,
    #[serde(default)]
    pub train: StageTraining,
}

fn default_generic_fraction() -> f64 {
    0.1
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(config_err)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Reads a config and resolves relative corpus paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.generic.train_src);
        fix(&mut self.generic.train_tgt);
        self.generic.dev_src.as_mut().map(fix);
        self.generic.dev_tgt.as_mut().map(fix);
        for d in &mut self.domains {
            for p in [
                &mut d.train_src,
                &mut d.train_tgt,
                &mut d.dev_src,
                &mut d.dev_tgt,
                &mut d.test_src,
                &mut d.test_tgt,
            ] {
                fix(p);
            }
        }
    }

    /// Value checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Config("at least one domain is required".into()));
        }
        let mut tags = BTreeSet::new();
        for d in &self.domains {
            let ok = !d.tag.is_empty()
                && d.tag.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !ok {
                return Err(Error::Config(format!("domain tag {:?} must be [A-Za-z0-9_-]+", d.tag)));
            }
            if d.tag == "generic" || !tags.insert(d.tag.as_str()) {
                return Err(Error::Config(format!("duplicate or reserved domain tag {:?}", d.tag)));
            }
        }
        if self.generic.dev_src.is_some() != self.generic.dev_tgt.is_some() {
            return Err(Error::Config("generic dev_src and dev_tgt go together".into()));
        }
        if !(0.0..=1.0).contains(&self.student_generic_fraction) {
            return Err(Error::Config("student_generic_fraction must lie in [0, 1]".into()));
        }
        if self.preprocess.max_ratio < 1.0 {
            return Err(Error::Config("max_ratio must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.distill.lambda) || self.distill.top_k == 0 {
            return Err(Error::Config("distill needs lambda in [0, 1] and top_k ≥ 1".into()));
        }
        if self.lm.order == 0 {
            return Err(Error::Config("lm order must be at least 1".into()));
        }
        self.selection.with_size(1).validate()?;
        for dims in std::iter::once(&self.model).chain(&self.student_model) {
            if dims.embed_dim == 0 || dims.hidden_dim == 0 || dims.max_decode_len < 2 {
                return Err(Error::Config("model dimensions must be positive, max_decode_len ≥ 2".into()));
            }
        }
        for t in [&self.train.generic, &self.train.teacher, &self.train.student] {
            t.validate()?;
        }
        Ok(())
    }

    /// Every input file, for existence checks before a run starts.
    pub fn input_files(&self) -> Vec<&Path> {
        let g = &self.generic;
        let mut out: Vec<&Path> = vec![&g.train_src, &g.train_tgt];
        out.extend(g.dev_src.iter().chain(&g.dev_tgt).map(PathBuf::as_path));
        for d in &self.domains {
            out.extend([&d.train_src, &d.train_tgt, &d.dev_src, &d.dev_tgt, &d.test_src, &d.test_tgt].map(PathBuf::as_path));
        }
        out
    }

    pub fn check_inputs_exist(&self) -> Result<()> {
        for p in self.input_files() {
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
                ));
            }
        }
        Ok(())
    }

    /// Sets the dotted `key` (for example `train.student.epochs` or
    /// `domains.0.tag`) to `value`, parsed as a TOML value when possible and as a
    /// bare string otherwise. The key must already exist in the full config.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).map_err(config_err)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = match slot {
                toml::Value::Table(t) => t.get_mut(part),
                toml::Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
                _ => None,
            }
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_owned()));
        // integers are accepted where floats are expected
        *slot = match (&*slot, parsed) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        *self = root.try_into().map_err(|e| Error::Config(format!("override {key}={value}: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [generic]
        train_src = "g.src"
        train_tgt = "g.tgt"

        [[domains]]
        tag = "med"
        train_src = "m.train.src"
        train_tgt = "m.train.tgt"
        dev_src = "m.dev.src"
        dev_tgt = "m.dev.tgt"
        test_src = "m.test.src"
        test_tgt = "m.test.tgt"
    "#;

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.distill.lambda, 0.7);
        assert_eq!(c.preprocess.max_len, 250);
        assert_eq!(c.train.generic.select, FinalSelection::AverageLast);
        assert_eq!(c.train.student.select, FinalSelection::BestDevBleu);
        assert_eq!(c.student_generic_fraction, 0.1);
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_fields_rejected() {
        let bad = format!("{MINIMAL}\n[distill]\nlamda = 0.5\n");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn relative_paths_resolve() {
        let mut c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        c.resolve_paths(Path::new("/data"));
        assert_eq!(c.domains[0].test_tgt, Path::new("/data/m.test.tgt"));
    }

    #[test]
    fn overrides() {
        let mut c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        c.apply_override("distill.lambda", "0").unwrap();
        assert_eq!(c.distill.lambda, 0.0);
        c.apply_override("train.student.epochs", "3").unwrap();
        assert_eq!(c.train.student.epochs, 3);
        c.apply_override("domains.0.tag", "law").unwrap();
        assert_eq!(c.domains[0].tag, "law");
        c.apply_override("train.teacher.select", "last").unwrap();
        assert_eq!(c.train.teacher.select, FinalSelection::Last);
        assert!(c.apply_override("distill.nope", "1").is_err());
        assert!(c.apply_override("train.student.epochs", "many").is_err());
    }

    #[test]
    fn validation() {
        let mut c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        c.domains.push(c.domains[0].clone());
        assert!(c.validate().is_err());
        c.domains.clear();
        assert!(c.validate().is_err());
    }
}
