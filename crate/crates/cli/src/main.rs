//! `mdkd`: one subcommand per pipeline stage. Stages exchange data only through
//! the run directory given by `--out`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mdkd::pipeline::{EvalReport, Experiment, ExperimentConfig};
use mdkd::synthetic::{generate, SyntheticSpec};
use mdkd::{Error, Result};

const PREPROCESS_KEYS: &str = "\
Config keys read:
  generic.train_src, generic.train_tgt, generic.dev_src, generic.dev_tgt
  domains[].tag, domains[].{train,dev,test}_{src,tgt}
  preprocess.bpe_merges   BPE merge operations learned jointly on all training text
  preprocess.max_len      drop training pairs with a side longer than this (tokens)
  preprocess.max_ratio    drop training pairs whose length ratio exceeds this";

const SELECT_KEYS: &str = "\
Config keys read:
  lm.order, lm.weights (unigram first; empty = uniform), lm.normalized
  selection.alpha, selection.beta, selection.nu, selection.integer_exponent
  train.teacher.epochs    number of per-epoch subset files written";

const TRAIN_KEYS: &str = "\
Config keys read:
  seed, model.{embed_dim,hidden_dim,max_decode_len}, student_model.*
  train.<stage>.{epochs,batch_size,lr_scale,warmup_steps,label_smoothing,
    max_grad_norm,checkpoint_every,patience,select,average_last,dropout}
    (stage = generic, teacher, student; baseline uses train.student)
  selection.* (teacher), distill.lambda, distill.top_k, student_generic_fraction (student, baseline)
Training resumes from the latest complete checkpoint in <out>/<stage>/ckpt.";

const DISTILL_KEYS: &str = "\
Config keys read:
  distill.top_k           teacher probabilities kept per target position";

const EVALUATE_KEYS: &str = "\
Config keys read:
  domains[].tag, domains[].test_{src,tgt} (through the preprocessed data)
Writes <out>/eval/report.json and prints the BLEU and Δ tables.";

#[derive(Parser, Debug)]
#[command(name = "mdkd", version, about = "Multi-domain NMT through multi-teacher word-level distillation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Sets a dotted config key, e.g. `distill.lambda=0.5`. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// More logging; repeat for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Stage {
    Generic,
    Teacher,
    Student,
    Baseline,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn BPE and the vocabulary, filter and encode every corpus.
    #[command(after_help = PREPROCESS_KEYS)]
    Preprocess,
    /// Rank generic data by cross-entropy difference for each domain.
    #[command(after_help = SELECT_KEYS)]
    Select,
    /// Train one stage: generic model, teachers, distilled student or the finetuning baseline.
    #[command(after_help = TRAIN_KEYS)]
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
    },
    /// Write each teacher's top-K distributions over its domain's training set.
    #[command(after_help = DISTILL_KEYS)]
    DistillTargets,
    /// Score all trained systems on the domain test sets.
    #[command(after_help = EVALUATE_KEYS)]
    Evaluate,
    /// Run every stage in order.
    Run,
    /// Write the synthetic multi-domain task and a matching config into a directory.
    Synthetic {
        /// Destination directory.
        dir: PathBuf,
        #[arg(long, default_value_t = 2)]
        domains: usize,
        #[arg(long, default_value_t = 1)]
        data_seed: u64,
    },
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let path = g
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required for this subcommand".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    for o in &g.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not KEY=VALUE")))?;
        cfg.apply_override(k.trim(), v.trim())?;
    }
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(cfg)
}

fn print_report(r: &EvalReport) {
    print!("{:<10}", "system");
    for d in &r.domains {
        print!(" {d:>10}");
    }
    println!(" {:>10}", "mean");
    for (name, scores) in &r.systems {
        print!("{name:<10}");
        for d in &r.domains {
            match scores.get(d) {
                Some(b) => print!(" {:>10.2}", b.score),
                None => print!(" {:>10}", "-"),
            }
        }
        println!(" {:>10.2}", r.mean(name).unwrap_or(0.0));
    }
    if let Some(delta) = &r.delta {
        print!("{:<10}", "delta");
        for d in &r.domains {
            print!(" {:>+10.2}", delta.per_domain[d]);
        }
        println!(" {:>+10.2}", delta.mean);
    }
}

fn write_synthetic(dir: &Path, domains: usize, seed: u64) -> Result<()> {
    let spec = SyntheticSpec { num_domains: domains, seed, ..Default::default() };
    generate(&spec)?.write(dir)?;
    let path = dir.join("experiment.toml");
    std::fs::write(&path, mdkd::synthetic::example_config(domains)).map_err(|e| Error::io(path, e))?;
    println!("wrote synthetic corpora and experiment.toml to {}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Synthetic { dir, domains, data_seed } = &cli.command {
        return write_synthetic(dir, *domains, *data_seed);
    }
    let cfg = load_config(&cli.global)?;
    let exp = Experiment::create(cfg, &cli.global.out)?;
    match cli.command {
        Command::Preprocess => {
            let d = exp.preprocess()?;
            println!("vocabulary: {} types, fingerprint {}", d.vocab.len(), d.vocab.fingerprint());
        }
        Command::Select => {
            for (tag, ranking) in exp.select()? {
                println!("{tag}: ranked {} generic pairs", ranking.len());
            }
        }
        Command::Train { stage } => match stage {
            Stage::Generic => drop(exp.train_generic()?),
            Stage::Teacher => drop(exp.finetune_teachers()?),
            Stage::Student => drop(exp.train_student()?),
            Stage::Baseline => drop(exp.train_baseline()?),
        },
        Command::DistillTargets => {
            for s in exp.distill_targets()? {
                println!("{}: {} sentences, K = {}", s.teacher_tag, s.len(), s.top_k);
            }
        }
        Command::Evaluate => print_report(&exp.evaluate()?),
        Command::Run => print_report(&exp.run_all()?),
        Command::Synthetic { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
