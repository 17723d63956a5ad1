use std::fs;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use pit_core::eval::{evaluate_corpus, ScoreMode};
use pit_core::mixer::{gen_corpus, Corpus, EVAL, EVAL_CLEAN, TRAIN, TRAIN_CLEAN};
use pit_core::network::{init_params, ModelParams};
use pit_core::trainer::{pit_gradient_check, train, train_baseline};
use rayon::ThreadPool;

use crate::config::ExperimentConfig;
use crate::{dump, Command, CommonArgs, EvalArgs, GenCorpusArgs, TrainArgs};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenCorpus(args) => gen(args),
        Command::Train(args) => train_cmd(args, false),
        Command::TrainBaseline(args) => train_cmd(args, true),
        Command::Eval(args) => eval(args),
        Command::Gradcheck(args) => {
            let report = pit_gradient_check(args.seed)?;
            println!("max_rel_err={:.1e}", report.max_relative_error);
            if report.max_relative_error < GRADCHECK_TOLERANCE {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!(
                    "gradient check failed at parameter {}: analytic {} vs numeric {}",
                    report.worst_index,
                    report.analytic[report.worst_index],
                    report.numeric[report.worst_index]
                );
                Ok(ExitCode::from(1))
            }
        }
        Command::Dump(args) => dump::run(args),
    }
}

/// Defaults, then the config file, then the shared flags; sub-seeds derived.
pub fn base_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = common.workers {
        cfg.workers = workers;
    }
    if cfg.workers == 0 {
        bail!("--workers must be at least 1");
    }
    cfg.derive_seeds();
    Ok(cfg)
}

pub fn thread_pool(workers: usize) -> Result<ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .context("building worker pool")
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn gen(args: GenCorpusArgs) -> Result<ExitCode> {
    let mut cfg = base_config(&args.common)?;
    let spec = &mut cfg.corpus;
    set(&mut spec.num_train, args.train);
    set(&mut spec.num_eval, args.eval);
    set(&mut spec.num_speakers, args.speakers);
    set(&mut spec.snrs_db, args.snrs);
    set(&mut spec.num_senones, args.senones);
    set(&mut spec.min_frames, args.min_frames);
    set(&mut spec.max_frames, args.max_frames);
    spec.validate()?;
    cfg.write_resolved(&args.out)?;

    let manifest = gen_corpus(&cfg.corpus, &cfg.frame, &args.out, cfg.workers)?;
    for split in &manifest.splits {
        println!("{}: {} utterances", split.name, split.samples.len());
    }
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(args: TrainArgs, baseline: bool) -> Result<ExitCode> {
    let mut cfg = base_config(&args.common)?;
    set(&mut cfg.train.learning_rate, args.lr);
    set(&mut cfg.train.clip_threshold, args.clip);
    set(&mut cfg.train.clip_mode, args.clip_mode);
    set(&mut cfg.train.minibatch_utterances, args.minibatch);
    set(&mut cfg.train.epochs, args.epochs);
    set(&mut cfg.model.hidden_dim, args.hidden);
    set(&mut cfg.model.num_layers, args.layers);
    set(&mut cfg.heldout_fraction, args.heldout_fraction);
    if args.time_budget.is_some() {
        cfg.train.time_budget_secs = args.time_budget;
    }
    if baseline {
        if args.streams.is_some_and(|s| s != 1) {
            bail!("train-baseline trains a single-stream model; drop --streams");
        }
        cfg.model.num_streams = 1;
    } else {
        set(&mut cfg.model.num_streams, args.streams);
    }
    if !(0.0..1.0).contains(&cfg.heldout_fraction) {
        bail!("heldout_fraction must lie in [0, 1)");
    }
    cfg.train.workers = cfg.workers;
    cfg.train.checkpoint_dir = Some(args.out.clone());

    let corpus = Corpus::open(&args.corpus)?;
    cfg.model.feat_dim = corpus.manifest().feat_dim;
    cfg.model.num_senones = corpus.manifest().num_senones;
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.write_resolved(&args.out)?;

    let mut samples = corpus.load_split(if baseline { TRAIN_CLEAN } else { TRAIN })?;
    if samples.is_empty() {
        bail!("corpus has no training utterances");
    }
    let n_heldout = (samples.len() as f64 * cfg.heldout_fraction).round() as usize;
    let heldout = samples.split_off(samples.len() - n_heldout.min(samples.len() - 1));
    let mut params = init_params(&cfg.model)?;
    let report = if baseline {
        train_baseline(&mut params, &samples, &heldout, &cfg.train)?
    } else {
        train(&mut params, &samples, &heldout, &cfg.train)?
    };
    if let Some(last) = report.epochs.last() {
        println!(
            "trained {} epochs on {} utterances: train J {:.4}, held-out J {}",
            report.epochs.len(),
            samples.len(),
            last.train_loss,
            last.heldout_loss.map_or("-".into(), |h| format!("{h:.4}"))
        );
    }
    if let Some(path) = &report.final_checkpoint {
        println!("final checkpoint: {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(args: EvalArgs) -> Result<ExitCode> {
    let cfg = base_config(&args.common)?;
    let params = ModelParams::load(&args.model)?;
    let corpus = Corpus::open(&args.corpus)?;
    let split = args.split.clone().unwrap_or_else(|| {
        match args.mode {
            ScoreMode::SingleOnClean => EVAL_CLEAN,
            _ => EVAL,
        }
        .to_string()
    });
    let samples = corpus.load_split(&split)?;
    let pool = thread_pool(cfg.workers)?;
    let report = pool.install(|| evaluate_corpus(&params, &samples, args.mode))?;
    let csv = report.to_csv();
    match &args.out {
        Some(path) => {
            fs::write(path, &csv).with_context(|| format!("writing {}", path.display()))?
        }
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}
