use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use clasp_core::blockworld::{parse_caption, tokenize};
use clasp_core::datastore::{
    generate_dataset, load_dataset, save_dataset, Dataset, DatasetRecord, HeldoutMode,
    DEFAULT_RATIOS,
};
use clasp_core::evalsuite::{
    ablation_run, describe, format_table, run_suite, text_rollouts, to_csv, EvalOptions, ResultRow,
};
use clasp_core::trainer::{fit, fit_prior, resume, Checkpoint, FitOptions, TrainConfig, Trainer};
use clasp_core::{ClaspError, Result};

#[derive(Parser)]
#[command(
    name = "clasp",
    version,
    about = "Language-action-state pre-training on a block world"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Retrieval,
    Caption,
    Exploration,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a split dataset of scripted demonstrations.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        num: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `unseen` (held-out factor combinations) or `random`.
        #[arg(long, default_value = "unseen")]
        heldout_mode: HeldoutMode,
    },
    /// Train encoders, captioner and policy on the train split.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// `key = value` lines; unset keys keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        /// Per-step loss CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long, conflicts_with_all = ["config", "seed"])]
        resume: Option<PathBuf>,
    },
    /// Fit the state-conditioned behavior prior on a trained checkpoint.
    TrainPrior {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
        #[arg(long, default_value_t = 15)]
        pool_size: usize,
        #[arg(long, default_value_t = 300)]
        trials: usize,
        #[arg(long, default_value_t = 3)]
        beam: usize,
        #[arg(long)]
        caption_limit: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Result CSV (`variant,metric,value,seed`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Describe one trajectory of a dataset in words.
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        traj_id: u64,
        #[arg(long, default_value_t = 3)]
        beam: usize,
    },
    /// Roll out the policy conditioned on a command.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset whose block table the rollouts use.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate several configurations on one dataset.
    Ablate {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Seeds to run every configuration with; defaults to each file's own seed.
        #[arg(long, num_args = 1..)]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 15)]
        pool_size: usize,
        #[arg(long, default_value_t = 300)]
        trials: usize,
        #[arg(long)]
        caption_limit: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

fn eval_options(suite: Suite) -> EvalOptions {
    let only = |r, c, e| EvalOptions {
        retrieval: r,
        caption: c,
        exploration: e,
        ..EvalOptions::default()
    };
    match suite {
        Suite::Retrieval => only(true, false, false),
        Suite::Caption => only(false, true, false),
        Suite::Exploration => only(false, false, true),
        Suite::All => only(true, true, true),
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            out,
            num,
            seed,
            heldout_mode,
        } => {
            let ds = generate_dataset(num, seed, heldout_mode, DEFAULT_RATIOS)?;
            save_dataset(&ds, &out)?;
            println!(
                "wrote {} records (train {}, val {}, test {}) to {}",
                ds.records.len(),
                ds.splits.train,
                ds.splits.val,
                ds.splits.test,
                out.display()
            );
        }
        Command::Train {
            data,
            config,
            out,
            seed,
            steps,
            metrics,
            resume: from,
        } => {
            let ds = load_dataset(&data)?;
            let opts = FitOptions {
                metrics,
                checkpoint: Some(out.clone()),
            };
            let ck = match from {
                Some(p) => {
                    let mut ck = Checkpoint::load(&p)?;
                    if let Some(s) = steps {
                        ck.config.steps = s;
                    }
                    resume(&ck, ds.train(), &opts)?
                }
                None => {
                    let mut c = match config {
                        Some(p) => TrainConfig::from_file(&p)?,
                        None => TrainConfig::default(),
                    };
                    if let Some(s) = seed {
                        c.seed = s;
                    }
                    if let Some(s) = steps {
                        c.steps = s;
                    }
                    c.validate()?;
                    fit(c, ds.vocab.clone(), ds.train(), &opts)?
                }
            };
            println!("trained to step {}, checkpoint {}", ck.step, out.display());
        }
        Command::TrainPrior {
            ckpt,
            data,
            out,
            metrics,
        } => {
            let ds = load_dataset(&data)?;
            let ck = Checkpoint::load(&ckpt)?;
            let opts = FitOptions {
                metrics,
                checkpoint: Some(out.clone()),
            };
            let ck = fit_prior(&ck, ds.train(), &opts)?;
            println!(
                "prior fitted for {} steps, checkpoint {}",
                ck.prior_step,
                out.display()
            );
        }
        Command::Eval {
            ckpt,
            data,
            suite,
            pool_size,
            trials,
            beam,
            caption_limit,
            seed,
            out,
        } => {
            let ds = load_dataset(&data)?;
            let ck = Checkpoint::load(&ckpt)?;
            let t = Trainer::from_checkpoint(&ck)?;
            let opts = EvalOptions {
                pool_size,
                trials,
                beam,
                caption_limit,
                seed,
                ..eval_options(suite)
            };
            let results = run_suite(&t, &ds, &opts)?;
            let variant = stem(&ckpt);
            let rows: Vec<ResultRow> = results
                .into_iter()
                .map(|(metric, value)| ResultRow {
                    variant: variant.clone(),
                    metric,
                    value,
                    seed,
                })
                .collect();
            for r in &rows {
                println!("{} {:.4}", r.metric, r.value);
            }
            if let Some(p) = out {
                std::fs::write(p, to_csv(&rows))?;
            }
        }
        Command::Caption {
            ckpt,
            data,
            traj_id,
            beam,
        } => {
            let ds = load_dataset(&data)?;
            let rec = ds.record(traj_id).ok_or_else(|| {
                ClaspError::InvalidInput(format!("no trajectory with id {traj_id}"))
            })?;
            let ck = Checkpoint::load(&ckpt)?;
            let t = Trainer::from_checkpoint(&ck)?;
            let tokens = describe(&t.model, &t.store, &rec.trajectory, beam)?;
            println!("{}", ck.vocab.decode(&tokens));
            println!("reference: {}", ck.vocab.decode(&rec.caption));
            match parse_caption(&tokens) {
                Some(f) if f == rec.factors => println!("slots: match"),
                Some(_) => println!("slots: mismatch"),
                None => println!("slots: unparseable"),
            }
        }
        Command::Generate {
            ckpt,
            data,
            text,
            trials,
            seed,
            out,
        } => {
            let ds = load_dataset(&data)?;
            let ck = Checkpoint::load(&ckpt)?;
            let t = Trainer::from_checkpoint(&ck)?;
            let caption = tokenize(&ck.vocab, &text);
            let factors = parse_caption(&caption).ok_or_else(|| {
                ClaspError::InvalidInput(format!("{text:?} is not a command the templates produce"))
            })?;
            let trajs = text_rollouts(&t.model, &t.store, &caption, trials, seed)?;
            let records = trajs
                .into_iter()
                .enumerate()
                .map(|(i, trajectory)| DatasetRecord {
                    record_id: i as u64,
                    trajectory,
                    caption: caption.clone(),
                    factors,
                })
                .collect();
            let gen = Dataset::unsplit(ck.vocab.clone(), ds.blocks.clone(), records);
            save_dataset(&gen, &out)?;
            println!("wrote {trials} rollouts to {}", out.display());
        }
        Command::Ablate {
            configs,
            data,
            seeds,
            pool_size,
            trials,
            caption_limit,
            out,
        } => {
            let ds = load_dataset(&data)?;
            let mut variants = Vec::new();
            for p in &configs {
                let c = TrainConfig::from_file(p)?;
                for &s in &seeds {
                    variants.push((
                        stem(p),
                        TrainConfig {
                            seed: s,
                            ..c.clone()
                        },
                    ));
                }
                if seeds.is_empty() {
                    variants.push((stem(p), c));
                }
            }
            let opts = EvalOptions {
                pool_size,
                trials,
                caption_limit,
                ..EvalOptions::default()
            };
            let rows = ablation_run(&variants, &ds, &opts)?;
            print!("{}", format_table(&rows));
            if let Some(p) = out {
                std::fs::write(p, to_csv(&rows))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
