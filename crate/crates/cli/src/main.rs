use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dsl_cli::ablation::{run_ablation, Benchmark};
use dsl_cli::error::{usage, HarnessError, Result, EXIT_OK, EXIT_USAGE};
use dsl_cli::ops::{self, Split};
use dsl_cli::plot::plot_run;
use dsl_cli::run::{run_training, write_eval_outputs, TrainJob};
use dsl_core::dataset::Scene;
use dsl_core::trainer::{Mode, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "dsl", version, about = "Dense semi-supervised detection on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, env = "DSL_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Write a labeled/unlabeled split of a dataset.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        fraction: f64,
        #[arg(long, env = "DSL_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the labeled images only.
    TrainSupervised(TrainArgs),
    /// Train with burn-in followed by dense semi-supervised learning.
    TrainDsl(TrainArgs),
    /// Score a checkpoint or a predictions file against a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Directory for summary.txt, eval.json and pr_curves/.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write detections of a checkpoint as JSON lines.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the teacher's partitioned pseudo-labels as JSON lines.
    ExportLabels {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Restrict to the unlabeled images of this split.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score the six-row feature lattice.
    Ablate {
        /// Training dataset; generated in memory when absent.
        #[arg(long, requires = "test_data")]
        data: Option<PathBuf>,
        #[arg(long)]
        test_data: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        fraction: f64,
        /// Pool and test sizes of the in-memory benchmark.
        #[arg(long, default_value_t = 1200)]
        pool: usize,
        #[arg(long, default_value_t = 200)]
        test: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Render SVG plots of a run directory into its plots/.
    Plot {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Held-out dataset scored at the end of training.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue an unfinished run from its newest checkpoint.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

/// Declares one optional long flag per configuration key.
macro_rules! config_flags {
    ($($(#[$meta:meta])* $key:ident),* $(,)?) => {
        #[derive(Args, Debug, Default)]
        struct ConfigArgs {
            /// Base `key = value` configuration file; flags override it.
            #[arg(long)]
            config: Option<PathBuf>,
            $(
                $(#[$meta])*
                #[arg(long, value_name = "VALUE")]
                $key: Option<String>,
            )*
        }

        impl ConfigArgs {
            fn overrides(&self) -> Vec<(&'static str, &str)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$key {
                        out.push((stringify!($key), v.as_str()));
                    }
                )*
                out
            }

            #[cfg(test)]
            fn keys() -> Vec<&'static str> {
                vec![$(stringify!($key)),*]
            }
        }
    };
}

config_flags! {
    mode, total_iters, burn_in_frac, labeled_batch, unlabeled_batch, lr, lr_decay, lr_milestones,
    momentum, weight_decay, grad_clip, alpha, gamma_scale, eps, tau1, tau, beta, clamp_lo, clamp_hi,
    stats_momentum, filter, single_threshold, metanet, d, metanet_steps, j, r, rla, weak_flip, jitter,
    max_cutouts, pseudo_score_thresh, nms_iou,
    #[arg(env = "DSL_SEED")]
    seed,
    model_seed, checkpoint_every,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
                    path: path.clone(),
                    source,
                })?;
                TrainConfig::from_text(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
            }
            None => TrainConfig::default(),
        };
        for (key, value) in self.overrides() {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn train(args: &TrainArgs, mode: Mode) -> Result<()> {
    let mut cfg = args.config.resolve()?;
    cfg.mode = mode;
    let scenes = ops::load_data(&args.data)?;
    let split = Split::load(&args.split, scenes.len())?;
    let eval_scenes = match &args.eval_data {
        Some(dir) => ops::load_data(dir)?,
        None => Vec::new(),
    };
    let job = TrainJob {
        cfg,
        labeled: split.labeled.iter().map(|&i| &scenes[i]).collect(),
        unlabeled: split.unlabeled.iter().map(|&i| &scenes[i].image).collect(),
        eval: eval_scenes.iter().collect(),
        out: args.out.clone(),
        resume: args.resume,
        command: command_line(),
    };
    let outcome = run_training(job, None)?;
    match outcome.eval {
        Some(r) => println!("{}: step {} mAP {:.4} AP50 {:.4}", outcome.run_id, outcome.state.step, r.map, r.ap50),
        None => println!("{}: step {}", outcome.run_id, outcome.state.step),
    }
    Ok(())
}

fn all_indices(scenes: &[Scene]) -> Vec<usize> {
    (0..scenes.len()).collect()
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData { out, n, seed } => {
            ops::gen_data(&out, n, seed)?;
            println!("wrote {n} scenes to {}", out.display());
        }
        Command::Split {
            data,
            fraction,
            seed,
            out,
        } => {
            let n = ops::load_data(&data)?.len();
            let split = Split::new(n, fraction, seed)?;
            split.save(&out)?;
            println!("{} labeled, {} unlabeled", split.labeled.len(), split.unlabeled.len());
        }
        Command::TrainSupervised(args) => train(&args, Mode::Supervised)?,
        Command::TrainDsl(args) => train(&args, Mode::Dsl)?,
        Command::Eval {
            data,
            checkpoint,
            predictions,
            out,
        } => {
            let (preds, cfg, steps) = match (checkpoint, predictions) {
                (Some(ckpt), _) => {
                    let ckpt = ops::load_checkpoint(&ckpt)?;
                    let scenes = ops::load_data(&data)?;
                    let preds = ops::predict(&ckpt, &scenes, &all_indices(&scenes))?;
                    (preds, ckpt.cfg, ckpt.state.step)
                }
                (None, Some(path)) => (ops::read_jsonl(&path)?, TrainConfig::default(), 0),
                (None, None) => return Err(usage("one of --checkpoint or --predictions is required")),
            };
            let result = ops::eval_predictions(&data, &preds)?;
            if let Some(out) = out {
                write_eval_outputs(&out, "eval", &cfg, steps, &result)?;
            }
            println!("mAP {:.4} AP50 {:.4}", result.map, result.ap50);
        }
        Command::Infer { checkpoint, data, out } => {
            let ckpt = ops::load_checkpoint(&checkpoint)?;
            let scenes = ops::load_data(&data)?;
            let preds = ops::predict(&ckpt, &scenes, &all_indices(&scenes))?;
            ops::write_jsonl(&out, &preds)?;
            println!("wrote detections for {} images to {}", preds.len(), out.display());
        }
        Command::ExportLabels {
            checkpoint,
            data,
            split,
            out,
        } => {
            let ckpt = ops::load_checkpoint(&checkpoint)?;
            let scenes = ops::load_data(&data)?;
            let indices = match split {
                Some(path) => Split::load(&path, scenes.len())?.unlabeled,
                None => all_indices(&scenes),
            };
            let labels = ops::export_labels(&ckpt, &scenes, &indices)?;
            ops::write_jsonl(&out, &labels)?;
            println!("wrote pseudo-labels for {} images to {}", labels.len(), out.display());
        }
        Command::Ablate {
            data,
            test_data,
            fraction,
            pool,
            test,
            out,
            config,
        } => {
            let cfg = config.resolve()?;
            let (train_scenes, test_scenes) = match (data, test_data) {
                (Some(d), Some(t)) => (ops::load_data(&d)?, ops::load_data(&t)?),
                _ => {
                    let b = Benchmark::generate(pool, test, &dsl_core::dataset::SceneConfig::default());
                    (b.pool, b.test)
                }
            };
            let split = Split::new(train_scenes.len(), fraction, cfg.seed)?;
            let labeled: Vec<&Scene> = split.labeled.iter().map(|&i| &train_scenes[i]).collect();
            let unlabeled: Vec<_> = split.unlabeled.iter().map(|&i| &train_scenes[i].image).collect();
            let test_refs: Vec<&Scene> = test_scenes.iter().collect();
            run_ablation(&cfg, &labeled, &unlabeled, &test_refs, &out, &command_line())?;
            print!("{}", std::fs::read_to_string(out.join("summary.txt")).unwrap_or_default());
        }
        Command::Plot { run } => {
            for path in plot_run(&run)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn report(err: &HarnessError) {
    eprintln!("error: {err}");
    let mut source = std::error::Error::source(err);
    while let Some(s) = source {
        eprintln!("  caused by: {s}");
        source = s.source();
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            report(&e);
            ExitCode::from(e.exit_code())
        }
    }
}
