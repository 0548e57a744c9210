use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vidground::commands::{
    cmd_eval, cmd_gen, cmd_gradcheck, cmd_infer, cmd_train, EvalSource, RunConfig, PREDICTIONS, REPORT_JSON,
};
use vidground::data::Task;
use vidground::inference::InferenceConfig;
use vidground::metrics::BaselineMode;
use vidground::synthgen::Split;
use vidground::tensors::OpKind;
use vidground::training::{Sampling, FINAL_CHECKPOINT, TRAIN_LOG};
use vidground::{Error, Result};

/// Multi-task video grounding on synthetic long videos.
#[derive(Parser, Debug)]
#[command(name = "vidground", version)]
struct Cli {
    /// JSON run configuration; omitted sections use defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for generation, initialisation, sampling and baselines.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Gen,
    /// Train a model on a dataset's train split.
    Train(TrainArgs),
    /// Predict response tracks for every query of a split.
    Infer(InferArgs),
    /// Score predictions (or a random baseline) against ground truth.
    Eval(EvalArgs),
    /// Finite-difference checks of every op, loss and the full model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated subset of vq2d,nlq,mq.
    #[arg(long)]
    tasks: Option<String>,
    /// round_robin or concat.
    #[arg(long)]
    sampling: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Start from the parameters of this checkpoint.
    #[arg(long)]
    init_from: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Comma-separated temporal strides used for every task.
    #[arg(long)]
    scales: Option<String>,
    #[arg(long)]
    step: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    /// Decode VQ2D over the whole video instead of at foreground peaks.
    #[arg(long)]
    no_foreground_head: bool,
    /// Attach per-frame boxes to NLQ/MQ candidates.
    #[arg(long)]
    emit_boxes: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    split: String,
    /// Score a random baseline (random_boxes or random_centered).
    #[arg(long)]
    baseline: Option<String>,
    /// Replace the boxes of --predictions with random ones of this kind.
    #[arg(long)]
    box_baseline: Option<String>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Scale this op's backward pass to make its check fail.
    #[arg(long)]
    corrupt: Option<String>,
    #[arg(long)]
    seeds: Option<usize>,
}

fn parse_scales(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad scale `{p}`")))
        })
        .collect()
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::Config("--out is required".into()))
}

fn apply_infer_flags(c: &mut InferenceConfig, a: &InferArgs) -> Result<()> {
    if let Some(s) = &a.scales {
        let v = parse_scales(s)?;
        for t in Task::ALL {
            *c.scales.get_mut(t) = v.clone();
        }
    }
    if a.step.is_some() {
        c.step = a.step;
    }
    if a.window.is_some() {
        c.window = a.window;
    }
    if a.no_foreground_head {
        c.use_foreground_head = false;
    }
    if a.emit_boxes {
        c.emit_boxes_for_temporal = true;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    match &cli.cmd {
        Command::Gen => {
            let out = out_dir(cli)?;
            let ds = cmd_gen(&cfg, out)?;
            println!("wrote {} episodes to {}", ds.episodes.len(), out.display());
        }
        Command::Train(a) => {
            if let Some(t) = &a.tasks {
                cfg.train.tasks = Task::parse_list(t)?;
            }
            if let Some(s) = &a.sampling {
                cfg.train.sampling = s.parse::<Sampling>()?;
            }
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            let out = out_dir(cli)?;
            let (_, summary) = cmd_train(&cfg, &a.data, out, a.init_from.as_deref())?;
            for (e, l) in summary.epoch_mean_loss.iter().enumerate() {
                println!("epoch {:>3}  mean loss {:.4}", e + 1, l);
            }
            println!(
                "checkpoint {}  log {}",
                out.join(FINAL_CHECKPOINT).display(),
                out.join(TRAIN_LOG).display()
            );
        }
        Command::Infer(a) => {
            apply_infer_flags(&mut cfg.inference, a)?;
            let out = out_dir(cli)?;
            let recs = cmd_infer(&cfg, &a.checkpoint, &a.data, out, a.split.parse()?)?;
            println!("wrote {} records to {}", recs.len(), out.join(PREDICTIONS).display());
        }
        Command::Eval(a) => {
            let source = match (&a.predictions, &a.baseline, &a.box_baseline) {
                (Some(p), None, None) => EvalSource::Predictions(p.clone()),
                (None, Some(b), None) => EvalSource::Baseline {
                    mode: b.parse::<BaselineMode>()?,
                    repeats: a.repeats,
                },
                (Some(p), None, Some(b)) => EvalSource::BoxBaseline {
                    predictions: p.clone(),
                    mode: b.parse::<BaselineMode>()?,
                    repeats: a.repeats,
                },
                _ => {
                    return Err(Error::Config(
                        "give --predictions, --baseline, or --predictions with --box-baseline".into(),
                    ))
                }
            };
            let out = out_dir(cli)?;
            let split: Split = a.split.parse()?;
            let r = cmd_eval(&cfg, &source, &a.data, out, split)?;
            print!("{}", r.mean);
            println!("report {}", out.join(REPORT_JSON).display());
        }
        Command::Gradcheck(a) => {
            if let Some(op) = &a.corrupt {
                cfg.gradcheck.corrupt = Some(op.parse::<OpKind>()?);
            }
            if let Some(s) = a.seeds {
                cfg.gradcheck.seeds = s;
            }
            let r = cmd_gradcheck(&cfg, cli.out.as_deref())?;
            print!("{r}");
            let ok = r.passed();
            println!("{}", if ok { "all checks passed" } else { "some checks FAILED" });
            return Ok(ok);
        }
    }
    Ok(true)
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
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            let msg = serde_json::to_string(&e.to_string()).unwrap_or_default();
            eprintln!("error kind={} message={msg}", e.kind());
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
