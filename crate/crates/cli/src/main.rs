use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use reverse_cli::commands::{self, render_report, render_sweep};
use reverse_cli::{ExitError, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "reverse", version, about = "Hallucination-aware decoding with retrospective resampling")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// JSON config file; falls back to $REVERSE_CONFIG.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    tau: Option<f64>,
    #[arg(long = "max-corrections", global = true)]
    max_corrections: Option<usize>,
    #[arg(long = "local-attempts", global = true)]
    local_attempts: Option<usize>,
    #[arg(long = "temp-base", global = true)]
    temp_base: Option<f64>,
    #[arg(long = "temp-step", global = true)]
    temp_step: Option<f64>,
    /// Greedy decoding with corrections disabled.
    #[arg(long, global = true)]
    baseline: bool,
    /// Write the decoder event trace as JSONL.
    #[arg(long, global = true)]
    trace: Option<PathBuf>,
    /// Remote distribution server instead of a params file.
    #[arg(long, global = true)]
    endpoint: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic trap-world training set and prompt file.
    Synth {
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long = "train-scenes")]
        train_scenes: Option<usize>,
        #[arg(long = "prompt-scenes")]
        prompt_scenes: Option<usize>,
        #[arg(long)]
        split: Option<u32>,
    },
    /// Annotate a raw corpus and derive negatives.
    Curate {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long = "hint-rate")]
        hint_rate: Option<f64>,
        #[arg(long = "skip-list")]
        skip_list: Option<PathBuf>,
        #[arg(long)]
        dictionary: Option<PathBuf>,
    },
    /// Train the toy model with the masked loss.
    Train {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long = "learning-rate")]
        learning_rate: Option<f64>,
        #[arg(long = "context-window")]
        context_window: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Decode a prompt file.
    Decode {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        params: Option<PathBuf>,
        /// Retry blank answers with a clarification request.
        #[arg(long = "open-ended")]
        open_ended: bool,
    },
    /// Score captions against annotated objects.
    Eval {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        objects: Option<Vec<String>>,
    },
    /// Serve a params file over the distribution protocol on loopback.
    Serve {
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8088")]
        bind: String,
    },
    /// Decode and evaluate over a grid of thresholds.
    Sweep {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
    },
}

fn set<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn run(cli: Cli) -> Result<u8> {
    let g = cli.global;
    let mut cfg = RunConfig::resolve(g.config.as_deref())?;
    cfg.apply(&Overrides {
        seed: g.seed,
        tau: g.tau,
        max_corrections: g.max_corrections,
        local_attempts: g.local_attempts,
        temp_base: g.temp_base,
        temp_step: g.temp_step,
        baseline: g.baseline,
        trace: g.trace,
        endpoint: g.endpoint,
    });
    let p = &mut cfg.paths;
    match &cli.command {
        Command::Synth { output, prompts, train_scenes, prompt_scenes, split } => {
            set(&mut p.output, output.clone());
            set(&mut p.prompts, prompts.clone());
            cfg.synth.train_scenes = train_scenes.unwrap_or(cfg.synth.train_scenes);
            cfg.synth.prompt_scenes = prompt_scenes.unwrap_or(cfg.synth.prompt_scenes);
            cfg.synth.split = split.unwrap_or(cfg.synth.split);
        }
        Command::Curate { input, output, stats, hint_rate, skip_list, dictionary } => {
            set(&mut p.input, input.clone());
            set(&mut p.output, output.clone());
            set(&mut p.stats, stats.clone());
            set(&mut p.skip_list, skip_list.clone());
            set(&mut p.dictionary, dictionary.clone());
            cfg.curation.hint_rate = hint_rate.unwrap_or(cfg.curation.hint_rate);
        }
        Command::Train { input, output, epochs, learning_rate, context_window, dim } => {
            set(&mut p.input, input.clone());
            set(&mut p.output, output.clone());
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            cfg.train.learning_rate = learning_rate.unwrap_or(cfg.train.learning_rate);
            cfg.train.context_window = context_window.unwrap_or(cfg.train.context_window);
            cfg.train.dim = dim.unwrap_or(cfg.train.dim);
        }
        Command::Decode { input, output, params, open_ended } => {
            set(&mut p.input, input.clone());
            set(&mut p.output, output.clone());
            set(&mut p.params, params.clone());
            cfg.open_ended |= open_ended;
        }
        Command::Eval { input, output, rounds, objects } => {
            set(&mut p.input, input.clone());
            set(&mut p.output, output.clone());
            cfg.eval.bootstrap_rounds = rounds.unwrap_or(cfg.eval.bootstrap_rounds);
            if let Some(o) = objects {
                cfg.eval.objects = o.clone();
            }
        }
        Command::Serve { params, .. } => set(&mut p.params, params.clone()),
        Command::Sweep { input, output, params, taus } => {
            set(&mut p.input, input.clone());
            set(&mut p.output, output.clone());
            set(&mut p.params, params.clone());
            if let Some(t) = taus {
                cfg.sweep.taus = t.clone();
            }
        }
    }
    let cfg = cfg.finalize()?;

    match cli.command {
        Command::Synth { .. } => {
            let s = commands::cmd_synth(&cfg)?;
            println!("wrote {} training samples and {} prompts", s.training_samples, s.prompts);
        }
        Command::Curate { .. } => {
            let stats = commands::cmd_curate(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Train { .. } => {
            let t = commands::cmd_train(&cfg)?;
            println!(
                "trained {} parameters: loss {:.6} -> {:.6}",
                t.params.num_parameters(),
                t.losses.first().copied().unwrap_or(f64::NAN),
                t.losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Decode { .. } => {
            let d = commands::cmd_decode(&cfg)?;
            println!("decoded {} prompts, {} failed", d.results.len() - d.failed, d.failed);
            if d.failed > 0 {
                return Ok(1);
            }
        }
        Command::Eval { .. } => {
            let report = commands::cmd_eval(&cfg)?;
            print!("{}", render_report(&report));
        }
        Command::Serve { bind, .. } => commands::cmd_serve(&cfg, &bind)?,
        Command::Sweep { .. } => {
            let rows = commands::cmd_sweep(&cfg)?;
            print!("{}", render_sweep(&rows));
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.downcast_ref::<ExitError>().map_or(1, |x| x.code))
        }
    }
}
