use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use litdec_core::conditioning::ImageRef;
use litdec_core::decoding::{beam_search, brute_force_oracle, greedy, LanguageModel, RandomLm};
use litdec_core::encoder::ToyEncoder;
use litdec_core::experiment::runner::{
    cell_eval_tasks, cell_tasks, evaluate, predict, train_model, Model,
};
use litdec_core::experiment::{
    preset, run, write_report, CellConfig, ExperimentConfig, RunOptions, Workspace, PRESETS,
};
use litdec_core::mixture::{reference_mixture, sampling_weights, MixtureSpec, Strategy};
use litdec_core::model::{Decoder, DecoderConfig, BOS, EOS};
use litdec_core::par::Exec;
use litdec_core::synth::{generate, render, SynthKind, SynthTaskConfig};
use litdec_core::tensor::gradcheck::{finite_difference_gradient, relative_error};
use litdec_core::tensor::GradTape;

#[derive(Parser)]
#[command(
    name = "litdec",
    version,
    about = "Train, evaluate and sweep multi-task image-to-text decoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Source {
    /// Experiment configuration file (INI).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset (see `litdec preset list`).
    #[arg(long)]
    preset: Option<String>,
    /// Override a value, e.g. `--set train.steps=200` or `--set task.cls.train_size=500`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (overrides `experiment.output`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

impl Source {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                ExperimentConfig::parse(&text)?
            }
            (None, Some(name)) => preset(name)?,
            (None, None) => bail!("pass --config FILE or --preset NAME"),
        };
        apply_sets(&mut cfg, &self.sets)?;
        if let Some(out) = &self.out {
            cfg.output = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::default()
        }
    }
}

fn apply_sets(cfg: &mut ExperimentConfig, sets: &[String]) -> Result<()> {
    for s in sets {
        let (key, value) = s
            .split_once('=')
            .with_context(|| format!("--set expects SECTION.KEY=VALUE, got {s:?}"))?;
        cfg.set(key.trim(), value.trim())?;
    }
    Ok(())
}

#[derive(Args)]
struct DecodeFlags {
    /// greedy, temperature, top_k, beam or score_classes.
    #[arg(long)]
    strategy: Option<String>,
    /// Beam width, or candidates for top-k.
    #[arg(long, short = 'k', alias = "beams")]
    k: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Gumbel noise scale for stochastic beam search.
    #[arg(long)]
    gumbel: Option<f64>,
    /// Length-normalization exponent.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl DecodeFlags {
    fn sets(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut push = |k: &str, x: Option<String>| {
            if let Some(x) = x {
                v.push(format!("decode.{k}={x}"));
            }
        };
        push("strategy", self.strategy.clone());
        push("k", self.k.map(|x| x.to_string()));
        push("temperature", self.temperature.map(|x| x.to_string()));
        push("gumbel", self.gumbel.map(|x| x.to_string()));
        push("alpha", self.alpha.map(|x| x.to_string()));
        push("max_len", self.max_len.map(|x| x.to_string()));
        push("seed", self.seed.map(|x| x.to_string()));
        v
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one cell for one seed and save the model.
    Train {
        #[command(flatten)]
        source: Source,
        /// Cell to train (defaults to the first cell, or all tasks).
        #[arg(long)]
        cell: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for the checkpoint and its configuration.
        #[arg(long)]
        model: PathBuf,
    },
    /// Evaluate a saved model on its cell's evaluation tasks.
    Eval {
        /// Directory written by `litdec train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        sets: Vec<String>,
        #[command(flatten)]
        decode: DecodeFlags,
    },
    /// Decode evaluation examples of one task with a saved model.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: String,
        /// Number of examples to print.
        #[arg(long, short = 'n', default_value_t = 5)]
        count: usize,
        #[command(flatten)]
        decode: DecodeFlags,
    },
    /// Run every cell and seed of an experiment, resuming finished cells.
    Sweep {
        #[command(flatten)]
        source: Source,
        /// Comma-separated subset of cells to run.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
    /// Aggregate a run directory into CSV and SVG plots.
    Report {
        /// Run directory containing per-seed JSON lines.
        input: PathBuf,
        /// Output directory (defaults to `<input>/report`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quick self-checks of gradients, search and mixture weights.
    OracleCheck,
    /// List or print built-in experiment presets.
    Preset {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    List,
    Show { name: String },
}

fn pick_cell(cfg: &ExperimentConfig, name: Option<&str>) -> Result<CellConfig> {
    match name {
        Some(n) => cfg
            .cells
            .iter()
            .find(|c| c.name == n)
            .cloned()
            .or_else(|| {
                (cfg.cells.is_empty() && n == "default").then(|| CellConfig::new("default", &[]))
            })
            .with_context(|| format!("no cell named {n:?}")),
        None => Ok(cfg
            .cells
            .first()
            .cloned()
            .unwrap_or_else(|| CellConfig::new("default", &[]))),
    }
}

const MODEL_CONFIG: &str = "config.ini";
const MODEL_CELL: &str = "cell.txt";

fn load_model(dir: &Path, sets: &[String]) -> Result<(Workspace, Model, CellConfig)> {
    let text = fs::read_to_string(dir.join(MODEL_CONFIG))
        .with_context(|| format!("{} is not a model directory", dir.display()))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    let cell_name = fs::read_to_string(dir.join(MODEL_CELL)).unwrap_or_default();
    let cell = pick_cell(&cfg, Some(cell_name.trim()).filter(|s| !s.is_empty()))?;
    cfg = cfg.for_cell(&cell)?;
    apply_sets(&mut cfg, sets)?;
    let ws = Workspace::prepare(&cfg)?;
    let model = Model::load(dir, &ws)?;
    Ok((ws, model, cell))
}

fn oracle_check() -> Result<bool> {
    let mut ok = true;
    let mut report = |name: &str, pass: bool, detail: String| {
        println!("{} {name}: {detail}", if pass { "ok  " } else { "FAIL" });
        ok &= pass;
    };

    let dec = Decoder::new(
        DecoderConfig {
            depth: 1,
            model_dim: 16,
            heads: 2,
            mlp_dim: 16,
            vocab_size: 10,
            max_len: 6,
            dropout: 0.0,
            encoder_dim: 16,
            ..DecoderConfig::default()
        },
        1,
    )?
    .cast::<f64>();
    let enc = ToyEncoder::<f32>::new(16, 2, 2)?;
    let example = generate(&SynthTaskConfig::new(
        SynthKind::ClassifyDominantGlyph,
        1,
        3,
    ))?
    .remove(0);
    let ImageRef::Inline(spec) = &example.image else {
        bail!("synthetic example without an inline image");
    };
    let img = enc.encode_patches(&render(spec))?.cast::<f64>();
    let ids = [BOS, 5, 7, 2, EOS];
    let loss = |d: &Decoder<f64>, grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = GradTape::<f64>::new();
        let vars = d.register(&mut tape, true);
        let x = tape.constant(img.tokens().clone());
        let memory = d.memory_on_tape(&mut tape, &vars, x)?;
        let logits = d.logits_on_tape(&mut tape, &vars, memory, &ids[..4], 0, None)?;
        let l = tape.smoothed_cross_entropy(logits, &[5, 7, 2, 1], &[true; 4], 0.1)?;
        let value = tape.value(l).data()[0];
        if !grad {
            return Ok((value, Vec::new()));
        }
        let mut g = tape.backward(l)?;
        Ok((value, vars.vars.iter().map(|&v| g.take(v)).collect()))
    };
    let (_, analytic) = loss(&dec, true)?;
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let mut probe = dec.clone();
        let base = dec.params().tensors()[i].data().to_vec();
        let numeric = finite_difference_gradient(
            |theta| {
                probe.params_mut().tensors_mut()[i]
                    .data_mut()
                    .copy_from_slice(theta);
                loss(&probe, false).map(|r| r.0).unwrap_or(f64::NAN)
            },
            &base,
            1e-5,
        )?;
        let scale = a
            .iter()
            .chain(&numeric)
            .map(|x| x.abs())
            .fold(0.0, f64::max);
        if scale > 1e-8 {
            worst = worst.max(relative_error(a, &numeric));
        }
    }
    report(
        "decoder gradients",
        worst < 1e-3,
        format!("worst relative error {worst:.2e}"),
    );

    let mut agree = 0;
    for seed in 0..20 {
        let lm = RandomLm {
            vocab: 4,
            max_len: 3,
            seed,
            spread: 3.0,
        };
        let limit = lm.capacity(1);
        let exact = brute_force_oracle(&lm, &[BOS], limit, 0.6)?;
        let beam = beam_search(&lm, &[BOS], 64, 0.0, 0.6, limit, 0)?.best;
        let narrow = beam_search(&lm, &[BOS], 1, 0.0, 0.6, limit, 0)?.best;
        if beam.tokens == exact.tokens && narrow.tokens == greedy(&lm, &[BOS], limit)? {
            agree += 1;
        }
    }
    report(
        "beam search",
        agree == 20,
        format!("{agree}/20 models match exhaustive and greedy search"),
    );

    let tasks = reference_mixture();
    let w = sampling_weights(&MixtureSpec::new(Strategy::ConcatImages, tasks, 64, 0))?;
    report(
        "mixture weights",
        (w.iter().sum::<f64>() - 1.0).abs() < 1e-12 && w[0] > 0.5,
        format!("largest task share {:.3}", w[0]),
    );
    Ok(ok)
}

fn main_inner() -> Result<bool> {
    match Cli::parse().command {
        Command::Train {
            source,
            cell,
            seed,
            model,
        } => {
            let cfg = source.load()?;
            let cell = pick_cell(&cfg, cell.as_deref())?;
            let cell_cfg = cfg.for_cell(&cell)?;
            let ws = Workspace::prepare(&cell_cfg)?;
            let tasks = cell_tasks(&cell_cfg, &cell);
            let (trained, report) = train_model(
                &ws,
                &tasks,
                seed,
                source.exec(),
                &cell_eval_tasks(&cell_cfg, &cell),
            )?;
            trained.save(&model)?;
            fs::write(model.join(MODEL_CONFIG), cfg.emit())?;
            fs::write(model.join(MODEL_CELL), &cell.name)?;
            let tail = &report.losses[report.losses.len() - report.losses.len().div_ceil(10)..];
            let final_loss = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
            println!(
                "trained {} on [{}] for {} steps, final loss {final_loss:.4}; saved to {}",
                cell.name,
                tasks.join(", "),
                report.steps,
                model.display()
            );
        }
        Command::Eval {
            model,
            sets,
            decode,
        } => {
            let mut sets = sets;
            sets.extend(decode.sets());
            let (ws, m, cell) = load_model(&model, &sets)?;
            let tasks = cell_eval_tasks(&ws.config, &cell);
            let out = evaluate(&ws, &m.decoder, &m.encoder, &tasks, 0, Exec::default())?;
            for r in out.records {
                println!("{}\t{}\t{:.3}\t(n={})", r.task, r.metric, r.value, r.count);
            }
        }
        Command::Decode {
            model,
            task,
            count,
            decode,
        } => {
            let (ws, m, _) = load_model(&model, &decode.sets())?;
            let ti = ws.task_index(&task)?;
            let params = ws.decode_params(ti)?;
            for e in ws.eval_sets[ti].iter().take(count) {
                let pred = predict(&ws, &m.decoder, &m.encoder, ti, e, &params)?;
                println!(
                    "{}\n  prompt: {}\n  output: {pred}\n  target: {}",
                    e.id, e.prefix_text, e.target_text
                );
            }
        }
        Command::Sweep { source, only } => {
            let mut cfg = source.load()?;
            if !only.is_empty() {
                if let Some(bad) = only
                    .iter()
                    .find(|n| !cfg.cells.iter().any(|c| &c.name == *n))
                {
                    bail!("no cell named {bad:?}");
                }
                cfg.cells.retain(|c| only.contains(&c.name));
            }
            let report = run(
                &cfg,
                &RunOptions {
                    exec: source.exec(),
                    ..RunOptions::default()
                },
            )?;
            println!(
                "{} cells run, {} skipped; results in {}",
                report.completed.len(),
                report.skipped.len(),
                cfg.output.display()
            );
        }
        Command::Report { input, out } => {
            let out = out.unwrap_or_else(|| input.join("report"));
            let report = write_report(&input, &out)?;
            print!("{}", report.aggregate.to_csv());
            if report.aggregate.malformed > 0 {
                eprintln!("skipped {} malformed lines", report.aggregate.malformed);
            }
            eprintln!("wrote {} files to {}", report.files.len(), out.display());
        }
        Command::OracleCheck => return oracle_check(),
        Command::Preset { action } => match action {
            PresetAction::List => {
                for name in PRESETS {
                    let cfg = preset(name)?;
                    println!(
                        "{name}\t{} cells, {} tasks",
                        cfg.cells.len(),
                        cfg.tasks.len()
                    );
                }
            }
            PresetAction::Show { name } => print!("{}", preset(&name)?.emit()),
        },
    }
    Ok(true)
}

fn main() -> ExitCode {
    match main_inner() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
