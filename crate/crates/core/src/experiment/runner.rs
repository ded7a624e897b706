//! Data preparation, training, evaluation and sweep execution.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::{CellConfig, EvalMode, ExperimentConfig, TaskConfig};
use super::report::{mean_std, SUMMARY_HEADER};
use crate::conditioning::{
    build_prefix, build_sequence, class_token_remap, encode_label, Category, ConditioningMode,
    Example, ImageRef, Metric, TaskRegistry, TaskSpec, Vocabulary,
};
use crate::decoding::{decode, DecodeParams, DecoderLm, Strategy as DecodeStrategy};
use crate::encoder::{EncodedImage, ToyEncoder};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, cider_reported, EvalRecord};
use crate::mixture::{MixtureSpec, MixtureTask, Sampler};
use crate::model::{Decoder, DecoderConfig, EOS};
use crate::par::{self, Exec};
use crate::params::ParamStore;
use crate::synth::{
    caption_words, generate, GlyphImageSpec, LanguageRemap, SynthKind, SynthTaskConfig, COLORS,
    GLYPHS, NUM_PATCHES,
};
use crate::train::{total_steps, train, ImageBank, TrainData, TrainItem, TrainReport};

const EVAL_SEED_SALT: u64 = 0x5eed_e7a1;

/// Registered tasks, vocabulary and generated datasets for one configuration.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub config: ExperimentConfig,
    pub registry: TaskRegistry,
    /// Indexed like `config.tasks`.
    pub train_sets: Vec<Vec<Example>>,
    pub eval_sets: Vec<Vec<Example>>,
}

fn synth_config(t: &TaskConfig, size: usize, seed: u64) -> SynthTaskConfig {
    SynthTaskConfig {
        kind: t.kind,
        size,
        seed,
        language: t.language.clone(),
        overlap: t.overlap,
        task: t.name.clone(),
    }
}

impl Workspace {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        let mut registry = TaskRegistry::new();
        for t in &config.tasks {
            registry.register(&t.name, t.category, t.metric, t.train_size)?;
        }
        let mut words = caption_words();
        words.extend((0..=NUM_PATCHES).map(|n| n.to_string()));
        words.push("count".into());
        registry.vocab.add_words(&words);
        for t in &config.tasks {
            if t.kind == SynthKind::CaptionLayout && t.language != "en" {
                let remap = LanguageRemap::new(&t.language, t.overlap);
                registry
                    .vocab
                    .add_words(caption_words().iter().map(|w| remap.word(w)));
            }
        }
        let mut train_sets = Vec::new();
        let mut eval_sets = Vec::new();
        for t in &config.tasks {
            train_sets.push(generate(&synth_config(t, t.train_size, t.seed))?);
            eval_sets.push(if t.eval_size == 0 {
                Vec::new()
            } else {
                generate(&synth_config(t, t.eval_size, t.seed ^ EVAL_SEED_SALT))?
            });
        }
        for e in train_sets.iter().chain(&eval_sets).flatten() {
            registry.vocab.add_words(e.prefix_text.split_whitespace());
            registry.vocab.add_words(e.target_text.split_whitespace());
        }
        let classes: Vec<String> = GLYPHS.iter().map(|s| s.to_string()).collect();
        for (i, t) in config.tasks.iter().enumerate() {
            if t.class_tokens {
                let (vocab, spec) =
                    class_token_remap(&registry.tasks[i], &classes, &registry.vocab)?;
                registry.vocab = vocab;
                registry.tasks[i] = spec;
            }
        }
        Ok(Self {
            config: config.clone(),
            registry,
            train_sets,
            eval_sets,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.registry.vocab
    }

    pub fn task_index(&self, name: &str) -> Result<usize> {
        self.registry
            .index(name)
            .ok_or_else(|| Error::config(format!("unknown task {name:?}")))
    }

    pub fn spec(&self, i: usize) -> &TaskSpec {
        &self.registry.tasks[i]
    }

    /// Decoder configuration with vocabulary size and table count filled in.
    pub fn decoder_config(&self) -> DecoderConfig {
        let mut d = self.config.decoder.clone();
        d.vocab_size = self.registry.vocab.len();
        d.position_tables = if self.config.conditioning == ConditioningMode::TaskPositionEmbeddings
        {
            self.config.tasks.len()
        } else {
            1
        };
        d
    }

    pub fn encoder(&self) -> Result<ToyEncoder<f32>> {
        ToyEncoder::new(
            self.config.decoder.encoder_dim,
            self.config.encoder_heads,
            self.config.encoder_seed,
        )
    }

    /// Decode parameters for task `i` after its overrides.
    pub fn decode_params(&self, i: usize) -> Result<DecodeParams> {
        let mut p = self.config.decode.clone();
        for (k, v) in &self.config.tasks[i].decode {
            p.set(k, v)?;
        }
        Ok(p)
    }
}

/// A trained decoder and the encoder it reads from.
#[derive(Clone, Debug)]
pub struct Model {
    pub decoder: Decoder<f32>,
    pub encoder: ToyEncoder<f32>,
}

impl Model {
    /// Writes `decoder.litd` (plus manifest) and `encoder.litd` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.decoder.save(dir.join("decoder.litd"))?;
        self.encoder.params().save(dir.join("encoder.litd"))
    }

    pub fn load(dir: impl AsRef<Path>, ws: &Workspace) -> Result<Self> {
        let dir = dir.as_ref();
        let decoder = Decoder::load(dir.join("decoder.litd"))?;
        let mut encoder = ws.encoder()?;
        let params = ParamStore::load(dir.join("encoder.litd"))?;
        if params.len() != encoder.params().len() {
            return Err(Error::config(
                "encoder checkpoint does not match the configured encoder",
            ));
        }
        *encoder.params_mut() = params;
        Ok(Self { decoder, encoder })
    }
}

fn inline_spec(e: &Example) -> Result<&GlyphImageSpec> {
    match &e.image {
        ImageRef::Inline(spec) => Ok(spec),
        ImageRef::Store(id) => Err(Error::config(format!(
            "example {} refers to stored image {id:?}",
            e.id
        ))),
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut h = a ^ 0x94d0_49bb_1331_11eb;
    h ^= b
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(h << 6)
        .wrapping_add(h >> 2);
    h.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Training tasks of `cell`, falling back to the mixture list.
pub fn cell_tasks(config: &ExperimentConfig, cell: &CellConfig) -> Vec<String> {
    if cell.tasks.is_empty() {
        config.mixture_tasks.clone()
    } else {
        cell.tasks.clone()
    }
}

/// Evaluation tasks of `cell`, falling back to its training tasks.
pub fn cell_eval_tasks(config: &ExperimentConfig, cell: &CellConfig) -> Vec<String> {
    if cell.eval_tasks.is_empty() {
        cell_tasks(config, cell)
    } else {
        cell.eval_tasks.clone()
    }
}

/// Trains a fresh model on `tasks` with run seed `seed`.
///
/// `eval_tasks` are evaluated every `train.eval_every` steps; the final
/// evaluation is left to the caller.
pub fn train_model(
    ws: &Workspace,
    tasks: &[String],
    seed: u64,
    exec: Exec,
    eval_tasks: &[String],
) -> Result<(Model, TrainReport)> {
    if tasks.is_empty() {
        return Err(Error::config("no training tasks"));
    }
    let cfg = &ws.config;
    let vocab = ws.vocab();
    let max_len = cfg.decoder.max_len;
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut specs: Vec<GlyphImageSpec> = Vec::new();
    let mut items = Vec::new();
    let mut mixture = Vec::new();
    for name in tasks {
        let ti = ws.task_index(name)?;
        let spec = ws.spec(ti);
        let mut task_items = Vec::with_capacity(ws.train_sets[ti].len());
        for e in &ws.train_sets[ti] {
            let img = inline_spec(e)?;
            let key = img.to_string();
            let image = *index.entry(key).or_insert_with(|| {
                specs.push(img.clone());
                specs.len() - 1
            });
            let seq = build_sequence(e, spec, cfg.conditioning, vocab, max_len)?;
            task_items.push(TrainItem {
                image,
                prefix_len: seq.prefix.len(),
                ids: seq.ids(),
                table: seq.table,
            });
        }
        let tc = &cfg.tasks[ti];
        mixture.push(MixtureTask {
            name: name.clone(),
            size: task_items.len(),
            pairs_per_image: tc.pairs_per_image,
            group: tc.group.clone(),
        });
        items.push(task_items);
    }
    let mut encoder = ws.encoder()?;
    let images = if cfg.train.train_encoder {
        ImageBank::Rendered(specs)
    } else {
        ImageBank::Frozen(par::try_map(exec, specs, |s| encoder.encode(&s))?)
    };
    let data = TrainData {
        tasks: items,
        images,
    };
    let spec = MixtureSpec {
        strategy: cfg.strategy,
        tasks: mixture,
        batch_size: cfg.train.batch_size,
        composition: cfg.composition,
        seed,
    };
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let total = total_steps(&train_cfg, &spec)?;
    let mut sampler = Sampler::new(spec)?;
    let mut decoder = Decoder::new(ws.decoder_config(), seed)?;
    let frozen = encoder.clone();
    let mut hook = |step: usize,
                    dec: &Decoder<f32>,
                    enc: Option<&ToyEncoder<f32>>|
     -> Result<Vec<EvalRecord>> {
        if step >= total || eval_tasks.is_empty() {
            return Ok(Vec::new());
        }
        Ok(evaluate(ws, dec, enc.unwrap_or(&frozen), eval_tasks, step, exec)?.records)
    };
    let enc_arg = cfg.train.train_encoder.then_some(&mut encoder);
    let report = train(
        &mut decoder,
        enc_arg,
        &data,
        &mut sampler,
        &train_cfg,
        exec,
        &mut hook,
    )?;
    Ok((Model { decoder, encoder }, report))
}

/// Records plus wall-clock seconds spent decoding each task.
#[derive(Clone, Debug, Default)]
pub struct EvalOutput {
    pub records: Vec<EvalRecord>,
    pub seconds: Vec<(String, f64)>,
}

/// Decoded text for `example` under `prompt` conditioning.
pub fn predict(
    ws: &Workspace,
    decoder: &Decoder<f32>,
    encoder: &ToyEncoder<f32>,
    prompt: usize,
    example: &Example,
    params: &DecodeParams,
) -> Result<String> {
    let spec = ws.spec(prompt);
    let vocab = ws.vocab();
    let (prefix, table) = build_prefix(spec, &example.prefix_text, ws.config.conditioning, vocab);
    let encoded: EncodedImage<f32> = encoder.encode(inline_spec(example)?)?;
    let lm = DecoderLm::new(decoder, &encoded, table)?;
    let candidates: Vec<Vec<u32>> = if params.strategy == DecodeStrategy::ScoreClasses {
        if spec.category != Category::Cls {
            return Err(Error::config(format!(
                "score_classes needs a classification task, {} is {}",
                spec.name, spec.category
            )));
        }
        GLYPHS
            .iter()
            .map(|g| {
                let mut c = encode_label(spec, g, vocab);
                c.push(EOS);
                c
            })
            .collect()
    } else {
        Vec::new()
    };
    let out = decode(&lm, &prefix, params, &candidates)?;
    let end = out.iter().position(|&t| t == EOS).unwrap_or(out.len());
    Ok(vocab.detokenize(&out[..end]))
}

/// Scores `decoder` on each of `tasks` (exact match in percent, or reported CIDEr).
pub fn evaluate(
    ws: &Workspace,
    decoder: &Decoder<f32>,
    encoder: &ToyEncoder<f32>,
    tasks: &[String],
    step: usize,
    exec: Exec,
) -> Result<EvalOutput> {
    let mut out = EvalOutput::default();
    for name in tasks {
        let ti = ws.task_index(name)?;
        let params = ws.decode_params(ti)?;
        let set = &ws.eval_sets[ti];
        let started = Instant::now();
        let jobs: Vec<(usize, &Example)> = set.iter().enumerate().collect();
        let preds = par::try_map(exec, jobs, |(i, e)| {
            let mut p = params.clone();
            p.seed = mix(params.seed, i as u64);
            predict(ws, decoder, encoder, ti, e, &p)
        })?;
        out.seconds
            .push((name.clone(), started.elapsed().as_secs_f64()));
        let spec = ws.spec(ti);
        let (metric, value) = match spec.metric {
            Metric::ExactMatch => {
                let targets: Vec<&str> = set.iter().map(|e| e.target_text.as_str()).collect();
                ("exact_match", 100.0 * accuracy(&preds, &targets)?)
            }
            Metric::Cider => {
                let refs: Vec<Vec<&str>> =
                    set.iter().map(|e| vec![e.target_text.as_str()]).collect();
                (
                    "cider",
                    if set.is_empty() {
                        0.0
                    } else {
                        cider_reported(&preds, &refs)?
                    },
                )
            }
        };
        out.records.push(EvalRecord {
            step,
            task: name.clone(),
            metric: metric.into(),
            value,
            count: set.len(),
        });
    }
    Ok(out)
}

/// Output-format family of a decoded string.
pub fn output_domain(text: &str) -> &'static str {
    let words: Vec<&str> = text.split_whitespace().collect();
    let numeric = |w: &&str| w.chars().all(|c| c.is_ascii_digit());
    match words.len() {
        0 => "empty",
        1 if GLYPHS.contains(&words[0]) => "cls",
        1 if numeric(&words[0]) => "qa",
        2 if COLORS.contains(&words[0]) && GLYPHS.contains(&words[1]) => "alt_text",
        n if n >= 2 && words.iter().all(numeric) => "ocr",
        n if n >= 4 => "cap",
        _ => "other",
    }
}

pub const DOMAINS: [&str; 7] = ["cls", "cap", "ocr", "qa", "alt_text", "empty", "other"];

/// Every training task's prompt against every eval task's images; records the
/// percentage of outputs per [`output_domain`] as `task = "<prompt>@<images>"`.
pub fn cross_prompt(
    ws: &Workspace,
    model: &Model,
    prompts: &[String],
    images: &[String],
    step: usize,
    exec: Exec,
) -> Result<Vec<EvalRecord>> {
    let mut records = Vec::new();
    for p in prompts {
        let pi = ws.task_index(p)?;
        let mut params = ws.decode_params(pi)?;
        if params.strategy == DecodeStrategy::ScoreClasses {
            params.strategy = DecodeStrategy::Greedy;
        }
        for name in images {
            let ei = ws.task_index(name)?;
            let set = &ws.eval_sets[ei];
            let jobs: Vec<(usize, &Example)> = set.iter().enumerate().collect();
            let preds = par::try_map(exec, jobs, |(i, e)| {
                let mut q = params.clone();
                q.seed = mix(params.seed, i as u64);
                let question = if ws.spec(pi).category == Category::Qa {
                    e.clone()
                } else {
                    Example {
                        prefix_text: String::new(),
                        ..e.clone()
                    }
                };
                predict(ws, &model.decoder, &model.encoder, pi, &question, &q)
            })?;
            for d in DOMAINS {
                let n = preds.iter().filter(|t| output_domain(t) == d).count();
                records.push(EvalRecord {
                    step,
                    task: format!("{p}@{name}"),
                    metric: format!("domain:{d}"),
                    value: if set.is_empty() {
                        0.0
                    } else {
                        100.0 * n as f64 / set.len() as f64
                    },
                    count: set.len(),
                });
            }
        }
    }
    Ok(records)
}

/// Bytes stored per image under the configured compression.
pub fn stored_bytes_per_image(ws: &Workspace) -> usize {
    let d = &ws.config.decoder;
    d.compression.stored_floats(NUM_PATCHES, d.encoder_dim) * std::mem::size_of::<f32>()
}

/// All records of one `(cell, seed)` run.
pub fn run_seed(
    ws: &Workspace,
    cell: &CellConfig,
    seed: u64,
    exec: Exec,
) -> Result<(Vec<EvalRecord>, EvalOutput)> {
    let cfg = &ws.config;
    let tasks = cell_tasks(cfg, cell);
    let eval_tasks = cell_eval_tasks(cfg, cell);
    let (model, report) = train_model(ws, &tasks, seed, exec, &eval_tasks)?;
    finish_seed(ws, &model, &report, &tasks, &eval_tasks, exec)
}

fn finish_seed(
    ws: &Workspace,
    model: &Model,
    report: &TrainReport,
    tasks: &[String],
    eval_tasks: &[String],
    exec: Exec,
) -> Result<(Vec<EvalRecord>, EvalOutput)> {
    let mut records = report.history.clone();
    let tail = (report.losses.len() / 10).max(1).min(report.losses.len());
    let loss = if tail == 0 {
        0.0
    } else {
        report.losses[report.losses.len() - tail..]
            .iter()
            .sum::<f64>()
            / tail as f64
    };
    records.push(EvalRecord {
        step: report.steps,
        task: "train".into(),
        metric: "loss".into(),
        value: loss,
        count: report.steps,
    });
    records.push(EvalRecord {
        step: report.steps,
        task: "store".into(),
        metric: "bytes_per_image".into(),
        value: stored_bytes_per_image(ws) as f64,
        count: 1,
    });
    let out = match ws.config.eval_mode {
        EvalMode::Standard => evaluate(
            ws,
            &model.decoder,
            &model.encoder,
            eval_tasks,
            report.steps,
            exec,
        )?,
        EvalMode::CrossPrompt => EvalOutput {
            records: cross_prompt(ws, model, tasks, eval_tasks, report.steps, exec)?,
            seconds: Vec::new(),
        },
    };
    records.extend(out.records.iter().cloned());
    Ok((records, out))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub exec: Exec,
    /// Stop with an error after this many cells complete (crash testing).
    pub fail_after: Option<usize>,
    pub quiet: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub completed: Vec<String>,
    pub skipped: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Timing {
    cell: String,
    seed: u64,
    task: String,
    seconds: f64,
}

pub fn seed_file(out: &Path, cell: &str, seed: u64) -> PathBuf {
    out.join(cell).join(format!("seed{seed}.jsonl"))
}

pub fn summary_file(out: &Path) -> PathBuf {
    out.join("summary.csv")
}

pub fn timings_file(out: &Path) -> PathBuf {
    out.join("timings.jsonl")
}

/// Cells already present in `summary.csv`.
pub fn completed_cells(out: &Path) -> Result<BTreeSet<String>> {
    let path = summary_file(out);
    let mut done = BTreeSet::new();
    if !path.exists() {
        return Ok(done);
    }
    for line in BufReader::new(File::open(path)?).lines().skip(1) {
        let line = line?;
        if let Some(cell) = line.split(',').next().filter(|c| !c.is_empty()) {
            done.insert(cell.to_string());
        }
    }
    Ok(done)
}

struct Log {
    file: File,
    quiet: bool,
}

impl Log {
    fn open(out: &Path, quiet: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(out.join("run.log"))?;
        Ok(Self { file, quiet })
    }

    fn line(&mut self, msg: &str) -> Result<()> {
        let t = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        writeln!(self.file, "{t} {msg}")?;
        if !self.quiet {
            eprintln!("{msg}");
        }
        Ok(())
    }
}

fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Summary rows `(task, metric, n, mean, std)` over final-step records of each seed.
pub fn summarize(per_seed: &[Vec<EvalRecord>]) -> Vec<(String, String, usize, f64, f64)> {
    let mut groups: Vec<((String, String), Vec<f64>)> = Vec::new();
    for records in per_seed {
        let Some(last) = records.iter().map(|r| r.step).max() else {
            continue;
        };
        for r in records.iter().filter(|r| r.step == last) {
            let key = (r.task.clone(), r.metric.clone());
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(r.value),
                None => groups.push((key, vec![r.value])),
            }
        }
    }
    groups
        .into_iter()
        .map(|((task, metric), v)| {
            let (m, s) = mean_std(&v);
            (task, metric, v.len(), m, s)
        })
        .collect()
}

/// Key identifying everything that influences training.
fn training_key(cfg: &ExperimentConfig, tasks: &[String], seed: u64) -> String {
    let mut c = cfg.clone();
    c.decode = DecodeParams::default();
    c.cells.clear();
    c.eval_mode = EvalMode::Standard;
    c.time_decoding = false;
    for t in &mut c.tasks {
        t.decode.clear();
        t.eval_size = 0;
    }
    format!("{}\n{}\n{seed}", c.emit(), tasks.join(","))
}

/// Runs every cell and seed, writing per-seed JSON lines, `summary.csv`,
/// `timings.jsonl` and `run.log` under `config.output`.
///
/// Cells with rows in an existing `summary.csv` are skipped. Cells whose
/// training configuration matches an earlier cell reuse its models.
pub fn run(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    config.validate()?;
    let out = config.output.clone();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.ini"), config.emit())?;
    let mut log = Log::open(&out, opts.quiet)?;
    let done = completed_cells(&out)?;
    let cells = if config.cells.is_empty() {
        vec![CellConfig::new("default", &[])]
    } else {
        config.cells.clone()
    };
    let mut cache: HashMap<String, (Model, TrainReport)> = HashMap::new();
    let mut report = RunReport::default();
    log.line(&format!(
        "run {} ({} cells, seeds {:?})",
        config.name,
        cells.len(),
        config.seeds
    ))?;
    for cell in &cells {
        if done.contains(&cell.name) {
            log.line(&format!("skip {} (already summarized)", cell.name))?;
            report.skipped.push(cell.name.clone());
            continue;
        }
        let result = run_cell(config, cell, opts, &mut cache, &mut log);
        if let Err(e) = result {
            log.line(&format!("cell {} failed: {e}", cell.name))?;
            return Err(e);
        }
        report.completed.push(cell.name.clone());
        if opts.fail_after == Some(report.completed.len()) {
            log.line("stopping on request")?;
            return Err(Error::contract(format!(
                "run stopped after {} cells",
                report.completed.len()
            )));
        }
    }
    log.line("done")?;
    Ok(report)
}

fn run_cell(
    config: &ExperimentConfig,
    cell: &CellConfig,
    opts: &RunOptions,
    cache: &mut HashMap<String, (Model, TrainReport)>,
    log: &mut Log,
) -> Result<()> {
    let out = &config.output;
    let cfg = config.for_cell(cell)?;
    cfg.validate()?;
    let ws = Workspace::prepare(&cfg)?;
    let tasks = cell_tasks(&cfg, cell);
    let eval_tasks = cell_eval_tasks(&cfg, cell);
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let started = Instant::now();
        let key = training_key(&cfg, &tasks, seed);
        if !cache.contains_key(&key) {
            let trained = train_model(&ws, &tasks, seed, opts.exec, &eval_tasks)?;
            cache.insert(key.clone(), trained);
        }
        let (model, train_report) = &cache[&key];
        let (records, eval) =
            finish_seed(&ws, model, train_report, &tasks, &eval_tasks, opts.exec)?;
        write_records(&seed_file(out, &cell.name, seed), &records)?;
        if cfg.time_decoding {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(timings_file(out))?;
            for (task, seconds) in &eval.seconds {
                let t = Timing {
                    cell: cell.name.clone(),
                    seed,
                    task: task.clone(),
                    seconds: *seconds,
                };
                serde_json::to_writer(&mut f, &t)?;
                f.write_all(b"\n")?;
            }
        }
        log.line(&format!(
            "cell {} seed {seed}: {} steps in {:.1}s",
            cell.name,
            train_report.steps,
            started.elapsed().as_secs_f64()
        ))?;
        per_seed.push(records);
    }
    let path = summary_file(out);
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
    if fresh {
        writeln!(f, "{SUMMARY_HEADER}")?;
    }
    for (task, metric, n, mean, std) in summarize(&per_seed) {
        writeln!(f, "{},{task},{metric},{n},{mean},{std}", cell.name)?;
    }
    Ok(())
}

/// Mean decode seconds per `(cell, task)` from a timings log.
pub fn read_timings(path: impl AsRef<Path>) -> Result<Vec<(String, String, f64)>> {
    let mut acc: Vec<((String, String), (f64, usize))> = Vec::new();
    if !path.as_ref().exists() {
        return Ok(Vec::new());
    }
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let Ok(t) = serde_json::from_str::<Timing>(&line) else {
            continue;
        };
        let key = (t.cell, t.task);
        match acc.iter_mut().find(|(k, _)| *k == key) {
            Some((_, (s, n))) => {
                *s += t.seconds;
                *n += 1;
            }
            None => acc.push((key, (t.seconds, 1))),
        }
    }
    Ok(acc
        .into_iter()
        .map(|((c, t), (s, n))| (c, t, s / n as f64))
        .collect())
}
