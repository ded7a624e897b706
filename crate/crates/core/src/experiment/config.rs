//! Sectioned `key = value` experiment configuration.
//!
//! ```text
//! [experiment]      name, seeds, output, encoder_dim, encoder_seed, ...
//! [decoder]         DecoderConfig keys
//! [train]           TrainConfig keys
//! [mixture]         strategy, composition, tasks
//! [conditioning]    mode
//! [decode]          DecodeParams keys
//! [task.<name>]     synthetic task definition, optional decode.<key> overrides
//! [cell.<name>]     tasks, eval_tasks, and <section>.<key> overrides
//! ```

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::conditioning::{Category, ConditioningMode, Metric};
use crate::decoding::DecodeParams;
use crate::error::{Error, Result};
use crate::mixture::{Composition, Strategy};
use crate::model::DecoderConfig;
use crate::synth::SynthKind;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub name: String,
    pub kind: SynthKind,
    pub category: Category,
    pub metric: Metric,
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
    pub language: String,
    pub overlap: f64,
    pub pairs_per_image: f64,
    pub group: Option<String>,
    pub class_tokens: bool,
    /// `(key, value)` decode overrides for this task.
    pub decode: Vec<(String, String)>,
}

impl TaskConfig {
    pub fn new(
        name: &str,
        kind: SynthKind,
        train_size: usize,
        eval_size: usize,
        seed: u64,
    ) -> Self {
        let (category, metric) = match kind {
            SynthKind::ClassifyDominantGlyph => (Category::Cls, Metric::ExactMatch),
            SynthKind::CaptionLayout | SynthKind::AuxAltText => (Category::Cap, Metric::ExactMatch),
            SynthKind::OcrReadSequence | SynthKind::AuxOcrConcat | SynthKind::AuxOcrRandom => {
                (Category::Ocr, Metric::ExactMatch)
            }
            SynthKind::QaCountAttribute => (Category::Qa, Metric::ExactMatch),
        };
        Self {
            name: name.into(),
            kind,
            category,
            metric,
            train_size,
            eval_size,
            seed,
            language: "en".into(),
            overlap: 1.0,
            pairs_per_image: 1.0,
            group: None,
            class_tokens: false,
            decode: Vec::new(),
        }
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::config(format!("task.{}.{key}: cannot parse {value:?}", self.name));
        if let Some(k) = key.strip_prefix("decode.") {
            DecodeParams::default().set(k, value)?;
            self.decode.retain(|(x, _)| x != k);
            self.decode.push((k.to_string(), value.to_string()));
            return Ok(());
        }
        match key {
            "kind" => self.kind = value.parse()?,
            "category" => self.category = value.parse()?,
            "metric" => self.metric = value.parse()?,
            "train_size" => self.train_size = value.parse().map_err(|_| bad())?,
            "eval_size" => self.eval_size = value.parse().map_err(|_| bad())?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "language" => self.language = value.to_string(),
            "overlap" => self.overlap = value.parse().map_err(|_| bad())?,
            "pairs_per_image" => self.pairs_per_image = value.parse().map_err(|_| bad())?,
            "group" => {
                self.group = (!value.is_empty() && value != "none").then(|| value.to_string())
            }
            "class_tokens" => self.class_tokens = value.parse().map_err(|_| bad())?,
            _ => return Err(Error::config(format!("unknown task key {key:?}"))),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(String, String)> {
        let mut v: Vec<(String, String)> = vec![
            ("kind".into(), self.kind.to_string()),
            ("category".into(), self.category.to_string()),
            ("metric".into(), self.metric.to_string()),
            ("train_size".into(), self.train_size.to_string()),
            ("eval_size".into(), self.eval_size.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("language".into(), self.language.clone()),
            ("overlap".into(), self.overlap.to_string()),
            ("pairs_per_image".into(), self.pairs_per_image.to_string()),
            (
                "group".into(),
                self.group.clone().unwrap_or_else(|| "none".into()),
            ),
            ("class_tokens".into(), self.class_tokens.to_string()),
        ];
        v.extend(
            self.decode
                .iter()
                .map(|(k, x)| (format!("decode.{k}"), x.clone())),
        );
        v
    }
}

/// One sweep cell: a training task subset plus config overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct CellConfig {
    pub name: String,
    /// Empty means the mixture's task list.
    pub tasks: Vec<String>,
    /// Empty means the training tasks.
    pub eval_tasks: Vec<String>,
    /// `(section.key, value)` applied on top of the base configuration.
    pub overrides: Vec<(String, String)>,
}

impl CellConfig {
    pub fn new(name: &str, tasks: &[&str]) -> Self {
        Self {
            name: name.into(),
            tasks: tasks.iter().map(|s| s.to_string()).collect(),
            eval_tasks: Vec::new(),
            overrides: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.overrides.push((key.into(), value.to_string()));
        self
    }

    pub fn eval(mut self, tasks: &[&str]) -> Self {
        self.eval_tasks = tasks.iter().map(|s| s.to_string()).collect();
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EvalMode {
    /// Each eval task with its own conditioning.
    #[default]
    Standard,
    /// Every task's prompt against every eval task's images.
    CrossPrompt,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(EvalMode::Standard),
            "cross_prompt" => Ok(EvalMode::CrossPrompt),
            _ => Err(Error::config(format!("unknown eval mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::Standard => "standard",
            EvalMode::CrossPrompt => "cross_prompt",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
    pub encoder_seed: u64,
    pub encoder_heads: usize,
    pub eval_mode: EvalMode,
    /// Record per-strategy decode timings in the run log.
    pub time_decoding: bool,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub strategy: Strategy,
    pub composition: Composition,
    pub mixture_tasks: Vec<String>,
    pub conditioning: ConditioningMode,
    pub decode: DecodeParams,
    pub tasks: Vec<TaskConfig>,
    pub cells: Vec<CellConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seeds: vec![0, 1, 2],
            output: PathBuf::from("runs"),
            encoder_seed: 1234,
            encoder_heads: 4,
            eval_mode: EvalMode::Standard,
            time_decoding: false,
            decoder: DecoderConfig::default(),
            train: TrainConfig::default(),
            strategy: Strategy::ConcatImages,
            composition: Composition::Mixed,
            mixture_tasks: Vec::new(),
            conditioning: ConditioningMode::TaskPrompt,
            decode: DecodeParams::default(),
            tasks: Vec::new(),
            cells: Vec::new(),
        }
    }
}

fn list(v: &str) -> Vec<String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

impl ExperimentConfig {
    pub fn task(&self, name: &str) -> Option<&TaskConfig> {
        self.tasks.iter().find(|t| t.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("no seeds given"));
        }
        let mut names = std::collections::HashSet::new();
        for t in &self.tasks {
            if !names.insert(&t.name) {
                return Err(Error::config(format!("task {} defined twice", t.name)));
            }
        }
        let check = |ts: &[String], what: &str| -> Result<()> {
            for t in ts {
                if self.task(t).is_none() {
                    return Err(Error::config(format!(
                        "{what} references unknown task {t:?}"
                    )));
                }
            }
            Ok(())
        };
        check(&self.mixture_tasks, "mixture")?;
        let mut cells = std::collections::HashSet::new();
        for c in &self.cells {
            if !cells.insert(&c.name) {
                return Err(Error::config(format!("cell {} defined twice", c.name)));
            }
            check(&c.tasks, &format!("cell {}", c.name))?;
            check(&c.eval_tasks, &format!("cell {}", c.name))?;
            if c.tasks.is_empty() && self.mixture_tasks.is_empty() {
                return Err(Error::config(format!("cell {} trains on no tasks", c.name)));
            }
        }
        self.train.validate()?;
        self.decode.validate()
    }

    /// Applies one `section.key = value` setting.
    pub fn set(&mut self, path: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::config(format!("setting {path:?} lacks a section")))?;
        let bad = || Error::config(format!("{path}: cannot parse {value:?}"));
        match section {
            "experiment" => match key {
                "name" => self.name = value.into(),
                "seeds" => {
                    self.seeds = list(value)
                        .iter()
                        .map(|s| s.parse().map_err(|_| bad()))
                        .collect::<Result<_>>()?
                }
                "output" => self.output = value.into(),
                "encoder_seed" => self.encoder_seed = value.parse().map_err(|_| bad())?,
                "encoder_heads" => self.encoder_heads = value.parse().map_err(|_| bad())?,
                "eval_mode" => self.eval_mode = value.parse()?,
                "time_decoding" => self.time_decoding = value.parse().map_err(|_| bad())?,
                _ => return Err(Error::config(format!("unknown experiment key {key:?}"))),
            },
            "decoder" => self.decoder.set(key, value)?,
            "train" => self.train.set(key, value)?,
            "mixture" => match key {
                "strategy" => self.strategy = value.parse()?,
                "composition" => self.composition = value.parse()?,
                "tasks" => self.mixture_tasks = list(value),
                _ => return Err(Error::config(format!("unknown mixture key {key:?}"))),
            },
            "conditioning" => match key {
                "mode" => self.conditioning = value.parse()?,
                _ => return Err(Error::config(format!("unknown conditioning key {key:?}"))),
            },
            "decode" => self.decode.set(key, value)?,
            "task" => {
                let (name, k) = key.split_once('.').ok_or_else(|| {
                    Error::config(format!("setting {path:?} needs task.<name>.<key>"))
                })?;
                let t = match self.tasks.iter_mut().find(|t| t.name == name) {
                    Some(t) => t,
                    None => {
                        let kind = if k == "kind" {
                            value.parse()?
                        } else {
                            SynthKind::ClassifyDominantGlyph
                        };
                        self.tasks.push(TaskConfig::new(name, kind, 100, 50, 0));
                        self.tasks.last_mut().unwrap()
                    }
                };
                t.set(k, value)?;
            }
            _ => return Err(Error::config(format!("unknown section {section:?}"))),
        }
        Ok(())
    }

    /// Copy with a cell's overrides applied.
    pub fn for_cell(&self, cell: &CellConfig) -> Result<ExperimentConfig> {
        let mut c = self.clone();
        for (k, v) in &cell.overrides {
            c.set(k, v)?;
        }
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();
        let mut cell: Option<CellConfig> = None;
        let flush = |cfg: &mut ExperimentConfig, cell: &mut Option<CellConfig>| {
            if let Some(c) = cell.take() {
                cfg.cells.push(c);
            }
        };
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                flush(&mut cfg, &mut cell);
                section = name.trim().to_string();
                if let Some(c) = section.strip_prefix("cell.") {
                    cell = Some(CellConfig::new(c, &[]));
                }
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("config line {}: expected key = value", n + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if let Some(c) = cell.as_mut() {
                match k {
                    "tasks" => c.tasks = list(v),
                    "eval_tasks" => c.eval_tasks = list(v),
                    _ => c.overrides.push((k.into(), v.into())),
                }
            } else if section.is_empty() {
                return Err(Error::config(format!(
                    "config line {}: setting outside a section",
                    n + 1
                )));
            } else {
                cfg.set(&format!("{section}.{k}"), v)?;
            }
        }
        flush(&mut cfg, &mut cell);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn emit(&self) -> String {
        let mut s = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(s, "[experiment]");
        for (k, v) in [
            ("name", self.name.clone()),
            ("seeds", seeds.join(",")),
            ("output", self.output.display().to_string()),
            ("encoder_seed", self.encoder_seed.to_string()),
            ("encoder_heads", self.encoder_heads.to_string()),
            ("eval_mode", self.eval_mode.to_string()),
            ("time_decoding", self.time_decoding.to_string()),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "\n[decoder]");
        for (k, v) in self.decoder.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "\n[train]");
        for (k, v) in self.train.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(
            s,
            "\n[mixture]\nstrategy = {}\ncomposition = {}\ntasks = {}",
            self.strategy,
            self.composition,
            self.mixture_tasks.join(",")
        );
        let _ = writeln!(s, "\n[conditioning]\nmode = {}", self.conditioning);
        let _ = writeln!(s, "\n[decode]");
        for (k, v) in self.decode.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        for t in &self.tasks {
            let _ = writeln!(s, "\n[task.{}]", t.name);
            for (k, v) in t.pairs() {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        for c in &self.cells {
            let _ = writeln!(s, "\n[cell.{}]", c.name);
            let _ = writeln!(s, "tasks = {}", c.tasks.join(","));
            let _ = writeln!(s, "eval_tasks = {}", c.eval_tasks.join(","));
            for (k, v) in &c.overrides {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        s
    }
}
