//! Word-level vocabulary, task registry and construction of conditioned
//! prefix/target sequences.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::{BOS, EOS, PAD, SEP, UNK};
use crate::synth::GlyphImageSpec;

pub const UNK_SURFACE: &str = "<unk>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Special,
    Prompt,
    Category,
    Class,
    Language,
    Word,
}

#[derive(Clone, Debug, PartialEq)]
struct Token {
    key: String,
    surface: String,
    kind: TokenKind,
}

/// Bijective token table. Only `Word` tokens are reachable from plain text.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for (id, s) in [
            (BOS, "<bos>"),
            (EOS, "<eos>"),
            (PAD, "<pad>"),
            (SEP, "<sep>"),
            (UNK, UNK_SURFACE),
        ] {
            let got = v
                .insert(format!("#{s}"), s.into(), TokenKind::Special)
                .unwrap();
            debug_assert_eq!(got, id);
        }
        for c in Category::ALL {
            v.insert(format!("#cat:{c}"), c.token().into(), TokenKind::Category)
                .unwrap();
        }
        v
    }

    fn insert(&mut self, key: String, surface: String, kind: TokenKind) -> Result<u32> {
        if self.index.contains_key(&key) {
            return Err(Error::config(format!(
                "token {surface:?} is already registered"
            )));
        }
        let id = self.tokens.len() as u32;
        self.index.insert(key.clone(), id);
        self.tokens.push(Token { key, surface, kind });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Adds plain words, skipping those already known.
    pub fn add_words<S: AsRef<str>>(&mut self, words: impl IntoIterator<Item = S>) {
        for w in words {
            let w = w.as_ref();
            if !self.index.contains_key(w) {
                self.insert(w.to_string(), w.to_string(), TokenKind::Word)
                    .unwrap();
            }
        }
    }

    pub fn add_prompt(&mut self, task: &str) -> Result<u32> {
        self.insert(
            format!("#task:{task}"),
            format!("<{task}>"),
            TokenKind::Prompt,
        )
    }

    pub fn add_language(&mut self, code: &str) -> Result<u32> {
        self.insert(
            format!("#lang:{code}"),
            format!("<{code}>"),
            TokenKind::Language,
        )
    }

    pub fn add_class(&mut self, task: &str, class: &str) -> Result<u32> {
        self.insert(
            format!("#class:{task}:{class}"),
            class.to_string(),
            TokenKind::Class,
        )
    }

    pub fn class_token(&self, task: &str, class: &str) -> Option<u32> {
        self.index.get(&format!("#class:{task}:{class}")).copied()
    }

    pub fn prompt_token(&self, task: &str) -> Option<u32> {
        self.index.get(&format!("#task:{task}")).copied()
    }

    pub fn language_token(&self, code: &str) -> Option<u32> {
        self.index.get(&format!("#lang:{code}")).copied()
    }

    pub fn category_token(&self, c: Category) -> u32 {
        self.index[&format!("#cat:{c}")]
    }

    pub fn word(&self, w: &str) -> Option<u32> {
        self.index
            .get(w)
            .copied()
            .filter(|&id| self.tokens[id as usize].kind == TokenKind::Word)
    }

    pub fn kind(&self, id: u32) -> Option<TokenKind> {
        self.tokens.get(id as usize).map(|t| t.kind)
    }

    pub fn surface(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|t| t.surface.as_str())
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.word(w).unwrap_or(UNK))
            .collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.surface(id).unwrap_or(UNK_SURFACE))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Token keys in id order; enough to rebuild the table exactly.
    pub fn to_lines(&self) -> String {
        self.tokens
            .iter()
            .map(|t| format!("{:?}\t{}\t{}\n", t.kind, t.key, t.surface))
            .collect()
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for (n, line) in text.lines().enumerate() {
            let mut parts = line.splitn(3, '\t');
            let (Some(kind), Some(key), Some(surface)) = (parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::config(format!(
                    "vocabulary line {} is malformed",
                    n + 1
                )));
            };
            let kind = match kind {
                "Special" => TokenKind::Special,
                "Prompt" => TokenKind::Prompt,
                "Category" => TokenKind::Category,
                "Class" => TokenKind::Class,
                "Language" => TokenKind::Language,
                "Word" => TokenKind::Word,
                other => return Err(Error::config(format!("unknown token kind {other:?}"))),
            };
            v.insert(key.into(), surface.into(), kind)?;
        }
        if v.len() < Vocabulary::new().len() || v.surface(UNK) != Some(UNK_SURFACE) {
            return Err(Error::config("vocabulary lacks the reserved tokens"));
        }
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Cls,
    Cap,
    Ocr,
    Qa,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Cls, Category::Cap, Category::Ocr, Category::Qa];

    pub fn token(self) -> &'static str {
        match self {
            Category::Cls => "<cls>",
            Category::Cap => "<cap>",
            Category::Ocr => "<ocr>",
            Category::Qa => "<qa>",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Cls => "cls",
            Category::Cap => "cap",
            Category::Ocr => "ocr",
            Category::Qa => "qa",
        })
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::config(format!("unknown task category {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ExactMatch,
    Cider,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::ExactMatch => "exact_match",
            Metric::Cider => "cider",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact_match" | "accuracy" => Ok(Metric::ExactMatch),
            "cider" => Ok(Metric::Cider),
            _ => Err(Error::config(format!("unknown metric {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub category: Category,
    pub prompt: u32,
    pub size: usize,
    pub metric: Metric,
    /// Index into the decoder's positional tables under per-task positions.
    pub table: usize,
    /// Labels encode to one dedicated token each.
    pub class_tokens: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    #[default]
    TaskPrompt,
    CategoryPrompt,
    Unconditioned,
    TaskPositionEmbeddings,
}

impl ConditioningMode {
    pub const ALL: [ConditioningMode; 4] = [
        ConditioningMode::TaskPrompt,
        ConditioningMode::CategoryPrompt,
        ConditioningMode::Unconditioned,
        ConditioningMode::TaskPositionEmbeddings,
    ];
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConditioningMode::TaskPrompt => "task_prompt",
            ConditioningMode::CategoryPrompt => "category_prompt",
            ConditioningMode::Unconditioned => "unconditioned",
            ConditioningMode::TaskPositionEmbeddings => "task_position_embeddings",
        })
    }
}

impl FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConditioningMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::config(format!("unknown conditioning mode {s:?}")))
    }
}

/// Where an example's image comes from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ImageRef {
    Store(String),
    Inline(GlyphImageSpec),
}

impl From<ImageRef> for String {
    fn from(r: ImageRef) -> String {
        match r {
            ImageRef::Store(id) => id,
            ImageRef::Inline(spec) => spec.to_string(),
        }
    }
}

impl TryFrom<String> for ImageRef {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        if s.starts_with("glyph:") {
            Ok(ImageRef::Inline(s.parse()?))
        } else {
            Ok(ImageRef::Store(s))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub image: ImageRef,
    pub prefix_text: String,
    pub target_text: String,
    pub task: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BuiltSequence {
    pub prefix: Vec<u32>,
    pub target: Vec<u32>,
    /// Target tail (possibly including EOS) was cut to fit.
    pub truncated: bool,
    /// Positional table the decoder should use.
    pub table: usize,
}

impl BuiltSequence {
    /// Full training sequence `prefix ++ target`.
    pub fn ids(&self) -> Vec<u32> {
        let mut ids = self.prefix.clone();
        ids.extend_from_slice(&self.target);
        ids
    }
}

/// Conditioning prefix for `task` and `question`.
pub fn build_prefix(
    task: &TaskSpec,
    question: &str,
    mode: ConditioningMode,
    vocab: &Vocabulary,
) -> (Vec<u32>, usize) {
    let mut prefix = vec![BOS];
    match mode {
        ConditioningMode::TaskPrompt => prefix.extend([task.prompt, SEP]),
        ConditioningMode::CategoryPrompt => {
            prefix.extend([vocab.category_token(task.category), SEP])
        }
        ConditioningMode::Unconditioned | ConditioningMode::TaskPositionEmbeddings => {}
    }
    let q = vocab.tokenize(question);
    if !q.is_empty() {
        prefix.extend(q);
        prefix.push(SEP);
    }
    let table = if mode == ConditioningMode::TaskPositionEmbeddings {
        task.table
    } else {
        0
    };
    (prefix, table)
}

/// Label tokens without EOS.
pub fn encode_label(task: &TaskSpec, text: &str, vocab: &Vocabulary) -> Vec<u32> {
    if task.class_tokens {
        if let Some(id) = vocab.class_token(&task.name, text) {
            return vec![id];
        }
    }
    vocab.tokenize(text)
}

/// Builds `prefix` and `target = label ++ [EOS]` with `|prefix| + |target| <= max_len`.
pub fn build_sequence(
    example: &Example,
    task: &TaskSpec,
    mode: ConditioningMode,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<BuiltSequence> {
    let (prefix, table) = build_prefix(task, &example.prefix_text, mode, vocab);
    if prefix.len() >= max_len {
        return Err(Error::Length {
            len: prefix.len() + 1,
            max: max_len,
        });
    }
    let mut target = encode_label(task, &example.target_text, vocab);
    target.push(EOS);
    let room = max_len - prefix.len();
    let truncated = target.len() > room;
    target.truncate(room);
    Ok(BuiltSequence {
        prefix,
        target,
        truncated,
        table,
    })
}

/// Gives each class of a classification task its own token.
pub fn class_token_remap(
    task: &TaskSpec,
    classes: &[String],
    vocab: &Vocabulary,
) -> Result<(Vocabulary, TaskSpec)> {
    if task.category != Category::Cls {
        return Err(Error::config(format!(
            "task {} is not a classification task",
            task.name
        )));
    }
    let mut seen = BTreeSet::new();
    for c in classes {
        if !seen.insert(c.as_str()) {
            return Err(Error::config(format!(
                "duplicate class {c:?} in task {}",
                task.name
            )));
        }
    }
    let mut vocab = vocab.clone();
    for c in classes {
        vocab.add_class(&task.name, c)?;
    }
    let mut task = task.clone();
    task.class_tokens = true;
    Ok((vocab, task))
}

/// Tasks plus the vocabulary they were registered in.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskRegistry {
    pub vocab: Vocabulary,
    pub tasks: Vec<TaskSpec>,
}

impl TaskRegistry {
    pub fn new() -> Self {
        Self {
            vocab: Vocabulary::new(),
            tasks: Vec::new(),
        }
    }

    pub fn register(
        &mut self,
        name: &str,
        category: Category,
        metric: Metric,
        size: usize,
    ) -> Result<&TaskSpec> {
        if self.tasks.iter().any(|t| t.name == name) {
            return Err(Error::config(format!("task {name:?} registered twice")));
        }
        let prompt = self.vocab.add_prompt(name)?;
        let table = self.tasks.len();
        self.tasks.push(TaskSpec {
            name: name.into(),
            category,
            prompt,
            size,
            metric,
            table,
            class_tokens: false,
        });
        Ok(self.tasks.last().unwrap())
    }

    pub fn task(&self, name: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.name == name)
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.name == name)
    }
}

impl Default for TaskRegistry {
    fn default() -> Self {
        Self::new()
    }
}

pub fn write_jsonl(examples: &[Example], mut out: impl Write) -> Result<()> {
    for e in examples {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(input: impl BufRead) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Example = serde_json::from_str(&line)
            .map_err(|err| Error::config(format!("dataset line {}: {err}", n + 1)))?;
        out.push(e);
    }
    Ok(out)
}
