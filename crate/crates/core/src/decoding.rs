//! Greedy, sampling, beam and scoring decoders over a next-token interface,
//! plus exhaustive search for small vocabularies.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncodedImage;
use crate::error::{Error, Result};
use crate::model::{DecodeState, Decoder, EOS};
use crate::tensor::kernels::log_softmax;

/// Autoregressive next-token model.
pub trait LanguageModel: Sync {
    type State: Clone + Send;

    fn vocab_size(&self) -> usize;

    /// Largest number of tokens that can be generated after `prefix_len`
    /// prefix tokens.
    fn capacity(&self, prefix_len: usize) -> usize;

    /// Consumes the prefix and returns the logits for the first generated token.
    fn start(&self, prefix: &[u32]) -> Result<(Self::State, Vec<f64>)>;

    fn step(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>>;

    /// `log p(target | prefix)`.
    fn score(&self, prefix: &[u32], target: &[u32]) -> Result<f64> {
        if target.is_empty() {
            return Err(Error::contract("empty target sequence"));
        }
        let (mut state, mut logits) = self.start(prefix)?;
        let mut total = 0.0;
        for (i, &t) in target.iter().enumerate() {
            total += log_softmax(&logits)[t as usize];
            if i + 1 < target.len() {
                logits = self.step(&mut state, t)?;
            }
        }
        Ok(total)
    }
}

/// A decoder bound to one image.
pub struct DecoderLm<'a> {
    decoder: &'a Decoder<f32>,
    base: DecodeState<f32>,
}

impl<'a> DecoderLm<'a> {
    pub fn new(
        decoder: &'a Decoder<f32>,
        encoded: &EncodedImage<f32>,
        table: usize,
    ) -> Result<Self> {
        Ok(Self {
            decoder,
            base: decoder.begin(encoded, table)?,
        })
    }
}

fn last_row(logits: Vec<f32>, v: usize) -> Vec<f64> {
    logits[logits.len() - v..]
        .iter()
        .map(|&x| x as f64)
        .collect()
}

impl LanguageModel for DecoderLm<'_> {
    type State = DecodeState<f32>;

    fn vocab_size(&self) -> usize {
        self.decoder.config().vocab_size
    }

    fn capacity(&self, prefix_len: usize) -> usize {
        (self.decoder.config().max_len + 1).saturating_sub(prefix_len)
    }

    fn start(&self, prefix: &[u32]) -> Result<(Self::State, Vec<f64>)> {
        if prefix.is_empty() {
            return Err(Error::contract("prefix must contain at least BOS"));
        }
        let mut state = self.base.clone();
        let logits = self.decoder.extend(&mut state, prefix)?;
        Ok((state, last_row(logits, self.vocab_size())))
    }

    fn step(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>> {
        let logits = self.decoder.next_token_logits(state, token)?;
        Ok(last_row(logits, self.vocab_size()))
    }

    fn score(&self, prefix: &[u32], target: &[u32]) -> Result<f64> {
        self.decoder
            .sequence_log_prob_from(&self.base, prefix, target)
    }
}

/// Random model whose logits are a seeded function of the whole history.
#[derive(Clone, Debug)]
pub struct RandomLm {
    pub vocab: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Standard deviation of the logits.
    pub spread: f64,
}

impl RandomLm {
    fn logits(&self, history: &[u32]) -> Vec<f64> {
        let mut h = self.seed ^ 0xcbf2_9ce4_8422_2325;
        for &t in history {
            h = (h ^ (t as u64 + 1)).wrapping_mul(0x100_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        (0..self.vocab)
            .map(|_| rng.random_range(-self.spread..self.spread))
            .collect()
    }
}

impl LanguageModel for RandomLm {
    type State = Vec<u32>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn capacity(&self, prefix_len: usize) -> usize {
        (self.max_len + 1).saturating_sub(prefix_len)
    }

    fn start(&self, prefix: &[u32]) -> Result<(Vec<u32>, Vec<f64>)> {
        if prefix.len() > self.max_len {
            return Err(Error::Length {
                len: prefix.len(),
                max: self.max_len,
            });
        }
        Ok((prefix.to_vec(), self.logits(prefix)))
    }

    fn step(&self, state: &mut Vec<u32>, token: u32) -> Result<Vec<f64>> {
        if state.len() >= self.max_len {
            return Err(Error::Length {
                len: state.len() + 1,
                max: self.max_len,
            });
        }
        state.push(token);
        Ok(self.logits(state))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Greedy,
    Temperature,
    TopK,
    Beam,
    ScoreClasses,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Greedy,
        Strategy::Temperature,
        Strategy::TopK,
        Strategy::Beam,
        Strategy::ScoreClasses,
    ];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Greedy => "greedy",
            Strategy::Temperature => "temperature",
            Strategy::TopK => "top_k",
            Strategy::Beam => "beam",
            Strategy::ScoreClasses => "score_classes",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.to_string() == s)
            .ok_or_else(|| Error::config(format!("unknown decoding strategy {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub strategy: Strategy,
    pub temperature: f64,
    /// Beams for beam search, candidates for top-k.
    pub k: usize,
    pub gumbel_scale: f64,
    pub alpha: f64,
    /// Most tokens to generate, EOS included.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            temperature: 1.0,
            k: 4,
            gumbel_scale: 0.0,
            alpha: 0.1,
            max_len: 64,
            seed: 0,
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!(
                "temperature {} must be >= 0",
                self.temperature
            )));
        }
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if !(self.gumbel_scale >= 0.0 && self.gumbel_scale.is_finite()) {
            return Err(Error::config(format!(
                "gumbel scale {} must be >= 0",
                self.gumbel_scale
            )));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::config(format!(
                "length-normalization alpha {} must be >= 0",
                self.alpha
            )));
        }
        if self.max_len == 0 {
            return Err(Error::config("max_len must be positive"));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("decode.{key}: cannot parse {v:?}")))
        }
        match key {
            "strategy" => self.strategy = value.parse()?,
            "temperature" => self.temperature = num(key, value)?,
            "k" | "beams" => self.k = num(key, value)?,
            "gumbel" | "gumbel_scale" => self.gumbel_scale = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(Error::config(format!("unknown decode key {key:?}"))),
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("strategy", self.strategy.to_string()),
            ("temperature", self.temperature.to_string()),
            ("k", self.k.to_string()),
            ("gumbel_scale", self.gumbel_scale.to_string()),
            ("alpha", self.alpha.to_string()),
            ("max_len", self.max_len.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// `((5 + len) / 6)^alpha`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens without the closing EOS.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
    /// `log_prob / lp(len)` where `len` counts EOS for finished hypotheses.
    pub score: f64,
}

impl Hypothesis {
    fn new(tokens: Vec<u32>, log_prob: f64, finished: bool, alpha: f64) -> Self {
        let len = tokens.len() + finished as usize;
        Self {
            score: log_prob / length_penalty(len, alpha),
            tokens,
            log_prob,
            finished,
        }
    }
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

fn steps<M: LanguageModel>(model: &M, prefix: &[u32], max_len: usize) -> usize {
    max_len.min(model.capacity(prefix.len()))
}

/// Runs a per-step token chooser until EOS or the length limit.
fn run<M: LanguageModel>(
    model: &M,
    prefix: &[u32],
    max_len: usize,
    mut choose: impl FnMut(&[f64]) -> usize,
) -> Result<Vec<u32>> {
    let limit = steps(model, prefix, max_len);
    let (mut state, mut logits) = model.start(prefix)?;
    let mut out = Vec::new();
    for i in 0..limit {
        let t = choose(&logits) as u32;
        if t == EOS {
            break;
        }
        out.push(t);
        if i + 1 < limit {
            logits = model.step(&mut state, t)?;
        }
    }
    Ok(out)
}

pub fn greedy<M: LanguageModel>(model: &M, prefix: &[u32], max_len: usize) -> Result<Vec<u32>> {
    run(model, prefix, max_len, argmax)
}

fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &p) in probs.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn tempered_probs(logits: &[f64], t: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&x| x / t).collect();
    log_softmax(&scaled).into_iter().map(f64::exp).collect()
}

/// One draw from `softmax(logits / t)`; `t = 0` is the argmax.
pub fn sample_temperature(logits: &[f64], t: f64, rng: &mut ChaCha8Rng) -> usize {
    if t == 0.0 {
        return argmax(logits);
    }
    sample_index(&tempered_probs(logits, t), rng)
}

/// Indices of the `k` largest logits, ties to the lowest id.
pub fn top_k_indices(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k.min(logits.len()));
    idx
}

/// One draw among the `k` highest logits at temperature `t`.
pub fn sample_top_k(logits: &[f64], k: usize, t: f64, rng: &mut ChaCha8Rng) -> usize {
    let top = top_k_indices(logits, k);
    if t == 0.0 || top.len() == 1 {
        return top[0];
    }
    let sub: Vec<f64> = top.iter().map(|&i| logits[i]).collect();
    top[sample_index(&tempered_probs(&sub, t), rng)]
}

pub fn temperature_sample<M: LanguageModel>(
    model: &M,
    prefix: &[u32],
    t: f64,
    max_len: usize,
    seed: u64,
) -> Result<Vec<u32>> {
    if !(t >= 0.0) {
        return Err(Error::config(format!("temperature {t} must be >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    run(model, prefix, max_len, |l| {
        sample_temperature(l, t, &mut rng)
    })
}

pub fn top_k_sample<M: LanguageModel>(
    model: &M,
    prefix: &[u32],
    k: usize,
    t: f64,
    max_len: usize,
    seed: u64,
) -> Result<Vec<u32>> {
    if k == 0 || k > model.vocab_size() {
        return Err(Error::config(format!(
            "top-k needs 1 <= k <= {}, got {k}",
            model.vocab_size()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    run(model, prefix, max_len, |l| sample_top_k(l, k, t, &mut rng))
}

#[derive(Clone, Debug)]
pub struct BeamResult {
    pub best: Hypothesis,
    /// Up to `k` hypotheses, best first.
    pub finals: Vec<Hypothesis>,
}

fn by_score(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal)
}

fn gumbel(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Beam search. Each step keeps the `k` best expansions of the live beams by
/// cumulative log-prob (plus scaled Gumbel noise); expansions ending in EOS
/// move to the finished set. Stops at `max_len` or once no live beam can beat
/// the best finished normalized score.
pub fn beam_search<M: LanguageModel>(
    model: &M,
    prefix: &[u32],
    k: usize,
    gumbel_scale: f64,
    alpha: f64,
    max_len: usize,
    seed: u64,
) -> Result<BeamResult> {
    if k == 0 {
        return Err(Error::config("beam search needs k >= 1"));
    }
    let limit = steps(model, prefix, max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (state, logits) = model.start(prefix)?;
    struct Live<S> {
        tokens: Vec<u32>,
        log_prob: f64,
        state: S,
        logits: Vec<f64>,
    }
    let mut live = vec![Live {
        tokens: Vec::new(),
        log_prob: 0.0,
        state,
        logits,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut truncated: Vec<Hypothesis> = Vec::new();
    for step in 1..=limit {
        let mut cands: Vec<(f64, usize, usize, f64)> = Vec::new();
        for (b, beam) in live.iter().enumerate() {
            for (t, lp) in log_softmax(&beam.logits).into_iter().enumerate() {
                let total = beam.log_prob + lp;
                let key = if gumbel_scale > 0.0 {
                    total + gumbel_scale * gumbel(&mut rng)
                } else {
                    total
                };
                cands.push((key, b, t, total));
            }
        }
        cands.sort_by(|x, y| {
            y.0.partial_cmp(&x.0)
                .unwrap_or(Ordering::Equal)
                .then(x.1.cmp(&y.1))
                .then(x.2.cmp(&y.2))
        });
        cands.truncate(k);
        let mut next = Vec::new();
        for &(_, b, t, total) in &cands {
            let mut tokens = live[b].tokens.clone();
            if t as u32 == EOS {
                finished.push(Hypothesis::new(tokens, total, true, alpha));
                continue;
            }
            tokens.push(t as u32);
            if step == limit {
                truncated.push(Hypothesis::new(tokens, total, false, alpha));
                continue;
            }
            let mut state = live[b].state.clone();
            let logits = model.step(&mut state, t as u32)?;
            next.push(Live {
                tokens,
                log_prob: total,
                state,
                logits,
            });
        }
        live = next;
        if live.is_empty() {
            break;
        }
        if gumbel_scale == 0.0 {
            if let Some(best) = finished.iter().map(|h| h.score).reduce(f64::max) {
                let bound_lp = length_penalty(limit, alpha);
                let bound = live
                    .iter()
                    .map(|l| l.log_prob / bound_lp)
                    .fold(f64::NEG_INFINITY, f64::max);
                if bound <= best {
                    break;
                }
            }
        }
    }
    let mut pool = if finished.is_empty() {
        truncated
    } else {
        finished
    };
    if pool.is_empty() {
        pool.push(Hypothesis::new(Vec::new(), 0.0, false, alpha));
    }
    pool.sort_by(by_score);
    pool.truncate(k);
    Ok(BeamResult {
        best: pool[0].clone(),
        finals: pool,
    })
}

/// Log-probability of every candidate target; returns the best index (ties to
/// the lowest) and the raw scores.
pub fn score_classes<M: LanguageModel>(
    model: &M,
    prefix: &[u32],
    candidates: &[Vec<u32>],
) -> Result<(usize, Vec<f64>)> {
    if candidates.is_empty() {
        return Err(Error::contract("no candidates to score"));
    }
    let scores = candidates
        .iter()
        .map(|c| model.score(prefix, c))
        .collect::<Result<Vec<f64>>>()?;
    Ok((argmax(&scores), scores))
}

pub const BRUTE_FORCE_CAP: usize = 1_000_000;

/// Exhaustive search over all EOS-terminated continuations of at most
/// `max_len` tokens (EOS included), ranked by normalized score.
pub fn brute_force_oracle<M: LanguageModel>(
    model: &M,
    prefix: &[u32],
    max_len: usize,
    alpha: f64,
) -> Result<Hypothesis> {
    let limit = steps(model, prefix, max_len);
    let v = model.vocab_size();
    let space = (v as f64).powi(limit as i32);
    if space > BRUTE_FORCE_CAP as f64 {
        return Err(Error::config(format!(
            "exhaustive search over {v}^{limit} sequences exceeds the cap of {BRUTE_FORCE_CAP}"
        )));
    }
    let (state, logits) = model.start(prefix)?;
    let mut best: Option<Hypothesis> = None;
    let mut tokens = Vec::new();
    explore(
        model,
        state,
        logits,
        &mut tokens,
        0.0,
        limit,
        alpha,
        &mut best,
    )?;
    best.ok_or_else(|| Error::contract("no EOS-terminated sequence fits"))
}

#[allow(clippy::too_many_arguments)]
fn explore<M: LanguageModel>(
    model: &M,
    state: M::State,
    logits: Vec<f64>,
    tokens: &mut Vec<u32>,
    log_prob: f64,
    limit: usize,
    alpha: f64,
    best: &mut Option<Hypothesis>,
) -> Result<()> {
    let lps = log_softmax(&logits);
    for (t, &lp) in lps.iter().enumerate() {
        let total = log_prob + lp;
        if t as u32 == EOS {
            let h = Hypothesis::new(tokens.clone(), total, true, alpha);
            if best.as_ref().is_none_or(|b| h.score > b.score) {
                *best = Some(h);
            }
        } else if tokens.len() + 1 < limit {
            let mut s = state.clone();
            let next = model.step(&mut s, t as u32)?;
            tokens.push(t as u32);
            explore(model, s, next, tokens, total, limit, alpha, best)?;
            tokens.pop();
        }
    }
    Ok(())
}

/// Decodes one prefix with the configured strategy. `candidates` is used only
/// by [`Strategy::ScoreClasses`].
pub fn decode<M: LanguageModel>(
    model: &M,
    prefix: &[u32],
    params: &DecodeParams,
    candidates: &[Vec<u32>],
) -> Result<Vec<u32>> {
    params.validate()?;
    match params.strategy {
        Strategy::Greedy => greedy(model, prefix, params.max_len),
        Strategy::Temperature => temperature_sample(
            model,
            prefix,
            params.temperature,
            params.max_len,
            params.seed,
        ),
        Strategy::TopK => top_k_sample(
            model,
            prefix,
            params.k,
            params.temperature,
            params.max_len,
            params.seed,
        ),
        Strategy::Beam => Ok(beam_search(
            model,
            prefix,
            params.k,
            params.gumbel_scale,
            params.alpha,
            params.max_len,
            params.seed,
        )?
        .best
        .tokens),
        Strategy::ScoreClasses => {
            let (i, _) = score_classes(model, prefix, candidates)?;
            let mut out = candidates[i].clone();
            if out.last() == Some(&EOS) {
                out.pop();
            }
            Ok(out)
        }
    }
}
