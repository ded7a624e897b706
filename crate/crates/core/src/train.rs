//! Label-smoothed training with AdamW, global-norm clipping and a cosine
//! schedule.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncodedImage, ToyEncoder};
use crate::error::{Error, Result};
use crate::metrics::EvalRecord;
use crate::mixture::{epoch_length, MixtureSpec, Sampler};
use crate::model::Decoder;
use crate::par::{self, Exec};
use crate::params::ParamStore;
use crate::synth::{render, GlyphImageSpec};
use crate::tensor::{kernels, GradTape, Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Linear warmup over the first 10% of steps, then cosine decay to zero.
    #[default]
    Cosine,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        })
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            _ => Err(Error::config(format!("unknown schedule {s:?}"))),
        }
    }
}

pub const WARMUP_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub grad_clip_norm: f64,
    /// Multi-task epochs; ignored when `steps` is set.
    pub epochs: f64,
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: Schedule,
    /// Evaluate every this many steps (0: only at the end).
    pub eval_every: usize,
    /// Backpropagate into the toy encoder.
    pub train_encoder: bool,
    pub encoder_lr_multiplier: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            dropout: 0.1,
            label_smoothing: 0.1,
            grad_clip_norm: 1.0,
            epochs: 1.0,
            steps: None,
            batch_size: 32,
            seed: 0,
            schedule: Schedule::Cosine,
            eval_every: 0,
            train_encoder: false,
            encoder_lr_multiplier: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::config(format!(
                "clip norm {} must be positive",
                self.grad_clip_norm
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) || !(self.epochs >= 0.0) {
            return Err(Error::config(
                "learning rate, weight decay and epochs must be non-negative",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("train.{key}: cannot parse {v:?}")))
        }
        match key {
            "learning_rate" | "lr" => self.learning_rate = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "label_smoothing" => self.label_smoothing = num(key, value)?,
            "grad_clip_norm" => self.grad_clip_norm = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "steps" => {
                self.steps = if value == "none" {
                    None
                } else {
                    Some(num(key, value)?)
                }
            }
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "schedule" => self.schedule = value.parse()?,
            "eval_every" => self.eval_every = num(key, value)?,
            "train_encoder" => self.train_encoder = num(key, value)?,
            "encoder_lr_multiplier" => self.encoder_lr_multiplier = num(key, value)?,
            _ => return Err(Error::config(format!("unknown train key {key:?}"))),
        }
        Ok(())
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("learning_rate", self.learning_rate.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("dropout", self.dropout.to_string()),
            ("label_smoothing", self.label_smoothing.to_string()),
            ("grad_clip_norm", self.grad_clip_norm.to_string()),
            ("epochs", self.epochs.to_string()),
            ("steps", self.steps.map_or("none".into(), |s| s.to_string())),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("schedule", self.schedule.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("train_encoder", self.train_encoder.to_string()),
            (
                "encoder_lr_multiplier",
                self.encoder_lr_multiplier.to_string(),
            ),
        ]
    }
}

/// Learning rate at `step` (0-based) of `total`.
pub fn learning_rate_at(config: &TrainConfig, step: usize, total: usize) -> f64 {
    match config.schedule {
        Schedule::Constant => config.learning_rate,
        Schedule::Cosine => {
            let warmup = ((total as f64) * WARMUP_FRACTION).ceil().max(1.0);
            let s = step as f64;
            if s < warmup {
                config.learning_rate * (s + 1.0) / warmup
            } else {
                let progress = (s - warmup) / ((total as f64 - warmup).max(1.0));
                config.learning_rate
                    * 0.5
                    * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
            }
        }
    }
}

/// Untaped label-smoothed cross-entropy, averaged over included rows.
pub fn smoothed_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    include: &[bool],
    eps: f64,
) -> Result<f64> {
    let (rows, v) = (logits.rows(), logits.cols());
    if targets.len() != rows || include.len() != rows {
        return Err(Error::shape(
            "smoothed_cross_entropy",
            format!("{rows} rows, {} targets", targets.len()),
        ));
    }
    let count = include.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::contract("every position of the loss is masked"));
    }
    let mut total = 0.0;
    for r in (0..rows).filter(|&r| include[r]) {
        let row: Vec<f64> = logits.row(r).iter().map(|x| x.to_f64()).collect();
        let lp = kernels::log_softmax(&row);
        for (j, &l) in lp.iter().enumerate() {
            let q = if j == targets[r] {
                1.0 - eps + eps / v as f64
            } else {
                eps / v as f64
            };
            total -= q * l;
        }
    }
    Ok(total / count as f64)
}

pub fn global_norm(grads: &[Vec<f32>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` to norm `max_norm` when larger; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads
            .iter_mut()
            .flat_map(|g| g.iter_mut())
            .for_each(|x| *x *= s);
    }
    norm
}

/// AdamW moments for every tensor of a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update followed by decoupled decay
/// `p <- p * (1 - lr * wd)`.
pub fn optimizer_step(
    params: &mut ParamStore<f32>,
    grads: &[Vec<f32>],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len()
        || grads
            .iter()
            .zip(params.tensors())
            .any(|(g, p)| g.len() != p.numel())
    {
        return Err(Error::shape(
            "optimizer_step",
            "gradients do not mirror parameters",
        ));
    }
    if let Some((i, _)) = grads
        .iter()
        .enumerate()
        .find(|(_, g)| g.iter().any(|x| !x.is_finite()))
    {
        return Err(Error::Diverged {
            step: state.step as usize,
            msg: format!(
                "non-finite gradient for {}",
                params.name(params.ids().nth(i).unwrap())
            ),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    for (((p, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let g = g as f64;
            let mm = ADAM_BETA1 * *m as f64 + (1.0 - ADAM_BETA1) * g;
            let vv = ADAM_BETA2 * *v as f64 + (1.0 - ADAM_BETA2) * g * g;
            *m = mm as f32;
            *v = vv as f32;
            let update = lr * (mm / c1) / ((vv / c2).sqrt() + ADAM_EPS);
            *p = ((*p as f64 - update) * decay) as f32;
        }
    }
    Ok(())
}

/// One training sequence: positions `< prefix_len` are conditioning only.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub image: usize,
    pub ids: Vec<u32>,
    pub prefix_len: usize,
    pub table: usize,
}

impl TrainItem {
    /// Inputs, labels and loss mask for teacher forcing.
    pub fn teacher_forcing(&self) -> (&[u32], Vec<usize>, Vec<bool>) {
        let n = self.ids.len();
        let inputs = &self.ids[..n - 1];
        let labels = self.ids[1..].iter().map(|&t| t as usize).collect();
        let mask = (0..n - 1).map(|t| t + 1 >= self.prefix_len).collect();
        (inputs, labels, mask)
    }
}

/// Images either pre-encoded by a frozen encoder or rendered for a trainable one.
#[derive(Clone, Debug)]
pub enum ImageBank {
    Frozen(Vec<EncodedImage<f32>>),
    Rendered(Vec<GlyphImageSpec>),
}

impl ImageBank {
    pub fn len(&self) -> usize {
        match self {
            ImageBank::Frozen(v) => v.len(),
            ImageBank::Rendered(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-task item lists addressed by the sampler's `(task, example)` pairs.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub tasks: Vec<Vec<TrainItem>>,
    pub images: ImageBank,
}

#[derive(Clone, Debug)]
struct ExampleGrads {
    loss: f64,
    count: usize,
    decoder: Vec<Vec<f32>>,
    encoder: Vec<Vec<f32>>,
}

fn example_grads(
    decoder: &Decoder<f32>,
    encoder: Option<&ToyEncoder<f32>>,
    images: &ImageBank,
    item: &TrainItem,
    eps: f64,
    dropout_seed: Option<u64>,
) -> Result<ExampleGrads> {
    let mut tape = GradTape::new();
    let dv = decoder.register(&mut tape, true);
    let (x, ev) = match (images, encoder) {
        (ImageBank::Frozen(imgs), _) => (tape.constant(imgs[item.image].tokens().clone()), None),
        (ImageBank::Rendered(specs), Some(enc)) => {
            let ev = enc.register(&mut tape, true);
            let x = enc.encode_on_tape(&mut tape, &ev, &render(&specs[item.image]))?;
            (x, Some(ev))
        }
        (ImageBank::Rendered(_), None) => {
            return Err(Error::config("rendered images need an encoder"))
        }
    };
    let memory = decoder.memory_on_tape(&mut tape, &dv, x)?;
    let (inputs, labels, mask) = item.teacher_forcing();
    let logits =
        decoder.logits_on_tape(&mut tape, &dv, memory, inputs, item.table, dropout_seed)?;
    let loss = tape.smoothed_cross_entropy(logits, &labels, &mask, eps as f32)?;
    let mut g = tape.backward(loss)?;
    Ok(ExampleGrads {
        loss: tape.value(loss).data()[0] as f64,
        count: mask.iter().filter(|&&m| m).count(),
        decoder: dv.vars.iter().map(|&v| g.take(v)).collect(),
        encoder: ev
            .map(|ev| ev.vars.iter().map(|&v| g.take(v)).collect())
            .unwrap_or_default(),
    })
}

/// Token-level mean loss of a batch and its gradients, summed in batch order.
pub fn batch_gradients(
    exec: Exec,
    decoder: &Decoder<f32>,
    encoder: Option<&ToyEncoder<f32>>,
    data: &TrainData,
    batch: &[(usize, usize)],
    eps: f64,
    dropout_seeds: Option<&[u64]>,
) -> Result<(f64, Vec<Vec<f32>>, Vec<Vec<f32>>)> {
    let jobs: Vec<(usize, &TrainItem)> = batch
        .iter()
        .enumerate()
        .map(|(i, &(t, e))| (i, &data.tasks[t][e]))
        .collect();
    let per = par::try_map(exec, jobs, |(i, item)| {
        example_grads(
            decoder,
            encoder,
            &data.images,
            item,
            eps,
            dropout_seeds.map(|s| s[i]),
        )
    })?;
    let total: usize = per.iter().map(|g| g.count).sum();
    let mut dec: Vec<Vec<f32>> = decoder
        .params()
        .tensors()
        .iter()
        .map(|t| vec![0.0; t.numel()])
        .collect();
    let mut enc: Vec<Vec<f32>> = encoder
        .map(|e| {
            e.params()
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.numel()])
                .collect()
        })
        .unwrap_or_default();
    let mut loss = 0.0;
    for g in &per {
        let w = g.count as f64 / total as f64;
        loss += g.loss * w;
        for (acc, part) in dec
            .iter_mut()
            .zip(&g.decoder)
            .chain(enc.iter_mut().zip(&g.encoder))
        {
            for (a, &p) in acc.iter_mut().zip(part) {
                *a += p * w as f32;
            }
        }
    }
    Ok((loss, dec, enc))
}

/// Evaluation hook: `(step, decoder, trainable encoder)`.
pub type EvalFn<'a> =
    dyn FnMut(usize, &Decoder<f32>, Option<&ToyEncoder<f32>>) -> Result<Vec<EvalRecord>> + 'a;

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean training loss per step.
    pub losses: Vec<f64>,
    pub history: Vec<EvalRecord>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = seed ^ 0x243f_6a88_85a3_08d3;
    for x in [a, b] {
        h ^= x
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    }
    h
}

/// Optimizer steps `train` will take: `steps` if set, else `ceil(epochs * epoch_length)`.
pub fn total_steps(config: &TrainConfig, spec: &MixtureSpec) -> Result<usize> {
    Ok(match config.steps {
        Some(s) => s,
        None => (config.epochs * epoch_length(spec)? as f64).ceil() as usize,
    })
}

/// Trains `decoder` (and `encoder` when `config.train_encoder`) in place.
///
/// On divergence the parameters keep their last finite values and the error
/// reports the step.
pub fn train(
    decoder: &mut Decoder<f32>,
    mut encoder: Option<&mut ToyEncoder<f32>>,
    data: &TrainData,
    sampler: &mut Sampler,
    config: &TrainConfig,
    exec: Exec,
    eval: &mut EvalFn<'_>,
) -> Result<TrainReport> {
    config.validate()?;
    if config.train_encoder != matches!(data.images, ImageBank::Rendered(_)) {
        return Err(Error::config(
            "train_encoder needs rendered images and vice versa",
        ));
    }
    if config.train_encoder && encoder.is_none() {
        return Err(Error::config(
            "train_encoder is set but no encoder was given",
        ));
    }
    decoder.set_dropout(config.dropout);
    let total = total_steps(config, sampler.spec())?;
    let mut dec_opt = OptimizerState::new(decoder.params());
    let mut enc_opt = encoder.as_deref().map(|e| OptimizerState::new(e.params()));
    let mut report = TrainReport::default();
    for step in 0..total {
        let batch = sampler.next_batch();
        let seeds: Vec<u64> = (0..batch.len())
            .map(|i| mix(config.seed, step as u64, i as u64))
            .collect();
        let dropout = (config.dropout > 0.0).then_some(seeds.as_slice());
        let (loss, mut gd, mut ge) = batch_gradients(
            exec,
            decoder,
            encoder.as_deref(),
            data,
            &batch,
            config.label_smoothing,
            dropout,
        )
        .map_err(|e| match e {
            Error::NonFinite { op } => Error::Diverged {
                step,
                msg: format!("non-finite value in {op}"),
            },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                msg: format!("loss is {loss}"),
            });
        }
        let mut all: Vec<Vec<f32>> = gd.drain(..).chain(ge.drain(..)).collect();
        clip_global_norm(&mut all, config.grad_clip_norm);
        let n_dec = decoder.params().len();
        let enc_grads = all.split_off(n_dec);
        let lr = learning_rate_at(config, step, total);
        let mut next = decoder.params().clone();
        optimizer_step(&mut next, &all, &mut dec_opt, lr, config.weight_decay)
            .map_err(|e| diverged_at(e, step))?;
        let mut next_enc = None;
        if let (Some(enc), Some(opt)) = (encoder.as_deref(), enc_opt.as_mut()) {
            let mut p = enc.params().clone();
            optimizer_step(
                &mut p,
                &enc_grads,
                opt,
                lr * config.encoder_lr_multiplier,
                config.weight_decay,
            )
            .map_err(|e| diverged_at(e, step))?;
            next_enc = Some(p);
        }
        if !next.all_finite() || next_enc.as_ref().is_some_and(|p| !p.all_finite()) {
            return Err(Error::Diverged {
                step,
                msg: "parameters became non-finite".into(),
            });
        }
        *decoder.params_mut() = next;
        if let (Some(enc), Some(p)) = (encoder.as_deref_mut(), next_enc) {
            *enc.params_mut() = p;
        }
        report.losses.push(loss);
        report.steps = step + 1;
        if config.eval_every > 0 && (step + 1) % config.eval_every == 0 && step + 1 < total {
            report
                .history
                .extend(eval(step + 1, decoder, encoder.as_deref())?);
        }
    }
    report
        .history
        .extend(eval(total, decoder, encoder.as_deref())?);
    Ok(report)
}

fn diverged_at(e: Error, step: usize) -> Error {
    match e {
        Error::Diverged { msg, .. } => Error::Diverged { step, msg },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_cases() {
        let mut g = vec![vec![0.3f32, 0.4]];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g, vec![vec![0.3, 0.4]]);
        let mut g = vec![vec![0.0f32, 4.0], vec![0.0]];
        let pre = clip_global_norm(&mut g, 1.0);
        assert_eq!(pre, 4.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-6);
        assert_eq!(g[0][1], 1.0);
    }

    #[test]
    fn zero_gradients_only_decay() {
        let mut p = ParamStore::new();
        p.push("w", Tensor::new(vec![3], vec![1.0f32, -2.0, 0.5]).unwrap());
        let before = p.clone();
        let mut st = OptimizerState::new(&p);
        optimizer_step(&mut p, &[vec![0.0; 3]], &mut st, 0.1, 0.01).unwrap();
        for (a, b) in p.tensors()[0].data().iter().zip(before.tensors()[0].data()) {
            assert_eq!(*a, ((*b as f64) * (1.0 - 0.1 * 0.01)) as f32);
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.push("w", Tensor::new(vec![2], vec![0.0f32, 0.0]).unwrap());
        let mut st = OptimizerState::new(&p);
        optimizer_step(&mut p, &[vec![3.0, -0.5]], &mut st, 0.01, 0.0).unwrap();
        let d = p.tensors()[0].data();
        assert!((d[0] + 0.01).abs() < 1e-7 && (d[1] - 0.01).abs() < 1e-7);
    }

    #[test]
    fn non_finite_gradients_abort() {
        let mut p = ParamStore::new();
        p.push("w", Tensor::new(vec![1], vec![0.0f32]).unwrap());
        let mut st = OptimizerState::new(&p);
        assert!(matches!(
            optimizer_step(&mut p, &[vec![f32::NAN]], &mut st, 0.01, 0.0),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn smoothed_loss_cases() {
        let peaked = Tensor::new(vec![1, 3], vec![100.0f64, -100.0, -100.0]).unwrap();
        assert!(smoothed_cross_entropy(&peaked, &[0], &[true], 0.0).unwrap() < 1e-12);
        let flat = Tensor::new(vec![2, 5], vec![0.7f64; 10]).unwrap();
        for eps in [0.0, 0.1, 0.5] {
            let l = smoothed_cross_entropy(&flat, &[1, 3], &[true, true], eps).unwrap();
            assert!((l - 5f64.ln()).abs() < 1e-12);
        }
        assert!(smoothed_cross_entropy(&flat, &[1, 3], &[false, false], 0.1).is_err());
    }

    #[test]
    fn cosine_schedule_shape() {
        let c = TrainConfig::default();
        let total = 100;
        assert!(learning_rate_at(&c, 0, total) < learning_rate_at(&c, 5, total));
        assert!((learning_rate_at(&c, 9, total) - c.learning_rate).abs() < 1e-12);
        assert!(learning_rate_at(&c, 99, total) < 1e-5);
        let flat = TrainConfig {
            schedule: Schedule::Constant,
            ..c
        };
        assert_eq!(learning_rate_at(&flat, 50, total), flat.learning_rate);
    }
}
