//! Exact-match accuracy and corpus CIDEr.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multiplier applied to [`cider`] when reporting.
pub const CIDER_REPORT_SCALE: f64 = 10.0;
pub const MAX_NGRAM: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub count: usize,
}

/// 1 iff the strings are byte-identical.
pub fn exact_match(prediction: &str, target: &str) -> f64 {
    if prediction == target {
        1.0
    } else {
        0.0
    }
}

/// Mean exact match over aligned pairs; empty input scores 0.
pub fn accuracy<P: AsRef<str>, T: AsRef<str>>(predictions: &[P], targets: &[T]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let hits: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| exact_match(p.as_ref(), t.as_ref()))
        .sum();
    Ok(hits / predictions.len() as f64)
}

type Ngrams<'a> = HashMap<&'a [&'a str], f64>;

fn ngram_counts<'a>(words: &'a [&'a str], n: usize) -> Ngrams<'a> {
    let mut m = HashMap::new();
    if words.len() >= n {
        for g in words.windows(n) {
            *m.entry(g).or_insert(0.0) += 1.0;
        }
    }
    m
}

fn tfidf<'a>(counts: &Ngrams<'a>, df: &HashMap<&'a [&'a str], f64>, log_n: f64) -> Ngrams<'a> {
    let total: f64 = counts.values().sum();
    counts
        .iter()
        .map(|(g, &c)| {
            let d = df.get(g).copied().unwrap_or(0.0).max(1.0);
            (*g, c / total * (log_n - d.ln()))
        })
        .collect()
}

fn cosine(a: &Ngrams<'_>, b: &Ngrams<'_>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Corpus CIDEr: `(10 / 4) * sum_n mean_images mean_refs cos(g_n(c), g_n(s))`
/// with TF-IDF weights whose document frequency counts images whose
/// references contain the n-gram. N-grams absent from every reference use a
/// document frequency of one.
pub fn cider<C: AsRef<str>, R: AsRef<str>>(candidates: &[C], references: &[Vec<R>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::contract("empty corpus"));
    }
    if candidates.len() != references.len() {
        return Err(Error::contract(format!(
            "{} candidates for {} reference lists",
            candidates.len(),
            references.len()
        )));
    }
    if let Some(i) = references.iter().position(|r| r.is_empty()) {
        return Err(Error::contract(format!("image {i} has no references")));
    }
    let cands: Vec<Vec<&str>> = candidates
        .iter()
        .map(|c| c.as_ref().split_whitespace().collect())
        .collect();
    let refs: Vec<Vec<Vec<&str>>> = references
        .iter()
        .map(|rs| {
            rs.iter()
                .map(|r| r.as_ref().split_whitespace().collect())
                .collect()
        })
        .collect();
    let log_n = (candidates.len() as f64).ln();
    let mut score = 0.0;
    for n in 1..=MAX_NGRAM {
        let ref_counts: Vec<Vec<Ngrams<'_>>> = refs
            .iter()
            .map(|rs| rs.iter().map(|r| ngram_counts(r, n)).collect())
            .collect();
        let mut df: HashMap<&[&str], f64> = HashMap::new();
        for image in &ref_counts {
            let mut seen: Vec<&[&str]> = image.iter().flat_map(|m| m.keys().copied()).collect();
            seen.sort_unstable();
            seen.dedup();
            for g in seen {
                *df.entry(g).or_insert(0.0) += 1.0;
            }
        }
        let mut sum_n = 0.0;
        for (c, image) in cands.iter().zip(&ref_counts) {
            let vc = tfidf(&ngram_counts(c, n), &df, log_n);
            let per_ref: f64 = image
                .iter()
                .map(|r| cosine(&vc, &tfidf(r, &df, log_n)))
                .sum();
            sum_n += per_ref / image.len() as f64;
        }
        score += sum_n / cands.len() as f64;
    }
    Ok(score * 10.0 / MAX_NGRAM as f64)
}

/// CIDEr on the reporting scale.
pub fn cider_reported<C: AsRef<str>, R: AsRef<str>>(
    candidates: &[C],
    references: &[Vec<R>],
) -> Result<f64> {
    Ok(cider(candidates, references)? * CIDER_REPORT_SCALE)
}
