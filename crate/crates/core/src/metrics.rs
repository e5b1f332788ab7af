//! Corpus-level BLEU-4 and CIDEr.

use std::collections::HashMap;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::text::split_words;

/// One candidate caption with its references, already tokenized.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalRecord {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalRecord {
    /// Tokenizes with the training tokenizer.
    pub fn from_text<S: AsRef<str>>(candidate: &str, references: &[S]) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Data("evaluation record without references".into()));
        }
        Ok(Self {
            candidate: split_words(candidate),
            references: references.iter().map(|r| split_words(r.as_ref())).collect(),
        })
    }
}

/// JSON-lines input record: `{"candidate": str, "references": [str]}`.
#[derive(Clone, Debug, Deserialize)]
pub struct PairRecord {
    pub candidate: String,
    pub references: Vec<String>,
}

pub fn parse_pairs(text: &str) -> Result<Vec<EvalRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let r: PairRecord = serde_json::from_str(l).map_err(|e| Error::Data(format!("line {}: {e}", n + 1)))?;
            EvalRecord::from_text(&r.candidate, &r.references)
        })
        .collect()
}

fn ngram_counts(words: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if words.len() >= n {
        for g in words.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with clipped n-gram precisions for n = 1..4, uniform
/// weights, closest-reference brevity penalty and no smoothing.
pub fn bleu4(records: &[EvalRecord]) -> f64 {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for rec in records {
        let len = rec.candidate.len();
        c += len;
        r += rec
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(len), l))
            .unwrap_or(0);
        for n in 1..=4 {
            let cand = ngram_counts(&rec.candidate, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for reference in &rec.references {
                for (g, k) in ngram_counts(reference, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in cand {
                total[n - 1] += k;
                matched[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0));
            }
        }
    }
    if c == 0 || matched.contains(&0) {
        return 0.0;
    }
    let log_p: f64 = (0..4).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * log_p.exp()
}

const CIDER_SIGMA: f64 = 6.0;

/// tf-idf n-gram vectors with idf from reference document frequencies.
fn tfidf<'a>(words: &'a [String], n: usize, df: &HashMap<&[String], usize>, log_n: f64) -> HashMap<&'a [String], f64> {
    ngram_counts(words, n)
        .into_iter()
        .map(|(g, k)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g, k as f64 * (log_n - d.ln()))
        })
        .collect()
}

fn cosine(a: &HashMap<&[String], f64>, b: &HashMap<&[String], f64>) -> f64 {
    let norm = |v: &HashMap<&[String], f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    dot / (na * nb)
}

/// Per-record CIDEr scores. Document frequency counts each record's
/// reference set once; idf is `ln N − ln max(1, df)`.
pub fn cider_scores(records: &[EvalRecord]) -> Vec<f64> {
    if records.len() < 2 {
        log::warn!(
            "CIDEr over {} record(s): document frequencies are degenerate",
            records.len()
        );
    }
    let log_n = (records.len().max(1) as f64).ln();
    let mut scores = vec![0.0; records.len()];
    for n in 1..=4 {
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for rec in records {
            let mut seen: Vec<&[String]> = rec
                .references
                .iter()
                .flat_map(|r| ngram_counts(r, n).into_keys())
                .collect();
            seen.sort_unstable();
            seen.dedup();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        for (rec, score) in records.iter().zip(scores.iter_mut()) {
            let cand = tfidf(&rec.candidate, n, &df, log_n);
            let mut sum = 0.0;
            for reference in &rec.references {
                let refv = tfidf(reference, n, &df, log_n);
                let delta = rec.candidate.len() as f64 - reference.len() as f64;
                let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
                sum += cosine(&cand, &refv) * penalty;
            }
            *score += 10.0 * sum / rec.references.len() as f64 / 4.0;
        }
    }
    scores
}

/// Mean CIDEr over the corpus.
pub fn cider(records: &[EvalRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let scores = cider_scores(records);
    scores.iter().sum::<f64>() / scores.len() as f64
}
