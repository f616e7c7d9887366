//! ROUGE-1/2/L and corpus BLEU over lowercased whitespace tokens.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Precision, recall and F1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(overlap: usize, cand: usize, reference: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (p, r) = (ratio(overlap, cand), ratio(overlap, reference));
        Prf {
            precision: p,
            recall: r,
            f1: if p + r > 0.0 {
                2.0 * p * r / (p + r)
            } else {
                0.0
            },
        }
    }
}

/// Lowercased whitespace tokens.
pub fn eval_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped overlap and the candidate n-gram total.
fn clipped<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let overlap = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (overlap, cand.len().saturating_sub(n - 1))
}

pub fn rouge_n<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> Result<Prf> {
    if n == 0 {
        return Err(Error::invalid("ROUGE-N needs n >= 1"));
    }
    if reference.is_empty() {
        return Err(Error::invalid("empty reference"));
    }
    let (overlap, cand_total) = clipped(cand, reference, n);
    Ok(Prf::from_counts(
        overlap,
        cand_total,
        reference.len().saturating_sub(n - 1),
    ))
}

/// Longest common subsequence length.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(cand: &[T], reference: &[T]) -> Result<Prf> {
    if reference.is_empty() {
        return Err(Error::invalid("empty reference"));
    }
    Ok(Prf::from_counts(
        lcs_len(cand, reference),
        cand.len(),
        reference.len(),
    ))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// 0..=100
    pub bleu: f64,
    pub brevity_penalty: f64,
    /// Modified n-gram precisions, n = 1..=max_n.
    pub precisions: Vec<f64>,
    pub candidate_length: usize,
    pub reference_length: usize,
}

/// Corpus BLEU without smoothing: any zero precision gives 0.
pub fn corpus_bleu<T: Eq + Hash, C: AsRef<[T]>, R: AsRef<[T]>>(
    candidates: &[C],
    references: &[R],
    max_n: usize,
) -> Result<BleuScore> {
    if candidates.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    if candidates.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::invalid("BLEU needs max_n >= 1"));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0, 0);
    for (c, r) in candidates.iter().zip(references) {
        let (c, r) = (c.as_ref(), r.as_ref());
        c_len += c.len();
        r_len += r.len();
        for n in 1..=max_n {
            let (m, t) = clipped(c, r, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    let precisions: Vec<f64> = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let brevity_penalty = if c_len == 0 {
        0.0
    } else if c_len >= r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else {
        100.0
            * brevity_penalty
            * (precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64).exp()
    };
    Ok(BleuScore {
        bleu,
        brevity_penalty,
        precisions,
        candidate_length: c_len,
        reference_length: r_len,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Rouge,
    Bleu,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rouge" => Ok(Metric::Rouge),
            "bleu" => Ok(Metric::Bleu),
            other => Err(Error::invalid(format!("unknown metric `{other}`"))),
        }
    }
}

/// Corpus scores; ROUGE values are means over examples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge1: Option<Prf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge2: Option<Prf>,
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "rougeL")]
    pub rouge_l: Option<Prf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bleu: Option<BleuScore>,
}

fn mean_prf(items: &[Prf]) -> Prf {
    let n = items.len() as f64;
    Prf {
        precision: items.iter().map(|p| p.precision).sum::<f64>() / n,
        recall: items.iter().map(|p| p.recall).sum::<f64>() / n,
        f1: items.iter().map(|p| p.f1).sum::<f64>() / n,
    }
}

/// Scores candidate texts against references with the chosen metrics.
pub fn evaluate<S: AsRef<str>>(
    candidates: &[S],
    references: &[S],
    metrics: &[Metric],
) -> Result<EvalReport> {
    if candidates.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let cands: Vec<Vec<String>> = candidates.iter().map(|c| eval_tokens(c.as_ref())).collect();
    let refs: Vec<Vec<String>> = references.iter().map(|r| eval_tokens(r.as_ref())).collect();
    let mut report = EvalReport {
        examples: cands.len(),
        ..EvalReport::default()
    };
    if metrics.contains(&Metric::Rouge) {
        let mut r1 = Vec::new();
        let mut r2 = Vec::new();
        let mut rl = Vec::new();
        for (i, (c, r)) in cands.iter().zip(&refs).enumerate() {
            let ctx = |e: Error| Error::invalid(format!("example {i}: {e}"));
            r1.push(rouge_n(c, r, 1).map_err(ctx)?);
            r2.push(rouge_n(c, r, 2).map_err(ctx)?);
            rl.push(rouge_l(c, r).map_err(ctx)?);
        }
        report.rouge1 = Some(mean_prf(&r1));
        report.rouge2 = Some(mean_prf(&r2));
        report.rouge_l = Some(mean_prf(&rl));
    }
    if metrics.contains(&Metric::Bleu) {
        report.bleu = Some(corpus_bleu(&cands, &refs, 4)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
