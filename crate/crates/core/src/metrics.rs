//! Corpus BLEU-1..4 (unsmoothed, single reference) and sentence-averaged
//! ROUGE-L F-measure on whitespace-tokenised text, both on a 0-100 scale.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_corpus<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::Domain("cannot score an empty corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::dim("corpus", &[hyps.len()], &[refs.len()]));
    }
    Ok(())
}

fn ngram_counts<'a, 'b>(tokens: &'b [&'a str], n: usize) -> HashMap<&'b [&'a str], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU with uniform weights over 1..=max_n and brevity penalty.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R], max_n: usize) -> Result<f64> {
    check_corpus(hyps, refs)?;
    if max_n == 0 {
        return Err(Error::Domain("BLEU order must be at least 1".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        let ht: Vec<&str> = h.as_ref().split_whitespace().collect();
        let rt: Vec<&str> = rf.as_ref().split_whitespace().collect();
        c += ht.len();
        r += rt.len();
        for n in 1..=max_n {
            let hc = ngram_counts(&ht, n);
            let rc = ngram_counts(&rt, n);
            for (g, k) in &hc {
                matched[n - 1] += (*k).min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += ht.len().saturating_sub(n - 1);
        }
    }
    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(100.0 * bp * log_p.exp())
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean over sentences of the LCS F-measure `2PR/(P+R)`.
pub fn rouge_l<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let mut sum = 0.0;
    for (h, rf) in hyps.iter().zip(refs) {
        let ht: Vec<&str> = h.as_ref().split_whitespace().collect();
        let rt: Vec<&str> = rf.as_ref().split_whitespace().collect();
        let l = lcs_len(&ht, &rt);
        if l > 0 {
            let p = l as f64 / ht.len() as f64;
            let r = l as f64 / rt.len() as f64;
            sum += 2.0 * p * r / (p + r);
        }
    }
    Ok(100.0 * sum / hyps.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub size: usize,
}

pub fn evaluate<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<EvalReport> {
    Ok(EvalReport {
        bleu1: bleu(hyps, refs, 1)?,
        bleu2: bleu(hyps, refs, 2)?,
        bleu3: bleu(hyps, refs, 3)?,
        bleu4: bleu(hyps, refs, 4)?,
        rouge_l: rouge_l(hyps, refs)?,
        size: hyps.len(),
    })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>8} {:>8} {:>8} {:>8} {:>8}", "BLEU1", "BLEU2", "BLEU3", "BLEU4", "ROUGE")?;
        write!(
            f,
            "{:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
            self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.rouge_l
        )
    }
}
