//! Beam search over any next-token distribution.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Supplies next-token log-probabilities for a prefix that begins with BOS.
pub trait StepScorer {
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl<F: Fn(&[usize]) -> Result<Vec<f64>>> StepScorer for F {
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        self(prefix)
    }
}

/// A generated sequence (BOS excluded, EOS included when emitted) and its
/// summed log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
}

impl Hypothesis {
    pub fn finished(&self, eos: usize) -> bool {
        self.tokens.last() == Some(&eos)
    }
}

/// Higher score first; equal scores fall back to the lexicographically
/// smaller token sequence.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Standard beam search without length normalisation. Each step keeps the
/// best `width` extensions of the live beams; extensions ending in `eos` move
/// to the finished pool. Beams still live after `max_len` tokens are
/// finished as they stand. `bos` is never proposed.
pub fn beam_search<S: StepScorer + ?Sized>(
    scorer: &S,
    bos: usize,
    eos: usize,
    width: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut live = vec![Hypothesis { tokens: Vec::new(), score: 0.0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut cands = Vec::new();
        for h in &live {
            let mut prefix = Vec::with_capacity(h.tokens.len() + 1);
            prefix.push(bos);
            prefix.extend_from_slice(&h.tokens);
            let lp = scorer.next_log_probs(&prefix)?;
            for (tok, &l) in lp.iter().enumerate() {
                if tok == bos || !l.is_finite() {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                cands.push(Hypothesis { tokens, score: h.score + l });
            }
        }
        cands.sort_by(rank);
        cands.truncate(width);
        live.clear();
        for c in cands {
            if c.finished(eos) {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        // Scores never increase, so no live beam can overtake.
        if live.is_empty() || best_done >= best_live {
            break;
        }
    }
    finished.extend(live);
    finished.sort_by(rank);
    finished
        .into_iter()
        .next()
        .ok_or_else(|| Error::Domain("beam search produced no hypothesis".into()))
}

/// Argmax rollout until EOS or `max_len` tokens.
pub fn greedy<S: StepScorer + ?Sized>(scorer: &S, bos: usize, eos: usize, max_len: usize) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut h = Hypothesis { tokens: Vec::new(), score: 0.0 };
    while h.tokens.len() < max_len && !h.finished(eos) {
        let mut prefix = vec![bos];
        prefix.extend_from_slice(&h.tokens);
        let lp = scorer.next_log_probs(&prefix)?;
        let (tok, l) = lp
            .iter()
            .enumerate()
            .filter(|&(t, l)| t != bos && l.is_finite())
            .fold((usize::MAX, f64::NEG_INFINITY), |best, (t, &l)| if l > best.1 { (t, l) } else { best });
        if tok == usize::MAX {
            break;
        }
        h.tokens.push(tok);
        h.score += l;
    }
    Ok(h)
}

/// Best sequence among all EOS-terminated sequences of at most `max_len`
/// tokens and all unterminated sequences of exactly `max_len` tokens.
pub fn exhaustive<S: StepScorer + ?Sized>(scorer: &S, bos: usize, eos: usize, max_len: usize) -> Result<Hypothesis> {
    fn walk<S: StepScorer + ?Sized>(
        s: &S,
        bos: usize,
        eos: usize,
        max_len: usize,
        h: Hypothesis,
        best: &mut Option<Hypothesis>,
    ) -> Result<()> {
        if h.finished(eos) || h.tokens.len() == max_len {
            if best.as_ref().is_none_or(|b| rank(&h, b) == Ordering::Less) {
                *best = Some(h);
            }
            return Ok(());
        }
        let mut prefix = vec![bos];
        prefix.extend_from_slice(&h.tokens);
        for (tok, &l) in s.next_log_probs(&prefix)?.iter().enumerate() {
            if tok == bos || !l.is_finite() {
                continue;
            }
            let mut tokens = h.tokens.clone();
            tokens.push(tok);
            walk(s, bos, eos, max_len, Hypothesis { tokens, score: h.score + l }, best)?;
        }
        Ok(())
    }
    let mut best = None;
    walk(scorer, bos, eos, max_len, Hypothesis { tokens: Vec::new(), score: 0.0 }, &mut best)?;
    best.ok_or_else(|| Error::Domain("no sequences to enumerate".into()))
}
