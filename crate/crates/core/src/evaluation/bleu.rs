//! BLEU-4 without smoothing.

use std::collections::HashMap;

use super::EvalError;

const ORDER: usize = 4;

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and candidate n-gram totals for orders 1..=4.
fn clipped<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> [(usize, usize); ORDER] {
    let mut out = [(0, 0); ORDER];
    for (n, slot) in (1..=ORDER).zip(out.iter_mut()) {
        let cand = ngram_counts(candidate, n);
        let refs = ngram_counts(reference, n);
        let matched = cand.iter().map(|(g, c)| (*c).min(refs.get(g).copied().unwrap_or(0))).sum();
        *slot = (matched, candidate.len().saturating_sub(n - 1));
    }
    out
}

fn combine(stats: &[(usize, usize); ORDER], cand_len: usize, ref_len: usize) -> f64 {
    if stats.iter().any(|(m, t)| *m == 0 || *t == 0) {
        return 0.0;
    }
    let log_p: f64 = stats.iter().map(|(m, t)| (*m as f64 / *t as f64).ln()).sum::<f64>() / ORDER as f64;
    let bp = if cand_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / cand_len as f64).exp() };
    bp * log_p.exp()
}

/// Sentence BLEU-4 of `candidate` against one `reference`.
pub fn bleu4<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> Result<f64, EvalError> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(EvalError::EmptyInput("bleu4 needs non-empty candidate and reference"));
    }
    Ok(combine(&clipped(candidate, reference), candidate.len(), reference.len()))
}

/// Corpus BLEU-4: clipped counts and lengths are summed before combining.
pub fn corpus_bleu4<S: AsRef<str>>(pairs: &[(Vec<S>, Vec<S>)]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput("corpus_bleu4 needs at least one pair"));
    }
    let mut total = [(0, 0); ORDER];
    let (mut c, mut r) = (0, 0);
    for (cand, reference) in pairs {
        if cand.is_empty() || reference.is_empty() {
            return Err(EvalError::EmptyInput("bleu4 needs non-empty candidate and reference"));
        }
        for (t, s) in total.iter_mut().zip(clipped(cand, reference)) {
            t.0 += s.0;
            t.1 += s.1;
        }
        c += cand.len();
        r += reference.len();
    }
    Ok(combine(&total, c, r))
}
