//! Image-to-caption retrieval scored by BLEU-4.

use rand::Rng;
use serde::Serialize;

use super::bleu::bleu4;
use super::EvalError;
use crate::caption::{render_caption, tokenize, tokenize_words, TemplateKind, Vocabulary};
use crate::model::{stack_images, DualEncoder};
use crate::nn::{Scalar, Tensor};
use crate::rng::{stream_rng, Stream};
use crate::synth::Dataset;

/// Pool rows ranked by descending similarity to `query`; equal scores keep
/// pool order. Returns `(pool index, similarity)` for the first `k`.
pub fn retrieve_topk<T: Scalar>(query: &[T], pool: &Tensor<T>, k: usize) -> Result<Vec<(usize, f64)>, EvalError> {
    let n = pool.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(EvalError::EmptyInput("retrieval pool is empty"));
    }
    if k > n {
        return Err(EvalError::Invalid(format!("k = {k} exceeds pool size {n}")));
    }
    let mut scored: Vec<(usize, f64)> = (0..n)
        .map(|j| (j, pool.row(j).iter().zip(query).map(|(a, b)| a.as_f64() * b.as_f64()).sum()))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievedItem {
    pub id: String,
    pub top1_bleu: f64,
    /// Pool indices of the top-k captions.
    pub ranked: Vec<usize>,
    pub own_rank: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub k: usize,
    pub mean_top1_bleu: f64,
    pub random_bleu: f64,
    /// `hits_at[j]`: fraction of queries whose own caption ranks within the top `j + 1`.
    pub hits_at: Vec<f64>,
    pub items: Vec<RetrievedItem>,
}

pub const RANDOM_DRAWS: usize = 1000;

/// Retrieval over the items `indices`: each image queries the pool of all
/// their location-style captions (zero grades included), and the top-1
/// caption is scored by BLEU-4 against the query's own caption.
pub fn retrieval_eval(
    model: &DualEncoder<f32>,
    data: &Dataset,
    indices: &[usize],
    k: usize,
    seed: u64,
) -> Result<RetrievalReport, EvalError> {
    if indices.is_empty() {
        return Err(EvalError::EmptyInput("retrieval pool is empty"));
    }
    let vocab = Vocabulary::grammar();
    let captions: Vec<String> =
        indices.iter().map(|&i| render_caption(data.record(i), TemplateKind::Location, true).text).collect();
    let words: Vec<Vec<String>> = captions.iter().map(|c| tokenize_words(c)).collect();
    let tokens: Vec<u32> = captions.iter().flat_map(|c| tokenize(c, &vocab, model.config.max_len)).collect();
    let pool = model.embed_texts(&tokens, captions.len())?;
    let images: Vec<_> = indices.iter().map(|&i| &data.images[i]).collect();
    let queries = model.embed_images(&stack_images(&images)?)?;

    let mut hits = vec![0usize; k];
    let mut items = Vec::with_capacity(indices.len());
    for (q, &i) in indices.iter().enumerate() {
        let ranked = retrieve_topk(queries.row(q), &pool, k)?;
        let top = ranked.first().map(|r| r.0).unwrap_or(q);
        let own_rank = ranked.iter().position(|r| r.0 == q);
        if let Some(r) = own_rank {
            hits[r..].iter_mut().for_each(|h| *h += 1);
        }
        items.push(RetrievedItem {
            id: data.record(i).id.clone(),
            top1_bleu: bleu4(&words[top], &words[q])?,
            ranked: ranked.iter().map(|r| r.0).collect(),
            own_rank,
        });
    }
    let n = indices.len() as f64;
    let mut rng = stream_rng(seed, Stream::Evaluation, 0);
    let mut random = 0.0;
    for _ in 0..RANDOM_DRAWS {
        let (q, j) = (rng.random_range(0..indices.len()), rng.random_range(0..indices.len()));
        random += bleu4(&words[j], &words[q])?;
    }
    Ok(RetrievalReport {
        k,
        mean_top1_bleu: items.iter().map(|i| i.top1_bleu).sum::<f64>() / n,
        random_bleu: random / RANDOM_DRAWS as f64,
        hits_at: hits.iter().map(|h| *h as f64 / n).collect(),
        items,
    })
}
