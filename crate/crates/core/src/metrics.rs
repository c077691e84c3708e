//! Ranking metrics, the trained-model scorer and popularity baselines.

use rayon::prelude::*;

use crate::anchors::item_encodings;
use crate::autodiff::Tensor;
use crate::corpus::{SessionCorpus, TrainingExample};
use crate::error::{Error, Result};
use crate::gsn::item_embeddings;
use crate::model::forward_session;
use crate::train::Checkpoint;

pub const DEFAULT_CUTOFF: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub k: usize,
    pub hr_at_k: f64,
    pub mrr_at_k: f64,
    pub n_evaluated: usize,
    /// Examples dropped because they mention items outside the vocabulary.
    pub n_skipped: usize,
}

/// Anything that scores every item given a session prefix. Higher is better.
pub trait Ranker: Sync {
    fn n_items(&self) -> usize;
    fn scores(&self, prefix: &[usize]) -> Result<Vec<f64>>;

    /// Indices of the `k` best items, ties by ascending index.
    fn top_k(&self, prefix: &[usize], k: usize) -> Result<Vec<usize>> {
        let s = self.scores(prefix)?;
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        idx.truncate(k);
        Ok(idx)
    }
}

/// 1-based position of `target` when items are sorted by score descending
/// with ties broken by ascending index.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    let mut rank = 1;
    for (j, &s) in scores.iter().enumerate() {
        if s > t || (s == t && j < target) {
            rank += 1;
        }
    }
    rank
}

/// HR@K and MRR@K from 1-based ranks.
pub fn metrics_from_ranks(ranks: &[usize], k: usize) -> Metrics {
    let n = ranks.len();
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    // sorted summation keeps the result independent of example order
    let mut rr: Vec<f64> = ranks.iter().filter(|&&r| r <= k).map(|&r| 1.0 / r as f64).collect();
    rr.sort_by(f64::total_cmp);
    let rr_sum = rr.iter().fold(0.0, |acc, x| acc + x);
    let (hr, mrr) = if n == 0 {
        (0.0, 0.0)
    } else {
        (hits as f64 / n as f64, rr_sum / n as f64)
    };
    Metrics {
        k,
        hr_at_k: hr,
        mrr_at_k: mrr,
        n_evaluated: n,
        n_skipped: 0,
    }
}

/// Ranks every example's target under `ranker`. Examples that reference an
/// index `>= n_items` are skipped and counted.
pub fn evaluate_ranker<R: Ranker + ?Sized>(ranker: &R, test: &[TrainingExample], k: usize) -> Result<Metrics> {
    if k == 0 {
        return Err(Error::invalid("cutoff must be positive"));
    }
    let n = ranker.n_items();
    let known = |e: &&TrainingExample| e.target < n && !e.prefix.is_empty() && e.prefix.iter().all(|&i| i < n);
    let usable: Vec<&TrainingExample> = test.iter().filter(known).collect();
    let ranks: Vec<usize> = usable
        .par_iter()
        .map(|e| ranker.scores(&e.prefix).map(|s| rank_of(&s, e.target)))
        .collect::<Result<_>>()?;
    let mut m = metrics_from_ranks(&ranks, k);
    m.n_skipped = test.len() - usable.len();
    Ok(m)
}

/// Scores with the fused prediction of a trained model.
pub struct ModelRanker<'a> {
    ckpt: &'a Checkpoint,
    h_a: Tensor,
    h_b: Tensor,
}

impl<'a> ModelRanker<'a> {
    pub fn new(ckpt: &'a Checkpoint) -> Result<Self> {
        let (h_a, h_b) = item_tables(ckpt)?;
        Ok(Self { ckpt, h_a, h_b })
    }
}

/// `(H_a, H_b)` for a checkpoint.
pub fn item_tables(ckpt: &Checkpoint) -> Result<(Tensor, Tensor)> {
    let cfg = &ckpt.config;
    let h_a = item_embeddings(&ckpt.params.h0, &ckpt.adjacency, cfg.layers, cfg.iterations)?;
    let h_b = item_encodings(&h_a, &ckpt.anchors, &ckpt.params.encoder)?.h_b;
    Ok((h_a, h_b))
}

impl Ranker for ModelRanker<'_> {
    fn n_items(&self) -> usize {
        self.h_a.rows()
    }

    fn scores(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(forward_session(&self.ckpt.params, prefix, &self.h_a, &self.h_b)?.y_fused)
    }
}

pub fn evaluate(ckpt: &Checkpoint, test: &[TrainingExample], k: usize) -> Result<Metrics> {
    evaluate_ranker(&ModelRanker::new(ckpt)?, test, k)
}

/// Global click popularity.
pub struct PopRanker {
    counts: Vec<usize>,
}

impl PopRanker {
    pub fn from_counts(counts: Vec<usize>) -> Self {
        Self { counts }
    }
}

impl Ranker for PopRanker {
    fn n_items(&self) -> usize {
        self.counts.len()
    }

    fn scores(&self, _prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self.counts.iter().map(|&c| c as f64).collect())
    }
}

/// Within-prefix popularity, backfilled by global popularity.
pub struct SPopRanker {
    counts: Vec<usize>,
}

impl SPopRanker {
    pub fn from_counts(counts: Vec<usize>) -> Self {
        Self { counts }
    }
}

impl Ranker for SPopRanker {
    fn n_items(&self) -> usize {
        self.counts.len()
    }

    fn scores(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let n = self.counts.len();
        let mut local = vec![0usize; n];
        for &i in prefix {
            if i >= n {
                return Err(Error::invalid(format!("item {i} outside {n} items")));
            }
            local[i] += 1;
        }
        // any prefix count outweighs every global count
        let big = (self.counts.iter().sum::<usize>() + 1) as f64;
        Ok(local
            .iter()
            .zip(&self.counts)
            .map(|(&l, &g)| l as f64 * big + g as f64)
            .collect())
    }
}

pub fn baseline_pop(corpus: &SessionCorpus) -> PopRanker {
    PopRanker::from_counts(corpus.item_counts())
}

pub fn baseline_spop(corpus: &SessionCorpus) -> SPopRanker {
    SPopRanker::from_counts(corpus.item_counts())
}
