//! Ranking and classification metrics: AUC, MRR, NDCG.

use crate::error::{CtdgError, Result};

/// Candidate scores with their relevances.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedQuery {
    pub scores: Vec<f64>,
    pub relevance: Vec<f64>,
}

impl RankedQuery {
    pub fn new(scores: Vec<f64>, relevance: Vec<f64>) -> Result<Self> {
        if scores.len() != relevance.len() {
            return Err(CtdgError::ShapeMismatch(format!(
                "{} scores vs {} relevances",
                scores.len(),
                relevance.len()
            )));
        }
        if relevance.iter().any(|r| !(*r >= 0.0)) || scores.iter().any(|s| s.is_nan()) {
            return Err(CtdgError::InvalidParameter("relevances must be >= 0 and scores not NaN".into()));
        }
        Ok(Self { scores, relevance })
    }

    /// Candidate indices by descending score, ties in index order.
    pub fn order(&self) -> Vec<usize> {
        descending(&self.scores)
    }
}

fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(CtdgError::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(CtdgError::InvalidParameter("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(CtdgError::InvalidParameter("auc needs both classes".into()));
    }
    // Midranks over ascending scores.
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// 1-based rank of the single relevant candidate.
pub fn rank_of_relevant(q: &RankedQuery) -> Result<usize> {
    let rel: Vec<usize> = (0..q.relevance.len()).filter(|&i| q.relevance[i] > 0.0).collect();
    if rel.len() != 1 {
        return Err(CtdgError::InvalidParameter(format!(
            "query needs exactly one relevant candidate, has {}",
            rel.len()
        )));
    }
    Ok(q.order().iter().position(|&i| i == rel[0]).expect("index present") + 1)
}

pub fn mrr(queries: &[RankedQuery]) -> Result<f64> {
    if queries.is_empty() {
        return Err(CtdgError::Empty("no queries".into()));
    }
    let mut sum = 0.0;
    for q in queries {
        sum += 1.0 / rank_of_relevant(q)? as f64;
    }
    Ok(sum / queries.len() as f64)
}

fn dcg(rels: impl Iterator<Item = f64>) -> f64 {
    rels.enumerate()
        .map(|(i, r)| (2f64.powf(r) - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

/// Exponential-gain NDCG of the predicted order, optionally truncated.
pub fn ndcg(q: &RankedQuery, cutoff: Option<usize>) -> Result<f64> {
    if q.relevance.iter().all(|&r| r == 0.0) {
        return Err(CtdgError::InvalidParameter("ndcg needs a positive relevance".into()));
    }
    let k = cutoff.unwrap_or(q.relevance.len()).min(q.relevance.len());
    if k == 0 {
        return Err(CtdgError::InvalidParameter("cutoff must be >= 1".into()));
    }
    let got = dcg(q.order().into_iter().take(k).map(|i| q.relevance[i]));
    let mut ideal = q.relevance.clone();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let best = dcg(ideal.into_iter().take(k));
    Ok(got / best)
}
