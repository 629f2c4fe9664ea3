//! Cosine ranking and retrieval metrics.

use std::cmp::Ordering;

use rayon::prelude::*;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("embedding dims differ: queries {queries}, targets {targets}")]
    Dim { queries: usize, targets: usize },
    #[error("{0} set is empty")]
    Empty(&'static str),
    #[error("expected {expected} labels for the {side}, got {got}")]
    LabelCount {
        side: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("no query has a relevant target")]
    NoRelevant,
    #[error("a precision-recall curve needs at least 2 points, got {0}")]
    CurvePoints(usize),
}

/// Full ranking of targets for each query.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedRetrieval {
    /// Target indices by descending similarity, ties by lower index.
    pub order: Vec<Vec<usize>>,
    /// Similarities aligned with `order`.
    pub similarity: Vec<Vec<f64>>,
    /// `relevant[q][k]` is whether the target at rank `k + 1` shares the query label.
    pub relevant: Vec<Vec<bool>>,
    pub zero_norm_queries: usize,
    pub zero_norm_targets: usize,
}

impl RankedRetrieval {
    /// A retrieval with given relevance lists and arbitrary similarities.
    pub fn from_relevance(relevant: Vec<Vec<bool>>) -> Self {
        let order = relevant.iter().map(|r| (0..r.len()).collect()).collect();
        let similarity = relevant
            .iter()
            .map(|r| (0..r.len()).map(|k| -(k as f64)).collect())
            .collect();
        Self {
            order,
            similarity,
            relevant,
            zero_norm_queries: 0,
            zero_norm_targets: 0,
        }
    }

    pub fn n_queries(&self) -> usize {
        self.relevant.len()
    }

    /// Queries with no relevant target; metrics skip them.
    pub fn skipped_queries(&self) -> usize {
        self.relevant.iter().filter(|r| !r.iter().any(|&x| x)).count()
    }

    fn scored(&self) -> Result<Vec<&[bool]>, EvalError> {
        let kept: Vec<&[bool]> = self
            .relevant
            .iter()
            .filter(|r| r.iter().any(|&x| x))
            .map(Vec::as_slice)
            .collect();
        if kept.is_empty() {
            return Err(EvalError::NoRelevant);
        }
        let skipped = self.relevant.len() - kept.len();
        if skipped > 0 {
            log::warn!("{skipped} queries have no relevant target and are skipped");
        }
        Ok(kept)
    }
}

/// Rows scaled to unit length; zero rows stay zero.
fn unit_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                r.to_vec()
            } else {
                r.iter().map(|x| x / n).collect()
            }
        })
        .collect()
}

fn zero_rows(t: &Tensor) -> usize {
    (0..t.rows()).filter(|&i| t.row(i).iter().all(|&x| x == 0.0)).count()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine_with_norms(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return f64::NEG_INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Cosine similarity; a zero vector on either side scores negative infinity.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    cosine_with_norms(a, norm(a), b, norm(b))
}

/// Ranking options. By default every target is ranked, including the
/// object sitting at the query's own index in the other modality.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RankOptions {
    pub exclude_same_index: bool,
}

/// [`rank`] with options.
pub fn rank_with(
    queries: &Tensor,
    query_labels: &[u32],
    targets: &Tensor,
    target_labels: &[u32],
    options: RankOptions,
) -> Result<RankedRetrieval, EvalError> {
    let mut rr = rank(queries, query_labels, targets, target_labels)?;
    if options.exclude_same_index {
        for qi in 0..rr.order.len() {
            if let Some(p) = rr.order[qi].iter().position(|&j| j == qi) {
                rr.order[qi].remove(p);
                rr.similarity[qi].remove(p);
                rr.relevant[qi].remove(p);
            }
        }
    }
    Ok(rr)
}

/// Ranks every target for every query by cosine similarity. Relevance is
/// label equality.
pub fn rank(
    queries: &Tensor,
    query_labels: &[u32],
    targets: &Tensor,
    target_labels: &[u32],
) -> Result<RankedRetrieval, EvalError> {
    if queries.cols() != targets.cols() {
        return Err(EvalError::Dim {
            queries: queries.cols(),
            targets: targets.cols(),
        });
    }
    if queries.rows() == 0 {
        return Err(EvalError::Empty("query"));
    }
    if targets.rows() == 0 {
        return Err(EvalError::Empty("target"));
    }
    if query_labels.len() != queries.rows() {
        return Err(EvalError::LabelCount {
            side: "queries",
            expected: queries.rows(),
            got: query_labels.len(),
        });
    }
    if target_labels.len() != targets.rows() {
        return Err(EvalError::LabelCount {
            side: "targets",
            expected: targets.rows(),
            got: target_labels.len(),
        });
    }
    let (zero_q, zero_t) = (zero_rows(queries), zero_rows(targets));
    if zero_q + zero_t > 0 {
        log::warn!("zero-norm embeddings: {zero_q} queries, {zero_t} targets; they rank last");
    }
    let target_norms: Vec<f64> = (0..targets.rows()).map(|j| norm(targets.row(j))).collect();
    let per_query: Vec<(Vec<usize>, Vec<f64>, Vec<bool>)> = (0..queries.rows())
        .into_par_iter()
        .map(|qi| {
            let qv = queries.row(qi);
            let nq = norm(qv);
            let sims: Vec<f64> = (0..targets.rows())
                .map(|j| match cosine_with_norms(qv, nq, targets.row(j), target_norms[j]) {
                    s if s.is_nan() => f64::NEG_INFINITY,
                    s => s,
                })
                .collect();
            let mut order: Vec<usize> = (0..targets.rows()).collect();
            // partial_cmp so that -0.0 and 0.0 tie; NaN is already gone
            order.sort_by(|&a, &b| match sims[b].partial_cmp(&sims[a]) {
                Some(Ordering::Equal) | None => a.cmp(&b),
                Some(o) => o,
            });
            let similarity = order.iter().map(|&j| sims[j]).collect();
            let relevant = order.iter().map(|&j| target_labels[j] == query_labels[qi]).collect();
            (order, similarity, relevant)
        })
        .collect();
    let mut out = RankedRetrieval {
        order: Vec::with_capacity(queries.rows()),
        similarity: Vec::with_capacity(queries.rows()),
        relevant: Vec::with_capacity(queries.rows()),
        zero_norm_queries: zero_q,
        zero_norm_targets: zero_t,
    };
    for (o, s, r) in per_query {
        out.order.push(o);
        out.similarity.push(s);
        out.relevant.push(r);
    }
    Ok(out)
}

/// Mean of precision at each relevant rank. `None` without relevant items.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (k, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            total += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| total / hits as f64)
}

pub fn mean_average_precision(rr: &RankedRetrieval) -> Result<f64, EvalError> {
    let kept = rr.scored()?;
    let sum: f64 = kept.iter().filter_map(|r| average_precision(r)).sum();
    Ok(sum / kept.len() as f64)
}

/// Binary-gain NDCG over the full ranking.
pub fn ndcg_single(relevant: &[bool]) -> Option<f64> {
    let n_rel = relevant.iter().filter(|&&r| r).count();
    if n_rel == 0 {
        return None;
    }
    let discount = |k: usize| 1.0 / ((k + 2) as f64).log2();
    let dcg: f64 = relevant
        .iter()
        .enumerate()
        .filter(|(_, &r)| r)
        .map(|(k, _)| discount(k))
        .sum();
    let ideal: f64 = (0..n_rel).map(discount).sum();
    Some(dcg / ideal)
}

pub fn ndcg(rr: &RankedRetrieval) -> Result<f64, EvalError> {
    let kept = rr.scored()?;
    let sum: f64 = kept.iter().filter_map(|r| ndcg_single(r)).sum();
    Ok(sum / kept.len() as f64)
}

/// Normalized modified retrieval rank of one query for cutoff `k`.
pub fn nmrr(relevant: &[bool], k: usize) -> Option<f64> {
    let ng = relevant.iter().filter(|&&r| r).count();
    if ng == 0 {
        return None;
    }
    let k = k as f64;
    let ranks: f64 = relevant
        .iter()
        .enumerate()
        .filter(|(_, &r)| r)
        .map(|(i, _)| {
            let rank = (i + 1) as f64;
            if rank <= k {
                rank
            } else {
                1.25 * k
            }
        })
        .sum();
    let ng = ng as f64;
    let avr = ranks / ng;
    let mrr = avr - 0.5 - ng / 2.0;
    Some(mrr / (1.25 * k - 0.5 - ng / 2.0))
}

pub fn anmrr(rr: &RankedRetrieval) -> Result<f64, EvalError> {
    let kept = rr.scored()?;
    let counts: Vec<usize> = kept.iter().map(|r| r.iter().filter(|&&x| x).count()).collect();
    let max_ng = counts.iter().copied().max().unwrap_or(0);
    let sum: f64 = kept
        .iter()
        .zip(&counts)
        .filter_map(|(r, &ng)| nmrr(r, (4 * ng).min(2 * max_ng)))
        .sum();
    Ok(sum / kept.len() as f64)
}

/// Recall levels `0, 1/(n-1), ..., 1`.
pub fn recall_grid(n_points: usize) -> Result<Vec<f64>, EvalError> {
    if n_points < 2 {
        return Err(EvalError::CurvePoints(n_points));
    }
    Ok((0..n_points).map(|j| j as f64 / (n_points - 1) as f64).collect())
}

/// Interpolated precision of one ranking at each grid recall: the best
/// precision reached at any recall at or beyond the level.
pub fn interpolated_precision(relevant: &[bool], grid: &[f64]) -> Option<Vec<f64>> {
    let n_rel = relevant.iter().filter(|&&r| r).count();
    if n_rel == 0 {
        return None;
    }
    let mut points = Vec::with_capacity(n_rel);
    let mut hits = 0usize;
    for (k, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            points.push((hits as f64 / n_rel as f64, hits as f64 / (k + 1) as f64));
        }
    }
    // Suffix maxima of precision over the recall-sorted hits.
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    Some(
        grid.iter()
            .map(|&level| {
                let i = points.partition_point(|&(rec, _)| rec < level - 1e-12);
                points.get(i).map_or(0.0, |p| p.1)
            })
            .collect(),
    )
}

/// Query-averaged interpolated precision as `(recall, precision)` points.
pub fn pr_curve(rr: &RankedRetrieval, n_points: usize) -> Result<Vec<(f64, f64)>, EvalError> {
    let grid = recall_grid(n_points)?;
    let kept = rr.scored()?;
    let mut acc = vec![0.0; grid.len()];
    for r in &kept {
        if let Some(p) = interpolated_precision(r, &grid) {
            for (a, v) in acc.iter_mut().zip(p) {
                *a += v;
            }
        }
    }
    Ok(grid
        .into_iter()
        .zip(acc)
        .map(|(rec, s)| (rec, s / kept.len() as f64))
        .collect())
}

/// Mean over all query-target pairs of `exp(-D)` for label mismatches and
/// `1 - exp(-D)` for matches, with `D` the squared distance between the
/// L2-normalized embeddings.
pub fn empirical_risk(
    queries: &Tensor,
    query_labels: &[u32],
    targets: &Tensor,
    target_labels: &[u32],
) -> Result<f64, EvalError> {
    if queries.rows() == 0 {
        return Err(EvalError::Empty("query"));
    }
    if targets.rows() == 0 {
        return Err(EvalError::Empty("target"));
    }
    if queries.cols() != targets.cols() {
        return Err(EvalError::Dim {
            queries: queries.cols(),
            targets: targets.cols(),
        });
    }
    if query_labels.len() != queries.rows() {
        return Err(EvalError::LabelCount {
            side: "queries",
            expected: queries.rows(),
            got: query_labels.len(),
        });
    }
    if target_labels.len() != targets.rows() {
        return Err(EvalError::LabelCount {
            side: "targets",
            expected: targets.rows(),
            got: target_labels.len(),
        });
    }
    let q = unit_rows(queries);
    let t = unit_rows(targets);
    let total: f64 = q
        .par_iter()
        .zip(query_labels.par_iter())
        .map(|(qv, &ql)| {
            t.iter()
                .zip(target_labels)
                .map(|(tv, &tl)| {
                    let dist: f64 = qv.iter().zip(tv).map(|(a, b)| (a - b) * (a - b)).sum();
                    let e = (-dist).exp();
                    if ql == tl {
                        1.0 - e
                    } else {
                        e
                    }
                })
                .sum::<f64>()
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .sum();
    Ok(total / (q.len() * t.len()) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub map: f64,
    pub ndcg: f64,
    pub anmrr: f64,
    pub pr_curve: Vec<(f64, f64)>,
    pub queries: usize,
    pub skipped_queries: usize,
    pub zero_norm_queries: usize,
    pub zero_norm_targets: usize,
}

impl MetricReport {
    pub fn from_ranking(rr: &RankedRetrieval, n_points: usize) -> Result<Self, EvalError> {
        Ok(Self {
            map: mean_average_precision(rr)?,
            ndcg: ndcg(rr)?,
            anmrr: anmrr(rr)?,
            pr_curve: pr_curve(rr, n_points)?,
            queries: rr.n_queries(),
            skipped_queries: rr.skipped_queries(),
            zero_norm_queries: rr.zero_norm_queries,
            zero_norm_targets: rr.zero_norm_targets,
        })
    }
}

/// Element-wise mean of several reports; diagnostics are summed.
pub fn average_reports(reports: &[MetricReport]) -> Option<MetricReport> {
    let first = reports.first()?;
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let pr_curve = first
        .pr_curve
        .iter()
        .enumerate()
        .map(|(j, &(rec, _))| (rec, reports.iter().map(|r| r.pr_curve[j].1).sum::<f64>() / n))
        .collect();
    Some(MetricReport {
        map: mean(|r| r.map),
        ndcg: mean(|r| r.ndcg),
        anmrr: mean(|r| r.anmrr),
        pr_curve,
        queries: reports.iter().map(|r| r.queries).sum(),
        skipped_queries: reports.iter().map(|r| r.skipped_queries).sum(),
        zero_norm_queries: reports.iter().map(|r| r.zero_norm_queries).sum(),
        zero_norm_targets: reports.iter().map(|r| r.zero_norm_targets).sum(),
    })
}
