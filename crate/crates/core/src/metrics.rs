//! Retrieval scores over a query x candidate similarity matrix whose
//! diagonal holds the matched pairs.
//!
//! Ranks are 1-based. Candidates with equal scores are ordered by index, so
//! a tie with a lower-indexed candidate pushes the ground truth down.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// Keys are `top1`, `top3`, ...
    pub top_k: BTreeMap<String, f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub ranks: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub similarity_path: Option<String>,
}

impl RetrievalReport {
    pub fn top(&self, k: usize) -> Option<f64> {
        self.top_k.get(&format!("top{k}")).copied()
    }
}

fn square(s: &Tensor) -> Result<usize> {
    match s.shape() {
        [n, m] if n == m && *n > 0 => Ok(*n),
        other => dim_err(format!("similarity matrix must be square and nonempty, got {other:?}")),
    }
}

/// Position of `i` when row `i` is sorted by descending score, ties by index.
fn rank_in_row(row: &[f64], i: usize) -> usize {
    let t = row[i];
    1 + row.iter().enumerate().filter(|&(j, &v)| v > t || (v == t && j < i)).count()
}

pub fn ground_truth_ranks(s: &Tensor) -> Result<Vec<usize>> {
    let n = square(s)?;
    Ok((0..n).map(|i| rank_in_row(s.row(i), i)).collect())
}

/// Fraction of queries whose ground truth ranks within each `k`.
pub fn topk_accuracy(s: &Tensor, ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let n = square(s)?;
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::Domain(format!("k = {k} outside 1..={n}")));
    }
    let ranks = ground_truth_ranks(s)?;
    Ok(ks.iter().map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64)).collect())
}

/// Single relevant item per query: mean of `1 / rank`.
pub fn mean_average_precision(s: &Tensor) -> Result<f64> {
    let ranks = ground_truth_ranks(s)?;
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// General form with a relevance mask: per query, precision at each
/// relevant position averaged over that query's relevant items. Queries
/// without relevant items score 0.
pub fn mean_average_precision_multi(s: &Tensor, relevant: &[Vec<bool>]) -> Result<f64> {
    let n = square(s)?;
    if relevant.len() != n || relevant.iter().any(|r| r.len() != n) {
        return dim_err(format!("relevance mask must be {n}x{n}"));
    }
    let mut total = 0.0;
    for (i, rel) in relevant.iter().enumerate() {
        let row = s.row(i);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let r_total = rel.iter().filter(|&&x| x).count();
        if r_total == 0 {
            continue;
        }
        let (mut hits, mut ap) = (0usize, 0.0);
        for (pos, &j) in order.iter().enumerate() {
            if rel[j] {
                hits += 1;
                ap += hits as f64 / (pos + 1) as f64;
            }
        }
        total += ap / r_total as f64;
    }
    Ok(total / n as f64)
}

/// `ks` larger than the candidate count are skipped.
pub fn retrieval_report(s: &Tensor, ks: &[usize]) -> Result<RetrievalReport> {
    let n = square(s)?;
    let usable: Vec<usize> = ks.iter().copied().filter(|&k| k <= n).collect();
    let top = topk_accuracy(s, &usable)?;
    Ok(RetrievalReport {
        top_k: top.into_iter().map(|(k, v)| (format!("top{k}"), v)).collect(),
        map: mean_average_precision(s)?,
        ranks: ground_truth_ranks(s)?,
        similarity_path: None,
    })
}

/// Rows are queries; values use the shortest round-trip representation.
pub fn similarity_csv(s: &Tensor) -> Result<String> {
    let n = square(s)?;
    let mut out = String::with_capacity(n * n * 20);
    for i in 0..n {
        for (j, v) in s.row(i).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v:?}").expect("writing to a String");
        }
        out.push('\n');
    }
    Ok(out)
}
