//! Leave-one-out top-K evaluation against frozen sampled negatives.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::split::InteractionSplit;
use crate::graph::HeteroGraph;
use crate::model::RecipeRec;

pub const MAX_K: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub user: usize,
    /// Candidate recipe ids, best first.
    pub candidates: Vec<usize>,
    pub positive: usize,
    /// 1-based rank of the positive.
    pub rank: usize,
}

/// Orders candidates by descending score, ties by ascending recipe id.
pub fn rank_candidates(user: usize, positive: usize, candidates: &[usize], scores: &[f64]) -> Result<RankedList> {
    if candidates.len() != scores.len() {
        return Err(Error::contract("one score per candidate required"));
    }
    if candidates.iter().filter(|&&c| c == positive).count() != 1 {
        return Err(Error::contract(format!(
            "positive {positive} must appear exactly once among user {user}'s candidates"
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {s} for user {user}")));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores are not NaN")
            .then(candidates[a].cmp(&candidates[b]))
    });
    let ranked: Vec<usize> = order.iter().map(|&i| candidates[i]).collect();
    let rank = ranked.iter().position(|&c| c == positive).expect("positive present") + 1;
    Ok(RankedList {
        user,
        candidates: ranked,
        positive,
        rank,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsAtK {
    pub k: usize,
    pub precision: f64,
    pub hr: f64,
    pub ndcg: f64,
    pub map: f64,
}

/// Averages over users of the single-relevant-item metrics at cutoff `k`.
pub fn metrics_at_k(lists: &[RankedList], k: usize) -> Result<MetricsAtK> {
    if lists.is_empty() {
        return Err(Error::contract("no ranked lists to score"));
    }
    if k == 0 || lists.iter().any(|l| k > l.candidates.len()) {
        return Err(Error::contract(format!("cutoff K={k} outside 1..=list length")));
    }
    let mut sums = [0.0f64; 4];
    for l in lists {
        if l.rank <= k {
            let r = l.rank as f64;
            sums[0] += 1.0 / k as f64;
            sums[1] += 1.0;
            sums[2] += 1.0 / (r + 1.0).log2();
            sums[3] += 1.0 / r;
        }
    }
    let n = lists.len() as f64;
    Ok(MetricsAtK {
        k,
        precision: sums[0] / n,
        hr: sums[1] / n,
        ndcg: sums[2] / n,
        map: sums[3] / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub users: usize,
    pub at_k: Vec<MetricsAtK>,
}

impl MetricReport {
    pub fn from_lists(lists: &[RankedList]) -> Result<Self> {
        let at_k = (1..=MAX_K).map(|k| metrics_at_k(lists, k)).collect::<Result<_>>()?;
        Ok(Self {
            users: lists.len(),
            at_k,
        })
    }

    pub fn at(&self, k: usize) -> &MetricsAtK {
        &self.at_k[k - 1]
    }

    pub fn hr(&self, k: usize) -> f64 {
        self.at(k).hr
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Metric-by-K grid.
    pub fn to_table(&self) -> String {
        let mut s = format!("users: {}\n{:<10}", self.users, "metric");
        for m in &self.at_k {
            let _ = write!(s, "{:>8}", format!("@{}", m.k));
        }
        s.push('\n');
        let rows: [(&str, fn(&MetricsAtK) -> f64); 4] = [
            ("precision", |m| m.precision),
            ("hr", |m| m.hr),
            ("ndcg", |m| m.ndcg),
            ("map", |m| m.map),
        ];
        for (name, get) in rows {
            let _ = write!(s, "{name:<10}");
            for m in &self.at_k {
                let _ = write!(s, "{:>8.4}", get(m));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["k", "precision", "hr", "ndcg", "map"])?;
        for m in &self.at_k {
            w.write_record(&[
                m.k.to_string(),
                format!("{:?}", m.precision),
                format!("{:?}", m.hr),
                format!("{:?}", m.ndcg),
                format!("{:?}", m.map),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Encodes `train_graph` once and ranks every evaluated user's held-out
/// recipe against its frozen negatives.
pub fn evaluate(
    model: &RecipeRec,
    train_graph: &HeteroGraph,
    split: &InteractionSplit,
) -> Result<(MetricReport, Vec<RankedList>)> {
    let emb = model.embeddings(&train_graph.full_view())?;
    let mut lists = Vec::with_capacity(split.test.len());
    for &(user, positive) in &split.test {
        let neg = split
            .negatives
            .get(&user)
            .ok_or_else(|| Error::contract(format!("user {user} has no frozen negatives")))?;
        let mut candidates = Vec::with_capacity(neg.len() + 1);
        candidates.push(positive);
        candidates.extend_from_slice(neg);
        let pairs: Vec<(usize, usize)> = candidates.iter().map(|&r| (user, r)).collect();
        let scores = model.score_pairs(&emb, &pairs)?;
        lists.push(rank_candidates(user, positive, &candidates, &scores)?);
    }
    Ok((MetricReport::from_lists(&lists)?, lists))
}
