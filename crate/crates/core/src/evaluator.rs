//! Full-catalog ranking metrics and the overlap-ratio harness.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{adjust_overlap, CorpusError, Domain, Split, SplitDataset, SplitUser};
use crate::model::{rank_of, InferenceTables, Model};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("rank must be at least 1, got {0}")]
    BadRank(usize),
    #[error("checkpoint covers {model} items but the dataset has {dataset}")]
    CatalogMismatch { model: usize, dataset: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// `(hit, ndcg)` for a single relevant item at 1-based `rank`.
pub fn topk_metrics(rank: usize, k: usize) -> Result<(f64, f64), EvalError> {
    if rank == 0 {
        return Err(EvalError::BadRank(rank));
    }
    Ok(if rank <= k { (1.0, 1.0 / ((rank + 1) as f64).log2()) } else { (0.0, 0.0) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k_list: Vec<usize>,
    /// Exclude items already in the user's history from the candidates (target excepted).
    pub mask_history: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k_list: vec![5, 10, 20], mask_history: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub split: Split,
    pub domain: String,
    pub k: usize,
    pub hit: f64,
    pub ndcg: f64,
    pub n_users: usize,
    pub overlap_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub records: Vec<MetricRecord>,
}

impl MetricReport {
    pub fn get(&self, domain: &str, k: usize) -> Option<&MetricRecord> {
        self.records.iter().find(|r| r.domain == domain && r.k == k)
    }

    pub fn hit(&self, domain: &str, k: usize) -> Option<f64> {
        self.get(domain, k).map(|r| r.hit)
    }

    /// Mean hit@k over the domains present in the report.
    pub fn mean_hit(&self, k: usize) -> f64 {
        let hits: Vec<f64> = self.records.iter().filter(|r| r.k == k).map(|r| r.hit).collect();
        if hits.is_empty() {
            0.0
        } else {
            hits.iter().sum::<f64>() / hits.len() as f64
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.records).expect("records serialise")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        Ok(Self { records: serde_json::from_str(s)? })
    }
}

/// One row per (ratio, domain, k).
pub fn sweep_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("overlap_ratio,split,domain,k,hit,ndcg,n_users\n");
    for r in reports.iter().flat_map(|r| &r.records) {
        writeln!(out, "{},{},{},{},{},{},{}", r.overlap_ratio, r.split, r.domain, r.k, r.hit, r.ndcg, r.n_users).expect("string write");
    }
    out
}

/// Ranks `user`'s target for `split` against every item of its domain.
pub fn user_rank(model: &Model, tables: &InferenceTables, user: &SplitUser, split: Split, mask_history: bool) -> (Domain, usize) {
    let target = user.target(split);
    let dom = target.domain;
    let (mixed, a, b) = user.history(split);
    let local = match dom {
        Domain::A => a,
        Domain::B => b,
    };
    let rep = model.user_representation(&mixed, &local, dom);
    let mut scores = tables.scores(&rep, dom);
    let off = tables.dims.offset(dom);
    if mask_history {
        for &i in &local {
            if i != target.item {
                scores[i - off] = f64::NEG_INFINITY;
            }
        }
    }
    (dom, rank_of(&scores, target.item - off))
}

/// Per-user `(domain, rank)` in dataset order.
pub fn ranks(model: &Model, dataset: &SplitDataset, split: Split, mask_history: bool) -> Result<Vec<(Domain, usize)>, EvalError> {
    let tables = model.inference_tables();
    if tables.dims.n_a != dataset.id_map.domain_len(Domain::A) || tables.dims.n_b != dataset.id_map.domain_len(Domain::B) {
        return Err(EvalError::CatalogMismatch { model: tables.dims.n_items(), dataset: dataset.id_map.len() });
    }
    Ok(dataset.users.par_iter().map(|u| user_rank(model, &tables, u, split, mask_history)).collect())
}

/// Aggregates per-user ranks into per-domain means.
pub fn report_from_ranks(
    ranks: &[(Domain, usize)],
    dataset: &SplitDataset,
    split: Split,
    cfg: &EvalConfig,
) -> Result<MetricReport, EvalError> {
    let mut records = Vec::new();
    for dom in Domain::BOTH {
        let dr: Vec<usize> = ranks.iter().filter(|(d, _)| *d == dom).map(|&(_, r)| r).collect();
        if dr.is_empty() {
            continue;
        }
        for &k in &cfg.k_list {
            let (mut hit, mut ndcg) = (0.0, 0.0);
            for &r in &dr {
                let (h, n) = topk_metrics(r, k)?;
                hit += h;
                ndcg += n;
            }
            records.push(MetricRecord {
                split,
                domain: dataset.id_map.labels.label(dom).to_string(),
                k,
                hit: hit / dr.len() as f64,
                ndcg: ndcg / dr.len() as f64,
                n_users: dr.len(),
                overlap_ratio: dataset.overlap_ratio,
            });
        }
    }
    Ok(MetricReport { records })
}

pub fn evaluate(model: &Model, dataset: &SplitDataset, split: Split, cfg: &EvalConfig) -> Result<MetricReport, EvalError> {
    let r = ranks(model, dataset, split, cfg.mask_history)?;
    report_from_ranks(&r, dataset, split, cfg)
}

/// The training and evaluation views of one overlap ratio.
///
/// Training drops users who fall below `min_user` after de-overlapping; evaluation keeps
/// every user (with the same deletions) so the test targets are identical at every ratio.
pub fn overlap_views(base: &SplitDataset, ratio: f64, seed: u64, min_user: usize) -> Result<(SplitDataset, SplitDataset), EvalError> {
    let train = adjust_overlap(base, ratio, seed, min_user)?.dataset;
    let mut eval = adjust_overlap(base, ratio, seed, 0)?.dataset;
    eval.overlap_ratio = train.overlap_ratio;
    Ok((train, eval))
}

/// Retrains through `train` at each ratio and reports test metrics.
pub fn overlap_sweep<E>(
    base: &SplitDataset,
    ratios: &[f64],
    seed: u64,
    min_user: usize,
    cfg: &EvalConfig,
    mut train: impl FnMut(&SplitDataset, f64) -> Result<Model, E>,
) -> Result<Vec<MetricReport>, E>
where
    E: From<EvalError>,
{
    let mut out = Vec::new();
    for &ratio in ratios {
        let (train_ds, eval_ds) = overlap_views(base, ratio, seed, min_user)?;
        log::info!("overlap {ratio}: {} training users, {} overlap", train_ds.users.len(), train_ds.overlap_users());
        let model = train(&train_ds, ratio)?;
        let mut report = evaluate(&model, &eval_ds, Split::Test, cfg)?;
        for r in &mut report.records {
            r.overlap_ratio = ratio;
        }
        out.push(report);
    }
    Ok(out)
}
