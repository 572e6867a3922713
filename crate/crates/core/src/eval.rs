//! Retrieval evaluation: deterministic per-query rankings over a target
//! set and top-k hit rates, pooled and stratified by corruption noise
//! level and by quality decile (both groupings are reported).
//!
//! Target FEN features are extracted once into a [`TargetIndex`] and
//! reused across queries; each query is then one feature pass plus a
//! batched symmetric-score sweep over the cached features. Queries are
//! independent, so they evaluate in parallel without affecting results.
//!
//! Ranking ties are broken by ascending target id, which makes rankings —
//! and therefore reports — reproducible byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::loader::DatasetIndex;
use crate::model::{stack_images, MatchModel};
use crate::tensor::params::ParameterSet;
use crate::tensor::Tensor;

/// The ks reported by default, Table-1 style.
pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Sorts `(target_id, score)` pairs: descending score, ties by ascending
/// target id.
pub fn rank_by_score(mut scored: Vec<(String, f64)>) -> Vec<(String, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored
}

/// Cached eval-mode FEN features for a fixed target set.
pub struct TargetIndex {
    ids: Vec<String>,
    /// `[n, feature_dim]`, row i belonging to `ids[i]`.
    features: Tensor<f32>,
}

impl TargetIndex {
    /// Extracts features for all targets in batches of `batch_size`.
    pub fn build(
        model: &MatchModel,
        params: &ParameterSet<f32>,
        targets: &[(String, Tensor<f32>)],
        batch_size: usize,
    ) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Contract("target set must be non-empty".into()));
        }
        if batch_size == 0 {
            return Err(Error::Contract("batch size must be positive".into()));
        }
        let feature_dim = model.config().fen.feature_dim;
        let mut rows = Vec::with_capacity(targets.len() * feature_dim);
        for chunk in targets.chunks(batch_size) {
            let images: Vec<&Tensor<f32>> = chunk.iter().map(|(_, img)| img).collect();
            let feats = model.features(params, &stack_images(&images)?)?;
            rows.extend_from_slice(feats.data());
        }
        Ok(TargetIndex {
            ids: targets.iter().map(|(id, _)| id.clone()).collect(),
            features: Tensor::from_vec(&[targets.len(), feature_dim], rows)?,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// Scores one query against every indexed target and returns the full
/// ranking (descending score, ties by ascending id).
pub fn rank_targets(
    model: &MatchModel,
    params: &ParameterSet<f32>,
    index: &TargetIndex,
    query: &Tensor<f32>,
    batch_size: usize,
) -> Result<Vec<(String, f64)>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be positive".into()));
    }
    let feature_dim = model.config().fen.feature_dim;
    let fq = model.features(params, &stack_images(&[query])?)?;
    let fq_row = fq.data();

    let mut scored = Vec::with_capacity(index.len());
    let n = index.len();
    let mut start = 0usize;
    while start < n {
        let count = batch_size.min(n - start);
        let chunk = Tensor::from_vec(
            &[count, feature_dim],
            index.features.data()[start * feature_dim..(start + count) * feature_dim].to_vec(),
        )?;
        let mut repeated = Vec::with_capacity(count * feature_dim);
        for _ in 0..count {
            repeated.extend_from_slice(fq_row);
        }
        let fq_rep = Tensor::from_vec(&[count, feature_dim], repeated)?;
        let scores = model.scores_from_features(params, &fq_rep, &chunk)?;
        for (i, score) in scores.into_iter().enumerate() {
            scored.push((index.ids[start + i].clone(), score));
        }
        start += count;
    }
    Ok(rank_by_score(scored))
}

/// One evaluated query: its ranking plus the strata it belongs to.
#[derive(Debug, Clone)]
pub struct QueryResult {
    pub query_id: String,
    pub noise_level: Option<u8>,
    pub quality_level: Option<u8>,
    /// Full ranking, best first.
    pub ranking: Vec<(String, f64)>,
}

/// Ranks many queries, in parallel, preserving input order.
pub fn rank_all(
    model: &MatchModel,
    params: &ParameterSet<f32>,
    index: &TargetIndex,
    queries: &[(String, Tensor<f32>)],
    batch_size: usize,
) -> Result<Vec<QueryResult>> {
    queries
        .par_iter()
        .map(|(id, image)| {
            Ok(QueryResult {
                query_id: id.clone(),
                noise_level: None,
                quality_level: None,
                ranking: rank_targets(model, params, index, image, batch_size)?,
            })
        })
        .collect()
}

fn true_targets<'a>(
    truth: &'a DatasetIndex,
    result: &QueryResult,
) -> Result<&'a std::collections::BTreeSet<String>> {
    truth.matches_of(&result.query_id).map_err(|_| {
        Error::Data(format!(
            "query {:?} is not present in the ground truth",
            result.query_id
        ))
    })
}

fn check_k(results: &[QueryResult], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Contract("k must be positive".into()));
    }
    if let Some(short) = results.iter().find(|r| r.ranking.len() < k) {
        return Err(Error::Contract(format!(
            "k = {k} exceeds the {}-target ranking of query {:?}",
            short.ranking.len(),
            short.query_id
        )));
    }
    Ok(())
}

/// Fraction of queries whose top-k ranking contains at least one true
/// target.
pub fn hit_rate(results: &[QueryResult], truth: &DatasetIndex, k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Contract("hit rate over zero queries is undefined".into()));
    }
    check_k(results, k)?;
    let mut hits = 0usize;
    for r in results {
        let truths = true_targets(truth, r)?;
        if r.ranking[..k].iter().any(|(id, _)| truths.contains(id)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

/// Mean over queries of `|top-k ∩ true| / |true|`.
pub fn recall_at_k(results: &[QueryResult], truth: &DatasetIndex, k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Contract("recall over zero queries is undefined".into()));
    }
    check_k(results, k)?;
    let mut total = 0.0;
    for r in results {
        let truths = true_targets(truth, r)?;
        let found = r.ranking[..k].iter().filter(|(id, _)| truths.contains(id)).count();
        total += found as f64 / truths.len() as f64;
    }
    Ok(total / results.len() as f64)
}

/// Hit and recall rates of one stratum.
#[derive(Debug, Clone)]
pub struct StratumRates {
    pub count: usize,
    /// `k -> hit@k`.
    pub hit: BTreeMap<usize, f64>,
    /// `k -> recall@k`.
    pub recall: BTreeMap<usize, f64>,
}

fn stratum_rates(results: &[QueryResult], truth: &DatasetIndex, ks: &[usize]) -> Result<StratumRates> {
    let mut hit = BTreeMap::new();
    let mut recall = BTreeMap::new();
    for &k in ks {
        hit.insert(k, hit_rate(results, truth, k)?);
        recall.insert(k, recall_at_k(results, truth, k)?);
    }
    Ok(StratumRates { count: results.len(), hit, recall })
}

/// The full evaluation product: pooled rates plus per-noise-level and
/// per-quality-level breakdowns. Strata with no queries are absent.
#[derive(Debug, Clone)]
pub struct RetrievalReport {
    pub ks: Vec<usize>,
    pub all: StratumRates,
    pub by_noise_level: BTreeMap<u8, StratumRates>,
    pub by_quality_level: BTreeMap<u8, StratumRates>,
    pub per_query: Vec<QueryResult>,
}

/// Builds the report from per-query results and the ground-truth relation.
pub fn stratified_report(
    results: Vec<QueryResult>,
    truth: &DatasetIndex,
    ks: &[usize],
) -> Result<RetrievalReport> {
    if ks.is_empty() {
        return Err(Error::Contract("at least one k is required".into()));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();

    let all = stratum_rates(&results, truth, &ks)?;
    let mut by_noise: BTreeMap<u8, Vec<QueryResult>> = BTreeMap::new();
    let mut by_quality: BTreeMap<u8, Vec<QueryResult>> = BTreeMap::new();
    for r in &results {
        if let Some(level) = r.noise_level {
            by_noise.entry(level).or_default().push(r.clone());
        }
        if let Some(level) = r.quality_level {
            by_quality.entry(level).or_default().push(r.clone());
        }
    }
    let mut by_noise_level = BTreeMap::new();
    for (level, rs) in by_noise {
        by_noise_level.insert(level, stratum_rates(&rs, truth, &ks)?);
    }
    let mut by_quality_level = BTreeMap::new();
    for (level, rs) in by_quality {
        by_quality_level.insert(level, stratum_rates(&rs, truth, &ks)?);
    }
    Ok(RetrievalReport { ks, all, by_noise_level, by_quality_level, per_query: results })
}

impl RetrievalReport {
    /// Human-readable table: one row per stratum, hit rates per k.
    pub fn format_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<12} {:>6}", "stratum", "n");
        for k in &self.ks {
            let _ = write!(out, " {:>8}", format!("hit@{k}"));
        }
        out.push('\n');
        let mut row = |name: &str, rates: &StratumRates| {
            let _ = write!(out, "{:<12} {:>6}", name, rates.count);
            for k in &self.ks {
                let _ = write!(out, " {:>8.3}", rates.hit[k]);
            }
            out.push('\n');
        };
        row("all", &self.all);
        for (level, rates) in &self.by_noise_level {
            row(&format!("noise {level}"), rates);
        }
        for (level, rates) in &self.by_quality_level {
            row(&format!("quality {level}"), rates);
        }
        out
    }

    /// Machine-readable line format. Fields:
    /// `stratum scope=<all|noise|quality> [level=<n>] count=<n>` followed
    /// by `hit@k=` and `recall@k=` pairs; then one `query` line per query
    /// with its strata, the rank of its best true target (`best_true_rank`,
    /// 1-based, 0 when absent entirely), and the top-10 `id:score` pairs.
    pub fn to_text(&self, truth: &DatasetIndex) -> Result<String> {
        let mut out = String::new();
        out.push_str("format retrieval-report v1\n");
        let ks: Vec<String> = self.ks.iter().map(|k| k.to_string()).collect();
        let _ = writeln!(out, "ks {}", ks.join(","));
        let mut stratum = |head: String, rates: &StratumRates| {
            let _ = write!(out, "stratum {head} count={}", rates.count);
            for k in &self.ks {
                let _ = write!(out, " hit@{k}={}", rates.hit[k]);
            }
            for k in &self.ks {
                let _ = write!(out, " recall@{k}={}", rates.recall[k]);
            }
            out.push('\n');
        };
        stratum("scope=all".to_string(), &self.all);
        for (level, rates) in &self.by_noise_level {
            stratum(format!("scope=noise level={level}"), rates);
        }
        for (level, rates) in &self.by_quality_level {
            stratum(format!("scope=quality level={level}"), rates);
        }
        for r in &self.per_query {
            let truths = true_targets(truth, r)?;
            let best = r
                .ranking
                .iter()
                .position(|(id, _)| truths.contains(id))
                .map(|p| p + 1)
                .unwrap_or(0);
            let noise = r.noise_level.map(|l| l.to_string()).unwrap_or_else(|| "-".into());
            let quality = r.quality_level.map(|l| l.to_string()).unwrap_or_else(|| "-".into());
            let top: Vec<String> = r
                .ranking
                .iter()
                .take(10)
                .map(|(id, score)| format!("{id}:{score}"))
                .collect();
            let _ = writeln!(
                out,
                "query id={} noise={noise} quality={quality} best_true_rank={best} top={}",
                r.query_id,
                top.join(",")
            );
        }
        Ok(out)
    }
}
