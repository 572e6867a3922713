//! The balanced, hardness-biased data loader (the paper's Algorithm 2).
//!
//! Candidate pairs are drawn by randomly pairing query and target ids, then
//! rejection-sampled with per-class acceptance probabilities
//! `P₊ = 1 − α/|T|` (positives) and `P₋ = α/|T|` (negatives), which
//! equalizes the expected number of kept positives and negatives. From the
//! kept candidates, the top `μ` fraction *per class* by boosting weight is
//! taken, and the loop repeats until the batch holds `m/2` samples of each
//! class.
//!
//! When a class's universe of distinct pairs is smaller than `m/2` (tiny
//! corpora), the shortfall is filled by cycling that class's keys in
//! descending weight order; only a class with *no* pairs at all is a hard
//! error. Batches over ample corpora contain no duplicates.
//!
//! Prefetching clones the weight table synchronously and fetches on a
//! worker thread, so a prefetched batch is bit-identical to a synchronous
//! fetch against the same snapshot regardless of what the trainer does to
//! the live table in the meantime.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::mpsc;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::boosting::{SampleKey, WeightTable};
use crate::error::{Error, Result};
use crate::model::Label;
use crate::rng::{seed_for, Stream};

/// In-memory id index of the training corpus: which queries exist, which
/// targets exist, and which pairs are true matches.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    queries: Vec<String>,
    targets: Vec<String>,
    target_set: BTreeSet<String>,
    positives: BTreeMap<String, BTreeSet<String>>,
    total_positives: u64,
    /// Optional fixed α replacing the measured positives-per-query mean in
    /// the acceptance probabilities.
    alpha_override: Option<f64>,
}

impl DatasetIndex {
    /// Builds an index from id lists and the positive-pair relation.
    ///
    /// Every query must have at least one matching target, ids must be
    /// unique within their role, and every referenced id must exist.
    pub fn new(
        queries: Vec<String>,
        targets: Vec<String>,
        positive_pairs: &[(String, String)],
    ) -> Result<Self> {
        if queries.is_empty() || targets.is_empty() {
            return Err(Error::Contract("dataset index needs at least one query and target".into()));
        }
        let query_set: BTreeSet<String> = queries.iter().cloned().collect();
        let target_set: BTreeSet<String> = targets.iter().cloned().collect();
        if query_set.len() != queries.len() {
            return Err(Error::Data("duplicate query ids in dataset index".into()));
        }
        if target_set.len() != targets.len() {
            return Err(Error::Data("duplicate target ids in dataset index".into()));
        }
        let mut positives: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        let mut total = 0u64;
        for (q, t) in positive_pairs {
            if !query_set.contains(q) {
                return Err(Error::Data(format!("positive pair references unknown query {q:?}")));
            }
            if !target_set.contains(t) {
                return Err(Error::Data(format!("positive pair references unknown target {t:?}")));
            }
            if positives.entry(q.clone()).or_default().insert(t.clone()) {
                total += 1;
            }
        }
        for q in &queries {
            if !positives.contains_key(q) {
                return Err(Error::Data(format!("query {q:?} has no positive target")));
            }
        }
        Ok(DatasetIndex {
            queries,
            targets,
            target_set,
            positives,
            total_positives: total,
            alpha_override: None,
        })
    }

    /// Pins α to a fixed value instead of the measured mean. Only the
    /// rejection-sampling acceptance probabilities change; ground truth
    /// labels are untouched.
    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        class_probabilities(alpha, self.targets.len())?;
        self.alpha_override = Some(alpha);
        Ok(self)
    }

    pub fn query_count(&self) -> usize {
        self.queries.len()
    }

    pub fn target_count(&self) -> usize {
        self.targets.len()
    }

    pub fn query_ids(&self) -> &[String] {
        &self.queries
    }

    pub fn target_ids(&self) -> &[String] {
        &self.targets
    }

    /// Average number of positives per query (`total positives / |Q|`),
    /// unless pinned by [`DatasetIndex::with_alpha`].
    pub fn alpha(&self) -> f64 {
        self.alpha_override
            .unwrap_or(self.total_positives as f64 / self.queries.len() as f64)
    }

    /// `|Q| · |T|`, the size of the pair universe.
    pub fn universe_size(&self) -> u64 {
        self.queries.len() as u64 * self.targets.len() as u64
    }

    /// Number of distinct positive pairs.
    pub fn positive_pair_count(&self) -> u64 {
        self.total_positives
    }

    /// Number of distinct negative pairs.
    pub fn negative_pair_count(&self) -> u64 {
        self.universe_size() - self.total_positives
    }

    pub fn is_match(&self, query_id: &str, target_id: &str) -> bool {
        self.positives
            .get(query_id)
            .map(|ts| ts.contains(target_id))
            .unwrap_or(false)
    }

    /// Matching target ids of one query.
    pub fn matches_of(&self, query_id: &str) -> Result<&BTreeSet<String>> {
        self.positives
            .get(query_id)
            .ok_or_else(|| Error::Contract(format!("unknown query {query_id:?}")))
    }

    /// Whether `target_id` names a known target.
    pub fn contains_target(&self, target_id: &str) -> bool {
        self.target_set.contains(target_id)
    }

    /// All distinct positive keys, in deterministic order.
    fn all_positive_keys(&self) -> Result<Vec<SampleKey>> {
        let mut keys = Vec::with_capacity(self.total_positives as usize);
        for (q, ts) in &self.positives {
            for t in ts {
                keys.push(SampleKey::new(q, t)?);
            }
        }
        Ok(keys)
    }

    /// All distinct negative keys. Only call on small universes (used by
    /// the repeat-fill path, which a large corpus never reaches).
    fn all_negative_keys(&self) -> Result<Vec<SampleKey>> {
        let mut keys = Vec::new();
        for q in &self.queries {
            for t in &self.targets {
                if !self.is_match(q, t) {
                    keys.push(SampleKey::new(q, t)?);
                }
            }
        }
        Ok(keys)
    }
}

/// Per-class acceptance probabilities `(P₊, P₋) = (1 − α/|T|, α/|T|)`.
///
/// Random pairing yields a positive with probability `α/|T|`; accepting
/// positives with `P₊` and negatives with `P₋` makes the expected kept
/// counts equal.
pub fn class_probabilities(alpha: f64, target_count: usize) -> Result<(f64, f64)> {
    if target_count == 0 {
        return Err(Error::Contract("target count must be positive".into()));
    }
    if !(1.0..=target_count as f64).contains(&alpha) {
        return Err(Error::Contract(format!(
            "alpha must lie in [1, |T|] = [1, {target_count}], got {alpha}"
        )));
    }
    let p_minus = alpha / target_count as f64;
    Ok((1.0 - p_minus, p_minus))
}

/// A labeled candidate pair produced by [`sample_candidates`].
#[derive(Debug, Clone)]
pub struct Candidate {
    pub key: SampleKey,
    pub label: Label,
}

/// Draws `k` queries and `k` targets without replacement, pairs them up
/// positionally, labels each pair from the positive map, and keeps each
/// candidate by rejection sampling (positives with probability `P₊`,
/// negatives with `P₋`).
pub fn sample_candidates(
    index: &DatasetIndex,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Candidate>> {
    if k == 0 {
        return Err(Error::Contract("candidate count k must be positive".into()));
    }
    if k > index.query_count() || k > index.target_count() {
        return Err(Error::Contract(format!(
            "k = {k} exceeds the index ({} queries, {} targets); sampling is without replacement",
            index.query_count(),
            index.target_count()
        )));
    }
    let (p_plus, p_minus) = class_probabilities(index.alpha(), index.target_count())?;
    let q_idx = rand::seq::index::sample(rng, index.query_count(), k);
    let t_idx = rand::seq::index::sample(rng, index.target_count(), k);
    let mut kept = Vec::new();
    for (qi, ti) in q_idx.into_iter().zip(t_idx.into_iter()) {
        let q = &index.queries[qi];
        let t = &index.targets[ti];
        let is_match = index.is_match(q, t);
        let accept_p = if is_match { p_plus } else { p_minus };
        // One uniform draw per candidate, kept or not, so the stream
        // consumption is independent of labels.
        let u: f64 = rng.gen();
        if u < accept_p {
            kept.push(Candidate {
                key: SampleKey::new(q, t)?,
                label: if is_match { Label::Match } else { Label::NonMatch },
            });
        }
    }
    Ok(kept)
}

/// Loader configuration.
#[derive(Debug, Clone)]
pub struct LoaderConfig {
    /// Batch size `m` (even; `m/2` per class).
    pub output_size: usize,
    /// Candidates requested per accumulation iteration `k`.
    pub candidate_k: usize,
    /// Hard-case rate `μ`: fraction of kept candidates (per class, by
    /// weight) eligible for the batch.
    pub mu: f64,
    /// Master seed; per-round generators derive from it.
    pub seed: u64,
}

impl LoaderConfig {
    /// Defaults for a given batch size: `k = 16 m`, `μ = 0.2`.
    pub fn for_output_size(output_size: usize, seed: u64) -> Self {
        LoaderConfig {
            output_size,
            candidate_k: 16 * output_size,
            mu: 0.2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_size == 0 || self.output_size % 2 != 0 {
            return Err(Error::Config(format!(
                "loader output size must be positive and even, got {}",
                self.output_size
            )));
        }
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return Err(Error::Config(format!("mu must lie in (0, 1], got {}", self.mu)));
        }
        if (self.candidate_k as f64) < 2.0 / self.mu {
            return Err(Error::Config(format!(
                "candidate batch k = {} too small for mu = {} (need k ≥ 2/μ)",
                self.candidate_k, self.mu
            )));
        }
        Ok(())
    }
}

/// One sample of an assembled batch, with the weight it carried in the
/// table snapshot the batch was built from.
#[derive(Debug, Clone)]
pub struct BatchSample {
    pub key: SampleKey,
    pub label: Label,
    pub weight: f64,
}

/// A class-balanced batch: exactly `m/2` positives and `m/2` negatives.
#[derive(Debug, Clone)]
pub struct Batch {
    pub samples: Vec<BatchSample>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.label == Label::Match).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }
}

/// Upper bound on accumulation iterations before fetch gives up. Generous:
/// every productive iteration adds at least one sample per open class.
const MAX_FETCH_ITERATIONS: usize = 10_000;

/// Assembles one batch (Algorithm 2). See the module docs for the loop.
pub fn fetch(
    index: &DatasetIndex,
    table: &WeightTable,
    cfg: &LoaderConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    cfg.validate()?;
    let need = cfg.output_size / 2;
    if index.positive_pair_count() == 0 {
        return Err(Error::Exhausted("index has no positive pairs".into()));
    }
    if index.negative_pair_count() == 0 {
        return Err(Error::Exhausted("index has no negative pairs".into()));
    }

    // Per-call k is capped by the without-replacement constraint; several
    // candidate draws per iteration keep the pool near the configured k so
    // the top-μ cut stays weight-driven even on small indexes.
    let per_call = cfg.candidate_k.min(index.query_count()).min(index.target_count());
    let calls_per_iter = cfg.candidate_k.div_ceil(per_call);

    let mut chosen_pos: Vec<SampleKey> = Vec::with_capacity(need);
    let mut chosen_neg: Vec<SampleKey> = Vec::with_capacity(need);
    let mut seen: HashSet<SampleKey> = HashSet::new();

    let pos_exhausted =
        |chosen: &Vec<SampleKey>| chosen.len() as u64 >= index.positive_pair_count();
    let neg_exhausted =
        |chosen: &Vec<SampleKey>| chosen.len() as u64 >= index.negative_pair_count();

    let mut iterations = 0;
    while (chosen_pos.len() < need && !pos_exhausted(&chosen_pos))
        || (chosen_neg.len() < need && !neg_exhausted(&chosen_neg))
    {
        iterations += 1;
        if iterations > MAX_FETCH_ITERATIONS {
            return Err(Error::Exhausted(format!(
                "no full batch after {MAX_FETCH_ITERATIONS} candidate rounds \
                 ({}/{need} positives, {}/{need} negatives)",
                chosen_pos.len(),
                chosen_neg.len()
            )));
        }

        // Pool candidates for this iteration, deduplicated against both the
        // batch so far and the pool itself.
        let mut pool_pos: Vec<(SampleKey, f64)> = Vec::new();
        let mut pool_neg: Vec<(SampleKey, f64)> = Vec::new();
        for _ in 0..calls_per_iter {
            for cand in sample_candidates(index, per_call, rng)? {
                if seen.contains(&cand.key) {
                    continue;
                }
                seen.insert(cand.key.clone());
                let weight = table.get(&cand.key);
                match cand.label {
                    Label::Match => pool_pos.push((cand.key, weight)),
                    Label::NonMatch => pool_neg.push((cand.key, weight)),
                }
            }
        }
        // Pool members not taken this iteration stay eligible for later
        // iterations; only batch membership is permanent.
        let (top_pos, rest_pos) = top_mu(pool_pos, cfg.mu, rng);
        let (top_neg, rest_neg) = top_mu(pool_neg, cfg.mu, rng);
        for (key, _) in rest_pos.into_iter().chain(rest_neg) {
            seen.remove(&key);
        }

        let rem_pos = need - chosen_pos.len();
        let rem_neg = need - chosen_neg.len();
        // A class is open while it still needs samples its universe can
        // provide; a class that ran out of distinct pairs stops gating the
        // other (the shortfall is repaired by repeat-fill afterwards).
        let pos_open = rem_pos > 0 && !pos_exhausted(&chosen_pos);
        let neg_open = rem_neg > 0 && !neg_exhausted(&chosen_neg);
        let (take_pos, take_neg) = if pos_open && neg_open {
            // Both classes open: draw an equal number from each.
            let n = top_pos.len().min(top_neg.len()).min(rem_pos).min(rem_neg);
            (n, n)
        } else {
            (
                if pos_open { top_pos.len().min(rem_pos) } else { 0 },
                if neg_open { top_neg.len().min(rem_neg) } else { 0 },
            )
        };
        let mut not_taken: Vec<SampleKey> = Vec::new();
        for (i, (key, _)) in top_pos.into_iter().enumerate() {
            if i < take_pos {
                chosen_pos.push(key);
            } else {
                not_taken.push(key);
            }
        }
        for (i, (key, _)) in top_neg.into_iter().enumerate() {
            if i < take_neg {
                chosen_neg.push(key);
            } else {
                not_taken.push(key);
            }
        }
        for key in not_taken {
            seen.remove(&key);
        }
    }

    // Tiny-universe fallback: a class whose distinct pairs ran out is
    // topped up by cycling its keys in descending weight order.
    if chosen_pos.len() < need {
        let universe = index.all_positive_keys()?;
        repeat_fill(&mut chosen_pos, universe, table, need);
    }
    if chosen_neg.len() < need {
        let universe = index.all_negative_keys()?;
        repeat_fill(&mut chosen_neg, universe, table, need);
    }

    let mut samples: Vec<BatchSample> = chosen_pos
        .into_iter()
        .map(|key| (key, Label::Match))
        .chain(chosen_neg.into_iter().map(|key| (key, Label::NonMatch)))
        .map(|(key, label)| {
            let weight = table.get(&key);
            BatchSample { key, label, weight }
        })
        .collect();
    samples.shuffle(rng);
    Ok(Batch { samples })
}

/// Splits a candidate pool into its top `⌈μ·n⌉` by weight (descending)
/// and the remainder. Ties at the cut are broken by the rng: the pool is
/// shuffled before the stable sort. The remainder must be handed back to
/// the caller so it can release those keys for later iterations.
fn top_mu(
    mut pool: Vec<(SampleKey, f64)>,
    mu: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<(SampleKey, f64)>, Vec<(SampleKey, f64)>) {
    if pool.is_empty() {
        return (Vec::new(), Vec::new());
    }
    pool.shuffle(rng);
    pool.sort_by(|a, b| b.1.total_cmp(&a.1));
    let keep = ((mu * pool.len() as f64).ceil() as usize).clamp(1, pool.len());
    let rest = pool.split_off(keep);
    (pool, rest)
}

/// Cycles `universe` keys (heaviest first) onto `chosen` until it reaches
/// `need` entries.
fn repeat_fill(
    chosen: &mut Vec<SampleKey>,
    mut universe: Vec<SampleKey>,
    table: &WeightTable,
    need: usize,
) {
    universe.sort_by(|a, b| table.get(b).total_cmp(&table.get(a)).then_with(|| a.cmp(b)));
    let mut cursor = 0;
    while chosen.len() < need && !universe.is_empty() {
        chosen.push(universe[cursor % universe.len()].clone());
        cursor += 1;
    }
}

/// A configured loader bound to an index; derives one rng per round from
/// the seed, which is what makes prefetched and resumed fetches identical.
#[derive(Clone)]
pub struct Loader {
    index: Arc<DatasetIndex>,
    cfg: LoaderConfig,
}

impl Loader {
    pub fn new(index: Arc<DatasetIndex>, cfg: LoaderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Loader { index, cfg })
    }

    pub fn config(&self) -> &LoaderConfig {
        &self.cfg
    }

    pub fn index(&self) -> &DatasetIndex {
        &self.index
    }

    /// Synchronous fetch for boosting round `round`.
    pub fn fetch_round(&self, table: &WeightTable, round: u64) -> Result<Batch> {
        let mut rng = seed_for(self.cfg.seed, Stream::RoundLoader, round);
        fetch(&self.index, table, &self.cfg, &mut rng)
    }

    /// Starts fetching round `round` on a worker thread against a snapshot
    /// of `table` taken before this call returns. Later mutations of the
    /// live table cannot affect the result.
    pub fn prefetch_round(&self, table: &WeightTable, round: u64) -> PrefetchHandle {
        let snapshot = table.clone();
        let loader = self.clone();
        let (tx, rx) = mpsc::sync_channel(1);
        let worker = std::thread::spawn(move || {
            // A dropped handle just discards the batch.
            let _ = tx.send(loader.fetch_round(&snapshot, round));
        });
        PrefetchHandle { worker, rx }
    }
}

/// Handle to an in-flight prefetch (single-slot handoff).
pub struct PrefetchHandle {
    worker: std::thread::JoinHandle<()>,
    rx: mpsc::Receiver<Result<Batch>>,
}

impl PrefetchHandle {
    /// Blocks until the batch is ready.
    pub fn wait(self) -> Result<Batch> {
        let outcome = self
            .rx
            .recv()
            .map_err(|_| Error::Contract("prefetch worker disappeared without a result".into()))?;
        let _ = self.worker.join();
        outcome
    }
}
