//! The boosting round driver and its persistent sample-weight table.
//!
//! One boosting round (the paper's Algorithm 1, steps 2–10):
//!
//! 1. fetch the round set `D` from a [`BatchSource`],
//! 2. read each sample's stored weight (absent keys get the implicit
//!    initial weight `1 / universe_size`),
//! 3. normalize the weights over `D`,
//! 4. train the learner for `epochs_per_round` epochs on `D`,
//! 5. predict a label for every sample of `D`,
//! 6. compute the weighted error `ε` (clamped) and `β = (1 − ε)/ε`,
//! 7. multiply the stored weight of every misclassified sample by `β`,
//! 8. write all of `D`'s weights back to the table in one atomic batch.
//!
//! Training does not scale the loss by the sample weights: the weights
//! drive sample *selection* (see the loader) and the reweighting above.
//!
//! Concurrency: a [`WeightTable`] is plain data. The pipeline hands the
//! loader a clone taken at a round boundary, so prefetching always observes
//! the table as of some completed round, never a half-applied update.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Label;

/// Identifies one (query, target) training pair. The two slots are ordered:
/// `(a, b)` and `(b, a)` are different keys.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SampleKey {
    query_id: String,
    target_id: String,
}

impl SampleKey {
    pub fn new(query_id: &str, target_id: &str) -> Result<Self> {
        for (slot, id) in [("query", query_id), ("target", target_id)] {
            if id.is_empty() {
                return Err(Error::Contract(format!("{slot} id must be non-empty")));
            }
            if id.contains(['\t', '\n', '\r']) {
                return Err(Error::Contract(format!(
                    "{slot} id {id:?} contains tab/newline, which the table format reserves"
                )));
            }
        }
        Ok(SampleKey {
            query_id: query_id.to_string(),
            target_id: target_id.to_string(),
        })
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn target_id(&self) -> &str {
        &self.target_id
    }
}

/// Persistent sample-weight table: `SampleKey → weight > 0`, with an
/// implicit weight of `1 / universe_size` for absent keys (`universe_size`
/// being `|Q| · |T|`, the number of possible pairs).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    weights: BTreeMap<SampleKey, f64>,
    universe_size: u64,
}

impl WeightTable {
    pub fn new(universe_size: u64) -> Result<Self> {
        if universe_size == 0 {
            return Err(Error::Contract("weight-table universe must be non-empty".into()));
        }
        Ok(WeightTable {
            weights: BTreeMap::new(),
            universe_size,
        })
    }

    pub fn universe_size(&self) -> u64 {
        self.universe_size
    }

    /// The implicit weight of keys not yet stored: `1 / universe_size`.
    pub fn default_weight(&self) -> f64 {
        1.0 / self.universe_size as f64
    }

    /// Stored weight of `key`, or the implicit default.
    pub fn get(&self, key: &SampleKey) -> f64 {
        self.weights.get(key).copied().unwrap_or_else(|| self.default_weight())
    }

    /// Stores a weight. Weights must be positive and finite.
    pub fn set(&mut self, key: SampleKey, weight: f64) -> Result<()> {
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(Error::Contract(format!(
                "weight for ({}, {}) must be a positive finite number, got {weight}",
                key.query_id, key.target_id
            )));
        }
        self.weights.insert(key, weight);
        Ok(())
    }

    /// Number of explicitly stored entries.
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Stored entries in key order.
    pub fn iter(&self) -> impl Iterator<Item = (&SampleKey, f64)> {
        self.weights.iter().map(|(k, w)| (k, *w))
    }

    /// Serializes as a tab-separated table: a header line
    /// `universe_size<TAB>N`, then one `query<TAB>target<TAB>weight` line
    /// per stored entry in key order. Weights print in shortest-roundtrip
    /// decimal, so `read ∘ write` is bit-exact.
    pub fn write_to(&self, out: &mut dyn Write) -> Result<()> {
        writeln!(out, "universe_size\t{}", self.universe_size)?;
        for (key, weight) in self.iter() {
            writeln!(out, "{}\t{}\t{}", key.query_id, key.target_id, weight)?;
        }
        Ok(())
    }

    pub fn read_from(input: &mut dyn BufRead) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("weight table is empty (missing header)".into()))??;
        let universe_size = match header.split_once('\t') {
            Some(("universe_size", n)) => n
                .parse::<u64>()
                .map_err(|e| Error::Data(format!("bad universe_size {n:?}: {e}")))?,
            _ => {
                return Err(Error::Data(format!(
                    "weight table must start with 'universe_size<TAB>N', got {header:?}"
                )))
            }
        };
        let mut table = WeightTable::new(universe_size)?;
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (q, t, w) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(q), Some(t), Some(w), None) => (q, t, w),
                _ => {
                    return Err(Error::Data(format!(
                        "weight table line {}: expected 3 tab-separated fields, got {line:?}",
                        lineno + 2
                    )))
                }
            };
            let weight: f64 = w.parse().map_err(|e| {
                Error::Data(format!("weight table line {}: bad weight {w:?}: {e}", lineno + 2))
            })?;
            let key = SampleKey::new(q, t)?;
            if table.weights.contains_key(&key) {
                return Err(Error::Data(format!(
                    "weight table line {}: duplicate key ({q}, {t})",
                    lineno + 2
                )));
            }
            table.set(key, weight)?;
        }
        Ok(table)
    }

    /// Writes the table to `path` atomically (sibling temp file + rename),
    /// so an interrupted save never clobbers a good table.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, buf)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut reader = std::io::BufReader::new(file);
        Self::read_from(&mut reader)
    }
}

/// Configuration of the boosting loop.
#[derive(Debug, Clone)]
pub struct BoostConfig {
    /// Number of boosting rounds `R`.
    pub rounds: usize,
    /// Epochs trained per round `K`.
    pub epochs_per_round: usize,
    /// Round set size `M` (even; half matches, half non-matches).
    pub round_set_size: usize,
    /// Minibatch size for SGD within a round.
    pub mini_batch: usize,
    /// Clamp bound for the weighted error.
    pub epsilon_clamp: f64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig {
            rounds: 10,
            epochs_per_round: 3,
            round_set_size: 256,
            mini_batch: 32,
            epsilon_clamp: 1e-6,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.epochs_per_round == 0 {
            return Err(Error::Config("rounds and epochs per round must be positive".into()));
        }
        if self.round_set_size == 0 || self.round_set_size % 2 != 0 {
            return Err(Error::Config(format!(
                "round set size must be positive and even, got {}",
                self.round_set_size
            )));
        }
        if self.mini_batch == 0 || self.mini_batch > self.round_set_size {
            return Err(Error::Config(format!(
                "mini-batch size {} must be in 1..={}",
                self.mini_batch, self.round_set_size
            )));
        }
        if !(self.epsilon_clamp > 0.0 && self.epsilon_clamp < 0.5) {
            return Err(Error::Config(format!(
                "epsilon clamp must lie in (0, 0.5), got {}",
                self.epsilon_clamp
            )));
        }
        Ok(())
    }
}

/// Outcome of one boosting round.
#[derive(Debug, Clone)]
pub struct RoundReport {
    pub round: usize,
    /// Weighted error, clamped into `[clamp, 1 − clamp]`.
    pub epsilon: f64,
    /// `(1 − ε) / ε`.
    pub beta: f64,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Number of distinct keys whose stored weight was multiplied by β.
    pub reweighted: usize,
}

/// One sample of a round set: its identity, ground truth, and whatever
/// payload the learner trains on (image pairs in production, nothing in
/// unit tests).
#[derive(Debug, Clone)]
pub struct RoundSample<S> {
    pub key: SampleKey,
    pub label: Label,
    pub payload: S,
}

/// Supplies round sets. Implemented by the balanced loader.
pub trait BatchSource<S> {
    /// Assembles the round set for `round`, biased by the given weight
    /// snapshot.
    fn fetch_round(&mut self, table: &WeightTable, round: usize) -> Result<Vec<RoundSample<S>>>;
}

/// The trainable system boosted across rounds. Implemented by the FEN-SDN
/// model wrapper in the pipeline.
pub trait RoundLearner<S> {
    /// Trains for `epochs` epochs on the round set; returns the mean loss
    /// of each epoch.
    fn train(&mut self, samples: &[RoundSample<S>], epochs: usize, round: usize) -> Result<Vec<f64>>;

    /// Predicts labels for all samples without updating the model.
    fn predict(&self, samples: &[RoundSample<S>]) -> Result<Vec<Label>>;
}

/// Normalizes positive weights to sum to one.
pub fn normalize_weights(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(Error::Contract("cannot normalize an empty weight list".into()));
    }
    if let Some(bad) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
        return Err(Error::Contract(format!(
            "weights must be positive finite numbers, got {bad}"
        )));
    }
    let total: f64 = weights.iter().sum();
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Weighted misclassification rate, clamped into `[clamp, 1 − clamp]`.
pub fn weighted_error(
    predictions: &[Label],
    labels: &[Label],
    normalized_weights: &[f64],
    clamp: f64,
) -> Result<f64> {
    if predictions.len() != labels.len() || labels.len() != normalized_weights.len() {
        return Err(Error::Contract(format!(
            "weighted_error length mismatch: {} predictions, {} labels, {} weights",
            predictions.len(),
            labels.len(),
            normalized_weights.len()
        )));
    }
    let raw: f64 = predictions
        .iter()
        .zip(labels)
        .zip(normalized_weights)
        .filter(|((p, y), _)| p != y)
        .map(|(_, w)| *w)
        .sum();
    Ok(raw.clamp(clamp, 1.0 - clamp))
}

/// The boosting weight multiplier `β = (1 − ε) / ε`.
pub fn beta(epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Contract(format!(
            "beta requires epsilon strictly inside (0, 1), got {epsilon}"
        )));
    }
    Ok((1.0 - epsilon) / epsilon)
}

/// Executes one boosting round. The table is mutated only on success, in
/// one batch at the end; any error leaves it untouched.
pub fn run_round<S>(
    source: &mut dyn BatchSource<S>,
    table: &mut WeightTable,
    learner: &mut dyn RoundLearner<S>,
    cfg: &BoostConfig,
    round: usize,
) -> Result<RoundReport> {
    cfg.validate()?;
    let samples = source.fetch_round(table, round)?;
    if samples.is_empty() {
        return Err(Error::Contract("batch source returned an empty round set".into()));
    }

    // Read each sample's current weight. Duplicated keys (possible when the
    // corpus is smaller than the round set) read the same stored value.
    let raw_weights: Vec<f64> = samples.iter().map(|s| table.get(&s.key)).collect();
    let normalized = normalize_weights(&raw_weights)?;

    let epoch_losses = learner.train(&samples, cfg.epochs_per_round, round)?;
    let predictions = learner.predict(&samples)?;
    let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let epsilon = weighted_error(&predictions, &labels, &normalized, cfg.epsilon_clamp)?;
    let b = beta(epsilon)?;
    if epsilon >= 0.5 {
        log::warn!(
            "round {round}: weighted error {epsilon:.4} >= 0.5 (beta {b:.4} <= 1); \
             continuing — misclassified weights will shrink this round"
        );
    }

    // A key misclassified anywhere in D is reweighted exactly once.
    let misclassified: BTreeSet<&SampleKey> = samples
        .iter()
        .zip(&predictions)
        .filter(|(s, p)| s.label != **p)
        .map(|(s, _)| &s.key)
        .collect();
    let reweighted = misclassified.len();

    // Atomic write-back: compute every final weight first, then store.
    let mut final_weights: BTreeMap<&SampleKey, f64> = BTreeMap::new();
    for (sample, raw) in samples.iter().zip(&raw_weights) {
        final_weights.entry(&sample.key).or_insert(*raw);
    }
    for key in &misclassified {
        if let Some(w) = final_weights.get_mut(key) {
            *w *= b;
        }
    }
    for (key, weight) in final_weights {
        table.set(key.clone(), weight)?;
    }

    Ok(RoundReport {
        round,
        epsilon,
        beta: b,
        epoch_losses,
        reweighted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(q: &str, t: &str) -> SampleKey {
        SampleKey::new(q, t).unwrap()
    }

    /// Source yielding a fixed list of (key, label) samples.
    struct FixedSource {
        samples: Vec<(SampleKey, Label)>,
        fail: bool,
    }

    impl BatchSource<()> for FixedSource {
        fn fetch_round(&mut self, _table: &WeightTable, _round: usize) -> Result<Vec<RoundSample<()>>> {
            if self.fail {
                return Err(Error::Exhausted("source down".into()));
            }
            Ok(self
                .samples
                .iter()
                .map(|(key, label)| RoundSample {
                    key: key.clone(),
                    label: *label,
                    payload: (),
                })
                .collect())
        }
    }

    /// Learner with a frozen prediction rule and no actual training.
    struct FixedLearner {
        predictions: Vec<Label>,
    }

    impl RoundLearner<()> for FixedLearner {
        fn train(&mut self, _samples: &[RoundSample<()>], epochs: usize, _round: usize) -> Result<Vec<f64>> {
            Ok(vec![0.0; epochs])
        }

        fn predict(&self, _samples: &[RoundSample<()>]) -> Result<Vec<Label>> {
            Ok(self.predictions.clone())
        }
    }

    #[test]
    fn sample_key_rejects_empty_and_reserved_chars() {
        assert!(SampleKey::new("", "t").is_err());
        assert!(SampleKey::new("q", "").is_err());
        assert!(SampleKey::new("a\tb", "t").is_err());
        assert!(SampleKey::new("q", "a\nb").is_err());
        let k = key("q1", "t1");
        assert_eq!(k.query_id(), "q1");
        assert_eq!(k.target_id(), "t1");
    }

    #[test]
    fn sample_key_slots_are_ordered() {
        assert_ne!(key("a", "b"), key("b", "a"));
    }

    #[test]
    fn absent_keys_have_implicit_initial_weight() {
        let table = WeightTable::new(15_000 * 2_999).unwrap();
        let w = table.get(&key("q", "t"));
        assert_eq!(w, 1.0 / (15_000.0 * 2_999.0));
        assert_eq!(table.len(), 0);
    }

    #[test]
    fn set_rejects_nonpositive_weights() {
        let mut table = WeightTable::new(10).unwrap();
        assert!(table.set(key("q", "t"), 0.0).is_err());
        assert!(table.set(key("q", "t"), -1.0).is_err());
        assert!(table.set(key("q", "t"), f64::NAN).is_err());
        assert!(table.set(key("q", "t"), f64::INFINITY).is_err());
    }

    #[test]
    fn serialization_roundtrip_is_bit_exact() {
        let mut table = WeightTable::new(12345).unwrap();
        // Deliberately awkward values: shortest-roundtrip printing must
        // reproduce every bit.
        table.set(key("s0001", "f0042"), std::f64::consts::PI).unwrap();
        table.set(key("s0002", "f0001"), 1e-300).unwrap();
        table.set(key("s0002", "f0002"), 0.1 + 0.2).unwrap();
        table.set(key("z", "z"), f64::MIN_POSITIVE).unwrap();

        let mut bytes = Vec::new();
        table.write_to(&mut bytes).unwrap();
        let restored = WeightTable::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(restored.universe_size(), 12345);
        assert_eq!(restored.len(), table.len());
        for (k, w) in table.iter() {
            assert_eq!(restored.get(k).to_bits(), w.to_bits(), "key {k:?}");
        }
        // And the byte stream itself is a fixed point.
        let mut again = Vec::new();
        restored.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn read_rejects_malformed_tables() {
        let cases: &[&str] = &[
            "",                                  // no header
            "universe\t5\n",                     // bad header key
            "universe_size\tfive\n",             // bad header value
            "universe_size\t5\nq\tt\n",          // too few fields
            "universe_size\t5\nq\tt\t1.0\textra\n", // too many fields
            "universe_size\t5\nq\tt\tabc\n",     // bad weight
            "universe_size\t5\nq\tt\t-1.0\n",    // non-positive weight
            "universe_size\t5\nq\tt\t1\nq\tt\t2\n", // duplicate key
        ];
        for case in cases {
            let mut r = case.as_bytes();
            assert!(WeightTable::read_from(&mut r).is_err(), "case {case:?}");
        }
    }

    #[test]
    fn normalize_weights_pinned_examples() {
        assert_eq!(
            normalize_weights(&[1.0, 1.0, 1.0, 1.0]).unwrap(),
            vec![0.25, 0.25, 0.25, 0.25]
        );
        assert_eq!(normalize_weights(&[7.5]).unwrap(), vec![1.0]);
        let already = normalize_weights(&[0.4, 0.3, 0.2, 0.1]).unwrap();
        for (got, want) in already.iter().zip([0.4, 0.3, 0.2, 0.1]) {
            assert!((got - want).abs() < 1e-12);
        }
        let sum: f64 = already.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_weights_contract_errors() {
        assert!(normalize_weights(&[]).is_err());
        assert!(normalize_weights(&[1.0, 0.0]).is_err());
        assert!(normalize_weights(&[1.0, -2.0]).is_err());
    }

    #[test]
    fn weighted_error_examples_and_clamping() {
        let m = Label::Match;
        let n = Label::NonMatch;
        // All correct: clamped up from zero.
        let e = weighted_error(&[m, n], &[m, n], &[0.5, 0.5], 1e-6).unwrap();
        assert_eq!(e, 1e-6);
        // All wrong: clamped down from one.
        let e = weighted_error(&[n, m], &[m, n], &[0.5, 0.5], 1e-6).unwrap();
        assert_eq!(e, 1.0 - 1e-6);
        // Half wrong by weight.
        let e = weighted_error(&[m, m], &[m, n], &[0.5, 0.5], 1e-6).unwrap();
        assert_eq!(e, 0.5);
        // Length mismatch.
        assert!(weighted_error(&[m], &[m, n], &[0.5, 0.5], 1e-6).is_err());
    }

    #[test]
    fn beta_pinned_examples() {
        assert_eq!(beta(0.5).unwrap(), 1.0);
        assert_eq!(beta(0.25).unwrap(), 3.0);
        assert_eq!(beta(0.2).unwrap(), 4.0);
        assert!(beta(0.0).is_err());
        assert!(beta(1.0).is_err());
        assert!(beta(-0.1).is_err());
    }

    #[test]
    fn run_round_hand_computed_oracle() {
        // Four samples with stored weights 0.4/0.3/0.2/0.1 (already
        // normalized); the third is misclassified. Algorithm 1 steps 7-9
        // give epsilon = 0.2, beta = 4, and the third stored weight
        // becomes 0.8.
        let keys = [key("q", "t1"), key("q", "t2"), key("q", "t3"), key("q", "t4")];
        let mut table = WeightTable::new(100).unwrap();
        for (k, w) in keys.iter().zip([0.4, 0.3, 0.2, 0.1]) {
            table.set(k.clone(), w).unwrap();
        }
        let truth = Label::Match;
        let mut source = FixedSource {
            samples: keys.iter().map(|k| (k.clone(), truth)).collect(),
            fail: false,
        };
        let mut learner = FixedLearner {
            predictions: vec![Label::Match, Label::Match, Label::NonMatch, Label::Match],
        };
        let cfg = BoostConfig {
            round_set_size: 4,
            mini_batch: 2,
            ..BoostConfig::default()
        };
        let report = run_round(&mut source, &mut table, &mut learner, &cfg, 0).unwrap();

        assert!((report.epsilon - 0.2).abs() < 1e-12, "epsilon {}", report.epsilon);
        assert!((report.beta - 4.0).abs() < 1e-12, "beta {}", report.beta);
        assert_eq!(report.reweighted, 1);
        assert!((table.get(&keys[2]) - 0.8).abs() < 1e-12);
        // Correctly classified samples keep their stored weights exactly.
        assert_eq!(table.get(&keys[0]), 0.4);
        assert_eq!(table.get(&keys[1]), 0.3);
        assert_eq!(table.get(&keys[3]), 0.1);
    }

    #[test]
    fn frozen_model_weights_grow_geometrically() {
        // A learner that never changes its (wrong) mind about one sample:
        // that sample's stored weight must be multiplied by the reported
        // beta every round.
        let keys = [key("q", "t1"), key("q", "t2"), key("q", "t3"), key("q", "t4")];
        let mut table = WeightTable::new(16).unwrap();
        let mut source = FixedSource {
            samples: keys.iter().map(|k| (k.clone(), Label::Match)).collect(),
            fail: false,
        };
        let mut learner = FixedLearner {
            predictions: vec![Label::NonMatch, Label::Match, Label::Match, Label::Match],
        };
        let cfg = BoostConfig {
            round_set_size: 4,
            mini_batch: 2,
            ..BoostConfig::default()
        };
        let w0 = table.get(&keys[0]);
        let mut expected = w0;
        for round in 0..3 {
            let report = run_round(&mut source, &mut table, &mut learner, &cfg, round).unwrap();
            expected *= report.beta;
            let got = table.get(&keys[0]);
            assert!(
                (got - expected).abs() <= 1e-12 * expected.abs(),
                "round {round}: got {got}, expected {expected}"
            );
            // The correctly classified samples never gain weight.
            assert_eq!(table.get(&keys[1]), w0);
        }
        // Three rounds of growth: the weight strictly increased each round
        // (beta > 1 since epsilon < 0.5 throughout).
        assert!(table.get(&keys[0]) > w0);
    }

    #[test]
    fn aborted_round_leaves_table_untouched() {
        let mut table = WeightTable::new(10).unwrap();
        table.set(key("q", "t"), 0.123).unwrap();
        let mut before = Vec::new();
        table.write_to(&mut before).unwrap();

        let mut source = FixedSource {
            samples: vec![],
            fail: true,
        };
        let mut learner = FixedLearner { predictions: vec![] };
        let cfg = BoostConfig {
            round_set_size: 2,
            mini_batch: 1,
            ..BoostConfig::default()
        };
        assert!(run_round(&mut source, &mut table, &mut learner, &cfg, 0).is_err());

        let mut after = Vec::new();
        table.write_to(&mut after).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn duplicate_keys_in_a_round_are_reweighted_once() {
        let k = key("q", "t");
        let mut table = WeightTable::new(4).unwrap();
        table.set(k.clone(), 0.5).unwrap();
        let mut source = FixedSource {
            samples: vec![(k.clone(), Label::Match), (k.clone(), Label::Match)],
            fail: false,
        };
        let mut learner = FixedLearner {
            predictions: vec![Label::NonMatch, Label::NonMatch],
        };
        let cfg = BoostConfig {
            round_set_size: 2,
            mini_batch: 1,
            ..BoostConfig::default()
        };
        let report = run_round(&mut source, &mut table, &mut learner, &cfg, 0).unwrap();
        assert_eq!(report.reweighted, 1);
        // Both instances misclassified with full weight: epsilon clamps to
        // the top, beta < 1, applied exactly once.
        assert!((table.get(&k) - 0.5 * report.beta).abs() < 1e-15);
    }

    #[test]
    fn high_error_round_warns_but_proceeds() {
        let keys = [key("q", "t1"), key("q", "t2")];
        let mut table = WeightTable::new(4).unwrap();
        let mut source = FixedSource {
            samples: keys.iter().map(|k| (k.clone(), Label::Match)).collect(),
            fail: false,
        };
        let mut learner = FixedLearner {
            predictions: vec![Label::NonMatch, Label::NonMatch],
        };
        let cfg = BoostConfig {
            round_set_size: 2,
            mini_batch: 1,
            ..BoostConfig::default()
        };
        let report = run_round(&mut source, &mut table, &mut learner, &cfg, 0).unwrap();
        assert!(report.epsilon > 0.5);
        assert!(report.beta < 1.0);
        // Weights shrank but stayed positive.
        let w = table.get(&keys[0]);
        assert!(w > 0.0 && w < table.default_weight());
    }

    #[test]
    fn boost_config_validation() {
        assert!(BoostConfig::default().validate().is_ok());
        assert!(BoostConfig { rounds: 0, ..BoostConfig::default() }.validate().is_err());
        assert!(BoostConfig { round_set_size: 3, ..BoostConfig::default() }.validate().is_err());
        assert!(BoostConfig { mini_batch: 0, ..BoostConfig::default() }.validate().is_err());
        assert!(BoostConfig { mini_batch: 512, round_set_size: 256, ..BoostConfig::default() }
            .validate()
            .is_err());
        assert!(BoostConfig { epsilon_clamp: 0.5, ..BoostConfig::default() }.validate().is_err());
    }
}
