//! End-to-end drivers behind the CLI: dataset generation, boosted
//! training with a prefetching loader and per-round persistence,
//! evaluation, single-query ranking, and weight-table inspection.
//!
//! Everything here is deterministic given (master seed, config, manifest):
//! every random choice draws from a named stream of the master seed, so a
//! resumed run replays exactly the generators an uninterrupted run would
//! use, and two runs with the same inputs produce byte-identical
//! artifacts.
//!
//! A training run directory contains:
//!
//! - `checkpoint.ckpt` — versioned binary checkpoint (params, optimizer
//!   moments, batch-norm statistics, round counter), rewritten atomically
//!   after every round;
//! - `weights.tsv` — the boosting weight table, same cadence;
//! - `train_log.txt` — one line per round (`round R epsilon E beta B
//!   reweighted N losses L1,L2,...`), appended as rounds complete.
//!
//! Both files are written only after a round fully completes, so an
//! interrupted run resumes from the last finished round.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::boosting::{
    run_round, BatchSource, BoostConfig, RoundLearner, RoundReport, RoundSample, SampleKey,
    WeightTable,
};
use crate::checkpoint::Checkpoint;
use crate::dataset::{
    load_gray_png, save_gray_png, save_mask_png, Manifest, QueryRecord, Split, TargetRecord,
    IMAGE_DIR, MASK_DIR,
};
use crate::error::{Error, Result};
use crate::eval::{rank_all, rank_targets, stratified_report, RetrievalReport, TargetIndex};
use crate::loader::{Loader, LoaderConfig, PrefetchHandle};
use crate::model::{predict_label, stack_images, Label, MatchModel, ModelConfig, SdnConfig};
use crate::quality::{assign_levels, quality_from_record, quality_score};
use crate::rng::{derive_u64, seed_for, Stream};
use crate::synth::{generate_queries, render_slide};
use crate::tensor::params::ParameterSet;
use crate::tensor::Tensor;

/// Checkpoint file name inside a run directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
/// Weight-table file name inside a run directory.
pub const WEIGHTS_FILE: &str = "weights.tsv";
/// Per-round training log inside a run directory.
pub const TRAIN_LOG_FILE: &str = "train_log.txt";
/// Machine-readable retrieval report file name.
pub const REPORT_FILE: &str = "report.txt";
/// Human-readable retrieval report file name.
pub const REPORT_TABLE_FILE: &str = "report_table.txt";

/// Named model-geometry profiles selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// 64 px inputs, 5 conv layers, 256-dim features: runs on a desktop.
    Desk,
    /// 256 px inputs, 7 conv layers, 1024-dim features.
    Paper,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Profile> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!(
                "unknown profile {other:?}; expected \"desk\" or \"paper\""
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }

    pub fn model_config(self) -> ModelConfig {
        match self {
            Profile::Desk => ModelConfig::desk(),
            Profile::Paper => ModelConfig::paper(),
        }
    }
}

/// The full resolved configuration of a training run. Its canonical text
/// rendering is embedded (and digest-protected) in every checkpoint, so a
/// resume with different settings fails loudly instead of silently
/// diverging, and `eval`/`query` can rebuild the exact model from the
/// checkpoint alone.
///
/// The total round count is deliberately *not* part of the configuration:
/// it is a stop condition, and extending a finished run by more rounds is
/// legitimate.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Profile name the geometry came from (`desk`, `paper`, or `custom`).
    pub profile: String,
    pub model: ModelConfig,
    pub epochs_per_round: usize,
    /// Round set size `m`.
    pub round_size: usize,
    pub mini_batch: usize,
    pub epsilon_clamp: f64,
    /// Hard-case rate μ of the loader.
    pub mu: f64,
    /// Candidates per loader iteration.
    pub candidate_k: usize,
    /// Acceptance-balance α (positives per query), resolved from the
    /// manifest unless overridden.
    pub alpha: f64,
    pub seed: u64,
}

impl RunConfig {
    /// Defaults for a profile: K = 3 epochs, m = 256, minibatch 32,
    /// μ = 0.2, k = 16·m.
    pub fn for_profile(profile: Profile, seed: u64, alpha: f64) -> RunConfig {
        RunConfig {
            profile: profile.as_str().to_string(),
            model: profile.model_config(),
            epochs_per_round: 3,
            round_size: 256,
            mini_batch: 32,
            epsilon_clamp: 1e-6,
            mu: 0.2,
            candidate_k: 16 * 256,
            alpha,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.profile.is_empty() || self.profile.chars().any(|c| c.is_whitespace()) {
            return Err(Error::Config("profile name must be a non-empty single token".into()));
        }
        self.model.validate()?;
        self.boost_config(1).validate()?;
        self.loader_config().validate()?;
        if !(self.alpha.is_finite() && self.alpha >= 1.0) {
            return Err(Error::Config(format!("alpha must be finite and at least 1, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn boost_config(&self, rounds: usize) -> BoostConfig {
        BoostConfig {
            rounds,
            epochs_per_round: self.epochs_per_round,
            round_set_size: self.round_size,
            mini_batch: self.mini_batch,
            epsilon_clamp: self.epsilon_clamp,
        }
    }

    pub fn loader_config(&self) -> LoaderConfig {
        LoaderConfig {
            output_size: self.round_size,
            candidate_k: self.candidate_k,
            mu: self.mu,
            seed: self.seed,
        }
    }

    /// Canonical text rendering: fixed key order, one `key value` line
    /// each, floats in shortest-roundtrip decimal. `parse` inverts it
    /// bit-exactly.
    pub fn to_text(&self) -> String {
        let hidden: Vec<String> = self.model.sdn.hidden_sizes.iter().map(|h| h.to_string()).collect();
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push(' ');
            out.push_str(&v);
            out.push('\n');
        };
        line("format", "slidematch-config v1".into());
        line("profile", self.profile.clone());
        line("seed", self.seed.to_string());
        line("input_size", self.model.fen.input_size.to_string());
        line("conv_layers", self.model.fen.conv_layers.to_string());
        line("base_kernels", self.model.fen.base_kernels.to_string());
        line("feature_dim", self.model.fen.feature_dim.to_string());
        line("leaky_slope", self.model.fen.leaky_slope.to_string());
        line("bn_momentum", self.model.fen.bn_momentum.to_string());
        line("bn_eps", self.model.fen.bn_eps.to_string());
        line("sdn_hidden", hidden.join(","));
        line("delta", self.model.delta.to_string());
        line("lr", self.model.adam.lr.to_string());
        line("beta1", self.model.adam.beta1.to_string());
        line("beta2", self.model.adam.beta2.to_string());
        line("adam_eps", self.model.adam.eps.to_string());
        line("weight_decay", self.model.adam.weight_decay.to_string());
        line("epochs_per_round", self.epochs_per_round.to_string());
        line("round_size", self.round_size.to_string());
        line("mini_batch", self.mini_batch.to_string());
        line("epsilon_clamp", self.epsilon_clamp.to_string());
        line("mu", self.mu.to_string());
        line("candidate_k", self.candidate_k.to_string());
        line("alpha", self.alpha.to_string());
        out
    }

    /// Parses the canonical text (e.g. out of a checkpoint).
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut fields: HashMap<&str, &str> = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            if raw.is_empty() {
                continue;
            }
            let (key, value) = raw.split_once(' ').ok_or_else(|| {
                Error::Data(format!("config line {}: expected 'key value', got {raw:?}", lineno + 1))
            })?;
            if fields.insert(key, value).is_some() {
                return Err(Error::Data(format!("config line {}: duplicate key {key:?}", lineno + 1)));
            }
        }
        let mut take = |key: &str| -> Result<&str> {
            fields
                .remove(key)
                .ok_or_else(|| Error::Data(format!("config is missing the {key:?} field")))
        };
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            v.parse()
                .map_err(|e| Error::Data(format!("config field {key:?}: bad value {v:?}: {e}")))
        }

        let format = take("format")?;
        if format != "slidematch-config v1" {
            return Err(Error::Data(format!("unsupported config format {format:?}")));
        }
        let profile = take("profile")?.to_string();
        let seed = num("seed", take("seed")?)?;
        let fen = crate::model::FenConfig {
            input_size: num("input_size", take("input_size")?)?,
            conv_layers: num("conv_layers", take("conv_layers")?)?,
            base_kernels: num("base_kernels", take("base_kernels")?)?,
            feature_dim: num("feature_dim", take("feature_dim")?)?,
            leaky_slope: num("leaky_slope", take("leaky_slope")?)?,
            bn_momentum: num("bn_momentum", take("bn_momentum")?)?,
            bn_eps: num("bn_eps", take("bn_eps")?)?,
        };
        let hidden_text = take("sdn_hidden")?;
        let mut hidden_sizes = Vec::new();
        for part in hidden_text.split(',') {
            hidden_sizes.push(num::<usize>("sdn_hidden", part)?);
        }
        let sdn = SdnConfig { feature_dim: fen.feature_dim, hidden_sizes };
        let model = ModelConfig {
            fen,
            sdn,
            delta: num("delta", take("delta")?)?,
            adam: crate::tensor::params::AdamConfig {
                lr: num("lr", take("lr")?)?,
                beta1: num("beta1", take("beta1")?)?,
                beta2: num("beta2", take("beta2")?)?,
                eps: num("adam_eps", take("adam_eps")?)?,
                weight_decay: num("weight_decay", take("weight_decay")?)?,
            },
        };
        let cfg = RunConfig {
            profile,
            model,
            epochs_per_round: num("epochs_per_round", take("epochs_per_round")?)?,
            round_size: num("round_size", take("round_size")?)?,
            mini_batch: num("mini_batch", take("mini_batch")?)?,
            epsilon_clamp: num("epsilon_clamp", take("epsilon_clamp")?)?,
            mu: num("mu", take("mu")?)?,
            candidate_k: num("candidate_k", take("candidate_k")?)?,
            alpha: num("alpha", take("alpha")?)?,
            seed,
        };
        if let Some(key) = fields.keys().next() {
            return Err(Error::Data(format!("config has an unknown field {key:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// What `generate` builds.
#[derive(Debug, Clone)]
pub struct GenerateSpec {
    pub out: PathBuf,
    pub slides: usize,
    /// Training queries per slide.
    pub queries_per_slide: usize,
    /// Additional held-out queries per slide.
    pub heldout_per_slide: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Noise levels to cycle through, in order, across the global query
    /// sequence.
    pub levels: Vec<u8>,
}

impl GenerateSpec {
    /// Defaults: 20 slides, 5 training queries each, no held-out split,
    /// 64 px, noise levels 1..=10.
    pub fn new(out: impl Into<PathBuf>, seed: u64) -> GenerateSpec {
        GenerateSpec {
            out: out.into(),
            slides: 20,
            queries_per_slide: 5,
            heldout_per_slide: 0,
            image_size: 64,
            seed,
            levels: (1..=10).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.slides == 0 || self.queries_per_slide == 0 {
            return Err(Error::Config("need at least one slide and one query per slide".into()));
        }
        if self.image_size < 32 {
            return Err(Error::Config(format!(
                "image size must be at least 32 px, got {}",
                self.image_size
            )));
        }
        if self.levels.is_empty() || self.levels.iter().any(|&l| !(1..=10).contains(&l)) {
            return Err(Error::Config("noise levels must be a non-empty list within 1..=10".into()));
        }
        Ok(())
    }
}

/// Renders `slides` procedural slides, corrupts `queries_per_slide +
/// heldout_per_slide` frames from each, writes all images and masks, and
/// saves the manifest. Slide `i` draws from its own stream; each query has
/// its own recorded sub-seed, so any single image can be regenerated
/// without the rest. Noise levels cycle over the global query ordinal so
/// every requested level appears evenly.
pub fn generate_dataset(spec: &GenerateSpec) -> Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(spec.out.join(IMAGE_DIR))?;
    std::fs::create_dir_all(spec.out.join(MASK_DIR))?;
    let mut manifest = Manifest::new(&spec.out, spec.seed, spec.image_size);
    let per_slide = spec.queries_per_slide + spec.heldout_per_slide;

    for i in 0..spec.slides {
        let slide_id = format!("s{i:04}");
        let mut rng = seed_for(spec.seed, Stream::SlideGen, i as u64);
        let (slide, text_mask) = render_slide(spec.image_size, &mut rng)?;

        let file = format!("{IMAGE_DIR}/{slide_id}.png");
        let text_file = format!("{MASK_DIR}/{slide_id}_text.png");
        save_gray_png(&spec.out.join(&file), &slide)?;
        save_mask_png(&spec.out.join(&text_file), &text_mask)?;
        manifest.targets.push(TargetRecord { id: slide_id.clone(), file, text_mask: text_file });

        // Rotate the level list so local query j gets the level of global
        // ordinal i·per_slide + j.
        let mut levels = spec.levels.clone();
        let rotation = (i * per_slide) % levels.len();
        levels.rotate_left(rotation);
        let base_seed = derive_u64(spec.seed, Stream::QueryGen, i as u64);
        let generated = generate_queries(&slide, per_slide, &levels, base_seed)?;

        for (j, (image, record)) in generated.into_iter().enumerate() {
            let query_id = format!("q{i:04}_{j:03}");
            let split = if j < spec.queries_per_slide { Split::Train } else { Split::Heldout };
            let file = format!("{IMAGE_DIR}/{query_id}.png");
            let block_file = format!("{MASK_DIR}/{query_id}_blocks.png");
            let slide_file = format!("{MASK_DIR}/{query_id}_slide.png");
            save_gray_png(&spec.out.join(&file), &image)?;
            save_mask_png(&spec.out.join(&block_file), &record.block_mask)?;
            save_mask_png(&spec.out.join(&slide_file), &record.slide_mask)?;
            let quality = quality_from_record(&record, &text_mask)?;
            manifest.queries.push(QueryRecord {
                id: query_id,
                split,
                file,
                matches: vec![slide_id.clone()],
                noise_level: record.params.noise_level,
                block_count: record.params.block_count,
                blocked_ratio: record.blocked_ratio,
                homography: record.params.homography,
                seed: record.params.seed,
                block_mask: block_file,
                slide_mask: slide_file,
                quality,
            });
        }
    }

    manifest.validate()?;
    manifest.save()?;
    Ok(manifest)
}

/// In-memory image cache keyed by manifest id. Training loads its whole
/// working set once (a desk-scale set is a few megabytes) instead of
/// re-decoding files every round.
pub struct ImageStore {
    images: HashMap<String, Arc<Tensor<f32>>>,
}

impl ImageStore {
    /// Loads the training working set: every target plus every
    /// training-split query.
    pub fn for_training(manifest: &Manifest) -> Result<ImageStore> {
        let mut refs: Vec<(&str, &str)> =
            manifest.targets.iter().map(|t| (t.id.as_str(), t.file.as_str())).collect();
        refs.extend(
            manifest
                .queries_in(Some(Split::Train))
                .into_iter()
                .map(|q| (q.id.as_str(), q.file.as_str())),
        );
        let mut images = HashMap::with_capacity(refs.len());
        for (id, file) in refs {
            let image = manifest.load_image(file)?;
            let shape = image.shape().to_vec();
            if shape != [manifest.image_size, manifest.image_size] {
                return Err(Error::Data(format!(
                    "image {file:?} is {shape:?}, expected {0}×{0} per the manifest header",
                    manifest.image_size
                )));
            }
            images.insert(id.to_string(), Arc::new(image));
        }
        Ok(ImageStore { images })
    }

    pub fn get(&self, id: &str) -> Result<Arc<Tensor<f32>>> {
        self.images
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no image loaded for id {id:?}")))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Round-sample payload: the actual pixel pair behind a sample key.
#[derive(Clone)]
pub struct PairImages {
    pub query: Arc<Tensor<f32>>,
    pub target: Arc<Tensor<f32>>,
}

/// Adapts the balanced loader (plus the image cache) to the boosting
/// driver's batch-source interface, carrying at most one prefetched batch.
struct PipelineSource<'a> {
    loader: Loader,
    store: &'a ImageStore,
    pending: Option<(u64, PrefetchHandle)>,
}

impl<'a> PipelineSource<'a> {
    fn new(loader: Loader, store: &'a ImageStore) -> Self {
        PipelineSource { loader, store, pending: None }
    }

    /// Launches assembly of `round`'s batch on the loader worker from a
    /// snapshot of `table` as it is right now.
    fn start_prefetch(&mut self, table: &WeightTable, round: usize) {
        self.pending = Some((round as u64, self.loader.prefetch_round(table, round as u64)));
    }
}

impl BatchSource<PairImages> for PipelineSource<'_> {
    fn fetch_round(&mut self, table: &WeightTable, round: usize) -> Result<Vec<RoundSample<PairImages>>> {
        let batch = match self.pending.take() {
            Some((r, handle)) if r == round as u64 => handle.wait()?,
            // A stale handle (different round) is discarded; its worker
            // parks the batch in the channel slot and exits.
            _ => self.loader.fetch_round(table, round as u64)?,
        };
        batch
            .samples
            .into_iter()
            .map(|s| {
                let payload = PairImages {
                    query: self.store.get(s.key.query_id())?,
                    target: self.store.get(s.key.target_id())?,
                };
                Ok(RoundSample { key: s.key, label: s.label, payload })
            })
            .collect()
    }
}

/// Stacks the selected samples into `[n,1,s,s]` query/target tensors.
fn stack_chunk(
    samples: &[RoundSample<PairImages>],
    picks: &[usize],
) -> Result<(Tensor<f32>, Tensor<f32>, Vec<Label>)> {
    let queries: Vec<&Tensor<f32>> = picks.iter().map(|&i| samples[i].payload.query.as_ref()).collect();
    let targets: Vec<&Tensor<f32>> = picks.iter().map(|&i| samples[i].payload.target.as_ref()).collect();
    let labels = picks.iter().map(|&i| samples[i].label).collect();
    Ok((stack_images(&queries)?, stack_images(&targets)?, labels))
}

/// The FEN-SDN model as a boosting round learner: K epochs of shuffled
/// minibatch SGD per round, eval-mode prediction for the weighted error.
struct PipelineLearner<'a> {
    model: &'a MatchModel,
    params: ParameterSet<f32>,
    mini_batch: usize,
    epochs_per_round: u64,
    master_seed: u64,
}

impl RoundLearner<PairImages> for PipelineLearner<'_> {
    fn train(&mut self, samples: &[RoundSample<PairImages>], epochs: usize, round: usize) -> Result<Vec<f64>> {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut losses = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            // One shuffle stream per (round, epoch), so a resumed run
            // replays the identical visit order.
            let shuffle_index = round as u64 * self.epochs_per_round + epoch as u64;
            let mut rng = seed_for(self.master_seed, Stream::RoundShuffle, shuffle_index);
            order.shuffle(&mut rng);
            let mut weighted = 0.0;
            let mut count = 0usize;
            for chunk in order.chunks(self.mini_batch) {
                let (queries, targets, labels) = stack_chunk(samples, chunk)?;
                let loss = self.model.train_step(&mut self.params, &queries, &targets, &labels)?;
                weighted += loss * chunk.len() as f64;
                count += chunk.len();
            }
            losses.push(weighted / count as f64);
        }
        Ok(losses)
    }

    fn predict(&self, samples: &[RoundSample<PairImages>]) -> Result<Vec<Label>> {
        let picks: Vec<usize> = (0..samples.len()).collect();
        let mut labels = Vec::with_capacity(samples.len());
        for chunk in picks.chunks(self.mini_batch) {
            let (queries, targets, _) = stack_chunk(samples, chunk)?;
            let scores = self.model.batch_pair_scores(&self.params, &queries, &targets)?;
            labels.extend(scores.into_iter().map(predict_label));
        }
        Ok(labels)
    }
}

/// What `train` produced or extended.
#[derive(Debug)]
pub struct TrainOutcome {
    /// Reports of the rounds run by this invocation (empty when the
    /// checkpoint had already reached the requested round count).
    pub new_reports: Vec<RoundReport>,
    /// Total completed rounds recorded in the checkpoint.
    pub rounds_completed: u64,
    pub checkpoint: PathBuf,
    pub weights: PathBuf,
}

fn round_log_line(report: &RoundReport) -> String {
    let losses: Vec<String> = report.epoch_losses.iter().map(|l| l.to_string()).collect();
    format!(
        "round {} epsilon {} beta {} reweighted {} losses {}",
        report.round + 1,
        report.epsilon,
        report.beta,
        report.reweighted,
        losses.join(",")
    )
}

/// Runs boosting until `rounds` total rounds are complete, starting fresh
/// or resuming from `out_dir`'s checkpoint. After every round the
/// checkpoint and weight table are rewritten (atomically) and one log line
/// is appended to the training log, so interrupting between rounds loses
/// at most the round in flight. Resuming with a different configuration
/// is refused via the checkpoint's embedded config text.
pub fn train_run(manifest: &Manifest, cfg: &RunConfig, rounds: usize, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    if manifest.image_size != cfg.model.fen.input_size {
        return Err(Error::Config(format!(
            "manifest images are {} px but the {} profile expects {} px",
            manifest.image_size, cfg.profile, cfg.model.fen.input_size
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
    let weights_path = out_dir.join(WEIGHTS_FILE);
    let log_path = out_dir.join(TRAIN_LOG_FILE);

    let config_text = cfg.to_text();
    let model = MatchModel::new(cfg.model.clone())?;
    let index = Arc::new(manifest.training_index()?.with_alpha(cfg.alpha)?);

    let (params, mut table, start_round) = if checkpoint_path.exists() {
        let ckpt = Checkpoint::load(&checkpoint_path)?;
        ckpt.ensure_config(&config_text)?;
        let table = WeightTable::load(&weights_path)?;
        if table.universe_size() != index.universe_size() {
            return Err(Error::Data(format!(
                "weight table universe {} does not match the manifest's {}",
                table.universe_size(),
                index.universe_size()
            )));
        }
        log::info!("resuming after {} completed rounds", ckpt.rounds_completed);
        (ckpt.params, table, ckpt.rounds_completed as usize)
    } else {
        (model.init_params(cfg.seed)?, WeightTable::new(index.universe_size())?, 0)
    };

    let store = ImageStore::for_training(manifest)?;
    let loader = Loader::new(Arc::clone(&index), cfg.loader_config())?;
    let mut source = PipelineSource::new(loader, &store);
    let mut learner = PipelineLearner {
        model: &model,
        params,
        mini_batch: cfg.mini_batch,
        epochs_per_round: cfg.epochs_per_round as u64,
        master_seed: cfg.seed,
    };

    let mut new_reports = Vec::new();
    if start_round >= rounds {
        // Nothing to run; still persist, so `--rounds 0` on a fresh
        // directory leaves a loadable initial checkpoint and table.
        save_state(&checkpoint_path, &weights_path, &config_text, cfg.seed, start_round, &learner.params, &table)?;
        return Ok(TrainOutcome {
            new_reports,
            rounds_completed: start_round as u64,
            checkpoint: checkpoint_path,
            weights: weights_path,
        });
    }

    let boost_cfg = cfg.boost_config(rounds);
    let mut log_file = std::fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
    for round in start_round..rounds {
        let report = run_round(&mut source, &mut table, &mut learner, &boost_cfg, round)?;
        // The next round's batch is assembled on the loader worker from
        // the just-updated table while this thread persists the round.
        if round + 1 < rounds {
            source.start_prefetch(&table, round + 1);
        }
        save_state(&checkpoint_path, &weights_path, &config_text, cfg.seed, round + 1, &learner.params, &table)?;
        let line = round_log_line(&report);
        log::info!("{line}");
        use std::io::Write;
        writeln!(log_file, "{line}")?;
        log_file.flush()?;
        new_reports.push(report);
    }

    Ok(TrainOutcome {
        new_reports,
        rounds_completed: rounds as u64,
        checkpoint: checkpoint_path,
        weights: weights_path,
    })
}

fn save_state(
    checkpoint_path: &Path,
    weights_path: &Path,
    config_text: &str,
    seed: u64,
    rounds_completed: usize,
    params: &ParameterSet<f32>,
    table: &WeightTable,
) -> Result<()> {
    let ckpt = Checkpoint {
        config_text: config_text.to_string(),
        master_seed: seed,
        rounds_completed: rounds_completed as u64,
        params: params.clone(),
    };
    ckpt.save(checkpoint_path)?;
    table.save(weights_path)?;
    Ok(())
}

/// Evaluation settings.
#[derive(Debug, Clone)]
pub struct EvalSpec {
    /// Cutoffs to report; deduplicated and sorted.
    pub ks: Vec<usize>,
    /// Which queries to evaluate; `None` = all splits.
    pub split: Option<Split>,
    /// Feature-extraction batch size.
    pub batch: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec { ks: vec![1, 5, 10], split: None, batch: 32 }
    }
}

/// A finished evaluation: the report object plus both renderings.
#[derive(Debug, Clone)]
pub struct EvalProducts {
    pub report: RetrievalReport,
    /// `format retrieval-report v1` structured text.
    pub machine_text: String,
    /// Human-readable table.
    pub table_text: String,
}

fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(RunConfig, MatchModel)> {
    let cfg = RunConfig::parse(&ckpt.config_text)?;
    let model = MatchModel::new(cfg.model.clone())?;
    Ok((cfg, model))
}

fn load_sized_image(manifest: &Manifest, file: &str) -> Result<Tensor<f32>> {
    let image = manifest.load_image(file)?;
    if image.shape() != [manifest.image_size, manifest.image_size] {
        return Err(Error::Data(format!(
            "image {file:?} is {:?}, expected {0}×{0} per the manifest header",
            manifest.image_size,
        )));
    }
    Ok(image)
}

fn build_target_index(
    manifest: &Manifest,
    model: &MatchModel,
    params: &ParameterSet<f32>,
    batch: usize,
) -> Result<TargetIndex> {
    let mut targets = Vec::with_capacity(manifest.targets.len());
    for t in &manifest.targets {
        targets.push((t.id.clone(), load_sized_image(manifest, &t.file)?));
    }
    TargetIndex::build(model, params, &targets, batch)
}

/// Ranks every query of the chosen split against all targets under the
/// checkpointed model and reports hit/recall rates overall, per noise
/// level, and per quality decile. Quality deciles need at least 10
/// evaluated queries; below that the quality stratification is omitted
/// (reported as absent, never as zero).
pub fn evaluate_run(manifest: &Manifest, checkpoint_path: &Path, spec: &EvalSpec) -> Result<EvalProducts> {
    if spec.ks.is_empty() {
        return Err(Error::Contract("at least one k is required".into()));
    }
    if let Some(&k) = spec.ks.iter().find(|&&k| k == 0 || k > manifest.targets.len()) {
        return Err(Error::Contract(format!(
            "k = {k} is outside 1..={} (the target count)",
            manifest.targets.len()
        )));
    }
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let (run_cfg, model) = model_from_checkpoint(&ckpt)?;
    if manifest.image_size != run_cfg.model.fen.input_size {
        return Err(Error::Config(format!(
            "manifest images are {} px but the checkpointed model expects {} px",
            manifest.image_size, run_cfg.model.fen.input_size
        )));
    }

    let truth = manifest.retrieval_truth(spec.split)?;
    let target_index = build_target_index(manifest, &model, &ckpt.params, spec.batch)?;

    let records = manifest.queries_in(spec.split);
    if records.is_empty() {
        return Err(Error::Data("no queries in the requested split".into()));
    }
    let mut queries = Vec::with_capacity(records.len());
    for q in &records {
        queries.push((q.id.clone(), load_sized_image(manifest, &q.file)?));
    }

    let mut results = rank_all(&model, &ckpt.params, &target_index, &queries, spec.batch)?;

    let quality_levels = if records.len() >= 10 {
        let scores: Vec<f64> = records.iter().map(|q| quality_score(&q.quality)).collect();
        Some(assign_levels(&scores)?)
    } else {
        None
    };
    for (i, result) in results.iter_mut().enumerate() {
        result.noise_level = Some(records[i].noise_level);
        result.quality_level = quality_levels.as_ref().map(|levels| levels[i]);
    }

    let report = stratified_report(results, &truth, &spec.ks)?;
    let machine_text = report.to_text(&truth)?;
    let table_text = report.format_table();
    Ok(EvalProducts { report, machine_text, table_text })
}

/// Writes both report renderings into `out_dir`; returns
/// `(machine_path, table_path)`.
pub fn write_reports(products: &EvalProducts, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out_dir)?;
    let machine = out_dir.join(REPORT_FILE);
    let table = out_dir.join(REPORT_TABLE_FILE);
    std::fs::write(&machine, &products.machine_text)?;
    std::fs::write(&table, &products.table_text)?;
    Ok((machine, table))
}

/// Result of a single-image query.
#[derive(Debug, Clone)]
pub struct QueryOutcome {
    /// Top-k targets, best first.
    pub ranked: Vec<(String, f64)>,
    /// Set when the requested k exceeded the target count (the request
    /// that was clipped).
    pub clipped: Option<usize>,
}

/// Ranks one image (any grayscale file of the model's input size) against
/// every target in the manifest. `k` beyond the target count is clipped.
pub fn query_run(
    manifest: &Manifest,
    checkpoint_path: &Path,
    image_path: &Path,
    k: usize,
    batch: usize,
) -> Result<QueryOutcome> {
    if k == 0 {
        return Err(Error::Contract("k must be positive".into()));
    }
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let (run_cfg, model) = model_from_checkpoint(&ckpt)?;
    let image = load_gray_png(image_path)?;
    let expected = run_cfg.model.fen.input_size;
    if image.shape() != [expected, expected] {
        return Err(Error::Data(format!(
            "query image is {:?}, but the checkpointed model expects {expected}×{expected}",
            image.shape()
        )));
    }
    if manifest.image_size != expected {
        return Err(Error::Config(format!(
            "manifest images are {} px but the checkpointed model expects {expected} px",
            manifest.image_size
        )));
    }
    let target_index = build_target_index(manifest, &model, &ckpt.params, batch)?;
    let ranking = rank_targets(&model, &ckpt.params, &target_index, &image, batch)?;
    let clipped = if k > ranking.len() { Some(k) } else { None };
    let take = k.min(ranking.len());
    Ok(QueryOutcome { ranked: ranking[..take].to_vec(), clipped })
}

/// A weight-table summary for `inspect-weights`.
#[derive(Debug, Clone)]
pub struct WeightListing {
    pub universe_size: u64,
    /// Weight of every key the table has never stored explicitly.
    pub default_weight: f64,
    /// Number of explicitly stored entries.
    pub stored: usize,
    /// Heaviest stored entries, descending weight, ties by ascending key.
    pub top: Vec<(SampleKey, f64)>,
}

/// Loads a table and lists its `top_n` heaviest stored entries. `top_n`
/// beyond the stored count returns the full listing.
pub fn inspect_weights(path: &Path, top_n: usize) -> Result<WeightListing> {
    let table = WeightTable::load(path)?;
    let mut rows: Vec<(SampleKey, f64)> = table.iter().map(|(key, w)| (key.clone(), w)).collect();
    rows.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    rows.truncate(top_n);
    Ok(WeightListing {
        universe_size: table.universe_size(),
        default_weight: table.default_weight(),
        stored: table.len(),
        top: rows,
    })
}
