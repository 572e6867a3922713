//! The matching model: a feature extraction network (FEN) and a similarity
//! discrimination network (SDN), trained with a squared hinge loss.
//!
//! The FEN turns one grayscale image into a feature vector in
//! `[-1, 1]^feature_dim` (stacked conv → batch-norm → leaky-ReLU → max-pool
//! blocks, then a fully connected layer with tanh). The SDN consumes the
//! concatenation of two FEN features and emits a scalar matching score;
//! scoring is symmetrized by averaging both concatenation orders, and the
//! training loss averages the per-order hinge terms the same way.
//!
//! Inputs are single-channel images with pixel values normalized to
//! `[0, 1]`; callers are responsible for the normalization (it is not
//! re-checked on the hot path).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::{seed_for, Stream};
use crate::tensor::{he_init, AdamConfig, Element, Graph, Mode, ParameterSet, Tensor, Var};

/// Ground-truth or predicted match label. Stored on disk as `{0, 1}` and
/// mapped onto the `±1` the hinge loss needs via [`Label::sign`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    NonMatch,
    Match,
}

impl Label {
    /// Decodes the stored `{0, 1}` representation.
    pub fn from_stored(v: u8) -> Result<Label> {
        match v {
            0 => Ok(Label::NonMatch),
            1 => Ok(Label::Match),
            other => Err(Error::Data(format!("label must be 0 or 1, got {other}"))),
        }
    }

    /// Encodes as the stored `{0, 1}` representation.
    pub fn stored(self) -> u8 {
        match self {
            Label::NonMatch => 0,
            Label::Match => 1,
        }
    }

    /// The `±1` value used by the hinge loss.
    pub fn sign(self) -> f64 {
        match self {
            Label::NonMatch => -1.0,
            Label::Match => 1.0,
        }
    }
}

/// Sign-based prediction. A score of exactly zero counts as a non-match.
pub fn predict_label(score: f64) -> Label {
    if score > 0.0 {
        Label::Match
    } else {
        Label::NonMatch
    }
}

/// Squared hinge loss: `(1 / (2 delta)) * max(0, 1 - label*score)^2`.
pub fn squared_hinge_loss(score: f64, label: Label, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    let margin = (1.0 - label.sign() * score).max(0.0);
    Ok(margin * margin / (2.0 * delta))
}

/// Derivative of [`squared_hinge_loss`] with respect to the score:
/// `-label * max(0, 1 - label*score) / delta`.
pub fn squared_hinge_grad(score: f64, label: Label, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    let margin = (1.0 - label.sign() * score).max(0.0);
    Ok(-label.sign() * margin / delta)
}

/// Plain hinge loss `max(0, 1 - label*score)`, kept as a diagnostic metric.
pub fn hinge_loss(score: f64, label: Label) -> f64 {
    (1.0 - label.sign() * score).max(0.0)
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("hinge delta must be positive, got {delta}")))
    }
}

/// Stacks single-channel `[s, s]` images into the `[n, 1, s, s]` batch
/// layout the networks consume.
pub fn stack_images(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("cannot stack an empty image list".into()))?;
    let side = match first.shape() {
        [h, w] if h == w => *h,
        other => {
            return Err(Error::Shape(format!(
                "expected square [s, s] images, got shape {other:?}"
            )))
        }
    };
    let mut data = Vec::with_capacity(images.len() * side * side);
    for img in images {
        crate::tensor::expect_same_shape("stack_images", img.shape(), first.shape())?;
        data.extend_from_slice(img.data());
    }
    Tensor::from_vec(&[images.len(), 1, side, side], data)
}

/// Feature extraction network shape.
#[derive(Debug, Clone)]
pub struct FenConfig {
    /// Input images are `input_size x input_size` single-channel.
    pub input_size: usize,
    /// Number of conv → BN → LReLU → pool blocks.
    pub conv_layers: usize,
    /// Kernel count of the first conv layer; doubles at each later layer.
    pub base_kernels: usize,
    /// Width of the fully connected output layer.
    pub feature_dim: usize,
    /// Negative-side slope of the leaky ReLU.
    pub leaky_slope: f64,
    /// EMA factor for batch-norm running statistics.
    pub bn_momentum: f64,
    /// Variance floor inside batch norm.
    pub bn_eps: f64,
}

impl FenConfig {
    /// Full-scale configuration: 256 px inputs, 7 conv layers, 1024-dim
    /// features.
    pub fn paper() -> Self {
        FenConfig {
            input_size: 256,
            conv_layers: 7,
            base_kernels: 16,
            feature_dim: 1024,
            leaky_slope: 0.01,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// Reduced configuration sized for workstation experiments and the test
    /// suite: 64 px inputs, 5 conv layers, 256-dim features.
    pub fn desk() -> Self {
        FenConfig {
            input_size: 64,
            conv_layers: 5,
            base_kernels: 16,
            feature_dim: 256,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_layers == 0 || self.base_kernels == 0 || self.feature_dim == 0 {
            return Err(Error::Config("FEN layer counts and widths must be positive".into()));
        }
        if self.input_size >> self.conv_layers < 2 {
            return Err(Error::Config(format!(
                "input size {} cannot be pooled {} times (spatial size would drop below 2)",
                self.input_size, self.conv_layers
            )));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return Err(Error::Config("batch-norm momentum/epsilon out of range".into()));
        }
        Ok(())
    }

    /// Kernel count of conv layer `layer` (0-based): `base * 2^layer`.
    pub fn kernels_at(&self, layer: usize) -> usize {
        self.base_kernels << layer
    }

    /// Spatial sizes after each pooled block, starting at the input size.
    pub fn spatial_trace(&self) -> Vec<usize> {
        let mut trace = vec![self.input_size];
        for _ in 0..self.conv_layers {
            trace.push(trace.last().unwrap() / 2);
        }
        trace
    }

    /// Flattened width entering the fully connected layer.
    pub fn flatten_dim(&self) -> usize {
        let side = self.input_size >> self.conv_layers;
        self.kernels_at(self.conv_layers - 1) * side * side
    }
}

/// Similarity discrimination network shape. The input width is always
/// `2 * feature_dim`; hidden layers use tanh except the last, which is
/// linear, and a scalar linear head produces the score.
#[derive(Debug, Clone)]
pub struct SdnConfig {
    pub feature_dim: usize,
    pub hidden_sizes: Vec<usize>,
}

impl SdnConfig {
    /// Hidden widths proportional to the paper's 1024/512/256 at a given
    /// feature dimension: `(fd, fd/2, fd/4)`.
    pub fn for_feature_dim(feature_dim: usize) -> Self {
        SdnConfig {
            feature_dim,
            hidden_sizes: vec![feature_dim, feature_dim / 2, feature_dim / 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.is_empty() || self.hidden_sizes.iter().any(|&h| h == 0) {
            return Err(Error::Config("SDN hidden sizes must be positive".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("SDN feature dimension must be positive".into()));
        }
        Ok(())
    }
}

/// Complete model configuration.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub fen: FenConfig,
    pub sdn: SdnConfig,
    /// Hinge margin divisor in Eq. squared-hinge.
    pub delta: f64,
    pub adam: AdamConfig,
}

impl ModelConfig {
    pub fn paper() -> Self {
        let fen = FenConfig::paper();
        let sdn = SdnConfig::for_feature_dim(fen.feature_dim);
        ModelConfig {
            fen,
            sdn,
            delta: 2.0,
            adam: AdamConfig::default(),
        }
    }

    pub fn desk() -> Self {
        let fen = FenConfig::desk();
        let sdn = SdnConfig::for_feature_dim(fen.feature_dim);
        ModelConfig {
            fen,
            sdn,
            delta: 2.0,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fen.validate()?;
        self.sdn.validate()?;
        if self.sdn.feature_dim != self.fen.feature_dim {
            return Err(Error::Config(format!(
                "SDN feature dim {} must match FEN feature dim {}",
                self.sdn.feature_dim, self.fen.feature_dim
            )));
        }
        check_delta(self.delta)
    }
}

/// Records which graph [`Var`] each named parameter was bound to during a
/// forward pass, so gradients can be collected per name afterwards.
#[derive(Default)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn new() -> Self {
        Binding::default()
    }

    /// Fetches (or creates) the graph node for parameter `name`. Parameters
    /// are bound as trainable leaves in training mode and as constants in
    /// eval mode.
    fn bind<T: Element>(
        &mut self,
        g: &mut Graph<T>,
        params: &ParameterSet<T>,
        name: &str,
    ) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let value = params.get(name)?.value.clone();
        let var = match g.mode() {
            Mode::Train => g.parameter(value),
            Mode::Eval => g.constant(value),
        };
        self.vars.insert(name.to_string(), var);
        Ok(var)
    }

    /// Collects gradients accumulated by `backward` for every bound
    /// parameter that received one.
    pub fn gradients<T: Element>(&self, g: &Graph<T>) -> BTreeMap<String, Vec<T>> {
        self.vars
            .iter()
            .filter_map(|(name, var)| g.grad(*var).map(|grad| (name.clone(), grad.to_vec())))
            .collect()
    }
}

/// The FEN-SDN pair plus its training hyperparameters.
#[derive(Debug, Clone)]
pub struct MatchModel {
    cfg: ModelConfig,
}

impl MatchModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(MatchModel { cfg })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// He-initialized parameters for this architecture. Weights draw from
    /// `N(0, 2/fan_in)`; biases start at zero, batch-norm scales at one.
    pub fn init_params<T: Element>(&self, master_seed: u64) -> Result<ParameterSet<T>> {
        let mut rng = seed_for(master_seed, Stream::ParamInit, 0);
        let mut ps = ParameterSet::new();
        let fen = &self.cfg.fen;

        let mut in_ch = 1;
        for layer in 0..fen.conv_layers {
            let out_ch = fen.kernels_at(layer);
            let fan_in = in_ch * 9;
            ps.insert(
                &format!("fen.conv{layer}.w"),
                he_init(&[out_ch, in_ch, 3, 3], fan_in, &mut rng)?,
            )?;
            ps.insert(&format!("fen.conv{layer}.b"), Tensor::zeros(&[out_ch]))?;
            ps.insert(&format!("fen.bn{layer}.gamma"), Tensor::full(&[out_ch], T::ONE))?;
            ps.insert(&format!("fen.bn{layer}.beta"), Tensor::zeros(&[out_ch]))?;
            ps.insert_bn(&format!("fen.bn{layer}"), out_ch)?;
            in_ch = out_ch;
        }
        let flat = fen.flatten_dim();
        ps.insert("fen.fc.w", he_init(&[fen.feature_dim, flat], flat, &mut rng)?)?;
        ps.insert("fen.fc.b", Tensor::zeros(&[fen.feature_dim]))?;

        let mut width = 2 * self.cfg.sdn.feature_dim;
        for (i, &h) in self.cfg.sdn.hidden_sizes.iter().enumerate() {
            ps.insert(&format!("sdn.fc{i}.w"), he_init(&[h, width], width, &mut rng)?)?;
            ps.insert(&format!("sdn.fc{i}.b"), Tensor::zeros(&[h]))?;
            width = h;
        }
        ps.insert("sdn.head.w", he_init(&[1, width], width, &mut rng)?)?;
        ps.insert("sdn.head.b", Tensor::zeros(&[1]))?;
        Ok(ps)
    }

    /// FEN forward pass: `[n, 1, s, s]` images to `[n, feature_dim]`
    /// features in `[-1, 1]`.
    pub fn fen_forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        params: &ParameterSet<T>,
        binding: &mut Binding,
        images: Var,
    ) -> Result<Var> {
        let fen = &self.cfg.fen;
        let shape = g.value(images).shape().to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != fen.input_size || shape[3] != fen.input_size {
            return Err(Error::Shape(format!(
                "FEN expects [n, 1, {0}, {0}] inputs, got {shape:?}",
                fen.input_size
            )));
        }
        let mut x = images;
        for layer in 0..fen.conv_layers {
            let w = binding.bind(g, params, &format!("fen.conv{layer}.w"))?;
            let b = binding.bind(g, params, &format!("fen.conv{layer}.b"))?;
            let gamma = binding.bind(g, params, &format!("fen.bn{layer}.gamma"))?;
            let beta = binding.bind(g, params, &format!("fen.bn{layer}.beta"))?;
            let bn_name = format!("fen.bn{layer}");
            let state = params.bn_state(&bn_name)?;
            x = g.conv2d(x, w, b, 1, 1)?;
            x = g.batch_norm(
                x,
                gamma,
                beta,
                &bn_name,
                &state.mean,
                &state.var,
                fen.bn_momentum,
                fen.bn_eps,
            )?;
            x = g.leaky_relu(x, fen.leaky_slope)?;
            x = g.max_pool2(x)?;
        }
        let n = shape[0];
        let flat = g.reshape(x, &[n, fen.flatten_dim()])?;
        let w = binding.bind(g, params, "fen.fc.w")?;
        let b = binding.bind(g, params, "fen.fc.b")?;
        let fc = g.linear(flat, w, b)?;
        g.tanh(fc)
    }

    /// SDN forward pass: `[n, 2*feature_dim]` concatenated feature pairs to
    /// `[n, 1]` scores.
    pub fn sdn_forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        params: &ParameterSet<T>,
        binding: &mut Binding,
        pair_features: Var,
    ) -> Result<Var> {
        let sdn = &self.cfg.sdn;
        let shape = g.value(pair_features).shape().to_vec();
        if shape.len() != 2 || shape[1] != 2 * sdn.feature_dim {
            return Err(Error::Shape(format!(
                "SDN expects [n, {}] inputs, got {shape:?}",
                2 * sdn.feature_dim
            )));
        }
        let mut x = pair_features;
        let last = sdn.hidden_sizes.len() - 1;
        for i in 0..=last {
            let w = binding.bind(g, params, &format!("sdn.fc{i}.w"))?;
            let b = binding.bind(g, params, &format!("sdn.fc{i}.b"))?;
            x = g.linear(x, w, b)?;
            // Tanh on every layer except the last, which stays linear.
            if i != last {
                x = g.tanh(x)?;
            }
        }
        let w = binding.bind(g, params, "sdn.head.w")?;
        let b = binding.bind(g, params, "sdn.head.b")?;
        g.linear(x, w, b)
    }

    /// Scores for both concatenation orders of already-extracted features:
    /// `(sdn(fq ⊕ ft), sdn(ft ⊕ fq))`, each `[n, 1]`.
    fn both_order_scores<T: Element>(
        &self,
        g: &mut Graph<T>,
        params: &ParameterSet<T>,
        binding: &mut Binding,
        feats_q: Var,
        feats_t: Var,
    ) -> Result<(Var, Var)> {
        let qt = g.concat_cols(feats_q, feats_t)?;
        let tq = g.concat_cols(feats_t, feats_q)?;
        let s_qt = self.sdn_forward(g, params, binding, qt)?;
        let s_tq = self.sdn_forward(g, params, binding, tq)?;
        Ok((s_qt, s_tq))
    }

    /// Runs the FEN over a stacked `[2n, 1, s, s]` batch holding queries in
    /// rows `0..n` and targets in rows `n..2n`, then splits the features.
    fn split_features<T: Element>(
        &self,
        g: &mut Graph<T>,
        params: &ParameterSet<T>,
        binding: &mut Binding,
        stacked: Var,
        n: usize,
    ) -> Result<(Var, Var)> {
        let feats = self.fen_forward(g, params, binding, stacked)?;
        let fq = g.slice_rows(feats, 0, n)?;
        let ft = g.slice_rows(feats, n, n)?;
        Ok((fq, ft))
    }

    /// Eval-mode FEN features for a batch of images: `[n, feature_dim]`.
    pub fn features(&self, params: &ParameterSet<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new(Mode::Eval);
        let mut binding = Binding::new();
        let x = g.constant(images.clone());
        let f = self.fen_forward(&mut g, params, &mut binding, x)?;
        Ok(g.value(f).clone())
    }

    /// Eval-mode symmetric scores from precomputed features (one row per
    /// pair in each input).
    pub fn scores_from_features(
        &self,
        params: &ParameterSet<f32>,
        feats_q: &Tensor<f32>,
        feats_t: &Tensor<f32>,
    ) -> Result<Vec<f64>> {
        crate::tensor::expect_same_shape("scores_from_features", feats_q.shape(), feats_t.shape())?;
        let mut g = Graph::new(Mode::Eval);
        let mut binding = Binding::new();
        let fq = g.constant(feats_q.clone());
        let ft = g.constant(feats_t.clone());
        let (s_qt, s_tq) = self.both_order_scores(&mut g, params, &mut binding, fq, ft)?;
        let sum = g.add(s_qt, s_tq)?;
        let avg = g.affine(sum, 0.5, 0.0)?;
        Ok(g.value(avg).data().iter().map(|v| v.to_f64()).collect())
    }

    /// Eval-mode symmetric scores for image pairs. `queries` and `targets`
    /// are `[n, 1, s, s]` with matching `n`.
    pub fn batch_pair_scores(
        &self,
        params: &ParameterSet<f32>,
        queries: &Tensor<f32>,
        targets: &Tensor<f32>,
    ) -> Result<Vec<f64>> {
        let fq = self.features(params, queries)?;
        let ft = self.features(params, targets)?;
        self.scores_from_features(params, &fq, &ft)
    }

    /// Symmetric score for a single image pair.
    pub fn pair_score(
        &self,
        params: &ParameterSet<f32>,
        query: &Tensor<f32>,
        target: &Tensor<f32>,
    ) -> Result<f64> {
        let scores = self.batch_pair_scores(params, query, target)?;
        Ok(scores[0])
    }

    /// One training step on a minibatch of pairs.
    ///
    /// `queries` and `targets` are `[n, 1, s, s]`; both are pushed through
    /// the FEN as one stacked `[2n, ...]` batch (so batch norm sees the
    /// whole minibatch once), the squared hinge loss is evaluated on both
    /// concatenation orders and averaged, gradients flow back through
    /// everything, Adam updates the parameters, and staged batch-norm
    /// running statistics are committed. Returns the minibatch loss.
    pub fn train_step(
        &self,
        params: &mut ParameterSet<f32>,
        queries: &Tensor<f32>,
        targets: &Tensor<f32>,
        labels: &[Label],
    ) -> Result<f64> {
        let n = labels.len();
        let s = self.cfg.fen.input_size;
        if queries.shape() != [n, 1, s, s] || targets.shape() != [n, 1, s, s] {
            return Err(Error::Shape(format!(
                "train_step expects [{n}, 1, {s}, {s}] queries and targets, got {:?} and {:?}",
                queries.shape(),
                targets.shape()
            )));
        }
        let mut stacked = Vec::with_capacity(2 * queries.numel());
        stacked.extend_from_slice(queries.data());
        stacked.extend_from_slice(targets.data());
        let stacked = Tensor::from_vec(&[2 * n, 1, s, s], stacked)?;

        let mut g = Graph::new(Mode::Train);
        let mut binding = Binding::new();
        let input = g.constant(stacked);
        let (fq, ft) = self.split_features(&mut g, params, &mut binding, input, n)?;
        let (s_qt, s_tq) = self.both_order_scores(&mut g, params, &mut binding, fq, ft)?;

        let signs: Vec<f32> = labels.iter().map(|l| l.sign() as f32).collect();
        let y = g.constant(Tensor::from_vec(&[n, 1], signs)?);
        let l_qt = self.hinge_sq_node(&mut g, s_qt, y)?;
        let l_tq = self.hinge_sq_node(&mut g, s_tq, y)?;
        let sum = g.add(l_qt, l_tq)?;
        let sym = g.affine(sum, 0.5, 0.0)?;
        let loss = g.mean(sym)?;
        let loss_value = g.value(loss).item()?.to_f64();

        g.backward(loss)?;
        let grads = binding.gradients(&g);
        let updates = g.take_bn_updates();
        drop(g);
        params.adam_step(&grads, &self.cfg.adam)?;
        params.apply_bn_updates(updates)?;
        Ok(loss_value)
    }

    /// Element-wise squared hinge `max(0, 1 - y*s)^2 / (2 delta)` as graph
    /// nodes, for `[n, 1]` scores and labels.
    fn hinge_sq_node<T: Element>(&self, g: &mut Graph<T>, scores: Var, y: Var) -> Result<Var> {
        let ys = g.mul(scores, y)?;
        let margin = g.affine(ys, -1.0, 1.0)?;
        let clipped = g.relu(margin)?;
        let squared = g.mul(clipped, clipped)?;
        g.affine(squared, 1.0 / (2.0 * self.cfg.delta), 0.0)
    }

    /// Mean symmetric squared-hinge loss of a batch without updating
    /// anything (eval-mode diagnostics).
    pub fn batch_loss(
        &self,
        params: &ParameterSet<f32>,
        queries: &Tensor<f32>,
        targets: &Tensor<f32>,
        labels: &[Label],
    ) -> Result<f64> {
        let scores = self.batch_pair_scores(params, queries, targets)?;
        let mut total = 0.0;
        for (s, l) in scores.iter().zip(labels) {
            total += squared_hinge_loss(*s, *l, self.cfg.delta)?;
        }
        Ok(total / scores.len().max(1) as f64)
    }
}
