//! Release acceptance suite.
//!
//! One test per acceptance criterion. Each prints a single
//! `PASS <criterion>: <evidence>` line on success (visible with
//! `cargo test --test acceptance -- --nocapture`) or a `FAIL` line and
//! panics. The criteria cover, in order:
//!
//! 1. gradients — finite-difference checks of every differentiable op
//! 2. boosting — the hand-computed round and geometric reweighting
//! 3. loader — class equalization, exact balance, weight bias
//! 4. symmetry — order-invariance of the pair scorer
//! 5. quality — the legibility product and decile binning
//! 6. retrieval — ranking against brute force and the analytic baseline
//! 7. end-to-end — a full desk-profile run reaching the accuracy bar
//! 8. determinism — byte-identical artifacts across repeated runs

use std::collections::BTreeMap;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use slidematch::boosting::{
    beta, normalize_weights, run_round, weighted_error, BatchSource, BoostConfig, RoundLearner,
    RoundSample, SampleKey, WeightTable,
};
use slidematch::dataset::Split;
use slidematch::eval::{hit_rate, rank_by_score, rank_targets, QueryResult, TargetIndex};
use slidematch::loader::{sample_candidates, DatasetIndex, Loader, LoaderConfig};
use slidematch::model::{
    squared_hinge_grad, squared_hinge_loss, stack_images, FenConfig, Label, MatchModel,
    ModelConfig, SdnConfig,
};
use slidematch::pipeline::{
    evaluate_run, generate_dataset, train_run, EvalSpec, GenerateSpec, Profile, RunConfig,
    CHECKPOINT_FILE, TRAIN_LOG_FILE, WEIGHTS_FILE,
};
use slidematch::quality::{assign_levels, quality_score, QualityInputs};
use slidematch::tensor::gradcheck::{compare, numerical_gradient};
use slidematch::tensor::{AdamConfig, Graph, Mode, Tensor, Var};
use slidematch::Result;

/// Prints the one-line verdict for a criterion and panics on failure.
fn criterion(name: &str, outcome: std::result::Result<String, String>) {
    match outcome {
        Ok(evidence) => println!("PASS {name}: {evidence}"),
        Err(evidence) => {
            println!("FAIL {name}: {evidence}");
            panic!("acceptance criterion {name:?} failed: {evidence}");
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// --------------------------------------------------------------------
// 1. Gradient suite
// --------------------------------------------------------------------

/// Uniform draw bounded away from zero, so ops with a kink at the origin
/// (relu, leaky_relu) are checked at differentiable points only.
fn off_kink(rng: &mut ChaCha8Rng) -> f64 {
    let magnitude = rng.gen_range(0.1..=1.0);
    if rng.gen_bool(0.5) {
        magnitude
    } else {
        -magnitude
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect()).unwrap()
}

fn off_kink_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| off_kink(rng)).collect()).unwrap()
}

/// A 4-d tensor whose every 2×2 pooling window has a clear maximum, so
/// the max-pool subgradient is unambiguous under a 1e-5 finite step.
fn pool_safe_tensor(shape: &[usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    'retry: loop {
        let t = random_tensor(shape, rng);
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        for img in 0..n * c {
            for wy in 0..h / 2 {
                for wx in 0..w / 2 {
                    let mut vals = [0.0f64; 4];
                    for (slot, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        vals[slot] = t.data()[img * h * w + (wy * 2 + dy) * w + (wx * 2 + dx)];
                    }
                    vals.sort_by(f64::total_cmp);
                    if vals[3] - vals[2] < 1e-3 {
                        continue 'retry;
                    }
                }
            }
        }
        return t;
    }
}

type BuildFn = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// Checks analytic vs. central-difference gradients of `build` with
/// respect to every input, on one set of inputs. The op output is
/// contracted against fixed random coefficients so element mix-ups
/// cannot cancel out.
fn check_instance(
    name: &str,
    build: &BuildFn,
    inputs: &[Tensor<f64>],
    atol: f64,
    rtol: f64,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<(), String> {
    let out_shape = {
        let mut g = Graph::new(Mode::Train);
        let vars: Vec<Var> = inputs.iter().map(|t| g.parameter(t.clone())).collect();
        let out = build(&mut g, &vars).map_err(|e| format!("{name}: build failed: {e}"))?;
        g.value(out).shape().to_vec()
    };
    let coeff = random_tensor(&out_shape, rng);

    let f = {
        let coeff = coeff.clone();
        move |xs: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::new(Mode::Train);
            let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
            let out = build(&mut g, &vars)?;
            let c = g.constant(coeff.clone());
            let prod = g.mul(out, c)?;
            let total = g.sum(prod)?;
            g.value(total).item()
        }
    };

    let mut g = Graph::new(Mode::Train);
    let vars: Vec<Var> = inputs.iter().map(|t| g.parameter(t.clone())).collect();
    let out = build(&mut g, &vars).map_err(|e| format!("{name}: {e}"))?;
    let c = g.constant(coeff.clone());
    let prod = g.mul(out, c).map_err(|e| format!("{name}: {e}"))?;
    let total = g.sum(prod).map_err(|e| format!("{name}: {e}"))?;
    g.backward(total).map_err(|e| format!("{name}: {e}"))?;

    for (i, var) in vars.iter().enumerate() {
        let analytic = g
            .grad(*var)
            .ok_or_else(|| format!("{name}: input {i} has no gradient"))?
            .to_vec();
        let numeric = numerical_gradient(&f, inputs, i, 1e-5)
            .map_err(|e| format!("{name}: numeric gradient failed: {e}"))?;
        compare(&analytic, &numeric, atol, rtol).map_err(|e| format!("{name}, input {i}: {e}"))?;
    }
    Ok(())
}

#[test]
fn criterion_1_gradient_suite() {
    let started = Instant::now();
    let instances = 20;
    let outcome = (|| -> std::result::Result<String, String> {
        let mut r = rng(0x9e3779b9);

        // (name, graph builder, random input maker, relative tolerance)
        #[allow(clippy::type_complexity)]
        let ops: Vec<(&str, Box<BuildFn>, Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>, f64)> = vec![
            (
                "add",
                Box::new(|g, v| g.add(v[0], v[1])),
                Box::new(|r| vec![random_tensor(&[2, 3, 2], r), random_tensor(&[2, 3, 2], r)]),
                1e-4,
            ),
            (
                "mul",
                Box::new(|g, v| g.mul(v[0], v[1])),
                Box::new(|r| vec![random_tensor(&[2, 3, 2], r), random_tensor(&[2, 3, 2], r)]),
                1e-4,
            ),
            (
                "affine",
                Box::new(|g, v| g.affine(v[0], 1.75, -0.4)),
                Box::new(|r| vec![random_tensor(&[7], r)]),
                1e-4,
            ),
            (
                "relu",
                Box::new(|g, v| g.relu(v[0])),
                Box::new(|r| vec![off_kink_tensor(&[2, 3, 4], r)]),
                1e-4,
            ),
            (
                "leaky_relu",
                Box::new(|g, v| g.leaky_relu(v[0], 0.01)),
                Box::new(|r| vec![off_kink_tensor(&[2, 3, 4], r)]),
                1e-4,
            ),
            (
                "tanh",
                Box::new(|g, v| g.tanh(v[0])),
                Box::new(|r| vec![random_tensor(&[3, 5], r)]),
                1e-4,
            ),
            (
                "sum",
                Box::new(|g, v| g.sum(v[0])),
                Box::new(|r| vec![random_tensor(&[2, 5], r)]),
                1e-4,
            ),
            (
                "mean",
                Box::new(|g, v| g.mean(v[0])),
                Box::new(|r| vec![random_tensor(&[2, 5], r)]),
                1e-4,
            ),
            (
                "reshape",
                Box::new(|g, v| g.reshape(v[0], &[3, 4])),
                Box::new(|r| vec![random_tensor(&[2, 6], r)]),
                1e-4,
            ),
            (
                "slice_rows",
                Box::new(|g, v| g.slice_rows(v[0], 1, 3)),
                Box::new(|r| vec![random_tensor(&[6, 3], r)]),
                1e-4,
            ),
            (
                "concat_cols",
                Box::new(|g, v| g.concat_cols(v[0], v[1])),
                Box::new(|r| vec![random_tensor(&[3, 2], r), random_tensor(&[3, 4], r)]),
                1e-4,
            ),
            (
                "linear",
                Box::new(|g, v| g.linear(v[0], v[1], v[2])),
                Box::new(|r| {
                    vec![
                        random_tensor(&[3, 4], r),
                        random_tensor(&[5, 4], r),
                        random_tensor(&[5], r),
                    ]
                }),
                1e-4,
            ),
            (
                "conv2d",
                Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1, 1)),
                Box::new(|r| {
                    vec![
                        random_tensor(&[2, 2, 6, 6], r),
                        random_tensor(&[3, 2, 3, 3], r),
                        random_tensor(&[3], r),
                    ]
                }),
                1e-4,
            ),
            (
                "conv2d_stride2",
                Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 2, 0)),
                Box::new(|r| {
                    vec![
                        random_tensor(&[1, 2, 7, 7], r),
                        random_tensor(&[2, 2, 3, 3], r),
                        random_tensor(&[2], r),
                    ]
                }),
                1e-4,
            ),
            (
                "max_pool2",
                Box::new(|g, v| g.max_pool2(v[0])),
                Box::new(|r| vec![pool_safe_tensor(&[2, 2, 4, 4], r)]),
                1e-4,
            ),
            (
                "batch_norm",
                Box::new(|g, v| {
                    g.batch_norm(v[0], v[1], v[2], "bn", &[0.0; 2], &[1.0; 2], 0.1, 1e-5)
                }),
                Box::new(|r| {
                    vec![
                        random_tensor(&[4, 2, 3, 3], r),
                        random_tensor(&[2], r),
                        random_tensor(&[2], r),
                    ]
                }),
                1e-3,
            ),
        ];

        for (name, build, make_inputs, rtol) in &ops {
            for i in 0..instances {
                let inputs = make_inputs(&mut r);
                check_instance(name, build.as_ref(), &inputs, 1e-7, *rtol, &mut r)
                    .map_err(|e| format!("instance {i}: {e}"))?;
            }
        }

        // Squared hinge loss: analytic dL/ds against a central difference,
        // away from the (second-order) kink at |y·s| = 1.
        for i in 0..instances {
            let label = if r.gen_bool(0.5) { Label::Match } else { Label::NonMatch };
            let delta = r.gen_range(0.5..=3.0);
            let score = loop {
                let s: f64 = r.gen_range(-3.0..=3.0);
                if (1.0 - label.sign() * s).abs() > 0.05 {
                    break s;
                }
            };
            let analytic =
                squared_hinge_grad(score, label, delta).map_err(|e| format!("hinge: {e}"))?;
            let eps = 1e-6;
            let up = squared_hinge_loss(score + eps, label, delta).unwrap();
            let down = squared_hinge_loss(score - eps, label, delta).unwrap();
            let numeric = (up - down) / (2.0 * eps);
            compare(&[analytic], &[numeric], 1e-7, 1e-4)
                .map_err(|e| format!("hinge instance {i} (score {score}, delta {delta}): {e}"))?;
        }

        let elapsed = started.elapsed();
        if elapsed.as_secs_f64() >= 60.0 {
            return Err(format!("suite took {elapsed:.1?}, budget is one minute"));
        }
        Ok(format!(
            "{} ops plus squared hinge × {instances} instances in {elapsed:.1?}",
            ops.len()
        ))
    })();
    criterion("gradient suite", outcome);
}

// --------------------------------------------------------------------
// 2. Boosting oracle
// --------------------------------------------------------------------

struct ScriptedSource {
    samples: Vec<(SampleKey, Label)>,
}

impl BatchSource<()> for ScriptedSource {
    fn fetch_round(&mut self, _table: &WeightTable, _round: usize) -> Result<Vec<RoundSample<()>>> {
        Ok(self
            .samples
            .iter()
            .map(|(key, label)| RoundSample { key: key.clone(), label: *label, payload: () })
            .collect())
    }
}

struct ScriptedLearner {
    predictions: Vec<Label>,
}

impl RoundLearner<()> for ScriptedLearner {
    fn train(&mut self, _: &[RoundSample<()>], epochs: usize, _: usize) -> Result<Vec<f64>> {
        Ok(vec![0.0; epochs])
    }
    fn predict(&self, _: &[RoundSample<()>]) -> Result<Vec<Label>> {
        Ok(self.predictions.clone())
    }
}

#[test]
fn criterion_2_boosting_oracle() {
    let outcome = (|| -> std::result::Result<String, String> {
        // Hand-computed round: weights 0.4/0.3/0.2/0.1, one error on the
        // 0.2 sample → ε = 0.2, β = 4, that weight ×4 → 0.8.
        let weights = [0.4, 0.3, 0.2, 0.1];
        let normalized = normalize_weights(&weights).map_err(|e| e.to_string())?;
        let labels = [Label::Match; 4];
        let predictions = [Label::Match, Label::Match, Label::NonMatch, Label::Match];
        let epsilon = weighted_error(&predictions, &labels, &normalized, 1e-6)
            .map_err(|e| e.to_string())?;
        if (epsilon - 0.2).abs() > 1e-12 {
            return Err(format!("hand-computed epsilon: expected 0.2, got {epsilon}"));
        }
        let b = beta(epsilon).map_err(|e| e.to_string())?;
        if (b - 4.0).abs() > 1e-12 {
            return Err(format!("hand-computed beta: expected 4, got {b}"));
        }

        // The same round through the driver mutates exactly one stored
        // weight, multiplying it by β.
        let keys: Vec<SampleKey> = (1..=4)
            .map(|i| SampleKey::new("q", &format!("t{i}")).unwrap())
            .collect();
        let mut table = WeightTable::new(100).map_err(|e| e.to_string())?;
        for (key, w) in keys.iter().zip(weights) {
            table.set(key.clone(), w).map_err(|e| e.to_string())?;
        }
        let mut source = ScriptedSource {
            samples: keys.iter().map(|k| (k.clone(), Label::Match)).collect(),
        };
        let mut learner = ScriptedLearner { predictions: predictions.to_vec() };
        let cfg = BoostConfig { round_set_size: 4, mini_batch: 2, ..BoostConfig::default() };
        let report = run_round(&mut source, &mut table, &mut learner, &cfg, 0)
            .map_err(|e| e.to_string())?;
        if (report.epsilon - 0.2).abs() > 1e-12 || (report.beta - 4.0).abs() > 1e-12 {
            return Err(format!(
                "driver round: epsilon {} beta {}, expected 0.2 and 4",
                report.epsilon, report.beta
            ));
        }
        if report.reweighted != 1 || (table.get(&keys[2]) - 0.8).abs() > 1e-12 {
            return Err(format!(
                "driver round: {} keys reweighted, third weight {}",
                report.reweighted,
                table.get(&keys[2])
            ));
        }
        for (key, original) in keys.iter().zip(weights) {
            if key != &keys[2] && table.get(key) != original {
                return Err(format!("correct sample {key:?} moved to {}", table.get(key)));
            }
        }

        // Geometric growth: a round set holding one key three times with
        // one wrong prediction keeps ε = 1/3 and β = 2 every round, so
        // after R rounds the stored weight is w₀ · β^R.
        let hot = SampleKey::new("q", "hot").unwrap();
        let mut table = WeightTable::new(16).map_err(|e| e.to_string())?;
        let w0 = table.get(&hot);
        let mut source = ScriptedSource { samples: vec![(hot.clone(), Label::Match); 3] };
        let mut learner = ScriptedLearner {
            predictions: vec![Label::NonMatch, Label::Match, Label::Match],
        };
        let cfg = BoostConfig { round_set_size: 3, mini_batch: 1, ..BoostConfig::default() };
        let rounds = 12;
        for round in 0..rounds {
            let report = run_round(&mut source, &mut table, &mut learner, &cfg, round)
                .map_err(|e| e.to_string())?;
            if (report.beta - 2.0).abs() > 1e-12 {
                return Err(format!("round {round}: expected β = 2 at ε = 1/3, got {}", report.beta));
            }
        }
        let expected = w0 * 2.0f64.powi(rounds as i32);
        let got = table.get(&hot);
        if (got - expected).abs() > 1e-12 * expected {
            return Err(format!(
                "after {rounds} rounds: weight {got}, closed form {expected}"
            ));
        }
        Ok(format!(
            "ε = 0.2 → β = 4 exact; weight ×β^{rounds} matches closed form ({got:e})"
        ))
    })();
    criterion("boosting oracle", outcome);
}

// --------------------------------------------------------------------
// 3. Loader balance
// --------------------------------------------------------------------

/// 100 queries × 100 targets, query i matching the 5 targets 5·(i mod 20)
/// … 5·(i mod 20)+4, so every query has exactly α = 5 matches.
fn loader_universe() -> DatasetIndex {
    let queries: Vec<String> = (0..100).map(|i| format!("q{i:03}")).collect();
    let targets: Vec<String> = (0..100).map(|i| format!("t{i:03}")).collect();
    let mut positives = Vec::new();
    for (i, q) in queries.iter().enumerate() {
        for j in 0..5 {
            positives.push((q.clone(), format!("t{:03}", 5 * (i % 20) + j)));
        }
    }
    DatasetIndex::new(queries, targets, &positives).unwrap()
}

#[test]
fn criterion_3_loader_balance() {
    let outcome = (|| -> std::result::Result<String, String> {
        let index = loader_universe();
        if index.alpha() != 5.0 || index.target_count() != 100 {
            return Err(format!(
                "fixture drift: alpha {} over {} targets",
                index.alpha(),
                index.target_count()
            ));
        }

        // Rejection sampling: among 10,000 candidate draws the kept set
        // is half positive within ±0.02.
        let mut r = rng(31);
        let mut kept_pos = 0u64;
        let mut kept_total = 0u64;
        let mut seen = 0u64;
        while seen < 10_000 {
            let draw = 100.min(10_000 - seen as usize);
            seen += draw as u64;
            for cand in sample_candidates(&index, draw, &mut r).map_err(|e| e.to_string())? {
                kept_total += 1;
                if cand.label == Label::Match {
                    kept_pos += 1;
                }
            }
        }
        let fraction = kept_pos as f64 / kept_total as f64;
        if (fraction - 0.5).abs() > 0.02 {
            return Err(format!(
                "kept-positive fraction {fraction:.4} over {seen} candidates ({kept_total} kept)"
            ));
        }

        // Every emitted batch is exactly class-balanced.
        let table = WeightTable::new(index.universe_size()).map_err(|e| e.to_string())?;
        let loader = Loader::new(std::sync::Arc::new(index), LoaderConfig::for_output_size(32, 77))
            .map_err(|e| e.to_string())?;
        for round in 0..20u64 {
            let batch = loader.fetch_round(&table, round).map_err(|e| e.to_string())?;
            if batch.positives() != 16 || batch.negatives() != 16 {
                return Err(format!(
                    "round {round}: {} positives vs {} negatives",
                    batch.positives(),
                    batch.negatives()
                ));
            }
        }

        // Weight bias: keys carrying heavy weights are included at ≥ 5×
        // the rate the same keys see under a uniform table.
        let heavy_keys: Vec<SampleKey> = (0..5)
            .map(|i| SampleKey::new(&format!("q{:03}", 17 + i), &format!("t{:03}", 40 + i)).unwrap())
            .collect();
        let index = loader_universe();
        let mut heavy_table = WeightTable::new(index.universe_size()).map_err(|e| e.to_string())?;
        for key in &heavy_keys {
            heavy_table.set(key.clone(), 1000.0).map_err(|e| e.to_string())?;
        }
        let uniform_table = WeightTable::new(index.universe_size()).map_err(|e| e.to_string())?;
        let loader = Loader::new(std::sync::Arc::new(index), LoaderConfig::for_output_size(32, 77))
            .map_err(|e| e.to_string())?;
        let count_inclusions = |table: &WeightTable| -> std::result::Result<u64, String> {
            let mut count = 0;
            for round in 0..100u64 {
                let batch = loader.fetch_round(table, round).map_err(|e| e.to_string())?;
                count += batch
                    .samples
                    .iter()
                    .filter(|s| heavy_keys.contains(&s.key))
                    .count() as u64;
            }
            Ok(count)
        };
        let heavy = count_inclusions(&heavy_table)?;
        let uniform = count_inclusions(&uniform_table)?;
        if heavy < 5 * uniform.max(1) {
            return Err(format!(
                "heavy keys included {heavy}× vs {uniform}× uniform — bias under 5×"
            ));
        }
        Ok(format!(
            "kept-positive fraction {fraction:.4}; 20/20 batches 16+16; heavy inclusion {heavy} vs uniform {uniform}"
        ))
    })();
    criterion("loader balance", outcome);
}

// --------------------------------------------------------------------
// 4. Symmetry
// --------------------------------------------------------------------

fn small_model() -> MatchModel {
    let fen = FenConfig {
        input_size: 32,
        conv_layers: 2,
        base_kernels: 2,
        feature_dim: 8,
        leaky_slope: 0.01,
        bn_momentum: 0.1,
        bn_eps: 1e-5,
    };
    MatchModel::new(ModelConfig {
        sdn: SdnConfig::for_feature_dim(8),
        fen,
        delta: 2.0,
        adam: AdamConfig::default(),
    })
    .unwrap()
}

#[test]
fn criterion_4_symmetry() {
    let outcome = (|| -> std::result::Result<String, String> {
        let model = small_model();
        let mut r = rng(4242);
        let mut worst = 0.0f64;
        for draw in 0..100 {
            // Fresh parameters every tenth draw, fresh input pair always.
            let params = model.init_params::<f32>(9000 + draw / 10).map_err(|e| e.to_string())?;
            let q = Tensor::from_vec(
                &[32, 32],
                (0..32 * 32).map(|_| r.gen_range(0.0f32..=1.0)).collect(),
            )
            .unwrap();
            let t = Tensor::from_vec(
                &[32, 32],
                (0..32 * 32).map(|_| r.gen_range(0.0f32..=1.0)).collect(),
            )
            .unwrap();
            let sq = stack_images(&[&q]).unwrap();
            let st = stack_images(&[&t]).unwrap();
            let qt = model.pair_score(&params, &sq, &st).map_err(|e| e.to_string())?;
            let tq = model.pair_score(&params, &st, &sq).map_err(|e| e.to_string())?;
            let gap = (qt - tq).abs();
            worst = worst.max(gap);
            if gap > 1e-6 {
                return Err(format!(
                    "draw {draw}: score({qt}) vs swapped({tq}) differ by {gap:e}"
                ));
            }
        }
        Ok(format!("100 draws order-invariant; worst gap {worst:e}"))
    })();
    criterion("symmetry", outcome);
}

// --------------------------------------------------------------------
// 5. Eq. 3 quality and binning
// --------------------------------------------------------------------

#[test]
fn criterion_5_quality_and_binning() {
    let outcome = (|| -> std::result::Result<String, String> {
        let mut r = rng(55);

        // quality_score equals the direct product, bit for bit.
        for _ in 0..1000 {
            let image: u64 = r.gen_range(1..=1 << 20);
            let slide = r.gen_range(0..=image);
            let text = r.gen_range(0..=slide);
            let blocked = r.gen_range(0..=image);
            let q = QualityInputs::new(text, slide, blocked, image).map_err(|e| e.to_string())?;
            let direct = (text as u128 * slide as u128 * (image - blocked) as u128) as f64;
            let got = quality_score(&q);
            if got != direct {
                return Err(format!(
                    "score(T={text}, S={slide}, B={blocked}, C={image}) = {got}, direct {direct}"
                ));
            }
        }

        // Decile populations differ by at most one, at many sizes.
        for n in [10usize, 11, 19, 100, 137, 1000] {
            let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1e6)).collect();
            let levels = assign_levels(&scores).map_err(|e| e.to_string())?;
            let mut counts = BTreeMap::new();
            for level in levels {
                *counts.entry(level).or_insert(0usize) += 1;
            }
            let max = counts.values().max().unwrap();
            let min = counts.values().min().unwrap();
            if counts.len() != 10 || max - min > 1 {
                return Err(format!("n = {n}: decile populations {counts:?}"));
            }
        }

        // Monotone in B: covering more pixels never raises the score.
        for _ in 0..50 {
            let image: u64 = r.gen_range(100..=1 << 16);
            let slide = r.gen_range(1..=image);
            let text = r.gen_range(1..=slide);
            let mut previous = f64::INFINITY;
            for step in 0..=10 {
                let blocked = image * step / 10;
                let q =
                    QualityInputs::new(text, slide, blocked, image).map_err(|e| e.to_string())?;
                let score = quality_score(&q);
                if score > previous {
                    return Err(format!(
                        "B = {blocked} raised the score to {score} (was {previous})"
                    ));
                }
                previous = score;
            }
        }
        Ok("1000 exact products; deciles within ±1 at 6 sizes; 50 B-sweeps monotone".into())
    })();
    criterion("quality and binning", outcome);
}

// --------------------------------------------------------------------
// 6. Retrieval oracle
// --------------------------------------------------------------------

#[test]
fn criterion_6_retrieval_oracle() {
    let outcome = (|| -> std::result::Result<String, String> {
        // rank_targets against brute-force per-pair rescoring, 50 targets.
        let model = small_model();
        let mut r = rng(66);
        for instance in 0..3 {
            let params = model.init_params::<f32>(600 + instance).map_err(|e| e.to_string())?;
            let targets: Vec<(String, Tensor<f32>)> = (0..50)
                .map(|i| {
                    let img = Tensor::from_vec(
                        &[32, 32],
                        (0..32 * 32).map(|_| r.gen_range(0.0f32..=1.0)).collect(),
                    )
                    .unwrap();
                    (format!("t{i:02}"), img)
                })
                .collect();
            let query = Tensor::from_vec(
                &[32, 32],
                (0..32 * 32).map(|_| r.gen_range(0.0f32..=1.0)).collect(),
            )
            .unwrap();

            let index =
                TargetIndex::build(&model, &params, &targets, 16).map_err(|e| e.to_string())?;
            let ranked =
                rank_targets(&model, &params, &index, &query, 16).map_err(|e| e.to_string())?;

            let sq = stack_images(&[&query]).unwrap();
            let mut brute = Vec::new();
            for (id, img) in &targets {
                let st = stack_images(&[img]).unwrap();
                brute.push((id.clone(), model.pair_score(&params, &sq, &st).map_err(|e| e.to_string())?));
            }
            let brute = rank_by_score(brute);

            let got: Vec<&String> = ranked.iter().map(|(id, _)| id).collect();
            let want: Vec<&String> = brute.iter().map(|(id, _)| id).collect();
            if got != want {
                return Err(format!("instance {instance}: order diverged\n{got:?}\nvs\n{want:?}"));
            }
            for ((_, a), (_, b)) in ranked.iter().zip(&brute) {
                if (a - b).abs() > 1e-6 {
                    return Err(format!("instance {instance}: scores {a} vs brute {b}"));
                }
            }
        }

        // Random scorer against the analytic hit@k = k/N baseline.
        let n_queries = 10_000usize;
        let n_targets = 50usize;
        let target_ids: Vec<String> = (0..n_targets).map(|i| format!("t{i:02}")).collect();
        let query_ids: Vec<String> = (0..n_queries).map(|i| format!("q{i:05}")).collect();
        let truth_pairs: Vec<(String, String)> = query_ids
            .iter()
            .enumerate()
            .map(|(i, q)| (q.clone(), format!("t{:02}", i % n_targets)))
            .collect();
        let truth = DatasetIndex::new(query_ids.clone(), target_ids.clone(), &truth_pairs)
            .map_err(|e| e.to_string())?;

        let mut r = rng(660);
        let results: Vec<QueryResult> = query_ids
            .iter()
            .map(|q| {
                let mut ids = target_ids.clone();
                ids.shuffle(&mut r);
                QueryResult {
                    query_id: q.clone(),
                    noise_level: None,
                    quality_level: None,
                    ranking: ids.into_iter().map(|id| (id, 0.0)).collect(),
                }
            })
            .collect();
        let mut checks = Vec::new();
        for k in [1usize, 5, 10, 25] {
            let rate = hit_rate(&results, &truth, k).map_err(|e| e.to_string())?;
            let analytic = k as f64 / n_targets as f64;
            if (rate - analytic).abs() > 0.02 {
                return Err(format!(
                    "random scorer hit@{k} = {rate:.4}, analytic {analytic:.4}"
                ));
            }
            checks.push(format!("hit@{k} {rate:.3}≈{analytic:.2}"));
        }
        Ok(format!(
            "3×50-target rankings equal brute force; random scorer {}",
            checks.join(", ")
        ))
    })();
    criterion("retrieval oracle", outcome);
}

// --------------------------------------------------------------------
// 7. End-to-end desk-scale run
// --------------------------------------------------------------------

#[test]
fn criterion_7_end_to_end_desk_run() {
    let outcome = (|| -> std::result::Result<String, String> {
        let started = Instant::now();
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let data = dir.path().join("data");
        let run = dir.path().join("run");

        // 20 slides, 5 training queries each cycling levels 1–10, plus
        // 10 held-out queries per slide so every level keeps 20 held-out
        // measurements.
        let mut spec = GenerateSpec::new(&data, 7);
        spec.heldout_per_slide = 10;
        let manifest = generate_dataset(&spec).map_err(|e| e.to_string())?;

        let alpha = manifest.training_index().map_err(|e| e.to_string())?.alpha();
        let cfg = RunConfig::for_profile(Profile::Desk, 7, alpha);
        if cfg.epochs_per_round != 3 || cfg.round_size != 256 {
            return Err(format!(
                "desk profile drifted: K = {}, m = {}",
                cfg.epochs_per_round, cfg.round_size
            ));
        }
        train_run(&manifest, &cfg, 10, &run).map_err(|e| e.to_string())?;

        let spec = EvalSpec { ks: vec![1, 5, 10], split: Some(Split::Heldout), batch: 32 };
        let products = evaluate_run(&manifest, &run.join(CHECKPOINT_FILE), &spec)
            .map_err(|e| e.to_string())?;
        let by_level = &products.report.by_noise_level;

        let mut rates = Vec::new();
        for level in 1..=10u8 {
            let stratum = by_level
                .get(&level)
                .ok_or_else(|| format!("no held-out stratum for level {level}"))?;
            rates.push(*stratum.hit.get(&1).unwrap());
        }
        for level in 0..3usize {
            if rates[level] < 0.9 {
                return Err(format!(
                    "top-1 at level {} is {:.3}, needs ≥ 0.9 (all: {rates:?})",
                    level + 1,
                    rates[level]
                ));
            }
        }
        let inversions = rates.windows(2).filter(|w| w[1] > w[0]).count();
        if inversions > 1 {
            return Err(format!(
                "top-1 by level has {inversions} inversions (allowed 1): {rates:?}"
            ));
        }
        let elapsed = started.elapsed();
        if elapsed.as_secs() > 900 {
            return Err(format!("run took {elapsed:.0?}, budget is 15 minutes"));
        }
        Ok(format!(
            "top-1 by level {:?}; {inversions} inversion(s); {elapsed:.0?} total",
            rates
        ))
    })();
    criterion("end-to-end desk run", outcome);
}

// --------------------------------------------------------------------
// 8. Determinism
// --------------------------------------------------------------------

#[test]
fn criterion_8_determinism() {
    let outcome = (|| -> std::result::Result<String, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut artifacts: Vec<Vec<(String, Vec<u8>)>> = Vec::new();

        for run_idx in 0..2 {
            let root = dir.path().join(format!("run{run_idx}"));
            let data = root.join("data");
            let train = root.join("train");
            let mut spec = GenerateSpec::new(&data, 21);
            spec.slides = 5;
            spec.queries_per_slide = 3;
            spec.heldout_per_slide = 2;
            spec.levels = vec![1, 4, 7, 10];
            let manifest = generate_dataset(&spec).map_err(|e| e.to_string())?;

            let alpha = manifest.training_index().map_err(|e| e.to_string())?.alpha();
            let mut cfg = RunConfig::for_profile(Profile::Desk, 21, alpha);
            cfg.round_size = 32;
            cfg.candidate_k = 16 * 32;
            cfg.mini_batch = 8;
            train_run(&manifest, &cfg, 2, &train).map_err(|e| e.to_string())?;

            let spec = EvalSpec { ks: vec![1, 3], split: None, batch: 16 };
            let products = evaluate_run(&manifest, &train.join(CHECKPOINT_FILE), &spec)
                .map_err(|e| e.to_string())?;

            let mut bytes = vec![
                ("manifest.txt".to_string(), std::fs::read(data.join("manifest.txt")).unwrap()),
                (
                    "images/s0000.png".to_string(),
                    std::fs::read(data.join("images/s0000.png")).unwrap(),
                ),
                (
                    "images/q0004_004.png".to_string(),
                    std::fs::read(data.join("images/q0004_004.png")).unwrap(),
                ),
                ("report.txt".to_string(), products.machine_text.into_bytes()),
                ("report_table.txt".to_string(), products.table_text.into_bytes()),
            ];
            for file in [CHECKPOINT_FILE, WEIGHTS_FILE, TRAIN_LOG_FILE] {
                bytes.push((file.to_string(), std::fs::read(train.join(file)).unwrap()));
            }
            artifacts.push(bytes);
        }

        let [first, second] = &artifacts[..] else {
            return Err("expected two runs".into());
        };
        for ((name_a, bytes_a), (name_b, bytes_b)) in first.iter().zip(second) {
            if name_a != name_b {
                return Err(format!("artifact lists diverged: {name_a} vs {name_b}"));
            }
            if bytes_a != bytes_b {
                return Err(format!("{name_a} differs between identically-seeded runs"));
            }
        }
        Ok(format!(
            "{} artifacts byte-identical across two full pipeline runs",
            first.len()
        ))
    })();
    criterion("determinism", outcome);
}
