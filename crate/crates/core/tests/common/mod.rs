//! Shared fixtures and independent reference computations for the
//! integration tests and the acceptance runner.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use saids::dataset::{gen_synthetic, split_train_validation, Label};
use saids::embeddings::ToyEncoder;
use saids::model::{combined_loss, LossWeights, Task, TaskSet};
use saids::training::Schedule;
use saids::{
    build_model, evaluate, train, BackpropMode, Dataset, Dialect, Exposure, Informed, LabeledTweet,
    ModelConfig, SaidsModel, Sarcasm, Sentiment, SplitRole, TrainConfig,
};

pub fn tweet(id: usize, text: &str, s: Sentiment, c: Sarcasm, d: Dialect) -> LabeledTweet {
    LabeledTweet {
        id: id.to_string(),
        text: text.to_string(),
        sentiment: s,
        sarcasm: c,
        dialect: d,
    }
}

pub fn random_labels(rng: &mut impl Rng, id: usize, text: String) -> LabeledTweet {
    LabeledTweet {
        id: id.to_string(),
        text,
        sentiment: Sentiment::ALL[rng.random_range(0..3)],
        sarcasm: Sarcasm::ALL[rng.random_range(0..2)],
        dialect: Dialect::ALL[rng.random_range(0..5)],
    }
}

// ---------------------------------------------------------------------------
// Reference network, written independently of the library's forward pass.
//
// Gated edges are modelled as a surrogate loss: the part of the computation
// behind a stop-gradient reads a frozen copy of the parameters (and of the
// embedding), so its finite-difference gradient is exactly what the gates
// are meant to let through.

#[derive(Clone, Debug)]
pub struct RefLayer {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl RefLayer {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                let row = &self.w[r * self.cols..(r + 1) * self.cols];
                self.b[r] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }
}

/// Layers of one head, hidden layers first.
pub type RefHead = Vec<RefLayer>;

#[derive(Clone, Debug)]
pub struct RefNet {
    pub sarcasm: Option<RefHead>,
    pub dialect: Option<RefHead>,
    pub sentiment: RefHead,
}

fn copy_head(head: &saids::model::Head) -> RefHead {
    head.layers()
        .map(|l| RefLayer {
            rows: l.out_dim(),
            cols: l.in_dim(),
            w: l.weights.clone(),
            b: l.bias.clone(),
        })
        .collect()
}

impl RefNet {
    pub fn from_model(m: &SaidsModel) -> RefNet {
        RefNet {
            sarcasm: m.sarcasm.as_ref().map(copy_head),
            dialect: m.dialect.as_ref().map(copy_head),
            sentiment: copy_head(&m.sentiment),
        }
    }

    /// Mutable access to every parameter, in checkpoint order.
    pub fn params_mut(&mut self) -> Vec<&mut f64> {
        let mut out = Vec::new();
        for head in [
            self.sarcasm.as_mut(),
            self.dialect.as_mut(),
            Some(&mut self.sentiment),
        ]
        .into_iter()
        .flatten()
        {
            for layer in head.iter_mut() {
                out.extend(layer.w.iter_mut());
                out.extend(layer.b.iter_mut());
            }
        }
        out
    }
}

/// The library model's accumulated gradients, flattened in checkpoint order.
pub fn model_grads(m: &SaidsModel) -> Vec<f64> {
    m.layers()
        .flat_map(|l| l.weight_grad.iter().chain(l.bias_grad.iter()).copied())
        .collect()
}

fn stable_softmax(z: &[f64]) -> Vec<f64> {
    let top = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = z.iter().map(|v| (v - top).exp()).collect();
    let total: f64 = ex.iter().sum();
    ex.into_iter().map(|v| v / total).collect()
}

/// Runs the hidden stack, returning the last hidden activation (or the input
/// when there are no hidden layers).
fn run_hidden(head: &RefHead, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for layer in &head[..head.len() - 1] {
        h = layer.apply(&h).into_iter().map(f64::tanh).collect();
    }
    h
}

fn run_head(head: &RefHead, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let h = run_hidden(head, x);
    let z = head[head.len() - 1].apply(&h);
    (h, z)
}

fn exposure_of(cfg: &ModelConfig, hidden: &[f64], logits: &[f64]) -> Vec<f64> {
    let out = if cfg.softmax_outputs {
        stable_softmax(logits)
    } else {
        logits.to_vec()
    };
    match cfg.exposure {
        Exposure::Output => out,
        Exposure::Hidden => hidden.to_vec(),
        Exposure::HiddenPlusOutput => hidden.iter().cloned().chain(out).collect(),
    }
}

/// What the sentiment head sees from one auxiliary head.
fn informed_edge(
    cfg: &ModelConfig,
    live: &RefHead,
    frozen: &RefHead,
    e: &[f64],
    e_frozen: &[f64],
) -> Vec<f64> {
    match cfg.backprop {
        BackpropMode::Unlimited => {
            let (h, z) = run_head(live, e);
            exposure_of(cfg, &h, &z)
        }
        BackpropMode::FullLimit => {
            let (h, z) = run_head(frozen, e_frozen);
            exposure_of(cfg, &h, &z)
        }
        BackpropMode::PartialLimit => {
            let h = run_hidden(live, e);
            let z = frozen[frozen.len() - 1].apply(&h);
            exposure_of(cfg, &h, &z)
        }
    }
}

/// Surrogate of the combined loss whose plain gradient in (`live`, `e`)
/// equals the gated gradient of the real loss.
pub fn surrogate_loss(
    cfg: &ModelConfig,
    live: &RefNet,
    frozen: &RefNet,
    e: &[f64],
    e_frozen: &[f64],
    label: &LabeledTweet,
    active: TaskSet,
) -> f64 {
    let mut loss = 0.0;
    let mut sentiment_input = e.to_vec();
    if let (Some(l), Some(f)) = (&live.sarcasm, &frozen.sarcasm) {
        if active.contains(Task::Sarcasm) {
            let (_, z) = run_head(l, e);
            loss -= stable_softmax(&z)[label.sarcasm.index()].ln();
        }
        if cfg.informed.sarcasm {
            sentiment_input.extend(informed_edge(cfg, l, f, e, e_frozen));
        }
    }
    if let (Some(l), Some(f)) = (&live.dialect, &frozen.dialect) {
        if active.contains(Task::Dialect) {
            let (_, z) = run_head(l, e);
            loss -= stable_softmax(&z)[label.dialect.index()].ln();
        }
        if cfg.informed.dialect {
            sentiment_input.extend(informed_edge(cfg, l, f, e, e_frozen));
        }
    }
    if active.contains(Task::Sentiment) {
        let (_, z) = run_head(&live.sentiment, &sentiment_input);
        loss -= stable_softmax(&z)[label.sentiment.index()].ln();
    }
    loss
}

/// Forward-only reference of the sentiment distribution (no gating matters).
pub fn reference_sentiment_probs(cfg: &ModelConfig, net: &RefNet, e: &[f64]) -> Vec<f64> {
    let mut input = e.to_vec();
    for (head, on) in [
        (&net.sarcasm, cfg.informed.sarcasm),
        (&net.dialect, cfg.informed.dialect),
    ] {
        if let (Some(h), true) = (head, on) {
            let (hid, z) = run_head(h, e);
            input.extend(exposure_of(cfg, &hid, &z));
        }
    }
    stable_softmax(&run_head(&net.sentiment, &input).1)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

pub const FD_STEP: f64 = 1e-5;

/// Every legal (hidden, exposure, backprop, softmax, informed) combination
/// for a small model.
pub fn legal_configs(dim: usize, hidden_size: usize) -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for hidden_layers in 0..=2 {
        for exposure in [
            Exposure::Output,
            Exposure::Hidden,
            Exposure::HiddenPlusOutput,
        ] {
            for backprop in [
                BackpropMode::FullLimit,
                BackpropMode::PartialLimit,
                BackpropMode::Unlimited,
            ] {
                for softmax_outputs in [true, false] {
                    for informed in [
                        Informed::NONE,
                        Informed::SARCASM,
                        Informed::DIALECT,
                        Informed::BOTH,
                    ] {
                        let cfg = ModelConfig {
                            dim,
                            hidden_layers,
                            hidden_size,
                            exposure,
                            informed,
                            softmax_outputs,
                            backprop,
                            auxiliary_heads: true,
                        };
                        if cfg.validate().is_ok() {
                            out.push(cfg);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Jitters every parameter so biases are not all zero.
pub fn jitter(model: &mut SaidsModel, rng: &mut impl Rng, scale: f64) {
    for block in model.param_blocks() {
        for v in block.values.iter_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

/// Maximum relative error between analytic and central-difference
/// gradients of one configuration, over parameters and the embedding.
pub fn gradient_check(cfg: &ModelConfig, seed: u64, active: TaskSet) -> f64 {
    gradient_check_against(cfg, cfg, seed, active)
}

/// As [`gradient_check`], but the reference uses the gating of `oracle_cfg`.
pub fn gradient_check_against(
    cfg: &ModelConfig,
    oracle_cfg: &ModelConfig,
    seed: u64,
    active: TaskSet,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = build_model(cfg, seed).expect("legal config");
    jitter(&mut model, &mut rng, 0.3);
    let e: Vec<f64> = (0..cfg.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let label = random_labels(&mut rng, 0, String::new());

    model.zero_grad();
    let trace = model.forward_trace(&e).unwrap();
    let grad_e = model.backward(&trace, &label, active, &LossWeights::default(), 1.0);
    let analytic = model_grads(&model);

    let frozen = RefNet::from_model(&model);
    let mut worst = 0.0f64;
    for (i, &grad) in analytic.iter().enumerate() {
        let mut plus = frozen.clone();
        *plus.params_mut()[i] += FD_STEP;
        let mut minus = frozen.clone();
        *minus.params_mut()[i] -= FD_STEP;
        let lp = surrogate_loss(oracle_cfg, &plus, &frozen, &e, &e, &label, active);
        let lm = surrogate_loss(oracle_cfg, &minus, &frozen, &e, &e, &label, active);
        worst = worst.max(rel_err(grad, (lp - lm) / (2.0 * FD_STEP)));
    }
    for k in 0..cfg.dim {
        let mut ep = e.clone();
        ep[k] += FD_STEP;
        let mut em = e.clone();
        em[k] -= FD_STEP;
        let lp = surrogate_loss(oracle_cfg, &frozen, &frozen, &ep, &e, &label, active);
        let lm = surrogate_loss(oracle_cfg, &frozen, &frozen, &em, &e, &label, active);
        worst = worst.max(rel_err(grad_e[k], (lp - lm) / (2.0 * FD_STEP)));
    }
    worst
}

/// Runs [`gradient_check`] over every legal configuration and the given
/// active sets. Returns (checks run, worst relative error).
pub fn gradient_exactness(dim: usize, active_sets: &[TaskSet]) -> (usize, f64) {
    let mut checks = 0;
    let mut worst = 0.0f64;
    for (i, cfg) in legal_configs(dim, 3).iter().enumerate() {
        for (j, &active) in active_sets.iter().enumerate() {
            let err = gradient_check(cfg, (i * 7 + j) as u64, active);
            worst = worst.max(err);
            checks += 1;
        }
    }
    (checks, worst)
}

/// Trials of the stop-gradient guarantees under the sentiment loss alone.
/// Returns a description of the first violation.
pub fn stop_gradient_trials(trials: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let partial = trial % 2 == 1;
        let hidden_layers = if partial {
            rng.random_range(1..=2)
        } else {
            rng.random_range(0..=2)
        };
        let exposure = if hidden_layers == 0 {
            Exposure::Output
        } else {
            [
                Exposure::Output,
                Exposure::Hidden,
                Exposure::HiddenPlusOutput,
            ][rng.random_range(0..3)]
        };
        let cfg = ModelConfig {
            dim: rng.random_range(2..=8),
            hidden_layers,
            hidden_size: rng.random_range(2..=5),
            exposure,
            informed: Informed::BOTH,
            softmax_outputs: rng.random(),
            backprop: if partial {
                BackpropMode::PartialLimit
            } else {
                BackpropMode::FullLimit
            },
            auxiliary_heads: true,
        };
        let mut model = build_model(&cfg, rng.random()).unwrap();
        jitter(&mut model, &mut rng, 0.3);
        let e: Vec<f64> = (0..cfg.dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let label = random_labels(&mut rng, trial, String::new());
        model.zero_grad();
        let trace = model.forward_trace(&e).unwrap();
        model.backward(
            &trace,
            &label,
            TaskSet::SENTIMENT,
            &LossWeights::default(),
            1.0,
        );

        for (name, head) in [("sarcasm", &model.sarcasm), ("dialect", &model.dialect)] {
            let head = head.as_ref().unwrap();
            let output_zero = head
                .output
                .weight_grad
                .iter()
                .chain(&head.output.bias_grad)
                .all(|g| *g == 0.0);
            let hidden_zero = head
                .hidden
                .iter()
                .all(|l| l.weight_grad.iter().chain(&l.bias_grad).all(|g| *g == 0.0));
            if !output_zero {
                return Err(format!(
                    "trial {trial}: {name} output layer got a gradient under {cfg:?}"
                ));
            }
            if partial && hidden_zero {
                return Err(format!(
                    "trial {trial}: {name} hidden layers got no gradient under {cfg:?}"
                ));
            }
            if !partial && !hidden_zero {
                return Err(format!(
                    "trial {trial}: {name} hidden layers got a gradient under {cfg:?}"
                ));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Metrics by brute force over (gold, predicted) pairs.

pub fn brute_f1(pairs: &[(usize, usize)], class: usize) -> f64 {
    let tp = pairs
        .iter()
        .filter(|&&(g, p)| g == class && p == class)
        .count() as f64;
    let predicted = pairs.iter().filter(|&&(_, p)| p == class).count() as f64;
    let actual = pairs.iter().filter(|&&(g, _)| g == class).count() as f64;
    let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
    let recall = if actual > 0.0 { tp / actual } else { 0.0 };
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn brute_fpn(pairs: &[(usize, usize)]) -> f64 {
    (brute_f1(pairs, 0) + brute_f1(pairs, 2)) / 2.0
}

pub fn brute_fsar(pairs: &[(usize, usize)]) -> f64 {
    brute_f1(pairs, 0)
}

pub fn brute_wfs(pairs: &[(usize, usize)]) -> f64 {
    let mut acc = 0.0;
    for d in 0..5 {
        let support = pairs.iter().filter(|&&(g, _)| g == d).count() as f64;
        acc += support * brute_f1(pairs, d);
    }
    acc / pairs.len() as f64
}

fn random_pairs(rng: &mut impl Rng, classes: usize) -> Vec<(usize, usize)> {
    let n = rng.random_range(1..=60);
    // Skewed draws so degenerate matrices (empty rows/columns) are common.
    let skew = rng.random_range(1..=classes);
    (0..n)
        .map(|_| {
            let gold = rng.random_range(0..skew);
            let predicted = rng.random_range(0..classes);
            if rng.random_bool(0.3) {
                (gold, gold)
            } else {
                (gold, predicted)
            }
        })
        .collect()
}

/// Largest |library − brute force| over `datasets` random label sets.
pub fn metric_oracle(datasets: usize, seed: u64) -> f64 {
    use saids::metrics::{fpn, fsar, wfs, ConfusionMatrix};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..datasets {
        let s = random_pairs(&mut rng, 3);
        let c = random_pairs(&mut rng, 2);
        let d = random_pairs(&mut rng, 5);
        let cm_s = ConfusionMatrix::from_pairs(Sentiment::NAMES, s.iter().copied());
        let cm_c = ConfusionMatrix::from_pairs(Sarcasm::NAMES, c.iter().copied());
        let cm_d = ConfusionMatrix::from_pairs(Dialect::NAMES, d.iter().copied());
        worst = worst
            .max((fpn(&cm_s).unwrap() - brute_fpn(&s)).abs())
            .max((fsar(&cm_c).unwrap() - brute_fsar(&c)).abs())
            .max((wfs(&cm_d).unwrap() - brute_wfs(&d)).abs());
    }
    worst
}

// ---------------------------------------------------------------------------
// Label-statistics fixture with the published training-set counts.

/// Dialect-by-sentiment counts, rows MSA, EGY, LEV, NOR, Gulf; columns POS, NEU, NEG.
pub const FIXTURE_DIALECT_SENTIMENT: [[usize; 3]; 5] = [
    [1405, 4486, 2671],
    [506, 793, 1376],
    [142, 197, 285],
    [6, 12, 25],
    [121, 259, 264],
];

/// Sarcastic share of each dialect-by-sentiment cell. Row sums give the
/// per-dialect sarcastic counts; column sums give 58 / 171 / 1,939.
pub const FIXTURE_SARCASTIC: [[usize; 3]; 5] = [
    [25, 73, 830],
    [25, 73, 832],
    [4, 11, 123],
    [0, 2, 13],
    [4, 12, 141],
];

/// 12,548 rows whose label statistics match the published tables, in a
/// shuffled order, with the raw spellings the corpus uses.
pub fn stats_fixture_csv() -> String {
    let mut rows: Vec<(usize, usize, bool)> = Vec::new();
    for d in 0..5 {
        for s in 0..3 {
            let total = FIXTURE_DIALECT_SENTIMENT[d][s];
            let sarcastic = FIXTURE_SARCASTIC[d][s];
            rows.extend(std::iter::repeat_n((d, s, true), sarcastic));
            rows.extend(std::iter::repeat_n((d, s, false), total - sarcastic));
        }
    }
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(2021));
    let dialects = ["msa", "egypt", "levant", "magreb", "gulf"];
    let sentiments = ["POS", "NEU", "NEG"];
    let mut out = String::from("tweet,sarcasm,sentiment,dialect\n");
    for (i, (d, s, sarc)) in rows.iter().enumerate() {
        out.push_str(&format!(
            "tweet number {i},{},{},{}\n",
            if *sarc { "True" } else { "False" },
            sentiments[*s],
            dialects[*d]
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Training scenarios.

/// Validation FPN means for the four informed variants.
#[derive(Clone, Copy, Debug)]
pub struct PlantedResult {
    pub none: f64,
    pub sarcasm: f64,
    pub dialect: f64,
    pub both: f64,
}

impl PlantedResult {
    pub fn ordered(&self) -> bool {
        self.both >= self.sarcasm.max(self.dialect) && self.sarcasm.min(self.dialect) >= self.none
    }

    pub fn gap(&self) -> f64 {
        self.both - self.none
    }
}

/// Mean validation FPN of each informed variant over `seeds`. The
/// not-informed variant is the sentiment-only baseline. With `toy_vocab`
/// set, a trainable toy encoder reads the synthetic texts; otherwise the
/// generated embedding table is used frozen.
pub fn planted_dependency(
    seeds: std::ops::Range<u64>,
    coupling: f64,
    toy_vocab: Option<usize>,
    cfg: &TrainConfig,
) -> PlantedResult {
    let variants = [
        Informed::NONE,
        Informed::SARCASM,
        Informed::DIALECT,
        Informed::BOTH,
    ];
    let mut means = [0.0; 4];
    let count = (seeds.end - seeds.start) as f64;
    for seed in seeds {
        let (data, table) = gen_synthetic(2000, 32, seed, coupling).unwrap();
        let (train_set, val) = split_train_validation(&data, 0.1, seed).unwrap();
        for (k, informed) in variants.iter().enumerate() {
            let model_cfg = ModelConfig {
                dim: 32,
                informed: *informed,
                auxiliary_heads: !informed.is_empty(),
                ..ModelConfig::default()
            };
            let mut model = build_model(&model_cfg, seed).unwrap();
            let tc = TrainConfig {
                seed,
                ..cfg.clone()
            };
            let fpn = match toy_vocab {
                Some(vocab) => {
                    let mut enc = ToyEncoder::new(vocab, 32, seed, true).unwrap();
                    train(&mut model, &mut enc, &train_set, None, &tc).unwrap();
                    evaluate(&model, &enc, &val).unwrap().fpn
                }
                None => {
                    let mut frozen = table.clone();
                    train(&mut model, &mut frozen, &train_set, None, &tc).unwrap();
                    evaluate(&model, &frozen, &val).unwrap().fpn
                }
            };
            means[k] += fpn / count;
        }
    }
    PlantedResult {
        none: means[0],
        sarcasm: means[1],
        dialect: means[2],
        both: means[3],
    }
}

/// Training setup of the planted-dependency check.
pub fn planted_train_config() -> TrainConfig {
    TrainConfig {
        schedule: Schedule::AllTasks,
        epochs: 10,
        learning_rate: 1e-2,
        batch_size: 32,
        ..TrainConfig::default()
    }
}

pub const PLANTED_TOY_VOCAB: usize = 4096;

/// Small synthetic training set and its frozen table.
pub fn small_synthetic(n: usize, dim: usize, seed: u64) -> (Dataset, saids::EmbeddingTable) {
    gen_synthetic(n, dim, seed, 0.5).unwrap()
}

fn snapshot(model: &SaidsModel) -> Vec<u8> {
    let mut bytes = Vec::new();
    model.write_checkpoint(&mut bytes).unwrap();
    bytes
}

fn aux_params(model: &SaidsModel) -> Vec<u64> {
    [&model.sarcasm, &model.dialect]
        .into_iter()
        .flatten()
        .flat_map(|h| h.layers())
        .flat_map(|l| l.weights.iter().chain(&l.bias))
        .map(|v| v.to_bits())
        .collect()
}

fn sentiment_params(model: &SaidsModel) -> Vec<u64> {
    model
        .sentiment
        .layers()
        .flat_map(|l| l.weights.iter().chain(&l.bias))
        .map(|v| v.to_bits())
        .collect()
}

/// Expected active tasks per epoch, written out by hand for five epochs.
pub fn expected_plan(schedule: Schedule) -> [TaskSet; 5] {
    let (a, x, s) = (TaskSet::ALL, TaskSet::AUXILIARY, TaskSet::SENTIMENT);
    match schedule {
        Schedule::AllTasks => [a, a, a, a, a],
        Schedule::Seq1 => [x, a, a, a, a],
        Schedule::Seq2 => [x, a, x, a, x],
        Schedule::Seq3 => [x, x, s, s, s],
    }
}

/// Trains each schedule for five epochs and checks the trace and the
/// parameter snapshots epoch by epoch.
pub fn schedule_fidelity() -> Result<(), String> {
    let (data, table) = small_synthetic(120, 8, 5);
    let model_cfg = ModelConfig {
        dim: 8,
        hidden_layers: 1,
        hidden_size: 4,
        ..ModelConfig::default()
    };
    for schedule in [
        Schedule::AllTasks,
        Schedule::Seq1,
        Schedule::Seq2,
        Schedule::Seq3,
    ] {
        let plan = expected_plan(schedule);
        let base = TrainConfig {
            schedule,
            epochs: 5,
            learning_rate: 1e-2,
            batch_size: 16,
            seed: 9,
            ..TrainConfig::default()
        };
        let initial = build_model(&model_cfg, 1).unwrap();
        let mut snapshots = vec![initial.clone()];
        let mut full_trace = None;
        for epochs in 1..=5 {
            let mut model = initial.clone();
            let mut provider = table.clone();
            let trace = train(
                &mut model,
                &mut provider,
                &data,
                None,
                &TrainConfig {
                    epochs,
                    ..base.clone()
                },
            )
            .map_err(|e| e.to_string())?;
            snapshots.push(model);
            full_trace = Some(trace);
        }
        let trace = full_trace.unwrap();
        for (k, record) in trace.records.iter().enumerate() {
            let want = plan[k];
            if record.active != want {
                return Err(format!(
                    "{schedule}: epoch {} trained {} instead of {}",
                    k + 1,
                    record.active,
                    want
                ));
            }
            for task in Task::ALL {
                if record.loss(task).is_some() != want.contains(task) {
                    return Err(format!(
                        "{schedule}: epoch {} loss columns disagree with {want}",
                        k + 1
                    ));
                }
            }
            let (before, after) = (&snapshots[k], &snapshots[k + 1]);
            let aux_moved = aux_params(before) != aux_params(after);
            let sentiment_moved = sentiment_params(before) != sentiment_params(after);
            // Under full-limit, auxiliary parameters move exactly when an
            // auxiliary loss is active, and the sentiment head exactly when
            // the sentiment loss is.
            if aux_moved != (want.contains(Task::Sarcasm) || want.contains(Task::Dialect)) {
                return Err(format!(
                    "{schedule}: epoch {} auxiliary heads moved = {aux_moved}",
                    k + 1
                ));
            }
            if sentiment_moved != want.contains(Task::Sentiment) {
                return Err(format!(
                    "{schedule}: epoch {} sentiment head moved = {sentiment_moved}",
                    k + 1
                ));
            }
        }
        if schedule == Schedule::Seq3 && aux_params(&snapshots[2]) != aux_params(&snapshots[5]) {
            return Err("seq3: auxiliary parameters differ between epoch 2 and epoch 5".into());
        }
    }
    Ok(())
}

/// Two identical runs, once with the frozen table and once with the toy
/// encoder, must give identical checkpoints and traces.
pub fn determinism() -> Result<(), String> {
    let (data, table) = small_synthetic(150, 8, 3);
    let (train_set, val) = split_train_validation(&data, 0.1, 3).unwrap();
    let model_cfg = ModelConfig {
        dim: 8,
        hidden_layers: 2,
        hidden_size: 4,
        exposure: Exposure::HiddenPlusOutput,
        backprop: BackpropMode::PartialLimit,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        epochs: 3,
        learning_rate: 5e-3,
        batch_size: 8,
        seed: 17,
        ..TrainConfig::default()
    };
    let run = |toy: bool| -> (Vec<u8>, String, Vec<u8>) {
        let mut model = build_model(&model_cfg, 4).unwrap();
        if toy {
            let mut enc = ToyEncoder::new(256, 8, 4, true).unwrap();
            let trace = train(&mut model, &mut enc, &train_set, Some(&val), &tc).unwrap();
            let mut enc_bytes = Vec::new();
            enc.write_to(&mut enc_bytes).unwrap();
            (snapshot(&model), trace.to_csv_string(), enc_bytes)
        } else {
            let mut frozen = table.clone();
            let trace = train(&mut model, &mut frozen, &train_set, Some(&val), &tc).unwrap();
            (snapshot(&model), trace.to_csv_string(), Vec::new())
        }
    };
    for toy in [false, true] {
        let first = run(toy);
        let second = run(toy);
        if first != second {
            return Err(format!("runs differ (toy encoder: {toy})"));
        }
    }
    Ok(())
}

/// Twenty distinct texts with random labels.
pub fn memorization_set() -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let examples = (0..20)
        .map(|i| {
            let text = format!("item{i} word{} word{} marker{}", i * 3, i * 3 + 1, i % 4);
            random_labels(&mut rng, i, text)
        })
        .collect();
    Dataset::new(examples, SplitRole::Train)
}

pub fn mean_total_loss(model: &SaidsModel, enc: &ToyEncoder, data: &Dataset) -> f64 {
    use saids::EmbeddingProvider;
    let total: f64 = data
        .iter()
        .map(|ex| {
            let e = enc.embed(ex).unwrap();
            combined_loss(&model.forward(&e).unwrap(), ex, TaskSet::ALL)
        })
        .sum();
    total / data.len() as f64
}

/// (initial, final) mean total loss of the memorization run.
pub fn memorization() -> (f64, f64) {
    let data = memorization_set();
    let cfg = ModelConfig {
        dim: 16,
        ..ModelConfig::default()
    };
    let mut model = build_model(&cfg, 0).unwrap();
    let mut enc = ToyEncoder::new(1024, 16, 0, true).unwrap();
    let initial = mean_total_loss(&model, &enc, &data);
    let tc = TrainConfig {
        schedule: Schedule::AllTasks,
        epochs: 200,
        learning_rate: 1e-3,
        batch_size: 4,
        seed: 0,
        ..TrainConfig::default()
    };
    train(&mut model, &mut enc, &data, None, &tc).unwrap();
    (initial, mean_total_loss(&model, &enc, &data))
}

/// Differences between `stats` and the published training-set tables.
pub fn published_count_mismatches(stats: &saids::dataset::StatsReport) -> Vec<String> {
    let mut bad = Vec::new();
    let mut expect = |what: String, got: usize, want: usize| {
        if got != want {
            bad.push(format!("{what}: {got} != {want}"));
        }
    };
    expect("total".into(), stats.total, 12_548);
    for (s, n) in Sentiment::ALL.iter().zip([2_180, 5_747, 4_621]) {
        expect(format!("{s}"), stats.count_sentiment(*s), n);
    }
    for (c, n) in Sarcasm::ALL.iter().zip([2_168, 10_380]) {
        expect(format!("{c}"), stats.count_sarcasm(*c), n);
    }
    for (d, n) in Dialect::ALL.iter().zip([8_562, 2_675, 624, 43, 644]) {
        expect(format!("{d}"), stats.count_dialect(*d), n);
    }
    let by_sarcasm = [[58, 171, 1_939], [2_122, 5_576, 2_682]];
    for (c, row) in Sarcasm::ALL.iter().zip(by_sarcasm) {
        for (s, n) in Sentiment::ALL.iter().zip(row) {
            expect(format!("{c} x {s}"), stats.cross_sarcasm(*s, *c), n);
        }
    }
    for (d, row) in Dialect::ALL.iter().zip(FIXTURE_DIALECT_SENTIMENT) {
        for (s, n) in Sentiment::ALL.iter().zip(row) {
            expect(format!("{d} x {s}"), stats.cross_dialect(*s, *d), n);
        }
    }
    for (d, pct) in Dialect::ALL.iter().zip([10.83, 34.77, 22.12, 34.88, 24.38]) {
        match stats.sarcasm_rate(*d) {
            Some(rate) if (rate - pct).abs() <= 0.01 + 1e-9 => {}
            other => bad.push(format!("{d} sarcasm rate {other:?} vs {pct}")),
        }
    }
    bad
}
