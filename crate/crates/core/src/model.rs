//! The informed multi-task network.
//!
//! ```text
//!                 ┌──────────────┐
//!         ┌──────►│ sarcasm head │──► sarcasm probs ─┐ (gated)
//!         │       └──────────────┘                   │
//!  embedding ────►│ dialect head │──► dialect probs ─┤ (gated)
//!         │       └──────────────┘                   ▼
//!         └─────────────────────────► [e ‖ exposed sarcasm ‖ exposed dialect]
//!                                                    │
//!                                             sentiment head ──► sentiment probs
//! ```
//!
//! Every head is `hidden_layers` tanh layers of `hidden_size` units followed
//! by a linear output layer. The vectors a head contributes to the sentiment
//! input ("exposed" vectors) depend on [`Exposure`]; the gradient gates on
//! the informed edges depend on [`BackpropMode`].

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::compute::{
    binary_cross_entropy, cross_entropy, softmax, softmax_backward, softmax_cross_entropy_grad,
    tanh_backward, tanh_forward, ComputeError, GateMode, GradientGate, LinearLayer, ParamBlock,
};
use crate::dataset::{Label, LabeledTweet};

pub const SENTIMENT_CLASSES: usize = 3;
pub const SARCASM_CLASSES: usize = 2;
pub const DIALECT_CLASSES: usize = 5;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SMC1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exposure {
    Output,
    Hidden,
    HiddenPlusOutput,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackpropMode {
    FullLimit,
    PartialLimit,
    Unlimited,
}

/// Which auxiliary heads feed the sentiment head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Informed {
    pub sarcasm: bool,
    pub dialect: bool,
}

impl Informed {
    pub const NONE: Informed = Informed {
        sarcasm: false,
        dialect: false,
    };
    pub const SARCASM: Informed = Informed {
        sarcasm: true,
        dialect: false,
    };
    pub const DIALECT: Informed = Informed {
        sarcasm: false,
        dialect: true,
    };
    pub const BOTH: Informed = Informed {
        sarcasm: true,
        dialect: true,
    };

    pub fn is_empty(self) -> bool {
        !self.sarcasm && !self.dialect
    }
}

macro_rules! keyword_enum {
    ($t:ty { $($variant:path => $kw:literal $(| $alias:literal)*),* $(,)? }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match *self { $($variant => $kw),* })
            }
        }
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($kw $(| $alias)* => Ok($variant),)*
                    other => Err(format!("unrecognized {} `{other}`", stringify!($t))),
                }
            }
        }
    };
}

keyword_enum!(Exposure {
    Exposure::Output => "output",
    Exposure::Hidden => "hidden",
    Exposure::HiddenPlusOutput => "hidden-plus-output" | "hidden+output",
});

keyword_enum!(BackpropMode {
    BackpropMode::FullLimit => "full" | "full-limit",
    BackpropMode::PartialLimit => "partial" | "partial-limit",
    BackpropMode::Unlimited => "unlimited",
});

keyword_enum!(Informed {
    Informed::NONE => "none",
    Informed::SARCASM => "sarcasm",
    Informed::DIALECT => "dialect",
    Informed::BOTH => "both",
});

/// The full design-setup tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub hidden_layers: usize,
    pub hidden_size: usize,
    pub exposure: Exposure,
    pub informed: Informed,
    pub softmax_outputs: bool,
    pub backprop: BackpropMode,
    /// `false` only for the sentiment-only baselines.
    pub auxiliary_heads: bool,
}

impl Default for ModelConfig {
    /// The final configuration: no hidden layers, informed of both tasks,
    /// softmax on the exposed outputs, sentiment loss stopped at the informed edges.
    fn default() -> Self {
        ModelConfig {
            dim: 768,
            hidden_layers: 0,
            hidden_size: 64,
            exposure: Exposure::Output,
            informed: Informed::BOTH,
            softmax_outputs: true,
            backprop: BackpropMode::FullLimit,
            auxiliary_heads: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.dim == 0 {
            return fail("dim must be positive".into());
        }
        if self.hidden_layers > 2 {
            return fail(format!(
                "hidden_layers = {} (allowed: 0, 1, 2)",
                self.hidden_layers
            ));
        }
        if self.hidden_layers > 0 && self.hidden_size == 0 {
            return fail("hidden_size must be positive when hidden_layers > 0".into());
        }
        if self.backprop == BackpropMode::PartialLimit && self.hidden_layers == 0 {
            return fail("backprop = partial-limit requires hidden_layers >= 1 (got 0)".into());
        }
        if self.exposure != Exposure::Output && self.hidden_layers == 0 {
            return fail(format!(
                "exposure = {} requires hidden_layers >= 1 (got 0)",
                self.exposure
            ));
        }
        if !self.auxiliary_heads && !self.informed.is_empty() {
            return fail(format!(
                "informed = {} requires auxiliary heads, which baselines lack",
                self.informed
            ));
        }
        Ok(())
    }

    /// Length of the vector a head with `classes` outputs contributes.
    pub fn exposed_len(&self, classes: usize) -> usize {
        match self.exposure {
            Exposure::Output => classes,
            Exposure::Hidden => self.hidden_size,
            Exposure::HiddenPlusOutput => self.hidden_size + classes,
        }
    }

    pub fn sentiment_input_len(&self) -> usize {
        let mut len = self.dim;
        if self.informed.sarcasm {
            len += self.exposed_len(SARCASM_CLASSES);
        }
        if self.informed.dialect {
            len += self.exposed_len(DIALECT_CLASSES);
        }
        len
    }

    /// Gate on the part of an informed edge that leaves through a head's output layer.
    pub fn output_edge_gate(&self) -> GradientGate {
        match self.backprop {
            BackpropMode::FullLimit => GradientGate::STOP,
            BackpropMode::PartialLimit => GradientGate::STOP_PARAMS_ONLY,
            BackpropMode::Unlimited => GradientGate::PASS,
        }
    }

    /// Gate on the part of an informed edge that leaves from a head's last hidden layer.
    pub fn hidden_edge_gate(&self) -> GradientGate {
        match self.backprop {
            BackpropMode::FullLimit => GradientGate::STOP,
            BackpropMode::PartialLimit | BackpropMode::Unlimited => GradientGate::PASS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Sentiment,
    Sarcasm,
    Dialect,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Sentiment, Task::Sarcasm, Task::Dialect];

    pub fn name(self) -> &'static str {
        match self {
            Task::Sentiment => "sentiment",
            Task::Sarcasm => "sarcasm",
            Task::Dialect => "dialect",
        }
    }
}

/// A subset of the three tasks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct TaskSet(u8);

impl TaskSet {
    pub const EMPTY: TaskSet = TaskSet(0);
    pub const ALL: TaskSet = TaskSet(0b111);
    pub const AUXILIARY: TaskSet = TaskSet(0b110);
    pub const SENTIMENT: TaskSet = TaskSet(0b001);

    pub fn of(tasks: &[Task]) -> TaskSet {
        tasks.iter().fold(TaskSet::EMPTY, |s, &t| s.with(t))
    }

    fn bit(task: Task) -> u8 {
        1 << (task as u8)
    }

    pub fn with(self, task: Task) -> TaskSet {
        TaskSet(self.0 | Self::bit(task))
    }

    pub fn contains(self, task: Task) -> bool {
        self.0 & Self::bit(task) != 0
    }

    pub fn intersect(self, other: TaskSet) -> TaskSet {
        TaskSet(self.0 & other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn tasks(self) -> impl Iterator<Item = Task> {
        Task::ALL.into_iter().filter(move |t| self.contains(*t))
    }
}

impl fmt::Display for TaskSet {
    /// `+`-joined task names, e.g. `sentiment+sarcasm+dialect`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.tasks().map(Task::name).collect();
        f.write_str(&names.join("+"))
    }
}

/// Per-task loss weights (default 1/1/1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub sentiment: f64,
    pub sarcasm: f64,
    pub dialect: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            sentiment: 1.0,
            sarcasm: 1.0,
            dialect: 1.0,
        }
    }
}

impl LossWeights {
    pub fn get(&self, task: Task) -> f64 {
        match task {
            Task::Sentiment => self.sentiment,
            Task::Sarcasm => self.sarcasm,
            Task::Dialect => self.dialect,
        }
    }
}

/// A stack of tanh hidden layers followed by a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub hidden: Vec<LinearLayer>,
    pub output: LinearLayer,
}

/// Intermediate values of one head evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTrace {
    /// `inputs[k]` is the input of layer k (hidden layers first, then the output layer).
    pub inputs: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl HeadTrace {
    fn last_hidden(&self) -> Option<&[f64]> {
        if self.inputs.len() > 1 {
            self.inputs.last().map(Vec::as_slice)
        } else {
            None
        }
    }
}

impl Head {
    fn build(
        in_dim: usize,
        hidden_layers: usize,
        hidden_size: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Head {
        let mut hidden = Vec::with_capacity(hidden_layers);
        let mut width = in_dim;
        for _ in 0..hidden_layers {
            hidden.push(LinearLayer::init_uniform(width, hidden_size, rng));
            width = hidden_size;
        }
        Head {
            hidden,
            output: LinearLayer::init_uniform(width, classes, rng),
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &LinearLayer> {
        self.hidden.iter().chain(std::iter::once(&self.output))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut LinearLayer> {
        self.hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.output))
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(LinearLayer::param_count).sum()
    }

    fn forward(&self, x: &[f64]) -> Result<HeadTrace, ComputeError> {
        let mut inputs = Vec::with_capacity(self.hidden.len() + 1);
        let mut current = x.to_vec();
        for layer in &self.hidden {
            let next = tanh_forward(&layer.forward(&current)?);
            inputs.push(std::mem::replace(&mut current, next));
        }
        let logits = self.output.forward(&current)?;
        inputs.push(current);
        let probs = softmax(&logits);
        Ok(HeadTrace {
            inputs,
            logits,
            probs,
        })
    }

    /// Backward through the hidden stack given the gradient at the last
    /// hidden activation (or at the head input when there are no hidden
    /// layers). Returns the gradient at the head input.
    fn backward_hidden(&mut self, trace: &HeadTrace, mut grad: Vec<f64>) -> Vec<f64> {
        for k in (0..self.hidden.len()).rev() {
            let activation = &trace.inputs[k + 1];
            let pre_grad = tanh_backward(activation, &grad);
            grad = self.hidden[k].backward(&trace.inputs[k], &pre_grad);
        }
        grad
    }

    fn zero_grad(&mut self) {
        for layer in self.layers_mut() {
            layer.zero_grad();
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub sentiment_logits: Vec<f64>,
    pub sentiment_probs: Vec<f64>,
    pub sarcasm_probs: Option<Vec<f64>>,
    pub dialect_probs: Option<Vec<f64>>,
    /// Vectors actually fed to the sentiment head.
    pub exposed_sarcasm: Option<Vec<f64>>,
    pub exposed_dialect: Option<Vec<f64>>,
}

/// Everything `backward` needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub output: ForwardOutput,
    sarcasm: Option<HeadTrace>,
    dialect: Option<HeadTrace>,
    sentiment: HeadTrace,
}

/// Per-task losses of one example; `None` for inactive tasks.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TaskLosses {
    pub sentiment: Option<f64>,
    pub sarcasm: Option<f64>,
    pub dialect: Option<f64>,
}

impl TaskLosses {
    pub fn get(&self, task: Task) -> Option<f64> {
        match task {
            Task::Sentiment => self.sentiment,
            Task::Sarcasm => self.sarcasm,
            Task::Dialect => self.dialect,
        }
    }

    pub fn total(&self) -> f64 {
        self.weighted_total(&LossWeights::default())
    }

    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        Task::ALL
            .iter()
            .filter_map(|&t| self.get(t).map(|l| w.get(t) * l))
            .sum()
    }
}

/// Per-task losses over the active subset (tasks whose head is missing are skipped).
pub fn task_losses(outputs: &ForwardOutput, labels: &LabeledTweet, active: TaskSet) -> TaskLosses {
    let mut losses = TaskLosses::default();
    if active.contains(Task::Sentiment) {
        losses.sentiment = Some(
            cross_entropy(&outputs.sentiment_probs, labels.sentiment.index())
                .expect("sentiment head has three classes"),
        );
    }
    if active.contains(Task::Sarcasm) {
        if let Some(p) = &outputs.sarcasm_probs {
            losses.sarcasm = Some(binary_cross_entropy(p[0], labels.sarcasm.is_sarcastic()));
        }
    }
    if active.contains(Task::Dialect) {
        if let Some(p) = &outputs.dialect_probs {
            losses.dialect = Some(
                cross_entropy(p, labels.dialect.index()).expect("dialect head has five classes"),
            );
        }
    }
    losses
}

/// Unweighted sum of the active task losses.
pub fn combined_loss(outputs: &ForwardOutput, labels: &LabeledTweet, active: TaskSet) -> f64 {
    task_losses(outputs, labels, active).total()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaidsModel {
    config: ModelConfig,
    pub sarcasm: Option<Head>,
    pub dialect: Option<Head>,
    pub sentiment: Head,
}

/// Builds a model with seeded uniform fan-based initialization and zero biases.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<SaidsModel, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, size) = (config.hidden_layers, config.hidden_size);
    let (sarcasm, dialect) = if config.auxiliary_heads {
        (
            Some(Head::build(config.dim, h, size, SARCASM_CLASSES, &mut rng)),
            Some(Head::build(config.dim, h, size, DIALECT_CLASSES, &mut rng)),
        )
    } else {
        (None, None)
    };
    let sentiment = Head::build(
        config.sentiment_input_len(),
        h,
        size,
        SENTIMENT_CLASSES,
        &mut rng,
    );
    Ok(SaidsModel {
        config: config.clone(),
        sarcasm,
        dialect,
        sentiment,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    /// Output layer directly on the embedding.
    B1,
    /// Two hidden layers of `hidden_size`.
    B2,
    /// Two hidden layers sized to match a reference parameter count.
    B3,
}

/// Parameter count of a sentiment-only model with two hidden layers of width `h`.
pub fn two_hidden_param_count(dim: usize, h: usize) -> usize {
    (dim * h + h) + (h * h + h) + (h * SENTIMENT_CLASSES + SENTIMENT_CLASSES)
}

/// Hidden width whose two-hidden-layer parameter count is nearest to
/// `reference`, ties toward the smaller width.
pub fn match_hidden_size(dim: usize, reference: usize) -> Result<usize, ModelError> {
    if reference < two_hidden_param_count(dim, 1) {
        return Err(ModelError::Config(format!(
            "reference parameter count {reference} is below the smallest two-hidden-layer model ({})",
            two_hidden_param_count(dim, 1)
        )));
    }
    let mut best = (1, usize::MAX);
    let mut h = 1;
    loop {
        let count = two_hidden_param_count(dim, h);
        let diff = count.abs_diff(reference);
        if diff < best.1 {
            best = (h, diff);
        }
        if count >= reference {
            return Ok(best.0);
        }
        h += 1;
    }
}

/// Builds a sentiment-only baseline (no auxiliary heads).
pub fn build_baseline(
    kind: BaselineKind,
    dim: usize,
    hidden_size: usize,
    reference_params: usize,
    seed: u64,
) -> Result<SaidsModel, ModelError> {
    let (hidden_layers, hidden_size) = match kind {
        BaselineKind::B1 => (0, hidden_size.max(1)),
        BaselineKind::B2 => (2, hidden_size),
        BaselineKind::B3 => {
            if reference_params == 0 {
                return Err(ModelError::Config(
                    "B3 needs a positive reference parameter count".into(),
                ));
            }
            (2, match_hidden_size(dim, reference_params)?)
        }
    };
    let config = ModelConfig {
        dim,
        hidden_layers,
        hidden_size,
        exposure: Exposure::Output,
        informed: Informed::NONE,
        softmax_outputs: true,
        backprop: BackpropMode::FullLimit,
        auxiliary_heads: false,
    };
    build_model(&config, seed)
}

impl SaidsModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Tasks this model has a head for.
    pub fn tasks(&self) -> TaskSet {
        let mut set = TaskSet::SENTIMENT;
        if self.sarcasm.is_some() {
            set = set.with(Task::Sarcasm);
        }
        if self.dialect.is_some() {
            set = set.with(Task::Dialect);
        }
        set
    }

    pub fn param_count(&self) -> usize {
        self.heads().map(Head::param_count).sum()
    }

    fn heads(&self) -> impl Iterator<Item = &Head> {
        self.sarcasm
            .iter()
            .chain(self.dialect.iter())
            .chain(std::iter::once(&self.sentiment))
    }

    fn heads_mut(&mut self) -> impl Iterator<Item = &mut Head> {
        self.sarcasm
            .iter_mut()
            .chain(self.dialect.iter_mut())
            .chain(std::iter::once(&mut self.sentiment))
    }

    /// All layers in checkpoint order: sarcasm head, dialect head, sentiment head.
    pub fn layers(&self) -> impl Iterator<Item = &LinearLayer> {
        self.heads().flat_map(Head::layers)
    }

    fn exposed(&self, trace: &HeadTrace) -> Vec<f64> {
        let outputs = || {
            if self.config.softmax_outputs {
                trace.probs.clone()
            } else {
                trace.logits.clone()
            }
        };
        match self.config.exposure {
            Exposure::Output => outputs(),
            Exposure::Hidden => trace
                .last_hidden()
                .expect("validated: hidden layers exist")
                .to_vec(),
            Exposure::HiddenPlusOutput => {
                let mut v = trace
                    .last_hidden()
                    .expect("validated: hidden layers exist")
                    .to_vec();
                v.extend(outputs());
                v
            }
        }
    }

    pub fn forward(&self, embedding: &[f64]) -> Result<ForwardOutput, ModelError> {
        Ok(self.forward_trace(embedding)?.output)
    }

    pub fn forward_trace(&self, embedding: &[f64]) -> Result<ForwardTrace, ModelError> {
        if embedding.len() != self.config.dim {
            return Err(ComputeError::ShapeMismatch {
                expected: self.config.dim,
                found: embedding.len(),
            }
            .into());
        }
        let sarcasm = self
            .sarcasm
            .as_ref()
            .map(|h| h.forward(embedding))
            .transpose()?;
        let dialect = self
            .dialect
            .as_ref()
            .map(|h| h.forward(embedding))
            .transpose()?;

        let informed = self.config.informed;
        let exposed_sarcasm = sarcasm
            .as_ref()
            .filter(|_| informed.sarcasm)
            .map(|t| self.exposed(t));
        let exposed_dialect = dialect
            .as_ref()
            .filter(|_| informed.dialect)
            .map(|t| self.exposed(t));

        let mut input = embedding.to_vec();
        for exposed in [&exposed_sarcasm, &exposed_dialect].into_iter().flatten() {
            input.extend_from_slice(exposed);
        }
        let sentiment = self.sentiment.forward(&input)?;

        let output = ForwardOutput {
            sentiment_logits: sentiment.logits.clone(),
            sentiment_probs: sentiment.probs.clone(),
            sarcasm_probs: sarcasm.as_ref().map(|t| t.probs.clone()),
            dialect_probs: dialect.as_ref().map(|t| t.probs.clone()),
            exposed_sarcasm,
            exposed_dialect,
        };
        Ok(ForwardTrace {
            output,
            sarcasm,
            dialect,
            sentiment,
        })
    }

    /// Accumulates parameter gradients of the weighted active losses and
    /// returns the gradient with respect to the embedding. `scale`
    /// multiplies every contribution (e.g. `1 / batch_size`).
    pub fn backward(
        &mut self,
        trace: &ForwardTrace,
        labels: &LabeledTweet,
        active: TaskSet,
        weights: &LossWeights,
        scale: f64,
    ) -> Vec<f64> {
        let dim = self.config.dim;
        let mut grad_embedding = vec![0.0; dim];

        // Sentiment head and the split of its input gradient.
        let mut grad_exposed_sarcasm = None;
        let mut grad_exposed_dialect = None;
        if active.contains(Task::Sentiment) {
            let w = weights.sentiment * scale;
            let dz: Vec<f64> =
                softmax_cross_entropy_grad(&trace.sentiment.probs, labels.sentiment.index())
                    .into_iter()
                    .map(|g| g * w)
                    .collect();
            let t = &trace.sentiment;
            let last = t.inputs.len() - 1;
            let d_last = self.sentiment.output.backward(&t.inputs[last], &dz);
            let d_input = self.sentiment.backward_hidden(t, d_last);
            add_into(&mut grad_embedding, &d_input[..dim]);
            let mut offset = dim;
            if let Some(e) = &trace.output.exposed_sarcasm {
                grad_exposed_sarcasm = Some(d_input[offset..offset + e.len()].to_vec());
                offset += e.len();
            }
            if let Some(e) = &trace.output.exposed_dialect {
                grad_exposed_dialect = Some(d_input[offset..offset + e.len()].to_vec());
            }
        }

        let config = self.config.clone();
        if let (Some(head), Some(t)) = (self.sarcasm.as_mut(), trace.sarcasm.as_ref()) {
            let own = active.contains(Task::Sarcasm).then(|| {
                let w = weights.sarcasm * scale;
                // BCE on the sarcastic-class probability of a 2-way softmax
                // has the same logit gradient as 2-class cross-entropy.
                softmax_cross_entropy_grad(&t.probs, labels.sarcasm.index())
                    .into_iter()
                    .map(|g| g * w)
                    .collect()
            });
            let d = aux_backward(&config, head, t, own, grad_exposed_sarcasm);
            add_into(&mut grad_embedding, &d);
        }
        if let (Some(head), Some(t)) = (self.dialect.as_mut(), trace.dialect.as_ref()) {
            let own = active.contains(Task::Dialect).then(|| {
                let w = weights.dialect * scale;
                softmax_cross_entropy_grad(&t.probs, labels.dialect.index())
                    .into_iter()
                    .map(|g| g * w)
                    .collect()
            });
            let d = aux_backward(&config, head, t, own, grad_exposed_dialect);
            add_into(&mut grad_embedding, &d);
        }
        grad_embedding
    }

    pub fn zero_grad(&mut self) {
        for head in self.heads_mut() {
            head.zero_grad();
        }
    }

    /// Parameter blocks in checkpoint order, two per layer (weights, bias).
    pub fn param_blocks(&mut self) -> Vec<ParamBlock<'_>> {
        self.heads_mut()
            .flat_map(|h| h.layers_mut())
            .flat_map(|l| l.param_blocks())
            .collect()
    }

    /// For each block of [`SaidsModel::param_blocks`], whether some loss in
    /// `active` has a gradient path to it under the configured gates.
    pub fn reachable_blocks(&self, active: TaskSet) -> Vec<bool> {
        let cfg = &self.config;
        let sentiment = active.contains(Task::Sentiment);
        let mut reach = Vec::new();
        let mut aux = |head: &Head, own: bool, informed: bool| {
            let via_sentiment = sentiment && informed;
            let hidden_reached = own || (via_sentiment && cfg.backprop != BackpropMode::FullLimit);
            let output_reached = own
                || (via_sentiment
                    && cfg.backprop == BackpropMode::Unlimited
                    && cfg.exposure != Exposure::Hidden);
            for _ in &head.hidden {
                reach.extend([hidden_reached; 2]);
            }
            reach.extend([output_reached; 2]);
        };
        if let Some(h) = &self.sarcasm {
            aux(h, active.contains(Task::Sarcasm), cfg.informed.sarcasm);
        }
        if let Some(h) = &self.dialect {
            aux(h, active.contains(Task::Dialect), cfg.informed.dialect);
        }
        reach.extend(std::iter::repeat_n(
            sentiment,
            2 * (self.sentiment.hidden.len() + 1),
        ));
        reach
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let c = &self.config;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(c.dim as u32).to_le_bytes())?;
        w.write_all(&(c.hidden_layers as u32).to_le_bytes())?;
        w.write_all(&(c.hidden_size as u32).to_le_bytes())?;
        w.write_all(&[
            c.exposure as u8,
            u8::from(c.informed.sarcasm),
            u8::from(c.informed.dialect),
            u8::from(c.softmax_outputs),
            c.backprop as u8,
            u8::from(c.auxiliary_heads),
        ])?;
        let layers: Vec<&LinearLayer> = self.layers().collect();
        w.write_all(&(layers.len() as u32).to_le_bytes())?;
        for layer in layers {
            w.write_all(&(layer.out_dim() as u32).to_le_bytes())?;
            w.write_all(&(layer.in_dim() as u32).to_le_bytes())?;
            for v in layer.weights.iter().chain(&layer.bias) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<SaidsModel, ModelError> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let dim = read_u32(&mut r)? as usize;
        let hidden_layers = read_u32(&mut r)? as usize;
        let hidden_size = read_u32(&mut r)? as usize;
        let mut flags = [0u8; 6];
        read_exact(&mut r, &mut flags)?;
        let exposure = match flags[0] {
            0 => Exposure::Output,
            1 => Exposure::Hidden,
            2 => Exposure::HiddenPlusOutput,
            b => return Err(ModelError::Format(format!("bad exposure tag {b}"))),
        };
        let backprop = match flags[4] {
            0 => BackpropMode::FullLimit,
            1 => BackpropMode::PartialLimit,
            2 => BackpropMode::Unlimited,
            b => return Err(ModelError::Format(format!("bad backprop tag {b}"))),
        };
        let config = ModelConfig {
            dim,
            hidden_layers,
            hidden_size,
            exposure,
            informed: Informed {
                sarcasm: flags[1] != 0,
                dialect: flags[2] != 0,
            },
            softmax_outputs: flags[3] != 0,
            backprop,
            auxiliary_heads: flags[5] != 0,
        };
        let mut model = build_model(&config, 0)?;
        let count = read_u32(&mut r)? as usize;
        let expected = model.layers().count();
        if count != expected {
            return Err(ModelError::Format(format!(
                "checkpoint holds {count} layers, configuration implies {expected}"
            )));
        }
        for layer in model.heads_mut().flat_map(|h| h.layers_mut()) {
            let out = read_u32(&mut r)? as usize;
            let inp = read_u32(&mut r)? as usize;
            if (out, inp) != (layer.out_dim(), layer.in_dim()) {
                return Err(ModelError::Format(format!(
                    "layer shape {out}x{inp} does not match configuration {}x{}",
                    layer.out_dim(),
                    layer.in_dim()
                )));
            }
            for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                *v = f64::from_le_bytes(b);
            }
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(ModelError::Format("trailing bytes after last layer".into()));
        }
        Ok(model)
    }
}

/// Backward through an auxiliary head: its own loss gradient (if active)
/// plus whatever the sentiment head sends back across the informed edge.
fn aux_backward(
    config: &ModelConfig,
    head: &mut Head,
    trace: &HeadTrace,
    own: Option<Vec<f64>>,
    from_sentiment: Option<Vec<f64>>,
) -> Vec<f64> {
    let classes = trace.logits.len();
    let out_in = trace.inputs.last().expect("output layer input");
    let mut grad_last = vec![0.0; head.output.in_dim()];

    if let Some(g) = &own {
        add_into(&mut grad_last, &head.output.backward(out_in, g));
    }

    if let Some(g) = from_sentiment {
        let (hidden_part, output_part) = match config.exposure {
            Exposure::Output => (None, Some(g)),
            Exposure::Hidden => (Some(g), None),
            Exposure::HiddenPlusOutput => {
                let split = g.len() - classes;
                (Some(g[..split].to_vec()), Some(g[split..].to_vec()))
            }
        };
        if let Some(g) = output_part {
            let output_gate = config.output_edge_gate();
            if output_gate.mode != GateMode::Stop {
                let d_logits = if config.softmax_outputs {
                    softmax_backward(&trace.probs, &g)
                } else {
                    g
                };
                let d = output_gate.backward_through_layer(&mut head.output, out_in, &d_logits);
                add_into(&mut grad_last, &d);
            }
        }
        if let Some(g) = hidden_part {
            let d = config
                .hidden_edge_gate()
                .backward(&g)
                .expect("hidden edge gate is pass or stop");
            add_into(&mut grad_last, &d);
        }
    }
    head.backward_hidden(trace, grad_last)
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), ModelError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ModelError::Format("checkpoint truncated".into())
        } else {
            ModelError::Io(e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
