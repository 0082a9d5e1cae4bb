//! Multi-task training: epoch schedules, Adam, and the training loop.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::compute::ParamBlock;
use crate::dataset::{Dataset, LabeledTweet};
use crate::embeddings::{EmbeddingError, EmbeddingProvider};
use crate::metrics::{evaluate, EvalReport, MetricsError};
use crate::model::{task_losses, LossWeights, ModelError, SaidsModel, Task, TaskSet};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(#[from] EmbeddingError),
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Every epoch trains all three tasks.
    AllTasks,
    /// Epoch 1 auxiliary tasks only, then all tasks.
    Seq1,
    /// Odd epochs auxiliary tasks only, even epochs all tasks.
    Seq2,
    /// Epochs 1-2 auxiliary tasks only, then sentiment only.
    Seq3,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::AllTasks => "all",
            Schedule::Seq1 => "seq1",
            Schedule::Seq2 => "seq2",
            Schedule::Seq3 => "seq3",
        })
    }
}

impl FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "all" | "all-tasks" => Ok(Schedule::AllTasks),
            "seq1" => Ok(Schedule::Seq1),
            "seq2" => Ok(Schedule::Seq2),
            "seq3" => Ok(Schedule::Seq3),
            other => Err(format!("unrecognized schedule `{other}`")),
        }
    }
}

/// Active losses per epoch (index 0 is epoch 1).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochPlan(pub Vec<TaskSet>);

impl EpochPlan {
    pub fn epochs(&self) -> usize {
        self.0.len()
    }

    /// Active set of 1-based epoch `epoch`.
    pub fn active(&self, epoch: usize) -> TaskSet {
        self.0[epoch - 1]
    }
}

pub fn plan_schedule(schedule: Schedule, epochs: usize) -> Result<EpochPlan, TrainError> {
    if epochs == 0 {
        return Err(TrainError::Config("epochs must be at least 1".into()));
    }
    let plan = (1..=epochs)
        .map(|epoch| match schedule {
            Schedule::AllTasks => TaskSet::ALL,
            Schedule::Seq1 if epoch == 1 => TaskSet::AUXILIARY,
            Schedule::Seq1 => TaskSet::ALL,
            Schedule::Seq2 if epoch % 2 == 1 => TaskSet::AUXILIARY,
            Schedule::Seq2 => TaskSet::ALL,
            Schedule::Seq3 if epoch <= 2 => TaskSet::AUXILIARY,
            Schedule::Seq3 => TaskSet::SENTIMENT,
        })
        .collect();
    Ok(EpochPlan(plan))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: Schedule::Seq1,
            epochs: 5,
            learning_rate: 1e-5,
            batch_size: 32,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning rate {} must be positive",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon < 0.0 {
            return fail("adam epsilon must be non-negative".into());
        }
        let w = &self.loss_weights;
        if [w.sentiment, w.sarcasm, w.dialect]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return fail("loss weights must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Adam moments of one parameter block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update; zeroes `grads` afterwards.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &mut [f64],
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if params.len() != grads.len() {
        return Err(TrainError::Config(format!(
            "parameter/gradient length mismatch: {} vs {}",
            params.len(),
            grads.len()
        )));
    }
    if state.m.is_empty() && state.t == 0 {
        *state = AdamState::new(params.len());
    }
    if state.m.len() != params.len() {
        return Err(TrainError::Config(format!(
            "optimizer state holds {} moments for {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    state.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads.iter_mut())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * *g;
        *v = b2 * *v + (1.0 - b2) * *g * *g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
        *g = 0.0;
    }
    Ok(())
}

/// Adam over an ordered list of parameter blocks.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    states: Vec<AdamState>,
}

impl Adam {
    /// Updates blocks whose `live` flag is set and zeroes every gradient.
    /// Blocks that are not live keep their values and moments untouched.
    pub fn step(
        &mut self,
        blocks: Vec<ParamBlock<'_>>,
        live: &[bool],
        cfg: &TrainConfig,
    ) -> Result<(), TrainError> {
        if self.states.len() < blocks.len() {
            self.states.resize_with(blocks.len(), AdamState::default);
        }
        for (i, block) in blocks.into_iter().enumerate() {
            if live.get(i).copied().unwrap_or(true) {
                adam_step(&mut self.states[i], block.values, block.grads, cfg)?;
            } else {
                block.grads.fill(0.0);
            }
        }
        Ok(())
    }
}

/// One row of the training trace.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Losses that contributed gradients this epoch.
    pub active: TaskSet,
    pub loss_sentiment: Option<f64>,
    pub loss_sarcasm: Option<f64>,
    pub loss_dialect: Option<f64>,
    pub fpn: Option<f64>,
    pub fsar: Option<f64>,
    pub wfs: Option<f64>,
}

impl EpochRecord {
    pub fn loss(&self, task: Task) -> Option<f64> {
        match task {
            Task::Sentiment => self.loss_sentiment,
            Task::Sarcasm => self.loss_sarcasm,
            Task::Dialect => self.loss_dialect,
        }
    }

    pub fn total_loss(&self) -> f64 {
        Task::ALL.iter().filter_map(|&t| self.loss(t)).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

pub const TRACE_HEADER: &str = "epoch,active,loss_sent,loss_sarc,loss_dial,fpn,fsar,wfs";

impl TrainTrace {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        writeln!(w, "{TRACE_HEADER}")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.epoch,
                r.active,
                cell(r.loss_sentiment),
                cell(r.loss_sarcasm),
                cell(r.loss_dialect),
                cell(r.fpn),
                cell(r.fsar),
                cell(r.wfs)
            )?;
        }
        w.flush()
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("trace is ASCII")
    }
}

/// Trains `model` (and the provider, when it is trainable) in place.
///
/// Each epoch shuffles the training examples with a generator seeded once
/// from `cfg.seed`, walks them in batches of `cfg.batch_size`, and applies
/// one Adam step per batch on the mean of the active losses. The active set
/// of an epoch is the planned set restricted to the tasks the model has heads
/// for. Parameters that no active loss can reach under the configured gates
/// are left untouched, optimizer moments included.
pub fn train(
    model: &mut SaidsModel,
    provider: &mut dyn EmbeddingProvider,
    data: &Dataset,
    validation: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainTrace, TrainError> {
    cfg.validate()?;
    model.config().validate()?;
    if provider.dim() != model.dim() {
        return Err(TrainError::Config(format!(
            "embedding dim {} does not match model dim {}",
            provider.dim(),
            model.dim()
        )));
    }
    if data.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let plan = plan_schedule(cfg.schedule, cfg.epochs)?;

    // Resolve every embedding up front; a frozen provider's vectors are reused.
    let mut cached = Vec::with_capacity(data.len());
    for ex in data.iter() {
        cached.push(provider.embed(ex)?);
    }
    if let Some(val) = validation {
        for ex in val.iter() {
            provider.embed(ex)?;
        }
    }
    let trainable = provider.is_trainable();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut model_opt = Adam::default();
    let mut provider_opt = Adam::default();
    let mut trace = TrainTrace::default();

    model.zero_grad();
    provider.zero_grad();
    for epoch in 1..=plan.epochs() {
        let active = plan.active(epoch).intersect(model.tasks());
        order.shuffle(&mut rng);
        let live = model.reachable_blocks(active);
        let mut sums = [0.0f64; 3];

        if !active.is_empty() {
            for (batch_index, batch) in order.chunks(cfg.batch_size).enumerate() {
                let scale = 1.0 / batch.len() as f64;
                for &i in batch {
                    let ex: &LabeledTweet = &data.examples[i];
                    let fresh;
                    let e = if trainable {
                        fresh = provider.embed(ex)?;
                        &fresh
                    } else {
                        &cached[i]
                    };
                    let fwd = model.forward_trace(e)?;
                    let losses = task_losses(&fwd.output, ex, active);
                    for (k, task) in Task::ALL.iter().enumerate() {
                        if let Some(l) = losses.get(*task) {
                            if !l.is_finite() {
                                return Err(TrainError::NonFinite {
                                    epoch,
                                    batch: batch_index,
                                });
                            }
                            sums[k] += l;
                        }
                    }
                    let grad_e = model.backward(&fwd, ex, active, &cfg.loss_weights, scale);
                    if trainable {
                        provider.backward(ex, &grad_e);
                    }
                }
                model_opt.step(model.param_blocks(), &live, cfg)?;
                if trainable {
                    provider_opt.step(provider.param_blocks(), &[], cfg)?;
                }
            }
        }

        let mean =
            |k: usize, task: Task| active.contains(task).then(|| sums[k] / data.len() as f64);
        let report: Option<EvalReport> = match validation {
            Some(val) if !val.is_empty() => Some(evaluate(model, &*provider, val)?),
            _ => None,
        };
        trace.records.push(EpochRecord {
            epoch,
            active,
            loss_sentiment: mean(0, Task::Sentiment),
            loss_sarcasm: mean(1, Task::Sarcasm),
            loss_dialect: mean(2, Task::Dialect),
            fpn: report.as_ref().map(|r| r.fpn),
            fsar: report.as_ref().and_then(|r| r.fsar),
            wfs: report.as_ref().and_then(|r| r.wfs),
        });
    }
    Ok(trace)
}
