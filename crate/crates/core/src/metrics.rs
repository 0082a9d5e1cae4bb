//! Confusion matrices and the three task metrics.
//!
//! - FPN: mean of the POS and NEG F1 scores.
//! - FSar: F1 of the sarcastic class.
//! - WFS: support-weighted mean F1 over the five dialects.

use std::fmt::Write as _;

use thiserror::Error;

use crate::dataset::{Dataset, Dialect, Label, Sarcasm, Sentiment};
use crate::embeddings::{EmbeddingError, EmbeddingProvider};
use crate::model::{ModelError, SaidsModel};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("expected classes {expected:?}, found {found:?}")]
    WrongClasses {
        expected: &'static [&'static str],
        found: Vec<String>,
    },
    #[error("weighted F1 is undefined with zero total support")]
    ZeroSupport,
    #[error("model has no {0} head")]
    MissingHead(&'static str),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Rows are gold labels, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: &[&str]) -> Self {
        let n = classes.len();
        ConfusionMatrix {
            classes: classes.iter().map(|c| c.to_string()).collect(),
            counts: vec![0; n * n],
        }
    }

    pub fn for_label<L: Label>() -> Self {
        Self::new(L::NAMES)
    }

    /// Builds a matrix from (gold, predicted) index pairs.
    pub fn from_pairs(classes: &[&str], pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut cm = Self::new(classes);
        for (g, p) in pairs {
            cm.add(g, p);
        }
        cm
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn add(&mut self, gold: usize, predicted: usize) {
        let n = self.n_classes();
        self.counts[gold * n + predicted] += 1;
    }

    pub fn get(&self, gold: usize, predicted: usize) -> u64 {
        self.counts[gold * self.n_classes() + predicted]
    }

    pub fn set(&mut self, gold: usize, predicted: usize, count: u64) {
        let n = self.n_classes();
        self.counts[gold * n + predicted] = count;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds another matrix over the same classes.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(
            self.classes, other.classes,
            "merging matrices over different classes"
        );
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn support(&self, class: usize) -> u64 {
        (0..self.n_classes()).map(|p| self.get(class, p)).sum()
    }

    /// (tp, fp, fn) of one class.
    pub fn class_counts(&self, class: usize) -> (u64, u64, u64) {
        let tp = self.get(class, class);
        let predicted: u64 = (0..self.n_classes()).map(|g| self.get(g, class)).sum();
        (tp, predicted - tp, self.support(class) - tp)
    }

    pub fn class_scores(&self, class: usize) -> ClassScores {
        let (tp, fp, fn_) = self.class_counts(class);
        ClassScores {
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: f1(tp, fp, fn_),
            support: self.support(class),
        }
    }

    fn expect_classes(&self, expected: &'static [&'static str]) -> Result<(), MetricsError> {
        if self
            .classes
            .iter()
            .map(String::as_str)
            .eq(expected.iter().copied())
        {
            Ok(())
        } else {
            Err(MetricsError::WrongClasses {
                expected,
                found: self.classes.clone(),
            })
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// F1 from raw counts; every 0/0 is taken as 0.
pub fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn fpn(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    cm.expect_classes(Sentiment::NAMES)?;
    let pos = cm.class_scores(Sentiment::Pos.index()).f1;
    let neg = cm.class_scores(Sentiment::Neg.index()).f1;
    Ok((pos + neg) / 2.0)
}

pub fn fsar(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    cm.expect_classes(Sarcasm::NAMES)?;
    Ok(cm.class_scores(Sarcasm::Sarcastic.index()).f1)
}

pub fn wfs(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    cm.expect_classes(Dialect::NAMES)?;
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::ZeroSupport);
    }
    let weighted: f64 = (0..cm.n_classes())
        .map(|d| {
            let s = cm.class_scores(d);
            s.support as f64 * s.f1
        })
        .sum();
    Ok(weighted / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub fpn: f64,
    pub fsar: Option<f64>,
    pub wfs: Option<f64>,
    pub sentiment: ConfusionMatrix,
    pub sarcasm: Option<ConfusionMatrix>,
    pub dialect: Option<ConfusionMatrix>,
}

impl EvalReport {
    /// Report from confusion matrices; the auxiliary ones are absent for
    /// sentiment-only models.
    pub fn from_matrices(
        sentiment: ConfusionMatrix,
        sarcasm: Option<ConfusionMatrix>,
        dialect: Option<ConfusionMatrix>,
    ) -> Result<Self, MetricsError> {
        Ok(EvalReport {
            fpn: fpn(&sentiment)?,
            fsar: sarcasm.as_ref().map(fsar).transpose()?,
            wfs: dialect.as_ref().map(wfs).transpose()?,
            sentiment,
            sarcasm,
            dialect,
        })
    }

    /// `metric = value` lines with six decimal places.
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        let mut line = |key: &str, value: f64| {
            let _ = writeln!(out, "{key} = {value:.6}");
        };
        line("fpn", self.fpn);
        if let Some(v) = self.fsar {
            line("fsar", v);
        }
        if let Some(v) = self.wfs {
            line("wfs", v);
        }
        let tasks = [
            ("sentiment", Some(&self.sentiment)),
            ("sarcasm", self.sarcasm.as_ref()),
            ("dialect", self.dialect.as_ref()),
        ];
        for (task, cm) in tasks {
            let Some(cm) = cm else { continue };
            for (i, class) in cm.classes().iter().enumerate() {
                let s = cm.class_scores(i);
                line(&format!("{task}.{class}.precision"), s.precision);
                line(&format!("{task}.{class}.recall"), s.recall);
                line(&format!("{task}.{class}.f1"), s.f1);
            }
        }
        out
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(
    model: &SaidsModel,
    provider: &dyn EmbeddingProvider,
    data: &Dataset,
) -> Result<EvalReport, MetricsError> {
    let mut sentiment = ConfusionMatrix::for_label::<Sentiment>();
    let mut sarcasm = model
        .sarcasm
        .as_ref()
        .map(|_| ConfusionMatrix::for_label::<Sarcasm>());
    let mut dialect = model
        .dialect
        .as_ref()
        .map(|_| ConfusionMatrix::for_label::<Dialect>());
    for ex in data.iter() {
        let e = provider.embed(ex)?;
        let out = model.forward(&e)?;
        sentiment.add(ex.sentiment.index(), argmax(&out.sentiment_probs));
        if let (Some(cm), Some(p)) = (sarcasm.as_mut(), out.sarcasm_probs.as_ref()) {
            cm.add(ex.sarcasm.index(), argmax(p));
        }
        if let (Some(cm), Some(p)) = (dialect.as_mut(), out.dialect_probs.as_ref()) {
            cm.add(ex.dialect.index(), argmax(p));
        }
    }
    EvalReport::from_matrices(sentiment, sarcasm, dialect)
}
