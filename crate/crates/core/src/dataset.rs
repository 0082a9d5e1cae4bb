//! Labeled tweet datasets: CSV ingestion, label normalization, stratified
//! splitting, label statistics and the synthetic planted-dependency generator.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::embeddings::EmbeddingTable;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("schema error: missing required column `{0}`")]
    MissingColumn(&'static str),
    #[error("schema error: file is empty")]
    EmptyFile,
    #[error("schema error: file has a header but no data rows")]
    NoRows,
    #[error("row {row}: invalid {column} label `{value}`")]
    InvalidLabel {
        row: usize,
        column: &'static str,
        value: String,
    },
    #[error("row {row}: duplicate id `{id}`")]
    DuplicateId { row: usize, id: String },
    #[error("argument error: {0}")]
    Argument(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Sentiment classes, in the pinned class order (POS, NEU, NEG).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sentiment {
    Pos,
    Neu,
    Neg,
}

/// Sarcasm classes, in the pinned class order (sarcastic, non-sarcastic).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sarcasm {
    Sarcastic,
    NonSarcastic,
}

/// Dialect classes, in the pinned class order (MSA, EGY, LEV, NOR, Gulf).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dialect {
    Msa,
    Egy,
    Lev,
    Nor,
    Gulf,
}

/// Shared behaviour of the three closed label enumerations.
pub trait Label: Copy + Eq + fmt::Debug + 'static {
    const ALL: &'static [Self];
    const NAMES: &'static [&'static str];
    const COLUMN: &'static str;

    fn index(self) -> usize;

    fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    fn name(self) -> &'static str {
        Self::NAMES[self.index()]
    }

    /// Maps an already case-folded cell to a label.
    fn from_folded(cell: &str) -> Option<Self>;

    /// Parses a raw CSV cell: NFC-normalized, ASCII case-folded, trimmed.
    fn parse(cell: &str) -> Option<Self> {
        let folded: String = cell.trim().nfc().collect::<String>().to_ascii_lowercase();
        Self::from_folded(&folded)
    }
}

impl Label for Sentiment {
    const ALL: &'static [Self] = &[Sentiment::Pos, Sentiment::Neu, Sentiment::Neg];
    const NAMES: &'static [&'static str] = &["POS", "NEU", "NEG"];
    const COLUMN: &'static str = "sentiment";

    fn index(self) -> usize {
        self as usize
    }

    fn from_folded(cell: &str) -> Option<Self> {
        match cell {
            "pos" | "positive" => Some(Sentiment::Pos),
            "neu" | "neutral" => Some(Sentiment::Neu),
            "neg" | "negative" => Some(Sentiment::Neg),
            _ => None,
        }
    }
}

impl Label for Sarcasm {
    const ALL: &'static [Self] = &[Sarcasm::Sarcastic, Sarcasm::NonSarcastic];
    const NAMES: &'static [&'static str] = &["sarcastic", "non-sarcastic"];
    const COLUMN: &'static str = "sarcasm";

    fn index(self) -> usize {
        self as usize
    }

    fn from_folded(cell: &str) -> Option<Self> {
        match cell {
            "true" => Some(Sarcasm::Sarcastic),
            "false" => Some(Sarcasm::NonSarcastic),
            _ => None,
        }
    }
}

impl Label for Dialect {
    const ALL: &'static [Self] = &[
        Dialect::Msa,
        Dialect::Egy,
        Dialect::Lev,
        Dialect::Nor,
        Dialect::Gulf,
    ];
    const NAMES: &'static [&'static str] = &["MSA", "EGY", "LEV", "NOR", "Gulf"];
    const COLUMN: &'static str = "dialect";

    fn index(self) -> usize {
        self as usize
    }

    fn from_folded(cell: &str) -> Option<Self> {
        match cell {
            "msa" => Some(Dialect::Msa),
            "egy" | "egypt" => Some(Dialect::Egy),
            "lev" | "levant" => Some(Dialect::Lev),
            "nor" | "magreb" => Some(Dialect::Nor),
            "gulf" => Some(Dialect::Gulf),
            _ => None,
        }
    }
}

impl Sarcasm {
    pub fn is_sarcastic(self) -> bool {
        self == Sarcasm::Sarcastic
    }

    /// Spelling used by the released CSV files.
    pub fn csv_cell(self) -> &'static str {
        match self {
            Sarcasm::Sarcastic => "True",
            Sarcasm::NonSarcastic => "False",
        }
    }
}

macro_rules! display_via_name {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    )*};
}
display_via_name!(Sentiment, Sarcasm, Dialect);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledTweet {
    pub id: String,
    pub text: String,
    pub sentiment: Sentiment,
    pub sarcasm: Sarcasm,
    pub dialect: Dialect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<LabeledTweet>,
    pub role: SplitRole,
}

impl Dataset {
    pub fn new(examples: Vec<LabeledTweet>, role: SplitRole) -> Self {
        Dataset { examples, role }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LabeledTweet> {
        self.examples.iter()
    }

    /// Writes the dataset as a CSV with columns `id,tweet,sarcasm,sentiment,dialect`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["id", "tweet", "sarcasm", "sentiment", "dialect"])?;
        for ex in &self.examples {
            w.write_record([
                ex.id.as_str(),
                ex.text.as_str(),
                ex.sarcasm.csv_cell(),
                ex.sentiment.name(),
                ex.dialect.name(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Loads an ArSarcasm-v2 style CSV file. See [`read_dataset`].
pub fn load_dataset(path: impl AsRef<Path>, role: SplitRole) -> Result<Dataset, DatasetError> {
    let file = File::open(path)?;
    read_dataset(file, role)
}

/// Reads a dataset from CSV. Required columns are `tweet`, `sarcasm`,
/// `sentiment` and `dialect` in any order; `id` is optional and defaults to
/// the 0-based data row index.
pub fn read_dataset<R: Read>(reader: R, role: SplitRole) -> Result<Dataset, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(DatasetError::EmptyFile);
    }
    let column = |name: &'static str| -> Result<usize, DatasetError> {
        headers
            .iter()
            .position(|h| {
                h.trim()
                    .trim_start_matches('\u{feff}')
                    .eq_ignore_ascii_case(name)
            })
            .ok_or(DatasetError::MissingColumn(name))
    };
    let tweet_col = column("tweet")?;
    let sarcasm_col = column("sarcasm")?;
    let sentiment_col = column("sentiment")?;
    let dialect_col = column("dialect")?;
    let id_col = column("id").ok();

    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let cell = |i: usize| record.get(i).unwrap_or("");
        let sentiment = parse_cell::<Sentiment>(cell(sentiment_col), row)?;
        let sarcasm = parse_cell::<Sarcasm>(cell(sarcasm_col), row)?;
        let dialect = parse_cell::<Dialect>(cell(dialect_col), row)?;
        let id = match id_col {
            Some(c) => cell(c).to_string(),
            None => row.to_string(),
        };
        if !seen.insert(id.clone()) {
            return Err(DatasetError::DuplicateId { row, id });
        }
        examples.push(LabeledTweet {
            id,
            text: cell(tweet_col).to_string(),
            sentiment,
            sarcasm,
            dialect,
        });
    }
    if examples.is_empty() {
        return Err(DatasetError::NoRows);
    }
    Ok(Dataset { examples, role })
}

fn parse_cell<L: Label>(cell: &str, row: usize) -> Result<L, DatasetError> {
    L::parse(cell).ok_or_else(|| DatasetError::InvalidLabel {
        row,
        column: L::COLUMN,
        value: cell.to_string(),
    })
}

/// Splits `data` into (train, validation), stratified on the joint
/// (sentiment, sarcasm) label.
///
/// The validation size is `round(fraction * n)`; per-stratum quotas use the
/// largest-remainder method so that the total is met exactly. Both halves keep
/// the input order.
pub fn split_train_validation(
    data: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DatasetError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DatasetError::Argument(format!(
            "validation fraction {fraction} is outside (0, 1)"
        )));
    }
    let n = data.len();
    let n_val = (fraction * n as f64).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(DatasetError::Argument(format!(
            "validation fraction {fraction} of {n} examples leaves an empty side"
        )));
    }

    let mut strata: BTreeMap<(Sentiment, Sarcasm), Vec<usize>> = BTreeMap::new();
    for (i, ex) in data.examples.iter().enumerate() {
        strata
            .entry((ex.sentiment, ex.sarcasm))
            .or_default()
            .push(i);
    }

    // Largest-remainder allocation of n_val across strata.
    let mut quotas: Vec<(usize, f64)> = strata
        .values()
        .map(|members| {
            let exact = n_val as f64 * members.len() as f64 / n as f64;
            (exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.0).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].1.total_cmp(&quotas[a].1).then(a.cmp(&b)));
    for &k in order.iter().take(n_val - assigned) {
        quotas[k].0 += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_validation = vec![false; n];
    for (members, (quota, _)) in strata.values().zip(&quotas) {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        for &i in shuffled.iter().take(*quota) {
            in_validation[i] = true;
        }
    }

    let (mut train, mut val) = (Vec::with_capacity(n - n_val), Vec::with_capacity(n_val));
    for (ex, &is_val) in data.examples.iter().zip(&in_validation) {
        if is_val {
            val.push(ex.clone());
        } else {
            train.push(ex.clone());
        }
    }
    Ok((
        Dataset::new(train, SplitRole::Train),
        Dataset::new(val, SplitRole::Validation),
    ))
}

/// Label counts and cross tabulations of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsReport {
    pub total: usize,
    pub sentiment_counts: [usize; 3],
    pub sarcasm_counts: [usize; 2],
    pub dialect_counts: [usize; 5],
    /// `[sarcasm][sentiment]`
    pub sarcasm_sentiment: [[usize; 3]; 2],
    /// `[dialect][sentiment]`
    pub dialect_sentiment: [[usize; 3]; 5],
    /// Percentage of sarcastic tweets per dialect; `None` when the dialect is absent.
    pub sarcasm_rate_by_dialect: [Option<f64>; 5],
}

impl StatsReport {
    pub fn count_sentiment(&self, s: Sentiment) -> usize {
        self.sentiment_counts[s.index()]
    }

    pub fn count_sarcasm(&self, s: Sarcasm) -> usize {
        self.sarcasm_counts[s.index()]
    }

    pub fn count_dialect(&self, d: Dialect) -> usize {
        self.dialect_counts[d.index()]
    }

    pub fn cross_sarcasm(&self, s: Sentiment, c: Sarcasm) -> usize {
        self.sarcasm_sentiment[c.index()][s.index()]
    }

    pub fn cross_dialect(&self, s: Sentiment, d: Dialect) -> usize {
        self.dialect_sentiment[d.index()][s.index()]
    }

    pub fn sarcasm_rate(&self, d: Dialect) -> Option<f64> {
        self.sarcasm_rate_by_dialect[d.index()]
    }

    /// Renders the three label tables.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let w = 16;
        out.push_str("Label counts\n");
        out.push_str(&format!("{:<12}{:<w$}{:>10}\n", "Task", "Label", "Count"));
        let mut section = |task: &str, rows: Vec<(&str, usize)>| {
            for (i, (label, count)) in rows.into_iter().enumerate() {
                let task = if i == 0 { task } else { "" };
                out.push_str(&format!(
                    "{:<12}{:<w$}{:>10}\n",
                    task,
                    label,
                    group_thousands(count)
                ));
            }
        };
        section(
            "Sentiment",
            Sentiment::ALL
                .iter()
                .map(|s| (s.name(), self.count_sentiment(*s)))
                .collect(),
        );
        section(
            "Sarcasm",
            Sarcasm::ALL
                .iter()
                .map(|s| (s.name(), self.count_sarcasm(*s)))
                .collect(),
        );
        section(
            "Dialect",
            Dialect::ALL
                .iter()
                .map(|d| (d.name(), self.count_dialect(*d)))
                .collect(),
        );
        out.push_str(&format!(
            "{:<28}{:>10}\n",
            "Total",
            group_thousands(self.total)
        ));

        out.push_str("\nSentiment cross tabulation\n");
        out.push_str(&format!(
            "{:<w$}{:>10}{:>10}{:>10}\n",
            "", "POS", "NEU", "NEG"
        ));
        for c in Sarcasm::ALL {
            let row = &self.sarcasm_sentiment[c.index()];
            out.push_str(&format!(
                "{:<w$}{:>10}{:>10}{:>10}\n",
                c.name(),
                group_thousands(row[0]),
                group_thousands(row[1]),
                group_thousands(row[2])
            ));
        }
        for d in Dialect::ALL {
            let row = &self.dialect_sentiment[d.index()];
            out.push_str(&format!(
                "{:<w$}{:>10}{:>10}{:>10}\n",
                d.name(),
                group_thousands(row[0]),
                group_thousands(row[1]),
                group_thousands(row[2])
            ));
        }

        out.push_str("\nSarcasm percentage by dialect\n");
        for d in Dialect::ALL {
            let rate = match self.sarcasm_rate(*d) {
                Some(r) => format!("{} %", format_percent(r)),
                None => "n/a".to_string(),
            };
            out.push_str(&format!("{:<w$}{:>10}\n", d.name(), rate));
        }
        out
    }
}

/// Formats a percentage rounded half-up to two decimals.
pub fn format_percent(value: f64) -> String {
    // Nudge by a relative epsilon so binary representation error does not
    // turn an exact .xx5 into a round-down.
    let scaled = value * 100.0;
    let rounded = (scaled + scaled.abs() * 1e-12).round() / 100.0;
    format!("{rounded:.2}")
}

/// `12548` → `"12,548"`.
pub fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

pub fn compute_stats(data: &Dataset) -> Result<StatsReport, DatasetError> {
    if data.is_empty() {
        return Err(DatasetError::Argument(
            "cannot compute statistics of an empty dataset".into(),
        ));
    }
    let mut report = StatsReport {
        total: data.len(),
        sentiment_counts: [0; 3],
        sarcasm_counts: [0; 2],
        dialect_counts: [0; 5],
        sarcasm_sentiment: [[0; 3]; 2],
        dialect_sentiment: [[0; 3]; 5],
        sarcasm_rate_by_dialect: [None; 5],
    };
    let mut sarcastic_by_dialect = [0usize; 5];
    for ex in &data.examples {
        let (s, c, d) = (ex.sentiment.index(), ex.sarcasm.index(), ex.dialect.index());
        report.sentiment_counts[s] += 1;
        report.sarcasm_counts[c] += 1;
        report.dialect_counts[d] += 1;
        report.sarcasm_sentiment[c][s] += 1;
        report.dialect_sentiment[d][s] += 1;
        if ex.sarcasm.is_sarcastic() {
            sarcastic_by_dialect[d] += 1;
        }
    }
    for ((rate, &sarcastic), &count) in report
        .sarcasm_rate_by_dialect
        .iter_mut()
        .zip(&sarcastic_by_dialect)
        .zip(&report.dialect_counts)
    {
        if count > 0 {
            *rate = Some(100.0 * sarcastic as f64 / count as f64);
        }
    }
    Ok(report)
}

/// Dialect prior, proportional to the training-set dialect counts.
pub const SYNTH_DIALECT_PRIOR: [f64; 5] = [
    8562.0 / 12548.0,
    2675.0 / 12548.0,
    624.0 / 12548.0,
    43.0 / 12548.0,
    644.0 / 12548.0,
];

/// P(sarcastic | dialect), shaped like the per-dialect sarcasm percentages.
pub const SYNTH_SARCASM_RATE: [f64; 5] = [0.1083, 0.3477, 0.2212, 0.3488, 0.2438];

/// P(sentiment | sarcastic), independent of dialect.
pub const SYNTH_SENTIMENT_SARCASTIC: [f64; 3] = [0.025, 0.075, 0.9];

/// P(sentiment | non-sarcastic, dialect), rows in dialect order. Each row is
/// the training-set dialect-by-sentiment count row with the expected sarcastic
/// share removed, renormalized and rounded; MSA is pinned at 0.5 neutral.
pub const SYNTH_SENTIMENT_LITERAL: [[f64; 3]; 5] = [
    [0.20, 0.50, 0.30],
    [0.28, 0.41, 0.31],
    [0.28, 0.39, 0.33],
    [0.20, 0.39, 0.41],
    [0.24, 0.51, 0.25],
];

/// Conditional sentiment distribution used by [`gen_synthetic`].
pub fn synthetic_sentiment_table(sarcasm: Sarcasm, dialect: Dialect) -> [f64; 3] {
    match sarcasm {
        Sarcasm::Sarcastic => SYNTH_SENTIMENT_SARCASTIC,
        Sarcasm::NonSarcastic => SYNTH_SENTIMENT_LITERAL[dialect.index()],
    }
}

const SYNTH_CENTER_SCALE: f64 = 3.0;
const SYNTH_NOISE: f64 = 1.0;
const SYNTH_FILLER_VOCAB: usize = 200;

/// Generates a planted-dependency dataset and its embedding table.
///
/// Labels follow the `SYNTH_*` tables. Each embedding is the sum of a dialect
/// center, a sarcasm center and `(1 - coupling)` times a sentiment center,
/// plus isotropic unit noise. Centers are random directions of norm
/// `3 * sqrt(2)`, so each pair of same-task centers sits about six noise
/// standard deviations apart. The text is a bag of marker tokens that mirrors
/// the same structure for text encoders.
pub fn gen_synthetic(
    n: usize,
    dim: usize,
    seed: u64,
    coupling: f64,
) -> Result<(Dataset, EmbeddingTable), DatasetError> {
    if n < 10 {
        return Err(DatasetError::Argument(format!(
            "n = {n} must be at least 10"
        )));
    }
    if dim < 4 {
        return Err(DatasetError::Argument(format!(
            "dim = {dim} must be at least 4"
        )));
    }
    if !(0.0..=1.0).contains(&coupling) {
        return Err(DatasetError::Argument(format!(
            "coupling {coupling} is outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        raw.into_iter()
            .map(|v| v / norm * SYNTH_CENTER_SCALE * std::f64::consts::SQRT_2)
            .collect()
    };
    let dialect_centers: Vec<Vec<f64>> = (0..5).map(|_| center(&mut rng)).collect();
    let sarcasm_centers: Vec<Vec<f64>> = (0..2).map(|_| center(&mut rng)).collect();
    let sentiment_centers: Vec<Vec<f64>> = (0..3).map(|_| center(&mut rng)).collect();

    let mut examples = Vec::with_capacity(n);
    let mut entries = IndexMap::with_capacity(n);
    for i in 0..n {
        let dialect = Dialect::ALL[sample_categorical(&mut rng, &SYNTH_DIALECT_PRIOR)];
        let sarcasm = if rng.random::<f64>() < SYNTH_SARCASM_RATE[dialect.index()] {
            Sarcasm::Sarcastic
        } else {
            Sarcasm::NonSarcastic
        };
        let sentiment = Sentiment::ALL
            [sample_categorical(&mut rng, &synthetic_sentiment_table(sarcasm, dialect))];

        let strength = 1.0 - coupling;
        let vector: Vec<f32> = (0..dim)
            .map(|k| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                (dialect_centers[dialect.index()][k]
                    + sarcasm_centers[sarcasm.index()][k]
                    + strength * sentiment_centers[sentiment.index()][k]
                    + SYNTH_NOISE * noise) as f32
            })
            .collect();

        let mut tokens = vec![
            format!("dia{}_{}", dialect.index(), rng.random_range(0..4)),
            format!("sar{}_{}", sarcasm.index(), rng.random_range(0..4)),
        ];
        if rng.random::<f64>() < strength {
            tokens.push(format!(
                "sen{}_{}",
                sentiment.index(),
                rng.random_range(0..4)
            ));
        }
        let fillers = rng.random_range(3..8);
        for _ in 0..fillers {
            tokens.push(format!("w{}", rng.random_range(0..SYNTH_FILLER_VOCAB)));
        }
        tokens.shuffle(&mut rng);

        let id = i.to_string();
        entries.insert(id.clone(), vector);
        examples.push(LabeledTweet {
            id,
            text: tokens.join(" "),
            sentiment,
            sarcasm,
            dialect,
        });
    }
    let table = EmbeddingTable::from_entries(dim, entries)
        .expect("generated vectors have the declared dimension");
    Ok((Dataset::new(examples, SplitRole::Train), table))
}

fn sample_categorical(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
