//! Exact-match micro precision/recall/F1 over triplets, breakdowns by overlap category and
//! triplet count, and decoding throughput.
//!
//! A predicted triplet is correct when its head span, relation and tail span all equal a
//! gold triplet of the same sentence. Entity types are ignored. Duplicate predictions
//! count once.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::Instant;

use thiserror::Error;

use crate::corpus::{
    categorize_sentence, triplet_count_bucket, AnnotatedSentence, Category, CountBucket,
    TokenSequence, TripletKey,
};
use crate::extractors::{Model, ModelError};

/// Written as the first line of every flat report.
pub const DEDUP_NOTE: &str = "duplicate predicted triplets are counted once";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("gold has {gold} sentences but predictions have {pred}")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("sentence {index}: predicted tokens differ from gold tokens")]
    Misaligned { index: usize },
    #[error("cannot measure throughput on an empty corpus")]
    EmptyCorpus,
    #[error("batch size must be positive")]
    BatchSize,
    #[error("sentence {index}: {source}")]
    Extraction { index: usize, source: ModelError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.gold += o.gold;
        self.predicted += o.predicted;
        self.correct += o.correct;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScoreReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
}

impl ScoreReport {
    pub fn from_counts(counts: Counts) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(counts.correct, counts.predicted);
        let recall = ratio(counts.correct, counts.gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            counts,
        }
    }
}

fn check_aligned(gold: &[AnnotatedSentence], pred: &[AnnotatedSentence]) -> Result<(), EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    for (index, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.sentence().tokens() != p.sentence().tokens() {
            return Err(EvalError::Misaligned { index });
        }
    }
    Ok(())
}

fn key_set(s: &AnnotatedSentence) -> BTreeSet<TripletKey> {
    s.triplets().iter().map(|t| t.key()).collect()
}

pub fn sentence_counts(gold: &AnnotatedSentence, pred: &AnnotatedSentence) -> Counts {
    let g = key_set(gold);
    let p = key_set(pred);
    Counts {
        gold: g.len(),
        predicted: p.len(),
        correct: g.intersection(&p).count(),
    }
}

pub fn score(gold: &[AnnotatedSentence], pred: &[AnnotatedSentence]) -> Result<ScoreReport, EvalError> {
    check_aligned(gold, pred)?;
    let mut total = Counts::default();
    for (g, p) in gold.iter().zip(pred) {
        total += sentence_counts(g, p);
    }
    Ok(ScoreReport::from_counts(total))
}

fn score_partitioned<K: Ord>(
    gold: &[AnnotatedSentence],
    pred: &[AnnotatedSentence],
    key: impl Fn(&AnnotatedSentence) -> Option<K>,
) -> Result<BTreeMap<K, ScoreReport>, EvalError> {
    check_aligned(gold, pred)?;
    let mut counts: BTreeMap<K, Counts> = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        if let Some(k) = key(g) {
            *counts.entry(k).or_default() += sentence_counts(g, p);
        }
    }
    Ok(counts
        .into_iter()
        .map(|(k, c)| (k, ScoreReport::from_counts(c)))
        .collect())
}

/// Sentences are partitioned by the overlap category of their gold triplets; sentences
/// without gold triplets are left out.
pub fn score_by_category(
    gold: &[AnnotatedSentence],
    pred: &[AnnotatedSentence],
) -> Result<BTreeMap<Category, ScoreReport>, EvalError> {
    score_partitioned(gold, pred, |g| categorize_sentence(g).ok())
}

pub fn score_by_count(
    gold: &[AnnotatedSentence],
    pred: &[AnnotatedSentence],
) -> Result<BTreeMap<CountBucket, ScoreReport>, EvalError> {
    score_partitioned(gold, pred, |g| triplet_count_bucket(g).ok())
}

/// Runs the model over every sentence and returns prediction records aligned with `gold`.
pub fn predict(model: &Model, gold: &[AnnotatedSentence]) -> Result<Vec<AnnotatedSentence>, EvalError> {
    gold.iter()
        .enumerate()
        .map(|(index, g)| {
            let triplets = model
                .extract_triplets(g.sentence())
                .map_err(|source| EvalError::Extraction { index, source })?
                .triplets;
            Ok(AnnotatedSentence::new(g.sentence().clone(), triplets)
                .expect("extracted spans lie inside the sentence")
                .0)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Throughput {
    pub batches_per_second: f64,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub per_epoch: Vec<f64>,
}

/// Inference-only timing in batches per second. One batch is run first as warm-up and
/// excluded; the reported rate is the mean over `epochs` (at least 3) timed passes.
pub fn measure_throughput(
    model: &Model,
    corpus: &[TokenSequence],
    batch_size: usize,
    epochs: usize,
) -> Result<Throughput, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    if batch_size == 0 {
        return Err(EvalError::BatchSize);
    }
    let run = |batch: &[TokenSequence], offset: usize| -> Result<(), EvalError> {
        for (k, s) in batch.iter().enumerate() {
            model
                .extract_triplets(s)
                .map_err(|source| EvalError::Extraction {
                    index: offset + k,
                    source,
                })?;
        }
        Ok(())
    };
    run(&corpus[..batch_size.min(corpus.len())], 0)?;
    let batches = corpus.len().div_ceil(batch_size);
    let mut per_epoch = Vec::new();
    for _ in 0..epochs.max(3) {
        let t0 = Instant::now();
        for (b, chunk) in corpus.chunks(batch_size).enumerate() {
            run(chunk, b * batch_size)?;
        }
        let secs = t0.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
        per_epoch.push(batches as f64 / secs);
    }
    Ok(Throughput {
        batches_per_second: per_epoch.iter().sum::<f64>() / per_epoch.len() as f64,
        batch_size,
        batches_per_epoch: batches,
        per_epoch,
    })
}

/// Machine-readable `key=value` lines, starting with the deduplication note.
pub fn flat_report<K: fmt::Display>(
    overall: &ScoreReport,
    breakdown: &BTreeMap<K, ScoreReport>,
) -> String {
    let mut out = format!("# {DEDUP_NOTE}\n");
    let mut push = |prefix: &str, r: &ScoreReport| {
        out.push_str(&format!(
            "{prefix}precision={:.6}\n{prefix}recall={:.6}\n{prefix}f1={:.6}\n\
             {prefix}gold={}\n{prefix}predicted={}\n{prefix}correct={}\n",
            r.precision, r.recall, r.f1, r.counts.gold, r.counts.predicted, r.counts.correct
        ));
    };
    push("", overall);
    for (k, r) in breakdown {
        push(&format!("{k}."), r);
    }
    out
}

/// Aligned human-readable table with one row per breakdown key and a final total row.
pub fn table_report<K: fmt::Display>(
    overall: &ScoreReport,
    breakdown: &BTreeMap<K, ScoreReport>,
) -> String {
    let mut rows: Vec<(String, &ScoreReport)> =
        breakdown.iter().map(|(k, r)| (k.to_string(), r)).collect();
    rows.push(("all".to_string(), overall));
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0).max(5);
    let mut out = format!(
        "{:<width$}  {:>9}  {:>6}  {:>6}  {:>5}  {:>5}  {:>7}\n",
        "group", "precision", "recall", "f1", "gold", "pred", "correct"
    );
    for (k, r) in rows {
        out.push_str(&format!(
            "{:<width$}  {:>9.3}  {:>6.3}  {:>6.3}  {:>5}  {:>5}  {:>7}\n",
            k, r.precision, r.recall, r.f1, r.counts.gold, r.counts.predicted, r.counts.correct
        ));
    }
    out
}
