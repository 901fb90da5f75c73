//! Joint training of the shared encoder and both taggers, with per-epoch gold-head
//! sampling, gradient clipping, dev-F1 model selection and checkpoints.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotatedSentence, CorpusError, EntitySpan, Vocab, Vocabularies};
use crate::encoder::{load_pretrained, Dropout, EncoderError, SentenceIds};
use crate::evaluator::{self, EvalError, ScoreReport};
use crate::extractors::{Model, ModelConfig, ModelError, TrainingTargets};
use crate::hbt::Trace;
use crate::nn::{Adam, Grads, Graph, Params};
use crate::tagset::{encode_he, encode_ter, BoundaryTagging, HeadTagMode, TagError};

pub const CHECKPOINT_SCHEMA: &str = "etlspan-checkpoint/1";
const MANIFEST_FILE: &str = "manifest.json";
const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("the {0} corpus is empty")]
    EmptyCorpus(&'static str),
    #[error("{corpus} sentence {index} has {len} tokens, more than max_len = {max_len}")]
    SentenceTooLong {
        corpus: &'static str,
        index: usize,
        len: usize,
        max_len: usize,
    },
    #[error("non-finite loss or gradient at step {step}; sentences {sentences:?}")]
    NonFinite { step: u64, sentences: Vec<usize> },
    #[error("no trainable instance remains after removing encoding conflicts")]
    NothingToTrain,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Pretrained(#[from] EncoderError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

fn checkpoint_err(path: &Path, message: impl ToString) -> TrainError {
    TrainError::Checkpoint {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Expand each sentence to one instance per gold head instead of sampling one.
    pub repeat_heads: bool,
    /// Text-format word vectors used to initialize the word embedding table.
    pub pretrained_vectors: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            learning_rate: 0.001,
            batch_size: 64,
            grad_clip_norm: 5.0,
            max_epochs: 100,
            patience: 10,
            seed: 1,
            repeat_heads: false,
            pretrained_vectors: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        if !(self.learning_rate > 0.0 && self.grad_clip_norm > 0.0) {
            return Err(TrainError::Config(
                "learning_rate and grad_clip_norm must be positive".into(),
            ));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::Config("batch_size and max_epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

/// Distinct gold head spans of a sentence, in first-occurrence order.
pub fn gold_heads(s: &AnnotatedSentence) -> Vec<EntitySpan> {
    let mut out: Vec<EntitySpan> = Vec::new();
    for h in s.head_entities() {
        if !out.iter().any(|o| o.bounds() == h.bounds()) {
            out.push(EntitySpan::untyped(h.start, h.end));
        }
    }
    out
}

/// HE targets plus TER targets for one uniformly sampled gold head. Sentences without
/// triplets yield HE targets only.
pub fn make_training_instance<R: Rng>(
    s: &AnnotatedSentence,
    head_vocab: &Vocab,
    relation_vocab: &Vocab,
    mode: HeadTagMode,
    rng: &mut R,
) -> Result<TrainingTargets, TagError> {
    let he = encode_he(s, head_vocab, mode)?;
    let heads = gold_heads(s);
    let ter = match heads.choose(rng) {
        None => None,
        Some(h) => Some((h.clone(), encode_ter(s, h, relation_vocab)?)),
    };
    Ok(TrainingTargets { he, ter })
}

/// A training sentence with its fixed targets precomputed.
#[derive(Debug, Clone)]
pub struct PreparedSentence {
    pub index: usize,
    pub ids: SentenceIds,
    pub he: BoundaryTagging,
    /// Gold heads whose TER targets are encodable.
    pub heads: Vec<(EntitySpan, BoundaryTagging)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PrepareReport {
    /// Sentences dropped because their HE targets conflict.
    pub skipped_sentences: usize,
    /// Gold heads left out of sampling because their TER targets conflict.
    pub skipped_heads: usize,
}

pub fn prepare_corpus(
    model: &Model,
    sentences: &[AnnotatedSentence],
) -> (Vec<PreparedSentence>, PrepareReport) {
    let mut report = PrepareReport::default();
    let mut out = Vec::with_capacity(sentences.len());
    let relations = &model.vocabs.tags.relation_types;
    for (index, s) in sentences.iter().enumerate() {
        let he = match encode_he(s, &model.head_vocab, model.config.head_tag_mode()) {
            Ok(he) => he,
            Err(e) => {
                debug!("sentence {index} skipped: {e}");
                report.skipped_sentences += 1;
                continue;
            }
        };
        let mut heads = Vec::new();
        for h in gold_heads(s) {
            match encode_ter(s, &h, relations) {
                Ok(t) => heads.push((h, t)),
                Err(e) => {
                    debug!("sentence {index}, head {h} skipped: {e}");
                    report.skipped_heads += 1;
                }
            }
        }
        let had_triplets = !s.triplets().is_empty();
        if had_triplets && heads.is_empty() {
            report.skipped_sentences += 1;
            continue;
        }
        out.push(PreparedSentence {
            index,
            ids: model.sentence_ids(s.sentence()),
            he,
            heads,
        });
    }
    (out, report)
}

/// One unit of a batch: a prepared sentence and its targets for this epoch.
#[derive(Debug, Clone, Copy)]
pub struct Instance<'a> {
    pub sentence: &'a PreparedSentence,
    pub head: Option<usize>,
}

impl Instance<'_> {
    pub fn targets(&self) -> TrainingTargets {
        TrainingTargets {
            he: self.sentence.he.clone(),
            ter: self.head.map(|k| self.sentence.heads[k].clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepStats {
    /// Batch-mean joint loss.
    pub loss: f64,
    pub he_loss: f64,
    /// Sum of TER losses divided by the batch size.
    pub ter_loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_f1: f64,
    /// Dev joint loss with every encodable gold head; breaks ties in dev F1.
    pub dev_loss: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub dev_f1: f64,
    pub step: u64,
    pub epoch: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    schema: String,
    config: TrainConfig,
    dev_f1: f64,
    step: u64,
    epoch: usize,
    parameter_count: usize,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir).map_err(|e| checkpoint_err(dir, e))?;
        let manifest = CheckpointManifest {
            schema: CHECKPOINT_SCHEMA.to_string(),
            config: self.config.clone(),
            dev_f1: self.dev_f1,
            step: self.step,
            epoch: self.epoch,
            parameter_count: self.model.params.scalar_count(),
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| checkpoint_err(&path, e))?;
        let path = dir.join(PARAMS_FILE);
        let file = File::create(&path).map_err(|e| checkpoint_err(&path, e))?;
        self.model
            .params
            .write_to(BufWriter::new(file))
            .map_err(|e| checkpoint_err(&path, e))?;
        self.model.vocabs.write_dir(dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| checkpoint_err(&path, e))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| checkpoint_err(&path, e))?;
        if manifest.schema != CHECKPOINT_SCHEMA {
            return Err(checkpoint_err(
                &path,
                format!("unsupported schema {:?}", manifest.schema),
            ));
        }
        let vocabs = Vocabularies::read_dir(dir)?;
        let path = dir.join(PARAMS_FILE);
        let file = File::open(&path).map_err(|e| checkpoint_err(&path, e))?;
        let params = Params::read_from(BufReader::new(file)).map_err(|e| checkpoint_err(&path, e))?;
        let model = Model::with_params(manifest.config.model, vocabs, params)?;
        Ok(Self {
            config: manifest.config,
            model,
            dev_f1: manifest.dev_f1,
            step: manifest.step,
            epoch: manifest.epoch,
        })
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub prepare: PrepareReport,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    optimizer: Adam,
    grads: Grads,
    rng: ChaCha8Rng,
    dropout: Dropout,
    pub step: u64,
    /// Accumulated instrumentation of every training pass.
    pub trace: Trace,
}

impl Trainer {
    pub fn new(config: TrainConfig, vocabs: Vocabularies) -> Result<Self, TrainError> {
        config.validate()?;
        let mut model = Model::new(config.model, vocabs, config.seed)?;
        if let Some(path) = &config.pretrained_vectors {
            let encoders = if model.is_pipeline() {
                vec![model.he_encoder, model.ter_encoder]
            } else {
                vec![model.he_encoder]
            };
            for enc in encoders {
                let mut table = model.params.get(enc.word_emb).clone();
                let stats = load_pretrained(path, &model.vocabs, &mut table)?;
                info!(
                    "pretrained vectors: {} read, {} vocabulary rows initialized",
                    stats.vectors_read, stats.matched
                );
                *model.params.get_mut(enc.word_emb) = table;
            }
        }
        let optimizer = Adam::new(&model.params, config.learning_rate);
        let grads = Grads::new(&model.params);
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed)),
            dropout: Dropout {
                rate: config.model.dropout,
                rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0xd80f)),
            },
            config,
            model,
            optimizer,
            grads,
            step: 0,
            trace: Trace::default(),
        })
    }

    /// This epoch's instances: one sampled head per sentence, or one instance per head
    /// with `repeat_heads`, shuffled.
    pub fn epoch_instances<'a>(&mut self, data: &'a [PreparedSentence]) -> Vec<Instance<'a>> {
        let mut out = Vec::with_capacity(data.len());
        for s in data {
            if s.heads.is_empty() {
                out.push(Instance { sentence: s, head: None });
            } else if self.config.repeat_heads {
                out.extend((0..s.heads.len()).map(|k| Instance {
                    sentence: s,
                    head: Some(k),
                }));
            } else {
                let k = self.rng.gen_range(0..s.heads.len());
                out.push(Instance { sentence: s, head: Some(k) });
            }
        }
        out.shuffle(&mut self.rng);
        out
    }

    /// One optimizer update on the batch-mean joint loss.
    pub fn train_step(&mut self, batch: &[Instance]) -> Result<StepStats, TrainError> {
        assert!(!batch.is_empty(), "empty batch");
        self.step += 1;
        let scale = 1.0 / batch.len() as f64;
        self.grads.zero();
        let (mut loss, mut he_loss, mut ter_loss) = (0.0, 0.0, 0.0);
        let mut bad = Vec::new();
        for inst in batch {
            let mut g = Graph::new(&self.model.params);
            let parts = self.model.instance_loss(
                &mut g,
                &inst.sentence.ids,
                &inst.targets(),
                Some(&mut self.dropout),
                &mut self.trace,
            )?;
            let total = g.value(parts.total).scalar();
            if !total.is_finite() {
                bad.push(inst.sentence.index);
                continue;
            }
            loss += total;
            he_loss += g.value(parts.he).scalar();
            ter_loss += parts.ter.map_or(0.0, |t| g.value(t).scalar());
            let root = g.scale(parts.total, scale);
            g.backward(root, &mut self.grads);
        }
        if !bad.is_empty() || !self.grads.all_finite() {
            if bad.is_empty() {
                bad = batch.iter().map(|i| i.sentence.index).collect();
            }
            return Err(TrainError::NonFinite {
                step: self.step,
                sentences: bad,
            });
        }
        let grad_norm = self.grads.clip_global_norm(self.config.grad_clip_norm);
        let clipped_norm = self.grads.global_norm();
        self.optimizer.update(&mut self.model.params, &self.grads);
        Ok(StepStats {
            loss: loss * scale,
            he_loss: he_loss * scale,
            ter_loss: ter_loss * scale,
            grad_norm,
            clipped_norm,
        })
    }

    /// One pass over `data`; returns the mean batch loss.
    pub fn train_epoch(&mut self, data: &[PreparedSentence]) -> Result<f64, TrainError> {
        let instances = self.epoch_instances(data);
        let mut sum = 0.0;
        let mut batches = 0;
        for batch in instances.chunks(self.config.batch_size) {
            sum += self.train_step(batch)?.loss;
            batches += 1;
        }
        Ok(if batches == 0 { 0.0 } else { sum / batches as f64 })
    }

    pub fn evaluate(&self, dev: &[AnnotatedSentence]) -> Result<ScoreReport, TrainError> {
        let pred = evaluator::predict(&self.model, dev)?;
        Ok(evaluator::score(dev, &pred)?)
    }

    /// Mean joint loss over `data` without dropout, each sentence's TER term averaged
    /// over all of its heads.
    pub fn dev_loss(&self, data: &[PreparedSentence]) -> Result<f64, TrainError> {
        let mut total = 0.0;
        for s in data {
            let mut trace = Trace::default();
            let heads: Vec<Option<usize>> = if s.heads.is_empty() {
                vec![None]
            } else {
                (0..s.heads.len()).map(Some).collect()
            };
            let mut he = 0.0;
            let mut ter = 0.0;
            for &head in &heads {
                let inst = Instance { sentence: s, head };
                let mut g = Graph::new(&self.model.params);
                let l = self.model.instance_loss(&mut g, &s.ids, &inst.targets(), None, &mut trace)?;
                he = g.value(l.he).scalar();
                ter += l.ter.map_or(0.0, |t| g.value(t).scalar());
            }
            total += he + ter / heads.len() as f64;
        }
        Ok(total / data.len().max(1) as f64)
    }

    fn check_lengths(&self, corpus: &'static str, data: &[AnnotatedSentence]) -> Result<(), TrainError> {
        let max_len = self.config.model.max_len;
        match data.iter().position(|s| s.len() > max_len) {
            Some(index) => Err(TrainError::SentenceTooLong {
                corpus,
                index,
                len: data[index].len(),
                max_len,
            }),
            None => Ok(()),
        }
    }

    /// Trains until `max_epochs` or until more than `patience` consecutive epochs fail
    /// to improve, keeping the best model. An epoch improves when its dev F1 is higher
    /// than the best so far, or equal to it with a lower dev loss.
    pub fn fit(
        mut self,
        train: &[AnnotatedSentence],
        dev: &[AnnotatedSentence],
    ) -> Result<FitOutcome, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyCorpus("training"));
        }
        if dev.is_empty() {
            return Err(TrainError::EmptyCorpus("dev"));
        }
        self.check_lengths("training", train)?;
        self.check_lengths("dev", dev)?;
        let (data, prepare) = prepare_corpus(&self.model, train);
        if prepare.skipped_sentences + prepare.skipped_heads > 0 {
            warn!(
                "encoding conflicts: {} sentences and {} heads left out of training",
                prepare.skipped_sentences, prepare.skipped_heads
            );
        }
        if data.is_empty() {
            return Err(TrainError::NothingToTrain);
        }
        let (dev_data, _) = prepare_corpus(&self.model, dev);
        let mut best: Option<Checkpoint> = None;
        let mut best_loss = f64::INFINITY;
        let mut history = Vec::new();
        let mut stale = 0;
        for epoch in 1..=self.config.max_epochs {
            let mean_loss = self.train_epoch(&data)?;
            let dev_f1 = self.evaluate(dev)?.f1;
            let dev_loss = self.dev_loss(&dev_data)?;
            let improved = best.as_ref().is_none_or(|b| {
                dev_f1 > b.dev_f1 || (dev_f1 == b.dev_f1 && dev_loss < best_loss)
            });
            info!("epoch {epoch}: loss {mean_loss:.4}, dev loss {dev_loss:.4}, dev F1 {dev_f1:.4}");
            history.push(EpochRecord {
                epoch,
                mean_loss,
                dev_f1,
                dev_loss,
                improved,
            });
            if improved {
                stale = 0;
                best_loss = dev_loss;
                best = Some(Checkpoint {
                    config: self.config.clone(),
                    model: self.model.clone(),
                    dev_f1,
                    step: self.step,
                    epoch,
                });
            } else {
                stale += 1;
                if stale > self.config.patience {
                    break;
                }
            }
        }
        Ok(FitOutcome {
            best: best.expect("at least one epoch ran"),
            history,
            prepare,
        })
    }
}
