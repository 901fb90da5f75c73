//! Hierarchical boundary tagger.
//!
//! A start layer tags span starts from `[h_i; a_i]`. An end layer then tags span ends from
//! `[h^sta_i; a_i; p^se_i]`, where `p^se_i` embeds the distance to the nearest start at or
//! before `i`. Training feeds distances computed from gold start tags; extraction feeds
//! distances computed from predicted start tags. The two paths are separate methods, so a
//! caller cannot mix them up.

use rand::Rng;
use thiserror::Error;

use crate::encoder::{maybe_dropout, Dropout};
use crate::nn::{argmax, softmax_rows, BiLstmParams, Graph, NodeId, ParamId, Params, Tensor};
use crate::tagset::{self, BoundaryTagging, Decoded, TagSpace};

/// Probabilities are clamped to this before taking the log in the loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HbtError {
    #[error("start distance {value} at token {index} exceeds the distance constant {c}")]
    DistanceOutOfRange { index: usize, value: usize, c: usize },
    #[error("tagging has {got} tokens but the input has {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HbtConfig {
    /// Width of the per-token base vectors `h_i`.
    pub base_dim: usize,
    /// Width of the per-token auxiliary vectors `a_i`.
    pub aux_dim: usize,
    /// Per-direction hidden size of both tagging layers.
    pub hidden_dim: usize,
    pub tag_count: usize,
    /// Distance constant; the distance table has `c + 1` rows.
    pub distance_constant: usize,
    pub distance_dim: usize,
    /// When false, end tags are projected from the start-layer states directly.
    pub hierarchical: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndLayer {
    pub lstm: BiLstmParams,
    pub distance_emb: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hbt {
    pub config: HbtConfig,
    pub start_lstm: BiLstmParams,
    pub start_proj: (ParamId, ParamId),
    pub end_layer: Option<EndLayer>,
    pub end_proj: (ParamId, ParamId),
}

/// Per-token base and auxiliary vectors, as graph nodes of equal row count.
#[derive(Debug, Clone, Copy)]
pub struct HbtInput {
    pub base: NodeId,
    pub aux: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct StartOutput {
    /// `h^sta`, `n × 2·hidden`.
    pub states: NodeId,
    pub logits: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceSource {
    Gold,
    Predicted,
}

/// Instrumentation of tagging work.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub encoder_passes: usize,
    /// One per start layer and one per end layer run.
    pub tagging_passes: usize,
    pub distance_sources: Vec<DistanceSource>,
    pub unmatched_starts: usize,
}

/// Losses of one tagger on one sentence.
#[derive(Debug, Clone, Copy)]
pub struct HbtLoss {
    pub total: NodeId,
}

fn linear_params<R: Rng>(
    params: &mut Params,
    prefix: &str,
    input: usize,
    output: usize,
    rng: &mut R,
) -> (ParamId, ParamId) {
    let bound = 1.0 / (input as f64).sqrt();
    (
        params.add_uniform(format!("{prefix}.w"), input, output, bound, rng),
        params.add_uniform(format!("{prefix}.b"), 1, output, bound, rng),
    )
}

impl Hbt {
    pub fn new<R: Rng>(params: &mut Params, prefix: &str, config: HbtConfig, rng: &mut R) -> Self {
        let h = config.hidden_dim;
        let start_lstm = BiLstmParams::new(
            params,
            &format!("{prefix}.start_lstm"),
            config.base_dim + config.aux_dim,
            h,
            rng,
        );
        let start_proj = linear_params(params, &format!("{prefix}.start_proj"), 2 * h, config.tag_count, rng);
        let end_layer = config.hierarchical.then(|| {
            let bound = (3.0 / config.distance_dim as f64).sqrt();
            let distance_emb = params.add_uniform(
                format!("{prefix}.distance_emb"),
                config.distance_constant + 1,
                config.distance_dim,
                bound,
                rng,
            );
            let lstm = BiLstmParams::new(
                params,
                &format!("{prefix}.end_lstm"),
                2 * h + config.aux_dim + config.distance_dim,
                h,
                rng,
            );
            EndLayer { lstm, distance_emb }
        });
        let end_proj = linear_params(params, &format!("{prefix}.end_proj"), 2 * h, config.tag_count, rng);
        Self {
            config,
            start_lstm,
            start_proj,
            end_layer,
            end_proj,
        }
    }

    pub fn forward_start(
        &self,
        g: &mut Graph,
        input: HbtInput,
        dropout: Option<&mut Dropout>,
        trace: &mut Trace,
    ) -> StartOutput {
        trace.tagging_passes += 1;
        let x = g.concat(&[input.base, input.aux]);
        let states = g.bilstm(x, &self.start_lstm);
        let states = maybe_dropout(g, states, dropout);
        let logits = g.linear(states, self.start_proj.0, self.start_proj.1);
        StartOutput { states, logits }
    }

    pub fn forward_end(
        &self,
        g: &mut Graph,
        start: StartOutput,
        input: HbtInput,
        distances: &[usize],
        dropout: Option<&mut Dropout>,
        trace: &mut Trace,
    ) -> Result<NodeId, HbtError> {
        trace.tagging_passes += 1;
        let n = g.value(start.states).rows;
        if distances.len() != n {
            return Err(HbtError::LengthMismatch {
                expected: n,
                got: distances.len(),
            });
        }
        let Some(end) = self.end_layer else {
            return Ok(g.linear(start.states, self.end_proj.0, self.end_proj.1));
        };
        let c = self.config.distance_constant;
        if let Some((index, &value)) = distances.iter().enumerate().find(|(_, &d)| d > c) {
            return Err(HbtError::DistanceOutOfRange { index, value, c });
        }
        let dist = g.gather(end.distance_emb, distances);
        let x = g.concat(&[start.states, input.aux, dist]);
        let states = g.bilstm(x, &end.lstm);
        let states = maybe_dropout(g, states, dropout);
        Ok(g.linear(states, self.end_proj.0, self.end_proj.1))
    }

    /// Mean over tokens of the negative log-probabilities of the gold start and end tags.
    pub fn loss(
        &self,
        g: &mut Graph,
        start_logits: NodeId,
        end_logits: NodeId,
        gold_start: &[usize],
        gold_end: &[usize],
    ) -> NodeId {
        let s = g.softmax_nll(start_logits, gold_start, PROB_FLOOR);
        let e = g.softmax_nll(end_logits, gold_end, PROB_FLOOR);
        g.add(s, e)
    }

    /// Training pass: the end layer sees distances derived from the gold start tags.
    pub fn train_loss(
        &self,
        g: &mut Graph,
        input: HbtInput,
        gold: &BoundaryTagging,
        mut dropout: Option<&mut Dropout>,
        trace: &mut Trace,
    ) -> Result<HbtLoss, HbtError> {
        let n = g.value(input.base).rows;
        if gold.len() != n {
            return Err(HbtError::LengthMismatch {
                expected: n,
                got: gold.len(),
            });
        }
        let start = self.forward_start(g, input, dropout.as_deref_mut(), trace);
        let distances = tagset::start_distances(&gold.start_tags, self.config.distance_constant);
        trace.distance_sources.push(DistanceSource::Gold);
        let end_logits = self.forward_end(g, start, input, &distances, dropout, trace)?;
        let total = self.loss(g, start.logits, end_logits, &gold.start_tags, &gold.end_tags);
        Ok(HbtLoss { total })
    }

    /// Inference pass: greedy start tags, distances from them, greedy end tags, decode.
    pub fn extract(
        &self,
        g: &mut Graph,
        input: HbtInput,
        space: TagSpace,
        trace: &mut Trace,
    ) -> Result<(BoundaryTagging, Decoded), HbtError> {
        let start = self.forward_start(g, input, None, trace);
        let start_tags = greedy_tags(g.value(start.logits));
        let distances = tagset::start_distances(&start_tags, self.config.distance_constant);
        trace.distance_sources.push(DistanceSource::Predicted);
        let end_logits = self.forward_end(g, start, input, &distances, None, trace)?;
        let tagging = BoundaryTagging {
            start_tags,
            end_tags: greedy_tags(g.value(end_logits)),
            space,
        };
        let decoded = tagset::decode(&tagging);
        trace.unmatched_starts += decoded.unmatched_starts;
        Ok((tagging, decoded))
    }
}

/// Per-row argmax of the tag distribution; argmax of the logits picks the same tag.
pub fn greedy_tags(logits: &Tensor) -> Vec<usize> {
    logits.iter_rows().map(argmax).collect()
}

pub fn distributions(logits: &Tensor) -> Tensor {
    softmax_rows(logits)
}
