//! Head-entity and tail-entity/relation extractors over a shared encoder, and triplet
//! assembly.
//!
//! The HE tagger sees `[h_i; g]`. For a given head `h` the TER tagger sees
//! `[h_i; g; h_start; h_end; p^ht_i]` where `p^ht_i` embeds the clipped signed distance
//! from token `i` to the head anchor.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EntitySpan, TokenSequence, Triplet, Vocab, Vocabularies};
use crate::encoder::{Dropout, Encoded, EncodedSentence, Encoder, SentenceIds, TokenFeatureConfig};
use crate::hbt::{Hbt, HbtConfig, HbtError, HbtInput, Trace};
use crate::nn::{Graph, NodeId, ParamId, Params};
use crate::tagset::{BoundaryTagging, HeadTagMode, TagSpace};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tagger(#[from] HbtError),
    #[error("head span [{start}..{end}] is out of range for a {len}-token sentence")]
    HeadOutOfRange { start: usize, end: usize, len: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadDistanceAnchor {
    #[default]
    Start,
    End,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    #[serde(flatten)]
    pub features: TokenFeatureConfig,
    /// Distance constant for start distances and clipping bound for head distances.
    pub max_len: usize,
    /// Width of both position embeddings (start distance and head distance).
    pub position_dim: usize,
    pub dropout: f64,
    pub head_distance_anchor: HeadDistanceAnchor,
    pub no_pht: bool,
    pub no_hierarchy: bool,
    pub binary_head_types: bool,
    /// Separate encoders for the two extractors.
    pub pipeline_mode: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            features: TokenFeatureConfig::default(),
            max_len: 100,
            position_dim: 30,
            dropout: 0.4,
            head_distance_anchor: HeadDistanceAnchor::Start,
            no_pht: false,
            no_hierarchy: false,
            binary_head_types: false,
            pipeline_mode: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.features.validate().map_err(ModelError::Config)?;
        if self.max_len == 0 || self.position_dim == 0 {
            return Err(ModelError::Config("max_len and position_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_tag_mode(&self) -> HeadTagMode {
        if self.binary_head_types {
            HeadTagMode::Binary
        } else {
            HeadTagMode::Typed
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.features.output_dim()
    }

    pub fn he_aux_dim(&self) -> usize {
        self.hidden_width()
    }

    /// `|g| + |h^h| + |p^ht|`
    pub fn ter_aux_dim(&self) -> usize {
        let pht = if self.no_pht { 0 } else { self.position_dim };
        self.hidden_width() + 2 * self.hidden_width() + pht
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadEntityContext {
    pub span: EntitySpan,
    /// `[hidden[start]; hidden[end]]`
    pub representation: Vec<f64>,
    /// Clipped signed distance of each token to the anchor.
    pub distances: Vec<isize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExtractionResult {
    /// Extracted heads with their predicted type label.
    pub heads: Vec<(EntitySpan, String)>,
    /// For each entry of `heads`, its `(tail, relation)` set.
    pub tails: Vec<Vec<(EntitySpan, String)>>,
    /// Deduplicated triplets without entity types.
    pub triplets: Vec<Triplet>,
}

/// Gold targets for one training sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingTargets {
    pub he: BoundaryTagging,
    /// Sampled gold head and its TER targets; `None` for sentences without triplets.
    pub ter: Option<(EntitySpan, BoundaryTagging)>,
}

#[derive(Debug, Clone, Copy)]
pub struct InstanceLoss {
    pub total: NodeId,
    pub he: NodeId,
    pub ter: Option<NodeId>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocabs: Vocabularies,
    pub head_vocab: Vocab,
    pub params: Params,
    pub he_encoder: Encoder,
    /// Same as `he_encoder` unless in pipeline mode.
    pub ter_encoder: Encoder,
    pub he_tagger: Hbt,
    pub ter_tagger: Hbt,
    pub head_position_emb: Option<ParamId>,
}

impl Model {
    pub fn new(config: ModelConfig, vocabs: Vocabularies, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let (he_encoder, ter_encoder) = if config.pipeline_mode {
            let a = Encoder::new(&mut params, "he_enc", config.features, &vocabs, &mut rng);
            let b = Encoder::new(&mut params, "ter_enc", config.features, &vocabs, &mut rng);
            (a, b)
        } else {
            let e = Encoder::new(&mut params, "enc", config.features, &vocabs, &mut rng);
            (e, e)
        };
        let head_vocab = config.head_tag_mode().head_vocab(&vocabs.tags.entity_types);
        let tagger = |aux_dim: usize, tag_count: usize| HbtConfig {
            base_dim: config.hidden_width(),
            aux_dim,
            hidden_dim: config.features.hidden_dim,
            tag_count,
            distance_constant: config.max_len,
            distance_dim: config.position_dim,
            hierarchical: !config.no_hierarchy,
        };
        let he_tagger = Hbt::new(
            &mut params,
            "he",
            tagger(config.he_aux_dim(), head_vocab.len()),
            &mut rng,
        );
        let ter_tagger = Hbt::new(
            &mut params,
            "ter",
            tagger(config.ter_aux_dim(), vocabs.tags.relation_types.len()),
            &mut rng,
        );
        let head_position_emb = (!config.no_pht).then(|| {
            let bound = (3.0 / config.position_dim as f64).sqrt();
            params.add_uniform(
                "ter.head_position_emb",
                2 * config.max_len + 1,
                config.position_dim,
                bound,
                &mut rng,
            )
        });
        Ok(Self {
            config,
            vocabs,
            head_vocab,
            params,
            he_encoder,
            ter_encoder,
            he_tagger,
            ter_tagger,
            head_position_emb,
        })
    }

    /// Rebuilds the model structure and swaps in stored parameter values.
    pub fn with_params(
        config: ModelConfig,
        vocabs: Vocabularies,
        params: Params,
    ) -> Result<Self, ModelError> {
        let mut model = Self::new(config, vocabs, 0)?;
        if params.signature() != model.params.signature() {
            return Err(ModelError::Config(
                "stored parameters do not match the configured model structure".into(),
            ));
        }
        // ids follow insertion order, which is fixed by the configuration
        for (id, p) in model.params.iter().map(|(id, p)| (id, p.name.clone())).collect::<Vec<_>>() {
            let stored = params.id(&p).expect("signature checked");
            *model.params.get_mut(id) = params.get(stored).clone();
            model.params.set_trainable(id, params.param(stored).trainable);
        }
        Ok(model)
    }

    pub fn is_pipeline(&self) -> bool {
        self.config.pipeline_mode
    }

    pub fn sentence_ids(&self, s: &TokenSequence) -> SentenceIds {
        SentenceIds::new(s, &self.vocabs, &self.config.features)
    }

    pub fn build_he_features(&self, g: &mut Graph, enc: &Encoded) -> HbtInput {
        let aux = g.broadcast_rows(enc.global, enc.len);
        HbtInput {
            base: enc.hidden,
            aux,
        }
    }

    fn head_distances(&self, len: usize, head: &EntitySpan) -> Vec<isize> {
        let anchor = match self.config.head_distance_anchor {
            HeadDistanceAnchor::Start => head.start,
            HeadDistanceAnchor::End => head.end,
        } as isize;
        let bound = self.config.max_len as isize;
        (0..len as isize).map(|i| (i - anchor).clamp(-bound, bound)).collect()
    }

    pub fn build_ter_features(
        &self,
        g: &mut Graph,
        enc: &Encoded,
        head: &EntitySpan,
    ) -> Result<HbtInput, ModelError> {
        if head.start > head.end || head.end >= enc.len {
            return Err(ModelError::HeadOutOfRange {
                start: head.start,
                end: head.end,
                len: enc.len,
            });
        }
        let global = g.broadcast_rows(enc.global, enc.len);
        let start_rows = g.rows(enc.hidden, &vec![head.start; enc.len]);
        let end_rows = g.rows(enc.hidden, &vec![head.end; enc.len]);
        let mut parts = vec![global, start_rows, end_rows];
        if let Some(table) = self.head_position_emb {
            let bound = self.config.max_len as isize;
            let rows: Vec<usize> = self
                .head_distances(enc.len, head)
                .into_iter()
                .map(|d| (d + bound) as usize)
                .collect();
            parts.push(g.gather(table, &rows));
        }
        let aux = g.concat(&parts);
        Ok(HbtInput {
            base: enc.hidden,
            aux,
        })
    }

    pub fn head_context(&self, enc: &EncodedSentence, head: &EntitySpan) -> HeadEntityContext {
        let mut representation = enc.hidden.row(head.start).to_vec();
        representation.extend_from_slice(enc.hidden.row(head.end));
        HeadEntityContext {
            span: head.clone(),
            representation,
            distances: self.head_distances(enc.hidden.rows, head),
        }
    }

    fn encode_both(
        &self,
        g: &mut Graph,
        ids: &SentenceIds,
        mut dropout: Option<&mut Dropout>,
        trace: &mut Trace,
    ) -> (Encoded, Encoded) {
        trace.encoder_passes += 1;
        let he = self.he_encoder.run(g, ids, dropout.as_deref_mut());
        if self.is_pipeline() {
            trace.encoder_passes += 1;
            (he, self.ter_encoder.run(g, ids, dropout))
        } else {
            (he, he)
        }
    }

    /// Inference-mode encoding of the shared (or HE) encoder.
    pub fn encode_sentence(&self, s: &TokenSequence) -> EncodedSentence {
        let mut g = Graph::new(&self.params);
        let enc = self.he_encoder.run(&mut g, &self.sentence_ids(s), None);
        EncodedSentence {
            hidden: g.value(enc.hidden).clone(),
            global: g.value(enc.global).data.clone(),
        }
    }

    pub fn extract_heads(
        &self,
        g: &mut Graph,
        enc: &Encoded,
        trace: &mut Trace,
    ) -> Result<Vec<(EntitySpan, String)>, ModelError> {
        let input = self.build_he_features(g, enc);
        let (_, decoded) = self.he_tagger.extract(g, input, TagSpace::Entity, trace)?;
        Ok(decoded
            .spans
            .iter()
            .map(|s| {
                let label = self.head_vocab.label(s.label).unwrap_or_default().to_string();
                (EntitySpan::new(s.start, s.end, label.clone()), label)
            })
            .collect())
    }

    pub fn extract_tails(
        &self,
        g: &mut Graph,
        enc: &Encoded,
        head: &EntitySpan,
        trace: &mut Trace,
    ) -> Result<Vec<(EntitySpan, String)>, ModelError> {
        let input = self.build_ter_features(g, enc, head)?;
        let (_, decoded) = self.ter_tagger.extract(g, input, TagSpace::Relation, trace)?;
        let relations = &self.vocabs.tags.relation_types;
        Ok(decoded
            .spans
            .iter()
            .map(|s| {
                let rel = relations.label(s.label).unwrap_or_default().to_string();
                (EntitySpan::untyped(s.start, s.end), rel)
            })
            .collect())
    }

    pub fn extract_triplets(&self, s: &TokenSequence) -> Result<ExtractionResult, ModelError> {
        self.extract_triplets_traced(s, &mut Trace::default())
    }

    /// Encodes once, extracts heads, then runs the TER tagger once per distinct head span.
    pub fn extract_triplets_traced(
        &self,
        s: &TokenSequence,
        trace: &mut Trace,
    ) -> Result<ExtractionResult, ModelError> {
        let mut g = Graph::new(&self.params);
        let ids = self.sentence_ids(s);
        let (he_enc, ter_enc) = self.encode_both(&mut g, &ids, None, trace);
        let heads = self.extract_heads(&mut g, &he_enc, trace)?;
        let mut result = ExtractionResult::default();
        let mut triplets = BTreeSet::new();
        let mut seen_spans = BTreeSet::new();
        for (head, label) in heads {
            // the predicted type never reaches the TER tagger
            let span = EntitySpan::untyped(head.start, head.end);
            let tails = if seen_spans.insert(span.bounds()) {
                self.extract_tails(&mut g, &ter_enc, &span, trace)?
            } else {
                let k = result.heads.iter().position(|(h, _)| h.bounds() == span.bounds());
                k.map(|k| result.tails[k].clone()).unwrap_or_default()
            };
            for (tail, rel) in &tails {
                triplets.insert(Triplet::new(span.clone(), rel.clone(), tail.clone()));
            }
            result.heads.push((head, label));
            result.tails.push(tails);
        }
        result.triplets = triplets.into_iter().collect();
        Ok(result)
    }

    /// Joint loss of one sentence: HE tagger loss plus, when a head was sampled, the TER
    /// tagger loss for that head.
    pub fn instance_loss(
        &self,
        g: &mut Graph,
        ids: &SentenceIds,
        targets: &TrainingTargets,
        mut dropout: Option<&mut Dropout>,
        trace: &mut Trace,
    ) -> Result<InstanceLoss, ModelError> {
        let (he_enc, ter_enc) = self.encode_both(g, ids, dropout.as_deref_mut(), trace);
        let he_input = self.build_he_features(g, &he_enc);
        let he = self
            .he_tagger
            .train_loss(g, he_input, &targets.he, dropout.as_deref_mut(), trace)?
            .total;
        let Some((head, gold)) = &targets.ter else {
            return Ok(InstanceLoss {
                total: he,
                he,
                ter: None,
            });
        };
        let ter_input = self.build_ter_features(g, &ter_enc, head)?;
        let ter = self
            .ter_tagger
            .train_loss(g, ter_input, gold, dropout, trace)?
            .total;
        let total = g.add(he, ter);
        Ok(InstanceLoss {
            total,
            he,
            ter: Some(ter),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabularies, AnnotatedSentence, VocabConfig};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            features: TokenFeatureConfig {
                word_dim: 4,
                char_emb_dim: 3,
                char_cnn_window: 3,
                char_cnn_filters: 3,
                max_token_chars: 8,
                pos_dim: 2,
                hidden_dim: 3,
                ..Default::default()
            },
            max_len: 12,
            position_dim: 2,
            dropout: 0.0,
            ..Default::default()
        }
    }

    fn corpus() -> Vec<AnnotatedSentence> {
        let tokens: Vec<String> = "Trump was born in New York".split(' ').map(String::from).collect();
        let s = TokenSequence::without_pos(tokens).unwrap();
        vec![AnnotatedSentence::new(
            s,
            vec![Triplet::new(
                EntitySpan::new(0, 0, "PER"),
                "Born_In",
                EntitySpan::new(4, 5, "LOC"),
            )],
        )
        .unwrap()
        .0]
    }

    fn model(cfg: ModelConfig) -> Model {
        let v = build_vocabularies(&corpus(), VocabConfig::default()).unwrap();
        Model::new(cfg, v, 5).unwrap()
    }

    #[test]
    fn he_features_repeat_the_global_vector() {
        let m = model(tiny_config());
        let s = corpus()[0].sentence().clone();
        let mut g = Graph::new(&m.params);
        let enc = m.he_encoder.run(&mut g, &m.sentence_ids(&s), None);
        let inp = m.build_he_features(&mut g, &enc);
        let aux = g.value(inp.aux);
        assert_eq!(aux.cols, 6);
        assert_eq!(g.value(inp.base).cols + aux.cols, 2 * 2 * 3);
        for r in aux.iter_rows() {
            assert_eq!(r, g.value(enc.global).row(0));
        }
    }

    #[test]
    fn single_token_sentence_global_equals_hidden() {
        let m = model(tiny_config());
        let s = TokenSequence::without_pos(vec!["Trump".into()]).unwrap();
        let e = m.encode_sentence(&s);
        assert_eq!(e.hidden.rows, 1);
        assert_eq!(e.global, e.hidden.row(0));
        let mut g = Graph::new(&m.params);
        let enc = m.he_encoder.run(&mut g, &m.sentence_ids(&s), None);
        let inp = m.build_he_features(&mut g, &enc);
        assert_eq!(g.value(inp.aux).row(0), e.hidden.row(0));
    }

    #[test]
    fn ter_features_carry_head_states_and_distances() {
        let m = model(tiny_config());
        let s = corpus()[0].sentence().clone();
        let enc_val = m.encode_sentence(&s);
        let head = EntitySpan::new(4, 5, "");
        let mut g = Graph::new(&m.params);
        let enc = m.ter_encoder.run(&mut g, &m.sentence_ids(&s), None);
        let inp = m.build_ter_features(&mut g, &enc, &head).unwrap();
        let aux = g.value(inp.aux).clone();
        assert_eq!(aux.cols, 6 + 12 + 2);
        assert_eq!(aux.cols, m.config.ter_aux_dim());
        let ctx = m.head_context(&enc_val, &head);
        assert_eq!(ctx.distances, vec![-4, -3, -2, -1, 0, 1]);
        assert_eq!(ctx.representation.len(), 12);
        for r in aux.iter_rows() {
            assert_eq!(&r[6..18], &ctx.representation[..]);
        }
        let table = m.head_position_emb.unwrap();
        assert_eq!(&aux.row(4)[18..], m.params.get(table).row(12));

        let other = m.build_ter_features(&mut g, &enc, &EntitySpan::new(0, 0, "")).unwrap();
        assert_ne!(g.value(other.aux).data, aux.data);
        assert!(matches!(
            m.build_ter_features(&mut g, &enc, &EntitySpan::new(3, 6, "")),
            Err(ModelError::HeadOutOfRange { .. })
        ));
    }

    #[test]
    fn head_distances_are_clipped() {
        let m = model(ModelConfig {
            max_len: 2,
            ..tiny_config()
        });
        let ctx = m.head_distances(6, &EntitySpan::new(4, 5, ""));
        assert_eq!(ctx, vec![-2, -2, -2, -1, 0, 1]);
        let end_anchor = model(ModelConfig {
            head_distance_anchor: HeadDistanceAnchor::End,
            ..tiny_config()
        });
        assert_eq!(end_anchor.head_distances(6, &EntitySpan::new(4, 5, ""))[5], 0);
    }

    #[test]
    fn untrained_extraction_is_well_formed() {
        let m = model(tiny_config());
        let s = corpus()[0].sentence().clone();
        let mut trace = Trace::default();
        let r = m.extract_triplets_traced(&s, &mut trace).unwrap();
        assert_eq!(trace.encoder_passes, 1);
        let distinct: BTreeSet<_> = r.heads.iter().map(|(h, _)| h.bounds()).collect();
        assert_eq!(trace.tagging_passes, 2 + 2 * distinct.len());
        for t in &r.triplets {
            assert!(t.head.start <= t.head.end && t.tail.start <= t.tail.end);
            assert!(t.head.entity_type.is_empty() && t.tail.entity_type.is_empty());
            assert!(distinct.contains(&t.head.bounds()));
        }
    }

    #[test]
    fn rebuilt_model_matches_original() {
        let m = model(tiny_config());
        let again = Model::with_params(m.config, m.vocabs.clone(), m.params.clone()).unwrap();
        assert_eq!(again.params, m.params);
        let wrong = Model::with_params(
            ModelConfig {
                no_pht: true,
                ..m.config
            },
            m.vocabs.clone(),
            m.params.clone(),
        );
        assert!(wrong.is_err());
    }
}
