//! Shared sentence encoder: word, character-CNN and POS features through a BiLSTM, plus
//! the max-pooled sentence vector.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenSequence, Vocabularies, CHAR_PAD_ID};
use crate::nn::{BiLstmParams, Graph, NodeId, ParamId, Params, Tensor};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected a token followed by {expected} floats, found {found} values")]
    Dimension {
        path: String,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}:{line}: invalid float `{value}`")]
    BadFloat {
        path: String,
        line: usize,
        value: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenFeatureConfig {
    pub word_dim: usize,
    pub char_emb_dim: usize,
    pub char_cnn_window: usize,
    pub char_cnn_filters: usize,
    /// Longer tokens are truncated to this many characters.
    pub max_token_chars: usize,
    pub pos_dim: usize,
    /// Per direction.
    pub hidden_dim: usize,
    /// Disables the character CNN entirely.
    pub no_char: bool,
    pub freeze_word_embeddings: bool,
}

impl Default for TokenFeatureConfig {
    fn default() -> Self {
        Self {
            word_dim: 300,
            char_emb_dim: 30,
            char_cnn_window: 3,
            char_cnn_filters: 50,
            max_token_chars: 25,
            pos_dim: 30,
            hidden_dim: 100,
            no_char: false,
            freeze_word_embeddings: false,
        }
    }
}

impl TokenFeatureConfig {
    pub fn feature_dim(&self) -> usize {
        let chars = if self.no_char { 0 } else { self.char_cnn_filters };
        self.word_dim + chars + self.pos_dim
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    pub fn validate(&self) -> Result<(), String> {
        let dims = [
            ("word_dim", self.word_dim),
            ("char_emb_dim", self.char_emb_dim),
            ("char_cnn_window", self.char_cnn_window),
            ("char_cnn_filters", self.char_cnn_filters),
            ("max_token_chars", self.max_token_chars),
            ("pos_dim", self.pos_dim),
            ("hidden_dim", self.hidden_dim),
        ];
        match dims.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(format!("{name} must be positive")),
            None if self.max_token_chars < self.char_cnn_window => {
                Err("max_token_chars must be at least char_cnn_window".into())
            }
            None => Ok(()),
        }
    }
}

/// Vocabulary ids for one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceIds {
    pub words: Vec<usize>,
    pub pos: Vec<usize>,
    /// All tokens' characters, concatenated.
    pub chars: Vec<usize>,
    /// `(first char row, length)` per token; length is at least the CNN window.
    pub segments: Vec<(usize, usize)>,
}

impl SentenceIds {
    pub fn new(s: &TokenSequence, vocabs: &Vocabularies, cfg: &TokenFeatureConfig) -> Self {
        let mut chars = Vec::new();
        let mut segments = Vec::with_capacity(s.len());
        for tok in s.tokens() {
            let first = chars.len();
            chars.extend(tok.chars().take(cfg.max_token_chars).map(|c| vocabs.char_id(c)));
            while chars.len() - first < cfg.char_cnn_window {
                chars.push(CHAR_PAD_ID);
            }
            segments.push((first, chars.len() - first));
        }
        Self {
            words: s.tokens().iter().map(|t| vocabs.token_id(t)).collect(),
            pos: s.pos_tags().iter().map(|p| vocabs.pos_id(p)).collect(),
            chars,
            segments,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Inverted dropout with its own random stream.
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    pub fn apply(&mut self, g: &mut Graph, x: NodeId) -> NodeId {
        g.dropout(x, self.rate, &mut self.rng)
    }
}

pub(crate) fn maybe_dropout(g: &mut Graph, x: NodeId, dropout: Option<&mut Dropout>) -> NodeId {
    match dropout {
        Some(d) => d.apply(g, x),
        None => x,
    }
}

/// Graph handles of an encoded sentence.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `n × 2·hidden`
    pub hidden: NodeId,
    /// `1 × 2·hidden`
    pub global: NodeId,
    pub len: usize,
}

/// Plain-value view of an encoded sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSentence {
    pub hidden: Tensor,
    pub global: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Encoder {
    pub config: TokenFeatureConfig,
    pub word_emb: ParamId,
    pub char_emb: Option<ParamId>,
    pub char_conv: Option<(ParamId, ParamId)>,
    pub pos_emb: ParamId,
    pub lstm: BiLstmParams,
}

impl Encoder {
    pub fn new<R: Rng>(
        params: &mut Params,
        prefix: &str,
        cfg: TokenFeatureConfig,
        vocabs: &Vocabularies,
        rng: &mut R,
    ) -> Self {
        let emb_bound = |dim: usize| (3.0 / dim as f64).sqrt();
        let word_emb = params.add_uniform(
            format!("{prefix}.word_emb"),
            vocabs.tokens.len(),
            cfg.word_dim,
            emb_bound(cfg.word_dim),
            rng,
        );
        if cfg.freeze_word_embeddings {
            params.set_trainable(word_emb, false);
        }
        let (char_emb, char_conv) = if cfg.no_char {
            (None, None)
        } else {
            let emb = params.add_uniform(
                format!("{prefix}.char_emb"),
                vocabs.chars.len(),
                cfg.char_emb_dim,
                emb_bound(cfg.char_emb_dim),
                rng,
            );
            let fan_in = cfg.char_cnn_window * cfg.char_emb_dim;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = params.add_uniform(
                format!("{prefix}.char_conv.w"),
                fan_in,
                cfg.char_cnn_filters,
                bound,
                rng,
            );
            let b = params.add_uniform(
                format!("{prefix}.char_conv.b"),
                1,
                cfg.char_cnn_filters,
                bound,
                rng,
            );
            (Some(emb), Some((w, b)))
        };
        let pos_emb = params.add_uniform(
            format!("{prefix}.pos_emb"),
            vocabs.pos.len(),
            cfg.pos_dim,
            emb_bound(cfg.pos_dim),
            rng,
        );
        let lstm = BiLstmParams::new(
            params,
            &format!("{prefix}.lstm"),
            cfg.feature_dim(),
            cfg.hidden_dim,
            rng,
        );
        Self {
            config: cfg,
            word_emb,
            char_emb,
            char_conv,
            pos_emb,
            lstm,
        }
    }

    /// Per-token features `[word; char-CNN; POS]`, `n × feature_dim`.
    pub fn embed_tokens(&self, g: &mut Graph, ids: &SentenceIds) -> NodeId {
        let words = g.gather(self.word_emb, &ids.words);
        let pos = g.gather(self.pos_emb, &ids.pos);
        match (self.char_emb, self.char_conv) {
            (Some(emb), Some((w, b))) => {
                let chars = g.gather(emb, &ids.chars);
                let cnn = g.char_cnn(chars, &ids.segments, w, b, self.config.char_cnn_window);
                g.concat(&[words, cnn, pos])
            }
            _ => g.concat(&[words, pos]),
        }
    }

    /// BiLSTM over the features, then max-pooling over real tokens.
    pub fn encode(
        &self,
        g: &mut Graph,
        features: NodeId,
        mut dropout: Option<&mut Dropout>,
    ) -> Encoded {
        let x = maybe_dropout(g, features, dropout.as_deref_mut());
        let hidden = g.bilstm(x, &self.lstm);
        let hidden = maybe_dropout(g, hidden, dropout);
        let global = g.col_max(hidden);
        Encoded {
            hidden,
            global,
            len: g.value(hidden).rows,
        }
    }

    pub fn run(&self, g: &mut Graph, ids: &SentenceIds, dropout: Option<&mut Dropout>) -> Encoded {
        let features = self.embed_tokens(g, ids);
        self.encode(g, features, dropout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PretrainedStats {
    pub vectors_read: usize,
    /// Vocabulary rows initialized from the file.
    pub matched: usize,
}

/// Copies whitespace-separated text vectors (`token f1 … fd`) into the rows of `table`
/// whose token appears in `vocabs`. A leading `count dim` header line is skipped.
pub fn load_pretrained(
    path: &Path,
    vocabs: &Vocabularies,
    table: &mut Tensor,
) -> Result<PretrainedStats, EncoderError> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(|source| EncoderError::Io {
        path: name.clone(),
        source,
    })?;
    let dim = table.cols;
    let mut stats = PretrainedStats {
        vectors_read: 0,
        matched: 0,
    };
    let mut filled = vec![false; table.rows];
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EncoderError::Io {
            path: name.clone(),
            source,
        })?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        if i == 0 && values.len() == 1 && token.parse::<usize>().is_ok() {
            continue;
        }
        if values.len() != dim {
            return Err(EncoderError::Dimension {
                path: name,
                line: i + 1,
                expected: dim,
                found: values.len(),
            });
        }
        stats.vectors_read += 1;
        let Some(id) = vocabs.tokens.id(token) else { continue };
        let row = table.row_mut(id);
        for (slot, v) in row.iter_mut().zip(&values) {
            *slot = v.parse().map_err(|_| EncoderError::BadFloat {
                path: name.clone(),
                line: i + 1,
                value: v.to_string(),
            })?;
        }
        if !filled[id] {
            filled[id] = true;
            stats.matched += 1;
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabularies, AnnotatedSentence, VocabConfig, TOKEN_UNK_ID};
    use rand::SeedableRng;
    use std::io::Write;

    fn vocabs() -> Vocabularies {
        let s = TokenSequence::new(
            vec!["Trump".into(), "was".into(), "born".into(), "a".into()],
            vec!["NNP".into(), "VBD".into(), "VBN".into(), "DT".into()],
        )
        .unwrap();
        build_vocabularies(
            &[AnnotatedSentence::new(s, vec![]).unwrap().0],
            VocabConfig::default(),
        )
        .unwrap()
    }

    fn seq(words: &[&str]) -> TokenSequence {
        TokenSequence::without_pos(words.iter().map(|w| w.to_string()).collect()).unwrap()
    }

    #[test]
    fn default_dims_give_380_wide_features() {
        let cfg = TokenFeatureConfig::default();
        assert_eq!(cfg.feature_dim(), 380);
        let v = vocabs();
        let mut params = Params::new();
        let enc = Encoder::new(&mut params, "enc", cfg, &v, &mut ChaCha8Rng::seed_from_u64(0));
        let ids = SentenceIds::new(&seq(&["Trump", "was"]), &v, &cfg);
        let mut g = Graph::new(&params);
        let x = enc.embed_tokens(&mut g, &ids);
        assert_eq!(g.value(x).shape(), (2, 380));
        let e = enc.encode(&mut g, x, None);
        assert_eq!(g.value(e.hidden).shape(), (2, 200));
    }

    #[test]
    fn short_tokens_are_padded_to_the_window() {
        let v = vocabs();
        let cfg = TokenFeatureConfig::default();
        let ids = SentenceIds::new(&seq(&["a", "Trump"]), &v, &cfg);
        assert_eq!(ids.segments, vec![(0, 3), (3, 5)]);
        assert_eq!(&ids.chars[1..3], &[CHAR_PAD_ID, CHAR_PAD_ID]);
        let long = "x".repeat(40);
        let ids = SentenceIds::new(&seq(&[&long]), &v, &cfg);
        assert_eq!(ids.segments, vec![(0, 25)]);
    }

    #[test]
    fn oov_token_uses_the_unknown_row() {
        let v = vocabs();
        let cfg = TokenFeatureConfig {
            word_dim: 4,
            ..Default::default()
        };
        let mut params = Params::new();
        let enc = Encoder::new(&mut params, "enc", cfg, &v, &mut ChaCha8Rng::seed_from_u64(0));
        let ids = SentenceIds::new(&seq(&["Obama"]), &v, &cfg);
        assert_eq!(ids.words, vec![TOKEN_UNK_ID]);
        let mut g = Graph::new(&params);
        let x = enc.embed_tokens(&mut g, &ids);
        assert_eq!(&g.value(x).row(0)[..4], params.get(enc.word_emb).row(TOKEN_UNK_ID));
    }

    #[test]
    fn no_char_drops_the_cnn() {
        let cfg = TokenFeatureConfig {
            no_char: true,
            ..Default::default()
        };
        assert_eq!(cfg.feature_dim(), 330);
        let mut params = Params::new();
        Encoder::new(&mut params, "enc", cfg, &vocabs(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(params.id("enc.char_emb").is_none());
        assert!(params.id("enc.char_conv.w").is_none());
    }

    #[test]
    fn pretrained_vectors_fill_matching_rows() {
        let v = vocabs();
        let mut dir = tempfile::NamedTempFile::new().unwrap();
        writeln!(dir, "3 2").unwrap();
        writeln!(dir, "Trump 0.5 -0.5").unwrap();
        writeln!(dir, "Obama 1 1").unwrap();
        writeln!(dir, "born 2 3").unwrap();
        let mut table = Tensor::zeros(v.tokens.len(), 2);
        let stats = load_pretrained(dir.path(), &v, &mut table).unwrap();
        assert_eq!(stats, PretrainedStats { vectors_read: 3, matched: 2 });
        assert_eq!(table.row(v.token_id("Trump")), &[0.5, -0.5]);
        assert_eq!(table.row(v.token_id("born")), &[2.0, 3.0]);
        let mut wrong = Tensor::zeros(v.tokens.len(), 3);
        assert!(matches!(
            load_pretrained(dir.path(), &v, &mut wrong),
            Err(EncoderError::Dimension { line: 2, .. })
        ));
    }
}
