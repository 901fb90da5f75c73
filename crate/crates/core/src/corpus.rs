//! Annotated sentences, dataset ingestion, vocabularies and sentence categories.
//!
//! The native corpus format is line-delimited JSON, one record per sentence:
//!
//! ```text
//! {"tokens":["Trump","was","born","in","Queens"],"pos":["NNP","VBD","VBN","IN","NNP"],
//!  "triplets":[{"head":{"start":0,"end":0,"type":"PER"},"relation":"Born_In",
//!               "tail":{"start":4,"end":4,"type":"LOC"}}]}
//! ```
//!
//! Token indices are 0-based and inclusive on both ends.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved outside label, id 0 in every tag space.
pub const OUTSIDE: &str = "O";
pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
/// POS placeholder for records that carry no tagger output.
pub const UNKNOWN_POS: &str = "UNK";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("sentence {sentence}: {message}")]
    InvalidSentence { sentence: String, message: String },
    #[error("cannot build vocabularies from an empty corpus")]
    EmptyCorpus,
    #[error("sentence has no triplets; {0} is undefined")]
    NoTriplets(&'static str),
    #[error("unknown dataset format `{0}` (expected nyt, webnlg or native)")]
    UnknownFormat(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    tokens: Vec<String>,
    pos_tags: Vec<String>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<String>, pos_tags: Vec<String>) -> std::result::Result<Self, String> {
        if tokens.is_empty() {
            return Err("sentence has no tokens".into());
        }
        if tokens.len() != pos_tags.len() {
            return Err(format!(
                "{} tokens but {} POS tags",
                tokens.len(),
                pos_tags.len()
            ));
        }
        if let Some(i) = tokens.iter().position(|t| t.is_empty()) {
            return Err(format!("token {i} is empty"));
        }
        Ok(Self { tokens, pos_tags })
    }

    /// Builds a sequence whose POS tags are all [`UNKNOWN_POS`].
    pub fn without_pos(tokens: Vec<String>) -> std::result::Result<Self, String> {
        let pos = vec![UNKNOWN_POS.to_string(); tokens.len()];
        Self::new(tokens, pos)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pos_tags(&self) -> &[String] {
        &self.pos_tags
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Inclusive token range with an entity type. Predicted spans carry an empty type.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type", default, skip_serializing_if = "String::is_empty")]
    pub entity_type: String,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, entity_type: impl Into<String>) -> Self {
        Self {
            start,
            end,
            entity_type: entity_type.into(),
        }
    }

    pub fn untyped(start: usize, end: usize) -> Self {
        Self::new(start, end, "")
    }

    pub fn bounds(&self) -> (usize, usize) {
        (self.start, self.end)
    }

    fn check(&self, n: usize) -> std::result::Result<(), String> {
        if self.start > self.end {
            return Err(format!("span [{}..{}] has start > end", self.start, self.end));
        }
        if self.end >= n {
            return Err(format!(
                "span [{}..{}] out of range for {n} tokens",
                self.start, self.end
            ));
        }
        Ok(())
    }
}

impl fmt::Display for EntitySpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}..{}]", self.start, self.end)?;
        if !self.entity_type.is_empty() {
            write!(f, ":{}", self.entity_type)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub head: EntitySpan,
    pub relation: String,
    pub tail: EntitySpan,
}

/// Identity of a triplet for deduplication and scoring: offsets and relation, no types.
pub type TripletKey = ((usize, usize), String, (usize, usize));

impl Triplet {
    pub fn new(head: EntitySpan, relation: impl Into<String>, tail: EntitySpan) -> Self {
        Self {
            head,
            relation: relation.into(),
            tail,
        }
    }

    pub fn key(&self) -> TripletKey {
        (self.head.bounds(), self.relation.clone(), self.tail.bounds())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Record {
    tokens: Vec<String>,
    #[serde(default)]
    pos: Option<Vec<String>>,
    #[serde(default)]
    triplets: Vec<Triplet>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedSentence {
    sentence: TokenSequence,
    triplets: Vec<Triplet>,
}

impl AnnotatedSentence {
    /// Validates spans and drops duplicates (same head offsets, relation and tail offsets).
    /// Returns the sentence and the number of dropped duplicates.
    pub fn new(
        sentence: TokenSequence,
        triplets: Vec<Triplet>,
    ) -> std::result::Result<(Self, usize), String> {
        let n = sentence.len();
        for t in &triplets {
            t.head.check(n).map_err(|e| format!("head {e}"))?;
            t.tail.check(n).map_err(|e| format!("tail {e}"))?;
            if t.relation.is_empty() || t.relation == OUTSIDE {
                return Err(format!("invalid relation label `{}`", t.relation));
            }
        }
        let mut seen = HashSet::new();
        let mut kept = Vec::with_capacity(triplets.len());
        let before = triplets.len();
        for t in triplets {
            if seen.insert(t.key()) {
                kept.push(t);
            }
        }
        let dropped = before - kept.len();
        Ok((
            Self {
                sentence,
                triplets: kept,
            },
            dropped,
        ))
    }

    pub fn sentence(&self) -> &TokenSequence {
        &self.sentence
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn len(&self) -> usize {
        self.sentence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentence.is_empty()
    }

    /// Same tokens with a different triplet list (used for predictions).
    pub fn with_triplets(&self, triplets: Vec<Triplet>) -> std::result::Result<Self, String> {
        Self::new(self.sentence.clone(), triplets).map(|(s, _)| s)
    }

    /// Distinct head spans in first-occurrence order. Spans with identical offsets but
    /// different types count as distinct heads here; the tag encoder rejects them.
    pub fn head_entities(&self) -> Vec<EntitySpan> {
        let mut seen = HashSet::new();
        self.triplets
            .iter()
            .filter(|t| seen.insert(t.head.clone()))
            .map(|t| t.head.clone())
            .collect()
    }

    pub fn to_json_line(&self) -> String {
        let record = Record {
            tokens: self.sentence.tokens.clone(),
            pos: Some(self.sentence.pos_tags.clone()),
            triplets: self.triplets.clone(),
        };
        serde_json::to_string(&record).expect("record serialization cannot fail")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Native,
    /// CoType-style NYT lines: `sentText`, `relationMentions`, `entityMentions`.
    Nyt,
    /// `text` plus `triple_list` of `[head, relation, tail]` strings, as JSON array or lines.
    WebNlg,
}

impl std::str::FromStr for DatasetFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "native" => Ok(Self::Native),
            "nyt" => Ok(Self::Nyt),
            "webnlg" => Ok(Self::WebNlg),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub duplicate_triplets: usize,
    /// Adapter formats only: mentions that could not be located in the token sequence.
    pub unlocated_mentions: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub sentences: Vec<AnnotatedSentence>,
    pub report: LoadReport,
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let dataset = match format {
        DatasetFormat::Native => parse_native(&text)?,
        DatasetFormat::Nyt => adapters::parse_nyt(&text)?,
        DatasetFormat::WebNlg => adapters::parse_webnlg(&text)?,
    };
    if dataset.report.duplicate_triplets > 0 {
        log::warn!(
            "{}: dropped {} duplicate triplets",
            path.display(),
            dataset.report.duplicate_triplets
        );
    }
    if dataset.report.unlocated_mentions > 0 {
        log::warn!(
            "{}: skipped {} triplets whose mentions were not found in the tokens",
            path.display(),
            dataset.report.unlocated_mentions
        );
    }
    Ok(dataset)
}

pub fn parse_native(text: &str) -> Result<Dataset> {
    let mut sentences = Vec::new();
    let mut report = LoadReport::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let pos = record
            .pos
            .unwrap_or_else(|| vec![UNKNOWN_POS.to_string(); record.tokens.len()]);
        let seq = TokenSequence::new(record.tokens, pos).map_err(|message| {
            CorpusError::Malformed {
                line: line_no,
                message,
            }
        })?;
        let (sentence, dropped) =
            AnnotatedSentence::new(seq, record.triplets).map_err(|message| {
                CorpusError::InvalidSentence {
                    sentence: format!("#{} (line {line_no})", sentences.len()),
                    message,
                }
            })?;
        report.duplicate_triplets += dropped;
        sentences.push(sentence);
    }
    Ok(Dataset { sentences, report })
}

pub fn write_native(path: &Path, sentences: &[AnnotatedSentence]) -> Result<()> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for s in sentences {
        writeln!(out, "{}", s.to_json_line()).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

mod adapters {
    use super::*;
    use serde_json::Value;

    /// First occurrence of `mention` as a token subsequence, preferring one that does not
    /// overlap `avoid`.
    fn locate(
        tokens: &[String],
        mention: &str,
        avoid: Option<(usize, usize)>,
    ) -> Option<(usize, usize)> {
        let needle: Vec<&str> = mention.split_whitespace().collect();
        if needle.is_empty() || needle.len() > tokens.len() {
            return None;
        }
        let hits: Vec<(usize, usize)> = (0..=tokens.len() - needle.len())
            .filter(|&i| needle.iter().zip(&tokens[i..]).all(|(a, b)| a == b))
            .map(|i| (i, i + needle.len() - 1))
            .collect();
        let clear = |&&(s, e): &&(usize, usize)| avoid.is_none_or(|(a, b)| e < a || s > b);
        hits.iter().find(clear).or(hits.first()).copied()
    }

    fn build(
        line: usize,
        text: &str,
        mentions: Vec<(String, String, String)>,
        types: &HashMap<String, String>,
        report: &mut LoadReport,
        index: usize,
    ) -> Result<AnnotatedSentence> {
        let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        let seq = TokenSequence::without_pos(tokens.clone())
            .map_err(|message| CorpusError::Malformed { line, message })?;
        let mut triplets = Vec::new();
        for (h, r, t) in mentions {
            let Some(hs) = locate(&tokens, &h, None) else {
                report.unlocated_mentions += 1;
                continue;
            };
            let Some(ts) = locate(&tokens, &t, Some(hs)) else {
                report.unlocated_mentions += 1;
                continue;
            };
            let ty = |m: &str| types.get(m).cloned().unwrap_or_else(|| "ENTITY".into());
            triplets.push(Triplet::new(
                EntitySpan::new(hs.0, hs.1, ty(&h)),
                r,
                EntitySpan::new(ts.0, ts.1, ty(&t)),
            ));
        }
        let (s, dropped) = AnnotatedSentence::new(seq, triplets).map_err(|message| {
            CorpusError::InvalidSentence {
                sentence: format!("#{index} (line {line})"),
                message,
            }
        })?;
        report.duplicate_triplets += dropped;
        Ok(s)
    }

    fn str_field<'a>(v: &'a Value, key: &str, line: usize) -> Result<&'a str> {
        v.get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| CorpusError::Malformed {
                line,
                message: format!("missing string field `{key}`"),
            })
    }

    pub(super) fn parse_nyt(text: &str) -> Result<Dataset> {
        let mut report = LoadReport::default();
        let mut sentences = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let v: Value = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
            let sent = str_field(&v, "sentText", line_no)?;
            let mut types = HashMap::new();
            for em in v
                .get("entityMentions")
                .and_then(Value::as_array)
                .into_iter()
                .flatten()
            {
                let text = str_field(em, "text", line_no)?;
                let label = str_field(em, "label", line_no)?;
                types.insert(text.to_string(), label.to_string());
            }
            let mut mentions = Vec::new();
            for rm in v
                .get("relationMentions")
                .and_then(Value::as_array)
                .into_iter()
                .flatten()
            {
                let label = str_field(rm, "label", line_no)?;
                if label == "None" {
                    continue;
                }
                mentions.push((
                    str_field(rm, "em1Text", line_no)?.to_string(),
                    label.to_string(),
                    str_field(rm, "em2Text", line_no)?.to_string(),
                ));
            }
            let index = sentences.len();
            sentences.push(build(line_no, sent, mentions, &types, &mut report, index)?);
        }
        Ok(Dataset { sentences, report })
    }

    pub(super) fn parse_webnlg(text: &str) -> Result<Dataset> {
        let records: Vec<(usize, Value)> = if text.trim_start().starts_with('[') {
            let all: Vec<Value> =
                serde_json::from_str(text).map_err(|e| CorpusError::Malformed {
                    line: e.line(),
                    message: e.to_string(),
                })?;
            all.into_iter().enumerate().map(|(i, v)| (i + 1, v)).collect()
        } else {
            let mut out = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let v = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                out.push((i + 1, v));
            }
            out
        };
        let mut report = LoadReport::default();
        let mut sentences = Vec::new();
        let types = HashMap::new();
        for (line, v) in records {
            let sent = str_field(&v, "text", line)?;
            let mut mentions = Vec::new();
            for triple in v
                .get("triple_list")
                .and_then(Value::as_array)
                .into_iter()
                .flatten()
            {
                let parts: Option<Vec<&str>> = triple
                    .as_array()
                    .filter(|a| a.len() == 3)
                    .map(|a| a.iter().filter_map(Value::as_str).collect());
                match parts {
                    Some(p) if p.len() == 3 => {
                        mentions.push((p[0].to_string(), p[1].to_string(), p[2].to_string()))
                    }
                    _ => {
                        return Err(CorpusError::Malformed {
                            line,
                            message: "triple_list entries must be [head, relation, tail]".into(),
                        })
                    }
                }
            }
            let index = sentences.len();
            sentences.push(build(line, sent, mentions, &types, &mut report, index)?);
        }
        Ok(Dataset { sentences, report })
    }

}

/// Bidirectional label/id map.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocab {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn with_reserved(reserved: &[&str]) -> Self {
        let mut v = Self::default();
        for r in reserved {
            v.insert(r);
        }
        v
    }

    pub fn insert(&mut self, label: &str) -> usize {
        if let Some(&id) = self.index.get(label) {
            return id;
        }
        let id = self.labels.len();
        self.labels.push(label.to_string());
        self.index.insert(label.to_string(), id);
        id
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn from_labels<I: IntoIterator<Item = String>>(labels: I) -> Self {
        let mut v = Self::default();
        for l in labels {
            v.insert(&l);
        }
        v
    }

    /// One label per line; the id is the 0-based line number.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.labels.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut labels = Vec::new();
        for line in BufReader::new(file).lines() {
            labels.push(line.map_err(|source| CorpusError::Io {
                path: path.display().to_string(),
                source,
            })?);
        }
        Ok(Self::from_labels(labels))
    }
}

/// Entity-type and relation tag spaces, each with "O" at id 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagVocabulary {
    pub entity_types: Vocab,
    pub relation_types: Vocab,
}

impl TagVocabulary {
    pub fn new<E, R>(entity_types: E, relation_types: R) -> Self
    where
        E: IntoIterator,
        E::Item: AsRef<str>,
        R: IntoIterator,
        R::Item: AsRef<str>,
    {
        let mut e = Vocab::with_reserved(&[OUTSIDE]);
        for t in entity_types {
            e.insert(t.as_ref());
        }
        let mut r = Vocab::with_reserved(&[OUTSIDE]);
        for t in relation_types {
            r.insert(t.as_ref());
        }
        Self {
            entity_types: e,
            relation_types: r,
        }
    }

    /// Number of relation labels excluding "O".
    pub fn relation_count(&self) -> usize {
        self.relation_types.len() - 1
    }

    pub fn entity_type_count(&self) -> usize {
        self.entity_types.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabConfig {
    /// Tokens seen fewer times map to the unknown entry.
    pub min_token_count: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self { min_token_count: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabularies {
    pub tags: TagVocabulary,
    /// `<pad>` = 0, `<unk>` = 1.
    pub tokens: Vocab,
    /// `<pad>` = 0, `<unk>` = 1.
    pub chars: Vocab,
    /// `<unk>` = 0.
    pub pos: Vocab,
}

pub const TOKEN_UNK_ID: usize = 1;
pub const CHAR_PAD_ID: usize = 0;
pub const CHAR_UNK_ID: usize = 1;
pub const POS_UNK_ID: usize = 0;

impl Vocabularies {
    pub fn token_id(&self, token: &str) -> usize {
        self.tokens.id(token).unwrap_or(TOKEN_UNK_ID)
    }

    pub fn char_id(&self, c: char) -> usize {
        let mut buf = [0u8; 4];
        self.chars.id(c.encode_utf8(&mut buf)).unwrap_or(CHAR_UNK_ID)
    }

    pub fn pos_id(&self, tag: &str) -> usize {
        self.pos.id(tag).unwrap_or(POS_UNK_ID)
    }

    const FILES: [&'static str; 5] = [
        "entity_types.txt",
        "relation_types.txt",
        "tokens.txt",
        "chars.txt",
        "pos.txt",
    ];

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let vocabs = [
            &self.tags.entity_types,
            &self.tags.relation_types,
            &self.tokens,
            &self.chars,
            &self.pos,
        ];
        for (name, v) in Self::FILES.iter().zip(vocabs) {
            v.write(&dir.join(name))?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let read = |i: usize| Vocab::read(&dir.join(Self::FILES[i]));
        Ok(Self {
            tags: TagVocabulary {
                entity_types: read(0)?,
                relation_types: read(1)?,
            },
            tokens: read(2)?,
            chars: read(3)?,
            pos: read(4)?,
        })
    }
}

pub fn build_vocabularies(
    data: &[AnnotatedSentence],
    config: VocabConfig,
) -> Result<Vocabularies> {
    if data.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut entity_types = Vec::new();
    let mut relation_types = Vec::new();
    let mut token_counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut token_order = Vec::new();
    let mut chars = Vocab::with_reserved(&[PAD, UNK]);
    let mut pos = Vocab::with_reserved(&[UNK]);
    for s in data {
        for t in s.triplets() {
            for ty in [&t.head.entity_type, &t.tail.entity_type] {
                if !ty.is_empty() && !entity_types.contains(ty) {
                    entity_types.push(ty.clone());
                }
            }
            if !relation_types.contains(&t.relation) {
                relation_types.push(t.relation.clone());
            }
        }
        for tok in s.sentence().tokens() {
            let c = token_counts.entry(tok.as_str()).or_insert(0);
            if *c == 0 {
                token_order.push(tok.as_str());
            }
            *c += 1;
            for ch in tok.chars() {
                let mut buf = [0u8; 4];
                chars.insert(ch.encode_utf8(&mut buf));
            }
        }
        for p in s.sentence().pos_tags() {
            pos.insert(p);
        }
    }
    let mut tokens = Vocab::with_reserved(&[PAD, UNK]);
    for tok in token_order {
        if token_counts[tok] >= config.min_token_count {
            tokens.insert(tok);
        }
    }
    Ok(Vocabularies {
        tags: TagVocabulary::new(entity_types, relation_types),
        tokens,
        chars,
        pos,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Normal,
    /// Single entity overlap: triplets share an entity but never a full pair.
    Seo,
    /// Entity pair overlap: two triplets with the same unordered pair.
    Epo,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Normal => "Normal",
            Category::Seo => "SEO",
            Category::Epo => "EPO",
        })
    }
}

pub fn categorize_sentence(s: &AnnotatedSentence) -> Result<Category> {
    let triplets = s.triplets();
    if triplets.is_empty() {
        return Err(CorpusError::NoTriplets("overlap category"));
    }
    let pair = |t: &Triplet| {
        let (a, b) = (t.head.bounds(), t.tail.bounds());
        if a <= b {
            (a, b)
        } else {
            (b, a)
        }
    };
    let mut shared = false;
    for (i, a) in triplets.iter().enumerate() {
        for b in &triplets[i + 1..] {
            if pair(a) == pair(b) && a.relation != b.relation {
                return Ok(Category::Epo);
            }
            let ea = [a.head.bounds(), a.tail.bounds()];
            let eb = [b.head.bounds(), b.tail.bounds()];
            if ea.iter().any(|x| eb.contains(x)) {
                shared = true;
            }
        }
    }
    Ok(if shared { Category::Seo } else { Category::Normal })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CountBucket {
    One,
    Two,
    Three,
    Four,
    FiveOrMore,
}

impl CountBucket {
    pub fn of(count: usize) -> Option<Self> {
        match count {
            0 => None,
            1 => Some(Self::One),
            2 => Some(Self::Two),
            3 => Some(Self::Three),
            4 => Some(Self::Four),
            _ => Some(Self::FiveOrMore),
        }
    }
}

impl fmt::Display for CountBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CountBucket::One => "1",
            CountBucket::Two => "2",
            CountBucket::Three => "3",
            CountBucket::Four => "4",
            CountBucket::FiveOrMore => ">=5",
        })
    }
}

pub fn triplet_count_bucket(s: &AnnotatedSentence) -> Result<CountBucket> {
    CountBucket::of(s.triplets().len()).ok_or(CorpusError::NoTriplets("triplet-count bucket"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn toks(words: &str) -> TokenSequence {
        TokenSequence::without_pos(words.split(' ').map(str::to_string).collect()).unwrap()
    }

    fn sent(words: &str, triplets: Vec<Triplet>) -> AnnotatedSentence {
        AnnotatedSentence::new(toks(words), triplets).unwrap().0
    }

    fn tr(h: (usize, usize), r: &str, t: (usize, usize)) -> Triplet {
        Triplet::new(
            EntitySpan::new(h.0, h.1, "E"),
            r,
            EntitySpan::new(t.0, t.1, "E"),
        )
    }

    #[test]
    fn loads_single_record() {
        let line = r#"{"tokens":["a","b","c","d","e","f"],"pos":["X","X","X","X","X","X"],"triplets":[{"head":{"start":0,"end":1,"type":"PER"},"relation":"r","tail":{"start":4,"end":5,"type":"LOC"}}]}"#;
        let d = parse_native(line).unwrap();
        assert_eq!(d.sentences.len(), 1);
        assert_eq!(d.sentences[0].len(), 6);
        assert_eq!(d.sentences[0].triplets().len(), 1);
    }

    #[test]
    fn tail_out_of_range_names_the_record() {
        let ok = r#"{"tokens":["a"],"pos":["X"],"triplets":[]}"#;
        let bad = r#"{"tokens":["a","b"],"pos":["X","X"],"triplets":[{"head":{"start":0,"end":0,"type":"P"},"relation":"r","tail":{"start":1,"end":2,"type":"L"}}]}"#;
        let err = parse_native(&format!("{ok}\n{bad}\n")).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, CorpusError::InvalidSentence { .. }));
        assert!(msg.contains("#1") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_native("{\"tokens\":[\"a\"]}\nnot json\n").unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 2, .. }));
        let err = parse_native("{\"tokens\":[\"a\",\"\"]}\n").unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 1, .. }));
    }

    #[test]
    fn missing_pos_defaults_to_unknown() {
        let d = parse_native(r#"{"tokens":["a","b"]}"#).unwrap();
        assert_eq!(d.sentences[0].sentence().pos_tags(), ["UNK", "UNK"]);
    }

    #[test]
    fn duplicate_triplets_are_dropped_and_counted() {
        let t = r#"{"head":{"start":0,"end":0,"type":"P"},"relation":"r","tail":{"start":1,"end":1,"type":"L"}}"#;
        let line = format!(r#"{{"tokens":["a","b"],"triplets":[{t},{t}]}}"#);
        let d = parse_native(&line).unwrap();
        assert_eq!(d.sentences[0].triplets().len(), 1);
        assert_eq!(d.report.duplicate_triplets, 1);
    }

    #[test]
    fn vocabularies_register_everything() {
        let data = vec![sent(
            "Trump is president of United States , born in New York City",
            vec![
                Triplet::new(EntitySpan::new(0, 0, "PER"), "President_Of", EntitySpan::new(4, 5, "LOC")),
                Triplet::new(EntitySpan::new(0, 0, "PER"), "Born_In", EntitySpan::new(9, 11, "LOC")),
                Triplet::new(EntitySpan::new(9, 11, "LOC"), "Located_In", EntitySpan::new(4, 5, "LOC")),
            ],
        )];
        let v = build_vocabularies(&data, VocabConfig::default()).unwrap();
        assert_eq!(v.tags.relation_types.len(), 4);
        assert_eq!(v.tags.relation_count(), 3);
        assert_eq!(v.tags.relation_types.id(OUTSIDE), Some(0));
        assert_eq!(v.tags.entity_types.id(OUTSIDE), Some(0));
        assert_eq!(v.tags.entity_type_count(), 2);
        assert_eq!(v.token_id("Trump"), 2);
        assert_eq!(v.token_id("Obama"), TOKEN_UNK_ID);
        assert_eq!(v.char_id('T'), 2);
        assert_eq!(v.char_id('Z'), CHAR_UNK_ID);
        assert_eq!(v.pos_id("UNK"), 1);
        assert_eq!(v.pos_id("NN"), POS_UNK_ID);
        assert!(matches!(
            build_vocabularies(&[], VocabConfig::default()),
            Err(CorpusError::EmptyCorpus)
        ));
    }

    #[test]
    fn twenty_four_relations_are_all_registered() {
        let triplets = (0..24).map(|i| tr((0, 0), &format!("rel{i}"), (1, 1))).collect();
        let v = build_vocabularies(&[sent("a b", triplets)], VocabConfig::default()).unwrap();
        assert_eq!(v.tags.relation_count(), 24);
    }

    #[test]
    fn frequency_cutoff() {
        let data = vec![sent("a a b", vec![])];
        let v = build_vocabularies(&data, VocabConfig { min_token_count: 2 }).unwrap();
        assert_eq!(v.token_id("a"), 2);
        assert_eq!(v.token_id("b"), TOKEN_UNK_ID);
    }

    #[test]
    fn vocab_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let data = vec![sent("a b", vec![tr((0, 0), "r", (1, 1))])];
        let v = build_vocabularies(&data, VocabConfig::default()).unwrap();
        v.write_dir(dir.path()).unwrap();
        assert_eq!(Vocabularies::read_dir(dir.path()).unwrap(), v);
        let text = fs::read_to_string(dir.path().join("relation_types.txt")).unwrap();
        assert_eq!(text, "O\nr\n");
    }

    #[test]
    fn categories() {
        let normal = sent("a b c d", vec![tr((0, 0), "r1", (1, 1))]);
        assert_eq!(categorize_sentence(&normal).unwrap(), Category::Normal);
        let seo = sent("a b c d", vec![tr((0, 0), "r1", (1, 1)), tr((0, 0), "r2", (2, 2))]);
        assert_eq!(categorize_sentence(&seo).unwrap(), Category::Seo);
        let epo = sent("a b c d", vec![tr((0, 0), "r1", (1, 1)), tr((0, 0), "r2", (1, 1))]);
        assert_eq!(categorize_sentence(&epo).unwrap(), Category::Epo);
        let reversed = sent("a b c d", vec![tr((0, 0), "r1", (1, 1)), tr((1, 1), "r2", (0, 0))]);
        assert_eq!(categorize_sentence(&reversed).unwrap(), Category::Epo);
        // partial overlap is not shared identity
        let partial = sent("a b c d", vec![tr((0, 1), "r1", (3, 3)), tr((1, 1), "r2", (2, 2))]);
        assert_eq!(categorize_sentence(&partial).unwrap(), Category::Normal);
        let empty = sent("a", vec![]);
        assert!(categorize_sentence(&empty).is_err());
    }

    #[test]
    fn buckets() {
        let mk = |k: usize| {
            sent(
                "a b c d e f g h i j",
                (0..k).map(|i| tr((i, i), "r", (9, 9))).collect(),
            )
        };
        assert_eq!(triplet_count_bucket(&mk(1)).unwrap(), CountBucket::One);
        assert_eq!(triplet_count_bucket(&mk(4)).unwrap(), CountBucket::Four);
        assert_eq!(triplet_count_bucket(&mk(7)).unwrap(), CountBucket::FiveOrMore);
        assert!(triplet_count_bucket(&mk(0)).is_err());
    }

    fn arb_sentence() -> impl Strategy<Value = AnnotatedSentence> {
        (1usize..12).prop_flat_map(|n| {
            let span = (0..n).prop_flat_map(move |s| (Just(s), s..n));
            let triplet = (span.clone(), 0usize..3, span, prop::sample::select(vec!["A", "B"]))
                .prop_map(|((hs, he), r, (ts, te), ty)| {
                    Triplet::new(
                        EntitySpan::new(hs, he, ty),
                        format!("r{r}"),
                        EntitySpan::new(ts, te, "B"),
                    )
                });
            (
                prop::collection::vec("[a-zé]{1,5}", n),
                prop::collection::vec("[A-Z]{1,3}", n),
                prop::collection::vec(triplet, 0..5),
            )
                .prop_map(|(tokens, pos, triplets)| {
                    AnnotatedSentence::new(TokenSequence::new(tokens, pos).unwrap(), triplets)
                        .unwrap()
                        .0
                })
        })
    }

    proptest! {
        #[test]
        fn serialize_load_is_identity(data in prop::collection::vec(arb_sentence(), 0..6)) {
            let text: String = data.iter().map(|s| s.to_json_line() + "\n").collect();
            let back = parse_native(&text).unwrap();
            prop_assert_eq!(back.sentences, data);
            prop_assert_eq!(back.report.duplicate_triplets, 0);
        }

        #[test]
        fn category_is_permutation_invariant(s in arb_sentence(), seed in any::<u64>()) {
            prop_assume!(!s.triplets().is_empty());
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut ts = s.triplets().to_vec();
            ts.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled = s.with_triplets(ts).unwrap();
            prop_assert_eq!(categorize_sentence(&s).unwrap(), categorize_sentence(&shuffled).unwrap());
        }

        #[test]
        fn bucket_is_monotone(a in 1usize..20, b in 1usize..20) {
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(CountBucket::of(lo).unwrap() <= CountBucket::of(hi).unwrap());
        }
    }
}
