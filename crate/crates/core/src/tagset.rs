//! Span-boundary tagging: one start-tag row and one end-tag row per extraction task.
//!
//! A head-entity is encoded by writing its type at its first token in the start row and
//! at its last token in the end row. For a given head, each tail is encoded the same way
//! with the relation label instead of a type. Everything else is "O" (id 0).

use std::fmt::Write as _;

use thiserror::Error;

use crate::corpus::{AnnotatedSentence, EntitySpan, Vocab};

pub const O: usize = 0;

/// Label of every head under [`HeadTagMode::Binary`].
pub const BINARY_HEAD_LABEL: &str = "ENTITY";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TagError {
    #[error("encoding conflict: {}", .offenders.join("; "))]
    EncodingConflict { offenders: Vec<String> },
    #[error("label `{0}` is not in the tag vocabulary")]
    UnknownLabel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagSpace {
    Entity,
    Relation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadTagMode {
    #[default]
    Typed,
    /// Every head is tagged with the single label [`BINARY_HEAD_LABEL`].
    Binary,
}

impl HeadTagMode {
    /// The head-entity tag space for this mode, derived from the typed entity vocabulary.
    pub fn head_vocab(self, entity_types: &Vocab) -> Vocab {
        match self {
            HeadTagMode::Typed => entity_types.clone(),
            HeadTagMode::Binary => Vocab::with_reserved(&[crate::corpus::OUTSIDE, BINARY_HEAD_LABEL]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundaryTagging {
    pub start_tags: Vec<usize>,
    pub end_tags: Vec<usize>,
    pub space: TagSpace,
}

impl BoundaryTagging {
    pub fn outside(n: usize, space: TagSpace) -> Self {
        Self {
            start_tags: vec![O; n],
            end_tags: vec![O; n],
            space,
        }
    }

    pub fn len(&self) -> usize {
        self.start_tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start_tags.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TypedSpan {
    pub start: usize,
    pub end: usize,
    pub label: usize,
}

/// Writes `(start, end, label)` targets into a tagging, rejecting shared boundaries.
fn write_targets(
    n: usize,
    space: TagSpace,
    targets: &[(usize, usize, usize, String)],
) -> Result<BoundaryTagging, TagError> {
    let mut tagging = BoundaryTagging::outside(n, space);
    let mut start_owner: Vec<Option<usize>> = vec![None; n];
    let mut end_owner: Vec<Option<usize>> = vec![None; n];
    let mut offenders = Vec::new();
    for (k, (start, end, label, name)) in targets.iter().enumerate() {
        if let Some(prev) = start_owner[*start] {
            offenders.push(format!(
                "{} and {} share start token {start}",
                targets[prev].3, name
            ));
        } else {
            start_owner[*start] = Some(k);
            tagging.start_tags[*start] = *label;
        }
        if let Some(prev) = end_owner[*end] {
            offenders.push(format!(
                "{} and {} share end token {end}",
                targets[prev].3, name
            ));
        } else {
            end_owner[*end] = Some(k);
            tagging.end_tags[*end] = *label;
        }
    }
    if offenders.is_empty() {
        Ok(tagging)
    } else {
        Err(TagError::EncodingConflict { offenders })
    }
}

pub fn encode_he(
    s: &AnnotatedSentence,
    entity_tags: &Vocab,
    mode: HeadTagMode,
) -> Result<BoundaryTagging, TagError> {
    let mut targets: Vec<(usize, usize, usize, String)> = Vec::new();
    for head in s.head_entities() {
        let name = match mode {
            HeadTagMode::Typed => head.entity_type.as_str(),
            HeadTagMode::Binary => BINARY_HEAD_LABEL,
        };
        let label = entity_tags
            .id(name)
            .filter(|&id| id != O)
            .ok_or_else(|| TagError::UnknownLabel(name.to_string()))?;
        let target = (head.start, head.end, label, format!("head {head}"));
        if !targets.iter().any(|t| (t.0, t.1, t.2) == (target.0, target.1, target.2)) {
            targets.push(target);
        }
    }
    write_targets(s.len(), TagSpace::Entity, &targets)
}

/// Tail/relation tagging for the triplets whose head has the same offsets as `head`.
pub fn encode_ter(
    s: &AnnotatedSentence,
    head: &EntitySpan,
    relation_tags: &Vocab,
) -> Result<BoundaryTagging, TagError> {
    let mut targets = Vec::new();
    for t in s.triplets().iter().filter(|t| t.head.bounds() == head.bounds()) {
        let label = relation_tags
            .id(&t.relation)
            .filter(|&id| id != O)
            .ok_or_else(|| TagError::UnknownLabel(t.relation.clone()))?;
        targets.push((
            t.tail.start,
            t.tail.end,
            label,
            format!("tail {} ({})", t.tail, t.relation),
        ));
    }
    write_targets(s.len(), TagSpace::Relation, &targets)
}

/// Distance of each token to the nearest start at or before it; `c` where none exists.
pub fn start_distances(start_tags: &[usize], c: usize) -> Vec<usize> {
    let mut nearest = None;
    start_tags
        .iter()
        .enumerate()
        .map(|(i, &tag)| {
            if tag != O {
                nearest = Some(i);
            }
            nearest.map_or(c, |s| i - s)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Decoded {
    /// Ordered by start index; at most one span per start.
    pub spans: Vec<TypedSpan>,
    /// Start tags for which no matching end tag was found.
    pub unmatched_starts: usize,
}

/// Pairs each labeled start with the nearest end at or after it carrying the same label.
pub fn decode(tagging: &BoundaryTagging) -> Decoded {
    decode_tags(&tagging.start_tags, &tagging.end_tags)
}

pub fn decode_tags(start_tags: &[usize], end_tags: &[usize]) -> Decoded {
    debug_assert_eq!(start_tags.len(), end_tags.len());
    let mut out = Decoded::default();
    for (i, &label) in start_tags.iter().enumerate() {
        if label == O {
            continue;
        }
        match end_tags[i..].iter().position(|&e| e == label) {
            Some(off) => out.spans.push(TypedSpan {
                start: i,
                end: i + off,
                label,
            }),
            None => out.unmatched_starts += 1,
        }
    }
    out
}

/// Token row with the two tag rows aligned underneath.
pub fn render(tokens: &[String], tagging: &BoundaryTagging, vocab: &Vocab) -> String {
    let name = |id: usize| vocab.label(id).unwrap_or("?").to_string();
    let starts: Vec<String> = tagging.start_tags.iter().map(|&t| name(t)).collect();
    let ends: Vec<String> = tagging.end_tags.iter().map(|&t| name(t)).collect();
    let widths: Vec<usize> = (0..tokens.len())
        .map(|i| {
            tokens[i]
                .chars()
                .count()
                .max(starts[i].chars().count())
                .max(ends[i].chars().count())
        })
        .collect();
    let mut out = String::new();
    for (title, row) in [("token", tokens), ("start", &starts[..]), ("end", &ends[..])] {
        let _ = write!(out, "{title:<6}");
        for (cell, w) in row.iter().zip(&widths) {
            let _ = write!(out, " {cell:<w$}");
        }
        out = out.trim_end().to_string();
        out.push('\n');
    }
    out
}
