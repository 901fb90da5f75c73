//! Templated corpus generator with three entity types and four relation types.
//!
//! Sentences hold one to three triplets. Multi-triplet sentences either share a head
//! ("X was born in A and works for B"), chain through a shared entity ("X works for B ,
//! which is based in A"), or join independent clauses. No entity pair ever carries two
//! relations, and all mentions in a sentence are distinct, so every sentence encodes
//! without conflicts.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{AnnotatedSentence, EntitySpan, TokenSequence, Triplet};

pub const ENTITY_TYPES: [&str; 3] = ["PER", "LOC", "ORG"];
pub const RELATIONS: [&str; 4] = ["Born_In", "Lives_In", "Works_For", "Based_In"];

const FIRST: &[&str] = &[
    "Anna", "Boris", "Clara", "Dmitri", "Elena", "Farid", "Grace", "Hugo", "Ines", "Jonas",
    "Kira", "Lucas", "Maya", "Nils", "Olga", "Pavel", "Rosa", "Stefan", "Tara", "Viktor",
];
const LAST: &[&str] = &[
    "Adler", "Brandt", "Costa", "Dvorak", "Ekberg", "Fischer", "Garcia", "Horvat", "Ivanova",
    "Jensen", "Kowalski", "Lindqvist", "Moreau", "Novak", "Okafor", "Petrov",
];
const PLACE: &[&str] = &[
    "Lisbon", "Oslo", "Krakow", "Porto", "Geneva", "Tampere", "Ghent", "Riga", "Brno", "Turin",
    "Malmo", "Bergen", "Split", "Graz", "Lyon", "Cork",
];
const PLACE_PREFIX: &[&str] = &["New", "Old", "North", "East"];
const ORG_STEM: &[&str] = &[
    "Acme", "Borealis", "Cobalt", "Delta", "Evergreen", "Falcon", "Granite", "Helix", "Ion",
    "Juniper", "Keystone", "Lumen",
];
const ORG_SUFFIX: &[&str] = &["Corp", "Labs", "Group", "Systems", "Bank", "Media"];
const OPENERS: &[&[&str]] = &[
    &[],
    &[],
    &["Reportedly", ","],
    &["According", "to", "the", "file", ","],
    &["In", "short", ","],
];

fn phrases(rel: &str) -> &'static [&'static [&'static str]] {
    match rel {
        "Born_In" => &[&["was", "born", "in"], &["is", "a", "native", "of"]],
        "Lives_In" => &[&["lives", "in"], &["resides", "in"]],
        "Works_For" => &[&["works", "for"], &["is", "employed", "by"]],
        "Based_In" => &[&["is", "based", "in"], &["is", "headquartered", "in"]],
        _ => unreachable!("unknown relation"),
    }
}

fn tail_type(rel: &str) -> &'static str {
    if rel == "Works_For" {
        "ORG"
    } else {
        "LOC"
    }
}

fn relations_from(head_type: &str) -> &'static [&'static str] {
    match head_type {
        "PER" => &["Born_In", "Lives_In", "Works_For"],
        "ORG" => &["Based_In"],
        _ => &[],
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    /// Share of multi-triplet sentences built around a shared entity.
    pub overlap_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            overlap_rate: 0.7,
            seed: 7,
        }
    }
}

struct Builder<'r> {
    rng: &'r mut ChaCha8Rng,
    tokens: Vec<String>,
    used: Vec<Vec<&'static str>>,
    triplets: Vec<Triplet>,
}

impl Builder<'_> {
    fn push(&mut self, words: &[&str]) {
        self.tokens.extend(words.iter().map(|w| w.to_string()));
    }

    fn fresh_name(&mut self, ty: &str) -> Vec<&'static str> {
        loop {
            let name = match ty {
                "PER" => vec![*FIRST.choose(self.rng).unwrap(), *LAST.choose(self.rng).unwrap()],
                "LOC" if self.rng.gen_bool(0.3) => {
                    vec![*PLACE_PREFIX.choose(self.rng).unwrap(), *PLACE.choose(self.rng).unwrap()]
                }
                "LOC" => vec![*PLACE.choose(self.rng).unwrap()],
                _ => vec![*ORG_STEM.choose(self.rng).unwrap(), *ORG_SUFFIX.choose(self.rng).unwrap()],
            };
            // no repeated or nested surface forms within one sentence
            if !self.used.iter().any(|u| u.iter().any(|w| name.contains(w))) {
                self.used.push(name.clone());
                return name;
            }
        }
    }

    fn mention(&mut self, ty: &str) -> EntitySpan {
        let name = self.fresh_name(ty);
        let start = self.tokens.len();
        self.push(&name);
        EntitySpan::new(start, self.tokens.len() - 1, ty)
    }

    fn relate(&mut self, head: &EntitySpan, rel: &str) -> EntitySpan {
        let phrase = *phrases(rel).choose(self.rng).unwrap();
        self.push(phrase);
        let tail = self.mention(tail_type(rel));
        self.triplets.push(Triplet::new(head.clone(), rel, tail.clone()));
        tail
    }

    fn clause(&mut self) {
        let ty = if self.rng.gen_bool(0.7) { "PER" } else { "ORG" };
        let head = self.mention(ty);
        let rel = *relations_from(ty).choose(self.rng).unwrap();
        self.relate(&head, rel);
    }

    fn shared_head(&mut self, count: usize) {
        let head = self.mention("PER");
        let mut rels = relations_from("PER").to_vec();
        rels.shuffle(self.rng);
        for (k, rel) in rels.into_iter().take(count).enumerate() {
            if k > 0 {
                self.push(if k + 1 == count { &["and"] } else { &[","] });
            }
            self.relate(&head, rel);
        }
    }

    fn chain(&mut self) {
        let head = self.mention("PER");
        let org = self.relate(&head, "Works_For");
        self.push(&[",", "which"]);
        self.relate(&org, "Based_In");
    }
}

fn sentence(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig) -> AnnotatedSentence {
    let count = rng.gen_range(1..=3);
    let overlap = count > 1 && rng.gen_bool(cfg.overlap_rate);
    let mut b = Builder {
        rng,
        tokens: Vec::new(),
        used: Vec::new(),
        triplets: Vec::new(),
    };
    let opener = *OPENERS.choose(b.rng).unwrap();
    b.push(opener);
    match (count, overlap) {
        (1, _) => b.clause(),
        (2, true) if b.rng.gen_bool(0.5) => b.chain(),
        (n, true) if n == 3 && b.rng.gen_bool(0.3) => {
            b.chain();
            b.push(&[";"]);
            b.clause();
        }
        (n, true) => b.shared_head(n),
        (n, false) => {
            for k in 0..n {
                if k > 0 {
                    b.push(&[";"]);
                }
                b.clause();
            }
        }
    }
    b.push(&["."]);
    let tokens = TokenSequence::without_pos(b.tokens).expect("nonempty");
    AnnotatedSentence::new(tokens, b.triplets)
        .expect("spans are in range")
        .0
}

pub fn generate(count: usize, cfg: SyntheticConfig) -> Vec<AnnotatedSentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..count).map(|_| sentence(&mut rng, &cfg)).collect()
}

/// Disjoint train and dev corpora from one seed.
pub fn train_dev(
    train: usize,
    dev: usize,
    cfg: SyntheticConfig,
) -> (Vec<AnnotatedSentence>, Vec<AnnotatedSentence>) {
    let mut all = generate(train + dev, cfg);
    let dev_part = all.split_off(train);
    (all, dev_part)
}
