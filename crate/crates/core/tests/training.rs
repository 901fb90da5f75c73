use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use etlspan::corpus::{build_vocabularies, AnnotatedSentence, EntitySpan, TokenSequence, Triplet, VocabConfig};
use etlspan::encoder::TokenFeatureConfig;
use etlspan::extractors::ModelConfig;
use etlspan::hbt::Trace;
use etlspan::nn::{Grads, Graph};
use etlspan::synthetic::{self, SyntheticConfig};
use etlspan::tagset::HeadTagMode;
use etlspan::trainer::{make_training_instance, prepare_corpus, TrainConfig, Trainer};

fn sent(words: &str, ts: &[((usize, usize), &str, (usize, usize))]) -> AnnotatedSentence {
    let s = TokenSequence::without_pos(words.split(' ').map(String::from).collect()).unwrap();
    let ts = ts
        .iter()
        .map(|&(h, r, t)| Triplet::new(EntitySpan::new(h.0, h.1, "E"), r, EntitySpan::new(t.0, t.1, "E")))
        .collect();
    AnnotatedSentence::new(s, ts).unwrap().0
}

fn small() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            features: TokenFeatureConfig {
                word_dim: 16,
                char_emb_dim: 8,
                char_cnn_filters: 8,
                max_token_chars: 10,
                pos_dim: 4,
                hidden_dim: 12,
                ..Default::default()
            },
            max_len: 40,
            position_dim: 6,
            dropout: 0.0,
            ..Default::default()
        },
        batch_size: 5,
        max_epochs: 4,
        seed: 3,
        ..Default::default()
    }
}

fn corpus(n: usize, seed: u64) -> Vec<AnnotatedSentence> {
    synthetic::generate(n, SyntheticConfig { seed, ..Default::default() })
}

fn trainer(cfg: TrainConfig, data: &[AnnotatedSentence]) -> Trainer {
    Trainer::new(cfg, build_vocabularies(data, VocabConfig::default()).unwrap()).unwrap()
}

#[test]
fn head_sampling_is_uniform() {
    let s = sent("a b c d e", &[((0, 0), "R", (2, 2)), ((4, 4), "R", (2, 2))]);
    let v = build_vocabularies(std::slice::from_ref(&s), VocabConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut first = 0;
    for _ in 0..10_000 {
        let inst = make_training_instance(&s, &v.tags.entity_types, &v.tags.relation_types, HeadTagMode::Typed, &mut rng).unwrap();
        first += (inst.ter.unwrap().0.bounds() == (0, 0)) as i32;
    }
    assert!((first - 5000).abs() <= 300, "{first}");

    let single = sent("a b c", &[((0, 0), "R", (2, 2))]);
    for _ in 0..50 {
        let inst = make_training_instance(&single, &v.tags.entity_types, &v.tags.relation_types, HeadTagMode::Typed, &mut rng).unwrap();
        assert_eq!(inst.ter.unwrap().0.bounds(), (0, 0));
    }
}

#[test]
fn loss_halves_within_200_steps_on_ten_sentences() {
    let data = corpus(10, 4);
    let mut t = trainer(TrainConfig { batch_size: 10, learning_rate: 0.01, ..small() }, &data);
    let (prepared, _) = prepare_corpus(&t.model, &data);
    let mut losses = Vec::new();
    for _ in 0..200 {
        let batch = t.epoch_instances(&prepared);
        losses.push(t.train_step(&batch).unwrap().loss);
    }
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn pipeline_mode_isolates_encoders() {
    let data = corpus(3, 5);
    let cfg = TrainConfig {
        model: ModelConfig { pipeline_mode: true, ..small().model },
        ..small()
    };
    let t = trainer(cfg, &data);
    let (prepared, _) = prepare_corpus(&t.model, &data);
    let s = &prepared[0];
    let targets = etlspan::extractors::TrainingTargets {
        he: s.he.clone(),
        ter: Some(s.heads[0].clone()),
    };
    let mut g = Graph::new(&t.model.params);
    let l = t.model.instance_loss(&mut g, &s.ids, &targets, None, &mut Trace::default()).unwrap();
    let mut grads = Grads::new(&t.model.params);
    g.backward(l.ter.unwrap(), &mut grads);
    let norm = |prefix: &str| -> f64 {
        t.model
            .params
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| grads.get(id).map_or(0.0, |g| g.iter().map(|x| x * x).sum::<f64>()))
            .sum()
    };
    assert_eq!(norm("he_enc."), 0.0);
    assert!(norm("ter_enc.") > 0.0);

    let shared = trainer(small(), &data);
    let encoders = |m: &etlspan::extractors::Model| {
        m.params.iter().filter(|(_, p)| p.name.ends_with(".lstm.fwd.w_ih") && !p.name.contains("start") && !p.name.contains("end")).count()
    };
    assert_eq!(encoders(&shared.model), 1);
    assert_eq!(encoders(&t.model), 2);
}

#[test]
fn same_seed_same_run() {
    let data = corpus(12, 6);
    let run = || {
        let mut t = trainer(small(), &data);
        let (prepared, _) = prepare_corpus(&t.model, &data);
        let mut losses = Vec::new();
        while losses.len() < 10 {
            for batch in t.epoch_instances(&prepared).chunks(5) {
                losses.push(t.train_step(batch).unwrap().loss);
            }
        }
        losses.truncate(10);
        losses
    };
    assert_eq!(run(), run());

    let dev = corpus(5, 60);
    let a = trainer(small(), &data).fit(&data, &dev).unwrap();
    let b = trainer(small(), &data).fit(&data, &dev).unwrap();
    assert_eq!(a.best.dev_f1, b.best.dev_f1);
    assert_eq!(a.history, b.history);
}

#[test]
fn patience_zero_stops_at_first_non_improvement() {
    let data = corpus(10, 7);
    let dev = corpus(6, 70);
    let out = trainer(TrainConfig { patience: 0, max_epochs: 40, ..small() }, &data)
        .fit(&data, &dev)
        .unwrap();
    let h = &out.history;
    assert!(h[..h.len() - 1].iter().all(|r| r.improved));
    if h.len() < 40 {
        assert!(!h.last().unwrap().improved);
    }
    assert_eq!(out.best.epoch, h.iter().filter(|r| r.improved).last().unwrap().epoch);
}

#[test]
fn clipped_norm_respects_bound() {
    let data = corpus(8, 8);
    let mut t = trainer(TrainConfig { grad_clip_norm: 0.01, ..small() }, &data);
    let (prepared, _) = prepare_corpus(&t.model, &data);
    let batch = t.epoch_instances(&prepared);
    let s = t.train_step(&batch).unwrap();
    assert!(s.grad_norm > 0.01);
    assert!(s.clipped_norm <= 0.01 + 1e-6);
}
