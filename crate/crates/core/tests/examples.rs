use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use protoner::config::{Flags, RunConfig};
use protoner::corpus::{
    corpus_stats, synth_confounded_corpus, synthetic_context_source, ContextSource, Corpus, Sentence, Span,
    SyntheticSpec, OUTSIDE,
};
use protoner::encoder::{init_encoder, EncoderConfig, PrecomputedEncoder};
use protoner::episodes::{build_class_index, sample_episode, validate_episode, Episode, EpisodeParams};
use protoner::intervention::{
    augment_support, build_pool, enumerate_replacements, update_memory, PoolScope, PrototypeMemory,
};
use protoner::objective::{loss_grads, total_loss, LossOptions};
use protoner::pipeline::{span_f1, Predictor, ProtoPredictor};

const LABELS: [&str; 4] = ["O", "O", "per", "loc"];

fn random_sentence(rng: &mut ChaCha8Rng, vocab: usize) -> Sentence {
    let n = rng.random_range(1..10);
    let (tokens, labels) = (0..n)
        .map(|_| {
            (
                format!("t{}", rng.random_range(0..vocab)),
                LABELS[rng.random_range(0..LABELS.len())].to_string(),
            )
        })
        .unzip();
    Sentence { tokens, labels }
}

fn spec(rho: f64) -> SyntheticSpec {
    SyntheticSpec {
        rho,
        sentences: 5000,
        seed: 9,
        ..SyntheticSpec::default()
    }
}

fn class_of(s: &Sentence) -> String {
    s.labels.iter().find(|l| *l != OUTSIDE).unwrap().clone()
}

fn mutual_information(pairs: &[(String, String)]) -> f64 {
    let n = pairs.len() as f64;
    let mut joint: HashMap<(&str, &str), f64> = HashMap::new();
    let mut left: HashMap<&str, f64> = HashMap::new();
    let mut right: HashMap<&str, f64> = HashMap::new();
    for (a, b) in pairs {
        *joint.entry((a, b)).or_default() += 1.0;
        *left.entry(a).or_default() += 1.0;
        *right.entry(b).or_default() += 1.0;
    }
    joint
        .iter()
        .map(|((a, b), c)| c / n * (c * n / (left[a] * right[b])).ln())
        .sum()
}

#[test]
fn generator_context_rate_follows_rho() {
    let data = synth_confounded_corpus(&spec(0.8)).unwrap();
    let own = data
        .train
        .sentences
        .iter()
        .filter(|s| {
            let c: usize = class_of(s).strip_prefix("src-c").unwrap().parse().unwrap();
            synthetic_context_source(s) == Some(ContextSource::Class(c))
        })
        .count();
    let rate = own as f64 / data.train.len() as f64;
    assert!((0.77..=0.83).contains(&rate), "{rate}");

    let pairs = |c: &Corpus| -> Vec<(String, String)> {
        c.sentences.iter().map(|s| (class_of(s), s.tokens[0].clone())).collect()
    };
    let confounded = mutual_information(&pairs(&data.train));
    let free = synth_confounded_corpus(&spec(0.0)).unwrap();
    let independent = mutual_information(&pairs(&free.train));
    assert!(independent < 0.01, "{independent}");
    assert!(confounded > 0.5, "{confounded}");
}

#[test]
fn stats_and_class_index_match_full_scans() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let sents: Vec<Sentence> = (0..rng.random_range(1..20)).map(|_| random_sentence(&mut rng, 8)).collect();
        let corpus = Corpus::new(sents.clone());
        let stats = corpus_stats(&corpus);
        for label in ["per", "loc"] {
            let mut runs = 0;
            for s in &sents {
                for i in 0..s.len() {
                    if s.labels[i] == label && (i == 0 || s.labels[i - 1] != label) {
                        runs += 1;
                    }
                }
            }
            assert_eq!(stats.class_counts.get(label).copied().unwrap_or(0), runs);
            let scan: Vec<usize> = (0..sents.len()).filter(|&i| sents[i].labels.iter().any(|l| l == label)).collect();
            let index = build_class_index(&corpus);
            assert_eq!(index.by_class.get(label).cloned().unwrap_or_default(), scan);
        }
        assert_eq!(stats.tokens, sents.iter().map(Sentence::len).sum::<usize>());
    }
}

fn sampled(seed: u64) -> Episode {
    let data = synth_confounded_corpus(&SyntheticSpec {
        n_classes: 6,
        sentences: 300,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let index = build_class_index(&data.train);
    sample_episode(&data.train, &index, &EpisodeParams::k_2k(5, 1, 2), seed).unwrap()
}

#[test]
fn validator_reports_every_injected_fault() {
    type Fault = fn(&mut Episode);
    let faults: [(&str, Fault); 7] = [
        ("drop class", |e| {
            e.classes.pop();
        }),
        ("overlap", |e| {
            e.query[0] = e.support[0].clone();
            e.query_ids[0] = e.support_ids[0];
        }),
        ("too many shots", |e| {
            for _ in 0..2 {
                e.support.push(e.support[0].clone());
                e.support_ids.push(e.support_ids[0]);
            }
        }),
        ("too few shots", |e| {
            e.support.pop();
            e.support_ids.pop();
        }),
        ("unmasked label", |e| e.query[1].labels[0] = "stray".into()),
        ("short query", |e| {
            e.query.pop();
            e.query_ids.pop();
        }),
        ("bad window", |e| e.shot_lo = 0),
    ];
    for seed in 0..20 {
        let clean = sampled(seed);
        assert!(validate_episode(&clean).is_empty());
        for (name, fault) in &faults {
            let mut e = clean.clone();
            fault(&mut e);
            assert!(!validate_episode(&e).is_empty(), "{name} missed for seed {seed}");
        }
    }
}

#[test]
fn replacement_count_is_pool_size_minus_one_per_span() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let s = random_sentence(&mut rng, 5);
        let others: Vec<Sentence> = (0..4).map(|_| random_sentence(&mut rng, 5)).collect();
        let pool = build_pool(std::iter::once(&s).chain(&others), None);
        let expected: usize = s.spans().iter().map(|sp| pool.forms(&sp.label).len() - 1).sum();
        assert_eq!(enumerate_replacements(&s, &pool, 64).len(), expected);
    }
}

#[test]
fn two_forms_per_class_add_one_sentence_each() {
    let classes: Vec<String> = (0..5).map(|c| format!("c{c}")).collect();
    let support: Vec<Sentence> = classes
        .iter()
        .map(|c| Sentence::from_pairs(&[("x", "O"), (format!("{c}a").as_str(), c.as_str()), ("y", "O")]).unwrap())
        .collect();
    let alternatives: Vec<Sentence> = classes
        .iter()
        .map(|c| Sentence::from_pairs(&[(format!("{c}b").as_str(), c.as_str())]).unwrap())
        .collect();
    let pool = build_pool(support.iter().chain(&alternatives), None);
    let query = alternatives.iter().map(|s| Sentence::from_pairs(&[("z", "O"), (s.tokens[0].as_str(), s.labels[0].as_str())]).unwrap()).collect();
    let e = Episode {
        classes,
        way: 5,
        shot_lo: 1,
        shot_hi: 2,
        query_per_class: 1,
        support,
        query,
        support_ids: Vec::new(),
        query_ids: Vec::new(),
        augmented: Vec::new(),
    };
    let aug = augment_support(&e, PoolScope::Fixed(&pool), 64, true);
    assert_eq!(aug.augmented.len(), e.support.len());
    assert!(validate_episode(&aug).is_empty());
}

#[test]
fn memory_matches_an_iterative_fold() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let lambda = rng.random_range(0.0..=1.0);
        let mut memory = PrototypeMemory::new(lambda).unwrap();
        let mut oracle: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for _ in 0..rng.random_range(1..8) {
            let mut current: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for c in 0..3 {
                if rng.random_bool(0.7) {
                    current.insert(format!("c{c}"), (0..4).map(|_| rng.random_range(-2.0..2.0)).collect());
                }
            }
            for (c, v) in &current {
                let next: Vec<f64> = match oracle.get(c) {
                    Some(m) => m.iter().zip(v).map(|(m, v)| lambda * m + (1.0 - lambda) * v).collect(),
                    None => v.clone(),
                };
                oracle.insert(c.clone(), next.iter().map(|x| *x as f32 as f64).collect());
            }
            memory = update_memory(&memory, &current).1;
            assert_eq!(memory.protos, oracle);
        }
    }
}

#[test]
fn total_loss_is_linear_in_the_mmd_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let (ce, m, w) = (rng.random_range(0.0..5.0), rng.random_range(0.0..2.0), rng.random_range(0.0..3.0));
        assert_eq!(total_loss(ce, m, 0.0).total, ce);
        let step = total_loss(ce, m, 2.0 * w).total - total_loss(ce, m, w).total;
        assert!((step - w * m).abs() <= 1e-12 * (1.0 + ce + w * m));
    }
}

#[test]
fn frozen_encoder_without_mmd_has_zero_gradient() {
    let cfg = EncoderConfig {
        dim: 8,
        vocab_hash_buckets: 64,
        ..EncoderConfig::default()
    };
    let state = init_encoder(&cfg).unwrap();
    let opts = LossOptions {
        mmd_weight: 0.0,
        freeze_encoder: true,
        ..LossOptions::default()
    };
    let eps = [sampled(0), sampled(1)];
    let out = loss_grads(&state, &eps, &[], &PrototypeMemory::new(0.5).unwrap(), &opts, None).unwrap();
    assert!(out.loss.total > 0.0);
    assert!(out.grads.is_zero());
}

#[test]
fn span_metrics_match_set_intersection() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let random_spans = |rng: &mut ChaCha8Rng| -> Vec<Span> {
        let mut v: Vec<Span> = (0..rng.random_range(0..5))
            .map(|_| {
                let start = rng.random_range(0..6);
                Span::new(start, start + rng.random_range(1..3), LABELS[rng.random_range(2..4)])
            })
            .collect();
        v.sort();
        v.dedup();
        v
    };
    for _ in 0..200 {
        let n = rng.random_range(1..5);
        let gold: Vec<Vec<Span>> = (0..n).map(|_| random_spans(&mut rng)).collect();
        let pred: Vec<Vec<Span>> = (0..n).map(|_| random_spans(&mut rng)).collect();
        let m = span_f1(&gold, &pred).unwrap();
        let tp: usize = gold.iter().zip(&pred).map(|(g, p)| p.iter().filter(|s| g.contains(s)).count()).sum();
        let np: usize = pred.iter().map(Vec::len).sum();
        let ng: usize = gold.iter().map(Vec::len).sum();
        assert_eq!((m.tp, m.fp, m.fn_), (tp, np - tp, ng - tp));
    }
}

#[test]
fn detector_keeps_common_phrases_outside_entities() {
    let table: HashMap<String, Vec<f64>> = [
        ("The", [3.0, 0.2]),
        ("Porcellian", [3.2, 0.0]),
        ("Club", [2.9, -0.1]),
        ("Bob", [0.0, 3.0]),
        ("He", [0.0, 0.0]),
        ("joined", [0.2, 0.0]),
        ("In", [-0.1, 0.0]),
        ("the", [0.1, 0.2]),
        ("year", [0.0, 0.1]),
        (".", [0.0, -0.1]),
    ]
    .into_iter()
    .map(|(t, v)| (t.to_string(), v.to_vec()))
    .collect();
    let enc = PrecomputedEncoder::new(2, 16, table).unwrap();
    let s = |pairs: &[(&str, &str)]| Sentence::from_pairs(pairs).unwrap();
    let query = s(&[
        ("In", "O"),
        ("the", "O"),
        ("year", "O"),
        ("Bob", "per"),
        ("joined", "O"),
        ("The", "org"),
        ("Porcellian", "org"),
        ("Club", "org"),
    ]);
    let e = Episode {
        classes: vec!["org".into(), "per".into()],
        way: 2,
        shot_lo: 1,
        shot_hi: 2,
        query_per_class: 1,
        support: vec![
            s(&[("He", "O"), ("joined", "O"), ("The", "org"), ("Porcellian", "org"), ("Club", "org"), (".", "O")]),
            s(&[("Bob", "per"), ("joined", "O"), (".", "O")]),
        ],
        query: vec![query.clone(), query.clone()],
        support_ids: Vec::new(),
        query_ids: Vec::new(),
        augmented: Vec::new(),
    };
    let cfg = RunConfig::for_shots(1, 2);
    let mut p = ProtoPredictor::new(&enc, PrototypeMemory::new(cfg.lambda).unwrap(), &cfg);
    p.flags = Flags {
        span_detection: true,
        ..Flags::OFF
    };
    let pred = p.predict(&e).unwrap();
    assert_eq!(pred.labels[0], query.labels);
    let spans: BTreeSet<Span> = Sentence {
        tokens: query.tokens.clone(),
        labels: pred.labels[0].clone(),
    }
    .spans()
    .into_iter()
    .collect();
    assert_eq!(spans, BTreeSet::from([Span::new(3, 4, "per"), Span::new(5, 8, "org")]));
}
