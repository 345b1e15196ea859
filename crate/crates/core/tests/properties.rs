use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use protoner::corpus::{
    parse_corpus, spans_from_labels, synth_confounded_corpus, write_corpus, Corpus, CorpusFormat, Sentence,
    SyntheticSpec, OUTSIDE,
};
use protoner::encoder::{encode_tokens, init_encoder, EncoderConfig, TokenEmbeddings, TokenEncoder};
use protoner::episodes::{build_class_index, sample_episode, validate_episode, Episode, EpisodeParams};
use protoner::intervention::{
    augment_support, build_pool, enumerate_replacements, update_memory, PoolScope, PrototypeMemory,
};
use protoner::objective::{cross_entropy, mmd, MmdConfig};
use protoner::protonet::{
    class_log_scores, classify_tokens, reweight_supports, reweighted_prototypes, ClassifyOptions, PrototypeSet,
    SupportSet, Vector,
};

const LABELS: [&str; 4] = ["O", "loc", "org", "per"];

fn sentence() -> impl Strategy<Value = Sentence> {
    prop::collection::vec(("[a-z]{1,6}", 0..LABELS.len()), 1..12).prop_map(|pairs| {
        let (tokens, labels) = pairs.into_iter().map(|(t, l)| (t, LABELS[l].to_string())).unzip();
        Sentence { tokens, labels }
    })
}

fn vectors(n: std::ops::Range<usize>, d: usize) -> impl Strategy<Value = Vec<Vector>> {
    prop::collection::vec(prop::collection::vec(-3.0..3.0f64, d), n)
}

fn synth() -> &'static protoner::corpus::SyntheticCorpora {
    use std::sync::OnceLock;
    static DATA: OnceLock<protoner::corpus::SyntheticCorpora> = OnceLock::new();
    DATA.get_or_init(|| {
        synth_confounded_corpus(&SyntheticSpec {
            n_classes: 6,
            ..SyntheticSpec::default()
        })
        .unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn write_then_parse_is_identity(sents in prop::collection::vec(sentence(), 1..6)) {
        let corpus = Corpus::new(sents);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        write_corpus(&corpus, &path).unwrap();
        prop_assert_eq!(parse_corpus(&path, CorpusFormat::FewNerd).unwrap(), corpus);
    }

    #[test]
    fn spans_are_sorted_maximal_and_reconstruct(s in sentence()) {
        let spans = spans_from_labels(&s.labels);
        let mut rebuilt = vec![OUTSIDE.to_string(); s.len()];
        for (i, sp) in spans.iter().enumerate() {
            prop_assert!(sp.start < sp.end && sp.end <= s.len());
            prop_assert_ne!(sp.label.as_str(), OUTSIDE);
            if i > 0 {
                let prev = &spans[i - 1];
                prop_assert!(prev.end <= sp.start);
                prop_assert!(prev.end < sp.start || prev.label != sp.label);
            }
            for l in &mut rebuilt[sp.start..sp.end] {
                *l = sp.label.clone();
            }
        }
        prop_assert_eq!(rebuilt, s.labels);
    }

    #[test]
    fn synthetic_generation_is_deterministic_and_entities_have_one_label(seed in 0u64..1000, rho in 0.0..=1.0f64) {
        let spec = SyntheticSpec { seed, rho, sentences: 60, ..SyntheticSpec::default() };
        let a = synth_confounded_corpus(&spec).unwrap();
        let b = synth_confounded_corpus(&spec).unwrap();
        prop_assert_eq!(&a.train, &b.train);
        prop_assert_eq!(&a.test_confounded, &b.test_confounded);
        prop_assert_eq!(&a.test_anticonfounded, &b.test_anticonfounded);
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        for c in [&a.train, &a.test_confounded, &a.test_anticonfounded] {
            for s in &c.sentences {
                for (t, l) in s.tokens.iter().zip(&s.labels) {
                    if l != OUTSIDE {
                        let prev = owner.insert(t, l);
                        prop_assert!(prev.is_none_or(|p| p == l), "{t} under {prev:?} and {l}");
                    }
                }
            }
        }
        prop_assert!(a.train.label_set.is_disjoint(&a.test_confounded.label_set));
    }

    #[test]
    fn sampled_episodes_satisfy_invariants(seed in any::<u64>(), way in 1usize..6, k in 1usize..4, q in 1usize..3) {
        let data = synth();
        let index = build_class_index(&data.train);
        let params = EpisodeParams::k_2k(way, k, q);
        let ep = sample_episode(&data.train, &index, &params, seed).unwrap();
        prop_assert!(validate_episode(&ep).is_empty(), "{:?}", validate_episode(&ep));
        let classes = ep.class_set();
        for s in ep.support.iter().chain(&ep.query) {
            prop_assert!(s.labels.iter().all(|l| l == OUTSIDE || classes.contains(l)));
        }
        for c in &classes {
            let n: usize = ep.support.iter().map(|s| s.spans().iter().filter(|sp| &sp.label == c).count()).sum();
            prop_assert!((k..=2 * k).contains(&n));
        }
        let ids: BTreeSet<_> = ep.support_ids.iter().collect();
        prop_assert!(ep.query_ids.iter().all(|i| !ids.contains(i)));
        prop_assert_eq!(sample_episode(&data.train, &index, &params, seed).unwrap(), ep);
    }

    #[test]
    fn reweighting_is_a_convex_combination(q in prop::collection::vec(-3.0..3.0f64, 3), vs in vectors(1..6, 3), tau in 0.1..5.0f64) {
        let w = reweight_supports(&q, &vs, tau).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|x| *x > 0.0 || vs.len() > 1));
        let groups = BTreeMap::from([("c".to_string(), vs.clone())]);
        let p = &reweighted_prototypes(&q, &groups, tau).unwrap()["c"];
        for t in 0..3 {
            let lo = vs.iter().map(|v| v[t]).fold(f64::INFINITY, f64::min);
            let hi = vs.iter().map(|v| v[t]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(p[t] >= lo - 1e-12 && p[t] <= hi + 1e-12);
        }
    }

    #[test]
    fn classification_is_relabel_consistent(groups in prop::collection::vec(vectors(1..4, 3), 3), q in vectors(1..5, 3)) {
        // entity classes renamed in reverse order
        let names = ["O", "a", "b"];
        let renamed = ["O", "z", "y"];
        let build = |names: &[&str]| {
            let mut s = SupportSet::default();
            for (n, vs) in names.iter().zip(&groups) {
                for v in vs {
                    s.push(n, v.clone());
                }
            }
            s
        };
        let (s1, s2) = (build(&names), build(&renamed));
        let emb = TokenEmbeddings { rows: q.clone() };
        for opts in [
            ClassifyOptions { reweight_tau: None, span_detection: false },
            ClassifyOptions { reweight_tau: Some(1.0), span_detection: true },
        ] {
            let p1 = classify_tokens(&emb, &PrototypeSet::from_support(&s1).unwrap(), &s1, opts).unwrap();
            let p2 = classify_tokens(&emb, &PrototypeSet::from_support(&s2).unwrap(), &s2, opts).unwrap();
            for (a, b) in p1.iter().zip(&p2) {
                prop_assert!(a.scores.values().all(|v| v.is_finite()));
                let (sa, sb) = (&a.scores, &b.scores);
                let tied = |s: &BTreeMap<String, f64>| {
                    let mut v: Vec<f64> = s.values().copied().collect();
                    v.sort_by(f64::total_cmp);
                    v[v.len() - 1] == v[v.len() - 2]
                };
                if !tied(sa) {
                    let i = names.iter().position(|n| *n == a.label).unwrap();
                    prop_assert_eq!(renamed[i], b.label.as_str());
                }
                prop_assert_eq!(sa.len(), sb.len());
            }
        }
    }

    #[test]
    fn scores_stay_finite_for_far_away_tokens(scale in 1.0..1e6f64) {
        let mut s = SupportSet::default();
        s.push("O", vec![0.0, 0.0]);
        s.push("a", vec![1.0, 0.0]);
        let emb = TokenEmbeddings { rows: vec![vec![scale, -scale]] };
        let p = classify_tokens(&emb, &PrototypeSet::from_support(&s).unwrap(), &s,
            ClassifyOptions { reweight_tau: Some(1.0), span_detection: true }).unwrap();
        prop_assert!(p[0].scores.values().all(|v| v.is_finite()));
    }

    #[test]
    fn replacement_only_touches_the_span(s in sentence(), extra in prop::collection::vec(sentence(), 0..4)) {
        let pool = build_pool(std::iter::once(&s).chain(&extra), None);
        for out in enumerate_replacements(&s, &pool, 64) {
            // some span of `s`, spliced with a same-class pool form, yields `out`
            let found = s.spans().iter().any(|sp| {
                pool.forms(&sp.label).iter().any(|form| {
                    let mut tokens = s.tokens[..sp.start].to_vec();
                    tokens.extend(form.iter().cloned());
                    tokens.extend(s.tokens[sp.end..].iter().cloned());
                    let mut labels = s.labels[..sp.start].to_vec();
                    labels.extend(std::iter::repeat_n(sp.label.clone(), form.len()));
                    labels.extend(s.labels[sp.end..].iter().cloned());
                    tokens == out.tokens && labels == out.labels && form.as_slice() != &s.tokens[sp.start..sp.end]
                })
            });
            prop_assert!(found, "{out:?} is not a single same-class splice of {s:?}");
        }
    }

    #[test]
    fn memory_is_key_stable_and_respects_lambda_extremes(
        a in prop::collection::vec(-5.0..5.0f64, 3),
        b in prop::collection::vec(-5.0..5.0f64, 3),
        c in prop::collection::vec(-5.0..5.0f64, 3),
    ) {
        let first = BTreeMap::from([("x".to_string(), a.clone()), ("y".to_string(), c.clone())]);
        let second = BTreeMap::from([("x".to_string(), b.clone())]);
        for lambda in [0.0, 0.5, 1.0] {
            let m0 = update_memory(&PrototypeMemory::new(lambda).unwrap(), &first).1;
            let (combined, m1) = update_memory(&m0, &second);
            prop_assert_eq!(&m1.protos["y"], &m0.protos["y"]);
            if lambda == 0.0 {
                prop_assert_eq!(&combined["x"], &b);
            }
            if lambda == 1.0 {
                prop_assert_eq!(&combined["x"], &m0.protos["x"]);
            }
        }
    }

    #[test]
    fn augmentation_off_is_identity(seed in any::<u64>()) {
        let data = synth();
        let index = build_class_index(&data.train);
        let ep: Episode = sample_episode(&data.train, &index, &EpisodeParams::k_2k(3, 2, 1), seed).unwrap();
        prop_assert_eq!(augment_support(&ep, PoolScope::Support, 32, false), ep.clone());
        let on = augment_support(&ep, PoolScope::Support, 32, true);
        for s in &on.augmented {
            prop_assert!(s.labels.iter().all(|l| l == OUTSIDE || ep.classes.contains(l)));
        }
    }

    #[test]
    fn mmd_is_zero_on_self_symmetric_and_non_negative(x in vectors(1..6, 3), y in vectors(1..6, 3)) {
        for cfg in [MmdConfig::default(), MmdConfig::fixed(vec![0.5, 2.0])] {
            prop_assert!(mmd(&x, &x, &cfg).unwrap().abs() < 1e-12);
            let xy = mmd(&x, &y, &cfg).unwrap();
            let yx = mmd(&y, &x, &cfg).unwrap();
            prop_assert!(xy >= 0.0);
            prop_assert!((xy - yx).abs() <= 1e-12 * xy.max(1.0));
        }
    }

    #[test]
    fn cross_entropy_is_non_negative(protos in vectors(3..4, 2), q in vectors(1..5, 2), gold in prop::collection::vec(0usize..3, 4)) {
        let names = ["O", "a", "b"];
        let pmap: BTreeMap<String, Vector> = names.iter().map(|n| n.to_string()).zip(protos).collect();
        let rows: Vec<_> = q.iter().map(|v| class_log_scores(v, &pmap)).collect();
        let g: Vec<String> = gold.iter().take(rows.len()).map(|i| names[*i].to_string()).collect();
        prop_assert!(cross_entropy(&rows, &g).unwrap() >= 0.0);
    }

    #[test]
    fn eval_encoding_is_pure_and_truncates(s in sentence(), max_len in 2usize..8) {
        let cfg = EncoderConfig { dim: 4, max_len, vocab_hash_buckets: 32, ..EncoderConfig::default() };
        let state = init_encoder(&cfg).unwrap();
        let a = state.encode(&s).unwrap();
        prop_assert_eq!(&a, &encode_tokens(&state, &s, None).unwrap());
        prop_assert_eq!(a.len(), s.len().min(max_len));
        prop_assert!(a.rows.iter().flatten().all(|v| v.is_finite()));
    }
}

#[test]
fn cross_entropy_is_zero_only_for_certain_gold() {
    let certain = vec![BTreeMap::from([("O".to_string(), 0.0), ("a".to_string(), f64::NEG_INFINITY)])];
    assert_eq!(cross_entropy(&certain, &["O".to_string()]).unwrap(), 0.0);
    let unsure = vec![BTreeMap::from([("O".to_string(), 0.5f64.ln()), ("a".to_string(), 0.5f64.ln())])];
    assert!(cross_entropy(&unsure, &["O".to_string()]).unwrap() > 0.0);
}
