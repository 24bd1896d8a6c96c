//! Knowledge-graph index properties and invariants of the generated suite.

use std::collections::{BTreeMap, BTreeSet};

use kgmt_core::datagen::{generate_suite, levenshtein, name_divergence, GeneratedSuite, SynthConfig};
use kgmt_core::kg::{homonyms_of, Entity, KgBuilder, KnowledgeGraph, LanguageCode};
use kgmt_core::text::{normalize_name, split_tokens};
use proptest::prelude::*;

fn lang(s: &str) -> LanguageCode {
    LanguageCode::new(s).unwrap()
}

/// Values from a separate memoized-recursion implementation.
#[test]
fn edit_distance_and_divergence_match_frozen_values() {
    let cases: [(&str, &str, usize, f64); 10] = [
        ("kitten", "sitting", 3, 0.42857142857142855),
        ("flaw", "lawn", 2, 0.5),
        ("", "abc", 3, 1.0),
        ("Köln", "Koeln", 2, 0.4),
        ("Mercury", "Merkur", 2, 0.2857142857142857),
        ("München", "Munich", 4, 0.5714285714285714),
        ("Il Giovane Holden", "The Catcher in the Rye", 19, 0.8636363636363636),
        ("same", "SAME", 4, 0.0),
        ("Αθήνα", "Athens", 6, 1.0),
        ("ab  c", "AB C", 4, 0.0),
    ];
    for (a, b, d, r) in cases {
        assert_eq!(levenshtein(a, b), d, "{a:?} {b:?}");
        assert_eq!(levenshtein(b, a), d);
        assert!((name_divergence(a, b).unwrap() - r).abs() < 1e-15, "{a:?} {b:?}");
    }
    assert!(name_divergence("The Catcher in the Rye", "Il Giovane Holden").unwrap() > 0.5);
    assert!(name_divergence(" ", "").is_err());
}

fn name() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["Rom", "rom", "ROM ", "Paris", "Café", "Cafe\u{301}", "Nova  Roma", "nova roma", "Ulm"]).prop_map(String::from)
}

fn graph() -> impl Strategy<Value = KnowledgeGraph> {
    prop::collection::vec((prop::collection::vec(name(), 1..3), prop::collection::vec(name(), 0..2)), 1..12).prop_map(|es| {
        let entities = es.into_iter().enumerate().map(|(i, (a, b))| {
            let mut names = BTreeMap::new();
            names.insert(lang("aa"), a);
            if !b.is_empty() {
                names.insert(lang("bb"), b);
            }
            Entity { id: format!("Q{i}"), names, descriptions: BTreeMap::new() }
        });
        KnowledgeGraph::from_entities(entities).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn name_index_is_complete_and_sound(kg in graph(), probe in name()) {
        for l in [lang("aa"), lang("bb")] {
            for e in kg.entities() {
                for n in e.names_in(&l) {
                    prop_assert!(kg.lookup(&l, n).is_some_and(|s| s.contains(&e.id)));
                }
            }
            if let Some(ids) = kg.lookup(&l, &probe) {
                for id in ids {
                    let e = kg.get(id).unwrap();
                    prop_assert!(e.names_in(&l).iter().any(|n| normalize_name(n) == normalize_name(&probe)));
                }
            }
        }
    }

    #[test]
    fn homonymy_is_symmetric(kg in graph()) {
        let l = lang("aa");
        for a in kg.entities() {
            for b in homonyms_of(&kg, a, &l) {
                prop_assert!(b.id != a.id);
                prop_assert!(homonyms_of(&kg, b, &l).iter().any(|x| x.id == a.id));
            }
        }
    }

    #[test]
    fn records_round_trip(kg in graph()) {
        let mut builder = KgBuilder::new(None);
        for (i, r) in kg.to_records().into_iter().enumerate() {
            builder.add(r, i + 1).unwrap();
        }
        let (again, _) = builder.finish().unwrap();
        prop_assert_eq!(again.to_records(), kg.to_records());
    }
}

fn default_suite() -> (SynthConfig, GeneratedSuite) {
    let c = SynthConfig::default();
    let s = generate_suite(&c).unwrap();
    (c, s)
}

#[test]
fn generated_suite_invariants() {
    let (c, s) = default_suite();

    let divergent = s
        .kg
        .entities()
        .filter(|e| name_divergence(e.primary_name(&s.src).unwrap(), e.primary_name(&s.tgt).unwrap()).unwrap() >= c.divergence_threshold)
        .count();
    let fraction = divergent as f64 / s.kg.len() as f64;
    assert!((fraction - c.divergent_fraction).abs() <= 0.01, "divergent fraction {fraction}");

    // Held-out discipline.
    assert!(s.test_entities.is_disjoint(&s.train_entities));
    let mut trained: BTreeSet<&str> = BTreeSet::new();
    for r in &s.retriever_train {
        trained.insert(&r.positive);
        trained.extend(r.negatives.iter().map(String::as_str));
    }
    for t in &s.translation_train {
        trained.extend(t.gold_entities.iter().map(String::as_str));
    }
    for b in &s.benchmark {
        for g in &b.entities {
            assert!(!trained.contains(g.id.as_str()), "{} leaks into training", g.id);
            assert_eq!(s.kg.get(&g.id).unwrap().names_in(&s.tgt), g.names_tgt.as_slice());
        }
    }

    // Short questions.
    let texts = s.benchmark.iter().chain(&s.control).map(|b| b.source.as_str()).chain(s.translation_train.iter().flat_map(|t| [t.source.as_str(), t.target.as_str()]));
    for t in texts {
        assert!(split_tokens(t).len() <= 25, "{t:?}");
    }
}

#[test]
fn homonym_clusters_differ_in_description_and_target_name() {
    let (c, s) = default_suite();
    let mut clustered = 0;
    for e in s.kg.entities() {
        let h = homonyms_of(&s.kg, e, &s.src);
        if h.is_empty() {
            continue;
        }
        clustered += 1;
        for o in h {
            assert_ne!(e.descriptions.get(&s.src), o.descriptions.get(&s.src), "{} / {}", e.id, o.id);
            assert_ne!(normalize_name(e.primary_name(&s.tgt).unwrap()), normalize_name(o.primary_name(&s.tgt).unwrap()), "{} / {}", e.id, o.id);
        }
    }
    let planned = (c.homonym_fraction * c.entities as f64) as usize;
    assert!(clustered >= planned - planned / 10, "{clustered} clustered entities, {planned} planned");
}

#[test]
fn generation_is_deterministic() {
    let c = SynthConfig { entities: 400, train_examples: 300, benchmark_size: 60, control_size: 10, ..SynthConfig::default() };
    let (a, b) = (generate_suite(&c).unwrap(), generate_suite(&c).unwrap());
    assert_eq!(a.kg.to_records(), b.kg.to_records());
    assert_eq!(a.retriever_train, b.retriever_train);
    assert_eq!(a.translation_train, b.translation_train);
    assert_eq!(a.benchmark, b.benchmark);
    assert_eq!(a.control, b.control);
    let other = generate_suite(&SynthConfig { seed: 7, ..c }).unwrap();
    assert_ne!(a.benchmark, other.benchmark);
}

#[test]
fn infeasible_configs_are_rejected() {
    for c in [
        SynthConfig { cluster_size: 20, entities: 10, ..SynthConfig::default() },
        SynthConfig { test_fraction: 1.5, ..SynthConfig::default() },
        SynthConfig { src_lang: "xx-src".into(), tgt_lang: "xx-src".into(), ..SynthConfig::default() },
    ] {
        assert!(generate_suite(&c).is_err());
    }
}
