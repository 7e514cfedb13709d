mod common;

use common::{id, oracle};
use kgreport::graph::{
    adjacency_to_mask, apply_triplet, build_base_graph, pad_graph, update_graph, BaseGraphSpec, NodeLevel,
    Relation, Triplet,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;

#[test]
fn update_matches_set_oracle_on_random_instances() {
    let (checked, mismatch) = common::graph_rule_agreement(1000, 2024);
    assert_eq!(mismatch, None);
    assert_eq!(checked, 1000);
}

#[test]
fn case_study_triplet_adds_a_finding() {
    let spec = BaseGraphSpec {
        organs: vec![id("pleura")],
        findings: vec![kgreport::graph::FindingEntry {
            name: id("effusion"),
            organ: id("pleura"),
        }],
    };
    let g = build_base_graph(&spec).unwrap();
    let t = Triplet::new("consolidation", Relation::SuggestiveOf, "effusion").unwrap();
    let out = update_graph(&g, &[t], 90).unwrap();
    let i = out.position(&id("consolidation")).unwrap();
    assert_eq!(out.nodes()[i].level, NodeLevel::Finding);
    assert!(out.edge(i, out.position(&id("effusion")).unwrap()));
    assert!(out.edge(i, 0));
}

#[test]
fn located_at_object_becomes_an_organ() {
    let spec = BaseGraphSpec {
        organs: vec![id("lung")],
        findings: vec![kgreport::graph::FindingEntry {
            name: id("opacity"),
            organ: id("lung"),
        }],
    };
    let g = build_base_graph(&spec).unwrap();
    let t = Triplet::new("opacity", Relation::LocatedAt, "lung_base").unwrap();
    let out = update_graph(&g, &[t], 90).unwrap();
    let i = out.position(&id("lung_base")).unwrap();
    assert_eq!(out.nodes()[i].level, NodeLevel::Organ);
}

#[test]
fn default_graph_pads_to_fifty_without_leaks() {
    let g = build_base_graph(&BaseGraphSpec::chest_default()).unwrap();
    assert_eq!(g.len(), 28);
    let padded = pad_graph(&g, 50).unwrap();
    let mask = adjacency_to_mask(&padded);
    let real = padded.real_mask();
    for i in 0..50 {
        for j in 0..50 {
            if !real[i] || !real[j] {
                assert!(!mask.allows(i, j), "pad leak at ({i}, {j})");
            }
        }
    }
    assert!(matches!(
        pad_graph(&padded, 49),
        Err(kgreport::Error::GraphTooLarge { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn updates_keep_invariants_and_are_idempotent(seed in any::<u64>()) {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (spec, triplets) = oracle::instance(&mut r);
        let base = build_base_graph(&spec).unwrap();
        let mut g = base;
        for t in &triplets {
            let once = apply_triplet(&g, t);
            prop_assert!(once.validate().is_ok());
            prop_assert_eq!(&apply_triplet(&once, t), &once);
            g = once;
        }
    }

    #[test]
    fn order_is_irrelevant_over_existing_endpoints(seed in any::<u64>()) {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (spec, triplets) = oracle::instance(&mut r);
        let base = build_base_graph(&spec).unwrap();
        let mut inside: Vec<Triplet> = triplets
            .into_iter()
            .filter(|t| base.contains(&t.subject) && base.contains(&t.object))
            .collect();
        let a = update_graph(&base, &inside, 90).unwrap();
        inside.shuffle(&mut r);
        let b = update_graph(&base, &inside, 90).unwrap();
        prop_assert_eq!(a.adjacency(), b.adjacency());
    }
}
