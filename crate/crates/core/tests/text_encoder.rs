mod common;

use common::{oracle_search, SearchInstance};
use isr_core::numerics::{Tape, Tensor};
use isr_core::text_encoder::{
    aggregate_paths, encode_text, forward_search, intra_utterance_enrich, replay_matrix,
    reverse_and_augment, Anchor, EntityPath, EntityRef,
};
use proptest::prelude::*;

const GRID: [f64; 4] = [0.0, 0.3, 0.6, 0.9];

#[test]
fn search_matches_oracle_on_random_instances() {
    for seed in 0..1000 {
        let inst = SearchInstance::random(seed);
        let (e, map) = (inst.tensor(), inst.map());
        for anchor in Anchor::BOTH {
            for p in GRID {
                let got = forward_search(&e, anchor, p, &map);
                let (rows, nodes) = oracle_search(&inst, anchor.slot(), p);
                assert_eq!(got.matrix.rows, rows, "seed {seed} {anchor:?} p={p}");
                let got_nodes: Vec<(usize, usize)> =
                    got.path.nodes.iter().map(|n| (n.utterance, n.slot)).collect();
                assert_eq!(got_nodes, nodes, "seed {seed} {anchor:?} p={p}");
                assert_eq!(replay_matrix(&got.comparisons, anchor, inst.t - 1), got.matrix);
            }
        }
    }
}

#[test]
fn raising_the_threshold_first_diverges_by_dropping_a_match() {
    let (mut nested, mut diverged) = (0, 0);
    for seed in 0..500 {
        let inst = SearchInstance::random(10_000 + seed);
        let (e, map) = (inst.tensor(), inst.map());
        for anchor in Anchor::BOTH {
            for w in GRID.windows(2) {
                let lo = forward_search(&e, anchor, w[0], &map);
                let hi = forward_search(&e, anchor, w[1], &map);
                match lo
                    .comparisons
                    .iter()
                    .zip(&hi.comparisons)
                    .find(|(a, b)| a.matched != b.matched)
                {
                    None => {
                        assert_eq!(lo.path, hi.path);
                        nested += 1;
                    }
                    Some((a, b)) => {
                        assert!(a.matched.is_some() && b.matched.is_none(), "seed {seed}");
                        diverged += 1;
                    }
                }
            }
        }
    }
    assert!(nested > 0 && diverged > 0, "nested {nested} diverged {diverged}");
}

#[test]
fn threshold_one_never_connects_and_zero_rows_never_match() {
    for seed in 0..200 {
        let inst = SearchInstance::random(20_000 + seed);
        let (e, map) = (inst.tensor(), inst.map());
        for anchor in Anchor::BOTH {
            let r = forward_search(&e, anchor, 1.0, &map);
            assert_eq!(r.matrix.connections(), 0);
            assert_eq!(r.path.nodes.len(), 1);
            let r = forward_search(&e, anchor, 0.0, &map);
            for c in &r.comparisons {
                if let Some(j) = c.matched {
                    assert!(inst.rows[3 * c.tau + j].iter().any(|&x| x != 0.0));
                }
            }
        }
    }
}

/// Hand-built history where the question subject reappears as the object of
/// utterance 3 and, through it, as the subject of utterance 1.
#[test]
fn worked_chain_reverses_with_one_shortcut() {
    let d = 4;
    let unit = |i: usize| (0..d).map(|j| (i == j) as u8 as f64).collect::<Vec<f64>>();
    let zero = vec![0.0; d];
    let rows = vec![
        unit(0), zero.clone(), unit(1),
        unit(2), zero.clone(), unit(3),
        unit(1), zero.clone(), unit(0),
        unit(0), zero.clone(), unit(3),
    ];
    let e = Tensor::from_rows(&rows).unwrap();
    let mut w = Tensor::zeros(&[2 * d, d]);
    for i in 0..d {
        w.data_mut()[i * d + i] = 0.5;
        w.data_mut()[(d + i) * d + i] = 0.5;
    }
    let map = isr_core::text_encoder::SearchMap {
        weight: w,
        bias: Tensor::zeros(&[d]),
    };
    let r = forward_search(&e, Anchor::Subject, 0.6, &map);
    let names: Vec<String> = r.path.nodes.iter().map(ToString::to_string).collect();
    assert_eq!(names, ["s4", "o3", "s1"]);
    let rev = reverse_and_augment(&r.path);
    let names: Vec<String> = rev.nodes.iter().map(ToString::to_string).collect();
    assert_eq!(names, ["s1", "o3", "s4"]);
    let (s1, o3, s4) = (rev.nodes[0], rev.nodes[1], rev.nodes[2]);
    let added: Vec<_> = rev
        .edges
        .iter()
        .filter(|e| !r.path.edges.contains(&(e.1, e.0)))
        .collect();
    assert_eq!(added, [&(s1, s4)]);
    assert!(rev.edges.contains(&(s1, o3)) && rev.edges.contains(&(o3, s4)));
}

fn node(u: usize, s: usize) -> EntityRef {
    EntityRef {
        utterance: u,
        slot: s,
    }
}

fn closed(nodes: &[EntityRef]) -> EntityPath {
    let newest_first: Vec<EntityRef> = nodes.iter().rev().copied().collect();
    reverse_and_augment(&EntityPath {
        anchor: Anchor::Subject,
        edges: newest_first.windows(2).map(|w| (w[0], w[1])).collect(),
        nodes: newest_first,
    })
}

#[test]
fn aggregation_only_touches_path_rows() {
    let tape = Tape::new();
    let mut rng = isr_core::numerics::seeded_rng(4);
    let e = tape.constant(common::random_matrix(&mut rng, 15, 5, 1.0));
    let w1 = tape.constant(common::random_matrix(&mut rng, 5, 5, 0.5));
    let path = closed(&[node(0, 2), node(2, 0), node(4, 0)]);
    let (out, rec) = aggregate_paths(e, &[path], w1).unwrap();
    let (before, after) = (e.value(), out.value());
    let touched = [6, 12];
    for r in 0..15 {
        assert_eq!(before.row(r) == after.row(r), !touched.contains(&r), "row {r}");
    }
    assert_eq!(rec.len(), 2);
    assert_eq!(rec[1].predecessors, vec![node(0, 2), node(2, 0)]);
}

#[test]
fn first_utterance_question_has_no_history() {
    let tape = Tape::new();
    let e = tape.constant(Tensor::full(&[3, 4], 0.5));
    let q = tape.constant(Tensor::full(&[3, 4], 0.1));
    let w1 = tape.constant(Tensor::identity(4));
    let map = isr_core::text_encoder::SearchMap {
        weight: Tensor::zeros(&[8, 4]),
        bias: Tensor::zeros(&[4]),
    };
    let out = encode_text(e, q, &[vec![0], vec![2]], 0.6, &map, w1).unwrap();
    assert!(out.history.is_none());
    assert!(out.trace.paths.iter().all(|p| p.nodes.len() == 1 && p.edges.is_empty()));
    assert_eq!(out.question.value().row(0), out.enriched.value().row(0));
    assert_eq!(out.question.value().row(2), out.enriched.value().row(2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn aggregation_weights_are_distributions(seed in 0u64..1_000_000, p_idx in 0usize..4) {
        let inst = SearchInstance::random(seed);
        let tape = Tape::new();
        let e = intra_utterance_enrich(tape.constant(inst.tensor())).unwrap();
        let mut rng = isr_core::numerics::seeded_rng(seed ^ 0xa5);
        let w1 = tape.constant(common::random_matrix(&mut rng, inst.d, inst.d, 1.0));
        let paths: Vec<EntityPath> = Anchor::BOTH
            .iter()
            .map(|&a| reverse_and_augment(&forward_search(&e.value(), a, GRID[p_idx], &inst.map()).path))
            .collect();
        let (_, records) = aggregate_paths(e, &paths, w1).unwrap();
        for r in records {
            prop_assert_eq!(r.weights.len(), r.predecessors.len());
            prop_assert!(r.weights.iter().all(|&w| w >= 0.0));
            prop_assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn encoding_is_deterministic(seed in 0u64..1_000_000) {
        let inst = SearchInstance::random(seed);
        let run = || {
            let tape = Tape::new();
            let e = tape.constant(inst.tensor());
            let q = tape.constant(Tensor::full(&[4, inst.d], 0.25));
            let w1 = tape.constant(Tensor::identity(inst.d));
            let out = encode_text(e, q, &[vec![1], vec![3]], 0.3, &inst.map(), w1).unwrap();
            (out.refined.value().data().to_vec(), out.trace)
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                        b.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(a.1, b.1);
    }
}
