use proptest::prelude::*;

use gsnias::anchors::item_entropy;
use gsnias::autodiff::{softmax_in_place, Tape, Tensor};
use gsnias::corpus::{augment, preprocess, split_by_session, Session, SessionCorpus, TrainingExample, Vocab};
use gsnias::graph::{build_graph, sample_neighbors};
use gsnias::gsn::{gsn_node_update, unit_normalize};
use gsnias::metrics::{evaluate_ranker, metrics_from_ranks, Ranker, SPopRanker};
use gsnias::model::{fuse, FusionWeights};

fn corpus_from(raw: &[Vec<usize>], n_items: usize) -> SessionCorpus {
    let vocab = Vocab::from_labels((0..n_items).map(|i| format!("i{i}"))).unwrap();
    SessionCorpus {
        sessions: raw
            .iter()
            .enumerate()
            .map(|(k, s)| Session {
                id: format!("s{k}"),
                items: s.clone(),
            })
            .collect(),
        vocab,
    }
}

fn sessions(n_items: usize) -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::vec(0..n_items, 1..8), 1..25)
}

fn unit(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d)
        .prop_filter("not near zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-4)
        .prop_map(|v| unit_normalize(&v).unwrap())
}

proptest! {
    #[test]
    fn preprocess_is_idempotent(raw in sessions(8), min_freq in 1usize..4, min_len in 1usize..4) {
        let corpus = corpus_from(&raw, 8);
        if let Ok(once) = preprocess(&corpus, min_freq, min_len) {
            let twice = preprocess(&once, min_freq, min_len).unwrap();
            prop_assert_eq!(&once, &twice);
            let counts = once.item_counts();
            prop_assert!(counts.iter().all(|&c| c >= min_freq));
            prop_assert!(once.sessions.iter().all(|s| s.items.len() >= min_len));
        }
    }

    #[test]
    fn augment_yields_one_example_per_transition(raw in sessions(6), max_len in 1usize..6) {
        let corpus = corpus_from(&raw, 6);
        let examples = augment(&corpus, max_len);
        let expected: usize = raw.iter().map(|s| s.len() - 1).sum();
        prop_assert_eq!(examples.len(), expected);
        prop_assert!(examples.iter().all(|e| !e.prefix.is_empty() && e.prefix.len() <= max_len));
    }

    #[test]
    fn graph_is_symmetric_and_conserves_weight(raw in sessions(7), k in 1usize..5) {
        let corpus = corpus_from(&raw, 7);
        let g = build_graph(&corpus, k).unwrap();
        for a in 0..7 {
            prop_assert_eq!(g.weight(a, a), None);
            for b in 0..7 {
                prop_assert_eq!(g.weight(a, b), g.weight(b, a));
            }
        }
        let mut expected = 0u64;
        for s in &raw {
            for p in 0..s.len() {
                for q in p + 1..s.len().min(p + k + 1) {
                    expected += (s[p] != s[q]) as u64;
                }
            }
        }
        prop_assert_eq!(g.total_weight(), expected);
        let adj = sample_neighbors(&g, 3).unwrap();
        for i in 0..7 {
            prop_assert!(adj.neighbors(i).len() <= 3.min(g.degree(i)));
        }
    }

    #[test]
    fn entropy_ignores_session_order(raw in sessions(6)) {
        let a = item_entropy(&corpus_from(&raw, 6)).unwrap();
        let mut rev = raw.clone();
        rev.reverse();
        let b = item_entropy(&corpus_from(&rev, 6)).unwrap();
        for (x, y) in a.entropy.iter().zip(&b.entropy) {
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!(*x >= 0.0);
        }
    }

    #[test]
    fn split_partitions_sessions(raw in sessions(5), frac in 0.0f64..0.9, seed in any::<u64>()) {
        let corpus = corpus_from(&raw, 5);
        let (train, test) = split_by_session(&corpus, frac, seed).unwrap();
        prop_assert_eq!(train.sessions.len() + test.sessions.len(), raw.len());
        prop_assert_eq!(train.vocab.len(), 5);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        row in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -50.0f64..50.0,
    ) {
        let mut a = row.clone();
        softmax_in_place(&mut a);
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut b: Vec<f64> = row.iter().map(|x| x + shift).collect();
        softmax_in_place(&mut b);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }

        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(row.clone()));
        let s = tape.softmax_rows(v).unwrap();
        prop_assert!((tape.value(s).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn node_update_is_unit_and_order_free(
        h in unit(5),
        nb in prop::collection::vec(unit(5), 1..7),
        t in 1usize..6,
    ) {
        let refs: Vec<&[f64]> = nb.iter().map(Vec::as_slice).collect();
        let out = gsn_node_update(&h, &refs, t).unwrap();
        let norm = out.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-9);
        prop_assert!((out.alphas.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(out.alphas.iter().all(|&a| a >= 0.0));

        let mut rev = refs.clone();
        rev.reverse();
        let back = gsn_node_update(&h, &rev, t).unwrap();
        for (x, y) in out.embedding.iter().zip(&back.embedding) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_mass_matches_weights(
        logits in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..10),
        wa in -6.0f64..6.0,
        wb in -6.0f64..6.0,
    ) {
        let mut ya: Vec<f64> = logits.iter().map(|p| p.0).collect();
        let mut yb: Vec<f64> = logits.iter().map(|p| p.1).collect();
        softmax_in_place(&mut ya);
        softmax_in_place(&mut yb);
        let w = FusionWeights { omega_a: wa, omega_b: wb };
        let y = fuse(&ya, &yb, w).unwrap();
        let (sa, sb) = w.weights();
        prop_assert!((y.iter().sum::<f64>() - (sa + sb)).abs() < 1e-9);
        prop_assert!(y.iter().all(|&v| v > 0.0));
        // swapping the heads together with their weights changes nothing
        let swapped = fuse(&yb, &ya, FusionWeights { omega_a: wb, omega_b: wa }).unwrap();
        for (x, z) in y.iter().zip(&swapped) {
            prop_assert!((x - z).abs() < 1e-15);
        }
    }

    #[test]
    fn mrr_never_exceeds_hr(ranks in prop::collection::vec(1usize..60, 0..40), k in 1usize..30) {
        let m = metrics_from_ranks(&ranks, k);
        prop_assert!(0.0 <= m.mrr_at_k && m.mrr_at_k <= m.hr_at_k && m.hr_at_k <= 1.0);
    }

    #[test]
    fn evaluation_ignores_example_order(
        ex in prop::collection::vec((prop::collection::vec(0usize..9, 1..5), 0usize..9), 1..20),
        counts in prop::collection::vec(0usize..20, 9),
    ) {
        let examples: Vec<TrainingExample> =
            ex.iter().map(|(p, t)| TrainingExample { prefix: p.clone(), target: *t }).collect();
        let ranker = SPopRanker::from_counts(counts);
        let a = evaluate_ranker(&ranker, &examples, 3).unwrap();
        let mut rev = examples.clone();
        rev.reverse();
        let b = evaluate_ranker(&ranker, &rev, 3).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn spop_puts_prefix_items_first(
        prefix in prop::collection::vec(0usize..10, 1..6),
        counts in prop::collection::vec(0usize..50, 10),
    ) {
        let ranker = SPopRanker::from_counts(counts);
        let mut distinct = prefix.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let top = ranker.top_k(&prefix, distinct.len()).unwrap();
        let mut got = top.clone();
        got.sort_unstable();
        prop_assert_eq!(got, distinct);
    }
}
