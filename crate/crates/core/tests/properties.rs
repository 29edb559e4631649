mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::oracles;
use iccl_core::corpus::Entity;
use iccl_core::curriculum::{self, OrderingStrategy, StrategyKind};
use iccl_core::difficulty::{self, HumanRanking};
use iccl_core::evaluation::{self, Metric, Prediction};
use iccl_core::gateway::EmbeddingVector;
use iccl_core::promptkit;
use iccl_core::{retrieval, Label};
use proptest::prelude::*;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("d{i:02}")).collect()
}

fn vector() -> impl Strategy<Value = Vec<f64>> {
    // small integers so duplicates and exact ties show up
    prop::collection::vec(-3i32..=3, 4).prop_filter_map("nonzero", |v| {
        v.iter().any(|x| *x != 0).then(|| v.into_iter().map(f64::from).collect())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn top_k_matches_sort_and_truncate(query in vector(), pool in prop::collection::vec(vector(), 1..12), k in 1usize..15) {
        let pool: BTreeMap<String, Vec<f64>> = ids(pool.len()).into_iter().zip(pool).collect();
        let embedded: BTreeMap<String, EmbeddingVector<f64>> =
            pool.iter().map(|(id, v)| (id.clone(), EmbeddingVector::new(v.clone()).unwrap())).collect();
        let got = retrieval::top_k("t", &EmbeddingVector::new(query.clone()).unwrap(), &embedded, k).unwrap();
        let want = oracles::top_k(&query, &pool, k);
        prop_assert_eq!(got.entries, want);
    }

    #[test]
    fn cosine_is_symmetric_and_scale_invariant(u in vector(), v in vector(), s in 0.5f64..8.0) {
        let ev = |x: &Vec<f64>| EmbeddingVector::new(x.clone()).unwrap();
        let uv = retrieval::cosine(&ev(&u), &ev(&v)).unwrap();
        let vu = retrieval::cosine(&ev(&v), &ev(&u)).unwrap();
        prop_assert_eq!(uv, vu);
        let scaled: Vec<f64> = u.iter().map(|x| x * s).collect();
        let su = retrieval::cosine(&ev(&scaled), &ev(&v)).unwrap();
        prop_assert!((uv - su).abs() < 1e-12);
        prop_assert!(uv.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn kendalls_w_matches_exact_arithmetic(
        (n, scores) in (2usize..8).prop_flat_map(|n| (Just(n), prop::collection::vec(prop::collection::vec(0i64..4, n), 2..6)))
    ) {
        let ranks2: Vec<Vec<i64>> = scores.iter().map(|s| oracles::doubled_midranks(s)).collect();
        // skip the undefined case where every judge ties everything
        let all_tied = ranks2.iter().all(|r| r.iter().all(|x| *x == r[0]));
        prop_assume!(!all_tied);
        let items = ids(n);
        let rankings: Vec<HumanRanking<f64>> = ranks2
            .iter()
            .enumerate()
            .map(|(j, r)| HumanRanking {
                judge_id: format!("j{j}"),
                ranks: items.iter().cloned().zip(r.iter().map(|x| *x as f64 / 2.0)).collect(),
            })
            .collect();
        let w = difficulty::kendalls_w(&rankings).unwrap();
        prop_assert!((w - oracles::kendalls_w(&ranks2)).abs() < 1e-12, "{} vs {}", w, oracles::kendalls_w(&ranks2));
    }

    #[test]
    fn classification_metrics_match_confusion_matrix(
        rows in prop::collection::vec((0usize..3, prop::option::weighted(0.85, 0usize..3)), 1..40)
    ) {
        let spec = common::task("scicite");
        let labels: Vec<&str> = spec.label_set.iter().map(String::as_str).collect();
        let golds: BTreeMap<String, Label> =
            rows.iter().enumerate().map(|(i, (g, _))| (format!("t{i:03}"), Label::class(labels[*g]))).collect();
        let preds: Vec<Prediction> = rows
            .iter()
            .enumerate()
            .map(|(i, (_, p))| Prediction::new(format!("t{i:03}"), p.map_or("no idea", |p| labels[p]), &spec))
            .collect();
        let r = evaluation::score_run::<f64>(&preds, &golds, &spec).unwrap();
        let gold: Vec<usize> = rows.iter().map(|(g, _)| *g).collect();
        let pred: Vec<Option<usize>> = rows.iter().map(|(_, p)| *p).collect();
        let o = oracles::classification(&labels, &gold, &pred);
        prop_assert!((r.metrics[&Metric::MacroF1] - o.macro_f1).abs() < 1e-12);
        prop_assert!((r.metrics[&Metric::MacroPrecision] - o.macro_precision).abs() < 1e-12);
        prop_assert!((r.metrics[&Metric::Accuracy] - o.accuracy).abs() < 1e-12);
    }

    #[test]
    fn extraction_micro_f1_matches_set_counts(
        rows in prop::collection::vec(
            (prop::collection::btree_set((0usize..4, 0usize..3), 0..4), prop::collection::btree_set((0usize..4, 0usize..3), 0..4)),
            1..12,
        )
    ) {
        let spec = common::task("scierc");
        let spans = ["BERT", "parsing", "F1", "corpus"];
        let types = ["Method", "Task", "Metric"];
        let to_set = |s: &BTreeSet<(usize, usize)>| -> BTreeSet<(String, String)> {
            s.iter().map(|(a, b)| (spans[*a].to_string(), types[*b].to_string())).collect()
        };
        let to_label = |s: &BTreeSet<(String, String)>| Label::Entities(s.iter().map(|(a, b)| Entity::new(a, b)).collect());
        let gold_sets: Vec<_> = rows.iter().map(|(g, _)| to_set(g)).collect();
        let pred_sets: Vec<_> = rows.iter().map(|(_, p)| to_set(p)).collect();
        let golds: BTreeMap<String, Label> =
            gold_sets.iter().enumerate().map(|(i, g)| (format!("t{i:03}"), to_label(g))).collect();
        let preds: Vec<Prediction> = pred_sets
            .iter()
            .enumerate()
            .map(|(i, p)| Prediction::new(format!("t{i:03}"), promptkit::serialize_label(&to_label(p)).unwrap(), &spec))
            .collect();
        let r = evaluation::score_run::<f64>(&preds, &golds, &spec).unwrap();
        prop_assert!((r.metrics[&Metric::MicroF1] - oracles::micro_f1(&gold_sets, &pred_sets)).abs() < 1e-12);
    }

    #[test]
    fn entity_labels_round_trip(
        pairs in prop::collection::vec(("[A-Za-z0-9][A-Za-z0-9 '\"\\-.,()]{0,14}[A-Za-z0-9]", 0usize..6), 0..5)
    ) {
        let spec = common::task("scierc");
        let label = Label::Entities(pairs.iter().map(|(s, t)| Entity::new(s.clone(), spec.entity_type_set[*t].clone())).collect());
        let text = promptkit::serialize_label(&label).unwrap();
        prop_assert_eq!(evaluation::parse_label(&text, &spec), label);
    }

    #[test]
    fn class_labels_round_trip(i in 0usize..3) {
        let spec = common::task("scicite");
        let label = Label::class(spec.label_set[i].clone());
        let text = promptkit::serialize_label(&label).unwrap();
        prop_assert_eq!(evaluation::parse_label(&text, &spec), label);
    }

    #[test]
    fn orders_are_permutations_and_follow_the_argsort(
        scores in prop::collection::vec(0i32..6, 1..10),
        seed in any::<u64>(),
        shift in -5.0f64..5.0,
        factor in 0.1f64..10.0,
    ) {
        let cands = ids(scores.len());
        let values: Vec<f64> = scores.iter().map(|s| f64::from(*s)).collect();
        let map: BTreeMap<String, f64> = cands.iter().cloned().zip(values.iter().copied()).collect();
        let order = |kind, m: &BTreeMap<String, f64>| {
            curriculum::order_demonstrations("t", &cands, &OrderingStrategy::new(kind), Some(m)).unwrap().ordered_demo_ids
        };
        let iccl = order(StrategyKind::Iccl, &map);
        let want: Vec<String> = oracles::argsort(&values).into_iter().map(|i| cands[i].clone()).collect();
        prop_assert_eq!(&iccl, &want);

        let mut anti = order(StrategyKind::AntiIccl, &map);
        anti.reverse();
        prop_assert_eq!(&anti, &iccl);

        // a strictly increasing transform of the scores leaves the order alone
        let moved: BTreeMap<String, f64> = map.iter().map(|(k, v)| (k.clone(), v * factor + shift)).collect();
        prop_assert_eq!(&order(StrategyKind::Iccl, &moved), &iccl);

        let random = curriculum::order_demonstrations::<f64>("t", &cands, &OrderingStrategy::random(seed), None)
            .unwrap()
            .ordered_demo_ids;
        let mut sorted = random.clone();
        sorted.sort();
        prop_assert_eq!(&sorted, &cands);
    }

    #[test]
    fn exhaustive_search_sees_every_permutation(n in 1usize..6, seed in any::<u64>()) {
        let cands = ids(n);
        let mut seen = Vec::new();
        let r = curriculum::exhaustive_order_search("t", &cands, |o: &[String]| {
            seen.push(o.to_vec());
            // deterministic pseudo-score per order
            let h = iccl_core::hash::fnv1a64(&o.concat()) ^ seed;
            (h % 1000) as f64
        }, 6).unwrap();
        let mut want = oracles::permutations(&cands);
        want.sort();
        prop_assert_eq!(&seen, &want);
        prop_assert_eq!(r.table.len(), want.len());
        let max = r.table.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
        let first = r.table.iter().find(|(_, s)| *s == max).unwrap();
        prop_assert_eq!(&r.best.ordered_demo_ids, &first.0);
    }
}
