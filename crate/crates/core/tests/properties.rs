mod common;

use chrono::DateTime;
use proptest::prelude::*;

use nowcast_core::features::{aggregate_point_events, label_flood_class, Event, EventKind, Grid};
use nowcast_core::graph::{AdjacencyConfig, RegionGraph};
use nowcast_core::metrics::{confusion, macro_metrics};
use nowcast_core::tensor::{matmul, softmax};
use nowcast_core::{MetricsReport, Tensor};

use common::node;

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, rows * cols)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_triple_loop((m, k, n) in (1usize..9, 1usize..9, 1usize..9), seed in any::<u64>()) {
        let a: Vec<f64> = (0..m * k).map(|i| ((i as u64 ^ seed) % 1000) as f64 / 77.0 - 6.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 997) as f64 / 83.0 - 6.0).collect();
        let got = matmul(&Tensor::new([m, k], a.clone()).unwrap(), &Tensor::new([k, n], b.clone()).unwrap()).unwrap();
        for (g, w) in got.data().iter().zip(naive_matmul(&a, &b, m, k, n)) {
            prop_assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()));
        }
    }

    #[test]
    fn random_square_matmul(a in matrix(8, 8), b in matrix(8, 8)) {
        let got = matmul(&Tensor::new([8, 8], a.clone()).unwrap(), &Tensor::new([8, 8], b.clone()).unwrap()).unwrap();
        for (g, w) in got.data().iter().zip(naive_matmul(&a, &b, 8, 8, 8)) {
            prop_assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-1e3f64..1e3, 12)) {
        let t = Tensor::new([3, 4], data).unwrap();
        for axis in 0..2 {
            let s = softmax(&t, axis).unwrap();
            prop_assert!(s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let (outer, inner) = if axis == 1 { (3, 4) } else { (4, 3) };
            for o in 0..outer {
                let sum: f64 = (0..inner)
                    .map(|i| if axis == 1 { s.get(&[o, i]) } else { s.get(&[i, o]) })
                    .sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn swapping_two_classes_permutes_per_class_metrics(
        pairs in prop::collection::vec((0usize..3, 0usize..3), 1..60),
        (a, b) in (0usize..3, 0usize..3),
    ) {
        let swap = |c: usize| if c == a { b } else if c == b { a } else { c };
        let (labels, preds): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let base = MetricsReport::from_predictions(&preds, &labels).unwrap();
        let sl: Vec<usize> = labels.iter().map(|&c| swap(c)).collect();
        let sp: Vec<usize> = preds.iter().map(|&c| swap(c)).collect();
        let swapped = MetricsReport::from_predictions(&sp, &sl).unwrap();
        for c in 0..3 {
            prop_assert_eq!(&base.per_class[c], &swapped.per_class[swap(c)]);
        }
        prop_assert!((base.macro_precision - swapped.macro_precision).abs() < 1e-15);
        prop_assert!((base.macro_recall - swapped.macro_recall).abs() < 1e-15);
        prop_assert!((base.macro_f1 - swapped.macro_f1).abs() < 1e-15);
        prop_assert_eq!(base.accuracy, swapped.accuracy);

        let f1s: Vec<f64> = base.per_class.iter().map(|m| m.f1).collect();
        let (lo, hi) = f1s.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        prop_assert!(base.macro_f1 >= lo - 1e-15 && base.macro_f1 <= hi + 1e-15);
        prop_assert!((0.0..=1.0).contains(&base.accuracy));
    }

    #[test]
    fn confusion_total_is_conserved(
        pairs in prop::collection::vec((0usize..3, 0usize..3), 0..50),
        moved in prop::collection::vec(0usize..3, 50),
    ) {
        let (labels, preds): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let before = confusion(&preds, &labels, 3).unwrap();
        let changed: Vec<usize> = preds.iter().zip(&moved).map(|(_, &m)| m).collect();
        let after = confusion(&changed, &labels, 3).unwrap();
        prop_assert_eq!(before.total(), labels.len() as u64);
        prop_assert_eq!(after.total(), before.total());
        if !labels.is_empty() {
            let r = macro_metrics(&after).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.macro_f1));
        }
    }

    #[test]
    fn labels_are_monotone_in_flooded_fraction(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(label_flood_class(lo).unwrap() <= label_flood_class(hi).unwrap());
    }

    #[test]
    fn point_events_are_conserved(
        raw in prop::collection::vec((-2000.0f64..4000.0, -2000.0f64..4000.0, -3i64..14), 0..80),
        radius in prop::option::of(100.0f64..2000.0),
    ) {
        let nodes = vec![node("a", 0.0, 0.0), node("b", 1500.0, 200.0), node("c", 700.0, 1800.0)];
        let grid = Grid::new(DateTime::from_timestamp(1_590_969_600, 0).unwrap(), 10);
        let events: Vec<Event> = raw
            .iter()
            .map(|&(x, y, slot)| Event {
                kind: EventKind::Tweet,
                timestamp: grid.time(0) + slot * 900,
                x: Some(x),
                y: Some(y),
                tile_id: None,
                value: 1.0,
            })
            .collect();
        let counts = aggregate_point_events(&events, &nodes, &grid, radius).unwrap();
        prop_assert_eq!(counts.total_events, events.len());
        prop_assert_eq!(counts.assigned() + counts.outside_grid, events.len());
        prop_assert!(counts.snapped <= counts.assigned());
        prop_assert!(counts.counts.iter().flatten().all(|&v| v >= 0.0 && v.fract() == 0.0));
    }

    #[test]
    fn relabelled_graph_permutes_basis(perm in Just(vec![0usize, 1, 2, 3, 4]).prop_shuffle()) {
        let nodes = vec![
            node("p0", 0.0, 0.0),
            node("p1", 800.0, 300.0),
            node("p2", 100.0, 1200.0),
            node("p3", 1700.0, 900.0),
            node("p4", 600.0, 2300.0),
        ];
        let cfg = AdjacencyConfig::default();
        let base = RegionGraph::build(nodes.clone(), &cfg, 3).unwrap();
        let shuffled: Vec<_> = perm.iter().map(|&i| nodes[i].clone()).collect();
        let moved = RegionGraph::build(shuffled, &cfg, 3).unwrap();
        for (tb, tm) in base.cheb_basis().iter().zip(moved.cheb_basis()) {
            for i in 0..5 {
                for j in 0..5 {
                    prop_assert_eq!(tm[[i, j]], tb[[perm[i], perm[j]]]);
                }
            }
        }
    }
}
