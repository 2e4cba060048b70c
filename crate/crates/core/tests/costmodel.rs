mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use rankforge::costmodel::{
    count_flops, expected_layer_cost, penalty_factor, CostModel, CostReport, CostSource, LatencyTable, LayerGeometry,
    PlateauModel, TableMeta,
};
use rankforge::{ConvLayerSpec, Error, RankPair};

fn normalize(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

fn prob_and_costs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..8).prop_flat_map(|n| {
        (
            prop::collection::vec(0.01f64..1.0, n).prop_map(|w| normalize(&w)),
            prop::collection::vec(0.1f64..100.0, n),
        )
    })
}

proptest! {
    #[test]
    fn halving_budget_scales_penalty_by_two_to_theta(
        total in 1e-3f64..1e3,
        eps in 1e-3f64..1e3,
        eta in 0.1f64..5.0,
        theta in 0.0f64..3.0,
    ) {
        let a = penalty_factor(total, eps, eta, theta).unwrap();
        let b = penalty_factor(total, eps / 2.0, eta, theta).unwrap();
        prop_assert!(rel(b / a, 2f64.powf(theta)) <= 1e-12);
    }

    #[test]
    fn penalty_is_monotone_in_total(t1 in 0.0f64..10.0, dt in 0.0f64..10.0, eps in 0.1f64..10.0, theta in 0.0f64..2.0) {
        let a = penalty_factor(t1, eps, 1.0, theta).unwrap();
        let b = penalty_factor(t1 + dt, eps, 1.0, theta).unwrap();
        prop_assert!(b >= a);
    }

    #[test]
    fn expected_cost_is_bounded_by_candidates((p, c) in prob_and_costs()) {
        let e = expected_layer_cost(&p, &c).unwrap();
        let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo - 1e-9 <= e && e <= hi + 1e-9);
        prop_assert!((e - naive_expected_cost(&p, &c)).abs() <= 1e-12 * (1.0 + e));
    }

    #[test]
    fn expected_cost_is_linear_in_probabilities(
        (p, c) in prob_and_costs(),
        seed in any::<u64>(),
        a in 0.0f64..1.0,
    ) {
        let mut r = rng(seed);
        let q = normalize(&(0..p.len()).map(|_| r.gen_range(0.01..1.0)).collect::<Vec<_>>());
        let mix: Vec<f64> = p.iter().zip(&q).map(|(x, y)| a * x + (1.0 - a) * y).collect();
        let lhs = expected_layer_cost(&mix, &c).unwrap();
        let rhs = a * expected_layer_cost(&p, &c).unwrap() + (1.0 - a) * expected_layer_cost(&q, &c).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn ceiling_lookup_is_monotone_and_matches_oracle(
        grid in prop::collection::btree_set(1usize..40, 1..6),
        q1 in 1usize..40,
        q2 in 1usize..40,
        d1 in 0usize..5,
        d2 in 0usize..5,
    ) {
        let axis: Vec<usize> = grid.into_iter().collect();
        let mut t = LatencyTable::new(TableMeta::default());
        // monotone in both coordinates
        for &a in &axis {
            for &b in &axis {
                t.insert("L", RankPair::new(a, b), 1.0 + a as f64 + 0.5 * b as f64 + 0.01 * (a * b) as f64).unwrap();
            }
        }
        let oracle = |r1: usize, r2: usize| -> Option<f64> {
            let mut best: Option<(usize, usize, usize)> = None;
            for &a in &axis {
                for &b in &axis {
                    if a >= r1 && b >= r2 {
                        let key = (a - r1 + b - r2, a, b);
                        if best.is_none_or(|k| key < k) {
                            best = Some(key);
                        }
                    }
                }
            }
            best.map(|(_, a, b)| 1.0 + a as f64 + 0.5 * b as f64 + 0.01 * (a * b) as f64)
        };
        let got = t.lookup("L", RankPair::new(q1, q2)).ok();
        prop_assert_eq!(got, oracle(q1, q2));
        if let (Some(c0), Ok(c1)) = (got, t.lookup("L", RankPair::new(q1 + d1, q2 + d2))) {
            prop_assert!(c1 >= c0);
        }
    }
}

#[test]
fn penalty_examples() {
    assert_eq!(penalty_factor(3.0, 3.0, 1.7, 0.6).unwrap(), 1.7);
    assert_eq!(penalty_factor(2.0, 1.0, 1.0, 1.0).unwrap(), 2.0);
    let got = penalty_factor(1.7, 1.0, 1.2, 0.6).unwrap();
    let want = 1.2 * (0.6 * 1.7f64.ln()).exp();
    assert!(rel(got, want) <= 1e-12);
    // unbounded budget leaves only η
    assert_eq!(penalty_factor(123.0, f64::INFINITY, 0.8, 0.6).unwrap(), 0.8);
    assert!(matches!(penalty_factor(1.0, 0.0, 1.0, 0.6), Err(Error::Argument(_))));
    assert!(matches!(penalty_factor(1.0, -2.0, 1.0, 0.6), Err(Error::Argument(_))));
}

#[test]
fn expected_cost_examples_and_errors() {
    assert_eq!(expected_layer_cost(&[0.5, 0.5], &[10.0, 20.0]).unwrap(), 15.0);
    assert_eq!(expected_layer_cost(&[0.0, 1.0, 0.0], &[1.0, 7.5, 3.0]).unwrap(), 7.5);
    assert!(expected_layer_cost(&[0.5, 0.5], &[1.0]).is_err());
    assert!(expected_layer_cost(&[0.5, 0.6], &[1.0, 2.0]).is_err());
    assert!(expected_layer_cost(&[1.5, -0.5], &[1.0, 2.0]).is_err());
    let mut r = rng(5);
    for _ in 0..100 {
        let p = normalize(&(0..5).map(|_| r.gen_range(0.0..1.0)).collect::<Vec<_>>());
        let c: Vec<f64> = (0..5).map(|_| r.gen_range(0.1..50.0)).collect();
        let got = expected_layer_cost(&p, &c).unwrap();
        assert!((got - naive_expected_cost(&p, &c)).abs() <= 1e-12 * got);
    }
}

#[test]
fn cost_report_sums_layers() {
    let r = CostReport::new(vec![1.0, 2.5, 0.5], 2.0, 1.0, 1.0).unwrap();
    assert_eq!(r.total_expected, 4.0);
    assert_eq!(r.penalty_factor, 2.0);
    assert!(CostReport::new(vec![1.0], 0.0, 1.0, 1.0).is_err());
}

fn oracle_flops(f: u64, c: u64, k: u64, hw: (u64, u64), out: (u64, u64), ranks: Option<(u64, u64)>) -> u64 {
    let (oh, ow) = out;
    match ranks {
        None => 2 * f * c * k * oh * ow,
        Some((r1, r2)) => 2 * r2 * c * hw.0 * hw.1 + 2 * r1 * r2 * k * oh * ow + 2 * f * r1 * oh * ow,
    }
}

#[test]
fn flops_examples() {
    let one = conv_spec(1, 1, 1, 1, 0);
    assert_eq!(count_flops(&one, None, (1, 1)), 2);
    assert_eq!(count_flops(&one, Some(RankPair::new(1, 1)), (1, 1)), 6);
    let s = conv_spec(64, 64, 3, 1, 1);
    let dense = count_flops(&s, None, (16, 16));
    assert_eq!(dense, oracle_flops(64, 64, 9, (16, 16), (16, 16), None));
    let low = count_flops(&s, Some(RankPair::new(16, 16)), (16, 16));
    assert_eq!(low, oracle_flops(64, 64, 9, (16, 16), (16, 16), Some((16, 16))));
    assert!(low < dense);
    assert!(count_flops(&s, Some(RankPair::new(64, 64)), (16, 16)) > dense);
}

#[test]
fn flops_match_oracle_on_random_layers() {
    let mut r = rng(21);
    for _ in 0..200 {
        let (f, c) = (r.gen_range(1..40), r.gen_range(1..40));
        let k = [1usize, 3, 5][r.gen_range(0..3)];
        let stride = r.gen_range(1..3);
        let pad = r.gen_range(0..=k / 2);
        let h = r.gen_range(k..20);
        let spec = ConvLayerSpec::new("l", f, c, (k, k), stride, pad).unwrap();
        let o = (h + 2 * pad - k) / stride + 1;
        let (r1, r2) = (r.gen_range(1..=f), r.gen_range(1..=c));
        let out = (o as u64, o as u64);
        let hw = (h as u64, h as u64);
        assert_eq!(count_flops(&spec, None, (h, h)), oracle_flops(f as u64, c as u64, (k * k) as u64, hw, out, None));
        assert_eq!(
            count_flops(&spec, Some(RankPair::new(r1, r2)), (h, h)),
            oracle_flops(f as u64, c as u64, (k * k) as u64, hw, out, Some((r1 as u64, r2 as u64)))
        );
    }
}

fn geometry(id: &str, f: usize, c: usize, hw: usize) -> LayerGeometry {
    LayerGeometry {
        spec: ConvLayerSpec::new(id, f, c, (3, 3), 1, 1).unwrap(),
        input_hw: (hw, hw),
    }
}

#[test]
fn plateau_table_round_trips_through_csv() {
    let pm = PlateauModel {
        granularity: 8,
        base: 0.02,
        per_flop: 1e-6,
    };
    let layers = [geometry("a", 16, 8, 8), geometry("b", 32, 16, 4)];
    let meta = TableMeta {
        device: "synthetic".into(),
        batch: 1,
        unit: "ms".into(),
        note: "plateau".into(),
    };
    let t = pm.table(&layers, 4, meta).unwrap();
    let text = t.to_csv();
    let back = LatencyTable::parse(&text, "mem").unwrap();
    assert_eq!(back, t);
    assert_eq!(back.to_csv(), text);
    // plateaus: ranks inside one tile cost the same
    assert_eq!(
        t.lookup("b", RankPair::new(9, 9)).unwrap(),
        t.lookup("b", RankPair::new(16, 16)).unwrap()
    );
    assert!(t.lookup("b", RankPair::new(17, 16)).unwrap() > t.lookup("b", RankPair::new(16, 16)).unwrap());
}

#[test]
fn table_file_errors() {
    let dup = "# device=x\n# batch=1\n# unit=ms\nlayer_id,r1,r2,cost\nL,4,4,1.0\nL,4,4,2.0\n";
    assert!(matches!(LatencyTable::parse(dup, "t"), Err(Error::Parse { .. })));
    let neg = "layer_id,r1,r2,cost\nL,4,4,-1.0\n";
    assert!(LatencyTable::parse(neg, "t").is_err());
    let miss = LatencyTable::parse("layer_id,r1,r2,cost\nL,4,4,1.0\n", "t").unwrap();
    match miss.lookup("L", RankPair::new(5, 1)) {
        Err(Error::CostResolution { layer_id, r1, r2 }) => assert_eq!((layer_id.as_str(), r1, r2), ("L", 5, 1)),
        other => panic!("expected a resolution error, got {other:?}"),
    }
}

#[test]
fn cost_model_sources() {
    let g = geometry("a", 16, 8, 8);
    let proxy = CostModel::new(CostSource::FlopsProxy { scale: 1e-6 }, [g.clone()]);
    let r = RankPair::new(4, 4);
    assert_eq!(proxy.cost("a", r).unwrap(), count_flops(&g.spec, Some(r), (8, 8)) as f64 * 1e-6);
    assert_eq!(proxy.dense_cost("a").unwrap(), count_flops(&g.spec, None, (8, 8)) as f64 * 1e-6);
    assert!(proxy.cost("zz", r).is_err());
    let mut t = LatencyTable::new(TableMeta::default());
    t.insert("a", RankPair::new(8, 8), 2.0).unwrap();
    t.insert("a", RankPair::new(16, 8), 3.0).unwrap();
    let table = CostModel::new(CostSource::Table(t), [g]);
    assert_eq!(table.cost("a", r).unwrap(), 2.0);
    assert_eq!(table.dense_cost("a").unwrap(), 3.0);
}
