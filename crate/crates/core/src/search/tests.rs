use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tensor;
use crate::error::Error;
use crate::eval::LabeledTarget;
use crate::slimnet::{adabn_recalibrate, Architecture, Head, ParamStore, SlimModel};

fn bank() -> (ParamStore, Tensor) {
    let arch = Architecture::new(4, vec![8, 16], 1, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let store = ParamStore::init(&arch, &mut rng).unwrap();
    let xt = Tensor::matrix(40, 4, (0..160).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    (store, xt)
}

#[test]
fn delta_examples() {
    let a = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
    assert_eq!(delta(&b, &a).unwrap(), 2.0);
    assert_eq!(delta(&a, &b).unwrap(), delta(&b, &a).unwrap());
    assert_eq!(delta(&a, &a).unwrap(), 0.0);
    let two = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
    let other = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap();
    assert_eq!(raw_delta(&two, &other).unwrap(), 2.0);
    assert_eq!(delta(&two, &other).unwrap(), 1.0);
    assert!(delta(&a, &two).is_err());
}

#[test]
fn anchor_scores_zero_and_needs_recalibration() {
    let (store, xt) = bank();
    let ev = UpemEvaluator::new(&store, &xt, Head::A, 16).unwrap();
    let full = store.architecture().full_config();
    let s = ev.score(&full).unwrap();
    assert_eq!(s.delta, 0.0);
    assert_eq!(s.flops_ratio, 1.0);

    let small = store.architecture().smallest_config();
    let cand = SlimModel::slice(&store, &small).unwrap();
    let mut anchor = SlimModel::slice(&store, &full).unwrap();
    assert!(matches!(upem(&cand, &anchor, &xt, Head::A), Err(Error::Usage(_))));
    anchor.set_bn(adabn_recalibrate(&anchor, &xt, 16).unwrap()).unwrap();
    let mut cand = cand;
    cand.set_bn(adabn_recalibrate(&cand, &xt, 7).unwrap()).unwrap();
    let direct = upem(&cand, &anchor, &xt, Head::A).unwrap();
    let cached = ev.score(&small).unwrap();
    assert!(direct.delta > 0.0);
    assert!((direct.delta - cached.delta).abs() < 1e-12);
    assert!(matches!(upem(&cand, &anchor, &xt.select_rows(&(0..10).collect::<Vec<_>>()).unwrap(), Head::A), Err(Error::Usage(_))));
}

#[test]
fn upem_ignores_target_order() {
    let (store, xt) = bank();
    let mut order: Vec<usize> = (0..xt.rows()).collect();
    order.reverse();
    order.swap(3, 17);
    let shuffled = xt.select_rows(&order).unwrap();
    let cfg = store.architecture().config(vec![3, 10]).unwrap();
    let a = UpemEvaluator::new(&store, &xt, Head::A, 16).unwrap().score(&cfg).unwrap();
    let b = UpemEvaluator::new(&store, &shuffled, Head::A, 16).unwrap().score(&cfg).unwrap();
    assert!((a.delta - b.delta).abs() < 1e-12);
}

#[test]
fn labels_only_add_an_accuracy() {
    let (store, xt) = bank();
    let labels: Vec<usize> = (0..xt.rows()).map(|i| i % 3).collect();
    let cfg = store.architecture().config(vec![5, 9]).unwrap();
    let plain = UpemEvaluator::new(&store, &xt, Head::Task, 16).unwrap().evaluate(&cfg).unwrap();
    let labeled = UpemEvaluator::new(&store, &xt, Head::Task, 16).unwrap().with_eval_labels(&labels).unwrap().evaluate(&cfg).unwrap();
    assert_eq!(plain.score, labeled.score);
    assert!(plain.accuracy.is_none());
    let want = LabeledTarget { xt: &xt, yt: &labels }.accuracy(&store, &cfg, Head::Task, 16).unwrap();
    assert_eq!(labeled.accuracy, Some(want));
}

#[test]
fn pearson_and_spearman_examples() {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    let y: Vec<f64> = x.iter().map(|v| 0.9 - 0.1 * v).collect();
    assert!((pearson(&x, &y).unwrap() + 1.0).abs() < 1e-12);
    assert!((spearman(&x, &y).unwrap() + 1.0).abs() < 1e-12);
    assert!(matches!(pearson(&x, &[0.5; 5]), Err(Error::Usage(_))));
    assert!(matches!(correlate(&x[..2], &y[..2]), Err(Error::Usage(_))));
    assert_eq!(average_ranks(&[3.0, 1.0, 2.0, 2.0]), vec![4.0, 1.0, 2.5, 2.5]);
    // exp is monotone, so ranks agree even though values do not scale linearly
    let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    assert!((spearman(&x, &e).unwrap() - 1.0).abs() < 1e-12);
    assert!(pearson(&x, &e).unwrap() < 1.0);
}

proptest! {
    #[test]
    fn spearman_matches_the_rank_difference_formula(seed in 0u64..5000, n in 3usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let (rx, ry) = (average_ranks(&x), average_ranks(&y));
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
        let nf = n as f64;
        let want = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
        prop_assert!((spearman(&x, &y).unwrap() - want).abs() < 1e-9);
        let p = pearson(&x, &y).unwrap();
        prop_assert!((-1.0..=1.0).contains(&p));
    }

    #[test]
    fn growth_dominates_base_and_lands_in_band(seed in 0u64..5000, frac in 0.0f64..1.0) {
        let arch = Architecture::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = crate::seed::sample_config(&mut rng, &arch);
        let target = base.flops + frac * (arch.full_flops() - base.flops);
        let band = Band { target, tolerance: 0.02 };
        let g = grow_to_band(&arch, &base.widths, band, 64, &mut rng).unwrap();
        prop_assert!(g.config.dominates(&base));
        prop_assert!(!g.saturated);
        prop_assert!(g.in_band);
        prop_assert!(band.contains(g.config.flops));
    }

    #[test]
    fn triangle_bound_holds_in_raw_norms(seed in 0u64..5000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rand_probs = |rng: &mut ChaCha8Rng| {
            let rows: Vec<Vec<f64>> = (0..6).map(|_| {
                let z: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
                let s: f64 = z.iter().sum();
                z.iter().map(|v| v / s).collect()
            }).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let (c, a) = (rand_probs(&mut rng), rand_probs(&mut rng));
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
        prop_assert!(triangle_check(&c, &a, &labels).unwrap().holds());
    }
}

#[test]
fn growth_saturates_past_the_full_config() {
    let arch = Architecture::default();
    let band = Band { target: 2.0 * arch.full_flops(), tolerance: 0.02 };
    let g = grow_to_band(&arch, &arch.smallest_config().widths, band, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(g.saturated);
    assert_eq!(g.config, arch.full_config());
}

#[test]
fn ladder_is_equal_increments_or_explicit() {
    let arch = Architecture::default();
    let plan = SearchPlan::default();
    let ladder = plan.ladder(&arch).unwrap();
    let lo = arch.smallest_config().flops;
    let step = (arch.full_flops() - lo) / 6.0;
    assert_eq!(ladder.len(), 6);
    for (i, b) in ladder.iter().enumerate() {
        assert!((b - (lo + step * (i + 1) as f64)).abs() < 1e-6);
    }
    assert_eq!(*ladder.last().unwrap(), arch.full_flops());
    let explicit = SearchPlan { budgets: Some(vec![0.25, 0.5, 1.0]), ..SearchPlan::default() };
    assert_eq!(explicit.ladder(&arch).unwrap(), vec![0.25 * arch.full_flops(), 0.5 * arch.full_flops(), arch.full_flops()]);
    for bad in [vec![0.5, 0.25], vec![0.001], vec![1.5], vec![]] {
        assert!(SearchPlan { budgets: Some(bad), ..SearchPlan::default() }.ladder(&arch).is_err());
    }
    assert!(SearchPlan { k: 0, ..SearchPlan::default() }.validate().is_err());
}

#[test]
fn greedy_widths_only_grow() {
    let (store, xt) = bank();
    let ev = UpemEvaluator::new(&store, &xt, Head::A, 16).unwrap();
    let plan = SearchPlan { k: 5, q: 6, ..SearchPlan::default() };
    let rows = inherited_greedy_search(&ev, &plan, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(rows.len(), 5);
    let mut prev = store.architecture().smallest_config();
    for w in rows.windows(2) {
        assert!(w[1].budget > w[0].budget);
    }
    for r in &rows {
        assert!(r.candidate.score.config.dominates(&prev));
        assert!(r.candidate.score.config.flops >= prev.flops);
        prev = r.candidate.score.config.clone();
    }
    assert_eq!(rows.last().unwrap().candidate.score.config, store.architecture().full_config());

    let one = inherited_greedy_search(&ev, &SearchPlan { k: 1, q: 3, ..plan.clone() }, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(one.len(), 1);
    assert!(one[0].candidate.score.config.dominates(&store.architecture().smallest_config()));

    let again = inherited_greedy_search(&ev, &plan, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(search_csv(&rows), search_csv(&again));
}

#[test]
fn greedy_picks_the_lowest_delta_candidate_each_step() {
    let (store, xt) = bank();
    let ev = UpemEvaluator::new(&store, &xt, Head::A, 16).unwrap();
    let plan = SearchPlan { k: 3, q: 5, ..SearchPlan::default() };
    let rows = inherited_greedy_search(&ev, &plan, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    // replay the same random stream and score every candidate by hand
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let arch = store.architecture();
    let mut base = arch.smallest_config().widths;
    for (row, budget) in rows.iter().zip(plan.ladder(arch).unwrap()) {
        let band = Band { target: budget, tolerance: plan.tolerance };
        let deltas: Vec<(f64, Vec<usize>)> = (0..plan.q)
            .map(|_| {
                let g = grow_to_band(arch, &base, band, plan.attempts, &mut rng).unwrap();
                (ev.score(&g.config).unwrap().delta, g.config.widths)
            })
            .collect();
        let best = deltas.iter().min_by(|a, b| a.0.total_cmp(&b.0)).unwrap();
        assert_eq!(row.candidate.score.delta, best.0);
        base = best.1.clone();
    }
}

#[test]
fn random_search_stays_in_band() {
    let arch = Architecture::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = ParamStore::init(&arch, &mut rng).unwrap();
    let xt = Tensor::matrix(30, 16, (0..480).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let ev = UpemEvaluator::new(&store, &xt, Head::A, 30).unwrap();
    let budget = 0.3 * arch.full_flops();
    let r = random_search(&ev, budget, 12, 0.02, 64, &mut rng).unwrap();
    assert_eq!(r.candidates.len(), 12);
    for c in &r.candidates {
        assert!((c.score.config.flops - budget).abs() <= 0.02 * budget);
        assert!(r.winner().score.delta <= c.score.delta);
    }
    let single = random_search(&ev, budget, 1, 0.02, 64, &mut rng).unwrap();
    assert_eq!(single.best, 0);
    assert!(matches!(random_search(&ev, 3.0 * arch.full_flops(), 1, 0.02, 8, &mut rng), Err(Error::Usage(_))));
}

#[test]
fn random_search_reports_unreachable_bands() {
    // 1-block arch: flops jump by 2*(4+3) per width step, so a 1e-6 band between steps is empty
    let arch = Architecture::new(4, vec![8], 1, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let store = ParamStore::init(&arch, &mut rng).unwrap();
    let xt = Tensor::matrix(10, 4, (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let ev = UpemEvaluator::new(&store, &xt, Head::A, 10).unwrap();
    let budget = arch.flops_of(&[4]) + 7.0;
    assert!(matches!(random_search(&ev, budget, 3, 1e-6, 8, &mut rng), Err(Error::Search(_))));
}

#[test]
fn strategies_are_registered() {
    let r = search_strategies();
    assert_eq!(r.names(), vec!["greedy", "random"]);
    let (store, xt) = bank();
    let ev = UpemEvaluator::new(&store, &xt, Head::A, 16).unwrap();
    let plan = SearchPlan { k: 2, q: 2, random_n: 3, ..SearchPlan::default() };
    let rows = r.get("random").unwrap().run(&ev, &plan, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(matches!(r.get("evolution"), Err(Error::Config(_))));
}

#[test]
fn report_csv_columns() {
    let (store, xt) = bank();
    let labels: Vec<usize> = (0..xt.rows()).map(|i| i % 3).collect();
    let plan = SearchPlan { k: 2, q: 2, ..SearchPlan::default() };
    let ev = UpemEvaluator::new(&store, &xt, Head::A, 16).unwrap();
    let rows = inherited_greedy_search(&ev, &plan, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let csv = search_csv(&rows);
    assert!(csv.starts_with("step,budget_ratio,widths,delta,flops\n"));
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(2).unwrap().starts_with("2,1.000000,8-16,0.0000000000e0,"));

    let ev = ev.with_eval_labels(&labels).unwrap();
    let rows = inherited_greedy_search(&ev, &plan, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let csv = search_csv(&rows);
    assert!(csv.starts_with("step,budget_ratio,widths,delta,flops,accuracy\n"));
    assert!(csv.lines().skip(1).all(|l| l.split(',').count() == 6));
}

#[test]
fn probe_needs_three_configs() {
    let (store, xt) = bank();
    let labels: Vec<usize> = (0..xt.rows()).map(|i| i % 3).collect();
    let target = LabeledTarget { xt: &xt, yt: &labels };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(monotonicity_probe(&store, target, Head::A, 16, 2, &mut rng), Err(Error::Usage(_))));
    assert!(capacity_rank_correlation(&[(1.0, 0.5), (2.0, 0.5), (3.0, 0.5)]).is_err());
    assert!((capacity_rank_correlation(&[(1.0, 0.1), (2.0, 0.3), (3.0, 0.2), (4.0, 0.9)]).unwrap() - 0.8).abs() < 1e-12);
}
