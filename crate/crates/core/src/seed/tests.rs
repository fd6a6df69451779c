use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{sgd_step, Gradients, Graph, SgdState, Tensor};
use crate::datagen::{batches, make_dataset, GeneratorSpec, ShiftKind, ShiftSpec};
use crate::error::Error;
use crate::slimnet::{Architecture, Classifier, ForwardMode, Head, ParamGroup, ParamStore, SlimModel, Trainable, WidthConfig};
use crate::symnet::{dc_loss, prob_cross_entropy, DomainBatch};

fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

fn random_rows(rng: &mut impl Rng, n: usize, k: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
            let s: f64 = z.iter().map(|v| v.exp()).sum();
            z.iter().map(|v| v.exp() / s).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn two_model_batch_is_largest_and_smallest() {
    let arch = Architecture::default();
    let b = sample_model_batch(&mut ChaCha8Rng::seed_from_u64(0), &arch, 2).unwrap();
    assert_eq!(b.configs(), &[arch.full_config(), arch.smallest_config()]);
    assert_eq!(b.ratios()[0], 1.0);
    assert!(matches!(sample_model_batch(&mut ChaCha8Rng::seed_from_u64(0), &arch, 1), Err(Error::Usage(_))));
}

#[test]
fn model_batches_are_sorted_legal_and_reproducible() {
    let arch = Architecture::default();
    let a = sample_model_batch(&mut ChaCha8Rng::seed_from_u64(5), &arch, 10).unwrap();
    let b = sample_model_batch(&mut ChaCha8Rng::seed_from_u64(5), &arch, 10).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 10);
    assert_eq!(a.configs()[0], arch.full_config());
    assert_eq!(a.configs()[9], arch.smallest_config());
    for w in a.configs().windows(2) {
        assert!(w[0].flops >= w[1].flops);
    }
    for c in a.configs() {
        arch.check_widths(&c.widths).unwrap();
    }
}

#[test]
fn sampled_widths_cover_the_legal_range() {
    let arch = Architecture::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut seen: Vec<std::collections::BTreeSet<usize>> = vec![Default::default(); arch.blocks()];
    for _ in 0..1000 {
        for c in sample_model_batch(&mut rng, &arch, 10).unwrap().configs() {
            c.widths.iter().enumerate().for_each(|(b, w)| {
                seen[b].insert(*w);
            });
        }
    }
    for (b, s) in seen.iter().enumerate() {
        let (lo, hi) = arch.width_range(b);
        assert!(s.len() as f64 >= 0.5 * (hi - lo + 1) as f64, "block {b}: {} of {}", s.len(), hi - lo + 1);
    }
}

#[test]
fn confidence_values() {
    let hard = ConfidencePolicy::default();
    assert_eq!(hard.weight(1.0), 1.0);
    assert_eq!(hard.weight(0.25), 0.0);
    assert_eq!(hard.weight(0.5), 1.0);
    let general = ConfidencePolicy { s: 1.0, mode: ConfidenceMode::General, ..hard };
    assert!((general.weight(0.75) - 0.75).abs() < 1e-15);
    assert_eq!(general.weight(0.5), 0.5);
    let near_hard = ConfidencePolicy { s: 1e-6, ..general };
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        if r == hard.lambda {
            continue;
        }
        assert!((near_hard.weight(r) - hard.weight(r)).abs() < 1e-3, "r = {r}");
    }
    assert!(ConfidencePolicy { lambda: 1.5, ..hard }.validate().is_err());
}

#[test]
fn ensemble_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = random_rows(&mut rng, 4, 3);
    let q = random_rows(&mut rng, 4, 3);
    assert_eq!(ensemble(std::slice::from_ref(&p), &[1.0]).unwrap(), p);
    let e = ensemble(&[p.clone(), q.clone(), q.clone()], &[1.0, 1.0, 0.0]).unwrap();
    for i in 0..p.len() {
        assert!((e.data()[i] - 0.5 * (p.data()[i] + q.data()[i])).abs() < 1e-12);
    }
    for r in 0..e.rows() {
        assert!((e.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(matches!(ensemble(&[p.clone(), q], &[0.0, 0.0]), Err(Error::Usage(_))));
}

#[test]
fn sharpen_values() {
    let p = Tensor::from_rows(&[vec![0.7, 0.3]]).unwrap();
    let s = sharpen(&p, 0.5).unwrap();
    assert!((s.at(0, 0) - 0.49 / 0.58).abs() < 1e-12);
    assert!((s.at(0, 1) - 0.09 / 0.58).abs() < 1e-12);
    assert!((s.at(0, 0) - 0.8448).abs() < 1e-4);
    let r = random_rows(&mut ChaCha8Rng::seed_from_u64(2), 5, 4);
    assert!(sharpen(&r, 1.0).unwrap().max_abs_diff(&r) < 1e-12);
    let u = Tensor::full(&[2, 5], 0.2);
    assert!(sharpen(&u, 0.3).unwrap().max_abs_diff(&u) < 1e-15);
    assert!(matches!(sharpen(&r, 0.0), Err(Error::Usage(_))));
}

proptest! {
    #[test]
    fn sharpen_keeps_argmax_and_lowers_entropy(seed in 0u64..10_000, k in 2usize..8, tau in 0.05f64..1.0) {
        let p = random_rows(&mut ChaCha8Rng::seed_from_u64(seed), 3, k);
        let s = sharpen(&p, tau).unwrap();
        prop_assert_eq!(p.argmax_rows(), s.argmax_rows());
        for r in 0..p.rows() {
            prop_assert!(entropy(s.row(r)) <= entropy(p.row(r)) + 1e-12);
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn seed_loss_lower_bound_is_ensemble_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g_seed = random_rows(&mut rng, 6, 4);
    let ys = vec![0, 3, 1];
    let src_onehot = crate::symnet::one_hot(&ys, 4).unwrap();
    let mut g = Graph::new();
    let aux_t = g.constant(g_seed.clone());
    let aux_s = g.constant(src_onehot);
    let loss = seed_loss_terms(&mut g, aux_t, aux_s, &g_seed, &ys).unwrap();
    let want = (0..6).map(|r| entropy(g_seed.row(r))).sum::<f64>() / 6.0;
    assert!((g.scalar(loss).unwrap() - want).abs() < 1e-12);

    let one_hot_seed = crate::symnet::one_hot(&[2, 0, 1, 1, 3, 0], 4).unwrap();
    let aux_t = g.constant(one_hot_seed.clone());
    let loss = seed_loss_terms(&mut g, aux_t, aux_s, &one_hot_seed, &ys).unwrap();
    assert_eq!(g.scalar(loss).unwrap(), 0.0);
}

#[test]
fn seed_loss_ignores_sample_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g_seed = random_rows(&mut rng, 5, 3);
    let pred = random_rows(&mut rng, 5, 3);
    let src = random_rows(&mut rng, 4, 3);
    let ys = vec![0, 1, 2, 1];
    let perm_t = [4, 2, 0, 1, 3];
    let perm_s = [3, 1, 0, 2];
    let value = |g_seed: &Tensor, pred: &Tensor, src: &Tensor, ys: &[usize]| {
        let mut g = Graph::new();
        let (a, b) = (g.constant(pred.clone()), g.constant(src.clone()));
        let l = seed_loss_terms(&mut g, a, b, g_seed, ys).unwrap();
        g.scalar(l).unwrap()
    };
    let base = value(&g_seed, &pred, &src, &ys);
    let permuted = value(
        &g_seed.select_rows(&perm_t).unwrap(),
        &pred.select_rows(&perm_t).unwrap(),
        &src.select_rows(&perm_s).unwrap(),
        &perm_s.iter().map(|&i| ys[i]).collect::<Vec<_>>(),
    );
    assert!((base - permuted).abs() < 1e-12);
}

fn tiny() -> (Architecture, DomainBatch) {
    let arch = Architecture::new(4, vec![8, 16], 1, 3).unwrap();
    let spec = GeneratorSpec {
        shift: ShiftSpec { kind: ShiftKind::Mixed, magnitude: 0.3, noise_std: 0.5 },
        classes: 3,
        dim: 4,
        n_source: 24,
        n_target: 20,
        ..GeneratorSpec::default()
    };
    let ds = make_dataset(&spec, 1).unwrap();
    let batch = batches(&ds, 12, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().remove(0);
    (arch, batch)
}

fn settings() -> StepSettings {
    StepSettings { w_ent: 0.1, policy: ConfidencePolicy::default(), tau: 0.5 }
}

fn config(arch: &Architecture, widths: &[usize]) -> WidthConfig {
    arch.config(widths.to_vec()).unwrap()
}

fn run_step(strategy: &dyn TrainStrategy, store: &mut ParamStore, batch: &DomainBatch, models: &ModelBatch) -> (StepReport, StepTrace) {
    let mut opt = SgdState::new(0.9).unwrap();
    let mut trace = StepTrace::default();
    let ctx = StepContext { store, optimizer: &mut opt, lr: 0.05, batch, models, settings: &settings() };
    let report = strategy.step(ctx, Some(&mut trace)).unwrap();
    (report, trace)
}

fn max_abs_in(grads: &Gradients, store: &ParamStore, pick: impl Fn(ParamGroup) -> bool) -> f64 {
    grads.restrict(|id| pick(store.group(id))).max_abs()
}

fn is_st(g: ParamGroup) -> bool {
    matches!(g, ParamGroup::Head(Classifier::Source | Classifier::Target))
}

fn is_aux(g: ParamGroup) -> bool {
    g == ParamGroup::Head(Classifier::Aux)
}

#[test]
fn hard_policy_routes_adaptation_to_confident_models_only() {
    let (arch, batch) = tiny();
    let mut store = ParamStore::init(&arch, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    // only the full model clears r >= 0.5
    let models = ModelBatch::from_configs(&arch, vec![arch.full_config(), config(&arch, &[4, 8]), config(&arch, &[3, 6]), arch.smallest_config()]).unwrap();
    let (report, trace) = run_step(&SlimDa, &mut store, &batch, &models);
    assert!(report.loss_seed.is_finite() && report.parts.task().is_finite());
    assert_eq!(trace.confidences, vec![1.0, 0.0, 0.0, 0.0]);
    assert_eq!(trace.extractor_weights[0], (1.0, 0.0));
    for w in &trace.extractor_weights[1..] {
        assert_eq!(*w, (0.0, 1.0 / 3.0));
    }
    for j in 0..models.len() {
        assert_eq!(max_abs_in(&trace.seed_heads[j], &store, is_st), 0.0);
        assert_eq!(max_abs_in(&trace.dc_heads[j], &store, is_aux), 0.0);
        assert!(trace.seed_heads[j].contains(store.head(Classifier::Aux).0));
    }
    let mut rebuilt = Gradients::new();
    for (j, &(a, b)) in trace.extractor_weights.iter().enumerate() {
        rebuilt.add_scaled(a, &trace.dc_extractor[j]).unwrap();
        rebuilt.add_scaled(b, &trace.seed_extractor[j]).unwrap();
    }
    for (id, g) in trace.applied_extractor.iter() {
        assert!(g.max_abs_diff(rebuilt.get(id).unwrap()) <= 1e-10);
    }
    assert!(trace.applied_extractor.iter().all(|(id, _)| store.group(id) == ParamGroup::Extractor));
}

#[test]
fn every_model_confident_leaves_no_distillation_on_the_extractor() {
    let (arch, batch) = tiny();
    let mut store = ParamStore::init(&arch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let full = arch.full_config();
    let models = ModelBatch::from_configs(&arch, vec![full.clone(), full]).unwrap();
    let (_, trace) = run_step(&SlimDa, &mut store, &batch, &models);
    assert_eq!(trace.extractor_weights, vec![(0.5, 0.0), (0.5, 0.0)]);
}

/// Single-model adaptation step written out by hand.
fn single_model_step(store: &mut ParamStore, cfg: &WidthConfig, batch: &DomainBatch, lr: f64) {
    let mut opt = SgdState::new(0.9).unwrap();
    let st = Trainable { source: true, target: true, ..Trainable::NONE };
    let grads = {
        let model = SlimModel::slice(store, cfg).unwrap();
        let mut g = Graph::new();
        let (t, _) = dc_loss(&mut g, &model, batch, 0.1, st).unwrap();
        g.backward(t.classifier_loss).unwrap()
    };
    let ids: Vec<_> = grads.iter().map(|(id, _)| id).collect();
    sgd_step(&ids, store, &grads, &mut opt, lr).unwrap();
    let grads = {
        let model = SlimModel::slice(store, cfg).unwrap();
        let mut g = Graph::new();
        let (t, _) = dc_loss(&mut g, &model, batch, 0.1, Trainable::EXTRACTOR).unwrap();
        g.backward(t.extractor_loss).unwrap()
    };
    let ids: Vec<_> = grads.iter().map(|(id, _)| id).collect();
    sgd_step(&ids, store, &grads, &mut opt, lr).unwrap();
}

#[test]
fn baseline_with_duplicate_configs_is_a_single_model_step() {
    let (arch, batch) = tiny();
    let init = ParamStore::init(&arch, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let cfg = config(&arch, &[5, 11]);
    let mut a = init.clone();
    let models = ModelBatch::from_configs(&arch, vec![cfg.clone(), cfg.clone()]).unwrap();
    let (report, _) = run_step(&Baseline, &mut a, &batch, &models);
    assert!(report.parts.task().is_finite());
    let mut b = init;
    single_model_step(&mut b, &cfg, &batch, 0.05);
    for (x, y) in a.tensors().zip(b.tensors()) {
        assert!(x.max_abs_diff(y) < 1e-14);
    }
}

#[test]
fn inplaced_small_models_distill_the_widest_prediction() {
    let (arch, batch) = tiny();
    let mut store = ParamStore::init(&arch, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let init = store.clone();
    let models = ModelBatch::from_configs(&arch, vec![arch.full_config(), arch.smallest_config()]).unwrap();
    let (_, trace) = run_step(&Inplaced, &mut store, &batch, &models);

    let joint = Tensor::vstack(&[&batch.xs, &batch.xt]).unwrap();
    let largest = SlimModel::slice(&init, &arch.full_config()).unwrap();
    let soft = largest.predict(&joint, ForwardMode::Train, Head::Task).unwrap();
    let small = SlimModel::slice(&init, &arch.smallest_config()).unwrap();
    let st = Trainable { source: true, target: true, ..Trainable::NONE };
    let mut g = Graph::new();
    let x = g.constant(joint);
    let f = small.forward_features(&mut g, x, ForwardMode::Train, st).unwrap();
    let ps = small.classify(&mut g, f, Head::S, st).unwrap();
    let pt = small.classify(&mut g, f, Head::T, st).unwrap();
    let t = g.constant(soft);
    let a = prob_cross_entropy(&mut g, ps, t).unwrap();
    let b = prob_cross_entropy(&mut g, pt, t).unwrap();
    let l = g.add(a, b).unwrap();
    let want = g.backward(l).unwrap();
    for (id, grad) in want.iter() {
        assert!(grad.max_abs_diff(trace.seed_heads[0].get(id).unwrap()) < 1e-12);
    }
    // C^a is never touched outside SLIMDA
    let aux = store.head(Classifier::Aux).0;
    assert_eq!(store.get(aux), init.get(aux));
}

#[test]
fn steps_touch_only_sliced_regions() {
    let (arch, batch) = tiny();
    for strategy in [&SlimDa as &dyn TrainStrategy, &Baseline, &Inplaced] {
        let mut store = ParamStore::init(&arch, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let init = store.clone();
        let a = config(&arch, &[7, 14]);
        let b = config(&arch, &[3, 12]);
        let models = ModelBatch::from_configs(&arch, vec![a.clone(), b.clone()]).unwrap();
        run_step(strategy, &mut store, &batch, &models);
        for id in store.ids() {
            let (r1, c1) = store.active_region(id, &a);
            let (r2, c2) = store.active_region(id, &b);
            let (before, after) = (init.get(id), store.get(id));
            let cols = *after.shape().last().unwrap();
            for i in 0..after.len() {
                let (r, c) = if after.shape().len() == 2 { (i / cols, i % cols) } else { (0, i) };
                let inside = (r < r1 && c < c1) || (r < r2 && c < c2);
                if !inside {
                    assert_eq!(before.data()[i], after.data()[i], "{} {} at ({r},{c})", strategy.name(), store.name(id));
                }
            }
        }
    }
}

fn tiny_dataset() -> crate::datagen::DomainDataset {
    let spec = GeneratorSpec {
        shift: ShiftSpec { kind: ShiftKind::Mixed, magnitude: 0.3, noise_std: 0.5 },
        classes: 3,
        dim: 4,
        n_source: 40,
        n_target: 30,
        ..GeneratorSpec::default()
    };
    make_dataset(&spec, 2).unwrap()
}

#[test]
fn training_is_deterministic_and_logs_each_epoch() {
    let arch = Architecture::new(4, vec![8, 16], 1, 3).unwrap();
    let ds = tiny_dataset();
    for mode in ["slimda", "baseline", "inplaced"] {
        let cfg = TrainerConfig { m: 4, epochs: 2, batch_size: 10, mode: mode.into(), ..TrainerConfig::default() };
        let trainer = Trainer::new(cfg, 3).unwrap();
        let init = ParamStore::init(&arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (mut a, mut b) = (init.clone(), init);
        let la = trainer.train(&mut a, &ds, TrainOptions::default()).unwrap();
        let lb = trainer.train(&mut b, &ds, TrainOptions::default()).unwrap();
        assert_eq!(la.len(), 2);
        assert_eq!(la, lb);
        assert_eq!(a, b);
        assert!(la.iter().all(|r| r.seconds.is_none() && r.probe_acc_1.is_none() && r.mode == mode));
    }
}

#[test]
fn zero_epochs_leave_the_bank_alone() {
    let arch = Architecture::new(4, vec![8, 16], 1, 3).unwrap();
    let ds = tiny_dataset();
    let trainer = Trainer::new(TrainerConfig { epochs: 0, batch_size: 10, ..TrainerConfig::default() }, 1).unwrap();
    let init = ParamStore::init(&arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut store = init.clone();
    assert!(trainer.train(&mut store, &ds, TrainOptions::default()).unwrap().is_empty());
    assert_eq!(store, init);
}

#[test]
fn config_errors() {
    assert!(matches!(Trainer::new(TrainerConfig { mode: "nope".into(), ..TrainerConfig::default() }, 0), Err(Error::Config(_))));
    assert!(Trainer::new(TrainerConfig { m: 1, ..TrainerConfig::default() }, 0).is_err());
    let arch = Architecture::new(5, vec![8], 1, 3).unwrap();
    let mut store = ParamStore::init(&arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let trainer = Trainer::new(TrainerConfig { batch_size: 10, ..TrainerConfig::default() }, 0).unwrap();
    assert!(matches!(trainer.train(&mut store, &tiny_dataset(), TrainOptions::default()), Err(Error::Config(_))));
}

#[test]
fn metrics_csv_layout() {
    let row = EpochMetrics {
        epoch: 1,
        mode: "slimda".into(),
        loss_task: 1.0,
        loss_dd: 2.0,
        loss_conf: 3.0,
        loss_ent: 0.5,
        loss_seed: 0.25,
        probe_acc_1: None,
        probe_acc_64th: Some(0.5),
        seconds: None,
    };
    let csv = metrics_csv(&[row]);
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), METRICS_HEADER);
    assert_eq!(lines.next().unwrap(), "1,slimda,1.00000000,2.00000000,3.00000000,0.50000000,0.25000000,,0.500000,");
}
