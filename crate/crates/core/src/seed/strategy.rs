use std::sync::Arc;

use crate::autodiff::{sgd_step, Gradients, Graph, NodeId, ParamId, SgdState, Tensor};
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::slimnet::{Classifier, ForwardMode, Head, ParamStore, SlimModel, Trainable};
use crate::symnet::{dc_terms, prob_cross_entropy, DcHeads, DcLossParts, DomainBatch};

use super::batch::{confidence, ConfidencePolicy, ModelBatch};
use super::distill::{ensemble, seed_loss_terms, sharpen};

/// Loss settings shared by every update rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSettings {
    pub w_ent: f64,
    pub policy: ConfidencePolicy,
    pub tau: f64,
}

pub struct StepContext<'a> {
    pub store: &'a mut ParamStore,
    pub optimizer: &'a mut SgdState,
    pub lr: f64,
    pub batch: &'a DomainBatch,
    pub models: &'a ModelBatch,
    pub settings: &'a StepSettings,
}

/// Loss values averaged over the models that computed them.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepReport {
    pub parts: DcLossParts,
    pub loss_seed: f64,
}

/// Per-model gradient bookkeeping of one step, for auditing the routing.
/// Gradients are recorded separately per loss; the applied totals come from
/// the combined backward passes the update actually used.
#[derive(Clone, Debug, Default)]
pub struct StepTrace {
    pub confidences: Vec<f64>,
    /// Classifier phase: gradients of the classifier-role objective.
    pub dc_heads: Vec<Gradients>,
    /// Classifier phase: gradients of the distillation objective.
    pub seed_heads: Vec<Gradients>,
    pub applied_heads: Gradients,
    /// `(weight of the adaptation term, weight of the distillation term)`
    /// for each model in the extractor phase.
    pub extractor_weights: Vec<(f64, f64)>,
    pub dc_extractor: Vec<Gradients>,
    pub seed_extractor: Vec<Gradients>,
    pub applied_extractor: Gradients,
}

/// One training update rule over a sampled model batch.
pub trait TrainStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Head used when the trained bank is deployed and searched.
    fn deploy_head(&self) -> Head;

    fn step(&self, ctx: StepContext<'_>, trace: Option<&mut StepTrace>) -> Result<StepReport>;
}

pub fn train_strategies() -> Registry<dyn TrainStrategy> {
    let mut r: Registry<dyn TrainStrategy> = Registry::new("training mode");
    r.register("slimda", Arc::new(SlimDa)).expect("fresh registry");
    r.register("baseline", Arc::new(Baseline)).expect("fresh registry");
    r.register("inplaced", Arc::new(Inplaced)).expect("fresh registry");
    r
}

const CLASSIFIER_ST: Trainable = Trainable { extractor: false, source: true, target: true, aux: false };

fn ids_of(store: &ParamStore, heads: &[Classifier]) -> Vec<ParamId> {
    heads.iter().flat_map(|c| store.head_ids(*c)).collect()
}

fn apply(store: &mut ParamStore, opt: &mut SgdState, ids: &[ParamId], grads: &Gradients, lr: f64) -> Result<()> {
    let present: Vec<ParamId> = ids.iter().copied().filter(|id| grads.contains(*id)).collect();
    sgd_step(&present, store, grads, opt, lr)
}

fn mean_parts(parts: &[DcLossParts]) -> DcLossParts {
    let n = parts.len().max(1) as f64;
    let mut out = DcLossParts::default();
    for p in parts {
        out.task_s += p.task_s / n;
        out.task_t += p.task_t / n;
        out.domain_disc += p.domain_disc / n;
        out.cat_confusion += p.cat_confusion / n;
        out.dom_confusion += p.dom_confusion / n;
        out.entropy_min += p.entropy_min / n;
    }
    out
}

fn backward_separately(g: &mut Graph, losses: &[NodeId]) -> Result<Vec<Gradients>> {
    losses
        .iter()
        .map(|&l| {
            g.reset_grads();
            g.backward(l)
        })
        .collect()
}

fn weighted_sum(g: &mut Graph, terms: &[(f64, NodeId)]) -> Result<Option<NodeId>> {
    let mut total: Option<NodeId> = None;
    for &(w, node) in terms {
        if w == 0.0 {
            continue;
        }
        let scaled = if w == 1.0 { node } else { g.scale(node, w)? };
        total = Some(match total {
            None => scaled,
            Some(t) => g.add(t, scaled)?,
        });
    }
    Ok(total)
}

/// Stochastic ensemble distillation with optimization-separated heads.
pub struct SlimDa;

/// Plain averaging of the domain-confusion objective over the model batch.
pub struct Baseline;

/// The widest model adapts; the others distill its task prediction.
pub struct Inplaced;

struct ClassifierPass {
    graph: Graph,
    dc: NodeId,
    aux_src: NodeId,
    aux_tgt: NodeId,
}

impl TrainStrategy for SlimDa {
    fn name(&self) -> &'static str {
        "slimda"
    }

    fn deploy_head(&self) -> Head {
        Head::A
    }

    fn step(&self, ctx: StepContext<'_>, mut trace: Option<&mut StepTrace>) -> Result<StepReport> {
        let StepContext { store, optimizer, lr, batch, models, settings } = ctx;
        let m = models.len() as f64;
        let conf = confidence(models, &settings.policy);

        // classifier phase: extractor detached, C^s/C^t from the adaptation
        // objective, C^a from distillation
        let mut passes = Vec::with_capacity(models.len());
        let mut predictions = Vec::with_capacity(models.len());
        let mut parts = Vec::with_capacity(models.len());
        for cfg in models.configs() {
            let model = SlimModel::slice(store, cfg)?;
            let mut g = Graph::new();
            let (heads, fs, ft) = DcHeads::build(&mut g, &model, batch, Trainable::HEADS)?;
            let t = dc_terms(&mut g, &heads, &batch.ys, settings.w_ent)?;
            let aux_src = model.classify(&mut g, fs, Head::A, Trainable::HEADS)?;
            let aux_tgt = model.classify(&mut g, ft, Head::A, Trainable::HEADS)?;
            predictions.push(g.value(heads.task_tgt).clone());
            parts.push(t.parts);
            passes.push(ClassifierPass { graph: g, dc: t.classifier_loss, aux_src, aux_tgt });
        }
        let g_seed = sharpen(&ensemble(&predictions, &conf)?, settings.tau)?;

        let mut head_grads = Gradients::new();
        let mut seed_values = Vec::with_capacity(passes.len());
        for pass in &mut passes {
            let g = &mut pass.graph;
            let seed = seed_loss_terms(g, pass.aux_tgt, pass.aux_src, &g_seed, &batch.ys)?;
            seed_values.push(g.scalar(seed)?);
            let total = g.add(pass.dc, seed)?;
            head_grads.add_scaled(1.0 / m, &g.backward(total)?)?;
            if let Some(tr) = trace.as_deref_mut() {
                let sep = backward_separately(g, &[pass.dc, seed])?;
                tr.dc_heads.push(sep[0].clone());
                tr.seed_heads.push(sep[1].clone());
            }
        }
        drop(passes);
        let head_ids = ids_of(store, &Classifier::ALL);
        apply(store, optimizer, &head_ids, &head_grads, lr)?;

        // extractor phase on the updated heads: adaptation gradients weighted
        // by confidence, distillation gradients by the complement, each
        // expectation normalized on its own
        let conf_total: f64 = conf.iter().sum();
        let rest_total: f64 = conf.iter().map(|c| 1.0 - c).sum();
        let weights: Vec<(f64, f64)> = conf
            .iter()
            .map(|c| {
                let a = if conf_total > 0.0 { c / conf_total } else { 0.0 };
                let b = if rest_total > 0.0 { (1.0 - c) / rest_total } else { 0.0 };
                (a, b)
            })
            .collect();
        let mut ext_grads = Gradients::new();
        for (cfg, &(a, b)) in models.configs().iter().zip(&weights) {
            let tracing = trace.is_some();
            if a == 0.0 && b == 0.0 && !tracing {
                continue;
            }
            let model = SlimModel::slice(store, cfg)?;
            let mut g = Graph::new();
            let (heads, fs, ft) = DcHeads::build(&mut g, &model, batch, Trainable::EXTRACTOR)?;
            let dc = if a > 0.0 || tracing { Some(dc_terms(&mut g, &heads, &batch.ys, settings.w_ent)?.extractor_loss) } else { None };
            let seed = if b > 0.0 || tracing {
                let aux_src = model.classify(&mut g, fs, Head::A, Trainable::EXTRACTOR)?;
                let aux_tgt = model.classify(&mut g, ft, Head::A, Trainable::EXTRACTOR)?;
                Some(seed_loss_terms(&mut g, aux_tgt, aux_src, &g_seed, &batch.ys)?)
            } else {
                None
            };
            let mut terms = Vec::new();
            if let Some(n) = dc {
                terms.push((a, n));
            }
            if let Some(n) = seed {
                terms.push((b, n));
            }
            if let Some(total) = weighted_sum(&mut g, &terms)? {
                ext_grads.add_scaled(1.0, &g.backward(total)?)?;
            }
            if let Some(tr) = trace.as_deref_mut() {
                let sep = backward_separately(&mut g, &[dc.expect("traced"), seed.expect("traced")])?;
                tr.dc_extractor.push(sep[0].clone());
                tr.seed_extractor.push(sep[1].clone());
            }
        }
        let ext_ids = store.extractor_ids();
        apply(store, optimizer, &ext_ids, &ext_grads, lr)?;

        if let Some(tr) = trace {
            tr.confidences = conf;
            tr.extractor_weights = weights;
            tr.applied_heads = head_grads;
            tr.applied_extractor = ext_grads;
        }
        Ok(StepReport { parts: mean_parts(&parts), loss_seed: seed_values.iter().sum::<f64>() / m })
    }
}

impl TrainStrategy for Baseline {
    fn name(&self) -> &'static str {
        "baseline"
    }

    fn deploy_head(&self) -> Head {
        Head::Task
    }

    fn step(&self, ctx: StepContext<'_>, mut trace: Option<&mut StepTrace>) -> Result<StepReport> {
        let StepContext { store, optimizer, lr, batch, models, settings } = ctx;
        let m = models.len() as f64;
        let mut head_grads = Gradients::new();
        let mut parts = Vec::with_capacity(models.len());
        for cfg in models.configs() {
            let model = SlimModel::slice(store, cfg)?;
            let mut g = Graph::new();
            let (heads, _, _) = DcHeads::build(&mut g, &model, batch, CLASSIFIER_ST)?;
            let t = dc_terms(&mut g, &heads, &batch.ys, settings.w_ent)?;
            parts.push(t.parts);
            let grads = g.backward(t.classifier_loss)?;
            head_grads.add_scaled(1.0 / m, &grads)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.dc_heads.push(grads);
            }
        }
        let ids = ids_of(store, &[Classifier::Source, Classifier::Target]);
        apply(store, optimizer, &ids, &head_grads, lr)?;

        let mut ext_grads = Gradients::new();
        for cfg in models.configs() {
            let model = SlimModel::slice(store, cfg)?;
            let mut g = Graph::new();
            let (heads, _, _) = DcHeads::build(&mut g, &model, batch, Trainable::EXTRACTOR)?;
            let t = dc_terms(&mut g, &heads, &batch.ys, settings.w_ent)?;
            let grads = g.backward(t.extractor_loss)?;
            ext_grads.add_scaled(1.0 / m, &grads)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.dc_extractor.push(grads);
                tr.extractor_weights.push((1.0 / m, 0.0));
            }
        }
        let ids = store.extractor_ids();
        apply(store, optimizer, &ids, &ext_grads, lr)?;
        if let Some(tr) = trace {
            tr.applied_heads = head_grads;
            tr.applied_extractor = ext_grads;
        }
        Ok(StepReport { parts: mean_parts(&parts), loss_seed: 0.0 })
    }
}

/// Cross-entropy of both bi-classifier heads against a fixed soft target on
/// the joint source/target rows.
fn inplaced_distill(g: &mut Graph, model: &SlimModel<'_>, x: &Tensor, target: &Tensor, trainable: Trainable) -> Result<NodeId> {
    let xn = g.constant(x.clone());
    let f = model.forward_features(g, xn, ForwardMode::Train, trainable)?;
    let ps = model.classify(g, f, Head::S, trainable)?;
    let pt = model.classify(g, f, Head::T, trainable)?;
    let t = g.constant(target.clone());
    let a = prob_cross_entropy(g, ps, t)?;
    let b = prob_cross_entropy(g, pt, t)?;
    g.add(a, b)
}

impl TrainStrategy for Inplaced {
    fn name(&self) -> &'static str {
        "inplaced"
    }

    fn deploy_head(&self) -> Head {
        Head::Task
    }

    fn step(&self, ctx: StepContext<'_>, mut trace: Option<&mut StepTrace>) -> Result<StepReport> {
        let StepContext { store, optimizer, lr, batch, models, settings } = ctx;
        let m = models.len() as f64;
        let joint = Tensor::vstack(&[&batch.xs, &batch.xt])?;
        let (largest, rest) = models.configs().split_first().ok_or_else(|| Error::usage("empty model batch"))?;

        let mut head_grads = Gradients::new();
        let model = SlimModel::slice(store, largest)?;
        let mut g = Graph::new();
        let (heads, _, _) = DcHeads::build(&mut g, &model, batch, CLASSIFIER_ST)?;
        let lead = dc_terms(&mut g, &heads, &batch.ys, settings.w_ent)?;
        // soft labels: the widest model's task prediction on every row
        let soft = {
            let s = g.value(heads.s_src);
            let t = g.value(heads.t_src);
            let mut src = s.clone();
            src.axpy(1.0, t)?;
            src.scale_in_place(0.5);
            Tensor::vstack(&[&src, g.value(heads.task_tgt)])?
        };
        let grads = g.backward(lead.classifier_loss)?;
        head_grads.add_scaled(1.0 / m, &grads)?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.dc_heads.push(grads);
        }
        let mut distill_values = Vec::with_capacity(rest.len());
        for cfg in rest {
            let model = SlimModel::slice(store, cfg)?;
            let mut g = Graph::new();
            let loss = inplaced_distill(&mut g, &model, &joint, &soft, CLASSIFIER_ST)?;
            distill_values.push(g.scalar(loss)?);
            let grads = g.backward(loss)?;
            head_grads.add_scaled(1.0 / m, &grads)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.seed_heads.push(grads);
            }
        }
        let ids = ids_of(store, &[Classifier::Source, Classifier::Target]);
        apply(store, optimizer, &ids, &head_grads, lr)?;

        let mut ext_grads = Gradients::new();
        {
            let model = SlimModel::slice(store, largest)?;
            let mut g = Graph::new();
            let (heads, _, _) = DcHeads::build(&mut g, &model, batch, Trainable::EXTRACTOR)?;
            let t = dc_terms(&mut g, &heads, &batch.ys, settings.w_ent)?;
            let grads = g.backward(t.extractor_loss)?;
            ext_grads.add_scaled(1.0 / m, &grads)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.dc_extractor.push(grads);
                tr.extractor_weights.push((1.0 / m, 0.0));
            }
        }
        for cfg in rest {
            let model = SlimModel::slice(store, cfg)?;
            let mut g = Graph::new();
            let loss = inplaced_distill(&mut g, &model, &joint, &soft, Trainable::EXTRACTOR)?;
            let grads = g.backward(loss)?;
            ext_grads.add_scaled(1.0 / m, &grads)?;
            if let Some(tr) = trace.as_deref_mut() {
                tr.seed_extractor.push(grads);
                tr.extractor_weights.push((0.0, 1.0 / m));
            }
        }
        let ids = store.extractor_ids();
        apply(store, optimizer, &ids, &ext_grads, lr)?;
        if let Some(tr) = trace {
            tr.applied_heads = head_grads;
            tr.applied_extractor = ext_grads;
        }
        let loss_seed = if distill_values.is_empty() { 0.0 } else { distill_values.iter().sum::<f64>() / distill_values.len() as f64 };
        Ok(StepReport { parts: lead.parts, loss_seed })
    }
}
