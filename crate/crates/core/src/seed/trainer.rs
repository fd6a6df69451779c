use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{LrSchedule, SgdState};
use crate::datagen::{batches, DomainDataset};
use crate::error::{Error, Result};
use crate::eval::LabeledTarget;
use crate::rng::{stream, Stream};
use crate::slimnet::{Head, ParamStore};

use super::batch::{sample_model_batch, ConfidencePolicy};
use super::strategy::{train_strategies, StepContext, StepReport, StepSettings, StepTrace, TrainStrategy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Models per iteration, including the widest and the narrowest.
    pub m: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub w_ent: f64,
    pub confidence: ConfidencePolicy,
    pub tau: f64,
    /// `slimda`, `baseline` or `inplaced`.
    pub mode: String,
    pub lr: LrSchedule,
    pub momentum: f64,
    /// Chunk size for batchnorm recalibration passes.
    pub adabn_batch: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            m: 10,
            epochs: 20,
            batch_size: 64,
            w_ent: 0.1,
            confidence: ConfidencePolicy::default(),
            tau: 0.5,
            mode: "slimda".into(),
            lr: LrSchedule { l0: 0.1, ..LrSchedule::default() },
            momentum: 0.9,
            adabn_batch: 256,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::config(format!("model batch size m={} is below 2", self.m)));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if self.tau <= 0.0 {
            return Err(Error::config("tau must be positive"));
        }
        if self.w_ent < 0.0 {
            return Err(Error::config("w_ent must be non-negative"));
        }
        if self.adabn_batch == 0 {
            return Err(Error::config("adabn_batch must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.lr.l0 <= 0.0 {
            return Err(Error::config("lr.l0 must be positive"));
        }
        self.confidence.validate()
    }

    pub fn settings(&self) -> StepSettings {
        StepSettings { w_ent: self.w_ent, policy: self.confidence, tau: self.tau }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mode: String,
    pub loss_task: f64,
    pub loss_dd: f64,
    pub loss_conf: f64,
    pub loss_ent: f64,
    pub loss_seed: f64,
    pub probe_acc_1: Option<f64>,
    pub probe_acc_64th: Option<f64>,
    pub seconds: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,mode,loss_task,loss_dd,loss_conf,loss_ent,loss_seed,probe_acc_1,probe_acc_64th,seconds";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.8},{:.8},{:.8},{:.8},{:.8},{},{},{}",
            self.epoch,
            self.mode,
            self.loss_task,
            self.loss_dd,
            self.loss_conf,
            self.loss_ent,
            self.loss_seed,
            opt(self.probe_acc_1),
            opt(self.probe_acc_64th),
            self.seconds.map(|s| format!("{s:.3}")).unwrap_or_default()
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions<'a> {
    /// Labeled target data for the per-epoch probe columns.
    pub probe: Option<LabeledTarget<'a>>,
    pub record_time: bool,
}

/// Owns the optimizer state and random streams of one training run.
pub struct Trainer {
    config: TrainerConfig,
    strategy: std::sync::Arc<dyn TrainStrategy>,
    seed: u64,
}

impl Trainer {
    pub fn new(config: TrainerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let strategy = train_strategies().get(&config.mode)?;
        Ok(Trainer { config, strategy, seed })
    }

    pub fn deploy_head(&self) -> Head {
        self.strategy.deploy_head()
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    /// Runs every epoch and returns one metrics row per epoch. Numeric
    /// failures report where they happened.
    pub fn train(&self, store: &mut ParamStore, dataset: &DomainDataset, opts: TrainOptions<'_>) -> Result<Vec<EpochMetrics>> {
        let arch = store.architecture().clone();
        if dataset.dim() != arch.input_dim || dataset.classes() != arch.class_count {
            return Err(Error::config(format!(
                "dataset is {}-dimensional with {} classes, architecture expects {} and {}",
                dataset.dim(),
                dataset.classes(),
                arch.input_dim,
                arch.class_count
            )));
        }
        let cfg = &self.config;
        let settings = cfg.settings();
        let mut data_rng = stream(self.seed, Stream::Data);
        let mut model_rng = stream(self.seed, Stream::ModelSampling);
        let mut optimizer = SgdState::new(cfg.momentum)?;
        let per_epoch = dataset.source().0.rows().max(dataset.target().rows()).div_ceil(cfg.batch_size);
        let total = (per_epoch * cfg.epochs).max(1);
        let mut log = Vec::with_capacity(cfg.epochs);
        let mut iteration = 0;
        for epoch in 0..cfg.epochs {
            let started = Instant::now();
            let mut sums = StepReport::default();
            let epoch_batches = batches(dataset, cfg.batch_size, &mut data_rng)?;
            let n = epoch_batches.len() as f64;
            for batch in &epoch_batches {
                let models = sample_model_batch(&mut model_rng, &arch, cfg.m)?;
                let lr = cfg.lr.at(iteration as f64 / total as f64)?;
                let ctx = StepContext { store, optimizer: &mut optimizer, lr, batch, models: &models, settings: &settings };
                let report = self.strategy.step(ctx, None).map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!(
                        "{msg} (epoch {epoch}, iteration {iteration}, lr {lr:.6e}, widths {:?})",
                        models.configs().iter().map(|c| c.label()).collect::<Vec<_>>()
                    )),
                    other => other,
                })?;
                accumulate(&mut sums, &report, 1.0 / n);
                iteration += 1;
            }
            let (probe_acc_1, probe_acc_64th) = match opts.probe {
                Some(p) => {
                    let head = self.deploy_head();
                    (
                        Some(p.accuracy(store, &arch.full_config(), head, cfg.adabn_batch)?),
                        Some(p.accuracy(store, &arch.smallest_config(), head, cfg.adabn_batch)?),
                    )
                }
                None => (None, None),
            };
            log.push(EpochMetrics {
                epoch: epoch + 1,
                mode: self.strategy.name().to_string(),
                loss_task: sums.parts.task(),
                loss_dd: sums.parts.domain_disc,
                loss_conf: sums.parts.confusion(),
                loss_ent: sums.parts.entropy_min,
                loss_seed: sums.loss_seed,
                probe_acc_1,
                probe_acc_64th,
                seconds: opts.record_time.then(|| started.elapsed().as_secs_f64()),
            });
        }
        Ok(log)
    }

    /// A single step with full gradient bookkeeping.
    pub fn traced_step(&self, ctx: StepContext<'_>) -> Result<(StepReport, StepTrace)> {
        let mut trace = StepTrace::default();
        let report = self.strategy.step(ctx, Some(&mut trace))?;
        Ok((report, trace))
    }
}

fn accumulate(sums: &mut StepReport, r: &StepReport, w: f64) {
    let (s, p) = (&mut sums.parts, &r.parts);
    s.task_s += w * p.task_s;
    s.task_t += w * p.task_t;
    s.domain_disc += w * p.domain_disc;
    s.cat_confusion += w * p.cat_confusion;
    s.dom_confusion += w * p.dom_confusion;
    s.entropy_min += w * p.entropy_min;
    sums.loss_seed += w * r.loss_seed;
}
