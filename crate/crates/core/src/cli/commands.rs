use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use crate::datagen::{make_dataset, DomainDataset};
use crate::error::{Error, Result};
use crate::eval::LabeledTarget;
use crate::rng::{stream, Stream};
use crate::search::{correlate as correlation, random_search, search_csv, search_strategies, CorrelationReport, SearchRow, UpemEvaluator};
use crate::seed::{metrics_csv, train_strategies, EpochMetrics, TrainOptions, Trainer};
use crate::slimnet::{Checkpoint, Head, ParamStore, WidthConfig};

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mode: Option<String>,
    pub epochs: Option<usize>,
    pub budgets: Option<Vec<f64>>,
}

impl Overrides {
    pub fn apply(&self, mut cfg: ExperimentConfig) -> Result<ExperimentConfig> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(m) = &self.mode {
            cfg.trainer.mode = m.clone();
        }
        if let Some(e) = self.epochs {
            cfg.trainer.epochs = e;
        }
        if let Some(b) = &self.budgets {
            cfg.search.budgets = Some(b.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parse_budgets(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v > 0.0)
                .ok_or_else(|| Error::config(format!("bad budget ratio `{s}`")))
        })
        .collect()
}

fn write_output(cfg: &ExperimentConfig, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSummary {
    pub path: PathBuf,
    pub source_counts: Vec<usize>,
    pub target_counts: Vec<usize>,
    pub magnitude: f64,
}

impl DataSummary {
    pub fn render(&self) -> String {
        format!(
            "wrote {}\nsource class counts {:?} (n={})\ntarget class counts {:?} (n={})\nshift magnitude {}",
            self.path.display(),
            self.source_counts,
            self.source_counts.iter().sum::<usize>(),
            self.target_counts,
            self.target_counts.iter().sum::<usize>(),
            self.magnitude
        )
    }
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<DataSummary> {
    let dataset = make_dataset(&cfg.dataset, cfg.seed)?;
    let k = dataset.classes();
    let source_counts = DomainDataset::class_counts(dataset.source().1, k);
    let mut view = dataset.clone();
    view.unlock_evaluation();
    let target_counts = DomainDataset::class_counts(view.target_labels()?, k);
    let path = write_output(cfg, "dataset.json", &dataset.to_json()?)?;
    Ok(DataSummary { path, source_counts, target_counts, magnitude: cfg.dataset.shift.magnitude })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainFlags {
    pub reveal_labels: bool,
    pub record_time: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub rows: Vec<EpochMetrics>,
}

pub fn initial_store(cfg: &ExperimentConfig) -> Result<ParamStore> {
    ParamStore::init(&cfg.architecture, &mut stream(cfg.seed, Stream::Init))
}

/// Trains from a fresh initialization and writes the checkpoint and
/// metrics. The checkpoint is staged under a temporary name and renamed
/// only once fully written.
pub fn train(cfg: &ExperimentConfig, flags: TrainFlags) -> Result<TrainOutcome> {
    let dataset = if flags.reveal_labels {
        DomainDataset::load_for_evaluation(&cfg.dataset_path())?
    } else {
        DomainDataset::load_for_training(&cfg.dataset_path())?
    };
    let trainer = Trainer::new(cfg.trainer.clone(), cfg.seed)?;
    let mut store = initial_store(cfg)?;
    let probe = match flags.reveal_labels {
        true => Some(LabeledTarget { xt: dataset.target(), yt: dataset.target_labels()? }),
        false => None,
    };
    let rows = trainer.train(&mut store, &dataset, TrainOptions { probe, record_time: flags.record_time })?;
    let per_epoch = dataset.source().0.rows().max(dataset.target().rows()).div_ceil(cfg.trainer.batch_size);
    let step = (per_epoch * cfg.trainer.epochs) as u64;
    let checkpoint = Checkpoint::new(store, cfg.seed, step, cfg.trainer.mode.clone());

    fs::create_dir_all(&cfg.out_dir)?;
    let final_path = cfg.checkpoint_path();
    let staged = cfg.out_dir.join("checkpoint.json.partial");
    let written = checkpoint.save(&staged).and_then(|_| fs::rename(&staged, &final_path).map_err(Error::from));
    if let Err(e) = written {
        let _ = fs::remove_file(&staged);
        return Err(e);
    }
    let metrics = write_output(cfg, "metrics.csv", &metrics_csv(&rows))?;
    Ok(TrainOutcome { checkpoint: final_path, metrics, rows })
}

/// Checkpoint plus the deployment head of the mode it was trained in.
pub fn load_bank(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<(ParamStore, Head)> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.checkpoint_path());
    let ck = Checkpoint::load_expecting(&path, &cfg.architecture)?;
    let head = train_strategies().get(&ck.mode)?.deploy_head();
    Ok((ck.store, head))
}

fn load_target(cfg: &ExperimentConfig, labels: bool) -> Result<DomainDataset> {
    if labels {
        DomainDataset::load_for_evaluation(&cfg.dataset_path())
    } else {
        DomainDataset::load_for_training(&cfg.dataset_path())
    }
}

pub fn search(cfg: &ExperimentConfig, strategy: &str, checkpoint: Option<&Path>, reveal_labels: bool) -> Result<(PathBuf, Vec<SearchRow>)> {
    let strategy = search_strategies().get(strategy)?;
    let (store, head) = load_bank(cfg, checkpoint)?;
    let dataset = load_target(cfg, reveal_labels)?;
    let mut ev = UpemEvaluator::new(&store, dataset.target(), head, cfg.evaluation.batch_size)?;
    if reveal_labels {
        ev = ev.with_eval_labels(dataset.target_labels()?)?;
    }
    let rows = strategy.run(&ev, &cfg.search, &mut stream(cfg.seed, Stream::Search))?;
    let path = write_output(cfg, &format!("search_{}.csv", strategy.name()), &search_csv(&rows))?;
    Ok((path, rows))
}

#[derive(Clone, Debug)]
pub struct CorrelateOutcome {
    pub pairs: PathBuf,
    pub summary: PathBuf,
    pub overall: CorrelationReport,
}

pub const PAIRS_HEADER: &str = "band,budget_ratio,widths,flops,delta,accuracy";
pub const CORRELATION_HEADER: &str = "band,budget_ratio,samples,pearson,spearman";

/// `samples` random configs per budget band, each scored by UPEM and by
/// true accuracy. A band whose accuracies are all equal gets empty
/// correlation cells; the pooled `all` row must be defined.
pub fn correlate(cfg: &ExperimentConfig, checkpoint: Option<&Path>, samples: usize) -> Result<CorrelateOutcome> {
    let (store, head) = load_bank(cfg, checkpoint)?;
    let dataset = load_target(cfg, true)?;
    let ev = UpemEvaluator::new(&store, dataset.target(), head, cfg.evaluation.batch_size)?.with_eval_labels(dataset.target_labels()?)?;
    let plan = &cfg.search;
    let full = store.architecture().full_flops();
    let mut rng = stream(cfg.seed, Stream::Evaluation);
    let mut pairs = String::from(PAIRS_HEADER);
    pairs.push('\n');
    let mut summary = String::from(CORRELATION_HEADER);
    summary.push('\n');
    let (mut all_d, mut all_a) = (Vec::new(), Vec::new());
    for (i, budget) in plan.ladder(store.architecture())?.into_iter().enumerate() {
        let found = random_search(&ev, budget, samples, plan.tolerance, plan.attempts, &mut rng)?;
        let (mut d, mut a) = (Vec::new(), Vec::new());
        for c in &found.candidates {
            let acc = c.accuracy.expect("labels attached");
            let s = &c.score;
            writeln!(pairs, "{},{:.6},{},{:.0},{:.10e},{acc:.6}", i + 1, budget / full, s.config.label(), s.config.flops, s.delta).unwrap();
            d.push(s.delta);
            a.push(acc);
        }
        let cells = match correlation(&d, &a) {
            Ok(r) => format!("{:.6},{:.6}", r.pearson, r.spearman),
            Err(Error::Usage(_)) => ",".to_string(),
            Err(e) => return Err(e),
        };
        writeln!(summary, "{},{:.6},{},{cells}", i + 1, budget / full, d.len()).unwrap();
        all_d.extend(d);
        all_a.extend(a);
    }
    let overall = correlation(&all_d, &all_a)?;
    writeln!(summary, "all,,{},{:.6},{:.6}", overall.samples, overall.pearson, overall.spearman).unwrap();
    Ok(CorrelateOutcome {
        pairs: write_output(cfg, "correlation_pairs.csv", &pairs)?,
        summary: write_output(cfg, "correlation.csv", &summary)?,
        overall,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub config: WidthConfig,
    pub flops_ratio: f64,
    pub accuracy: f64,
    /// Accuracy lost relative to the full-width model.
    pub drop: f64,
    pub upem: f64,
}

pub const EVAL_HEADER: &str = "widths,flops,flops_ratio,accuracy,acc_drop,upem_delta";

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from(EVAL_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{},{:.0},{:.6},{:.6},{:.6},{:.10e}", r.config.label(), r.config.flops, r.flops_ratio, r.accuracy, r.drop, r.upem).unwrap();
    }
    out
}

/// Recalibrates and evaluates each requested width on the labeled target
/// set; `None` means the widths listed in the config (full and 1/8
/// channels when that list is empty).
pub fn eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>, widths: Option<&[String]>) -> Result<(PathBuf, Vec<EvalRow>)> {
    let (store, head) = load_bank(cfg, checkpoint)?;
    let arch = store.architecture();
    let labels: Vec<String> = match widths {
        Some(w) => w.to_vec(),
        None => cfg.evaluation.widths.clone(),
    };
    let configs: Vec<WidthConfig> = if labels.is_empty() {
        vec![arch.full_config(), arch.smallest_config()]
    } else {
        labels
            .iter()
            .map(|l| {
                WidthConfig::parse_label(l)
                    .and_then(|w| arch.config(w))
                    .map_err(|e| Error::usage(format!("illegal widths `{l}`: {e}")))
            })
            .collect::<Result<_>>()?
    };
    let dataset = load_target(cfg, true)?;
    let ev = UpemEvaluator::new(&store, dataset.target(), head, cfg.evaluation.batch_size)?.with_eval_labels(dataset.target_labels()?)?;
    let full_acc = ev.evaluate(&arch.full_config())?.accuracy.expect("labels attached");
    let rows = configs
        .iter()
        .map(|c| {
            let cand = ev.evaluate(c)?;
            let accuracy = cand.accuracy.expect("labels attached");
            Ok(EvalRow { config: c.clone(), flops_ratio: cand.score.flops_ratio, accuracy, drop: full_acc - accuracy, upem: cand.score.delta })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((write_output(cfg, "eval.csv", &eval_csv(&rows))?, rows))
}
