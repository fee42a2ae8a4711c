//! Multi-seed comparison drivers: generator stability, condition ablation
//! and the overlap sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, EvalResult};
use crate::diagnostics::{detect_collapse, CollapseThresholds, Verdict};
use crate::error::{Error, Result};
use crate::synthdata::{apply_overlap, DatasetBundle};
use crate::trainer::{train_with, MetricsRecord, ModelState, TrainConfig, TrainObserver};

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
}

impl Variant {
    pub fn new(name: &str, config: TrainConfig) -> Self {
        Self {
            name: name.to_string(),
            config,
        }
    }
}

/// One training run of one variant under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub seed: u64,
    /// Sweep coordinate, such as the overlap ratio.
    pub param: Option<f64>,
    pub eval: Option<EvalResult>,
    pub verdict: Verdict,
    pub correlation: f64,
    pub error: Option<String>,
    #[serde(skip)]
    pub log: Vec<MetricsRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub param: Option<f64>,
    pub runs: usize,
    pub failures: usize,
    pub median_rank1: f64,
    pub median_map: f64,
    pub verdicts: Vec<Verdict>,
}

/// Seeds for parameter initialization and noise derived from one run seed.
pub fn seeded_config(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        init_seed: seed,
        noise_seed: seed.wrapping_add(0x9e37_79b9),
        ..cfg.clone()
    }
}

#[derive(Default)]
struct LogCollector(Vec<MetricsRecord>);

impl TrainObserver for LogCollector {
    fn on_epoch(&mut self, _model: &ModelState, record: &MetricsRecord) -> Result<()> {
        self.0.push(record.clone());
        Ok(())
    }
}

fn run_one(data: &DatasetBundle, variant: &Variant, seed: u64, param: Option<f64>) -> RunRecord {
    let cfg = seeded_config(&variant.config, seed);
    let mut logs = LogCollector::default();
    let outcome = train_with(&cfg, data, &mut logs);
    let report = detect_collapse(&logs.0, &CollapseThresholds::default());
    let (eval, error) = match outcome.and_then(|o| evaluate(&o.model, data)) {
        Ok(e) => (Some(e), None),
        Err(e) => (None, Some(e.to_string())),
    };
    RunRecord {
        variant: variant.name.clone(),
        seed,
        param,
        eval,
        verdict: report.verdict,
        correlation: report.correlation,
        error,
        log: logs.0,
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Invalid(format!("cannot start worker pool: {e}")))
}

/// Train and evaluate every `(variant, seed)` pair, up to `jobs` at a time.
/// Failures are recorded per run and do not stop the others.
pub fn run_variants(
    data: &DatasetBundle,
    variants: &[Variant],
    seeds: &[u64],
    param: Option<f64>,
    jobs: usize,
) -> Result<Vec<RunRecord>> {
    let tasks: Vec<(&Variant, u64)> = variants
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    Ok(pool(jobs)?.install(|| tasks.par_iter().map(|(v, s)| run_one(data, v, *s, param)).collect()))
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Median rank-1 and mAP per `(variant, param)`, in first-seen order.
/// Failed runs are excluded from the medians and counted separately.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, Option<f64>)> = Vec::new();
    for r in records {
        let key = (r.variant.clone(), r.param);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(variant, param)| {
            let group: Vec<&RunRecord> = records
                .iter()
                .filter(|r| r.variant == variant && r.param == param)
                .collect();
            let mut r1: Vec<f64> = group.iter().filter_map(|r| r.eval.map(|e| e.rank1)).collect();
            let mut map: Vec<f64> = group.iter().filter_map(|r| r.eval.map(|e| e.map)).collect();
            SummaryRow {
                runs: group.len(),
                failures: group.iter().filter(|r| r.eval.is_none()).count(),
                median_rank1: median(&mut r1),
                median_map: median(&mut map),
                verdicts: group.iter().map(|r| r.verdict).collect(),
                variant,
                param,
            }
        })
        .collect()
}

/// Encoder-only training on the identity and MCNL losses.
pub fn baseline(base: &TrainConfig) -> TrainConfig {
    TrainConfig {
        joint: false,
        ifn: false,
        ..base.clone()
    }
}

/// Joint training with IFN.
pub fn ccsfg(base: &TrainConfig) -> TrainConfig {
    TrainConfig {
        joint: true,
        ifn: true,
        ..base.clone()
    }
}

/// Joint training with the generator fed raw encoder features.
pub fn cvae_without_ifn(base: &TrainConfig) -> TrainConfig {
    TrainConfig {
        joint: true,
        ifn: false,
        ..base.clone()
    }
}

pub fn stability_variants(base: &TrainConfig) -> Vec<Variant> {
    vec![
        Variant::new("baseline", baseline(base)),
        Variant::new("cvae", cvae_without_ifn(base)),
        Variant::new("ccsfg", ccsfg(base)),
    ]
}

pub fn ablation_variants(base: &TrainConfig) -> Vec<Variant> {
    [
        ("neither", false, false),
        ("c-only", false, true),
        ("y-only", true, false),
        ("both", true, true),
    ]
    .into_iter()
    .map(|(name, use_id, use_cam)| {
        let mut c = ccsfg(base);
        c.conditioning.use_id = use_id;
        c.conditioning.use_cam = use_cam;
        Variant::new(name, c)
    })
    .collect()
}

pub fn run_stability_comparison(
    data: &DatasetBundle,
    base: &TrainConfig,
    seeds: &[u64],
    jobs: usize,
) -> Result<(Vec<RunRecord>, Vec<SummaryRow>)> {
    let runs = run_variants(data, &stability_variants(base), seeds, None, jobs)?;
    let summary = summarize(&runs);
    Ok((runs, summary))
}

pub fn run_condition_ablation(
    data: &DatasetBundle,
    base: &TrainConfig,
    seeds: &[u64],
    jobs: usize,
) -> Result<(Vec<RunRecord>, Vec<SummaryRow>)> {
    let runs = run_variants(data, &ablation_variants(base), seeds, None, jobs)?;
    let summary = summarize(&runs);
    Ok((runs, summary))
}

/// For each ratio, relabel part of the training set via [`apply_overlap`]
/// and train CCSFG and the baseline. Rows are ordered by ratio.
pub fn run_overlap_sweep(
    data: &DatasetBundle,
    base: &TrainConfig,
    ratios: &[f64],
    seeds: &[u64],
    overlap_seed: u64,
    jobs: usize,
) -> Result<(Vec<RunRecord>, Vec<SummaryRow>)> {
    let mut sorted = ratios.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let variants = vec![
        Variant::new("ccsfg", ccsfg(base)),
        Variant::new("baseline", baseline(base)),
    ];
    let mut runs = Vec::new();
    for rho in sorted {
        let relabeled = apply_overlap(data, rho, overlap_seed)?;
        runs.extend(run_variants(&relabeled, &variants, seeds, Some(rho), jobs)?);
    }
    let summary = summarize(&runs);
    Ok((runs, summary))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Write `<stem>_runs.csv`, `<stem>_summary.csv`, `<stem>.json` and one
/// metrics log per run named `<stem>_<variant>[_p<param>]_seed<seed>.jsonl`.
pub fn write_tables(dir: &Path, stem: &str, runs: &[RunRecord], summary: &[SummaryRow]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut csv = String::from("variant,param,seed,rank1,rank5,rank10,map,verdict,correlation,error\n");
    for r in runs {
        let e = r.eval;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            r.variant,
            fmt_opt(r.param),
            r.seed,
            fmt_opt(e.map(|e| e.rank1)),
            fmt_opt(e.map(|e| e.rank5)),
            fmt_opt(e.map(|e| e.rank10)),
            fmt_opt(e.map(|e| e.map)),
            serde_json::to_value(r.verdict)?.as_str().unwrap_or_default(),
            r.correlation,
            r.error.as_deref().unwrap_or("").replace(',', ";"),
        );
        let mut log = String::new();
        for rec in &r.log {
            log.push_str(&serde_json::to_string(rec)?);
            log.push('\n');
        }
        let param = r.param.map_or_else(String::new, |p| format!("_p{p}"));
        fs::write(
            dir.join(format!("{stem}_{}{param}_seed{}.jsonl", r.variant, r.seed)),
            log,
        )?;
    }
    fs::write(dir.join(format!("{stem}_runs.csv")), csv)?;

    let mut csv = String::from("variant,param,runs,failures,median_rank1,median_map,verdicts\n");
    for s in summary {
        let verdicts: Vec<String> = s
            .verdicts
            .iter()
            .map(|v| serde_json::to_value(v).map(|j| j.as_str().unwrap_or_default().to_string()))
            .collect::<std::result::Result<_, _>>()?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            s.variant,
            fmt_opt(s.param),
            s.runs,
            s.failures,
            s.median_rank1,
            s.median_map,
            verdicts.join(";")
        );
    }
    fs::write(dir.join(format!("{stem}_summary.csv")), csv)?;
    let json = serde_json::json!({ "summary": summary, "runs": runs });
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&json)?)?;
    Ok(())
}
