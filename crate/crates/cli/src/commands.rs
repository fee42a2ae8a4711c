use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ccsfg_core::diagnostics::{detect_collapse, emit_projection, CollapseThresholds, LabeledFeature, Source};
use ccsfg_core::evaluation::evaluate;
use ccsfg_core::evaluation::experiments::{
    run_condition_ablation, run_overlap_sweep, run_stability_comparison, seeded_config, write_tables, RunRecord,
    SummaryRow,
};
use ccsfg_core::generator::IfnMode;
use ccsfg_core::numerics::rng::seeded;
use ccsfg_core::synthdata::{apply_overlap, generate_dataset, read_dataset, write_dataset, DatasetBundle};
use ccsfg_core::trainer::{
    continue_training, load_checkpoint, save_checkpoint, train_with, MetricsRecord, ModelState, TrainConfig,
    TrainObserver,
};
use clap::ArgMatches;
use serde_json::{json, Value};

use crate::args::DEFAULT_OUT_DIR;
use crate::settings::Settings;
use crate::CliError;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

pub fn run(m: &ArgMatches) -> Result<(), CliError> {
    let out = match m.subcommand() {
        Some(("gen-data", sub)) => gen_data(sub)?,
        Some(("train", sub)) => train(sub)?,
        Some(("eval", sub)) => eval(sub)?,
        Some(("diagnose", sub)) => diagnose(sub)?,
        Some(("ablate", sub)) => sweep(sub, Sweep::Ablation)?,
        Some(("sweep-overlap", sub)) => sweep(sub, Sweep::Overlap)?,
        Some(("compare-generators", sub)) => sweep(sub, Sweep::Stability)?,
        _ => return Err(CliError::Usage("missing subcommand".into())),
    };
    println!("{out}");
    Ok(())
}

fn at<E: Into<ccsfg_core::Error>>(path: &Path) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::File {
        path: path.to_path_buf(),
        source: e.into(),
    }
}

fn out_dir(m: &ArgMatches) -> PathBuf {
    m.get_one::<PathBuf>("out-dir")
        .cloned()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// The `--data` file, or a fresh bundle from the dataset keys and
/// `data_seed`. Settings are updated to describe the data actually used.
fn load_data(m: &ArgMatches, s: &mut Settings) -> Result<DatasetBundle, CliError> {
    match m.get_one::<PathBuf>("data") {
        Some(p) => {
            let data = read_dataset(p).map_err(at(p))?;
            s.data = data.meta.config.clone();
            s.train.data_seed = data.meta.seed;
            Ok(data)
        }
        None => Ok(generate_dataset(&s.data, s.train.data_seed)?),
    }
}

fn gen_data(m: &ArgMatches) -> Result<Value, CliError> {
    let mut s = Settings::resolve(m)?;
    if let Some(&seed) = m.get_one::<u64>("seed") {
        s.train.data_seed = seed;
    }
    let dir = out_dir(m);
    let path = m
        .get_one::<PathBuf>("out")
        .cloned()
        .unwrap_or_else(|| dir.join("data.bin"));
    let rho = *m.get_one::<f64>("overlap").expect("defaulted");
    let overlap_seed = m.get_one::<u64>("overlap-seed").copied().unwrap_or(s.train.data_seed);
    let mut data = generate_dataset(&s.data, s.train.data_seed)?;
    if rho > 0.0 {
        data = apply_overlap(&data, rho, overlap_seed)?;
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_dataset(&data, &path)?;
    s.echo(&dir)?;
    Ok(json!({
        "path": path,
        "seed": data.meta.seed,
        "overlap": data.meta.overlap,
        "train": data.train.len(),
        "query": data.query.len(),
        "gallery": data.gallery.len(),
        "labels": data.meta.num_labels,
        "duplicates": data.meta.duplicates.len(),
    }))
}

/// Appends one JSON line per finished epoch and flushes, so a collapsed
/// run leaves its log behind.
struct JsonlLog(BufWriter<File>);

impl JsonlLog {
    fn create(path: &Path) -> Result<Self, CliError> {
        Ok(Self(BufWriter::new(File::create(path)?)))
    }
}

impl TrainObserver for JsonlLog {
    fn on_epoch(&mut self, _model: &ModelState, record: &MetricsRecord) -> ccsfg_core::Result<()> {
        serde_json::to_writer(&mut self.0, record)?;
        self.0.write_all(b"\n")?;
        self.0.flush()?;
        Ok(())
    }
}

fn train(m: &ArgMatches) -> Result<Value, CliError> {
    let mut s = Settings::resolve(m)?;
    if let Some(&seed) = m.get_one::<u64>("seed") {
        s.train = seeded_config(&s.train, seed);
    }
    let data = load_data(m, &mut s)?;
    let dir = out_dir(m);
    s.echo(&dir)?;
    let log_path = dir.join(METRICS_FILE);
    let mut log = JsonlLog::create(&log_path)?;
    let outcome = match m.get_one::<PathBuf>("resume") {
        Some(p) => {
            let (_, model) = load_checkpoint(p).map_err(at(p))?;
            continue_training(&s.train, &data, model, &mut log)?
        }
        None => train_with(&s.train, &data, &mut log)?,
    };
    let ck = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&s.train, &outcome.model, &ck)?;
    let eval = evaluate(&outcome.model, &data)?;
    fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&eval)?)?;
    Ok(json!({
        "epochs": outcome.model.epoch,
        "checkpoint": ck,
        "metrics": log_path,
        "eval": eval,
    }))
}

fn eval(m: &ArgMatches) -> Result<Value, CliError> {
    let ck = m.get_one::<PathBuf>("checkpoint").expect("required");
    let (cfg, model) = load_checkpoint(ck).map_err(at(ck))?;
    let mut s = Settings::resolve(m)?;
    s.train = cfg;
    let data = load_data(m, &mut s)?;
    let result = evaluate(&model, &data)?;
    if let Some(dir) = m.get_one::<PathBuf>("out-dir") {
        s.echo(dir)?;
        fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&result)?)?;
    }
    Ok(serde_json::to_value(result)?)
}

fn read_log(path: &Path) -> Result<Vec<MetricsRecord>, CliError> {
    let text = fs::read_to_string(path).map_err(at(path))?;
    let mut records = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        records.push(serde_json::from_str(line)?);
    }
    Ok(records)
}

/// Eval-mode `f̄` of the first `n` training labels, plus the generator's
/// features for each of them under every camera.
fn projection_features(
    cfg: &TrainConfig,
    model: &ModelState,
    data: &DatasetBundle,
    n: usize,
    seed: u64,
) -> Result<Vec<LabeledFeature>, CliError> {
    let samples: Vec<_> = data.train.iter().filter(|s| (s.y as usize) < n).cloned().collect();
    let f = model.embed(&samples)?;
    let rows: Vec<Vec<f64>> = (0..f.rows()).map(|r| f.row_slice(r).to_vec()).collect();
    let rows = match &model.ifn {
        Some(ifn) => ifn.apply(&rows, IfnMode::Eval).map_err(ccsfg_core::Error::from)?,
        None => rows,
    };
    let mut out: Vec<LabeledFeature> = samples
        .iter()
        .zip(rows)
        .map(|(s, feature)| LabeledFeature {
            feature,
            id: s.y,
            camera: s.c,
            source: Source::Extracted,
        })
        .collect();
    if let Some(gen) = &model.nets.generator {
        let mut rng = seeded(seed);
        let labels = n.min(data.num_labels());
        for y in 0..labels {
            let per_cam = gen
                .generate_for(y, &mut rng, cfg.share_id_latent)
                .map_err(ccsfg_core::Error::from)?;
            for (c, feature) in per_cam.into_iter().enumerate() {
                out.push(LabeledFeature {
                    feature,
                    id: y as u32,
                    camera: c as u16,
                    source: Source::Generated,
                });
            }
        }
    }
    Ok(out)
}

fn diagnose(m: &ArgMatches) -> Result<Value, CliError> {
    let log = m.get_one::<PathBuf>("log");
    let ck = m.get_one::<PathBuf>("checkpoint");
    if log.is_none() && ck.is_none() {
        return Err(CliError::Usage("diagnose needs --log and/or --checkpoint".into()));
    }
    let dir = out_dir(m);
    let mut s = Settings::resolve(m)?;
    fs::create_dir_all(&dir)?;
    let mut out = serde_json::Map::new();
    if let Some(p) = log {
        let report = detect_collapse(&read_log(p)?, &CollapseThresholds::default());
        fs::write(dir.join("collapse.json"), serde_json::to_string_pretty(&report)?)?;
        out.insert("collapse".into(), serde_json::to_value(&report)?);
    }
    if let Some(p) = ck {
        let (cfg, model) = load_checkpoint(p).map_err(at(p))?;
        s.train = cfg;
        let data = load_data(m, &mut s)?;
        let n = *m.get_one::<u64>("identities").expect("defaulted") as usize;
        let seed = m.get_one::<u64>("seed").copied().unwrap_or(s.train.noise_seed);
        let features = projection_features(&s.train, &model, &data, n, seed)?;
        let path = dir.join("projection.csv");
        let proj = emit_projection(&features, &path)?;
        out.insert(
            "projection".into(),
            json!({
                "path": path,
                "points": features.len(),
                "top2_variance_fraction": proj.variance_fraction,
            }),
        );
    }
    s.echo(&dir)?;
    Ok(Value::Object(out))
}

#[derive(Clone, Copy)]
enum Sweep {
    Ablation,
    Overlap,
    Stability,
}

fn sweep(m: &ArgMatches, kind: Sweep) -> Result<Value, CliError> {
    let mut s = Settings::resolve(m)?;
    let data = load_data(m, &mut s)?;
    let seeds: Vec<u64> = match m.get_many::<u64>("seeds") {
        Some(v) => v.copied().collect(),
        None => {
            let base = m.get_one::<u64>("seed").copied().unwrap_or(1);
            (0..3).map(|i| base + i).collect()
        }
    };
    let jobs = m
        .get_one::<u64>("jobs")
        .map(|&j| j as usize)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let dir = out_dir(m);
    s.echo(&dir)?;
    let (stem, (runs, summary)): (&str, (Vec<RunRecord>, Vec<SummaryRow>)) = match kind {
        Sweep::Ablation => ("ablation", run_condition_ablation(&data, &s.train, &seeds, jobs)?),
        Sweep::Stability => ("stability", run_stability_comparison(&data, &s.train, &seeds, jobs)?),
        Sweep::Overlap => {
            let ratios: Vec<f64> = m.get_many::<f64>("ratios").expect("defaulted").copied().collect();
            if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
                return Err(CliError::Usage("overlap ratios must lie in [0, 1]".into()));
            }
            let overlap_seed = m.get_one::<u64>("overlap-seed").copied().unwrap_or(s.train.data_seed);
            (
                "overlap",
                run_overlap_sweep(&data, &s.train, &ratios, &seeds, overlap_seed, jobs)?,
            )
        }
    };
    write_tables(&dir, stem, &runs, &summary)?;
    Ok(json!({
        "out_dir": dir,
        "seeds": seeds,
        "runs": runs.len(),
        "failures": runs.iter().filter(|r| r.error.is_some()).count(),
        "summary": summary,
    }))
}
