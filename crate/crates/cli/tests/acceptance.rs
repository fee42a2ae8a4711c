//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Tolerances are fixed here and never adjusted to a result.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use ccsfg_core::diagnostics::{detect_collapse, CollapseThresholds, Verdict};
use ccsfg_core::evaluation::experiments::{
    ccsfg, cvae_without_ifn, run_condition_ablation, run_overlap_sweep, run_stability_comparison, seeded_config,
    SummaryRow,
};
use ccsfg_core::evaluation::{score, RetrievalSet};
use ccsfg_core::generator::{kl_diag_gauss, GaussianParams, StepNoise};
use ccsfg_core::numerics::rng::{seeded, SeedRng};
use ccsfg_core::numerics::{central_difference, grad_check};
use ccsfg_core::synthdata::{generate_dataset, DataConfig, DatasetBundle};
use ccsfg_core::trainer::{
    train_with, Batch, JointProbe, MetricsRecord, ModelDims, ModelState, Objective, StepMetrics, TrainConfig,
    TrainObserver,
};
use ccsfg_core::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET_S: f64 = 60.0;
const DETACH_TOL: f64 = 1e-7;
const FD_STEP: f64 = 1e-5;
const KL_TOL: f64 = 1e-2;
const KL_SAMPLES: usize = 1_000_000;
const IFN_VAR_TOL: f64 = 1e-6;
const IFN_MEAN_TOL: f64 = 1e-9;
const COLLAPSE_CORRELATION: f64 = 0.9;
const STABLE_BOUND: f64 = 2.0;
const COLLAPSE_BUDGET_S: f64 = 600.0;
const RUN_BUDGET_S: f64 = 300.0;
const SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn report(n: usize, name: &str, o: &Outcome) {
    let mark = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {n:>2} {mark} {name}: {}", o.detail);
    let _ = std::io::stdout().flush();
}

fn default_data() -> DatasetBundle {
    generate_dataset(&DataConfig::default(), TrainConfig::default().data_seed).expect("default dataset")
}

/// Two samples of each of the first two identities, which sit under different cameras.
fn four_samples(data: &DatasetBundle) -> Batch {
    let mut idx = Vec::new();
    for y in [0u32, 1] {
        idx.extend(
            data.train
                .iter()
                .enumerate()
                .filter(|(_, s)| s.y == y)
                .map(|(i, _)| i)
                .take(2),
        );
    }
    Batch::gather(&data.train, &idx)
}

fn gradient_integrity(data: &DatasetBundle) -> Outcome {
    let batch = four_samples(data);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for seed in 0..10 {
        let cfg = TrainConfig {
            init_seed: seed,
            ..TrainConfig::default()
        };
        let model = ModelState::init(&cfg, ModelDims::of(data));
        let noise = StepNoise::draw(
            &mut seeded(seed + 50),
            batch.len(),
            data.cameras(),
            cfg.latent_dim,
            false,
        );
        let probe = JointProbe::new(
            &model.nets,
            model.ifn.as_ref(),
            &batch,
            &cfg,
            &noise,
            Objective::Total,
            "",
        )
        .expect("probe");
        let point = probe.point();
        coords = point.len();
        worst = worst.max(grad_check(&probe, &point, FD_STEP).expect("grad check"));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < GRAD_TOL && secs < GRAD_BUDGET_S,
        format!(
            "max relative error {worst:.3e} (< {GRAD_TOL:e}) over 10 inits x {coords} coordinates, {secs:.1}s (< {GRAD_BUDGET_S}s)"
        ),
    )
}

fn max_fd(probe: &JointProbe) -> f64 {
    let point = probe.point();
    (0..point.len())
        .map(|i| central_difference(probe, &point, i, FD_STEP).expect("probe").abs())
        .fold(0.0, f64::max)
}

fn detachment(data: &DatasetBundle) -> Outcome {
    let batch = four_samples(data);
    let mut worst = BTreeMap::new();
    for seed in 0..3 {
        let cfg = TrainConfig {
            init_seed: seed,
            ..TrainConfig::default()
        };
        let model = ModelState::init(&cfg, ModelDims::of(data));
        let noise = StepNoise::draw(
            &mut seeded(seed + 70),
            batch.len(),
            data.cameras(),
            cfg.latent_dim,
            false,
        );
        for (label, objective, group) in [
            ("dL_G/d(enc)", Objective::Generator, "enc."),
            ("dL_G/d(cls)", Objective::Generator, "cls."),
            ("dL_CCFA/d(gen)", Objective::Ccfa, "gen."),
        ] {
            let probe = JointProbe::new(&model.nets, model.ifn.as_ref(), &batch, &cfg, &noise, objective, group)
                .expect("probe");
            let fd = max_fd(&probe);
            let e = worst.entry(label).or_insert(0.0f64);
            *e = e.max(fd);
        }
    }
    let pass = worst.values().all(|&v| v < DETACH_TOL);
    let detail = worst
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, format!("max |FD| {detail} (< {DETACH_TOL:e}) over 3 inits"))
}

fn log_normal_diag(z: &[f64], m: &[f64], lv: &[f64]) -> f64 {
    (0..z.len())
        .map(|i| -0.5 * ((2.0 * std::f64::consts::PI).ln() + lv[i] + (z[i] - m[i]).powi(2) / lv[i].exp()))
        .sum()
}

fn kl_oracle() -> Outcome {
    let mut rng: SeedRng = seeded(31);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let k = rng.random_range(1..4);
        let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..k).map(|_| rng.random_range(lo..hi)).collect() };
        let q = GaussianParams {
            mean: draw(-1.0, 1.0),
            logvar: draw(-1.0, 0.5),
        };
        let p = GaussianParams {
            mean: draw(-1.0, 1.0),
            logvar: draw(-0.5, 1.0),
        };
        let exact = kl_diag_gauss(&q, &p).expect("kl");
        let mut acc = 0.0;
        let mut z = vec![0.0; k];
        for _ in 0..KL_SAMPLES {
            for (i, zi) in z.iter_mut().enumerate() {
                let e: f64 = rng.sample(StandardNormal);
                *zi = q.mean[i] + (0.5 * q.logvar[i]).exp() * e;
            }
            acc += log_normal_diag(&z, &q.mean, &q.logvar) - log_normal_diag(&z, &p.mean, &p.logvar);
        }
        worst = worst.max((acc / KL_SAMPLES as f64 - exact).abs());
    }
    let unit = kl_diag_gauss(
        &GaussianParams {
            mean: vec![1.0],
            logvar: vec![0.0],
        },
        &GaussianParams::standard(1),
    )
    .expect("kl");
    outcome(
        worst < KL_TOL && unit == 0.5,
        format!("max |closed form - MC| {worst:.2e} (< {KL_TOL:e}) on 20 pairs; KL(N(1,1)||N(0,1)) = {unit}"),
    )
}

#[derive(Default)]
struct Recorder {
    steps: Vec<StepMetrics>,
    log: Vec<MetricsRecord>,
}

impl TrainObserver for Recorder {
    fn on_step(&mut self, _epoch: usize, _step: usize, m: &StepMetrics) {
        self.steps.push(*m);
    }

    fn on_epoch(&mut self, _model: &ModelState, record: &MetricsRecord) -> ccsfg_core::Result<()> {
        self.log.push(record.clone());
        Ok(())
    }
}

struct Timed {
    rec: Recorder,
    secs: f64,
    error: Option<String>,
}

fn timed_run(cfg: &TrainConfig, data: &DatasetBundle) -> Timed {
    let mut rec = Recorder::default();
    let start = Instant::now();
    let error = train_with(cfg, data, &mut rec).err().map(|e| e.to_string());
    Timed {
        rec,
        secs: start.elapsed().as_secs_f64(),
        error,
    }
}

fn ifn_constraint(with_ifn: &Timed) -> Outcome {
    let steps = &with_ifn.rec.steps;
    let var_dev = steps.iter().map(|m| (m.var_fbar - 1.0).abs()).fold(0.0, f64::max);
    let mean_dev = steps.iter().map(|m| m.fbar_mean_max_abs).fold(0.0, f64::max);
    outcome(
        !steps.is_empty() && var_dev < IFN_VAR_TOL && mean_dev < IFN_MEAN_TOL,
        format!(
            "{} steps; max |var(fbar) - 1| {var_dev:.2e} (< {IFN_VAR_TOL:e}), max |mean| {mean_dev:.2e} (< {IFN_MEAN_TOL:e})",
            steps.len()
        ),
    )
}

fn collapse_trend(without: &Timed, with_ifn: &Timed) -> Outcome {
    let th = CollapseThresholds::default();
    let a = detect_collapse(&without.rec.log, &th);
    let b = detect_collapse(&with_ifn.rec.log, &th);
    let secs = without.secs + with_ifn.secs;
    let collapsed = a.verdict == Verdict::Collapsed && a.correlation > COLLAPSE_CORRELATION;
    let stable = b.verdict == Verdict::Stable && b.max_after_warmup <= STABLE_BOUND;
    let note = without.error.as_deref().map_or(String::new(), |e| format!(" ({e})"));
    outcome(
        collapsed && stable && secs < COLLAPSE_BUDGET_S,
        format!(
            "without IFN: {:?}, corr {:.3} (need collapsed, > {COLLAPSE_CORRELATION}), growth x{:.2}{note}; \
             with IFN: {:?}, max sigma^2 after warmup {:.3} (need stable, <= {STABLE_BOUND}); {secs:.0}s (< {COLLAPSE_BUDGET_S}s)",
            a.verdict, a.correlation, a.growth, b.verdict, b.max_after_warmup
        ),
    )
}

fn medians(summary: &[SummaryRow], param: Option<f64>) -> BTreeMap<String, f64> {
    summary
        .iter()
        .filter(|r| r.param == param)
        .map(|r| (r.variant.clone(), r.median_map))
        .collect()
}

fn strictly_decreasing(m: &BTreeMap<String, f64>, order: &[&str]) -> (bool, String) {
    let vals: Vec<f64> = order.iter().map(|k| m.get(*k).copied().unwrap_or(f64::NAN)).collect();
    let pass = vals.windows(2).all(|w| w[0] > w[1]);
    let text = order
        .iter()
        .zip(&vals)
        .map(|(k, v)| format!("{k} {v:.2}"))
        .collect::<Vec<_>>()
        .join(" > ");
    (pass, text)
}

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn stability_ordering(data: &DatasetBundle, slowest_single: f64) -> Outcome {
    let start = Instant::now();
    let (runs, summary) = run_stability_comparison(data, &TrainConfig::default(), &SEEDS, jobs()).expect("sweep");
    let wall = start.elapsed().as_secs_f64();
    // Each run is shorter than the sweep that contains it.
    let per_run = if wall < RUN_BUDGET_S { wall } else { slowest_single };
    let failures = runs.iter().filter(|r| r.error.is_some()).count();
    let (pass, text) = strictly_decreasing(&medians(&summary, None), &["ccsfg", "baseline", "cvae"]);
    outcome(
        pass && per_run < RUN_BUDGET_S,
        format!("median mAP {text} required; {failures} failed runs; each run <= {per_run:.0}s (< {RUN_BUDGET_S}s)"),
    )
}

fn ablation_ordering(data: &DatasetBundle) -> Outcome {
    let (_, summary) = run_condition_ablation(data, &TrainConfig::default(), &SEEDS, jobs()).expect("sweep");
    let (pass, text) = strictly_decreasing(&medians(&summary, None), &["both", "y-only", "c-only", "neither"]);
    outcome(pass, format!("median mAP {text} required"))
}

fn overlap_trend(data: &DatasetBundle) -> Outcome {
    let (_, summary) = run_overlap_sweep(data, &TrainConfig::default(), &[0.0, 0.5], &SEEDS, 0, jobs()).expect("sweep");
    let at0 = medians(&summary, Some(0.0));
    let at5 = medians(&summary, Some(0.5));
    let drop = |v: &str| at0[v] - at5[v];
    let (c, b) = (drop("ccsfg"), drop("baseline"));
    outcome(
        c < b,
        format!(
            "mAP drop rho 0 -> 0.5: ccsfg {:.2} -> {:.2} ({c:.2}), baseline {:.2} -> {:.2} ({b:.2}); need ccsfg drop < baseline drop",
            at0["ccsfg"], at5["ccsfg"], at0["baseline"], at5["baseline"]
        ),
    )
}

fn set(features: Vec<Vec<f64>>, ids: Vec<u32>, cams: Vec<u16>) -> RetrievalSet {
    RetrievalSet {
        features: Tensor::stack_rows(&features),
        ids,
        cams,
    }
}

/// Full sort after junk removal; AP as the mean precision at each hit.
fn brute_force(q: &RetrievalSet, g: &RetrievalSet) -> [f64; 4] {
    let mut first = Vec::new();
    let mut aps = Vec::new();
    for i in 0..q.len() {
        let qf = q.features.row_slice(i);
        let mut items: Vec<(f64, usize)> = (0..g.len())
            .filter(|&j| !(g.ids[j] == q.ids[i] && g.cams[j] == q.cams[i]))
            .map(|j| {
                let d = qf
                    .iter()
                    .zip(g.features.row_slice(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (d, j)
            })
            .collect();
        items.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let hits: Vec<usize> = items
            .iter()
            .enumerate()
            .filter(|(_, &(_, j))| g.ids[j] == q.ids[i])
            .map(|(p, _)| p)
            .collect();
        first.push(hits[0]);
        aps.push(
            hits.iter()
                .enumerate()
                .map(|(h, &p)| (h + 1) as f64 / (p + 1) as f64)
                .sum::<f64>()
                / hits.len() as f64,
        );
    }
    let n = q.len() as f64;
    let cmc = |k: usize| 100.0 * first.iter().filter(|&&p| p < k).count() as f64 / n;
    [cmc(1), cmc(5), cmc(10), 100.0 * aps.iter().sum::<f64>() / n]
}

fn random_instance(rng: &mut SeedRng) -> (RetrievalSet, RetrievalSet) {
    let d = rng.random_range(2..6);
    let ids = rng.random_range(3..20u32);
    let cams = rng.random_range(2..5u16);
    let m = rng.random_range(ids as usize * 2..=200);
    let feat = |rng: &mut SeedRng| (0..d).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>();
    let g_f: Vec<_> = (0..m).map(|_| feat(rng)).collect();
    let g_y: Vec<u32> = (0..m).map(|j| j as u32 % ids).collect();
    let g_c: Vec<u16> = (0..m).map(|_| rng.random_range(0..cams)).collect();
    let (mut q_f, mut q_y, mut q_c) = (Vec::new(), Vec::new(), Vec::new());
    while q_f.len() < 20 {
        let y = rng.random_range(0..ids);
        let c = rng.random_range(0..cams);
        if (0..m).any(|j| g_y[j] == y && g_c[j] != c) {
            q_f.push(feat(rng));
            q_y.push(y);
            q_c.push(c);
        }
    }
    (set(q_f, q_y, q_c), set(g_f, g_y, g_c))
}

fn scoring_oracle() -> Outcome {
    let mut rng = seeded(909);
    let mut mismatches = 0;
    let mut largest = 0;
    for _ in 0..50 {
        let (q, g) = random_instance(&mut rng);
        largest = largest.max(g.len());
        let r = score(&q, &g).expect("score");
        if [r.rank1, r.rank5, r.rank10, r.map] != brute_force(&q, &g) {
            mismatches += 1;
        }
    }
    let q = set(vec![vec![0.0]], vec![1], vec![0]);
    let g = set(vec![vec![1.0], vec![2.0], vec![3.0]], vec![1, 2, 1], vec![1, 1, 1]);
    let ap = score(&q, &g).expect("score").map;
    let want = 100.0 * (1.0 + 2.0 / 3.0) / 2.0;
    outcome(
        mismatches == 0 && largest <= 200 && ap == want,
        format!("{mismatches}/50 instances differ from brute force (gallery <= {largest}); hand AP {ap} (want {want} = 5/6)"),
    )
}

fn cli_train(dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ccsfg"))
        .args(["train", "--seed", "5", "--out-dir"])
        .arg(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).trim().to_string())
    }
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().expect("tempdir");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    if let Err(e) = cli_train(&a).and_then(|_| cli_train(&b)) {
        return outcome(false, format!("train failed: {e}"));
    }
    let same = |f: &str| {
        std::fs::read(a.join(f))
            .ok()
            .zip(std::fs::read(b.join(f)).ok())
            .map(|(x, y)| (x == y, x.len()))
    };
    let (ck, log) = (same("checkpoint.bin"), same("metrics.jsonl"));
    let epochs = std::fs::read_to_string(a.join("metrics.jsonl")).map_or(0, |s| s.lines().count());
    let pass = matches!(ck, Some((true, _))) && matches!(log, Some((true, n)) if n > 0);
    outcome(
        pass,
        format!("two `ccsfg train --seed 5` runs: checkpoint identical {ck:?}, metrics log identical {log:?}, {epochs} epochs"),
    )
}

fn main() -> ExitCode {
    let data = default_data();
    let mut passed = 0;
    let mut check = |n: usize, name: &str, o: Outcome| {
        report(n, name, &o);
        passed += o.pass as usize;
    };
    check(1, "gradient integrity", gradient_integrity(&data));
    check(2, "detachment contract", detachment(&data));
    check(3, "KL oracle", kl_oracle());

    let base = seeded_config(&TrainConfig::default(), SEEDS[0]);
    let with_ifn = timed_run(&ccsfg(&base), &data);
    let without = timed_run(&cvae_without_ifn(&base), &data);
    check(4, "IFN hard constraint", ifn_constraint(&with_ifn));
    check(
        5,
        "collapse without IFN, stability with IFN",
        collapse_trend(&without, &with_ifn),
    );

    check(
        6,
        "ordering ccsfg > baseline > joint without IFN",
        stability_ordering(&data, with_ifn.secs.max(without.secs)),
    );
    check(7, "ordering both > y-only > c-only > neither", ablation_ordering(&data));
    check(8, "overlap degradation smaller for ccsfg", overlap_trend(&data));
    check(9, "scoring oracle", scoring_oracle());
    check(10, "determinism of `ccsfg train`", determinism());

    println!("acceptance: {passed}/10 criteria pass");
    if passed == 10 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
