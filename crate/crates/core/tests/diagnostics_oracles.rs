use ccsfg_core::diagnostics::{
    detect_collapse, emit_projection, pca_2d, pearson, sigma_hat, var_of, CollapseThresholds, LabeledFeature, Source,
    Verdict,
};
use ccsfg_core::numerics::rng::seeded;
use ccsfg_core::trainer::MetricsRecord;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn random_rows(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = seeded(seed);
    let scales: Vec<f64> = (0..d).map(|j| 1.0 + j as f64).collect();
    (0..n)
        .map(|_| {
            (0..d)
                .map(|j| scales[j] * rng.sample::<f64, _>(StandardNormal) + 3.0)
                .collect()
        })
        .collect()
}

/// Principal axes from the SVD of the centered data matrix.
fn svd_oracle(rows: &[Vec<f64>]) -> (f64, Vec<[f64; 2]>) {
    let (n, d) = (rows.len(), rows[0].len());
    let mut x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let means: Vec<f64> = (0..d).map(|j| x.column(j).mean()).collect();
    for (j, m) in means.iter().enumerate() {
        x.column_mut(j).add_scalar_mut(-m);
    }
    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sq: Vec<f64> = svd.singular_values.iter().map(|s| s * s).collect();
    let fraction = (sq[order[0]] + sq[order[1]]) / sq.iter().sum::<f64>();
    let axis = |k: usize| -> Vec<f64> { v_t.row(order[k]).iter().copied().collect() };
    let coords = (0..n)
        .map(|i| {
            let p = |a: &[f64]| (0..d).map(|j| x[(i, j)] * a[j]).sum::<f64>();
            [p(&axis(0)), p(&axis(1))]
        })
        .collect();
    (fraction, coords)
}

#[test]
fn projection_matches_an_svd_oracle() {
    for seed in 0..10 {
        let rows = random_rows(seed, 40, 5);
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let proj = pca_2d(&refs).unwrap();
        let (fraction, coords) = svd_oracle(&rows);
        assert!((proj.variance_fraction - fraction).abs() < 1e-10);
        // Components agree up to sign.
        for k in 0..2 {
            let dot: f64 = proj.coords.iter().zip(&coords).map(|(a, b)| a[k] * b[k]).sum();
            let sign = dot.signum();
            for (a, b) in proj.coords.iter().zip(&coords) {
                assert!((a[k] - sign * b[k]).abs() < 1e-8);
            }
        }
    }
}

#[test]
fn projection_file_header_and_rows() {
    let rows = random_rows(4, 12, 4);
    let feats: Vec<LabeledFeature> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| LabeledFeature {
            feature: r.clone(),
            id: i as u32 / 3,
            camera: (i % 2) as u16,
            source: if i % 3 == 0 {
                Source::Generated
            } else {
                Source::Extracted
            },
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("proj.csv");
    let proj = emit_projection(&feats, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    let header: f64 = lines
        .next()
        .unwrap()
        .strip_prefix("# top2_variance_fraction=")
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(header, proj.variance_fraction);
    assert_eq!(lines.next(), Some("pc1,pc2,id,camera,source"));
    let body: Vec<&str> = lines.collect();
    assert_eq!(body.len(), 12);
    assert!(body[0].ends_with(",0,0,generated"));
    assert!(body[1].ends_with(",0,1,extracted"));
    let pc1: Vec<f64> = body
        .iter()
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(pc1.iter().sum::<f64>().abs() < 1e-9);
}

#[test]
fn sigma_hat_against_the_batch_mean_is_the_batch_variance() {
    for seed in 0..5 {
        let rows = random_rows(seed, 16, 6);
        let d = rows[0].len();
        let mean: Vec<f64> = (0..d)
            .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64)
            .collect();
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = rows.iter().map(|r| (r.clone(), mean.clone())).collect();
        assert!((sigma_hat(&pairs).unwrap() - var_of(&rows)).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn sigma_hat_matches_a_straight_line_sum(
        pairs in prop::collection::vec((prop::collection::vec(-5.0f64..5.0, 3), prop::collection::vec(-5.0f64..5.0, 3)), 1..12)
    ) {
        let mut s = 0.0;
        for (f, g) in &pairs {
            for j in 0..3 {
                s += (f[j] - g[j]) * (f[j] - g[j]);
            }
        }
        let want = s / (pairs.len() * 3) as f64;
        prop_assert!((sigma_hat(&pairs).unwrap() - want).abs() < 1e-12);
    }
}

fn record(epoch: usize, sigma: f64, var: f64) -> MetricsRecord {
    MetricsRecord {
        epoch,
        l_est: 0.0,
        l_gsnn: 0.0,
        l_ccfa: 0.0,
        l_id: 0.0,
        l_mcnl: 0.0,
        total: 0.0,
        sigma_hat: sigma,
        var_f: var,
        var_fbar: 1.0,
        lr: 3.5e-4,
        steps: 15,
        skipped_steps: 0,
        collapse: false,
    }
}

#[test]
fn growing_and_tracking_log_is_collapsed() {
    let log: Vec<_> = (0..30)
        .map(|e| record(e + 1, 0.2 * 1.15f64.powi(e as i32), 0.3 * 1.15f64.powi(e as i32)))
        .collect();
    let r = detect_collapse(&log, &CollapseThresholds::default());
    assert_eq!(r.verdict, Verdict::Collapsed);
    assert!(r.correlation > 0.9 && r.growth > 5.0);
    assert!(!r.growth_epochs.is_empty());
}

#[test]
fn bounded_decaying_log_is_stable() {
    let log: Vec<_> = (0..30).map(|e| record(e + 1, 1.5 - 0.02 * e as f64, 1.0)).collect();
    let r = detect_collapse(&log, &CollapseThresholds::default());
    assert_eq!(r.verdict, Verdict::Stable);
    assert!(r.max_after_warmup <= 2.0);
}

#[test]
fn non_finite_log_is_collapsed_and_short_log_inconclusive() {
    let mut log: Vec<_> = (0..20).map(|e| record(e + 1, 1.0, 1.0)).collect();
    log[12].sigma_hat = f64::NAN;
    assert_eq!(
        detect_collapse(&log, &CollapseThresholds::default()).verdict,
        Verdict::Collapsed
    );
    let short: Vec<_> = (0..5).map(|e| record(e + 1, 1.0, 1.0)).collect();
    assert_eq!(
        detect_collapse(&short, &CollapseThresholds::default()).verdict,
        Verdict::Inconclusive
    );
}

#[test]
fn growth_without_tracking_is_not_collapse() {
    let log: Vec<_> = (0..30)
        .map(|e| record(e + 1, 0.1 * 1.2f64.powi(e as i32), if e % 2 == 0 { 1.0 } else { 3.0 }))
        .collect();
    let r = detect_collapse(&log, &CollapseThresholds::default());
    assert_ne!(r.verdict, Verdict::Collapsed);
    assert!(r.correlation.abs() < 0.9);
}

#[test]
fn pearson_matches_textbook_formula() {
    let a = [1.0, 2.0, 4.0, 7.0, 11.0];
    let b = [2.0, 1.0, 5.0, 6.0, 13.0];
    let (ma, mb) = (a.iter().sum::<f64>() / 5.0, b.iter().sum::<f64>() / 5.0);
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    assert!((pearson(&a, &b) - cov / (va * vb).sqrt()).abs() < 1e-12);
}
