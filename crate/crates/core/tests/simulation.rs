use dcpanel::meangroup::{group_difference, mean_group};
use dcpanel::montecarlo::{generate_dgp, run_grid, DgpConfig, GridSettings};
use dcpanel::selection::{mtb_select, CandidatePool, Method, MtbConfig};
use dcpanel::stage2::{exposure_regressions, residual_leading_component};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Mean and Monte Carlo standard error of per-replication statistics.
fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

fn within(xs: &[f64], target: f64, what: &str) {
    let (m, se) = mean_se(xs);
    assert!((m - target).abs() <= 3.0 * se, "{what}: {m} vs {target} (se {se})");
}

#[test]
fn dgp_sanity_battery() {
    let cfg = DgpConfig::new(2, 10, 100, 100, 1.0);
    let (r, t, n) = (cfg.r, cfg.t, cfg.units);
    let mut g_var = Vec::new();
    let mut f_var = Vec::new();
    let mut loading_mean = Vec::new();
    let mut loading_corr = Vec::new();
    let mut pseudo_corr = Vec::new();
    let mut noise_var = Vec::new();
    for rep in 0..300 {
        let mut rng = cfg.rng(11, rep);
        let d = generate_dgp(&cfg, &mut rng).unwrap();
        let tf = t as f64;
        g_var.push(d.g.iter().map(|x| x * x).sum::<f64>() / (tf * r as f64));
        let f = d.pool.columns(r, cfg.n);
        f_var.push(f.iter().map(|x| x * x).sum::<f64>() / (tf * cfg.n as f64));
        loading_mean.push(d.delta.mean());
        loading_corr.push((0..n).map(|i| (d.delta[(i, 0)] - cfg.phi) * (d.delta[(i, 1)] - cfg.phi)).sum::<f64>() / n as f64);
        pseudo_corr.push((0..r).map(|j| d.g.column(j).dot(&f.column(j)) / tf).sum::<f64>() / r as f64);
        let e = &d.u - &d.delta * d.g.transpose();
        noise_var.push(e.iter().map(|x| x * x).sum::<f64>() / (tf * n as f64));
    }
    within(&g_var, 1.0, "signal variance");
    within(&f_var, 1.0, "extra factor variance");
    within(&loading_mean, cfg.phi, "loading mean");
    within(&loading_corr, 0.5, "loading correlation");
    within(&pseudo_corr, (1.0 - cfg.pi).sqrt(), "pseudo-signal correlation");
    within(&noise_var, 1.0, "noise variance");
}

#[test]
fn grid_is_identical_across_worker_counts() {
    let cells = [DgpConfig::new(2, 20, 30, 30, 1.0), DgpConfig::new(3, 10, 25, 25, 0.0)];
    let settings = GridSettings {
        reps: 12,
        seed: 4,
        methods: Method::ALL.to_vec(),
        ..GridSettings::default()
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_grid(&cells, &settings).unwrap())
    };
    let (a, b) = (run(1), run(4));
    for (ca, cb) in a.metrics.iter().zip(&b.metrics) {
        for (ma, mb) in ca.iter().zip(cb) {
            assert_eq!(format!("{ma:?}"), format!("{mb:?}"));
        }
    }
}

#[test]
fn leading_component_of_pure_noise_explains_little() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let u = DMatrix::from_fn(100, 100, |_, _| rng.sample::<f64, _>(StandardNormal));
    let c = residual_leading_component(&u).unwrap();
    assert!(c.explained_share < 0.1, "{}", c.explained_share);
}

#[test]
fn selection_is_invariant_to_component_sign_and_finds_an_exact_copy() {
    let cfg = DgpConfig::new(2, 30, 60, 60, 1.0);
    let mut rng = cfg.rng(5, 0);
    let d = generate_dgp(&cfg, &mut rng).unwrap();
    let e = residual_leading_component(&d.u).unwrap().weekly;
    let pool = CandidatePool::unnamed(d.pool.clone()).unwrap();
    let mtb = MtbConfig::default();
    let plus = mtb_select(&e, &pool, &mtb).unwrap();
    let minus = mtb_select(&(-&e), &pool, &mtb).unwrap();
    assert_eq!(plus.selected, minus.selected);

    let k = d.pool.ncols();
    let mut with_copy = d.pool.clone().insert_column(k, 0.0);
    with_copy.set_column(k, &e);
    let sel = mtb_select(&e, &CandidatePool::unnamed(with_copy).unwrap(), &mtb).unwrap();
    assert_eq!(sel.selected[0], k);
}

#[test]
fn exposure_tests_have_nominal_size_under_the_null() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (t, k, reps) = (120, 2, 1000);
    let mut rejections = 0;
    for _ in 0..reps {
        let design = DMatrix::from_fn(t, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u = DMatrix::from_fn(1, t, |_, _| rng.sample::<f64, _>(StandardNormal));
        let fit = &exposure_regressions(&u, &design).unwrap()[0];
        rejections += (0..k).filter(|&j| (fit.delta[j] / fit.stderr[j]).abs() > 1.959964).count();
    }
    let rate = rejections as f64 / (reps * k) as f64;
    assert!((rate - 0.05).abs() <= 0.02, "rejection rate {rate}");
}

#[test]
fn mean_group_of_exposures_recovers_loading_mean() {
    let cfg = DgpConfig::new(2, 10, 100, 100, 1.0);
    let mut rng = cfg.rng(8, 0);
    let d = generate_dgp(&cfg, &mut rng).unwrap();
    let fits = exposure_regressions(&d.u, &d.g).unwrap();
    let deltas: Vec<DVector<f64>> = fits.iter().map(|f| f.delta.clone()).collect();
    let ids: Vec<String> = (0..deltas.len()).map(|i| i.to_string()).collect();
    let mg = mean_group(&deltas, &ids, "all").unwrap();
    for j in 0..cfg.r {
        assert!((mg.mean[j] - cfg.phi).abs() <= 3.0 * mg.stderr[j], "{} ± {}", mg.mean[j], mg.stderr[j]);
    }
}

/// Unit coefficients drawn around a known mean with correlated dispersion,
/// plus independent estimation noise.
fn draw_units(rng: &mut ChaCha8Rng, n: usize, theta: &[f64]) -> Vec<DVector<f64>> {
    (0..n)
        .map(|_| {
            let common: f64 = rng.sample(StandardNormal);
            DVector::from_fn(theta.len(), |j, _| {
                let eta = 0.6 * common + 0.8 * rng.sample::<f64, _>(StandardNormal);
                let noise: f64 = 0.1 * rng.sample::<f64, _>(StandardNormal);
                theta[j] + (j as f64 + 1.0) * 0.5 * eta + noise
            })
        })
        .collect()
}

#[test]
fn mean_group_intervals_cover_at_nominal_rate() {
    let theta = [0.3, -1.0, 2.0];
    let (n, reps) = (200, 2000);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
    let mut cover = [0usize; 3];
    for _ in 0..reps {
        let mg = mean_group(&draw_units(&mut rng, n, &theta), &ids, "all").unwrap();
        for j in 0..3 {
            cover[j] += usize::from((mg.mean[j] - theta[j]).abs() <= 1.959964 * mg.stderr[j]);
        }
    }
    for c in cover {
        let rate = c as f64 / reps as f64;
        assert!((rate - 0.95).abs() <= 0.02, "coverage {rate}");
    }
}

#[test]
fn group_difference_has_nominal_size() {
    let theta = [0.5];
    let (n, reps) = (60, 2000);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let ids_a: Vec<String> = (0..n).map(|i| format!("a{i}")).collect();
    let ids_b: Vec<String> = (0..n).map(|i| format!("b{i}")).collect();
    let mut rejections = 0;
    for _ in 0..reps {
        let a = mean_group(&draw_units(&mut rng, n, &theta), &ids_a, "a").unwrap();
        let b = mean_group(&draw_units(&mut rng, n, &theta), &ids_b, "b").unwrap();
        rejections += usize::from(group_difference(&a, &b).unwrap().pvalue[0] < 0.05);
    }
    let rate = rejections as f64 / reps as f64;
    assert!((rate - 0.05).abs() <= 0.02, "size {rate}");
}
