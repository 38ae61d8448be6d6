use dcpanel::linalg::{annihilator, eigenvalue_ratio_count, extract_factors, pooled_covariance};
use dcpanel::meangroup::mean_group;
use dcpanel::montecarlo::{score_selection, MetricReport};
use dcpanel::selection::{
    coordinate_descent_lasso, lasso_objective, mtb_select, mtb_threshold, soft_threshold, CandidatePool, MtbConfig, Reference, TStat,
};
use dcpanel::stage2::shapley_owen;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projector_is_idempotent_annihilates_and_has_trace_t_minus_k(seed in any::<u64>(), t in 8usize..40, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gaussian(&mut rng, t, k);
        let p = annihilator(&a).unwrap();
        let m = p.annihilator();
        prop_assert!(max_abs(&(m * m - m)) < 1e-8);
        prop_assert!(max_abs(&(m * &a)) < 1e-8);
        prop_assert!((m.trace() - (t - k) as f64).abs() < 1e-8);
        prop_assert!(max_abs(&(m - m.transpose())) < 1e-8);
    }

    #[test]
    fn factors_are_normalised_and_residual_matches_discarded_spectrum(seed in any::<u64>(), t in 10usize..40, n in 2usize..8, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks: Vec<DMatrix<f64>> = (0..n).map(|_| gaussian(&mut rng, t, 2)).collect();
        let cov = pooled_covariance(&blocks).unwrap();
        let f = extract_factors(&cov, k).unwrap();
        let ftf = f.factors.tr_mul(&f.factors) / t as f64;
        prop_assert!(max_abs(&(ftf - DMatrix::identity(k, k))) < 1e-8);

        let v = f.orthonormal();
        let approx = &v * DMatrix::from_diagonal(&DVector::from_vec(f.eigenvalues.clone())) * v.transpose();
        let frob = (&cov - approx).norm();
        let discarded: f64 = f.spectrum[k..].iter().map(|l| l * l).sum::<f64>().sqrt();
        prop_assert!((frob - discarded).abs() < 1e-8 * (1.0 + cov.norm()));
    }

    #[test]
    fn eigenvalue_ratio_count_is_scale_invariant(values in prop::collection::vec(0.01f64..100.0, 6..15), scale in 1e-3f64..1e3) {
        let mut v = values;
        v.sort_by(|a, b| b.total_cmp(a));
        let k_max = v.len() - 1;
        let scaled: Vec<f64> = v.iter().map(|x| x * scale).collect();
        prop_assert_eq!(eigenvalue_ratio_count(&v, k_max).unwrap(), eigenvalue_ratio_count(&scaled, k_max).unwrap());
    }

    #[test]
    fn shapley_shares_sum_to_r2_and_follow_columns(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = 40;
        let x = gaussian(&mut rng, t, k);
        let y = DVector::from_fn(t, |s, _| (0..k).map(|j| x[(s, j)] * (j as f64 + 1.0) * 0.3).sum::<f64>() + rng.sample::<f64, _>(StandardNormal));
        let rep = shapley_owen(&y, &x).unwrap();
        prop_assert!((rep.shares.iter().sum::<f64>() - rep.total_r2).abs() < 1e-8);

        // Reversing the columns reverses the shares.
        let rev = DMatrix::from_fn(t, k, |s, j| x[(s, k - 1 - j)]);
        let rep_rev = shapley_owen(&y, &rev).unwrap();
        for j in 0..k {
            prop_assert!((rep.shares[j] - rep_rev.shares[k - 1 - j]).abs() < 1e-8);
        }
    }

    #[test]
    fn lasso_matches_soft_threshold_under_orthonormal_design(seed in any::<u64>(), p in 1usize..8, xi in 0.0f64..1.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = 32;
        // Columns scaled so that X'X/T = I.
        let q = gaussian(&mut rng, t, p).qr().q() * (t as f64).sqrt();
        let y = DVector::from_fn(t, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = coordinate_descent_lasso(&y, &q, xi).unwrap();
        let z = q.tr_mul(&y) / t as f64;
        for j in 0..p {
            prop_assert!((b[j] - soft_threshold(z[j], xi)).abs() < 1e-6);
        }
    }

    #[test]
    fn lasso_solution_is_not_improved_by_perturbation(seed in any::<u64>(), xi in 0.01f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, p) = (30, 6);
        let x = gaussian(&mut rng, t, p);
        let y = DVector::from_fn(t, |s, _| x[(s, 0)] - 0.5 * x[(s, 2)] + rng.sample::<f64, _>(StandardNormal));
        let b = coordinate_descent_lasso(&y, &x, xi).unwrap();
        let f0 = lasso_objective(&y, &x, &b, xi);
        for _ in 0..20 {
            let d = DVector::from_fn(p, |_, _| 1e-3 * rng.sample::<f64, _>(StandardNormal));
            prop_assert!(lasso_objective(&y, &x, &(&b + d), xi) >= f0 - 1e-9);
        }
    }

    #[test]
    fn mean_group_invariances(seed in any::<u64>(), n in 2usize..30, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let thetas: Vec<DVector<f64>> = (0..n).map(|_| DVector::from_fn(k, |_, _| rng.sample(StandardNormal))).collect();
        let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let base = mean_group(&thetas, &ids, "a").unwrap();

        let mut rev = thetas.clone();
        rev.reverse();
        let r = mean_group(&rev, &ids, "a").unwrap();
        prop_assert!((&base.mean - &r.mean).amax() < 1e-12);
        prop_assert!((&base.sigma_eta - &r.sigma_eta).amax() < 1e-12);

        let c = DVector::from_fn(k, |j, _| 3.0 + j as f64);
        let shifted: Vec<DVector<f64>> = thetas.iter().map(|t| t + &c).collect();
        let s = mean_group(&shifted, &ids, "a").unwrap();
        prop_assert!((&base.sigma_eta - &s.sigma_eta).amax() < 1e-9);
        prop_assert!((&s.mean - &base.mean - &c).amax() < 1e-9);
        prop_assert!(base.stderr.iter().zip(base.sigma_eta.diagonal().iter()).all(|(se, v)| (se - (v / n as f64).sqrt()).abs() < 1e-12));

        if n >= 4 {
            let m = n / 2;
            let a = mean_group(&thetas[..m], &ids[..m], "x").unwrap();
            let b = mean_group(&thetas[m..], &ids[m..], "y").unwrap();
            let pooled = (&a.mean * m as f64 + &b.mean * (n - m) as f64) / n as f64;
            prop_assert!((pooled - &base.mean).amax() < 1e-12);
        }
    }

    #[test]
    fn mtb_selection_ignores_target_scale_and_candidate_signs(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, n) = (60, 12);
        let z = gaussian(&mut rng, t, n);
        let y = DVector::from_fn(t, |s, _| z[(s, 1)] + 0.7 * z[(s, 5)] + rng.sample::<f64, _>(StandardNormal));
        let cfg = MtbConfig::default();
        let base = mtb_select(&y, &CandidatePool::unnamed(z.clone()).unwrap(), &cfg).unwrap();
        let scaled = mtb_select(&(&y * scale), &CandidatePool::unnamed(z.clone()).unwrap(), &cfg).unwrap();
        let mut flipped = z.clone();
        for j in (0..n).step_by(2) {
            flipped.column_mut(j).neg_mut();
        }
        let flip = mtb_select(&(-&y), &CandidatePool::unnamed(flipped).unwrap(), &cfg).unwrap();
        prop_assert_eq!(&base.selected, &scaled.selected);
        prop_assert_eq!(&base.selected, &flip.selected);
    }
}

/// Confusion-matrix oracle written from the definitions.
fn oracle(tp: f64, fp: f64, tn: f64, fn_: f64) -> [f64; 6] {
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    let mcc = if denom == 0.0 { 0.0 } else { (tp * tn - fp * fn_) / denom.sqrt() };
    let f1 = if tp + fp + fn_ == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
    let tpr = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
    let fpr = if fp + tn == 0.0 { 0.0 } else { fp / (fp + tn) };
    let tdr = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
    let fdr = if tp + fp == 0.0 { 0.0 } else { fp / (tp + fp) };
    [mcc, f1, tpr, fpr, tdr, fdr]
}

#[test]
fn metrics_agree_with_confusion_oracle_on_random_tuples() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10_000 {
        let r = rng.random_range(1..8usize);
        let pool = r + rng.random_range(1..60usize);
        let mut selected: Vec<usize> = (0..pool).filter(|_| rng.random_bool(0.2)).collect();
        selected.sort_unstable();
        let m: MetricReport = score_selection(&selected, r, pool).unwrap();
        let tp = selected.iter().filter(|&&j| j < r).count();
        let fp = selected.len() - tp;
        let (fn_, tn) = (r - tp, pool - r - fp);
        assert_eq!((m.tp, m.fp, m.tn, m.fn_), (tp, fp, tn, fn_));
        let want = oracle(tp as f64, fp as f64, tn as f64, fn_ as f64);
        let got = [m.mcc, m.f1, m.tpr, m.fpr, m.tdr, m.fdr];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{got:?} vs {want:?}");
        }
        assert_eq!(m.model_size, selected.len());
        if selected.len() == r && tp == r {
            assert_eq!(m.mcc, 1.0);
        }
        if fp == 0 {
            assert_eq!(m.fpr, 0.0);
        }
    }
}

#[test]
fn shapley_is_exact_for_orthogonal_predictors() {
    let t = 64;
    let x = DMatrix::from_fn(t, 3, |s, j| {
        let period = 1 << (j + 1);
        if s % period < period / 2 { 1.0 } else { -1.0 }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let y = DVector::from_fn(t, |s, _| 0.9 * x[(s, 0)] + 0.5 * x[(s, 1)] - 0.2 * x[(s, 2)] + rng.sample::<f64, _>(StandardNormal));
    let rep = shapley_owen(&y, &x).unwrap();
    let yc = y.add_scalar(-y.mean());
    let sst = yc.norm_squared();
    for j in 0..3 {
        let r = x.column(j).dot(&yc).powi(2) / (x.column(j).norm_squared() * sst);
        assert!((rep.shares[j] - r).abs() < 1e-8, "share {j}: {} vs {r}", rep.shares[j]);
    }
}

/// With exact t-tests on independent candidates the first pass rejects the
/// null with probability `1 − (1 − τ)^n`, `τ` the first-pass threshold.
#[test]
fn mtb_null_selection_rate_matches_first_pass_threshold() {
    let (t, n, reps) = (100, 50, 2000);
    let cfg = MtbConfig {
        tstat: TStat::Classical,
        reference: Reference::StudentT,
        ..MtbConfig::default()
    };
    let tau = mtb_threshold(&cfg, n, 1);
    let expected = 1.0 - (1.0 - tau).powi(n as i32);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut any = 0;
    for _ in 0..reps {
        let z = gaussian(&mut rng, t, n);
        let y = DVector::from_fn(t, |_, _| rng.sample::<f64, _>(StandardNormal));
        let sel = mtb_select(&y, &CandidatePool::unnamed(z).unwrap(), &cfg).unwrap();
        any += usize::from(!sel.selected.is_empty());
    }
    let rate = any as f64 / reps as f64;
    let se = (expected * (1.0 - expected) / reps as f64).sqrt();
    assert!((rate - expected).abs() < 4.0 * se, "null rate {rate}, expected {expected}");
}
