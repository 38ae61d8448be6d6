use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CandidatePool, Method, SelectionResult};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LassoOptions {
    /// Tolerance relative to `y'y/T`, interpreted according to `rule`.
    pub tol: f64,
    pub max_sweeps: usize,
    pub rule: StopRule,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_sweeps: 10_000,
            rule: StopRule::DualityGap,
        }
    }
}

/// Convergence test applied after each full sweep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Duality gap below `tol · y'y/T`.
    #[default]
    DualityGap,
    /// Largest `G_jj Δb_j²` within the sweep below `tol · y'y/T`.
    MaxChange,
}

pub fn soft_threshold(x: f64, lambda: f64) -> f64 {
    if x > lambda {
        x - lambda
    } else if x < -lambda {
        x + lambda
    } else {
        0.0
    }
}

/// `(1/2T)‖y − Xb‖² + ξ‖b‖₁`.
pub fn lasso_objective(y: &DVector<f64>, x: &DMatrix<f64>, b: &DVector<f64>, xi: f64) -> f64 {
    let r = y - x * b;
    r.norm_squared() / (2.0 * y.len() as f64) + xi * b.lp_norm(1)
}

/// Sufficient statistics `G = X'X/T`, `q = X'y/T`, `yy = y'y/T`.
#[derive(Clone, Debug)]
struct Gram<'a> {
    g: &'a DMatrix<f64>,
    q: DVector<f64>,
    yy: f64,
}

#[derive(Clone, Debug)]
pub struct LassoSolution {
    pub coef: DVector<f64>,
    pub gap: f64,
    pub sweeps: usize,
    pub converged: bool,
}

/// Cyclic coordinate descent in covariance form, warm-started from `w`.
/// Keeps `grad = q − Gw` current so that a zero coordinate that stays at
/// zero costs O(1).
fn cd_gram(prob: &Gram<'_>, xi: f64, w: &mut DVector<f64>, opts: &LassoOptions) -> (f64, usize, bool) {
    let p = prob.q.len();
    let g = prob.g;
    let mut grad = &prob.q - g * &*w;
    let scale = prob.yy.max(f64::MIN_POSITIVE);
    let mut gap = f64::INFINITY;
    for sweep in 1..=opts.max_sweeps {
        let mut moved = 0.0f64;
        for j in 0..p {
            let gjj = g[(j, j)];
            if gjj <= 0.0 {
                continue;
            }
            let old = w[j];
            let new = soft_threshold(grad[j] + gjj * old, xi) / gjj;
            if new != old {
                let delta = new - old;
                w[j] = new;
                grad.axpy(-delta, &g.column(j), 1.0);
                moved = moved.max(gjj * delta * delta);
            }
        }
        if opts.rule == StopRule::MaxChange {
            if moved <= opts.tol * scale {
                return (duality_gap(prob, xi, w, &grad), sweep, true);
            }
            continue;
        }
        gap = duality_gap(prob, xi, w, &grad);
        let done = if xi > 0.0 {
            gap <= opts.tol * scale
        } else {
            grad.amax() <= opts.tol * scale.sqrt()
        };
        if done {
            return (gap, sweep, true);
        }
    }
    (gap, opts.max_sweeps, false)
}

fn duality_gap(prob: &Gram<'_>, xi: f64, w: &DVector<f64>, grad: &DVector<f64>) -> f64 {
    let qw = prob.q.dot(w);
    let r2 = (prob.yy - qw - w.dot(grad)).max(0.0);
    let dual_norm = grad.amax();
    let c = if dual_norm > xi {
        if dual_norm > 0.0 {
            xi / dual_norm
        } else {
            1.0
        }
    } else {
        1.0
    };
    let gap = 0.5 * r2 * (1.0 + c * c) + xi * w.lp_norm(1) - c * (prob.yy - qw);
    gap.max(0.0)
}

/// Minimises `(1/2T)‖y − Xb‖² + ξ‖b‖₁` without an intercept. `X` is taken as
/// given; standardisation is the caller's responsibility.
pub fn coordinate_descent_lasso(y: &DVector<f64>, x: &DMatrix<f64>, xi: f64) -> Result<DVector<f64>> {
    let sol = coordinate_descent_lasso_with(y, x, xi, &LassoOptions::default(), None)?;
    if !sol.converged {
        return Err(Error::NoConvergence { gap: sol.gap });
    }
    Ok(sol.coef)
}

pub fn coordinate_descent_lasso_with(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    xi: f64,
    opts: &LassoOptions,
    warm: Option<&DVector<f64>>,
) -> Result<LassoSolution> {
    let (t, p) = x.shape();
    if y.len() != t {
        return Err(Error::DimensionMismatch(format!(
            "outcome has {} rows, design has {t}",
            y.len()
        )));
    }
    if !(xi >= 0.0) {
        return Err(Error::InvalidConfig(format!("penalty {xi} must be non-negative")));
    }
    let tf = t as f64;
    let g = x.tr_mul(x) / tf;
    let prob = Gram {
        g: &g,
        q: x.tr_mul(y) / tf,
        yy: y.norm_squared() / tf,
    };
    let mut w = warm.cloned().unwrap_or_else(|| DVector::zeros(p));
    let (gap, sweeps, converged) = cd_gram(&prob, xi, &mut w, opts);
    Ok(LassoSolution {
        coef: w,
        gap,
        sweeps,
        converged,
    })
}

/// Pool columns scaled to zero mean and unit (population) variance.
#[derive(Clone, Debug)]
pub struct Standardized {
    pub x: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub sd: DVector<f64>,
}

impl Standardized {
    pub fn new(x: &DMatrix<f64>) -> Result<Self> {
        let (t, p) = x.shape();
        let tf = t as f64;
        let mut out = x.clone();
        let mut mean = DVector::zeros(p);
        let mut sd = DVector::zeros(p);
        for j in 0..p {
            let m = x.column(j).mean();
            let v = x.column(j).iter().map(|a| (a - m).powi(2)).sum::<f64>() / tf;
            if !(v > 0.0) {
                return Err(Error::Validation(format!("candidate {j} has zero variance")));
            }
            let s = v.sqrt();
            mean[j] = m;
            sd[j] = s;
            for i in 0..t {
                out[(i, j)] = (x[(i, j)] - m) / s;
            }
        }
        Ok(Self { x: out, mean, sd })
    }
}

/// How observations are assigned to cross-validation folds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldScheme {
    /// Observations shuffled, then split into equal-sized folds.
    #[default]
    Random,
    /// Contiguous blocks of periods, shared by all units.
    Contiguous,
}

/// Fold assignment for an `m×T` panel of targets sharing one design `x`,
/// with each fold's weighted, centred training Gram precomputed.
///
/// Rows of the stacked panel that share a period share a design row, so
/// every statistic reduces to per-period counts and sums.
#[derive(Clone, Debug)]
pub struct FoldPlan {
    /// `m×T` fold index of each observation.
    ids: DMatrix<usize>,
    folds: Vec<FoldStats>,
    full: FoldStats,
}

#[derive(Clone, Debug)]
struct FoldStats {
    /// Training observations per period.
    weight: Vec<f64>,
    n: f64,
    xmean: DVector<f64>,
    gram: DMatrix<f64>,
}

impl FoldStats {
    fn new(x: &DMatrix<f64>, weight: Vec<f64>) -> Self {
        let (t, p) = x.shape();
        let n: f64 = weight.iter().sum();
        let mut xmean = DVector::zeros(p);
        for s in 0..t {
            if weight[s] > 0.0 {
                xmean.axpy(weight[s], &x.row(s).transpose(), 1.0);
            }
        }
        xmean /= n;
        let mut xc = DMatrix::zeros(t, p);
        for s in 0..t {
            let w = weight[s].sqrt();
            for j in 0..p {
                xc[(s, j)] = w * (x[(s, j)] - xmean[j]);
            }
        }
        let gram = xc.tr_mul(&xc) / n;
        Self { weight, n, xmean, gram }
    }

    /// Centred `X'y/n`, `y'y/n` and the target mean over the training
    /// observations, where `sum[t]` and `sq` are the training sums of `y`
    /// and `y²`.
    fn target(&self, x: &DMatrix<f64>, sum: &[f64], sq: f64) -> (DVector<f64>, f64, f64) {
        let p = x.ncols();
        let ymean = sum.iter().sum::<f64>() / self.n;
        let mut q = DVector::zeros(p);
        for (s, &ys) in sum.iter().enumerate() {
            let yc = ys - self.weight[s] * ymean;
            if yc != 0.0 {
                for j in 0..p {
                    q[j] += (x[(s, j)] - self.xmean[j]) * yc;
                }
            }
        }
        let yy = (sq / self.n - ymean * ymean).max(0.0);
        (q / self.n, yy, ymean)
    }
}

impl FoldPlan {
    /// Assigns the `m×T` observations of a panel with design `x` to `k`
    /// folds. `Random` shuffles all observations with `rng`; `Contiguous`
    /// ignores it.
    pub fn new<R: Rng + ?Sized>(x: &DMatrix<f64>, m: usize, k: usize, scheme: FoldScheme, rng: &mut R) -> Result<Self> {
        let t = x.nrows();
        if m == 0 || k < 2 || k > m * t {
            return Err(Error::InvalidConfig(format!("{k} folds for {m}×{t} observations")));
        }
        let ids = match scheme {
            FoldScheme::Contiguous => {
                if k > t {
                    return Err(Error::InvalidConfig(format!("{k} contiguous folds for {t} periods")));
                }
                DMatrix::from_fn(m, t, |_, s| (s * k) / t)
            }
            FoldScheme::Random => {
                let mut labels: Vec<usize> = (0..m * t).map(|o| o % k).collect();
                labels.shuffle(rng);
                DMatrix::from_row_slice(m, t, &labels)
            }
        };
        let folds = (0..k)
            .map(|f| {
                let weight = (0..t)
                    .map(|s| ids.column(s).iter().filter(|id| **id != f).count() as f64)
                    .collect();
                FoldStats::new(x, weight)
            })
            .collect();
        Ok(Self {
            ids,
            folds,
            full: FoldStats::new(x, vec![m as f64; t]),
        })
    }

    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Rows of the target panel the plan was built for.
    pub fn rows(&self) -> usize {
        self.ids.nrows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvOptions {
    pub folds: usize,
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    pub scheme: FoldScheme,
    pub solver: LassoOptions,
    /// Path stops once this share of variation is explained.
    pub max_dev_ratio: f64,
    /// Path stops when the explained share grows by less than this, relatively.
    pub min_dev_gain: f64,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            folds: 10,
            n_lambda: 100,
            lambda_min_ratio: 1e-4,
            scheme: FoldScheme::Random,
            solver: LassoOptions {
                tol: 1e-7,
                max_sweeps: 100_000,
                rule: StopRule::MaxChange,
            },
            max_dev_ratio: 0.999,
            min_dev_gain: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CvLassoFit {
    pub lambda: f64,
    pub lambda_index: usize,
    /// Coefficients on the standardised scale.
    pub coef: DVector<f64>,
    pub grid: Vec<f64>,
    pub cv_mse: Vec<f64>,
    /// Number of path fits that hit the sweep limit.
    pub unconverged: usize,
}

impl CvLassoFit {
    pub fn support(&self) -> Vec<usize> {
        self.coef
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != 0.0)
            .map(|(j, _)| j)
            .collect()
    }
}

/// Early exit for a decreasing-penalty path: stop once the fit explains
/// almost all variation or the explained share has stopped moving.
struct PathStop {
    max_ratio: f64,
    min_gain: f64,
    prev: f64,
}

impl PathStop {
    fn new(opts: &CvOptions) -> Self {
        Self {
            max_ratio: opts.max_dev_ratio,
            min_gain: opts.min_dev_gain,
            prev: 0.0,
        }
    }

    fn done(&mut self, prob: &Gram<'_>, w: &DVector<f64>) -> bool {
        if !(prob.yy > 0.0) {
            return true;
        }
        let grad = &prob.q - prob.g * w;
        let rss = (prob.yy - prob.q.dot(w) - w.dot(&grad)).max(0.0);
        let ratio = 1.0 - rss / prob.yy;
        let gain = ratio - self.prev;
        self.prev = ratio;
        ratio >= self.max_ratio || (ratio > 0.0 && gain < self.min_gain * ratio)
    }
}

fn log_grid(max: f64, ratio: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![max];
    }
    let (lo, hi) = ((max * ratio).ln(), max.ln());
    (0..n)
        .map(|i| (hi + (lo - hi) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Lasso with intercept on a single target; see [`lasso_cv_panel`].
pub fn lasso_cv(y: &DVector<f64>, x: &DMatrix<f64>, plan: &FoldPlan, opts: &CvOptions) -> Result<CvLassoFit> {
    lasso_cv_panel(&DMatrix::from_row_slice(1, y.len(), y.as_slice()), x, plan, opts)
}

/// Lasso with intercept and one coefficient vector common to all rows of
/// the `m×T` `targets`, fitted to the stacked panel. The penalty is chosen
/// by K-fold CV over a log-spaced grid: minimum mean validation MSE, ties
/// to the larger penalty. `x` must be the standardised pool the `plan` was
/// built from.
pub fn lasso_cv_panel(targets: &DMatrix<f64>, x: &DMatrix<f64>, plan: &FoldPlan, opts: &CvOptions) -> Result<CvLassoFit> {
    if opts.n_lambda == 0 {
        return Err(Error::EmptyGrid);
    }
    let (m, t) = targets.shape();
    if t != x.nrows() || m != plan.rows() {
        return Err(Error::DimensionMismatch(format!(
            "targets are {m}×{t}, pool has {} periods and the fold plan {} rows",
            x.nrows(),
            plan.rows()
        )));
    }
    let p = x.ncols();
    let k = plan.k();
    // Per fold and period: sums of y and y² over that fold's observations.
    let mut fold_sum = vec![vec![0.0; t]; k];
    let mut fold_cnt = vec![vec![0.0; t]; k];
    let mut fold_sq = vec![0.0; k];
    for i in 0..m {
        for s in 0..t {
            let f = plan.ids[(i, s)];
            let v = targets[(i, s)];
            fold_sum[f][s] += v;
            fold_cnt[f][s] += 1.0;
            fold_sq[f] += v * v;
        }
    }
    let total_sum: Vec<f64> = (0..t).map(|s| (0..k).map(|f| fold_sum[f][s]).sum()).collect();
    let total_sq: f64 = fold_sq.iter().sum();

    let (q_full, yy_full, _) = plan.full.target(x, &total_sum, total_sq);
    let lambda_max = q_full.amax();
    if !(lambda_max > 0.0) {
        return Ok(CvLassoFit {
            lambda: 0.0,
            lambda_index: 0,
            coef: DVector::zeros(p),
            grid: vec![0.0],
            cv_mse: vec![0.0],
            unconverged: 0,
        });
    }
    let mut grid = log_grid(lambda_max, opts.lambda_min_ratio, opts.n_lambda);
    let mut unconverged = 0;

    // Full-data path first; it fixes how far down the grid CV looks.
    let prob = Gram {
        g: &plan.full.gram,
        q: q_full,
        yy: yy_full,
    };
    let mut path = Vec::with_capacity(grid.len());
    let mut w = DVector::zeros(p);
    let mut stop = PathStop::new(opts);
    for &lam in &grid {
        let (_, _, ok) = cd_gram(&prob, lam, &mut w, &opts.solver);
        unconverged += usize::from(!ok);
        path.push(w.clone());
        if stop.done(&prob, &w) {
            break;
        }
    }
    grid.truncate(path.len());

    let mut mse = vec![0.0; grid.len()];
    for (f, stats) in plan.folds.iter().enumerate() {
        let train_sum: Vec<f64> = (0..t).map(|s| total_sum[s] - fold_sum[f][s]).collect();
        let (q, yy, ymean) = stats.target(x, &train_sum, total_sq - fold_sq[f]);
        let prob = Gram { g: &stats.gram, q, yy };
        let n_val: f64 = fold_cnt[f].iter().sum();
        let mut w = DVector::zeros(p);
        let mut stop = PathStop::new(opts);
        let mut saturated = false;
        for (l, &lam) in grid.iter().enumerate() {
            if !saturated {
                let (_, _, ok) = cd_gram(&prob, lam, &mut w, &opts.solver);
                unconverged += usize::from(!ok);
                saturated = stop.done(&prob, &w);
            }
            let mut sse = fold_sq[f];
            for s in 0..t {
                let c = fold_cnt[f][s];
                if c == 0.0 {
                    continue;
                }
                let mut pred = ymean;
                for j in 0..p {
                    if w[j] != 0.0 {
                        pred += (x[(s, j)] - stats.xmean[j]) * w[j];
                    }
                }
                sse += c * pred * pred - 2.0 * pred * fold_sum[f][s];
            }
            mse[l] += sse.max(0.0) / n_val;
        }
    }
    for v in mse.iter_mut() {
        *v /= k as f64;
    }
    let mut best = 0;
    for l in 1..grid.len() {
        if mse[l] < mse[best] {
            best = l;
        }
    }
    let w = path.swap_remove(best);
    Ok(CvLassoFit {
        lambda: grid[best],
        lambda_index: best,
        coef: w,
        grid,
        cv_mse: mse,
        unconverged,
    })
}

/// Pooled Lasso over the stacked N×T panel of `targets` (rows are units),
/// with folds drawn over all N·T observations.
pub fn pooled_lasso<R: Rng + ?Sized>(
    targets: &DMatrix<f64>,
    pool: &CandidatePool,
    opts: &CvOptions,
    rng: &mut R,
) -> Result<SelectionResult> {
    let z = Standardized::new(pool.matrix())?;
    pooled_lasso_with(targets, &z, opts, rng)
}

pub fn pooled_lasso_with<R: Rng + ?Sized>(
    targets: &DMatrix<f64>,
    z: &Standardized,
    opts: &CvOptions,
    rng: &mut R,
) -> Result<SelectionResult> {
    let plan = FoldPlan::new(&z.x, targets.nrows(), opts.folds, opts.scheme, rng)?;
    let fit = lasso_cv_panel(targets, &z.x, &plan, opts)?;
    Ok(SelectionResult {
        method: Method::PooledLasso,
        selected: fit.support(),
        steps: Vec::new(),
        scores: fit.coef.iter().copied().collect(),
    })
}

/// Unit-by-unit Lasso, each with its own CV folds, followed by stability
/// selection: a candidate is kept when it is selected for at least
/// `retain_fraction` of the units.
pub fn individual_lasso<R: Rng + ?Sized>(
    targets: &DMatrix<f64>,
    pool: &CandidatePool,
    retain_fraction: f64,
    opts: &CvOptions,
    rng: &mut R,
) -> Result<SelectionResult> {
    let z = Standardized::new(pool.matrix())?;
    individual_lasso_with(targets, &z, retain_fraction, opts, rng)
}

pub fn individual_lasso_with<R: Rng + ?Sized>(
    targets: &DMatrix<f64>,
    z: &Standardized,
    retain_fraction: f64,
    opts: &CvOptions,
    rng: &mut R,
) -> Result<SelectionResult> {
    if !(0.0..=1.0).contains(&retain_fraction) {
        return Err(Error::InvalidConfig(format!(
            "retain_fraction {retain_fraction} not in [0,1]"
        )));
    }
    let n = targets.nrows();
    let p = z.x.ncols();
    let mut counts = vec![0usize; p];
    let shared = match opts.scheme {
        FoldScheme::Contiguous => Some(FoldPlan::new(&z.x, 1, opts.folds, opts.scheme, rng)?),
        FoldScheme::Random => None,
    };
    for i in 0..n {
        let own;
        let plan = match &shared {
            Some(p) => p,
            None => {
                own = FoldPlan::new(&z.x, 1, opts.folds, opts.scheme, rng)?;
                &own
            }
        };
        let y = targets.row(i).transpose();
        let fit = lasso_cv(&y, &z.x, plan, opts)?;
        for j in fit.support() {
            counts[j] += 1;
        }
    }
    Ok(stability_rule(&counts, n, retain_fraction))
}

pub(crate) fn stability_rule(counts: &[usize], n: usize, retain_fraction: f64) -> SelectionResult {
    let need = retain_fraction * n as f64;
    let selected = counts
        .iter()
        .enumerate()
        .filter(|(_, c)| **c > 0 && **c as f64 >= need - 1e-9)
        .map(|(j, _)| j)
        .collect();
    SelectionResult {
        method: Method::IndividualLasso,
        selected,
        steps: Vec::new(),
        scores: counts.iter().map(|c| *c as f64 / n as f64).collect(),
    }
}
