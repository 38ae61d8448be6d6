//! Stage 2: leading principal component of the Stage-1 residuals, proxy
//! selection, Shapley–Owen attribution and unit-level exposure regressions.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{eigenvalue_ratio_count, extract_factors, ols, pooled_covariance, select_columns, with_intercept};
use crate::panel::{Aggregation, BoundaryMonths, MonthIndex, MonthlyTable, YearMonth};
use crate::selection::{mtb_select, CandidatePool, MtbConfig, SelectionResult};
use crate::stage1::Stage1Result;

/// Largest predictor set for exact Shapley enumeration.
pub const SHAPLEY_MAX: usize = 20;

#[derive(Clone, Debug)]
pub struct LatentComponent {
    /// Leading component on the residual calendar, scaled so `e'e/T = 1`.
    pub weekly: DVector<f64>,
    pub explained_share: f64,
    pub eigenvalue: f64,
    pub spectrum: Vec<f64>,
}

fn residual_blocks(residuals: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
    let (n, t) = residuals.shape();
    if n < 2 {
        return Err(Error::Validation(format!(
            "principal components need at least 2 units, found {n}"
        )));
    }
    if t < 2 {
        return Err(Error::SampleTooShort(format!("{t} residual periods")));
    }
    Ok((0..n)
        .map(|i| DMatrix::from_iterator(t, 1, residuals.row(i).iter().copied()))
        .collect())
}

/// Leading principal component of `(1/NT) Σ û_i û_i'` for an N×T residual
/// matrix.
pub fn residual_leading_component(residuals: &DMatrix<f64>) -> Result<LatentComponent> {
    let cov = pooled_covariance(&residual_blocks(residuals)?)?;
    let f = extract_factors(&cov, 1)?;
    Ok(LatentComponent {
        weekly: f.factors.column(0).into_owned(),
        explained_share: f.explained_share[0],
        eigenvalue: f.eigenvalues[0],
        spectrum: f.spectrum,
    })
}

/// How many residual components feed the proxy selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Components {
    /// Leading component only.
    #[default]
    One,
    /// Eigenvalue-ratio count with `k_max = 8`; selections are merged.
    Auto,
}

/// Leading `k` residual components, or the eigenvalue-ratio count for `Auto`.
pub fn residual_components(residuals: &DMatrix<f64>, components: Components) -> Result<DMatrix<f64>> {
    let cov = pooled_covariance(&residual_blocks(residuals)?)?;
    let k = match components {
        Components::One => 1,
        Components::Auto => {
            let probe = extract_factors(&cov, 1)?;
            let k_max = 8.min(cov.nrows().saturating_sub(2)).max(1);
            eigenvalue_ratio_count(&probe.spectrum, k_max)?
        }
    };
    Ok(extract_factors(&cov, k)?.factors)
}

/// MTB on each target column, merging selections in order of first
/// appearance.
pub fn select_union(targets: &DMatrix<f64>, pool: &CandidatePool, mtb: &MtbConfig) -> Result<SelectionResult> {
    let mut merged: Option<SelectionResult> = None;
    for col in targets.column_iter() {
        let res = mtb_select(&col.into_owned(), pool, mtb)?;
        match merged.as_mut() {
            None => merged = Some(res),
            Some(m) => {
                for step in res.steps {
                    if !m.selected.contains(&step.candidate) {
                        m.selected.push(step.candidate);
                        m.steps.push(step);
                    }
                }
            }
        }
    }
    merged.ok_or(Error::EmptyPool)
}

/// Leading residual component regressed on the pool by MTB, at the
/// residuals' own frequency. Returns the selection and the selected columns.
pub fn pca_mtb(
    residuals: &DMatrix<f64>,
    pool: &CandidatePool,
    mtb: &MtbConfig,
) -> Result<(SelectionResult, DMatrix<f64>)> {
    let component = residual_leading_component(residuals)?;
    if component.weekly.len() != pool.periods() {
        return Err(Error::DimensionMismatch(format!(
            "component has {} periods, pool has {}",
            component.weekly.len(),
            pool.periods()
        )));
    }
    let sel = mtb_select(&component.weekly, pool, mtb)?;
    let design = select_columns(pool.matrix(), &sel.selected);
    Ok((sel, design))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapleyReport {
    pub shares: Vec<f64>,
    pub total_r2: f64,
}

/// Exact Shapley–Owen decomposition of the R² of `target` on `design` (with
/// intercept) over all subsets of the predictors.
pub fn shapley_owen(target: &DVector<f64>, design: &DMatrix<f64>) -> Result<ShapleyReport> {
    let (t, k) = design.shape();
    if target.len() != t {
        return Err(Error::DimensionMismatch(format!(
            "target has {} periods, design has {t}",
            target.len()
        )));
    }
    if k > SHAPLEY_MAX {
        return Err(Error::TooManyPredictors(k));
    }
    if k == 0 {
        return Ok(ShapleyReport {
            shares: Vec::new(),
            total_r2: 0.0,
        });
    }
    let yc = target.add_scalar(-target.mean());
    let mut xc = design.clone();
    for mut col in xc.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    let yy = yc.norm_squared();
    if yy == 0.0 {
        return Err(Error::Validation("target has zero variance".into()));
    }
    let gram = xc.tr_mul(&xc);
    let s = xc.tr_mul(&yc);
    let r2 = subset_r2(&gram, &s, yy);

    let mut fact = vec![1.0f64; k + 1];
    for i in 1..=k {
        fact[i] = fact[i - 1] * i as f64;
    }
    let weight: Vec<f64> = (0..k).map(|w| fact[w] * fact[k - w - 1] / fact[k]).collect();
    let mut shares = vec![0.0; k];
    for (j, share) in shares.iter_mut().enumerate() {
        let bit = 1usize << j;
        let mut acc = 0.0;
        for mask in 0..(1usize << k) {
            if mask & bit == 0 {
                acc += weight[mask.count_ones() as usize] * (r2[mask | bit] - r2[mask]);
            }
        }
        *share = acc;
    }
    Ok(ShapleyReport {
        shares,
        total_r2: r2[(1 << k) - 1],
    })
}

/// R² of every subset of columns, indexed by bit mask. Subsets are visited
/// depth first so each one extends its parent's Cholesky factor by a row;
/// columns dependent on those already included add nothing and are skipped.
fn subset_r2(gram: &DMatrix<f64>, s: &DVector<f64>, yy: f64) -> Vec<f64> {
    let k = gram.nrows();
    let mut out = vec![0.0; 1 << k];
    struct Frame {
        rows: Vec<Vec<f64>>,
        cols: Vec<usize>,
        proj: Vec<f64>,
    }
    fn visit(
        gram: &DMatrix<f64>,
        s: &DVector<f64>,
        yy: f64,
        start: usize,
        mask: usize,
        explained: f64,
        frame: &mut Frame,
        out: &mut [f64],
    ) {
        out[mask] = (explained / yy).clamp(0.0, 1.0);
        let k = gram.nrows();
        for j in start..k {
            let m = frame.cols.len();
            let mut l = vec![0.0; m];
            for a in 0..m {
                let mut v = gram[(frame.cols[a], j)];
                for b in 0..a {
                    v -= frame.rows[a][b] * l[b];
                }
                l[a] = v / frame.rows[a][a];
            }
            let d = gram[(j, j)] - l.iter().map(|v| v * v).sum::<f64>();
            if d <= 1e-10 * gram[(j, j)].max(f64::MIN_POSITIVE) {
                visit(gram, s, yy, j + 1, mask | (1 << j), explained, frame, out);
                continue;
            }
            let ljj = d.sqrt();
            let pj = (s[j] - l.iter().zip(&frame.proj).map(|(a, b)| a * b).sum::<f64>()) / ljj;
            l.push(ljj);
            frame.rows.push(l);
            frame.cols.push(j);
            frame.proj.push(pj);
            visit(gram, s, yy, j + 1, mask | (1 << j), explained + pj * pj, frame, out);
            frame.rows.pop();
            frame.cols.pop();
            frame.proj.pop();
        }
    }
    let mut frame = Frame {
        rows: Vec::new(),
        cols: Vec::new(),
        proj: Vec::new(),
    };
    visit(gram, s, yy, 0, 0, 0.0, &mut frame, &mut out);
    debug_assert_eq!(out.len(), 1 << k);
    out
}

/// Per-unit regression of aggregated residuals on the selected proxies.
#[derive(Clone, Debug)]
pub struct ExposureFit {
    pub intercept: f64,
    pub delta: DVector<f64>,
    pub stderr: DVector<f64>,
    pub residual: DVector<f64>,
}

/// OLS with intercept and HC1 standard errors for each row of `residuals`
/// (N×T_m) on `design` (T_m×|S|).
pub fn exposure_regressions(residuals: &DMatrix<f64>, design: &DMatrix<f64>) -> Result<Vec<ExposureFit>> {
    if residuals.ncols() != design.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "residuals have {} periods, design has {}",
            residuals.ncols(),
            design.nrows()
        )));
    }
    let x = with_intercept(design);
    (0..residuals.nrows())
        .into_par_iter()
        .map(|i| {
            let y = residuals.row(i).transpose();
            let fit = ols(&y, &x)?;
            let se = fit.stderr_hc1();
            let k = design.ncols();
            Ok(ExposureFit {
                intercept: fit.coef[0],
                delta: fit.coef.rows(1, k).into_owned(),
                stderr: se.rows(1, k).into_owned(),
                residual: fit.residuals,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub mtb: MtbConfig,
    pub aggregation: Aggregation,
    pub boundary: BoundaryMonths,
    pub components: Components,
}

#[derive(Clone, Debug)]
pub struct Stage2Result {
    pub component: LatentComponent,
    pub months: Vec<YearMonth>,
    /// Monthly aggregate of each selection target (leading component first).
    pub targets: DMatrix<f64>,
    pub selection: SelectionResult,
    pub proxy_names: Vec<String>,
    /// Selected proxies, T_m×|S|.
    pub design: DMatrix<f64>,
    pub shapley: Option<ShapleyReport>,
    pub exposures: Vec<ExposureFit>,
}

impl Stage2Result {
    pub fn selected_names(&self) -> Vec<String> {
        self.selection
            .selected
            .iter()
            .map(|&j| self.proxy_names[j].clone())
            .collect()
    }

    /// Writes `unit,proxy,estimate,stderr`.
    pub fn write_exposures<W: std::io::Write>(&self, unit_ids: &[String], w: W) -> Result<()> {
        let names = self.selected_names();
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["unit", "proxy", "estimate", "stderr"])?;
        for (id, fit) in unit_ids.iter().zip(&self.exposures) {
            for (j, name) in names.iter().enumerate() {
                wtr.write_record([
                    id.as_str(),
                    name.as_str(),
                    &format!("{:.10e}", fit.delta[j]),
                    &format!("{:.10e}", fit.stderr[j]),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Writes `proxy,share,share_of_R2`.
    pub fn write_shapley<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["proxy", "share", "share_of_R2"])?;
        if let Some(rep) = &self.shapley {
            for (name, share) in self.selected_names().iter().zip(&rep.shares) {
                let rel = if rep.total_r2 > 0.0 { share / rep.total_r2 } else { 0.0 };
                wtr.write_record([name.clone(), format!("{share:.10e}"), format!("{rel:.10e}")])?;
            }
            wtr.write_record(["total".to_string(), format!("{:.10e}", rep.total_r2), "1".to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Monthly Stage 2 on top of a Stage-1 result.
pub fn run_stage2(stage1: &Stage1Result, proxies: &MonthlyTable, config: &Stage2Config) -> Result<Stage2Result> {
    let residuals = stage1.residual_matrix();
    let component = residual_leading_component(&residuals)?;
    let weekly_targets = match config.components {
        Components::One => DMatrix::from_column_slice(component.weekly.len(), 1, component.weekly.as_slice()),
        Components::Auto => residual_components(&residuals, Components::Auto)?,
    };
    let index = MonthIndex::build(&stage1.dates, config.boundary)?;
    let tm = index.len();
    let mut targets = DMatrix::zeros(tm, weekly_targets.ncols());
    for (c, col) in weekly_targets.column_iter().enumerate() {
        let agg = index.aggregate(col.as_slice(), config.aggregation);
        targets.set_column(c, &DVector::from_vec(agg));
    }
    let pool_values = proxies.align_to(&index.months)?;
    let pool = CandidatePool::new(pool_values, proxies.names.clone())?;
    let selection = select_union(&targets, &pool, &config.mtb)?;
    let design = select_columns(pool.matrix(), &selection.selected);
    let shapley = if design.ncols() > 0 && design.ncols() <= SHAPLEY_MAX {
        Some(shapley_owen(&targets.column(0).into_owned(), &design)?)
    } else {
        None
    };
    let n = residuals.nrows();
    let mut monthly = DMatrix::zeros(n, tm);
    for i in 0..n {
        let row: Vec<f64> = residuals.row(i).iter().copied().collect();
        let agg = index.aggregate(&row, config.aggregation);
        monthly.set_row(i, &DVector::from_vec(agg).transpose());
    }
    let exposures = if design.ncols() > 0 {
        exposure_regressions(&monthly, &design)?
    } else {
        Vec::new()
    };
    Ok(Stage2Result {
        component,
        months: index.months,
        targets,
        selection,
        proxy_names: proxies.names.clone(),
        design,
        shapley,
        exposures,
    })
}
