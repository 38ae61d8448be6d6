//! Stage 1: defactor the semi-endogenous regressors, build the instrument
//! set and fit unit-specific IV regressions with sandwich covariances.

use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    eigenvalue_ratio_count, extract_factors, hstack, orthonormal_basis, pooled_covariance,
    residualize, residualize_vec, spd_condition, FactorEstimate,
};
use crate::panel::{trim_common, ObservedFactors, PanelDataset, SampleWindow, SemiEndogenousSet};

/// Condition number of `B` above which ridge jitter is added.
pub const JITTER_CONDITION: f64 = 1e10;
/// Condition number of `B` above which the fit fails.
pub const MAX_CONDITION: f64 = 1e12;

/// Number of latent factors removed from the semi-endogenous regressors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FactorCount {
    /// Eigenvalue-ratio choice over `1..=k_max`.
    Auto { k_max: usize },
    /// Fixed count; 0 disables defactoring.
    Fixed(usize),
}

impl Default for FactorCount {
    fn default() -> Self {
        FactorCount::Auto { k_max: 8 }
    }
}

impl fmt::Display for FactorCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FactorCount::Auto { k_max: 8 } => write!(f, "auto"),
            FactorCount::Auto { k_max } => write!(f, "auto:{k_max}"),
            FactorCount::Fixed(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for FactorCount {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "auto" {
            return Ok(FactorCount::default());
        }
        if let Some(k) = s.strip_prefix("auto:") {
            let k_max = k
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad k_f {s:?}")))?;
            return Ok(FactorCount::Auto { k_max });
        }
        s.parse()
            .map(FactorCount::Fixed)
            .map_err(|_| Error::InvalidConfig(format!("k_f must be \"auto\" or an integer, got {s:?}")))
    }
}

impl Serialize for FactorCount {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            FactorCount::Fixed(k) => s.serialize_u64(*k as u64),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for FactorCount {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(k) => Ok(FactorCount::Fixed(k as usize)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub zeta: usize,
    pub k_f: FactorCount,
    pub intercept: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            zeta: 5,
            k_f: FactorCount::default(),
            intercept: true,
        }
    }
}

/// Which panel columns play which role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Include the lagged outcome as the first regressor.
    #[serde(default = "default_true")]
    pub outcome_lag: bool,
    /// Unit-level regressors taken from the panel covariates.
    pub regressors: Vec<String>,
    /// Semi-endogenous variables whose defactored lags form the instruments.
    pub semi_endogenous: Vec<String>,
}

fn default_true() -> bool {
    true
}

impl ModelSpec {
    pub fn k_x(&self) -> usize {
        self.regressors.len() + usize::from(self.outcome_lag)
    }
}

/// Latent factors and defactored instrument blocks.
#[derive(Clone, Debug)]
pub struct Defactored {
    pub window: SampleWindow,
    pub k_f: usize,
    /// One factor estimate per lag τ = 0..=ζ.
    pub factors: Vec<FactorEstimate>,
    /// Per unit, `[M_{F₀} M_Y Z_i, …, M_{F_ζ} M_Y Z_{i,−ζ}]` on the effective sample.
    pub blocks: Vec<DMatrix<f64>>,
}

/// Basis of observed factors (and the constant) partialled out of `Z`.
fn observed_basis(y_eff: &DMatrix<f64>, intercept: bool) -> Result<DMatrix<f64>> {
    let mut basis = y_eff.clone();
    if intercept {
        let k = basis.ncols();
        basis = basis.insert_column(k, 1.0);
    }
    orthonormal_basis(&basis)
}

/// Removes observed factors and then `k_f` estimated latent factors from
/// each lag of the semi-endogenous regressors.
pub fn defactor_regressors(
    z: &SemiEndogenousSet,
    y: &DMatrix<f64>,
    window: SampleWindow,
    zeta: usize,
    k_f: FactorCount,
    partial_intercept: bool,
) -> Result<Defactored> {
    if zeta > window.start {
        return Err(Error::TauTooLarge {
            tau: zeta,
            len: window.start,
        });
    }
    let t_eff = window.len;
    let qy = observed_basis(&window.rows(y), partial_intercept)?;
    let mut k_used = None;
    let mut factors = Vec::with_capacity(zeta + 1);
    let mut per_lag: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(zeta + 1);
    for tau in 0..=zeta {
        let raw: Vec<DMatrix<f64>> = z.blocks.iter().map(|b| window.lagged_rows(b, tau)).collect();
        let w: Vec<DMatrix<f64>> = raw.iter().map(|b| residualize(&qy, b)).collect();
        let k = match k_used {
            Some(k) => k,
            None => {
                let k = match k_f {
                    FactorCount::Fixed(0) => 0,
                    requested => {
                        let cov = pooled_covariance(&w)?;
                        let raw_scale = pooled_covariance(&raw)?.trace();
                        if !(cov.trace() > 1e-12 * raw_scale) {
                            return Err(Error::FactorCountZero);
                        }
                        match requested {
                            FactorCount::Fixed(k) => k,
                            FactorCount::Auto { k_max } => {
                                let probe = extract_factors(&cov, 1)?;
                                let k_max = k_max.min(t_eff.saturating_sub(2)).max(1);
                                eigenvalue_ratio_count(&probe.spectrum, k_max)?
                            }
                        }
                    }
                };
                k_used = Some(k);
                k
            }
        };
        if k == 0 {
            factors.push(FactorEstimate::empty(t_eff));
            per_lag.push(w);
            continue;
        }
        let cov = pooled_covariance(&w)?;
        if !(cov.trace() > 0.0) {
            return Err(Error::FactorCountZero);
        }
        let f = extract_factors(&cov, k)?;
        let q = f.orthonormal();
        per_lag.push(w.iter().map(|b| residualize(&q, b)).collect());
        factors.push(f);
    }
    let n = z.blocks.len();
    let blocks = (0..n)
        .map(|i| {
            let parts: Vec<&DMatrix<f64>> = per_lag.iter().map(|lag| &lag[i]).collect();
            hstack(&parts)
        })
        .collect();
    Ok(Defactored {
        window,
        k_f: k_used.unwrap_or(0),
        factors,
        blocks,
    })
}

/// Instrument matrix for one unit.
#[derive(Clone, Debug)]
pub struct InstrumentMatrix {
    /// `T_eff × K_iv`, layout `[defactored Z lags, Y, Y₋₁, 1]`.
    pub matrix: DMatrix<f64>,
    pub zeta: usize,
    pub k_z: usize,
    pub k_y: usize,
    pub intercept: bool,
}

impl InstrumentMatrix {
    pub fn k_iv(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Instrument count for the given dimensions, excluding the intercept.
pub fn instrument_count(k_z: usize, k_y: usize, zeta: usize) -> usize {
    k_z * (zeta + 1) + 2 * k_y
}

/// Assembles `[defactored block, Y, Y₋₁(, 1)]` for every unit.
pub fn build_instruments(
    defactored: &Defactored,
    k_z: usize,
    y: &DMatrix<f64>,
    zeta: usize,
    k_x: usize,
    intercept: bool,
) -> Result<Vec<InstrumentMatrix>> {
    let k_y = y.ncols();
    let k_iv = instrument_count(k_z, k_y, zeta);
    if k_iv < k_x + k_y {
        return Err(Error::OrderConditionViolated {
            instruments: k_iv,
            regressors: k_x + k_y,
        });
    }
    let window = defactored.window;
    if k_y > 0 && window.start == 0 {
        return Err(Error::SampleTooShort(
            "lagged observed factors need one leading period".into(),
        ));
    }
    let y0 = window.rows(y);
    let y1 = if k_y > 0 {
        window.lagged_rows(y, 1)
    } else {
        DMatrix::zeros(window.len, 0)
    };
    let ones = DMatrix::from_element(window.len, usize::from(intercept), 1.0);
    defactored
        .blocks
        .iter()
        .map(|b| {
            if b.ncols() != k_z * (zeta + 1) {
                return Err(Error::DimensionMismatch(format!(
                    "defactored block has {} columns, expected {}",
                    b.ncols(),
                    k_z * (zeta + 1)
                )));
            }
            Ok(InstrumentMatrix {
                matrix: hstack(&[b, &y0, &y1, &ones]),
                zeta,
                k_z,
                k_y,
                intercept,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IvDiagnostics {
    pub t_eff: usize,
    pub min_singular_a: f64,
    pub condition_b: f64,
    /// Ridge added to the diagonal of `B`, 0 when none was needed.
    pub jitter: f64,
    pub gmm_objective: f64,
}

#[derive(Clone, Debug)]
pub struct UnitIvFit {
    pub theta: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// `r_i − C_i θ̂` on the untransformed effective sample.
    pub residuals: DVector<f64>,
    pub diagnostics: IvDiagnostics,
}

impl UnitIvFit {
    pub fn stderr(&self) -> DVector<f64> {
        self.covariance.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

/// Sample moments `A = Z̃'C̃/T`, `B = Z̃'Z̃/T`, `c = Z̃'r̃/T` after projecting
/// out the latent factors.
#[derive(Clone, Debug)]
pub struct IvMoments {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub jitter: f64,
    pub condition_b: f64,
    z_t: DMatrix<f64>,
    c_t: DMatrix<f64>,
    r_t: DVector<f64>,
    b_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl IvMoments {
    pub fn new(
        r: &DVector<f64>,
        c: &DMatrix<f64>,
        z: &DMatrix<f64>,
        factors: &FactorEstimate,
    ) -> Result<Self> {
        let t = r.len();
        if c.nrows() != t || z.nrows() != t || factors.factors.nrows() != t && factors.k() > 0 {
            return Err(Error::DimensionMismatch(format!(
                "outcome {t}, regressors {}, instruments {}, factors {} rows",
                c.nrows(),
                z.nrows(),
                factors.factors.nrows()
            )));
        }
        if t <= z.ncols() {
            return Err(Error::DegreesOfFreedomExhausted {
                observations: t,
                parameters: z.ncols(),
            });
        }
        if z.ncols() < c.ncols() {
            return Err(Error::OrderConditionViolated {
                instruments: z.ncols(),
                regressors: c.ncols(),
            });
        }
        let q = factors.orthonormal();
        let z_t = residualize(&q, z);
        let c_t = residualize(&q, c);
        let r_t = residualize_vec(&q, r);
        let tf = t as f64;
        let a = z_t.tr_mul(&c_t) / tf;
        let mut b = z_t.tr_mul(&z_t) / tf;
        b = (&b + b.transpose()) * 0.5;
        let cvec = z_t.tr_mul(&r_t) / tf;
        let condition_b = spd_condition(&b);
        if !(condition_b <= MAX_CONDITION) {
            return Err(Error::SingularWeighting {
                condition: condition_b,
            });
        }
        let mut jitter = 0.0;
        if condition_b > JITTER_CONDITION {
            jitter = 1e-10 * b.trace() / b.nrows() as f64;
            for j in 0..b.nrows() {
                b[(j, j)] += jitter;
            }
        }
        let b_chol = b.clone().cholesky().ok_or(Error::SingularWeighting {
            condition: condition_b,
        })?;
        Ok(Self {
            a,
            b,
            c: cvec,
            jitter,
            condition_b,
            z_t,
            c_t,
            r_t,
            b_chol,
        })
    }

    /// `(c − Aθ)' B⁻¹ (c − Aθ)`.
    pub fn gmm_objective(&self, theta: &DVector<f64>) -> f64 {
        let g = &self.c - &self.a * theta;
        g.dot(&self.b_chol.solve(&g))
    }
}

/// Unit-specific IV/GMM fit with the two-step-free weighting `B⁻¹`.
pub fn fit_unit_iv(
    r: &DVector<f64>,
    c: &DMatrix<f64>,
    z: &DMatrix<f64>,
    factors: &FactorEstimate,
) -> Result<UnitIvFit> {
    let m = IvMoments::new(r, c, z, factors)?;
    let t = r.len() as f64;
    let sv = m.a.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
    if ratio <= crate::linalg::RANK_TOL {
        return Err(Error::RankDeficientA { ratio });
    }
    let binv_a = m.b_chol.solve(&m.a);
    let h = m.a.tr_mul(&binv_a);
    let h_chol = h.clone().cholesky().ok_or(Error::RankDeficientA { ratio })?;
    let h_inv = h_chol.inverse();
    let theta = &h_inv * binv_a.tr_mul(&m.c);

    let u_t = &m.r_t - &m.c_t * &theta;
    let k = m.z_t.ncols();
    let mut sigma = DMatrix::zeros(k, k);
    for (s, row) in m.z_t.row_iter().enumerate() {
        let row = row.transpose();
        sigma.ger(u_t[s] * u_t[s] / t, &row, &row, 1.0);
    }
    let bread = &h_inv * binv_a.transpose();
    let mut covariance = &bread * sigma * bread.transpose() / t;
    covariance = (&covariance + covariance.transpose()) * 0.5;

    let residuals = r - c * &theta;
    let diagnostics = IvDiagnostics {
        t_eff: r.len(),
        min_singular_a: smin,
        condition_b: m.condition_b,
        jitter: m.jitter,
        gmm_objective: m.gmm_objective(&theta),
    };
    Ok(UnitIvFit {
        theta,
        covariance,
        residuals,
        diagnostics,
    })
}

/// Stage-1 output for the whole panel.
#[derive(Clone, Debug)]
pub struct Stage1Result {
    pub unit_ids: Vec<String>,
    pub param_names: Vec<String>,
    pub fits: Vec<UnitIvFit>,
    pub window: SampleWindow,
    pub dates: Vec<NaiveDate>,
    pub k_f: usize,
    pub k_iv: usize,
    pub factors: Vec<FactorEstimate>,
}

impl Stage1Result {
    /// Effective number of panel observations.
    pub fn nt(&self) -> usize {
        self.fits.len() * self.window.len
    }

    /// N×T_eff residual matrix.
    pub fn residual_matrix(&self) -> DMatrix<f64> {
        let n = self.fits.len();
        DMatrix::from_fn(n, self.window.len, |i, t| self.fits[i].residuals[t])
    }

    pub fn thetas(&self) -> Vec<DVector<f64>> {
        self.fits.iter().map(|f| f.theta.clone()).collect()
    }

    /// Writes `unit,param,estimate,stderr`.
    pub fn write_coefficients<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["unit", "param", "estimate", "stderr"])?;
        for (id, fit) in self.unit_ids.iter().zip(&self.fits) {
            let se = fit.stderr();
            for (j, name) in self.param_names.iter().enumerate() {
                wtr.write_record([
                    id.as_str(),
                    name.as_str(),
                    &format!("{:.10e}", fit.theta[j]),
                    &format!("{:.10e}", se[j]),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Writes per-unit fit diagnostics.
    pub fn write_diagnostics<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "unit",
            "t_eff",
            "min_singular_a",
            "condition_b",
            "jitter",
            "gmm_objective",
            "residual_sd",
        ])?;
        for (id, fit) in self.unit_ids.iter().zip(&self.fits) {
            let d = &fit.diagnostics;
            let n = fit.residuals.len() as f64;
            let m = fit.residuals.mean();
            let sd = (fit.residuals.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            wtr.write_record([
                id.clone(),
                d.t_eff.to_string(),
                format!("{:.6e}", d.min_singular_a),
                format!("{:.6e}", d.condition_b),
                format!("{:.6e}", d.jitter),
                format!("{:.6e}", d.gmm_objective),
                format!("{:.6e}", sd),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Regressor matrix `C_i = [r₋₁, X_i, Y(, 1)]` on the effective sample.
pub fn regressor_matrix(
    panel: &PanelDataset,
    unit: usize,
    spec: &ModelSpec,
    y: &DMatrix<f64>,
    window: SampleWindow,
    intercept: bool,
) -> Result<DMatrix<f64>> {
    let mut parts = Vec::new();
    let lagged;
    if spec.outcome_lag {
        let col = panel.outcome.row(unit).transpose();
        lagged = window.lagged_rows(&DMatrix::from_column_slice(panel.t(), 1, col.as_slice()), 1);
        parts.push(lagged);
    }
    parts.push(window.rows(&panel.unit_columns(unit, &spec.regressors)?));
    parts.push(window.rows(y));
    if intercept {
        parts.push(DMatrix::from_element(window.len, 1, 1.0));
    }
    let refs: Vec<&DMatrix<f64>> = parts.iter().collect();
    Ok(hstack(&refs))
}

/// Runs defactoring, instrument construction and the per-unit fits.
pub fn stage1_run(
    panel: &PanelDataset,
    observed: &ObservedFactors,
    spec: &ModelSpec,
    config: &Stage1Config,
) -> Result<Stage1Result> {
    panel.validate()?;
    if spec.semi_endogenous.is_empty() {
        return Err(Error::InvalidConfig("no semi-endogenous variables".into()));
    }
    let observed = observed.align_to(&panel.dates)?;
    let y = &observed.values;
    let k_y = observed.k();
    let k_x = spec.k_x();
    let window = trim_common(
        panel.t(),
        config.zeta,
        usize::from(spec.outcome_lag),
        k_x,
        k_y,
        k_y > 0,
    )?;
    let z = SemiEndogenousSet::from_panel(panel, &spec.semi_endogenous)?;
    let k_iv = instrument_count(z.k(), k_y, config.zeta) + usize::from(config.intercept);
    if k_iv < k_x + k_y + usize::from(config.intercept) {
        return Err(Error::OrderConditionViolated {
            instruments: k_iv,
            regressors: k_x + k_y + usize::from(config.intercept),
        });
    }
    if window.len <= k_iv {
        return Err(Error::SampleTooShort(format!(
            "{} effective periods for {k_iv} instruments",
            window.len
        )));
    }
    let defactored = defactor_regressors(&z, y, window, config.zeta, config.k_f, config.intercept)?;
    let instruments = build_instruments(&defactored, z.k(), y, config.zeta, k_x, config.intercept)?;
    let f0 = &defactored.factors[0];

    let results: Vec<Result<UnitIvFit>> = (0..panel.n())
        .into_par_iter()
        .map(|i| {
            let r = DVector::from_iterator(
                window.len,
                window.slice(panel.outcome.row(i).transpose().as_slice()).iter().copied(),
            );
            let c = regressor_matrix(panel, i, spec, y, window, config.intercept)?;
            fit_unit_iv(&r, &c, &instruments[i].matrix, f0)
        })
        .collect();
    let mut fits = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (i, res) in results.into_iter().enumerate() {
        match res {
            Ok(f) => fits.push(f),
            Err(e) => failures.push(Error::Unit {
                unit: panel.unit_ids[i].clone(),
                source: Box::new(e),
            }),
        }
    }
    if !failures.is_empty() {
        return Err(Error::UnitFailures(failures));
    }

    let mut param_names = Vec::new();
    if spec.outcome_lag {
        param_names.push("lag_outcome".to_string());
    }
    param_names.extend(spec.regressors.iter().cloned());
    param_names.extend(observed.names.iter().cloned());
    if config.intercept {
        param_names.push("intercept".to_string());
    }
    Ok(Stage1Result {
        unit_ids: panel.unit_ids.clone(),
        param_names,
        fits,
        window,
        dates: window.slice(&panel.dates).to_vec(),
        k_f: defactored.k_f,
        k_iv,
        factors: defactored.factors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn instrument_counts() {
        assert_eq!(instrument_count(2, 10, 5), 32);
        assert_eq!(instrument_count(2, 10, 1), 24);
    }

    #[test]
    fn order_condition() {
        let window = SampleWindow { start: 0, len: 10 };
        let d = Defactored {
            window,
            k_f: 0,
            factors: vec![FactorEstimate::empty(10)],
            blocks: vec![DMatrix::zeros(10, 1); 2],
        };
        let y = DMatrix::zeros(10, 0);
        assert!(matches!(
            build_instruments(&d, 1, &y, 0, 3, false),
            Err(Error::OrderConditionViolated { instruments: 1, regressors: 3 })
        ));
    }

    #[test]
    fn noise_free_fit_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = 50;
        let z = DMatrix::from_fn(t, 6, |_, _| rng.sample(StandardNormal));
        let c = DMatrix::from_fn(t, 3, |s, j| z[(s, j)] + 0.5 * z[(s, j + 3)]);
        let theta = DVector::from_vec(vec![0.5, 1.0, -2.0]);
        let r = &c * &theta;
        let fit = fit_unit_iv(&r, &c, &z, &FactorEstimate::empty(t)).unwrap();
        assert_abs_diff_eq!(fit.theta, theta, epsilon = 1e-8);
    }

    #[test]
    fn factor_count_parsing() {
        assert_eq!("auto".parse::<FactorCount>().unwrap(), FactorCount::Auto { k_max: 8 });
        assert_eq!("auto:3".parse::<FactorCount>().unwrap(), FactorCount::Auto { k_max: 3 });
        assert_eq!("2".parse::<FactorCount>().unwrap(), FactorCount::Fixed(2));
        assert!("two".parse::<FactorCount>().is_err());
    }

    #[test]
    fn degenerate_z_has_no_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = 30;
        let y = DMatrix::from_fn(t, 2, |_, _| rng.sample(StandardNormal));
        let blocks = (0..4)
            .map(|i| &y * DMatrix::from_fn(2, 1, |a, _| (i + a) as f64 + 1.0))
            .collect();
        let z = SemiEndogenousSet::new(blocks, vec!["z".into()]).unwrap();
        let window = SampleWindow { start: 1, len: t - 1 };
        assert!(matches!(
            defactor_regressors(&z, &y, window, 0, FactorCount::Fixed(1), false),
            Err(Error::FactorCountZero)
        ));
    }
}
