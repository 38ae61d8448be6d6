//! Synthetic panels with known coefficients for end-to-end checks.
//!
//! Returns follow an AR(1) with heterogeneous slopes on illiquidity,
//! volatility and observed market factors. The error carries latent factors
//! `g`, which also drive the semi-endogenous variables (volume and
//! volatility). Illiquidity loads on the idiosyncratic return shock, so it
//! needs the volume instrument. Monthly proxies are noisy monthly means of
//! `g` plus unrelated series.

use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{BoundaryMonths, MonthIndex, MonthlyTable, ObservedFactors, PanelDataset};
use crate::stage1::ModelSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub units: usize,
    pub periods: usize,
    /// Observed market factors.
    pub k_y: usize,
    /// Latent factors shared by returns and the semi-endogenous variables.
    pub latent: usize,
    /// Unrelated monthly proxies added to the informative ones.
    pub extra_proxies: usize,
    pub factor_rho: f64,
    /// Mean AR coefficient; unit values are uniform within `± lag_spread`.
    pub lag_mean: f64,
    pub lag_spread: f64,
    /// Mean slopes on ILQ and VLT.
    pub beta_mean: [f64; 2],
    pub gamma_mean: f64,
    /// Standard deviation of the slope heterogeneity.
    pub slope_sd: f64,
    pub delta_mean: f64,
    pub delta_sd: f64,
    /// Loading of ILQ on the return shock.
    pub endogeneity: f64,
    pub proxy_noise_sd: f64,
    pub burn_in: usize,
    pub start: NaiveDate,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            units: 50,
            periods: 200,
            k_y: 2,
            latent: 2,
            extra_proxies: 8,
            factor_rho: 0.5,
            lag_mean: 0.3,
            lag_spread: 0.2,
            beta_mean: [0.5, 0.5],
            gamma_mean: 0.5,
            slope_sd: 0.3,
            delta_mean: 1.0,
            delta_sd: 0.5,
            endogeneity: 0.5,
            proxy_noise_sd: 0.05,
            burn_in: 50,
            start: NaiveDate::from_ymd_opt(2021, 1, 4).expect("valid date"),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.units < 2 || self.periods < 20 {
            return Err(Error::InvalidConfig(format!(
                "synthetic panel needs N >= 2 and T >= 20, got N={} T={}",
                self.units, self.periods
            )));
        }
        if self.latent == 0 {
            return Err(Error::InvalidConfig("at least one latent factor is required".into()));
        }
        if self.lag_mean.abs() + self.lag_spread >= 1.0 {
            return Err(Error::InvalidConfig("AR coefficients must stay inside (-1, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.factor_rho) {
            return Err(Error::InvalidConfig("factor_rho must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Population mean of the unit coefficients, in the Stage-1 parameter
    /// order `lag_outcome, ILQ, VLT, y1.., intercept`.
    pub fn theta_mean(&self) -> DVector<f64> {
        let mut v = vec![self.lag_mean, self.beta_mean[0], self.beta_mean[1]];
        v.extend(std::iter::repeat_n(self.gamma_mean, self.k_y));
        v.push(0.0);
        DVector::from_vec(v)
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            outcome_lag: true,
            regressors: vec!["ILQ".into(), "VLT".into()],
            semi_endogenous: vec!["VLM".into(), "VLT".into()],
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub panel: PanelDataset,
    pub factors: ObservedFactors,
    pub proxies: MonthlyTable,
    /// Per unit, true coefficients in Stage-1 parameter order.
    pub theta: Vec<DVector<f64>>,
    /// N×latent true loadings on `g`.
    pub delta: DMatrix<f64>,
    /// T×latent weekly latent factors.
    pub g: DMatrix<f64>,
    /// Names of the proxies that track `g`, in factor order.
    pub informative: Vec<String>,
}

fn ar1(rng: &mut ChaCha20Rng, t: usize, k: usize, rho: f64, burn: usize) -> DMatrix<f64> {
    let a = (1.0 - rho * rho).sqrt();
    let mut out = DMatrix::zeros(t, k);
    for j in 0..k {
        let mut x: f64 = rng.sample(StandardNormal);
        for s in 0..burn + t {
            let e: f64 = rng.sample(StandardNormal);
            x = rho * x + a * e;
            if s >= burn {
                out[(s - burn, j)] = x;
            }
        }
    }
    out
}

pub fn generate(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (n, t, ky, kg, burn) = (cfg.units, cfg.periods, cfg.k_y, cfg.latent, cfg.burn_in);
    let total = burn + t;
    let y_all = ar1(&mut rng, total, ky, cfg.factor_rho, 20);
    let g_all = ar1(&mut rng, total, kg, cfg.factor_rho, 20);
    let z = |rng: &mut ChaCha20Rng| -> f64 { rng.sample(StandardNormal) };

    let mut outcome = DMatrix::zeros(n, t);
    let mut covariates = Vec::with_capacity(n);
    let mut theta = Vec::with_capacity(n);
    let mut delta = DMatrix::zeros(n, kg);
    for i in 0..n {
        let rho_i = cfg.lag_mean + cfg.lag_spread * (2.0 * rng.random::<f64>() - 1.0);
        let b_ilq = cfg.beta_mean[0] + cfg.slope_sd * z(&mut rng);
        let b_vlt = cfg.beta_mean[1] + cfg.slope_sd * z(&mut rng);
        let gamma: Vec<f64> = (0..ky).map(|_| cfg.gamma_mean + cfg.slope_sd * z(&mut rng)).collect();
        for j in 0..kg {
            delta[(i, j)] = cfg.delta_mean + cfg.delta_sd * z(&mut rng);
        }
        // Loadings of VLM, VLT and ILQ on g and y.
        let lam: Vec<[f64; 3]> = (0..kg).map(|_| [1.0 + 0.5 * z(&mut rng), 1.0 + 0.5 * z(&mut rng), 0.5 + 0.25 * z(&mut rng)]).collect();
        let phi: Vec<[f64; 2]> = (0..ky).map(|_| [0.5 * z(&mut rng), 0.5 * z(&mut rng)]).collect();

        let mut block = DMatrix::zeros(t, 3);
        let mut r_prev = 0.0;
        for s in 0..total {
            let v1 = z(&mut rng);
            let v2 = z(&mut rng);
            let eps = z(&mut rng);
            let mut vlm = v1;
            let mut vlt = v2;
            let mut ilq = 0.8 * v1 + cfg.endogeneity * eps + 0.5 * z(&mut rng);
            let mut common = eps;
            for j in 0..kg {
                let gj = g_all[(s, j)];
                vlm += lam[j][0] * gj;
                vlt += lam[j][1] * gj;
                ilq += lam[j][2] * gj;
                common += delta[(i, j)] * gj;
            }
            let mut r = rho_i * r_prev + common;
            for k in 0..ky {
                let yk = y_all[(s, k)];
                vlm += phi[k][0] * yk;
                vlt += phi[k][1] * yk;
                r += gamma[k] * yk;
            }
            r += b_ilq * ilq + b_vlt * vlt;
            if s >= burn {
                let row = s - burn;
                outcome[(i, row)] = r;
                block[(row, 0)] = ilq;
                block[(row, 1)] = vlt;
                block[(row, 2)] = vlm;
            }
            r_prev = r;
        }
        covariates.push(block);
        let mut th = vec![rho_i, b_ilq, b_vlt];
        th.extend(gamma);
        th.push(0.0);
        theta.push(DVector::from_vec(th));
    }

    let dates: Vec<NaiveDate> = (0..t).map(|w| cfg.start + chrono::Duration::weeks(w as i64)).collect();
    let unit_ids: Vec<String> = (0..n).map(|i| format!("U{:03}", i + 1)).collect();
    let panel = PanelDataset::new(
        unit_ids,
        dates.clone(),
        outcome,
        covariates,
        vec!["ILQ".into(), "VLT".into(), "VLM".into()],
    )?;
    let y = y_all.rows(burn, t).into_owned();
    let g = g_all.rows(burn, t).into_owned();
    let factors = ObservedFactors::new(dates.clone(), y, (1..=ky).map(|k| format!("y{k}")).collect())?;

    let index = MonthIndex::build(&dates, BoundaryMonths::Keep)?;
    let tm = index.len();
    let mut values = DMatrix::zeros(tm, kg + cfg.extra_proxies);
    for j in 0..kg {
        let col: Vec<f64> = g.column(j).iter().copied().collect();
        let monthly = index.aggregate(&col, crate::panel::Aggregation::Mean);
        for (m, v) in monthly.iter().enumerate() {
            values[(m, j)] = v + cfg.proxy_noise_sd * z(&mut rng);
        }
    }
    let noise = ar1(&mut rng, tm, cfg.extra_proxies, cfg.factor_rho, 20);
    values.columns_mut(kg, cfg.extra_proxies).copy_from(&noise);
    let informative: Vec<String> = (1..=kg).map(|j| format!("proxy_g{j}")).collect();
    let mut names = informative.clone();
    names.extend((1..=cfg.extra_proxies).map(|j| format!("noise{j}")));
    let proxies = MonthlyTable {
        months: index.months,
        values,
        names,
    };
    Ok(SyntheticData {
        panel,
        factors,
        proxies,
        theta,
        delta,
        g,
        informative,
    })
}

impl SyntheticData {
    /// Writes `panel.csv`, `factors.csv`, `proxies.csv` and `groups.csv`
    /// (units split into two halves under scheme `half`).
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let p = &self.panel;
        let mut w = csv::Writer::from_path(dir.join("panel.csv"))?;
        let mut header = vec!["unit".to_string(), "date".into(), "outcome".into()];
        header.extend(p.covariate_names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..p.n() {
            for s in 0..p.t() {
                let mut row = vec![p.unit_ids[i].clone(), p.dates[s].to_string(), p.outcome[(i, s)].to_string()];
                row.extend(p.covariates[i].row(s).iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("factors.csv"))?;
        let mut header = vec!["date".to_string()];
        header.extend(self.factors.names.iter().cloned());
        w.write_record(&header)?;
        for (s, d) in self.factors.dates.iter().enumerate() {
            let mut row = vec![d.to_string()];
            row.extend(self.factors.values.row(s).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("proxies.csv"))?;
        let mut header = vec!["month".to_string()];
        header.extend(self.proxies.names.iter().cloned());
        w.write_record(&header)?;
        for (m, month) in self.proxies.months.iter().enumerate() {
            let mut row = vec![month.to_string()];
            row.extend(self.proxies.values.row(m).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;

        let mut f = std::fs::File::create(dir.join("groups.csv"))?;
        writeln!(f, "unit,scheme,label")?;
        let half = p.n() / 2;
        for (i, u) in p.unit_ids.iter().enumerate() {
            writeln!(f, "{u},half,{}", if i < half { "first" } else { "second" })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_determinism() {
        let cfg = SyntheticConfig {
            units: 5,
            periods: 60,
            ..Default::default()
        };
        let a = generate(&cfg, 7).unwrap();
        let b = generate(&cfg, 7).unwrap();
        assert_eq!(a.panel.outcome, b.panel.outcome);
        assert_eq!(a.panel.outcome.shape(), (5, 60));
        assert_eq!(a.theta[0].len(), cfg.theta_mean().len());
        assert_eq!(a.proxies.names.len(), 10);
    }
}
