use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;

use super::{CandidatePool, Method, SelectionResult, SelectionStep};
use crate::error::{Error, Result};

/// Flavour of the coefficient t-statistic used in each MTB regression.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TStat {
    Classical,
    Hc0,
    #[default]
    Hc1,
    Hc2,
    Hc3,
}

/// Reference distribution for converting t-statistics to p-values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    #[default]
    Normal,
    StudentT,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MtbConfig {
    pub p_val: f64,
    pub c1: f64,
    pub delta1: f64,
    /// Defaults to `min(T_m / 2, n_c)` when unset.
    pub max_steps: Option<usize>,
    pub tstat: TStat,
    pub reference: Reference,
    pub intercept: bool,
}

impl Default for MtbConfig {
    fn default() -> Self {
        Self {
            p_val: 0.05,
            c1: 1.0,
            delta1: 1.5,
            max_steps: None,
            tstat: TStat::Hc1,
            reference: Reference::Normal,
            intercept: true,
        }
    }
}

impl MtbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_val > 0.0 && self.p_val < 1.0) {
            return Err(Error::InvalidConfig(format!("p_val {} not in (0,1)", self.p_val)));
        }
        if !(self.c1 > 0.0) {
            return Err(Error::InvalidConfig(format!("c1 {} must be positive", self.c1)));
        }
        if !(self.delta1 > 1.0) {
            return Err(Error::InvalidConfig(format!("delta1 {} must exceed 1", self.delta1)));
        }
        Ok(())
    }
}

/// p-value threshold at pass `k` (1-based) for a pool of `n_c` candidates.
pub fn mtb_threshold(config: &MtbConfig, n_c: usize, k: usize) -> f64 {
    let remaining = (n_c + 1).saturating_sub(k).max(1) as f64;
    config.p_val / (config.c1 * remaining.powf(config.delta1 - 1.0))
}

fn two_sided_p(t: f64, reference: Reference, df: f64) -> f64 {
    let a = t.abs();
    if a.is_infinite() {
        return 0.0;
    }
    match reference {
        Reference::Normal => erfc(a / std::f64::consts::SQRT_2),
        Reference::StudentT => {
            let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
            2.0 * dist.sf(a)
        }
    }
}

/// Forward selection of `pool` columns explaining `target`.
///
/// Each pass partials the retained regressors (and the intercept) out of the
/// target and the remaining candidates, so the candidate t-statistics are
/// those of the full regression by Frisch–Waugh–Lovell.
pub fn mtb_select(
    target: &DVector<f64>,
    pool: &CandidatePool,
    config: &MtbConfig,
) -> Result<SelectionResult> {
    config.validate()?;
    let z = pool.matrix();
    let (t, n_c) = z.shape();
    if target.len() != t {
        return Err(Error::DimensionMismatch(format!(
            "target has {} periods, pool has {t}",
            target.len()
        )));
    }
    let max_steps = config.max_steps.unwrap_or((t / 2).min(n_c)).min(n_c);
    let tf = t as f64;

    let mut y = target.clone();
    let mut zt: DMatrix<f64> = z.clone();
    let mut leverage = DVector::<f64>::zeros(t);
    let mut fixed = 0usize;
    if config.intercept {
        let ym = y.mean();
        y.add_scalar_mut(-ym);
        for mut col in zt.column_iter_mut() {
            let m = col.mean();
            col.add_scalar_mut(-m);
        }
        leverage.fill(1.0 / tf);
        fixed = 1;
    }
    let orig_ss: Vec<f64> = z.column_iter().map(|c| c.norm_squared()).collect();

    let mut active = vec![true; n_c];
    let mut selected = Vec::new();
    let mut steps = Vec::new();
    let mut e = DVector::<f64>::zeros(t);

    while selected.len() < max_steps {
        if t <= selected.len() + 2 {
            return Err(Error::DegreesOfFreedomExhausted {
                observations: t,
                parameters: selected.len() + 2,
            });
        }
        let params = fixed + selected.len() + 1;
        if t <= params {
            return Err(Error::DegreesOfFreedomExhausted {
                observations: t,
                parameters: params,
            });
        }
        let df = (t - params) as f64;
        let yy = y.norm_squared();
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n_c {
            if !active[j] {
                continue;
            }
            let col = zt.column(j);
            let ss = col.norm_squared();
            if ss <= 1e-12 * orig_ss[j] || ss == 0.0 {
                continue;
            }
            let b = col.dot(&y) / ss;
            let var = match config.tstat {
                TStat::Classical => ((yy - b * b * ss).max(0.0) / df) / ss,
                flavour => {
                    e.copy_from(&y);
                    e.axpy(-b, &col, 1.0);
                    let mut meat = 0.0;
                    for s in 0..t {
                        let w = col[s] * col[s] * e[s] * e[s];
                        meat += match flavour {
                            TStat::Hc2 => w / (1.0 - leverage[s] - col[s] * col[s] / ss).max(1e-12),
                            TStat::Hc3 => {
                                let h = (1.0 - leverage[s] - col[s] * col[s] / ss).max(1e-12);
                                w / (h * h)
                            }
                            _ => w,
                        };
                    }
                    let v = meat / (ss * ss);
                    if flavour == TStat::Hc1 {
                        v * tf / df
                    } else {
                        v
                    }
                }
            };
            let tstat = if var > 0.0 {
                b / var.sqrt()
            } else if b != 0.0 {
                b.signum() * f64::INFINITY
            } else {
                0.0
            };
            match best {
                Some((_, bt)) if tstat.abs() <= bt.abs() => {}
                _ => best = Some((j, tstat)),
            }
        }
        let Some((j, tstat)) = best else { break };
        let k = selected.len() + 1;
        let threshold = mtb_threshold(config, n_c, k);
        let pvalue = two_sided_p(tstat, config.reference, df);
        if !(pvalue <= threshold) {
            break;
        }
        steps.push(SelectionStep {
            candidate: j,
            tstat,
            pvalue,
            threshold,
        });
        selected.push(j);
        active[j] = false;

        let norm = zt.column(j).norm();
        let q = zt.column(j) / norm;
        let qy = q.dot(&y);
        y.axpy(-qy, &q, 1.0);
        let proj = q.tr_mul(&zt);
        zt.ger(-1.0, &q, &proj.transpose(), 1.0);
        for s in 0..t {
            leverage[s] += q[s] * q[s];
        }
    }

    Ok(SelectionResult {
        method: Method::PcaMtb,
        selected,
        steps,
        scores: Vec::new(),
    })
}
