//! Mean Group aggregation of unit-specific coefficients.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct MeanGroupResult {
    pub label: String,
    pub members: Vec<String>,
    pub mean: DVector<f64>,
    /// Dispersion `Σ̂_η` of the unit coefficients.
    pub sigma_eta: DMatrix<f64>,
    /// `Σ̂_η / N`, the covariance of the mean.
    pub covariance: DMatrix<f64>,
    pub stderr: DVector<f64>,
}

impl MeanGroupResult {
    pub fn n(&self) -> usize {
        self.members.len()
    }

    pub fn z(&self) -> DVector<f64> {
        self.mean.zip_map(&self.stderr, |m, s| if s > 0.0 { m / s } else { 0.0 })
    }

    pub fn pvalues(&self) -> DVector<f64> {
        self.z().map(normal_two_sided)
    }
}

pub fn normal_two_sided(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

/// Cross-sectional mean and dispersion of `thetas`.
pub fn mean_group(thetas: &[DVector<f64>], members: &[String], label: &str) -> Result<MeanGroupResult> {
    let n = thetas.len();
    if n < 2 {
        return Err(Error::GroupTooSmall {
            label: label.to_string(),
            size: n,
        });
    }
    if members.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} member labels for {n} coefficient vectors",
            members.len()
        )));
    }
    let k = thetas[0].len();
    if thetas.iter().any(|t| t.len() != k) {
        return Err(Error::DimensionMismatch("coefficient vectors differ in length".into()));
    }
    let mut mean = DVector::zeros(k);
    for t in thetas {
        mean += t;
    }
    mean /= n as f64;
    let mut sigma_eta = DMatrix::zeros(k, k);
    for t in thetas {
        let d = t - &mean;
        sigma_eta.ger(1.0, &d, &d, 1.0);
    }
    sigma_eta /= (n - 1) as f64;
    let covariance = &sigma_eta / n as f64;
    let stderr = covariance.diagonal().map(|v| v.max(0.0).sqrt());
    Ok(MeanGroupResult {
        label: label.to_string(),
        members: members.to_vec(),
        mean,
        sigma_eta,
        covariance,
        stderr,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupDifference {
    pub difference: DVector<f64>,
    pub z: DVector<f64>,
    pub pvalue: DVector<f64>,
}

/// Unpaired z-test of equal means between two disjoint groups.
pub fn group_difference(a: &MeanGroupResult, b: &MeanGroupResult) -> Result<GroupDifference> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::DimensionMismatch("groups have different parameter counts".into()));
    }
    let members: HashSet<&String> = a.members.iter().collect();
    if b.members.iter().any(|m| members.contains(m)) {
        return Err(Error::OverlappingGroups(a.label.clone(), b.label.clone()));
    }
    let difference = &a.mean - &b.mean;
    let z = DVector::from_fn(difference.len(), |j, _| {
        let se = (a.stderr[j].powi(2) + b.stderr[j].powi(2)).sqrt();
        if se > 0.0 {
            difference[j] / se
        } else if difference[j] == 0.0 {
            0.0
        } else {
            difference[j].signum() * f64::INFINITY
        }
    });
    let pvalue = z.map(normal_two_sided);
    Ok(GroupDifference { difference, z, pvalue })
}

/// One-tailed significance stars from a two-sided p-value, with the
/// alternative taken in the direction of the estimate.
pub fn stars(two_sided_p: f64) -> &'static str {
    let p = two_sided_p / 2.0;
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.1 {
        "*"
    } else {
        ""
    }
}

/// Mean Group estimates side by side, one column per group.
#[derive(Clone, Debug)]
pub struct MgTable {
    pub param_names: Vec<String>,
    pub columns: Vec<MeanGroupResult>,
    /// Time periods per unit, for the NT row.
    pub periods: usize,
}

impl MgTable {
    /// Writes `param,stat,<group...>` with estimate, stderr and stars rows,
    /// followed by `N` and `NT`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["param".to_string(), "stat".to_string()];
        header.extend(self.columns.iter().map(|c| c.label.clone()));
        wtr.write_record(&header)?;
        for (j, name) in self.param_names.iter().enumerate() {
            for stat in ["estimate", "stderr", "stars"] {
                let mut row = vec![name.clone(), stat.to_string()];
                for c in &self.columns {
                    row.push(match stat {
                        "estimate" => format!("{:.10e}", c.mean[j]),
                        "stderr" => format!("{:.10e}", c.stderr[j]),
                        _ => stars(c.pvalues()[j]).to_string(),
                    });
                }
                wtr.write_record(&row)?;
            }
        }
        for (stat, f) in [("N", 1usize), ("NT", self.periods)] {
            let mut row = vec![String::new(), stat.to_string()];
            row.extend(self.columns.iter().map(|c| (c.n() * f).to_string()));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Aligned markdown: estimate with stars, standard error in parentheses
    /// on the following row.
    pub fn to_markdown(&self) -> String {
        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut header = vec![String::new()];
        header.extend(self.columns.iter().map(|c| c.label.clone()));
        rows.push(header);
        for (j, name) in self.param_names.iter().enumerate() {
            let mut est = vec![name.clone()];
            let mut se = vec![String::new()];
            for c in &self.columns {
                est.push(format!("{:.4}{}", c.mean[j], stars(c.pvalues()[j])));
                se.push(format!("({:.4})", c.stderr[j]));
            }
            rows.push(est);
            rows.push(se);
        }
        let mut n = vec!["N".to_string()];
        let mut nt = vec!["NT".to_string()];
        for c in &self.columns {
            n.push(c.n().to_string());
            nt.push((c.n() * self.periods).to_string());
        }
        rows.push(n);
        rows.push(nt);
        render_markdown(&rows)
    }
}

/// Renders rows as a pipe table; the first row is the header.
pub fn render_markdown(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let width: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0).max(3))
        .collect();
    let line = |r: &Vec<String>| {
        let cells: Vec<String> = (0..cols)
            .map(|c| {
                let s = r.get(c).map(String::as_str).unwrap_or("");
                if c == 0 {
                    format!("{s:<w$}", w = width[c])
                } else {
                    format!("{s:>w$}", w = width[c])
                }
            })
            .collect();
        format!("| {} |\n", cells.join(" | "))
    };
    let mut out = String::new();
    if let Some(first) = rows.first() {
        out.push_str(&line(first));
        let sep: Vec<String> = (0..cols)
            .map(|c| {
                if c == 0 {
                    format!(":{}", "-".repeat(width[c] - 1))
                } else {
                    format!("{}:", "-".repeat(width[c] - 1))
                }
            })
            .collect();
        out.push_str(&format!("| {} |\n", sep.join(" | ")));
        for r in &rows[1..] {
            out.push_str(&line(r));
        }
    }
    out
}
