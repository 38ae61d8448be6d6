//! High-dimensional variable selection: Multiple Testing Boosting and the
//! pooled and individual Lasso baselines.

mod lasso;
mod mtb;

pub use lasso::{
    coordinate_descent_lasso, coordinate_descent_lasso_with, individual_lasso, individual_lasso_with, lasso_cv, lasso_cv_panel, lasso_objective, pooled_lasso, pooled_lasso_with,
    soft_threshold, CvLassoFit, CvOptions, FoldPlan, FoldScheme, LassoOptions, LassoSolution, StopRule, Standardized,
};
pub use mtb::{mtb_select, mtb_threshold, MtbConfig, Reference, TStat};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Candidate predictors, one per column.
#[derive(Clone, Debug)]
pub struct CandidatePool {
    matrix: DMatrix<f64>,
    names: Vec<String>,
}

impl CandidatePool {
    pub fn new(matrix: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        let (t, n) = matrix.shape();
        if n == 0 {
            return Err(Error::EmptyPool);
        }
        if names.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} names for {n} candidates",
                names.len()
            )));
        }
        if t < 5 {
            return Err(Error::SampleTooShort(format!(
                "candidate pool has {t} periods; at least 5 are required"
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("candidate pool has non-finite entries".into()));
        }
        for (j, col) in matrix.column_iter().enumerate() {
            if col.iter().all(|v| *v == 0.0) {
                return Err(Error::Validation(format!(
                    "candidate {} is identically zero",
                    names[j]
                )));
            }
        }
        Ok(Self { matrix, names })
    }

    /// Pool with generated names `z1..zn`.
    pub fn unnamed(matrix: DMatrix<f64>) -> Result<Self> {
        let names = (1..=matrix.ncols()).map(|j| format!("z{j}")).collect();
        Self::new(matrix, names)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn periods(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn size(&self) -> usize {
        self.matrix.ncols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "PCA-MTB")]
    PcaMtb,
    #[serde(rename = "p-Lasso")]
    PooledLasso,
    #[serde(rename = "i-Lasso")]
    IndividualLasso,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::PcaMtb, Method::PooledLasso, Method::IndividualLasso];

    pub fn label(self) -> &'static str {
        match self {
            Method::PcaMtb => "PCA-MTB",
            Method::PooledLasso => "p-Lasso",
            Method::IndividualLasso => "i-Lasso",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pca-mtb" | "mtb" => Ok(Method::PcaMtb),
            "p-lasso" | "pooled" => Ok(Method::PooledLasso),
            "i-lasso" | "individual" => Ok(Method::IndividualLasso),
            _ => Err(Error::InvalidConfig(format!("unknown method {s:?}"))),
        }
    }
}

/// One accepted step of a sequential selection.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionStep {
    pub candidate: usize,
    pub tstat: f64,
    pub pvalue: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    pub method: Method,
    /// Selected candidate indices, in selection order for MTB and ascending
    /// for the Lasso methods.
    pub selected: Vec<usize>,
    /// Accepted MTB steps; empty for the Lasso methods.
    pub steps: Vec<SelectionStep>,
    /// Per-candidate score: final coefficient for p-Lasso, selection
    /// frequency for i-Lasso, empty for MTB.
    pub scores: Vec<f64>,
}

impl SelectionResult {
    /// Writes `step,candidate,name,tstat,pvalue,threshold`.
    pub fn write_report<W: std::io::Write>(&self, names: &[String], w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["step", "candidate", "name", "tstat", "pvalue", "threshold"])?;
        for (k, s) in self.steps.iter().enumerate() {
            wtr.write_record([
                (k + 1).to_string(),
                s.candidate.to_string(),
                names.get(s.candidate).cloned().unwrap_or_default(),
                format!("{:.10e}", s.tstat),
                format!("{:.10e}", s.pvalue),
                format!("{:.10e}", s.threshold),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}
