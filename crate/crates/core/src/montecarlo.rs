//! Simulation harness for the selection step: data-generating process,
//! confusion-matrix metrics and the experiment grid.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selection::{
    individual_lasso_with, pooled_lasso_with, CandidatePool, CvOptions, Method, MtbConfig, SelectionResult, Standardized,
};
use crate::stage2::pca_mtb;

/// One design cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    /// Number of true signals.
    pub r: usize,
    /// Number of extra factors; the first `r` are pseudo-signals.
    pub n: usize,
    pub t: usize,
    pub units: usize,
    #[serde(default = "half")]
    pub rho: f64,
    #[serde(default = "half")]
    pub pi: f64,
    pub phi: f64,
}

fn half() -> f64 {
    0.5
}

impl DgpConfig {
    pub fn new(r: usize, n: usize, t: usize, units: usize, phi: f64) -> Self {
        Self {
            r,
            n,
            t,
            units,
            rho: 0.5,
            pi: 0.5,
            phi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::InvalidConfig(format!("rho {} not in [0,1)", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.pi) {
            return Err(Error::InvalidConfig(format!("pi {} not in [0,1]", self.pi)));
        }
        if self.r == 0 || self.n < self.r {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= r <= n, got r={} n={}",
                self.r, self.n
            )));
        }
        if self.t < 10 || self.units < 2 {
            return Err(Error::InvalidConfig(format!(
                "need T >= 10 and N >= 2, got T={} N={}",
                self.t, self.units
            )));
        }
        if !self.phi.is_finite() {
            return Err(Error::InvalidConfig("phi must be finite".into()));
        }
        Ok(())
    }

    pub fn pool_size(&self) -> usize {
        self.r + self.n
    }

    fn key(&self) -> u64 {
        let mut h = 0x243f_6a88_85a3_08d3u64;
        for v in [
            self.r as u64,
            self.n as u64,
            self.t as u64,
            self.units as u64,
            self.rho.to_bits(),
            self.pi.to_bits(),
            self.phi.to_bits(),
        ] {
            h = splitmix(h ^ v);
        }
        h
    }

    /// Generator for replication `rep`, independent of every other
    /// (cell, rep) pair and of execution order.
    pub fn rng(&self, root_seed: u64, rep: u64) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(splitmix(root_seed ^ self.key()));
        rng.set_stream(rep);
        rng
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One simulated data set.
#[derive(Clone, Debug)]
pub struct Dgp {
    /// N×T outcomes.
    pub u: DMatrix<f64>,
    /// T×r true signals.
    pub g: DMatrix<f64>,
    /// T×(r+n) candidate pool `(G, F)`.
    pub pool: DMatrix<f64>,
    /// N×r loadings.
    pub delta: DMatrix<f64>,
}

/// Draws signals, extra factors, loadings and outcomes.
///
/// Signals are unit-variance AR(1) processes started from their stationary
/// law. Pseudo-signal j shares a `√(1−π)` share of signal j's innovation, so
/// it equals `√(1−π) g_j + √π h_j` with `h_j` an independent unit AR(1); its
/// start is drawn from the same stationary law.
pub fn generate_dgp<R: Rng>(cfg: &DgpConfig, rng: &mut R) -> Result<Dgp> {
    cfg.validate()?;
    let (r, n, t, units) = (cfg.r, cfg.n, cfg.t, cfg.units);
    let a = (1.0 - cfg.rho * cfg.rho).sqrt();
    let (sp, sq) = (cfg.pi.sqrt(), (1.0 - cfg.pi).sqrt());
    let mut g = DMatrix::zeros(t, r);
    let mut f = DMatrix::zeros(t, n);
    let z = |rng: &mut R| -> f64 { rng.sample(StandardNormal) };
    for s in 0..t {
        for j in 0..r {
            let e = z(rng);
            g[(s, j)] = if s == 0 { e } else { cfg.rho * g[(s - 1, j)] + a * e };
        }
        for j in 0..n {
            let v = z(rng);
            f[(s, j)] = if j < r {
                if s == 0 {
                    sq * g[(0, j)] + sp * v
                } else {
                    let eps = (g[(s, j)] - cfg.rho * g[(s - 1, j)]) / a;
                    cfg.rho * f[(s - 1, j)] + a * (sp * v + sq * eps)
                }
            } else if s == 0 {
                v
            } else {
                cfg.rho * f[(s - 1, j)] + a * v
            };
        }
    }
    let half = 0.5f64.sqrt();
    let mut delta = DMatrix::zeros(units, r);
    for i in 0..units {
        let common = z(rng);
        for j in 0..r {
            delta[(i, j)] = cfg.phi + half * common + half * z(rng);
        }
    }
    let mut u = &delta * g.transpose();
    for i in 0..units {
        for s in 0..t {
            u[(i, s)] += z(rng);
        }
    }
    let mut pool = DMatrix::zeros(t, r + n);
    pool.columns_mut(0, r).copy_from(&g);
    pool.columns_mut(r, n).copy_from(&f);
    Ok(Dgp { u, g, pool, delta })
}

/// Confusion counts and derived selection metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub mcc: f64,
    pub f1: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub tdr: f64,
    pub fdr: f64,
    pub model_size: usize,
}

impl MetricReport {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let (tpf, fpf, tnf, fnf) = (tp as f64, fp as f64, tn as f64, fn_ as f64);
        let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
        let denom = (tpf + fpf) * (tpf + fnf) * (tnf + fpf) * (tnf + fnf);
        let mcc = if denom > 0.0 {
            (tpf * tnf - fpf * fnf) / denom.sqrt()
        } else {
            0.0
        };
        Self {
            tp,
            fp,
            tn,
            fn_,
            mcc,
            f1: ratio(2.0 * tpf, 2.0 * tpf + fpf + fnf),
            tpr: ratio(tpf, tpf + fnf),
            fpr: ratio(fpf, fpf + tnf),
            tdr: ratio(tpf, tpf + fpf),
            fdr: ratio(fpf, tpf + fpf),
            model_size: tp + fp,
        }
    }
}

/// Scores `selected` against the true set `{0, …, r−1}`.
pub fn score_selection(selected: &[usize], r: usize, pool_size: usize) -> Result<MetricReport> {
    if r > pool_size {
        return Err(Error::InvalidConfig(format!("{r} true signals in a pool of {pool_size}")));
    }
    let mut seen = vec![false; pool_size];
    for &j in selected {
        if j >= pool_size {
            return Err(Error::IndexOutOfRange {
                index: j,
                len: pool_size,
            });
        }
        seen[j] = true;
    }
    let tp = seen[..r].iter().filter(|s| **s).count();
    let fp = seen[r..].iter().filter(|s| **s).count();
    Ok(MetricReport::from_counts(tp, fp, pool_size - r - fp, r - tp))
}

/// Averages of each metric over replications.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MeanMetrics {
    pub mcc: f64,
    pub f1: f64,
    pub model_size: f64,
    pub tdr: f64,
    pub fdr: f64,
    pub tpr: f64,
    pub fpr: f64,
}

impl MeanMetrics {
    pub const NAMES: [&'static str; 7] = ["mcc", "f1", "model_size", "tdr", "fdr", "tpr", "fpr"];

    pub fn get(&self, name: &str) -> f64 {
        match name {
            "mcc" => self.mcc,
            "f1" => self.f1,
            "model_size" => self.model_size,
            "tdr" => self.tdr,
            "fdr" => self.fdr,
            "tpr" => self.tpr,
            "fpr" => self.fpr,
            _ => f64::NAN,
        }
    }

    /// Sequential mean in replication order.
    pub fn mean(reports: &[MetricReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let mut m = Self::default();
        for r in reports {
            m.mcc += r.mcc;
            m.f1 += r.f1;
            m.model_size += r.model_size as f64;
            m.tdr += r.tdr;
            m.fdr += r.fdr;
            m.tpr += r.tpr;
            m.fpr += r.fpr;
        }
        m.mcc /= n;
        m.f1 /= n;
        m.model_size /= n;
        m.tdr /= n;
        m.fdr /= n;
        m.tpr /= n;
        m.fpr /= n;
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSettings {
    pub reps: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub mtb: MtbConfig,
    pub cv: CvOptions,
    pub retain_fraction: f64,
}

impl Default for GridSettings {
    fn default() -> Self {
        Self {
            reps: 500,
            seed: 0,
            methods: Method::ALL.to_vec(),
            mtb: MtbConfig::default(),
            cv: CvOptions::default(),
            retain_fraction: 0.25,
        }
    }
}

/// Runs every requested method on one replication.
pub fn run_replication(cfg: &DgpConfig, rep: u64, settings: &GridSettings) -> Result<Vec<MetricReport>> {
    let mut rng = cfg.rng(settings.seed, rep);
    let dgp = generate_dgp(cfg, &mut rng)?;
    let pool = CandidatePool::unnamed(dgp.pool.clone())?;
    let needs_lasso = settings.methods.iter().any(|m| *m != Method::PcaMtb);
    let z = if needs_lasso { Some(Standardized::new(pool.matrix())?) } else { None };
    settings
        .methods
        .iter()
        .map(|m| {
            // Each method draws its folds from its own stream of the same
            // replication so results do not depend on which methods run.
            let mut fold_rng = cfg.rng(settings.seed ^ 0x5eed_f01d, rep * 4 + *m as u64);
            let sel: SelectionResult = match m {
                Method::PcaMtb => pca_mtb(&dgp.u, &pool, &settings.mtb)?.0,
                Method::PooledLasso => {
                    pooled_lasso_with(&dgp.u, z.as_ref().expect("standardised pool"), &settings.cv, &mut fold_rng)?
                }
                Method::IndividualLasso => individual_lasso_with(
                    &dgp.u,
                    z.as_ref().expect("standardised pool"),
                    settings.retain_fraction,
                    &settings.cv,
                    &mut fold_rng,
                )?,
            };
            score_selection(&sel.selected, cfg.r, cfg.pool_size())
        })
        .collect()
}

/// Mean metrics per cell and method.
#[derive(Clone, Debug)]
pub struct GridResult {
    pub cells: Vec<DgpConfig>,
    pub methods: Vec<Method>,
    pub reps: usize,
    /// `metrics[cell][method]`.
    pub metrics: Vec<Vec<MeanMetrics>>,
}

/// Runs all (cell, rep) pairs in parallel on the current rayon pool and
/// reduces them in a fixed order, so results do not depend on the number of
/// workers.
pub fn run_grid(cells: &[DgpConfig], settings: &GridSettings) -> Result<GridResult> {
    if settings.reps == 0 {
        return Err(Error::InvalidConfig("reps must be at least 1".into()));
    }
    if settings.methods.is_empty() {
        return Err(Error::InvalidConfig("no methods requested".into()));
    }
    for c in cells {
        c.validate()?;
    }
    let reps = settings.reps;
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..reps).map(move |r| (c, r))).collect();
    let out: Vec<Result<Vec<MetricReport>>> = jobs
        .par_iter()
        .map(|&(c, rep)| {
            run_replication(&cells[c], rep as u64, settings).map_err(|e| {
                let cell = &cells[c];
                e.context(format!(
                    "cell r={} phi={} T={} N={} n={} rep {rep}",
                    cell.r, cell.phi, cell.t, cell.units, cell.n
                ))
            })
        })
        .collect();
    let mut per_cell: Vec<Vec<Vec<MetricReport>>> = vec![vec![Vec::with_capacity(reps); settings.methods.len()]; cells.len()];
    for ((c, _), res) in jobs.iter().zip(out) {
        for (m, rep) in res?.into_iter().enumerate() {
            per_cell[*c][m].push(rep);
        }
    }
    Ok(GridResult {
        cells: cells.to_vec(),
        methods: settings.methods.clone(),
        reps,
        metrics: per_cell
            .iter()
            .map(|ms| ms.iter().map(|r| MeanMetrics::mean(r)).collect())
            .collect(),
    })
}

/// Named grids: `paper-r{2,5}[-phi{0,1}]`, `paper`, and `text-r{2,5}`.
pub fn preset(name: &str) -> Result<Vec<DgpConfig>> {
    let table = |r: usize, phis: &[f64]| {
        let mut out = Vec::new();
        for &phi in phis {
            for t in [25, 50, 100] {
                for n in [25, 50, 100] {
                    out.push(DgpConfig::new(r, n, t, t, phi));
                }
            }
        }
        out
    };
    let text = |r: usize| {
        let mut out = Vec::new();
        for phi in [1.0, 0.0] {
            for t in [50, 100, 200] {
                out.push(DgpConfig::new(r, t - r, t, t, phi));
            }
        }
        out
    };
    Ok(match name {
        "paper-r2-phi1" => table(2, &[1.0]),
        "paper-r2-phi0" => table(2, &[0.0]),
        "paper-r5-phi1" => table(5, &[1.0]),
        "paper-r5-phi0" => table(5, &[0.0]),
        "paper-r2" => table(2, &[1.0, 0.0]),
        "paper-r5" => table(5, &[1.0, 0.0]),
        "paper" => {
            let mut v = table(2, &[1.0, 0.0]);
            v.extend(table(5, &[1.0, 0.0]));
            v
        }
        "text-r2" => text(2),
        "text-r5" => text(5),
        other => return Err(Error::InvalidConfig(format!("unknown preset {other:?}"))),
    })
}

fn fmt_phi(phi: f64) -> String {
    if phi.fract() == 0.0 {
        format!("{}", phi as i64)
    } else {
        format!("{phi}")
    }
}

impl GridResult {
    fn distinct_n(&self) -> Vec<usize> {
        let mut ns: Vec<usize> = Vec::new();
        for c in &self.cells {
            if !ns.contains(&c.n) {
                ns.push(c.n);
            }
        }
        ns
    }

    /// Rows `(r, phi, T)` in first-seen order.
    fn row_keys(&self) -> Vec<(usize, f64, usize)> {
        let mut rows: Vec<(usize, f64, usize)> = Vec::new();
        for c in &self.cells {
            let key = (c.r, c.phi, c.t);
            if !rows.iter().any(|k| k.0 == key.0 && k.1.to_bits() == key.1.to_bits() && k.2 == key.2) {
                rows.push(key);
            }
        }
        rows
    }

    /// Wide table for one metric: rows `(r, phi, T)`, columns method × n.
    pub fn write_metric_table<W: std::io::Write>(&self, metric: &str, w: W) -> Result<()> {
        let ns = self.distinct_n();
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["r".to_string(), "phi".to_string(), "T".to_string()];
        for m in &self.methods {
            for n in &ns {
                header.push(format!("{}:{n}", m.label()));
            }
        }
        wtr.write_record(&header)?;
        for (r, phi, t) in self.row_keys() {
            let mut row = vec![r.to_string(), fmt_phi(phi), t.to_string()];
            for (mi, _) in self.methods.iter().enumerate() {
                for &n in &ns {
                    let cell = self
                        .cells
                        .iter()
                        .position(|c| c.r == r && c.phi.to_bits() == phi.to_bits() && c.t == t && c.n == n);
                    row.push(match cell {
                        Some(ci) => format!("{:.6}", self.metrics[ci][mi].get(metric)),
                        None => String::new(),
                    });
                }
            }
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Cross-cell MCC summary per signal count and method.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut rs: Vec<usize> = Vec::new();
        for c in &self.cells {
            if !rs.contains(&c.r) {
                rs.push(c.r);
            }
        }
        let k = self.methods.len();
        let mut out = Vec::new();
        for r in rs {
            let cells: Vec<usize> = (0..self.cells.len()).filter(|&i| self.cells[i].r == r).collect();
            let mut rank_sum = vec![0.0; k];
            let mut firsts = vec![0usize; k];
            for &ci in &cells {
                let vals: Vec<f64> = (0..k).map(|m| self.metrics[ci][m].mcc).collect();
                for m in 0..k {
                    let above = vals.iter().filter(|v| **v > vals[m]).count() as f64;
                    let ties = vals.iter().filter(|v| **v == vals[m]).count() as f64;
                    rank_sum[m] += above + (ties + 1.0) / 2.0;
                    if above == 0.0 {
                        firsts[m] += 1;
                    }
                }
            }
            for (m, method) in self.methods.iter().enumerate() {
                let mut vals: Vec<f64> = cells.iter().map(|&ci| self.metrics[ci][m].mcc).collect();
                vals.sort_by(f64::total_cmp);
                let nc = cells.len() as f64;
                out.push(SummaryRow {
                    r,
                    method: *method,
                    cells: cells.len(),
                    median: quantile(&vals, 0.5),
                    iqr: quantile(&vals, 0.75) - quantile(&vals, 0.25),
                    min: vals[0],
                    max: vals[vals.len() - 1],
                    share_above_08: vals.iter().filter(|v| **v > 0.8).count() as f64 / nc,
                    mean_rank: rank_sum[m] / nc,
                    share_first: firsts[m] as f64 / nc,
                });
            }
        }
        out
    }

    pub fn write_summary<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["r", "method", "cells", "median", "iqr", "min", "max", "share_above_0.8", "mean_rank", "share_first"])?;
        for s in self.summary() {
            wtr.write_record([
                s.r.to_string(),
                s.method.label().to_string(),
                s.cells.to_string(),
                format!("{:.6}", s.median),
                format!("{:.6}", s.iqr),
                format!("{:.6}", s.min),
                format!("{:.6}", s.max),
                format!("{:.6}", s.share_above_08),
                format!("{:.6}", s.mean_rank),
                format!("{:.6}", s.share_first),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn cell_index(&self, cfg: &DgpConfig) -> Option<usize> {
        self.cells.iter().position(|c| c == cfg)
    }

    pub fn method_index(&self, m: Method) -> Option<usize> {
        self.methods.iter().position(|x| *x == m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub r: usize,
    pub method: Method,
    pub cells: usize,
    pub median: f64,
    pub iqr: f64,
    pub min: f64,
    pub max: f64,
    pub share_above_08: f64,
    pub mean_rank: f64,
    pub share_first: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Sample lag-1 autocorrelation.
pub fn lag1_autocorrelation(x: &DVector<f64>) -> f64 {
    let m = x.mean();
    let den: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
    let num: f64 = (1..x.len()).map(|t| (x[t] - m) * (x[t - 1] - m)).sum();
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}
