//! Balanced panels, observed factors, lag/trim bookkeeping, weekly-to-monthly
//! alignment, and CSV ingestion.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Balanced panel of outcomes and unit-level covariates.
#[derive(Clone, Debug)]
pub struct PanelDataset {
    pub unit_ids: Vec<String>,
    pub dates: Vec<NaiveDate>,
    /// N×T outcome matrix.
    pub outcome: DMatrix<f64>,
    /// Per unit, a T×K matrix of covariates.
    pub covariates: Vec<DMatrix<f64>>,
    pub covariate_names: Vec<String>,
}

impl PanelDataset {
    pub fn new(
        unit_ids: Vec<String>,
        dates: Vec<NaiveDate>,
        outcome: DMatrix<f64>,
        covariates: Vec<DMatrix<f64>>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let panel = Self {
            unit_ids,
            dates,
            outcome,
            covariates,
            covariate_names,
        };
        panel.validate()?;
        Ok(panel)
    }

    pub fn n(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn t(&self) -> usize {
        self.dates.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, t) = (self.n(), self.t());
        let k = self.covariate_names.len();
        if n < 2 {
            return Err(Error::Validation(format!(
                "panel needs at least 2 units, found {n}"
            )));
        }
        if t < k + 2 {
            return Err(Error::SampleTooShort(format!(
                "{t} periods for {k} covariates"
            )));
        }
        if self.outcome.shape() != (n, t) {
            return Err(Error::DimensionMismatch(format!(
                "outcome is {:?}, expected ({n}, {t})",
                self.outcome.shape()
            )));
        }
        if self.covariates.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} covariate blocks for {n} units",
                self.covariates.len()
            )));
        }
        for (i, block) in self.covariates.iter().enumerate() {
            if block.shape() != (t, k) {
                return Err(Error::DimensionMismatch(format!(
                    "unit {} covariates are {:?}, expected ({t}, {k})",
                    self.unit_ids[i],
                    block.shape()
                )));
            }
            if block.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "unit {} has non-finite covariates",
                    self.unit_ids[i]
                )));
            }
        }
        if self.outcome.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("outcome has non-finite entries".into()));
        }
        check_increasing(&self.dates)?;
        let mut seen = std::collections::HashSet::new();
        for id in &self.unit_ids {
            if !seen.insert(id) {
                return Err(Error::Validation(format!("duplicate unit id {id}")));
            }
        }
        Ok(())
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown covariate {name}")))
    }

    /// T×len(names) matrix of the named covariates for unit `i`.
    pub fn unit_columns(&self, i: usize, names: &[String]) -> Result<DMatrix<f64>> {
        let idx = names
            .iter()
            .map(|n| self.covariate_index(n))
            .collect::<Result<Vec<_>>>()?;
        Ok(crate::linalg::select_columns(&self.covariates[i], &idx))
    }
}

fn check_increasing(dates: &[NaiveDate]) -> Result<()> {
    for w in dates.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Validation(format!(
                "dates not strictly increasing at {}",
                w[1]
            )));
        }
    }
    Ok(())
}

/// Market-level factors observed on the panel calendar.
#[derive(Clone, Debug)]
pub struct ObservedFactors {
    pub dates: Vec<NaiveDate>,
    /// T×K_y values.
    pub values: DMatrix<f64>,
    pub names: Vec<String>,
}

impl ObservedFactors {
    pub fn new(dates: Vec<NaiveDate>, values: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if values.nrows() != dates.len() || values.ncols() != names.len() {
            return Err(Error::DimensionMismatch(format!(
                "factor values {:?} for {} dates and {} names",
                values.shape(),
                dates.len(),
                names.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("observed factors have non-finite entries".into()));
        }
        check_increasing(&dates)?;
        Ok(Self {
            dates,
            values,
            names,
        })
    }

    pub fn k(&self) -> usize {
        self.names.len()
    }

    /// Restricts to the panel calendar; every panel date must be present.
    pub fn align_to(&self, dates: &[NaiveDate]) -> Result<Self> {
        let pos: HashMap<NaiveDate, usize> =
            self.dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();
        let mut values = DMatrix::zeros(dates.len(), self.k());
        for (row, d) in dates.iter().enumerate() {
            let src = *pos.get(d).ok_or_else(|| {
                Error::Validation(format!("observed factors missing date {d}"))
            })?;
            values.set_row(row, &self.values.row(src));
        }
        Ok(Self {
            dates: dates.to_vec(),
            values,
            names: self.names.clone(),
        })
    }
}

/// One classification scheme mapping each unit to a group label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupMap {
    pub scheme: String,
    pub assignments: BTreeMap<String, String>,
}

impl GroupMap {
    /// Group labels in sorted order with their member units in panel order.
    pub fn groups(&self, unit_ids: &[String]) -> Vec<(String, Vec<usize>)> {
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, id) in unit_ids.iter().enumerate() {
            if let Some(label) = self.assignments.get(id) {
                out.entry(label.clone()).or_default().push(i);
            }
        }
        out.into_iter().collect()
    }

    pub fn check_covers(&self, unit_ids: &[String]) -> Result<()> {
        for id in unit_ids {
            if !self.assignments.contains_key(id) {
                return Err(Error::Validation(format!(
                    "unit {id} missing from group scheme {}",
                    self.scheme
                )));
            }
        }
        Ok(())
    }
}

/// Per-unit semi-endogenous regressors `Z_i` (T×K_z).
#[derive(Clone, Debug)]
pub struct SemiEndogenousSet {
    pub blocks: Vec<DMatrix<f64>>,
    pub names: Vec<String>,
}

impl SemiEndogenousSet {
    pub fn new(blocks: Vec<DMatrix<f64>>, names: Vec<String>) -> Result<Self> {
        let t = blocks.first().map(|b| b.nrows()).unwrap_or(0);
        for b in &blocks {
            if b.nrows() != t || b.ncols() != names.len() {
                return Err(Error::DimensionMismatch(format!(
                    "semi-endogenous block {:?}, expected ({t}, {})",
                    b.shape(),
                    names.len()
                )));
            }
        }
        Ok(Self { blocks, names })
    }

    pub fn from_panel(panel: &PanelDataset, names: &[String]) -> Result<Self> {
        let blocks = (0..panel.n())
            .map(|i| panel.unit_columns(i, names))
            .collect::<Result<Vec<_>>>()?;
        Self::new(blocks, names.to_vec())
    }

    pub fn k(&self) -> usize {
        self.names.len()
    }
}

/// Shifts a series forward by `tau`; the first `tau` entries are unavailable.
pub fn lag<T: Copy>(series: &[T], tau: usize) -> Result<Vec<Option<T>>> {
    if tau >= series.len() {
        return Err(Error::TauTooLarge {
            tau,
            len: series.len(),
        });
    }
    Ok((0..series.len())
        .map(|t| if t >= tau { Some(series[t - tau]) } else { None })
        .collect())
}

/// Row-wise lag of a T×K matrix; unavailable rows are NaN.
pub fn lag_matrix(m: &DMatrix<f64>, tau: usize) -> Result<DMatrix<f64>> {
    let t = m.nrows();
    if tau >= t {
        return Err(Error::TauTooLarge { tau, len: t });
    }
    let mut out = DMatrix::from_element(t, m.ncols(), f64::NAN);
    out.rows_mut(tau, t - tau).copy_from(&m.rows(0, t - tau));
    Ok(out)
}

/// Effective sample shared by every lagged object in the Stage-1 system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleWindow {
    /// First usable row of the original T-period calendar.
    pub start: usize,
    /// Number of usable rows.
    pub len: usize,
}

impl SampleWindow {
    /// Rows `[start - tau, start - tau + len)`, i.e. the `tau`-lag aligned to
    /// the effective sample.
    pub fn lagged_rows(&self, m: &DMatrix<f64>, tau: usize) -> DMatrix<f64> {
        debug_assert!(tau <= self.start);
        m.rows(self.start - tau, self.len).into_owned()
    }

    pub fn rows(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.lagged_rows(m, 0)
    }

    pub fn slice<'a, T>(&self, v: &'a [T]) -> &'a [T] {
        &v[self.start..self.start + self.len]
    }
}

/// Common sample after consuming `zeta` instrument lags and `ar_lags` outcome
/// lags. `extra_lag` forces at least one leading period to be dropped, which
/// is needed whenever lagged observed factors enter the instrument set.
pub fn trim_common(
    t: usize,
    zeta: usize,
    ar_lags: usize,
    k_x: usize,
    k_y: usize,
    extra_lag: bool,
) -> Result<SampleWindow> {
    if zeta + k_x + k_y >= t {
        return Err(Error::SampleTooShort(format!(
            "zeta {zeta} with {k_x} regressors and {k_y} observed factors needs more than {t} periods"
        )));
    }
    let mut start = zeta + ar_lags;
    if extra_lag {
        start = start.max(1);
    }
    if start >= t {
        return Err(Error::SampleTooShort(format!(
            "{start} leading periods consumed out of {t}"
        )));
    }
    Ok(SampleWindow {
        start,
        len: t - start,
    })
}

/// Calendar month.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn of(date: NaiveDate) -> Self {
        Self {
            year: date.year(),
            month: date.month(),
        }
    }

    pub fn next(self) -> Self {
        if self.month == 12 {
            Self {
                year: self.year + 1,
                month: 1,
            }
        } else {
            Self {
                year: self.year,
                month: self.month + 1,
            }
        }
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for YearMonth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
            return Ok(Self::of(d));
        }
        let bad = || Error::Validation(format!("cannot parse month {s:?}"));
        let (y, m) = s.split_once('-').ok_or_else(bad)?;
        let year = y.parse().map_err(|_| bad())?;
        let month: u32 = m.parse().map_err(|_| bad())?;
        if !(1..=12).contains(&month) {
            return Err(bad());
        }
        Ok(Self { year, month })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Median,
}

/// Treatment of partially observed months at either end of the sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum BoundaryMonths {
    Keep,
    /// Drop a first or last month with fewer than `min_weeks` member weeks.
    DropPartial { min_weeks: usize },
}

impl Default for BoundaryMonths {
    fn default() -> Self {
        BoundaryMonths::DropPartial { min_weeks: 4 }
    }
}

/// Weekly-to-monthly index: the month of each week and the member weeks of
/// each retained month.
#[derive(Clone, Debug)]
pub struct MonthIndex {
    pub months: Vec<YearMonth>,
    pub members: Vec<Vec<usize>>,
}

impl MonthIndex {
    /// Assigns each week to the month containing its start date.
    pub fn build(dates: &[NaiveDate], boundary: BoundaryMonths) -> Result<Self> {
        let first = *dates
            .first()
            .ok_or_else(|| Error::Validation("no dates to aggregate".into()))?;
        check_increasing(dates)?;
        let last = *dates.last().unwrap();
        let mut months = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        let mut cur = YearMonth::of(first);
        let end = YearMonth::of(last);
        let mut w = 0;
        loop {
            let mut m = Vec::new();
            while w < dates.len() && YearMonth::of(dates[w]) == cur {
                m.push(w);
                w += 1;
            }
            if m.is_empty() {
                return Err(Error::EmptyMonth(cur.to_string()));
            }
            months.push(cur);
            members.push(m);
            if cur == end {
                break;
            }
            cur = cur.next();
        }
        if let BoundaryMonths::DropPartial { min_weeks } = boundary {
            if members.len() > 1 && members.last().unwrap().len() < min_weeks {
                months.pop();
                members.pop();
            }
            if members.len() > 1 && members[0].len() < min_weeks {
                months.remove(0);
                members.remove(0);
            }
        }
        Ok(Self { months, members })
    }

    pub fn len(&self) -> usize {
        self.months.len()
    }

    pub fn is_empty(&self) -> bool {
        self.months.is_empty()
    }

    pub fn aggregate(&self, values: &[f64], method: Aggregation) -> Vec<f64> {
        self.members
            .iter()
            .map(|idx| {
                let mut xs: Vec<f64> = idx.iter().map(|&w| values[w]).collect();
                match method {
                    Aggregation::Mean => xs.iter().sum::<f64>() / xs.len() as f64,
                    Aggregation::Median => median(&mut xs),
                }
            })
            .collect()
    }
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Monthly aggregate of a weekly series.
#[derive(Clone, Debug)]
pub struct MonthlySeries {
    pub months: Vec<YearMonth>,
    pub values: Vec<f64>,
}

pub fn aggregate_to_months(
    values: &[f64],
    dates: &[NaiveDate],
    method: Aggregation,
    boundary: BoundaryMonths,
) -> Result<MonthlySeries> {
    if values.len() != dates.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} values for {} dates",
            values.len(),
            dates.len()
        )));
    }
    let index = MonthIndex::build(dates, boundary)?;
    Ok(MonthlySeries {
        values: index.aggregate(values, method),
        months: index.months,
    })
}

/// Monthly table of candidate proxies.
#[derive(Clone, Debug)]
pub struct MonthlyTable {
    pub months: Vec<YearMonth>,
    /// T_m×K values.
    pub values: DMatrix<f64>,
    pub names: Vec<String>,
}

impl MonthlyTable {
    /// Rows for the requested months, in that order.
    pub fn align_to(&self, months: &[YearMonth]) -> Result<DMatrix<f64>> {
        let pos: HashMap<YearMonth, usize> =
            self.months.iter().enumerate().map(|(i, m)| (*m, i)).collect();
        let mut out = DMatrix::zeros(months.len(), self.names.len());
        for (row, m) in months.iter().enumerate() {
            let src = *pos
                .get(m)
                .ok_or_else(|| Error::Validation(format!("proxies missing month {m}")))?;
            out.set_row(row, &self.values.row(src));
        }
        Ok(out)
    }
}

pub fn parse_date(s: &str, line: u64) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| Error::Parse {
        line,
        message: format!("bad date {s:?}: {e}"),
    })
}

pub fn parse_f64(s: &str, line: u64, column: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("column {column}: cannot parse {s:?} as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("column {column}: non-finite value"),
        });
    }
    Ok(v)
}

fn record_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r)
}

/// Reads a long-format panel `unit,date,outcome,<covariate...>`.
pub fn read_panel<R: Read>(r: R) -> Result<PanelDataset> {
    let mut rdr = reader(r);
    let headers = rdr.headers()?.clone();
    if headers.len() < 3 {
        return Err(Error::Validation(
            "panel CSV needs unit, date and outcome columns".into(),
        ));
    }
    let cov_names: Vec<String> = headers.iter().skip(3).map(str::to_string).collect();
    let mut units: Vec<String> = Vec::new();
    let mut unit_pos: HashMap<String, usize> = HashMap::new();
    let mut cells: Vec<BTreeMap<NaiveDate, (f64, Vec<f64>)>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = record_line(&rec);
        if rec.len() != headers.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        let unit = rec[0].to_string();
        let date = parse_date(&rec[1], line)?;
        let y = parse_f64(&rec[2], line, &headers[2])?;
        let covs = (3..rec.len())
            .map(|j| parse_f64(&rec[j], line, &headers[j]))
            .collect::<Result<Vec<_>>>()?;
        let idx = *unit_pos.entry(unit.clone()).or_insert_with(|| {
            units.push(unit.clone());
            cells.push(BTreeMap::new());
            units.len() - 1
        });
        if cells[idx].insert(date, (y, covs)).is_some() {
            return Err(Error::Parse {
                line,
                message: format!("duplicate observation for unit {unit} on {date}"),
            });
        }
    }
    if units.is_empty() {
        return Err(Error::Validation("panel CSV has no rows".into()));
    }
    let dates: Vec<NaiveDate> = cells[0].keys().copied().collect();
    let t = dates.len();
    let k = cov_names.len();
    let mut outcome = DMatrix::zeros(units.len(), t);
    let mut covariates = Vec::with_capacity(units.len());
    for (i, unit_cells) in cells.iter().enumerate() {
        if unit_cells.len() != t || !unit_cells.keys().eq(dates.iter()) {
            return Err(Error::Validation(format!(
                "unbalanced panel: unit {} has {} periods, unit {} has {t}",
                units[i],
                unit_cells.len(),
                units[0]
            )));
        }
        let mut block = DMatrix::zeros(t, k);
        for (s, (y, covs)) in unit_cells.values().enumerate() {
            outcome[(i, s)] = *y;
            for (j, v) in covs.iter().enumerate() {
                block[(s, j)] = *v;
            }
        }
        covariates.push(block);
    }
    PanelDataset::new(units, dates, outcome, covariates, cov_names)
}

/// Reads wide observed factors `date,<factor...>`.
pub fn read_factors<R: Read>(r: R) -> Result<ObservedFactors> {
    let mut rdr = reader(r);
    let headers = rdr.headers()?.clone();
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut dates = Vec::new();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = record_line(&rec);
        if rec.len() != headers.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        dates.push(parse_date(&rec[0], line)?);
        for j in 1..rec.len() {
            rows.push(parse_f64(&rec[j], line, &headers[j])?);
        }
    }
    let values = DMatrix::from_row_slice(dates.len(), names.len(), &rows);
    ObservedFactors::new(dates, values, names)
}

/// Reads monthly proxies `month,<proxy...>`.
pub fn read_monthly<R: Read>(r: R) -> Result<MonthlyTable> {
    let mut rdr = reader(r);
    let headers = rdr.headers()?.clone();
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut months = Vec::new();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = record_line(&rec);
        if rec.len() != headers.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        let m: YearMonth = rec[0].parse().map_err(|e: Error| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if months.last().is_some_and(|prev| *prev >= m) {
            return Err(Error::Parse {
                line,
                message: format!("month {m} out of order"),
            });
        }
        months.push(m);
        for j in 1..rec.len() {
            rows.push(parse_f64(&rec[j], line, &headers[j])?);
        }
    }
    let values = DMatrix::from_row_slice(months.len(), names.len(), &rows);
    Ok(MonthlyTable {
        months,
        values,
        names,
    })
}

/// Reads group assignments `unit,scheme,label`; schemes keep first-seen order.
pub fn read_groups<R: Read>(r: R) -> Result<Vec<GroupMap>> {
    let mut rdr = reader(r);
    let mut out: Vec<GroupMap> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = record_line(&rec);
        if rec.len() != 3 {
            return Err(Error::Parse {
                line,
                message: "expected unit,scheme,label".into(),
            });
        }
        let (unit, scheme, label) = (&rec[0], &rec[1], &rec[2]);
        let map = match out.iter_mut().position(|g| g.scheme == scheme) {
            Some(p) => &mut out[p],
            None => {
                out.push(GroupMap {
                    scheme: scheme.to_string(),
                    assignments: BTreeMap::new(),
                });
                out.last_mut().unwrap()
            }
        };
        if map
            .assignments
            .insert(unit.to_string(), label.to_string())
            .is_some()
        {
            return Err(Error::Parse {
                line,
                message: format!("unit {unit} assigned twice in scheme {scheme}"),
            });
        }
    }
    Ok(out)
}

pub fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path)
        .map_err(|e| Error::from(e).context(format!("opening {}", path.display())))
}
