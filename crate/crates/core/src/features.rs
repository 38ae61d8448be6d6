//! Unit-level covariates built from raw price and volume data: log returns,
//! Garman–Klass volatility, Amihud illiquidity and the cap-weighted market
//! volatility aggregate.

use std::collections::BTreeMap;
use std::io::Read;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{parse_date, parse_f64};

/// One open/high/low/close/volume observation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bar {
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl Bar {
    pub fn validate(&self, index: usize) -> Result<()> {
        let prices = [self.open, self.high, self.low, self.close];
        if prices.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(Error::NonPositivePrice { index });
        }
        if !self.volume.is_finite() || self.volume < 0.0 {
            return Err(Error::InvalidBar {
                index,
                reason: "negative or non-finite volume".into(),
            });
        }
        if self.high < self.low {
            return Err(Error::InvalidBar {
                index,
                reason: "high below low".into(),
            });
        }
        if self.low > self.open.min(self.close) || self.high < self.open.max(self.close) {
            return Err(Error::InvalidBar {
                index,
                reason: "open or close outside the high-low range".into(),
            });
        }
        Ok(())
    }
}

/// `ln p_t − ln p_{t−1}`; one fewer value than prices.
pub fn log_returns(prices: &[f64]) -> Result<Vec<f64>> {
    if prices.len() < 2 {
        return Err(Error::SampleTooShort(format!(
            "{} prices; at least 2 are required",
            prices.len()
        )));
    }
    if let Some(index) = prices.iter().position(|p| !(*p > 0.0) || !p.is_finite()) {
        return Err(Error::NonPositivePrice { index });
    }
    Ok(prices.windows(2).map(|w| (w[1] / w[0]).ln()).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GarmanKlass {
    pub values: Vec<f64>,
    /// Number of periods where the raw estimate was negative and set to 0.
    pub clamped: usize,
}

/// `0.5 ln(h/l)² − (2 ln 2 − 1) ln(c/o)²`, clamped at zero.
pub fn garman_klass(bars: &[Bar]) -> Result<GarmanKlass> {
    let k = 2.0 * std::f64::consts::LN_2 - 1.0;
    let mut clamped = 0;
    let mut values = Vec::with_capacity(bars.len());
    for (i, b) in bars.iter().enumerate() {
        b.validate(i)?;
        let hl = (b.high / b.low).ln();
        let co = (b.close / b.open).ln();
        let v = 0.5 * hl * hl - k * co * co;
        if v < 0.0 {
            clamped += 1;
            values.push(0.0);
        } else {
            values.push(v);
        }
    }
    Ok(GarmanKlass { values, clamped })
}

/// Denominator of the weekly Amihud average.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmihudDivisor {
    /// Always 7, with exactly seven daily observations required per week.
    #[default]
    CalendarDays,
    /// Number of daily observations present in the week.
    TradingDays,
}

/// `10⁶ · mean_d |r_d| / VLM_d` for one week.
pub fn amihud(abs_returns: &[f64], volumes: &[f64], divisor: AmihudDivisor) -> Result<f64> {
    if abs_returns.len() != volumes.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} returns for {} volumes",
            abs_returns.len(),
            volumes.len()
        )));
    }
    let days = abs_returns.len();
    let denom = match divisor {
        AmihudDivisor::CalendarDays => {
            if days != 7 {
                return Err(Error::Validation(format!(
                    "week has {days} daily observations; 7 are required"
                )));
            }
            7.0
        }
        AmihudDivisor::TradingDays => {
            if days == 0 {
                return Err(Error::Validation("week has no daily observations".into()));
            }
            days as f64
        }
    };
    let mut sum = 0.0;
    for (day, (r, v)) in abs_returns.iter().zip(volumes).enumerate() {
        let r = r.abs();
        if *v == 0.0 {
            if r > 0.0 {
                return Err(Error::ZeroVolumeWithMove { day });
            }
            continue;
        }
        if *v < 0.0 {
            return Err(Error::Validation(format!("negative volume on day {day}")));
        }
        sum += r / v;
    }
    Ok(1e6 * sum / denom)
}

/// Cap-weighted average volatility per period. Rows are units, inner vectors
/// are periods.
pub fn capweighted_market_vol(vlt: &[Vec<f64>], caps: &[Vec<f64>]) -> Result<Vec<f64>> {
    if vlt.len() != caps.len() || vlt.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} volatility series for {} cap series",
            vlt.len(),
            caps.len()
        )));
    }
    let t = vlt[0].len();
    if vlt.iter().chain(caps).any(|s| s.len() != t) {
        return Err(Error::DimensionMismatch("series lengths differ".into()));
    }
    (0..t)
        .map(|s| {
            let total: f64 = caps.iter().map(|c| c[s]).sum();
            if caps.iter().any(|c| c[s] < 0.0 || !c[s].is_finite()) {
                return Err(Error::Validation(format!("invalid market cap at period {s}")));
            }
            if total <= 0.0 {
                return Err(Error::AllZeroCaps { period: s });
            }
            Ok(vlt
                .iter()
                .zip(caps)
                .map(|(v, c)| v[s] * c[s] / total)
                .sum())
        })
        .collect()
}

/// Raw price record from `unit,date,open,high,low,close,volume[,market_cap]`.
#[derive(Clone, Debug)]
pub struct RawRecord {
    pub date: NaiveDate,
    pub bar: Bar,
    pub market_cap: Option<f64>,
    pub line: u64,
}

/// Raw records grouped by unit (first-seen order) and sorted by date.
#[derive(Clone, Debug, Default)]
pub struct RawSeries {
    pub units: Vec<String>,
    pub records: Vec<Vec<RawRecord>>,
}

pub fn read_raw<R: Read>(r: R) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = rdr.headers()?.clone();
    let expected = ["unit", "date", "open", "high", "low", "close", "volume"];
    if headers.len() < 7 || headers.iter().take(7).zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Validation(format!(
            "raw CSV header must start with {}",
            expected.join(",")
        )));
    }
    let has_cap = headers.get(7) == Some("market_cap");
    let mut out = RawSeries::default();
    let mut pos: BTreeMap<String, usize> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != headers.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        let date = parse_date(&rec[1], line)?;
        let num = |j: usize| parse_f64(&rec[j], line, &headers[j]);
        let bar = Bar {
            open: num(2)?,
            high: num(3)?,
            low: num(4)?,
            close: num(5)?,
            volume: num(6)?,
        };
        bar.validate(0).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let market_cap = if has_cap { Some(num(7)?) } else { None };
        let unit = rec[0].to_string();
        let idx = *pos.entry(unit.clone()).or_insert_with(|| {
            out.units.push(unit);
            out.records.push(Vec::new());
            out.records.len() - 1
        });
        out.records[idx].push(RawRecord {
            date,
            bar,
            market_cap,
            line,
        });
    }
    for (u, recs) in out.units.iter().zip(out.records.iter_mut()) {
        recs.sort_by_key(|r| r.date);
        for w in recs.windows(2) {
            if w[0].date == w[1].date {
                return Err(Error::Parse {
                    line: w[1].line,
                    message: format!("duplicate date {} for unit {u}", w[1].date),
                });
            }
        }
    }
    Ok(out)
}

/// One output row of the feature panel.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub unit: String,
    pub date: NaiveDate,
    pub r: f64,
    pub vlt: f64,
    pub ilq: f64,
    pub vlm: f64,
}

#[derive(Clone, Debug)]
pub struct FeaturePanel {
    pub rows: Vec<FeatureRow>,
    /// Garman–Klass clamp count per unit.
    pub clamped: Vec<(String, usize)>,
    /// Cap-weighted volatility by week, when market caps were supplied.
    pub market_vol: Option<Vec<(NaiveDate, f64)>>,
}

/// Builds weekly features from weekly bars and daily bars. Each week is
/// labelled by its start date and owns the daily records dated within the
/// following seven days. The first week only anchors the first return.
pub fn build_feature_panel(
    weekly: &RawSeries,
    daily: &RawSeries,
    divisor: AmihudDivisor,
) -> Result<FeaturePanel> {
    if weekly.units.is_empty() {
        return Err(Error::Validation("no weekly records".into()));
    }
    let calendar: Vec<NaiveDate> = weekly.records[0].iter().map(|r| r.date).collect();
    if calendar.len() < 2 {
        return Err(Error::SampleTooShort("fewer than two weeks".into()));
    }
    let mut rows = Vec::new();
    let mut clamped = Vec::new();
    let mut vlt_by_unit = Vec::new();
    let mut caps_by_unit = Vec::new();
    for (u, unit) in weekly.units.iter().enumerate() {
        let wk = &weekly.records[u];
        let dates: Vec<NaiveDate> = wk.iter().map(|r| r.date).collect();
        if dates != calendar {
            return Err(Error::Validation(format!(
                "unit {unit} does not share the weekly calendar of {}",
                weekly.units[0]
            )));
        }
        let closes: Vec<f64> = wk.iter().map(|r| r.bar.close).collect();
        let r = log_returns(&closes)?;
        let bars: Vec<Bar> = wk.iter().map(|r| r.bar).collect();
        let gk = garman_klass(&bars)?;
        clamped.push((unit.clone(), gk.clamped));

        let d = daily
            .units
            .iter()
            .position(|x| x == unit)
            .ok_or_else(|| Error::Validation(format!("no daily records for unit {unit}")))?;
        let days = &daily.records[d];
        let mut day_returns: Vec<Option<f64>> = vec![None; days.len()];
        for k in 1..days.len() {
            day_returns[k] = Some((days[k].bar.close / days[k - 1].bar.close).ln());
        }
        for w in 1..calendar.len() {
            let start = calendar[w];
            let end = calendar
                .get(w + 1)
                .copied()
                .unwrap_or(start + chrono::Duration::days(7));
            let mut abs_r = Vec::new();
            let mut vol = Vec::new();
            for (k, day) in days.iter().enumerate() {
                if day.date >= start && day.date < end {
                    let rd = day_returns[k].ok_or_else(|| {
                        Error::Validation(format!(
                            "unit {unit}: daily series must start before week {start}"
                        ))
                    })?;
                    abs_r.push(rd.abs());
                    vol.push(day.bar.volume);
                }
            }
            let ilq = amihud(&abs_r, &vol, divisor).map_err(|e| Error::Parse {
                line: days.first().map(|x| x.line).unwrap_or(0),
                message: format!("unit {unit}, week {start}: {e}"),
            })?;
            rows.push(FeatureRow {
                unit: unit.clone(),
                date: start,
                r: r[w - 1],
                vlt: gk.values[w],
                ilq,
                vlm: wk[w].bar.volume,
            });
        }
        vlt_by_unit.push(gk.values[1..].to_vec());
        caps_by_unit.push(
            wk[1..]
                .iter()
                .map(|r| r.market_cap)
                .collect::<Option<Vec<f64>>>(),
        );
    }
    let market_vol = match caps_by_unit.into_iter().collect::<Option<Vec<_>>>() {
        Some(caps) => {
            let cvlt = capweighted_market_vol(&vlt_by_unit, &caps)?;
            Some(calendar[1..].iter().copied().zip(cvlt).collect())
        }
        None => None,
    };
    Ok(FeaturePanel {
        rows,
        clamped,
        market_vol,
    })
}
