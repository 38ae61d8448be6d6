use dcpanel::features::{build_feature_panel, read_raw};
use dcpanel::meangroup::{group_difference, mean_group, render_markdown, MeanGroupResult, MgTable};
use dcpanel::montecarlo::{run_grid, MeanMetrics};
use dcpanel::panel::{open, read_factors, read_groups, read_monthly, read_panel, GroupMap};
use dcpanel::stage1::stage1_run;
use dcpanel::stage2::run_stage2;
use dcpanel::synthetic::generate;
use dcpanel::Result;
use nalgebra::DVector;

use crate::config::RunConfig;
use crate::output::OutDir;

pub struct Run<'a> {
    pub config: &'a RunConfig,
    pub seed: u64,
    pub out: OutDir,
}

pub fn prep(run: Run<'_>) -> Result<()> {
    let (weekly_path, daily_path) = run.config.validate_prep()?;
    let weekly = read_raw(open(&weekly_path)?).map_err(|e| e.context(weekly_path.display().to_string()))?;
    let daily = read_raw(open(&daily_path)?).map_err(|e| e.context(daily_path.display().to_string()))?;
    let panel = build_feature_panel(&weekly, &daily, run.config.prep.amihud_divisor)?;
    let mut out = run.out;
    out.write("features.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["unit", "date", "r", "VLT", "ILQ", "VLM"])?;
        for row in &panel.rows {
            w.write_record([
                row.unit.clone(),
                row.date.to_string(),
                row.r.to_string(),
                row.vlt.to_string(),
                row.ilq.to_string(),
                row.vlm.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    out.write("gk_clamps.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["unit", "clamped_weeks"])?;
        for (u, c) in &panel.clamped {
            w.write_record([u.clone(), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })?;
    if let Some(mv) = &panel.market_vol {
        out.write("market_vol.csv", |buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(["date", "CVLT"])?;
            for (d, v) in mv {
                w.write_record([d.to_string(), v.to_string()])?;
            }
            w.flush()?;
            Ok(())
        })?;
    }
    println!("prep: {} unit-weeks written", panel.rows.len());
    out.finish("prep", run.seed, &run.config.canonical()?)
}

pub fn estimate(run: Run<'_>) -> Result<()> {
    let cfg = run.config;
    let inputs = cfg.validate_estimate()?;
    let panel = read_panel(open(&inputs.panel)?).map_err(|e| e.context(inputs.panel.display().to_string()))?;
    panel.validate()?;
    let factors = read_factors(open(&inputs.factors)?).map_err(|e| e.context(inputs.factors.display().to_string()))?;
    let proxies = read_monthly(open(&inputs.proxies)?).map_err(|e| e.context(inputs.proxies.display().to_string()))?;
    let schemes = match &inputs.groups {
        Some(p) => read_groups(open(p)?).map_err(|e| e.context(p.display().to_string()))?,
        None => Vec::new(),
    };
    for s in &schemes {
        s.check_covers(&panel.unit_ids)?;
    }

    let s1 = stage1_run(&panel, &factors, &inputs.model, &cfg.stage1).map_err(|e| e.context("stage 1"))?;
    let s2 = run_stage2(&s1, &proxies, &cfg.stage2).map_err(|e| e.context("stage 2"))?;
    println!(
        "estimate: N={} T_eff={} NT={} k_f={} instruments={} selected={:?}",
        s1.fits.len(),
        s1.window.len,
        s1.nt(),
        s1.k_f,
        s1.k_iv,
        s2.selected_names()
    );

    let mut out = run.out;
    out.write("stage1_coefficients.csv", |b| s1.write_coefficients(b))?;
    out.write("stage1_diagnostics.csv", |b| s1.write_diagnostics(b))?;
    out.write("residual_component.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["date", "component"])?;
        for (d, v) in s1.dates.iter().zip(s2.component.weekly.iter()) {
            w.write_record([d.to_string(), format!("{v:.10e}")])?;
        }
        w.flush()?;
        Ok(())
    })?;
    out.write("residual_spectrum.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["rank", "eigenvalue", "share"])?;
        let total: f64 = s2.component.spectrum.iter().sum();
        for (k, ev) in s2.component.spectrum.iter().enumerate() {
            let share = if total > 0.0 { ev / total } else { 0.0 };
            w.write_record([(k + 1).to_string(), format!("{ev:.10e}"), format!("{share:.10e}")])?;
        }
        w.flush()?;
        Ok(())
    })?;
    out.write("selection.csv", |b| s2.selection.write_report(&s2.proxy_names, b))?;
    out.write("shapley.csv", |b| s2.write_shapley(b))?;
    out.write("exposures.csv", |b| s2.write_exposures(&s1.unit_ids, b))?;

    let mg_stage1 = mg_table(&s1.thetas(), &s1.unit_ids, &s1.param_names, &schemes, s1.window.len)?;
    out.write("mg_stage1.csv", |b| mg_stage1.write_csv(b))?;
    let deltas: Vec<DVector<f64>> = s2.exposures.iter().map(|f| f.delta.clone()).collect();
    let mg_exposures = if deltas.is_empty() {
        None
    } else {
        Some(mg_table(&deltas, &s1.unit_ids, &s2.selected_names(), &schemes, s2.months.len())?)
    };
    if let Some(t) = &mg_exposures {
        out.write("mg_exposures.csv", |b| t.write_csv(b))?;
    }
    out.write("group_differences.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["table", "scheme", "first", "second", "param", "difference", "z", "pvalue"])?;
        let tables = [("stage1", Some(&mg_stage1)), ("exposures", mg_exposures.as_ref())];
        for (name, table) in tables {
            let Some(table) = table else { continue };
            for (scheme, a, b) in pairs(table, &schemes) {
                let d = group_difference(a, b)?;
                for (j, p) in table.param_names.iter().enumerate() {
                    w.write_record([
                        name.to_string(),
                        scheme.clone(),
                        a.label.clone(),
                        b.label.clone(),
                        p.clone(),
                        format!("{:.10e}", d.difference[j]),
                        format!("{:.10e}", d.z[j]),
                        format!("{:.10e}", d.pvalue[j]),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    })?;
    if cfg.markdown {
        let mut md = String::from("## Mean Group: Stage 1\n\n");
        md.push_str(&mg_stage1.to_markdown());
        if let Some(t) = &mg_exposures {
            md.push_str("\n## Mean Group: exposures\n\n");
            md.push_str(&t.to_markdown());
        }
        out.write_bytes("tables.md", md.as_bytes())?;
    }
    out.finish("estimate", run.seed, &cfg.canonical()?)
}

/// Column label for group `label` of `scheme`.
fn column_label(scheme: &str, label: &str) -> String {
    format!("{scheme}:{label}")
}

fn mg_table(
    thetas: &[DVector<f64>],
    unit_ids: &[String],
    params: &[String],
    schemes: &[GroupMap],
    periods: usize,
) -> Result<MgTable> {
    let mut columns = vec![mean_group(thetas, unit_ids, "all")?];
    for s in schemes {
        for (label, members) in s.groups(unit_ids) {
            let th: Vec<DVector<f64>> = members.iter().map(|&i| thetas[i].clone()).collect();
            let ids: Vec<String> = members.iter().map(|&i| unit_ids[i].clone()).collect();
            columns.push(mean_group(&th, &ids, &column_label(&s.scheme, &label))?);
        }
    }
    Ok(MgTable {
        param_names: params.to_vec(),
        columns,
        periods,
    })
}

/// Two-group schemes, as (scheme, first, second) columns of `table`.
fn pairs<'t>(table: &'t MgTable, schemes: &[GroupMap]) -> Vec<(String, &'t MeanGroupResult, &'t MeanGroupResult)> {
    let mut out = Vec::new();
    for s in schemes {
        let prefix = format!("{}:", s.scheme);
        let cols: Vec<&MeanGroupResult> = table.columns.iter().filter(|c| c.label.starts_with(&prefix)).collect();
        if cols.len() == 2 {
            out.push((s.scheme.clone(), cols[0], cols[1]));
        }
    }
    out
}

pub fn mc(run: Run<'_>) -> Result<()> {
    let cfg = run.config;
    let cells = cfg.validate_mc()?;
    let settings = cfg.mc.settings(run.seed);
    let grid = run_grid(&cells, &settings)?;
    let mut out = run.out;
    for metric in MeanMetrics::NAMES {
        out.write(&format!("{metric}.csv"), |b| grid.write_metric_table(metric, b))?;
    }
    out.write("summary.csv", |b| grid.write_summary(b))?;
    if cfg.markdown {
        let mut md = String::new();
        for metric in MeanMetrics::NAMES {
            let mut buf = Vec::new();
            grid.write_metric_table(metric, &mut buf)?;
            md.push_str(&format!("## {metric}\n\n"));
            md.push_str(&csv_to_markdown(&buf)?);
            md.push('\n');
        }
        let mut buf = Vec::new();
        grid.write_summary(&mut buf)?;
        md.push_str("## summary\n\n");
        md.push_str(&csv_to_markdown(&buf)?);
        out.write_bytes("tables.md", md.as_bytes())?;
    }
    println!(
        "mc: {} cells x {} methods, {} reps each",
        grid.cells.len(),
        grid.methods.len(),
        grid.reps
    );
    out.finish("mc", run.seed, &cfg.canonical()?)
}

fn csv_to_markdown(bytes: &[u8]) -> Result<String> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(bytes);
    let rows = rdr
        .records()
        .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
    Ok(render_markdown(&rows))
}

pub fn synth(run: Run<'_>) -> Result<()> {
    let data = generate(&run.config.synth, run.seed)?;
    let mut out = run.out;
    data.write_dir(out.path()?)?;
    for name in ["panel.csv", "factors.csv", "proxies.csv", "groups.csv"] {
        out.record(name)?;
    }
    out.write("truth.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["param", "mean"])?;
        let names = param_names(&run.config.synth);
        for (n, v) in names.iter().zip(run.config.synth.theta_mean().iter()) {
            w.write_record([n.clone(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })?;
    out.write("estimate.toml", |buf| {
        let text = estimate_config(&run.config.synth)?;
        buf.extend_from_slice(text.as_bytes());
        Ok(())
    })?;
    println!(
        "synth: {} units x {} periods, informative proxies {:?}",
        data.panel.n(),
        data.panel.t(),
        data.informative
    );
    out.finish("synth", run.seed, &run.config.canonical()?)
}

/// Config that estimates the written dataset with the generating model.
fn estimate_config(cfg: &dcpanel::synthetic::SyntheticConfig) -> Result<String> {
    #[derive(serde::Serialize)]
    struct Inputs {
        panel: &'static str,
        factors: &'static str,
        proxies: &'static str,
        groups: &'static str,
    }
    #[derive(serde::Serialize)]
    struct EstimateFile {
        inputs: Inputs,
        model: dcpanel::stage1::ModelSpec,
    }
    let file = EstimateFile {
        inputs: Inputs {
            panel: "panel.csv",
            factors: "factors.csv",
            proxies: "proxies.csv",
            groups: "groups.csv",
        },
        model: cfg.spec(),
    };
    toml::to_string(&file).map_err(|e| dcpanel::Error::InvalidConfig(format!("estimate.toml: {e}")))
}

fn param_names(cfg: &dcpanel::synthetic::SyntheticConfig) -> Vec<String> {
    let spec = cfg.spec();
    let mut names = vec!["lag_outcome".to_string()];
    names.extend(spec.regressors.iter().cloned());
    names.extend((1..=cfg.k_y).map(|j| format!("y{j}")));
    names.push("intercept".to_string());
    names
}
