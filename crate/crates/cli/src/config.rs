//! Run configuration read from TOML, with command-line overrides applied on top.

use std::path::{Path, PathBuf};

use dcpanel::features::AmihudDivisor;
use dcpanel::montecarlo::{preset, DgpConfig, GridSettings};
use dcpanel::selection::{CvOptions, Method, MtbConfig};
use dcpanel::stage1::{ModelSpec, Stage1Config};
use dcpanel::stage2::Stage2Config;
use dcpanel::synthetic::SyntheticConfig;
use dcpanel::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Also write markdown renderings of the tables.
    pub markdown: bool,
    pub prep: PrepSection,
    pub inputs: InputSection,
    pub model: Option<ModelSpec>,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub mc: McSection,
    pub synth: SyntheticConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepSection {
    pub weekly: Option<PathBuf>,
    pub daily: Option<PathBuf>,
    pub amihud_divisor: AmihudDivisor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputSection {
    pub panel: Option<PathBuf>,
    pub factors: Option<PathBuf>,
    pub proxies: Option<PathBuf>,
    pub groups: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSection {
    /// Named grid; ignored when `designs` is non-empty.
    pub preset: Option<String>,
    pub designs: Vec<DgpConfig>,
    pub reps: usize,
    pub methods: Vec<Method>,
    pub retain_fraction: f64,
    pub mtb: MtbConfig,
    pub cv: CvOptions,
}

impl Default for McSection {
    fn default() -> Self {
        let g = GridSettings::default();
        Self {
            preset: None,
            designs: Vec::new(),
            reps: g.reps,
            methods: g.methods,
            retain_fraction: g.retain_fraction,
            mtb: g.mtb,
            cv: g.cv,
        }
    }
}

impl McSection {
    pub fn cells(&self) -> Result<Vec<DgpConfig>> {
        if !self.designs.is_empty() {
            return Ok(self.designs.clone());
        }
        preset(self.preset.as_deref().unwrap_or("paper"))
    }

    pub fn settings(&self, seed: u64) -> GridSettings {
        GridSettings {
            reps: self.reps,
            seed,
            methods: self.methods.clone(),
            mtb: self.mtb,
            cv: self.cv.clone(),
            retain_fraction: self.retain_fraction,
        }
    }
}

impl RunConfig {
    /// Reads a TOML file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.prep.weekly,
            &mut cfg.prep.daily,
            &mut cfg.inputs.panel,
            &mut cfg.inputs.factors,
            &mut cfg.inputs.proxies,
            &mut cfg.inputs.groups,
            &mut cfg.out,
        ] {
            if let Some(rel) = p.as_ref().filter(|q| q.is_relative()) {
                *p = Some(base.join(rel));
            }
        }
        Ok(cfg)
    }

    /// Canonical TOML of the effective configuration.
    pub fn canonical(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(format!("serialising config: {e}")))
    }

    pub fn validate_prep(&self) -> Result<(PathBuf, PathBuf)> {
        Ok((
            existing(&self.prep.weekly, "prep.weekly")?,
            existing(&self.prep.daily, "prep.daily")?,
        ))
    }

    pub fn validate_estimate(&self) -> Result<EstimateInputs> {
        self.stage2.mtb.validate()?;
        let model = self
            .model
            .clone()
            .ok_or_else(|| Error::InvalidConfig("estimate needs a [model] section".into()))?;
        if model.semi_endogenous.is_empty() {
            return Err(Error::InvalidConfig("model.semi_endogenous is empty".into()));
        }
        if self.stage1.zeta == 0 {
            return Err(Error::InvalidConfig("stage1.zeta must be at least 1".into()));
        }
        let groups = match &self.inputs.groups {
            Some(_) => Some(existing(&self.inputs.groups, "inputs.groups")?),
            None => None,
        };
        Ok(EstimateInputs {
            panel: existing(&self.inputs.panel, "inputs.panel")?,
            factors: existing(&self.inputs.factors, "inputs.factors")?,
            proxies: existing(&self.inputs.proxies, "inputs.proxies")?,
            groups,
            model,
        })
    }

    pub fn validate_mc(&self) -> Result<Vec<DgpConfig>> {
        let mc = &self.mc;
        if mc.reps == 0 {
            return Err(Error::InvalidConfig("mc.reps must be at least 1".into()));
        }
        if mc.methods.is_empty() {
            return Err(Error::InvalidConfig("mc.methods is empty".into()));
        }
        if !(mc.retain_fraction > 0.0 && mc.retain_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "mc.retain_fraction {} not in (0,1]",
                mc.retain_fraction
            )));
        }
        if mc.cv.folds < 2 || mc.cv.n_lambda == 0 {
            return Err(Error::InvalidConfig("mc.cv needs folds >= 2 and n_lambda >= 1".into()));
        }
        mc.mtb.validate()?;
        let cells = mc.cells()?;
        for c in &cells {
            c.validate()?;
        }
        Ok(cells)
    }
}

pub struct EstimateInputs {
    pub panel: PathBuf,
    pub factors: PathBuf,
    pub proxies: PathBuf,
    pub groups: Option<PathBuf>,
    pub model: ModelSpec,
}

fn existing(p: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    let p = p
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig(format!("{key} is not set")))?;
    if !p.is_file() {
        return Err(Error::Validation(format!("{key}: {} does not exist", p.display())));
    }
    Ok(p.clone())
}
