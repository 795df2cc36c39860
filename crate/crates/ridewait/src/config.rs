//! Run configuration: one JSON document with a section per subsystem.
//! Unknown keys are rejected, missing keys take the documented defaults,
//! and the fully-resolved document is echoed into every output directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::gbt::GbtParams;
use crate::interactions::{KmeansParams, MfParams};
use crate::synth::SynthConfig;
use crate::trip::{RegionGrid, SlotConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemandSupplyConfig {
    pub granularity_minutes: u32,
}

impl Default for DemandSupplyConfig {
    fn default() -> Self {
        DemandSupplyConfig {
            granularity_minutes: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct InteractionsConfig {
    pub mf: MfParams,
    pub kmeans: KmeansParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Fraction of trips (chronologically earliest) used for training.
    pub train_frac: f64,
    /// Ridge strength for the linear baseline.
    pub ridge: f64,
    /// Error-CDF thresholds in seconds, ascending.
    pub cdf_thresholds_s: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            train_frac: 0.8,
            ridge: 1.0,
            cdf_thresholds_s: vec![30.0, 60.0, 120.0, 180.0, 300.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: RegionGrid,
    pub slots: SlotConfig,
    pub demand_supply: DemandSupplyConfig,
    pub interactions: InteractionsConfig,
    pub gbt: GbtParams,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}



impl RunConfig {
    /// Loads a config file, or the full defaults when no path is given.
    /// Validation reports every violation, not just the first.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let cfg = match path {
            Some(p) => {
                let text = fsio::read_to_string(p)?;
                serde_json::from_str::<RunConfig>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        let errs = cfg.validate();
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        errs.extend(self.grid.validate());
        errs.extend(self.slots.validate());
        if self.demand_supply.granularity_minutes == 0
            || 7 * 24 * 60 % self.demand_supply.granularity_minutes != 0
        {
            errs.push(format!(
                "demand_supply.granularity_minutes must divide a week, got {}",
                self.demand_supply.granularity_minutes
            ));
        }
        errs.extend(self.interactions.mf.validate());
        errs.extend(self.interactions.kmeans.validate());
        errs.extend(self.gbt.validate());
        let frac = self.eval.train_frac;
        if frac.is_nan() || frac <= 0.0 || frac >= 1.0 {
            errs.push(format!(
                "eval.train_frac must be in (0, 1), got {}",
                self.eval.train_frac
            ));
        }
        if !self.eval.ridge.is_finite() || self.eval.ridge < 0.0 {
            errs.push("eval.ridge must be finite and non-negative".to_string());
        }
        if self.eval.cdf_thresholds_s.is_empty() {
            errs.push("eval.cdf_thresholds_s must not be empty".to_string());
        }
        if self
            .eval
            .cdf_thresholds_s
            .windows(2)
            .any(|w| w[0].is_nan() || w[1].is_nan() || w[0] >= w[1])
        {
            errs.push("eval.cdf_thresholds_s must be strictly ascending".to_string());
        }
        if self
            .eval
            .cdf_thresholds_s
            .iter()
            .any(|t| !t.is_finite() || *t < 0.0)
        {
            errs.push("eval.cdf_thresholds_s must be finite and non-negative".to_string());
        }
        errs.extend(self.synth.validate(&self.grid));
        errs
    }

    /// Pretty JSON of the fully-resolved config for echoing beside outputs.
    pub fn resolved_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
