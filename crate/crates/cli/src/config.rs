//! Run configuration: one TOML file drives every subcommand.
//!
//! ```toml
//! [paths]
//! boundary = "boundary.geojson"   # GeoJSON-style polygon, lon/lat WGS84
//! crimes = "crimes.csv"           # kind,lat,lon,timestamp
//! blitzes = "blitzes.csv"         # lat,lon,start,end,officers,vehicles,type,...
//! output_dir = "out"
//!
//! [grid]
//! nominal_cell_area_km2 = 0.126
//!
//! [window]
//! start_date = "2012-01-01"       # local civil time, no DST handling
//! n_days = 721
//!
//! [weights]
//! contiguity = true               # include a binary-contiguity fit column
//! cutoffs_m = [500.0, 750.0, 1000.0, 1500.0]
//! row_standardize = true
//!
//! [model]
//! lags = [1, 2, 3]                # explicit lag set, or use lag_max
//! lag_max = 16                    # shorthand for lags = 1..=16
//! interactions = ["seizures"]     # covariates interacted with blitz hours
//! conley = true                   # attach Conley SEs at each fit's cutoff
//! preferred_cutoff_m = 1000.0     # fit feeding the effects module
//!
//! [effects]
//! currency = "BRL"
//! value_statistical_life = 1119000.0
//! value_statistical_robbery = 9861.61
//! murder_share = 0.05
//! fines_total = 13740000.0
//! officers_per_blitz = 30
//! vehicles_needed = 10
//! salary_per_year = 50000.0
//! vehicle_unit_cost = 150000.0
//! years = 2.0
//!
//! [sim]                           # optional; used by `simulate`
//! n_cells = 400                   # approximate: the tessellated count wins
//! n_days = 360
//! true_delta = -0.28
//! true_theta = 0.046
//! true_rho = -0.05
//! true_lags = { "7" = -0.06 }
//! fe_a_sd = 0.3
//! fe_day_sd = 0.15
//! base_log_rate = -3.912
//! prob_treated = 0.05
//! seed = 20120109
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use placeval_core::effects::{CostBenefitParams, Money};
use placeval_core::simkit::DGPConfig;
use placeval_core::weights::WeightScheme;
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub boundary: Option<PathBuf>,
    pub crimes: Option<PathBuf>,
    pub blitzes: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nominal_cell_area_km2: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub start_date: String,
    pub n_days: u32,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    #[serde(default = "default_true")]
    pub contiguity: bool,
    #[serde(default)]
    pub cutoffs_m: Vec<f64>,
    #[serde(default = "default_true")]
    pub row_standardize: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub lags: Option<Vec<usize>>,
    #[serde(default)]
    pub lag_max: Option<usize>,
    #[serde(default)]
    pub interactions: Vec<String>,
    #[serde(default = "default_true")]
    pub conley: bool,
    #[serde(default)]
    pub preferred_cutoff_m: Option<f64>,
}

impl ModelConfig {
    /// Explicit lag set, `lag_max` shorthand, or the default 1..=16.
    pub fn lag_set(&self) -> Vec<usize> {
        if let Some(lags) = &self.lags {
            let mut v = lags.clone();
            v.sort_unstable();
            v.dedup();
            return v;
        }
        (1..=self.lag_max.unwrap_or(16)).collect()
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectsConfig {
    #[serde(default = "default_currency")]
    pub currency: String,
    pub value_statistical_life: f64,
    pub value_statistical_robbery: f64,
    pub murder_share: f64,
    #[serde(default)]
    pub fines_total: f64,
    pub officers_per_blitz: u32,
    pub vehicles_needed: u32,
    pub salary_per_year: f64,
    pub vehicle_unit_cost: f64,
    pub years: f64,
}

fn default_currency() -> String {
    "BRL".to_string()
}

impl EffectsConfig {
    /// Money parameters with the data-driven fields filled by the pipeline.
    pub fn cost_benefit_params(
        &self,
        treated_cell_periods: u64,
        avg_treated_outcome: f64,
        effect_fraction: f64,
    ) -> CostBenefitParams {
        CostBenefitParams {
            value_statistical_life: Money::from_major(self.value_statistical_life, &self.currency),
            value_statistical_robbery: Money::from_major(
                self.value_statistical_robbery,
                &self.currency,
            ),
            murder_share: self.murder_share,
            treated_cell_periods,
            avg_treated_outcome,
            effect_fraction,
            fines_total: Money::from_major(self.fines_total, &self.currency),
            officers_per_blitz: self.officers_per_blitz,
            vehicles_needed: self.vehicles_needed,
            salary_per_year: Money::from_major(self.salary_per_year, &self.currency),
            vehicle_unit_cost: Money::from_major(self.vehicle_unit_cost, &self.currency),
            years: self.years,
        }
    }
}

/// `[sim]` section: mirrors the generative configuration with string-keyed
/// lag effects (TOML maps need string keys).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_cells: u32,
    pub n_days: u32,
    pub true_delta: f64,
    pub true_theta: f64,
    pub true_rho: f64,
    #[serde(default)]
    pub true_lags: BTreeMap<String, f64>,
    pub fe_a_sd: f64,
    pub fe_day_sd: f64,
    pub base_log_rate: f64,
    pub prob_treated: f64,
    #[serde(default = "default_scheme")]
    pub weight_scheme: String,
    #[serde(default)]
    pub cutoff_m: Option<f64>,
    #[serde(default = "default_true")]
    pub row_standardize: bool,
    #[serde(default = "default_cell_area")]
    pub cell_area_km2: f64,
    pub seed: u64,
}

fn default_scheme() -> String {
    "inverse_distance".to_string()
}

fn default_cell_area() -> f64 {
    0.126
}

impl SimConfig {
    pub fn to_dgp(&self) -> Result<DGPConfig> {
        let weight_scheme = match self.weight_scheme.as_str() {
            "inverse_distance" => WeightScheme::InverseDistance,
            "contiguity" => WeightScheme::BinaryContiguity,
            other => bail!("unknown weight scheme `{other}`"),
        };
        let mut true_lags = BTreeMap::new();
        for (key, &v) in &self.true_lags {
            let j: usize = key
                .parse()
                .with_context(|| format!("lag key `{key}` is not an integer"))?;
            true_lags.insert(j, v);
        }
        Ok(DGPConfig {
            n_cells: self.n_cells,
            n_days: self.n_days,
            true_delta: self.true_delta,
            true_theta: self.true_theta,
            true_rho: self.true_rho,
            true_lags,
            fe_a_sd: self.fe_a_sd,
            fe_day_sd: self.fe_day_sd,
            base_log_rate: self.base_log_rate,
            prob_treated: self.prob_treated,
            weight_scheme,
            cutoff_m: self.cutoff_m,
            row_standardize: self.row_standardize,
            cell_area_km2: self.cell_area_km2,
            seed: self.seed,
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub grid: GridConfig,
    pub window: WindowConfig,
    pub weights: WeightsConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub effects: Option<EffectsConfig>,
    pub sim: Option<SimConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<(RunConfig, Vec<u8>)> {
        let bytes = std::fs::read(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let text = String::from_utf8(bytes.clone()).context("config is not UTF-8")?;
        let config: RunConfig = toml::from_str(&text).context("invalid config")?;
        config.validate()?;
        Ok((config, bytes))
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.nominal_cell_area_km2 <= 0.0 {
            bail!("grid.nominal_cell_area_km2 must be positive");
        }
        if self.window.n_days == 0 {
            bail!("window.n_days must be positive");
        }
        self.window
            .start_date
            .parse::<chrono::NaiveDate>()
            .context("window.start_date must be YYYY-MM-DD")?;
        if !self.weights.contiguity && self.weights.cutoffs_m.is_empty() {
            bail!("weights: enable contiguity or provide at least one cutoff");
        }
        for &c in &self.weights.cutoffs_m {
            if c <= 0.0 {
                bail!("weights.cutoffs_m entries must be positive, got {c}");
            }
        }
        if let Some(e) = &self.effects {
            if !(0.0..=1.0).contains(&e.murder_share) {
                bail!("effects.murder_share must lie in [0,1]");
            }
            if e.years <= 0.0 {
                bail!("effects.years must be positive");
            }
        }
        Ok(())
    }

    pub fn start_date(&self) -> chrono::NaiveDate {
        self.window.start_date.parse().expect("validated date")
    }
}
