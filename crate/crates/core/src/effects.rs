//! Effect sizes, optimal dosage, counterfactuals, and cost-benefit sums.
//!
//! Dose-response arithmetic works on the log-intensity scale: a treatment of
//! h hours shifts log crime intensity by delta*h + theta*h^2. The one-hour
//! headline effect is therefore (exp(delta + theta) - 1) x 100 - the quadratic
//! term evaluated at one hour, not the derivative at zero. Money is carried
//! in integer minor units with an explicit currency tag; currency conversion
//! is a display operation only.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An amount in integer minor units (e.g. centavos) of a tagged currency.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Money {
    pub minor_units: i64,
    pub currency: String,
}

impl Money {
    pub fn new(minor_units: i64, currency: &str) -> Money {
        Money { minor_units, currency: currency.to_string() }
    }

    /// Rounds a major-unit amount (e.g. 9861.61) to integer minor units.
    pub fn from_major(amount: f64, currency: &str) -> Money {
        Money { minor_units: (amount * 100.0).round() as i64, currency: currency.to_string() }
    }

    pub fn major_units(&self) -> f64 {
        self.minor_units as f64 / 100.0
    }

    /// Scales by a real factor, rounding to the nearest minor unit.
    pub fn scale(&self, factor: f64) -> Money {
        Money {
            minor_units: (self.minor_units as f64 * factor).round() as i64,
            currency: self.currency.clone(),
        }
    }

    pub fn checked_add(&self, other: &Money) -> Result<Money> {
        if self.currency != other.currency {
            return Err(Error::InvalidParameter(format!(
                "currency mismatch: {} vs {}",
                self.currency, other.currency
            )));
        }
        Ok(Money { minor_units: self.minor_units + other.minor_units, currency: self.currency.clone() })
    }

    /// Display conversion at `rate` units of `self.currency` per unit of
    /// `target` (e.g. 5.0 BRL per USD).
    pub fn converted(&self, rate: f64, target: &str) -> Money {
        Money {
            minor_units: (self.minor_units as f64 / rate).round() as i64,
            currency: target.to_string(),
        }
    }
}

/// Log-scale dose response: fraction change in intensity after `hours` of
/// treatment, exp(delta*h + theta*h^2) - 1.
pub fn dose_effect_fraction(delta: f64, theta: f64, hours: f64) -> f64 {
    (delta * hours + theta * hours * hours).exp() - 1.0
}

/// One-hour direct effect in percent: (exp(delta + theta) - 1) x 100.
pub fn pct_effect(delta: f64, theta: f64) -> f64 {
    dose_effect_fraction(delta, theta, 1.0) * 100.0
}

/// Spillover effect in percent of one neighboring treated hour spread over
/// the average ring: (exp(rho / avg_neighbors) - 1) x 100.
pub fn spatial_effect(rho: f64, avg_neighbors: f64) -> Result<f64> {
    if !(avg_neighbors > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "average neighbor count must be positive, got {avg_neighbors}"
        )));
    }
    Ok(((rho / avg_neighbors).exp() - 1.0) * 100.0)
}

/// Raw stationary point of the quadratic dose response, -delta / (2 theta).
/// For theta > 0 it is the crime-minimizing dose; for theta < 0 the
/// output-maximizing dose.
pub fn stationary_dose(delta: f64, theta: f64) -> Result<f64> {
    if theta == 0.0 || !theta.is_finite() {
        return Err(Error::NoInteriorMinimum("theta is zero; dose response is linear".into()));
    }
    Ok(-delta / (2.0 * theta))
}

/// Crime-minimizing hours, clipped to the feasible [0, 6] period length.
/// Requires an interior minimum (theta > 0).
pub fn optimal_duration(delta: f64, theta: f64) -> Result<f64> {
    if theta <= 0.0 {
        return Err(Error::NoInteriorMinimum(format!(
            "theta = {theta} gives no interior minimum"
        )));
    }
    Ok(stationary_dose(delta, theta)?.clamp(0.0, 6.0))
}

/// Counterfactual outcome level implied by undoing a proportional effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Counterfactual {
    /// Outcome level had the treatment not happened.
    pub baseline: f64,
    /// Outcomes prevented per treated cell-period.
    pub prevented_per_period: f64,
    /// Prevented outcomes across all treated cell-periods.
    pub total_prevented: f64,
}

/// Undoes `effect_fraction` from the observed treated mean:
/// baseline = observed / (1 + effect_fraction).
pub fn counterfactual_prevented(
    avg_treated_outcome: f64,
    effect_fraction: f64,
    treated_cell_periods: u64,
) -> Result<Counterfactual> {
    if effect_fraction <= -1.0 || effect_fraction > 0.0 {
        return Err(Error::InvalidParameter(format!(
            "effect fraction must lie in (-1, 0], got {effect_fraction}"
        )));
    }
    let baseline = avg_treated_outcome / (1.0 + effect_fraction);
    let prevented_per_period = baseline - avg_treated_outcome;
    Ok(Counterfactual {
        baseline,
        prevented_per_period,
        total_prevented: prevented_per_period * treated_cell_periods as f64,
    })
}

/// Inputs of the cost-benefit summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostBenefitParams {
    pub value_statistical_life: Money,
    pub value_statistical_robbery: Money,
    /// Share of prevented outcomes that are fatal, in [0, 1].
    pub murder_share: f64,
    pub treated_cell_periods: u64,
    pub avg_treated_outcome: f64,
    /// Signed proportional effect in (-1, 0].
    pub effect_fraction: f64,
    pub fines_total: Money,
    pub officers_per_blitz: u32,
    pub vehicles_needed: u32,
    pub salary_per_year: Money,
    pub vehicle_unit_cost: Money,
    pub years: f64,
}

impl CostBenefitParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.murder_share) {
            return Err(Error::InvalidParameter(format!(
                "murder share must lie in [0,1], got {}",
                self.murder_share
            )));
        }
        if !(self.years > 0.0) {
            return Err(Error::InvalidParameter(format!("years must be positive, got {}", self.years)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBenefitSummary {
    pub benefit: Money,
    pub cost: Money,
    pub fines: Money,
}

/// Values prevented outcomes and totals operating costs.
///
/// benefit = prevented x (share x VSL + (1 - share) x robbery value);
/// cost = officers x salary x years + vehicles x unit cost.
pub fn cost_benefit(params: &CostBenefitParams, total_prevented: f64) -> Result<CostBenefitSummary> {
    params.validate()?;
    let per_outcome_minor = params.murder_share * params.value_statistical_life.minor_units as f64
        + (1.0 - params.murder_share) * params.value_statistical_robbery.minor_units as f64;
    let benefit = Money {
        minor_units: (total_prevented * per_outcome_minor).round() as i64,
        currency: params.value_statistical_life.currency.clone(),
    };
    let salaries = params
        .salary_per_year
        .scale(params.officers_per_blitz as f64 * params.years);
    let vehicles = params.vehicle_unit_cost.scale(params.vehicles_needed as f64);
    let cost = salaries.checked_add(&vehicles)?;
    Ok(CostBenefitSummary { benefit, cost, fines: params.fines_total.clone() })
}

/// Full effects report in display form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectsReport {
    pub direct_pct: f64,
    pub spatial_pct: f64,
    pub lag_pcts: BTreeMap<usize, f64>,
    pub optimal_hours: f64,
    pub prevented_crimes: f64,
    pub benefit: Money,
    pub fines: Money,
    pub cost: Money,
}

impl EffectsReport {
    /// Assembles the report from fitted dose-response coefficients, the
    /// average neighbor count of the weight matrix, and cost-benefit inputs.
    pub fn build(
        delta: f64,
        theta: f64,
        rho: f64,
        lag_coefs: &BTreeMap<usize, f64>,
        avg_neighbors: f64,
        params: &CostBenefitParams,
    ) -> Result<EffectsReport> {
        let cf = counterfactual_prevented(
            params.avg_treated_outcome,
            params.effect_fraction,
            params.treated_cell_periods,
        )?;
        let summary = cost_benefit(params, cf.total_prevented)?;
        let lag_pcts = lag_coefs
            .iter()
            .map(|(&j, &g)| (j, (g.exp() - 1.0) * 100.0))
            .collect();
        Ok(EffectsReport {
            direct_pct: pct_effect(delta, theta),
            spatial_pct: spatial_effect(rho, avg_neighbors)?,
            lag_pcts,
            optimal_hours: optimal_duration(delta, theta).unwrap_or(f64::NAN),
            prevented_crimes: cf.total_prevented,
            benefit: summary.benefit,
            fines: summary.fines,
            cost: summary.cost,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plain-text summary block.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        s.push_str("effects summary\n");
        s.push_str("---------------\n");
        s.push_str(&format!("direct effect (1 h):     {:+.2}%\n", self.direct_pct));
        s.push_str(&format!("spatial effect (1 h):    {:+.3}%\n", self.spatial_pct));
        for (j, pct) in &self.lag_pcts {
            s.push_str(&format!("lag {j:>2} effect:           {pct:+.2}%\n"));
        }
        s.push_str(&format!("optimal duration:        {:.2} h\n", self.optimal_hours));
        s.push_str(&format!("prevented outcomes:      {:.1}\n", self.prevented_crimes));
        s.push_str(&format!(
            "benefit:                 {:.2} {}\n",
            self.benefit.major_units(),
            self.benefit.currency
        ));
        s.push_str(&format!(
            "fines collected:         {:.2} {}\n",
            self.fines.major_units(),
            self.fines.currency
        ));
        s.push_str(&format!(
            "operating cost:          {:.2} {}\n",
            self.cost.major_units(),
            self.cost.currency
        ));
        s
    }
}

/// Dose-response plot data over [0, 6] hours in 0.1 h steps:
/// `hours,log_effect,pct_effect` per row.
pub fn write_dose_response_csv<W: Write>(delta: f64, theta: f64, mut out: W) -> Result<()> {
    writeln!(out, "hours,log_effect,pct_effect")?;
    for step in 0..=60 {
        let h = step as f64 * 0.1;
        let log_effect = delta * h + theta * h * h;
        writeln!(out, "{:.1},{},{}", h, log_effect, (log_effect.exp() - 1.0) * 100.0)?;
    }
    Ok(())
}
