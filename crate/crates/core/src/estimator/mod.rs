//! Fixed-effects Poisson and linear regression with high-dimensional fixed
//! effects, cluster-robust and spatial-HAC inference, Wald joint tests, and
//! information criteria.
//!
//! Fixed effects are never materialized: each weighted least-squares step
//! demeans the working response and regressors across all FE dimensions by
//! alternating projections until within-group weighted means fall below
//! 1e-8. For the Poisson family, every group whose outcome sums to zero over
//! the estimation sample is dropped up front (its fixed effect diverges) and
//! recorded. Convergence is declared when the relative deviance change drops
//! below 1e-9, with step-halving (up to 10 times) whenever a step would
//! increase the deviance.

mod data;
mod projections;
mod vcov;

pub use data::{DataSource, Table};
pub use vcov::{vcov_cluster, vcov_conley, wald_joint_test, ConleyVcov, WaldTest};

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use projections::{
    cholesky_inverse, cholesky_solve, cholesky_with_pivot_check, demean_columns, det_sum_by,
    normal_equations, GroupIndex,
};

const MAX_IRLS_ITERATIONS: usize = 100;
const DEVIANCE_RTOL: f64 = 1e-9;
const PROJECTION_TOL: f64 = 1e-8;
const MAX_PROJECTION_SWEEPS: usize = 20_000;
const MAX_STEP_HALVINGS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Poisson,
    Linear,
}

/// Fixed-effect dimensions a data source can provide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeDim {
    /// cell x period-of-day x day-of-week composite.
    CellPeriodDow,
    Day,
    Cell,
    Period,
    DayOfWeek,
}

/// Covariance estimator request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum VcovSpec {
    ClusterCell,
    ConleySpatial { cutoff_m: f64 },
}

impl VcovSpec {
    pub fn label(&self) -> String {
        match self {
            VcovSpec::ClusterCell => "cluster_cell".to_string(),
            VcovSpec::ConleySpatial { cutoff_m } => format!("conley_{}m", cutoff_m.round() as i64),
        }
    }
}

/// What to fit: outcome, regressors, FE dimensions, family, and requested
/// covariance estimators.
///
/// Cluster covariances are computed during the fit; Conley covariances need
/// cell centroids and are attached afterwards via [`vcov_conley`] and
/// [`FitResult::attach_vcov`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub outcome: String,
    pub regressors: Vec<String>,
    pub fe_dims: Vec<FeDim>,
    pub family: Family,
    pub vcov: Vec<VcovSpec>,
}

impl ModelSpec {
    fn validate(&self) -> Result<()> {
        if self.regressors.is_empty() {
            return Err(Error::InvalidParameter("model needs at least one regressor".into()));
        }
        let mut names = self.regressors.clone();
        names.sort();
        names.dedup();
        if names.len() != self.regressors.len() {
            return Err(Error::InvalidParameter("duplicate regressor names".into()));
        }
        if self.fe_dims.is_empty() {
            return Err(Error::InvalidParameter("model needs at least one FE dimension".into()));
        }
        Ok(())
    }
}

/// Groups removed before estimation because their outcome sum was zero.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DroppedGroups {
    /// Total number of dropped groups across FE dimensions.
    pub count: usize,
    /// Raw (undensified) dropped group ids per FE dimension.
    pub ids_per_dim: Vec<(FeDim, Vec<u32>)>,
    /// Observation rows removed along with the groups.
    pub rows_dropped: usize,
}

/// Per-observation pieces kept for sandwich covariances.
#[derive(Debug, Clone)]
pub struct InferenceData {
    /// n x k score rows s_i = (y_i - mu_i) x~_i (residual e_i x~_i for the
    /// linear family).
    pub(crate) scores: Vec<f64>,
    pub(crate) k: usize,
    /// (X~' W X~)^{-1}.
    pub(crate) bread: DMatrix<f64>,
    pub(crate) cells: Vec<u32>,
    pub(crate) times: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct VcovEntry {
    pub spec: VcovSpec,
    pub matrix: DMatrix<f64>,
    pub psd_repaired: bool,
}

/// Fit output: coefficients, covariances, likelihood metrics, and the drop
/// ledger, plus retained score/bread data for further covariance work.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub family: Family,
    pub coefficients: Vec<(String, f64)>,
    pub vcovs: Vec<VcovEntry>,
    pub loglik: f64,
    pub bic: f64,
    pub n_obs_used: usize,
    pub dropped: DroppedGroups,
    pub converged: bool,
    pub iterations: usize,
    pub(crate) inference: InferenceData,
}

impl FitResult {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.coefficients.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn coefficient_index(&self, name: &str) -> Option<usize> {
        self.coefficients.iter().position(|(n, _)| n == name)
    }

    pub fn vcov(&self, spec: &VcovSpec) -> Option<&DMatrix<f64>> {
        self.vcovs.iter().find(|e| &e.spec == spec).map(|e| &e.matrix)
    }

    /// Standard error of a coefficient under a stored covariance.
    pub fn se(&self, spec: &VcovSpec, name: &str) -> Option<f64> {
        let i = self.coefficient_index(name)?;
        self.vcov(spec).map(|v| v[(i, i)].max(0.0).sqrt())
    }

    /// Cluster (cell) id of every used observation.
    pub fn obs_cells(&self) -> &[u32] {
        &self.inference.cells
    }

    pub fn obs_times(&self) -> &[u32] {
        &self.inference.times
    }

    pub fn attach_vcov(&mut self, spec: VcovSpec, matrix: DMatrix<f64>, psd_repaired: bool) {
        self.vcovs.retain(|e| e.spec != spec);
        self.vcovs.push(VcovEntry { spec, matrix, psd_repaired });
    }

    /// JSON document with the coefficient map, per-vcov standard errors, fit
    /// metrics, the dropped-group count, and the convergence block.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Convergence {
            converged: bool,
            iterations: usize,
        }
        #[derive(Serialize)]
        struct Dropped {
            count: usize,
            rows_dropped: usize,
        }
        #[derive(Serialize)]
        struct View<'a> {
            family: &'a Family,
            coefficients: IndexMap<&'a str, f64>,
            standard_errors: IndexMap<String, IndexMap<&'a str, f64>>,
            loglik: f64,
            bic: f64,
            n_obs_used: usize,
            dropped_groups: Dropped,
            convergence: Convergence,
            vcov_psd_repaired: IndexMap<String, bool>,
        }
        let coefficients: IndexMap<&str, f64> =
            self.coefficients.iter().map(|(n, v)| (n.as_str(), *v)).collect();
        let mut standard_errors = IndexMap::new();
        let mut vcov_psd_repaired = IndexMap::new();
        for entry in &self.vcovs {
            let ses: IndexMap<&str, f64> = self
                .coefficients
                .iter()
                .enumerate()
                .map(|(i, (n, _))| (n.as_str(), entry.matrix[(i, i)].max(0.0).sqrt()))
                .collect();
            standard_errors.insert(entry.spec.label(), ses);
            vcov_psd_repaired.insert(entry.spec.label(), entry.psd_repaired);
        }
        Ok(serde_json::to_string_pretty(&View {
            family: &self.family,
            coefficients,
            standard_errors,
            loglik: self.loglik,
            bic: self.bic,
            n_obs_used: self.n_obs_used,
            dropped_groups: Dropped {
                count: self.dropped.count,
                rows_dropped: self.dropped.rows_dropped,
            },
            convergence: Convergence { converged: self.converged, iterations: self.iterations },
            vcov_psd_repaired,
        })?)
    }
}

/// Bayesian information criterion on the concentrated likelihood: slope
/// coefficients only, fixed effects excluded.
pub fn bic(loglik: f64, n_slopes: usize, n_obs_used: usize) -> f64 {
    -2.0 * loglik + n_slopes as f64 * (n_obs_used as f64).ln()
}

struct CompactDesign {
    y: Vec<f64>,
    x: Vec<Vec<f64>>,
    names: Vec<String>,
    fe: Vec<GroupIndex>,
    cells: Vec<u32>,
    times: Vec<u32>,
    dropped: DroppedGroups,
}

/// Extracts the estimation sample (finite outcome and regressors) and, for
/// the Poisson family, removes zero-outcome groups dimension by dimension.
fn compact<D: DataSource>(data: &D, spec: &ModelSpec) -> Result<CompactDesign> {
    let n_all = data.n_rows();
    let y_all = data.outcome(&spec.outcome)?;
    if y_all.len() != n_all {
        return Err(Error::DimensionMismatch { expected: n_all, actual: y_all.len() });
    }
    let x_all: Vec<&[f64]> = spec
        .regressors
        .iter()
        .map(|name| data.column(name))
        .collect::<Result<_>>()?;
    let fe_raw: Vec<Vec<u32>> =
        spec.fe_dims.iter().map(|&d| data.fe_groups(d)).collect::<Result<_>>()?;
    let cells_all = data.cell_ids();
    let times_all = data.time_ids();

    let mut keep: Vec<usize> = (0..n_all)
        .filter(|&i| y_all[i].is_finite() && x_all.iter().all(|c| c[i].is_finite()))
        .collect();
    let sample_size = keep.len();

    if spec.family == Family::Poisson {
        for &i in &keep {
            let v = y_all[i];
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "Poisson outcome `{}` must be a nonnegative integer column (row {i} = {v})",
                    spec.outcome
                )));
            }
        }
        // one pass per dimension suffices: dropped rows carry zero outcomes
        // and cannot change any other dimension's group sums
    }

    let mut dropped = DroppedGroups::default();
    if spec.family == Family::Poisson {
        for (dim_idx, dim) in spec.fe_dims.iter().enumerate() {
            let raw = &fe_raw[dim_idx];
            let mut sums: std::collections::BTreeMap<u32, f64> = std::collections::BTreeMap::new();
            for &i in &keep {
                *sums.entry(raw[i]).or_insert(0.0) += y_all[i];
            }
            let zero_ids: Vec<u32> =
                sums.iter().filter(|&(_, &s)| s == 0.0).map(|(&g, _)| g).collect();
            if !zero_ids.is_empty() {
                let zero_set: std::collections::BTreeSet<u32> = zero_ids.iter().copied().collect();
                keep.retain(|&i| !zero_set.contains(&raw[i]));
            }
            dropped.count += zero_ids.len();
            dropped.ids_per_dim.push((*dim, zero_ids));
        }
    }
    dropped.rows_dropped = sample_size - keep.len();

    if keep.is_empty() {
        return Err(Error::EmptySample);
    }

    let y: Vec<f64> = keep.iter().map(|&i| y_all[i]).collect();
    let x: Vec<Vec<f64>> = x_all
        .iter()
        .map(|col| keep.iter().map(|&i| col[i]).collect())
        .collect();
    let fe: Vec<GroupIndex> = fe_raw
        .iter()
        .map(|raw| {
            let sub: Vec<u32> = keep.iter().map(|&i| raw[i]).collect();
            GroupIndex::new(&sub)
        })
        .collect();
    let cells: Vec<u32> = keep.iter().map(|&i| cells_all[i]).collect();
    let times: Vec<u32> = keep.iter().map(|&i| times_all[i]).collect();
    Ok(CompactDesign { y, x, names: spec.regressors.clone(), fe, cells, times, dropped })
}

fn poisson_deviance(y: &[f64], eta: &[f64]) -> f64 {
    det_sum_by(y.len(), |i| {
        let mu = eta[i].min(700.0).exp();
        let yi = y[i];
        let term = if yi > 0.0 { yi * (yi.ln() - eta[i]) } else { 0.0 };
        2.0 * (term - (yi - mu))
    })
}

fn poisson_loglik(y: &[f64], eta: &[f64]) -> f64 {
    det_sum_by(y.len(), |i| y[i] * eta[i] - eta[i].min(700.0).exp() - ln_gamma(y[i] + 1.0))
}

struct InnerFit {
    beta: DVector<f64>,
    scores: Vec<f64>,
    bread: DMatrix<f64>,
    loglik: f64,
    converged: bool,
    iterations: usize,
}

/// IRLS with FE concentration by alternating projections. `k = 0` (no
/// regressors) is allowed and fits the FE-only model.
fn fit_poisson_inner(d: &CompactDesign) -> Result<InnerFit> {
    let n = d.y.len();
    let k = d.x.len();
    // starting values: slopes zero, FE at log(group mean + 1e-8) of the
    // finest (first) dimension
    let gi0 = &d.fe[0];
    let sums = gi0.group_sums(&d.y);
    let mut eta: Vec<f64> = vec![0.0; n];
    for g in 0..gi0.n_groups {
        let m = sums[g] / gi0.members(g).len() as f64;
        let e = (m + 1e-8).ln();
        for &r in gi0.members(g) {
            eta[r as usize] = e;
        }
    }
    let mut dev_old = poisson_deviance(&d.y, &eta);
    let mut beta = DVector::zeros(k);
    let mut converged = false;
    let mut iterations = 0;

    let mut xt: Vec<Vec<f64>> = vec![vec![0.0; n]; k];
    let mut zt: Vec<f64> = vec![0.0; n];
    let mut w: Vec<f64> = vec![0.0; n];
    let mut z_orig: Vec<f64> = vec![0.0; n];

    for iter in 1..=MAX_IRLS_ITERATIONS {
        iterations = iter;
        for i in 0..n {
            let mu = eta[i].min(700.0).exp();
            let wi = mu.max(1e-12);
            w[i] = wi;
            let z = eta[i] + (d.y[i] - mu) / wi;
            z_orig[i] = z;
            zt[i] = z;
        }
        for (a, col) in d.x.iter().enumerate() {
            xt[a].copy_from_slice(col);
        }
        {
            let mut cols: Vec<&mut [f64]> = xt.iter_mut().map(|c| c.as_mut_slice()).collect();
            cols.push(zt.as_mut_slice());
            demean_columns(&d.fe, &mut cols, &w, PROJECTION_TOL, MAX_PROJECTION_SWEEPS);
        }
        let beta_new = if k > 0 {
            let (xtwx, xtwz) = normal_equations(&xt, &zt, &w);
            let l = cholesky_with_pivot_check(&xtwx)
                .map_err(|j| Error::SingularColumn(d.names[j].clone()))?;
            cholesky_solve(&l, &xtwz)
        } else {
            DVector::zeros(0)
        };
        // eta implied by the WLS step: z - (z~ - X~ beta)
        let eta_full: Vec<f64> = (0..n)
            .map(|i| {
                let mut fit = 0.0;
                for a in 0..k {
                    fit += xt[a][i] * beta_new[a];
                }
                z_orig[i] - (zt[i] - fit)
            })
            .collect();
        // step-halving when the deviance would increase
        let mut step = 1.0;
        let mut eta_new: Vec<f64>;
        let mut dev_new: f64;
        let mut halvings = 0;
        loop {
            eta_new = (0..n).map(|i| eta[i] + step * (eta_full[i] - eta[i])).collect();
            dev_new = poisson_deviance(&d.y, &eta_new);
            if dev_new <= dev_old * (1.0 + 1e-12) + 1e-12 || halvings >= MAX_STEP_HALVINGS {
                break;
            }
            halvings += 1;
            step *= 0.5;
        }
        eta = eta_new;
        beta = beta_new;
        let delta = (dev_new - dev_old).abs();
        dev_old = dev_new;
        if delta <= DEVIANCE_RTOL * (dev_old.abs() + 1e-10) {
            converged = true;
            break;
        }
    }

    // inference pieces at the converged weights
    for i in 0..n {
        w[i] = eta[i].min(700.0).exp().max(1e-12);
    }
    for (a, col) in d.x.iter().enumerate() {
        xt[a].copy_from_slice(col);
    }
    let bread = if k > 0 {
        {
            let mut cols: Vec<&mut [f64]> = xt.iter_mut().map(|c| c.as_mut_slice()).collect();
            demean_columns(&d.fe, &mut cols, &w, PROJECTION_TOL, MAX_PROJECTION_SWEEPS);
        }
        let (xtwx, _) = normal_equations(&xt, &zt, &w);
        let l = cholesky_with_pivot_check(&xtwx)
            .map_err(|j| Error::SingularColumn(d.names[j].clone()))?;
        cholesky_inverse(&l)
    } else {
        DMatrix::zeros(0, 0)
    };
    let mut scores = vec![0.0; n * k];
    for i in 0..n {
        let resid = d.y[i] - eta[i].min(700.0).exp();
        for a in 0..k {
            scores[i * k + a] = resid * xt[a][i];
        }
    }
    Ok(InnerFit {
        beta,
        scores,
        bread,
        loglik: poisson_loglik(&d.y, &eta),
        converged,
        iterations,
    })
}

fn fit_linear_inner(d: &CompactDesign) -> Result<InnerFit> {
    let n = d.y.len();
    let k = d.x.len();
    let w = vec![1.0; n];
    let mut yt = d.y.clone();
    let mut xt: Vec<Vec<f64>> = d.x.clone();
    {
        let mut cols: Vec<&mut [f64]> = xt.iter_mut().map(|c| c.as_mut_slice()).collect();
        cols.push(yt.as_mut_slice());
        demean_columns(&d.fe, &mut cols, &w, PROJECTION_TOL, MAX_PROJECTION_SWEEPS);
    }
    let (beta, bread) = if k > 0 {
        let (xtx, xty) = normal_equations(&xt, &yt, &w);
        let l = cholesky_with_pivot_check(&xtx)
            .map_err(|j| Error::SingularColumn(d.names[j].clone()))?;
        (cholesky_solve(&l, &xty), cholesky_inverse(&l))
    } else {
        (DVector::zeros(0), DMatrix::zeros(0, 0))
    };
    let resid: Vec<f64> = (0..n)
        .map(|i| {
            let mut fit = 0.0;
            for a in 0..k {
                fit += xt[a][i] * beta[a];
            }
            yt[i] - fit
        })
        .collect();
    let rss = det_sum_by(n, |i| resid[i] * resid[i]);
    let sigma2 = (rss / n as f64).max(1e-300);
    let loglik = -0.5 * n as f64 * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0);
    let mut scores = vec![0.0; n * k];
    for i in 0..n {
        for a in 0..k {
            scores[i * k + a] = resid[i] * xt[a][i];
        }
    }
    Ok(InnerFit { beta, scores, bread, loglik, converged: true, iterations: 1 })
}

fn finish_fit<D: DataSource>(data: &D, spec: &ModelSpec, family: Family) -> Result<FitResult> {
    if spec.family != family {
        return Err(Error::InvalidParameter(format!(
            "model family {:?} does not match the fit entry point",
            spec.family
        )));
    }
    spec.validate()?;
    let d = compact(data, spec)?;
    let inner = match spec.family {
        Family::Poisson => fit_poisson_inner(&d)?,
        Family::Linear => fit_linear_inner(&d)?,
    };
    let n_obs_used = d.y.len();
    let k = d.x.len();
    let coefficients: Vec<(String, f64)> = d
        .names
        .iter()
        .enumerate()
        .map(|(a, n)| (n.clone(), inner.beta[a]))
        .collect();
    let mut fit = FitResult {
        family: spec.family,
        coefficients,
        vcovs: Vec::new(),
        loglik: inner.loglik,
        bic: bic(inner.loglik, k, n_obs_used),
        n_obs_used,
        dropped: d.dropped,
        converged: inner.converged,
        iterations: inner.iterations,
        inference: InferenceData {
            scores: inner.scores,
            k,
            bread: inner.bread,
            cells: d.cells,
            times: d.times,
        },
    };
    for v in &spec.vcov {
        if let VcovSpec::ClusterCell = v {
            let cells = fit.inference.cells.clone();
            let m = vcov_cluster(&fit, &cells)?;
            fit.attach_vcov(VcovSpec::ClusterCell, m, false);
        }
        // Conley entries need centroids; attach via vcov_conley afterwards
    }
    Ok(fit)
}

/// Fits a fixed-effects Poisson regression by IRLS with alternating
/// projections across the FE dimensions. Non-convergence is reported via
/// `converged = false`, not an error.
pub fn fit_fe_poisson<D: DataSource>(data: &D, spec: &ModelSpec) -> Result<FitResult> {
    finish_fit(data, spec, Family::Poisson)
}

/// Fits a within-transformed linear regression across the FE dimensions.
pub fn fit_fe_linear<D: DataSource>(data: &D, spec: &ModelSpec) -> Result<FitResult> {
    finish_fit(data, spec, Family::Linear)
}

/// Significance stars for a two-sided p-value.
pub fn significance_stars(p: f64) -> &'static str {
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

/// Regression-table CSV: one column group per fit (coefficient, cluster SE,
/// Conley SE, significance), one row per term, with observation and BIC rows
/// at the bottom.
pub fn write_regression_table_csv<W: std::io::Write>(
    fits: &[(String, &FitResult)],
    mut out: W,
) -> Result<()> {
    use statrs::distribution::{ContinuousCDF, Normal};
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut terms: Vec<String> = Vec::new();
    for (_, fit) in fits {
        for (name, _) in &fit.coefficients {
            if !terms.contains(name) {
                terms.push(name.clone());
            }
        }
    }
    write!(out, "term")?;
    for (label, _) in fits {
        write!(out, ",{label}_coef,{label}_se_cluster,{label}_se_conley,{label}_signif")?;
    }
    writeln!(out)?;
    for term in &terms {
        write!(out, "{term}")?;
        for (_, fit) in fits {
            let coef = fit.coefficient(term);
            let se_cl = fit.se(&VcovSpec::ClusterCell, term);
            let se_co = fit
                .vcovs
                .iter()
                .find(|e| matches!(e.spec, VcovSpec::ConleySpatial { .. }))
                .and_then(|e| {
                    fit.coefficient_index(term).map(|i| e.matrix[(i, i)].max(0.0).sqrt())
                });
            let stars = match (coef, se_cl) {
                (Some(c), Some(se)) if se > 0.0 => {
                    let p = 2.0 * (1.0 - normal.cdf((c / se).abs()));
                    significance_stars(p)
                }
                _ => "",
            };
            let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            write!(out, ",{},{},{},{}", fmt(coef), fmt(se_cl), fmt(se_co), stars)?;
        }
        writeln!(out)?;
    }
    write!(out, "n_obs_used")?;
    for (_, fit) in fits {
        write!(out, ",{},,,", fit.n_obs_used)?;
    }
    writeln!(out)?;
    write!(out, "bic")?;
    for (_, fit) in fits {
        write!(out, ",{},,,", fit.bic)?;
    }
    writeln!(out)?;
    Ok(())
}

#[cfg(test)]
mod tests;
