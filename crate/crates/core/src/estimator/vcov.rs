//! Sandwich covariance estimators and the Wald joint test.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::geo::{great_circle_distance, GeoPoint, LocalFrame};

use super::FitResult;

fn score_row(fit: &FitResult, i: usize) -> &[f64] {
    let k = fit.inference.k;
    &fit.inference.scores[i * k..(i + 1) * k]
}

/// Cluster-robust sandwich: bread x (sum of cluster score outer products) x
/// bread, scaled by the small-sample factor G/(G-1).
pub fn vcov_cluster(fit: &FitResult, cluster_ids: &[u32]) -> Result<DMatrix<f64>> {
    let k = fit.inference.k;
    let n = fit.n_obs_used;
    if cluster_ids.len() != n {
        return Err(Error::DimensionMismatch { expected: n, actual: cluster_ids.len() });
    }
    let mut sums: BTreeMap<u32, DVector<f64>> = BTreeMap::new();
    for i in 0..n {
        let entry = sums.entry(cluster_ids[i]).or_insert_with(|| DVector::zeros(k));
        for a in 0..k {
            entry[a] += score_row(fit, i)[a];
        }
    }
    let g = sums.len();
    if g < 2 {
        return Err(Error::DegenerateVcov(format!("{g} cluster(s); need at least 2")));
    }
    let mut meat = DMatrix::zeros(k, k);
    for s in sums.values() {
        meat += s * s.transpose();
    }
    let factor = g as f64 / (g as f64 - 1.0);
    Ok(symmetrized(&(factor * &fit.inference.bread * meat * &fit.inference.bread)))
}

/// Spatial-HAC sandwich with a flag marking eigenvalue clipping.
#[derive(Debug, Clone)]
pub struct ConleyVcov {
    pub matrix: DMatrix<f64>,
    pub psd_repaired: bool,
}

/// Conley covariance: a uniform kernel over great-circle centroid distance
/// pairs same-time observations within `cutoff_m`, and all same-cell pairs
/// across time enter as a cluster-by-cell component. The same G/(G-1)
/// small-sample factor as the cluster sandwich keeps the sub-spacing-cutoff
/// reduction exact.
pub fn vcov_conley(
    fit: &FitResult,
    centroids: &[GeoPoint],
    cutoff_m: f64,
) -> Result<ConleyVcov> {
    if !(cutoff_m >= 0.0) {
        return Err(Error::InvalidParameter(format!("negative cutoff {cutoff_m}")));
    }
    let k = fit.inference.k;
    let n = fit.n_obs_used;
    let cells = &fit.inference.cells;
    let times = &fit.inference.times;

    for &c in cells {
        if c as usize >= centroids.len() {
            return Err(Error::Consistency(format!("cell {c} has no centroid")));
        }
    }

    // aggregate scores by (cell, time)
    let mut by_cell_time: BTreeMap<(u32, u32), DVector<f64>> = BTreeMap::new();
    for i in 0..n {
        let entry = by_cell_time
            .entry((cells[i], times[i]))
            .or_insert_with(|| DVector::zeros(k));
        for a in 0..k {
            entry[a] += score_row(fit, i)[a];
        }
    }

    let present: Vec<u32> = {
        let mut v: Vec<u32> = cells.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    let g = present.len();
    if g < 2 {
        return Err(Error::DegenerateVcov(format!("{g} cell(s); need at least 2")));
    }

    // neighbor lists among present cells within the cutoff (excluding self)
    let neighbors = point_neighbors(&present, centroids, cutoff_m);

    // cluster-by-cell component: all same-cell pairs across time
    let mut meat = DMatrix::zeros(k, k);
    let mut cell_totals: BTreeMap<u32, DVector<f64>> = BTreeMap::new();
    for (&(c, _), s) in &by_cell_time {
        let entry = cell_totals.entry(c).or_insert_with(|| DVector::zeros(k));
        *entry += s;
    }
    for s in cell_totals.values() {
        meat += s * s.transpose();
    }
    // cross-cell same-time pairs within the cutoff
    for (&(c, t), s) in &by_cell_time {
        let ci = present.binary_search(&c).unwrap();
        for &cj in &neighbors[ci] {
            if let Some(sj) = by_cell_time.get(&(cj, t)) {
                meat += s * sj.transpose();
            }
        }
    }

    let factor = g as f64 / (g as f64 - 1.0);
    let v = symmetrized(&(factor * &fit.inference.bread * meat * &fit.inference.bread));
    let (v, repaired) = clip_to_psd(v);
    Ok(ConleyVcov { matrix: v, psd_repaired: repaired })
}

/// Neighbor ids (values from `ids`) within `cutoff_m` of each listed cell,
/// via a bucket grid; distances are haversine.
fn point_neighbors(ids: &[u32], centroids: &[GeoPoint], cutoff_m: f64) -> Vec<Vec<u32>> {
    use std::collections::HashMap;
    if ids.is_empty() {
        return Vec::new();
    }
    let min_lat = ids.iter().map(|&c| centroids[c as usize].lat).fold(f64::INFINITY, f64::min);
    let max_lat =
        ids.iter().map(|&c| centroids[c as usize].lat).fold(f64::NEG_INFINITY, f64::max);
    let min_lon = ids.iter().map(|&c| centroids[c as usize].lon).fold(f64::INFINITY, f64::min);
    let frame = LocalFrame::new(
        GeoPoint { lat: min_lat, lon: min_lon },
        0.5 * (min_lat + max_lat),
    );
    let locals: Vec<(f64, f64)> =
        ids.iter().map(|&c| frame.to_local(centroids[c as usize])).collect();
    let bucket = cutoff_m * 1.02 + 1.0;
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, &(x, y)) in locals.iter().enumerate() {
        buckets
            .entry(((x / bucket).floor() as i64, (y / bucket).floor() as i64))
            .or_default()
            .push(i);
    }
    (0..ids.len())
        .map(|i| {
            let (x, y) = locals[i];
            let bx = (x / bucket).floor() as i64;
            let by = (y / bucket).floor() as i64;
            let mut row = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    if let Some(cands) = buckets.get(&(bx + dx, by + dy)) {
                        for &j in cands {
                            if j == i {
                                continue;
                            }
                            let d = great_circle_distance(
                                centroids[ids[i] as usize],
                                centroids[ids[j] as usize],
                            );
                            if d <= cutoff_m {
                                row.push(ids[j]);
                            }
                        }
                    }
                }
            }
            row.sort_unstable();
            row
        })
        .collect()
}

fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Clips negative eigenvalues at zero; flags whether clipping happened.
fn clip_to_psd(m: DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if m.nrows() == 0 {
        return (m, false);
    }
    let eig = m.clone().symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let tol = -1e-12 * max_eig.max(1e-300);
    if eig.eigenvalues.iter().all(|&l| l >= tol) {
        return (m, false);
    }
    let clipped = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(0.0)),
    );
    let v = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    (symmetrized(&v), true)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaldTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Wald joint test W = b' V^{-1} b over a coefficient subset, with a
/// chi-square p-value at dof = subset size.
pub fn wald_joint_test(
    fit: &FitResult,
    coefficient_subset: &[&str],
    vcov: &super::VcovSpec,
) -> Result<WaldTest> {
    if coefficient_subset.is_empty() {
        return Err(Error::InvalidParameter("empty coefficient subset".into()));
    }
    let v = fit
        .vcov(vcov)
        .ok_or_else(|| Error::InvalidParameter(format!("no stored vcov `{}`", vcov.label())))?;
    let idx: Vec<usize> = coefficient_subset
        .iter()
        .map(|name| {
            fit.coefficient_index(name)
                .ok_or_else(|| Error::UnknownColumn((*name).to_string()))
        })
        .collect::<Result<_>>()?;
    let m = idx.len();
    let mut beta = DVector::zeros(m);
    let mut sub = DMatrix::zeros(m, m);
    for (a, &ia) in idx.iter().enumerate() {
        beta[a] = fit.coefficients[ia].1;
        for (b, &ib) in idx.iter().enumerate() {
            sub[(a, b)] = v[(ia, ib)];
        }
    }
    let chol = sub
        .clone()
        .cholesky()
        .ok_or_else(|| Error::DegenerateVcov("singular subset covariance".into()))?;
    let solved = chol.solve(&beta);
    let statistic = (beta.transpose() * solved)[(0, 0)];
    let chi2 = ChiSquared::new(m as f64)
        .map_err(|e| Error::InvalidParameter(format!("chi-square dof {m}: {e}")))?;
    let p_value = 1.0 - chi2.cdf(statistic);
    Ok(WaldTest { statistic, dof: m, p_value })
}
