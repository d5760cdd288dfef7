//! Group indexing, weighted alternating projections, and deterministic
//! parallel reductions used by the fixed-effects fits.
//!
//! Parallel sums are chunked with a fixed chunk size and combined in chunk
//! order, so results do not depend on the thread schedule.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

const CHUNK: usize = 16_384;

/// Deterministic parallel sum of a per-row map.
pub(crate) fn det_sum_by<F: Fn(usize) -> f64 + Sync>(n: usize, f: F) -> f64 {
    (0..n)
        .into_par_iter()
        .chunks(CHUNK)
        .map(|rows| rows.into_iter().map(&f).sum::<f64>())
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

/// Membership index of one fixed-effect dimension, with dense group ids
/// assigned in ascending raw-id order.
#[derive(Debug, Clone)]
pub(crate) struct GroupIndex {
    pub n_groups: usize,
    offsets: Vec<usize>,
    members: Vec<u32>,
}

impl GroupIndex {
    pub(crate) fn new(raw: &[u32]) -> GroupIndex {
        let mut distinct: Vec<u32> = raw.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        let dense_of = |id: u32| distinct.binary_search(&id).unwrap() as u32;
        let n_groups = distinct.len();
        let group_of: Vec<u32> = raw.iter().map(|&g| dense_of(g)).collect();
        let mut counts = vec![0usize; n_groups];
        for &g in &group_of {
            counts[g as usize] += 1;
        }
        let mut offsets = vec![0usize; n_groups + 1];
        for g in 0..n_groups {
            offsets[g + 1] = offsets[g] + counts[g];
        }
        let mut cursor = offsets.clone();
        let mut members = vec![0u32; raw.len()];
        for (row, &g) in group_of.iter().enumerate() {
            members[cursor[g as usize]] = row as u32;
            cursor[g as usize] += 1;
        }
        GroupIndex { n_groups, offsets, members }
    }

    pub(crate) fn members(&self, g: usize) -> &[u32] {
        &self.members[self.offsets[g]..self.offsets[g + 1]]
    }

    /// Weighted sum of `v` within each group.
    pub(crate) fn group_sums(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n_groups)
            .map(|g| self.members(g).iter().map(|&r| v[r as usize]).sum())
            .collect()
    }

    /// Subtracts the weighted group mean from every entry of `v`; returns the
    /// largest absolute mean removed.
    fn demean_once(&self, v: &mut [f64], w: &[f64]) -> f64 {
        // groups have disjoint members, so parallel mutation is safe; each
        // group's sums run sequentially in member order for determinism
        let vptr = SendPtr(v.as_mut_ptr());
        (0..self.n_groups)
            .into_par_iter()
            .map(|g| {
                let p = vptr.get();
                let members = self.members(g);
                let mut sw = 0.0;
                let mut swv = 0.0;
                for &r in members {
                    let wi = w[r as usize];
                    sw += wi;
                    swv += wi * unsafe { *p.add(r as usize) };
                }
                if sw <= 0.0 {
                    return 0.0;
                }
                let mean = swv / sw;
                for &r in members {
                    unsafe {
                        *p.add(r as usize) -= mean;
                    }
                }
                mean.abs()
            })
            .reduce(|| 0.0, f64::max)
    }
}

#[derive(Clone, Copy)]
struct SendPtr(*mut f64);
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}

impl SendPtr {
    fn get(self) -> *mut f64 {
        self.0
    }
}

/// Alternating weighted projections: demeans every column across all FE
/// dimensions until the largest within-group weighted mean falls below `tol`.
/// Returns (sweeps, converged).
pub(crate) fn demean_columns(
    dims: &[GroupIndex],
    cols: &mut [&mut [f64]],
    w: &[f64],
    tol: f64,
    max_sweeps: usize,
) -> (usize, bool) {
    if dims.is_empty() || cols.is_empty() {
        return (0, true);
    }
    for sweep in 1..=max_sweeps {
        let mut max_adj: f64 = 0.0;
        for dim in dims {
            let adj = cols
                .par_iter_mut()
                .map(|c| dim.demean_once(c, w))
                .reduce(|| 0.0, f64::max);
            max_adj = max_adj.max(adj);
        }
        if max_adj < tol {
            return (sweep, true);
        }
    }
    (max_sweeps, false)
}

/// X'WX (lower triangle mirrored) and X'Wz with deterministic chunked
/// accumulation.
pub(crate) fn normal_equations(
    x: &[Vec<f64>],
    z: &[f64],
    w: &[f64],
) -> (DMatrix<f64>, DVector<f64>) {
    let k = x.len();
    let n = z.len();
    if k == 0 {
        return (DMatrix::zeros(0, 0), DVector::zeros(0));
    }
    let starts: Vec<usize> = (0..n.div_ceil(CHUNK)).map(|c| c * CHUNK).collect();
    let partials: Vec<(Vec<f64>, Vec<f64>)> = starts
        .par_iter()
        .map(|&lo| {
            let hi = (lo + CHUNK).min(n);
            let mut m = vec![0.0; k * k];
            let mut rhs = vec![0.0; k];
            for i in lo..hi {
                let wi = w[i];
                for a in 0..k {
                    let wxa = wi * x[a][i];
                    rhs[a] += wxa * z[i];
                    for b in a..k {
                        m[a * k + b] += wxa * x[b][i];
                    }
                }
            }
            (m, rhs)
        })
        .collect();
    let mut m = vec![0.0; k * k];
    let mut rhs = vec![0.0; k];
    for (pm, pr) in partials {
        for i in 0..k * k {
            m[i] += pm[i];
        }
        for i in 0..k {
            rhs[i] += pr[i];
        }
    }
    let mut xtwx = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            xtwx[(a, b)] = m[a * k + b];
            xtwx[(b, a)] = m[a * k + b];
        }
    }
    (xtwx, DVector::from_vec(rhs))
}

/// Cholesky factorization that reports the index of the first numerically
/// dependent column instead of failing opaquely.
pub(crate) fn cholesky_with_pivot_check(a: &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, usize> {
    let k = a.nrows();
    let mut l = DMatrix::<f64>::zeros(k, k);
    for j in 0..k {
        let mut d = a[(j, j)];
        for m in 0..j {
            d -= l[(j, m)] * l[(j, m)];
        }
        let scale = a[(j, j)].abs().max(1e-300);
        if d <= 1e-10 * scale {
            return Err(j);
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in (j + 1)..k {
            let mut v = a[(i, j)];
            for m in 0..j {
                v -= l[(i, m)] * l[(j, m)];
            }
            l[(i, j)] = v / dj;
        }
    }
    Ok(l)
}

/// Solves L L' x = b for a lower-triangular Cholesky factor.
pub(crate) fn cholesky_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let k = l.nrows();
    let mut y = b.clone();
    for i in 0..k {
        for m in 0..i {
            let v = y[m];
            y[i] -= l[(i, m)] * v;
        }
        y[i] /= l[(i, i)];
    }
    for i in (0..k).rev() {
        for m in (i + 1)..k {
            let v = y[m];
            y[i] -= l[(m, i)] * v;
        }
        y[i] /= l[(i, i)];
    }
    y
}

/// Inverse from a Cholesky factor, column by column.
pub(crate) fn cholesky_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let k = l.nrows();
    let mut inv = DMatrix::zeros(k, k);
    for j in 0..k {
        let mut e = DVector::zeros(k);
        e[j] = 1.0;
        let col = cholesky_solve(l, &e);
        inv.set_column(j, &col);
    }
    // enforce symmetry against roundoff
    for a in 0..k {
        for b in (a + 1)..k {
            let v = 0.5 * (inv[(a, b)] + inv[(b, a)]);
            inv[(a, b)] = v;
            inv[(b, a)] = v;
        }
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_index_builds_dense_sorted_ids() {
        let gi = GroupIndex::new(&[7, 3, 7, 3, 9]);
        assert_eq!(gi.n_groups, 3);
        assert_eq!(gi.members(0), &[1, 3]);
        assert_eq!(gi.members(1), &[0, 2]);
        assert_eq!(gi.members(2), &[4]);
        assert_eq!(gi.group_sums(&[1.0, 2.0, 3.0, 4.0, 5.0]), vec![6.0, 4.0, 5.0]);
    }

    #[test]
    fn demeaning_removes_weighted_group_means() {
        let gi = GroupIndex::new(&[0, 0, 1, 1, 1]);
        let mut v = vec![1.0, 3.0, 2.0, 4.0, 6.0];
        let w = vec![1.0, 1.0, 1.0, 1.0, 2.0];
        let mut cols = [v.as_mut_slice()];
        let (_, ok) = demean_columns(&[gi.clone()], &mut cols, &w, 1e-12, 100);
        assert!(ok);
        // group 0 mean 2; group 1 weighted mean (2+4+12)/4 = 4.5
        let expect = [-1.0, 1.0, -2.5, -0.5, 1.5];
        for (a, b) in v.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_way_demeaning_kills_both_margins() {
        // 3 x 4 crossed layout
        let ga: Vec<u32> = (0..12).map(|i| (i % 3) as u32).collect();
        let gb: Vec<u32> = (0..12).map(|i| (i / 3) as u32).collect();
        let dims = [GroupIndex::new(&ga), GroupIndex::new(&gb)];
        let mut v: Vec<f64> = (0..12).map(|i| (i * i) as f64 * 0.37 + 3.0).collect();
        let w = vec![1.0; 12];
        let mut cols = [v.as_mut_slice()];
        let (_, ok) = demean_columns(&dims, &mut cols, &w, 1e-12, 1000);
        assert!(ok);
        for dim in &dims {
            for g in 0..dim.n_groups {
                let s: f64 = dim.members(g).iter().map(|&r| v[r as usize]).sum();
                assert!(s.abs() < 1e-10, "group mean not removed: {s}");
            }
        }
    }

    #[test]
    fn deterministic_sums_match_sequential() {
        let v: Vec<f64> = (0..100_000).map(|i| ((i * 2654435761u64 as usize) % 97) as f64 * 0.01).collect();
        let seq: f64 = v.iter().sum();
        let s1 = det_sum_by(v.len(), |i| v[i]);
        assert_eq!(s1, det_sum_by(v.len(), |i| v[i]));
        assert!((s1 - seq).abs() < 1e-6);
        let g = det_sum_by(v.len(), |i| v[i] * 2.0);
        assert!((g - 2.0 * seq).abs() < 1e-6);
    }

    #[test]
    fn normal_equations_and_cholesky_roundtrip() {
        let x = vec![
            vec![1.0, 2.0, 3.0, 4.0, 5.0],
            vec![0.5, -1.0, 2.0, 0.0, 1.0],
        ];
        let z = vec![2.0, 1.0, 4.0, 3.0, 5.0];
        let w = vec![1.0, 2.0, 1.0, 0.5, 1.0];
        let (xtwx, xtwz) = normal_equations(&x, &z, &w);
        // brute force
        for a in 0..2 {
            let mut rhs = 0.0;
            for i in 0..5 {
                rhs += w[i] * x[a][i] * z[i];
            }
            assert!((xtwz[a] - rhs).abs() < 1e-12);
            for b in 0..2 {
                let mut m = 0.0;
                for i in 0..5 {
                    m += w[i] * x[a][i] * x[b][i];
                }
                assert!((xtwx[(a, b)] - m).abs() < 1e-12);
            }
        }
        let l = cholesky_with_pivot_check(&xtwx).unwrap();
        let beta = cholesky_solve(&l, &xtwz);
        let resid = &xtwx * &beta - &xtwz;
        assert!(resid.amax() < 1e-10);
        let inv = cholesky_inverse(&l);
        let eye = &xtwx * &inv;
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((eye[(i, j)] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn collinear_column_is_named() {
        // second column is twice the first
        let x = vec![vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]];
        let z = vec![0.0; 3];
        let w = vec![1.0; 3];
        let (xtwx, _) = normal_equations(&x, &z, &w);
        assert_eq!(cholesky_with_pivot_check(&xtwx), Err(1));
    }
}
