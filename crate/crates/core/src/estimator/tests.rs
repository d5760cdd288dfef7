use super::*;
use crate::geo::GeoPoint;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

// ---------------------------------------------------------------------------
// test-only oracle: full-dummy Poisson maximum likelihood via Newton steps,
// independent of the alternating-projection path
// ---------------------------------------------------------------------------

fn poisson_loglik_mu(y: &[f64], mu: &[f64]) -> f64 {
    y.iter()
        .zip(mu)
        .map(|(&yi, &mi)| yi * mi.ln() - mi - ln_gamma(yi + 1.0))
        .sum()
}

/// Drops zero-outcome groups per dimension the same way the contract states,
/// reimplemented without touching the estimator internals.
fn oracle_drop_rows(y: &[f64], fe: &[Vec<u32>]) -> Vec<usize> {
    let mut keep: Vec<usize> = (0..y.len()).collect();
    for dim in fe {
        let mut sums: std::collections::BTreeMap<u32, f64> = std::collections::BTreeMap::new();
        for &i in &keep {
            *sums.entry(dim[i]).or_insert(0.0) += y[i];
        }
        keep.retain(|&i| sums[&dim[i]] > 0.0);
    }
    keep
}

/// Slope coefficients of the explicit-dummy Poisson ML fit. The design holds
/// the slope columns, all dummies of the first FE dimension, and all-but-one
/// dummies of every later dimension (reference group dropped).
fn newton_dummy_poisson(y: &[f64], x: &[Vec<f64>], fe: &[Vec<u32>]) -> Vec<f64> {
    let keep = oracle_drop_rows(y, fe);
    let n = keep.len();
    let k = x.len();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for col in x {
        columns.push(keep.iter().map(|&i| col[i]).collect());
    }
    for (d, dim) in fe.iter().enumerate() {
        let mut levels: Vec<u32> = keep.iter().map(|&i| dim[i]).collect();
        levels.sort_unstable();
        levels.dedup();
        let skip_first = d > 0;
        for (li, &level) in levels.iter().enumerate() {
            if skip_first && li == 0 {
                continue;
            }
            columns.push(
                keep.iter().map(|&i| if dim[i] == level { 1.0 } else { 0.0 }).collect(),
            );
        }
    }
    let p = columns.len();
    let yk: Vec<f64> = keep.iter().map(|&i| y[i]).collect();
    let design = DMatrix::from_fn(n, p, |r, c| columns[c][r]);
    let yv = DVector::from_vec(yk.clone());
    let mut beta = DVector::zeros(p);
    let mut ll_old = f64::NEG_INFINITY;
    for _ in 0..500 {
        let eta = &design * &beta;
        let mu: Vec<f64> = eta.iter().map(|&e| e.min(700.0).exp()).collect();
        let wdiag = DVector::from_vec(mu.clone());
        let resid = &yv - DVector::from_vec(mu.clone());
        let xtwx = design.transpose() * DMatrix::from_diagonal(&wdiag) * &design;
        let grad = design.transpose() * resid;
        let step = xtwx
            .lu()
            .solve(&grad)
            .expect("oracle normal equations solvable");
        // step-halve on likelihood decreases
        let mut t = 1.0;
        let mut beta_new;
        let mut ll_new;
        loop {
            beta_new = &beta + t * &step;
            let eta_new = &design * &beta_new;
            let mu_new: Vec<f64> = eta_new.iter().map(|&e| e.min(700.0).exp()).collect();
            ll_new = poisson_loglik_mu(&yk, &mu_new);
            if ll_new.is_finite() && (ll_new >= ll_old || t < 1e-6) {
                break;
            }
            t *= 0.5;
        }
        beta = beta_new;
        if ll_old.is_finite() && (ll_new - ll_old).abs() <= 1e-13 * (1.0 + ll_new.abs()) {
            break;
        }
        ll_old = ll_new;
    }
    (0..k).map(|a| beta[a]).collect()
}

// ---------------------------------------------------------------------------
// random problem generator
// ---------------------------------------------------------------------------

struct RandomPanel {
    table: Table,
    regressors: Vec<String>,
    fe_dims: Vec<FeDim>,
    y: Vec<f64>,
    x: Vec<Vec<f64>>,
    fe: Vec<Vec<u32>>,
}

fn random_poisson_problem(seed: u64, max_rows: usize, max_groups: usize) -> RandomPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(200..=max_rows);
    let k = rng.gen_range(2..=5);
    let ga = rng.gen_range(3..=max_groups);
    let gb = rng.gen_range(2..=max_groups);
    let fe_a: Vec<u32> = (0..n).map(|_| rng.gen_range(0..ga) as u32).collect();
    let fe_b: Vec<u32> = (0..n).map(|_| rng.gen_range(0..gb) as u32).collect();
    let alpha_a: Vec<f64> = (0..ga).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let alpha_b: Vec<f64> = (0..gb).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let betas: Vec<f64> = (0..k).map(|_| rng.gen_range(-0.4..0.4)).collect();
    let x: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let mut eta = 0.3 + alpha_a[fe_a[i] as usize] + alpha_b[fe_b[i] as usize];
            for a in 0..k {
                eta += betas[a] * x[a][i];
            }
            let lambda = eta.exp();
            Poisson::new(lambda).unwrap().sample(&mut rng)
        })
        .collect();
    let mut table = Table::new(n);
    table.add_column("y", y.clone()).unwrap();
    let mut regressors = Vec::new();
    for (a, col) in x.iter().enumerate() {
        let name = format!("x{a}");
        table.add_column(&name, col.clone()).unwrap();
        regressors.push(name);
    }
    table.add_group("cell", fe_a.clone()).unwrap();
    table.add_group("day", fe_b.clone()).unwrap();
    RandomPanel {
        table,
        regressors,
        fe_dims: vec![FeDim::Cell, FeDim::Day],
        y,
        x,
        fe: vec![fe_a, fe_b],
    }
}

fn poisson_spec(p: &RandomPanel) -> ModelSpec {
    ModelSpec {
        outcome: "y".into(),
        regressors: p.regressors.clone(),
        fe_dims: p.fe_dims.clone(),
        family: Family::Poisson,
        vcov: vec![VcovSpec::ClusterCell],
    }
}

// ---------------------------------------------------------------------------
// Poisson fit
// ---------------------------------------------------------------------------

#[test]
fn projection_fit_matches_dummy_newton_oracle() {
    for seed in 0..8 {
        let p = random_poisson_problem(seed, 1200, 15);
        let fit = fit_fe_poisson(&p.table, &poisson_spec(&p)).unwrap();
        assert!(fit.converged, "seed {seed} did not converge");
        let oracle = newton_dummy_poisson(&p.y, &p.x, &p.fe);
        for (a, (name, est)) in fit.coefficients.iter().enumerate() {
            assert!(
                (est - oracle[a]).abs() < 1e-6,
                "seed {seed}, {name}: {est} vs oracle {}",
                oracle[a]
            );
        }
    }
}

#[test]
fn fe_only_model_fits_group_means() {
    // no regressors: the FE-only MLE puts each fitted mean at its group mean
    let y = vec![0.0, 2.0, 4.0, 1.0, 1.0, 4.0];
    let groups = vec![0u32, 0, 0, 1, 1, 1];
    let d = CompactDesign {
        y: y.clone(),
        x: vec![],
        names: vec![],
        fe: vec![GroupIndex::new(&groups)],
        cells: groups.clone(),
        times: (0..6).collect(),
        dropped: DroppedGroups::default(),
    };
    let inner = fit_poisson_inner(&d).unwrap();
    assert!(inner.converged);
    // group means are 2 and 2: hand loglik with mu = ybار per group
    let hand: f64 = y.iter().map(|&yi| yi * 2.0f64.ln() - 2.0 - ln_gamma(yi + 1.0)).sum();
    assert!((inner.loglik - hand).abs() < 1e-8, "{} vs {hand}", inner.loglik);
}

#[test]
fn zero_outcome_groups_are_dropped_and_recorded() {
    let n = 40;
    let mut y = vec![1.0; n];
    // group 2 of dim A (rows 8..12) all zero
    for i in 8..12 {
        y[i] = 0.0;
    }
    let fe_a: Vec<u32> = (0..n).map(|i| (i / 4) as u32).collect();
    let fe_b: Vec<u32> = (0..n).map(|i| (i % 4) as u32).collect();
    let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut table = Table::new(n);
    table.add_column("y", y.clone()).unwrap();
    table.add_column("x", x).unwrap();
    table.add_group("cell", fe_a).unwrap();
    table.add_group("day", fe_b).unwrap();
    let spec = ModelSpec {
        outcome: "y".into(),
        regressors: vec!["x".into()],
        fe_dims: vec![FeDim::Cell, FeDim::Day],
        family: Family::Poisson,
        vcov: vec![],
    };
    let fit = fit_fe_poisson(&table, &spec).unwrap();
    assert_eq!(fit.n_obs_used, 36);
    assert_eq!(fit.dropped.count, 1);
    assert_eq!(fit.dropped.rows_dropped, 4);
    assert_eq!(fit.dropped.ids_per_dim[0].1, vec![2]);
    assert!(fit.dropped.ids_per_dim[1].1.is_empty());
    // accounting: used + dropped rows = estimation sample
    assert_eq!(fit.n_obs_used + fit.dropped.rows_dropped, n);
}

#[test]
fn missing_regressor_rows_shrink_the_sample() {
    let p = random_poisson_problem(11, 600, 8);
    let n = p.y.len();
    // a shifted copy with a missing head, like a temporal lag column
    let mut lagged = vec![f64::NAN; n];
    for i in 25..n {
        lagged[i] = p.x[0][i - 25];
    }
    let mut table = p.table.clone();
    table.add_column("lagged", lagged).unwrap();
    let mut spec = poisson_spec(&p);
    spec.regressors.push("lagged".into());
    spec.vcov.clear();
    let fit = fit_fe_poisson(&table, &spec).unwrap();
    assert!(fit.n_obs_used <= n - 25);
}

#[test]
fn score_condition_holds_at_convergence() {
    let p = random_poisson_problem(3, 1500, 12);
    let fit = fit_fe_poisson(&p.table, &poisson_spec(&p)).unwrap();
    let k = fit.inference.k;
    for a in 0..k {
        let s: f64 = (0..fit.n_obs_used).map(|i| fit.inference.scores[i * k + a]).sum();
        assert!(s.abs() < 1e-6, "score {a} = {s}");
    }
}

#[test]
fn scale_equivariance_of_coefficients() {
    let p = random_poisson_problem(5, 900, 10);
    let fit = fit_fe_poisson(&p.table, &poisson_spec(&p)).unwrap();
    let mut table = Table::new(p.y.len());
    table.add_column("y", p.y.clone()).unwrap();
    let c = 40.0;
    for (a, col) in p.x.iter().enumerate() {
        let scaled: Vec<f64> =
            if a == 0 { col.iter().map(|v| v * c).collect() } else { col.clone() };
        table.add_column(&format!("x{a}"), scaled).unwrap();
    }
    table.add_group("cell", p.fe[0].clone()).unwrap();
    table.add_group("day", p.fe[1].clone()).unwrap();
    let fit2 = fit_fe_poisson(&table, &poisson_spec(&p)).unwrap();
    assert!(
        (fit2.coefficients[0].1 - fit.coefficients[0].1 / c).abs() < 1e-8,
        "{} vs {}",
        fit2.coefficients[0].1,
        fit.coefficients[0].1 / c
    );
    for a in 1..p.x.len() {
        assert!((fit2.coefficients[a].1 - fit.coefficients[a].1).abs() < 1e-7);
    }
    // fitted intensity layer unchanged: compare likelihoods
    assert!((fit2.loglik - fit.loglik).abs() < 1e-8 * (1.0 + fit.loglik.abs()));
}

#[test]
fn collinear_regressor_is_named() {
    let p = random_poisson_problem(7, 500, 6);
    let mut table = p.table.clone();
    let doubled: Vec<f64> = p.x[0].iter().map(|v| 2.0 * v).collect();
    table.add_column("x0_copy", doubled).unwrap();
    let mut spec = poisson_spec(&p);
    spec.regressors.push("x0_copy".into());
    spec.vcov.clear();
    match fit_fe_poisson(&table, &spec) {
        Err(Error::SingularColumn(name)) => assert_eq!(name, "x0_copy"),
        other => panic!("expected singular-column error, got {other:?}"),
    }
}

#[test]
fn empty_sample_errors_out() {
    let mut table = Table::new(4);
    table.add_column("y", vec![0.0; 4]).unwrap();
    table.add_column("x", vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    table.add_group("cell", vec![0, 0, 1, 1]).unwrap();
    let spec = ModelSpec {
        outcome: "y".into(),
        regressors: vec!["x".into()],
        fe_dims: vec![FeDim::Cell],
        family: Family::Poisson,
        vcov: vec![],
    };
    assert!(matches!(fit_fe_poisson(&table, &spec), Err(Error::EmptySample)));
}

// ---------------------------------------------------------------------------
// linear fit
// ---------------------------------------------------------------------------

#[test]
fn linear_fit_recovers_exact_slope_under_fe() {
    let n = 60;
    let fe: Vec<u32> = (0..n).map(|i| (i % 5) as u32).collect();
    let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.71).cos() * 3.0).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| 2.0 * x[i] + [5.0, -3.0, 0.5, 9.0, -1.0][fe[i] as usize])
        .collect();
    let mut table = Table::new(n);
    table.add_column("y", y).unwrap();
    table.add_column("x", x).unwrap();
    table.add_group("cell", fe).unwrap();
    let spec = ModelSpec {
        outcome: "y".into(),
        regressors: vec!["x".into()],
        fe_dims: vec![FeDim::Cell],
        family: Family::Linear,
        vcov: vec![VcovSpec::ClusterCell],
    };
    let fit = fit_fe_linear(&table, &spec).unwrap();
    assert!((fit.coefficient("x").unwrap() - 2.0).abs() < 1e-12);
}

#[test]
fn linear_residuals_are_orthogonal_to_every_fe_dimension() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 700;
    let cell: Vec<u32> = (0..n).map(|_| rng.gen_range(0..40) as u32).collect();
    let day: Vec<u32> = (0..n).map(|_| rng.gen_range(0..30) as u32).collect();
    let period: Vec<u32> = (0..n).map(|_| rng.gen_range(0..4) as u32).collect();
    let dow: Vec<u32> = (0..n).map(|_| rng.gen_range(0..7) as u32).collect();
    let duration: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..8.0)).collect();
    let duration_sq: Vec<f64> = duration.iter().map(|d| d * d).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            31.84 * duration[i] - 2.636 * duration_sq[i]
                + cell[i] as f64 * 0.8
                + day[i] as f64 * 0.3
                + period[i] as f64 * 2.0
                + dow[i] as f64 * 1.1
                + rng.gen_range(-20.0..20.0)
        })
        .collect();
    let mut table = Table::new(n);
    table.add_column("stops", y.clone()).unwrap();
    table.add_column("duration", duration.clone()).unwrap();
    table.add_column("duration_sq", duration_sq.clone()).unwrap();
    table.add_group("cell", cell.clone()).unwrap();
    table.add_group("day", day.clone()).unwrap();
    table.add_group("period", period.clone()).unwrap();
    table.add_group("dow", dow.clone()).unwrap();
    let spec = ModelSpec {
        outcome: "stops".into(),
        regressors: vec!["duration".into(), "duration_sq".into()],
        fe_dims: vec![FeDim::Cell, FeDim::Day, FeDim::Period, FeDim::DayOfWeek],
        family: Family::Linear,
        vcov: vec![VcovSpec::ClusterCell],
    };
    let fit = fit_fe_linear(&table, &spec).unwrap();
    // planted quadratic recovered within 2 cluster SEs
    let d_hat = fit.coefficient("duration").unwrap();
    let d_se = fit.se(&VcovSpec::ClusterCell, "duration").unwrap();
    assert!((d_hat - 31.84).abs() < 2.0 * d_se, "{d_hat} +- {d_se}");
    let q_hat = fit.coefficient("duration_sq").unwrap();
    let q_se = fit.se(&VcovSpec::ClusterCell, "duration_sq").unwrap();
    assert!((q_hat + 2.636).abs() < 2.0 * q_se, "{q_hat} +- {q_se}");

    // demeaned residuals are orthogonal to each FE group indicator: rebuild
    // the within transform independently with a plain alternating loop
    let mut yt = y.clone();
    let mut dt = duration.clone();
    let mut dt2 = duration_sq.clone();
    let dims: [&Vec<u32>; 4] = [&cell, &day, &period, &dow];
    for _ in 0..20_000 {
        let mut max_adj: f64 = 0.0;
        for dim in dims {
            for col in [&mut yt, &mut dt, &mut dt2] {
                let mut sums: std::collections::BTreeMap<u32, (f64, usize)> =
                    std::collections::BTreeMap::new();
                for i in 0..n {
                    let e = sums.entry(dim[i]).or_insert((0.0, 0));
                    e.0 += col[i];
                    e.1 += 1;
                }
                for i in 0..n {
                    let (s, c) = sums[&dim[i]];
                    col[i] -= s / c as f64;
                }
                for (s, c) in sums.values() {
                    max_adj = max_adj.max((s / *c as f64).abs());
                }
            }
        }
        if max_adj < 1e-12 {
            break;
        }
    }
    let resid: Vec<f64> =
        (0..n).map(|i| yt[i] - d_hat * dt[i] - q_hat * dt2[i]).collect();
    for dim in dims {
        let mut sums: std::collections::BTreeMap<u32, f64> = std::collections::BTreeMap::new();
        for i in 0..n {
            *sums.entry(dim[i]).or_insert(0.0) += resid[i];
        }
        for (&g, &s) in &sums {
            assert!(s.abs() < 1e-8, "residual group sum not zero: group {g} = {s}");
        }
    }
}

// ---------------------------------------------------------------------------
// cluster vcov
// ---------------------------------------------------------------------------

/// Explicit textbook CRVE on a one-dimensional FE linear model, computed from
/// scratch in the test.
fn explicit_crve(
    y: &[f64],
    x: &[Vec<f64>],
    fe: &[u32],
    clusters: &[u32],
) -> (Vec<f64>, DMatrix<f64>) {
    let n = y.len();
    let k = x.len();
    // single-dimension demeaning
    let mut sums: std::collections::BTreeMap<u32, (f64, Vec<f64>, usize)> =
        std::collections::BTreeMap::new();
    for i in 0..n {
        let e = sums.entry(fe[i]).or_insert((0.0, vec![0.0; k], 0));
        e.0 += y[i];
        for a in 0..k {
            e.1[a] += x[a][i];
        }
        e.2 += 1;
    }
    let mut yt = vec![0.0; n];
    let mut xt = vec![vec![0.0; n]; k];
    for i in 0..n {
        let (sy, sx, c) = &sums[&fe[i]];
        yt[i] = y[i] - sy / *c as f64;
        for a in 0..k {
            xt[a][i] = x[a][i] - sx[a] / *c as f64;
        }
    }
    let xm = DMatrix::from_fn(n, k, |r, c| xt[c][r]);
    let yv = DVector::from_vec(yt.clone());
    let xtx = xm.transpose() * &xm;
    let beta = xtx.clone().lu().solve(&(xm.transpose() * &yv)).unwrap();
    let resid = &yv - &xm * &beta;
    let bread = xtx.try_inverse().unwrap();
    let mut cluster_sums: std::collections::BTreeMap<u32, DVector<f64>> =
        std::collections::BTreeMap::new();
    for i in 0..n {
        let e = cluster_sums
            .entry(clusters[i])
            .or_insert_with(|| DVector::zeros(k));
        for a in 0..k {
            e[a] += resid[i] * xt[a][i];
        }
    }
    let g = cluster_sums.len() as f64;
    let mut meat = DMatrix::zeros(k, k);
    for s in cluster_sums.values() {
        meat += s * s.transpose();
    }
    let v = (g / (g - 1.0)) * &bread * meat * &bread;
    ((0..k).map(|a| beta[a]).collect(), v)
}

fn cluster_test_data(seed: u64, n: usize, n_clusters: u32) -> (Table, ModelSpec, Vec<f64>, Vec<Vec<f64>>, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clusters: Vec<u32> = (0..n).map(|i| (i as u32) % n_clusters).collect();
    let x: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            1.5 * x[0][i] - 0.7 * x[1][i]
                + clusters[i] as f64 * 0.1
                + rng.gen_range(-1.0..1.0) * (1.0 + clusters[i] as f64 * 0.05)
        })
        .collect();
    let mut table = Table::new(n);
    table.add_column("y", y.clone()).unwrap();
    table.add_column("x0", x[0].clone()).unwrap();
    table.add_column("x1", x[1].clone()).unwrap();
    table.add_group("cell", clusters.clone()).unwrap();
    let spec = ModelSpec {
        outcome: "y".into(),
        regressors: vec!["x0".into(), "x1".into()],
        fe_dims: vec![FeDim::Cell],
        family: Family::Linear,
        vcov: vec![VcovSpec::ClusterCell],
    };
    (table, spec, y, x, clusters)
}

#[test]
fn cluster_vcov_matches_explicit_crve_oracle() {
    let (table, spec, y, x, clusters) = cluster_test_data(21, 300, 30);
    let fit = fit_fe_linear(&table, &spec).unwrap();
    let (beta_o, v_o) = explicit_crve(&y, &x, &clusters, &clusters);
    for a in 0..2 {
        assert!((fit.coefficients[a].1 - beta_o[a]).abs() < 1e-10);
    }
    let v = fit.vcov(&VcovSpec::ClusterCell).unwrap();
    for a in 0..2 {
        for b in 0..2 {
            assert!(
                (v[(a, b)] - v_o[(a, b)]).abs() < 1e-10,
                "({a},{b}): {} vs {}",
                v[(a, b)],
                v_o[(a, b)]
            );
        }
    }
}

#[test]
fn singleton_clusters_reduce_to_heteroskedastic_sandwich() {
    let (table, spec, _, _, _) = cluster_test_data(4, 120, 6);
    let fit = fit_fe_linear(&table, &spec).unwrap();
    let singleton_ids: Vec<u32> = (0..fit.n_obs_used as u32).collect();
    let v = vcov_cluster(&fit, &singleton_ids).unwrap();
    // HC0 x n/(n-1), assembled from the stored scores
    let n = fit.n_obs_used;
    let k = fit.inference.k;
    let mut meat = DMatrix::zeros(k, k);
    for i in 0..n {
        let s = DVector::from_iterator(k, (0..k).map(|a| fit.inference.scores[i * k + a]));
        meat += &s * s.transpose();
    }
    let hc0 = &fit.inference.bread * meat * &fit.inference.bread;
    let expect = hc0 * (n as f64 / (n as f64 - 1.0));
    for a in 0..k {
        for b in 0..k {
            assert!((v[(a, b)] - expect[(a, b)]).abs() < 1e-10);
        }
    }
}

#[test]
fn cluster_vcov_is_invariant_to_label_permutation() {
    let (table, spec, _, _, clusters) = cluster_test_data(8, 200, 20);
    let fit = fit_fe_linear(&table, &spec).unwrap();
    let v1 = vcov_cluster(&fit, &clusters).unwrap();
    let relabeled: Vec<u32> = clusters.iter().map(|&c| (c * 7 + 3) % 1000 + 500).collect();
    let v2 = vcov_cluster(&fit, &relabeled).unwrap();
    for a in 0..2 {
        for b in 0..2 {
            assert!((v1[(a, b)] - v2[(a, b)]).abs() < 1e-14);
        }
    }
    // single cluster errors
    assert!(matches!(
        vcov_cluster(&fit, &vec![5u32; fit.n_obs_used]),
        Err(Error::DegenerateVcov(_))
    ));
}

// ---------------------------------------------------------------------------
// Conley vcov
// ---------------------------------------------------------------------------

/// Three cells on the equator at 0, ~333 m, and ~1000 m east.
fn three_cell_centroids() -> Vec<GeoPoint> {
    vec![
        GeoPoint { lat: 0.0, lon: 0.0 },
        GeoPoint { lat: 0.0, lon: 0.003 },
        GeoPoint { lat: 0.0, lon: 0.009 },
    ]
}

fn three_cell_fit() -> (FitResult, Vec<f64>, Vec<Vec<f64>>, Vec<u32>, Vec<u32>) {
    let n = 12;
    let cells: Vec<u32> = (0..n).map(|i| (i % 3) as u32).collect();
    let times: Vec<u32> = (0..n).map(|i| (i / 3) as u32).collect();
    let x: Vec<Vec<f64>> = vec![
        vec![0.4, -1.2, 0.9, 1.5, -0.3, 0.8, -0.7, 1.1, 0.2, -0.9, 0.6, 1.3],
        vec![1.0, 0.5, -0.5, 0.2, 0.9, -1.1, 0.4, -0.2, 1.2, 0.7, -0.8, 0.1],
    ];
    let y: Vec<f64> = (0..n)
        .map(|i| 0.8 * x[0][i] - 0.4 * x[1][i] + cells[i] as f64 * 0.3 + ((i * 37 % 11) as f64 - 5.0) * 0.21)
        .collect();
    let mut table = Table::new(n);
    table.add_column("y", y.clone()).unwrap();
    table.add_column("x0", x[0].clone()).unwrap();
    table.add_column("x1", x[1].clone()).unwrap();
    table.add_group("cell", cells.clone()).unwrap();
    table.add_group("time", times.clone()).unwrap();
    let spec = ModelSpec {
        outcome: "y".into(),
        regressors: vec!["x0".into(), "x1".into()],
        fe_dims: vec![FeDim::Cell],
        family: Family::Linear,
        vcov: vec![VcovSpec::ClusterCell],
    };
    let fit = fit_fe_linear(&table, &spec).unwrap();
    (fit, y, x, cells, times)
}

/// Hand-computed double-sum Conley oracle over observation pairs.
fn explicit_conley(
    fit: &FitResult,
    centroids: &[GeoPoint],
    cutoff_m: f64,
) -> DMatrix<f64> {
    let n = fit.n_obs_used;
    let k = fit.inference.k;
    let cells = fit.obs_cells();
    let times = fit.obs_times();
    let score = |i: usize| {
        DVector::from_iterator(k, (0..k).map(|a| fit.inference.scores[i * k + a]))
    };
    let mut meat = DMatrix::zeros(k, k);
    for i in 0..n {
        for j in 0..n {
            let same_cell = cells[i] == cells[j];
            let same_time = times[i] == times[j];
            let d = crate::geo::great_circle_distance(
                centroids[cells[i] as usize],
                centroids[cells[j] as usize],
            );
            let include = if same_time { d <= cutoff_m } else { same_cell };
            if include {
                meat += score(i) * score(j).transpose();
            }
        }
    }
    let g: std::collections::BTreeSet<u32> = cells.iter().copied().collect();
    let g = g.len() as f64;
    (g / (g - 1.0)) * &fit.inference.bread * meat * &fit.inference.bread
}

#[test]
fn conley_matches_hand_computed_double_sum() {
    let (fit, ..) = three_cell_fit();
    let centroids = three_cell_centroids();
    for cutoff in [500.0, 800.0, 1200.0] {
        let v = vcov_conley(&fit, &centroids, cutoff).unwrap();
        let oracle = explicit_conley(&fit, &centroids, cutoff);
        for a in 0..2 {
            for b in 0..2 {
                assert!(
                    (v.matrix[(a, b)] - oracle[(a, b)]).abs() < 1e-10,
                    "cutoff {cutoff} ({a},{b}): {} vs {}",
                    v.matrix[(a, b)],
                    oracle[(a, b)]
                );
            }
        }
    }
}

#[test]
fn conley_below_spacing_equals_cluster_vcov() {
    let (fit, ..) = three_cell_fit();
    let centroids = three_cell_centroids();
    let conley = vcov_conley(&fit, &centroids, 1.0).unwrap();
    assert!(!conley.psd_repaired);
    let cluster = vcov_cluster(&fit, fit.obs_cells()).unwrap();
    for a in 0..2 {
        for b in 0..2 {
            assert_eq!(conley.matrix[(a, b)], cluster[(a, b)]);
        }
    }
}

#[test]
fn conley_kernel_support_grows_with_cutoff() {
    let (fit, ..) = three_cell_fit();
    let centroids = three_cell_centroids();
    // trace of the meat grows weakly as pairs enter; compare through the
    // sandwich against the explicit oracle pair counts
    let mut last_pairs = 0usize;
    for cutoff in [1.0, 400.0, 700.0, 1100.0] {
        let cells = fit.obs_cells();
        let times = fit.obs_times();
        let mut pairs = 0usize;
        for i in 0..fit.n_obs_used {
            for j in 0..fit.n_obs_used {
                let d = crate::geo::great_circle_distance(
                    centroids[cells[i] as usize],
                    centroids[cells[j] as usize],
                );
                let include =
                    if times[i] == times[j] { d <= cutoff } else { cells[i] == cells[j] };
                if include {
                    pairs += 1;
                }
            }
        }
        assert!(pairs >= last_pairs, "pair set shrank at cutoff {cutoff}");
        last_pairs = pairs;
        // and the implementation agrees with that pair set
        let v = vcov_conley(&fit, &centroids, cutoff).unwrap();
        let oracle = explicit_conley(&fit, &centroids, cutoff);
        assert!((v.matrix[(0, 0)] - oracle[(0, 0)]).abs() < 1e-10);
    }
}

#[test]
fn conley_missing_centroid_is_a_consistency_error() {
    let (fit, ..) = three_cell_fit();
    let centroids = vec![GeoPoint { lat: 0.0, lon: 0.0 }];
    assert!(matches!(
        vcov_conley(&fit, &centroids, 500.0),
        Err(Error::Consistency(_))
    ));
}

// ---------------------------------------------------------------------------
// Wald test and BIC
// ---------------------------------------------------------------------------

#[test]
fn single_coefficient_wald_is_squared_z() {
    let (table, spec, ..) = cluster_test_data(13, 250, 25);
    let fit = fit_fe_linear(&table, &spec).unwrap();
    let beta = fit.coefficient("x0").unwrap();
    let se = fit.se(&VcovSpec::ClusterCell, "x0").unwrap();
    let w = wald_joint_test(&fit, &["x0"], &VcovSpec::ClusterCell).unwrap();
    assert_eq!(w.dof, 1);
    assert!((w.statistic - (beta / se).powi(2)).abs() < 1e-10);
    assert!((0.0..1.0).contains(&w.p_value));
    // empty subset and unknown names error
    assert!(wald_joint_test(&fit, &[], &VcovSpec::ClusterCell).is_err());
    assert!(wald_joint_test(&fit, &["zzz"], &VcovSpec::ClusterCell).is_err());
}

#[test]
fn bic_matches_hand_arithmetic_on_ten_observations() {
    let y = vec![1.0, 0.0, 2.0, 1.0, 3.0, 0.0, 1.0, 2.0, 0.0, 1.0];
    let x: Vec<f64> = (0..10).map(|i| (i as f64 - 4.5) / 3.0).collect();
    let mut table = Table::new(10);
    table.add_column("y", y.clone()).unwrap();
    table.add_column("x", x.clone()).unwrap();
    table.add_group("cell", vec![0; 10]).unwrap();
    let spec = ModelSpec {
        outcome: "y".into(),
        regressors: vec!["x".into()],
        fe_dims: vec![FeDim::Cell],
        family: Family::Poisson,
        vcov: vec![],
    };
    let fit = fit_fe_poisson(&table, &spec).unwrap();
    // oracle: dummy Newton gives (slope, intercept); rebuild loglik directly
    let coefs = newton_dummy_poisson(&y, &[x.clone()], &[vec![0; 10]]);
    assert!((fit.coefficient("x").unwrap() - coefs[0]).abs() < 1e-6);
    let expected_bic = -2.0 * fit.loglik + 1.0 * 10f64.ln();
    assert!((fit.bic - expected_bic).abs() < 1e-10);
    assert!((bic(fit.loglik, 1, 10) - expected_bic).abs() < 1e-12);
}

#[test]
fn nested_models_and_the_bic_penalty() {
    let p = random_poisson_problem(17, 1000, 10);
    let small_spec = ModelSpec {
        outcome: "y".into(),
        regressors: p.regressors[..2].to_vec(),
        fe_dims: p.fe_dims.clone(),
        family: Family::Poisson,
        vcov: vec![],
    };
    let small = fit_fe_poisson(&p.table, &small_spec).unwrap();
    let full = fit_fe_poisson(&p.table, &poisson_spec(&p)).unwrap();
    assert!(full.loglik >= small.loglik - 1e-6, "nested loglik decreased");

    // an irrelevant regressor changes BIC by ~= ln(n)
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let noise: Vec<f64> = (0..p.y.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut table = p.table.clone();
    table.add_column("noise", noise).unwrap();
    let mut spec_n = poisson_spec(&p);
    spec_n.vcov.clear();
    spec_n.regressors.push("noise".into());
    let with_noise = fit_fe_poisson(&table, &spec_n).unwrap();
    let delta = with_noise.bic - full.bic;
    let ln_n = (full.n_obs_used as f64).ln();
    assert!(delta > ln_n - 10.0 && delta <= ln_n + 1e-6, "delta {delta}, ln n {ln_n}");
}

// ---------------------------------------------------------------------------
// exports
// ---------------------------------------------------------------------------

#[test]
fn fit_json_and_regression_table_render() {
    let (table, spec, ..) = cluster_test_data(31, 160, 16);
    let mut fit = fit_fe_linear(&table, &spec).unwrap();
    let centroids: Vec<GeoPoint> = (0..16)
        .map(|i| GeoPoint { lat: 0.0, lon: 0.001 * i as f64 })
        .collect();
    let conley = vcov_conley(&fit, &centroids, 400.0).unwrap();
    fit.attach_vcov(
        VcovSpec::ConleySpatial { cutoff_m: 400.0 },
        conley.matrix,
        conley.psd_repaired,
    );
    let json = fit.to_json().unwrap();
    assert!(json.contains("\"cluster_cell\""));
    assert!(json.contains("\"conley_400m\""));
    assert!(json.contains("\"n_obs_used\""));
    let mut csv = Vec::new();
    write_regression_table_csv(&[("c400".into(), &fit)], &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("term,c400_coef,c400_se_cluster,c400_se_conley,c400_signif"));
    assert!(text.contains("\nx0,"));
    assert!(text.contains("\nn_obs_used,"));
    assert!(text.contains("\nbic,"));
}
