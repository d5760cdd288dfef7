//! Pipeline stages behind the subcommands.
//!
//! Every stage writes its artifacts into the output directory and records
//! itself in the run manifest. A stage failure stops the run: the manifest is
//! still written with the failure stage marked, earlier outputs are kept, and
//! the process exits 1 (2 for configuration or input problems).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use chrono::NaiveDateTime;

use placeval_core::effects::{
    counterfactual_prevented, dose_effect_fraction, write_dose_response_csv, EffectsReport,
};
use placeval_core::estimator::{
    fit_fe_poisson, vcov_conley, write_regression_table_csv, Family, FeDim, FitResult, ModelSpec,
    VcovSpec,
};
use placeval_core::geo::{Boundary, GeoPoint};
use placeval_core::grid::{build_hex_grid, HexGrid};
use placeval_core::ingest::{
    aggregate, read_blitzes_csv, read_crimes_csv, Aggregates, DropReason, Period, RecordSource,
    StudyWindow,
};
use placeval_core::panel::{lag_name, Panel, BLITZ, BLITZ_SQ, CRIME, W_BLITZ};
use placeval_core::simkit::{simulate_on, DGPConfig};
use placeval_core::weights::{build_weights, WeightMatrix, WeightScheme};

use crate::config::RunConfig;
use crate::manifest::RunManifest;

/// Distinguishes bad configuration/input (exit 2) from stage failures
/// (exit 1).
#[derive(Debug)]
pub enum CmdError {
    Input(anyhow::Error),
    Stage(anyhow::Error),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Input(_) => 2,
            CmdError::Stage(_) => 1,
        }
    }

    pub fn message(&self) -> String {
        match self {
            CmdError::Input(e) | CmdError::Stage(e) => format!("{e:#}"),
        }
    }
}

pub type CmdResult<T> = std::result::Result<T, CmdError>;

fn input_err<T>(e: anyhow::Error) -> CmdResult<T> {
    Err(CmdError::Input(e))
}

pub struct Ctx {
    pub config: RunConfig,
    pub config_bytes: Vec<u8>,
    pub out_dir: PathBuf,
    pub verbose: bool,
}

impl Ctx {
    pub fn new(config: RunConfig, config_bytes: Vec<u8>, out_dir: Option<PathBuf>, verbose: bool) -> CmdResult<Ctx> {
        let out_dir = out_dir.unwrap_or_else(|| config.paths.output_dir.clone());
        if let Err(e) = fs::create_dir_all(&out_dir) {
            return input_err(anyhow!("cannot create output dir {}: {e}", out_dir.display()));
        }
        Ok(Ctx { config, config_bytes, out_dir, verbose })
    }

    fn log(&self, msg: &str) {
        if self.verbose {
            eprintln!("[placeval] {msg}");
        }
    }

    fn write_output(&self, manifest: &mut RunManifest, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.out_dir.join(name), bytes)?;
        manifest.record_output(name);
        Ok(())
    }

    pub fn window(&self) -> StudyWindow {
        StudyWindow::new(self.config.start_date(), self.config.window.n_days)
            .expect("validated window")
    }
}

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

pub fn stage_grid(ctx: &Ctx, manifest: &mut RunManifest) -> CmdResult<HexGrid> {
    let path = match &ctx.config.paths.boundary {
        Some(p) => p.clone(),
        None => return input_err(anyhow!("paths.boundary is required")),
    };
    if manifest.hash_input("boundary", &path).is_err() {
        return input_err(anyhow!("cannot read boundary file {}", path.display()));
    }
    let boundary = match Boundary::from_geojson_file(&path) {
        Ok(b) => b,
        Err(e) => return input_err(anyhow!("invalid boundary: {e}")),
    };
    let grid = match build_hex_grid(&boundary, ctx.config.grid.nominal_cell_area_km2) {
        Ok(g) => g,
        Err(e) => return input_err(anyhow!("tessellation failed: {e}")),
    };
    let mut csv = Vec::new();
    grid.write_cells_csv(&mut csv)
        .map_err(|e| CmdError::Stage(e.into()))?;
    ctx.write_output(manifest, "cells.csv", &csv)
        .map_err(CmdError::Stage)?;
    manifest.stage_ok(
        "grid",
        format!("{} cells, mean area {:.6} km2", grid.n_cells(), grid.mean_cell_area_km2()),
    );
    println!(
        "grid: {} cells, mean area {:.6} km2 (nominal {:.6})",
        grid.n_cells(),
        grid.mean_cell_area_km2(),
        ctx.config.grid.nominal_cell_area_km2
    );
    Ok(grid)
}

pub fn stage_ingest(ctx: &Ctx, manifest: &mut RunManifest, grid: &HexGrid) -> CmdResult<Aggregates> {
    let crimes_path = match &ctx.config.paths.crimes {
        Some(p) => p.clone(),
        None => return input_err(anyhow!("paths.crimes is required")),
    };
    let blitzes_path = match &ctx.config.paths.blitzes {
        Some(p) => p.clone(),
        None => return input_err(anyhow!("paths.blitzes is required")),
    };
    for (label, path) in [("crimes", &crimes_path), ("blitzes", &blitzes_path)] {
        if manifest.hash_input(label, path).is_err() {
            return input_err(anyhow!("cannot read {label} file {}", path.display()));
        }
    }
    ctx.log("loading event and intervention records");
    let crimes_file = fs::File::open(&crimes_path).map_err(|e| CmdError::Input(e.into()))?;
    let crimes = read_crimes_csv(crimes_file).map_err(|e| CmdError::Input(e.into()))?;
    let blitz_file = fs::File::open(&blitzes_path).map_err(|e| CmdError::Input(e.into()))?;
    let blitzes = read_blitzes_csv(blitz_file).map_err(|e| CmdError::Input(e.into()))?;

    let window = ctx.window();
    let mut agg = aggregate(grid, &window, &crimes.records, &blitzes.records);

    // merge loader-rejected rows into the ledger, mapping kept-record indices
    // back to source CSV rows
    for e in &mut agg.ledger.entries {
        let rows = match e.source {
            RecordSource::Crime => &crimes.source_rows,
            RecordSource::Blitz => &blitzes.source_rows,
        };
        e.record_index = rows[e.record_index as usize];
    }
    for &row in &crimes.malformed {
        agg.ledger.push(RecordSource::Crime, row, DropReason::Malformed);
    }
    for &row in &blitzes.malformed {
        agg.ledger.push(RecordSource::Blitz, row, DropReason::Malformed);
    }

    let mut ledger_csv = Vec::new();
    agg.ledger
        .write_csv(&mut ledger_csv)
        .map_err(|e| CmdError::Stage(e.into()))?;
    ctx.write_output(manifest, "drop_ledger.csv", &ledger_csv)
        .map_err(CmdError::Stage)?;

    let mut agg_csv = String::from("cell,day,period,violent_count,blitz_hours,officers,seizures,motorcycles\n");
    for (&(cell, day, period), slot) in &agg.map {
        agg_csv.push_str(&format!(
            "{cell},{day},{},{},{},{},{},{}\n",
            period.index(),
            slot.violent_count,
            slot.blitz_hours,
            slot.officers,
            slot.seizures,
            slot.motorcycles
        ));
    }
    ctx.write_output(manifest, "aggregates.csv", agg_csv.as_bytes())
        .map_err(CmdError::Stage)?;
    manifest.stage_ok(
        "ingest",
        format!(
            "{} crimes kept, {} blitzes kept, {} dropped",
            agg.crimes_kept,
            agg.blitzes_kept,
            agg.ledger.entries.len()
        ),
    );
    println!(
        "ingest: {} crimes kept, {} blitzes kept, {} records dropped",
        agg.crimes_kept,
        agg.blitzes_kept,
        agg.ledger.entries.len()
    );
    Ok(agg)
}

pub fn stage_panel(
    ctx: &Ctx,
    manifest: &mut RunManifest,
    grid: &HexGrid,
    agg: &Aggregates,
) -> CmdResult<Panel> {
    ctx.log("assembling balanced panel");
    let mut panel = Panel::assemble(grid, agg, ctx.config.start_date(), ctx.config.window.n_days)
        .map_err(|e| CmdError::Stage(e.into()))?;
    for j in ctx.config.model.lag_set() {
        let col = panel.temporal_lag(BLITZ, j).map_err(|e| CmdError::Stage(e.into()))?;
        panel
            .add_column(&lag_name(BLITZ, j), col)
            .map_err(|e| CmdError::Stage(e.into()))?;
    }
    for cov in &ctx.config.model.interactions {
        let col = panel
            .interaction(BLITZ, cov)
            .map_err(|e| CmdError::Stage(anyhow!("interaction with `{cov}`: {e}")))?;
        panel
            .add_column(&format!("{BLITZ}_x_{cov}"), col)
            .map_err(|e| CmdError::Stage(e.into()))?;
    }
    let mut bin = Vec::new();
    let mut sidecar = Vec::new();
    panel
        .write_files(&mut bin, &mut sidecar)
        .map_err(|e| CmdError::Stage(e.into()))?;
    ctx.write_output(manifest, "panel.bin", &bin).map_err(CmdError::Stage)?;
    ctx.write_output(manifest, "panel.json", &sidecar).map_err(CmdError::Stage)?;
    if panel.n_rows() < 1_000_000 {
        let mut csv = Vec::new();
        panel.write_csv(&mut csv).map_err(|e| CmdError::Stage(e.into()))?;
        ctx.write_output(manifest, "panel.csv", &csv).map_err(CmdError::Stage)?;
    }
    manifest.stage_ok("panel", format!("{} rows", panel.n_rows()));
    println!("panel: {} rows ({} cells x {} days x 4)", panel.n_rows(), panel.n_cells(), panel.n_days());
    Ok(panel)
}

/// Weight-matrix build order: contiguity first, then cutoffs ascending.
pub fn weight_plan(config: &RunConfig) -> Vec<(String, WeightScheme, Option<f64>)> {
    let mut plan = Vec::new();
    if config.weights.contiguity {
        plan.push(("contiguity".to_string(), WeightScheme::BinaryContiguity, None));
    }
    let mut cutoffs = config.weights.cutoffs_m.clone();
    cutoffs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for c in cutoffs {
        plan.push((format!("{}m", c.round() as i64), WeightScheme::InverseDistance, Some(c)));
    }
    plan
}

pub fn stage_weights(
    ctx: &Ctx,
    manifest: &mut RunManifest,
    grid: &HexGrid,
) -> CmdResult<Vec<(String, Option<f64>, WeightMatrix)>> {
    let mut out = Vec::new();
    for (label, scheme, cutoff) in weight_plan(&ctx.config) {
        ctx.log(&format!("building weights: {label}"));
        let w = build_weights(grid, scheme, cutoff, ctx.config.weights.row_standardize)
            .map_err(|e| CmdError::Stage(e.into()))?;
        let mut csv = Vec::new();
        w.write_csv(&mut csv).map_err(|e| CmdError::Stage(e.into()))?;
        ctx.write_output(manifest, &format!("weights_{label}.csv"), &csv)
            .map_err(CmdError::Stage)?;
        println!("weights {label}: avg neighbors {:.2}", w.avg_neighbor_count);
        out.push((label, cutoff, w));
    }
    manifest.stage_ok("weights", format!("{} matrices", out.len()));
    Ok(out)
}

pub fn stage_fits(
    ctx: &Ctx,
    manifest: &mut RunManifest,
    grid: &HexGrid,
    panel: &mut Panel,
    weights: &[(String, Option<f64>, WeightMatrix)],
) -> CmdResult<Vec<(String, Option<f64>, FitResult)>> {
    let mut regressors = vec![BLITZ.to_string(), BLITZ_SQ.to_string(), W_BLITZ.to_string()];
    for j in ctx.config.model.lag_set() {
        regressors.push(lag_name(BLITZ, j));
    }
    for cov in &ctx.config.model.interactions {
        regressors.push(format!("{BLITZ}_x_{cov}"));
    }
    let centroids: Vec<GeoPoint> = grid.cells().iter().map(|c| c.centroid).collect();
    let mut fits = Vec::new();
    for (label, cutoff, w) in weights {
        ctx.log(&format!("fitting column {label}"));
        let w_col = panel.spatial_lag(w, BLITZ).map_err(|e| CmdError::Stage(e.into()))?;
        if panel.has_column(W_BLITZ) {
            panel.replace_column(W_BLITZ, w_col).map_err(|e| CmdError::Stage(e.into()))?;
        } else {
            panel.add_column(W_BLITZ, w_col).map_err(|e| CmdError::Stage(e.into()))?;
        }
        let spec = ModelSpec {
            outcome: CRIME.to_string(),
            regressors: regressors.clone(),
            fe_dims: vec![FeDim::CellPeriodDow, FeDim::Day],
            family: Family::Poisson,
            vcov: vec![VcovSpec::ClusterCell],
        };
        let mut fit = fit_fe_poisson(panel, &spec)
            .map_err(|e| CmdError::Stage(anyhow!("fit {label}: {e}")))?;
        if ctx.config.model.conley {
            if let Some(c) = cutoff {
                let conley = vcov_conley(&fit, &centroids, *c)
                    .map_err(|e| CmdError::Stage(anyhow!("conley {label}: {e}")))?;
                fit.attach_vcov(
                    VcovSpec::ConleySpatial { cutoff_m: *c },
                    conley.matrix,
                    conley.psd_repaired,
                );
            }
        }
        let json = fit.to_json().map_err(|e| CmdError::Stage(e.into()))?;
        ctx.write_output(manifest, &format!("fit_{label}.json"), json.as_bytes())
            .map_err(CmdError::Stage)?;
        println!(
            "fit {label}: n_used {}, dropped groups {}, converged {}",
            fit.n_obs_used, fit.dropped.count, fit.converged
        );
        fits.push((label.clone(), *cutoff, fit));
    }
    let named: Vec<(String, &FitResult)> =
        fits.iter().map(|(l, _, f)| (l.clone(), f)).collect();
    let mut table = Vec::new();
    write_regression_table_csv(&named, &mut table).map_err(|e| CmdError::Stage(e.into()))?;
    ctx.write_output(manifest, "regression_table.csv", &table)
        .map_err(CmdError::Stage)?;
    manifest.stage_ok("fit", format!("{} fit columns", fits.len()));
    Ok(fits)
}

pub fn stage_effects(
    ctx: &Ctx,
    manifest: &mut RunManifest,
    panel: &Panel,
    weights: &[(String, Option<f64>, WeightMatrix)],
    fits: &[(String, Option<f64>, FitResult)],
) -> CmdResult<EffectsReport> {
    let effects_cfg = match &ctx.config.effects {
        Some(e) => e,
        None => return input_err(anyhow!("[effects] config section is required")),
    };
    // preferred fit: the configured cutoff, else the first inverse-distance
    // column, else the first fit
    let pick = |cut: Option<f64>| fits.iter().position(|(_, c, _)| *c == cut);
    let idx = ctx
        .config
        .model
        .preferred_cutoff_m
        .and_then(|c| pick(Some(c)))
        .or_else(|| fits.iter().position(|(_, c, _)| c.is_some()))
        .unwrap_or(0);
    let (label, cutoff, fit) = &fits[idx];
    let avg_neighbors = weights
        .iter()
        .find(|(l, _, _)| l == label)
        .map(|(_, _, w)| w.avg_neighbor_count)
        .ok_or_else(|| CmdError::Stage(anyhow!("no weight matrix for fit {label}")))?;
    let delta = fit
        .coefficient(BLITZ)
        .ok_or_else(|| CmdError::Stage(anyhow!("fit has no blitz coefficient")))?;
    let theta = fit
        .coefficient(BLITZ_SQ)
        .ok_or_else(|| CmdError::Stage(anyhow!("fit has no blitz_sq coefficient")))?;
    let rho = fit
        .coefficient(W_BLITZ)
        .ok_or_else(|| CmdError::Stage(anyhow!("fit has no w_blitz coefficient")))?;
    let mut lag_coefs = BTreeMap::new();
    for j in ctx.config.model.lag_set() {
        if let Some(g) = fit.coefficient(&lag_name(BLITZ, j)) {
            lag_coefs.insert(j, g);
        }
    }

    // data-driven counterfactual inputs: treated cell-periods and their means
    let blitz = panel.column(BLITZ).map_err(|e| CmdError::Stage(e.into()))?;
    let crime = panel.crime();
    let mut treated = 0u64;
    let mut hours_sum = 0.0;
    let mut crime_sum = 0.0;
    for (i, &h) in blitz.iter().enumerate() {
        if h > 0.0 {
            treated += 1;
            hours_sum += h;
            crime_sum += crime[i] as f64;
        }
    }
    if treated == 0 {
        return Err(CmdError::Stage(anyhow!("no treated cell-periods; effects are undefined")));
    }
    let mean_hours = hours_sum / treated as f64;
    let avg_treated_outcome = crime_sum / treated as f64;
    let effect_fraction = dose_effect_fraction(delta, theta, mean_hours);
    if effect_fraction > 0.0 || effect_fraction <= -1.0 {
        return Err(CmdError::Stage(anyhow!(
            "estimated dose effect {effect_fraction:.4} at the mean treated dose \
             {mean_hours:.2} h lies outside (-1, 0]; counterfactual undefined"
        )));
    }
    let params =
        effects_cfg.cost_benefit_params(treated, avg_treated_outcome, effect_fraction);
    let report = EffectsReport::build(delta, theta, rho, &lag_coefs, avg_neighbors, &params)
        .map_err(|e| CmdError::Stage(e.into()))?;
    let json = report.to_json().map_err(|e| CmdError::Stage(e.into()))?;
    ctx.write_output(manifest, "effects.json", json.as_bytes())
        .map_err(CmdError::Stage)?;
    ctx.write_output(manifest, "effects.txt", report.render_text().as_bytes())
        .map_err(CmdError::Stage)?;
    let mut dose = Vec::new();
    write_dose_response_csv(delta, theta, &mut dose).map_err(|e| CmdError::Stage(e.into()))?;
    ctx.write_output(manifest, "dose_response.csv", &dose)
        .map_err(CmdError::Stage)?;
    let cf = counterfactual_prevented(avg_treated_outcome, effect_fraction, treated)
        .map_err(|e| CmdError::Stage(e.into()))?;
    manifest.stage_ok(
        "effects",
        format!(
            "from fit {label} (cutoff {cutoff:?}): direct {:.2}%, prevented {:.1}",
            report.direct_pct, cf.total_prevented
        ),
    );
    println!("{}", report.render_text());
    Ok(report)
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn period_start(day: u32, period: usize) -> (u32, u32) {
    (day, 6 * period as u32)
}

fn fmt_dt(t: NaiveDateTime) -> String {
    t.format("%Y-%m-%dT%H:%M:%S").to_string()
}

/// Generates synthetic crimes/blitzes CSVs in the ingest schema plus a truth
/// file, on a grid tessellated from an emitted rectangular boundary so the
/// pipeline reconstructs the identical grid from the same files.
pub fn cmd_simulate(ctx: &Ctx) -> CmdResult<()> {
    let mut manifest = RunManifest::new(&ctx.config_bytes);
    let sim = match &ctx.config.sim {
        Some(s) => s,
        None => return input_err(anyhow!("[sim] config section is required for simulate")),
    };
    let mut dgp: DGPConfig = sim.to_dgp().map_err(CmdError::Input)?;
    dgp.validate().map_err(|e| CmdError::Input(e.into()))?;

    // square boundary sized for ~n_cells hexagons
    let side_km = (dgp.n_cells as f64 * dgp.cell_area_km2).sqrt();
    let side_deg = side_km * 1000.0 / placeval_core::geo::M_PER_DEG_LAT;
    let sw = GeoPoint { lat: 0.0, lon: 0.0 };
    let ne = GeoPoint { lat: side_deg, lon: side_deg };
    let boundary = Boundary::rectangle(sw, ne).map_err(|e| CmdError::Stage(e.into()))?;
    let grid = build_hex_grid(&boundary, dgp.cell_area_km2)
        .map_err(|e| CmdError::Stage(e.into()))?;
    dgp.n_cells = grid.n_cells() as u32;
    let weights = build_weights(&grid, dgp.weight_scheme, dgp.cutoff_m, dgp.row_standardize)
        .map_err(|e| CmdError::Stage(e.into()))?;
    let data = simulate_on(&grid, &weights, &dgp).map_err(|e| CmdError::Stage(e.into()))?;

    // boundary GeoJSON (lon, lat ring)
    let ring: Vec<[f64; 2]> = boundary
        .ring()
        .iter()
        .chain(boundary.ring().first())
        .map(|p| [p.lon, p.lat])
        .collect();
    let geojson = serde_json::json!({ "type": "Polygon", "coordinates": [ring] });
    ctx.write_output(&mut manifest, "boundary.geojson", geojson.to_string().as_bytes())
        .map_err(CmdError::Stage)?;

    let start = data.panel.study_start_date();
    let n_cells = data.panel.n_cells();
    let blitz_col = data.panel.column(BLITZ).map_err(|e| CmdError::Stage(e.into()))?;
    let crime_col = data.panel.crime();

    let mut crimes = String::from("kind,lat,lon,timestamp\n");
    let mut blitzes = String::from(
        "lat,lon,start,end,officers,vehicles,type,stopped,tickets,seizures,weapons,drugs\n",
    );
    let mut emitted_crimes = 0u64;
    for row in 0..data.panel.n_rows() {
        let cell = row % n_cells;
        let dt = row / n_cells;
        let (day, hour) = period_start((dt / 4) as u32, dt % 4);
        let centroid = grid.cell(cell as u32).centroid;
        let day_date = start + chrono::Duration::days(day as i64);
        for _ in 0..crime_col[row] {
            let kind = if emitted_crimes % 20 == 0 { "murder" } else { "robbery" };
            let t = day_date.and_hms_opt(hour, 1, 0).unwrap();
            crimes.push_str(&format!(
                "{kind},{},{},{}\n",
                centroid.lat,
                centroid.lon,
                fmt_dt(t)
            ));
            emitted_crimes += 1;
        }
        let hours = blitz_col[row];
        if hours > 0.0 {
            let t0 = day_date.and_hms_opt(hour, 0, 0).unwrap();
            let t1 = t0 + chrono::Duration::minutes((hours * 60.0).round() as i64);
            let officers = 2 + (row % 9) as u32;
            let vehicles = (row % 4) as u32;
            let blitz_type = if row % 100 < 59 { "mobile" } else { "fixed" };
            let stopped = 80 + (row % 32) as u32;
            let tickets = (row % 20) as u32;
            let seizures = (row % 6) as u32;
            blitzes.push_str(&format!(
                "{},{},{},{},{officers},{vehicles},{blitz_type},{stopped},{tickets},{seizures},0,0\n",
                centroid.lat,
                centroid.lon,
                fmt_dt(t0),
                fmt_dt(t1)
            ));
        }
    }
    ctx.write_output(&mut manifest, "crimes.csv", crimes.as_bytes())
        .map_err(CmdError::Stage)?;
    ctx.write_output(&mut manifest, "blitzes.csv", blitzes.as_bytes())
        .map_err(CmdError::Stage)?;

    let truth = serde_json::json!({
        "n_cells": dgp.n_cells,
        "n_days": dgp.n_days,
        "avg_neighbor_count": weights.avg_neighbor_count,
        "truth": data.truth.iter().cloned().collect::<BTreeMap<String, f64>>(),
        "config": &dgp,
    });
    ctx.write_output(
        &mut manifest,
        "truth.json",
        serde_json::to_string_pretty(&truth)
            .map_err(|e| CmdError::Stage(e.into()))?
            .as_bytes(),
    )
    .map_err(CmdError::Stage)?;
    manifest.stage_ok(
        "simulate",
        format!("{} cells, {} crimes, boundary + truth emitted", dgp.n_cells, emitted_crimes),
    );
    manifest.write(&ctx.out_dir).map_err(CmdError::Stage)?;
    println!(
        "simulate: {} cells x {} days, {} crime events emitted",
        dgp.n_cells, dgp.n_days, emitted_crimes
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// composed commands
// ---------------------------------------------------------------------------

pub enum RunUpTo {
    Grid,
    Ingest,
    Panel,
    Weights,
    Fit,
    Effects,
}

/// Runs stages in order up to the requested one, writing the manifest at the
/// end regardless of outcome.
pub fn run_stages(ctx: &Ctx, up_to: RunUpTo) -> CmdResult<()> {
    let mut manifest = RunManifest::new(&ctx.config_bytes);
    let result = run_stages_inner(ctx, &up_to, &mut manifest);
    if let Err(e) = &result {
        let stage = match e {
            CmdError::Input(_) => "input",
            CmdError::Stage(_) => "stage",
        };
        if manifest.failure_stage.is_none() {
            manifest.stage_failed(stage, e.message());
        }
    }
    manifest.write(&ctx.out_dir).map_err(CmdError::Stage)?;
    result
}

fn run_stages_inner(ctx: &Ctx, up_to: &RunUpTo, manifest: &mut RunManifest) -> CmdResult<()> {
    let grid = match stage_grid(ctx, manifest) {
        Ok(g) => g,
        Err(e) => {
            manifest.stage_failed("grid", e.message());
            return Err(e);
        }
    };
    if matches!(up_to, RunUpTo::Grid) {
        return Ok(());
    }
    // weights do not depend on ingest; the weights subcommand skips it
    if matches!(up_to, RunUpTo::Weights) {
        return match stage_weights(ctx, manifest, &grid) {
            Ok(_) => Ok(()),
            Err(e) => {
                manifest.stage_failed("weights", e.message());
                Err(e)
            }
        };
    }
    let agg = match stage_ingest(ctx, manifest, &grid) {
        Ok(a) => a,
        Err(e) => {
            manifest.stage_failed("ingest", e.message());
            return Err(e);
        }
    };
    if matches!(up_to, RunUpTo::Ingest) {
        return Ok(());
    }
    let mut panel = match stage_panel(ctx, manifest, &grid, &agg) {
        Ok(p) => p,
        Err(e) => {
            manifest.stage_failed("panel", e.message());
            return Err(e);
        }
    };
    if matches!(up_to, RunUpTo::Panel) {
        return Ok(());
    }
    let weights = match stage_weights(ctx, manifest, &grid) {
        Ok(w) => w,
        Err(e) => {
            manifest.stage_failed("weights", e.message());
            return Err(e);
        }
    };
    let fits = match stage_fits(ctx, manifest, &grid, &mut panel, &weights) {
        Ok(f) => f,
        Err(e) => {
            manifest.stage_failed("fit", e.message());
            return Err(e);
        }
    };
    if matches!(up_to, RunUpTo::Fit) {
        return Ok(());
    }
    if let Err(e) = stage_effects(ctx, manifest, &panel, &weights, &fits) {
        manifest.stage_failed("effects", e.message());
        return Err(e);
    }
    Ok(())
}

/// Re-renders a stored run: prints the regression table and effects summary
/// from the JSON artifacts in the output directory.
pub fn cmd_report(ctx: &Ctx) -> CmdResult<()> {
    let table_path = ctx.out_dir.join("regression_table.csv");
    if table_path.exists() {
        let table = fs::read_to_string(&table_path).map_err(|e| CmdError::Input(e.into()))?;
        println!("regression table ({}):", table_path.display());
        print!("{table}");
    } else {
        println!("no regression_table.csv in {}", ctx.out_dir.display());
    }
    let effects_path = ctx.out_dir.join("effects.txt");
    if effects_path.exists() {
        println!();
        print!(
            "{}",
            fs::read_to_string(&effects_path).map_err(|e| CmdError::Input(e.into()))?
        );
    }
    let manifest_path = ctx.out_dir.join("manifest.json");
    if manifest_path.exists() {
        let v: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(&manifest_path).map_err(|e| CmdError::Input(e.into()))?,
        )
        .map_err(|e| CmdError::Input(e.into()))?;
        println!();
        println!(
            "manifest: config {}..., {} outputs, failure_stage = {}",
            &v["config_hash"].as_str().unwrap_or("?")[..12.min(v["config_hash"].as_str().map(str::len).unwrap_or(0))],
            v["outputs"].as_array().map(|a| a.len()).unwrap_or(0),
            v["failure_stage"]
        );
    }
    Ok(())
}

/// Sanity helper shared by tests: parse one period column of aggregates.csv.
pub fn parse_period(s: &str) -> Result<Period> {
    match s {
        "0" => Ok(Period::Dawn),
        "1" => Ok(Period::Morning),
        "2" => Ok(Period::Afternoon),
        "3" => Ok(Period::Night),
        other => bail!("bad period {other}"),
    }
}
