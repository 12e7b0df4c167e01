//! Scan a family of test domains, classify each, and intersect the positives.

use crate::boundary_operators::{assemble_r, DenseOperator, DirichletCorrector, KernelKind};
use crate::cli_io::{to_json_17, OpCache, RunConfig};
use crate::error::{NrtError, Result};
use crate::forward_solver::{
    add_flux_noise, cauchy_of_w, solve_background, solve_direct, time_major, weighted_norm, CauchyData,
    ForwardSolution, TimeGrid,
};
use crate::geometry::{
    discretize, homotopy_family, jaccard, mask_from_shapes, shape_inclusion, GridSpec, MaskMode, ParamBoundary,
    PixelGrid, RadialShape,
};
use crate::nrt_indicator::{
    calibrate_theta, classify, path_from_spectrum, sup_form, weighted_svd, ClassifyPolicy, RegPath, SupForm, Verdict,
};
use crate::par::{map_range, Exec};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySpec {
    /// Disks centered on an nx x ny lattice over `bbox`, one per radius.
    DiskGrid {
        bbox: [f64; 4],
        nx: usize,
        ny: usize,
        radii: Vec<f64>,
    },
    /// From the outer domain shrunk by the clearance down to `target`.
    Homotopy {
        target: RadialShape,
        steps: usize,
    },
    Custom {
        shapes: Vec<RadialShape>,
    },
}

/// Members of the family, all at least `clearance` inside the outer domain.
/// Lattice members that violate it are dropped; explicit members are an error.
pub fn make_family(spec: &FamilySpec, omega: &RadialShape, clearance: f64) -> Result<Vec<RadialShape>> {
    let inner = omega.shrink(clearance)?;
    let fits = |s: &RadialShape| s.validate().is_ok() && shape_inclusion(s, &inner, 256);
    match spec {
        FamilySpec::DiskGrid { bbox, nx, ny, radii } => {
            let grid = GridSpec::new(*bbox, *nx, *ny)?;
            let mut out = Vec::new();
            for j in 0..*ny {
                for i in 0..*nx {
                    for &r in radii {
                        let s = RadialShape::circle(grid.center(i, j), r);
                        if fits(&s) {
                            out.push(s);
                        }
                    }
                }
            }
            Ok(out)
        }
        FamilySpec::Homotopy { target, steps } => {
            let fam = homotopy_family(&inner, target, *steps)?;
            if !fam.iter().all(|s| s.validate().is_ok()) {
                return Err(NrtError::Geometry("homotopy member degenerates".into()));
            }
            Ok(fam)
        }
        FamilySpec::Custom { shapes } => {
            for (i, s) in shapes.iter().enumerate() {
                s.validate()?;
                if !fits(s) {
                    return Err(NrtError::Geometry(format!("family member {i} violates the clearance {clearance}")));
                }
            }
            Ok(shapes.clone())
        }
    }
}

/// Forward data for one configuration: fine solutions and coarse Cauchy data.
pub struct Synthetic {
    pub u: ForwardSolution,
    pub mu: ForwardSolution,
    /// Coarse data of u and mu on the operator boundary.
    pub cauchy_u: CauchyData,
    pub cauchy_mu: CauchyData,
    /// Clean data of w = u - mu.
    pub cauchy_w: CauchyData,
}

impl Synthetic {
    pub fn boundary(&self) -> &ParamBoundary {
        &self.cauchy_w.boundary
    }

    /// Data of w with flux noise of relative level delta on u, and the absolute noise level.
    pub fn noisy_w(&self, delta: f64, seed: u64) -> Result<(CauchyData, f64)> {
        let noisy = add_flux_noise(&self.cauchy_u, delta, seed);
        let level = delta * weighted_norm(&self.cauchy_u.neumann, &self.cauchy_u.boundary, &self.cauchy_u.grid);
        Ok((cauchy_of_w(&noisy, &self.cauchy_mu)?, level))
    }
}

pub fn time_grid(cfg: &RunConfig) -> Result<TimeGrid> {
    TimeGrid::new(cfg.grid.t_final, cfg.grid.nt)
}

/// Solve with and without the cavity on boundaries refined by `data_factor`, then sample
/// the operator boundary.
pub fn synthesize(cfg: &RunConfig, exec: Exec) -> Result<Synthetic> {
    let grid = time_grid(cfg)?;
    let f = cfg.grid.data_factor.max(1);
    let ob = discretize(&cfg.geometry.omega, cfg.grid.n_omega * f)?;
    let cavity = match &cfg.geometry.cavity {
        Some(d) => Some(discretize(d, cfg.grid.n_cavity * f)?),
        None => None,
    };
    cfg.boundary_data.validate()?;
    let data = cfg.boundary_data.clone();
    let t_final = grid.t_final;
    let g = move |th: f64, _p: crate::Point, t: f64| data.eval(th, t, t_final);
    let params = cfg.forward_params();
    let u = solve_direct(&ob, cavity.as_ref(), &g, &grid, &params, exec)?;
    let mu = solve_background(&ob, &g, &grid, &params, exec)?;
    let cauchy_u = u.cauchy(0, f)?;
    let cauchy_mu = mu.cauchy(0, f)?;
    let cauchy_w = cauchy_of_w(&cauchy_u, &cauchy_mu)?;
    Ok(Synthetic { u, mu, cauchy_u, cauchy_mu, cauchy_w })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DomainRecord {
    pub index: usize,
    pub shape: RadialShape,
    pub path: Option<RegPath>,
    pub sup: Option<SupForm>,
    pub verdict: Option<Verdict>,
    pub error: Option<String>,
    pub wall_seconds: f64,
    pub trace_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_domains: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub n_uncertain: usize,
    pub n_failed: usize,
    pub degenerate: bool,
    pub theta: f64,
    pub separation_ratio: Option<f64>,
    pub jaccard: Option<f64>,
    pub delta: f64,
    pub noise_level: f64,
    pub data_norm: f64,
    pub forward_residual: f64,
    pub max_trace_residual: f64,
    pub recon_pixels: usize,
    pub truth_pixels: usize,
    pub wall_seconds: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug)]
pub struct ScanResult {
    pub config: RunConfig,
    pub records: Vec<DomainRecord>,
    pub recon: PixelGrid,
    pub truth: Option<PixelGrid>,
    pub metrics: Metrics,
}

struct DomainWork {
    paths: Vec<(RegPath, SupForm)>,
    trace_residual: f64,
}

fn operator_for(
    cfg: &RunConfig,
    shape: &RadialShape,
    ob: &ParamBoundary,
    grid: &TimeGrid,
    corr: Option<&DirichletCorrector>,
    cache: Option<&OpCache>,
    exec: Exec,
) -> Result<(DenseOperator, f64)> {
    let params = cfg.operator_params();
    let key = OpCache::key(shape, ob, grid, &params);
    if let Some(c) = cache {
        if let Some(hit) = c.load_r(&key, shape, ob, grid, &params)? {
            return Ok(hit);
        }
    }
    let (op, diag) = assemble_r(shape, ob, grid, &params, corr, exec)?;
    if diag.columns_above_tol > 0 {
        return Err(NrtError::Numerical(format!(
            "{} correction columns above the trace tolerance (max {:.3e})",
            diag.columns_above_tol, diag.trace_residual_max
        )));
    }
    if let Some(c) = cache {
        c.store_r(&key, shape, &op, diag.trace_residual_max)?;
    }
    Ok((op, diag.trace_residual_max))
}

/// Run the scan once per noise level, sharing operators and their SVDs.
pub fn run_scan_multi(cfg: &RunConfig, deltas: &[f64], cache: Option<&OpCache>, exec: Exec) -> Result<Vec<ScanResult>> {
    cfg.validate()?;
    let t_start = Instant::now();
    let family = make_family(&cfg.geometry.family, &cfg.geometry.omega, cfg.geometry.clearance)?;
    let syn = synthesize(cfg, exec)?;
    let grid = time_grid(cfg)?;
    let ob = syn.boundary().clone();
    let corr = match cfg.solver.operator.kernel {
        KernelKind::Dirichlet => {
            Some(DirichletCorrector::new(&ob, &grid, cfg.solver.operator.correction_refine, exec)?)
        }
        KernelKind::FreeSpace => None,
    };
    let mut data = Vec::with_capacity(deltas.len());
    for &d in deltas {
        if !(d >= 0.0) {
            return Err(NrtError::Config("noise level must be non-negative".into()));
        }
        let (w, level) = syn.noisy_w(d, cfg.noise.seed)?;
        data.push((time_major(&w.neumann), level));
    }
    let alphas = cfg.alphas();
    let ind = &cfg.indicator;
    let work: Vec<(std::result::Result<DomainWork, String>, f64)> = map_range(exec, family.len(), |i| {
        let t0 = Instant::now();
        let res = (|| -> Result<DomainWork> {
            let (op, tr) = operator_for(cfg, &family[i], &ob, &grid, corr.as_ref(), cache, exec)?;
            let spec = weighted_svd(&op)?;
            drop(op);
            let mut paths = Vec::with_capacity(data.len());
            for (b, level) in &data {
                let proj = spec.project(b)?;
                let mut path = path_from_spectrum(&spec, &proj, &alphas)?;
                if *level > 0.0 {
                    path.morozov_truncate(*level, ind.morozov_tau);
                }
                let sup = sup_form(&spec, &proj, cfg.solver.svd_cutoff, ind.unresolved_threshold)?;
                paths.push((path, sup));
            }
            Ok(DomainWork { paths, trace_residual: tr })
        })();
        (res.map_err(|e| e.to_string()), t0.elapsed().as_secs_f64())
    });
    let n_failed = work.iter().filter(|w| w.0.is_err()).count();
    if !family.is_empty() && n_failed * 5 > family.len() {
        let first = work.iter().find_map(|w| w.0.as_ref().err().cloned()).unwrap_or_default();
        return Err(NrtError::Numerical(format!("{n_failed} of {} domains failed; first: {first}", family.len())));
    }
    let truth = match &cfg.geometry.cavity {
        Some(d) => Some(mask_from_shapes(std::slice::from_ref(d), &cfg.mask, MaskMode::Union)?),
        None => None,
    };
    let config_hash = cfg.hash();
    let forward_residual = syn.u.residual.max(syn.mu.residual);
    let mut out = Vec::with_capacity(deltas.len());
    for (di, &delta) in deltas.iter().enumerate() {
        let mut records: Vec<DomainRecord> = family
            .iter()
            .zip(&work)
            .enumerate()
            .map(|(i, (s, (w, secs)))| match w {
                Ok(w) => DomainRecord {
                    index: i,
                    shape: s.clone(),
                    path: Some(w.paths[di].0.clone()),
                    sup: Some(w.paths[di].1),
                    verdict: None,
                    error: None,
                    wall_seconds: *secs,
                    trace_residual: w.trace_residual,
                },
                Err(e) => DomainRecord {
                    index: i,
                    shape: s.clone(),
                    path: None,
                    sup: None,
                    verdict: None,
                    error: Some(e.clone()),
                    wall_seconds: *secs,
                    trace_residual: f64::NAN,
                },
            })
            .collect();
        // second pass: calibrate theta on all finished paths, then classify
        let finished: Vec<&RegPath> = records.iter().filter_map(|r| r.path.as_ref()).collect();
        let theta = calibrate_theta(&finished, ind.slope_pos, ind.theta_factor);
        let policy =
            ClassifyPolicy { slope_pos: ind.slope_pos, slope_neg: ind.slope_neg, theta, big_factor: ind.big_factor };
        for r in records.iter_mut() {
            if let Some(p) = r.path.as_mut() {
                let v = classify(p, &policy);
                p.verdict = v;
                r.verdict = Some(v);
            }
        }
        let result = assemble_result(cfg, records, truth.clone(), theta, delta, data[di].1, &data[di].0, &ob, &grid)?;
        out.push(ScanResult {
            metrics: Metrics {
                forward_residual,
                wall_seconds: t_start.elapsed().as_secs_f64(),
                config_hash: config_hash.clone(),
                ..result.metrics
            },
            ..result
        });
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn assemble_result(
    cfg: &RunConfig,
    records: Vec<DomainRecord>,
    truth: Option<PixelGrid>,
    theta: f64,
    delta: f64,
    noise_level: f64,
    b: &[f64],
    ob: &ParamBoundary,
    grid: &TimeGrid,
) -> Result<ScanResult> {
    let count = |v: Verdict| records.iter().filter(|r| r.verdict == Some(v)).count();
    let positives: Vec<RadialShape> =
        records.iter().filter(|r| r.verdict == Some(Verdict::Positive)).map(|r| r.shape.clone()).collect();
    let degenerate = positives.is_empty();
    let recon = if degenerate {
        // no finite bound from the scan; fall back to the outer domain itself
        mask_from_shapes(std::slice::from_ref(&cfg.geometry.omega), &cfg.mask, MaskMode::Union)?
    } else {
        mask_from_shapes(&positives, &cfg.mask, MaskMode::Intersect)?
    };
    let jac = match &truth {
        Some(t) => Some(jaccard(&recon, t)?),
        None => None,
    };
    let nm =
        crate::forward_solver::weighted_norm(&nalgebra::DMatrix::from_column_slice(ob.len(), grid.nt, b), ob, grid);
    let metrics = Metrics {
        n_domains: records.len(),
        n_positive: count(Verdict::Positive),
        n_negative: count(Verdict::Negative),
        n_uncertain: count(Verdict::Uncertain),
        n_failed: records.iter().filter(|r| r.error.is_some()).count(),
        degenerate,
        theta,
        separation_ratio: separation_ratio(&records),
        jaccard: jac,
        delta,
        noise_level,
        data_norm: nm,
        forward_residual: 0.0,
        max_trace_residual: records.iter().map(|r| r.trace_residual).filter(|v| v.is_finite()).fold(0.0, f64::max),
        recon_pixels: recon.count(),
        truth_pixels: truth.as_ref().map(|t| t.count()).unwrap_or(0),
        wall_seconds: 0.0,
        config_hash: String::new(),
    };
    Ok(ScanResult { config: cfg.clone(), records, recon, truth, metrics })
}

/// min plateau over negatives / max plateau over positives; None when a class is empty.
pub fn separation_ratio(records: &[DomainRecord]) -> Option<f64> {
    let plateau = |v: Verdict| -> Vec<f64> {
        records.iter().filter(|r| r.verdict == Some(v)).filter_map(|r| r.path.as_ref().map(|p| p.plateau)).collect()
    };
    let pos = plateau(Verdict::Positive);
    let neg = plateau(Verdict::Negative);
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let max_pos = pos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_neg = neg.iter().copied().fold(f64::INFINITY, f64::min);
    Some(min_neg / max_pos)
}

pub fn separation_report(result: &ScanResult) -> Option<f64> {
    separation_ratio(&result.records)
}

pub fn run_scan(cfg: &RunConfig, cache: Option<&OpCache>, exec: Exec) -> Result<ScanResult> {
    let mut v = run_scan_multi(cfg, &[cfg.noise.delta], cache, exec)?;
    Ok(v.remove(0))
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

impl ScanResult {
    /// config.json, verdicts.csv, paths/*.csv, recon.pgm, truth.pgm, metrics.json.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("paths"))?;
        fs::write(dir.join("config.json"), to_json_17(&self.config))?;
        let mut w = BufWriter::new(fs::File::create(dir.join("verdicts.csv"))?);
        writeln!(w, "index,center_x,center_y,radius0,verdict,slope,plateau,sup_value,unresolved_fraction,used_alphas,wall_seconds,error")?;
        for r in &self.records {
            let (v, sl, pl, sv, uf, used) = match (&r.path, &r.sup, r.verdict) {
                (Some(p), Some(s), Some(v)) => (
                    v.as_str().to_string(),
                    fmt(p.slope),
                    fmt(p.plateau),
                    fmt(s.value),
                    fmt(s.unresolved_fraction),
                    p.used.to_string(),
                ),
                _ => ("failed".into(), String::new(), String::new(), String::new(), String::new(), String::new()),
            };
            let err = r.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            writeln!(
                w,
                "{},{},{},{},{v},{sl},{pl},{sv},{uf},{used},{},{err}",
                r.index,
                fmt(r.shape.center[0]),
                fmt(r.shape.center[1]),
                fmt(r.shape.radius0),
                fmt(r.wall_seconds)
            )?;
        }
        w.flush()?;
        for r in &self.records {
            if let Some(p) = &r.path {
                let f = fs::File::create(dir.join("paths").join(format!("domain_{:03}.csv", r.index)))?;
                p.write_csv(BufWriter::new(f))?;
            }
        }
        self.recon.write_pgm(BufWriter::new(fs::File::create(dir.join("recon.pgm"))?))?;
        if let Some(t) = &self.truth {
            t.write_pgm(BufWriter::new(fs::File::create(dir.join("truth.pgm"))?))?;
        }
        fs::write(dir.join("metrics.json"), to_json_17(&self.metrics))?;
        Ok(())
    }
}
