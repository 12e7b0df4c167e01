//! Dense space-time operators: the single layer, the Green-function-corrected flux
//! operator R, the backward double layer K, its boundary trace, and adjoints.
//!
//! Index layout is time-major (see the crate docs), so causal operators are block
//! lower-triangular and K is block upper-triangular.

use crate::error::{NrtError, Result};
use crate::forward_solver::{adjoint_double_layer_blocks, coarse_to_fine, single_layer_blocks, Curves, TimeGrid};
use crate::geometry::{discretize, dot, norm, shape_inclusion, sub, ParamBoundary, Point, RadialShape};
use crate::heat_kernel::{flux_cell, flux_cell_dr2, phi};
use crate::linalg::{toeplitz_compose, toeplitz_inverse};
use crate::par::{map_range, Exec};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::PI;

/// Nodes, spatial weights and time grid of one side of an operator.
#[derive(Clone, Debug)]
pub struct QuadMeta {
    pub nodes: Vec<Point>,
    pub node_weights: Vec<f64>,
    pub grid: TimeGrid,
}

impl QuadMeta {
    pub fn from_boundary(b: &ParamBoundary, grid: &TimeGrid) -> Self {
        QuadMeta { nodes: b.nodes.clone(), node_weights: b.weights.clone(), grid: *grid }
    }
    /// Plain point set: unit spatial weights.
    pub fn from_points(p: &[Point], grid: &TimeGrid) -> Self {
        QuadMeta { nodes: p.to_vec(), node_weights: vec![1.0; p.len()], grid: *grid }
    }
    pub fn len(&self) -> usize {
        self.nodes.len() * self.grid.nt
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Surrogate inner-product weights w_j dt, time-major.
    pub fn weights(&self) -> Vec<f64> {
        let dt = self.grid.dt();
        (0..self.grid.nt).flat_map(|_| self.node_weights.iter().map(move |w| w * dt)).collect()
    }
}

/// Quadrature-weighted discrete L2 norm standing in for the Sobolev norms.
#[derive(Clone, Debug)]
pub struct NormSurrogate {
    pub weights: Vec<f64>,
}

impl NormSurrogate {
    pub fn of(meta: &QuadMeta) -> Self {
        NormSurrogate { weights: meta.weights() }
    }
    pub fn norm(&self, v: &[f64]) -> f64 {
        self.inner(v, v).sqrt()
    }
    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        u.iter().zip(v).zip(&self.weights).map(|((a, b), w)| a * b * w).sum()
    }
}

#[derive(Clone, Debug)]
pub struct DenseOperator {
    pub entries: DMatrix<f64>,
    pub source: QuadMeta,
    pub target: QuadMeta,
}

impl DenseOperator {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (&self.entries * DVector::from_column_slice(x)).as_slice().to_vec()
    }
}

/// Weight-consistent adjoint: W_src^{-1} A^T W_tgt.
pub fn adjoint(op: &DenseOperator) -> DenseOperator {
    let ws = op.source.weights();
    let wt = op.target.weights();
    let mut e = op.entries.transpose();
    for c in 0..e.ncols() {
        for r in 0..e.nrows() {
            e[(r, c)] *= wt[c] / ws[r];
        }
    }
    DenseOperator { entries: e, source: op.target.clone(), target: op.source.clone() }
}

fn min_distance(a: &[Point], b: &[Point]) -> f64 {
    a.iter().flat_map(|p| b.iter().map(move |q| norm(sub(*p, *q)))).fold(f64::INFINITY, f64::min)
}

/// Midpoint-in-time single layer from a curve to target points (strictly causal).
pub fn assemble_single_layer(src: &ParamBoundary, targets: &[Point], grid: &TimeGrid) -> Result<DenseOperator> {
    if min_distance(&src.nodes, targets) < 1e-10 {
        return Err(NrtError::Geometry("single layer targets touch the source curve".into()));
    }
    let (ns, nx, nt) = (src.len(), targets.len(), grid.nt);
    let dt = grid.dt();
    let mut e = DMatrix::zeros(nx * nt, ns * nt);
    for k in 0..nt {
        for m in 0..k {
            let tau = (k - m) as f64 * dt;
            for j in 0..ns {
                for i in 0..nx {
                    e[(k * nx + i, m * ns + j)] = phi(targets[i], tau, src.nodes[j], 0.0, 2) * src.weights[j] * dt;
                }
            }
        }
    }
    Ok(DenseOperator {
        entries: e,
        source: QuadMeta::from_boundary(src, grid),
        target: QuadMeta::from_points(targets, grid),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// Dirichlet Green function of the outer domain, realized by a boundary correction.
    #[default]
    Dirichlet,
    /// Free-space kernel; ablation only.
    FreeSpace,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorParams {
    #[serde(default)]
    pub kernel: KernelKind,
    /// Time refinement of the correction solve (odd).
    #[serde(default = "default_corr_refine")]
    pub correction_refine: usize,
    /// Nodes on a test-domain boundary.
    #[serde(default = "default_n_g")]
    pub n_g: usize,
    /// Accepted per-column trace residual of the correction.
    #[serde(default = "default_trace_tol")]
    pub trace_tol: f64,
}

fn default_corr_refine() -> usize {
    3
}
fn default_n_g() -> usize {
    32
}
fn default_trace_tol() -> f64 {
    1e-6
}

impl Default for OperatorParams {
    fn default() -> Self {
        OperatorParams {
            kernel: KernelKind::Dirichlet,
            correction_refine: default_corr_refine(),
            n_g: default_n_g(),
            trace_tol: default_trace_tol(),
        }
    }
}

/// Maps Dirichlet data on the outer curve (fine midpoints) to the flux of the caloric
/// field in the outer domain with that trace and zero initial value. Built once per
/// outer boundary and grid, then shared by every test domain.
#[derive(Clone, Debug)]
pub struct DirichletCorrector {
    pub omega: ParamBoundary,
    pub grid: TimeGrid,
    pub refine: usize,
    v: Vec<DMatrix<f64>>,
    z: Vec<DMatrix<f64>>,
    c: Vec<DMatrix<f64>>,
}

impl DirichletCorrector {
    pub fn new(omega: &ParamBoundary, grid: &TimeGrid, refine: usize, exec: Exec) -> Result<Self> {
        if refine == 0 || refine.is_multiple_of(2) {
            return Err(NrtError::Config(format!("correction refinement must be odd, got {refine}")));
        }
        let curves = Curves::new(vec![omega.clone()], vec![1.0]);
        let fine = grid.refine(refine);
        let h = fine.dt();
        let v = single_layer_blocks(&curves, fine.nt, h, exec);
        let z = toeplitz_inverse(&v, exec)?;
        let kp = adjoint_double_layer_blocks(&curves, fine.nt, h, exec);
        let mut c = toeplitz_compose(&kp, &z, exec);
        for (cl, zl) in c.iter_mut().zip(&z) {
            *cl += zl * 0.5;
        }
        Ok(DirichletCorrector { omega: omega.clone(), grid: *grid, refine, v, z, c })
    }
}

/// Diagnostics of one R assembly.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RDiagnostics {
    /// Largest per-column relative trace residual of the correction (0 for free space).
    pub trace_residual_max: f64,
    pub columns_above_tol: usize,
}

/// R: density on the test curve to flux on the outer curve through the Dirichlet Green
/// function. Midpoint rule in time for the density; the correction is solved on the
/// refined grid of `corrector`.
pub fn assemble_r(
    g_shape: &RadialShape,
    omega_b: &ParamBoundary,
    grid: &TimeGrid,
    params: &OperatorParams,
    corrector: Option<&DirichletCorrector>,
    exec: Exec,
) -> Result<(DenseOperator, RDiagnostics)> {
    if !shape_inclusion(g_shape, &omega_b.source_shape, 256) {
        return Err(NrtError::Geometry("test domain is not compactly inside the outer domain".into()));
    }
    let gb = discretize(g_shape, params.n_g)?;
    let (no, ng, nt) = (omega_b.len(), gb.len(), grid.nt);
    let dt = grid.dt();
    // free-space normal derivative, one block per coarse lag
    let ns: Vec<DMatrix<f64>> = map_range(exec, nt, |l| {
        if l == 0 {
            return DMatrix::zeros(no, ng);
        }
        let tau = l as f64 * dt;
        DMatrix::from_fn(no, ng, |i, j| {
            let d = sub(omega_b.nodes[i], gb.nodes[j]);
            let p = phi(omega_b.nodes[i], tau, gb.nodes[j], 0.0, 2);
            -dot(d, omega_b.normals[i]) / (2.0 * tau) * p * gb.weights[j] * dt
        })
    });
    let mut blocks = ns;
    let mut diag = RDiagnostics::default();
    if params.kernel == KernelKind::Dirichlet {
        let corr = corrector.ok_or_else(|| NrtError::Config("Dirichlet kernel needs a corrector".into()))?;
        if corr.grid != *grid || corr.omega.len() != no {
            return Err(NrtError::Config("corrector built for another grid".into()));
        }
        let f = corr.refine;
        let fine = grid.refine(f);
        let h = fine.dt();
        let half = (f - 1) / 2;
        // trace of S_G at fine midpoints for a density at coarse midpoint 0
        let t: Vec<DMatrix<f64>> = map_range(exec, fine.nt, |p| {
            if p <= half {
                return DMatrix::zeros(no, ng);
            }
            let tau = (p - half) as f64 * h;
            DMatrix::from_fn(no, ng, |i, j| phi(omega_b.nodes[i], tau, gb.nodes[j], 0.0, 2) * gb.weights[j] * dt)
        });
        let q: Vec<DMatrix<f64>> = map_range(exec, nt, |l| {
            let p = coarse_to_fine(l, f);
            let mut acc = DMatrix::zeros(no, ng);
            for j in 0..=p {
                acc.gemm(1.0, &corr.c[p - j], &t[j], 1.0);
            }
            acc
        });
        for (b, ql) in blocks.iter_mut().zip(&q) {
            *b -= ql;
        }
        // check V (Z T) = T column by column
        let s = toeplitz_compose(&corr.z, &t, exec);
        let y = toeplitz_compose(&corr.v, &s, exec);
        let nf = fine.nt;
        for m in 0..nt {
            let len = nf - f * m;
            for j in 0..ng {
                let (mut num, mut den) = (0.0, 0.0);
                for p in 0..len {
                    for i in 0..no {
                        num += (y[p][(i, j)] - t[p][(i, j)]).powi(2);
                        den += t[p][(i, j)].powi(2);
                    }
                }
                let r = if den > 0.0 { (num / den).sqrt() } else { 0.0 };
                diag.trace_residual_max = diag.trace_residual_max.max(r);
                if r > params.trace_tol {
                    diag.columns_above_tol += 1;
                }
            }
        }
    }
    let mut e = DMatrix::zeros(no * nt, ng * nt);
    for k in 0..nt {
        for m in 0..=k {
            e.view_mut((k * no, m * ng), (no, ng)).copy_from(&blocks[k - m]);
        }
    }
    let op = DenseOperator {
        entries: e,
        source: QuadMeta::from_boundary(&gb, grid),
        target: QuadMeta::from_boundary(omega_b, grid),
    };
    Ok((op, diag))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeRule {
    /// Density as a delta at each cell midpoint.
    Midpoint,
    /// Density constant on each cell, integrated exactly in time.
    CellExact,
}

/// Periodic trigonometric interpolation weights from n equispaced nodes to theta.
fn trig_interp_row(n: usize, theta: f64, out: &mut [f64]) {
    let nh = n / 2;
    for (j, o) in out.iter_mut().enumerate() {
        let d = theta - 2.0 * PI * j as f64 / n as f64;
        let mut s = 1.0;
        for k in 1..nh {
            s += 2.0 * (k as f64 * d).cos();
        }
        s += (nh as f64 * d).cos();
        *o = s / n as f64;
    }
}

/// Fine quadrature for densities given at the nodes of `b`: (fine boundary, interpolation P).
fn upsampled(b: &ParamBoundary, q: usize) -> Result<(ParamBoundary, DMatrix<f64>)> {
    let fine = discretize(&b.source_shape, b.len() * q)?;
    let n = b.len();
    let mut p = DMatrix::zeros(fine.len(), n);
    let mut row = vec![0.0; n];
    for f in 0..fine.len() {
        trig_interp_row(n, fine.theta[f], &mut row);
        for j in 0..n {
            p[(f, j)] = row[j];
        }
    }
    Ok((fine, p))
}

/// Upsampling factor so that the fine node spacing is below a third of `dist`.
pub fn auto_upsample(b: &ParamBoundary, dist: f64) -> usize {
    let h = b.length() / b.len() as f64;
    ((3.0 * h / dist).ceil() as usize).clamp(1, 64)
}

/// tau interval seen from target time t for a source cell [a, b] of the backward kernel.
fn backward_interval(t: f64, a: f64, b: f64) -> Option<(f64, f64)> {
    if b <= t {
        return None;
    }
    Some(((a - t).max(0.0), b - t))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KOptions {
    pub rule: TimeRule,
    /// Spatial upsampling of the density; 0 picks it from the target distance.
    pub upsample: usize,
}

impl Default for KOptions {
    fn default() -> Self {
        KOptions { rule: TimeRule::CellExact, upsample: 0 }
    }
}

/// K[phi] at interior points and arbitrary target times (rows time-major over `times`).
pub fn assemble_k_at(
    omega: &ParamBoundary,
    targets: &[Point],
    times: &[f64],
    grid: &TimeGrid,
    opts: KOptions,
    exec: Exec,
) -> Result<DMatrix<f64>> {
    for x in targets {
        if !(omega.source_shape.radial_margin(*x) > 0.0) {
            return Err(NrtError::Geometry("K targets must lie strictly inside the outer domain".into()));
        }
    }
    let dist = targets.iter().map(|x| omega.source_shape.boundary_distance(*x)).fold(f64::INFINITY, f64::min);
    let q = if opts.upsample == 0 { auto_upsample(omega, dist) } else { opts.upsample };
    let (fine, p) =
        if q > 1 { upsampled(omega, q)? } else { (omega.clone(), DMatrix::identity(omega.len(), omega.len())) };
    let (n, nx, nt) = (omega.len(), targets.len(), grid.nt);
    let dt = grid.dt();
    let nf = fine.len();
    let use_p = q > 1;
    // one pass per target point; kernel rows are cached by tau interval
    let per_point: Vec<Vec<f64>> = map_range(exec, nx, |i| {
        let x = targets[i];
        let mut cache: HashMap<(i64, i64), Vec<f64>> = HashMap::new();
        let mut out = vec![0.0; times.len() * n * nt];
        let mut kf = DVector::zeros(nf);
        for (ti, &t) in times.iter().enumerate() {
            for m in 0..nt {
                let (a, b) = (m as f64 * dt, (m + 1) as f64 * dt);
                let (ta, tb) = match opts.rule {
                    TimeRule::Midpoint => {
                        let s = grid.node(m);
                        if s <= t {
                            continue;
                        }
                        (s - t, s - t)
                    }
                    TimeRule::CellExact => match backward_interval(t, a, b) {
                        Some(iv) => iv,
                        None => continue,
                    },
                };
                let key = ((ta / dt * 1e9).round() as i64, (tb / dt * 1e9).round() as i64);
                let row = cache.entry(key).or_insert_with(|| {
                    for f in 0..nf {
                        let d = sub(x, fine.nodes[f]);
                        let a = dot(d, fine.normals[f]);
                        kf[f] = match opts.rule {
                            TimeRule::Midpoint => {
                                a / (2.0 * ta) * phi(x, ta, fine.nodes[f], 0.0, 2) * fine.weights[f] * dt
                            }
                            TimeRule::CellExact => a * flux_cell(dot(d, d), ta, tb) * fine.weights[f],
                        };
                    }
                    if use_p {
                        p.tr_mul(&kf).as_slice().to_vec()
                    } else {
                        kf.as_slice().to_vec()
                    }
                });
                let base = ti * n * nt + m * n;
                out[base..base + n].copy_from_slice(row);
            }
        }
        out
    });
    let mut e = DMatrix::zeros(times.len() * nx, n * nt);
    for (i, v) in per_point.iter().enumerate() {
        for ti in 0..times.len() {
            let r = ti * nx + i;
            for c in 0..n * nt {
                e[(r, c)] = v[ti * n * nt + c];
            }
        }
    }
    Ok(e)
}

/// K at interior points and the midpoints of `grid`.
pub fn assemble_k(
    omega: &ParamBoundary,
    targets: &[Point],
    grid: &TimeGrid,
    opts: KOptions,
    exec: Exec,
) -> Result<DenseOperator> {
    let e = assemble_k_at(omega, targets, &grid.nodes(), grid, opts, exec)?;
    Ok(DenseOperator {
        entries: e,
        source: QuadMeta::from_boundary(omega, grid),
        target: QuadMeta::from_points(targets, grid),
    })
}

/// nu . grad_x K[phi](x, t) at interior points with given unit normals (cell-exact in time).
pub fn assemble_k_normal_at(
    omega: &ParamBoundary,
    targets: &[Point],
    normals: &[Point],
    times: &[f64],
    grid: &TimeGrid,
    exec: Exec,
) -> Result<DMatrix<f64>> {
    let (n, nx, nt) = (omega.len(), targets.len(), grid.nt);
    let dt = grid.dt();
    let rows: Vec<Vec<f64>> = map_range(exec, times.len() * nx, |row| {
        let (ti, i) = (row / nx, row % nx);
        let (t, x, nu) = (times[ti], targets[i], normals[i]);
        let mut out = vec![0.0; n * nt];
        for m in 0..nt {
            let Some((ta, tb)) = backward_interval(t, m as f64 * dt, (m + 1) as f64 * dt) else { continue };
            for j in 0..n {
                let y = omega.nodes[j];
                let ny = omega.normals[j];
                let d = sub(x, y);
                let r2 = dot(d, d);
                // kernel a(x) g(r2) with a = (x - y) . nu_y
                let a = dot(d, ny);
                let g = flux_cell(r2, ta, tb);
                let dg = flux_cell_dr2(r2, ta, tb);
                let grad = [ny[0] * g + a * dg * 2.0 * d[0], ny[1] * g + a * dg * 2.0 * d[1]];
                out[m * n + j] = dot(grad, nu) * omega.weights[j];
            }
        }
        out
    });
    let mut e = DMatrix::zeros(times.len() * nx, n * nt);
    for (r, v) in rows.iter().enumerate() {
        for (c, x) in v.iter().enumerate() {
            e[(r, c)] = *x;
        }
    }
    Ok(e)
}

/// Boundary trace of K[phi] on the outer curve: the principal-value double layer minus phi/2,
/// cell-exact in time, at the curve nodes and grid midpoints.
pub fn assemble_k_trace(omega: &ParamBoundary, grid: &TimeGrid, upsample: usize, exec: Exec) -> Result<DenseOperator> {
    let q = upsample.max(1);
    let (fine, p) =
        if q > 1 { upsampled(omega, q)? } else { (omega.clone(), DMatrix::identity(omega.len(), omega.len())) };
    let (n, nt) = (omega.len(), grid.nt);
    let dt = grid.dt();
    let nf = fine.len();
    // Toeplitz in time: lag L = m - k >= 0
    let lag_rows: Vec<DMatrix<f64>> = map_range(exec, nt, |lag| {
        let ta = if lag == 0 { 0.0 } else { (lag as f64 - 0.5) * dt };
        let tb = (lag as f64 + 0.5) * dt;
        let mut blk = DMatrix::zeros(n, n);
        let mut kf = DVector::zeros(nf);
        for i in 0..n {
            let x = omega.nodes[i];
            let fi = i * q;
            for f in 0..nf {
                kf[f] = if f == fi {
                    if lag == 0 {
                        -fine.curvature[f] / (4.0 * PI) * fine.weights[f]
                    } else {
                        0.0
                    }
                } else {
                    let d = sub(x, fine.nodes[f]);
                    dot(d, fine.normals[f]) * flux_cell(dot(d, d), ta, tb) * fine.weights[f]
                };
            }
            let coarse = p.tr_mul(&kf);
            for j in 0..n {
                blk[(i, j)] = coarse[j];
            }
            if lag == 0 {
                blk[(i, i)] -= 0.5;
            }
        }
        blk
    });
    let mut e = DMatrix::zeros(n * nt, n * nt);
    for k in 0..nt {
        for m in k..nt {
            e.view_mut((k * n, m * n), (n, n)).copy_from(&lag_rows[m - k]);
        }
    }
    Ok(DenseOperator {
        entries: e,
        source: QuadMeta::from_boundary(omega, grid),
        target: QuadMeta::from_boundary(omega, grid),
    })
}

/// Max error of the interior limit of K[phi] at x - eps nu against the boundary trace,
/// relative to max |phi|, for each eps.
pub fn jump_relation_check(
    omega: &ParamBoundary,
    grid: &TimeGrid,
    phi_density: &[f64],
    eps: &[f64],
    exec: Exec,
) -> Result<Vec<(f64, f64)>> {
    let scale = phi_density.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if scale == 0.0 {
        return Ok(eps.iter().map(|&e| (e, 0.0)).collect());
    }
    let trace = assemble_k_trace(omega, grid, 8, exec)?;
    let on = trace.apply(phi_density);
    let mut out = Vec::new();
    for &e in eps {
        let pts: Vec<Point> =
            omega.nodes.iter().zip(&omega.normals).map(|(x, nu)| [x[0] - e * nu[0], x[1] - e * nu[1]]).collect();
        let k = assemble_k(omega, &pts, grid, KOptions { rule: TimeRule::CellExact, upsample: 0 }, exec)?;
        let inner = k.apply(phi_density);
        let err = inner.iter().zip(&on).fold(0.0f64, |a, (u, v)| a.max((u - v).abs()));
        out.push((e, err / scale));
    }
    Ok(out)
}

/// Time-bandlimited density basis on (boundary nodes) x (cells), nested by bandwidth.
/// Columns are ordered so that every prefix is a lower-bandwidth subspace.
pub fn bandlimited_basis(n_nodes: usize, nt: usize) -> DMatrix<f64> {
    let nh = n_nodes / 2;
    // spatial mode index -> (frequency, function)
    let spatial = |a: usize, th: f64| -> f64 {
        if a == 0 {
            1.0
        } else if a == n_nodes - 1 && n_nodes.is_multiple_of(2) {
            (nh as f64 * th).cos()
        } else {
            let k = a.div_ceil(2) as f64;
            if a % 2 == 1 {
                (k * th).cos()
            } else {
                (k * th).sin()
            }
        }
    };
    let freq = |a: usize| if a == n_nodes - 1 && n_nodes.is_multiple_of(2) { nh } else { a.div_ceil(2) };
    let mut pairs: Vec<(usize, usize)> = (0..n_nodes).flat_map(|a| (0..nt).map(move |l| (a, l))).collect();
    pairs.sort_by(|p, q| {
        let key = |(a, l): (usize, usize)| {
            let s = freq(a) as f64 / nh.max(1) as f64;
            let t = l as f64 / nt as f64;
            (s.max(t), freq(a), l, a)
        };
        key(*p).partial_cmp(&key(*q)).unwrap()
    });
    let mut b = DMatrix::zeros(n_nodes * nt, pairs.len());
    for (c, &(a, l)) in pairs.iter().enumerate() {
        for k in 0..nt {
            let tk = PI * l as f64 * (k as f64 + 0.5) / nt as f64;
            for j in 0..n_nodes {
                let th = 2.0 * PI * j as f64 / n_nodes as f64;
                b[(k * n_nodes + j, c)] = spatial(a, th) * tk.cos();
            }
        }
    }
    b
}

/// Result of fitting K[phi] to a target on (boundary of E) x (0, T).
#[derive(Clone, Debug)]
pub struct RangeFit {
    pub basis_sizes: Vec<usize>,
    /// Weighted residual norms, one per basis size.
    pub residuals: Vec<f64>,
    pub target_norm: f64,
}

/// Least-squares fits of K[phi] to `target` on the curve `e_b` for nested basis prefixes.
pub fn dense_range_probe(
    omega: &ParamBoundary,
    e_b: &ParamBoundary,
    grid: &TimeGrid,
    target: &[f64],
    basis_sizes: &[usize],
    exec: Exec,
) -> Result<RangeFit> {
    if !shape_inclusion(&e_b.source_shape, &omega.source_shape, 256) {
        return Err(NrtError::Geometry("E must be compactly inside the outer domain".into()));
    }
    let w: Vec<f64> = QuadMeta::from_boundary(e_b, grid).weights().iter().map(|v| v.sqrt()).collect();
    let b = DVector::from_iterator(target.len(), target.iter().zip(&w).map(|(t, w)| t * w));
    let target_norm = b.norm();
    if target_norm == 0.0 {
        return Ok(RangeFit {
            basis_sizes: basis_sizes.to_vec(),
            residuals: vec![0.0; basis_sizes.len()],
            target_norm,
        });
    }
    let k = assemble_k(omega, &e_b.nodes, grid, KOptions::default(), exec)?;
    let basis = bandlimited_basis(omega.len(), grid.nt);
    let mut m = &k.entries * basis;
    for (r, wr) in w.iter().enumerate() {
        m.row_mut(r).scale_mut(*wr);
    }
    let cols = m.ncols().min(m.nrows());
    let qr = m.qr();
    let mut qtb = b.clone();
    qr.q_tr_mul(&mut qtb);
    // residual after the first n columns = norm of the tail of Q^T b
    let mut tail = vec![0.0; cols + 1];
    let rest: f64 = qtb.rows(cols, qtb.len() - cols).norm_squared();
    tail[cols] = rest;
    for i in (0..cols).rev() {
        tail[i] = tail[i + 1] + qtb[i] * qtb[i];
    }
    let residuals = basis_sizes.iter().map(|&n| tail[n.min(cols)].sqrt()).collect();
    Ok(RangeFit { basis_sizes: basis_sizes.to_vec(), residuals, target_norm })
}
