//! Analytic-extension diagnostics: the data-side continuation w~, normalized probes,
//! Taylor-coefficient maps and the two-way probe functional.
//!
//! Factorial-scaled quantities are carried as natural logs so that orders up to
//! `MAX_ORDER` never overflow.

use crate::boundary_operators::{assemble_k_at, assemble_k_trace, DenseOperator, KOptions, QuadMeta};
use crate::error::{NrtError, Result};
use crate::forward_solver::{time_major, CauchyData, TimeGrid};
use crate::geometry::{discretize, dot, norm, shape_inclusion, sub, GridSpec, ParamBoundary, Point, RadialShape};
use crate::heat_kernel::{directional_derivs_upto, flux_cell, hermite_all, MAX_ORDER};
use crate::layers::LayerField;
use crate::par::{map_range, Exec};
use crate::special::{gauss_legendre, ln_factorial};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;

/// Time-integrated Green representation of w from its Cauchy data on the outer curve.
/// Returns (value, double-layer part); the latter is zero because w vanishes there.
pub fn wtilde(cauchy_w: &CauchyData, z: Point, s: f64) -> Result<(f64, f64)> {
    cauchy_w.check()?;
    let b = &cauchy_w.boundary;
    if !(b.source_shape.radial_margin(z) > 0.0) {
        return Err(NrtError::Geometry("w~ is evaluated strictly inside the outer domain".into()));
    }
    if !(s > 0.0 && s < cauchy_w.grid.t_final) {
        return Err(NrtError::Config("w~ needs 0 < s < T".into()));
    }
    let single = wtilde_field(cauchy_w).value(z, s);
    let dt = cauchy_w.grid.dt();
    let mut double = 0.0;
    for k in 0..cauchy_w.grid.nt {
        let t0 = k as f64 * dt;
        if t0 >= s {
            break;
        }
        let (ta, tb) = ((s - t0 - dt).max(0.0), s - t0);
        for j in 0..b.len() {
            let wv = cauchy_w.dirichlet[(j, k)];
            if wv != 0.0 {
                let d = sub(z, b.nodes[j]);
                double -= b.weights[j] * wv * dot(d, b.normals[j]) * flux_cell(dot(d, d), ta, tb);
            }
        }
    }
    Ok((single + double, double))
}

/// The single-layer part of w~ as a field, for values and derivatives anywhere inside.
pub fn wtilde_field(cauchy_w: &CauchyData) -> LayerField {
    let b = &cauchy_w.boundary;
    LayerField {
        nodes: b.nodes.clone(),
        weights: b.weights.clone(),
        step: cauchy_w.grid.dt(),
        n_cells: cauchy_w.grid.nt,
        density: time_major(&cauchy_w.neumann),
    }
}

/// Volumetric quadrature of G together with the collar of width eps inside the outer curve.
#[derive(Clone, Debug)]
pub struct NormRegion {
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
    pub g: RadialShape,
    pub omega: RadialShape,
    pub eps: f64,
}

pub fn norm_region(g: &RadialShape, omega: &RadialShape, eps: f64) -> Result<NormRegion> {
    if !(eps > 0.0) {
        return Err(NrtError::Config("collar width must be positive".into()));
    }
    let inner = omega.shrink(eps)?;
    if !shape_inclusion(g, &inner, 256) {
        return Err(NrtError::Geometry("test domain reaches into the collar".into()));
    }
    let (mut points, mut weights) = (Vec::new(), Vec::new());
    // 32 x 32 polar rule on G: x = c + rho r(th) e(th), dA = rho r^2 drho dth
    let (gx, gw) = gauss_legendre(32);
    let nth = 32;
    for a in 0..nth {
        let th = 2.0 * PI * a as f64 / nth as f64;
        let r = g.radius(th);
        for (x, w) in gx.iter().zip(&gw) {
            let rho = 0.5 * (x + 1.0);
            points.push([g.center[0] + rho * r * th.cos(), g.center[1] + rho * r * th.sin()]);
            weights.push(0.5 * w * rho * r * r * 2.0 * PI / nth as f64);
        }
    }
    // collar: radial band [r_O - eps, r_O] about the outer center
    let (cx, cw) = gauss_legendre(4);
    let nc = 128;
    for a in 0..nc {
        let th = 2.0 * PI * a as f64 / nc as f64;
        let ro = omega.radius(th);
        for (x, w) in cx.iter().zip(&cw) {
            let r = ro - eps * 0.5 * (1.0 - x);
            points.push([omega.center[0] + r * th.cos(), omega.center[1] + r * th.sin()]);
            weights.push(0.5 * eps * w * r * 2.0 * PI / nc as f64);
        }
    }
    Ok(NormRegion { points, weights, g: g.clone(), omega: omega.clone(), eps })
}

impl NormRegion {
    /// Distance from z to G and to the collar; errors when z touches either.
    pub fn clearance(&self, z: Point) -> Result<f64> {
        if self.g.contains(z) || !self.omega.contains(z) {
            return Err(NrtError::Geometry("probe point lies inside the norm region".into()));
        }
        let dg = self.g.boundary_distance(z);
        let dc = self.omega.boundary_distance(z) - self.eps;
        let d = dg.min(dc);
        if !(d > 0.0) {
            return Err(NrtError::Geometry("probe point lies inside the norm region".into()));
        }
        Ok(d)
    }
}

/// log-sum-exp accumulator.
struct LogSum {
    terms: Vec<f64>,
}

impl LogSum {
    fn new() -> Self {
        LogSum { terms: Vec::new() }
    }
    fn push(&mut self, l: f64) {
        if l.is_finite() {
            self.terms.push(l);
        }
    }
    fn ln(&self) -> f64 {
        let m = self.terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return f64::NEG_INFINITY;
        }
        m + self.terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    }
}

const N_PANEL_WIDTH: f64 = 0.35;

/// ln of N_(m;h)(z,s): L2 in time of value^2 + |grad|^2 of (h.grad_z)^m Phi(z,s;x,t) over
/// the norm region.
pub fn probe_log_norm(z: Point, s: f64, h: Point, m: usize, region: &NormRegion) -> Result<f64> {
    if m + 1 > MAX_ORDER {
        return Err(NrtError::Config(format!("derivative order {m} exceeds {}", MAX_ORDER - 1)));
    }
    if (norm(h) - 1.0).abs() > 1e-12 {
        return Err(NrtError::Config("direction must be a unit vector".into()));
    }
    if !(s > 0.0) {
        return Err(NrtError::Config("probe time must be positive".into()));
    }
    region.clearance(z)?;
    let hp = [-h[1], h[0]];
    let (gx, gw) = gauss_legendre(8);
    let mut acc = LogSum::new();
    let mut ha = vec![0.0; m + 2];
    let mut hb = vec![0.0; 2];
    for (x, wx) in region.points.iter().zip(&region.weights) {
        let d = sub(z, *x);
        let (a, b) = (dot(d, h), dot(d, hp));
        let r2 = a * a + b * b;
        let lo = r2 / (4.0 * 700.0);
        if lo >= s {
            continue;
        }
        let (la, lb) = (lo.ln(), s.ln());
        let panels = ((lb - la) / N_PANEL_WIDTH).ceil().max(1.0) as usize;
        let pw = (lb - la) / panels as f64;
        for p in 0..panels {
            let c = la + (p as f64 + 0.5) * pw;
            for (xi, wi) in gx.iter().zip(&gw) {
                let tau = (c + 0.5 * pw * xi).exp();
                let sq = 2.0 * tau.sqrt();
                hermite_all(a / sq, &mut ha);
                hermite_all(b / sq, &mut hb);
                // d_a^k e^{-a^2/4tau} = (-1/sq)^k H_k(a/sq) e^{-a^2/4tau}
                let lbase = -(4.0 * PI * tau).ln() - r2 / (4.0 * tau) - (m as f64) * sq.ln();
                let v0 = ha[m];
                let va = ha[m + 1] / sq;
                let vb = ha[m] * hb[1] / sq;
                let mag2 = v0 * v0 + va * va + vb * vb;
                if mag2 > 0.0 {
                    // dt = tau du on the log panel
                    acc.push(wx.ln() + (wi * 0.5 * pw * tau).ln() + 2.0 * lbase + mag2.ln());
                }
            }
        }
    }
    let l2 = acc.ln();
    if !l2.is_finite() {
        return Err(NrtError::Numerical("probe norm vanished".into()));
    }
    Ok(0.5 * l2)
}

pub fn probe_norm_n(z: Point, s: f64, h: Point, m: usize, region: &NormRegion) -> Result<f64> {
    Ok(probe_log_norm(z, s, h, m, region)?.exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub z: Point,
    pub s: f64,
    pub h: Point,
    pub m: usize,
    /// ln N, kept in log form.
    pub log_norm: f64,
}

impl ProbeSpec {
    pub fn new(z: Point, s: f64, h: Point, m: usize, region: &NormRegion) -> Result<Self> {
        let log_norm = probe_log_norm(z, s, h, m, region)?;
        Ok(ProbeSpec { z, s, h, m, log_norm })
    }

    pub fn validate(&self) -> Result<()> {
        if (norm(self.h) - 1.0).abs() > 1e-12 || self.m > MAX_ORDER || !self.log_norm.is_finite() {
            return Err(NrtError::Config("invalid probe specification".into()));
        }
        Ok(())
    }
}

/// c_norm / N * (h.grad_z)^m Phi(z,s;x,t) at each target (time-major: all points per time).
pub fn normalized_probe(spec: &ProbeSpec, points: &[Point], times: &[f64], c_norm: f64) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(points.len() * times.len());
    let mut buf = vec![0.0; spec.m + 1];
    let scale = c_norm * (-spec.log_norm).exp();
    for &t in times {
        for &x in points {
            directional_derivs_upto(spec.h, spec.z, spec.s, x, t, 2, &mut buf);
            out.push(scale * buf[spec.m]);
        }
    }
    Ok(out)
}

/// Unit directions spread over a half circle (the sign of h only flips odd orders).
pub fn directions(ndirs: usize) -> Vec<Point> {
    (0..ndirs)
        .map(|i| {
            let a = PI * i as f64 / ndirs as f64;
            [a.cos(), a.sin()]
        })
        .collect()
}

/// ln P(z,s) = max over directions and q <= m_max of ln(|(h.grad)^q u| rho^q / q!).
pub fn taylor_log_p(field: &LayerField, z: Point, s: f64, rho: f64, m_max: usize, dirs: &[Point]) -> Result<f64> {
    if m_max > MAX_ORDER {
        return Err(NrtError::Config(format!("m_max {m_max} exceeds {MAX_ORDER}")));
    }
    let d = field.directional_derivs(z, s, dirs, m_max);
    let mut best = f64::NEG_INFINITY;
    for row in &d {
        for (q, v) in row.iter().enumerate() {
            if *v != 0.0 {
                best = best.max(v.abs().ln() - ln_factorial(q) + q as f64 * rho.ln());
            }
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlowupMap {
    pub points: Vec<Point>,
    pub times: Vec<f64>,
    /// `p_log[i * times.len() + k]` at point i and time k; -inf when the field vanishes.
    pub p_log: Vec<f64>,
    /// Optional per-point probe magnitudes |I - I~| (same layout as p_log).
    pub probe_value: Vec<f64>,
    pub rho: f64,
    pub eps: f64,
    pub m_max: usize,
    pub ndirs: usize,
    /// Pixel layout when the points came from a grid: (grid, pixel index per point).
    pub layout: Option<(GridSpec, Vec<usize>)>,
}

impl BlowupMap {
    /// Max over times of ln P at each point.
    pub fn p_log_max(&self) -> Vec<f64> {
        let nt = self.times.len();
        (0..self.points.len())
            .map(|i| self.p_log[i * nt..(i + 1) * nt].iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "x,y,t,P_log,probe_value")?;
        let nt = self.times.len();
        for (i, p) in self.points.iter().enumerate() {
            for (k, t) in self.times.iter().enumerate() {
                let pv = self.probe_value.get(i * nt + k).copied().unwrap_or(f64::NAN);
                writeln!(w, "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}", p[0], p[1], t, self.p_log[i * nt + k], pv)?;
            }
        }
        Ok(())
    }

    /// Log-scaled heatmap of max-over-time ln P; returns the (min, max) used for scaling.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<(f64, f64)> {
        let Some((spec, idx)) = &self.layout else {
            return Err(NrtError::Format("blow-up map has no pixel layout".into()));
        };
        let vals = self.p_log_max();
        let fin: Vec<f64> = vals.iter().copied().filter(|v| v.is_finite()).collect();
        let lo = fin.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = fin.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut px = vec![0u8; spec.nx * spec.ny];
        for (v, &p) in vals.iter().zip(idx) {
            let x = if v.is_finite() && hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
            px[p] = (1.0 + 254.0 * x).round() as u8;
        }
        write!(w, "P5\n{} {}\n255\n", spec.nx, spec.ny)?;
        for row in (0..spec.ny).rev() {
            w.write_all(&px[row * spec.nx..(row + 1) * spec.nx])?;
        }
        Ok((lo, hi))
    }
}

/// Grid sample of the outer domain shrunk by rho with G removed.
pub fn blowup_points(
    omega: &RadialShape,
    g: &RadialShape,
    rho: f64,
    spec: &GridSpec,
) -> Result<(Vec<Point>, Vec<usize>)> {
    let inner = omega.shrink(rho)?;
    let (mut pts, mut idx) = (Vec::new(), Vec::new());
    for j in 0..spec.ny {
        for i in 0..spec.nx {
            let p = spec.center(i, j);
            if inner.contains(p) && !g.contains(p) && g.boundary_distance(p) > 1e-9 {
                pts.push(p);
                idx.push(j * spec.nx + i);
            }
        }
    }
    Ok((pts, idx))
}

/// Taylor-coefficient map of a caloric field over sample points and times.
pub fn taylor_blowup_map(
    field: &LayerField,
    points: &[Point],
    times: &[f64],
    rho: f64,
    m_max: usize,
    ndirs: usize,
    exec: Exec,
) -> Result<BlowupMap> {
    if ndirs < 8 {
        return Err(NrtError::Config("at least 8 directions are required".into()));
    }
    if m_max > MAX_ORDER || !(rho > 0.0) {
        return Err(NrtError::Config("blow-up map needs rho > 0 and m_max within range".into()));
    }
    let dirs = directions(ndirs);
    let rows: Vec<Result<Vec<f64>>> = map_range(exec, points.len(), |i| {
        times.iter().map(|&s| taylor_log_p(field, points[i], s, rho, m_max, &dirs)).collect()
    });
    let mut p_log = Vec::with_capacity(points.len() * times.len());
    for r in rows {
        p_log.extend(r?);
    }
    Ok(BlowupMap {
        points: points.to_vec(),
        times: times.to_vec(),
        p_log,
        probe_value: Vec::new(),
        rho,
        eps: 0.0,
        m_max,
        ndirs,
        layout: None,
    })
}

/// Enlarge G about its center toward z, keeping dist(z, E) >= keep * dist(z, G) and E inside
/// the outer domain shrunk by `margin`. Small `keep` brings the probe singularity close to the
/// boundary of E, where its time profile is too sharp for the data's time grid.
pub fn probe_region(g: &RadialShape, omega: &RadialShape, z: Point, margin: f64, keep: f64) -> Result<RadialShape> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(NrtError::Config("keep fraction must lie in (0, 1]".into()));
    }
    if g.contains(z) {
        return Err(NrtError::Geometry("probe point lies inside the test domain".into()));
    }
    let d = g.boundary_distance(z);
    let cap = omega.shrink(margin)?;
    if !shape_inclusion(g, &cap, 256) {
        return Err(NrtError::Geometry("test domain is not inside the shrunk outer domain".into()));
    }
    let ok = |lam: f64| {
        let e = g.scaled(lam);
        !e.contains(z) && e.boundary_distance(z) >= keep * d && shape_inclusion(&e, &cap, 256)
    };
    let (mut lo, mut hi) = (1.0, 1.0);
    while ok(hi * 1.25) && hi < 64.0 {
        hi *= 1.25;
    }
    hi *= 1.25;
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(g.scaled(lo))
}

/// Synthetic side: c_norm / N * |(h.grad)^m w(z,s) - (h.grad)^m w~(z,s)|.
pub fn probe_synthetic(spec: &ProbeSpec, w: &LayerField, w_tilde: &LayerField, c_norm: f64) -> Result<f64> {
    spec.validate()?;
    let a = w.directional_derivs(spec.z, spec.s, &[spec.h], spec.m)[0][spec.m];
    let b = w_tilde.directional_derivs(spec.z, spec.s, &[spec.h], spec.m)[0][spec.m];
    let diff = (a - b).abs();
    if diff == 0.0 {
        return Ok(0.0);
    }
    Ok(c_norm * (diff.ln() - spec.log_norm).exp())
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct DataSideProbe {
    pub value: f64,
    /// Weighted residual of the K[phi] fit on (boundary of E) x (0,T), relative to the target.
    pub fit_residual: f64,
    pub unreliable: bool,
}

/// The measured flux of w paired against traces of K on the outer boundary.
pub struct DataSidePairing {
    omega: ParamBoundary,
    grid: TimeGrid,
    trace: DenseOperator,
    b: Vec<f64>,
    wy: Vec<f64>,
}

impl DataSidePairing {
    pub fn new(cauchy_w: &CauchyData, exec: Exec) -> Result<Self> {
        cauchy_w.check()?;
        let trace = assemble_k_trace(&cauchy_w.boundary, &cauchy_w.grid, 8, exec)?;
        let wy = trace.target.weights();
        Ok(DataSidePairing {
            omega: cauchy_w.boundary.clone(),
            grid: cauchy_w.grid,
            trace,
            b: time_major(&cauchy_w.neumann),
            wy,
        })
    }

    /// Fit K[phi] to the normalized probe on (boundary of E) x (0,T) by Tikhonov least
    /// squares, then pair the trace of K[phi] with the measured flux.
    pub fn probe(
        &self,
        spec: &ProbeSpec,
        e_shape: &RadialShape,
        n_e: usize,
        alpha_rel: f64,
        c_norm: f64,
        exec: Exec,
    ) -> Result<DataSideProbe> {
        spec.validate()?;
        if e_shape.contains(spec.z) {
            return Err(NrtError::Geometry("probe point lies inside E".into()));
        }
        let (omega, grid) = (&self.omega, &self.grid);
        let eb = discretize(e_shape, n_e)?;
        let target = normalized_probe(spec, &eb.nodes, &grid.nodes(), c_norm)?;
        let phi = fit_k_density(omega, &eb, grid, &target, alpha_rel, exec)?;
        let kphi = self.trace.apply(phi.density.as_slice());
        let value = kphi.iter().zip(&self.b).zip(&self.wy).map(|((k, b), w)| k * b * w).sum::<f64>().abs();
        Ok(DataSideProbe { value, fit_residual: phi.residual, unreliable: phi.residual > 0.2 })
    }
}

/// One-off data-side probe; build a `DataSidePairing` when probing repeatedly.
pub fn probe_data_side(
    spec: &ProbeSpec,
    e_shape: &RadialShape,
    n_e: usize,
    cauchy_w: &CauchyData,
    alpha_rel: f64,
    c_norm: f64,
    exec: Exec,
) -> Result<DataSideProbe> {
    DataSidePairing::new(cauchy_w, exec)?.probe(spec, e_shape, n_e, alpha_rel, c_norm, exec)
}

/// Tikhonov-regularized density with K[phi] close to `target` on (e_b) x midpoints.
pub struct KFit {
    pub density: DVector<f64>,
    pub residual: f64,
}

pub fn fit_k_density(
    omega: &ParamBoundary,
    e_b: &ParamBoundary,
    grid: &TimeGrid,
    target: &[f64],
    alpha_rel: f64,
    exec: Exec,
) -> Result<KFit> {
    let k = assemble_k_at(omega, &e_b.nodes, &grid.nodes(), grid, KOptions::default(), exec)?;
    let we: Vec<f64> = QuadMeta::from_boundary(e_b, grid).weights().iter().map(|v| v.sqrt()).collect();
    let wo: Vec<f64> = QuadMeta::from_boundary(omega, grid).weights().iter().map(|v| v.sqrt()).collect();
    let a = DMatrix::from_fn(k.nrows(), k.ncols(), |i, j| we[i] * k[(i, j)] / wo[j]);
    let f = DVector::from_iterator(target.len(), target.iter().zip(&we).map(|(t, w)| t * w));
    let fnorm = f.norm();
    if fnorm == 0.0 {
        return Ok(KFit { density: DVector::zeros(k.ncols()), residual: 0.0 });
    }
    let ata = a.tr_mul(&a);
    let s1 = ata.trace().max(0.0);
    let lam = ata.clone().symmetric_eigen().eigenvalues.max().max(s1 * 1e-300);
    let mut m = ata;
    for i in 0..m.nrows() {
        m[(i, i)] += alpha_rel * lam;
    }
    let rhs = a.tr_mul(&f);
    let chol = m.cholesky().ok_or_else(|| NrtError::Numerical("regularized normal matrix not positive".into()))?;
    let psi = chol.solve(&rhs);
    let residual = (&a * &psi - &f).norm() / fnorm;
    let density = DVector::from_iterator(psi.len(), psi.iter().zip(&wo).map(|(p, w)| p / w));
    Ok(KFit { density, residual })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_positive_and_decays_along_ray() {
        let g = RadialShape::circle([0.3, 0.0], 0.3);
        let om = RadialShape::circle([0.0, 0.0], 1.0);
        let reg = norm_region(&g, &om, 0.05).unwrap();
        let mut last = f64::INFINITY;
        for x in [-0.1, -0.2, -0.3, -0.4] {
            let l = probe_log_norm([x, 0.0], 0.5, [1.0, 0.0], 1, &reg).unwrap();
            assert!(l.is_finite());
            assert!(l < last);
            last = l;
        }
        assert!(probe_log_norm([0.3, 0.0], 0.5, [1.0, 0.0], 1, &reg).is_err());
    }

    #[test]
    fn probe_vanishes_after_s() {
        let g = RadialShape::circle([0.3, 0.0], 0.3);
        let om = RadialShape::circle([0.0, 0.0], 1.0);
        let reg = norm_region(&g, &om, 0.05).unwrap();
        let sp = ProbeSpec::new([-0.3, 0.0], 0.5, [0.0, 1.0], 2, &reg).unwrap();
        let v = normalized_probe(&sp, &[[0.5, 0.1], [0.2, 0.3]], &[0.5, 0.7], 1.0).unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
    }
}
