//! The indicator of a test domain in its three forms and the positive/negative rule.
//!
//! Everything is computed on the weighted matrix `A = W_Y^{1/2} R W_X^{-1/2}`, so that
//! plain Euclidean norms of transformed vectors equal the surrogate norms on X and Y.
//! Tikhonov parameters are relative to the top squared singular value.

use crate::boundary_operators::DenseOperator;
use crate::error::{NrtError, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Positive,
    Negative,
    Uncertain,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Positive => "positive",
            Verdict::Negative => "negative",
            Verdict::Uncertain => "uncertain",
        }
    }
}

/// Thin SVD of the weighted operator plus the weights that define it.
#[derive(Clone, Debug)]
pub struct SpectralData {
    /// Descending.
    pub sigma: Vec<f64>,
    /// Left singular vectors, one per singular value.
    pub u: DMatrix<f64>,
    pub wy_sqrt: Vec<f64>,
}

/// Coefficients of one right-hand side in the left singular basis.
#[derive(Clone, Debug)]
pub struct Projection {
    pub c: Vec<f64>,
    /// Weighted norm of b.
    pub b_norm: f64,
    /// Norm of the part of b outside the column space of A.
    pub outside: f64,
}

pub fn weighted_matrix(r: &DenseOperator) -> DMatrix<f64> {
    let wy: Vec<f64> = r.target.weights().iter().map(|w| w.sqrt()).collect();
    let wx: Vec<f64> = r.source.weights().iter().map(|w| w.sqrt()).collect();
    DMatrix::from_fn(r.entries.nrows(), r.entries.ncols(), |i, j| wy[i] * r.entries[(i, j)] / wx[j])
}

pub fn weighted_svd(r: &DenseOperator) -> Result<SpectralData> {
    let a = weighted_matrix(r);
    spectral_data(a, r.target.weights().iter().map(|w| w.sqrt()).collect())
}

/// SVD of an already weighted matrix.
pub fn spectral_data(a: DMatrix<f64>, wy_sqrt: Vec<f64>) -> Result<SpectralData> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(NrtError::Numerical("operator has non-finite entries".into()));
    }
    let svd = a.svd(true, false);
    let u = svd.u.ok_or_else(|| NrtError::Numerical("SVD did not return U".into()))?;
    Ok(SpectralData { sigma: svd.singular_values.iter().copied().collect(), u, wy_sqrt })
}

impl SpectralData {
    pub fn project(&self, b: &[f64]) -> Result<Projection> {
        if b.len() != self.wy_sqrt.len() {
            return Err(NrtError::Config(format!(
                "data has {} samples, operator target {}",
                b.len(),
                self.wy_sqrt.len()
            )));
        }
        let bt = DVector::from_iterator(b.len(), b.iter().zip(&self.wy_sqrt).map(|(v, w)| v * w));
        let c = self.u.tr_mul(&bt);
        let outside = (&bt - &self.u * &c).norm();
        Ok(Projection { c: c.iter().copied().collect(), b_norm: bt.norm(), outside })
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma.first().copied().unwrap_or(0.0)
    }

    /// Number of singular values at or above `cutoff * sigma_max`.
    pub fn kept(&self, cutoff: f64) -> usize {
        let s1 = self.sigma_max();
        self.sigma.iter().take_while(|&&s| s > 0.0 && s >= cutoff * s1).count()
    }
}

/// Geometric alphas `1e-2 * 2^-k`, k = 0..n.
pub fn default_alphas(n: usize) -> Vec<f64> {
    (0..n).map(|k| 1e-2 * 0.5f64.powi(k as i32)).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegPath {
    /// Relative to sigma_max^2, strictly decreasing.
    pub alphas: Vec<f64>,
    pub solution_norms: Vec<f64>,
    pub residuals: Vec<f64>,
    pub svd_spectrum: Vec<f64>,
    pub b_norm: f64,
    /// Alphas actually used for the slope and plateau (after noise truncation).
    pub used: usize,
    pub slope: f64,
    pub plateau: f64,
    pub verdict: Verdict,
}

fn check_alphas(alphas: &[f64]) -> Result<()> {
    if alphas.is_empty() || alphas.iter().any(|a| !(*a > 0.0)) || alphas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(NrtError::Config("alphas must be positive and strictly decreasing".into()));
    }
    Ok(())
}

/// Tikhonov path on precomputed spectral data.
pub fn path_from_spectrum(spec: &SpectralData, proj: &Projection, alphas: &[f64]) -> Result<RegPath> {
    check_alphas(alphas)?;
    let s1sq = spec.sigma_max().powi(2);
    let mut norms = Vec::with_capacity(alphas.len());
    let mut res = Vec::with_capacity(alphas.len());
    for &a in alphas {
        let al = a * s1sq;
        let (mut n2, mut r2) = (0.0, proj.outside * proj.outside);
        for (s, c) in spec.sigma.iter().zip(&proj.c) {
            let d = s * s + al;
            n2 += (s * c / d).powi(2);
            r2 += (al * c / d).powi(2);
        }
        if !n2.is_finite() {
            return Err(NrtError::Numerical("Tikhonov norm overflow".into()));
        }
        norms.push(n2.sqrt());
        res.push(r2.sqrt());
    }
    let mut p = RegPath {
        alphas: alphas.to_vec(),
        solution_norms: norms,
        residuals: res,
        svd_spectrum: spec.sigma.clone(),
        b_norm: proj.b_norm,
        used: alphas.len(),
        slope: 0.0,
        plateau: 0.0,
        verdict: Verdict::Uncertain,
    };
    p.update_features(SLOPE_WINDOW);
    Ok(p)
}

/// Tikhonov path phi_a = (R*R + a I)^{-1} R* b in the surrogate inner products.
pub fn tikhonov_path(r: &DenseOperator, b: &[f64], alphas: &[f64]) -> Result<RegPath> {
    let spec = weighted_svd(r)?;
    let proj = spec.project(b)?;
    path_from_spectrum(&spec, &proj, alphas)
}

/// Number of trailing alphas in the slope fit.
pub const SLOPE_WINDOW: usize = 4;

fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    if y.iter().any(|v| !(*v > 0.0)) {
        return 0.0;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

impl RegPath {
    fn update_features(&mut self, window: usize) {
        let end = self.used.max(window.min(self.alphas.len()));
        let start = end.saturating_sub(window);
        self.slope = loglog_slope(&self.alphas[start..end], &self.solution_norms[start..end]);
        self.plateau = self.solution_norms[end - 1];
    }

    /// Keep alphas down to the first one whose residual reaches `tau * noise`.
    pub fn morozov_truncate(&mut self, noise: f64, tau: f64) {
        let level = tau * noise;
        let mut used = self.alphas.len();
        if level > 0.0 {
            if let Some(i) = self.residuals.iter().position(|r| *r <= level) {
                used = i + 1;
            }
        }
        self.used = used;
        self.update_features(SLOPE_WINDOW);
    }

    /// Norms are non-decreasing and residuals non-increasing as alpha decreases.
    pub fn monotone(&self, tol: f64) -> bool {
        let up = self.solution_norms.windows(2).all(|w| w[1] >= w[0] * (1.0 - tol) - tol);
        let down = self.residuals.windows(2).all(|w| w[1] <= w[0] * (1.0 + tol) + tol);
        up && down
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "alpha,norm,residual")?;
        for i in 0..self.alphas.len() {
            writeln!(w, "{:.16e},{:.16e},{:.16e}", self.alphas[i], self.solution_norms[i], self.residuals[i])?;
        }
        Ok(())
    }
}

/// Alpha -> 0 limit of the path norm by Richardson extrapolation of its last two points.
/// The norm is smooth in alpha near 0 with a linear leading term when b is in the range.
pub fn tikhonov_limit(path: &RegPath) -> f64 {
    let n = path.alphas.len();
    if n < 2 {
        return path.solution_norms[n - 1];
    }
    let (a1, a2) = (path.alphas[n - 2], path.alphas[n - 1]);
    let (f1, f2) = (path.solution_norms[n - 2], path.solution_norms[n - 1]);
    (a1 * f2 - a2 * f1) / (a1 - a2)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct SupForm {
    pub value: f64,
    /// Fraction of the weighted norm of b outside the kept singular directions.
    pub unresolved_fraction: f64,
    pub kept: usize,
    pub infinite: bool,
}

/// sqrt(sum_kept (c_i / s_i)^2), the dual supremum restricted to kept directions.
pub fn sup_form(spec: &SpectralData, proj: &Projection, cutoff: f64, unresolved_threshold: f64) -> Result<SupForm> {
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(NrtError::Config("cutoff must lie in (0,1)".into()));
    }
    let k = spec.kept(cutoff);
    let value = (0..k).map(|i| (proj.c[i] / spec.sigma[i]).powi(2)).sum::<f64>().sqrt();
    let tail2: f64 = proj.c[k..].iter().map(|c| c * c).sum::<f64>() + proj.outside.powi(2);
    let unresolved_fraction = if proj.b_norm > 0.0 { tail2.sqrt() / proj.b_norm } else { 0.0 };
    Ok(SupForm { value, unresolved_fraction, kept: k, infinite: unresolved_fraction > unresolved_threshold })
}

/// Running supremum of |(zeta, b)_Y| / ||R* zeta||_X over probe traces on the outer boundary.
/// Each probe is restricted to the kept left singular directions first, which makes it
/// admissible in the same truncated problem as `sup_form` (so the result never exceeds it).
pub fn probe_form(spec: &SpectralData, proj: &Projection, probes: &[Vec<f64>], cutoff: f64) -> Result<Vec<f64>> {
    let k = spec.kept(cutoff);
    let mut best = 0.0f64;
    let mut out = Vec::with_capacity(probes.len());
    for z in probes {
        if z.len() != spec.wy_sqrt.len() {
            return Err(NrtError::Config("probe length does not match the operator target".into()));
        }
        let eta = DVector::from_iterator(z.len(), z.iter().zip(&spec.wy_sqrt).map(|(v, w)| v * w));
        let a = spec.u.columns(0, k).tr_mul(&eta);
        let cons = (0..k).map(|i| (a[i] * spec.sigma[i]).powi(2)).sum::<f64>().sqrt();
        if cons > 0.0 {
            let val = (0..k).map(|i| a[i] * proj.c[i]).sum::<f64>().abs() / cons;
            best = best.max(val);
        }
        out.push(best);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ClassifyPolicy {
    /// Slope above which the path counts as a plateau.
    pub slope_pos: f64,
    /// Slope below which the path counts as growing.
    pub slope_neg: f64,
    pub theta: f64,
    /// Plateau values above `big_factor * theta` are negative regardless of slope.
    pub big_factor: f64,
}

impl Default for ClassifyPolicy {
    fn default() -> Self {
        ClassifyPolicy { slope_pos: -0.05, slope_neg: -0.07, theta: f64::INFINITY, big_factor: 10.0 }
    }
}

pub fn classify(path: &RegPath, policy: &ClassifyPolicy) -> Verdict {
    if path.solution_norms.iter().all(|v| *v == 0.0) {
        return Verdict::Positive;
    }
    if path.slope > policy.slope_pos && path.plateau < policy.theta {
        Verdict::Positive
    } else if path.slope < policy.slope_neg || path.plateau > policy.big_factor * policy.theta {
        Verdict::Negative
    } else {
        Verdict::Uncertain
    }
}

/// `factor` times the median plateau over the paths that do plateau; infinite if none do.
pub fn calibrate_theta(paths: &[&RegPath], slope_pos: f64, factor: f64) -> f64 {
    let mut v: Vec<f64> = paths.iter().filter(|p| p.slope > slope_pos).map(|p| p.plateau).collect();
    if v.is_empty() {
        return f64::INFINITY;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    let med = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    factor * med
}

/// sup <eta, b> over {||A^T eta|| <= 1} by projected gradient ascent with exact projection
/// onto the ellipsoid. Independent of the SVD route; meant for small instances.
pub fn ellipsoid_sup_oracle(a: &DMatrix<f64>, b: &DVector<f64>, max_iter: usize) -> Result<f64> {
    if a.nrows() != b.len() || a.nrows() > 400 {
        return Err(NrtError::Config("oracle expects a small matrix matching b".into()));
    }
    let m = a * a.transpose();
    let eig = m.clone().symmetric_eigen();
    let lam = &eig.eigenvalues;
    let q = &eig.eigenvectors;
    if lam.iter().any(|l| *l <= 0.0) {
        return Err(NrtError::Numerical("constraint matrix is not positive definite".into()));
    }
    let project = |y: &DVector<f64>| -> DVector<f64> {
        if y.dot(&(&m * y)) <= 1.0 {
            return y.clone();
        }
        let yh = q.tr_mul(y);
        // f(mu) = sum lam yh^2 / (1 + mu lam)^2 - 1 is convex and decreasing; Newton from 0 is monotone
        let mut mu = 0.0f64;
        for _ in 0..200 {
            let (mut f, mut df) = (-1.0, 0.0);
            for i in 0..yh.len() {
                let d = 1.0 + mu * lam[i];
                f += lam[i] * yh[i] * yh[i] / (d * d);
                df -= 2.0 * lam[i] * lam[i] * yh[i] * yh[i] / (d * d * d);
            }
            let step = f / df;
            mu -= step;
            if step.abs() <= 1e-16 * mu.abs().max(1e-300) {
                break;
            }
        }
        let xh = DVector::from_fn(yh.len(), |i, _| yh[i] / (1.0 + mu * lam[i]));
        q * xh
    };
    let bn = b.norm();
    if bn == 0.0 {
        return Ok(0.0);
    }
    let mut eta = DVector::zeros(b.len());
    let mut step = 1.0 / (bn * lam.max().sqrt());
    let mut last = f64::NEG_INFINITY;
    for _ in 0..max_iter {
        eta = project(&(&eta + b * step));
        let val = eta.dot(b);
        if (val - last).abs() <= 1e-15 * val.abs() {
            return Ok(val);
        }
        last = val;
        // the objective is linear, so growing steps stay monotone and speed up convergence
        step *= 1.5;
    }
    Ok(last)
}
