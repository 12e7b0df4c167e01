//! The causal heat kernel, its derivatives, and closed-form time integrals in 2D.

use crate::error::{NrtError, Result};
use crate::geometry::{dot, sub, Point};
use crate::special::{exp1_diff, ln_factorial};
use std::f64::consts::PI;

/// Highest directional derivative order accepted anywhere.
pub const MAX_ORDER: usize = 60;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpaceTimePoint {
    pub x: Point,
    pub t: f64,
}

/// Phi(y,s;x,t); exactly zero when s <= t.
pub fn phi(y: Point, s: f64, x: Point, t: f64, d: u32) -> f64 {
    let tau = s - t;
    if tau <= 0.0 {
        return 0.0;
    }
    let r2 = dot(sub(y, x), sub(y, x));
    (4.0 * PI * tau).powf(-(d as f64) / 2.0) * (-r2 / (4.0 * tau)).exp()
}

/// Gradient of Phi in its first space argument y.
pub fn grad_y_phi(y: Point, s: f64, x: Point, t: f64, d: u32) -> Point {
    let tau = s - t;
    if tau <= 0.0 {
        return [0.0, 0.0];
    }
    let f = phi(y, s, x, t, d) / (2.0 * tau);
    [f * (x[0] - y[0]), f * (x[1] - y[1])]
}

/// nu . grad_y Phi(y,s;x,t).
pub fn normal_deriv_phi(y: Point, s: f64, x: Point, t: f64, nu: Point, d: u32) -> f64 {
    dot(grad_y_phi(y, s, x, t, d), nu)
}

/// Physicists' Hermite values H_0..=H_m at xi.
pub fn hermite_all(xi: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = 2.0 * xi;
    }
    for m in 1..out.len().saturating_sub(1) {
        out[m + 1] = 2.0 * xi * out[m] - 2.0 * m as f64 * out[m - 1];
    }
}

/// (h . grad_z)^m Phi(z,s;x,t).
pub fn directional_deriv_m(h: Point, m: usize, z: Point, s: f64, x: Point, t: f64, d: u32) -> Result<f64> {
    if m > MAX_ORDER {
        return Err(NrtError::Config(format!("derivative order {m} exceeds {MAX_ORDER}")));
    }
    if ((h[0] * h[0] + h[1] * h[1]).sqrt() - 1.0).abs() > 1e-12 {
        return Err(NrtError::Config("direction must be a unit vector".into()));
    }
    let mut out = vec![0.0; m + 1];
    directional_derivs_upto(h, z, s, x, t, d, &mut out);
    Ok(out[m])
}

/// Orders 0..out.len() of (h . grad_z)^m Phi(z,s;x,t) in one recurrence.
pub fn directional_derivs_upto(h: Point, z: Point, s: f64, x: Point, t: f64, d: u32, out: &mut [f64]) {
    let tau = s - t;
    if tau <= 0.0 {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let p = phi(z, s, x, t, d);
    let sq = 2.0 * tau.sqrt();
    let xi = dot(sub(z, x), h) / sq;
    hermite_all(xi, out);
    let mut scale = p;
    for v in out.iter_mut() {
        *v *= scale;
        scale *= -1.0 / sq;
    }
}

/// log of the Taylor coefficient |D^q| rho^q / q! given log|D^q|.
pub fn log_taylor_coeff(log_abs_deriv: f64, q: usize, rho: f64) -> f64 {
    log_abs_deriv - ln_factorial(q) + q as f64 * rho.ln()
}

/// Time integral of the 2D kernel over tau in [ta, tb]: (E1(r2/4tb) - E1(r2/4ta)) / 4pi.
/// `ta == 0` is allowed when r2 > 0; r2 == 0 needs ta > 0.
pub fn single_layer_cell(r2: f64, ta: f64, tb: f64) -> f64 {
    if tb <= 0.0 || tb <= ta {
        return 0.0;
    }
    if r2 == 0.0 {
        return (tb / ta).ln() / (4.0 * PI);
    }
    let ua = if ta <= 0.0 { f64::INFINITY } else { r2 / (4.0 * ta) };
    exp1_diff(r2 / (4.0 * tb), ua) / (4.0 * PI)
}

/// Time integral of Phi / (2 tau) over [ta, tb] (2D), i.e. (e^{-r2/4tb} - e^{-r2/4ta}) / (2 pi r2).
/// The gradient of the single-layer cell kernel in the target is -(x - y) times this.
pub fn flux_cell(r2: f64, ta: f64, tb: f64) -> f64 {
    if tb <= 0.0 || tb <= ta {
        return 0.0;
    }
    if r2 == 0.0 {
        // limit (1/ta - 1/tb) / (8 pi); infinite for ta = 0
        return if ta > 0.0 { (1.0 / ta - 1.0 / tb) / (8.0 * PI) } else { f64::INFINITY };
    }
    let eb = (-r2 / (4.0 * tb)).exp();
    let diff = if ta <= 0.0 { eb } else { -eb * (-(r2 / 4.0) * (1.0 / ta - 1.0 / tb)).exp_m1() };
    diff / (2.0 * PI * r2)
}

/// d/d(r2) of `flux_cell`, used for gradients of double-layer kernels.
pub fn flux_cell_dr2(r2: f64, ta: f64, tb: f64) -> f64 {
    if tb <= 0.0 || tb <= ta || r2 == 0.0 {
        return 0.0;
    }
    let eb = (-r2 / (4.0 * tb)).exp();
    let ea = if ta <= 0.0 { 0.0 } else { (-r2 / (4.0 * ta)).exp() };
    let ea_term = if ta <= 0.0 { 0.0 } else { ea / (4.0 * ta) };
    (-eb / (4.0 * tb) + ea_term) / (2.0 * PI * r2) - flux_cell(r2, ta, tb) / r2
}
