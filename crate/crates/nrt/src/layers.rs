//! Single-layer heat potentials with densities piecewise constant in time.
//!
//! A `LayerField` is an exact caloric function off its source curves, so it can be
//! evaluated, differentiated and continued anywhere away from them. Time integrals
//! are done in closed form for values and gradients, and by graded Gauss-Legendre
//! quadrature in tau for high directional derivatives.

use crate::geometry::{dist2, dot, sub, Point};
use crate::heat_kernel::{flux_cell, hermite_all, single_layer_cell};
use crate::special::gauss_legendre;
use std::f64::consts::PI;
use std::sync::OnceLock;

#[derive(Clone, Debug)]
pub struct LayerField {
    pub nodes: Vec<Point>,
    /// Spatial quadrature weight per node.
    pub weights: Vec<f64>,
    /// Length of each time cell; cell k covers [k step, (k+1) step].
    pub step: f64,
    pub n_cells: usize,
    /// Time-major density, `density[k * n_nodes + j]`.
    pub density: Vec<f64>,
}

const GL_POINTS: usize = 8;
/// Width of one quadrature panel in ln(tau).
const PANEL_LOG_WIDTH: f64 = 0.35;
/// Gaussian exponent beyond which a contribution is dropped.
const EXP_CUTOFF: f64 = 700.0;

fn gl_rules() -> &'static [(Vec<f64>, Vec<f64>); 3] {
    static RULES: OnceLock<[(Vec<f64>, Vec<f64>); 3]> = OnceLock::new();
    RULES.get_or_init(|| [gauss_legendre(2), gauss_legendre(4), gauss_legendre(GL_POINTS)])
}

/// Panel count and rule for a tau interval of log-width `w` whose largest Gaussian
/// exponent is `q`. Narrow cells far from the target time get two or four points.
fn tau_rule(w: f64, q: f64) -> (usize, &'static (Vec<f64>, Vec<f64>)) {
    let w_eff = w * (q.sqrt() / 4.0).max(1.0);
    let rules = gl_rules();
    if w_eff < 0.03 {
        (1, &rules[0])
    } else if w_eff < 0.12 {
        (1, &rules[1])
    } else {
        (((w_eff / PANEL_LOG_WIDTH).ceil() as usize).max(1), &rules[2])
    }
}

impl LayerField {
    pub fn zero(nodes: Vec<Point>, weights: Vec<f64>, step: f64, n_cells: usize) -> Self {
        let n = nodes.len();
        LayerField { nodes, weights, step, n_cells, density: vec![0.0; n * n_cells] }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// `self + scale * other` as one field; both must share the time cells.
    pub fn combine(&self, other: &LayerField, scale: f64) -> LayerField {
        assert_eq!(self.n_cells, other.n_cells);
        assert!((self.step - other.step).abs() < 1e-15 * self.step);
        let (na, nb) = (self.n_nodes(), other.n_nodes());
        let mut nodes = self.nodes.clone();
        nodes.extend_from_slice(&other.nodes);
        let mut weights = self.weights.clone();
        weights.extend_from_slice(&other.weights);
        let mut density = Vec::with_capacity((na + nb) * self.n_cells);
        for k in 0..self.n_cells {
            density.extend_from_slice(&self.density[k * na..(k + 1) * na]);
            density.extend(other.density[k * nb..(k + 1) * nb].iter().map(|v| scale * v));
        }
        LayerField { nodes, weights, step: self.step, n_cells: self.n_cells, density }
    }

    /// Cells that end before or contain time s, with their tau interval.
    fn cells_before(&self, s: f64) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        let h = self.step;
        (0..self.n_cells).take_while(move |&k| (k as f64) * h < s).map(move |k| {
            let tb = s - k as f64 * h;
            let ta = (s - (k + 1) as f64 * h).max(0.0);
            (k, ta, tb)
        })
    }

    pub fn value(&self, z: Point, s: f64) -> f64 {
        let n = self.n_nodes();
        let mut acc = 0.0;
        for (k, ta, tb) in self.cells_before(s) {
            let dens = &self.density[k * n..(k + 1) * n];
            for j in 0..n {
                if dens[j] != 0.0 {
                    acc += self.weights[j] * dens[j] * single_layer_cell(dist2(z, self.nodes[j]), ta, tb);
                }
            }
        }
        acc
    }

    pub fn gradient(&self, z: Point, s: f64) -> Point {
        let n = self.n_nodes();
        let mut g = [0.0, 0.0];
        for (k, ta, tb) in self.cells_before(s) {
            let dens = &self.density[k * n..(k + 1) * n];
            for j in 0..n {
                if dens[j] != 0.0 {
                    let d = sub(z, self.nodes[j]);
                    let f = -self.weights[j] * dens[j] * flux_cell(dot(d, d), ta, tb);
                    g[0] += f * d[0];
                    g[1] += f * d[1];
                }
            }
        }
        g
    }

    /// `out[dir][m]` = (h_dir . grad_z)^m of the field at (z, s), m = 0..=m_max.
    pub fn directional_derivs(&self, z: Point, s: f64, dirs: &[Point], m_max: usize) -> Vec<Vec<f64>> {
        let n = self.n_nodes();
        let mut out = vec![vec![0.0; m_max + 1]; dirs.len()];
        let mut herm = vec![0.0; m_max + 1];
        for j in 0..n {
            let d = sub(z, self.nodes[j]);
            let r2 = dot(d, d);
            let proj: Vec<f64> = dirs.iter().map(|h| dot(d, *h)).collect();
            let tau_floor = r2 / (4.0 * EXP_CUTOFF);
            for (k, ta, tb) in self.cells_before(s) {
                let sig = self.density[k * n + j];
                if sig == 0.0 {
                    continue;
                }
                let lo = ta.max(tau_floor);
                if lo >= tb {
                    continue;
                }
                let (la, lb) = (lo.ln(), tb.ln());
                let (panels, (gx, gw)) = tau_rule(lb - la, r2 / (4.0 * lo));
                let pw = (lb - la) / panels as f64;
                for p in 0..panels {
                    let c = la + (p as f64 + 0.5) * pw;
                    for (xi, wi) in gx.iter().zip(gw) {
                        let tau = (c + 0.5 * pw * xi).exp();
                        // d tau = tau du
                        let phi = (-r2 / (4.0 * tau)).exp() / (4.0 * PI * tau);
                        let wt = self.weights[j] * sig * wi * 0.5 * pw * tau * phi;
                        if wt == 0.0 {
                            continue;
                        }
                        let sq = 2.0 * tau.sqrt();
                        for (di, pr) in proj.iter().enumerate() {
                            hermite_all(pr / sq, &mut herm);
                            let mut scale = wt;
                            let row = &mut out[di];
                            for m in 0..=m_max {
                                row[m] += scale * herm[m];
                                scale *= -1.0 / sq;
                            }
                        }
                    }
                }
            }
        }
        out
    }
}
