//! Forward heat problems with a Dirichlet cavity, solved by a space-time single-layer
//! boundary integral equation.
//!
//! The field is u = S[sigma] summed over all physical curves, with sigma piecewise
//! constant on a refined time grid. Each lag block is integrated exactly in time; the
//! logarithmic singularity of the current cell is handled with Kress product weights.
//! Collocation at cell midpoints turns the equation into a block lower-triangular
//! Toeplitz system that is marched in time.

use crate::error::{NrtError, Result};
use crate::geometry::{dist2, dot, shape_inclusion, sub, ParamBoundary, Point, RadialShape};
use crate::heat_kernel::{flux_cell, single_layer_cell};
use crate::layers::LayerField;
use crate::linalg::{toeplitz_apply, toeplitz_march};
use crate::par::{map_range, Exec};
use crate::special::{ein, EULER_GAMMA};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Uniform midpoint grid on (0, T].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_final: f64,
    pub nt: usize,
}

impl TimeGrid {
    pub fn new(t_final: f64, nt: usize) -> Result<Self> {
        if !(t_final > 0.0) || nt == 0 {
            return Err(NrtError::Config("time grid needs T > 0 and nt >= 1".into()));
        }
        Ok(TimeGrid { t_final, nt })
    }
    pub fn dt(&self) -> f64 {
        self.t_final / self.nt as f64
    }
    /// Midpoint of cell k (0-based).
    pub fn node(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.dt()
    }
    pub fn nodes(&self) -> Vec<f64> {
        (0..self.nt).map(|k| self.node(k)).collect()
    }
    pub fn weights(&self) -> Vec<f64> {
        vec![self.dt(); self.nt]
    }
    /// Split every cell into `f` cells. With odd `f`, coarse midpoints are fine midpoints.
    pub fn refine(&self, f: usize) -> TimeGrid {
        TimeGrid { t_final: self.t_final, nt: self.nt * f }
    }
}

/// Index of the fine cell whose midpoint is the midpoint of coarse cell k.
pub fn coarse_to_fine(k: usize, f: usize) -> usize {
    f * k + (f - 1) / 2
}

/// One term amplitude (t/T)^power cos(k theta + phase) of a custom boundary temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GMode {
    pub amplitude: f64,
    #[serde(default)]
    pub k: u32,
    #[serde(default)]
    pub phase: f64,
    pub power: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", deny_unknown_fields)]
pub enum BoundaryData {
    /// g = t / T
    Ramp {},
    /// g = sin^2(pi t / T)
    Bump {},
    Custom {
        modes: Vec<GMode>,
    },
}

impl BoundaryData {
    pub fn validate(&self) -> Result<()> {
        if let BoundaryData::Custom { modes } = self {
            if modes.is_empty() {
                return Err(NrtError::Config("custom boundary data has no modes".into()));
            }
            if modes.iter().any(|m| !(m.power > 0.0)) {
                return Err(NrtError::Config("custom boundary data must vanish at t = 0 (power > 0)".into()));
            }
        }
        Ok(())
    }

    /// Value at parameter angle `theta` and time t.
    pub fn eval(&self, theta: f64, t: f64, t_final: f64) -> f64 {
        let tt = t / t_final;
        match self {
            BoundaryData::Ramp {} => tt,
            BoundaryData::Bump {} => (PI * tt).sin().powi(2),
            BoundaryData::Custom { modes } => {
                modes.iter().map(|m| m.amplitude * tt.powf(m.power) * (m.k as f64 * theta + m.phase).cos()).sum()
            }
        }
    }
}

/// Node-by-time matrix of g on a boundary and midpoint grid.
pub fn boundary_data_g(data: &BoundaryData, boundary: &ParamBoundary, grid: &TimeGrid) -> Result<DMatrix<f64>> {
    data.validate()?;
    Ok(DMatrix::from_fn(boundary.len(), grid.nt, |j, k| data.eval(boundary.theta[j], grid.node(k), grid.t_final)))
}

/// Paired traces on a boundary; rows are nodes, columns are time cells.
#[derive(Clone, Debug)]
pub struct CauchyData {
    pub boundary: ParamBoundary,
    pub grid: TimeGrid,
    pub dirichlet: DMatrix<f64>,
    pub neumann: DMatrix<f64>,
}

impl CauchyData {
    pub fn check(&self) -> Result<()> {
        let want = (self.boundary.len(), self.grid.nt);
        if self.dirichlet.shape() != want || self.neumann.shape() != want {
            return Err(NrtError::Format("Cauchy data shape does not match boundary and grid".into()));
        }
        Ok(())
    }
}

/// Flatten node-by-time into the time-major vector layout.
pub fn time_major(m: &DMatrix<f64>) -> Vec<f64> {
    // column-major storage of node x time is already time-major
    m.as_slice().to_vec()
}

/// Cauchy data of w = u - mu: Dirichlet part set to exactly zero.
pub fn cauchy_of_w(direct: &CauchyData, background: &CauchyData) -> Result<CauchyData> {
    direct.check()?;
    background.check()?;
    if direct.grid != background.grid || direct.boundary.len() != background.boundary.len() {
        return Err(NrtError::Format("direct and background data live on different grids".into()));
    }
    let same_nodes = direct.boundary.nodes.iter().zip(&background.boundary.nodes).all(|(a, b)| dist2(*a, *b) < 1e-24);
    if !same_nodes {
        return Err(NrtError::Format("direct and background data use different nodes".into()));
    }
    Ok(CauchyData {
        boundary: direct.boundary.clone(),
        grid: direct.grid,
        dirichlet: DMatrix::zeros(direct.boundary.len(), direct.grid.nt),
        neumann: &direct.neumann - &background.neumann,
    })
}

/// Additive Gaussian noise on the flux: the noise vector has surrogate norm
/// `delta * ||flux||` in the quadrature-weighted L2 norm.
pub fn add_flux_noise(data: &CauchyData, delta: f64, seed: u64) -> CauchyData {
    let mut out = data.clone();
    if delta == 0.0 {
        return out;
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let noise = DMatrix::from_fn(data.neumann.nrows(), data.neumann.ncols(), |_, _| StandardNormal.sample(&mut rng));
    let wn = weighted_norm(&data.neumann, &data.boundary, &data.grid);
    let nn = weighted_norm(&noise, &data.boundary, &data.grid);
    if nn > 0.0 {
        out.neumann += noise * (delta * wn / nn);
    }
    out
}

/// sqrt(sum w_j dt f_jk^2) for a node-by-time field.
pub fn weighted_norm(m: &DMatrix<f64>, b: &ParamBoundary, g: &TimeGrid) -> f64 {
    let dt = g.dt();
    let mut s = 0.0;
    for k in 0..m.ncols() {
        for j in 0..m.nrows() {
            s += b.weights[j] * dt * m[(j, k)].powi(2);
        }
    }
    s.sqrt()
}

/// Solver controls. `refine` splits every data cell in time and must be odd.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardParams {
    #[serde(default = "default_refine")]
    pub refine: usize,
    /// Boundary-condition residual accepted at the collocation points, relative to ||g||.
    #[serde(default = "default_residual_tol")]
    pub residual_tol: f64,
}

fn default_refine() -> usize {
    9
}
fn default_residual_tol() -> f64 {
    1e-6
}

impl Default for ForwardParams {
    fn default() -> Self {
        ForwardParams { refine: default_refine(), residual_tol: default_residual_tol() }
    }
}

/// Several discretized curves treated as one source set.
#[derive(Clone, Debug)]
pub(crate) struct Curves {
    pub parts: Vec<ParamBoundary>,
    pub offsets: Vec<usize>,
    /// +1 where the physical domain is inside the curve (outer boundary), -1 for holes.
    pub side: Vec<f64>,
}

impl Curves {
    pub fn new(parts: Vec<ParamBoundary>, side: Vec<f64>) -> Self {
        let mut offsets = vec![0];
        for p in &parts {
            offsets.push(offsets.last().unwrap() + p.len());
        }
        Curves { parts, offsets, side }
    }
    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap()
    }
    fn locate(&self, i: usize) -> (usize, usize) {
        let c = self.offsets.partition_point(|&o| o <= i) - 1;
        (c, i - self.offsets[c])
    }
    pub fn nodes(&self) -> Vec<Point> {
        self.parts.iter().flat_map(|p| p.nodes.iter().copied()).collect()
    }
    pub fn weights(&self) -> Vec<f64> {
        self.parts.iter().flat_map(|p| p.weights.iter().copied()).collect()
    }
}

/// Kress weights R(d) for the log kernel on an n-point periodic grid, by index offset d.
fn kress_weights(n: usize) -> Vec<f64> {
    assert!(n.is_multiple_of(2), "Kress quadrature needs an even node count");
    let nh = n / 2;
    (0..n)
        .map(|d| {
            let t = 2.0 * PI * d as f64 / n as f64;
            let s: f64 = (1..nh).map(|m| (m as f64 * t).cos() / m as f64).sum();
            -(2.0 * PI / nh as f64) * s - PI / (nh * nh) as f64 * (nh as f64 * t).cos()
        })
        .collect()
}

/// tau interval of lag l for collocation at fine midpoints.
fn lag_interval(l: usize, h: f64) -> (f64, f64) {
    let ta = if l == 0 { 0.0 } else { (l as f64 - 0.5) * h };
    (ta, (l as f64 + 0.5) * h)
}

/// Single-layer lag block V_l on the curve set (targets are the nodes themselves).
pub(crate) fn single_layer_block(c: &Curves, l: usize, h: f64, kress: &[Vec<f64>]) -> DMatrix<f64> {
    let n = c.len();
    let (ta, tb) = lag_interval(l, h);
    let mut m = DMatrix::zeros(n, n);
    for (ci, pi) in c.parts.iter().enumerate() {
        for (cj, pj) in c.parts.iter().enumerate() {
            let (oi, oj) = (c.offsets[ci], c.offsets[cj]);
            let same = ci == cj;
            for j in 0..pj.len() {
                for i in 0..pi.len() {
                    let r2 = dist2(pi.nodes[i], pj.nodes[j]);
                    let v = if same && l == 0 {
                        let np = pj.len();
                        let d = (i + np - j) % np;
                        let smooth = if i == j {
                            -(pj.speed[j] * pj.speed[j]).ln() - EULER_GAMMA + (4.0 * tb).ln()
                        } else {
                            let s4 = 4.0 * (0.5 * (pi.theta[i] - pj.theta[j])).sin().powi(2);
                            -(r2 / s4).ln() - EULER_GAMMA + (4.0 * tb).ln() + ein(r2 / (4.0 * tb))
                        };
                        (-kress[ci][d] * pj.speed[j] + smooth * pj.weights[j]) / (4.0 * PI)
                    } else if same && i == j {
                        pj.weights[j] * (tb / ta).ln() / (4.0 * PI)
                    } else {
                        pj.weights[j] * single_layer_cell(r2, ta, tb)
                    };
                    m[(oi + i, oj + j)] = v;
                }
            }
        }
    }
    m
}

/// Normal-derivative (adjoint double layer) lag block K'_l, principal value on the curve.
pub(crate) fn adjoint_double_layer_block(c: &Curves, l: usize, h: f64) -> DMatrix<f64> {
    let n = c.len();
    let (ta, tb) = lag_interval(l, h);
    let mut m = DMatrix::zeros(n, n);
    for (ci, pi) in c.parts.iter().enumerate() {
        for (cj, pj) in c.parts.iter().enumerate() {
            let (oi, oj) = (c.offsets[ci], c.offsets[cj]);
            for j in 0..pj.len() {
                for i in 0..pi.len() {
                    let v = if ci == cj && i == j {
                        if l == 0 {
                            -pi.curvature[i] / (4.0 * PI) * pj.weights[j]
                        } else {
                            0.0
                        }
                    } else {
                        let d = sub(pi.nodes[i], pj.nodes[j]);
                        -dot(d, pi.normals[i]) * pj.weights[j] * flux_cell(dot(d, d), ta, tb)
                    };
                    m[(oi + i, oj + j)] = v;
                }
            }
        }
    }
    m
}

/// Lag blocks of V for all fine lags.
pub(crate) fn single_layer_blocks(c: &Curves, nt: usize, h: f64, exec: Exec) -> Vec<DMatrix<f64>> {
    let kress: Vec<Vec<f64>> = c.parts.iter().map(|p| kress_weights(p.len())).collect();
    map_range(exec, nt, |l| single_layer_block(c, l, h, &kress))
}

pub(crate) fn adjoint_double_layer_blocks(c: &Curves, nt: usize, h: f64, exec: Exec) -> Vec<DMatrix<f64>> {
    map_range(exec, nt, |l| adjoint_double_layer_block(c, l, h))
}

/// A solved forward problem on the refined time grid.
#[derive(Clone, Debug)]
pub struct ForwardSolution {
    pub(crate) curves: Curves,
    /// Data grid; the density lives on `grid.refine(refine)`.
    pub grid: TimeGrid,
    pub refine: usize,
    pub field: LayerField,
    /// Prescribed trace at every node and fine midpoint.
    pub trace: DMatrix<f64>,
    /// Normal derivative on the physical side, every node and fine midpoint.
    /// On a cavity curve the normal points into the cavity's exterior.
    pub flux: DMatrix<f64>,
    /// max_k |V sigma - g|_2 / ||g||_2 over the collocation points.
    pub residual: f64,
}

impl ForwardSolution {
    pub fn curve(&self, idx: usize) -> &ParamBoundary {
        &self.curves.parts[idx]
    }
    pub fn n_curves(&self) -> usize {
        self.curves.parts.len()
    }
    pub fn fine_grid(&self) -> TimeGrid {
        self.grid.refine(self.refine)
    }

    /// Cauchy data on curve `idx`, keeping every `stride`-th node and the data-grid midpoints.
    pub fn cauchy(&self, idx: usize, stride: usize) -> Result<CauchyData> {
        let part = &self.curves.parts[idx];
        let boundary = part.subsample(stride)?;
        let off = self.curves.offsets[idx];
        let f = self.refine;
        let n = boundary.len();
        let pick =
            |m: &DMatrix<f64>| DMatrix::from_fn(n, self.grid.nt, |j, k| m[(off + j * stride, coarse_to_fine(k, f))]);
        Ok(CauchyData { boundary, grid: self.grid, dirichlet: pick(&self.trace), neumann: pick(&self.flux) })
    }

    /// Cauchy data on curve `idx` at every node and every fine midpoint.
    pub fn cauchy_fine(&self, idx: usize) -> CauchyData {
        let part = &self.curves.parts[idx];
        let off = self.curves.offsets[idx];
        let nf = self.fine_grid().nt;
        CauchyData {
            boundary: part.clone(),
            grid: self.fine_grid(),
            dirichlet: self.trace.rows(off, part.len()).clone_owned(),
            neumann: self.flux.rows(off, part.len()).clone_owned().columns(0, nf).clone_owned(),
        }
    }
}

/// Solve the heat equation in `omega` minus `cavity` with u = g on the outer curve,
/// u = 0 on the cavity, and zero initial value.
pub fn solve_direct<G>(
    omega: &ParamBoundary,
    cavity: Option<&ParamBoundary>,
    g: G,
    grid: &TimeGrid,
    params: &ForwardParams,
    exec: Exec,
) -> Result<ForwardSolution>
where
    G: Fn(f64, Point, f64) -> f64,
{
    let f = params.refine;
    if f == 0 || f.is_multiple_of(2) {
        return Err(NrtError::Config(format!("time refinement must be odd, got {f}")));
    }
    let mut parts = vec![omega.clone()];
    let mut side = vec![1.0];
    if let Some(d) = cavity {
        if !shape_inclusion(&d.source_shape, &omega.source_shape, 256) {
            return Err(NrtError::Geometry("cavity is not strictly inside the outer domain".into()));
        }
        parts.push(d.clone());
        side.push(-1.0);
    }
    for p in &parts {
        if p.len() % 2 != 0 {
            return Err(NrtError::Config("boundary node counts must be even".into()));
        }
    }
    let curves = Curves::new(parts, side);
    let fine = grid.refine(f);
    let h = fine.dt();
    let n = curves.len();

    let mut trace = DMatrix::zeros(n, fine.nt);
    for k in 0..fine.nt {
        let t = fine.node(k);
        for j in 0..omega.len() {
            trace[(j, k)] = g(omega.theta[j], omega.nodes[j], t);
        }
    }
    if trace.iter().any(|v| !v.is_finite()) {
        return Err(NrtError::Config("boundary data is not finite".into()));
    }

    let v = single_layer_blocks(&curves, fine.nt, h, exec);
    let sigma = toeplitz_march(&v, &trace)?;
    let back = toeplitz_apply(&v, &sigma);
    let gn = trace.norm();
    let residual = if gn > 0.0 { (&back - &trace).norm() / gn } else { back.norm() };
    if !residual.is_finite() || residual > params.residual_tol {
        return Err(NrtError::Numerical(format!("boundary residual {residual:.3e} above tolerance")));
    }
    drop(v);

    let kp = adjoint_double_layer_blocks(&curves, fine.nt, h, exec);
    let mut flux = toeplitz_apply(&kp, &sigma);
    for i in 0..n {
        let (c, _) = curves.locate(i);
        let jump = 0.5 * curves.side[c];
        for k in 0..fine.nt {
            flux[(i, k)] += jump * sigma[(i, k)];
        }
    }

    let field = LayerField {
        nodes: curves.nodes(),
        weights: curves.weights(),
        step: h,
        n_cells: fine.nt,
        density: time_major(&sigma),
    };
    Ok(ForwardSolution { curves, grid: *grid, refine: f, field, trace, flux, residual })
}

/// The background field mu: same boundary data, no cavity.
pub fn solve_background<G>(
    omega: &ParamBoundary,
    g: G,
    grid: &TimeGrid,
    params: &ForwardParams,
    exec: Exec,
) -> Result<ForwardSolution>
where
    G: Fn(f64, Point, f64) -> f64,
{
    solve_direct(omega, None, g, grid, params, exec)
}

/// Value of the represented caloric field at (z, s).
pub fn eval_field(sol: &ForwardSolution, z: Point, s: f64) -> f64 {
    sol.field.value(z, s)
}

/// (h . grad)^m of the field for m = 0..=m_max.
pub fn eval_directional_derivs(sol: &ForwardSolution, z: Point, s: f64, h: Point, m_max: usize) -> Vec<f64> {
    sol.field.directional_derivs(z, s, &[h], m_max).pop().unwrap()
}

/// Shape check used by callers that build both solutions from shapes.
pub fn check_cavity(omega: &RadialShape, cavity: &RadialShape) -> Result<()> {
    if shape_inclusion(cavity, omega, 256) {
        Ok(())
    } else {
        Err(NrtError::Geometry("cavity is not strictly inside the outer domain".into()))
    }
}
