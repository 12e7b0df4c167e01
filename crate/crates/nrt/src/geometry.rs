//! Star-shaped Fourier curves, their discretization, inclusion tests and pixel masks.

use crate::error::{NrtError, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;

pub type Point = [f64; 2];

pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}
pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}
pub fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}
pub fn dist2(a: Point, b: Point) -> f64 {
    let d = sub(a, b);
    d[0] * d[0] + d[1] * d[1]
}

/// Grid size used to certify positivity of r(theta).
const POSITIVITY_GRID: usize = 1024;

/// r(theta) = radius0 * (1 + sum a_k cos(k theta) + b_k sin(k theta)) about `center`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadialShape {
    pub center: Point,
    pub radius0: f64,
    /// `(k, a_k, b_k)` triples.
    #[serde(default)]
    pub terms: Vec<(u32, f64, f64)>,
}

/// Validated constructor.
pub fn make_shape(center: Point, radius0: f64, terms: Vec<(u32, f64, f64)>) -> Result<RadialShape> {
    let s = RadialShape { center, radius0, terms };
    s.validate()?;
    Ok(s)
}

impl RadialShape {
    pub fn circle(center: Point, radius: f64) -> Self {
        RadialShape { center, radius0: radius, terms: vec![] }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius0 > 0.0) || !self.radius0.is_finite() {
            return Err(NrtError::Geometry(format!("radius0 must be positive, got {}", self.radius0)));
        }
        if !self.center.iter().all(|c| c.is_finite()) {
            return Err(NrtError::Geometry("non-finite center".into()));
        }
        let rmin = self.min_radius();
        if !(rmin > 0.0) {
            return Err(NrtError::Geometry(format!("r(theta) reaches {rmin:.3e}; curve degenerates")));
        }
        Ok(())
    }

    fn factor(&self, th: f64, order: u32) -> f64 {
        // d^order/dtheta^order of the bracket
        let mut f = if order == 0 { 1.0 } else { 0.0 };
        for &(k, a, b) in &self.terms {
            let kf = k as f64;
            let (s, c) = (kf * th).sin_cos();
            f += match order {
                0 => a * c + b * s,
                1 => kf * (-a * s + b * c),
                _ => -kf * kf * (a * c + b * s),
            };
        }
        f
    }

    pub fn radius(&self, th: f64) -> f64 {
        self.radius0 * self.factor(th, 0)
    }
    pub fn radius_d1(&self, th: f64) -> f64 {
        self.radius0 * self.factor(th, 1)
    }
    pub fn radius_d2(&self, th: f64) -> f64 {
        self.radius0 * self.factor(th, 2)
    }

    pub fn min_radius(&self) -> f64 {
        (0..POSITIVITY_GRID)
            .map(|j| self.radius(2.0 * PI * j as f64 / POSITIVITY_GRID as f64))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_radius(&self) -> f64 {
        (0..POSITIVITY_GRID)
            .map(|j| self.radius(2.0 * PI * j as f64 / POSITIVITY_GRID as f64))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn point(&self, th: f64) -> Point {
        let r = self.radius(th);
        [self.center[0] + r * th.cos(), self.center[1] + r * th.sin()]
    }

    /// First and second parametric derivatives of the curve.
    pub fn derivs(&self, th: f64) -> (Point, Point) {
        let (s, c) = th.sin_cos();
        let (r, r1, r2) = (self.radius(th), self.radius_d1(th), self.radius_d2(th));
        let d1 = [r1 * c - r * s, r1 * s + r * c];
        let d2 = [r2 * c - 2.0 * r1 * s - r * c, r2 * s + 2.0 * r1 * c - r * s];
        (d1, d2)
    }

    /// Open-set membership: points on the curve are outside.
    pub fn contains(&self, p: Point) -> bool {
        self.radial_margin(p) > 0.0
    }

    /// r(angle of p) - |p - center|; positive inside.
    pub fn radial_margin(&self, p: Point) -> f64 {
        let d = sub(p, self.center);
        let rho = norm(d);
        if rho == 0.0 {
            return self.min_radius();
        }
        self.radius(d[1].atan2(d[0])) - rho
    }

    /// Radial shrink r -> r - eps about the same center.
    pub fn shrink(&self, eps: f64) -> Result<RadialShape> {
        let r0 = self.radius0 - eps;
        if !(r0 > 0.0) {
            return Err(NrtError::Geometry("shrink exceeds radius0".into()));
        }
        let f = self.radius0 / r0;
        let s = RadialShape {
            center: self.center,
            radius0: r0,
            terms: self.terms.iter().map(|&(k, a, b)| (k, a * f, b * f)).collect(),
        };
        s.validate()?;
        Ok(s)
    }

    /// Homothety about the star center.
    pub fn scaled(&self, lambda: f64) -> RadialShape {
        RadialShape { center: self.center, radius0: self.radius0 * lambda, terms: self.terms.clone() }
    }

    /// Distance from `p` to the curve (dense sampling plus local refinement).
    pub fn boundary_distance(&self, p: Point) -> f64 {
        let n = 2048;
        let mut best = (f64::INFINITY, 0.0);
        for j in 0..n {
            let th = 2.0 * PI * j as f64 / n as f64;
            let d = dist2(self.point(th), p);
            if d < best.0 {
                best = (d, th);
            }
        }
        // golden section on the bracketing cell
        let h = 2.0 * PI / n as f64;
        let (mut a, mut b) = (best.1 - h, best.1 + h);
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let f = |t: f64| dist2(self.point(t), p);
        let (mut c, mut d) = (b - g * (b - a), a + g * (b - a));
        for _ in 0..60 {
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
            c = b - g * (b - a);
            d = a + g * (b - a);
        }
        f(0.5 * (a + b)).min(best.0).sqrt()
    }

    /// Area by the polar formula (spectrally accurate).
    pub fn area(&self) -> f64 {
        let n = 1024;
        (0..n).map(|j| self.radius(2.0 * PI * j as f64 / n as f64).powi(2)).sum::<f64>() * PI / n as f64
    }
}

/// Discretized closed curve with everything the layer quadratures need.
#[derive(Clone, Debug)]
pub struct ParamBoundary {
    pub theta: Vec<f64>,
    pub nodes: Vec<Point>,
    /// Unit outward normals.
    pub normals: Vec<Point>,
    /// Arc-length trapezoid weights |x'(theta_j)| 2 pi / n.
    pub weights: Vec<f64>,
    pub speed: Vec<f64>,
    pub curvature: Vec<f64>,
    pub source_shape: RadialShape,
}

pub fn discretize(shape: &RadialShape, n: usize) -> Result<ParamBoundary> {
    if n < 4 {
        return Err(NrtError::Geometry(format!("need at least 4 nodes, got {n}")));
    }
    shape.validate()?;
    let mut b = ParamBoundary {
        theta: Vec::with_capacity(n),
        nodes: Vec::with_capacity(n),
        normals: Vec::with_capacity(n),
        weights: Vec::with_capacity(n),
        speed: Vec::with_capacity(n),
        curvature: Vec::with_capacity(n),
        source_shape: shape.clone(),
    };
    for j in 0..n {
        let th = 2.0 * PI * j as f64 / n as f64;
        let (d1, d2) = shape.derivs(th);
        let sp = norm(d1);
        b.theta.push(th);
        b.nodes.push(shape.point(th));
        b.normals.push([d1[1] / sp, -d1[0] / sp]);
        b.speed.push(sp);
        b.weights.push(sp * 2.0 * PI / n as f64);
        b.curvature.push((d1[0] * d2[1] - d1[1] * d2[0]) / sp.powi(3));
    }
    Ok(b)
}

impl ParamBoundary {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
    pub fn length(&self) -> f64 {
        self.weights.iter().sum()
    }
    /// Every `stride`-th node, keeping weights consistent with the coarser rule.
    pub fn subsample(&self, stride: usize) -> Result<ParamBoundary> {
        if stride == 0 || !self.len().is_multiple_of(stride) {
            return Err(NrtError::Config(format!("cannot subsample {} nodes by {stride}", self.len())));
        }
        discretize(&self.source_shape, self.len() / stride)
    }
}

/// Minimum of r_outer - |p - c| over `nprobe` samples of the inner curve.
pub fn inclusion_clearance(inner: &RadialShape, outer: &RadialShape, nprobe: usize) -> f64 {
    (0..nprobe)
        .map(|j| outer.radial_margin(inner.point(2.0 * PI * j as f64 / nprobe as f64)))
        .fold(f64::INFINITY, f64::min)
}

/// True when every sampled point of `inner` lies strictly inside `outer`.
pub fn shape_inclusion(inner: &RadialShape, outer: &RadialShape, nprobe: usize) -> bool {
    let nprobe = nprobe.max(64);
    inclusion_clearance(inner, outer, nprobe) > 1e-12 * outer.radius0
}

/// Radial function of `shape` as seen from another star center (ray intersection).
fn radius_about(shape: &RadialShape, center: Point, th: f64) -> Result<f64> {
    let dir = [th.cos(), th.sin()];
    // march out until outside, then bisect
    let mut hi = 1e-6;
    let p = |t: f64| [center[0] + t * dir[0], center[1] + t * dir[1]];
    if !shape.contains(center) {
        return Err(NrtError::Geometry("new star center lies outside the shape".into()));
    }
    while shape.contains(p(hi)) {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(NrtError::Geometry("ray does not leave shape".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if shape.contains(p(mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Re-express `shape` as a radial function about `center` with `modes` Fourier modes.
pub fn recenter(shape: &RadialShape, center: Point, modes: usize) -> Result<RadialShape> {
    if shape.center == center {
        return Ok(shape.clone());
    }
    let n = 4 * modes.max(8);
    let r: Vec<f64> =
        (0..n).map(|j| radius_about(shape, center, 2.0 * PI * j as f64 / n as f64)).collect::<Result<_>>()?;
    let r0 = r.iter().sum::<f64>() / n as f64;
    let mut terms = Vec::new();
    for k in 1..=modes {
        let (mut a, mut b) = (0.0, 0.0);
        for (j, rj) in r.iter().enumerate() {
            let th = 2.0 * PI * (j * k) as f64 / n as f64;
            a += rj * th.cos();
            b += rj * th.sin();
        }
        let (a, b) = (2.0 * a / n as f64 / r0, 2.0 * b / n as f64 / r0);
        if a.abs() > 1e-14 || b.abs() > 1e-14 {
            terms.push((k as u32, a, b));
        }
    }
    make_shape(center, r0, terms)
}

/// Linear interpolation of radial functions from `outer` (element 0) to `inner` (last).
pub fn homotopy_family(outer: &RadialShape, inner: &RadialShape, steps: usize) -> Result<Vec<RadialShape>> {
    if steps < 2 {
        return Err(NrtError::Config("homotopy needs at least 2 steps".into()));
    }
    let inner = recenter(inner, outer.center, 32)?;
    for j in 0..POSITIVITY_GRID {
        let th = 2.0 * PI * j as f64 / POSITIVITY_GRID as f64;
        if inner.radius(th) >= outer.radius(th) {
            return Err(NrtError::Geometry("homotopy endpoints are not nested".into()));
        }
    }
    let mut ks: Vec<u32> = outer.terms.iter().chain(&inner.terms).map(|t| t.0).collect();
    ks.sort_unstable();
    ks.dedup();
    let coef = |s: &RadialShape, k: u32| -> (f64, f64) {
        s.terms.iter().filter(|t| t.0 == k).fold((0.0, 0.0), |acc, t| (acc.0 + t.1, acc.1 + t.2))
    };
    let mut out = Vec::with_capacity(steps);
    for i in 0..steps {
        if i == 0 {
            out.push(outer.clone());
            continue;
        }
        if i == steps - 1 {
            out.push(inner.clone());
            continue;
        }
        let l = i as f64 / (steps - 1) as f64;
        let r0 = (1.0 - l) * outer.radius0 + l * inner.radius0;
        let terms = ks
            .iter()
            .map(|&k| {
                let (ao, bo) = coef(outer, k);
                let (ai, bi) = coef(&inner, k);
                let a = ((1.0 - l) * outer.radius0 * ao + l * inner.radius0 * ai) / r0;
                let b = ((1.0 - l) * outer.radius0 * bo + l * inner.radius0 * bi) / r0;
                (k, a, b)
            })
            .collect();
        out.push(make_shape(outer.center, r0, terms)?);
    }
    Ok(out)
}

/// Axis-aligned pixel lattice; row 0 is the bottom row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// `[xmin, xmax, ymin, ymax]`
    pub bbox: [f64; 4],
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn new(bbox: [f64; 4], nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || !(bbox[1] > bbox[0]) || !(bbox[3] > bbox[2]) {
            return Err(NrtError::Config("pixel grid needs positive size".into()));
        }
        Ok(GridSpec { bbox, nx, ny })
    }
    pub fn center(&self, i: usize, j: usize) -> Point {
        let dx = (self.bbox[1] - self.bbox[0]) / self.nx as f64;
        let dy = (self.bbox[3] - self.bbox[2]) / self.ny as f64;
        [self.bbox[0] + (i as f64 + 0.5) * dx, self.bbox[2] + (j as f64 + 0.5) * dy]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelGrid {
    pub spec: GridSpec,
    /// Row-major from the bottom row, `values[j * nx + i]`.
    pub values: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Intersect,
    Union,
}

pub fn mask_from_shapes(shapes: &[RadialShape], spec: &GridSpec, mode: MaskMode) -> Result<PixelGrid> {
    if shapes.is_empty() {
        return Err(NrtError::Config("mask needs at least one shape".into()));
    }
    let mut values = vec![0u32; spec.nx * spec.ny];
    for j in 0..spec.ny {
        for i in 0..spec.nx {
            let p = spec.center(i, j);
            let inside = match mode {
                MaskMode::Intersect => shapes.iter().all(|s| s.contains(p)),
                MaskMode::Union => shapes.iter().any(|s| s.contains(p)),
            };
            values[j * spec.nx + i] = inside as u32;
        }
    }
    Ok(PixelGrid { spec: spec.clone(), values })
}

impl PixelGrid {
    pub fn empty(spec: &GridSpec) -> Self {
        PixelGrid { spec: spec.clone(), values: vec![0; spec.nx * spec.ny] }
    }
    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0).count()
    }

    /// Binary PGM, 255 marks inside; top image row is the largest y.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let (nx, ny) = (self.spec.nx, self.spec.ny);
        write!(w, "P5\n{nx} {ny}\n255\n")?;
        let mut buf = Vec::with_capacity(nx * ny);
        for j in (0..ny).rev() {
            for i in 0..nx {
                buf.push(if self.values[j * nx + i] > 0 { 255u8 } else { 0 });
            }
        }
        w.write_all(&buf)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let (nx, ny) = (self.spec.nx, self.spec.ny);
        for j in (0..ny).rev() {
            let row: Vec<&str> = (0..nx).map(|i| if self.values[j * nx + i] > 0 { "1" } else { "0" }).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// |a and b| / |a or b|, 1 when both are empty.
pub fn jaccard(a: &PixelGrid, b: &PixelGrid) -> Result<f64> {
    if a.spec != b.spec {
        return Err(NrtError::Config("jaccard on mismatched grids".into()));
    }
    let (mut inter, mut uni) = (0usize, 0usize);
    for (x, y) in a.values.iter().zip(&b.values) {
        let (x, y) = (*x > 0, *y > 0);
        inter += (x && y) as usize;
        uni += (x || y) as usize;
    }
    Ok(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_circle_four_nodes() {
        let b = discretize(&RadialShape::circle([0.0, 0.0], 1.0), 4).unwrap();
        let want = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
        for j in 0..4 {
            assert!(norm(sub(b.nodes[j], want[j])) < 1e-15);
            assert!(norm(sub(b.normals[j], want[j])) < 1e-15);
            assert!((b.weights[j] - PI / 2.0).abs() < 1e-12);
            assert!((b.curvature[j] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn peanut_radius_range() {
        let s = make_shape([0.0, 0.0], 0.3, vec![(2, -0.4, 0.0)]).unwrap();
        assert!((s.min_radius() - 0.18).abs() < 1e-12);
        assert!((s.max_radius() - 0.42).abs() < 1e-12);
    }

    #[test]
    fn degenerate_rejected() {
        assert!(make_shape([0.0, 0.0], 1.0, vec![(3, 1.2, 0.0)]).is_err());
        assert!(make_shape([0.0, 0.0], 0.0, vec![]).is_err());
    }
}
