//! Run configuration, command line front end, and artifact files.
//!
//! Every numeric value written to disk carries 17 significant digits, so files
//! round-trip bit for bit.

use crate::boundary_operators::{DenseOperator, OperatorParams, QuadMeta};
use crate::error::{NrtError, Result};
use crate::extension_probe::{blowup_points, norm_region, probe_synthetic, taylor_blowup_map, wtilde_field, ProbeSpec};
use crate::forward_solver::{weighted_norm, BoundaryData, CauchyData, ForwardParams, TimeGrid};
use crate::geometry::{discretize, shape_inclusion, GridSpec, ParamBoundary, Point, RadialShape};
use crate::nrt_indicator::{
    default_alphas, ellipsoid_sup_oracle, path_from_spectrum, spectral_data, sup_form, tikhonov_limit, SLOPE_WINDOW,
};
use crate::par::Exec;
use crate::scan_recon::{run_scan, synthesize, FamilySpec};
use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

pub const CACHE_ENV: &str = "NRT_CACHE_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub grid: GridConfig,
    pub boundary_data: BoundaryData,
    pub solver: SolverConfig,
    pub indicator: IndicatorConfig,
    pub noise: NoiseConfig,
    /// Pixel lattice of the reconstruction mask.
    pub mask: GridSpec,
    pub probe: ProbeConfig,
    pub duality: DualityConfig,
    pub output_dir: String,
    /// Operator cache; the NRT_CACHE_DIR environment variable takes precedence.
    pub cache_dir: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub omega: RadialShape,
    pub cavity: Option<RadialShape>,
    pub family: FamilySpec,
    /// Minimum gap between a test domain and the outer boundary.
    pub clearance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub t_final: f64,
    pub nt: usize,
    /// Nodes on the outer curve used by the inversion operators.
    pub n_omega: usize,
    /// Nodes on the cavity curve at inversion resolution.
    pub n_cavity: usize,
    /// Data are synthesized on curves refined by this factor.
    pub data_factor: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub forward: ForwardParams,
    pub operator: OperatorParams,
    /// Relative singular value cutoff of the sup form.
    pub svd_cutoff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndicatorConfig {
    /// Regularization parameters relative to the largest squared singular value;
    /// `None` means `n_alphas` halvings from 1e-2.
    pub alphas: Option<Vec<f64>>,
    pub n_alphas: usize,
    pub slope_pos: f64,
    pub slope_neg: f64,
    /// theta = theta_factor * median plateau of the flat paths.
    pub theta_factor: f64,
    pub big_factor: f64,
    pub morozov_tau: f64,
    pub unresolved_threshold: f64,
    pub c_norm: f64,
    pub rho: f64,
    /// Collar width of the probe norm region.
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Relative flux noise level.
    pub delta: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeField {
    /// The synthetic field w from the forward solve.
    W,
    /// Its continuation from the Cauchy data on the outer boundary.
    WTilde,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Test domain removed from the map and used for the probe norm.
    pub g: RadialShape,
    pub field: ProbeField,
    pub grid: GridSpec,
    pub times: Vec<f64>,
    pub m_max: usize,
    pub ndirs: usize,
    /// Order and direction of the probe functional sampled at every map point.
    pub m: usize,
    pub h: Point,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualityConfig {
    pub size: usize,
    pub cases: usize,
    pub seed: u64,
}

/// Test disks of the standard scan: twelve contain the cavity, twelve miss it.
pub fn standard_family() -> Vec<RadialShape> {
    let c = |x: f64, y: f64, r: f64| RadialShape::circle([x, y], r);
    vec![
        c(0.3, 0.0, 0.3),
        c(0.3, 0.0, 0.35),
        c(0.3, 0.0, 0.45),
        c(0.3, 0.0, 0.55),
        c(0.25, 0.05, 0.4),
        c(0.35, -0.05, 0.4),
        c(0.2, 0.0, 0.45),
        c(0.3, 0.1, 0.45),
        c(0.4, 0.0, 0.4),
        c(0.1, 0.0, 0.55),
        c(0.3, -0.15, 0.45),
        c(0.2, 0.1, 0.45),
        c(-0.4, 0.0, 0.3),
        c(0.0, -0.5, 0.3),
        c(0.0, 0.5, 0.3),
        c(-0.5, 0.4, 0.25),
        c(-0.5, -0.4, 0.25),
        c(0.3, 0.45, 0.3),
        c(0.3, -0.45, 0.3),
        c(-0.1, 0.0, 0.3),
        c(0.6, 0.3, 0.2),
        c(0.6, -0.3, 0.2),
        c(-0.3, 0.3, 0.35),
        c(0.0, 0.0, 0.25),
    ]
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            omega: RadialShape::circle([0.0, 0.0], 1.0),
            cavity: Some(RadialShape::circle([0.3, 0.0], 0.25)),
            family: FamilySpec::Custom { shapes: standard_family() },
            clearance: 0.05,
        }
    }
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { t_final: 1.0, nt: 32, n_omega: 64, n_cavity: 32, data_factor: 2 }
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { forward: ForwardParams::default(), operator: OperatorParams::default(), svd_cutoff: 1e-8 }
    }
}

impl Default for IndicatorConfig {
    fn default() -> Self {
        IndicatorConfig {
            alphas: None,
            n_alphas: 24,
            slope_pos: -0.05,
            slope_neg: -0.07,
            theta_factor: 3.0,
            big_factor: 10.0,
            morozov_tau: 1.0,
            unresolved_threshold: 1e-2,
            c_norm: 1.0,
            rho: 0.3,
            eps: 0.05,
        }
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { delta: 0.0, seed: 20240607 }
    }
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            g: RadialShape::circle([-0.45, 0.0], 0.15),
            field: ProbeField::W,
            grid: GridSpec { bbox: [-1.0, 1.0, -1.0, 1.0], nx: 16, ny: 16 },
            times: vec![0.5, 1.0],
            m_max: 60,
            ndirs: 8,
            m: 0,
            h: [1.0, 0.0],
        }
    }
}

impl Default for DualityConfig {
    fn default() -> Self {
        DualityConfig { size: 20, cases: 10, seed: 7 }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            geometry: GeometryConfig::default(),
            grid: GridConfig::default(),
            boundary_data: BoundaryData::Ramp {},
            solver: SolverConfig::default(),
            indicator: IndicatorConfig::default(),
            noise: NoiseConfig::default(),
            mask: GridSpec { bbox: [-1.0, 1.0, -1.0, 1.0], nx: 64, ny: 64 },
            probe: ProbeConfig::default(),
            duality: DualityConfig::default(),
            output_dir: "nrt_out".into(),
            cache_dir: None,
        }
    }
}

fn cfg_err(msg: &str) -> NrtError {
    NrtError::Config(msg.into())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| NrtError::Config(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| NrtError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Range checks that the schema expresses as minimum/maximum constraints, plus the
    /// geometric ones it cannot.
    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if !(g.t_final > 0.0) || g.nt < 2 || g.n_omega < 8 || g.n_cavity < 8 || g.data_factor < 1 {
            return Err(cfg_err("grid: need t_final > 0, nt >= 2, n_omega and n_cavity >= 8, data_factor >= 1"));
        }
        let s = &self.solver;
        if s.forward.refine.is_multiple_of(2) || s.operator.correction_refine.is_multiple_of(2) {
            return Err(cfg_err("solver: refinement factors must be odd"));
        }
        if s.operator.n_g < 8 || !(s.operator.trace_tol > 0.0) || !(s.forward.residual_tol > 0.0) {
            return Err(cfg_err("solver: n_g >= 8 and positive tolerances required"));
        }
        if !(s.svd_cutoff > 0.0 && s.svd_cutoff < 1.0) {
            return Err(cfg_err("solver: svd_cutoff must lie in (0,1)"));
        }
        let ind = &self.indicator;
        let alphas = self.alphas();
        if alphas.len() < SLOPE_WINDOW + 1
            || alphas.iter().any(|a| !(*a > 0.0))
            || alphas.windows(2).any(|w| w[1] >= w[0])
        {
            return Err(cfg_err("indicator: alphas must be positive, strictly decreasing, and at least 5"));
        }
        if !(ind.slope_neg <= ind.slope_pos && ind.slope_pos < 0.0) {
            return Err(cfg_err("indicator: need slope_neg <= slope_pos < 0"));
        }
        if !(ind.theta_factor > 1.0 && ind.big_factor > 1.0 && ind.morozov_tau > 0.0) {
            return Err(cfg_err("indicator: theta_factor and big_factor must exceed 1, morozov_tau > 0"));
        }
        if !(ind.unresolved_threshold > 0.0 && ind.c_norm > 0.0 && ind.rho > 0.0 && ind.eps > 0.0) {
            return Err(cfg_err("indicator: unresolved_threshold, c_norm, rho and eps must be positive"));
        }
        if !(self.noise.delta >= 0.0 && self.noise.delta < 1.0) {
            return Err(cfg_err("noise: delta must lie in [0,1)"));
        }
        GridSpec::new(self.mask.bbox, self.mask.nx, self.mask.ny)?;
        let geo = &self.geometry;
        geo.omega.validate()?;
        if !(geo.clearance > 0.0) {
            return Err(cfg_err("geometry: clearance must be positive"));
        }
        if let Some(d) = &geo.cavity {
            d.validate()?;
            if !shape_inclusion(d, &geo.omega.shrink(geo.clearance)?, 256) {
                return Err(NrtError::Geometry("cavity is not inside the outer domain".into()));
            }
        }
        let p = &self.probe;
        GridSpec::new(p.grid.bbox, p.grid.nx, p.grid.ny)?;
        if p.m_max > 60 || p.ndirs < 8 || p.m > p.m_max {
            return Err(cfg_err("probe: need m <= m_max <= 60 and ndirs >= 8"));
        }
        if ((p.h[0].hypot(p.h[1])) - 1.0).abs() > 1e-9 {
            return Err(cfg_err("probe: h must be a unit vector"));
        }
        if p.times.is_empty() || p.times.iter().any(|t| !(*t > 0.0 && *t <= g.t_final)) {
            return Err(cfg_err("probe: times must lie in (0, t_final]"));
        }
        p.g.validate()?;
        if self.duality.size < 2 || self.duality.cases == 0 {
            return Err(cfg_err("duality: size >= 2 and cases >= 1"));
        }
        self.boundary_data.validate()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.indicator.alphas.clone().unwrap_or_else(|| default_alphas(self.indicator.n_alphas))
    }

    pub fn forward_params(&self) -> ForwardParams {
        self.solver.forward
    }

    pub fn operator_params(&self) -> OperatorParams {
        self.solver.operator
    }

    pub fn to_json(&self) -> String {
        to_json_17(self)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        hex16(self.to_json().as_bytes())
    }
}

fn hex16(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().take(8).fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Pretty JSON formatter printing every float with 17 significant digits.
struct Sig17 {
    inner: serde_json::ser::PrettyFormatter<'static>,
}

impl serde_json::ser::Formatter for Sig17 {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        w.write_all(fmt17(v).as_bytes())
    }
    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, v: f32) -> io::Result<()> {
        self.write_f64(w, v as f64)
    }
    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object_value(w)
    }
}

/// `{:.16e}`; non-finite values have no JSON form and are written as null.
pub fn fmt17(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        "null".into()
    }
}

pub fn to_json_17<T: Serialize + ?Sized>(v: &T) -> String {
    let mut out = Vec::new();
    let mut ser =
        serde_json::Serializer::with_formatter(&mut out, Sig17 { inner: serde_json::ser::PrettyFormatter::new() });
    v.serialize(&mut ser).expect("in-memory serialization");
    String::from_utf8(out).expect("serde_json writes utf-8")
}

pub fn write_f64_le(path: &Path, data: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_f64_le(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(NrtError::Format(format!("{} is not a whole number of f64 values", path.display())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CacheSidecar {
    key: String,
    shape: RadialShape,
    n_omega: usize,
    n_g: usize,
    grid: TimeGrid,
    rows: usize,
    cols: usize,
    trace_residual: f64,
    layout: String,
}

const CACHE_LAYOUT: &str = "first block column of a block lower-triangular Toeplitz operator, column-major";

/// Operators R keyed by a hash of everything they depend on. Only the first block column
/// is stored; the rest follows from time-translation invariance.
#[derive(Clone, Debug)]
pub struct OpCache {
    pub dir: PathBuf,
}

impl OpCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(OpCache { dir })
    }

    /// NRT_CACHE_DIR first, then the configured directory.
    pub fn resolve(cfg: &RunConfig) -> Result<Option<Self>> {
        match std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()) {
            Some(d) => Ok(Some(Self::new(PathBuf::from(d))?)),
            None => cfg.cache_dir.as_ref().map(Self::new).transpose(),
        }
    }

    pub fn key(shape: &RadialShape, ob: &ParamBoundary, grid: &TimeGrid, params: &OperatorParams) -> String {
        let ident = (shape, &ob.source_shape, ob.len(), grid, params, CACHE_LAYOUT);
        hex16(to_json_17(&ident).as_bytes())
    }

    fn paths(&self, key: &str) -> (PathBuf, PathBuf) {
        (self.dir.join(format!("r_{key}.f64")), self.dir.join(format!("r_{key}.json")))
    }

    pub fn load_r(
        &self,
        key: &str,
        shape: &RadialShape,
        ob: &ParamBoundary,
        grid: &TimeGrid,
        params: &OperatorParams,
    ) -> Result<Option<(DenseOperator, f64)>> {
        let (bin, side) = self.paths(key);
        if !bin.exists() || !side.exists() {
            return Ok(None);
        }
        let meta: CacheSidecar = serde_json::from_str(&fs::read_to_string(&side)?)?;
        let (no, nt, ng) = (ob.len(), grid.nt, params.n_g);
        if meta.key != key || meta.shape != *shape || meta.rows != no * nt || meta.cols != ng || meta.grid != *grid {
            return Ok(None);
        }
        let data = read_f64_le(&bin)?;
        if data.len() != meta.rows * meta.cols {
            return Err(NrtError::Format(format!("cache entry {key} is truncated")));
        }
        let col = DMatrix::from_column_slice(no * nt, ng, &data);
        let mut e = DMatrix::zeros(no * nt, ng * nt);
        for m in 0..nt {
            let h = (nt - m) * no;
            e.view_mut((m * no, m * ng), (h, ng)).copy_from(&col.view((0, 0), (h, ng)));
        }
        let gb = discretize(shape, ng)?;
        let op = DenseOperator {
            entries: e,
            source: QuadMeta::from_boundary(&gb, grid),
            target: QuadMeta::from_boundary(ob, grid),
        };
        Ok(Some((op, meta.trace_residual)))
    }

    pub fn store_r(&self, key: &str, shape: &RadialShape, op: &DenseOperator, trace_residual: f64) -> Result<()> {
        let (bin, side) = self.paths(key);
        let (rows, ng) = (op.entries.nrows(), op.source.nodes.len());
        let col = op.entries.columns(0, ng).into_owned();
        // write to temporaries and rename so concurrent readers never see half an entry
        let tmp_bin = bin.with_extension(format!("f64.{}", std::process::id()));
        write_f64_le(&tmp_bin, col.as_slice())?;
        fs::rename(&tmp_bin, &bin)?;
        let meta = CacheSidecar {
            key: key.into(),
            shape: shape.clone(),
            n_omega: op.target.nodes.len(),
            n_g: ng,
            grid: op.source.grid,
            rows,
            cols: ng,
            trace_residual,
            layout: CACHE_LAYOUT.into(),
        };
        let tmp_side = side.with_extension(format!("json.{}", std::process::id()));
        fs::write(&tmp_side, to_json_17(&meta))?;
        fs::rename(&tmp_side, &side)?;
        Ok(())
    }
}

fn write_cauchy_csv(path: &Path, data: &DMatrix<f64>, b: &ParamBoundary, grid: &TimeGrid) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "node,theta,x,y,t,value")?;
    for (k, t) in grid.nodes().iter().enumerate() {
        for i in 0..b.len() {
            writeln!(
                w,
                "{i},{},{},{},{},{}",
                fmt17(b.theta[i]),
                fmt17(b.nodes[i][0]),
                fmt17(b.nodes[i][1]),
                fmt17(*t),
                fmt17(data[(i, k)])
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ForwardMeta {
    config_hash: String,
    n_nodes: usize,
    nt: usize,
    t_final: f64,
    data_factor: usize,
    forward_residual_u: f64,
    forward_residual_mu: f64,
    flux_norm: f64,
    delta: f64,
    noise_level: f64,
    files: [&'static str; 2],
}

/// Measured Cauchy data of u (flux noise applied when delta > 0).
pub fn cmd_forward(cfg: &RunConfig, out: &Path, exec: Exec) -> Result<()> {
    let syn = synthesize(cfg, exec)?;
    let u = if cfg.noise.delta > 0.0 {
        crate::forward_solver::add_flux_noise(&syn.cauchy_u, cfg.noise.delta, cfg.noise.seed)
    } else {
        syn.cauchy_u.clone()
    };
    let CauchyData { boundary, grid, dirichlet, neumann } = &u;
    let flux_norm = weighted_norm(&syn.cauchy_u.neumann, boundary, grid);
    fs::create_dir_all(out)?;
    write_cauchy_csv(&out.join("dirichlet.csv"), dirichlet, boundary, grid)?;
    write_cauchy_csv(&out.join("neumann.csv"), neumann, boundary, grid)?;
    let meta = ForwardMeta {
        config_hash: cfg.hash(),
        n_nodes: boundary.len(),
        nt: grid.nt,
        t_final: grid.t_final,
        data_factor: cfg.grid.data_factor,
        forward_residual_u: syn.u.residual,
        forward_residual_mu: syn.mu.residual,
        flux_norm,
        delta: cfg.noise.delta,
        noise_level: cfg.noise.delta * flux_norm,
        files: ["dirichlet.csv", "neumann.csv"],
    };
    fs::write(out.join("meta.json"), to_json_17(&meta))?;
    Ok(())
}

pub fn cmd_scan(cfg: &RunConfig, out: &Path, exec: Exec) -> Result<crate::scan_recon::Metrics> {
    let cache = OpCache::resolve(cfg)?;
    let res = run_scan(cfg, cache.as_ref(), exec)?;
    res.write_dir(out)?;
    Ok(res.metrics)
}

#[derive(Serialize)]
struct BlowupSidecar {
    config_hash: String,
    field: ProbeField,
    rho: f64,
    eps: f64,
    m_max: usize,
    ndirs: usize,
    probe_m: usize,
    probe_h: Point,
    times: Vec<f64>,
    n_points: usize,
    pgm_min: f64,
    pgm_max: f64,
    pgm_scale: &'static str,
}

/// Taylor-coefficient map over the outer domain shrunk by rho minus G, with synthetic
/// probe magnitudes |I - I~| at every sample.
pub fn cmd_probe(cfg: &RunConfig, out: &Path, exec: Exec) -> Result<()> {
    let syn = synthesize(cfg, exec)?;
    let pc = &cfg.probe;
    let ind = &cfg.indicator;
    let w = syn.u.field.combine(&syn.mu.field, -1.0);
    let wt = wtilde_field(&syn.cauchy_w);
    let (points, idx) = blowup_points(&cfg.geometry.omega, &pc.g, ind.rho, &pc.grid)?;
    if points.is_empty() {
        return Err(cfg_err("probe: no sample points outside G at distance rho from the outer boundary"));
    }
    let field = match pc.field {
        ProbeField::W => &w,
        ProbeField::WTilde => &wt,
    };
    let mut map = taylor_blowup_map(field, &points, &pc.times, ind.rho, pc.m_max, pc.ndirs, exec)?;
    let region = norm_region(&pc.g, &cfg.geometry.omega, ind.eps)?;
    let vals: Vec<Result<Vec<f64>>> = crate::par::map_range(exec, points.len(), |i| {
        pc.times
            .iter()
            .map(|&s| {
                let spec = ProbeSpec::new(points[i], s, pc.h, pc.m, &region)?;
                probe_synthetic(&spec, &w, &wt, ind.c_norm)
            })
            .collect()
    });
    for v in vals {
        map.probe_value.extend(v?);
    }
    map.eps = ind.eps;
    map.layout = Some((pc.grid.clone(), idx));
    fs::create_dir_all(out)?;
    map.write_csv(BufWriter::new(fs::File::create(out.join("blowup.csv"))?))?;
    let (lo, hi) = map.write_pgm(BufWriter::new(fs::File::create(out.join("blowup.pgm"))?))?;
    let side = BlowupSidecar {
        config_hash: cfg.hash(),
        field: pc.field,
        rho: ind.rho,
        eps: ind.eps,
        m_max: pc.m_max,
        ndirs: pc.ndirs,
        probe_m: pc.m,
        probe_h: pc.h,
        times: pc.times.clone(),
        n_points: points.len(),
        pgm_min: lo,
        pgm_max: hi,
        pgm_scale: "gray = 255 (ln P - pgm_min) / (pgm_max - pgm_min), max over times; 0 outside the sample region",
    };
    fs::write(out.join("blowup.json"), to_json_17(&side))?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DualityCase {
    pub sup_form: f64,
    pub tikhonov_limit: f64,
    pub oracle: f64,
    pub rel_gap: f64,
    pub oracle_rel_gap: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DualityReport {
    pub size: usize,
    pub cases: Vec<DualityCase>,
    pub max_rel_gap: f64,
    pub max_oracle_rel_gap: f64,
}

/// Random orthogonal matrix from the QR factor of a Gaussian matrix.
fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    g.qr().q()
}

/// Sup form against the alpha -> 0 Tikhonov limit and the direct ellipsoid oracle on
/// synthetic operators with singular values spread over two decades and b in the range.
pub fn duality_check(size: usize, cases: usize, seed: u64) -> Result<DualityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // relative alphas small enough that the Richardson step lands on the limit
    let alphas: Vec<f64> = (0..24).map(|k| 1e-6 * 0.5f64.powi(k)).collect();
    let mut out = Vec::with_capacity(cases);
    for _ in 0..cases {
        let u = random_orthogonal(size, &mut rng);
        let v = random_orthogonal(size, &mut rng);
        let s = DVector::from_fn(size, |i, _| 10f64.powf(-2.0 * i as f64 / (size - 1) as f64));
        let a = &u * DMatrix::from_diagonal(&s) * v.transpose();
        let y = DVector::from_fn(size, |_, _| StandardNormal.sample(&mut rng));
        let b = &a * y;
        let spec = spectral_data(a.clone(), vec![1.0; size])?;
        let proj = spec.project(b.as_slice())?;
        let path = path_from_spectrum(&spec, &proj, &alphas)?;
        let sf = sup_form(&spec, &proj, 1e-12, 1e-2)?;
        let lim = tikhonov_limit(&path);
        let oracle = ellipsoid_sup_oracle(&a, &b, 20000)?;
        out.push(DualityCase {
            sup_form: sf.value,
            tikhonov_limit: lim,
            oracle,
            rel_gap: (sf.value - lim).abs() / sf.value,
            oracle_rel_gap: (sf.value - oracle).abs() / sf.value,
        });
    }
    let max_rel_gap = out.iter().map(|c| c.rel_gap).fold(0.0, f64::max);
    let max_oracle_rel_gap = out.iter().map(|c| c.oracle_rel_gap).fold(0.0, f64::max);
    Ok(DualityReport { size, cases: out, max_rel_gap, max_oracle_rel_gap })
}

pub fn cmd_duality(cfg: &RunConfig, out: &Path) -> Result<DualityReport> {
    let d = &cfg.duality;
    let rep = duality_check(d.size, d.cases, d.seed)?;
    if !(rep.max_rel_gap.is_finite()) {
        return Err(NrtError::Numerical("duality check produced non-finite gaps".into()));
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("duality.json"), to_json_17(&rep))?;
    Ok(rep)
}

/// Markdown summary of a scan directory plus `paths.dat` (gnuplot blocks, one per domain).
/// Numbers that also appear in metrics.json are copied as written there.
pub fn report(dir: &Path) -> Result<String> {
    let bad = |m: &str| NrtError::Format(format!("{}: {m}", dir.display()));
    let read = |name: &str| fs::read_to_string(dir.join(name)).map_err(|e| bad(&format!("{name}: {e}")));
    let metrics: serde_json::Value = serde_json::from_str(&read("metrics.json")?).map_err(|e| bad(&e.to_string()))?;
    let m = metrics.as_object().ok_or_else(|| bad("metrics.json is not an object"))?;
    let field = |k: &str| -> Result<String> {
        let v = m.get(k).ok_or_else(|| bad(&format!("metrics.json lacks {k}")))?;
        Ok(match v {
            serde_json::Value::Number(n) if n.is_f64() => fmt17(n.as_f64().unwrap()),
            serde_json::Value::Null => "n/a".into(),
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        })
    };
    let verdicts = read("verdicts.csv")?;
    let mut lines = verdicts.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| bad("verdicts.csv is empty"))?.split(',').collect();
    let col =
        |name: &str| header.iter().position(|h| *h == name).ok_or_else(|| bad(&format!("verdicts.csv lacks {name}")));
    let (ci, cx, cy, cr, cv, cs, cp) = (
        col("index")?,
        col("center_x")?,
        col("center_y")?,
        col("radius0")?,
        col("verdict")?,
        col("slope")?,
        col("plateau")?,
    );
    let mut md = String::new();
    let _ = writeln!(md, "# NRT scan report\n");
    let degenerate =
        m.get("degenerate").and_then(|v| v.as_bool()).ok_or_else(|| bad("metrics.json lacks degenerate"))?;
    if degenerate {
        let _ = writeln!(
            md,
            "**Degenerate scan:** no test domain was classified positive, so the scan gives no bound \
             and the reconstruction is the whole outer domain.\n"
        );
    }
    let _ = writeln!(md, "| quantity | value |\n|---|---|");
    for k in [
        "n_domains",
        "n_positive",
        "n_negative",
        "n_uncertain",
        "n_failed",
        "separation_ratio",
        "jaccard",
        "theta",
        "delta",
        "noise_level",
        "recon_pixels",
        "truth_pixels",
        "config_hash",
    ] {
        let _ = writeln!(md, "| {k} | {} |", field(k)?);
    }
    let _ = writeln!(
        md,
        "\n## Verdicts\n\n| index | center | radius0 | verdict | slope | plateau |\n|---|---|---|---|---|---|"
    );
    let mut dat = String::new();
    let mut rows = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != header.len() {
            return Err(bad("verdicts.csv has a ragged row"));
        }
        rows += 1;
        let _ = writeln!(md, "| {} | ({}, {}) | {} | {} | {} | {} |", f[ci], f[cx], f[cy], f[cr], f[cv], f[cs], f[cp]);
        let idx: usize = f[ci].parse().map_err(|_| bad("bad index in verdicts.csv"))?;
        let p = dir.join("paths").join(format!("domain_{idx:03}.csv"));
        if let Ok(text) = fs::read_to_string(&p) {
            let _ = writeln!(dat, "# domain {idx} verdict {}\n# alpha solution_norm residual", f[cv]);
            for l in text.lines().skip(1) {
                let _ = writeln!(dat, "{}", l.replace(',', " "));
            }
            dat.push_str("\n\n");
        }
    }
    let n_domains = m.get("n_domains").and_then(|v| v.as_u64()).ok_or_else(|| bad("metrics.json lacks n_domains"))?;
    if rows as u64 != n_domains {
        return Err(bad("verdicts.csv and metrics.json disagree on the domain count"));
    }
    let _ = writeln!(md, "\nIndicator paths for gnuplot: `paths.dat` (one block per domain; `plot 'paths.dat' index i using 1:2 with lines`, log axes).");
    fs::write(dir.join("paths.dat"), &dat)?;
    fs::write(dir.join("report.md"), &md)?;
    Ok(md)
}

#[derive(Parser, Debug)]
#[command(name = "nrt", version, about = "No-response test for a cavity in a 2D heat conductor")]
pub struct Cli {
    /// Run every stage on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize Cauchy data: dirichlet.csv, neumann.csv, meta.json.
    Forward(RunArgs),
    /// Scan the test-domain family and write a result directory.
    Scan(RunArgs),
    /// Taylor-coefficient blow-up map with probe magnitudes.
    Probe(RunArgs),
    /// Compare the sup form with the Tikhonov limit on random small operators.
    DualityCheck(RunArgs),
    /// Markdown report and gnuplot data for a scan directory.
    Report { dir: PathBuf },
}

#[derive(clap::Args, Debug)]
pub struct RunArgs {
    /// JSON run configuration; the standard configuration when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn load_config(args: &RunArgs) -> Result<(RunConfig, PathBuf)> {
    let cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    Ok((cfg, out))
}

fn dispatch(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::Forward(a) => {
            let (cfg, out) = load_config(&a)?;
            cmd_forward(&cfg, &out, exec)?;
            eprintln!("forward data written to {}", out.display());
        }
        Command::Scan(a) => {
            let (cfg, out) = load_config(&a)?;
            let m = cmd_scan(&cfg, &out, exec)?;
            eprintln!(
                "scan: {} positive, {} negative, {} uncertain, {} failed; jaccard {}; written to {}",
                m.n_positive,
                m.n_negative,
                m.n_uncertain,
                m.n_failed,
                m.jaccard.map(fmt17).unwrap_or_else(|| "n/a".into()),
                out.display()
            );
        }
        Command::Probe(a) => {
            let (cfg, out) = load_config(&a)?;
            cmd_probe(&cfg, &out, exec)?;
            eprintln!("blow-up map written to {}", out.display());
        }
        Command::DualityCheck(a) => {
            let (cfg, out) = load_config(&a)?;
            let rep = cmd_duality(&cfg, &out)?;
            println!("{}", to_json_17(&rep));
        }
        Command::Report { dir } => {
            print!("{}", report(&dir)?);
        }
    }
    Ok(())
}

/// Parse arguments and run; returns the process exit code.
pub fn cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(parsed) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("nrt: {e}");
            e.exit_code()
        }
    }
}
