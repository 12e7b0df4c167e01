//! Acceptance run on the standard configuration: one PASS/FAIL line per criterion.

use nalgebra::{DMatrix, DVector};
use nrt::boundary_operators::{
    assemble_k_at, assemble_k_normal_at, assemble_k_trace, dense_range_probe, jump_relation_check, KOptions,
};
use nrt::cli_io::{duality_check, RunConfig};
use nrt::extension_probe::{
    directions, norm_region, normalized_probe, probe_region, probe_synthetic, taylor_log_p, wtilde_field,
    DataSidePairing, ProbeSpec,
};
use nrt::forward_solver::{coarse_to_fine, solve_direct, time_major, CauchyData, ForwardParams, TimeGrid};
use nrt::geometry::{discretize, dot, Point, RadialShape};
use nrt::heat_kernel::{directional_deriv_m, normal_deriv_phi, phi};
use nrt::nrt_indicator::{
    ellipsoid_sup_oracle, path_from_spectrum, sup_form, tikhonov_limit, weighted_svd, Projection, SpectralData, Verdict,
};
use nrt::par::Exec;
use nrt::scan_recon::{run_scan_multi, synthesize, ScanResult, Synthetic};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::time::Instant;

const EXEC: Exec = Exec::Parallel;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn criterion1() -> Outcome {
    let hand = phi([2.0, 0.0], 1.0, [0.0, 0.0], 0.0, 2);
    let want = (-1.0f64).exp() / (4.0 * PI);
    let hand_err = (hand - want).abs() / want;
    let causal = phi([0.1, 0.0], 0.5, [0.0, 0.0], 0.5, 2) == 0.0 && phi([0.1, 0.0], 0.4, [0.0, 0.0], 0.5, 2) == 0.0;
    // nested central differences with one Richardson step
    let mut worst = 0.0f64;
    for (z, s, h) in [([0.3, 0.2], 0.5, [1.0, 0.0]), ([-0.4, 0.5], 0.9, [0.6, 0.8]), ([0.7, -0.1], 0.3, [0.0, 1.0])] {
        let (x, t) = ([0.0, 0.0], 0.1);
        for m in 1..=4usize {
            let fd = |e: f64| {
                let mut acc = 0.0;
                let mut binom = 1.0;
                for k in 0..=m {
                    let off = (m as f64 / 2.0 - k as f64) * e;
                    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                    acc += sign * binom * phi([z[0] + off * h[0], z[1] + off * h[1]], s, x, t, 2);
                    binom = binom * (m - k) as f64 / (k + 1) as f64;
                }
                acc / e.powi(m as i32)
            };
            let e = 0.02;
            let approx = (4.0 * fd(e / 2.0) - fd(e)) / 3.0;
            let exact = directional_deriv_m(h, m, z, s, x, t, 2).unwrap();
            worst = worst.max((approx - exact).abs() / exact.abs());
        }
    }
    outcome(
        hand_err <= 1e-12 && causal && worst <= 1e-4,
        format!(
            "hand value rel err {hand_err:.2e}, causality exact {causal}, worst derivative rel err (m<=4) {worst:.2e}"
        ),
    )
}

fn criterion2() -> Outcome {
    let omega = RadialShape::circle([0.0, 0.0], 1.0);
    let b = discretize(&omega, 64).unwrap();
    let grid = TimeGrid::new(1.0, 32).unwrap();
    let src: Vec<(Point, f64)> = (0..7)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / 7.0 + 0.3;
            ([2.0 * a.cos(), 2.0 * a.sin()], 1.0 + 0.3 * k as f64)
        })
        .collect();
    let u = |x: Point, t: f64| src.iter().map(|(y, c)| c * phi(x, t, *y, 0.0, 2)).sum::<f64>();
    let sol = solve_direct(&b, None, |_, x, t| u(x, t), &grid, &ForwardParams::default(), EXEC).unwrap();
    let cd = sol.cauchy(0, 1).unwrap();
    let (mut e, mut r) = (0.0, 0.0);
    for k in 0..grid.nt {
        for j in 0..b.len() {
            let ex: f64 =
                src.iter().map(|(y, c)| c * normal_deriv_phi(b.nodes[j], grid.node(k), *y, 0.0, b.normals[j], 2)).sum();
            e += (cd.neumann[(j, k)] - ex).powi(2);
            r += ex * ex;
        }
    }
    let err = (e / r).sqrt();
    outcome(err <= 1e-3, format!("Neumann rel L2 error {err:.3e} (64 nodes, 32 steps)"))
}

fn criterion3() -> Outcome {
    let omega = RadialShape::circle([0.0, 0.0], 1.0);
    let grid = TimeGrid::new(1.0, 32).unwrap();
    let b = discretize(&omega, 128).unwrap();
    let dens: Vec<f64> = (0..grid.nt)
        .flat_map(|k| {
            let t = grid.node(k);
            b.theta.iter().map(move |th| (PI * t).sin().powi(2) * (1.0 + 0.5 * th.cos())).collect::<Vec<_>>()
        })
        .collect();
    let eps = [0.1, 0.05, 0.025];
    let errs: Vec<f64> = jump_relation_check(&b, &grid, &dens, &eps, EXEC).unwrap().iter().map(|p| p.1).collect();
    let mono = errs.windows(2).all(|w| w[1] < w[0]);
    let last = errs[errs.len() - 1];
    outcome(
        mono && last <= 0.05,
        format!(
            "errors {:?} for eps {eps:?}; monotone {mono}",
            errs.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>()
        ),
    )
}

fn criterion4(scan: &ScanResult) -> Outcome {
    let r = scan.metrics.max_trace_residual;
    outcome(r <= 1e-6, format!("max per-column trace residual {r:.2e} over {} test domains", scan.records.len()))
}

/// Sup form vs Tikhonov limit for b~ = U_k S_k^2 y on the kept directions of a real R.
fn duality_on_spectrum(spec: &SpectralData, y: &[f64], cutoff: f64, alphas: &[f64]) -> f64 {
    let k = spec.kept(cutoff);
    let mut c = vec![0.0; spec.sigma.len()];
    for i in 0..k {
        c[i] = spec.sigma[i] * spec.sigma[i] * y[i];
    }
    let b_norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    let proj = Projection { c, b_norm, outside: 0.0 };
    let path = path_from_spectrum(spec, &proj, alphas).unwrap();
    let sf = sup_form(spec, &proj, cutoff, 1e-2).unwrap();
    (sf.value - tikhonov_limit(&path)).abs() / sf.value
}

fn criterion5(spec: &SpectralData, noisy_b: Option<&[f64]>) -> Outcome {
    let alphas: Vec<f64> = (0..24).map(|k| 1e-2 * 0.5f64.powi(k)).collect();
    let cutoff = 1e-2;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let y: Vec<f64> = (0..spec.sigma.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        worst = worst.max(duality_on_spectrum(spec, &y, cutoff, &alphas));
    }
    let mut detail = format!("real R, 5 constructed cases: max rel gap {worst:.2e}");
    if let Some(b) = noisy_b {
        // noisy data restricted to the kept span is solvable in the truncated problem
        let proj = spec.project(b).unwrap();
        let k = spec.kept(cutoff);
        let mut c = proj.c.clone();
        c[k..].iter_mut().for_each(|v| *v = 0.0);
        let b_norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        let p = Projection { c, b_norm, outside: 0.0 };
        let path = path_from_spectrum(spec, &p, &alphas).unwrap();
        let sf = sup_form(spec, &p, cutoff, 1e-2).unwrap();
        let gap = (sf.value - tikhonov_limit(&path)).abs() / sf.value;
        worst = worst.max(gap);
        detail += &format!("; noisy data on kept span {gap:.2e}");
    }
    let small = duality_check(20, 10, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut oracle_worst = small.max_oracle_rel_gap;
    for n in [30usize, 40] {
        let a = DMatrix::from_fn(n, n, |i, j| {
            let v: f64 = rng.random_range(-1.0..1.0);
            v * 0.9f64.powi((i + j) as i32 / 2)
        });
        let x = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let b = &a * &x;
        let svd = a.clone().svd(true, false);
        let u = svd.u.unwrap();
        let c = u.transpose() * &b;
        let exact = c.iter().zip(svd.singular_values.iter()).map(|(c, s)| (c / s).powi(2)).sum::<f64>().sqrt();
        let o = ellipsoid_sup_oracle(&a, &b, 20000).unwrap();
        oracle_worst = oracle_worst.max((o - exact).abs() / exact);
    }
    worst = worst.max(small.max_rel_gap);
    detail += &format!("; 20x20 synthetic {:.2e}; oracle (20, 30, 40) {oracle_worst:.2e}", small.max_rel_gap);
    outcome(worst <= 1e-6 && oracle_worst <= 1e-6, detail)
}

/// Both forms of the Green identity for 10 random smooth densities, piecewise constant on the
/// data cells. The time integrals use the midpoints of a 3x refined grid, which the forward
/// solver's fine grid contains, so the clean field is exact there. Noise on the data enters
/// through its pairing at the data midpoints.
fn criterion6(syn: &Synthetic, noisy: Option<&CauchyData>) -> Outcome {
    const SUB: usize = 3;
    let ob = syn.boundary();
    let grid = syn.cauchy_w.grid;
    let f = syn.u.refine;
    assert!(
        f.is_multiple_of(SUB) && (f / SUB) % 2 == 1,
        "forward refinement {f} does not contain the quadrature points"
    );
    let tgrid = grid.refine(SUB);
    let pick = f / SUB;
    let ntf = tgrid.nt;
    // clean w flux on the outer curve at the refined midpoints
    let (uf, mf) = (syn.u.cauchy_fine(0), syn.mu.cauchy_fine(0));
    let stride = uf.boundary.len() / ob.len();
    let no = ob.len();
    let b: Vec<f64> = (0..ntf)
        .flat_map(|s| {
            let c = coarse_to_fine(s, pick);
            (0..no).map(move |j| (j * stride, c))
        })
        .map(|(j, c)| uf.neumann[(j, c)] - mf.neumann[(j, c)])
        .collect();
    let trace = assemble_k_trace(ob, &tgrid, 8, EXEC).unwrap();
    let wy = trace.target.weights();
    let coarse = noisy.map(|nz| {
        let tr = assemble_k_trace(ob, &grid, 8, EXEC).unwrap();
        let db: Vec<f64> = time_major(&(&nz.neumann - &syn.cauchy_w.neumann));
        (tr, db)
    });
    // cavity side: u = 0 there, so w = -mu and its flux is the u flux minus that of mu
    let du = syn.u.cauchy_fine(1);
    let dbnd = &du.boundary;
    let nd = dbnd.len();
    let times = tgrid.nodes();
    let kd = assemble_k_at(ob, &dbnd.nodes, &times, &grid, KOptions::default(), EXEC).unwrap();
    let knd = assemble_k_normal_at(ob, &dbnd.nodes, &dbnd.normals, &times, &grid, EXEC).unwrap();
    let mut w = vec![0.0; nd * ntf];
    let mut dw = vec![0.0; nd * ntf];
    for (s, &t) in times.iter().enumerate() {
        let c = coarse_to_fine(s, pick);
        for i in 0..nd {
            w[s * nd + i] = -syn.mu.field.value(dbnd.nodes[i], t);
            dw[s * nd + i] = du.neumann[(i, c)] - dot(syn.mu.field.gradient(dbnd.nodes[i], t), dbnd.normals[i]);
        }
    }
    let dtf = tgrid.dt();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut gaps = Vec::new();
    for _ in 0..10 {
        let ab: Vec<(f64, f64)> = (0..4).map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let ct: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let dens: Vec<f64> = grid
            .nodes()
            .iter()
            .flat_map(|&t| {
                let tf = ct[0] + ct[1] * (PI * t).sin() + ct[2] * (PI * t).cos();
                let ab = ab.clone();
                ob.theta.iter().map(move |&th| {
                    tf * ab
                        .iter()
                        .enumerate()
                        .map(|(m, (a, b))| a * (m as f64 * th).cos() + b * (m as f64 * th).sin())
                        .sum::<f64>()
                })
            })
            .collect();
        let dens_f: Vec<f64> =
            dens.chunks(no).flat_map(|row| std::iter::repeat_n(row, SUB).flatten().copied()).collect();
        let kt = trace.apply(&dens_f);
        let mut outer: f64 = kt.iter().zip(&b).zip(&wy).map(|((k, b), w)| k * b * w).sum();
        if let Some((tr, db)) = &coarse {
            let wyc = tr.target.weights();
            outer += tr.apply(&dens).iter().zip(db).zip(&wyc).map(|((k, b), w)| k * b * w).sum::<f64>();
        }
        let dv = DVector::from_column_slice(&dens);
        let kphi = &kd * &dv;
        let knphi = &knd * &dv;
        let mut inner = 0.0;
        for s in 0..ntf {
            for i in 0..nd {
                let r = s * nd + i;
                inner += dbnd.weights[i] * dtf * (kphi[r] * dw[r] - w[r] * knphi[r]);
            }
        }
        gaps.push(((outer - inner).abs() / outer.abs().max(inner.abs()), outer));
    }
    let worst = gaps.iter().map(|g| g.0).fold(0.0, f64::max);
    let per: Vec<String> = gaps.iter().map(|(g, v)| format!("{g:.1e}@{v:.1e}")).collect();
    outcome(
        worst <= 0.01,
        format!("max rel gap {worst:.2e} over 10 random smooth densities (gap@value: {})", per.join(" ")),
    )
}

fn criterion7(scan: &ScanResult, sep_min: f64, label: &str) -> Outcome {
    let cavity = scan.config.geometry.cavity.clone().unwrap();
    let (mut wrong, mut failed) = (Vec::new(), 0);
    for r in &scan.records {
        let contains = nrt::geometry::shape_inclusion(&cavity, &r.shape, 256);
        match r.verdict {
            Some(v) => {
                let want = if contains { Verdict::Positive } else { Verdict::Negative };
                if v != want {
                    wrong.push(r.index);
                }
            }
            None => failed += 1,
        }
    }
    let m = &scan.metrics;
    let sep = m.separation_ratio.unwrap_or(0.0);
    let jac = m.jaccard.unwrap_or(0.0);
    let pass = wrong.is_empty() && failed == 0 && sep >= sep_min && jac >= 0.5 && m.wall_seconds <= 1800.0;
    outcome(
        pass,
        format!(
            "{label}: misclassified {wrong:?}, failed {failed}, separation {sep:.3} (need {sep_min}), jaccard {jac:.3}, scan {:.0} s",
            m.wall_seconds
        ),
    )
}

fn criterion8(cfg: &RunConfig, syn: &Synthetic) -> Outcome {
    let w = syn.u.field.combine(&syn.mu.field, -1.0);
    let wt = wtilde_field(&syn.cauchy_w);
    let rho = cfg.indicator.rho;
    let dirs = directions(8);
    let cavity = cfg.geometry.cavity.as_ref().unwrap();
    // ray toward the leftmost point of the cavity boundary
    let target = [cavity.center[0] - cavity.radius0, cavity.center[1]];
    let ds = [0.2, 0.1, 0.05];
    let p = |f: &nrt::layers::LayerField, d: f64| {
        [0.5, 1.0]
            .iter()
            .map(|&s| taylor_log_p(f, [target[0] - d, target[1]], s, rho, 60, &dirs).unwrap())
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let pw: Vec<f64> = ds.iter().map(|&d| p(&w, d)).collect();
    let pt: Vec<f64> = ds.iter().map(|&d| p(&wt, d)).collect();
    let gw: Vec<f64> = pw.windows(2).map(|x| (x[1] - x[0]).exp()).collect();
    let gt: Vec<f64> = pt.windows(2).map(|x| (x[1] - x[0]).exp()).collect();
    let blow = gw.iter().all(|g| *g >= 10.0) && gt.iter().all(|g| *g <= 2.0);
    // probe functional: synthetic against data side, away from the cavity
    let omega = &cfg.geometry.omega;
    let g = RadialShape::circle(cavity.center, cavity.radius0 + 0.15);
    let region = norm_region(&g, omega, cfg.indicator.eps).unwrap();
    let pairing = DataSidePairing::new(&syn.cauchy_w, EXEC).unwrap();
    let mut worst = 0.0f64;
    let mut cases = 0;
    for z in [[-0.5, 0.0], [-0.3, 0.5], [0.2, -0.75]] {
        let e = probe_region(&g, omega, z, 0.15, 0.75).unwrap();
        for m in [0usize, 1] {
            let spec = ProbeSpec::new(z, 0.9, [0.6, 0.8], m, &region).unwrap();
            let syn_v = probe_synthetic(&spec, &w, &wt, cfg.indicator.c_norm).unwrap();
            let data_v = pairing.probe(&spec, &e, 64, 1e-10, cfg.indicator.c_norm, EXEC).unwrap();
            worst = worst.max((syn_v - data_v.value).abs() / syn_v);
            cases += 1;
        }
    }
    outcome(
        blow && worst <= 0.25,
        format!(
            "rho {rho}: P(w) growth per halving {:?}, P(w~) growth {:?}; probe synthetic vs data side max rel gap {worst:.3} over {cases} probes",
            gw.iter().map(|g| format!("{g:.2e}")).collect::<Vec<_>>(),
            gt.iter().map(|g| format!("{g:.3}")).collect::<Vec<_>>()
        ),
    )
}

fn criterion9(cfg: &RunConfig, syn: &Synthetic) -> Outcome {
    let ob = syn.boundary();
    let grid = syn.cauchy_w.grid;
    let e = RadialShape::circle([0.3, 0.0], 0.4);
    // twice as many samples on E as there are nodes on the outer curve, so the full basis
    // is still a least-squares fit and not an interpolation
    let eb = discretize(&e, 2 * ob.len()).unwrap();
    let region = norm_region(&e, &cfg.geometry.omega, cfg.indicator.eps).unwrap();
    let spec = ProbeSpec::new([-0.5, 0.0], 0.9, [1.0, 0.0], 0, &region).unwrap();
    let target = normalized_probe(&spec, &eb.nodes, &grid.nodes(), 1.0).unwrap();
    let full = ob.len() * grid.nt;
    let sizes: Vec<usize> = [1, 2, 4, 8, 16, 32].iter().map(|f| full * f / 32).collect();
    let fit = dense_range_probe(ob, &eb, &grid, &target, &sizes, EXEC).unwrap();
    let rel: Vec<f64> = fit.residuals.iter().map(|r| r / fit.target_norm).collect();
    let mono = rel.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12));
    let last = rel[rel.len() - 1];
    outcome(
        mono && last < 0.1,
        format!(
            "relative residuals {:?} for basis sizes {sizes:?}",
            rel.iter().map(|r| format!("{r:.3e}")).collect::<Vec<_>>()
        ),
    )
}

fn main() {
    let t0 = Instant::now();
    let cfg = RunConfig::default();
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let emit = |n: usize, o: Outcome, results: &mut Vec<(usize, Outcome)>| {
        println!("criterion {n:>2}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    emit(1, criterion1(), &mut results);
    emit(2, criterion2(), &mut results);
    emit(3, criterion3(), &mut results);

    let delta = 0.01;
    let scans = run_scan_multi(&cfg, &[0.0, delta], None, EXEC).expect("standard scan");
    let syn = synthesize(&cfg, EXEC).expect("forward data");
    emit(4, criterion4(&scans[0]), &mut results);

    // one real operator for the duality checks: the first family member
    let ob = syn.boundary().clone();
    let grid = syn.cauchy_w.grid;
    let corr = nrt::boundary_operators::DirichletCorrector::new(&ob, &grid, 3, EXEC).unwrap();
    let (r, _) = nrt::boundary_operators::assemble_r(
        &scans[0].records[0].shape,
        &ob,
        &grid,
        &cfg.operator_params(),
        Some(&corr),
        EXEC,
    )
    .unwrap();
    let spec = weighted_svd(&r).unwrap();
    drop(r);
    emit(5, criterion5(&spec, None), &mut results);
    emit(6, criterion6(&syn, None), &mut results);
    emit(7, criterion7(&scans[0], 10.0, "noise-free"), &mut results);
    emit(8, criterion8(&cfg, &syn), &mut results);
    emit(9, criterion9(&cfg, &syn), &mut results);

    let (noisy, _) = syn.noisy_w(delta, cfg.noise.seed).unwrap();
    let c5 = criterion5(&spec, Some(&time_major(&noisy.neumann)));
    let c6 = criterion6(&syn, Some(&noisy));
    let c7 = criterion7(&scans[1], 3.0, "delta 1%, Morozov");
    let pass = c5.pass && c6.pass && c7.pass;
    emit(10, outcome(pass, format!("[5] {} | [6] {} | [7] {}", c5.detail, c6.detail, c7.detail)), &mut results);
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!(
        "acceptance: {} of {} criteria pass ({:.0} s)",
        results.len() - failed.len(),
        results.len(),
        t0.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
