use nalgebra::{DMatrix, DVector};
use nrt::boundary_operators::{adjoint, assemble_single_layer};
use nrt::cli_io::{fmt17, read_f64_le, write_f64_le};
use nrt::forward_solver::TimeGrid;
use nrt::geometry::{discretize, jaccard, mask_from_shapes, shape_inclusion, GridSpec, MaskMode, RadialShape};
use nrt::heat_kernel::{directional_deriv_m, phi};
use nrt::nrt_indicator::{classify, path_from_spectrum, probe_form, spectral_data, sup_form, ClassifyPolicy, Verdict};
use proptest::prelude::*;

fn matrix(n: usize, m: usize, seed: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |i, j| {
        seed[(i * m + j) % seed.len()] * 0.8f64.powi((i + j) as i32 / 2) + if i == j { 0.3 } else { 0.0 }
    })
}

fn alphas() -> Vec<f64> {
    (0..16).map(|k| 1e-2 * 0.5f64.powi(k)).collect()
}

proptest! {
    #[test]
    fn kernel_is_causal_and_nonnegative(x in -2.0..2.0f64, y in -2.0..2.0f64, s in 0.0..1.0f64, t in 0.0..1.0f64) {
        let v = phi([x, y], s, [0.0, 0.0], t, 2);
        if s <= t {
            prop_assert_eq!(v, 0.0);
        } else {
            prop_assert!(v >= 0.0);
            // even in the space offset
            prop_assert_eq!(v, phi([-x, -y], s, [0.0, 0.0], t, 2));
        }
    }

    #[test]
    fn odd_derivatives_flip_with_direction(x in -1.0..1.0f64, y in -1.0..1.0f64, m in 0usize..8) {
        let d1 = directional_deriv_m([0.6, 0.8], m, [x, y], 0.7, [0.1, 0.0], 0.2, 2).unwrap();
        let d2 = directional_deriv_m([-0.6, -0.8], m, [x, y], 0.7, [0.1, 0.0], 0.2, 2).unwrap();
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        prop_assert!((d1 - sign * d2).abs() <= 1e-12 * d1.abs().max(1e-300));
    }

    #[test]
    fn tikhonov_path_is_monotone(seed in prop::collection::vec(-1.0..1.0f64, 16..64), bs in prop::collection::vec(-1.0..1.0f64, 12)) {
        let a = matrix(12, 10, &seed);
        let spec = spectral_data(a, vec![1.0; 12]).unwrap();
        let proj = spec.project(&bs).unwrap();
        let p = path_from_spectrum(&spec, &proj, &alphas()).unwrap();
        // smaller alpha: larger solution norm, smaller residual
        for w in p.solution_norms.windows(2) {
            prop_assert!(w[1] >= w[0] * (1.0 - 1e-12));
        }
        for w in p.residuals.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-15);
        }
    }

    #[test]
    fn path_and_sup_form_scale_with_data(seed in prop::collection::vec(-1.0..1.0f64, 16..64), bs in prop::collection::vec(-1.0..1.0f64, 12), lam in 0.01..100.0f64) {
        let a = matrix(12, 10, &seed);
        let spec = spectral_data(a, vec![1.0; 12]).unwrap();
        let b2: Vec<f64> = bs.iter().map(|v| v * lam).collect();
        let p1 = path_from_spectrum(&spec, &spec.project(&bs).unwrap(), &alphas()).unwrap();
        let p2 = path_from_spectrum(&spec, &spec.project(&b2).unwrap(), &alphas()).unwrap();
        for (x, y) in p1.solution_norms.iter().zip(&p2.solution_norms) {
            prop_assert!((x * lam - y).abs() <= 1e-9 * y.abs().max(1e-300));
        }
        // the slope is a log-log feature, so it does not move
        prop_assert!((p1.slope - p2.slope).abs() <= 1e-9);
        let s1 = sup_form(&spec, &spec.project(&bs).unwrap(), 1e-8, 1e-2).unwrap();
        let s2 = sup_form(&spec, &spec.project(&b2).unwrap(), 1e-8, 1e-2).unwrap();
        prop_assert!((s1.value * lam - s2.value).abs() <= 1e-9 * s2.value);
    }

    #[test]
    fn probe_form_never_exceeds_sup_form(seed in prop::collection::vec(-1.0..1.0f64, 16..64), bs in prop::collection::vec(-1.0..1.0f64, 12), probes in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 12), 1..6)) {
        let a = matrix(12, 10, &seed);
        let spec = spectral_data(a, vec![1.0; 12]).unwrap();
        let proj = spec.project(&bs).unwrap();
        let sup = sup_form(&spec, &proj, 1e-8, 1e-2).unwrap().value;
        let run = probe_form(&spec, &proj, &probes, 1e-8).unwrap();
        for w in run.windows(2) {
            prop_assert!(w[1] >= w[0]);
        }
        prop_assert!(*run.last().unwrap() <= sup * (1.0 + 1e-9));
    }

    #[test]
    fn morozov_keeps_a_prefix(seed in prop::collection::vec(-1.0..1.0f64, 16..64), bs in prop::collection::vec(-1.0..1.0f64, 12), noise in 0.0..0.5f64) {
        let a = matrix(12, 10, &seed);
        let spec = spectral_data(a, vec![1.0; 12]).unwrap();
        let mut p = path_from_spectrum(&spec, &spec.project(&bs).unwrap(), &alphas()).unwrap();
        let full = p.residuals.clone();
        p.morozov_truncate(noise, 1.0);
        prop_assert!(p.used >= 1 && p.used <= full.len());
        if p.used < full.len() {
            prop_assert!(full[p.used - 1] <= noise);
        }
        // verdicts are one of the three labels and deterministic
        let v = classify(&p, &ClassifyPolicy::default());
        prop_assert_eq!(v, classify(&p, &ClassifyPolicy::default()));
        prop_assert!(matches!(v, Verdict::Positive | Verdict::Negative | Verdict::Uncertain));
    }

    #[test]
    fn seventeen_digits_round_trip(v in prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO) {
        let back: f64 = fmt17(v).parse().unwrap();
        prop_assert_eq!(back.to_bits(), v.to_bits());
    }

    #[test]
    fn intersection_mask_lies_in_every_member(cx in -0.3..0.3f64, cy in -0.3..0.3f64, r1 in 0.2..0.6f64, r2 in 0.2..0.6f64) {
        let spec = GridSpec::new([-1.0, 1.0, -1.0, 1.0], 24, 24).unwrap();
        let a = RadialShape::circle([cx, cy], r1);
        let b = RadialShape::circle([0.0, 0.0], r2);
        let inter = mask_from_shapes(&[a.clone(), b.clone()], &spec, MaskMode::Intersect).unwrap();
        let ma = mask_from_shapes(std::slice::from_ref(&a), &spec, MaskMode::Union).unwrap();
        let mb = mask_from_shapes(std::slice::from_ref(&b), &spec, MaskMode::Union).unwrap();
        for ((i, x), y) in inter.values.iter().zip(&ma.values).zip(&mb.values) {
            prop_assert!(*i <= *x && *i <= *y);
        }
        let j = jaccard(&ma, &mb).unwrap();
        prop_assert!((0.0..=1.0).contains(&j));
        prop_assert_eq!(j, jaccard(&mb, &ma).unwrap());
    }

    #[test]
    fn shrunk_shape_is_included(r in 0.3..1.0f64, a2 in -0.15..0.15f64, b3 in -0.1..0.1f64, eps in 0.01..0.1f64) {
        let s = RadialShape { center: [0.1, -0.2], radius0: r, terms: vec![(2, a2, 0.0), (3, 0.0, b3)] };
        prop_assume!(s.validate().is_ok());
        if let Ok(inner) = s.shrink(eps) {
            prop_assert!(shape_inclusion(&inner, &s, 256));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn single_layer_is_causal_and_adjoint_consistent(xs in prop::collection::vec(-1.0..1.0f64, 48), ys in prop::collection::vec(-1.0..1.0f64, 24)) {
        let curve = discretize(&RadialShape::circle([0.0, 0.0], 1.0), 8).unwrap();
        let targets = [[0.2, 0.1], [-0.3, 0.4], [0.0, -0.5]];
        let grid = TimeGrid::new(1.0, 6).unwrap();
        let op = assemble_single_layer(&curve, &targets, &grid).unwrap();
        let (ns, nt) = (8, 3);
        // no response before the density acts
        for k in 0..grid.nt {
            for m in (k + 1)..grid.nt {
                for i in 0..nt {
                    for j in 0..ns {
                        prop_assert_eq!(op.entries[(k * nt + i, m * ns + j)], 0.0);
                    }
                }
            }
        }
        let x = DVector::from_column_slice(&xs);
        let y = DVector::from_column_slice(&ys[..18]);
        let adj = adjoint(&op);
        let ax = &op.entries * &x;
        let aty = &adj.entries * &y;
        let wt = op.target.weights();
        let ws = op.source.weights();
        let lhs: f64 = (0..ax.len()).map(|i| ax[i] * y[i] * wt[i]).sum();
        let rhs: f64 = (0..x.len()).map(|i| x[i] * aty[i] * ws[i]).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (lhs.abs() + rhs.abs() + 1e-300));
    }

    #[test]
    fn raw_f64_files_round_trip(v in prop::collection::vec(any::<f64>(), 0..64)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.f64");
        write_f64_le(&p, &v).unwrap();
        let back = read_f64_le(&p).unwrap();
        prop_assert_eq!(back.len(), v.len());
        for (a, b) in back.iter().zip(&v) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
