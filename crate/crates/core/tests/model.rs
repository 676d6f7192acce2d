mod common;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use secregion::bounds::BoundPair;
use secregion::model::{split_apply, OperationalKind, Part};
use secregion::powerflow::solve_at_injection;
use secregion::setup::{FreeInputs, Setup, Study};

use common::*;

fn dense_solve(study: &Study, cols: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    cols.into_iter()
        .map(|mut c| {
            study.model.lu().solve(&mut c).unwrap();
            c
        })
        .collect()
}

#[test]
fn two_bus_structure() {
    let net = two_bus_loaded(0.3, 0.1);
    let setup = Setup {
        free: FreeInputs::AllLoads,
        ..Setup::default()
    };
    let s = Study::prepare(net, &setup).unwrap();
    let m = &s.model;
    assert_eq!((m.m.nrows, m.m.ncols), (2, 4));
    assert_eq!(m.n_inputs(), 2);
    assert_eq!(m.input_rows, vec![0, 1]);
    assert_eq!(m.inputs[0].part, Part::G);
    assert_eq!(m.inputs[1].part, Part::B);
    assert_eq!(m.n_rows(), 3);
}

#[test]
fn base_primitives_reproduce_equation_admittances() {
    for name in ["case9", "case57"] {
        let s = study(name);
        let m = &s.model;
        let f0 = m.primitives(&vec![0.0; m.n_states]);
        let ne = m.n_edges();
        assert!(f0[..ne].iter().all(|v| *v == 1.0));
        assert!(f0[ne..].iter().all(|v| *v == 0.0));
        let mf = m.m.mul_vec(&f0);
        for k in 0..m.n_buses {
            // off-diagonal part of y_k = conj(s_k) / V_k²
            let y = s.base.admittance(k);
            let yself: Complex64 = s.pf.ybus()[k].iter().find(|(c, _)| *c == k).map(|(_, v)| *v).unwrap();
            if let Some(r) = m.g_row[k] {
                assert!((mf[r] - (y - yself).re).abs() < 1e-10, "{name} g row of bus {k}");
            }
            if let Some(r) = m.b_row[k] {
                assert!((mf[r] - (y - yself).im).abs() < 1e-10, "{name} b row of bus {k}");
            }
        }
        assert!(max_abs(&mf.iter().zip(&m.ustar).map(|(a, b)| a - b).collect::<Vec<_>>()) < 1e-12);
    }
}

#[test]
fn primitives_match_complex_exponential_form() {
    let s = study("case39");
    let m = &s.model;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ne = m.n_edges();
    for _ in 0..20 {
        let x: Vec<f64> = (0..m.n_states).map(|_| rng.random_range(-0.3..0.3)).collect();
        let f = m.primitives(&x);
        let (th, rh) = m.edge_deviations(&x);
        for e in 0..ne {
            let z = Complex64::new(rh[e], th[e]);
            let cosh = (z.exp() + (-z).exp()) * 0.5;
            let sinh = (z.exp() - (-z).exp()) * 0.5;
            let want = [cosh.re, sinh.re, sinh.im, cosh.im];
            for blk in 0..4 {
                assert!((f[blk * ne + e] - want[blk]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn single_edge_primitive_values() {
    let s = Study::prepare(two_bus_loaded(0.2, 0.0), &Setup::default()).unwrap();
    let m = &s.model;
    let th = m.theta_state[1].unwrap();
    let mut x = vec![0.0; m.n_states];
    // δθ on the edge is θ₁ - θ₂ with the slack at bus 1
    x[th] = -std::f64::consts::FRAC_PI_6;
    let f = m.primitives(&x);
    let want = [3f64.sqrt() / 2.0, 0.0, 0.5, 0.0];
    for (a, b) in f.iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
    x[th] = -0.4;
    let r = m.residual2(&x);
    assert!((r[2] - (0.4f64.sin() - 0.4)).abs() < 1e-15);
    assert!((r[2] + 0.010581658).abs() < 1e-8);
}

#[test]
fn jacobian_matches_central_differences() {
    for name in ["case9", "case57"] {
        let s = study(name);
        let m = &s.model;
        let l = m.l.to_dense();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for j in 0..m.n_states {
            let mut xp = vec![0.0; m.n_states];
            let mut xm = xp.clone();
            xp[j] = h;
            xm[j] = -h;
            let (fp, fm) = (m.primitives(&xp), m.primitives(&xm));
            for i in 0..fp.len() {
                worst = worst.max(((fp[i] - fm[i]) / (2.0 * h) - l[(i, j)]).abs());
            }
        }
        assert!(worst <= 1e-6, "{name}: {worst}");
    }
}

#[test]
fn residual_is_superlinear() {
    let s = study("case57");
    let m = &s.model;
    assert!(m.residual2(&vec![0.0; m.n_states]).iter().all(|v| *v == 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dir: Vec<f64> = (0..m.n_states).map(|_| rng.random_range(-0.1..0.1)).collect();
    let ratios: Vec<f64> = [1.0, 0.5, 0.25, 0.125]
        .iter()
        .map(|a| {
            let x: Vec<f64> = dir.iter().map(|d| d * a).collect();
            max_abs(&m.residual2(&x)) / (a * max_abs(&dir))
        })
        .collect();
    assert!(ratios.windows(2).all(|w| w[1] < w[0]), "{ratios:?}");
    for j in [0, m.n_states / 2, m.n_states - 1] {
        let mut x = vec![0.0; m.n_states];
        x[j] = 1e-4;
        assert!(max_abs(&m.residual2(&x)) / 1e-4 < 1e-3);
    }
}

#[test]
fn certificate_matrices_match_dense_products() {
    let s = study("case9");
    let m = &s.model;
    let n = m.n_states;
    let a = m.a.to_dense();
    let mm = m.m.to_dense();
    let t = m.t.to_dense();
    let l = m.l.to_dense();
    let r_cols: Vec<Vec<f64>> = m
        .input_rows
        .iter()
        .map(|&r| {
            let mut c = vec![0.0; n];
            c[r] = 1.0;
            c
        })
        .collect();
    let jr = dense_solve(&s, r_cols);
    let jm = dense_solve(&s, (0..mm.ncols()).map(|j| (0..n).map(|i| mm[(i, j)]).collect()).collect());
    let tl = |row: usize, v: &[f64]| -> f64 {
        (0..l.nrows()).map(|p| t[(row, p)] * (0..n).map(|q| l[(p, q)] * v[q]).sum::<f64>()).sum()
    };
    for r in 0..m.n_rows() {
        for (i, col) in jr.iter().enumerate() {
            let want: f64 = (0..n).map(|q| a[(r, q)] * col[q]).sum();
            assert!((m.b[(r, i)] - want).abs() < 1e-10);
        }
        for (j, col) in jm.iter().enumerate() {
            let want: f64 = -(0..n).map(|q| a[(r, q)] * col[q]).sum::<f64>();
            assert!((m.c[(r, j)] - want).abs() < 1e-10);
        }
    }
    assert!(!m.ops.is_empty());
    for r in 0..m.ops.len() {
        for (i, col) in jr.iter().enumerate() {
            assert!((m.d[(r, i)] - tl(r, col)).abs() < 1e-10);
        }
        for (j, col) in jm.iter().enumerate() {
            assert!((m.e[(r, j)] - (t[(r, j)] - tl(r, col))).abs() < 1e-10);
        }
    }
}

#[test]
fn split_application_is_the_interval_product() {
    let s = study("case9");
    let m = &s.model;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let lo: Vec<f64> = (0..m.n_inputs()).map(|_| rng.random_range(0.0..0.1)).collect();
    let hi: Vec<f64> = (0..m.n_inputs()).map(|_| rng.random_range(0.0..0.1)).collect();
    let x = BoundPair::new(lo.clone(), hi.clone()).unwrap();
    let out = split_apply(&m.b, &x);
    for r in 0..m.n_rows() {
        let (mut h, mut l) = (0.0, 0.0);
        for i in 0..m.n_inputs() {
            let v = m.b[(r, i)];
            h += if v > 0.0 { v * hi[i] } else { -v * lo[i] };
            l += if v > 0.0 { v * lo[i] } else { -v * hi[i] };
        }
        assert!((out.hi[r] - h).abs() < 1e-12 && (out.lo[r] - l).abs() < 1e-12);
    }
}

#[test]
fn fixed_point_residual_vanishes_at_solved_points() {
    let s = study("case57");
    let m = &s.model;
    let zero = vec![0.0; m.n_states];
    assert!(max_abs(&m.fixed_point_residual(&zero, &vec![0.0; m.n_inputs()]).unwrap()) == 0.0);
    let mut spec = s.base.injections();
    let loads: Vec<usize> = m.inputs.iter().filter(|c| c.part == Part::G).map(|c| c.bus).collect();
    for (k, dp) in [(loads[0], -0.05), (loads[5], 0.03), (loads[20], -0.02)] {
        spec[k] += Complex64::new(dp, 0.01);
    }
    let point = solve_at_injection(&s.pf, &spec, &s.base).unwrap();
    let x = m.state_of(&point);
    let u = m.inputs_of(&point);
    let res = m.fixed_point_residual(&x, &u).unwrap();
    assert!(max_abs(&res) <= 1e-8, "{}", max_abs(&res));
    let newton = m.solve_newton(&u, &zero).unwrap();
    assert!(max_abs(&newton.iter().zip(&x).map(|(a, b)| a - b).collect::<Vec<_>>()) < 1e-8);
}

#[test]
fn linearisation_is_first_order_accurate() {
    let s = study("case9");
    let m = &s.model;
    for eps in [1e-3, 1e-4] {
        let mut u = vec![0.0; m.n_inputs()];
        u[0] = eps;
        let mut x = m.r_mul(&u);
        m.lu().solve(&mut x).unwrap();
        let res = max_abs(&m.fixed_point_residual(&x, &u).unwrap());
        assert!(res < 10.0 * eps * eps, "eps {eps}: {res}");
    }
}

#[test]
fn operational_rows_reproduce_flows_at_solved_points() {
    let s = study("case9");
    let m = &s.model;
    let mut spec = s.base.injections();
    spec[4] += Complex64::new(-0.1, 0.02);
    spec[8] += Complex64::new(0.05, -0.01);
    for point in [s.base.clone(), solve_at_injection(&s.pf, &spec, &s.base).unwrap()] {
        let vals = m.operational_values(&m.state_of(&point));
        let flows = s.pf.branch_flows(&point);
        let e = &s.pf.edges;
        for (row, op) in m.ops.iter().enumerate() {
            let want = match op.kind {
                OperationalKind::ThermalFromP | OperationalKind::ThermalFromQ => {
                    let k = e.from[op.element];
                    flows[op.element].0.conj() / point.v[k].powi(2) - e.y_ff[op.element]
                }
                OperationalKind::ThermalToP | OperationalKind::ThermalToQ => {
                    let k = e.to[op.element];
                    flows[op.element].1.conj() / point.v[k].powi(2) - e.y_tt[op.element]
                }
                OperationalKind::ReactiveGen => {
                    let k = op.element;
                    Complex64::new(0.0, -point.q[k] / point.v[k].powi(2) - e.y_d[k].im)
                }
            };
            let want = match op.kind {
                OperationalKind::ThermalFromP | OperationalKind::ThermalToP => want.re,
                _ => want.im,
            };
            assert!((vals[row] - want).abs() < 1e-9, "{:?} {}: {} vs {want}", op.kind, op.element, vals[row]);
            if point.v == s.base.v {
                assert!((op.base - vals[row]).abs() < 1e-12);
                assert!(op.lo < op.base && op.base < op.hi);
            }
        }
    }
}
