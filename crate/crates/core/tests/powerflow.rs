mod common;

use num_complex::Complex64;
use secregion::network::parse_matpower;
use secregion::powerflow::{
    check_point_feasible, ray_boundary, solve_at_injection, solve_base, ActiveLimits, PowerFlow, RayOptions,
};
use secregion::Error;

use common::*;

/// Independent polar Newton solution of case9 with all generator set
/// points at 1.0 p.u. (the classic reference run).
const VM_UNITY: [f64; 9] = [
    1.0,
    1.0,
    1.0,
    0.98700685239191,
    0.97547217708505,
    1.0033754364528,
    0.98564488172495,
    0.99618524580907,
    0.9576210404299,
];
const VA_UNITY_DEG: [f64; 9] = [
    0.0,
    9.66874112662812,
    4.77107323717731,
    -2.40664391951941,
    -4.01726432670755,
    1.92560168682856,
    0.62154455538893,
    3.79912019269232,
    -4.34993357656101,
];

/// Same reference solver on the shipped case9 (set points 1.04/1.025/1.025).
const VM_CASE: [f64; 9] = [
    1.04,
    1.025,
    1.025,
    1.02578839284401,
    1.01265432401777,
    1.03235294900237,
    1.0158825836275,
    1.02576937238645,
    0.99563085804829,
];
const VA_CASE_DEG: [f64; 9] = [
    0.0,
    9.28000548164282,
    4.66475133313679,
    -2.21678779994978,
    -3.68739617015705,
    1.9667160744491,
    0.72753607687432,
    3.71970115462178,
    -3.98880527285146,
];

fn assert_point(v: &[f64], theta: &[f64], vm: &[f64], va_deg: &[f64]) {
    for k in 0..vm.len() {
        assert!((v[k] - vm[k]).abs() <= 1e-6, "V at bus {k}: {} vs {}", v[k], vm[k]);
        let va = va_deg[k].to_radians();
        assert!((theta[k] - va).abs() <= 1e-6, "theta at bus {k}: {} vs {}", theta[k], va);
    }
}

#[test]
fn case9_matches_reference_solution() {
    let net = load("case9");
    let x = solve_base(&net, None).unwrap();
    assert_point(&x.v, &x.theta, &VM_CASE, &VA_CASE_DEG);
    let pf = PowerFlow::new(&net);
    assert!(pf.residual(&x) <= 1e-8);
}

#[test]
fn case9_unity_setpoints_match_reference_solution() {
    let text = std::fs::read_to_string(case_path("case9")).unwrap();
    let text = text.replace("1.04\t100", "1\t100").replace("1.025\t100", "1\t100");
    let net = parse_matpower(&text).unwrap();
    let x = solve_base(&net, None).unwrap();
    assert_point(&x.v, &x.theta, &VM_UNITY, &VA_UNITY_DEG);
}

#[test]
fn case9_bus_admittance_entries() {
    let net = load("case9");
    let pf = PowerFlow::new(&net);
    let y = pf.ybus();
    let entry = |i: usize, j: usize| {
        y[i].iter()
            .find(|(c, _)| *c == j)
            .map(|(_, v)| *v)
            .unwrap_or_default()
    };
    let expected = [
        (0, 0, Complex64::new(0.0, -17.36111111111111)),
        (3, 3, Complex64::new(3.3073789620253065, -39.30888872611897)),
        (3, 4, Complex64::new(-1.9421912487147266, 10.510682051867931)),
        (4, 4, Complex64::new(3.2242003871388416, -15.840927014229457)),
        (8, 3, Complex64::new(-1.36518771331058, 11.60409556313993)),
        (6, 6, Complex64::new(2.772209954136233, -23.30324902327162)),
        (0, 8, Complex64::default()),
    ];
    for (i, j, v) in expected {
        assert!((entry(i, j) - v).norm() < 1e-10, "Y[{i},{j}] = {} vs {v}", entry(i, j));
    }
}

#[test]
fn every_case_solves_to_tolerance() {
    for name in ["case9", "case39", "case57", "case118", "case300"] {
        let net = load(name);
        let x = solve_base(&net, None).unwrap();
        let pf = PowerFlow::new(&net);
        assert!(pf.residual(&x) <= 1e-8, "{name}: residual {}", pf.residual(&x));
    }
}

#[test]
fn base_injection_is_a_fixed_point() {
    let net = load("case9");
    let pf = PowerFlow::new(&net);
    let x = solve_base(&net, None).unwrap();
    let y = solve_at_injection(&pf, &x.injections(), &x).unwrap();
    assert!(max_abs(&x.v.iter().zip(&y.v).map(|(a, b)| a - b).collect::<Vec<_>>()) < 1e-12);
    assert!(max_abs(&x.theta.iter().zip(&y.theta).map(|(a, b)| a - b).collect::<Vec<_>>()) < 1e-12);
}

#[test]
fn tiny_perturbation_converges_fast() {
    let net = load("case9");
    let pf = PowerFlow::new(&net);
    let x = solve_base(&net, None).unwrap();
    let mut s = x.injections();
    s[4] += Complex64::new(-1e-6, 0.0);
    match solve_at_injection(&pf, &s, &x) {
        Ok(y) => assert!((y.v[4] - x.v[4]).abs() < 1e-5),
        Err(e) => panic!("{e}"),
    }
    let capped = PowerFlow::new(&net).with_options(secregion::powerflow::NewtonOptions {
        max_iterations: 3,
        ..Default::default()
    });
    assert!(solve_at_injection(&capped, &s, &x).is_ok());
}

#[test]
fn beyond_loadability_does_not_converge() {
    let net = load("case9");
    let pf = PowerFlow::new(&net);
    let x = solve_base(&net, None).unwrap();
    let mut s = x.injections();
    s[8] += Complex64::new(-40.0, 0.0);
    assert!(matches!(solve_at_injection(&pf, &s, &x), Err(Error::NoConvergence { .. })));
}

#[test]
fn two_bus_ray_matches_closed_form() {
    let net = two_bus();
    let pf = PowerFlow::new(&net);
    let x = solve_base(&net, None).unwrap();
    let limits = ActiveLimits::voltage_band(&x, 0.01, 1);
    let mut d = vec![Complex64::default(); 2];
    d[1] = Complex64::new(-1.0, 0.0);
    let trace = ray_boundary(&pf, &x, &x.injections(), &d, &limits, &RayOptions::default()).unwrap();
    let exact = two_bus_delivered(0.99);
    assert!((exact - 0.7245247822903627).abs() < 1e-9);
    assert!((trace.t_max - exact).abs() <= 5e-3 * exact, "{} vs {exact}", trace.t_max);
    assert!(trace.t_max <= exact);
    assert!(trace.bracket_consistent());
    assert!(!trace.unbounded);
}

#[test]
fn case9_rays_are_star_shaped() {
    let net = load("case9");
    let pf = PowerFlow::new(&net);
    let x = solve_base(&net, None).unwrap();
    let limits = ActiveLimits::voltage_band(&x, 0.01, net.n_branches());
    assert!(check_point_feasible(&net, &x, &limits).feasible);
    for i in 0..16 {
        let a = 2.0 * std::f64::consts::PI * i as f64 / 16.0;
        let mut d = vec![Complex64::default(); 9];
        d[4] = Complex64::new(a.cos(), 0.0);
        d[6] = Complex64::new(a.sin(), 0.0);
        let t = ray_boundary(&pf, &x, &x.injections(), &d, &limits, &RayOptions::default()).unwrap();
        assert!(t.t_max > 0.0, "ray {i}");
    }
}

#[test]
fn infeasible_base_is_rejected_by_ray_tracing() {
    let net = load("case9");
    let pf = PowerFlow::new(&net);
    let x = solve_base(&net, None).unwrap();
    let mut limits = ActiveLimits::voltage_band(&x, 0.01, net.n_branches());
    limits.v_max[4] = x.v[4] - 1e-3;
    let mut d = vec![Complex64::default(); 9];
    d[4] = Complex64::new(1.0, 0.0);
    assert!(matches!(
        ray_boundary(&pf, &x, &x.injections(), &d, &limits, &RayOptions::default()),
        Err(Error::BaseInfeasible(_))
    ));
}
