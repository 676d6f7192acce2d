#![allow(dead_code)]

use std::path::PathBuf;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use secregion::bounds::BoundPair;
use secregion::model::{FixedPointModel, RowKind};
use secregion::network::{parse_matpower, PowerNetwork};
use secregion::setup::{Setup, Study};

pub fn case_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../cases").join(format!("{name}.m"))
}

pub fn load(name: &str) -> PowerNetwork {
    parse_matpower(&std::fs::read_to_string(case_path(name)).unwrap()).unwrap()
}

pub fn study(name: &str) -> Study {
    let net = load(name);
    let setup = Setup::screening(&net);
    Study::prepare(net, &setup).unwrap()
}

/// Slack feeding one load bus over `y = 1/(0.01 + 0.1j)`.
pub const TWO_BUS: &str = "\
function mpc = twobus
mpc.baseMVA = 100;
mpc.bus = [
  1 3 0 0 0 0 1 1 0 230 1 1.1 0.9;
  2 1 0 0 0 0 1 1 0 230 1 1.1 0.9;
];
mpc.gen = [
  1 0 0 100 -100 1 100 1 200 0;
];
mpc.branch = [
  1 2 0.01 0.1 0 0 0 0 0 0 1 -360 360;
];
";

pub fn two_bus() -> PowerNetwork {
    parse_matpower(TWO_BUS).unwrap()
}

/// Two-bus network with load `p + jq` (per unit) at bus 2.
pub fn two_bus_loaded(p: f64, q: f64) -> PowerNetwork {
    let text = TWO_BUS.replace(
        "  2 1 0 0 0 0 1 1 0 230",
        &format!("  2 1 {} {} 0 0 1 1 0 230", p * 100.0, q * 100.0),
    );
    parse_matpower(&text).unwrap()
}

/// Load-bus active power the two-bus line delivers with `Q₂ = 0` and
/// `|V₂| = v`, from the closed-form PV curve.
pub fn two_bus_delivered(v: f64) -> f64 {
    let z = (0.01f64, 0.1f64);
    let d = z.0 * z.0 + z.1 * z.1;
    let (g, b) = (z.0 / d, -z.1 / d);
    // s₂ = conj(y) (v² - v e^{jθ}) with v₁ = 1; q₂(θ) = 0 by bisection
    let s = |th: f64| {
        let (c, sn) = (th.cos(), th.sin());
        let p = g * v * v - v * (g * c + b * sn);
        let q = -b * v * v - v * (g * sn - b * c);
        (p, q)
    };
    let (mut lo, mut hi) = (-1.0, 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if s(mid).1 > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    -s(0.5 * (lo + hi)).0
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Random state box inside the relaxation caps and state limits.
pub fn random_box(m: &FixedPointModel, rng: &mut ChaCha8Rng, scale: f64) -> BoundPair {
    let n = m.n_rows();
    let mut lx = BoundPair::zeros(n);
    for r in 0..n {
        let cap = match m.a_rows[r] {
            RowKind::EdgeTheta(e) => m.caps[e].theta,
            RowKind::EdgeRho(e) => m.caps[e].rho,
            RowKind::NodeRho(_) => f64::INFINITY,
        };
        lx.hi[r] = scale * rng.random_range(0.2..1.0) * cap.min(m.lx_max.hi[r]);
        lx.lo[r] = scale * rng.random_range(0.2..1.0) * cap.min(m.lx_max.lo[r]);
    }
    lx
}

/// A point of the state polytope `{x : -lo <= A x <= hi}`; every other
/// sample is pushed out to the boundary along its ray.
pub fn sample_in(m: &FixedPointModel, lx: &BoundPair, rng: &mut ChaCha8Rng, boundary: bool) -> Option<Vec<f64>> {
    let x: Vec<f64> = (0..m.n_states).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ax = m.a_mul(&x);
    let mut s = f64::INFINITY;
    for (r, v) in ax.iter().enumerate() {
        let lim = if *v > 0.0 { lx.hi[r] } else { lx.lo[r] };
        if v.abs() > 0.0 {
            s = s.min(lim / v.abs());
        }
    }
    if !s.is_finite() || s <= 0.0 {
        return None;
    }
    let t = if boundary { s } else { s * rng.random::<f64>() };
    Some(x.iter().map(|v| v * t).collect())
}

