//! One line per acceptance criterion. Run with
//! `cargo test -p secregion --test acceptance`.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use secregion::bounds::{delta2_bounds, BoundKind, BoundPair};
use secregion::certifier::{
    certify_fixed_u, maximize, Certificate, CertificateStatus, IterationOptions, Objective, SearchOptions,
};
use secregion::powerflow::RayOptions;
use secregion::setup::{FreeInputs, Setup, Study};
use secregion::validator::{covering_ratio, default_plane, monte_carlo_soundness, tightness, trace_cross_section};

use common::*;

const SOUNDNESS_SAMPLES: usize = 500;
const SOUNDNESS_BUDGET: Duration = Duration::from_secs(120);
const RAYS: usize = 32;
const TIGHTNESS_SLACK: f64 = 2e-3;
const SECTION_BUDGET: Duration = Duration::from_secs(300);
const BOUND_SAMPLES: usize = 100_000;
const BOUND_BOXES: usize = 1_000;
const FD_TOL: f64 = 1e-6;
const LP_BUDGET: Duration = Duration::from_secs(300);
const COVER_57: (f64, f64) = (0.3, 0.75);
const TIGHT_57: (f64, f64) = (0.6, 1.0);
const TIGHT_118_MIN: f64 = 0.9;

struct Report {
    hard_failures: usize,
}

impl Report {
    fn line(&mut self, id: &str, pass: bool, hard: bool, text: String) {
        let tag = match (pass, hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "MISS (soft)",
        };
        println!("[{id}] {tag}: {text}");
        if !pass && hard {
            self.hard_failures += 1;
        }
    }
}

struct Certified {
    name: &'static str,
    study: Study,
    cert: Certificate,
}

fn certify(name: &'static str) -> Certified {
    let study = study(name);
    let cert = maximize(&study, &Objective::robustness_free(&study), &SearchOptions::default()).unwrap();
    Certified { name, study, cert }
}

fn soundness(r: &mut Report, cases: &[Certified]) {
    let mut parts = Vec::new();
    let mut ok = true;
    for c in cases.iter().filter(|c| ["case9", "case39", "case57"].contains(&c.name)) {
        let start = Instant::now();
        let rep = monte_carlo_soundness(&c.study, &c.cert, SOUNDNESS_SAMPLES, 1).unwrap();
        let t = start.elapsed();
        ok &= rep.failures == 0 && rep.samples == SOUNDNESS_SAMPLES && t < SOUNDNESS_BUDGET;
        parts.push(format!("{} {}/{} failed in {:.2?}", c.name, rep.failures, rep.samples, t));
    }
    r.line(
        "1",
        ok,
        true,
        format!("soundness, {SOUNDNESS_SAMPLES} samples, 0 failures, < {SOUNDNESS_BUDGET:?} each: {}", parts.join("; ")),
    );
}

fn inner_and_table(r: &mut Report, cases: &[Certified]) {
    let mut parts = Vec::new();
    let mut ok = true;
    let mut soft = Vec::new();
    for c in cases.iter().filter(|c| ["case9", "case57", "case118"].contains(&c.name)) {
        let start = Instant::now();
        let plane = default_plane(&c.study, &c.cert).unwrap();
        let sec = trace_cross_section(&c.study, Some(&c.cert), plane, RAYS, &RayOptions::default()).unwrap();
        let t = start.elapsed();
        let tight = tightness(&sec).unwrap();
        let cover = covering_ratio(&sec).unwrap();
        if c.name != "case118" {
            let inner = sec.rays.iter().all(|ray| ray.r_cert <= ray.r_true * (1.0 + TIGHTNESS_SLACK));
            ok &= inner && tight <= 1.0 + TIGHTNESS_SLACK && t < SECTION_BUDGET;
            parts.push(format!("{} tightness {tight:.4} in {t:.2?}", c.name));
        }
        soft.push((c.name, cover, tight));
    }
    r.line(
        "2",
        ok,
        true,
        format!("inner on {RAYS} rays, tightness <= 1 + {TIGHTNESS_SLACK}: {}", parts.join("; ")),
    );
    for (name, cover, tight) in soft {
        match name {
            "case57" => {
                let pass = (COVER_57.0..=COVER_57.1).contains(&cover) && (TIGHT_57.0..=TIGHT_57.1).contains(&tight);
                r.line(
                    "4",
                    pass,
                    false,
                    format!("case57 covering {cover:.3} in {COVER_57:?}, tightness {tight:.3} in {TIGHT_57:?}"),
                );
            }
            "case118" => r.line(
                "4",
                tight >= TIGHT_118_MIN,
                false,
                format!("case118 tightness {tight:.3} >= {TIGHT_118_MIN}, covering {cover:.3}"),
            ),
            _ => {}
        }
    }
}

fn nontrivial(r: &mut Report, cases: &[Certified]) {
    let ok = cases.iter().all(|c| c.cert.value > 0.0 && c.cert.status == CertificateStatus::CertifiedNonlinear);
    let parts: Vec<String> = cases.iter().map(|c| format!("{} {:.4e}", c.name, c.cert.value)).collect();
    r.line("3", ok, true, format!("robustness lambda > 0: {}", parts.join(", ")));
}

fn ordering(r: &mut Report, cases: &[Certified]) {
    let mut ok = true;
    let parts: Vec<String> = cases
        .iter()
        .map(|c| {
            let lp = c.cert.diagnostics.lp_value.unwrap_or(f64::NAN);
            ok &= lp <= c.cert.value;
            format!("{} {lp:.4e} <= {:.4e}", c.name, c.cert.value)
        })
        .collect();
    r.line("8", ok, true, format!("linear relaxation <= nonlinear: {}", parts.join(", ")));
}

fn bound_soundness(r: &mut Report) {
    let mut parts = Vec::new();
    let mut ok = true;
    for name in ["case9", "case39", "case57"] {
        let s = study(name);
        let m = &s.model;
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let (mut checked, mut bad) = (0usize, 0usize);
        let mut lx = BoundPair::zeros(m.n_rows());
        let mut d2 = lx.clone();
        let mut i = 0;
        while checked < BOUND_SAMPLES {
            if i % 500 == 0 {
                let scale = [1.0, 0.3, 0.05, 0.01][(i / 500) % 4];
                lx = random_box(m, &mut rng, scale);
                d2 = delta2_bounds(m, &lx, BoundKind::Exact).unwrap();
            }
            i += 1;
            let Some(x) = sample_in(m, &lx, &mut rng, i % 2 == 0) else { continue };
            checked += 1;
            let res = m.residual2(&x);
            if res.iter().enumerate().any(|(k, v)| *v > d2.hi[k] + 1e-12 || -*v > d2.lo[k] + 1e-12) {
                bad += 1;
            }
        }
        let mut dominated = 0;
        for _ in 0..BOUND_BOXES {
            let scale = rng.random_range(0.001..1.0);
            let lx = random_box(m, &mut rng, scale);
            let ex = delta2_bounds(m, &lx, BoundKind::Exact).unwrap();
            let li = delta2_bounds(m, &lx, BoundKind::Linear).unwrap();
            if (0..ex.len()).all(|k| li.hi[k] >= ex.hi[k] - 1e-14 && li.lo[k] >= ex.lo[k] - 1e-14) {
                dominated += 1;
            }
        }
        ok &= bad == 0 && dominated == BOUND_BOXES;
        parts.push(format!("{name} {bad}/{checked} outside, linear >= exact on {dominated}/{BOUND_BOXES}"));
    }
    r.line("5", ok, true, format!("residual bound soundness: {}", parts.join("; ")));
}

fn derivatives(r: &mut Report) {
    let mut worst = 0.0f64;
    let mut ratios_ok = true;
    let mut ratio_text = Vec::new();
    for name in ["case9", "case39", "case57"] {
        let s = study(name);
        let m = &s.model;
        let l = m.l.to_dense();
        let h = 1e-6;
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
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dir: Vec<f64> = (0..m.n_states).map(|_| rng.random_range(-0.1..0.1)).collect();
        let ratios: Vec<f64> = [1.0, 0.5, 0.25]
            .iter()
            .map(|a| {
                let x: Vec<f64> = dir.iter().map(|d| d * a).collect();
                max_abs(&m.residual2(&x)) / (a * max_abs(&dir))
            })
            .collect();
        ratios_ok &= ratios.windows(2).all(|w| w[1] < w[0]);
        ratio_text.push(format!("{name} {:.2e}/{:.2e}/{:.2e}", ratios[0], ratios[1], ratios[2]));
    }
    r.line(
        "6",
        worst <= FD_TOL && ratios_ok,
        true,
        format!(
            "Jacobian vs central differences max error {worst:.2e} <= {FD_TOL:e}; residual ratios decreasing: {}",
            ratio_text.join(", ")
        ),
    );
}

fn scalability(r: &mut Report) {
    let start = Instant::now();
    let s = study("case1354pegase");
    let opts = SearchOptions {
        lp_only: true,
        ..SearchOptions::default()
    };
    let out = maximize(&s, &Objective::robustness_free(&s), &opts);
    let t = start.elapsed();
    match out {
        Ok(c) => r.line(
            "7",
            c.status == CertificateStatus::CertifiedLinearRelaxation && c.value > 0.0 && t < LP_BUDGET,
            true,
            format!("case1354pegase linear relaxation lambda {:.4e} in {t:.2?} (< {LP_BUDGET:?})", c.value),
        ),
        Err(e) => r.line("7", false, true, format!("case1354pegase linear relaxation failed: {e}")),
    }
}

fn two_bus_oracle(r: &mut Report) {
    let exact = two_bus_delivered(0.99);
    let s = Study::prepare(two_bus(), &Setup::default()).unwrap();
    let cert = maximize(&s, &Objective::Loadability { direction: vec![-1.0] }, &SearchOptions::default()).unwrap();
    let delivered = -cert.injection_box.iter().find(|b| b.bus == 2).unwrap().p.0;

    let loaded = Setup {
        free: FreeInputs::AllLoads,
        ..Setup::default()
    };
    let s = Study::prepare(two_bus_loaded(0.3, 0.1), &loaded).unwrap();
    let m = &s.model;
    let w = 0.05;
    let sol = certify_fixed_u(m, &BoundPair::symmetric(vec![w; 2]), &IterationOptions::default())
        .unwrap()
        .certified();
    let inside = sol.as_ref().is_some_and(|sol| {
        [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)].iter().all(|(a, b)| {
            m.solve_newton(&[a * w, b * w], &vec![0.0; m.n_states])
                .is_ok_and(|x| sol.lx.contains(&m.a_mul(&x), 0.0))
        })
    });
    r.line(
        "9",
        delivered > 0.0 && delivered <= exact && inside,
        true,
        format!("two-bus certified load {delivered:.5} <= closed form {exact:.5}; Newton solutions at 4 vertices inside the state box: {inside}"),
    );
}

fn main() {
    let mut r = Report { hard_failures: 0 };
    let cases: Vec<Certified> = ["case9", "case39", "case57", "case118"].into_iter().map(certify).collect();
    soundness(&mut r, &cases);
    inner_and_table(&mut r, &cases);
    nontrivial(&mut r, &cases);
    bound_soundness(&mut r);
    derivatives(&mut r);
    scalability(&mut r);
    ordering(&mut r, &cases);
    two_bus_oracle(&mut r);
    if r.hard_failures > 0 {
        println!("{} hard criteria failed", r.hard_failures);
        std::process::exit(1);
    }
    println!("all hard criteria passed");
}
