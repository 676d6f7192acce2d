//! Empirical checks of certificates: Monte Carlo soundness in the power
//! domain, traced 2-D cross sections, covering ratio and tightness.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::certifier::{power_box_of, Certificate};
use crate::error::{Error, Result};
use crate::model::{InputCoord, Part};
use crate::powerflow::{ray_boundary, solve_at_injection, RayOptions};
use crate::setup::Study;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub sample: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SoundnessReport {
    pub samples: usize,
    pub failures: usize,
    /// Largest constraint or state-box violation seen.
    pub worst_violation: f64,
    /// First few failures.
    pub details: Vec<SampleFailure>,
}

/// Samples `n` injections uniformly from the certified power box, solves
/// the power flow at each and checks limits and the state box.
pub fn monte_carlo_soundness(study: &Study, cert: &Certificate, n: usize, seed: u64) -> Result<SoundnessReport> {
    let model = &study.model;
    let base_s = study.base.injections();
    let ranges: Vec<(usize, (f64, f64), (f64, f64))> = power_box_of(study, cert)?
        .iter()
        .map(|r| {
            let k = study
                .network
                .index_of(r.bus)
                .ok_or(Error::UnknownBus { element: "certificate".into(), bus: r.bus })?;
            Ok((k, r.p, r.q))
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SoundnessReport::default();
    let fail = |report: &mut SoundnessReport, sample: usize, reason: String, size: f64| {
        report.failures += 1;
        report.worst_violation = report.worst_violation.max(size);
        if report.details.len() < 20 {
            report.details.push(SampleFailure { sample, reason });
        }
    };
    for i in 0..n {
        report.samples += 1;
        let mut spec = base_s.clone();
        for &(k, p, q) in &ranges {
            let pv = p.0 + rng.random::<f64>() * (p.1 - p.0);
            let qv = q.0 + rng.random::<f64>() * (q.1 - q.0);
            spec[k] = Complex64::new(pv, qv);
        }
        let point = match solve_at_injection(&study.pf, &spec, &study.base) {
            Ok(p) => p,
            Err(e) => {
                fail(&mut report, i, format!("no solution: {e}"), f64::INFINITY);
                continue;
            }
        };
        let check = study.pf.check(&point, &study.limits);
        if let Some(v) = check.violations.iter().max_by(|a, b| a.margin.total_cmp(&b.margin)) {
            fail(&mut report, i, format!("{:?} limit at {} exceeded by {:.3e}", v.kind, v.element, v.margin), v.margin);
            continue;
        }
        let ax = model.a_mul(&model.state_of(&point));
        let excess = ax
            .iter()
            .zip(cert.lx.hi.iter().zip(&cert.lx.lo))
            .map(|(v, (h, l))| (v - h).max(-v - l))
            .fold(f64::NEG_INFINITY, f64::max);
        if excess > 1e-9 {
            fail(&mut report, i, format!("solution leaves the state box by {excess:.3e}"), excess);
        }
    }
    Ok(report)
}

/// One coordinate of a cross-section plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneAxis {
    pub bus: u32,
    pub part: Part,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaySample {
    pub angle: f64,
    pub r_true: f64,
    pub r_cert: f64,
    /// The trace hit its step ceiling, so `r_true` is only a lower bound.
    pub unbounded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSection {
    pub plane: [PlaneAxis; 2],
    pub base: (f64, f64),
    pub rays: Vec<RaySample>,
    pub true_polygon: Vec<(f64, f64)>,
    /// Counter-clockwise rectangle corners.
    pub cert_polygon: Vec<(f64, f64)>,
}

fn axis_value(s: Complex64, part: Part) -> f64 {
    match part {
        Part::G => s.re,
        Part::B => s.im,
    }
}

/// Traces `n_rays` equally spaced directions in the plane of two injection
/// coordinates and pairs each with the certified radius.
pub fn trace_cross_section(
    study: &Study,
    cert: Option<&Certificate>,
    plane: [PlaneAxis; 2],
    n_rays: usize,
    options: &RayOptions,
) -> Result<CrossSection> {
    if n_rays == 0 {
        return Err(Error::InvalidArgument("need at least one ray".into()));
    }
    let idx: Vec<usize> = plane
        .iter()
        .map(|a| {
            let k = study
                .network
                .index_of(a.bus)
                .ok_or(Error::UnknownBus { element: "cross-section plane".into(), bus: a.bus })?;
            if k == study.network.slack() {
                return Err(Error::InvalidArgument(format!("bus {} is the slack bus", a.bus)));
            }
            Ok(k)
        })
        .collect::<Result<_>>()?;
    let u_star = study.base.injections();
    let base = (axis_value(u_star[idx[0]], plane[0].part), axis_value(u_star[idx[1]], plane[1].part));

    let rect = match cert {
        Some(c) => {
            let boxes = power_box_of(study, c)?;
            let range = |axis: &PlaneAxis| -> (f64, f64) {
                boxes
                    .iter()
                    .find(|r| r.bus == axis.bus)
                    .map(|r| match axis.part {
                        Part::G => r.p,
                        Part::B => r.q,
                    })
                    .unwrap_or_else(|| {
                        let v = axis_value(u_star[study.network.index_of(axis.bus).unwrap()], axis.part);
                        (v, v)
                    })
            };
            let (a, b) = (range(&plane[0]), range(&plane[1]));
            (a.0.min(base.0), a.1.max(base.0), b.0.min(base.1), b.1.max(base.1))
        }
        None => (base.0, base.0, base.1, base.1),
    };

    let mut rays = Vec::with_capacity(n_rays);
    for i in 0..n_rays {
        let angle = 2.0 * std::f64::consts::PI * i as f64 / n_rays as f64;
        let (c, s) = (angle.cos(), angle.sin());
        let mut d = vec![Complex64::default(); u_star.len()];
        for (k, (&bus, axis)) in idx.iter().zip(&plane).enumerate() {
            let w = if k == 0 { c } else { s };
            d[bus] += match axis.part {
                Part::G => Complex64::new(w, 0.0),
                Part::B => Complex64::new(0.0, w),
            };
        }
        let trace = ray_boundary(&study.pf, &study.base, &u_star, &d, &study.limits, options)?;
        rays.push(RaySample {
            angle,
            r_true: trace.t_max,
            r_cert: rect_radius(rect, base, c, s),
            unbounded: trace.unbounded,
        });
    }
    let true_polygon = rays
        .iter()
        .map(|r| (base.0 + r.r_true * r.angle.cos(), base.1 + r.r_true * r.angle.sin()))
        .collect();
    let (x0, x1, y0, y1) = rect;
    Ok(CrossSection {
        plane,
        base,
        rays,
        true_polygon,
        cert_polygon: vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)],
    })
}

/// Distance from `base` to the rectangle boundary along `(c, s)`.
fn rect_radius(rect: (f64, f64, f64, f64), base: (f64, f64), c: f64, s: f64) -> f64 {
    let (x0, x1, y0, y1) = rect;
    let mut r = f64::INFINITY;
    if c > 1e-15 {
        r = r.min((x1 - base.0) / c);
    } else if c < -1e-15 {
        r = r.min((base.0 - x0) / -c);
    }
    if s > 1e-15 {
        r = r.min((y1 - base.1) / s);
    } else if s < -1e-15 {
        r = r.min((base.1 - y0) / -s);
    }
    r.max(0.0)
}

/// Shoelace area, positive for counter-clockwise order.
pub fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    0.5 * (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum::<f64>()
}

/// Sutherland-Hodgman clipping of `subject` against a counter-clockwise
/// convex `clip` polygon.
pub fn clip_polygon(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    if !(polygon_area(clip) > 0.0) {
        return Vec::new();
    }
    let mut out = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % n]);
        let inside = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) >= 0.0;
        let cross = |p: (f64, f64), q: (f64, f64)| {
            let (dx, dy) = (q.0 - p.0, q.1 - p.1);
            let (ex, ey) = (b.0 - a.0, b.1 - a.1);
            let den = dx * ey - dy * ex;
            let t = ((a.0 - p.0) * ey - (a.1 - p.1) * ex) / den;
            (p.0 + t * dx, p.1 + t * dy)
        };
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            match (inside(cur), inside(prev)) {
                (true, true) => out.push(cur),
                (true, false) => {
                    out.push(cross(prev, cur));
                    out.push(cur);
                }
                (false, true) => out.push(cross(prev, cur)),
                (false, false) => {}
            }
        }
    }
    out
}

/// `area(cert ∩ true) / area(true)` in the section plane.
pub fn covering_ratio(section: &CrossSection) -> Result<f64> {
    let total = polygon_area(&section.true_polygon);
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("true cross section has no area".into()));
    }
    let inter = clip_polygon(&section.true_polygon, &section.cert_polygon);
    Ok((polygon_area(&inter) / total).clamp(0.0, 1.0))
}

/// Largest certified-to-true radius ratio over the traced rays.
pub fn tightness(section: &CrossSection) -> Result<f64> {
    section
        .rays
        .iter()
        .filter(|r| r.r_true > 0.0)
        .map(|r| r.r_cert / r.r_true)
        .reduce(f64::max)
        .ok_or_else(|| Error::InvalidArgument("no ray with a positive true radius".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Runtime {
    pub soundness_s: f64,
    pub section_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub case: String,
    pub soundness: SoundnessReport,
    pub covering_ratio: Option<f64>,
    pub tightness: Option<f64>,
    /// Wall-clock times; left out when reproducible output is wanted.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub runtime: Option<Runtime>,
}

/// The two free inputs of a certificate as a plane, falling back to the
/// first two load inputs.
pub fn default_plane(study: &Study, cert: &Certificate) -> Result<[PlaneAxis; 2]> {
    let label = |c: &InputCoord| PlaneAxis {
        bus: study.network.buses[c.bus].id,
        part: c.part,
    };
    let mut axes: Vec<PlaneAxis> = cert.free.iter().map(|&i| label(&study.model.inputs[i])).collect();
    if axes.len() < 2 {
        for c in &study.model.inputs {
            let a = label(c);
            if !axes.contains(&a) {
                axes.push(a);
            }
            if axes.len() == 2 {
                break;
            }
        }
    }
    match axes.as_slice() {
        [a, b, ..] => Ok([*a, *b]),
        _ => Err(Error::InvalidArgument("study has fewer than two inputs for a plane".into())),
    }
}
