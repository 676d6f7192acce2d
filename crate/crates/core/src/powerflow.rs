//! Polar Newton power flow, operational feasibility checks and boundary
//! tracing along loading rays.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SparseLu;
use crate::network::{build_edge_admittances, BusKind, EdgeAdmittanceStructure, PowerNetwork};

/// Slack on every limit comparison, to absorb solver round-off.
pub const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub v: Vec<f64>,
    /// Angles in radians, slack at zero.
    pub theta: Vec<f64>,
    /// `ln v`.
    pub rho: Vec<f64>,
    /// Net injections.
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl OperatingPoint {
    pub fn voltage(&self, k: usize) -> Complex64 {
        Complex64::from_polar(self.v[k], self.theta[k])
    }

    pub fn injection(&self, k: usize) -> Complex64 {
        Complex64::new(self.p[k], self.q[k])
    }

    pub fn injections(&self) -> Vec<Complex64> {
        (0..self.v.len()).map(|k| self.injection(k)).collect()
    }

    /// Nodal admittance `conj(s)/|v|^2`.
    pub fn admittance(&self, k: usize) -> Complex64 {
        self.injection(k).conj() / (self.v[k] * self.v[k])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 30,
        }
    }
}

/// Reusable power flow data for one network.
#[derive(Debug, Clone)]
pub struct PowerFlow {
    pub edges: EdgeAdmittanceStructure,
    ybus: Vec<Vec<(usize, Complex64)>>,
    kinds: Vec<BusKind>,
    slack: usize,
    pvpq: Vec<usize>,
    pq: Vec<usize>,
    options: NewtonOptions,
}

impl PowerFlow {
    pub fn new(network: &PowerNetwork) -> Self {
        let edges = build_edge_admittances(network);
        let ybus = edges.bus_admittance();
        let kinds: Vec<_> = network.buses.iter().map(|b| b.kind).collect();
        let pv: Vec<_> = network.buses_of_kind(BusKind::Generator).collect();
        let pq: Vec<_> = network.buses_of_kind(BusKind::Load).collect();
        Self {
            edges,
            ybus,
            kinds,
            slack: network.slack(),
            pvpq: pv.iter().chain(&pq).copied().collect(),
            pq,
            options: NewtonOptions::default(),
        }
    }

    pub fn with_options(mut self, options: NewtonOptions) -> Self {
        self.options = options;
        self
    }

    pub fn n_buses(&self) -> usize {
        self.kinds.len()
    }

    pub fn ybus(&self) -> &[Vec<(usize, Complex64)>] {
        &self.ybus
    }

    /// Starting point from the case file, with regulated buses at their
    /// set points.
    pub fn flat_start(&self, network: &PowerNetwork) -> OperatingPoint {
        let v: Vec<f64> = network.buses.iter().map(|b| b.v_init).collect();
        let theta0 = network.buses[self.slack].theta_init;
        let theta: Vec<f64> = network.buses.iter().map(|b| b.theta_init - theta0).collect();
        let s = network.buses.iter().map(|b| b.scheduled_injection()).collect::<Vec<_>>();
        OperatingPoint {
            rho: v.iter().map(|x| x.ln()).collect(),
            p: s.iter().map(|x| x.re).collect(),
            q: s.iter().map(|x| x.im).collect(),
            v,
            theta,
        }
    }

    fn power(&self, v: &[Complex64]) -> Vec<Complex64> {
        self.ybus
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let current: Complex64 = row.iter().map(|(j, y)| y * v[*j]).sum();
                v[i] * current.conj()
            })
            .collect()
    }

    fn mismatch(&self, s_calc: &[Complex64], spec: &[Complex64]) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.pvpq.len() + self.pq.len());
        f.extend(self.pvpq.iter().map(|&k| s_calc[k].re - spec[k].re));
        f.extend(self.pq.iter().map(|&k| s_calc[k].im - spec[k].im));
        f
    }

    fn jacobian(&self, v: &[Complex64]) -> Vec<(usize, usize, f64)> {
        let n = self.n_buses();
        let npvpq = self.pvpq.len();
        let mut theta_col = vec![usize::MAX; n];
        let mut v_col = vec![usize::MAX; n];
        for (c, &k) in self.pvpq.iter().enumerate() {
            theta_col[k] = c;
        }
        for (c, &k) in self.pq.iter().enumerate() {
            v_col[k] = npvpq + c;
        }
        let mut p_row = vec![usize::MAX; n];
        let mut q_row = vec![usize::MAX; n];
        for (r, &k) in self.pvpq.iter().enumerate() {
            p_row[k] = r;
        }
        for (r, &k) in self.pq.iter().enumerate() {
            q_row[k] = npvpq + r;
        }

        let mut triplets = Vec::new();
        let j = Complex64::i();
        for &i in &self.pvpq {
            let current: Complex64 = self.ybus[i].iter().map(|(l, y)| y * v[*l]).sum();
            for &(l, y) in &self.ybus[i] {
                let diag = if l == i { current } else { Complex64::default() };
                let ds_dva = j * v[i] * (diag - y * v[l]).conj();
                let mut ds_dvm = v[i] * (y * v[l] / v[l].norm()).conj();
                if l == i {
                    ds_dvm += current.conj() * v[i] / v[i].norm();
                }
                for (row, part) in [(p_row[i], 0), (q_row[i], 1)] {
                    if row == usize::MAX {
                        continue;
                    }
                    let pick = |z: Complex64| if part == 0 { z.re } else { z.im };
                    if theta_col[l] != usize::MAX {
                        triplets.push((row, theta_col[l], pick(ds_dva)));
                    }
                    if v_col[l] != usize::MAX {
                        triplets.push((row, v_col[l], pick(ds_dvm)));
                    }
                }
            }
        }
        triplets
    }

    /// Solves for the given net injections. Slack injection and generator
    /// reactive injections in `spec` are ignored; regulated voltages come
    /// from `init`.
    pub fn solve(&self, spec: &[Complex64], init: &OperatingPoint) -> Result<OperatingPoint> {
        let n = self.n_buses();
        assert_eq!(spec.len(), n);
        let mut vm = init.v.clone();
        let mut va = init.theta.clone();
        let mut trace = Vec::new();
        let npvpq = self.pvpq.len();
        for iteration in 0..=self.options.max_iterations {
            let v: Vec<Complex64> = (0..n).map(|k| Complex64::from_polar(vm[k], va[k])).collect();
            let s_calc = self.power(&v);
            let f = self.mismatch(&s_calc, spec);
            let norm = f.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            trace.push(norm);
            if !norm.is_finite() {
                break;
            }
            if norm <= self.options.tolerance {
                return Ok(OperatingPoint {
                    rho: vm.iter().map(|x| x.ln()).collect(),
                    p: s_calc.iter().map(|s| s.re).collect(),
                    q: s_calc.iter().map(|s| s.im).collect(),
                    v: vm,
                    theta: va,
                });
            }
            if iteration == self.options.max_iterations {
                break;
            }
            let lu = match SparseLu::factor(f.len(), &self.jacobian(&v)) {
                Ok(lu) => lu,
                Err(_) => break,
            };
            let mut dx: Vec<f64> = f.iter().map(|x| -x).collect();
            if lu.solve(&mut dx).is_err() {
                break;
            }
            for (c, &k) in self.pvpq.iter().enumerate() {
                va[k] += dx[c];
            }
            for (c, &k) in self.pq.iter().enumerate() {
                vm[k] += dx[npvpq + c];
            }
            if vm.iter().any(|x| !(*x > 0.0)) {
                break;
            }
        }
        Err(Error::NoConvergence {
            iterations: trace.len().saturating_sub(1),
            mismatch: *trace.last().unwrap_or(&f64::NAN),
            trace,
        })
    }

    /// Largest absolute power mismatch of `point` against its own injections.
    pub fn residual(&self, point: &OperatingPoint) -> f64 {
        let v: Vec<Complex64> = (0..self.n_buses()).map(|k| point.voltage(k)).collect();
        self.power(&v)
            .iter()
            .enumerate()
            .fold(0.0f64, |m, (k, s)| m.max((s - point.injection(k)).norm()))
    }

    /// Complex power entering each branch at its from and to terminals.
    pub fn branch_flows(&self, point: &OperatingPoint) -> Vec<(Complex64, Complex64)> {
        let e = &self.edges;
        (0..e.n_edges())
            .map(|k| {
                let (f, t) = (e.from[k], e.to[k]);
                let (vf, vt) = (point.voltage(f), point.voltage(t));
                let sf = vf * (e.y_ff[k] * vf + e.yf[k] * vt).conj();
                let st = vt * (e.y_tt[k] * vt + e.yt[k] * vf).conj();
                (sf, st)
            })
            .collect()
    }

    pub fn check(&self, point: &OperatingPoint, limits: &ActiveLimits) -> FeasibilityReport {
        let mut violations = Vec::new();
        let mut push = |kind, element, value: f64, limit: f64, upper: bool| {
            let margin = if upper { value - limit } else { limit - value };
            if margin > FEASIBILITY_TOL {
                violations.push(Violation {
                    kind,
                    element,
                    value,
                    limit,
                    margin,
                });
            }
        };
        for k in 0..self.n_buses() {
            push(ConstraintKind::Voltage, k, point.v[k], limits.v_max[k], true);
            push(ConstraintKind::Voltage, k, point.v[k], limits.v_min[k], false);
            if self.kinds[k] == BusKind::Generator {
                if let Some((lo, hi)) = limits.p_gen[k] {
                    push(ConstraintKind::PGen, k, point.p[k], hi, true);
                    push(ConstraintKind::PGen, k, point.p[k], lo, false);
                }
                if let Some((lo, hi)) = limits.q_gen[k] {
                    push(ConstraintKind::QGen, k, point.q[k], hi, true);
                    push(ConstraintKind::QGen, k, point.q[k], lo, false);
                }
            }
        }
        for (e, (f, t)) in self.edges.from.iter().zip(&self.edges.to).enumerate() {
            if let Some((lo, hi)) = limits.angle[e] {
                let d = point.theta[*f] - point.theta[*t];
                push(ConstraintKind::AngleDifference, e, d, hi, true);
                push(ConstraintKind::AngleDifference, e, d, lo, false);
            }
        }
        if limits.s_max.iter().any(Option::is_some) {
            for (e, (sf, st)) in self.branch_flows(point).into_iter().enumerate() {
                if let Some(s_max) = limits.s_max[e] {
                    push(ConstraintKind::Thermal, e, sf.norm().max(st.norm()), s_max, true);
                }
            }
        }
        FeasibilityReport {
            feasible: violations.is_empty(),
            violations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintKind {
    Voltage,
    AngleDifference,
    PGen,
    QGen,
    Thermal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ConstraintKind,
    /// Bus index for nodal limits, branch index otherwise.
    pub element: usize,
    pub value: f64,
    pub limit: f64,
    /// Amount by which the limit is exceeded (positive).
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    pub violations: Vec<Violation>,
}

/// Operational limits in force for a study. `None` entries are not checked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveLimits {
    pub v_min: Vec<f64>,
    pub v_max: Vec<f64>,
    /// Per branch, on `θ_from - θ_to`.
    pub angle: Vec<Option<(f64, f64)>>,
    /// Net injection limits per bus, checked at generator buses only.
    pub p_gen: Vec<Option<(f64, f64)>>,
    pub q_gen: Vec<Option<(f64, f64)>>,
    pub s_max: Vec<Option<f64>>,
}

impl ActiveLimits {
    /// Every limit stated in the case file.
    pub fn from_network(network: &PowerNetwork) -> Self {
        Self {
            v_min: network.buses.iter().map(|b| b.v_min).collect(),
            v_max: network.buses.iter().map(|b| b.v_max).collect(),
            angle: network
                .branches
                .iter()
                .map(|br| match (br.angle_min, br.angle_max) {
                    (None, None) => None,
                    (lo, hi) => Some((lo.unwrap_or(-std::f64::consts::PI), hi.unwrap_or(std::f64::consts::PI))),
                })
                .collect(),
            p_gen: network.buses.iter().map(|b| b.p_limits()).collect(),
            q_gen: network.buses.iter().map(|b| b.q_limits()).collect(),
            s_max: network.branches.iter().map(|br| br.s_max).collect(),
        }
    }

    /// Voltage limits only, on a band of relative width `band` around
    /// `base`, for a network with `n_branches` branches.
    pub fn voltage_band(base: &OperatingPoint, band: f64, n_branches: usize) -> Self {
        let n = base.v.len();
        Self {
            v_min: base.v.iter().map(|v| v * (1.0 - band)).collect(),
            v_max: base.v.iter().map(|v| v * (1.0 + band)).collect(),
            angle: vec![None; n_branches],
            p_gen: vec![None; n],
            q_gen: vec![None; n],
            s_max: vec![None; n_branches],
        }
    }
}

/// Free-function form of [`PowerFlow::solve`] starting from the case data.
pub fn solve_base(network: &PowerNetwork, init: Option<&OperatingPoint>) -> Result<OperatingPoint> {
    let pf = PowerFlow::new(network);
    let start = init.cloned().unwrap_or_else(|| pf.flat_start(network));
    let spec: Vec<_> = network.buses.iter().map(|b| b.scheduled_injection()).collect();
    pf.solve(&spec, &start)
}

/// Solves at net injections `u`, warm-started from `init`.
pub fn solve_at_injection(pf: &PowerFlow, u: &[Complex64], init: &OperatingPoint) -> Result<OperatingPoint> {
    pf.solve(u, init)
}

pub fn check_point_feasible(
    network: &PowerNetwork,
    point: &OperatingPoint,
    limits: &ActiveLimits,
) -> FeasibilityReport {
    PowerFlow::new(network).check(point, limits)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayOptions {
    pub initial_step: f64,
    pub rel_tol: f64,
    /// Give up doubling beyond this step.
    pub max_step: f64,
    pub warm_start: bool,
}

impl Default for RayOptions {
    fn default() -> Self {
        Self {
            initial_step: 0.1,
            rel_tol: 1e-3,
            max_step: 1e3,
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub t: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RayTrace {
    pub t_max: f64,
    /// Every tested step in order.
    pub probes: Vec<Probe>,
    /// The search hit `max_step` without finding an infeasible step.
    pub unbounded: bool,
}

impl RayTrace {
    /// True when every accepted probe lies at or below `t_max` and every
    /// rejected one above it.
    pub fn bracket_consistent(&self) -> bool {
        self.probes
            .iter()
            .all(|p| if p.feasible { p.t <= self.t_max } else { p.t > self.t_max })
    }
}

/// Largest `t` such that injections `u_star + t d` admit a feasible solution,
/// found by doubling then bisection. Slack entries of `d` are ignored.
pub fn ray_boundary(
    pf: &PowerFlow,
    base: &OperatingPoint,
    u_star: &[Complex64],
    d: &[Complex64],
    limits: &ActiveLimits,
    options: &RayOptions,
) -> Result<RayTrace> {
    let moving = d
        .iter()
        .enumerate()
        .any(|(k, z)| k != pf.slack && z.norm() > 0.0);
    if !moving {
        return Err(Error::InvalidArgument("ray direction is zero".into()));
    }
    let report = pf.check(base, limits);
    if !report.feasible {
        return Err(Error::BaseInfeasible(format!(
            "{} violated limits at the base point",
            report.violations.len()
        )));
    }

    let mut probes = Vec::new();
    let mut lo = 0.0;
    let mut lo_point = base.clone();
    let test = |t: f64, from: &OperatingPoint, probes: &mut Vec<Probe>| -> Option<OperatingPoint> {
        let spec: Vec<_> = u_star.iter().zip(d).map(|(u, dk)| u + dk * t).collect();
        let start = if options.warm_start { from } else { base };
        let out = pf
            .solve(&spec, start)
            .ok()
            .filter(|p| pf.check(p, limits).feasible);
        probes.push(Probe {
            t,
            feasible: out.is_some(),
        });
        out
    };

    let mut hi = options.initial_step;
    loop {
        match test(hi, &lo_point, &mut probes) {
            Some(p) => {
                lo = hi;
                lo_point = p;
                hi *= 2.0;
                if hi > options.max_step {
                    return Ok(RayTrace {
                        t_max: lo,
                        probes,
                        unbounded: true,
                    });
                }
            }
            None => break,
        }
    }
    while hi - lo > options.rel_tol * hi {
        let mid = 0.5 * (lo + hi);
        match test(mid, &lo_point, &mut probes) {
            Some(p) => {
                lo = mid;
                lo_point = p;
            }
            None => hi = mid,
        }
    }
    Ok(RayTrace {
        t_max: lo,
        probes,
        unbounded: false,
    })
}
