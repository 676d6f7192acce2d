//! Self-mapping and operational checks, the fixed-`u` monotone iteration,
//! the linear relaxation and the objective search that produce
//! [`Certificate`]s.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::{allowance, allowance_linear, delta2_bounds, delta2_with_caps, BoundKind, BoundPair, RelaxationCaps, Spread};
use crate::error::{Error, Result};
use crate::model::{FixedPointModel, OperationalKind, Part, RowKind};
use crate::setup::{DroppedLimit, Setup, Study};

pub const CERTIFICATE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Objective {
    /// Largest `t` with `ũ = t d` certified, `d` over the free inputs.
    Loadability { direction: Vec<f64> },
    /// Largest `λ` with `ℓ_u^± = λ w` on the free inputs.
    Robustness { weights: Vec<f64> },
    /// Best chance score for independent inputs with these deviations.
    Chance { std_devs: Vec<f64> },
}

impl Objective {
    /// Uniform robustness over every free input of the study.
    pub fn robustness_free(study: &Study) -> Self {
        Objective::Robustness {
            weights: vec![1.0; study.free.len()],
        }
    }

    pub fn validate(&self, n_free: usize) -> Result<()> {
        let (v, name) = match self {
            Objective::Loadability { direction } => (direction, "direction"),
            Objective::Robustness { weights } => (weights, "weights"),
            Objective::Chance { std_devs } => (std_devs, "std-devs"),
        };
        if v.len() != n_free {
            return Err(Error::InvalidArgument(format!(
                "objective {name} has {} entries for {n_free} free inputs",
                v.len()
            )));
        }
        let ok = match self {
            Objective::Loadability { direction } => direction.iter().any(|d| *d != 0.0) && direction.iter().all(|d| d.is_finite()),
            _ => v.iter().all(|w| *w > 0.0 && w.is_finite()),
        };
        if !ok {
            return Err(Error::InvalidArgument(format!("objective {name} is degenerate: {v:?}")));
        }
        Ok(())
    }

    /// Declared box at unit scale for the scalar objectives.
    fn unit_box(&self, n_inputs: usize, free: &[usize]) -> BoundPair {
        let mut b = BoundPair::zeros(n_inputs);
        match self {
            Objective::Loadability { direction } => {
                for (k, &i) in free.iter().enumerate() {
                    b.hi[i] = direction[k].max(0.0);
                    b.lo[i] = (-direction[k]).max(0.0);
                }
            }
            Objective::Robustness { weights: w } | Objective::Chance { std_devs: w } => {
                for (k, &i) in free.iter().enumerate() {
                    b.hi[i] = w[k];
                    b.lo[i] = w[k];
                }
            }
        }
        b
    }
}

/// The chance score `½ Σ_k erf(ℓ⁺_k / (σ_k √2)) - erf(-ℓ⁻_k / (σ_k √2))`.
pub fn chance_score(lu: &BoundPair, free: &[usize], std_devs: &[f64]) -> f64 {
    let r2 = std::f64::consts::SQRT_2;
    0.5 * free
        .iter()
        .zip(std_devs)
        .map(|(&i, s)| libm::erf(lu.hi[i] / (s * r2)) - libm::erf(-lu.lo[i] / (s * r2)))
        .sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CertificateStatus {
    CertifiedNonlinear,
    CertifiedLinearRelaxation,
}

/// Certified power ranges of one varying bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionRange {
    pub bus: u32,
    pub p: (f64, f64),
    pub q: (f64, f64),
    /// Voltage band the translation assumed.
    pub v: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputLabel {
    pub bus: u32,
    pub part: Part,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Diagnostics {
    /// Monotone iterations of the final fixed-`u` solve.
    pub iterations: usize,
    /// Certification attempts made by the search.
    pub probes: usize,
    pub lp_value: Option<f64>,
    /// Smallest slack rows at the returned boxes.
    pub binding: Vec<String>,
    /// What stopped the search one step further out.
    pub limiting: Option<String>,
    pub dropped: Vec<DroppedLimit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub version: u32,
    pub case: String,
    /// Limits and inputs the certificate was computed under.
    pub setup: Setup,
    pub objective: Objective,
    pub value: f64,
    pub status: CertificateStatus,
    pub inputs: Vec<InputLabel>,
    /// Positions in `inputs` the objective acted on.
    pub free: Vec<usize>,
    /// Declared admittance box.
    pub lu: BoundPair,
    /// Declared box plus the drift allowance of constant-power loads; the
    /// box the self-mapping condition was checked on.
    pub lu_effective: BoundPair,
    pub lx: BoundPair,
    pub injection_box: Vec<InjectionRange>,
    pub diagnostics: Diagnostics,
}

/// Signed slack per row and side; negative entries are violations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSlack {
    pub hi: Vec<f64>,
    pub lo: Vec<f64>,
}

impl RowSlack {
    /// `(row, is_upper_side, slack)` of the smallest slack.
    pub fn min(&self) -> Option<(usize, bool, f64)> {
        let hi = self.hi.iter().enumerate().map(|(i, v)| (i, true, *v));
        let lo = self.lo.iter().enumerate().map(|(i, v)| (i, false, *v));
        hi.chain(lo).min_by(|a, b| a.2.total_cmp(&b.2))
    }

    pub fn holds(&self) -> bool {
        self.hi.iter().chain(&self.lo).all(|v| *v >= 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub holds: bool,
    pub slack: RowSlack,
}

impl Check {
    fn from_slack(slack: RowSlack) -> Self {
        Self {
            holds: slack.holds(),
            slack,
        }
    }
}

/// Drift allowance of every input whose bus voltage moves within `lx`.
pub fn allowance_box(model: &FixedPointModel, lx: &BoundPair, kind: BoundKind) -> BoundPair {
    let mut out = BoundPair::zeros(model.n_inputs());
    for (i, row) in model.input_rho_row.iter().enumerate() {
        let Some(r) = *row else { continue };
        let spread = Spread::new(lx.lo[r], lx.hi[r]);
        let c = model.input_admittance[i];
        let a = match kind {
            BoundKind::Exact => allowance(c, spread),
            BoundKind::Linear => allowance_linear(c, spread, model.lx_max.lo[r]),
        };
        out.lo[i] = a.lo;
        out.hi[i] = a.hi;
    }
    out
}

pub fn effective_lu(model: &FixedPointModel, lu: &BoundPair, lx: &BoundPair) -> BoundPair {
    lu.add(&allowance_box(model, lx, BoundKind::Exact))
}

fn self_map_slack(model: &FixedPointModel, lx: &BoundPair, lu_eff: &BoundPair, d2: &BoundPair) -> RowSlack {
    let rhs = model.b_apply(lu_eff).add(&model.c_apply(d2));
    RowSlack {
        hi: lx.hi.iter().zip(&rhs.hi).map(|(l, r)| l - r).collect(),
        lo: lx.lo.iter().zip(&rhs.lo).map(|(l, r)| l - r).collect(),
    }
}

fn operational_slack(model: &FixedPointModel, lu_eff: &BoundPair, d2: &BoundPair) -> RowSlack {
    let out = model.d_apply(lu_eff).add(&model.e_apply(d2));
    RowSlack {
        hi: model.ops.iter().zip(&out.hi).map(|(op, o)| op.hi - op.base - o).collect(),
        lo: model.ops.iter().zip(&out.lo).map(|(op, o)| op.base - op.lo - o).collect(),
    }
}

/// `ℓ_x ≥ σ(ℓ_u) + τ(ℓ_x)` with exact residual bounds, the declared `lu`
/// widened by the constant-power allowance.
pub fn self_map_holds(model: &FixedPointModel, lx: &BoundPair, lu: &BoundPair) -> Result<Check> {
    let d2 = delta2_bounds(model, lx, BoundKind::Exact)?;
    Ok(Check::from_slack(self_map_slack(model, lx, &effective_lu(model, lu, lx), &d2)))
}

/// Operational rows `D ℓ_u + E δ₂f + h* ≤ 0` on both sides.
pub fn operational_holds(model: &FixedPointModel, lx: &BoundPair, lu: &BoundPair) -> Result<Check> {
    let d2 = delta2_bounds(model, lx, BoundKind::Exact)?;
    Ok(Check::from_slack(operational_slack(model, &effective_lu(model, lu, lx), &d2)))
}

/// Both checks on an explicit effective input box, plus `lx ≤ lx_max` and
/// `lu_eff ⊇ lu + allowance(lx)`.
pub fn check_boxes(model: &FixedPointModel, lx: &BoundPair, lu: &BoundPair, lu_eff: &BoundPair) -> Result<(Check, Check)> {
    if lx.first_excess(&model.lx_max).is_some() {
        return Err(Error::InvalidArgument("state box exceeds its limits".into()));
    }
    if !effective_lu(model, lu, lx).le(lu_eff) {
        return Err(Error::InvalidArgument("effective input box does not cover the allowance".into()));
    }
    let d2 = delta2_bounds(model, lx, BoundKind::Exact)?;
    Ok((
        Check::from_slack(self_map_slack(model, lx, lu_eff, &d2)),
        Check::from_slack(operational_slack(model, lu_eff, &d2)),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Infeasibility {
    StateLimit { row: usize, value: f64, limit: f64 },
    Operational { row: usize, upper: bool, slack: f64 },
    NotSelfMapped { row: usize, slack: f64 },
    NotConverged { iterations: usize },
}

impl Infeasibility {
    pub fn describe(&self, model: &FixedPointModel) -> String {
        match self {
            Infeasibility::StateLimit { row, value, limit } => {
                format!("{} reached {value:.4e} (limit {limit:.4e})", describe_row(model, *row))
            }
            Infeasibility::Operational { row, upper, slack } => {
                let op = &model.ops[*row];
                format!(
                    "{:?} {} {} side short by {:.4e}",
                    op.kind,
                    op.element,
                    if *upper { "upper" } else { "lower" },
                    -slack
                )
            }
            Infeasibility::NotSelfMapped { row, slack } => {
                format!("{} not self-mapped (slack {slack:.4e})", describe_row(model, *row))
            }
            Infeasibility::NotConverged { iterations } => {
                format!("state box still growing after {iterations} iterations")
            }
        }
    }
}

fn describe_row(model: &FixedPointModel, row: usize) -> String {
    match model.a_rows[row] {
        RowKind::EdgeTheta(e) => format!("angle difference on edge {e}"),
        RowKind::EdgeRho(e) => format!("log-voltage difference on edge {e}"),
        RowKind::NodeRho(k) => format!("log-voltage of bus index {k}"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedUSolution {
    pub lx: BoundPair,
    pub lu_effective: BoundPair,
    pub iterations: usize,
    pub self_map: Check,
    pub operational: Check,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FixedU {
    Certified(Box<FixedUSolution>),
    Infeasible(Infeasibility),
}

impl FixedU {
    pub fn certified(self) -> Option<FixedUSolution> {
        match self {
            FixedU::Certified(s) => Some(*s),
            FixedU::Infeasible(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationOptions {
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for IterationOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tolerance: 1e-10,
        }
    }
}

/// Least self-mapped state box for the declared input box `lu`, by the
/// monotone iteration `ℓ ← σ(lu + allowance(ℓ)) + τ(ℓ)` from zero.
pub fn certify_fixed_u(model: &FixedPointModel, lu: &BoundPair, options: &IterationOptions) -> Result<FixedU> {
    if lu.len() != model.n_inputs() {
        return Err(Error::InvalidArgument(format!(
            "input box has {} entries, model has {} inputs",
            lu.len(),
            model.n_inputs()
        )));
    }
    BoundPair::new(lu.lo.clone(), lu.hi.clone())?;
    let mut l = BoundPair::zeros(model.n_rows());
    let mut prev_diff = f64::INFINITY;
    let mut last = None;
    for k in 0..options.max_iterations {
        let d2 = delta2_bounds(model, &l, BoundKind::Exact)?;
        let lu_eff = effective_lu(model, lu, &l);
        let next = model.b_apply(&lu_eff).add(&model.c_apply(&d2));
        debug_assert!(
            l.le(&next.add(&BoundPair::symmetric(vec![1e-12 * (1.0 + next.max_abs()); next.len()]))),
            "monotone iteration decreased"
        );
        if let Some((row, value, limit)) = next.first_excess(&model.lx_max) {
            return Ok(FixedU::Infeasible(Infeasibility::StateLimit { row, value, limit }));
        }
        let diff = next.max_diff(&l);
        let size = next.max_abs();
        let ratio = if prev_diff > 0.0 && prev_diff.is_finite() { diff / prev_diff } else { 0.0 };
        let step = BoundPair {
            lo: next.lo.iter().zip(&l.lo).map(|(a, b)| (a - b).max(0.0)).collect(),
            hi: next.hi.iter().zip(&l.hi).map(|(a, b)| (a - b).max(0.0)).collect(),
        };
        l = next;
        prev_diff = diff;
        let converged = diff <= options.tolerance * size;
        let attempt = converged || (k >= 3 && k % 4 == 3) || k + 1 == options.max_iterations;
        if attempt && ratio < 1.0 {
            // geometric tail estimate, doubled
            let gain = if converged { 0.0 } else { 2.0 * ratio / (1.0 - ratio) };
            let mut cand = l.add(&step.scaled(gain)).scaled(1.0 + 1e-6);
            let floor = 1e-6 * size;
            for i in 0..cand.len() {
                cand.hi[i] = (cand.hi[i] + floor).min(model.lx_max.hi[i]).max(l.hi[i]);
                cand.lo[i] = (cand.lo[i] + floor).min(model.lx_max.lo[i]).max(l.lo[i]);
            }
            match try_candidate(model, lu, cand, k + 1)? {
                Ok(sol) => return Ok(FixedU::Certified(Box::new(sol))),
                Err(why @ Infeasibility::Operational { .. }) => {
                    // the least fixed point lies above `l`, so a violation there is final
                    let d2 = delta2_bounds(model, &l, BoundKind::Exact)?;
                    let op = operational_slack(model, &effective_lu(model, lu, &l), &d2);
                    if !op.holds() {
                        let (row, upper, slack) = op.min().unwrap();
                        return Ok(FixedU::Infeasible(Infeasibility::Operational { row, upper, slack }));
                    }
                    last = Some(why);
                }
                Err(why) => last = Some(why),
            }
        }
        if converged {
            break;
        }
    }
    Ok(FixedU::Infeasible(last.unwrap_or(Infeasibility::NotConverged {
        iterations: options.max_iterations,
    })))
}

fn try_candidate(model: &FixedPointModel, lu: &BoundPair, lc: BoundPair, iterations: usize) -> Result<Result<FixedUSolution, Infeasibility>> {
    let lu_eff = effective_lu(model, lu, &lc);
    let d2 = delta2_bounds(model, &lc, BoundKind::Exact)?;
    let self_map = Check::from_slack(self_map_slack(model, &lc, &lu_eff, &d2));
    if !self_map.holds {
        let (row, _, slack) = self_map.slack.min().unwrap();
        return Ok(Err(Infeasibility::NotSelfMapped { row, slack }));
    }
    let operational = Check::from_slack(operational_slack(model, &lu_eff, &d2));
    if !operational.holds {
        let (row, upper, slack) = operational.slack.min().unwrap();
        return Ok(Err(Infeasibility::Operational { row, upper, slack }));
    }
    Ok(Ok(FixedUSolution {
        lx: lc,
        lu_effective: lu_eff,
        iterations,
        self_map,
        operational,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOptions {
    pub rel_tol: f64,
    pub iteration: IterationOptions,
    /// Stop after the linear relaxation.
    pub lp_only: bool,
    /// Cap scalings tried by the linear relaxation.
    pub lp_cap_scales: Vec<f64>,
    pub lp_max_iterations: usize,
    /// Minimum chance-score gain for a coordinate step to count.
    pub chance_tol: f64,
    pub max_scale: f64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-3,
            iteration: IterationOptions::default(),
            lp_only: false,
            lp_cap_scales: vec![1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125],
            lp_max_iterations: 2000,
            chance_tol: 1e-4,
            max_scale: 1e6,
        }
    }
}

/// Linear-relaxation certificate along a unit input box.
#[derive(Debug, Clone, PartialEq)]
pub struct LpRelaxation {
    /// Certified scale of the unit box.
    pub lambda: f64,
    /// Least solution of `ℓ = σ(u + a(ℓ)) + τ_lin(ℓ)` at unit scale.
    pub lx_unit: BoundPair,
    pub lu_effective_unit: BoundPair,
    pub caps: Vec<RelaxationCaps>,
    pub cap_scale: f64,
    pub iterations: usize,
    pub limiting: String,
}

impl LpRelaxation {
    pub fn lx(&self) -> BoundPair {
        self.lx_unit.scaled(self.lambda)
    }

    pub fn lu_effective(&self) -> BoundPair {
        self.lu_effective_unit.scaled(self.lambda)
    }
}

/// With linear residual bounds and linear allowances every map is
/// positively homogeneous, so the least state box scales with the input
/// box: `ℓ(λ) = λ ℓ(1)`. The largest admissible `λ` then follows from the
/// caps, `ℓ_x^max` and the operational rows in closed form.
pub fn lp_relaxation_init(model: &FixedPointModel, lu_unit: &BoundPair, options: &SearchOptions) -> Result<LpRelaxation> {
    let mut best: Option<LpRelaxation> = None;
    let mut worst_ratio: f64 = 0.0;
    for &scale in &options.lp_cap_scales {
        let caps: Vec<RelaxationCaps> = model
            .caps
            .iter()
            .map(|c| RelaxationCaps {
                theta: c.theta * scale,
                rho: c.rho * scale,
            })
            .collect();
        let floor = best.as_ref().map_or(0.0, |b| b.lambda);
        match lp_at_caps(model, lu_unit, &caps, options.lp_max_iterations, floor) {
            Ok(Some((l, lu_eff, iterations))) => {
                let (lambda, limiting) = lp_scale(model, &l, &lu_eff, &caps, options.max_scale)?;
                let lambda = lambda * (1.0 - 1e-9);
                log::debug!("linear relaxation at cap scale {scale}: lambda {lambda:.6e} ({limiting})");
                if lambda > floor {
                    best = Some(LpRelaxation {
                        lambda,
                        lx_unit: l,
                        lu_effective_unit: lu_eff,
                        caps,
                        cap_scale: scale,
                        iterations,
                        limiting,
                    });
                }
            }
            Ok(None) => log::debug!("linear relaxation at cap scale {scale}: cannot beat {floor:.6e}"),
            Err(Error::RelaxationDiverged { ratio }) => worst_ratio = worst_ratio.max(ratio),
            Err(e) => return Err(e),
        }
    }
    best.ok_or(Error::RelaxationDiverged { ratio: worst_ratio })
}

/// Upper bound on the admissible scale from the state rows of `l` alone.
fn state_scale_bound(model: &FixedPointModel, l: &BoundPair, caps: &[RelaxationCaps]) -> f64 {
    let mut lambda = f64::INFINITY;
    for r in 0..l.len() {
        let cap = match model.a_rows[r] {
            RowKind::EdgeTheta(e) => caps[e].theta,
            RowKind::EdgeRho(e) => caps[e].rho,
            RowKind::NodeRho(_) => f64::INFINITY,
        };
        for (v, lim) in [(l.hi[r], model.lx_max.hi[r]), (l.lo[r], model.lx_max.lo[r])] {
            if v > 0.0 {
                lambda = lambda.min(lim.min(cap) / v);
            }
        }
    }
    lambda
}

/// Least solution at unit scale, or `None` once the increasing iterates
/// show the scale cannot exceed `floor`.
fn lp_at_caps(
    model: &FixedPointModel,
    lu_unit: &BoundPair,
    caps: &[RelaxationCaps],
    max_iter: usize,
    floor: f64,
) -> Result<Option<(BoundPair, BoundPair, usize)>> {
    let map = |l: &BoundPair| -> Result<(BoundPair, BoundPair)> {
        let lu_eff = lu_unit.add(&allowance_box(model, l, BoundKind::Linear));
        let d2 = delta2_with_caps(model, l, BoundKind::Linear, caps, false)?;
        Ok((model.b_apply(&lu_eff).add(&model.c_apply(&d2)), lu_eff))
    };
    let mut l = BoundPair::zeros(model.n_rows());
    let mut prev_diff = f64::INFINITY;
    let mut ratio: f64 = 0.0;
    for k in 0..max_iter {
        let (next, _) = map(&l)?;
        let diff = next.max_diff(&l);
        let size = next.max_abs();
        if !size.is_finite() || size > 1e12 {
            return Err(Error::RelaxationDiverged { ratio: ratio.max(1.0) });
        }
        if k > 0 && prev_diff > 0.0 {
            ratio = diff / prev_diff;
        }
        let step = BoundPair {
            lo: next.lo.iter().zip(&l.lo).map(|(a, b)| (a - b).max(0.0)).collect(),
            hi: next.hi.iter().zip(&l.hi).map(|(a, b)| (a - b).max(0.0)).collect(),
        };
        l = next;
        prev_diff = diff;
        if state_scale_bound(model, &l, caps) <= floor {
            return Ok(None);
        }
        if k >= 30 && ratio >= 1.0 {
            return Err(Error::RelaxationDiverged { ratio });
        }
        if diff <= 1e-9 * size && ratio < 1.0 {
            let gain = 2.0 * ratio / (1.0 - ratio);
            let cand = l.add(&step.scaled(gain)).scaled(1.0 + 1e-8);
            let (image, lu_eff) = map(&cand)?;
            if image.le(&cand) {
                return Ok(Some((cand, lu_eff, k + 1)));
            }
        }
    }
    Err(Error::RelaxationDiverged { ratio: ratio.max(1.0) })
}

fn lp_scale(model: &FixedPointModel, l: &BoundPair, lu_eff: &BoundPair, caps: &[RelaxationCaps], max_scale: f64) -> Result<(f64, String)> {
    let mut lambda = max_scale;
    let mut limiting = "scale ceiling".to_string();
    let mut limit_by = |bound: f64, value: f64, what: &dyn Fn() -> String| {
        if value > 0.0 {
            let s = bound.max(0.0) / value;
            if s < lambda {
                lambda = s;
                limiting = what();
            }
        }
    };
    for r in 0..l.len() {
        let cap = match model.a_rows[r] {
            RowKind::EdgeTheta(e) => caps[e].theta,
            RowKind::EdgeRho(e) => caps[e].rho,
            RowKind::NodeRho(_) => f64::INFINITY,
        };
        for (v, lim) in [(l.hi[r], model.lx_max.hi[r]), (l.lo[r], model.lx_max.lo[r])] {
            limit_by(lim.min(cap), v, &|| describe_row(model, r));
        }
    }
    let d2 = delta2_with_caps(model, l, BoundKind::Linear, caps, false)?;
    let out = model.d_apply(lu_eff).add(&model.e_apply(&d2));
    for (i, op) in model.ops.iter().enumerate() {
        let what = || format!("{:?} {}", op.kind, op.element);
        limit_by(op.hi - op.base, out.hi[i], &what);
        limit_by(op.base - op.lo, out.lo[i], &what);
    }
    Ok((lambda, limiting))
}

struct ScalarResult {
    value: f64,
    solution: Option<FixedUSolution>,
    probes: usize,
    limiting: Option<String>,
}

/// Largest certified scale of `unit`, bracketing from `start`.
fn scalar_search(model: &FixedPointModel, unit: &BoundPair, start: Option<f64>, options: &SearchOptions) -> Result<ScalarResult> {
    let mut probes = 0;
    let mut limiting = None;
    let mut test = |t: f64, limiting: &mut Option<String>| -> Result<Option<FixedUSolution>> {
        probes += 1;
        match certify_fixed_u(model, &unit.scaled(t), &options.iteration)? {
            FixedU::Certified(s) => Ok(Some(*s)),
            FixedU::Infeasible(why) => {
                *limiting = Some(why.describe(model));
                Ok(None)
            }
        }
    };

    let mut hi = start.filter(|s| *s > 0.0).unwrap_or(1e-2);
    // find a certified scale
    let (mut lo, mut lo_sol) = loop {
        if hi < 1e-9 {
            return Ok(ScalarResult {
                value: 0.0,
                solution: None,
                probes,
                limiting,
            });
        }
        if let Some(s) = test(hi, &mut limiting)? {
            let found = (hi, Some(s));
            hi *= 2.0;
            break found;
        }
        hi *= 0.5;
    };
    // expand
    while hi <= options.max_scale {
        match test(hi, &mut limiting)? {
            Some(s) => {
                lo = hi;
                lo_sol = Some(s);
                hi *= 2.0;
            }
            None => break,
        }
    }
    if hi > options.max_scale {
        return Ok(ScalarResult {
            value: lo,
            solution: lo_sol,
            probes,
            limiting: Some("scale ceiling".into()),
        });
    }
    while hi - lo > options.rel_tol * hi {
        let mid = 0.5 * (lo + hi);
        match test(mid, &mut limiting)? {
            Some(s) => {
                lo = mid;
                lo_sol = Some(s);
            }
            None => hi = mid,
        }
    }
    Ok(ScalarResult {
        value: lo,
        solution: lo_sol,
        probes,
        limiting,
    })
}

/// Maximizes the objective and returns a re-verified certificate.
pub fn maximize(study: &Study, objective: &Objective, options: &SearchOptions) -> Result<Certificate> {
    let model = &study.model;
    objective.validate(study.free.len())?;
    let base_ops = operational_slack(model, &BoundPair::zeros(model.n_inputs()), &BoundPair::zeros(4 * model.n_edges()));
    if let Some((row, _, slack)) = base_ops.min().filter(|m| m.2 < 0.0) {
        return Err(Error::BaseInfeasible(format!(
            "operational row {row} ({:?}) violated by {:.3e} at the base point",
            model.ops[row].kind, -slack
        )));
    }
    let unit = objective.unit_box(model.n_inputs(), &study.free);

    let lp = match lp_relaxation_init(model, &unit, options) {
        Ok(lp) => Some(lp),
        Err(Error::RelaxationDiverged { ratio }) if !options.lp_only => {
            log::warn!("linear relaxation diverged (ratio {ratio:.4}); searching without it");
            None
        }
        Err(e) => return Err(e),
    };

    if options.lp_only {
        let lp = lp.expect("lp_only returns on error");
        return lp_certificate(study, objective, &unit, &lp, options);
    }

    let lp_value = lp.as_ref().map(|l| l.lambda);
    let scalar = scalar_search(model, &unit, lp_value, options)?;
    let (value, lu, sol, probes, limiting) = match objective {
        Objective::Chance { std_devs } => {
            let Some(sol) = scalar.solution else {
                return Err(Error::ZeroCertificate(0.0));
            };
            let (lu, sol, probes) = chance_ascent(model, &study.free, std_devs, unit.scaled(scalar.value), sol, options)?;
            (chance_score(&lu, &study.free, std_devs), lu, sol, scalar.probes + probes, scalar.limiting)
        }
        _ => {
            if let Some(lp) = lp.as_ref().filter(|lp| lp.lambda > scalar.value) {
                return lp_certificate(study, objective, &unit, lp, options);
            }
            if scalar.value < 1e-9 {
                return Err(Error::ZeroCertificate(scalar.value));
            }
            let lu = unit.scaled(scalar.value);
            (scalar.value, lu, scalar.solution.unwrap(), scalar.probes, scalar.limiting)
        }
    };
    if value < 1e-9 {
        return Err(Error::ZeroCertificate(value));
    }
    let diagnostics = Diagnostics {
        iterations: sol.iterations,
        probes,
        lp_value,
        limiting,
        ..Diagnostics::default()
    };
    assemble(
        study,
        objective,
        value,
        lu,
        sol.lx,
        sol.lu_effective,
        CertificateStatus::CertifiedNonlinear,
        diagnostics,
    )
}

fn lp_certificate(
    study: &Study,
    objective: &Objective,
    unit: &BoundPair,
    lp: &LpRelaxation,
    options: &SearchOptions,
) -> Result<Certificate> {
    if lp.lambda < 1e-9 {
        return Err(Error::ZeroCertificate(lp.lambda));
    }
    let lu = unit.scaled(lp.lambda);
    let value = match objective {
        Objective::Chance { std_devs } => chance_score(&lu, &study.free, std_devs),
        _ => lp.lambda,
    };
    let diagnostics = Diagnostics {
        iterations: lp.iterations,
        probes: lp_probe_count(options),
        lp_value: Some(lp.lambda),
        limiting: Some(lp.limiting.clone()),
        ..Diagnostics::default()
    };
    assemble(
        study,
        objective,
        value,
        lu,
        lp.lx(),
        lp.lu_effective(),
        CertificateStatus::CertifiedLinearRelaxation,
        diagnostics,
    )
}

fn lp_probe_count(options: &SearchOptions) -> usize {
    options.lp_cap_scales.len()
}

fn chance_ascent(
    model: &FixedPointModel,
    free: &[usize],
    std_devs: &[f64],
    mut lu: BoundPair,
    mut sol: FixedUSolution,
    options: &SearchOptions,
) -> Result<(BoundPair, FixedUSolution, usize)> {
    let mut probes = 0;
    let mut score = chance_score(&lu, free, std_devs);
    // step per (free input, side)
    let mut steps: Vec<[f64; 2]> = free
        .iter()
        .zip(std_devs)
        .map(|(&i, s)| [0.5 * lu.hi[i].max(0.1 * s), 0.5 * lu.lo[i].max(0.1 * s)])
        .collect();
    for _round in 0..100 {
        let mut improved = false;
        for (k, &i) in free.iter().enumerate() {
            for side in 0..2 {
                let step = steps[k][side];
                if step < 1e-12 {
                    continue;
                }
                let mut trial = lu.clone();
                if side == 0 {
                    trial.hi[i] += step;
                } else {
                    trial.lo[i] += step;
                }
                let trial_score = chance_score(&trial, free, std_devs);
                if trial_score - score <= options.chance_tol {
                    steps[k][side] *= 0.5;
                    continue;
                }
                probes += 1;
                match certify_fixed_u(model, &trial, &options.iteration)? {
                    FixedU::Certified(s) => {
                        lu = trial;
                        sol = *s;
                        score = trial_score;
                        steps[k][side] *= 2.0;
                        improved = true;
                    }
                    FixedU::Infeasible(_) => steps[k][side] *= 0.5,
                }
            }
        }
        let active = steps.iter().flatten().any(|s| *s >= 1e-9);
        if !improved && !active {
            break;
        }
    }
    Ok((lu, sol, probes))
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    study: &Study,
    objective: &Objective,
    value: f64,
    lu: BoundPair,
    lx: BoundPair,
    lu_effective: BoundPair,
    status: CertificateStatus,
    mut diagnostics: Diagnostics,
) -> Result<Certificate> {
    let model = &study.model;
    let exact = effective_lu(model, &lu, &lx);
    let lu_effective = BoundPair {
        lo: lu_effective.lo.iter().zip(&exact.lo).map(|(a, b)| a.max(*b)).collect(),
        hi: lu_effective.hi.iter().zip(&exact.hi).map(|(a, b)| a.max(*b)).collect(),
    };
    let (sm, op) = check_boxes(model, &lx, &lu, &lu_effective)?;
    assert!(sm.holds && op.holds, "certificate failed re-verification with exact bounds");
    diagnostics.binding = binding_rows(model, &op, &lx);
    diagnostics.dropped = study.dropped.clone();
    let injection_box = certificate_box(study, &lx, &lu_effective)?;
    Ok(Certificate {
        version: CERTIFICATE_VERSION,
        case: study.network.name.clone(),
        setup: study.setup.clone(),
        objective: objective.clone(),
        value,
        status,
        inputs: model
            .inputs
            .iter()
            .map(|c| InputLabel {
                bus: study.network.buses[c.bus].id,
                part: c.part,
            })
            .collect(),
        free: study.free.clone(),
        lu,
        lu_effective,
        lx,
        injection_box,
        diagnostics,
    })
}

fn binding_rows(model: &FixedPointModel, op: &Check, lx: &BoundPair) -> Vec<String> {
    let mut out = Vec::new();
    for i in 0..lx.len() {
        let lim = model.lx_max.hi[i].min(model.lx_max.lo[i]);
        if lx.hi[i].max(lx.lo[i]) >= lim * (1.0 - 1e-6) {
            out.push(format!("state limit: {}", describe_row(model, i)));
        }
    }
    for (i, (h, l)) in op.slack.hi.iter().zip(&op.slack.lo).enumerate() {
        let r = &model.ops[i];
        // within 1% of the base margin
        if *h <= 1e-2 * (r.hi - r.base) || *l <= 1e-2 * (r.base - r.lo) {
            out.push(format!("operational: {:?} {}", r.kind, r.element));
        }
    }
    out.truncate(20);
    out
}

/// Voltage band of every bus implied by a state box.
pub fn voltage_band_of(model: &FixedPointModel, lx: &BoundPair) -> Vec<(f64, f64)> {
    let mut band: Vec<(f64, f64)> = model.base.v.iter().map(|v| (*v, *v)).collect();
    for &(bus, r) in &model.node_rows {
        let v = model.base.v[bus];
        band[bus] = (v * (-lx.lo[r]).exp(), v * lx.hi[r].exp());
    }
    band
}

/// Power box of a certificate re-derived from its declared and effective
/// admittance boxes, whichever is wider per coordinate.
pub fn power_box_of(study: &Study, cert: &Certificate) -> Result<Vec<InjectionRange>> {
    let model = &study.model;
    if cert.lx.len() != model.n_rows() || cert.lu.len() != model.n_inputs() || cert.lu_effective.len() != model.n_inputs() {
        return Err(Error::InvalidArgument("certificate does not match this study".into()));
    }
    let exact = effective_lu(model, &cert.lu, &cert.lx);
    let wide = BoundPair {
        lo: exact.lo.iter().zip(&cert.lu_effective.lo).map(|(a, b)| a.max(*b)).collect(),
        hi: exact.hi.iter().zip(&cert.lu_effective.hi).map(|(a, b)| a.max(*b)).collect(),
    };
    certificate_box(study, &cert.lx, &wide)
}

fn certificate_box(study: &Study, lx: &BoundPair, lu_eff: &BoundPair) -> Result<Vec<InjectionRange>> {
    let model = &study.model;
    let band = voltage_band_of(model, lx);
    let ranges = injection_box(model, lu_eff, &band)?;
    Ok(ranges
        .into_iter()
        .map(|mut r| {
            r.bus = study.network.buses[r.bus as usize].id;
            r
        })
        .collect())
}

/// Power range of `a V²` over `a ∈ [a_lo, a_hi]`, `V ∈ [v_lo, v_hi]` that is
/// safe in the sense that every power in it maps back into the admittance
/// range for every voltage of the band.
fn power_range(a_lo: f64, a_hi: f64, v_lo: f64, v_hi: f64) -> (f64, f64) {
    let (l2, h2) = (v_lo * v_lo, v_hi * v_hi);
    let upper = if a_hi >= 0.0 { l2 * a_hi } else { h2 * a_hi };
    let lower = if a_lo < 0.0 { l2 * a_lo } else { h2 * a_lo };
    (lower, upper)
}

/// Per-bus power ranges of the inputs, by bus index. `band` gives the
/// voltage range assumed at every bus.
pub fn injection_box(model: &FixedPointModel, lu: &BoundPair, band: &[(f64, f64)]) -> Result<Vec<InjectionRange>> {
    let mut ranges: Vec<InjectionRange> = Vec::new();
    for (i, c) in model.inputs.iter().enumerate() {
        let k = c.bus;
        let (vl, vh) = band[k];
        let v = model.base.v[k];
        if !(vl <= v * (1.0 + 1e-12) && v <= vh * (1.0 + 1e-12) && vl > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "voltage band [{vl}, {vh}] at bus index {k} excludes the base voltage {v}"
            )));
        }
        let y = model.base.admittance(k);
        let entry = match ranges.iter().position(|r| r.bus as usize == k) {
            Some(p) => p,
            None => {
                let p = model.base.p[k];
                let q = model.base.q[k];
                ranges.push(InjectionRange {
                    bus: k as u32,
                    p: (p, p),
                    q: (q, q),
                    v: (vl, vh),
                });
                ranges.len() - 1
            }
        };
        match c.part {
            Part::G => {
                ranges[entry].p = power_range(y.re - lu.lo[i], y.re + lu.hi[i], vl, vh);
            }
            Part::B => {
                let (lo, hi) = power_range(y.im - lu.lo[i], y.im + lu.hi[i], vl, vh);
                ranges[entry].q = (-hi, -lo);
            }
        }
    }
    Ok(ranges)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BrouwerReport {
    pub samples: usize,
    pub converged: usize,
    /// Iterates that left the state box.
    pub excursions: usize,
    pub worst_residual: f64,
    /// Largest `A x̃` relative to its bound, over all iterates.
    pub worst_excursion: f64,
}

/// Runs the fixed-point iteration from zero at the corners of the free
/// inputs and at random points of the effective input box.
pub fn verify_brouwer(model: &FixedPointModel, cert: &Certificate, n_samples: usize, seed: u64) -> Result<BrouwerReport> {
    let lu = &cert.lu_effective;
    let lx = &cert.lx;
    let n = model.n_inputs();
    let mut samples: Vec<Vec<f64>> = Vec::new();
    let free: Vec<usize> = cert.free.iter().copied().filter(|&i| lu.hi[i] + lu.lo[i] > 0.0).collect();
    if free.len() <= 10 {
        for mask in 0..(1usize << free.len()) {
            let mut u = vec![0.0; n];
            for (b, &i) in free.iter().enumerate() {
                u[i] = if mask >> b & 1 == 1 { lu.hi[i] } else { -lu.lo[i] };
            }
            samples.push(u);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n_samples {
        samples.push((0..n).map(|i| -lu.lo[i] + rng.random::<f64>() * (lu.lo[i] + lu.hi[i])).collect());
    }

    let mut report = BrouwerReport::default();
    for u in &samples {
        report.samples += 1;
        let mut x = vec![0.0; model.n_states];
        let mut residual = f64::INFINITY;
        for _ in 0..500 {
            let next = model.fixed_point_map(&x, u)?;
            residual = next.iter().zip(&x).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            x = next;
            let ax = model.a_mul(&x);
            let excursion = ax
                .iter()
                .zip(lx.hi.iter().zip(&lx.lo))
                .map(|(v, (h, l))| if *v >= 0.0 { v / h.max(1e-300) } else { -v / l.max(1e-300) })
                .fold(0.0f64, f64::max);
            report.worst_excursion = report.worst_excursion.max(excursion);
            if !lx.contains(&ax, 1e-12) {
                report.excursions += 1;
                break;
            }
            if residual <= 1e-12 {
                break;
            }
        }
        if residual <= 1e-9 {
            report.converged += 1;
        }
        report.worst_residual = report.worst_residual.max(residual);
    }
    Ok(report)
}

/// Number of `(thermal, reactive)` operational rows.
pub fn count_rows(model: &FixedPointModel) -> (usize, usize) {
    let thermal = model.ops.iter().filter(|o| o.kind.is_thermal()).count();
    let reactive = model.ops.iter().filter(|o| o.kind == OperationalKind::ReactiveGen).count();
    (thermal, reactive)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_range_cases() {
        let (lo, hi) = power_range(0.9, 1.2, 0.99, 1.01);
        assert!((hi - 0.99f64.powi(2) * 1.2).abs() < 1e-12);
        assert!((lo - 1.01f64.powi(2) * 0.9).abs() < 1e-12);
        let (lo, _) = power_range(-0.1, 0.0, 0.99, 1.01);
        assert!((lo + 0.09801).abs() < 1e-12);
        let (lo, hi) = power_range(1.0, 1.0, 1.0, 1.0);
        assert_eq!((lo, hi), (1.0, 1.0));
    }

    #[test]
    fn chance_score_limits() {
        let free = [0, 1, 2];
        let big = BoundPair::symmetric(vec![1e3; 3]);
        let s = chance_score(&big, &free, &[1.0, 2.0, 0.5]);
        assert!((s - 3.0).abs() < 1e-12);
        assert_eq!(chance_score(&BoundPair::zeros(3), &free, &[1.0; 3]), 0.0);
    }

    #[test]
    fn objective_validation() {
        assert!(Objective::Robustness { weights: vec![1.0, 0.0] }.validate(2).is_err());
        assert!(Objective::Loadability { direction: vec![0.0, 0.0] }.validate(2).is_err());
        assert!(Objective::Loadability { direction: vec![-1.0, 0.0] }.validate(2).is_ok());
        assert!(Objective::Chance { std_devs: vec![1.0] }.validate(2).is_err());
    }

    #[test]
    fn slack_min() {
        let s = RowSlack {
            hi: vec![0.5, -0.1],
            lo: vec![0.2, 0.3],
        };
        assert_eq!(s.min(), Some((1, true, -0.1)));
        assert!(!s.holds());
    }
}
