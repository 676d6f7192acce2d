//! Two-sided bounds on the second-order residuals of the edge primitives,
//! exact and linearly relaxed, and the `σ`/`τ` box maps built from them.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FixedPointModel;

/// Nonnegative two-sided bound vector: the box `-lo <= z <= hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundPair {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoundPair {
    pub fn zeros(n: usize) -> Self {
        Self {
            lo: vec![0.0; n],
            hi: vec![0.0; n],
        }
    }

    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::InvalidArgument(format!(
                "bound sides differ in length ({} vs {})",
                lo.len(),
                hi.len()
            )));
        }
        if let Some(v) = lo.iter().chain(&hi).find(|v| !(**v >= 0.0)) {
            return Err(Error::NegativeBound(format!("bound entry {v}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn symmetric(v: Vec<f64>) -> Self {
        Self {
            lo: v.clone(),
            hi: v,
        }
    }

    pub fn len(&self) -> usize {
        self.hi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hi.is_empty()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            lo: self.lo.iter().map(|v| v * s).collect(),
            hi: self.hi.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &BoundPair) -> Self {
        Self {
            lo: self.lo.iter().zip(&other.lo).map(|(a, b)| a + b).collect(),
            hi: self.hi.iter().zip(&other.hi).map(|(a, b)| a + b).collect(),
        }
    }

    /// Elementwise `self <= other` on both sides.
    pub fn le(&self, other: &BoundPair) -> bool {
        self.lo.iter().zip(&other.lo).all(|(a, b)| a <= b)
            && self.hi.iter().zip(&other.hi).all(|(a, b)| a <= b)
    }

    /// First row (and side) where `self` exceeds `other`.
    pub fn first_excess(&self, other: &BoundPair) -> Option<(usize, f64, f64)> {
        for i in 0..self.len() {
            if self.hi[i] > other.hi[i] {
                return Some((i, self.hi[i], other.hi[i]));
            }
            if self.lo[i] > other.lo[i] {
                return Some((i, self.lo[i], other.lo[i]));
            }
        }
        None
    }

    pub fn max_abs(&self) -> f64 {
        self.lo.iter().chain(&self.hi).fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn max_diff(&self, other: &BoundPair) -> f64 {
        self.lo
            .iter()
            .zip(&other.lo)
            .chain(self.hi.iter().zip(&other.hi))
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Whether `-lo - tol <= z <= hi + tol` componentwise.
    pub fn contains(&self, z: &[f64], tol: f64) -> bool {
        z.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (lo, hi))| *v >= -lo - tol && *v <= hi + tol)
    }
}

/// Magnitudes of a two-sided scalar spread `[-lo, hi]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub lo: f64,
    pub hi: f64,
}

impl Spread {
    pub const ZERO: Spread = Spread { lo: 0.0, hi: 0.0 };

    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn max(&self) -> f64 {
        self.lo.max(self.hi)
    }
}

/// First-order span and second-order residual bound of one univariate term.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TermBounds {
    pub first: Spread,
    pub second: Spread,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UnivariateResidualBounds {
    pub cos: TermBounds,
    pub sin: TermBounds,
    pub cosh: TermBounds,
    pub sinh: TermBounds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelaxationCaps {
    pub theta: f64,
    pub rho: f64,
}

impl RelaxationCaps {
    pub fn new(theta: f64, rho: f64) -> Result<Self> {
        if !(theta > 0.0 && theta <= FRAC_PI_2) || !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "relaxation caps out of range: theta {theta}, rho {rho}"
            )));
        }
        Ok(Self { theta, rho })
    }
}

fn check_spread(s: Spread, cap: f64, row: usize) -> Result<()> {
    if !(s.lo >= 0.0 && s.hi >= 0.0) {
        return Err(Error::NegativeBound(format!("spread ({}, {}) at row {row}", s.lo, s.hi)));
    }
    if s.max() > cap {
        return Err(Error::CapExceeded {
            row,
            value: s.max(),
            cap,
        });
    }
    Ok(())
}

/// Exact residual bounds of `cos`, `sin` on `δθ ∈ [-θ.lo, θ.hi]` and of
/// `cosh`, `sinh` on `δρ ∈ [-ρ.lo, ρ.hi]`.
pub fn univariate_bounds(theta: Spread, rho: Spread) -> Result<UnivariateResidualBounds> {
    check_spread(theta, FRAC_PI_2, 0)?;
    check_spread(rho, 1.0, 0)?;
    Ok(univariate_unchecked(theta, rho))
}

fn univariate_unchecked(theta: Spread, rho: Spread) -> UnivariateResidualBounds {
    let cos_drop = 1.0 - theta.max().cos();
    let cos = Spread::new(cos_drop, 0.0);
    let cosh_rise = rho.max().cosh() - 1.0;
    let cosh = Spread::new(0.0, cosh_rise);
    UnivariateResidualBounds {
        cos: TermBounds {
            first: cos,
            second: cos,
        },
        sin: TermBounds {
            first: Spread::new(theta.lo.sin(), theta.hi.sin()),
            second: Spread::new(theta.hi - theta.hi.sin(), theta.lo - theta.lo.sin()),
        },
        cosh: TermBounds {
            first: cosh,
            second: cosh,
        },
        sinh: TermBounds {
            first: Spread::new(rho.lo.sinh(), rho.hi.sinh()),
            second: Spread::new(rho.lo.sinh() - rho.lo, rho.hi.sinh() - rho.hi),
        },
    }
}

/// Secant relaxation of the univariate bounds over `[0, cap]`; every entry
/// is linear in the spread and its side maximum.
pub fn linear_univariate(theta: Spread, rho: Spread, caps: RelaxationCaps) -> Result<UnivariateResidualBounds> {
    check_spread(theta, caps.theta, 0)?;
    check_spread(rho, caps.rho, 0)?;
    Ok(linear_unchecked(theta, rho, caps))
}

fn linear_unchecked(theta: Spread, rho: Spread, caps: RelaxationCaps) -> UnivariateResidualBounds {
    let (tu, ru) = (caps.theta, caps.rho);
    let cos_drop = (1.0 - tu.cos()) * theta.max() / tu;
    let cos = Spread::new(cos_drop, 0.0);
    let cosh_rise = (ru.cosh() - 1.0) * rho.max() / ru;
    let cosh = Spread::new(0.0, cosh_rise);
    let sin2 = (tu - tu.sin()) / tu;
    let sinh1 = ru.sinh() / ru;
    let sinh2 = (ru.sinh() - ru) / ru;
    UnivariateResidualBounds {
        cos: TermBounds {
            first: cos,
            second: cos,
        },
        sin: TermBounds {
            first: theta,
            second: Spread::new(sin2 * theta.hi, sin2 * theta.lo),
        },
        cosh: TermBounds {
            first: cosh,
            second: cosh,
        },
        sinh: TermBounds {
            first: Spread::new(sinh1 * rho.lo, sinh1 * rho.hi),
            second: Spread::new(sinh2 * rho.lo, sinh2 * rho.hi),
        },
    }
}

/// Residual bound of the product `f g` from the bounds of its factors and
/// their base values.
pub fn product_bounds(f: &TermBounds, g: &TermBounds, f_star: f64, g_star: f64) -> Result<Spread> {
    let all = [
        f.first.lo, f.first.hi, f.second.lo, f.second.hi, g.first.lo, g.first.hi, g.second.lo,
        g.second.hi, f_star, g_star,
    ];
    if let Some(v) = all.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::NegativeBound(format!("product bound input {v}")));
    }
    Ok(product_unchecked(f, g, f_star, g_star))
}

fn product_unchecked(f: &TermBounds, g: &TermBounds, f_star: f64, g_star: f64) -> Spread {
    let hi = (f.first.hi * g.first.hi).max(f.first.lo * g.first.lo)
        + f_star * g.second.hi
        + f.second.hi * g_star;
    let lo = (f.first.hi * g.first.lo).max(f.first.lo * g.first.hi)
        + f_star * g.second.lo
        + f.second.lo * g_star;
    Spread::new(lo, hi)
}

/// An affine function `cx x + cy y + c0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub cx: f64,
    pub cy: f64,
    pub c0: f64,
}

impl Plane {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.cx * x + self.cy * y + self.c0
    }
}

/// McCormick envelope of `x y` on a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McCormick {
    pub upper: [Plane; 2],
    pub lower: [Plane; 2],
}

impl McCormick {
    pub fn upper_bound(&self, x: f64, y: f64) -> f64 {
        self.upper[0].eval(x, y).min(self.upper[1].eval(x, y))
    }

    pub fn lower_bound(&self, x: f64, y: f64) -> f64 {
        self.lower[0].eval(x, y).max(self.lower[1].eval(x, y))
    }
}

pub fn mccormick(xl: f64, xu: f64, yl: f64, yu: f64) -> Result<McCormick> {
    if !(xl <= xu) || !(yl <= yu) {
        return Err(Error::InvalidArgument(format!(
            "empty McCormick box [{xl}, {xu}] x [{yl}, {yu}]"
        )));
    }
    Ok(McCormick {
        upper: [
            Plane { cx: yl, cy: xu, c0: -xu * yl },
            Plane { cx: yu, cy: xl, c0: -xl * yu },
        ],
        lower: [
            Plane { cx: yl, cy: xl, c0: -xl * yl },
            Plane { cx: yu, cy: xu, c0: -xu * yu },
        ],
    })
}

/// Linear relaxation of the product residual. Each bilinear span product
/// uses the McCormick plane that keeps the (small) hyperbolic factor at its
/// cap value, so the bound is linear in the trigonometric span.
fn linear_product(f: &TermBounds, f_caps: Spread, g: &TermBounds, f_star: f64, g_star: f64) -> Spread {
    let plane = |cap: f64, y: f64| {
        mccormick(0.0, cap, 0.0, f64::MAX)
            .map(|m| m.upper[0].eval(0.0, y))
            .unwrap_or(0.0)
    };
    let hi = plane(f_caps.hi, g.first.hi).max(plane(f_caps.lo, g.first.lo))
        + f_star * g.second.hi
        + f.second.hi * g_star;
    let lo = plane(f_caps.hi, g.first.lo).max(plane(f_caps.lo, g.first.hi))
        + f_star * g.second.lo
        + f.second.lo * g_star;
    Spread::new(lo, hi)
}

/// Per-edge spreads of `δθ_e` and `δρ_e` read from a state box.
#[derive(Debug, Clone, Copy)]
pub struct EdgeSpread {
    pub theta: Spread,
    pub rho: Spread,
}

/// Residual bounds for the four primitive blocks of one edge, in block
/// order (cosh·cos, sinh·cos, cosh·sin, sinh·sin).
pub fn edge_residual_bounds(s: EdgeSpread) -> [Spread; 4] {
    let u = univariate_unchecked(s.theta, s.rho);
    [
        product_unchecked(&u.cosh, &u.cos, 1.0, 1.0),
        product_unchecked(&u.sinh, &u.cos, 0.0, 1.0),
        product_unchecked(&u.cosh, &u.sin, 1.0, 0.0),
        product_unchecked(&u.sinh, &u.sin, 0.0, 0.0),
    ]
}

pub fn edge_linear_bounds(s: EdgeSpread, caps: RelaxationCaps) -> [Spread; 4] {
    let u = linear_unchecked(s.theta, s.rho, caps);
    let cosh_cap = Spread::new(0.0, caps.rho.cosh() - 1.0);
    let sinh_cap = Spread::new(caps.rho.sinh(), caps.rho.sinh());
    [
        linear_product(&u.cosh, cosh_cap, &u.cos, 1.0, 1.0),
        linear_product(&u.sinh, sinh_cap, &u.cos, 0.0, 1.0),
        linear_product(&u.cosh, cosh_cap, &u.sin, 1.0, 0.0),
        linear_product(&u.sinh, sinh_cap, &u.sin, 0.0, 0.0),
    ]
}

/// Which residual bound family to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    Exact,
    Linear,
}

/// Bounds on `δ₂f` over all `4|E|` primitives for the state box `lx`.
/// Block `b` of edge `e` sits at index `b |E| + e`.
pub fn delta2_bounds(model: &FixedPointModel, lx: &BoundPair, kind: BoundKind) -> Result<BoundPair> {
    delta2_with_caps(model, lx, kind, &model.caps, true)
}

/// [`delta2_bounds`] against explicit per-edge caps. With `check` off the
/// formulas are evaluated even outside the caps, where the linear family
/// stops being a valid bound but stays positively homogeneous.
pub fn delta2_with_caps(
    model: &FixedPointModel,
    lx: &BoundPair,
    kind: BoundKind,
    caps: &[RelaxationCaps],
    check: bool,
) -> Result<BoundPair> {
    let m = model.n_edges();
    let mut out = BoundPair::zeros(4 * m);
    for e in 0..m {
        let s = model.edge_spread(lx, e);
        let caps = caps[e];
        if check {
            let (tc, rc) = match kind {
                BoundKind::Exact => (caps.theta.min(FRAC_PI_2), caps.rho.min(1.0)),
                BoundKind::Linear => (caps.theta, caps.rho),
            };
            check_spread(s.theta, tc, e)?;
            check_spread(s.rho, rc, m + e)?;
        }
        let blocks = match kind {
            BoundKind::Exact => edge_residual_bounds(s),
            BoundKind::Linear => edge_linear_bounds(s, caps),
        };
        for (b, sp) in blocks.iter().enumerate() {
            out.lo[b * m + e] = sp.lo;
            out.hi[b * m + e] = sp.hi;
        }
    }
    Ok(out)
}

/// Bounds on `A φ(x̃)` for `x̃` in the box `lx`.
pub fn tau(model: &FixedPointModel, lx: &BoundPair, kind: BoundKind) -> Result<BoundPair> {
    let d2 = delta2_bounds(model, lx, kind)?;
    Ok(model.c_apply(&d2))
}

/// Bounds on `A J⁻¹ R ũ` for `ũ` in the box `lu`.
pub fn sigma(model: &FixedPointModel, lu: &BoundPair) -> BoundPair {
    model.b_apply(lu)
}

/// Admittance drift of a constant-power coordinate with base admittance
/// `c` when the bus log-voltage moves in `[-rho.lo, rho.hi]`:
/// `c (e^{-2δρ} - 1)`.
pub fn allowance(c: f64, rho: Spread) -> Spread {
    let up = (2.0 * rho.lo).exp_m1();
    let down = -(-2.0 * rho.hi).exp_m1();
    if c >= 0.0 {
        Spread::new(c * down, c * up)
    } else {
        Spread::new(-c * up, -c * down)
    }
}

/// Linear upper bound of [`allowance`] valid for `rho.lo <= cap`.
pub fn allowance_linear(c: f64, rho: Spread, cap: f64) -> Spread {
    let secant = if cap > 0.0 { (2.0 * cap).exp_m1() / cap } else { 2.0 };
    let a = c.abs();
    if c >= 0.0 {
        Spread::new(2.0 * a * rho.hi, a * secant * rho.lo)
    } else {
        Spread::new(a * secant * rho.lo, 2.0 * a * rho.hi)
    }
}
