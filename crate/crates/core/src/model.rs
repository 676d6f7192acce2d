//! Admittance-form fixed-point model around a solved base point.
//!
//! Nodal equations are `y_k - y^d_k = Σ_e Y⁺ cosh(z_e) + Y⁻ sinh(z_e)` with
//! `z_e = δρ_e + j δθ_e`, written in real form as `u = M f(x)`. Rows are
//! `(g_G, g_L, b_L)`, states are `(θ_G, θ_L, ρ_L)`.

use faer::Mat;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::bounds::{BoundPair, EdgeSpread, RelaxationCaps, Spread};
use crate::error::{Error, Result};
use crate::linalg::{Csc, SparseLu};
use crate::network::{BusKind, EdgeAdmittanceStructure, PowerNetwork};
use crate::powerflow::OperatingPoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Part {
    /// Conductance `g = p / V²`.
    G,
    /// Susceptance `b = -q / V²`.
    B,
}

/// One coordinate of the admittance input vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputCoord {
    pub bus: usize,
    pub part: Part,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowKind {
    EdgeTheta(usize),
    EdgeRho(usize),
    NodeRho(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperationalKind {
    ThermalFromP,
    ThermalFromQ,
    ThermalToP,
    ThermalToQ,
    ReactiveGen,
}

impl OperationalKind {
    pub fn is_thermal(self) -> bool {
        !matches!(self, OperationalKind::ReactiveGen)
    }
}

/// Two-sided limit on one admittance-domain quantity `T_i f(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperationalRow {
    pub kind: OperationalKind,
    /// Branch index for thermal rows, bus index for generator rows.
    pub element: usize,
    /// `T_i f*`.
    pub base: f64,
    pub lo: f64,
    pub hi: f64,
}

impl OperationalRow {
    /// `h*` of the upper and lower one-sided rows.
    pub fn h_star(&self) -> (f64, f64) {
        (self.base - self.hi, self.lo - self.base)
    }
}

/// Per-terminal active/reactive flow budgets of a branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalBudget {
    pub from: (f64, f64),
    pub to: (f64, f64),
}

/// What the model needs beyond the network and base point.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub inputs: Vec<InputCoord>,
    /// Per branch.
    pub thermal: Vec<Option<ThermalBudget>>,
    /// Net reactive injection limits per bus, used at generator buses.
    pub q_gen: Vec<Option<(f64, f64)>>,
    /// Voltage band on load buses, as log deviations `(below, above)`.
    pub rho_band: (f64, f64),
    pub theta_cap: f64,
    pub rho_cap_max: f64,
    /// Per branch angle-difference limits.
    pub angle: Vec<Option<(f64, f64)>>,
}

pub struct FixedPointModel {
    pub n_buses: usize,
    pub kinds: Vec<BusKind>,
    pub from: Vec<usize>,
    pub to: Vec<usize>,
    pub delta_rho_star: Vec<f64>,
    pub delta_theta_star: Vec<f64>,
    pub yhat_f: Vec<Complex64>,
    pub yhat_t: Vec<Complex64>,
    pub theta_state: Vec<Option<usize>>,
    pub rho_state: Vec<Option<usize>>,
    pub g_row: Vec<Option<usize>>,
    pub b_row: Vec<Option<usize>>,
    pub n_states: usize,
    pub m: Csc,
    pub l: Csc,
    pub j: Csc,
    lu: SparseLu,
    pub inputs: Vec<InputCoord>,
    /// Equation row of each input.
    pub input_rows: Vec<usize>,
    /// `M f*` for every equation row.
    pub ustar: Vec<f64>,
    /// Base nodal admittance (`Re y*` or `Im y*`) of each input, the scale
    /// of its constant-power drift.
    pub input_admittance: Vec<f64>,
    /// A row of `lx` that bounds the log-voltage of each input's bus.
    pub input_rho_row: Vec<Option<usize>>,
    pub a_rows: Vec<RowKind>,
    pub a: Csc,
    /// Signed `A J⁻¹ R` and `-A J⁻¹ M`.
    pub b: Mat<f64>,
    pub c: Mat<f64>,
    pub t: Csc,
    pub ops: Vec<OperationalRow>,
    /// Signed `T L J⁻¹ R` and `T - T L J⁻¹ M`.
    pub d: Mat<f64>,
    pub e: Mat<f64>,
    pub caps: Vec<RelaxationCaps>,
    pub lx_max: BoundPair,
    /// Load buses in state order, with their nodal row in `A`.
    pub node_rows: Vec<(usize, usize)>,
    pub base: OperatingPoint,
}

impl std::fmt::Debug for FixedPointModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FixedPointModel")
            .field("n_states", &self.n_states)
            .field("n_edges", &self.n_edges())
            .field("n_inputs", &self.inputs.len())
            .field("n_rows", &self.a_rows.len())
            .field("n_ops", &self.ops.len())
            .finish()
    }
}

/// `(F⁺, F⁻)` with `F = F⁺ - F⁻`, both nonnegative.
pub fn split_pm(f: &Mat<f64>) -> (Mat<f64>, Mat<f64>) {
    let plus = Mat::from_fn(f.nrows(), f.ncols(), |i, j| f[(i, j)].max(0.0));
    let minus = Mat::from_fn(f.nrows(), f.ncols(), |i, j| (-f[(i, j)]).max(0.0));
    (plus, minus)
}

/// `(F⁺ hi + F⁻ lo, F⁺ lo + F⁻ hi)` in a single pass over the signed `F`.
pub fn split_apply(f: &Mat<f64>, x: &BoundPair) -> BoundPair {
    assert_eq!(f.ncols(), x.len());
    let mut out = BoundPair::zeros(f.nrows());
    for j in 0..f.ncols() {
        let (hi, lo) = (x.hi[j], x.lo[j]);
        if hi == 0.0 && lo == 0.0 {
            continue;
        }
        let rows = out.hi.iter_mut().zip(out.lo.iter_mut());
        for ((oh, ol), &v) in rows.zip(f.col_as_slice(j)) {
            let p = v.max(0.0);
            let m = p - v;
            *oh += p * hi + m * lo;
            *ol += p * lo + m * hi;
        }
    }
    out
}

/// Real M-pattern columns of one complex (Y⁺, Y⁻) pair for the g and b
/// rows, in block order.
fn pattern(yp: Complex64, ym: Complex64) -> [(f64, f64); 4] {
    [
        (yp.re, yp.im),
        (ym.re, ym.im),
        (-ym.im, ym.re),
        (-yp.im, yp.re),
    ]
}

impl FixedPointModel {
    pub fn build(
        network: &PowerNetwork,
        edges: &EdgeAdmittanceStructure,
        base: &OperatingPoint,
        spec: &ModelSpec,
    ) -> Result<Self> {
        let n = network.n_buses();
        let ne = edges.n_edges();
        let kinds: Vec<BusKind> = network.buses.iter().map(|b| b.kind).collect();
        let gens: Vec<usize> = network.buses_of_kind(BusKind::Generator).collect();
        let loads: Vec<usize> = network.buses_of_kind(BusKind::Load).collect();

        let mut theta_state = vec![None; n];
        let mut rho_state = vec![None; n];
        let mut g_row = vec![None; n];
        let mut b_row = vec![None; n];
        let mut k = 0;
        for &bus in gens.iter().chain(&loads) {
            theta_state[bus] = Some(k);
            g_row[bus] = Some(k);
            k += 1;
        }
        for &bus in &loads {
            rho_state[bus] = Some(k);
            b_row[bus] = Some(k);
            k += 1;
        }
        let n_states = k;

        let from = edges.from.clone();
        let to = edges.to.clone();
        let delta_rho_star: Vec<f64> = (0..ne).map(|e| base.rho[from[e]] - base.rho[to[e]]).collect();
        let delta_theta_star: Vec<f64> =
            (0..ne).map(|e| base.theta[from[e]] - base.theta[to[e]]).collect();
        let yhat_f: Vec<Complex64> = (0..ne)
            .map(|e| edges.yf[e] * Complex64::new(-delta_rho_star[e], -delta_theta_star[e]).exp())
            .collect();
        let yhat_t: Vec<Complex64> = (0..ne)
            .map(|e| edges.yt[e] * Complex64::new(delta_rho_star[e], delta_theta_star[e]).exp())
            .collect();

        // M, column by column
        let mut m_cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); 4 * ne];
        for e in 0..ne {
            let sides = [
                (from[e], yhat_f[e], -yhat_f[e]),
                (to[e], yhat_t[e], yhat_t[e]),
            ];
            for (bus, yp, ym) in sides {
                for (blk, (gv, bv)) in pattern(yp, ym).into_iter().enumerate() {
                    if let Some(r) = g_row[bus] {
                        m_cols[blk * ne + e].push((r, gv));
                    }
                    if let Some(r) = b_row[bus] {
                        m_cols[blk * ne + e].push((r, bv));
                    }
                }
            }
        }
        let m = Csc::from_columns(n_states, m_cols);

        // L: block 2 carries δρ_e, block 3 carries δθ_e
        let mut l_cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_states];
        for e in 0..ne {
            for (bus, sign) in [(from[e], 1.0), (to[e], -1.0)] {
                if let Some(s) = rho_state[bus] {
                    l_cols[s].push((ne + e, sign));
                }
                if let Some(s) = theta_state[bus] {
                    l_cols[s].push((2 * ne + e, sign));
                }
            }
        }
        let l = Csc::from_columns(4 * ne, l_cols);
        let j = m.mul(&l);
        let lu = SparseLu::factor(n_states, &j.triplets())
            .map_err(|e| Error::SingularJacobian(format!("J* at the base point: {e}")))?;

        let fstar = {
            let mut f = vec![0.0; 4 * ne];
            f[..ne].iter_mut().for_each(|v| *v = 1.0);
            f
        };
        let ustar = m.mul_vec(&fstar);

        // A rows
        let mut a_rows = Vec::with_capacity(2 * ne + loads.len());
        let mut a_cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_states];
        for e in 0..ne {
            let r = a_rows.len();
            a_rows.push(RowKind::EdgeTheta(e));
            for (bus, sign) in [(from[e], 1.0), (to[e], -1.0)] {
                if let Some(s) = theta_state[bus] {
                    a_cols[s].push((r, sign));
                }
            }
        }
        for e in 0..ne {
            let r = a_rows.len();
            a_rows.push(RowKind::EdgeRho(e));
            for (bus, sign) in [(from[e], 1.0), (to[e], -1.0)] {
                if let Some(s) = rho_state[bus] {
                    a_cols[s].push((r, sign));
                }
            }
        }
        let mut node_rows = Vec::with_capacity(loads.len());
        let mut node_row_of = vec![None; n];
        for &bus in &loads {
            let r = a_rows.len();
            a_rows.push(RowKind::NodeRho(bus));
            a_cols[rho_state[bus].unwrap()].push((r, 1.0));
            node_rows.push((bus, r));
            node_row_of[bus] = Some(r);
        }
        let a = Csc::from_columns(a_rows.len(), a_cols);

        // inputs
        let mut input_rows = Vec::with_capacity(spec.inputs.len());
        let mut input_admittance = Vec::with_capacity(spec.inputs.len());
        let mut input_rho_row = Vec::with_capacity(spec.inputs.len());
        for inp in &spec.inputs {
            let row = match inp.part {
                Part::G => g_row[inp.bus],
                Part::B => b_row[inp.bus],
            }
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "bus {} has no {:?} equation to vary",
                    network.buses[inp.bus].id, inp.part
                ))
            })?;
            input_rows.push(row);
            let y = base.admittance(inp.bus);
            input_admittance.push(match inp.part {
                Part::G => y.re,
                Part::B => y.im,
            });
            input_rho_row.push(node_row_of[inp.bus]);
        }

        // operational rows
        let mut ops = Vec::new();
        let mut t_rows: Vec<Vec<(usize, f64)>> = Vec::new();
        let v_hi = |bus: usize| -> f64 {
            if kinds[bus] == BusKind::Load {
                base.v[bus] * spec.rho_band.1.exp()
            } else {
                base.v[bus]
            }
        };
        for e in 0..ne {
            let Some(budget) = spec.thermal.get(e).copied().flatten() else {
                continue;
            };
            let terminals = [
                (from[e], yhat_f[e], -yhat_f[e], edges.y_ff[e], budget.from, OperationalKind::ThermalFromP, OperationalKind::ThermalFromQ),
                (to[e], yhat_t[e], yhat_t[e], edges.y_tt[e], budget.to, OperationalKind::ThermalToP, OperationalKind::ThermalToQ),
            ];
            for (bus, yp, ym, yself, (lp, lq), kp, kq) in terminals {
                let v2 = v_hi(bus).powi(2);
                let pat = pattern(yp, ym);
                let g_row_entries: Vec<(usize, f64)> =
                    (0..4).map(|blk| (blk * ne + e, pat[blk].0)).collect();
                let b_row_entries: Vec<(usize, f64)> =
                    (0..4).map(|blk| (blk * ne + e, pat[blk].1)).collect();
                ops.push(OperationalRow {
                    kind: kp,
                    element: e,
                    base: yp.re,
                    lo: -lp / v2 - yself.re,
                    hi: lp / v2 - yself.re,
                });
                t_rows.push(g_row_entries);
                ops.push(OperationalRow {
                    kind: kq,
                    element: e,
                    base: yp.im,
                    lo: -lq / v2 - yself.im,
                    hi: lq / v2 - yself.im,
                });
                t_rows.push(b_row_entries);
            }
        }
        for &bus in &gens {
            let Some((qlo, qhi)) = spec.q_gen.get(bus).copied().flatten() else {
                continue;
            };
            let mut entries = Vec::new();
            for e in 0..ne {
                let (yp, ym) = if from[e] == bus {
                    (yhat_f[e], -yhat_f[e])
                } else if to[e] == bus {
                    (yhat_t[e], yhat_t[e])
                } else {
                    continue;
                };
                for (blk, (_, bv)) in pattern(yp, ym).into_iter().enumerate() {
                    entries.push((blk * ne + e, bv));
                }
            }
            let v2 = base.v[bus].powi(2);
            let yd = edges.y_d[bus].im;
            let t_base: f64 = entries.iter().filter(|(c, _)| *c < ne).map(|(_, v)| v).sum();
            ops.push(OperationalRow {
                kind: OperationalKind::ReactiveGen,
                element: bus,
                base: t_base,
                lo: -qhi / v2 - yd,
                hi: -qlo / v2 - yd,
            });
            t_rows.push(entries);
        }
        let t = Csc::from_columns(ops.len(), {
            let mut cols = vec![Vec::new(); 4 * ne];
            for (r, row) in t_rows.iter().enumerate() {
                for &(c, v) in row {
                    cols[c].push((r, v));
                }
            }
            cols
        });

        // dense sensitivities
        let zt_a = transposed_solve(&lu, &a, n_states)?;
        let b = Mat::from_fn(a_rows.len(), input_rows.len(), |r, i| zt_a[(input_rows[i], r)]);
        let c = minus_times_m(&zt_a, &m, a_rows.len(), None);
        drop(zt_a);

        let tl = t.mul(&l);
        let zt_t = transposed_solve(&lu, &tl, n_states)?;
        let d = Mat::from_fn(ops.len(), input_rows.len(), |r, i| zt_t[(input_rows[i], r)]);
        let e_mat = minus_times_m(&zt_t, &m, ops.len(), Some(&t));

        // caps and limits
        let band = spec.rho_band;
        let band_of = |bus: usize| if kinds[bus] == BusKind::Load { band.0.max(band.1) } else { 0.0 };
        let caps: Vec<RelaxationCaps> = (0..ne)
            .map(|e| RelaxationCaps {
                theta: spec.theta_cap,
                rho: (band_of(from[e]) + band_of(to[e])).clamp(1e-6, spec.rho_cap_max),
            })
            .collect();
        let mut lx_max = BoundPair::zeros(a_rows.len());
        for (r, kind) in a_rows.iter().enumerate() {
            match *kind {
                RowKind::EdgeTheta(e) => {
                    let (mut lo, mut hi) = (caps[e].theta, caps[e].theta);
                    if let Some((amin, amax)) = spec.angle.get(e).copied().flatten() {
                        hi = hi.min((amax - delta_theta_star[e]).max(0.0));
                        lo = lo.min((delta_theta_star[e] - amin).max(0.0));
                    }
                    lx_max.lo[r] = lo;
                    lx_max.hi[r] = hi;
                }
                RowKind::EdgeRho(e) => {
                    lx_max.lo[r] = caps[e].rho;
                    lx_max.hi[r] = caps[e].rho;
                }
                RowKind::NodeRho(_) => {
                    lx_max.lo[r] = band.0;
                    lx_max.hi[r] = band.1;
                }
            }
        }

        Ok(Self {
            n_buses: n,
            kinds,
            from,
            to,
            delta_rho_star,
            delta_theta_star,
            yhat_f,
            yhat_t,
            theta_state,
            rho_state,
            g_row,
            b_row,
            n_states,
            m,
            l,
            j,
            lu,
            inputs: spec.inputs.clone(),
            input_rows,
            ustar,
            input_admittance,
            input_rho_row,
            a_rows,
            a,
            b,
            c,
            t,
            ops,
            d,
            e: e_mat,
            caps,
            lx_max,
            node_rows,
            base: base.clone(),
        })
    }

    pub fn n_edges(&self) -> usize {
        self.from.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn n_rows(&self) -> usize {
        self.a_rows.len()
    }

    pub fn lu(&self) -> &SparseLu {
        &self.lu
    }

    /// Spreads of `δθ_e` and `δρ_e` in a state box.
    pub fn edge_spread(&self, lx: &BoundPair, e: usize) -> EdgeSpread {
        let m = self.n_edges();
        EdgeSpread {
            theta: Spread::new(lx.lo[e], lx.hi[e]),
            rho: Spread::new(lx.lo[m + e], lx.hi[m + e]),
        }
    }

    pub fn b_apply(&self, lu: &BoundPair) -> BoundPair {
        split_apply(&self.b, lu)
    }

    pub fn c_apply(&self, d2: &BoundPair) -> BoundPair {
        split_apply(&self.c, d2)
    }

    pub fn d_apply(&self, lu: &BoundPair) -> BoundPair {
        split_apply(&self.d, lu)
    }

    pub fn e_apply(&self, d2: &BoundPair) -> BoundPair {
        split_apply(&self.e, d2)
    }

    /// Edge deviations `(δθ_e, δρ_e)` of a state deviation.
    pub fn edge_deviations(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let at = |map: &[Option<usize>], bus: usize| map[bus].map_or(0.0, |s| x[s]);
        let th = (0..self.n_edges())
            .map(|e| at(&self.theta_state, self.from[e]) - at(&self.theta_state, self.to[e]))
            .collect();
        let rh = (0..self.n_edges())
            .map(|e| at(&self.rho_state, self.from[e]) - at(&self.rho_state, self.to[e]))
            .collect();
        (th, rh)
    }

    pub fn primitives(&self, x: &[f64]) -> Vec<f64> {
        let m = self.n_edges();
        let (th, rh) = self.edge_deviations(x);
        let mut f = vec![0.0; 4 * m];
        for e in 0..m {
            let (ch, sh) = (rh[e].cosh(), rh[e].sinh());
            let (c, s) = (th[e].cos(), th[e].sin());
            f[e] = ch * c;
            f[m + e] = sh * c;
            f[2 * m + e] = ch * s;
            f[3 * m + e] = sh * s;
        }
        f
    }

    pub fn residual2(&self, x: &[f64]) -> Vec<f64> {
        let m = self.n_edges();
        let mut f = self.primitives(x);
        let lx = self.l.mul_vec(x);
        for (i, v) in f.iter_mut().enumerate() {
            let fstar = if i < m { 1.0 } else { 0.0 };
            *v -= fstar + lx[i];
        }
        f
    }

    /// Scatters an input-space vector onto the equation rows (`R ũ`).
    pub fn r_mul(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_states];
        for (i, r) in self.input_rows.iter().enumerate() {
            out[*r] += u[i];
        }
        out
    }

    /// `J⁻¹ (R ũ - M δ₂f(x̃))`, the right side of the fixed-point equation.
    pub fn fixed_point_map(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let d2 = self.residual2(x);
        let md2 = self.m.mul_vec(&d2);
        let mut rhs = self.r_mul(u);
        for (r, v) in rhs.iter_mut().zip(&md2) {
            *r -= v;
        }
        self.lu.solve(&mut rhs)?;
        Ok(rhs)
    }

    pub fn fixed_point_residual(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let fx = self.fixed_point_map(x, u)?;
        Ok(x.iter().zip(&fx).map(|(a, b)| a - b).collect())
    }

    pub fn a_mul(&self, x: &[f64]) -> Vec<f64> {
        self.a.mul_vec(x)
    }

    /// State deviation of a solved operating point from the base.
    pub fn state_of(&self, point: &OperatingPoint) -> Vec<f64> {
        let mut x = vec![0.0; self.n_states];
        for k in 0..self.n_buses {
            if let Some(s) = self.theta_state[k] {
                x[s] = point.theta[k] - self.base.theta[k];
            }
            if let Some(s) = self.rho_state[k] {
                x[s] = point.rho[k] - self.base.rho[k];
            }
        }
        x
    }

    /// Nodal admittance deviation of every equation row at `point`.
    pub fn equation_inputs_of(&self, point: &OperatingPoint) -> Vec<f64> {
        let mut u = vec![0.0; self.n_states];
        for k in 0..self.n_buses {
            let dy = point.admittance(k) - self.base.admittance(k);
            if let Some(r) = self.g_row[k] {
                u[r] = dy.re;
            }
            if let Some(r) = self.b_row[k] {
                u[r] = dy.im;
            }
        }
        u
    }

    /// Input-space deviation `ũ` of a solved operating point.
    pub fn inputs_of(&self, point: &OperatingPoint) -> Vec<f64> {
        let all = self.equation_inputs_of(point);
        self.input_rows.iter().map(|r| all[*r]).collect()
    }

    /// Values `T f(x̃)` of the operational quantities.
    pub fn operational_values(&self, x: &[f64]) -> Vec<f64> {
        self.t.mul_vec(&self.primitives(x))
    }

    /// Newton's method on `M (f(x̃) - f*) = R ũ` in model coordinates.
    pub fn solve_newton(&self, u: &[f64], x0: &[f64]) -> Result<Vec<f64>> {
        let m = self.n_edges();
        let target = self.r_mul(u);
        let mut x = x0.to_vec();
        let mut trace = Vec::new();
        for _ in 0..50 {
            let f = self.primitives(&x);
            let mut g = self.m.mul_vec(&f);
            for (r, gv) in g.iter_mut().enumerate() {
                *gv -= self.ustar[r] + target[r];
            }
            let norm = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            trace.push(norm);
            if norm <= 1e-12 {
                return Ok(x);
            }
            if !norm.is_finite() {
                break;
            }
            let (th, rh) = self.edge_deviations(&x);
            // ∂f/∂(δρ, δθ) per block
            let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.n_states];
            for e in 0..m {
                let (ch, sh) = (rh[e].cosh(), rh[e].sinh());
                let (c, s) = (th[e].cos(), th[e].sin());
                let d_rho = [sh * c, ch * c, sh * s, ch * s];
                let d_theta = [-ch * s, -sh * s, ch * c, sh * c];
                for (bus, sign) in [(self.from[e], 1.0), (self.to[e], -1.0)] {
                    if let Some(st) = self.rho_state[bus] {
                        for blk in 0..4 {
                            cols[st].push((blk * m + e, sign * d_rho[blk]));
                        }
                    }
                    if let Some(st) = self.theta_state[bus] {
                        for blk in 0..4 {
                            cols[st].push((blk * m + e, sign * d_theta[blk]));
                        }
                    }
                }
            }
            let df = Csc::from_columns(4 * m, cols);
            let jac = self.m.mul(&df);
            let lu = match SparseLu::factor(self.n_states, &jac.triplets()) {
                Ok(lu) => lu,
                Err(_) => break,
            };
            let mut dx: Vec<f64> = g.iter().map(|v| -v).collect();
            if lu.solve(&mut dx).is_err() {
                break;
            }
            for (xi, d) in x.iter_mut().zip(&dx) {
                *xi += d;
            }
        }
        Err(Error::NoConvergence {
            iterations: trace.len(),
            mismatch: *trace.last().unwrap_or(&f64::NAN),
            trace,
        })
    }
}

/// Dense `J^{-T} P^T` for a sparse `P` with `n` columns.
fn transposed_solve(lu: &SparseLu, p: &Csc, n: usize) -> Result<Mat<f64>> {
    let pt = p.transpose();
    let mut rhs = Mat::zeros(n, p.nrows);
    for r in 0..p.nrows {
        for (s, v) in pt.col(r) {
            rhs[(s, r)] = v;
        }
    }
    if p.nrows > 0 {
        lu.solve_transpose_many(&mut rhs)?;
    }
    Ok(rhs)
}

/// `T - Z M` (or `-Z M` without `T`) where `zt = Z^T` is `n × rows`.
fn minus_times_m(zt: &Mat<f64>, m: &Csc, rows: usize, t: Option<&Csc>) -> Mat<f64> {
    let z = Mat::from_fn(rows, zt.nrows(), |r, s| zt[(s, r)]);
    let mut out = Mat::zeros(rows, m.ncols);
    for j in 0..m.ncols {
        let col = out.col_as_slice_mut(j);
        for (i, v) in m.col(j) {
            for (o, zv) in col.iter_mut().zip(z.col_as_slice(i)) {
                *o -= v * zv;
            }
        }
        if let Some(t) = t {
            for (i, v) in t.col(j) {
                col[i] += v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn split_small() {
        let f = Mat::from_fn(1, 2, |_, j| if j == 0 { 1.0 } else { -2.0 });
        let (p, m) = split_pm(&f);
        assert_eq!((p[(0, 0)], p[(0, 1)]), (1.0, 0.0));
        assert_eq!((m[(0, 0)], m[(0, 1)]), (0.0, 2.0));
        let z = Mat::<f64>::zeros(2, 3);
        let (p, m) = split_pm(&z);
        assert!((0..2).all(|i| (0..3).all(|j| p[(i, j)] == 0.0 && m[(i, j)] == 0.0)));
    }

    proptest! {
        #[test]
        fn split_identity(vals in proptest::collection::vec(-5.0..5.0f64, 12)) {
            let f = Mat::from_fn(3, 4, |i, j| vals[i * 4 + j]);
            let (p, m) = split_pm(&f);
            for i in 0..3 {
                for j in 0..4 {
                    prop_assert_eq!(p[(i, j)] - m[(i, j)], f[(i, j)]);
                    prop_assert_eq!(p[(i, j)] * m[(i, j)], 0.0);
                    prop_assert!(p[(i, j)] >= 0.0 && m[(i, j)] >= 0.0);
                }
            }
        }

        #[test]
        fn split_apply_matches_explicit(vals in proptest::collection::vec(-5.0..5.0f64, 12), hi in proptest::collection::vec(0.0..1.0f64, 4), lo in proptest::collection::vec(0.0..1.0f64, 4)) {
            let f = Mat::from_fn(3, 4, |i, j| vals[i * 4 + j]);
            let (p, m) = split_pm(&f);
            let x = BoundPair::new(lo.clone(), hi.clone()).unwrap();
            let out = split_apply(&f, &x);
            for i in 0..3 {
                let eh: f64 = (0..4).map(|j| p[(i, j)] * hi[j] + m[(i, j)] * lo[j]).sum();
                let el: f64 = (0..4).map(|j| p[(i, j)] * lo[j] + m[(i, j)] * hi[j]).sum();
                prop_assert!((out.hi[i] - eh).abs() < 1e-12);
                prop_assert!((out.lo[i] - el).abs() < 1e-12);
            }
        }
    }
}
