//! Study configuration: which limits are active, how thermal ratings are
//! filled in and split, which inputs vary. [`Study::prepare`] solves the
//! base case and builds the model.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FixedPointModel, InputCoord, ModelSpec, Part, ThermalBudget};
use crate::network::{BusKind, PowerNetwork};
use crate::powerflow::{solve_base, ActiveLimits, ConstraintKind, OperatingPoint, PowerFlow, Violation};

/// How an apparent-power rating is split into active and reactive budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetSplit {
    /// Same headroom `m` on both: `(|p*| + m)² + (|q*| + m)² = s_max²`.
    #[default]
    EqualHeadroom,
    /// `ℓ_p = s_max |p*| / |s*|`, `ℓ_q = s_max |q*| / |s*|`.
    Proportional,
}

impl BudgetSplit {
    /// `(ℓ_p, ℓ_q)` for base flow `s` under rating `s_max`; `None` when the
    /// base flow already exceeds it.
    pub fn split(self, s: Complex64, s_max: f64) -> Option<(f64, f64)> {
        let (p, q) = (s.re.abs(), s.im.abs());
        let mag = s.norm();
        if mag > s_max {
            return None;
        }
        match self {
            BudgetSplit::EqualHeadroom => {
                // m² + (p+q) m + (p² + q² - s²)/2 = 0
                let b = p + q;
                let c = 0.5 * (p * p + q * q - s_max * s_max);
                let m = 0.5 * (-b + (b * b - 4.0 * c).sqrt());
                Some((p + m, q + m))
            }
            BudgetSplit::Proportional => {
                if mag == 0.0 {
                    let h = s_max / std::f64::consts::SQRT_2;
                    Some((h, h))
                } else {
                    Some((s_max * p / mag, s_max * q / mag))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreeInputs {
    /// Active power of the `n` largest loads.
    LargestLoads(usize),
    /// Explicit `(bus id, part)` list.
    Explicit(Vec<(u32, Part)>),
    /// Both parts of every load bus.
    AllLoads,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setup {
    /// Relative voltage band around the base magnitude.
    pub band: f64,
    pub q_limits: bool,
    pub thermal: bool,
    /// Rating used for branches without one, as a multiple of `|s*|`.
    pub smax_factor: f64,
    pub budget: BudgetSplit,
    pub free: FreeInputs,
    pub theta_cap: f64,
    pub rho_cap_max: f64,
}

impl Default for Setup {
    fn default() -> Self {
        Self {
            band: 0.01,
            q_limits: true,
            thermal: true,
            smax_factor: 2.0,
            budget: BudgetSplit::default(),
            free: FreeInputs::LargestLoads(2),
            theta_cap: 0.5,
            rho_cap_max: 0.2,
        }
    }
}

impl Setup {
    /// ±1% band, doubled base flows as missing ratings, reactive and
    /// thermal limits only below 300 buses.
    pub fn screening(network: &PowerNetwork) -> Self {
        let small = network.n_buses() < 300;
        Self {
            q_limits: small,
            thermal: small,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.band > 0.0 && self.band < 0.5) {
            return Err(Error::InvalidArgument(format!("voltage band {} out of (0, 0.5)", self.band)));
        }
        if !(self.smax_factor > 1.0) {
            return Err(Error::InvalidArgument(format!("smax factor {} must exceed 1", self.smax_factor)));
        }
        crate::bounds::RelaxationCaps::new(self.theta_cap, self.rho_cap_max)?;
        Ok(())
    }
}

/// A limit that the base point itself violates, left out of the study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedLimit {
    pub kind: ConstraintKind,
    /// Bus id or branch index.
    pub element: usize,
    pub value: f64,
    pub limit: f64,
}

impl From<&Violation> for DroppedLimit {
    fn from(v: &Violation) -> Self {
        Self {
            kind: v.kind,
            element: v.element,
            value: v.value,
            limit: v.limit,
        }
    }
}

pub struct Study {
    pub network: PowerNetwork,
    pub pf: PowerFlow,
    pub base: OperatingPoint,
    pub limits: ActiveLimits,
    pub dropped: Vec<DroppedLimit>,
    pub model: FixedPointModel,
    pub setup: Setup,
    /// Indices into `model.inputs` that the objective acts on.
    pub free: Vec<usize>,
}

impl std::fmt::Debug for Study {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Study")
            .field("network", &self.network.name)
            .field("model", &self.model)
            .field("dropped", &self.dropped.len())
            .field("free", &self.free)
            .finish()
    }
}

impl Study {
    pub fn prepare(network: PowerNetwork, setup: &Setup) -> Result<Self> {
        setup.validate()?;
        network.validate()?;
        let pf = PowerFlow::new(&network);
        let base = solve_base(&network, None)?;
        Self::prepare_at(network, pf, base, setup)
    }

    /// Same as [`Study::prepare`] around an already solved base point.
    pub fn prepare_at(network: PowerNetwork, pf: PowerFlow, base: OperatingPoint, setup: &Setup) -> Result<Self> {
        let n = network.n_buses();
        let nb = network.n_branches();
        let flows = pf.branch_flows(&base);

        let mut limits = ActiveLimits::voltage_band(&base, setup.band, nb);
        let from_case = ActiveLimits::from_network(&network);
        limits.angle = from_case.angle.clone();
        if setup.q_limits {
            limits.q_gen = from_case.q_gen.clone();
        }
        if setup.thermal {
            limits.s_max = network
                .branches
                .iter()
                .zip(&flows)
                .map(|(br, (sf, st))| {
                    br.s_max.or_else(|| {
                        let s = sf.norm().max(st.norm());
                        (s > 1e-9).then_some(setup.smax_factor * s)
                    })
                })
                .collect();
        }

        let mut dropped = Vec::new();
        for v in pf.check(&base, &limits).violations {
            match v.kind {
                ConstraintKind::QGen => limits.q_gen[v.element] = None,
                ConstraintKind::PGen => limits.p_gen[v.element] = None,
                ConstraintKind::Thermal => limits.s_max[v.element] = None,
                ConstraintKind::AngleDifference => limits.angle[v.element] = None,
                ConstraintKind::Voltage => continue,
            }
            log::warn!("base point violates {:?} limit at {}; dropped", v.kind, v.element);
            dropped.push(DroppedLimit::from(&v));
        }
        dropped.dedup_by(|a, b| a.kind == b.kind && a.element == b.element);

        let thermal: Vec<Option<ThermalBudget>> = limits
            .s_max
            .iter()
            .zip(&flows)
            .map(|(smax, (sf, st))| {
                let smax = (*smax)?;
                Some(ThermalBudget {
                    from: setup.budget.split(*sf, smax)?,
                    to: setup.budget.split(*st, smax)?,
                })
            })
            .collect();

        let loads: Vec<usize> = network.buses_of_kind(BusKind::Load).collect();
        let inputs: Vec<InputCoord> = loads
            .iter()
            .flat_map(|&bus| [Part::G, Part::B].map(|part| InputCoord { bus, part }))
            .collect();
        let free = select_free(&network, &base, &inputs, &setup.free)?;

        let rho_band = (-(1.0 - setup.band).ln(), (1.0 + setup.band).ln());
        let spec = ModelSpec {
            inputs,
            thermal,
            q_gen: (0..n)
                .map(|k| if network.buses[k].kind == BusKind::Generator { limits.q_gen[k] } else { None })
                .collect(),
            rho_band,
            theta_cap: setup.theta_cap,
            rho_cap_max: setup.rho_cap_max,
            angle: limits.angle.clone(),
        };
        let model = FixedPointModel::build(&network, &pf.edges, &base, &spec)?;
        Ok(Self {
            network,
            pf,
            base,
            limits,
            dropped,
            model,
            setup: setup.clone(),
            free,
        })
    }

    /// Base net injections of every bus.
    pub fn base_injections(&self) -> Vec<Complex64> {
        self.base.injections()
    }

    /// Position of a `(bus index, part)` in the model inputs.
    pub fn input_index(&self, bus: usize, part: Part) -> Option<usize> {
        self.model.inputs.iter().position(|c| c.bus == bus && c.part == part)
    }
}

fn select_free(
    network: &PowerNetwork,
    base: &OperatingPoint,
    inputs: &[InputCoord],
    free: &FreeInputs,
) -> Result<Vec<usize>> {
    let find = |bus: usize, part: Part| inputs.iter().position(|c| c.bus == bus && c.part == part);
    match free {
        FreeInputs::AllLoads => Ok((0..inputs.len()).collect()),
        FreeInputs::LargestLoads(count) => {
            let mut loads: Vec<usize> = inputs.iter().filter(|c| c.part == Part::G).map(|c| c.bus).collect();
            loads.sort_by(|a, b| base.p[*a].total_cmp(&base.p[*b]).then(a.cmp(b)));
            let picked: Vec<usize> = loads.into_iter().take(*count).filter_map(|b| find(b, Part::G)).collect();
            if picked.is_empty() {
                return Err(Error::InvalidArgument("network has no load buses to vary".into()));
            }
            Ok(picked)
        }
        FreeInputs::Explicit(list) => list
            .iter()
            .map(|&(id, part)| {
                let bus = network
                    .index_of(id)
                    .ok_or_else(|| Error::UnknownBus { element: "free input".into(), bus: id })?;
                find(bus, part).ok_or_else(|| {
                    Error::InvalidArgument(format!("bus {id} is not a load bus and cannot be varied"))
                })
            })
            .collect(),
    }
}
