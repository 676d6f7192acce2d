//! Run configuration: a TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use secregion::certifier::{IterationOptions, Objective, SearchOptions};
use secregion::network::PowerNetwork;
use secregion::setup::{BudgetSplit, FreeInputs, Setup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// ±1% band; reactive and thermal limits only below 300 buses.
    #[default]
    Screening,
    /// Every limit active regardless of size.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Robustness,
    Loadability,
    Chance,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetupOverrides {
    pub band: Option<f64>,
    pub q_limits: Option<bool>,
    pub thermal: Option<bool>,
    pub smax_factor: Option<f64>,
    pub budget: Option<BudgetSplit>,
    pub free: Option<FreeInputs>,
    pub theta_cap: Option<f64>,
    pub rho_cap_max: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: Option<ObjectiveKind>,
    /// Weights, direction or standard deviations over the free inputs.
    pub values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub lp_only: Option<bool>,
    pub rel_tol: Option<f64>,
    pub max_iterations: Option<usize>,
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    pub samples: Option<usize>,
    pub rays: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub case: Option<PathBuf>,
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub setup: SetupOverrides,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub validate: ValidateConfig,
}

pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_SAMPLES: usize = 500;
pub const DEFAULT_RAYS: usize = 32;
pub const DEFAULT_CHANCE_STD: f64 = 0.1;

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn case_path(&self) -> Result<&Path, String> {
        self.case.as_deref().ok_or_else(|| "no case given (use --case or `case` in the config)".to_string())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn samples(&self) -> usize {
        self.validate.samples.unwrap_or(DEFAULT_SAMPLES)
    }

    pub fn rays(&self) -> usize {
        self.validate.rays.unwrap_or(DEFAULT_RAYS)
    }

    pub fn setup_for(&self, network: &PowerNetwork) -> Setup {
        let mut s = match self.preset.unwrap_or_default() {
            Preset::Screening => Setup::screening(network),
            Preset::Full => Setup::default(),
        };
        let o = &self.setup;
        if let Some(v) = o.band {
            s.band = v;
        }
        if let Some(v) = o.q_limits {
            s.q_limits = v;
        }
        if let Some(v) = o.thermal {
            s.thermal = v;
        }
        if let Some(v) = o.smax_factor {
            s.smax_factor = v;
        }
        if let Some(v) = o.budget {
            s.budget = v;
        }
        if let Some(v) = &o.free {
            s.free = v.clone();
        }
        if let Some(v) = o.theta_cap {
            s.theta_cap = v;
        }
        if let Some(v) = o.rho_cap_max {
            s.rho_cap_max = v;
        }
        s
    }

    pub fn objective_for(&self, n_free: usize) -> Objective {
        let kind = self.objective.kind.unwrap_or(ObjectiveKind::Robustness);
        let values = |default: f64| self.objective.values.clone().unwrap_or_else(|| vec![default; n_free]);
        match kind {
            ObjectiveKind::Robustness => Objective::Robustness { weights: values(1.0) },
            ObjectiveKind::Loadability => Objective::Loadability { direction: values(1.0) },
            ObjectiveKind::Chance => Objective::Chance {
                std_devs: values(DEFAULT_CHANCE_STD),
            },
        }
    }

    pub fn search_options(&self) -> SearchOptions {
        let d = SearchOptions::default();
        let it = IterationOptions::default();
        SearchOptions {
            lp_only: self.search.lp_only.unwrap_or(d.lp_only),
            rel_tol: self.search.rel_tol.unwrap_or(d.rel_tol),
            iteration: IterationOptions {
                max_iterations: self.search.max_iterations.unwrap_or(it.max_iterations),
                tolerance: self.search.tolerance.unwrap_or(it.tolerance),
            },
            ..d
        }
    }
}
