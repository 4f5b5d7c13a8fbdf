//! Stratified propensity design under budget and overlap constraints.

mod grid;
mod objectives;
mod separable;
mod solvers;

pub use grid::grid_search_design;
pub use objectives::{
    gamma, gamma_policy, gamma_policy_derivative, objective1_gradient, objective1_risk, objective1_risk_diffuse,
    sigma_b_derivative,
};
pub use solvers::{no_information_design, solve, solve_objective1, solve_objective2, solve_objective3};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{ComplianceMode, StrataConfig};
use crate::error::{Error, Result};
use crate::linalg;
use crate::prior::{GaussianPrior, Prior, Structure};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub propensities: Vec<f64>,
    pub objective_value: f64,
    pub multiplier: f64,
    pub binding: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Objective {
    /// Minimize `tr(Lambda L Vpost L')`.
    EstimationQuadratic { l: DMatrix<f64>, lambda: DMatrix<f64> },
    /// Maximize `sum_g pi_g e_g m_g`.
    InExperimentWelfare,
    /// Maximize `sum_g pi_g Gamma_g(e_g)`.
    PolicyChoice,
}

impl Objective {
    pub fn estimation_identity(g: usize) -> Self {
        Objective::EstimationQuadratic { l: DMatrix::identity(g, g), lambda: DMatrix::identity(g, g) }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::EstimationQuadratic { .. } => "estimation",
            Objective::InExperimentWelfare => "welfare",
            Objective::PolicyChoice => "policy",
        }
    }
}

/// Prior information used by a design problem. `Diffuse` is the flat-prior
/// limit `V^{-1} = 0`, meaningful for the estimation objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DesignPrior {
    Prior(Prior),
    Diffuse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignProblem {
    pub config: StrataConfig,
    pub objective: Objective,
    pub prior: DesignPrior,
    pub compliance_mode: ComplianceMode,
}

impl DesignProblem {
    pub fn new(config: StrataConfig, objective: Objective, prior: Prior, compliance_mode: ComplianceMode) -> Result<Self> {
        let p = Self { config, objective, prior: DesignPrior::Prior(prior), compliance_mode };
        p.validate()?;
        Ok(p)
    }

    pub fn diffuse(config: StrataConfig, objective: Objective, compliance_mode: ComplianceMode) -> Result<Self> {
        let p = Self { config, objective, prior: DesignPrior::Diffuse, compliance_mode };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let g = self.config.n();
        if let DesignPrior::Prior(p) = &self.prior {
            if p.dim() != g {
                return Err(Error::Invalid(format!("prior dimension {} but config has {g} strata", p.dim())));
            }
        }
        if let Objective::EstimationQuadratic { l, lambda } = &self.objective {
            if l.ncols() != g {
                return Err(Error::Invalid(format!("L must have {g} columns")));
            }
            if lambda.nrows() != l.nrows() || lambda.ncols() != l.nrows() {
                return Err(Error::Invalid("Lambda must be square with as many rows as L".into()));
            }
            if !linalg::is_symmetric(lambda, 1e-12) || linalg::sym_eigenvalues(lambda)[0] < -1e-12 {
                return Err(Error::Invalid("Lambda must be symmetric PSD".into()));
            }
        }
        let (a, b) = self.config.budget_form(self.compliance_mode)?;
        let min_cost: f64 = a.iter().map(|x| x * self.config.lower()).sum();
        if min_cost > b + 1e-12 {
            return Err(Error::Invalid(format!("infeasible: minimum-cost design costs {min_cost} > available budget {b}")));
        }
        Ok(())
    }

    /// Gaussian prior for the closed-form criteria (moment-matched if discrete).
    pub fn gaussian_prior(&self) -> Option<GaussianPrior> {
        match &self.prior {
            DesignPrior::Prior(p) => Some(p.as_gaussian(Structure::Full)),
            DesignPrior::Diffuse => None,
        }
    }

    /// Per-stratum (net mean, variance) for the policy objective. The diffuse
    /// reference uses zero net means and the configured reference variance.
    pub fn stratum_moments(&self) -> Vec<(f64, f64)> {
        let g = self.config.n();
        match &self.prior {
            DesignPrior::Prior(p) => {
                let (m, c) = (p.mean(), p.covariance());
                (0..g).map(|i| (m[i] - self.config.policy_cost(i), c[(i, i)].max(0.0))).collect()
            }
            DesignPrior::Diffuse => (0..g).map(|_| (0.0, self.config.reference_variance)).collect(),
        }
    }

    /// Welfare slope per unit propensity for the in-experiment objective.
    pub fn welfare_slopes(&self) -> Vec<f64> {
        let g = self.config.n();
        let means = match &self.prior {
            DesignPrior::Prior(p) => p.mean().iter().copied().collect(),
            DesignPrior::Diffuse => vec![0.0; g],
        };
        let rho = match (self.compliance_mode, &self.config.first_stage) {
            (ComplianceMode::Perfect, _) | (_, None) => vec![1.0; g],
            (_, Some(r)) => r.clone(),
        };
        (0..g).map(|i| self.config.shares[i] * means[i] * rho[i]).collect()
    }

    /// Objective value in natural units (risk for estimation, welfare otherwise).
    pub fn evaluate(&self, e: &[f64]) -> f64 {
        let cfg = &self.config;
        match &self.objective {
            Objective::EstimationQuadratic { l, lambda } => match self.gaussian_prior() {
                Some(p) => objective1_risk(e, &p, l, lambda, cfg),
                None => objective1_risk_diffuse(e, l, lambda, cfg),
            },
            Objective::InExperimentWelfare => self.welfare_slopes().iter().zip(e).map(|(b, x)| b * x).sum(),
            Objective::PolicyChoice => self
                .stratum_moments()
                .iter()
                .enumerate()
                .map(|(g, &(m, v))| cfg.shares[g] * gamma_policy(m, v, e[g], g, cfg))
                .sum(),
        }
    }

    /// Value to maximize: negative risk for estimation, welfare otherwise.
    pub fn score(&self, e: &[f64]) -> f64 {
        match self.objective {
            Objective::EstimationQuadratic { .. } => -self.evaluate(e),
            _ => self.evaluate(e),
        }
    }

    pub fn is_minimization(&self) -> bool {
        matches!(self.objective, Objective::EstimationQuadratic { .. })
    }
}

/// Stratum sampling variance of the difference in means at propensity `e`.
pub fn sampling_variance(e: f64, g: usize, config: &StrataConfig, _mode: ComplianceMode) -> f64 {
    let n = config.stratum_sizes[g];
    config.var_treated[g] / (n * e) + config.var_control[g] / (n * (1.0 - e))
}

/// Derivative of [`sampling_variance`] in `e`.
pub fn sampling_variance_derivative(e: f64, g: usize, config: &StrataConfig) -> f64 {
    let n = config.stratum_sizes[g];
    -config.var_treated[g] / (n * e * e) + config.var_control[g] / (n * (1.0 - e) * (1.0 - e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    pub feasible: bool,
    pub cost: f64,
    pub budget: f64,
    pub diagnostics: Vec<String>,
}

/// Box and budget check. Take-up mode charges `pi c (d0 + e rho)`.
pub fn check_feasibility(e: &[f64], config: &StrataConfig, mode: ComplianceMode) -> Feasibility {
    let mut diagnostics = Vec::new();
    let g = config.n();
    if e.len() != g {
        diagnostics.push(format!("design has {} entries, config has {g} strata", e.len()));
        return Feasibility { feasible: false, cost: f64::NAN, budget: config.budget, diagnostics };
    }
    let (lo, hi) = (config.lower(), config.upper());
    for (i, &x) in e.iter().enumerate() {
        if !(x >= lo - 1e-12 && x <= hi + 1e-12) {
            diagnostics.push(format!("stratum {}: propensity {x} outside [{lo}, {hi}]", i + 1));
        }
    }
    let cost = match mode {
        ComplianceMode::IttTakeupBudget => match (&config.baseline_takeup, &config.first_stage) {
            (Some(d0), Some(rho)) => (0..g).map(|i| config.shares[i] * config.costs[i] * (d0[i] + e[i] * rho[i])).sum(),
            _ => {
                diagnostics.push("take-up budget needs baseline_takeup and first_stage".into());
                f64::NAN
            }
        },
        _ => (0..g).map(|i| config.shares[i] * config.costs[i] * e[i]).sum(),
    };
    if !(cost <= config.budget + 1e-9) {
        diagnostics.push(format!("cost {cost} exceeds budget {}", config.budget));
    }
    Feasibility { feasible: diagnostics.is_empty(), cost, budget: config.budget, diagnostics }
}
