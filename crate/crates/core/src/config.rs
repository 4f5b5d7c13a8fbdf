//! Stratum configuration of the new experiment.
//!
//! Keys (TOML or JSON, flat): `shares`, `costs`, `budget`, `overlap`,
//! `var_treated`, `var_control`, `stratum_sizes`, and optionally
//! `policy_costs`, `baseline_takeup`, `first_stage`, `reference_variance`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ComplianceMode {
    #[default]
    Perfect,
    IttVoucherBudget,
    IttTakeupBudget,
}

fn default_reference_variance() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_strata: Option<usize>,
    pub shares: Vec<f64>,
    pub costs: Vec<f64>,
    pub budget: f64,
    pub overlap: f64,
    pub var_treated: Vec<f64>,
    pub var_control: Vec<f64>,
    pub stratum_sizes: Vec<f64>,
    #[serde(default)]
    pub policy_costs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_takeup: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_stage: Option<Vec<f64>>,
    #[serde(default = "default_reference_variance")]
    pub reference_variance: f64,
}

impl StrataConfig {
    pub fn n(&self) -> usize {
        self.shares.len()
    }

    pub fn lower(&self) -> f64 {
        self.overlap
    }

    pub fn upper(&self) -> f64 {
        1.0 - self.overlap
    }

    pub fn policy_cost(&self, g: usize) -> f64 {
        self.policy_costs.get(g).copied().unwrap_or(0.0)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg: Self = if is_json {
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                source_name: path.display().to_string(),
                line: e.line(),
                msg: e.to_string(),
            })?
        } else {
            toml::from_str(&text).map_err(|e| {
                let line = e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0);
                Error::Parse { source_name: path.display().to_string(), line, msg: e.message().to_string() }
            })?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.n();
        let bad = |m: String| Err(Error::Invalid(m));
        if g == 0 {
            return bad("shares must be nonempty".into());
        }
        if let Some(n) = self.n_strata {
            if n != g {
                return bad(format!("n_strata = {n} but shares has {g} entries"));
            }
        }
        let vectors: [(&str, &Vec<f64>); 5] = [
            ("costs", &self.costs),
            ("var_treated", &self.var_treated),
            ("var_control", &self.var_control),
            ("stratum_sizes", &self.stratum_sizes),
            ("shares", &self.shares),
        ];
        for (name, v) in vectors {
            if v.len() != g {
                return bad(format!("{name} has {} entries, expected {g}", v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return bad(format!("{name} has a non-finite entry"));
            }
        }
        if !self.policy_costs.is_empty() && self.policy_costs.len() != g {
            return bad(format!("policy_costs has {} entries, expected {g}", self.policy_costs.len()));
        }
        if self.shares.iter().any(|&p| p < 0.0) || (self.shares.iter().sum::<f64>() - 1.0).abs() > 1e-8 {
            return bad("shares must be nonnegative and sum to 1".into());
        }
        if self.costs.iter().any(|&c| c < 0.0) {
            return bad("costs must be nonnegative".into());
        }
        if !(self.budget >= 0.0) {
            return bad("budget must be nonnegative".into());
        }
        if !(self.overlap > 0.0 && self.overlap < 0.5) {
            return bad("overlap must lie in (0, 0.5)".into());
        }
        for (name, v) in [("var_treated", &self.var_treated), ("var_control", &self.var_control), ("stratum_sizes", &self.stratum_sizes)] {
            if v.iter().any(|&x| x <= 0.0) {
                return bad(format!("{name} entries must be positive"));
            }
        }
        if !(self.reference_variance > 0.0) {
            return bad("reference_variance must be positive".into());
        }
        match (&self.baseline_takeup, &self.first_stage) {
            (None, None) => {}
            (Some(d0), Some(rho)) => {
                if d0.len() != g || rho.len() != g {
                    return bad("baseline_takeup and first_stage need one entry per stratum".into());
                }
                if d0.iter().chain(rho.iter()).any(|&x| !(0.0..=1.0).contains(&x)) {
                    return bad("baseline_takeup and first_stage must lie in [0, 1]".into());
                }
            }
            _ => return bad("baseline_takeup and first_stage must be given together".into()),
        }
        let min_cost: f64 = (0..g).map(|i| self.shares[i] * self.costs[i] * self.overlap).sum();
        if min_cost > self.budget + 1e-12 {
            return bad(format!("infeasible: minimum-cost design costs {min_cost} > budget {}", self.budget));
        }
        Ok(())
    }

    /// Linear budget form `sum_g a_g e_g <= b` for the given compliance mode.
    pub fn budget_form(&self, mode: ComplianceMode) -> Result<(Vec<f64>, f64)> {
        let g = self.n();
        match mode {
            ComplianceMode::Perfect | ComplianceMode::IttVoucherBudget => {
                Ok(((0..g).map(|i| self.shares[i] * self.costs[i]).collect(), self.budget))
            }
            ComplianceMode::IttTakeupBudget => {
                let (d0, rho) = match (&self.baseline_takeup, &self.first_stage) {
                    (Some(d0), Some(rho)) => (d0, rho),
                    _ => return Err(Error::Invalid("take-up budget needs baseline_takeup and first_stage".into())),
                };
                let a = (0..g).map(|i| self.shares[i] * self.costs[i] * rho[i]).collect();
                let offset: f64 = (0..g).map(|i| self.shares[i] * self.costs[i] * d0[i]).sum();
                Ok((a, self.budget - offset))
            }
        }
    }
}
