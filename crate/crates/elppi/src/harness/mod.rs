//! Monte Carlo harness: scenario generators, the replication engine, and
//! result emission.
//!
//! A run is described by an [`ExperimentSpec`], executed replication by
//! replication with per-replication RNG substreams, so results do not
//! depend on how replications are distributed across workers. Aggregates
//! come out as flat metric rows ready for CSV or JSON emission.

mod experiment;
mod generate;

pub use experiment::{result_csv, run_experiment, ExperimentResult, MetricRow};
pub use generate::{dist_eval_grid, generate, true_theta};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Mean of `Y = X + e` with predictions `Y~ = X + e~`.
    MeanInference,
    /// Linear projection coefficients under a misspecified linear model.
    Linreg,
    /// Scalar mean with the extra second-moment condition.
    Overidentified,
    /// Marginal distribution of the response with learned predictions.
    DistLearning,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::MeanInference => "mean_inference",
            Scenario::Linreg => "linreg",
            Scenario::Overidentified => "overidentified",
            Scenario::DistLearning => "dist_learning",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanDist {
    Normal,
    Exp,
}

impl Default for MeanDist {
    fn default() -> Self {
        MeanDist::Normal
    }
}

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

fn two() -> f64 {
    2.0
}

/// Scenario parameters. `d = 0` means the scenario default (5 for the
/// regression scenario, 10 for distribution learning).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    #[serde(default)]
    pub dist: MeanDist,
    /// Prediction noise scale in the regression scenario.
    #[serde(default = "one")]
    pub rho: f64,
    /// Response noise scale in the distribution-learning scenario.
    #[serde(default = "half")]
    pub sigma: f64,
    #[serde(default)]
    pub d: usize,
    /// True parameter in the over-identified scenario.
    #[serde(default = "two")]
    pub theta: f64,
    /// Null-hypothesis scaling of the true coefficient vector.
    #[serde(default = "one")]
    pub c_scale: f64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            dist: MeanDist::Normal,
            rho: 1.0,
            sigma: 0.5,
            d: 0,
            theta: 2.0,
            c_scale: 1.0,
        }
    }
}

impl ScenarioParams {
    /// Covariate dimension with scenario defaults applied.
    pub fn resolved_d(&self, scenario: Scenario) -> usize {
        if self.d > 0 {
            return self.d;
        }
        match scenario {
            Scenario::Linreg => 5,
            Scenario::DistLearning => 10,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    Supervised,
    Ppi,
    PpiPowerTuned,
    EpiBasis,
    EpiCf,
    SupervisedEl,
}

impl MethodId {
    pub fn name(&self) -> &'static str {
        match self {
            MethodId::Supervised => "supervised",
            MethodId::Ppi => "ppi",
            MethodId::PpiPowerTuned => "ppi_power_tuned",
            MethodId::EpiBasis => "epi_basis",
            MethodId::EpiCf => "epi_cf",
            MethodId::SupervisedEl => "supervised_el",
        }
    }
}

fn default_reps() -> usize {
    2000
}

fn default_alpha() -> f64 {
    0.1
}

/// One simulation cell: scenario, sizes, parameters, methods, and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub scenario: Scenario,
    pub n: usize,
    pub m: usize,
    #[serde(default)]
    pub params: ScenarioParams,
    pub methods: Vec<MethodId>,
    #[serde(default = "default_reps")]
    pub replications: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.n < 2 {
            return Err(Error::Config("n must be at least 2".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config("alpha must be in (0,1)".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        let p = &self.params;
        if !(p.rho >= 0.0) || !(p.sigma > 0.0) || !(p.theta > 0.0) || !(p.c_scale > 0.0) {
            return Err(Error::Config(
                "scenario parameters must be positive (rho may be zero)".into(),
            ));
        }
        let allowed: &[MethodId] = match self.scenario {
            Scenario::DistLearning => {
                &[MethodId::Supervised, MethodId::EpiBasis, MethodId::EpiCf]
            }
            _ => &[
                MethodId::Supervised,
                MethodId::Ppi,
                MethodId::PpiPowerTuned,
                MethodId::EpiBasis,
                MethodId::EpiCf,
                MethodId::SupervisedEl,
            ],
        };
        for m in &self.methods {
            if !allowed.contains(m) {
                return Err(Error::Config(format!(
                    "method {} is not available in scenario {}",
                    m.name(),
                    self.scenario.name()
                )));
            }
        }
        Ok(())
    }
}
