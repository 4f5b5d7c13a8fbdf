//! Value functionals, regret experiments and dominance checks.

mod continuation;
mod dominance;
mod experiment;
mod value;

pub use continuation::{continuation_value, ContinuationKind};
pub use dominance::{
    blackwell_study, index_ranking_check, loewner_dominance, random_ordered_pair, standard_kinds, BlackwellStudy, scalar_continuation, scalar_index_reduction_check, DominanceCheck, DominanceReport,
    IndexRanking, ScalarIndexReport,
};
pub use experiment::{
    continuous_regret, derive_seed, eb_beats_ni, fit_marginals, mix_seed, ols_slope, rate_experiment, regret_experiment,
    two_stratum_curvature, two_stratum_modulus, two_stratum_oracle, ArchiveGenerator, Estimator, ExperimentSettings, Marginal,
    RateConfig, RateOrder, RateRow, RateTable, RegretResult, RegretTemplate, TwoStratumOracle,
};
pub use value::{closed_form_value_quadratic, mc_value, ValueEstimate, BLOCK};
