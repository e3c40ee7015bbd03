//! Contamination-bias diagnostics and robust estimators for regressions with
//! multiple mutually exclusive treatments.
//!
//! The modules build on each other: [`regress`] is the least-squares engine,
//! [`data`] turns CSV files into designs, [`decompose`] splits regression
//! coefficients into own-effect and contamination parts, [`estimators`]
//! holds the contamination-free alternatives, and [`oracle`] computes the
//! population counterparts for discrete designs.

pub mod data;
pub mod decompose;
pub mod error;
pub mod estimators;
pub mod oracle;
pub mod regress;

pub use data::{
    build_design, encode_treatments, load_csv, load_csv_reader, ControlColumn, ControlKind,
    ControlStyle, CsvColumns, Dataset, Design, DesignSpec, Interaction, LoadOptions, LoadReport,
    Strata,
};
pub use decompose::{
    conditional_ates, decompose_beta, decomposition_se, heterogeneity_sd, lambda_matrices,
    weight_effect_correlation, worst_case_bounds, BootstrapConfig, BootstrapScheme,
    ConditionalAtes, CorrelationReport, DecompositionSe, HeterogeneitySd, WeightDecomposition,
    WorstCaseBounds,
};
pub use error::{Error, Result};
pub use estimators::{
    ate_interacted, common_weights, estimate, estimate_all, estimate_propensity,
    known_pscore_variance, one_at_a_time, uninteracted, EstimateSet, EstimatorKind, KnownPscoreSe,
    PropensityFit, PropensitySource,
};
pub use oracle::{
    efficiency_bound, enumerate_exact, estimands, optimal_weights, population_beta,
    population_lambda, population_phi, simulate, two_school_example, Contrast, Estimands,
    OracleResult, PopulationSpec, StratumSpec,
};
pub use regress::{
    hc_variance, ols_fit, residualize, wls_fit, DesignMatrix, HcFlavor, RegressionFit,
};
