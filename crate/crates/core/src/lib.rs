//! Network meta-analysis under publication bias: a multivariate
//! random-effects model fitted by inverse-probability-weighted likelihood,
//! with the publication probabilities estimated from trial-registry records.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod ipw;
pub mod model;
pub mod optim;
pub mod ranking;
pub mod report;
pub mod rng;
pub mod selection;
pub mod simulation;

pub use data::{
    load_dataset, read_dataset, save_dataset, write_dataset, Comparison, ComparisonOutcome, DesignType,
    Direction, NetworkDataset, Schema, StudyRecord, TreatmentId,
};
pub use error::{Error, Result};
pub use model::{
    derived_contrast, design_heterogeneity_matrix, fit_mre, fit_weighted, log_likelihood, Contrast, FitResult,
    HeterogeneityStructure, ModelParams, TauMode,
};
pub use diagnostics::{eggers_test, funnel_data, EggerResult, FunnelData};
pub use ipw::{fit_ipw, fit_ipw_bootstrap, fit_ipw_policy, fit_ipw_with_reference, parametric_bootstrap, BootstrapSummary, IpwFit};
pub use ranking::{p_score, ContrastSource, LeagueEntry, LeagueTable, RankTable};
pub use report::{FitDocument, RankDocument};
pub use selection::{
    default_moment_function, estimating_equation, solve_selection, solve_selection_policy, solve_selection_with,
    Family, MomentFunction, RootPolicy, SelectionFit, SelectionParams, SelectionSpec, Structure,
};
pub use simulation::{run_monte_carlo, SimConfig, SimMetrics};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    pub struct Overview;
    #[doc = include_str!("../../../book/src/data-format.md")]
    pub struct DataFormat;
    #[doc = include_str!("../../../book/src/model.md")]
    pub struct Model;
    #[doc = include_str!("../../../book/src/selection.md")]
    pub struct Selection;
    #[doc = include_str!("../../../book/src/ipw.md")]
    pub struct Ipw;
    #[doc = include_str!("../../../book/src/ranking.md")]
    pub struct Ranking;
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    pub struct Diagnostics;
    #[doc = include_str!("../../../book/src/simulation.md")]
    pub struct Simulation;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
