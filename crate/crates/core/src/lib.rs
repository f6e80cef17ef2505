//! Finite unimodular random rooted measured metric spaces: data model,
//! exact and Monte-Carlo verification of the mass transport principle,
//! balancing kernels, Palm calculus, point processes, random walks, stable
//! balancing transports and a Gromov-Hausdorff-Prokhorov surrogate.

pub mod balancing;
pub mod canon;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod ghp;
pub mod models;
pub mod observable;
pub mod palm;
pub mod process;
pub mod report;
pub mod seed;
pub mod space;
pub mod stats;
pub mod walks;
pub mod transport;

pub use canon::{
    are_isomorphic, automorphism_group, canonical_form, canonical_hash, point_ranks, AutomorphismGroup, CanonConfig,
    Digest, IsomorphismWitness,
};
pub use ensemble::{
    degree_biased, exact_expectation, quasi_transitive_unimodularization, reroot_by_kernel, uniform_rooting, Atom,
    RootedEnsemble,
};
pub use error::{Error, Result};
pub use experiment::{run_experiment, CheckSpec, ExperimentConfig, RunReport};
pub use ghp::{ghp_bruteforce, ghp_upper, scaling_cauchy_demo, Correspondence, GhpOptions, GhpResult};
pub use models::{build_model, Model, ModelSpec, Sampler};
pub use observable::Observable;
pub use process::{apply_recipe, palm_of_poisson_check, voronoi, DecorationRecipe, NamedRecipe};
pub use report::{Mode, MtpReport, Verdict};
pub use space::{bias_measure, product_space, validate, Decoration, FiniteRmmSpace, MeasureRef, MetricRule, Violation};
pub use stats::Estimate;
pub use transport::{
    build_g_positive, build_h_balanced, eval_out_in, mtp_check_exact, mtp_check_mc, Builtin, KernelMatrix,
    SquareMatrix, TransportFunction,
};
