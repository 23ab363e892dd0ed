//! Multi-objective machinery: dominance, hypervolume, Sobol sampling and
//! the qEHVI acquisition.

mod hypervolume;
mod pareto;
mod qehvi;
mod sobol;
mod sobol_table;

pub use hypervolume::{
    hv_monte_carlo, hypervolume, hypervolume_with_error, reference_point, HvEstimate, MC_SAMPLES,
};
pub use pareto::{dominates, pareto_filter, weakly_dominates, ParetoFront};
pub use qehvi::{
    joint_posterior, optimize_acquisition, qehvi, qehvi_from_posterior, AcquisitionOptions,
    AcquisitionResult, BaseSamples, ImprovementBase, JointPosterior, OPTIMIZATION_SAMPLES,
    VERIFICATION_SAMPLES,
};
pub use sobol::{sobol, sobol_unscrambled, Sobol, MAX_DIMENSION};
