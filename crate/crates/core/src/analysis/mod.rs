//! Post-training analyses: norm-scaled perturbations and robustness curves,
//! effective-timescale estimation from activity autocorrelations, and
//! weight-conservation statistics across modules.

pub mod perturb;
pub mod robustness;
pub mod timescales;
pub mod weights;

pub use perturb::{perturb_network, perturb_values, perturbed_tensor};
pub use robustness::{robustness_curve, PerturbTarget, PerturbationSpec, RobustnessPoint};
pub use timescales::{
    autocorrelation, effective_timescales, fit_timescales, trained_tau_stats,
    trained_timescale_summary, EffectiveTimescales, FitModel, NeuronTimescale, TauGroupStat,
    TimescaleFit,
};
pub use weights::{weight_change_variance, PairVariance, WeightChangeStats, WeightClass};
