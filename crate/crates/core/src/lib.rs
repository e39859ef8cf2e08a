//! Gaussian process emulation of computer models: correlation kernels,
//! marginal-likelihood and posterior-mode estimation with objective priors,
//! Student-t prediction, parallel partial emulation of vector outputs and
//! Bayesian calibration against field data.

pub mod basis;
pub mod calibration;
pub mod error;
pub mod estimation;
pub mod gls;
pub mod kernels;
pub mod model;
mod optimize;
pub mod ppgp;
pub mod prediction;
pub mod priors;

pub use basis::TrendBasis;
pub use error::{Error, Result};
pub use kernels::{CorrelationFamily, KernelMode, KernelSpec, MaternOrder};
pub use calibration::{
    calib_log_posterior, calib_predict, calibrate, CalibrationProblem, DiscrepancySpec, McmcChain, McmcConfig,
    Simulator, ThetaPrior,
};
pub use estimation::{fit, FitConfig, FitReport, KernelChoice, NuggetChoice};
pub use model::{Estimator, GpModel};
pub use ppgp::{ppgp_fit, ppgp_predict, PpgpModel};
pub use prediction::{predict, predict_with, PredictiveT};
pub use priors::{JrPrior, PriorSpec};
