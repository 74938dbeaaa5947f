//! Calibration of the leverage function to a smile grid.

mod config;
mod eval;
mod objective;
mod sabr;
mod slice;

pub use config::{CalibConfig, PathStep, SabrInitConfig};
pub use eval::{eval_model_ivs, eval_strips, grid_strips, ModelSmile};
pub use objective::{
    calib_gradient, calib_gradient_tape, calib_objective, otm_targets, product_form_gradient, product_form_objective,
    put_from_call, robust_gradient, robust_objective, vega_weights, GradEval, WeightVector,
};
pub use sabr::{atm_vol, calibrate_sabr_init, SabrInitReport};
pub use slice::{calibrate_robust, calibrate_slice, calibrate_surface, CalibReport, CheckPoint, Monitor, Silent, SliceReport, SurfaceFit};
