//! ANN-to-SNN conversion with burst firing, spike compression and
//! adaptive timesteps.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the bottom fix the common choices.

pub mod calibration;
pub mod engine;
pub mod error;
pub mod iat;
pub mod model;
pub mod scalar;
pub mod search;
pub mod store;
pub mod tensor;
pub mod train;

pub use calibration::{
    bias_corrections, calibrate_biases, clip_floor, convert, fit_threshold, measure_unevenness,
    sequence_unevenness, Conversion, ConversionMetrics, ConvertOptions, GridSpec, ThresholdFit,
};
pub use engine::{
    rate_output, run_snn, run_snn_chunked, step_layer, write_trace_csv, ChargeLedger, LayerSnnConfig, NeuronState,
    RunStats, SimOptions, Simulation, SnnRun, SpikeTrain,
};
pub use error::{Error, Result};
pub use iat::{
    confidence, default_exit_grid, entropy, fit_exit_policy, infer_adaptive, infer_fixed_boundary,
    ConfidenceKind, ExitParams, ExitPolicy, ExitRecord, ExitTrace,
};
pub use model::{argmax, Conv2d, Dense, LayerSpec, ModelBuilder, ModelGraph};
pub use scalar::Scalar;
pub use store::{
    build_calibration_cache, load_csv, load_idx, load_model, make_synthetic, make_synthetic_with,
    model_digest, save_model, CalibrationCache, DatasetHandle, Normalization, SyntheticKind,
    SyntheticSpec,
};
pub use search::{
    apply_plan, build_table, energy_of, kl_divergence, layer_sensitivity, pareto_search,
    pareto_search_with, softmax, EnergyMode, EnergyModel, LayerPlan, ParamKind, SearchBudget,
    SearchOutcome, SensitivityTable, Solver,
};
pub use tensor::Tensor;
pub use train::{train_reference, TrainOptions, TrainReport};

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type ModelF32 = ModelGraph<f32>;
pub type ModelF64 = ModelGraph<f64>;
pub type DatasetF32 = DatasetHandle<f32>;
pub type DatasetF64 = DatasetHandle<f64>;
pub type SnnConfigF32 = LayerSnnConfig<f32>;
pub type SnnConfigF64 = LayerSnnConfig<f64>;
