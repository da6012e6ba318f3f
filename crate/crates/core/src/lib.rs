//! Quickest change detection for unnormalized statistical models.
//!
//! The pre- and post-change laws are known only up to their normalizing
//! constants. The LPA-CUSUM detector replaces the unknown `log(Z0/Z1)` in
//! the CUSUM log-likelihood ratio with fresh, unbiased thermodynamic
//! integration draws at every step, and shrinks the drift by `gamma` so
//! the false-alarm guarantee survives the extra noise.
//!
//! Every numeric type is generic over [`Real`] (`f32` or `f64`); the
//! aliases at the crate root fix `f64`.

pub mod calibrate;
pub mod detect;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod partition;
pub mod scalar;

pub use calibrate::{
    arl_lower_bound, calibrate, check_gamma_condition, check_jensen_contraction, estimate_kl,
    gamma_zero, predicted_cadd, required_i, scusum_delta, CalibrationInputs, CalibrationResult,
    ConditionCheck, EpsilonRule,
};
pub use detect::{
    cusum_step, lpa_step, run_detector, run_detector_traced, scusum_step, write_trace_csv,
    Detector, DetectorKind, DetectorSpec, DetectorState, LpaConfig, NaiveKind, StoppingReport,
    TraceRow,
};
pub use error::{Error, Result};
pub use harness::{
    derive_rng, derive_seed, estimate_arl, estimate_cadd, generate_stream, sweep, write_sweep_csv,
    ArlEstimate, CaddEstimate, ChangePoint, HarnessConfig, NamedDetector, SeedPurpose, StreamSpec,
    SweepCsvWriter, SweepRow,
};
pub use model::{
    BoltzmannPair, Capabilities, CustomPair, GaussianPair, KlDirection, MaskedPair, ModelPair,
    Regime, Sample, UnnormalizedPair,
};
pub use partition::{MetropolisConfig, Oracle, OracleMode, VarianceReport};
pub use scalar::{Real, RunningStats};

pub type Sample64 = Sample<f64>;
pub type Gaussian64 = GaussianPair<f64>;
pub type Boltzmann64 = BoltzmannPair<f64>;
pub type Model64 = ModelPair<f64>;
pub type OracleMode64 = OracleMode<f64>;
pub type DetectorSpec64 = DetectorSpec<f64>;
pub type LpaConfig64 = LpaConfig<f64>;
pub type CalibrationResult64 = CalibrationResult<f64>;
pub type SweepRow64 = SweepRow<f64>;
