//! Virtualized PMU wide-area measurement system.
//!
//! PMU emulators stream synchrophasor frames to Virtual Objects (VOs), which
//! cache data and expose a key-value resource interface. Composite Virtual
//! Objects (CVOs) align VO streams by timestamp, compose multi-channel
//! aggregate frames and raise threshold actions over a topic-based broker. A
//! discrete-event transport model accounts bytes and latency, and a linear
//! weighted-least-squares estimator consumes the aggregated measurements.

pub mod audit;
pub mod broker;
pub mod codec;
pub mod crc;
pub mod cvo;
pub mod data;
pub mod estimator;
pub mod experiment;
pub mod grid;
pub mod kv;
pub mod linalg;
pub mod netsim;
pub mod pipeline;
pub mod pmu;
pub mod scalar;
pub mod vo;

pub use scalar::Scalar;

pub type Matrix = linalg::Matrix<f64>;
pub type MatrixF32 = linalg::Matrix<f32>;
pub type BranchAdmittance = grid::BranchAdmittance<f64>;
pub type BranchAdmittanceF32 = grid::BranchAdmittance<f32>;
pub type MeasurementModel = estimator::MeasurementModel<f64>;
pub type MeasurementModelF32 = estimator::MeasurementModel<f32>;
pub type StateVector = estimator::StateVector<f64>;
pub type StateVectorF32 = estimator::StateVector<f32>;
pub type WlsSolution = estimator::WlsSolution<f64>;
pub type WlsSolutionF32 = estimator::WlsSolution<f32>;
