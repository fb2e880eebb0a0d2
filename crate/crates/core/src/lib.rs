//! Bit-accurate model of an iterative-CORDIC vector engine: fixed-point
//! formats, the shared CORDIC kernel, activation and pooling units, the
//! LIFO parameter loader, the layer-multiplexed engine and the network runner.

pub mod activation;
pub mod cordic;
pub mod engine;
pub mod fxp;
pub mod memmap;
pub mod pooling;
pub mod runner;

pub use activation::{ActivationKind, AfReport};
pub use cordic::{Accuracy, CordicConfig, CordicMode, CordicResult};
pub use engine::control::{check_trace, TraceEvent};
pub use engine::cycles::{CycleReport, LayerCycles};
pub use engine::{Engine, EngineConfig, EngineError, LayerDescriptor, LayerKind, NetworkRun};
pub use fxp::{FxPFormat, FxPValue};
pub use memmap::{ParamImage, ParamMemory, Topology};
pub use pooling::{FeatureMap, PoolVariant, PoolWindow};
pub use runner::dataset::Dataset;
pub use runner::model::ModelSpec;
pub use runner::{EvalResult, QuantizedModel, RunnerError, SensitivityReport};
