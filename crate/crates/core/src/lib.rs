//! Sparse continual-learning engine.
//!
//! Trains a small network over a sequence of disjoint-class tasks while
//! keeping a dynamic sparse weight mask ([`tdm`]), pruning easy training
//! examples online ([`ddr`]) and restricting updates to a gradient mask
//! nested in the weight mask ([`dgm`]). Training cost is tracked
//! analytically by [`metrics`].

pub mod ddr;
pub mod dgm;
pub mod error;
pub mod harness;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod rehearsal;
pub mod tdm;
pub mod tensor;

pub use dgm::GradientMask;
pub use error::{Error, Result};
pub use harness::{Method, RunReport, TaskStream, TrainConfig};
pub use mask::{CsrMatrix, MaskPos, WeightMask};
pub use nn::{ClassRange, GradientSet, Model};
pub use metrics::{AccuracyTable, EvalMode, FlopsLedger, MemoryReport};
pub use rehearsal::{BufferEntry, RehearsalBuffer};
pub use tdm::TdmSchedule;
pub use tensor::{Precision, Scalar, Tensor};
