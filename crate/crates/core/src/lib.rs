//! Tensor engine, sparse topologies, attention and the hierarchical
//! sparse transformer model.

pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod hst;
pub mod params;
pub mod sar;
pub mod tape;
pub mod tensor;
pub mod topology;

pub use attention::{DropoutConfig, Mode};
pub use error::{HstError, Result};
pub use hst::{HstModel, HstModelConfig, Pooling, Roll};
pub use params::{ParamId, ParamStore};
pub use sar::{bidirectional_kl, sar_step, LossBreakdown, SarConfig};
pub use tape::{RowPattern, Tape, Var};
pub use tensor::Tensor;
pub use topology::{build_topology, full_topology, SparseTopology};
