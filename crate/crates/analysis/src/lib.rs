//! Offline analysis over topology exports and sweep results:
//! information-flow reports, FLOP tables and plot-ready aggregation.

pub mod error;
pub mod flops;
pub mod flow;
pub mod plotdata;

pub use error::{AnalysisError, Result};
pub use flops::{flop_table, FlopConfig, FlopRow};
pub use flow::{flow_report, parse_topology, FlowReport};
pub use plotdata::{sweep_plotdata, PlotData};
