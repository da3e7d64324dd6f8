//! Gradient checking, the plain-LSTM oracle, boundary traces, operation
//! counts and hidden-norm heatmaps.

mod gradcheck;
mod oracle;
mod ops;
mod trace;

pub use gradcheck::{gradcheck, smooth_probe, CoordinateCheck, GradcheckOptions, GradcheckReport};
pub use oracle::{lstm_oracle_compare, plain_lstm_step};
pub use ops::{count_ops, LayerOps, OpCounts};
pub use trace::{heatmap_table, norm_heatmap, parse_rendered, render_trace, BoundaryTrace, DEFAULT_TRACE_WIDTH};
