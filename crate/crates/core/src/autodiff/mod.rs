//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`] then sweeps the
//! tape in reverse. Graphs are single-threaded and cheap to build, so parallel training builds
//! one graph per ray chunk and sums the resulting parameter gradients.

mod adam;
mod graph;
mod gradcheck;

pub use adam::{AdamState, LrSchedule};
pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport};
pub use graph::{sigmoid, Graph, Tensor, Value, MIN_GAP};
