//! Encoder–decoder policy: a GATv2 encoder over the complete route graph
//! and a GRU pointer decoder that emits one stop at a time.
//!
//! Every tensor is a row vector or a stack of row vectors, so a node
//! embedding is a row of an `n × d` matrix and a linear map is `x · W`.

mod model;
mod params;

pub use model::*;
pub use params::*;
