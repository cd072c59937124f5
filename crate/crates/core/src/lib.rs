//! Zone-based and general training of graph-attention pointer policies for
//! ordering delivery stops.
//!
//! The pipeline runs data loading ([`dataio`]), hexagonal bucketing
//! ([`hexgrid`]), zoning ([`zoning`]), graph features ([`routegraph`]), the
//! policy on its own autodiff tape ([`policy`], [`autodiff`]), training and
//! stitched inference ([`pipeline`]), heuristic baselines ([`baselines`]) and
//! reporting ([`metrics`]).
//!
//! ```
//! use zoneroute::baselines::{nearest_neighbor, two_opt};
//! use zoneroute::routegraph::tour_length;
//!
//! let t = vec![vec![0.0, 1.0, 9.0], vec![9.0, 0.0, 1.0], vec![1.0, 9.0, 0.0]];
//! let nn = nearest_neighbor(&t, 0)?;
//! assert_eq!(nn, [0, 1, 2]);
//! assert_eq!(tour_length(&two_opt(&nn, &t)?, &t, false)?, 2.0);
//! # Ok::<(), zoneroute::Error>(())
//! ```

pub mod autodiff;
pub mod baselines;
pub mod dataio;
pub mod error;
pub mod hexgrid;
pub mod metrics;
pub mod pipeline;
pub mod policy;
pub mod rng;
pub mod routegraph;
pub mod zoning;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/grid.md")]
    mod grid {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/zones.md")]
    mod zones {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/policy.md")]
    mod policy {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/stitching.md")]
    mod stitching {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
