//! Core algorithms for propagating a drag-style edit of one reference view
//! across a multi-view scene.
//!
//! The crate is `no_std` and only needs `alloc`. Everything here is a pure
//! function of its inputs; file formats, the command line and thread pools
//! live in the `dragscene` companion crate.
//!
//! Stages, in pipeline order:
//!
//! * [`drag`] edits the reference view in latent space and re-inverts it.
//! * [`alignment`] fuses pairwise pointmaps into world-frame geometry with the
//!   edited region anchored to the reference view.
//! * [`latent_field`] attaches the reference latent and mask to that geometry
//!   and renders it into any camera.
//! * [`mvopt`] pulls every other view's latent towards the rendered map.
//! * [`pipeline`] orchestrates the above and reconstructs the edited scene;
//!   [`metrics`] scores cross-view consistency.
#![no_std]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

pub mod alignment;
pub mod diffusion;
pub mod drag;
mod error;
pub mod geometry;
pub mod grid;
pub mod latent_field;
pub(crate) mod math;
pub mod metrics;
pub mod mvopt;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod splat;

pub use error::{Error, Result};
