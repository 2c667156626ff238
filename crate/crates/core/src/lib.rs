//! Joint shape matching over deformable shape collections.
//!
//! Correspondences between adjacent level sets of a latent-conditioned
//! implicit field are induced by a linearly constrained quadratic program
//! whose objective is an infinitesimal as-rigid/as-conformal-as-possible
//! energy. On top of that sit interpolation-guided template registration, a
//! latent K-NN shape graph, and a Chamfer + ACAP refinement of per-shape
//! template meshes.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod energy;
pub mod error;
pub mod eval;
pub mod implicit;
pub mod induced;
pub mod linalg;
pub mod mesh;
pub mod pipeline;
pub mod refine;
pub mod registration;
pub mod synth;

pub use error::{Error, Result};
