//! Correspondence-guided semantic fusion for 3D Gaussian scenes.
//!
//! The pipeline turns posed multi-view inputs (per-view segmentation masks
//! with language-aligned embeddings plus dense cross-view warp fields) into
//! a queryable semantic Gaussian scene:
//!
//! 1. [`triangulate`] seeds Gaussians from confident pixel correspondences.
//! 2. [`matchgraph`] clusters masks across views into 3D context proposals.
//! 3. [`register`] pools proposal descriptors and scatters them onto
//!    Gaussians with visibility weights from [`splat_renderer`].
//! 4. [`pq_index`] + [`query_eval`] answer embedding queries directly in 3D.
//!
//! [`synth`] generates fully ground-truthed synthetic scenes so every stage
//! can be exercised without external models.

pub mod cli;
pub mod container_io;
pub mod error;
pub mod matchgraph;
pub mod pq_index;
pub mod query_eval;
pub mod register;
pub mod scene_model;
pub mod splat_renderer;
pub mod synth;
pub mod triangulate;

pub use error::Error;
