//! Volumetric reconstruction of a clothed human body from a single image.
//!
//! The crate is organized bottom-up:
//!
//! * [`autodiff`]: a reverse-mode tensor engine with the convolution,
//!   activation, and volume-projection operators the networks need, plus an
//!   Adam optimizer and a finite-difference gradient checker.
//! * [`grid`], [`mesh`]: dense voxel grids / image-plane maps and triangle
//!   meshes, with their on-disk formats.
//! * [`semantic`]: body-surface semantic codes, mesh voxelization, and the
//!   semantic volume / semantic map that encode a body prior.
//! * [`layers`]: differentiable geometric layers connecting image features to
//!   volumes (per-slice feature fusion) and volumes to image-plane maps
//!   (depth, silhouette, normal projection).
//! * [`loss`]: occupancy, silhouette, and surface-normal losses.
//! * [`net`]: the image encoder, volume-to-volume U-Net, and normal refinement
//!   network, together with training and inference drivers.
//! * [`pipeline`]: marching cubes, normal-guided mesh refinement, and
//!   shift-tolerant volume IoU.
//! * [`synth`], [`corpus`]: a procedural body generator and the corpus layout
//!   produced from it.

pub mod autodiff;
pub mod error;
pub mod grid;
pub mod layers;
pub mod loss;
pub mod mesh;
pub mod net;
pub mod semantic;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
