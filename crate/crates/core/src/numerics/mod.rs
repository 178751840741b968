//! Shared numeric kernels: small dense linear algebra, Dirichlet sampling,
//! and kernel two-sample statistics.

pub mod dirichlet;
pub mod matrix;
pub mod mmd;

pub use dirichlet::dirichlet_sample;
pub use matrix::{Matrix, MAX_DIM};
pub use mmd::{rbf_mmd2, Bandwidth};
