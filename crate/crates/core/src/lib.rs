//! Resolution-aware convolutional networks on physical grids.
//!
//! This crate treats images and feature maps as piecewise-constant functions
//! on rectangular physical domains rather than bare pixel matrices. All layer
//! primitives carry the grid resolution explicitly (convolutions are h^2
//! quadrature sums), which makes a trained network a discretization of a
//! single function-space network: the same weights can be instantiated at
//! any resolution and the outputs converge as the grid is refined.
//!
//! Modules:
//! - [`grid`]: domains, PC function spaces, projection, refinement
//! - [`ops`]: convolution, padding, sampling, activations, batch norm
//! - [`network`]: architecture description and the forward pass
//! - [`autodiff`]: reverse-mode gradients and a finite-difference checker
//! - [`train`]: losses, objectives, Adam, resolution-compensated decay
//! - [`data`]: synthetic circle dataset, noise, generator inputs, image I/O
//! - [`analysis`]: regularity diagnostics, convergence tables, image-prior fits

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod grid;
pub mod io;
pub mod network;
pub mod ops;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use grid::{project_pc, refine, resolution_ladder, sup_diff, GridFunction, GridSpec, RectDomain};
pub use network::{forward, instantiate_at_resolution, weight_norm, LayerSpec, NetworkConfig, Params, WeightNormMode};
pub use ops::{Activation, BnParams, ConvKernel, InterpFn, InterpKind, PoolKind, PoolingFn};
