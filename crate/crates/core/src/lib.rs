//! Kernel Flows: kernel learning by half-batch cross-validation, and its use
//! as a regularizer for the inner layers of neural network classifiers.
//!
//! The crate provides:
//!
//! - [`linalg`]: dense Cholesky factorization with a deterministic nugget
//!   ladder, linear solves, and the solve adjoint used in reverse mode;
//! - [`autodiff`]: a tape-based reverse-mode engine over `f64` tensors whose
//!   op set covers convolutional classifiers and differentiable kernel
//!   regression (including an SPD solve with a custom reverse rule);
//! - [`kernels`]: RBF kernels over raw inputs, learned deformations, or
//!   network taps, with Gram assembly on the tape;
//! - [`kf`]: batch/half-batch sampling, the rho and e2 kernel-selection
//!   losses, the combined classifier + kernel loss, and the standalone
//!   kernel learning loop;
//! - [`nn`]: network specs with named inner-layer taps, He initialization,
//!   batch norm and dropout;
//! - [`data`]: the swissroll two-spiral set, IDX image loading/writing,
//!   synthetic glyph images, and affine augmentation;
//! - [`metrics`]: classification error, inter/in-class distance ratios, and
//!   gradient-free KF-loss probes.

pub mod autodiff;
pub mod data;
pub mod kernels;
pub mod kf;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod rng;
