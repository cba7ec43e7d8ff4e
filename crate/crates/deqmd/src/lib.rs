//! Poisson image deblurring by mirror descent in the Burg geometry, with
//! regularization functionals learned as deep equilibrium models.
//!
//! The observation model is a photon-counting channel `y ~ Poiss(α·Ax)`
//! over a circular convolution `A`; its negative log-likelihood is the
//! Kullback-Leibler divergence, handled natively (no Gaussian smoothing,
//! no background term). One mirror-descent step on
//! `Ψ = KL(y, A·) + R + ι_{[0,a]^n}` doubles as the weight-tied layer of an
//! equilibrium model whose fixed point is the reconstruction; training
//! differentiates through that fixed point Jacobian-free.
//!
//! Module map:
//!
//! * [`image`] — dense images, convolution stencils, reproducible seeds;
//! * [`io`] — lossless float images (`.deqf`) and 8-bit PNG/PGM export;
//! * [`forward`] — the measurement operator and the Poisson channel;
//! * [`bregman`] — potentials, mirror maps, divergences, the KL fidelity
//!   and its relative-smoothness constant;
//! * [`regularizers`] — smoothed TV plus two learned families on a minimal
//!   reverse-mode tape;
//! * [`solvers`] — the backtracked mirror-descent fixed-point solver,
//!   initialization strategies and Richardson-Lucy;
//! * [`train`] — supervised loss, Jacobian-free gradients, ADAM, denoiser
//!   pre-training and spectral diagnostics;
//! * [`metrics`] — PSNR and SSIM;
//! * [`config`] / [`harness`] — the flat experiment config and the five
//!   reproducible commands behind the `deqmd` binary.
//!
//! The guide in `book/` walks through the concepts chapter by chapter; its
//! code blocks compile and run as part of this crate's doc-tests.

pub mod bregman;
pub mod config;
pub mod error;
pub mod forward;
pub mod harness;
pub mod image;
pub mod io;
pub mod metrics;
pub mod regularizers;
pub mod solvers;
pub(crate) mod tape;
pub mod train;

pub use error::{Error, Result};
pub use image::{Image, Kernel, Seed, EPS_POSITIVE};

// Keep the book's code blocks honest: every chapter is compiled and run as
// doc-tests alongside the crate.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/getting-started.md")]
    mod getting_started {}
    #[doc = include_str!("../../../book/src/measurement-model.md")]
    mod measurement_model {}
    #[doc = include_str!("../../../book/src/bregman-geometry.md")]
    mod bregman_geometry {}
    #[doc = include_str!("../../../book/src/mirror-descent.md")]
    mod mirror_descent {}
    #[doc = include_str!("../../../book/src/regularizers.md")]
    mod regularizers_chapter {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
