//! High-order `H(div)` finite element building blocks and saddle-point solvers.
//!
//! The crate discretizes grad–div and Darcy problems on structured
//! quadrilateral/hexahedral meshes using degree-`p` Raviart–Thomas elements
//! paired with a degree-`(p-1)` discontinuous `L²` space, both in the
//! interpolation–histopolation basis. In that basis the discrete divergence
//! is a purely topological ±1 matrix and both mass matrices are spectrally
//! equivalent to their diagonals, which makes the transformed saddle-point
//! system cheap to precondition: a diagonal for the `(1,1)`-block and one
//! algebraic multigrid V-cycle on a sparse M-matrix approximation of the
//! Schur complement.
//!
//! Modules roughly follow the pipeline:
//!
//! * [`tensor1d`] – 1D node sets, quadrature, interpolation/histopolation.
//! * [`mesh`] / [`spaces`] – structured meshes and DOF enumeration.
//! * [`operators`] – sum-factorized mass and divergence forms.
//! * [`divergence`] – CSR divergence, approximate Schur complement.
//! * [`massinv`] – per-element `L²` mass inverse strategies.
//! * [`krylov`] / [`amg`] – solvers and preconditioners.
//! * [`solvers`] – end-to-end grad–div and Darcy drivers.
//! * [`analysis`] – desk-scale spectral verification tools.
//!
//! The crate is `no_std`-compatible (requires `alloc`); disable the default
//! `std` feature to use it in that mode. The `parallel` feature enables
//! element-parallel operator application via rayon with deterministic
//! (fixed-order) reductions.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;



pub mod amg;
pub mod analysis;
pub mod coefficient;
pub mod csr;
pub mod dense;
pub mod divergence;
pub mod krylov;
pub mod massinv;

pub mod error;
mod fmath;


pub mod mesh;
pub mod operators;
pub mod solvers;

pub mod spaces;
pub mod tensor1d;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;

pub(crate) mod parallel {
    //! Element-loop helper. Results are collected per element and merged in
    //! element order, so the output is identical for any thread count.
    use alloc::vec::Vec;

    #[cfg(feature = "parallel")]
    pub fn map_elements<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }

    #[cfg(not(feature = "parallel"))]
    pub fn map_elements<T, F: Fn(usize) -> T>(n: usize, f: F) -> Vec<T> {
        (0..n).map(f).collect()
    }
}
