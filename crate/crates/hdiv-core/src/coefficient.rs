//! Scalar coefficients: constants, per-element constants (material regions,
//! seeded heterogeneous fields), and functions of physical position.


use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::fmath;
use crate::mesh::Mesh;
use crate::Result;

/// A scalar coefficient field.
#[derive(Clone)]
pub enum Coefficient {
    Constant(f64),
    /// One value per mesh element.
    PerElement(Arc<Vec<f64>>),
    /// Evaluated at physical quadrature points.
    Function(Arc<dyn Fn(&[f64; 3]) -> f64 + Send + Sync>),
}

impl core::fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Coefficient::Constant(c) => write!(f, "Constant({c})"),
            Coefficient::PerElement(v) => write!(f, "PerElement(len {})", v.len()),
            Coefficient::Function(_) => write!(f, "Function(..)"),
        }
    }
}

impl Coefficient {
    pub fn per_element(values: Vec<f64>) -> Self {
        Coefficient::PerElement(Arc::new(values))
    }

    pub fn function(f: impl Fn(&[f64; 3]) -> f64 + Send + Sync + 'static) -> Self {
        Coefficient::Function(Arc::new(f))
    }

    /// Per-element-constant coefficients admit algebraic simplifications
    /// (e.g. the Darcy `(2,2)`-block reduction).
    pub fn is_element_constant(&self) -> bool {
        !matches!(self, Coefficient::Function(_))
    }

    #[inline]
    pub fn eval(&self, element: usize, x: &[f64; 3]) -> f64 {
        match self {
            Coefficient::Constant(c) => *c,
            Coefficient::PerElement(v) => v[element],
            Coefficient::Function(f) => f(x),
        }
    }

    /// Reciprocal coefficient 1/c (requires positivity for the shared kinds).
    pub fn reciprocal(&self) -> Result<Coefficient> {
        match self {
            Coefficient::Constant(c) => {
                if *c <= 0.0 {
                    return Err(Error::Coefficient(format!("reciprocal of {c}")));
                }
                Ok(Coefficient::Constant(1.0 / c))
            }
            Coefficient::PerElement(v) => {
                if v.iter().any(|&x| x <= 0.0) {
                    return Err(Error::Coefficient("reciprocal of non-positive value".into()));
                }
                Ok(Coefficient::per_element(v.iter().map(|&x| 1.0 / x).collect()))
            }
            Coefficient::Function(f) => {
                let f = f.clone();
                Ok(Coefficient::function(move |x| 1.0 / f(x)))
            }
        }
    }
}

/// Per-element values split by a coordinate threshold: `values.0` where the
/// element centroid is below `split_at` along `axis`, `values.1` otherwise.
pub fn two_material(mesh: &Mesh, axis: usize, split_at: f64, values: (f64, f64)) -> Coefficient {
    let v: Vec<f64> = (0..mesh.n_elements())
        .map(|e| {
            if mesh.element_centroid(e)[axis] < split_at {
                values.0
            } else {
                values.1
            }
        })
        .collect();
    Coefficient::per_element(v)
}

/// Seeded log-uniform per-element field: values `10^u` with `u` uniform in
/// `[log10_min, log10_max]`. A 7-decade span reproduces the heterogeneity
/// regime of highly contrasted permeability fields.
pub fn log_uniform_field(n_elements: usize, log10_min: f64, log10_max: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_elements)
        .map(|_| {
            let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            fmath::powf(10.0, log10_min + (log10_max - log10_min) * u)
        })
        .collect()
}
