//! The invariant law of the torus endpoint density: `exp(B)` normalized, with
//! `B` a Brownian bridge on the period.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::endpoint::TorusDensity;
use crate::noise::GridSpec;
use crate::scalar::Real;

/// Bridge values at the cell boundaries `0, dx, …, L`.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSample {
    values: Vec<f64>,
    dx: f64,
}

impl BridgeSample {
    pub fn from_values(values: Vec<f64>, dx: f64) -> Self {
        BridgeSample { values, dx }
    }

    /// `n + 1` values, first and last zero.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    /// Value at grid point `i`, `0 ≤ i ≤ n`.
    pub fn at(&self, i: usize) -> f64 {
        self.values[i]
    }
}

/// Brownian bridge of variance `scale² · t(L - t)/L` on `cells` grid steps:
/// a Gaussian walk with increments `N(0, scale² dx)`, linearly de-drifted.
pub fn sample_bridge_scaled<R: Rng + ?Sized>(rng: &mut R, cells: usize, dx: f64, scale: f64) -> BridgeSample {
    let sd = scale * dx.sqrt();
    let mut walk = Vec::with_capacity(cells + 1);
    walk.push(0.0);
    let mut s = 0.0;
    for _ in 0..cells {
        let z: f64 = StandardNormal.sample(rng);
        s += sd * z;
        walk.push(s);
    }
    let end = s;
    let values = walk.iter().enumerate().map(|(i, &w)| w - (i as f64 / cells as f64) * end).collect();
    BridgeSample { values, dx }
}

/// The bridge whose exponential is invariant for the noise strength of `spec`.
pub fn sample_bridge<R: Rng + ?Sized>(rng: &mut R, spec: &GridSpec) -> BridgeSample {
    sample_bridge_scaled(rng, spec.cells(), spec.dx(), spec.beta)
}

/// `ρ(x) = e^{B(x)} / ∫ e^{B}`, reading cell `i` at grid point `i`.
pub fn bridge_density<T: Real>(b: &BridgeSample) -> TorusDensity<T> {
    let n = b.values.len() - 1;
    let top = b.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let values = b.values[..n].iter().map(|&v| T::of((v - top).exp())).collect();
    TorusDensity::from_values(values, T::of(b.dx)).expect("exponential weights are positive")
}

/// Two independent stationary densities `(ϱ, ϱ̃)`, drawn one after the other.
pub fn stationary_boundaries<T: Real, R: Rng + ?Sized>(rng: &mut R, spec: &GridSpec) -> (TorusDensity<T>, TorusDensity<T>) {
    let rho = bridge_density(&sample_bridge(rng, spec));
    let rho_tilde = bridge_density(&sample_bridge(rng, spec));
    (rho, rho_tilde)
}
