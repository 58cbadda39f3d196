//! Lattice space-time white noise, periodic in space.
//!
//! The environment is stored as i.i.d. standard normals, one per
//! `(time step, spatial cell)` of one spatial period. A cell value `W` stands
//! for the white noise integrated over the `dt × dx` cell and divided by
//! `dx`, i.e. `β·W·sqrt(dt/dx)` is the exponent increment the solver applies.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, SimRng};
use crate::scalar::Real;

/// Discretization of one unit of time and one spatial period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    /// Cells per unit length (`M`).
    pub cells_per_unit: usize,
    /// Time steps per unit time; `dt = 1 / steps_per_unit`.
    pub steps_per_unit: usize,
    /// Winding truncation half-width `J`.
    pub winding: usize,
    /// Spatial period `L` in units.
    pub period: usize,
    /// Noise strength `β`.
    pub beta: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { cells_per_unit: 128, steps_per_unit: 1000, winding: 4, period: 1, beta: 1.0 }
    }
}

impl GridSpec {
    pub fn new(cells_per_unit: usize, steps_per_unit: usize, winding: usize, period: usize, beta: f64) -> Result<Self> {
        let spec = GridSpec { cells_per_unit, steps_per_unit, winding, period, beta };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells_per_unit < 8 {
            return Err(Error::config(format!("cells_per_unit must be >= 8, got {}", self.cells_per_unit)));
        }
        if self.steps_per_unit < 100 {
            return Err(Error::config(format!("steps_per_unit must be >= 100, got {}", self.steps_per_unit)));
        }
        if self.winding < 2 {
            return Err(Error::config(format!("winding half-width must be >= 2, got {}", self.winding)));
        }
        if self.period < 1 {
            return Err(Error::config("period must be >= 1"));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        Ok(())
    }

    pub fn with_beta(self, beta: f64) -> Self {
        GridSpec { beta, ..self }
    }

    /// Cells in one spatial period, `M·L`.
    pub fn cells(&self) -> usize {
        self.cells_per_unit * self.period
    }

    /// Number of windings `2J + 1` resolved by the kernels.
    pub fn windings(&self) -> usize {
        2 * self.winding + 1
    }

    /// Cells of the extended torus used to resolve windings.
    pub fn extended_cells(&self) -> usize {
        self.windings() * self.cells()
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.cells_per_unit as f64
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps_per_unit as f64
    }

    pub fn length(&self) -> f64 {
        self.period as f64
    }

    /// Coordinate of the centre of `cell` inside `[0, L)`.
    pub fn position(&self, cell: usize) -> f64 {
        (cell as f64 + 0.5) * self.dx()
    }

    /// Standard deviation of one exponent increment, `β·sqrt(dt/dx)`.
    pub fn noise_scale(&self) -> f64 {
        self.beta * (self.dt() / self.dx()).sqrt()
    }

    /// Canonical text form, stable across versions, used for hashing.
    pub fn canonical(&self) -> String {
        format!(
            "M={};steps={};J={};L={};beta={:?}",
            self.cells_per_unit, self.steps_per_unit, self.winding, self.period, self.beta
        )
    }
}

/// Seeded lattice noise covering `horizon` units of time.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseGrid<T> {
    spec: GridSpec,
    seed: u64,
    stream: u64,
    horizon: usize,
    increments: Vec<T>,
}

/// Builds the noise for `(spec, seed)` on stream 0.
pub fn new_noise<T: Real>(spec: &GridSpec, seed: u64, horizon: usize) -> Result<NoiseGrid<T>> {
    NoiseGrid::with_stream(spec, seed, 0, horizon)
}

impl<T: Real> NoiseGrid<T> {
    /// Noise drawn from the `(seed, stream)` generator. Slab `k` only depends
    /// on the first `k` units of the stream, so a longer horizon extends a
    /// shorter one.
    pub fn with_stream(spec: &GridSpec, seed: u64, stream: u64, horizon: usize) -> Result<Self> {
        spec.validate()?;
        if horizon < 1 {
            return Err(Error::config("noise horizon must be >= 1"));
        }
        let len = horizon * spec.steps_per_unit * spec.cells();
        let mut rng: SimRng = stream_rng(seed, stream);
        let increments = (0..len)
            .map(|_| {
                let w: f64 = StandardNormal.sample(&mut rng);
                T::of(w)
            })
            .collect();
        Ok(NoiseGrid { spec: *spec, seed, stream, horizon, increments })
    }

    /// Noise of a zero-strength environment; all increments vanish.
    pub fn quiet(spec: &GridSpec, horizon: usize) -> Result<Self> {
        spec.validate()?;
        let len = horizon * spec.steps_per_unit * spec.cells();
        Ok(NoiseGrid { spec: *spec, seed: 0, stream: 0, horizon, increments: vec![T::zero(); len] })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Raw increment at global step `step` (0-based) and cell in one period.
    pub fn increment(&self, step: usize, cell: usize) -> T {
        self.increments[step * self.spec.cells() + cell]
    }

    pub fn increments(&self) -> &[T] {
        &self.increments
    }

    /// The environment on `[k-1, k]`.
    pub fn slab(&self, k: usize) -> Result<NoiseSlab<'_, T>> {
        if k < 1 || k > self.horizon {
            return Err(Error::Index { what: "slab", index: k as i64, max: self.horizon });
        }
        Ok(NoiseSlab { grid: self, unit: k })
    }

    pub fn slabs(&self) -> impl Iterator<Item = NoiseSlab<'_, T>> {
        (1..=self.horizon).map(move |unit| NoiseSlab { grid: self, unit })
    }
}

/// Borrowed view of one unit of time of a [`NoiseGrid`].
#[derive(Debug, Clone, Copy)]
pub struct NoiseSlab<'a, T> {
    grid: &'a NoiseGrid<T>,
    unit: usize,
}

impl<'a, T: Real> NoiseSlab<'a, T> {
    pub fn unit(&self) -> usize {
        self.unit
    }

    pub fn spec(&self) -> &GridSpec {
        &self.grid.spec
    }

    /// Global 0-based step indices covered by the slab.
    pub fn steps(&self) -> std::ops::Range<usize> {
        let s = self.grid.spec.steps_per_unit;
        (self.unit - 1) * s..self.unit * s
    }

    /// Value at local step `step` and an arbitrary cell, reduced modulo the period.
    pub fn tiled_value(&self, step: usize, cell: i64) -> T {
        let n = self.grid.spec.cells() as i64;
        debug_assert!(step < self.grid.spec.steps_per_unit);
        self.grid.increment(self.steps().start + step, cell.rem_euclid(n) as usize)
    }

    /// Local rows of increments, one slice of `M·L` values per step.
    pub fn rows(&self) -> impl Iterator<Item = &'a [T]> {
        let n = self.grid.spec.cells();
        let range = self.steps();
        self.grid.increments[range.start * n..range.end * n].chunks_exact(n)
    }

    /// Multiplicative factors `exp(β·W·sqrt(dt/dx))` for every step and cell.
    /// The Itô drift `-β²/(2dx)` per unit time is kept separately as a log
    /// offset so stored values stay of order one.
    pub fn factors(&self) -> SlabFactors<T> {
        let spec = &self.grid.spec;
        let scale = T::of(spec.noise_scale());
        let values = if spec.beta == 0.0 {
            vec![T::one(); spec.steps_per_unit * spec.cells()]
        } else {
            self.rows().flatten().map(|&w| (scale * w).exp()).collect()
        };
        SlabFactors {
            cells: spec.cells(),
            steps: spec.steps_per_unit,
            values,
            log_drift: T::of(-spec.beta * spec.beta / (2.0 * spec.dx())),
            quiet: spec.beta == 0.0,
        }
    }
}

/// Precomputed noise multipliers for one unit of time.
#[derive(Debug, Clone)]
pub struct SlabFactors<T> {
    pub(crate) cells: usize,
    pub(crate) steps: usize,
    pub(crate) values: Vec<T>,
    pub(crate) log_drift: T,
    pub(crate) quiet: bool,
}

impl<T: Real> SlabFactors<T> {
    /// Factors of a noiseless unit.
    pub fn quiet(spec: &GridSpec) -> Self {
        SlabFactors {
            cells: spec.cells(),
            steps: spec.steps_per_unit,
            values: vec![T::one(); spec.cells() * spec.steps_per_unit],
            log_drift: T::zero(),
            quiet: true,
        }
    }

    pub(crate) fn row(&self, step: usize) -> &[T] {
        &self.values[step * self.cells..(step + 1) * self.cells]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GridSpec {
        GridSpec::new(8, 100, 2, 1, 1.0).unwrap()
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(GridSpec::new(4, 100, 2, 1, 1.0).is_err());
        assert!(GridSpec::new(8, 50, 2, 1, 1.0).is_err());
        assert!(GridSpec::new(8, 100, 1, 1, 1.0).is_err());
        assert!(GridSpec::new(8, 100, 2, 0, 1.0).is_err());
        assert!(GridSpec::new(8, 100, 2, 1, -0.5).is_err());
        assert!(new_noise::<f64>(&small(), 1, 0).is_err());
    }

    #[test]
    fn deterministic_in_seed() {
        let a = new_noise::<f64>(&small(), 1, 2).unwrap();
        let b = new_noise::<f64>(&small(), 1, 2).unwrap();
        assert_eq!(a, b);
        let c = new_noise::<f64>(&small(), 2, 2).unwrap();
        let differ = a.increments().iter().zip(c.increments()).filter(|(x, y)| x != y).count();
        assert!(differ as f64 >= 0.99 * a.increments().len() as f64);
    }

    #[test]
    fn longer_horizon_extends_shorter() {
        let a = new_noise::<f64>(&small(), 5, 2).unwrap();
        let b = new_noise::<f64>(&small(), 5, 3).unwrap();
        assert_eq!(a.increments(), &b.increments()[..a.increments().len()]);
    }

    #[test]
    fn slab_ranges() {
        let g = new_noise::<f64>(&small(), 1, 3).unwrap();
        // 1-based steps 101..=200 are rows 100..200.
        assert_eq!(g.slab(2).unwrap().steps(), 100..200);
        assert!(g.slab(4).is_err());
        assert!(g.slab(0).is_err());
        let s1 = g.slab(1).unwrap().steps();
        let s2 = g.slab(2).unwrap().steps();
        assert!(s1.end <= s2.start);
    }

    #[test]
    fn tiled_access_is_periodic() {
        let g = new_noise::<f64>(&small(), 3, 1).unwrap();
        let s = g.slab(1).unwrap();
        let n = 8;
        for step in [0, 17, 99] {
            assert_eq!(s.tiled_value(step, -1), s.tiled_value(step, n - 1));
            assert_eq!(s.tiled_value(step, 0), s.tiled_value(step, n));
            assert_eq!(s.tiled_value(step, 3), g.increment(step, 3));
            assert_eq!(s.tiled_value(step, 3 + 5 * n), s.tiled_value(step, 3));
        }
    }

    #[test]
    fn factors_carry_ito_drift() {
        let spec = small().with_beta(0.5);
        let g = new_noise::<f64>(&spec, 3, 1).unwrap();
        let f = g.slab(1).unwrap().factors();
        assert!((f.log_drift + 0.25 * 8.0 / 2.0).abs() < 1e-15);
        let w = g.increment(4, 2);
        assert!((f.row(4)[2] - (0.5 * (0.01f64 * 8.0).sqrt() * w).exp()).abs() < 1e-14);
    }
}
