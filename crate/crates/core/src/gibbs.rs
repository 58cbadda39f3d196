//! Exact sampling of grid polymer paths and their winding increments.
//!
//! Paths `(x_0, …, x_N)` are drawn from the Markov factorization of the joint
//! density by forward filtering and backward sampling. Given a path, the
//! winding increments are independent with laws `Z[j][x_k, x_{k-1}] / G[x_k, x_{k-1}]`.

use std::ops::RangeInclusive;

use num_complex::Complex;
use rand::Rng;

use crate::endpoint::TorusDensity;
use crate::error::{Error, Result};
use crate::kernel::{Transfer, WindingSource};
use crate::scalar::Real;

/// Boundary density `f` (at `x_N`) or `g` (at `x_0`).
#[derive(Debug, Clone, PartialEq)]
pub enum BoundaryCondition<T> {
    /// Point mass at the centre of one cell.
    Cell(usize),
    /// Point mass at the origin, which sits on the boundary between the last
    /// cell and cell 0; half of its mass lies in each. Starting from the last
    /// cell counts as winding `-1`.
    Origin,
    /// Uniform density.
    Lebesgue,
    Density(TorusDensity<T>),
}

impl<T: Real> BoundaryCondition<T> {
    pub fn density(&self, cells: usize, dx: T) -> Result<TorusDensity<T>> {
        match self {
            BoundaryCondition::Cell(c) => TorusDensity::cell_on(cells, dx, *c),
            BoundaryCondition::Origin => Ok(TorusDensity::origin_on(cells, dx)),
            BoundaryCondition::Lebesgue => Ok(TorusDensity::uniform_on(cells, dx)),
            BoundaryCondition::Density(d) => {
                if d.cells() != cells {
                    return Err(Error::Dimension { expected: cells, found: d.cells() });
                }
                Ok(d.clone())
            }
        }
    }

    /// Winding count attached to a path that starts in `x0`.
    pub fn start_offset(&self, cells: usize, x0: usize) -> i64 {
        match self {
            BoundaryCondition::Origin if x0 + 1 == cells => -1,
            _ => 0,
        }
    }
}

/// Normalized forward vectors `a_0, …, a_N`; each carries its accumulated log mass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass<T> {
    pub densities: Vec<TorusDensity<T>>,
}

impl<T: Real> ForwardPass<T> {
    pub fn last(&self) -> &TorusDensity<T> {
        self.densities.last().expect("forward pass holds a_0")
    }

    /// `log G_{N,0}(f, g)`.
    pub fn log_partition(&self, f: &BoundaryCondition<T>) -> Result<T> {
        let a = self.last();
        let f = f.density(a.cells(), a.dx())?;
        let overlap = f.values().iter().zip(a.values()).fold(T::zero(), |s, (&u, &v)| s + u * v) * a.dx();
        if !(overlap > T::zero()) {
            return Err(Error::degenerate("boundary f has no overlap with the forward density"));
        }
        Ok(a.log_mass() + overlap.ln())
    }
}

pub fn forward_pass<T: Real, K: Transfer<T>>(kernels: &[K], g: &BoundaryCondition<T>) -> Result<ForwardPass<T>> {
    Ok(forward_passes(kernels, &[g])?.pop().expect("one pass"))
}

/// Forward passes for several starting densities through the same kernels,
/// two per solve.
pub fn forward_passes<T: Real, K: Transfer<T>>(kernels: &[K], gs: &[&BoundaryCondition<T>]) -> Result<Vec<ForwardPass<T>>> {
    let first = kernels.first().ok_or_else(|| Error::config("forward pass needs at least one kernel"))?;
    let (n, dx) = (first.cells(), first.dx());
    let mut passes = Vec::with_capacity(gs.len());
    for g in gs {
        passes.push(ForwardPass { densities: vec![g.density(n, dx)?] });
    }
    for k in kernels {
        for chunk in passes.chunks_mut(2) {
            match chunk {
                [a, b] => {
                    let (da, db) = (a.last(), b.last());
                    let (ia, ib) = k.forward_pair(da.values(), db.values())?;
                    let na = TorusDensity::from_scaled(ia, da.log_mass(), dx)?.0;
                    let nb = TorusDensity::from_scaled(ib, db.log_mass(), dx)?.0;
                    a.densities.push(na);
                    b.densities.push(nb);
                }
                [a] => {
                    let da = a.last();
                    let next = TorusDensity::from_scaled(k.forward_raw(da.values())?, da.log_mass(), dx)?.0;
                    a.densities.push(next);
                }
                _ => unreachable!(),
            }
        }
    }
    Ok(passes)
}

/// A grid path and the log partition function of its measure.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample<T> {
    /// Cells `x_0, …, x_N`.
    pub cells: Vec<usize>,
    /// Winding count carried by the start (see [`BoundaryCondition::Origin`]).
    pub offset: i64,
    pub log_partition: T,
}

impl<T> PathSample<T> {
    /// Number of unit steps `N`.
    pub fn steps(&self) -> usize {
        self.cells.len() - 1
    }
}

/// Inverse-CDF draw over `weights` in index order.
pub fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::degenerate(format!("categorical weights sum to {total}")));
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if u < acc {
                return Ok(i);
            }
        }
    }
    Ok(last)
}

fn weighted<T: Real>(a: &[T], b: &[T]) -> Vec<f64> {
    a.iter().zip(b).map(|(&u, &v)| (u * v).as_f64()).collect()
}

/// One path from `μ_N(·; f, g)`.
pub fn sample_path<T: Real, K: Transfer<T>, R: Rng>(
    kernels: &[K],
    f: &BoundaryCondition<T>,
    g: &BoundaryCondition<T>,
    rng: &mut R,
) -> Result<PathSample<T>> {
    Ok(sample_paths(kernels, &[(f, g)], std::slice::from_mut(rng))?.pop().expect("one path"))
}

/// Paths for several `(f, g)` pairs under the same kernels, each with its own generator.
pub fn sample_paths<T: Real, K: Transfer<T>, R: Rng>(
    kernels: &[K],
    boundaries: &[(&BoundaryCondition<T>, &BoundaryCondition<T>)],
    rngs: &mut [R],
) -> Result<Vec<PathSample<T>>> {
    if rngs.len() != boundaries.len() {
        return Err(Error::Dimension { expected: boundaries.len(), found: rngs.len() });
    }
    let gs: Vec<_> = boundaries.iter().map(|(_, g)| *g).collect();
    let passes = forward_passes(kernels, &gs)?;
    let n = kernels[0].cells();
    let dx = kernels[0].dx();
    let steps = kernels.len();
    let mut cells = vec![vec![0usize; steps + 1]; boundaries.len()];
    for (s, ((f, _), pass)) in boundaries.iter().zip(&passes).enumerate() {
        let fd = f.density(n, dx)?;
        cells[s][steps] = sample_categorical(&weighted(fd.values(), pass.last().values()), &mut rngs[s])?;
    }
    for k in (1..=steps).rev() {
        let kernel = &kernels[k - 1];
        let mut s = 0;
        while s < boundaries.len() {
            if s + 1 < boundaries.len() {
                let (ra, rb) = kernel.row_pair(cells[s][k], cells[s + 1][k])?;
                for (t, row) in [(s, ra), (s + 1, rb)] {
                    let w = weighted(&row, passes[t].densities[k - 1].values());
                    cells[t][k - 1] = sample_categorical(&w, &mut rngs[t])?;
                }
                s += 2;
            } else {
                let row = kernel.row(cells[s][k])?;
                let w = weighted(&row, passes[s].densities[k - 1].values());
                cells[s][k - 1] = sample_categorical(&w, &mut rngs[s])?;
                s += 1;
            }
        }
    }
    boundaries
        .iter()
        .zip(passes)
        .zip(cells)
        .map(|(((f, g), pass), cells)| {
            Ok(PathSample { offset: g.start_offset(n, cells[0]), log_partition: pass.log_partition(f)?, cells })
        })
        .collect()
}

/// Law of one winding increment over `j = -J..=J`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindingLaw {
    winding: usize,
    probs: Vec<f64>,
}

impl WindingLaw {
    pub fn from_weights<T: Real>(weights: &[T]) -> Result<Self> {
        if weights.len() % 2 == 0 {
            return Err(Error::config("winding weights must have odd length 2J+1"));
        }
        let total: f64 = weights.iter().map(|w| w.as_f64()).sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::degenerate(format!("winding weights sum to {total}")));
        }
        let probs = weights.iter().map(|w| w.as_f64().max(0.0) / total).collect();
        Ok(WindingLaw { winding: weights.len() / 2, probs })
    }

    /// Point mass at `j`, as a law on `-J..=J`.
    pub fn point(j: i64, winding: usize) -> Result<Self> {
        if j.unsigned_abs() as usize > winding {
            return Err(Error::Index { what: "winding", index: j, max: winding });
        }
        let mut probs = vec![0.0; 2 * winding + 1];
        probs[(j + winding as i64) as usize] = 1.0;
        Ok(WindingLaw { winding, probs })
    }

    pub fn winding(&self) -> usize {
        self.winding
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, j: i64) -> f64 {
        if j.unsigned_abs() as usize > self.winding {
            return 0.0;
        }
        self.probs[(j + self.winding as i64) as usize]
    }

    fn support(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        let j0 = -(self.winding as i64);
        self.probs.iter().enumerate().map(move |(i, &p)| (j0 + i as i64, p))
    }

    pub fn mean(&self) -> f64 {
        self.support().map(|(j, p)| j as f64 * p).sum()
    }

    pub fn second_moment(&self) -> f64 {
        self.support().map(|(j, p)| (j * j) as f64 * p).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.support().map(|(j, p)| (j as f64 - m).powi(2) * p).sum()
    }

    /// `Σ_j |j|^p P(j)`.
    pub fn abs_moment(&self, p: f64) -> f64 {
        self.support().filter(|&(j, _)| j != 0).map(|(j, q)| (j.abs() as f64).powf(p) * q).sum()
    }

    /// `E sign(η)`.
    pub fn sign_mean(&self) -> f64 {
        self.support().map(|(j, p)| j.signum() as f64 * p).sum()
    }

    /// `P(η ≠ 0) = E sign(η)²`.
    pub fn nonzero(&self) -> f64 {
        1.0 - self.prob(0)
    }

    /// `Σ_j P(j) e^{i t j}`.
    pub fn cf(&self, t: f64) -> Complex<f64> {
        self.support().map(|(j, p)| Complex::from_polar(p, t * j as f64)).sum()
    }

    /// Mass on `|j| = J`.
    pub fn boundary_mass(&self) -> f64 {
        self.probs[0] + self.probs[self.probs.len() - 1]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<i64> {
        Ok(sample_categorical(&self.probs, rng)? as i64 - self.winding as i64)
    }
}

/// `P(η = j) = Z[j][x_to, x_from] / Σ_j Z[j][x_to, x_from]`.
pub fn increment_law<T: Real, W: WindingSource<T>>(k: &W, x_to: usize, x_from: usize) -> Result<WindingLaw> {
    let weights = k.winding_weights(&[(x_to, x_from)])?;
    WindingLaw::from_weights(&weights[0])
}

/// Increment laws along a path, `k = 1..=N`.
pub fn path_laws<T: Real, W: WindingSource<T>>(kernels: &[W], path: &PathSample<T>) -> Result<Vec<WindingLaw>> {
    Ok(path_laws_many(kernels, &[path])?.pop().expect("one path"))
}

/// Increment laws along several paths; each unit is queried once for all of them.
pub fn path_laws_many<T: Real, W: WindingSource<T>>(kernels: &[W], paths: &[&PathSample<T>]) -> Result<Vec<Vec<WindingLaw>>> {
    for p in paths {
        if p.steps() != kernels.len() {
            return Err(Error::Dimension { expected: kernels.len(), found: p.steps() });
        }
    }
    let mut laws = vec![Vec::with_capacity(kernels.len()); paths.len()];
    for (k, kernel) in kernels.iter().enumerate() {
        let pairs: Vec<_> = paths.iter().map(|p| (p.cells[k + 1], p.cells[k])).collect();
        for (out, w) in laws.iter_mut().zip(kernel.winding_weights(&pairs)?) {
            out.push(WindingLaw::from_weights(&w)?);
        }
    }
    Ok(laws)
}

/// Sampled increments `η_1, …, η_N` with partial sums.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindingSample {
    pub eta: Vec<i64>,
    /// `Y_1, …, Y_N`.
    pub partial: Vec<i64>,
    /// Winding carried by the start of the path.
    pub offset: i64,
}

impl WindingSample {
    /// `Y_N = Σ η_k`.
    pub fn total(&self) -> i64 {
        self.partial.last().copied().unwrap_or(0)
    }

    /// Total winding including the start offset.
    pub fn winding(&self) -> i64 {
        self.offset + self.total()
    }
}

pub fn sample_from_laws<R: Rng + ?Sized>(laws: &[WindingLaw], offset: i64, rng: &mut R) -> Result<WindingSample> {
    let eta = laws.iter().map(|l| l.sample(rng)).collect::<Result<Vec<_>>>()?;
    let partial = eta
        .iter()
        .scan(0i64, |y, &e| {
            *y += e;
            Some(*y)
        })
        .collect();
    Ok(WindingSample { eta, partial, offset })
}

pub fn sample_increments<T: Real, W: WindingSource<T>, R: Rng>(
    path: &PathSample<T>,
    kernels: &[W],
    rng: &mut R,
) -> Result<WindingSample> {
    sample_from_laws(&path_laws(kernels, path)?, path.offset, rng)
}

/// `Π_{k ∈ range} Σ_j P(η_k = j) e^{i t j}`.
pub fn laws_cf(laws: &[WindingLaw], t: f64, range: RangeInclusive<usize>) -> Result<Complex<f64>> {
    let (lo, hi) = (*range.start(), *range.end());
    if lo < 1 || hi > laws.len() || lo > hi {
        return Err(Error::config(format!("cf range {lo}..={hi} outside 1..={}", laws.len())));
    }
    Ok(laws[lo - 1..hi].iter().map(|l| l.cf(t)).product())
}

/// Conditional characteristic function of `Σ_{k ∈ range} η_k / sqrt(N)` given the path.
pub fn conditional_cf<T: Real, W: WindingSource<T>>(
    path: &PathSample<T>,
    kernels: &[W],
    theta: f64,
    range: RangeInclusive<usize>,
) -> Result<Complex<f64>> {
    let laws = path_laws(kernels, path)?;
    laws_cf(&laws, theta / (laws.len() as f64).sqrt(), range)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{heat_density, WindingKernel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(cells: usize, layer0: Vec<f64>) -> WindingKernel<f64> {
        let zero = vec![0.0; cells * cells];
        WindingKernel::from_stack(cells, 1.0 / cells as f64, vec![zero.clone(), zero.clone(), layer0, zero.clone(), zero], 0.0)
            .unwrap()
    }

    #[test]
    fn law_of_single_support() {
        let k = single(4, vec![1.0; 16]);
        let law = increment_law(&k, 1, 2).unwrap();
        assert_eq!(law.prob(0), 1.0);
        assert_eq!(law.cf(0.7), Complex::new(1.0, 0.0));
        let total: f64 = law.probs().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_law_moments() {
        let w: Vec<f64> = (-4..=4).map(|j| heat_density(1.0, j as f64)).collect();
        let law = WindingLaw::from_weights(&w).unwrap();
        assert!((law.prob(0) - 0.398942).abs() < 1e-4);
        assert!((law.second_moment() - 1.0).abs() < 1e-3);
        assert!(law.mean().abs() < 1e-15);
        assert!((law.cf(1.0).norm() - (-0.5f64).exp()).abs() < 1e-3);
        assert_eq!(law.abs_moment(2.0), law.second_moment());
    }

    #[test]
    fn degenerate_inputs() {
        assert!(WindingLaw::from_weights(&[0.0f64, 0.0, 0.0]).is_err());
        assert!(WindingLaw::from_weights(&[1.0f64, 0.0]).is_err());
        assert!(WindingLaw::point(3, 2).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_categorical(&[0.0, 0.0], &mut rng).is_err());
        assert_eq!(sample_categorical(&[0.0, 2.0, 0.0], &mut rng).unwrap(), 1);
    }

    #[test]
    fn cf_range_checks() {
        let laws = vec![WindingLaw::point(0, 2).unwrap(); 3];
        assert!(laws_cf(&laws, 1.0, 0..=2).is_err());
        assert!(laws_cf(&laws, 1.0, 2..=4).is_err());
        assert_eq!(laws_cf(&laws, 1.0, 1..=3).unwrap(), Complex::new(1.0, 0.0));
    }

    #[test]
    fn partial_sums() {
        let laws = vec![WindingLaw::point(1, 2).unwrap(), WindingLaw::point(-2, 2).unwrap(), WindingLaw::point(2, 2).unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_from_laws(&laws, -1, &mut rng).unwrap();
        assert_eq!(s.eta, vec![1, -2, 2]);
        assert_eq!(s.partial, vec![1, -1, 1]);
        assert_eq!(s.total(), 1);
        assert_eq!(s.winding(), 0);
    }
}
