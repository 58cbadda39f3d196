//! Quenched endpoint densities on the torus and on the winding-resolved line.

use crate::error::{Error, Result};
use crate::gibbs::BoundaryCondition;
use crate::kernel::{Scaled, Transfer, WindingKernel};
use crate::noise::GridSpec;
use crate::scalar::Real;

/// Mass lost to the line truncation above which a warning is recorded.
pub const LINE_LOSS_WARN: f64 = 1e-4;
/// Mass lost to the line truncation above which evolution fails.
pub const LINE_LOSS_LIMIT: f64 = 1e-2;

/// Probability density on the torus grid with its accumulated log normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct TorusDensity<T> {
    values: Vec<T>,
    log_mass: T,
    dx: T,
}

impl<T: Real> TorusDensity<T> {
    pub fn uniform(spec: &GridSpec) -> Self {
        Self::uniform_on(spec.cells(), T::of(spec.dx()))
    }

    pub fn cell(spec: &GridSpec, cell: usize) -> Self {
        Self::cell_on(spec.cells(), T::of(spec.dx()), cell).expect("cell inside the period")
    }

    pub fn origin(spec: &GridSpec) -> Self {
        Self::origin_on(spec.cells(), T::of(spec.dx()))
    }

    pub fn uniform_on(cells: usize, dx: T) -> Self {
        let v = (T::of_usize(cells) * dx).recip();
        TorusDensity { values: vec![v; cells], log_mass: T::zero(), dx }
    }

    pub fn cell_on(cells: usize, dx: T, cell: usize) -> Result<Self> {
        if cell >= cells {
            return Err(Error::Index { what: "cell", index: cell as i64, max: cells - 1 });
        }
        let mut values = vec![T::zero(); cells];
        values[cell] = dx.recip();
        Ok(TorusDensity { values, log_mass: T::zero(), dx })
    }

    /// Point mass at the origin, split between the two cells that touch it.
    pub fn origin_on(cells: usize, dx: T) -> Self {
        let mut values = vec![T::zero(); cells];
        let half = T::of(0.5) / dx;
        values[0] = half;
        values[cells - 1] = values[cells - 1] + half;
        TorusDensity { values, log_mass: T::zero(), dx }
    }

    /// Normalizes nonnegative `values`.
    pub fn from_values(values: Vec<T>, dx: T) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::degenerate("empty density"));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= T::zero())) {
            return Err(Error::degenerate("density values must be finite and nonnegative"));
        }
        let raw = Scaled { values, log_scale: T::zero() };
        Ok(Self::from_scaled(raw, T::zero(), dx)?.0)
    }

    /// Normalizes an unnormalized image. Returns the density, whose log mass is
    /// `prior + increment`, and the increment.
    pub fn from_scaled(image: Scaled<T>, prior: T, dx: T) -> Result<(Self, T)> {
        let mut values = image.values;
        for v in values.iter_mut() {
            *v = v.max(T::zero());
        }
        let mass = values.iter().fold(T::zero(), |s, &v| s + v) * dx;
        if !(mass > T::zero() && mass.is_finite()) {
            return Err(Error::degenerate(format!("density mass {mass}")));
        }
        let inv = mass.recip();
        values.iter_mut().for_each(|v| *v = *v * inv);
        let increment = mass.ln() + image.log_scale;
        Ok((TorusDensity { values, log_mass: prior + increment, dx }, increment))
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn cells(&self) -> usize {
        self.values.len()
    }

    pub fn dx(&self) -> T {
        self.dx
    }

    pub fn log_mass(&self) -> T {
        self.log_mass
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().map(|v| v.as_f64()).sum::<f64>() * self.dx.as_f64()
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()))
    }

    pub fn inf(&self) -> f64 {
        self.values.iter().fold(f64::INFINITY, |m, v| m.min(v.as_f64()))
    }

    /// `∫ ρ(x)² dx`.
    pub fn integral_sq(&self) -> f64 {
        self.values.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() * self.dx.as_f64()
    }

    /// Grid sup-norm distance.
    pub fn sup_distance(&self, other: &TorusDensity<T>) -> f64 {
        self.values.iter().zip(&other.values).fold(0.0, |m, (a, b)| m.max((a.as_f64() - b.as_f64()).abs()))
    }
}

fn first_dims<T: Real, K: Transfer<T>>(kernels: &[K]) -> Result<(usize, T)> {
    let k = kernels.first().ok_or_else(|| Error::config("need at least one kernel"))?;
    Ok((k.cells(), k.dx()))
}

/// `ρ_{t,0}(·; ν)`: the kernels applied in time order with normalization at each step.
pub fn evolve_density<T: Real, K: Transfer<T>>(kernels: &[K], nu: &BoundaryCondition<T>) -> Result<TorusDensity<T>> {
    let (n, dx) = first_dims(kernels)?;
    let mut d = nu.density(n, dx)?;
    for k in kernels {
        d = TorusDensity::from_scaled(k.forward_raw(d.values())?, d.log_mass(), dx)?.0;
    }
    Ok(d)
}

/// `ρ̃_{t,0}(ν; ·)`: transposed kernels applied in reverse time order.
pub fn backward_density<T: Real, K: Transfer<T>>(kernels: &[K], nu: &BoundaryCondition<T>) -> Result<TorusDensity<T>> {
    let (n, dx) = first_dims(kernels)?;
    let mut d = nu.density(n, dx)?;
    for k in kernels.iter().rev() {
        d = TorusDensity::from_scaled(k.backward_raw(d.values())?, d.log_mass(), dx)?.0;
    }
    Ok(d)
}

/// `log sup_x |ρ_{t,0}(x; ν) - ρ_{t,0}(x; ν')|` for `t = 1..=kernels.len()`.
///
/// The difference is propagated directly, so gaps far below the rounding
/// level of the densities stay resolved. Identical inputs give `-∞`.
pub fn log_contraction_gaps<T: Real, K: Transfer<T>>(
    kernels: &[K],
    nu: &BoundaryCondition<T>,
    nu_prime: &BoundaryCondition<T>,
) -> Result<Vec<f64>> {
    let (n, dx) = first_dims(kernels)?;
    let rho = nu.density(n, dx)?;
    let other = nu_prime.density(n, dx)?;
    let mut rho: Vec<T> = rho.values().to_vec();
    let mut diff: Vec<T> = rho.iter().zip(other.values()).map(|(&a, &b)| a - b).collect();
    let mut log_diff = T::zero();
    let mut gaps = Vec::with_capacity(kernels.len());
    let max_abs = |v: &[T]| v.iter().fold(T::zero(), |m, x| m.max(x.abs()));
    let scale = max_abs(&diff);
    if scale == T::zero() {
        return Ok(vec![f64::NEG_INFINITY; kernels.len()]);
    }
    diff.iter_mut().for_each(|v| *v = *v / scale);
    log_diff = log_diff + scale.ln();
    for k in kernels {
        let a = k.forward_raw(&rho)?;
        let b = k.forward_raw(&diff)?;
        let mass = a.values.iter().fold(T::zero(), |s, &v| s + v) * dx;
        let moved = b.values.iter().fold(T::zero(), |s, &v| s + v) * dx;
        if !(mass > T::zero()) {
            return Err(Error::degenerate("density lost all mass"));
        }
        let log_r = b.log_scale + log_diff - a.log_scale;
        let denom = mass - log_r.exp() * moved;
        if !(denom > T::zero()) {
            return Err(Error::degenerate("second density lost all mass"));
        }
        let c: Vec<T> = b.values.iter().zip(&a.values).map(|(&bv, &av)| bv * mass - av * moved).collect();
        let c_max = max_abs(&c);
        rho = a.values.iter().map(|&v| v / mass).collect();
        if c_max == T::zero() {
            gaps.resize(kernels.len(), f64::NEG_INFINITY);
            return Ok(gaps);
        }
        diff = c.iter().map(|&v| v / c_max).collect();
        log_diff = log_r + c_max.ln() - mass.ln() - denom.ln();
        gaps.push(log_diff.as_f64());
    }
    Ok(gaps)
}

/// `sup_x |ρ_{t,0}(x; ν) - ρ_{t,0}(x; ν')|` after all kernels.
pub fn contraction_gap<T: Real, K: Transfer<T>>(
    kernels: &[K],
    nu: &BoundaryCondition<T>,
    nu_prime: &BoundaryCondition<T>,
) -> Result<f64> {
    Ok(log_contraction_gaps(kernels, nu, nu_prime)?.last().map_or(0.0, |g| g.exp()))
}

/// Start of a line evolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineStart {
    Cell(usize),
    /// The origin, split between cell 0 and the last cell of winding `-1`.
    Origin,
}

/// Density on `[-J_tot, J_tot] × (one period)`: the quenched law of
/// (integer part, position) of the endpoint on the line.
#[derive(Debug, Clone, PartialEq)]
pub struct LineDensity<T> {
    cells: usize,
    span: usize,
    /// Layout `(j + J_tot) · n + x`.
    values: Vec<T>,
    log_mass: T,
    dx: f64,
    period: f64,
    lost: f64,
}

impl<T: Real> LineDensity<T> {
    /// `J_tot`.
    pub fn span(&self) -> usize {
        self.span
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn log_mass(&self) -> T {
        self.log_mass
    }

    pub fn value(&self, j: i64, x: usize) -> T {
        self.values[(j + self.span as i64) as usize * self.cells + x]
    }

    /// Fraction of the mass dropped by the truncation to `|j| ≤ J_tot`.
    pub fn lost_mass(&self) -> f64 {
        self.lost
    }

    /// Mass on the outermost windings `|j| = J_tot`.
    pub fn boundary_mass(&self) -> f64 {
        let row = |j: i64| (0..self.cells).map(|x| self.value(j, x).as_f64()).sum::<f64>() * self.dx;
        row(self.span as i64) + row(-(self.span as i64))
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().map(|v| v.as_f64()).sum::<f64>() * self.dx
    }

    pub fn truncation_warning(&self) -> Option<String> {
        (self.lost > LINE_LOSS_WARN)
            .then(|| format!("line truncation at J_tot={} lost {:.3e} of the mass", self.span, self.lost))
    }

    /// Line coordinate `jL + (x + ½)dx`.
    pub fn coordinate(&self, j: i64, x: usize) -> f64 {
        j as f64 * self.period + (x as f64 + 0.5) * self.dx
    }
}

/// Default `J_tot = ceil(4 sqrt(N)) + J`.
pub fn default_span(units: usize, winding: usize) -> usize {
    (4.0 * (units as f64).sqrt()).ceil() as usize + winding
}

/// Evolves a point mass through winding kernels on the truncated line.
pub fn line_evolve<T: Real>(kernels: &[WindingKernel<T>], start: LineStart, span: Option<usize>) -> Result<LineDensity<T>> {
    let first = kernels.first().ok_or_else(|| Error::config("line_evolve needs at least one kernel"))?;
    let (n, jw, dx) = (first.cells(), first.winding(), first.dx());
    let span = span.unwrap_or_else(|| default_span(kernels.len(), jw));
    if span < 1 {
        return Err(Error::config("J_tot must be >= 1"));
    }
    let rows = 2 * span + 1;
    let mut u = vec![T::zero(); rows * n];
    match start {
        LineStart::Cell(c) => {
            if c >= n {
                return Err(Error::Index { what: "cell", index: c as i64, max: n - 1 });
            }
            u[span * n + c] = dx.recip();
        }
        LineStart::Origin => {
            u[span * n] = T::of(0.5) / dx;
            u[(span - 1) * n + n - 1] = T::of(0.5) / dx;
        }
    }
    let mut log_mass = T::zero();
    let mut kept = 1.0f64;
    let mut image = vec![T::zero(); n];
    for k in kernels {
        if k.cells() != n || k.winding() != jw {
            return Err(Error::Dimension { expected: n, found: k.cells() });
        }
        let mut next = vec![T::zero(); rows * n];
        let mut lost = T::zero();
        for jp in 0..rows {
            let src = &u[jp * n..(jp + 1) * n];
            if src.iter().all(|&v| v == T::zero()) {
                continue;
            }
            for dj in -(jw as i64)..=jw as i64 {
                let layer = k.layer(dj);
                for (x, out) in image.iter_mut().enumerate() {
                    let row = &layer[x * n..(x + 1) * n];
                    *out = row.iter().zip(src).fold(T::zero(), |s, (&z, &v)| s + z * v) * dx;
                }
                let j = jp as i64 + dj;
                if (0..rows as i64).contains(&j) {
                    let dst = &mut next[j as usize * n..(j as usize + 1) * n];
                    dst.iter_mut().zip(&image).for_each(|(d, &v)| *d = *d + v);
                } else {
                    lost = lost + image.iter().fold(T::zero(), |s, &v| s + v) * dx;
                }
            }
        }
        let retained = next.iter().fold(T::zero(), |s, &v| s + v) * dx;
        let total = retained + lost;
        if !(retained > T::zero() && total.is_finite()) {
            return Err(Error::degenerate("line density lost all mass"));
        }
        kept *= (retained / total).as_f64();
        log_mass = log_mass + total.ln() + k.log_norm();
        let inv = retained.recip();
        next.iter_mut().for_each(|v| *v = *v * inv);
        u = next;
    }
    let lost = 1.0 - kept;
    if lost > LINE_LOSS_LIMIT {
        return Err(Error::Truncation { lost, limit: LINE_LOSS_LIMIT });
    }
    let period = n as f64 * dx.as_f64();
    Ok(LineDensity { cells: n, span, values: u, log_mass, dx: dx.as_f64(), period, lost })
}

/// Law of the integer part (winding) of the endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegerPartLaw {
    lowest: i64,
    probs: Vec<f64>,
}

impl IntegerPartLaw {
    pub fn new(lowest: i64, probs: Vec<f64>) -> Self {
        IntegerPartLaw { lowest, probs }
    }

    pub fn prob(&self, j: i64) -> f64 {
        let i = j - self.lowest;
        if i < 0 || i as usize >= self.probs.len() {
            0.0
        } else {
            self.probs[i as usize]
        }
    }

    pub fn range(&self) -> std::ops::RangeInclusive<i64> {
        self.lowest..=self.lowest + self.probs.len() as i64 - 1
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mean(&self) -> f64 {
        self.range().zip(&self.probs).map(|(j, p)| j as f64 * p).sum()
    }

    pub fn second_moment(&self) -> f64 {
        self.range().zip(&self.probs).map(|(j, p)| (j * j) as f64 * p).sum()
    }

    /// Largest absolute entrywise difference over the union of supports.
    pub fn max_difference(&self, other: &IntegerPartLaw) -> f64 {
        let lo = *self.range().start().min(other.range().start());
        let hi = *self.range().end().max(other.range().end());
        (lo..=hi).map(|j| (self.prob(j) - other.prob(j)).abs()).fold(0.0, f64::max)
    }
}

/// `P(j) = dx Σ_x d(j, x)`.
pub fn integer_part_law<T: Real>(d: &LineDensity<T>) -> IntegerPartLaw {
    let probs = d
        .values
        .chunks_exact(d.cells)
        .map(|row| row.iter().map(|v| v.as_f64()).sum::<f64>() * d.dx)
        .collect();
    IntegerPartLaw { lowest: -(d.span as i64), probs }
}

/// Quenched mean and variance of the endpoint, by cell-centre quadrature.
pub fn quenched_moments<T: Real>(d: &LineDensity<T>) -> (f64, f64) {
    let span = d.span as i64;
    let mut mass = 0.0;
    let mut first = 0.0;
    for j in -span..=span {
        for x in 0..d.cells {
            let w = d.value(j, x).as_f64() * d.dx;
            mass += w;
            first += w * d.coordinate(j, x);
        }
    }
    let mean = first / mass;
    let mut second = 0.0;
    for j in -span..=span {
        for x in 0..d.cells {
            let w = d.value(j, x).as_f64() * d.dx;
            second += w * (d.coordinate(j, x) - mean).powi(2);
        }
    }
    (mean, second / mass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{heat_density, heat_reference, TorusKernel};

    fn spec() -> GridSpec {
        GridSpec::new(32, 100, 3, 1, 0.0).unwrap()
    }

    #[test]
    fn constructors_are_normalized() {
        let s = spec();
        for d in [TorusDensity::<f64>::uniform(&s), TorusDensity::cell(&s, 3), TorusDensity::origin(&s)] {
            assert!((d.mass() - 1.0).abs() < 1e-12);
        }
        assert!(TorusDensity::<f64>::cell_on(4, 0.25, 4).is_err());
        assert!(TorusDensity::from_values(vec![0.0f64; 4], 0.25).is_err());
        assert!(TorusDensity::from_values(vec![1.0f64, -1.0], 0.5).is_err());
        let d = TorusDensity::from_values(vec![1.0f64, 3.0], 0.5).unwrap();
        assert_eq!(d.values(), &[0.5, 1.5]);
    }

    #[test]
    fn identical_starts_have_zero_gap() {
        let g = heat_reference::<f64>(1.0, &spec()).unwrap();
        let gaps = log_contraction_gaps(&[g.clone(), g], &BoundaryCondition::Cell(2), &BoundaryCondition::Cell(2)).unwrap();
        assert!(gaps.iter().all(|g| *g == f64::NEG_INFINITY));
    }

    #[test]
    fn gap_tracks_heat_flow_far_below_rounding() {
        let s = spec();
        let g = heat_reference::<f64>(1.0, &s).unwrap();
        let kernels = vec![g; 10];
        let gaps = log_contraction_gaps(&kernels, &BoundaryCondition::Cell(0), &BoundaryCondition::Cell(16)).unwrap();
        let two_pi_sq = 2.0 * std::f64::consts::PI.powi(2);
        for (t, w) in gaps.windows(2).enumerate() {
            assert!(((w[0] - w[1]) / two_pi_sq - 1.0).abs() < 1e-6, "t={t}: {}", w[0] - w[1]);
        }
        // Only odd modes survive; the first gives 4 e^{-2π² t} at x = 0.
        assert!((gaps[0] - 4f64.ln() + two_pi_sq).abs() < 1e-6, "{}", gaps[0]);
        assert!(gaps[9] < -150.0);
    }

    #[test]
    fn integer_part_of_point_mass() {
        let n = 4;
        let dx = 0.25;
        let mut ident = vec![0.0; n * n];
        for i in 0..n {
            ident[i * n + i] = 1.0 / dx;
        }
        let zero = vec![0.0; n * n];
        let k = WindingKernel::from_stack(n, dx, vec![zero.clone(), zero.clone(), ident, zero.clone(), zero], 0.0).unwrap();
        let d = line_evolve(&[k], LineStart::Cell(0), Some(2)).unwrap();
        let law = integer_part_law(&d);
        assert_eq!(law.prob(0), 1.0);
        let (mean, var) = quenched_moments(&d);
        assert!((mean - 0.125).abs() < 1e-15 && var.abs() < 1e-15);
    }

    #[test]
    fn truncation_is_reported() {
        let n = 4;
        let dx = 0.25;
        let flat = vec![1.0; n * n];
        let k = WindingKernel::from_stack(n, dx, vec![flat.clone(); 5], 0.0).unwrap();
        // Mass spreads to |j| = 2 after one step; a span of 1 loses 2/5 of it.
        let err = line_evolve(&[k], LineStart::Cell(0), Some(1)).unwrap_err();
        assert!(matches!(err, Error::Truncation { .. }));
    }

    #[test]
    fn torus_kernel_evolution_matches_reference_column() {
        let s = spec();
        let g: TorusKernel<f64> = heat_reference(1.0, &s).unwrap();
        let d = evolve_density(&[g.clone()], &BoundaryCondition::Cell(0)).unwrap();
        for x in 0..32 {
            assert!((d.values()[x] - g.entry(x, 0)).abs() < 1e-12);
        }
        let b = backward_density(&[g], &BoundaryCondition::Cell(0)).unwrap();
        assert!(b.sup_distance(&d) < 1e-12);
        let q = heat_density(1.0, 0.0);
        assert!(q > 0.39);
    }
}
