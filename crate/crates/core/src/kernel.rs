//! One-unit propagators of the multiplicative stochastic heat equation.
//!
//! `∂t u = ½ ∂²u + β ξ u` is advanced with Strang splitting: an exact
//! spectral heat half step, the exponential noise factor
//! `exp(β W sqrt(dt/dx) - β² dt / (2dx))`, another heat half step.
//! Consecutive half steps are fused, so each time step costs one forward and
//! one inverse FFT. Columns of a kernel are real, and the heat symbol is real
//! and even, so two columns travel together as the real and imaginary parts
//! of one complex vector.
//!
//! Kernels store `values · exp(log_norm)`; `values` are rescaled to a maximum
//! of one every few steps.

use std::sync::Arc;

use num_complex::Complex;
use num_traits::Zero;
use rustfft::{Fft, FftPlanner};

use crate::endpoint::TorusDensity;
use crate::error::{Error, Result};
use crate::noise::{GridSpec, NoiseSlab, SlabFactors};
use crate::scalar::Real;

const RENORMALIZE_EVERY: usize = 8;

/// Spectral multipliers of the heat semigroup on a torus of physical length `length`.
#[derive(Clone)]
pub(crate) struct HeatFlow<T: Real> {
    len: usize,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
    half: Vec<T>,
    full: Vec<T>,
    unit: Vec<T>,
    scratch_len: usize,
}

impl<T: Real> HeatFlow<T> {
    fn new(len: usize, length: f64, dt: f64, horizon: f64) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(len);
        let inverse = planner.plan_fft_inverse(len);
        let norm = 1.0 / len as f64;
        let two_pi_sq = 2.0 * std::f64::consts::PI * std::f64::consts::PI;
        let symbol = |tau: f64| -> Vec<T> {
            (0..len)
                .map(|k| {
                    let signed = if k <= len / 2 { k as f64 } else { k as f64 - len as f64 };
                    let freq = signed / length;
                    T::of((-two_pi_sq * freq * freq * tau).exp() * norm)
                })
                .collect()
        };
        let scratch_len = forward.get_inplace_scratch_len().max(inverse.get_inplace_scratch_len());
        HeatFlow {
            len,
            half: symbol(0.5 * dt),
            full: symbol(dt),
            unit: symbol(horizon),
            forward,
            inverse,
            scratch_len,
        }
    }

    fn apply(&self, buf: &mut [Complex<T>], symbol: &[T], scratch: &mut [Complex<T>]) {
        self.forward.process_with_scratch(buf, scratch);
        for chunk in buf.chunks_exact_mut(self.len) {
            for (z, &m) in chunk.iter_mut().zip(symbol) {
                *z = *z * m;
            }
        }
        self.inverse.process_with_scratch(buf, scratch);
    }
}

/// Direction in which the steps of a slab are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Order {
    /// The scheme itself: acts on columns.
    Forward,
    /// The transposed scheme: noise steps in reverse order, acts on rows.
    Reverse,
}

fn renormalize<T: Real>(buf: &mut [Complex<T>], step: usize) -> Result<T> {
    let max = buf.iter().fold(T::zero(), |m, z| m.max(z.re.abs()).max(z.im.abs()));
    if !max.is_finite() {
        return Err(Error::Instability { step, detail: format!("non-finite amplitude {max}") });
    }
    if max == T::zero() {
        return Ok(T::zero());
    }
    let inv = max.recip();
    for z in buf.iter_mut() {
        *z = *z * inv;
    }
    Ok(max.ln())
}

/// Advances every vector in `buf` (a multiple of `flow.len` long) through one
/// unit of time. Returns the log of the factor removed from the values.
fn propagate<T: Real>(flow: &HeatFlow<T>, buf: &mut [Complex<T>], factors: &SlabFactors<T>, order: Order) -> Result<T> {
    debug_assert_eq!(buf.len() % flow.len, 0);
    debug_assert_eq!(flow.len % factors.cells, 0);
    let mut scratch = vec![Complex::zero(); flow.scratch_len];
    if factors.quiet {
        flow.apply(buf, &flow.unit, &mut scratch);
        return renormalize(buf, factors.steps);
    }
    let steps = factors.steps;
    let mut log_scale = factors.log_drift;
    flow.apply(buf, &flow.half, &mut scratch);
    for s in 0..steps {
        let row = factors.row(match order {
            Order::Forward => s,
            Order::Reverse => steps - 1 - s,
        });
        for tile in buf.chunks_exact_mut(factors.cells) {
            for (z, &f) in tile.iter_mut().zip(row) {
                *z = *z * f;
            }
        }
        let symbol = if s + 1 == steps { &flow.half } else { &flow.full };
        flow.apply(buf, symbol, &mut scratch);
        if (s + 1) % RENORMALIZE_EVERY == 0 || s + 1 == steps {
            log_scale = log_scale + renormalize(buf, s + 1)?;
        }
    }
    Ok(log_scale)
}

/// FFT plans and heat symbols for one [`GridSpec`], shared by all units and replicas.
#[derive(Clone)]
pub struct SolverPlan<T: Real> {
    spec: GridSpec,
    torus: HeatFlow<T>,
    extended: HeatFlow<T>,
}

impl<T: Real> SolverPlan<T> {
    pub fn new(spec: &GridSpec) -> Result<Self> {
        spec.validate()?;
        let torus = HeatFlow::new(spec.cells(), spec.length(), spec.dt(), 1.0);
        let extended =
            HeatFlow::new(spec.extended_cells(), spec.length() * spec.windings() as f64, spec.dt(), 1.0);
        Ok(SolverPlan { spec: *spec, torus, extended })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    fn check(&self, factors: &SlabFactors<T>) -> Result<()> {
        if factors.cells != self.spec.cells() || factors.steps != self.spec.steps_per_unit {
            return Err(Error::Dimension { expected: self.spec.cells(), found: factors.cells });
        }
        Ok(())
    }

    /// Winding-resolved propagator of one unit, all source cells at once.
    pub fn winding_kernel(&self, factors: &SlabFactors<T>) -> Result<WindingKernel<T>> {
        self.check(factors)?;
        let n = self.spec.cells();
        let ne = self.spec.extended_cells();
        let windings = self.spec.windings();
        let origin = self.spec.winding * n;
        let pairs = n.div_ceil(2);
        let delta = T::of(1.0 / self.spec.dx());
        let mut buf = vec![Complex::zero(); pairs * ne];
        for p in 0..pairs {
            buf[p * ne + origin + 2 * p].re = delta;
            if 2 * p + 1 < n {
                buf[p * ne + origin + 2 * p + 1].im = delta;
            }
        }
        let log_norm = propagate(&self.extended, &mut buf, factors, Order::Forward)?;
        let mut values = vec![T::zero(); windings * n * n];
        for p in 0..pairs {
            let column = &buf[p * ne..(p + 1) * ne];
            for (e, z) in column.iter().enumerate() {
                let (w, x) = (e / n, e % n);
                let base = (w * n + x) * n;
                values[base + 2 * p] = z.re.max(T::zero());
                if 2 * p + 1 < n {
                    values[base + 2 * p + 1] = z.im.max(T::zero());
                }
            }
        }
        Ok(WindingKernel { cells: n, winding: self.spec.winding, dx: T::of(self.spec.dx()), values, log_norm })
    }

    /// Propagator of the same scheme solved directly on the period-`L` torus.
    pub fn torus_kernel(&self, factors: &SlabFactors<T>) -> Result<TorusKernel<T>> {
        self.check(factors)?;
        let n = self.spec.cells();
        let pairs = n.div_ceil(2);
        let delta = T::of(1.0 / self.spec.dx());
        let mut buf = vec![Complex::zero(); pairs * n];
        for p in 0..pairs {
            buf[p * n + 2 * p].re = delta;
            if 2 * p + 1 < n {
                buf[p * n + 2 * p + 1].im = delta;
            }
        }
        let log_norm = propagate(&self.torus, &mut buf, factors, Order::Forward)?;
        let mut values = vec![T::zero(); n * n];
        for p in 0..pairs {
            for x in 0..n {
                let z = buf[p * n + x];
                values[x * n + 2 * p] = z.re.max(T::zero());
                if 2 * p + 1 < n {
                    values[x * n + 2 * p + 1] = z.im.max(T::zero());
                }
            }
        }
        Ok(TorusKernel { cells: n, dx: T::of(self.spec.dx()), values, log_norm })
    }

    /// Matrix-free view of one unit; nothing is solved until asked.
    pub fn unit(&self, factors: SlabFactors<T>) -> Result<UnitPropagator<'_, T>> {
        self.check(&factors)?;
        Ok(UnitPropagator { plan: self, factors })
    }

    fn solve_torus(&self, columns: [&[T]; 2], factors: &SlabFactors<T>, order: Order) -> Result<(Vec<Complex<T>>, T)> {
        let n = self.spec.cells();
        let mut buf: Vec<Complex<T>> = (0..n).map(|x| Complex::new(columns[0][x], columns[1][x])).collect();
        let log_scale = propagate(&self.torus, &mut buf, factors, order)?;
        Ok((buf, log_scale))
    }

    fn winding_columns(&self, sources: [Option<usize>; 2], factors: &SlabFactors<T>) -> Result<[Option<WindingColumn<T>>; 2]> {
        let n = self.spec.cells();
        let ne = self.spec.extended_cells();
        let origin = self.spec.winding * n;
        let delta = T::of(1.0 / self.spec.dx());
        let mut buf = vec![Complex::zero(); ne];
        if let Some(y) = sources[0] {
            buf[origin + y].re = delta;
        }
        if let Some(y) = sources[1] {
            buf[origin + y].im = delta;
        }
        let log_norm = propagate(&self.extended, &mut buf, factors, Order::Forward)?;
        let make = |source: Option<usize>, pick: fn(&Complex<T>) -> T| {
            source.map(|y| WindingColumn {
                source: y,
                cells: n,
                winding: self.spec.winding,
                values: buf.iter().map(|z| pick(z).max(T::zero())).collect(),
                log_norm,
            })
        };
        Ok([make(sources[0], |z| z.re), make(sources[1], |z| z.im)])
    }
}

/// Winding-resolved one-unit propagator `Z[j][x, y] ≈ Z(x + jL, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindingKernel<T> {
    cells: usize,
    winding: usize,
    dx: T,
    /// Layout `[(j + J) · n + x] · n + y`.
    values: Vec<T>,
    log_norm: T,
}

impl<T: Real> WindingKernel<T> {
    /// Kernel from explicit stacks (`stack[j + J][x · n + y]`).
    pub fn from_stack(cells: usize, dx: T, stack: Vec<Vec<T>>, log_norm: T) -> Result<Self> {
        if stack.len() % 2 == 0 {
            return Err(Error::config("winding stack must have odd length 2J+1"));
        }
        let mut values = Vec::with_capacity(stack.len() * cells * cells);
        for layer in &stack {
            if layer.len() != cells * cells {
                return Err(Error::Dimension { expected: cells * cells, found: layer.len() });
            }
            values.extend_from_slice(layer);
        }
        Ok(WindingKernel { cells, winding: stack.len() / 2, dx, values, log_norm })
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn winding(&self) -> usize {
        self.winding
    }

    pub fn dx(&self) -> T {
        self.dx
    }

    pub fn log_norm(&self) -> T {
        self.log_norm
    }

    /// Stored (rescaled) entry; zero outside `|j| ≤ J`.
    pub fn z(&self, j: i64, x: usize, y: usize) -> T {
        if j.unsigned_abs() as usize > self.winding {
            return T::zero();
        }
        let w = (j + self.winding as i64) as usize;
        self.values[(w * self.cells + x) * self.cells + y]
    }

    /// Row-major `n × n` layer of winding `j`.
    pub fn layer(&self, j: i64) -> &[T] {
        let w = (j + self.winding as i64) as usize;
        let nn = self.cells * self.cells;
        &self.values[w * nn..(w + 1) * nn]
    }

    /// `max Z[±J] / max Z[0]` and the share of the total stored mass on `|j| = J`.
    pub fn tail_diagnostics(&self) -> (f64, f64) {
        let max = |j: i64| self.layer(j).iter().fold(T::zero(), |m, &v| m.max(v)).as_f64();
        let sum = |j: i64| self.layer(j).iter().fold(T::zero(), |m, &v| m + v).as_f64();
        let j = self.winding as i64;
        let total: f64 = (-j..=j).map(sum).sum();
        ((max(j).max(max(-j))) / max(0), (sum(j) + sum(-j)) / total)
    }

    /// Source column `Z[·][·, y]`.
    pub fn column(&self, y: usize) -> WindingColumn<T> {
        let n = self.cells;
        let values = (0..self.windings_len() * n).map(|e| self.values[e * n + y]).collect();
        WindingColumn { source: y, cells: n, winding: self.winding, values, log_norm: self.log_norm }
    }

    fn windings_len(&self) -> usize {
        2 * self.winding + 1
    }

    /// `(sum, max, log_norm)` of the true entries, for diagnostics output.
    pub fn checksum(&self) -> (f64, f64, f64) {
        let sum = self.values.iter().fold(0.0, |s, v| s + v.as_f64());
        let max = self.values.iter().fold(0.0f64, |m, v| m.max(v.as_f64()));
        (sum, max, self.log_norm.as_f64())
    }
}

/// Periodized propagator `G[x, y]` on the period-`L` torus.
#[derive(Debug, Clone, PartialEq)]
pub struct TorusKernel<T> {
    cells: usize,
    dx: T,
    /// Row-major `x · n + y`.
    values: Vec<T>,
    log_norm: T,
}

impl<T: Real> TorusKernel<T> {
    pub fn from_values(cells: usize, dx: T, values: Vec<T>, log_norm: T) -> Result<Self> {
        if values.len() != cells * cells {
            return Err(Error::Dimension { expected: cells * cells, found: values.len() });
        }
        Ok(TorusKernel { cells, dx, values, log_norm })
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn dx(&self) -> T {
        self.dx
    }

    pub fn log_norm(&self) -> T {
        self.log_norm
    }

    /// Stored (rescaled) entry.
    pub fn g(&self, x: usize, y: usize) -> T {
        self.values[x * self.cells + y]
    }

    /// True entry `exp(log_norm) · g(x, y)`.
    pub fn entry(&self, x: usize, y: usize) -> T {
        self.g(x, y) * self.log_norm.exp()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn min_entry(&self) -> T {
        self.values.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn checksum(&self) -> (f64, f64, f64) {
        let sum = self.values.iter().fold(0.0, |s, v| s + v.as_f64());
        let max = self.values.iter().fold(0.0f64, |m, v| m.max(v.as_f64()));
        (sum, max, self.log_norm.as_f64())
    }

    /// Largest entrywise relative difference of the true entries.
    pub fn max_relative_difference(&self, other: &TorusKernel<T>) -> f64 {
        let shift = (other.log_norm - self.log_norm).as_f64().exp();
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| {
                let (a, b) = (a.as_f64(), b.as_f64() * shift);
                let scale = a.abs().max(b.abs());
                if scale == 0.0 {
                    0.0
                } else {
                    (a - b).abs() / scale
                }
            })
            .fold(0.0, f64::max)
    }
}

/// One source column `Z[j][·, y]` of a winding kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct WindingColumn<T> {
    source: usize,
    cells: usize,
    winding: usize,
    /// Layout `(j + J) · n + x`.
    values: Vec<T>,
    log_norm: T,
}

impl<T: Real> WindingColumn<T> {
    pub fn source(&self) -> usize {
        self.source
    }

    pub fn winding(&self) -> usize {
        self.winding
    }

    pub fn log_norm(&self) -> T {
        self.log_norm
    }

    /// Stored entry for target cell `x` after `j` windings.
    pub fn z(&self, j: i64, x: usize) -> T {
        if j.unsigned_abs() as usize > self.winding {
            return T::zero();
        }
        self.values[(j + self.winding as i64) as usize * self.cells + x]
    }

    /// `log Z(x + jL, y)` including the separated scale.
    pub fn log_entry(&self, j: i64, x: usize) -> T {
        self.z(j, x).ln() + self.log_norm
    }

    /// Weights `Z[j][x, y]` for `j = -J..=J`.
    pub fn weights(&self, x: usize) -> Vec<T> {
        let j = self.winding as i64;
        (-j..=j).map(|j| self.z(j, x)).collect()
    }
}

/// Builds the winding kernel of one unit from its noise slab.
pub fn unit_kernel<T: Real>(slab: &NoiseSlab<'_, T>, spec: &GridSpec) -> Result<WindingKernel<T>> {
    SolverPlan::new(spec)?.winding_kernel(&slab.factors())
}

/// Same scheme solved on the period-`L` torus; the reference for [`torus_reduce`].
pub fn direct_torus_kernel<T: Real>(slab: &NoiseSlab<'_, T>, spec: &GridSpec) -> Result<TorusKernel<T>> {
    SolverPlan::new(spec)?.torus_kernel(&slab.factors())
}

/// `G[x, y] = Σ_{|j| ≤ J} Z[j][x, y]`.
pub fn torus_reduce<T: Real>(k: &WindingKernel<T>) -> TorusKernel<T> {
    let nn = k.cells * k.cells;
    let mut values = vec![T::zero(); nn];
    for layer in k.values.chunks_exact(nn) {
        for (g, &z) in values.iter_mut().zip(layer) {
            *g = *g + z;
        }
    }
    TorusKernel { cells: k.cells, dx: k.dx, values, log_norm: k.log_norm }
}

/// Heat kernel density `q_t(x) = exp(-x²/2t) / sqrt(2πt)`.
pub fn heat_density(t: f64, x: f64) -> f64 {
    (-x * x / (2.0 * t)).exp() / (2.0 * std::f64::consts::PI * t).sqrt()
}

/// Periodized heat kernel on the grid, `Σ_j q_t(x - y + jL)`.
pub fn heat_reference<T: Real>(t: f64, spec: &GridSpec) -> Result<TorusKernel<T>> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::config(format!("heat_reference needs t > 0, got {t}")));
    }
    let n = spec.cells();
    let dx = spec.dx();
    let length = spec.length();
    // q_t(z) < 1e-14 q_t(0) beyond |z| = sqrt(2t ln 1e14).
    let reach = (2.0 * t * 1e14f64.ln()).sqrt();
    let images = (reach / length).ceil() as i64 + 2;
    let profile: Vec<f64> = (0..n)
        .map(|d| (-images..=images).map(|j| heat_density(t, d as f64 * dx + j as f64 * length)).sum())
        .collect();
    let mut values = Vec::with_capacity(n * n);
    for x in 0..n {
        for y in 0..n {
            values.push(T::of(profile[(x + n - y) % n]));
        }
    }
    Ok(TorusKernel { cells: n, dx: T::of(dx), values, log_norm: T::zero() })
}

/// Normalized image of a density and the log of its mass, `log ∫ G d`.
pub fn apply<T: Real>(k: &TorusKernel<T>, d: &TorusDensity<T>) -> Result<(TorusDensity<T>, T)> {
    let image = k.forward_raw(d.values())?;
    TorusDensity::from_scaled(image, d.log_mass(), k.dx)
}

/// Vector with a separated log scale: true values are `values · exp(log_scale)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaled<T> {
    pub values: Vec<T>,
    pub log_scale: T,
}

/// A unit-time propagator on the torus, materialized or not.
pub trait Transfer<T: Real> {
    fn cells(&self) -> usize;

    fn dx(&self) -> T;

    /// `(G v)(x) = Σ_y G[x, y] v(y) dx`.
    fn forward_raw(&self, v: &[T]) -> Result<Scaled<T>>;

    /// `(vᵀ G)(y) = Σ_x v(x) G[x, y] dx`.
    fn backward_raw(&self, v: &[T]) -> Result<Scaled<T>>;

    /// Row `G[x, ·]` up to a positive factor.
    fn row(&self, x: usize) -> Result<Vec<T>> {
        let mut delta = vec![T::zero(); self.cells()];
        delta[x] = self.dx().recip();
        Ok(self.backward_raw(&delta)?.values)
    }

    /// Two images under the same unit; implementations may share one solve.
    fn forward_pair(&self, a: &[T], b: &[T]) -> Result<(Scaled<T>, Scaled<T>)> {
        Ok((self.forward_raw(a)?, self.forward_raw(b)?))
    }

    /// Two rows under the same unit; implementations may share one solve.
    fn row_pair(&self, x: usize, y: usize) -> Result<(Vec<T>, Vec<T>)> {
        Ok((self.row(x)?, self.row(y)?))
    }
}

/// Source of winding weights `Z[j][x_to, x_from]`.
pub trait WindingSource<T: Real> {
    fn winding(&self) -> usize;

    /// Weights for `j = -J..=J` of every `(x_to, x_from)` pair, each up to a
    /// positive factor of its own.
    fn winding_weights(&self, pairs: &[(usize, usize)]) -> Result<Vec<Vec<T>>>;
}

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Dimension { expected, found });
    }
    Ok(())
}

impl<T: Real> Transfer<T> for TorusKernel<T> {
    fn cells(&self) -> usize {
        self.cells
    }

    fn dx(&self) -> T {
        self.dx
    }

    fn forward_raw(&self, v: &[T]) -> Result<Scaled<T>> {
        check_len(self.cells, v.len())?;
        let values = self
            .values
            .chunks_exact(self.cells)
            .map(|row| row.iter().zip(v).fold(T::zero(), |s, (&g, &u)| s + g * u) * self.dx)
            .collect();
        Ok(Scaled { values, log_scale: self.log_norm })
    }

    fn backward_raw(&self, v: &[T]) -> Result<Scaled<T>> {
        check_len(self.cells, v.len())?;
        let mut values = vec![T::zero(); self.cells];
        for (row, &u) in self.values.chunks_exact(self.cells).zip(v) {
            for (out, &g) in values.iter_mut().zip(row) {
                *out = *out + g * u;
            }
        }
        values.iter_mut().for_each(|w| *w = *w * self.dx);
        Ok(Scaled { values, log_scale: self.log_norm })
    }

    fn row(&self, x: usize) -> Result<Vec<T>> {
        Ok(self.values[x * self.cells..(x + 1) * self.cells].to_vec())
    }
}

impl<T: Real> WindingSource<T> for WindingKernel<T> {
    fn winding(&self) -> usize {
        self.winding
    }

    fn winding_weights(&self, pairs: &[(usize, usize)]) -> Result<Vec<Vec<T>>> {
        let j = self.winding as i64;
        Ok(pairs.iter().map(|&(to, from)| (-j..=j).map(|j| self.z(j, to, from)).collect()).collect())
    }
}

/// Matrix-free propagator of one unit: every query is a fresh solve with the
/// unit's noise. Cheaper than a full kernel when only a few vectors are needed.
pub struct UnitPropagator<'p, T: Real> {
    plan: &'p SolverPlan<T>,
    factors: SlabFactors<T>,
}

impl<T: Real> UnitPropagator<'_, T> {
    /// `Z[·][·, y]` for one source cell.
    pub fn winding_column(&self, y: usize) -> Result<WindingColumn<T>> {
        let [col, _] = self.plan.winding_columns([Some(y), None], &self.factors)?;
        Ok(col.expect("requested column"))
    }

    /// Columns for several sources, solved two at a time.
    pub fn winding_columns(&self, sources: &[usize]) -> Result<Vec<WindingColumn<T>>> {
        let mut out = Vec::with_capacity(sources.len());
        for chunk in sources.chunks(2) {
            let pair = [Some(chunk[0]), chunk.get(1).copied()];
            let [a, b] = self.plan.winding_columns(pair, &self.factors)?;
            out.extend(a);
            out.extend(b);
        }
        Ok(out)
    }

    /// Full winding kernel of the unit.
    pub fn materialize(&self) -> Result<WindingKernel<T>> {
        self.plan.winding_kernel(&self.factors)
    }
}

impl<T: Real> Transfer<T> for UnitPropagator<'_, T> {
    fn cells(&self) -> usize {
        self.plan.spec.cells()
    }

    fn dx(&self) -> T {
        T::of(self.plan.spec.dx())
    }

    fn forward_raw(&self, v: &[T]) -> Result<Scaled<T>> {
        check_len(self.cells(), v.len())?;
        let zeros = vec![T::zero(); v.len()];
        let (buf, log_scale) = self.plan.solve_torus([v, &zeros], &self.factors, Order::Forward)?;
        Ok(Scaled { values: buf.iter().map(|z| z.re).collect(), log_scale })
    }

    fn backward_raw(&self, v: &[T]) -> Result<Scaled<T>> {
        check_len(self.cells(), v.len())?;
        let zeros = vec![T::zero(); v.len()];
        let (buf, log_scale) = self.plan.solve_torus([v, &zeros], &self.factors, Order::Reverse)?;
        Ok(Scaled { values: buf.iter().map(|z| z.re).collect(), log_scale })
    }

    fn row(&self, x: usize) -> Result<Vec<T>> {
        let mut delta = vec![T::zero(); self.cells()];
        delta[x] = self.dx().recip();
        Ok(self.backward_raw(&delta)?.values.into_iter().map(|v| v.max(T::zero())).collect())
    }

    fn forward_pair(&self, a: &[T], b: &[T]) -> Result<(Scaled<T>, Scaled<T>)> {
        check_len(self.cells(), a.len())?;
        check_len(self.cells(), b.len())?;
        let (buf, log_scale) = self.plan.solve_torus([a, b], &self.factors, Order::Forward)?;
        Ok((
            Scaled { values: buf.iter().map(|z| z.re).collect(), log_scale },
            Scaled { values: buf.iter().map(|z| z.im).collect(), log_scale },
        ))
    }

    fn row_pair(&self, x: usize, y: usize) -> Result<(Vec<T>, Vec<T>)> {
        let n = self.cells();
        let mut a = vec![T::zero(); n];
        let mut b = vec![T::zero(); n];
        a[x] = self.dx().recip();
        b[y] = self.dx().recip();
        let (buf, _) = self.plan.solve_torus([&a, &b], &self.factors, Order::Reverse)?;
        Ok((
            buf.iter().map(|z| z.re.max(T::zero())).collect(),
            buf.iter().map(|z| z.im.max(T::zero())).collect(),
        ))
    }
}

/// A unit whose kernels were built once, for sharing across units and replicas
/// (the noiseless case).
#[derive(Debug, Clone)]
pub struct DenseUnit<T> {
    pub torus: TorusKernel<T>,
    pub winding: WindingKernel<T>,
}

impl<T: Real> DenseUnit<T> {
    pub fn new(winding: WindingKernel<T>) -> Self {
        DenseUnit { torus: torus_reduce(&winding), winding }
    }
}

impl<T: Real> Transfer<T> for DenseUnit<T> {
    fn cells(&self) -> usize {
        self.torus.cells
    }

    fn dx(&self) -> T {
        self.torus.dx
    }

    fn forward_raw(&self, v: &[T]) -> Result<Scaled<T>> {
        self.torus.forward_raw(v)
    }

    fn backward_raw(&self, v: &[T]) -> Result<Scaled<T>> {
        self.torus.backward_raw(v)
    }

    fn row(&self, x: usize) -> Result<Vec<T>> {
        self.torus.row(x)
    }
}

impl<T: Real> WindingSource<T> for DenseUnit<T> {
    fn winding(&self) -> usize {
        self.winding.winding
    }

    fn winding_weights(&self, pairs: &[(usize, usize)]) -> Result<Vec<Vec<T>>> {
        self.winding.winding_weights(pairs)
    }
}

/// Either a shared dense unit or a matrix-free one.
pub enum Unit<'p, T: Real> {
    Dense(Arc<DenseUnit<T>>),
    Slab(UnitPropagator<'p, T>),
}

impl<T: Real> Transfer<T> for Unit<'_, T> {
    fn cells(&self) -> usize {
        match self {
            Unit::Dense(u) => u.cells(),
            Unit::Slab(u) => u.cells(),
        }
    }

    fn dx(&self) -> T {
        match self {
            Unit::Dense(u) => u.dx(),
            Unit::Slab(u) => u.dx(),
        }
    }

    fn forward_raw(&self, v: &[T]) -> Result<Scaled<T>> {
        match self {
            Unit::Dense(u) => u.forward_raw(v),
            Unit::Slab(u) => u.forward_raw(v),
        }
    }

    fn backward_raw(&self, v: &[T]) -> Result<Scaled<T>> {
        match self {
            Unit::Dense(u) => u.backward_raw(v),
            Unit::Slab(u) => u.backward_raw(v),
        }
    }

    fn row(&self, x: usize) -> Result<Vec<T>> {
        match self {
            Unit::Dense(u) => u.row(x),
            Unit::Slab(u) => u.row(x),
        }
    }

    fn forward_pair(&self, a: &[T], b: &[T]) -> Result<(Scaled<T>, Scaled<T>)> {
        match self {
            Unit::Dense(u) => u.forward_pair(a, b),
            Unit::Slab(u) => u.forward_pair(a, b),
        }
    }

    fn row_pair(&self, x: usize, y: usize) -> Result<(Vec<T>, Vec<T>)> {
        match self {
            Unit::Dense(u) => u.row_pair(x, y),
            Unit::Slab(u) => u.row_pair(x, y),
        }
    }
}

impl<T: Real> WindingSource<T> for Unit<'_, T> {
    fn winding(&self) -> usize {
        match self {
            Unit::Dense(u) => u.winding(),
            Unit::Slab(u) => WindingSource::winding(u),
        }
    }

    fn winding_weights(&self, pairs: &[(usize, usize)]) -> Result<Vec<Vec<T>>> {
        match self {
            Unit::Dense(u) => u.winding_weights(pairs),
            Unit::Slab(u) => u.winding_weights(pairs),
        }
    }
}

impl<T: Real> WindingSource<T> for UnitPropagator<'_, T> {
    fn winding(&self) -> usize {
        self.plan.spec.winding
    }

    fn winding_weights(&self, pairs: &[(usize, usize)]) -> Result<Vec<Vec<T>>> {
        let sources: Vec<usize> = pairs.iter().map(|&(_, from)| from).collect();
        let columns = self.winding_columns(&sources)?;
        Ok(pairs.iter().zip(&columns).map(|(&(to, _), col)| col.weights(to)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::new_noise;

    fn spec(m: usize, beta: f64) -> GridSpec {
        GridSpec::new(m, 100, 3, 1, beta).unwrap()
    }

    #[test]
    fn beta_zero_kernel_is_heat_kernel() {
        let spec = spec(64, 0.0);
        let noise = NoiseGrid64::quiet(&spec, 1).unwrap();
        let k = unit_kernel(&noise.slab(1).unwrap(), &spec).unwrap();
        let scale = k.log_norm().exp();
        let z00 = k.z(0, 0, 0) * scale;
        assert!((z00 / heat_density(1.0, 0.0) - 1.0).abs() < 1e-6, "{z00}");
        // Column 0 of winding j sits at offset x·dx + j, plus the images of
        // the 7-period extended torus.
        for j in -3i64..=3 {
            for x in [0usize, 5, 40] {
                let expect: f64 =
                    (-3..=3).map(|m| heat_density(1.0, x as f64 / 64.0 + (j + 7 * m) as f64)).sum();
                let got = k.z(j, x, 0) * scale;
                assert!((got / expect - 1.0).abs() < 1e-6, "j={j} x={x}: {got} vs {expect}");
            }
        }
        let (ratio, _) = k.tail_diagnostics();
        // Closest approach of winding 3 is 2 + dx; both maxima carry images.
        let imaged = |z: f64| (-3..=3).map(|m| heat_density(1.0, z + 7.0 * m as f64)).sum::<f64>();
        let expect = imaged(2.0 + 1.0 / 64.0) / imaged(0.0);
        assert!((ratio / expect - 1.0).abs() < 1e-6, "{ratio} vs {expect}");
    }

    type NoiseGrid64 = crate::noise::NoiseGrid<f64>;

    #[test]
    fn torus_reduce_of_single_layer() {
        let n = 8;
        let dx = 1.0 / n as f64;
        let identity: Vec<f64> = (0..n * n).map(|i| if i / n == i % n { 1.0 / dx } else { 0.0 }).collect();
        let zero = vec![0.0; n * n];
        let k = WindingKernel::from_stack(n, dx, vec![zero.clone(), identity.clone(), zero], 0.0).unwrap();
        assert_eq!(torus_reduce(&k).values(), identity.as_slice());
    }

    #[test]
    fn heat_reference_closed_forms() {
        let spec = spec(16, 0.0);
        let g = heat_reference::<f64>(1.0, &spec).unwrap();
        let poisson: f64 = (-20..=20).map(|j| heat_density(1.0, j as f64)).sum();
        assert!((g.entry(0, 0) - poisson).abs() < 1e-12);
        assert!((g.entry(3, 3) - 1.0).abs() < 1e-6);
        let row: f64 = (0..16).map(|x| g.entry(x, 0) * spec.dx()).sum();
        assert!((row - 1.0).abs() < 1e-8);
        assert!(heat_reference::<f64>(0.0, &spec).is_err());
        assert!((heat_density(1.0, 1.0) / heat_density(1.0, 0.0) - 0.606531).abs() < 1e-6);
    }

    #[test]
    fn apply_identity_and_uniform() {
        let spec = spec(16, 0.0);
        let n = 16;
        let dx = spec.dx();
        let identity: Vec<f64> = (0..n * n).map(|i| if i / n == i % n { 1.0 / dx } else { 0.0 }).collect();
        let k = TorusKernel::from_values(n, dx, identity, 0.0).unwrap();
        let d = TorusDensity::cell(&spec, 5);
        let (out, inc) = apply(&k, &d).unwrap();
        assert_eq!(out.values(), d.values());
        assert!(inc.abs() < 1e-12);

        let noise = NoiseGrid64::quiet(&spec, 1).unwrap();
        let g = direct_torus_kernel(&noise.slab(1).unwrap(), &spec).unwrap();
        let (out, inc) = apply(&g, &TorusDensity::uniform(&spec)).unwrap();
        assert!(inc.abs() < 1e-10);
        assert!(out.values().iter().all(|v| (v - 1.0).abs() < 1e-10));
    }

    #[test]
    fn matrix_free_matches_materialized() {
        let spec = spec(16, 1.0);
        let noise = new_noise::<f64>(&spec, 11, 1).unwrap();
        let slab = noise.slab(1).unwrap();
        let plan = SolverPlan::new(&spec).unwrap();
        let g = plan.torus_kernel(&slab.factors()).unwrap();
        let z = plan.winding_kernel(&slab.factors()).unwrap();
        let unit = plan.unit(slab.factors()).unwrap();
        let v: Vec<f64> = (0..16).map(|i| 1.0 + (i as f64 * 0.7).sin()).collect();

        let close = |a: &Scaled<f64>, b: &Scaled<f64>| {
            let s = (a.log_scale - b.log_scale).exp();
            let max = b.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            a.values.iter().zip(&b.values).all(|(x, y)| (x * s - y).abs() < 1e-11 * max)
        };
        assert!(close(&unit.forward_raw(&v).unwrap(), &g.forward_raw(&v).unwrap()));
        assert!(close(&unit.backward_raw(&v).unwrap(), &g.backward_raw(&v).unwrap()));

        let row = unit.row(3).unwrap();
        let ratio = row[0] / g.g(3, 0);
        for y in 0..16 {
            assert!((row[y] / g.g(3, y) / ratio - 1.0).abs() < 1e-10);
        }
        let w = unit.winding_weights(&[(4, 9), (0, 0), (15, 2)]).unwrap();
        let d = z.winding_weights(&[(4, 9), (0, 0), (15, 2)]).unwrap();
        for (a, b) in w.iter().zip(&d) {
            let sa: f64 = a.iter().sum();
            let sb: f64 = b.iter().sum();
            for (x, y) in a.iter().zip(b) {
                assert!((x / sa - y / sb).abs() < 1e-12);
            }
        }
    }
}
