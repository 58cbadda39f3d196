//! Monte Carlo estimators over independent noise replicas.
//!
//! Each replica owns its noise, its kernels and its random streams, so a
//! replica's output depends only on `(config, seed, replica index)`.
//! Replicas run on the rayon pool and are collected in index order; every
//! reduction is sequential over that order, which makes results independent
//! of the thread count.
//!
//! Where possible, conditional expectations given the sampled path replace
//! sampled increments (second moments, covariances, characteristic functions).

use std::collections::BTreeMap;
use std::sync::Arc;

use num_complex::Complex;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::endpoint::{integer_part_law, line_evolve, log_contraction_gaps, quenched_moments, LineStart, TorusDensity};
use crate::endpoint::evolve_density;
use crate::error::{Error, Result};
use crate::gibbs::{path_laws_many, sample_from_laws, sample_paths, BoundaryCondition, WindingLaw};
use crate::kernel::{heat_density, torus_reduce, DenseUnit, SolverPlan, Unit, WindingColumn, WindingKernel};
use crate::noise::{GridSpec, NoiseGrid, SlabFactors};
use crate::rng::{replica_rng, stream_id, Purpose, SimRng};
use crate::scalar::{log_sum_exp, Real};
use crate::stationary::{bridge_density, sample_bridge};
use crate::stats::{jackknife_se, kolmogorov_p, ks_statistic, least_squares, mean_se, normal_cdf, LeastSquares};

/// Grid, master seed and replica count shared by all estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub spec: GridSpec,
    pub seed: u64,
    pub replicas: usize,
}

impl SimConfig {
    pub fn new(spec: GridSpec, seed: u64, replicas: usize) -> Self {
        SimConfig { spec, seed, replicas }
    }

    pub fn canonical(&self) -> String {
        format!("{};seed={};replicas={}", self.spec.canonical(), self.seed, self.replicas)
    }

    pub fn hash(&self) -> String {
        short_hash(&self.canonical())
    }

    fn require_replicas(&self, min: usize) -> Result<()> {
        if self.replicas < min {
            return Err(Error::config(format!("need at least {min} replicas, got {}", self.replicas)));
        }
        Ok(())
    }
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn short_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Point estimate with its standard error and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub name: String,
    pub value: f64,
    pub std_error: f64,
    pub replicas: usize,
    pub config_hash: String,
    pub seed: u64,
    pub extras: BTreeMap<String, f64>,
}

impl EstimateReport {
    pub fn new(name: &str, value: f64, std_error: f64, cfg: &SimConfig) -> Self {
        EstimateReport {
            name: name.to_string(),
            value,
            std_error,
            replicas: cfg.replicas,
            config_hash: cfg.hash(),
            seed: cfg.seed,
            extras: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.extras.insert(key.to_string(), value);
        self
    }

    pub fn extra(&self, key: &str) -> f64 {
        self.extras.get(key).copied().unwrap_or(f64::NAN)
    }

    /// `|value - target|` in units of the standard error.
    pub fn z_score(&self, target: f64) -> f64 {
        (self.value - target).abs() / self.std_error
    }
}

/// Boundary densities of the path measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundaryMode {
    /// Lebesgue at `x_N`, the origin at `x_0`.
    Pinned,
    /// Independent invariant densities at both ends.
    Stationary,
}

impl BoundaryMode {
    pub fn name(&self) -> &'static str {
        match self {
            BoundaryMode::Pinned => "pinned",
            BoundaryMode::Stationary => "stationary",
        }
    }

    fn purposes(&self) -> (Purpose, Purpose) {
        match self {
            BoundaryMode::Pinned => (Purpose::PinnedPath, Purpose::PinnedIncrements),
            BoundaryMode::Stationary => (Purpose::StationaryPath, Purpose::StationaryIncrements),
        }
    }
}

/// One replica's path, its increment laws and one draw of the increments.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementTrace {
    pub mode: BoundaryMode,
    pub cells: Vec<usize>,
    pub offset: i64,
    pub laws: Vec<WindingLaw>,
    pub eta: Vec<i64>,
    pub period: f64,
    pub dx: f64,
    pub log_partition: f64,
}

impl IncrementTrace {
    pub fn steps(&self) -> usize {
        self.laws.len()
    }

    /// Sampled total winding `offset + Y_N`.
    pub fn winding(&self) -> i64 {
        self.offset + self.eta.iter().sum::<i64>()
    }

    pub fn end_position(&self) -> f64 {
        (*self.cells.last().expect("path") as f64 + 0.5) * self.dx
    }

    /// Sampled endpoint on the line, `L (offset + Y_N) + position(x_N)`.
    pub fn endpoint(&self) -> f64 {
        self.period * self.winding() as f64 + self.end_position()
    }

    /// `E_x[offset + Y_N]`.
    pub fn winding_mean(&self) -> f64 {
        self.offset as f64 + self.laws.iter().map(WindingLaw::mean).sum::<f64>()
    }

    /// `E_x[(offset + Y_N)²]`.
    pub fn winding_second_moment(&self) -> f64 {
        let var: f64 = self.laws.iter().map(WindingLaw::variance).sum();
        self.winding_mean().powi(2) + var
    }

    /// `E_x[w_N²]` for the endpoint `w_N`.
    pub fn endpoint_second_moment(&self) -> f64 {
        let (l, p) = (self.period, self.end_position());
        l * l * self.winding_second_moment() + 2.0 * l * p * self.winding_mean() + p * p
    }

    /// `E_x[η_k η_{k+lag}]`, `k` 1-based.
    pub fn lag_product(&self, k: usize, lag: usize) -> f64 {
        if lag == 0 {
            self.laws[k - 1].second_moment()
        } else {
            self.laws[k - 1].mean() * self.laws[k - 1 + lag].mean()
        }
    }

    /// `E_x exp(iθ (offset + Y_N) / sqrt(N))`.
    pub fn cf(&self, theta: f64) -> Complex<f64> {
        let t = theta / (self.steps() as f64).sqrt();
        let base = Complex::from_polar(1.0, t * self.offset as f64);
        self.laws.iter().fold(base, |acc, l| acc * l.cf(t))
    }

    /// Largest mass any increment law puts on `|j| = J`.
    pub fn max_boundary_mass(&self) -> f64 {
        self.laws.iter().map(WindingLaw::boundary_mass).fold(0.0, f64::max)
    }
}

/// Shared solver state for one configuration.
pub struct Engine<T: Real> {
    cfg: SimConfig,
    plan: SolverPlan<T>,
    dense: Option<Arc<DenseUnit<T>>>,
}

impl<T: Real> Engine<T> {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        let plan = SolverPlan::new(&cfg.spec)?;
        let dense = if cfg.spec.beta == 0.0 {
            Some(Arc::new(DenseUnit::new(plan.winding_kernel(&SlabFactors::quiet(&cfg.spec))?)))
        } else {
            None
        };
        Ok(Engine { cfg, plan, dense })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &GridSpec {
        &self.cfg.spec
    }

    pub fn plan(&self) -> &SolverPlan<T> {
        &self.plan
    }

    /// Noise of one replica.
    pub fn noise(&self, replica: u64, horizon: usize) -> Result<NoiseGrid<T>> {
        NoiseGrid::with_stream(&self.cfg.spec, self.cfg.seed, stream_id(replica, Purpose::Noise), horizon)
    }

    /// The `horizon` unit propagators of one replica.
    pub fn units(&self, replica: u64, horizon: usize) -> Result<Vec<Unit<'_, T>>> {
        if let Some(d) = &self.dense {
            return Ok((0..horizon).map(|_| Unit::Dense(Arc::clone(d))).collect());
        }
        let noise = self.noise(replica, horizon)?;
        noise.slabs().map(|s| Ok(Unit::Slab(self.plan.unit(s.factors())?))).collect()
    }

    /// Materialized winding kernels of one replica.
    pub fn winding_kernels(&self, replica: u64, horizon: usize) -> Result<Vec<WindingKernel<T>>> {
        if let Some(d) = &self.dense {
            return Ok(vec![d.winding.clone(); horizon]);
        }
        let noise = self.noise(replica, horizon)?;
        noise.slabs().map(|s| self.plan.winding_kernel(&s.factors())).collect()
    }

    /// Column `Z[·][·, y]` of the first unit of one replica.
    pub fn first_column(&self, replica: u64, y: usize) -> Result<WindingColumn<T>> {
        if let Some(d) = &self.dense {
            return Ok(d.winding.column(y));
        }
        let noise = self.noise(replica, 1)?;
        self.plan.unit(noise.slab(1)?.factors())?.winding_column(y)
    }

    fn boundaries(&self, replica: u64, mode: BoundaryMode) -> (BoundaryCondition<T>, BoundaryCondition<T>) {
        match mode {
            BoundaryMode::Pinned => (BoundaryCondition::Lebesgue, BoundaryCondition::Origin),
            BoundaryMode::Stationary => {
                let mut rng = replica_rng(self.cfg.seed, replica, Purpose::Boundary);
                let rho = bridge_density(&sample_bridge(&mut rng, &self.cfg.spec));
                let rho_tilde = bridge_density(&sample_bridge(&mut rng, &self.cfg.spec));
                (BoundaryCondition::Density(rho_tilde), BoundaryCondition::Density(rho))
            }
        }
    }

    /// Traces of one replica for each mode, all under the same noise.
    pub fn replica_traces(&self, replica: u64, steps: usize, modes: &[BoundaryMode]) -> Result<Vec<IncrementTrace>> {
        let run = || -> Result<Vec<IncrementTrace>> {
            let units = self.units(replica, steps)?;
            let bcs: Vec<_> = modes.iter().map(|&m| self.boundaries(replica, m)).collect();
            let pairs: Vec<_> = bcs.iter().map(|(f, g)| (f, g)).collect();
            let mut path_rngs: Vec<SimRng> =
                modes.iter().map(|m| replica_rng(self.cfg.seed, replica, m.purposes().0)).collect();
            let paths = sample_paths(&units, &pairs, &mut path_rngs)?;
            let refs: Vec<_> = paths.iter().collect();
            let laws = path_laws_many(&units, &refs)?;
            modes
                .iter()
                .zip(paths)
                .zip(laws)
                .map(|((&mode, path), laws)| {
                    let mut rng = replica_rng(self.cfg.seed, replica, mode.purposes().1);
                    let sample = sample_from_laws(&laws, path.offset, &mut rng)?;
                    Ok(IncrementTrace {
                        mode,
                        cells: path.cells,
                        offset: path.offset,
                        laws,
                        eta: sample.eta,
                        period: self.cfg.spec.length(),
                        dx: self.cfg.spec.dx(),
                        log_partition: path.log_partition.as_f64(),
                    })
                })
                .collect()
        };
        run().map_err(|e| e.in_replica(replica))
    }

    /// Traces of every replica, `result[r][m]` for mode `modes[m]`.
    pub fn traces(&self, steps: usize, modes: &[BoundaryMode]) -> Result<Vec<Vec<IncrementTrace>>> {
        self.per_replica(|r| self.replica_traces(r, steps, modes))
    }

    /// Runs `f` for every replica in parallel and returns results in replica order.
    pub fn per_replica<R, F>(&self, f: F) -> Result<Vec<R>>
    where
        R: Send,
        F: Fn(u64) -> Result<R> + Sync + Send,
    {
        (0..self.cfg.replicas as u64).into_par_iter().map(|r| f(r).map_err(|e| e.in_replica(r))).collect()
    }
}

fn mode_traces(all: &[Vec<IncrementTrace>], m: usize) -> Vec<&IncrementTrace> {
    all.iter().map(|t| &t[m]).collect()
}

/// Annealed second moment of the winding over `N`, from pinned traces.
pub fn sigma_from_traces(traces: &[&IncrementTrace], cfg: &SimConfig) -> EstimateReport {
    let n = traces[0].steps() as f64;
    let l2 = traces[0].period.powi(2);
    let exact: Vec<f64> = traces.iter().map(|t| l2 * t.winding_second_moment() / n).collect();
    let sampled: Vec<f64> = traces.iter().map(|t| l2 * (t.winding() as f64).powi(2) / n).collect();
    let endpoint: Vec<f64> = traces.iter().map(|t| t.endpoint_second_moment() / n).collect();
    let eta: Vec<f64> = traces.iter().map(|t| t.laws.iter().map(WindingLaw::mean).sum::<f64>() / n).collect();
    let (value, se) = mean_se(&exact);
    let (s, s_se) = mean_se(&sampled);
    let (e, e_se) = mean_se(&endpoint);
    let (m, m_se) = mean_se(&eta);
    let truncated = traces.iter().filter(|t| t.max_boundary_mass() > 1e-6).count() as f64 / traces.len() as f64;
    EstimateReport::new("sigma2_annealed", value, se, cfg)
        .with("N", n)
        .with("sigma2_sampled", s)
        .with("sigma2_sampled_se", s_se)
        .with("sigma2_endpoint", e)
        .with("sigma2_endpoint_se", e_se)
        .with("eta_mean", m)
        .with("eta_mean_se", m_se)
        .with("truncation_fraction", truncated)
}

/// `σ_N² = E Ê_N ⌊w_N⌋² / N` with pinned boundaries.
pub fn sigma_annealed<T: Real>(engine: &Engine<T>, steps: usize) -> Result<EstimateReport> {
    if steps < 4 {
        return Err(Error::config(format!("sigma_annealed needs N >= 4, got {steps}")));
    }
    engine.cfg.require_replicas(2)?;
    let all = engine.traces(steps, &[BoundaryMode::Pinned])?;
    Ok(sigma_from_traces(&mode_traces(&all, 0), &engine.cfg))
}

/// Lagged increment covariances `E[η_0 η_j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSeries {
    pub lags: Vec<usize>,
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
}

/// Covariance series and its truncated lag sum from stationary traces.
pub fn covariances_from_traces(
    traces: &[&IncrementTrace],
    n_max: usize,
    cfg: &SimConfig,
) -> Result<(EstimateReport, CovarianceSeries)> {
    let steps = traces[0].steps();
    if 2 * n_max >= steps {
        return Err(Error::config(format!("lag cutoff n_max={n_max} must be < N/2 = {}", steps as f64 / 2.0)));
    }
    // Per replica: lag averages, then the truncated sum c_0 + 2 Σ c_j.
    let rows: Vec<Vec<f64>> = traces
        .iter()
        .map(|t| {
            (0..=n_max)
                .map(|lag| (1..=steps - lag).map(|k| t.lag_product(k, lag)).sum::<f64>() / (steps - lag) as f64)
                .collect()
        })
        .collect();
    let mut values = Vec::new();
    let mut std_errors = Vec::new();
    for lag in 0..=n_max {
        let col: Vec<f64> = rows.iter().map(|r| r[lag]).collect();
        let (m, se) = mean_se(&col);
        values.push(m);
        std_errors.push(se);
    }
    let sums: Vec<f64> = rows.iter().map(|r| r[0] + 2.0 * r[1..].iter().sum::<f64>()).collect();
    let (value, se) = mean_se(&sums);
    let total: Vec<f64> = traces
        .iter()
        .map(|t| {
            let mean: f64 = t.laws.iter().map(WindingLaw::mean).sum();
            let var: f64 = t.laws.iter().map(WindingLaw::variance).sum();
            (mean * mean + var) / steps as f64
        })
        .collect();
    let (tilde, tilde_se) = mean_se(&total);
    let eta: Vec<f64> = traces.iter().map(|t| t.laws.iter().map(WindingLaw::mean).sum::<f64>() / steps as f64).collect();
    let (m, m_se) = mean_se(&eta);
    // Tail beyond n_max from a log-linear fit of |c_j|, j ≥ 1.
    let tail = covariance_tail(&values, n_max);
    let report = EstimateReport::new("sigma2_stationary", value, se, cfg)
        .with("N", steps as f64)
        .with("n_max", n_max as f64)
        .with("sigma2_tilde_N", tilde)
        .with("sigma2_tilde_N_se", tilde_se)
        .with("eta_mean", m)
        .with("eta_mean_se", m_se)
        .with("tail_bound", tail);
    Ok((report, CovarianceSeries { lags: (0..=n_max).collect(), values, std_errors }))
}

fn covariance_tail(values: &[f64], n_max: usize) -> f64 {
    let pts: Vec<(f64, f64)> =
        (1..=n_max).filter(|&j| values[j].abs() > 0.0).map(|j| (j as f64, values[j].abs().ln())).collect();
    if pts.len() < 3 {
        return f64::NAN;
    }
    let design: Vec<Vec<f64>> = pts.iter().map(|p| vec![1.0, p.0]).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
    match least_squares(&design, &y) {
        Ok(fit) if fit.coefficients[1] < 0.0 => {
            let (a, b) = (fit.coefficients[0], fit.coefficients[1]);
            // 2 Σ_{j > n_max} e^{a + b j}
            2.0 * (a + b * (n_max + 1) as f64).exp() / (1.0 - b.exp())
        }
        _ => f64::INFINITY,
    }
}

/// `σ̃_N²` by the lag sum of stationary increment covariances.
pub fn sigma_stationary<T: Real>(engine: &Engine<T>, steps: usize, n_max: usize) -> Result<(EstimateReport, CovarianceSeries)> {
    if 2 * n_max >= steps {
        return Err(Error::config(format!("lag cutoff n_max={n_max} must be < N/2")));
    }
    engine.cfg.require_replicas(2)?;
    let all = engine.traces(steps, &[BoundaryMode::Stationary])?;
    covariances_from_traces(&mode_traces(&all, 0), n_max, &engine.cfg)
}

/// Replica mean of `Σ_j |j|^p P(η_k = j)` for each `k`.
pub fn increment_moment_from_traces(traces: &[&IncrementTrace], p: f64, ks: &[usize], cfg: &SimConfig) -> Result<Vec<EstimateReport>> {
    let steps = traces[0].steps();
    ks.iter()
        .map(|&k| {
            if k < 1 || k > steps {
                return Err(Error::Index { what: "increment", index: k as i64, max: steps });
            }
            let xs: Vec<f64> = traces.iter().map(|t| t.laws[k - 1].abs_moment(p)).collect();
            let (m, se) = mean_se(&xs);
            Ok(EstimateReport::new("increment_moment", m, se, cfg).with("p", p).with("k", k as f64))
        })
        .collect()
}

pub fn increment_moment<T: Real>(
    engine: &Engine<T>,
    p: f64,
    steps: usize,
    ks: &[usize],
    mode: BoundaryMode,
) -> Result<Vec<EstimateReport>> {
    if !(p >= 1.0) {
        return Err(Error::config(format!("moment order p must be >= 1, got {p}")));
    }
    engine.cfg.require_replicas(2)?;
    let all = engine.traces(steps, &[mode])?;
    increment_moment_from_traces(&mode_traces(&all, 0), p, ks, &engine.cfg)
}

/// `E exp(iθ winding / sqrt(N))` from conditional characteristic functions.
pub fn cf_from_traces(traces: &[&IncrementTrace], theta: f64, cfg: &SimConfig) -> EstimateReport {
    let values: Vec<Complex<f64>> = traces.iter().map(|t| t.cf(theta)).collect();
    let re: Vec<f64> = values.iter().map(|z| z.re).collect();
    let im: Vec<f64> = values.iter().map(|z| z.im).collect();
    let (mr, sr) = mean_se(&re);
    let (mi, si) = mean_se(&im);
    EstimateReport::new(&format!("cf_{}", traces[0].mode.name()), mr, sr, cfg)
        .with("theta", theta)
        .with("im", mi)
        .with("im_se", si)
        .with("modulus", mr.hypot(mi))
}

pub fn char_fn<T: Real>(engine: &Engine<T>, theta: f64, steps: usize, mode: BoundaryMode) -> Result<EstimateReport> {
    engine.cfg.require_replicas(2)?;
    let all = engine.traces(steps, &[mode])?;
    Ok(cf_from_traces(&mode_traces(&all, 0), theta, &engine.cfg))
}

/// Pinned versus stationary boundaries under common noise.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteComparison {
    pub annealed: EstimateReport,
    pub stationary: EstimateReport,
    pub series: CovarianceSeries,
    /// `σ_N² - σ̃²` and the standard error of the paired difference.
    pub sigma_difference: (f64, f64),
    /// The same difference with `E w_N² / N` in place of `σ_N²`.
    pub endpoint_difference: (f64, f64),
    pub cf: Vec<CfComparison>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfComparison {
    pub theta: f64,
    pub pinned: Complex<f64>,
    pub stationary: Complex<f64>,
    pub difference: Complex<f64>,
    /// Standard errors of the real and imaginary parts of the paired difference.
    pub se: (f64, f64),
}

impl CfComparison {
    /// Joint standard error of the complex difference.
    pub fn joint_se(&self) -> f64 {
        self.se.0.hypot(self.se.1)
    }
}

/// Compares the two boundary conventions on paired traces
/// (`traces[r] = [pinned, stationary]`).
pub fn compare_routes(
    traces: &[Vec<IncrementTrace>],
    n_max: usize,
    thetas: &[f64],
    cfg: &SimConfig,
) -> Result<RouteComparison> {
    let pinned = mode_traces(traces, 0);
    let stationary = mode_traces(traces, 1);
    if pinned[0].mode != BoundaryMode::Pinned || stationary[0].mode != BoundaryMode::Stationary {
        return Err(Error::config("compare_routes expects [pinned, stationary] traces"));
    }
    let annealed = sigma_from_traces(&pinned, cfg);
    let (stat, series) = covariances_from_traces(&stationary, n_max, cfg)?;
    let steps = pinned[0].steps();
    let l2 = pinned[0].period.powi(2);
    let pairs: Vec<(f64, f64, f64)> = pinned
        .iter()
        .zip(&stationary)
        .map(|(p, s)| {
            let a = l2 * p.winding_second_moment() / steps as f64;
            let w = p.endpoint_second_moment() / steps as f64;
            let lagged: f64 = (0..=n_max)
                .map(|lag| {
                    let c = (1..=steps - lag).map(|k| s.lag_product(k, lag)).sum::<f64>() / (steps - lag) as f64;
                    if lag == 0 {
                        c
                    } else {
                        2.0 * c
                    }
                })
                .sum();
            (a, w, l2 * lagged)
        })
        .collect();
    let sigma_difference = mean_se(&pairs.iter().map(|p| p.0 - p.2).collect::<Vec<_>>());
    let endpoint_difference = mean_se(&pairs.iter().map(|p| p.1 - p.2).collect::<Vec<_>>());
    let cf = thetas
        .iter()
        .map(|&theta| {
            let d: Vec<Complex<f64>> = pinned.iter().zip(&stationary).map(|(p, s)| p.cf(theta) - s.cf(theta)).collect();
            let (re, se_re) = mean_se(&d.iter().map(|z| z.re).collect::<Vec<_>>());
            let (im, se_im) = mean_se(&d.iter().map(|z| z.im).collect::<Vec<_>>());
            let mean = |ts: &[&IncrementTrace]| ts.iter().map(|t| t.cf(theta)).sum::<Complex<f64>>() / ts.len() as f64;
            CfComparison {
                theta,
                pinned: mean(&pinned),
                stationary: mean(&stationary),
                difference: Complex::new(re, im),
                se: (se_re, se_im),
            }
        })
        .collect();
    Ok(RouteComparison { annealed, stationary: stat, series, sigma_difference, endpoint_difference, cf })
}

/// Conditional moments of one increment, or of a point mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMoments {
    pub mean: f64,
    pub second: f64,
    pub sign_mean: f64,
    pub sign_second: f64,
}

impl StepMoments {
    pub fn of_law(law: &WindingLaw) -> Self {
        StepMoments { mean: law.mean(), second: law.second_moment(), sign_mean: law.sign_mean(), sign_second: law.nonzero() }
    }

    pub fn of_value(eta: i64) -> Self {
        let s = eta.signum() as f64;
        StepMoments { mean: eta as f64, second: (eta * eta) as f64, sign_mean: s, sign_second: s * s }
    }
}

/// Estimated ρ-mixing proxy at one lag.
#[derive(Debug, Clone, PartialEq)]
pub struct RhoRow {
    pub lag: usize,
    pub single: f64,
    pub block: f64,
    pub sign: f64,
    /// Largest absolute correlation over the dictionary.
    pub r_hat: f64,
    pub std_error: f64,
}

/// Test functions of the ρ-mixing dictionary.
pub const RHO_DICTIONARY: &str = "single increments; sums over blocks of 4; signs of single increments";
const BLOCK: usize = 4;

/// ρ-mixing proxy from per-replica sequences of conditional step moments.
///
/// For lag `n` the correlations of `F(η_k)` and `G(η_{k+n})` are pooled over
/// all admissible `k` and replicas. Given the path the increments are
/// independent, so the mixed moments of disjoint blocks factor.
pub fn rho_mixing_from_moments(seqs: &[Vec<StepMoments>], lags: &[usize]) -> Result<Vec<RhoRow>> {
    if seqs.len() < 2 {
        return Err(Error::config("rho mixing needs at least 2 sequences"));
    }
    let steps = seqs[0].len();
    lags.iter()
        .map(|&lag| {
            if lag == 0 || lag + 2 * BLOCK > steps + 1 {
                return Err(Error::config(format!("lag {lag} does not fit in {steps} steps")));
            }
            // Sufficient sums per replica: for each of 3 functions, (F, G, FG, F², G², count).
            let rows: Vec<Vec<f64>> = seqs.iter().map(|s| rho_sums(s, lag)).collect();
            let corr = |sums: &[f64], f: usize| -> f64 {
                let o = 6 * f;
                let c = sums[o + 5];
                let (ef, eg) = (sums[o] / c, sums[o + 1] / c);
                let cov = sums[o + 2] / c - ef * eg;
                let vf = sums[o + 3] / c - ef * ef;
                let vg = sums[o + 4] / c - eg * eg;
                if vf <= 0.0 || vg <= 0.0 {
                    0.0
                } else {
                    cov / (vf * vg).sqrt()
                }
            };
            let mut total = vec![0.0; 18];
            for r in &rows {
                total.iter_mut().zip(r).for_each(|(t, v)| *t += v);
            }
            let single = corr(&total, 0);
            let block = corr(&total, 1);
            let sign = corr(&total, 2);
            let r_hat = single.abs().max(block.abs()).max(sign.abs());
            let std_error = jackknife_se(&rows, |s, _| (0..3).map(|f| corr(s, f).abs()).fold(0.0, f64::max));
            Ok(RhoRow { lag, single, block, sign, r_hat, std_error })
        })
        .collect()
}

fn rho_sums(s: &[StepMoments], lag: usize) -> Vec<f64> {
    let steps = s.len();
    let mut out = vec![0.0; 18];
    let mut push = |f: usize, fm: f64, gm: f64, f2: f64, g2: f64| {
        let o = 6 * f;
        out[o] += fm;
        out[o + 1] += gm;
        out[o + 2] += fm * gm;
        out[o + 3] += f2;
        out[o + 4] += g2;
        out[o + 5] += 1.0;
    };
    // 0-based k: F at k, G at k + lag.
    for k in 0..steps - lag {
        let (a, b) = (&s[k], &s[k + lag]);
        push(0, a.mean, b.mean, a.second, b.second);
        push(2, a.sign_mean, b.sign_mean, a.sign_second, b.sign_second);
    }
    // F over k+1-B..=k, G over k+lag..k+lag+B-1.
    let block = |range: std::ops::Range<usize>| {
        let m: f64 = s[range.clone()].iter().map(|x| x.mean).sum();
        let v: f64 = s[range].iter().map(|x| x.second - x.mean * x.mean).sum();
        (m, m * m + v)
    };
    for k in BLOCK - 1..steps + 1 - lag - BLOCK {
        let (fm, f2) = block(k + 1 - BLOCK..k + 1);
        let (gm, g2) = block(k + lag..k + lag + BLOCK);
        push(1, fm, gm, f2, g2);
    }
    out
}

/// ρ-mixing proxy of stationary increments.
pub fn rho_mixing<T: Real>(engine: &Engine<T>, steps: usize, lags: &[usize]) -> Result<Vec<RhoRow>> {
    if let Some(&max) = lags.iter().max() {
        if 4 * max >= steps {
            return Err(Error::config(format!("largest lag {max} must be < N/4")));
        }
    }
    let all = engine.traces(steps, &[BoundaryMode::Stationary])?;
    let seqs: Vec<Vec<StepMoments>> = all.iter().map(|t| t[0].laws.iter().map(StepMoments::of_law).collect()).collect();
    rho_mixing_from_moments(&seqs, lags)
}

/// Kolmogorov–Smirnov test of `samples / (σ̂ sqrt(N))` against the standard normal.
pub fn clt_test(samples: &[f64], sigma_hat: f64, steps: usize) -> Result<(f64, f64)> {
    if samples.len() < 500 {
        return Err(Error::config(format!("clt_test needs >= 500 samples, got {}", samples.len())));
    }
    if !(sigma_hat > 0.0) {
        return Err(Error::config(format!("sigma_hat must be > 0, got {sigma_hat}")));
    }
    let scale = sigma_hat * (steps as f64).sqrt();
    let z: Vec<f64> = samples.iter().map(|s| s / scale).collect();
    let d = ks_statistic(&z, normal_cdf);
    Ok((d, kolmogorov_p(d, samples.len())))
}

/// Log-linear decay fit of the replica-mean contraction gap.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingFit {
    pub report: EstimateReport,
    /// `(t, log mean gap)`.
    pub profile: Vec<(usize, f64)>,
}

/// Replica-mean `sup|ρ_t(ν) - ρ_t(ν')|` for `t ∈ times`, fitted as `C e^{-λ t}`.
pub fn mixing_rate<T: Real>(
    engine: &Engine<T>,
    times: &[usize],
    nu: &BoundaryCondition<T>,
    nu_prime: &BoundaryCondition<T>,
) -> Result<MixingFit> {
    engine.cfg.require_replicas(2)?;
    let horizon = *times.iter().max().ok_or_else(|| Error::config("empty time list"))?;
    if times.len() < 3 || times.contains(&0) {
        return Err(Error::config("mixing fit needs at least 3 positive times"));
    }
    let gaps = engine.per_replica(|r| {
        let units = engine.units(r, horizon)?;
        log_contraction_gaps(&units, nu, nu_prime)
    })?;
    let logs: Vec<Vec<f64>> = gaps.iter().map(|g| times.iter().map(|&t| g[t - 1]).collect()).collect();
    if logs.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::degenerate("contraction gap vanished; the two densities coincide"));
    }
    // Per-time shift keeps the averaged exponentials representable.
    let shift: Vec<f64> = (0..times.len()).map(|i| logs.iter().map(|g| g[i]).fold(f64::NEG_INFINITY, f64::max)).collect();
    let rows: Vec<Vec<f64>> = logs.iter().map(|g| g.iter().zip(&shift).map(|(v, s)| (v - s).exp()).collect()).collect();
    let xs: Vec<f64> = times.iter().map(|&t| t as f64).collect();
    let fit = |sums: &[f64], r: usize| -> Option<LeastSquares> {
        let ys: Vec<f64> = sums.iter().zip(&shift).map(|(s, sh)| (s / r as f64).ln() + sh).collect();
        let design: Vec<Vec<f64>> = xs.iter().map(|&x| vec![1.0, x]).collect();
        least_squares(&design, &ys).ok()
    };
    let mut total = vec![0.0; times.len()];
    for r in &rows {
        total.iter_mut().zip(r).for_each(|(t, v)| *t += v);
    }
    let full = fit(&total, rows.len()).ok_or_else(|| Error::degenerate("mixing fit failed"))?;
    let lambda = -full.coefficients[1];
    let se = jackknife_se(&rows, |s, r| fit(s, r).map_or(f64::NAN, |f| -f.coefficients[1]));
    let profile = times
        .iter()
        .zip(&total)
        .zip(&shift)
        .map(|((&t, s), sh)| (t, (s / rows.len() as f64).ln() + sh))
        .collect();
    let report = EstimateReport::new("mixing_rate", lambda, se, &engine.cfg)
        .with("r_squared", full.r_squared)
        .with("log_prefactor", full.coefficients[0])
        .with("lower_95", lambda - 1.96 * se);
    Ok(MixingFit { report, profile })
}

/// Replica-mean of `Z[j][x_0, x_0]²` and its log-quadratic fit.
#[derive(Debug, Clone, PartialEq)]
pub struct TailProfile {
    /// `(j, log mean Z², standard error of the log)`.
    pub rows: Vec<(i64, f64, f64)>,
    /// Fit `a + b j + c j²`.
    pub quadratic: LeastSquares,
    /// Fit `a + c j²`.
    pub gaussian: LeastSquares,
}

pub fn tail_profile<T: Real>(engine: &Engine<T>, x0: usize) -> Result<TailProfile> {
    engine.cfg.require_replicas(2)?;
    let jmax = engine.spec().winding as i64;
    let cols = engine.per_replica(|r| {
        let col = engine.first_column(r, x0)?;
        Ok((0..=jmax).map(|j| 2.0 * col.log_entry(j, x0).as_f64()).collect::<Vec<f64>>())
    })?;
    let mut rows = Vec::new();
    for j in 0..=jmax as usize {
        let logs: Vec<f64> = cols.iter().map(|c| c[j]).collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scaled: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
        let (m, se) = mean_se(&scaled);
        rows.push((j as i64, m.ln() + top, se / m));
    }
    let y: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let quad: Vec<Vec<f64>> = rows.iter().map(|r| vec![1.0, r.0 as f64, (r.0 * r.0) as f64]).collect();
    let gauss: Vec<Vec<f64>> = rows.iter().map(|r| vec![1.0, (r.0 * r.0) as f64]).collect();
    Ok(TailProfile { quadratic: least_squares(&quad, &y)?, gaussian: least_squares(&gauss, &y)?, rows })
}

/// Replica statistics of `Z[j][x, 0] / q_1(x + jL)` at several offsets `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioTable {
    /// `(offset, mean, se of mean, variance, se of variance)`.
    pub rows: Vec<(f64, f64, f64, f64, f64)>,
    /// Largest pairwise difference of means in units of the paired SE.
    pub mean_discrepancy: f64,
    /// Largest pairwise difference of variances in units of the jackknife SE.
    pub variance_discrepancy: f64,
}

pub fn ratio_stationarity<T: Real>(engine: &Engine<T>, winding: i64, offsets: &[f64]) -> Result<RatioTable> {
    engine.cfg.require_replicas(2)?;
    let spec = *engine.spec();
    if winding.unsigned_abs() as usize > spec.winding {
        return Err(Error::config(format!("winding {winding} outside [-J, J]")));
    }
    let cells: Vec<usize> = offsets
        .iter()
        .map(|&o| {
            let c = (o / spec.dx()).round();
            if o < 0.0 || c as usize >= spec.cells() {
                Err(Error::config(format!("offset {o} outside [0, L)")))
            } else {
                Ok(c as usize)
            }
        })
        .collect::<Result<_>>()?;
    let ratios = engine.per_replica(|r| {
        let col = engine.first_column(r, 0)?;
        Ok(cells
            .iter()
            .map(|&x| {
                let q = heat_density(1.0, x as f64 * spec.dx() + winding as f64 * spec.length());
                col.log_entry(winding, x).as_f64().exp() / q
            })
            .collect::<Vec<f64>>())
    })?;
    let k = offsets.len();
    let column = |i: usize| -> Vec<f64> { ratios.iter().map(|r| r[i]).collect() };
    let mut rows = Vec::new();
    for (i, &o) in offsets.iter().enumerate() {
        let c = column(i);
        let (m, se) = mean_se(&c);
        let sums: Vec<Vec<f64>> = c.iter().map(|v| vec![*v, v * v]).collect();
        let var_of = |s: &[f64], r: usize| {
            let n = r as f64;
            (s[1] - s[0] * s[0] / n) / (n - 1.0)
        };
        let mut total = [0.0, 0.0];
        for s in &sums {
            total[0] += s[0];
            total[1] += s[1];
        }
        rows.push((o, m, se, var_of(&total, c.len()), jackknife_se(&sums, var_of)));
    }
    let mut mean_discrepancy = 0.0f64;
    let mut variance_discrepancy = 0.0f64;
    for a in 0..k {
        for b in a + 1..k {
            let d: Vec<f64> = ratios.iter().map(|r| r[a] - r[b]).collect();
            let (m, se) = mean_se(&d);
            mean_discrepancy = mean_discrepancy.max(if se > 0.0 { m.abs() / se } else { 0.0 });
            let sums: Vec<Vec<f64>> = ratios.iter().map(|r| vec![r[a], r[a] * r[a], r[b], r[b] * r[b]]).collect();
            let diff = |s: &[f64], r: usize| {
                let n = r as f64;
                (s[1] - s[0] * s[0] / n) / (n - 1.0) - (s[3] - s[2] * s[2] / n) / (n - 1.0)
            };
            let mut total = [0.0; 4];
            for s in &sums {
                total.iter_mut().zip(s).for_each(|(t, v)| *t += v);
            }
            let se = jackknife_se(&sums, diff);
            let dv = diff(&total, sums.len());
            variance_discrepancy = variance_discrepancy.max(if se > 0.0 { dv.abs() / se } else { 0.0 });
        }
    }
    Ok(RatioTable { rows, mean_discrepancy, variance_discrepancy })
}

/// Replica-mean quenched moments of the endpoint for each horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct QuenchedRow {
    pub steps: usize,
    pub mean: (f64, f64),
    pub variance: (f64, f64),
    pub winding_second_moment: (f64, f64),
    pub max_lost_mass: f64,
}

/// Quenched variance from line evolution of the origin, all horizons on
/// prefixes of the same replica kernels.
pub fn quenched_variance<T: Real>(engine: &Engine<T>, horizons: &[usize]) -> Result<Vec<QuenchedRow>> {
    engine.cfg.require_replicas(2)?;
    let horizon = *horizons.iter().max().ok_or_else(|| Error::config("empty horizon list"))?;
    if horizons.contains(&0) {
        return Err(Error::config("horizons must be >= 1"));
    }
    let per = engine.per_replica(|r| {
        let kernels = engine.winding_kernels(r, horizon)?;
        horizons
            .iter()
            .map(|&n| {
                let d = line_evolve(&kernels[..n], LineStart::Origin, None)?;
                let (m, v) = quenched_moments(&d);
                Ok((m, v, integer_part_law(&d).second_moment(), d.lost_mass()))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(horizons
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let pick = |f: fn(&(f64, f64, f64, f64)) -> f64| mean_se(&per.iter().map(|p| f(&p[i])).collect::<Vec<_>>());
            QuenchedRow {
                steps: n,
                mean: pick(|p| p.0),
                variance: pick(|p| p.1),
                winding_second_moment: pick(|p| p.2),
                max_lost_mass: per.iter().map(|p| p[i].3).fold(0.0, f64::max),
            }
        })
        .collect())
}

/// Functionals of a torus density compared between two samplers.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalComparison {
    pub name: String,
    pub reference: (f64, f64),
    pub candidate: (f64, f64),
    pub reference_variance: (f64, f64),
    pub candidate_variance: (f64, f64),
}

impl FunctionalComparison {
    fn new(name: &str, reference: &[f64], candidate: &[f64]) -> Self {
        let var_se = |xs: &[f64]| {
            let rows: Vec<Vec<f64>> = xs.iter().map(|v| vec![*v, v * v]).collect();
            let var = |s: &[f64], r: usize| {
                let n = r as f64;
                (s[1] - s[0] * s[0] / n) / (n - 1.0)
            };
            (crate::stats::variance(xs), jackknife_se(&rows, var))
        };
        FunctionalComparison {
            name: name.to_string(),
            reference: mean_se(reference),
            candidate: mean_se(candidate),
            reference_variance: var_se(reference),
            candidate_variance: var_se(candidate),
        }
    }

    /// Difference of means in units of the joint SE.
    pub fn mean_z(&self) -> f64 {
        (self.reference.0 - self.candidate.0).abs() / self.reference.1.hypot(self.candidate.1)
    }

    /// Difference of variances in units of the joint SE.
    pub fn variance_z(&self) -> f64 {
        (self.reference_variance.0 - self.candidate_variance.0).abs()
            / self.reference_variance.1.hypot(self.candidate_variance.1)
    }
}

/// Bridge samples against densities evolved from Lebesgue for `t` units, and
/// against bridge samples pushed through `push` further units.
pub fn stationary_check<T: Real>(engine: &Engine<T>, t: usize, push: usize) -> Result<Vec<FunctionalComparison>> {
    engine.cfg.require_replicas(2)?;
    let spec = *engine.spec();
    let functionals = |d: &TorusDensity<T>| [d.integral_sq(), d.sup(), d.values()[0].as_f64()];
    let per = engine.per_replica(|r| {
        let mut rng = replica_rng(engine.cfg.seed, r, Purpose::Bridge);
        let bridge: TorusDensity<T> = bridge_density(&sample_bridge(&mut rng, &spec));
        let units = engine.units(r, t.max(push))?;
        let evolved = evolve_density(&units[..t], &BoundaryCondition::Lebesgue)?;
        let pushed = if push > 0 {
            evolve_density(&units[..push], &BoundaryCondition::Density(bridge.clone()))?
        } else {
            bridge.clone()
        };
        Ok((functionals(&bridge), functionals(&evolved), functionals(&pushed)))
    })?;
    let names = ["integral_sq", "sup", "value_at_0"];
    let mut out = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let b: Vec<f64> = per.iter().map(|p| p.0[i]).collect();
        let e: Vec<f64> = per.iter().map(|p| p.1[i]).collect();
        out.push(FunctionalComparison::new(&format!("{name}:evolved_t{t}"), &b, &e));
        if push > 0 {
            let p: Vec<f64> = per.iter().map(|p| p.2[i]).collect();
            out.push(FunctionalComparison::new(&format!("{name}:pushed_{push}"), &b, &p));
        }
    }
    Ok(out)
}

/// Periodization and closed-form checks of single-unit kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelCheckRow {
    pub seed: u64,
    pub beta: f64,
    /// Largest relative entry difference between the reduced winding kernel and the direct torus kernel.
    pub periodization_error: f64,
    /// Relative difference to the heat kernel (only when `β = 0`).
    pub heat_error: f64,
    pub min_entry: f64,
    /// `max Z[±J] / max Z[0]`.
    pub tail_ratio: f64,
    /// Share of the kernel mass on `|j| = J`.
    pub tail_mass: f64,
    pub checksum: (f64, f64, f64),
}

pub fn kernel_check<T: Real>(spec: &GridSpec, seeds: &[u64], betas: &[f64]) -> Result<Vec<KernelCheckRow>> {
    let mut jobs = Vec::new();
    for &beta in betas {
        for &seed in seeds {
            jobs.push((beta, seed));
        }
    }
    jobs.into_par_iter()
        .map(|(beta, seed)| {
            let spec = spec.with_beta(beta);
            let plan = SolverPlan::<T>::new(&spec)?;
            let noise = NoiseGrid::<T>::with_stream(&spec, seed, 0, 1)?;
            let factors = noise.slab(1)?.factors();
            let z = plan.winding_kernel(&factors)?;
            let reduced = torus_reduce(&z);
            let direct = plan.torus_kernel(&factors)?;
            let heat_error = if beta == 0.0 {
                reduced.max_relative_difference(&crate::kernel::heat_reference(1.0, &spec)?)
            } else {
                f64::NAN
            };
            let (tail_ratio, tail_mass) = z.tail_diagnostics();
            Ok(KernelCheckRow {
                seed,
                beta,
                periodization_error: reduced.max_relative_difference(&direct),
                heat_error,
                min_entry: direct.min_entry().as_f64() * direct.log_norm().as_f64().exp(),
                tail_ratio,
                tail_mass,
                checksum: z.checksum(),
            })
        })
        .collect()
}

/// `σ_N²` for several periods `L` with everything else fixed.
pub fn sigma_sweep<T: Real>(cfg: &SimConfig, periods: &[usize], steps: usize) -> Result<Vec<EstimateReport>> {
    periods
        .iter()
        .map(|&l| {
            let spec = GridSpec { period: l, ..cfg.spec };
            let engine = Engine::<T>::new(SimConfig { spec, ..*cfg })?;
            Ok(sigma_annealed(&engine, steps)?.with("L", l as f64))
        })
        .collect()
}

/// Mean of a per-replica log quantity, in the log domain.
pub fn log_mean_exp(logs: &[f64]) -> f64 {
    log_sum_exp(logs) - (logs.len() as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_short() {
        let cfg = SimConfig::new(GridSpec::default(), 1, 10);
        assert_eq!(cfg.hash().len(), 16);
        assert_eq!(cfg.hash(), cfg.hash());
        assert_ne!(cfg.hash(), SimConfig::new(GridSpec::default(), 2, 10).hash());
    }

    #[test]
    fn rho_self_test_on_injected_copies() {
        let lag = 3;
        let mut seqs = Vec::new();
        for r in 0..40i64 {
            let base: Vec<i64> = (0..lag as i64).map(|i| ((r * 7 + i * 3) % 5) - 2).collect();
            let seq: Vec<StepMoments> = (0..24).map(|k| StepMoments::of_value(base[k % lag])).collect();
            seqs.push(seq);
        }
        let rows = rho_mixing_from_moments(&seqs, &[lag]).unwrap();
        assert!((rows[0].single - 1.0).abs() < 1e-6, "{:?}", rows[0]);
        assert!((rows[0].r_hat - 1.0).abs() < 1e-6);
    }

    #[test]
    fn clt_test_guards() {
        assert!(clt_test(&[0.0; 499], 1.0, 4).is_err());
        assert!(clt_test(&[0.0; 500], 0.0, 4).is_err());
        let (d, p) = clt_test(&[0.0; 500], 1.0, 4).unwrap();
        assert!((d - 0.5).abs() < 1e-12 && p < 1e-6);
    }

    #[test]
    fn covariance_cutoff_is_checked() {
        let cfg = SimConfig::new(GridSpec::default(), 1, 2);
        let trace = IncrementTrace {
            mode: BoundaryMode::Stationary,
            cells: vec![0; 9],
            offset: 0,
            laws: vec![WindingLaw::point(0, 2).unwrap(); 8],
            eta: vec![0; 8],
            period: 1.0,
            dx: 0.125,
            log_partition: 0.0,
        };
        assert!(covariances_from_traces(&[&trace, &trace], 4, &cfg).is_err());
        let (rep, series) = covariances_from_traces(&[&trace, &trace], 3, &cfg).unwrap();
        assert_eq!(rep.value, 0.0);
        assert_eq!(series.lags, vec![0, 1, 2, 3]);
    }
}
