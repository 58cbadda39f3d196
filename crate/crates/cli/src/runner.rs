//! Experiment dispatch and output layout.
//!
//! A run writes into `<out>/<experiment>-<hash>/`:
//! - `manifest.json`, written with status `running` before any work and
//!   rewritten with estimates, checks and wall time afterwards;
//! - `results.csv` plus experiment-specific tables;
//! - `warnings.log`, one line per warning (possibly empty);
//! - `failure.json` when a check fails under `--assert` or the run errors.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use polymer_core::endpoint::LINE_LOSS_WARN;
use polymer_core::estimators::{
    clt_test, compare_routes, covariances_from_traces, increment_moment_from_traces, kernel_check, mixing_rate,
    quenched_variance, ratio_stationarity, rho_mixing_from_moments, sigma_from_traces, sigma_sweep, stationary_check,
    tail_profile, BoundaryMode, Engine, EstimateReport, IncrementTrace, SimConfig, StepMoments, RHO_DICTIONARY,
};
use polymer_core::gibbs::{increment_law, BoundaryCondition, WindingLaw};
use polymer_core::kernel::{heat_density, SolverPlan};
use polymer_core::noise::SlabFactors;
use polymer_core::stats::mean_se;
use serde::Serialize;
use thiserror::Error;

use crate::config::{Experiment, ExperimentConfig, MixingPair};
use crate::output::{num, Check, EstimateRecord, Manifest, Table};
use crate::thresholds::THRESHOLDS_VERSION;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Core(#[from] polymer_core::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("cannot build thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error("{0}")]
    Unsupported(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

/// What an experiment produced.
#[derive(Debug, Default)]
pub struct ExperimentOutput {
    pub tables: Vec<Table>,
    pub estimates: Vec<EstimateReport>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
    pub warnings: Vec<String>,
}

/// Result of a finished run.
#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub output: ExperimentOutput,
}

impl RunOutcome {
    pub fn all_passed(&self) -> bool {
        self.output.checks.iter().all(|c| c.passed)
    }

    /// 0 on success, 1 when a check failed and assertions are on.
    pub fn exit_code(&self, assert: bool) -> i32 {
        if assert && !self.all_passed() {
            1
        } else {
            0
        }
    }
}

#[derive(Serialize)]
struct FailureRecord<'a> {
    experiment: String,
    config_hash: String,
    kind: &'a str,
    failed_checks: Vec<&'a Check>,
    error: Option<String>,
    replica: Option<u64>,
    replay: Option<String>,
}

const STREAM_SCHEME: &str = "ChaCha8 seeded with the master seed; stream = replica * 8 + purpose \
(0 noise, 1 boundary densities, 2 pinned path, 3 stationary path, 4 pinned increments, 5 stationary increments, 6 bridge)";

fn manifest(cfg: &ExperimentConfig, status: &str) -> Manifest {
    Manifest {
        tool: "polymer-lab".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        thresholds_version: THRESHOLDS_VERSION,
        experiment: cfg.experiment.to_string(),
        config_hash: cfg.hash(),
        canonical_config: cfg.canonical(),
        threads: cfg.threads,
        seed: cfg.seed,
        stream_scheme: STREAM_SCHEME.into(),
        replicas: cfg.replicas,
        replay: format!("polymer-lab {} --config <file> --replay <replica>", cfg.experiment),
        status: status.into(),
        wall_time_s: 0.0,
        thresholds: cfg.thresholds.entries().map(|(k, v)| (k.to_string(), v)).collect(),
        files: Vec::new(),
        estimates: Vec::new(),
        checks: Vec::new(),
        notes: Vec::new(),
        warnings: Vec::new(),
        error: None,
    }
}

fn replica_of(e: &polymer_core::Error) -> Option<u64> {
    match e {
        polymer_core::Error::Replica { replica, .. } => Some(*replica),
        _ => None,
    }
}

/// Runs one experiment and writes its outputs.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut m = manifest(cfg, "running");
    m.write(&dir).map_err(io_err(&dir))?;
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build()?;
    let result = pool.install(|| match cfg.replay {
        Some(r) => replay(cfg, r),
        None => dispatch(cfg),
    });
    m.wall_time_s = start.elapsed().as_secs_f64();
    let mut output = match result {
        Ok(o) => o,
        Err(e) => {
            m.status = "error".into();
            m.error = Some(e.to_string());
            m.write(&dir).map_err(io_err(&dir))?;
            let replica = match &e {
                RunError::Core(c) => replica_of(c),
                _ => None,
            };
            let record = FailureRecord {
                experiment: cfg.experiment.to_string(),
                config_hash: cfg.hash(),
                kind: "error",
                failed_checks: Vec::new(),
                error: Some(e.to_string()),
                replica,
                replay: replica.map(|r| format!("polymer-lab {} --config <file> --replay {r}", cfg.experiment)),
            };
            write_json(&dir.join("failure.json"), &record)?;
            return Err(e);
        }
    };
    let hash = cfg.hash();
    for e in &mut output.estimates {
        e.config_hash.clone_from(&hash);
    }
    for t in &output.tables {
        t.write(&dir)?;
    }
    let log = dir.join("warnings.log");
    let text: String = output.warnings.iter().map(|w| format!("{w}\n")).collect();
    fs::write(&log, text).map_err(io_err(&log))?;
    m.files = output.tables.iter().map(|t| t.file.clone()).collect();
    m.estimates = output.estimates.iter().map(EstimateRecord::from).collect();
    m.checks = output.checks.clone();
    m.notes = output.notes.clone();
    m.warnings = output.warnings.clone();
    let passed = output.checks.iter().all(|c| c.passed);
    m.status = if passed { "ok" } else { "checks_failed" }.into();
    m.write(&dir).map_err(io_err(&dir))?;
    if cfg.assert && !passed {
        let record = FailureRecord {
            experiment: cfg.experiment.to_string(),
            config_hash: cfg.hash(),
            kind: "acceptance",
            failed_checks: output.checks.iter().filter(|c| !c.passed).collect(),
            error: None,
            replica: None,
            replay: None,
        };
        write_json(&dir.join("failure.json"), &record)?;
    }
    Ok(RunOutcome { dir, output })
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), RunError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| RunError::Io { path: path.to_path_buf(), source: e.into() })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn sim(cfg: &ExperimentConfig) -> SimConfig {
    SimConfig::new(cfg.spec, cfg.seed, cfg.replicas)
}

fn dispatch(cfg: &ExperimentConfig) -> Result<ExperimentOutput, RunError> {
    match cfg.experiment {
        Experiment::KernelCheck => kernel_experiment(cfg),
        Experiment::Sigma => pinned_experiment(cfg, false),
        Experiment::Clt => pinned_experiment(cfg, true),
        Experiment::SigmaStationary => stationary_experiment(cfg),
        Experiment::Mixing => mixing_experiment(cfg),
        Experiment::StationaryCheck => stationary_law_experiment(cfg),
        Experiment::Tails => tails_experiment(cfg),
        Experiment::RatioStationarity => ratio_experiment(cfg),
        Experiment::Moments => moments_experiment(cfg),
        Experiment::CfCompare => cf_experiment(cfg),
        Experiment::SweepL => sweep_experiment(cfg),
    }
}

fn z_check(name: &str, value: f64, se: f64, gate: f64) -> Check {
    let z = if se > 0.0 { value.abs() / se } else if value == 0.0 { 0.0 } else { f64::INFINITY };
    Check::below(&format!("{name} (|z|)"), z, gate)
}

fn kernel_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, RunError> {
    let th = &cfg.thresholds;
    let hash = cfg.hash();
    let seeds: Vec<u64> = (0..cfg.replicas as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let rows = kernel_check::<f64>(&cfg.spec, &seeds, &cfg.betas)?;
    let mut out = ExperimentOutput::default();
    let mut t = Table::new(
        "results.csv",
        &[
            "seed",
            "beta",
            "periodization_error",
            "heat_error",
            "min_entry",
            "tail_ratio",
            "tail_mass",
            "checksum_sum",
            "checksum_max",
            "checksum_log_norm",
        ],
    );
    for r in &rows {
        t.push(
            &hash,
            vec![
                r.seed.to_string(),
                num(r.beta),
                num(r.periodization_error),
                num(r.heat_error),
                num(r.min_entry),
                num(r.tail_ratio),
                num(r.tail_mass),
                num(r.checksum.0),
                num(r.checksum.1),
                num(r.checksum.2),
            ],
        );
        if r.tail_mass > th.get("truncation_mass") {
            out.warnings.push(format!(
                "seed {} beta {}: kernel mass share on |j| = J is {:.3e} (diagnostic bound {:.0e})",
                r.seed,
                r.beta,
                r.tail_mass,
                th.get("truncation_mass")
            ));
        }
    }
    out.tables.push(t);
    let worst = rows.iter().map(|r| r.periodization_error).fold(0.0, f64::max);
    out.checks.push(Check::below("periodization identity, max relative error", worst, th.get("periodization_rel")));
    out.checks.push(Check::above("minimum torus kernel entry", rows.iter().map(|r| r.min_entry).fold(f64::INFINITY, f64::min), 0.0));
    out.estimates.push(EstimateReport::new("max_periodization_error", worst, 0.0, &sim(cfg)));
    if cfg.betas.contains(&0.0) {
        let heat = rows.iter().filter(|r| r.beta == 0.0).map(|r| r.heat_error).fold(0.0, f64::max);
        out.checks.push(Check::below("beta=0 kernel vs heat reference, max relative error", heat, th.get("heat_reference_rel")));
        let quiet = cfg.spec.with_beta(0.0);
        let kernel = SolverPlan::<f64>::new(&quiet)?.winding_kernel(&SlabFactors::quiet(&quiet))?;
        let law = increment_law(&kernel, 0, 0)?;
        let mut lt = Table::new("winding_law.csv", &["j", "probability", "gaussian"]);
        let mut worst_law = 0.0f64;
        for j in -(quiet.winding as i64)..=quiet.winding as i64 {
            let g = heat_density(1.0, j as f64 * quiet.length());
            lt.push(&hash, vec![j.to_string(), num(law.prob(j)), num(g)]);
            if j.unsigned_abs() < quiet.winding as u64 {
                worst_law = worst_law.max((law.prob(j) - g).abs());
            }
        }
        out.tables.push(lt);
        out.checks.push(Check::below("beta=0 winding law from (0,0) vs Gaussian weights", worst_law, th.get("winding_law_abs")));
    }
    Ok(out)
}

fn trace_columns() -> [&'static str; 10] {
    [
        "replica",
        "Y",
        "w",
        "Y_over_sqrtN",
        "w_over_sqrtN",
        "exact_Y2",
        "exact_w2",
        "eta_mean",
        "max_boundary_mass",
        "log_partition",
    ]
}

fn trace_row(r: usize, t: &IncrementTrace) -> Vec<String> {
    let root = (t.steps() as f64).sqrt();
    let y = t.winding() as f64;
    vec![
        r.to_string(),
        t.winding().to_string(),
        num(t.endpoint()),
        num(y / root),
        num(t.endpoint() / root),
        num(t.winding_second_moment()),
        num(t.endpoint_second_moment()),
        num(t.laws.iter().map(WindingLaw::mean).sum::<f64>() / t.steps() as f64),
        num(t.max_boundary_mass()),
        num(t.log_partition),
    ]
}

fn truncation_warning(cfg: &ExperimentConfig, traces: &[&IncrementTrace], out: &mut ExperimentOutput) {
    let th = &cfg.thresholds;
    let bound = th.get("truncation_mass");
    let frac = traces.iter().filter(|t| t.max_boundary_mass() > bound).count() as f64 / traces.len() as f64;
    if frac > th.get("truncation_fraction") {
        out.warnings.push(format!(
            "winding truncation: {:.1}% of paths have an increment law with more than {:.0e} mass on |j| = J = {}",
            100.0 * frac,
            bound,
            cfg.spec.winding
        ));
    }
}

fn pinned_experiment(cfg: &ExperimentConfig, clt: bool) -> Result<ExperimentOutput, RunError> {
    let th = &cfg.thresholds;
    let gate = th.get("z_gate");
    let hash = cfg.hash();
    let engine = Engine::<f64>::new(sim(cfg))?;
    let all = engine.traces(cfg.n, &[BoundaryMode::Pinned])?;
    let traces: Vec<&IncrementTrace> = all.iter().map(|t| &t[0]).collect();
    let mut out = ExperimentOutput::default();
    let mut table = Table::new("results.csv", &trace_columns());
    for (r, t) in traces.iter().enumerate() {
        table.push(&hash, trace_row(r, t));
    }
    out.tables.push(table);
    let rep = sigma_from_traces(&traces, &sim(cfg));
    truncation_warning(cfg, &traces, &mut out);
    out.checks.push(Check::above(
        "sigma_N^2 nondegeneracy, value - (1 - z SE - margin)",
        rep.value - (1.0 - gate * rep.std_error - th.get("sigma_margin")),
        0.0,
    ));
    if cfg.spec.beta == 0.0 {
        out.checks.push(Check::below("beta=0 |sigma_N^2 - 1|", (rep.value - 1.0).abs(), th.get("sigma_quiet_abs")));
    }
    out.checks.push(z_check("mean increment", rep.extra("eta_mean"), rep.extra("eta_mean_se"), gate));
    let joint = rep.std_error.hypot(rep.extra("sigma2_sampled_se"));
    out.checks.push(z_check("sampled vs exact sigma_N^2", rep.extra("sigma2_sampled") - rep.value, joint, gate));
    if clt {
        let w: Vec<f64> = traces.iter().map(|t| t.endpoint()).collect();
        let y: Vec<f64> = traces.iter().map(|t| t.winding() as f64).collect();
        let (dw, pw) = clt_test(&w, rep.extra("sigma2_endpoint").sqrt(), cfg.n)?;
        let (dy, py) = clt_test(&y, rep.value.sqrt(), cfg.n)?;
        let limit = if cfg.spec.beta == 0.0 { th.get("ks_quiet") } else { th.get("ks_noise") };
        out.checks.push(Check::below("KS distance of w_N / (sigma sqrt N) to N(0,1)", dw, limit));
        out.estimates.push(EstimateReport::new("ks_endpoint", dw, 0.0, &sim(cfg)).with("p_value", pw));
        out.estimates.push(EstimateReport::new("ks_integer_part", dy, 0.0, &sim(cfg)).with("p_value", py));
        out.notes.push(
            "the KS gate uses the endpoint w_N; the integer part Y_N is reported as ks_integer_part and carries \
             a lattice bias of order 1/sqrt(N)"
                .into(),
        );
    }
    out.estimates.push(rep);
    Ok(out)
}

fn covariance_table(hash: &str, series: &polymer_core::estimators::CovarianceSeries) -> Table {
    let mut t = Table::new("covariance.csv", &["lag", "covariance", "std_error"]);
    for ((lag, v), se) in series.lags.iter().zip(&series.values).zip(&series.std_errors) {
        t.push(hash, vec![lag.to_string(), num(*v), num(*se)]);
    }
    t
}

fn lag_checks(cfg: &ExperimentConfig, series: &polymer_core::estimators::CovarianceSeries, out: &mut ExperimentOutput) {
    let gate = cfg.thresholds.get("z_gate");
    let floor = cfg.thresholds.get("covariance_lag_floor");
    for ((&lag, v), se) in series.lags.iter().zip(&series.values).zip(&series.std_errors) {
        if lag as f64 > floor {
            out.checks.push(z_check(&format!("covariance at lag {lag}"), *v, *se, gate));
        }
    }
}

fn stationary_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, RunError> {
    let gate = cfg.thresholds.get("z_gate");
    let hash = cfg.hash();
    let engine = Engine::<f64>::new(sim(cfg))?;
    let all = engine.traces(cfg.n, &[BoundaryMode::Stationary])?;
    let traces: Vec<&IncrementTrace> = all.iter().map(|t| &t[0]).collect();
    let (rep, series) = covariances_from_traces(&traces, cfg.n_max, &sim(cfg))?;
    let mut out = ExperimentOutput::default();
    let mut t = covariance_table(&hash, &series);
    t.file = "results.csv".into();
    out.tables.push(t);
    let seqs: Vec<Vec<StepMoments>> = traces.iter().map(|t| t.laws.iter().map(StepMoments::of_law).collect()).collect();
    let rho = rho_mixing_from_moments(&seqs, &cfg.lags)?;
    let mut rt = Table::new("rho.csv", &["lag", "single", "block", "sign", "r_hat", "std_error"]);
    for r in &rho {
        rt.push(&hash, vec![r.lag.to_string(), num(r.single), num(r.block), num(r.sign), num(r.r_hat), num(r.std_error)]);
    }
    out.tables.push(rt);
    out.notes.push(format!("rho-mixing proxy is a lower bound over the dictionary: {RHO_DICTIONARY}"));
    truncation_warning(cfg, &traces, &mut out);
    out.checks.push(Check::above("lag-0 covariance", series.values[0], 0.0));
    lag_checks(cfg, &series, &mut out);
    out.checks.push(z_check("mean increment", rep.extra("eta_mean"), rep.extra("eta_mean_se"), gate));
    if !rep.extra("tail_bound").is_finite() {
        out.warnings.push("covariance tail beyond n_max could not be bounded from a decaying fit".into());
    }
    out.estimates.push(rep);
    Ok(out)
}

fn mixing_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, RunError> {
    let th = &cfg.thresholds;
    let hash = cfg.hash();
    let engine = Engine::<f64>::new(sim(cfg))?;
    let times: Vec<usize> = (1..=cfg.t_max).collect();
    let nu = BoundaryCondition::Cell(0);
    let nu_prime = match cfg.pair {
        MixingPair::Half => BoundaryCondition::Cell(cfg.spec.cells() / 2),
        MixingPair::Lebesgue => BoundaryCondition::Lebesgue,
    };
    let fit = mixing_rate(&engine, &times, &nu, &nu_prime)?;
    let mut out = ExperimentOutput::default();
    let mut t = Table::new("results.csv", &["t", "log_mean_gap"]);
    for (time, g) in &fit.profile {
        t.push(&hash, vec![time.to_string(), num(*g)]);
    }
    out.tables.push(t);
    let rep = fit.report;
    let lower = rep.value - th.get("confidence_z") * rep.std_error;
    out.checks.push(Check::above("contraction rate lower confidence bound", lower, 0.0));
    out.checks.push(Check::above("contraction fit R^2", rep.extra("r_squared"), th.get("mixing_r2")));
    if cfg.spec.beta == 0.0 {
        let target = 2.0 * PI * PI;
        out.checks.push(Check::below("beta=0 rate vs 2 pi^2, relative error", (rep.value / target - 1.0).abs(), th.get("mixing_quiet_rel")));
    }
    out.estimates.push(rep);
    Ok(out)
}

fn stationary_law_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, RunError> {
    let gate = cfg.thresholds.get("z_gate");
    let hash = cfg.hash();
    let engine = Engine::<f64>::new(sim(cfg))?;
    let rows = stationary_check(&engine, cfg.horizon, cfg.push)?;
    let mut out = ExperimentOutput::default();
    let mut t = Table::new(
        "results.csv",
        &[
            "comparison",
            "reference_mean",
            "reference_se",
            "candidate_mean",
            "candidate_se",
            "reference_variance",
            "reference_variance_se",
            "candidate_variance",
            "candidate_variance_se",
            "mean_z",
            "variance_z",
        ],
    );
    for r in &rows {
        t.push(
            &hash,
            vec![
                r.name.clone(),
                num(r.reference.0),
                num(r.reference.1),
                num(r.candidate.0),
                num(r.candidate.1),
                num(r.reference_variance.0),
                num(r.reference_variance.1),
                num(r.candidate_variance.0),
                num(r.candidate_variance.1),
                num(r.mean_z()),
                num(r.variance_z()),
            ],
        );
        if r.name.starts_with("integral_sq:evolved") {
            out.checks.push(Check::below(&format!("{} mean (|z|)", r.name), r.mean_z(), gate));
            out.checks.push(Check::below(&format!("{} variance (|z|)", r.name), r.variance_z(), gate));
        } else if r.mean_z() > gate || r.variance_z() > gate {
            out.warnings.push(format!(
                "{}: bridge and evolved laws differ by {:.1} SE in mean and {:.1} SE in variance",
                r.name,
                r.mean_z(),
                r.variance_z()
            ));
        }
    }
    out.tables.push(t);
    Ok(out)
}

fn tails_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, RunError> {
    let hash = cfg.hash();
    let engine = Engine::<f64>::new(sim(cfg))?;
    let tp = tail_profile(&engine, 0)?;
    let mut out = ExperimentOutput::default();
    let mut t = Table::new("results.csv", &["j", "j_squared", "log_mean_z2", "log_se"]);
    for (j, l, se) in &tp.rows {
        t.push(&hash, vec![j.to_string(), (j * j).to_string(), num(*l), num(*se)]);
    }
    out.tables.push(t);
    let decreasing = tp.rows.windows(2).all(|w| w[1].1 < w[0].1);
    out.checks.push(Check::above("quadratic fit R^2", tp.quadratic.r_squared, cfg.thresholds.get("tail_r2")));
    out.checks.push(Check::above("log mean Z^2 decreasing in j (1 = yes)", decreasing as u8 as f64, 0.5));
    let q = &tp.quadratic;
    out.estimates.push(
        EstimateReport::new("tail_quadratic_coefficient", q.coefficients[2], q.std_errors[2], &sim(cfg))
            .with("intercept", q.coefficients[0])
            .with("linear", q.coefficients[1])
            .with("r_squared", q.r_squared),
    );
    let g = &tp.gaussian;
    out.estimates.push(
        EstimateReport::new("tail_gaussian_coefficient", g.coefficients[1], g.std_errors[1], &sim(cfg))
            .with("intercept", g.coefficients[0])
            .with("r_squared", g.r_squared),
    );
    Ok(out)
}

fn ratio_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, RunError> {
    let gate = cfg.thresholds.get("z_gate");
    let hash = cfg.hash();
    let engine = Engine::<f64>::new(sim(cfg))?;
    let table = ratio_stationarity(&engine, cfg.ratio_winding, &cfg.offsets)?;
    let mut out = ExperimentOutput::default();
    let mut t = Table::new("results.csv", &["offset", "mean", "mean_se", "variance", "variance_se"]);
    for (o, m, mse, v, vse) in &table.rows {
        t.push(&hash, vec![num(*o), num(*m), num(*mse), num(*v), num(*vse)]);
    }
    out.tables.push(t);
    out.checks.push(Check::below("ratio mean discrepancy across offsets (SE)", table.mean_discrepancy, gate));
    out.checks.push(Check::below("ratio variance discrepancy across offsets (SE)", table.variance_discrepancy, gate));
    Ok(out)
}

/// Quenched-variance horizons evaluated by `moments`.
pub const QUENCHED_HORIZONS: [usize; 3] = [1, 2, 4];

fn moments_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, RunError> {
    let th = &cfg.thresholds;
    let gate = th.get("z_gate");
    let hash = cfg.hash();
    let engine = Engine::<f64>::new(sim(cfg))?;
    let all = engine.traces(cfg.n, &[cfg.mode])?;
    let traces: Vec<&IncrementTrace> = all.iter().map(|t| &t[0]).collect();
    let mut ks = vec![1, cfg.n.div_ceil(2), cfg.n];
    ks.dedup();
    let reports = increment_moment_from_traces(&traces, cfg.p, &ks, &sim(cfg))?;
    let mut out = ExperimentOutput::default();
    let mut t = Table::new("results.csv", &["quantity", "index", "value", "std_error"]);
    for r in &reports {
        t.push(&hash, vec![format!("increment_moment_p{}", cfg.p), num(r.extra("k")), num(r.value), num(r.std_error)]);
    }
    for a in 0..reports.len() {
        for b in a + 1..reports.len() {
            let (ra, rb) = (&reports[a], &reports[b]);
            out.checks.push(z_check(
                &format!("increment moment k={} vs k={}", ra.extra("k"), rb.extra("k")),
                ra.value - rb.value,
                ra.std_error.hypot(rb.std_error),
                gate,
            ));
        }
    }
    let eta: Vec<f64> = traces.iter().map(|t| t.laws.iter().map(WindingLaw::mean).sum::<f64>() / t.steps() as f64).collect();
    let (em, ese) = mean_se(&eta);
    t.push(&hash, vec!["eta_mean".into(), num(cfg.n as f64), num(em), num(ese)]);
    out.checks.push(z_check(&format!("mean increment ({})", cfg.mode.name()), em, ese, gate));
    out.estimates.push(EstimateReport::new("eta_mean", em, ese, &sim(cfg)).with("N", cfg.n as f64));
    truncation_warning(cfg, &traces, &mut out);

    let horizons: Vec<usize> = QUENCHED_HORIZONS.iter().copied().filter(|&h| h <= cfg.n).collect();
    let rows = quenched_variance(&engine, &horizons)?;
    for q in &rows {
        let idx = num(q.steps as f64);
        t.push(&hash, vec!["quenched_mean".into(), idx.clone(), num(q.mean.0), num(q.mean.1)]);
        t.push(&hash, vec!["quenched_variance".into(), idx.clone(), num(q.variance.0), num(q.variance.1)]);
        t.push(&hash, vec!["winding_second_moment".into(), idx, num(q.winding_second_moment.0), num(q.winding_second_moment.1)]);
        let n = q.steps as f64;
        let slack = (gate * q.variance.1).max(th.get("quenched_rel") * n);
        out.checks.push(Check::below(&format!("|quenched variance - N| at N={}", q.steps), (q.variance.0 - n).abs(), slack));
        if q.max_lost_mass > LINE_LOSS_WARN {
            out.warnings.push(format!("line evolution to N={} lost up to {:.3e} of the mass", q.steps, q.max_lost_mass));
        }
        out.estimates.push(
            EstimateReport::new("quenched_variance", q.variance.0, q.variance.1, &sim(cfg))
                .with("N", n)
                .with("quenched_mean", q.mean.0)
                .with("quenched_mean_se", q.mean.1),
        );
    }
    out.tables.push(t);
    out.estimates.extend(reports);
    Ok(out)
}

fn cf_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, RunError> {
    let gate = cfg.thresholds.get("z_gate");
    let hash = cfg.hash();
    let engine = Engine::<f64>::new(sim(cfg))?;
    let all = engine.traces(cfg.n, &[BoundaryMode::Pinned, BoundaryMode::Stationary])?;
    let cmp = compare_routes(&all, cfg.n_max, &cfg.thetas, &sim(cfg))?;
    let mut out = ExperimentOutput::default();
    let mut t = Table::new(
        "results.csv",
        &[
            "theta",
            "pinned_re",
            "pinned_im",
            "stationary_re",
            "stationary_im",
            "diff_re",
            "diff_im",
            "se_re",
            "se_im",
            "joint_se",
        ],
    );
    for c in &cmp.cf {
        t.push(
            &hash,
            vec![
                num(c.theta),
                num(c.pinned.re),
                num(c.pinned.im),
                num(c.stationary.re),
                num(c.stationary.im),
                num(c.difference.re),
                num(c.difference.im),
                num(c.se.0),
                num(c.se.1),
                num(c.joint_se()),
            ],
        );
        out.checks.push(Check::below(
            &format!("|psi_N - psi~_N| / joint SE at theta={}", c.theta),
            c.difference.norm() / c.joint_se(),
            gate,
        ));
    }
    out.tables.push(t);
    out.tables.push(covariance_table(&hash, &cmp.series));
    let mut pt = Table::new("paired.csv", &trace_columns());
    for (r, pair) in all.iter().enumerate() {
        pt.push(&hash, trace_row(r, &pair[0]));
    }
    out.tables.push(pt);
    let (d, se) = cmp.sigma_difference;
    out.checks.push(z_check("sigma_N^2 - sigma~^2 (paired)", d, se, gate));
    lag_checks(cfg, &cmp.series, &mut out);
    let (de, dse) = cmp.endpoint_difference;
    out.estimates.push(
        EstimateReport::new("sigma_route_difference", d, se, &sim(cfg))
            .with("endpoint_difference", de)
            .with("endpoint_difference_se", dse),
    );
    let pinned: Vec<&IncrementTrace> = all.iter().map(|p| &p[0]).collect();
    truncation_warning(cfg, &pinned, &mut out);
    out.estimates.push(cmp.annealed);
    out.estimates.push(cmp.stationary);
    Ok(out)
}

fn sweep_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, RunError> {
    let hash = cfg.hash();
    let reports = sigma_sweep::<f64>(&sim(cfg), &cfg.periods, cfg.n)?;
    let mut out = ExperimentOutput::default();
    let mut t = Table::new("results.csv", &["L", "sigma2", "std_error", "sigma2_endpoint", "sigma2_endpoint_se"]);
    for r in &reports {
        t.push(
            &hash,
            vec![
                num(r.extra("L")),
                num(r.value),
                num(r.std_error),
                num(r.extra("sigma2_endpoint")),
                num(r.extra("sigma2_endpoint_se")),
            ],
        );
    }
    out.tables.push(t);
    out.notes.push("exploratory period sweep; the bridge variance is scaled with the period length".into());
    out.estimates.extend(reports);
    Ok(out)
}

/// Recomputes one replica of a path experiment and dumps its trace.
fn replay(cfg: &ExperimentConfig, replica: u64) -> Result<ExperimentOutput, RunError> {
    let modes = match cfg.experiment {
        Experiment::Sigma | Experiment::Clt | Experiment::SweepL => vec![BoundaryMode::Pinned],
        Experiment::SigmaStationary => vec![BoundaryMode::Stationary],
        Experiment::Moments => vec![cfg.mode],
        Experiment::CfCompare => vec![BoundaryMode::Pinned, BoundaryMode::Stationary],
        e => return Err(RunError::Unsupported(format!("replay is not available for {e}"))),
    };
    let engine = Engine::<f64>::new(sim(cfg))?;
    let traces = engine.replica_traces(replica, cfg.n, &modes)?;
    let hash = cfg.hash();
    let mut t = Table::new(
        &format!("replay-{replica}.csv"),
        &["mode", "k", "x_from", "x_to", "offset", "eta", "law_mean", "law_second_moment", "boundary_mass"],
    );
    for tr in &traces {
        for (k, law) in tr.laws.iter().enumerate() {
            t.push(
                &hash,
                vec![
                    tr.mode.name().into(),
                    (k + 1).to_string(),
                    tr.cells[k].to_string(),
                    tr.cells[k + 1].to_string(),
                    tr.offset.to_string(),
                    tr.eta[k].to_string(),
                    num(law.mean()),
                    num(law.second_moment()),
                    num(law.boundary_mass()),
                ],
            );
        }
    }
    let mut out = ExperimentOutput::default();
    out.tables.push(t);
    out.notes.push(format!("replay of replica {replica} only"));
    Ok(out)
}
