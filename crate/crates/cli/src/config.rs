//! Experiment configuration.
//!
//! Grammar of a config file: one `key = value` per line, blank lines and
//! anything after `#` ignored, keys are the long flag names (`N`, `M`, `beta`,
//! ...). List values are comma separated. Command-line flags are applied after
//! the file, so they win.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use polymer_core::estimators::{short_hash, BoundaryMode};
use polymer_core::GridSpec;
use thiserror::Error;

use crate::thresholds::Thresholds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Experiment {
    KernelCheck,
    Sigma,
    SigmaStationary,
    Mixing,
    Clt,
    StationaryCheck,
    Tails,
    RatioStationarity,
    Moments,
    CfCompare,
    SweepL,
}

impl Experiment {
    pub const ALL: [Experiment; 11] = [
        Experiment::KernelCheck,
        Experiment::Sigma,
        Experiment::SigmaStationary,
        Experiment::Mixing,
        Experiment::Clt,
        Experiment::StationaryCheck,
        Experiment::Tails,
        Experiment::RatioStationarity,
        Experiment::Moments,
        Experiment::CfCompare,
        Experiment::SweepL,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Experiment::KernelCheck => "kernel-check",
            Experiment::Sigma => "sigma",
            Experiment::SigmaStationary => "sigma-stationary",
            Experiment::Mixing => "mixing",
            Experiment::Clt => "clt",
            Experiment::StationaryCheck => "stationary-check",
            Experiment::Tails => "tails",
            Experiment::RatioStationarity => "ratio-stationarity",
            Experiment::Moments => "moments",
            Experiment::CfCompare => "cf-compare",
            Experiment::SweepL => "sweep-L",
        }
    }

    pub fn valid_names() -> String {
        Experiment::ALL.iter().map(|e| e.name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Experiment::ALL
            .iter()
            .copied()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown experiment `{s}`; valid values: {}", Experiment::valid_names()))
    }
}

/// Where a setting came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    File { path: PathBuf, line: usize },
    Flag,
    Default,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::File { path, line } => write!(f, "{}:{line}", path.display()),
            Origin::Flag => f.write_str("command line"),
            Origin::Default => f.write_str("defaults"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{origin}: unknown key `{key}`")]
    UnknownKey { key: String, origin: Origin },

    #[error("{origin}: invalid value `{value}` for `{key}`: {reason}")]
    Invalid { key: String, value: String, reason: String, origin: Origin },

    #[error("{origin}: expected `key = value`, found `{text}`")]
    Syntax { text: String, origin: Origin },

    #[error("no experiment given; valid values: {valid}")]
    MissingExperiment { valid: String },

    #[error("inconsistent settings for `{key}`: {reason}")]
    Inconsistent { key: String, reason: String },

    #[error("cannot read config file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Every numeric knob of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub spec: GridSpec,
    /// Polymer length `N` in time units.
    pub n: usize,
    pub replicas: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads, 0 for one per core.
    pub threads: usize,
    pub assert: bool,
    /// Lag cutoff of the covariance series.
    pub n_max: usize,
    pub lags: Vec<usize>,
    pub thetas: Vec<f64>,
    /// Moment order of `moments`.
    pub p: f64,
    pub periods: Vec<usize>,
    pub betas: Vec<f64>,
    pub offsets: Vec<f64>,
    /// Winding index of `ratio-stationarity`.
    pub ratio_winding: i64,
    /// Largest time of the mixing fit.
    pub t_max: usize,
    /// Evolution time of `stationary-check`.
    pub horizon: usize,
    /// Push-through time of `stationary-check`.
    pub push: usize,
    pub mode: BoundaryMode,
    /// Second initial condition of `mixing`: `half` (cell M·L/2) or `lebesgue`.
    pub pair: MixingPair,
    /// Only recompute this replica and dump its trace.
    pub replay: Option<u64>,
    pub thresholds: Thresholds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixingPair {
    Half,
    Lebesgue,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: Experiment::Sigma,
            spec: GridSpec::default(),
            n: 64,
            replicas: 200,
            seed: 1,
            out: PathBuf::from("runs"),
            threads: 0,
            assert: false,
            n_max: 12,
            lags: vec![1, 2, 3, 5, 8],
            thetas: vec![0.5, 1.0, 2.0],
            p: 2.0,
            periods: vec![1, 2, 4],
            betas: vec![0.0, 0.5, 1.0],
            offsets: vec![0.0, 0.25, 0.5],
            ratio_winding: 0,
            t_max: 8,
            horizon: 20,
            push: 5,
            mode: BoundaryMode::Pinned,
            pair: MixingPair::Half,
            replay: None,
            thresholds: Thresholds::default(),
        }
    }
}

fn invalid(key: &str, value: &str, reason: impl Into<String>, origin: &Origin) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), value: value.to_string(), reason: reason.into(), origin: origin.clone() }
}

fn parse<T: FromStr>(key: &str, value: &str, origin: &Origin) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| invalid(key, value, e.to_string(), origin))
}

fn parse_list<T: FromStr>(key: &str, value: &str, origin: &Origin) -> Result<Vec<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s, origin))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(invalid(key, value, "empty list", origin));
    }
    Ok(items)
}

fn at_least<T: PartialOrd + fmt::Display + Copy>(key: &str, value: &str, v: T, min: T, origin: &Origin) -> Result<T, ConfigError> {
    if v < min {
        return Err(invalid(key, value, format!("must be >= {min}"), origin));
    }
    Ok(v)
}

/// Accumulates settings from a file and from flags, validating each one.
#[derive(Debug, Clone, Default)]
pub struct ConfigBuilder {
    config: ExperimentConfig,
    experiment: Option<Experiment>,
}

impl ConfigBuilder {
    pub fn new() -> Self {
        ConfigBuilder::default()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str, origin: &Origin) -> Result<&mut Self, ConfigError> {
        let c = &mut self.config;
        let v = value.trim();
        match key {
            "experiment" => self.experiment = Some(v.parse().map_err(|e: String| invalid(key, v, e, origin))?),
            "seed" => c.seed = parse(key, v, origin)?,
            "replicas" => c.replicas = at_least(key, v, parse(key, v, origin)?, 2, origin)?,
            "beta" => {
                let b: f64 = parse(key, v, origin)?;
                if !(b.is_finite() && b >= 0.0) {
                    return Err(invalid(key, v, "must be finite and >= 0", origin));
                }
                c.spec.beta = b;
            }
            "N" => c.n = at_least(key, v, parse(key, v, origin)?, 1, origin)?,
            "M" => c.spec.cells_per_unit = at_least(key, v, parse(key, v, origin)?, 8, origin)?,
            "L" => c.spec.period = at_least(key, v, parse(key, v, origin)?, 1, origin)?,
            "J" => c.spec.winding = at_least(key, v, parse(key, v, origin)?, 2, origin)?,
            "steps" => c.spec.steps_per_unit = at_least(key, v, parse(key, v, origin)?, 100, origin)?,
            "threads" => c.threads = parse(key, v, origin)?,
            "out" => c.out = PathBuf::from(v),
            "assert" => c.assert = parse(key, v, origin)?,
            "n_max" => c.n_max = at_least(key, v, parse(key, v, origin)?, 1, origin)?,
            "lags" => {
                c.lags = parse_list(key, v, origin)?;
                if c.lags.contains(&0) {
                    return Err(invalid(key, v, "lags must be >= 1", origin));
                }
            }
            "theta" => c.thetas = parse_list(key, v, origin)?,
            "p" => {
                let p: f64 = parse(key, v, origin)?;
                if !(p >= 1.0 && p.is_finite()) {
                    return Err(invalid(key, v, "must be >= 1", origin));
                }
                c.p = p;
            }
            "periods" => {
                c.periods = parse_list(key, v, origin)?;
                if c.periods.contains(&0) {
                    return Err(invalid(key, v, "periods must be >= 1", origin));
                }
            }
            "betas" => {
                c.betas = parse_list(key, v, origin)?;
                if c.betas.iter().any(|b: &f64| !(b.is_finite() && *b >= 0.0)) {
                    return Err(invalid(key, v, "every beta must be finite and >= 0", origin));
                }
            }
            "offsets" => c.offsets = parse_list(key, v, origin)?,
            "ratio_winding" => c.ratio_winding = parse(key, v, origin)?,
            "t_max" => c.t_max = at_least(key, v, parse(key, v, origin)?, 3, origin)?,
            "horizon" => c.horizon = at_least(key, v, parse(key, v, origin)?, 1, origin)?,
            "push" => c.push = parse(key, v, origin)?,
            "mode" => {
                c.mode = match v {
                    "pinned" => BoundaryMode::Pinned,
                    "stationary" => BoundaryMode::Stationary,
                    _ => return Err(invalid(key, v, "expected `pinned` or `stationary`", origin)),
                }
            }
            "pair" => {
                c.pair = match v {
                    "half" => MixingPair::Half,
                    "lebesgue" => MixingPair::Lebesgue,
                    _ => return Err(invalid(key, v, "expected `half` or `lebesgue`", origin)),
                }
            }
            "replay" => c.replay = Some(parse(key, v, origin)?),
            _ => match key.strip_prefix("threshold.") {
                Some(name) => {
                    let x: f64 = parse(key, v, origin)?;
                    c.thresholds.set(name, x).map_err(|reason| match reason {
                        None => ConfigError::UnknownKey { key: key.to_string(), origin: origin.clone() },
                        Some(r) => invalid(key, v, r, origin),
                    })?;
                }
                None => return Err(ConfigError::UnknownKey { key: key.to_string(), origin: origin.clone() }),
            },
        }
        Ok(self)
    }

    /// Applies every line of a config file.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<&mut Self, ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let origin = Origin::File { path: path.to_path_buf(), line: i + 1 };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { text: raw.trim().to_string(), origin: origin.clone() })?;
            self.set(key.trim(), value, &origin)?;
        }
        Ok(self)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<&mut Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        self.apply_text(&text, path)
    }

    pub fn build(&self) -> Result<ExperimentConfig, ConfigError> {
        let experiment = self.experiment.ok_or_else(|| ConfigError::MissingExperiment { valid: Experiment::valid_names() })?;
        let c = ExperimentConfig { experiment, ..self.config.clone() };
        let bad = |key: &str, reason: String| Err(ConfigError::Inconsistent { key: key.to_string(), reason });
        match experiment {
            Experiment::SigmaStationary | Experiment::CfCompare if 2 * c.n_max >= c.n => {
                return bad("n_max", format!("lag cutoff {} must be < N/2 = {}", c.n_max, c.n as f64 / 2.0));
            }
            Experiment::SigmaStationary => {
                if let Some(&max) = c.lags.iter().max() {
                    if 4 * max >= c.n {
                        return bad("lags", format!("largest lag {max} must be < N/4 = {}", c.n as f64 / 4.0));
                    }
                }
            }
            Experiment::Sigma | Experiment::Clt | Experiment::SweepL if c.n < 4 => {
                return bad("N", format!("{experiment} needs N >= 4, got {}", c.n));
            }
            Experiment::Clt if c.replicas < 500 => {
                return bad("replicas", format!("the KS test needs >= 500 replicas, got {}", c.replicas));
            }
            Experiment::RatioStationarity => {
                if c.ratio_winding.unsigned_abs() as usize > c.spec.winding {
                    return bad("ratio_winding", format!("{} outside [-J, J]", c.ratio_winding));
                }
                if let Some(o) = c.offsets.iter().find(|&&o| !(o >= 0.0 && o < c.spec.length())) {
                    return bad("offsets", format!("offset {o} outside [0, L)"));
                }
            }
            _ => {}
        }
        if let Some(r) = c.replay {
            if r >= c.replicas as u64 {
                return bad("replay", format!("replica {r} not below replicas = {}", c.replicas));
            }
        }
        c.spec.validate().map_err(|e| ConfigError::Inconsistent { key: "spec".into(), reason: e.to_string() })?;
        Ok(c)
    }
}

impl ExperimentConfig {
    /// Canonical text of every setting that influences the results.
    ///
    /// Thread count, output location, assertion mode and thresholds are left
    /// out, so they never change the hash.
    pub fn canonical(&self) -> String {
        let list = |xs: &[String]| xs.join(",");
        let f = |xs: &[f64]| list(&xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>());
        let u = |xs: &[usize]| list(&xs.iter().map(|x| x.to_string()).collect::<Vec<_>>());
        let mut parts = vec![
            format!("experiment={}", self.experiment),
            self.spec.canonical(),
            format!("N={}", self.n),
            format!("replicas={}", self.replicas),
            format!("seed={}", self.seed),
        ];
        match self.experiment {
            Experiment::KernelCheck => parts.push(format!("betas={}", f(&self.betas))),
            Experiment::SigmaStationary => parts.push(format!("n_max={};lags={}", self.n_max, u(&self.lags))),
            Experiment::CfCompare => parts.push(format!("n_max={};theta={}", self.n_max, f(&self.thetas))),
            Experiment::Mixing => parts.push(format!("t_max={};pair={:?}", self.t_max, self.pair)),
            Experiment::StationaryCheck => parts.push(format!("horizon={};push={}", self.horizon, self.push)),
            Experiment::RatioStationarity => {
                parts.push(format!("ratio_winding={};offsets={}", self.ratio_winding, f(&self.offsets)))
            }
            Experiment::Moments => parts.push(format!("p={:?};mode={}", self.p, self.mode.name())),
            Experiment::SweepL => parts.push(format!("periods={}", u(&self.periods))),
            Experiment::Sigma | Experiment::Clt | Experiment::Tails => {}
        }
        parts.join(";")
    }

    pub fn hash(&self) -> String {
        short_hash(&self.canonical())
    }

    /// Output directory `<out>/<experiment>-<hash>`, with a `-replay-<r>`
    /// suffix for single-replica replays.
    pub fn run_dir(&self) -> PathBuf {
        match self.replay {
            None => self.out.join(format!("{}-{}", self.experiment, self.hash())),
            Some(r) => self.out.join(format!("{}-{}-replay-{r}", self.experiment, self.hash())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(text: &str) -> Result<ExperimentConfig, ConfigError> {
        ConfigBuilder::new().apply_text(text, Path::new("run.cfg"))?.build()
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = file("# header\nexperiment = tails\n\nbeta = 0.5  # inline\nM=32\n").unwrap();
        assert_eq!(c.experiment, Experiment::Tails);
        assert_eq!(c.spec.beta, 0.5);
        assert_eq!(c.spec.cells_per_unit, 32);
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let err = file("experiment = tails\ngamma = 1\n").unwrap_err().to_string();
        assert!(err.contains("gamma") && err.contains("run.cfg:2"), "{err}");
    }

    #[test]
    fn type_mismatch_names_key() {
        let err = file("experiment = tails\nM = many\n").unwrap_err().to_string();
        assert!(err.contains("`M`") && err.contains("run.cfg:2"), "{err}");
    }

    #[test]
    fn hash_ignores_threads_and_output() {
        let a = file("experiment = sigma\nthreads = 1\nout = a\n").unwrap();
        let b = file("experiment = sigma\nthreads = 4\nout = b\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), file("experiment = sigma\nseed = 2\n").unwrap().hash());
    }
}
