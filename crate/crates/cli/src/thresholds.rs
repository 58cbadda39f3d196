//! Acceptance thresholds, versioned and overridable per run with
//! `threshold.<name> = value`.

use std::collections::BTreeMap;

/// Bumped whenever a default below changes.
pub const THRESHOLDS_VERSION: u32 = 1;

/// `(name, default, meaning)`.
pub const DEFAULTS: &[(&str, f64, &str)] = &[
    ("periodization_rel", 1e-10, "reduced winding kernel vs direct torus solve, max relative entry difference"),
    ("heat_reference_rel", 1e-6, "beta=0 torus kernel vs periodized heat kernel, max relative difference"),
    ("winding_law_abs", 1e-4, "beta=0 increment law from (0,0) vs Gaussian weights"),
    ("z_gate", 3.0, "standard errors allowed for statistical agreement"),
    ("quenched_rel", 0.05, "relative slack of the quenched variance identity"),
    ("ks_noise", 0.05, "KS distance of the standardized endpoint, beta > 0"),
    ("ks_quiet", 0.04, "KS distance of the standardized endpoint, beta = 0"),
    ("sigma_margin", 0.05, "discretization margin below 1 allowed for sigma^2"),
    ("sigma_quiet_abs", 0.05, "|sigma^2 - 1| at beta = 0"),
    ("covariance_lag_floor", 5.0, "covariance lags above this must vanish within z_gate SE"),
    ("mixing_r2", 0.9, "R^2 of the log-linear contraction fit"),
    ("mixing_quiet_rel", 0.1, "relative error of the beta=0 rate against 2 pi^2"),
    ("confidence_z", 1.96, "normal quantile of the one-sided rate confidence bound"),
    ("tail_r2", 0.99, "R^2 of the quadratic fit of log mean Z^2"),
    ("truncation_fraction", 1e-3, "diagnostic: share of paths with boundary winding mass above truncation_mass"),
    ("truncation_mass", 1e-6, "diagnostic: winding mass allowed on |j| = J"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Thresholds {
    values: BTreeMap<&'static str, f64>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { values: DEFAULTS.iter().map(|&(k, v, _)| (k, v)).collect() }
    }
}

impl Thresholds {
    pub fn get(&self, name: &str) -> f64 {
        *self.values.get(name).unwrap_or_else(|| panic!("no threshold named {name}"))
    }

    /// `Err(None)` for an unknown name, `Err(Some(reason))` for a bad value.
    pub fn set(&mut self, name: &str, value: f64) -> Result<(), Option<String>> {
        let key = DEFAULTS.iter().find(|d| d.0 == name).ok_or(None)?.0;
        if !(value.is_finite() && value >= 0.0) {
            return Err(Some("thresholds must be finite and >= 0".into()));
        }
        self.values.insert(key, value);
        Ok(())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&'static str, f64)> + '_ {
        self.values.iter().map(|(k, v)| (*k, *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_and_reject() {
        let mut t = Thresholds::default();
        assert_eq!(t.get("z_gate"), 3.0);
        t.set("z_gate", 4.0).unwrap();
        assert_eq!(t.get("z_gate"), 4.0);
        assert_eq!(t.set("nope", 1.0), Err(None));
        assert!(matches!(t.set("z_gate", -1.0), Err(Some(_))));
    }
}
