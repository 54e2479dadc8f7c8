use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every scalar the solver needs. Defaults follow the published settings
/// (`λ = 250`, `μ_n = λ`, `ν = 0.08λ`, `σ_I = σ_w = 25/255`, `N = 2`, pyramid
/// scale 0.9); schedule constants are this implementation's choices.
///
/// Images are held in `[0, 1]`, while λ, μ and ν weigh an objective measured
/// on intensities multiplied by `intensity_scale`. Dividing that objective by
/// the scale gives the weights actually applied: data `λ·s`, temporal `μ`,
/// latent TV 1 and edge map `ν/s`. The bandwidths σ_I and σ_w are given on
/// `[0, 1]` intensities and are unaffected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverParams {
    /// Data-term weight λ.
    pub lambda: f64,
    /// Temporal weights μ_n for n = 1..=N (the same weight is used for ±n).
    pub mu: Vec<f64>,
    /// Edge-map scale ν.
    pub nu: f64,
    /// Edge-map bandwidth σ_I.
    pub sigma_i: f64,
    /// Temporal neighbourhood radius N.
    pub n_neighbors: usize,
    pub pyr_scale: f64,
    /// `None` picks the level count from the frame size.
    pub pyr_levels: Option<usize>,
    /// Latent dual / primal steps; `None` derives them from an operator norm bound.
    pub eta_l: Option<f64>,
    pub eps_l: Option<f64>,
    /// Flow dual / primal steps; `None` uses `1/(√8 · max g)`.
    pub eta_u: Option<f64>,
    pub eps_u: Option<f64>,
    /// Alternations of (latent, flow) per pyramid level.
    pub outer_iters: usize,
    /// Primal-dual iterations in the latent subproblem.
    pub pd_iters: usize,
    /// Primal-dual iterations per flow relinearization.
    pub flow_pd_iters: usize,
    /// Relinearizations (warps) per flow subproblem.
    pub flow_warps: usize,
    pub cg_iters: usize,
    pub cg_tol: f64,
    /// Samples per flow direction in the blur integral; `None` = auto per level.
    pub blur_samples: Option<usize>,
    /// Similarity bandwidth σ_w of the spatio-temporal filter.
    pub sigma_w: f64,
    pub temporal_enabled: bool,
    /// Duty cycle; `None` estimates it from the input.
    pub duty: Option<f64>,
    /// Run the occlusion-aware filter only at the finest level.
    pub filter_finest_only: bool,
    /// Disable the spatio-temporal filter entirely.
    pub filter_enabled: bool,
    /// Intensity range on which λ, μ and ν are defined (255: 8-bit).
    pub intensity_scale: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self::with_lambda(250.0)
    }
}

impl SolverParams {
    /// Published defaults rescaled to a data weight `lambda`.
    pub fn with_lambda(lambda: f64) -> Self {
        SolverParams {
            lambda,
            mu: vec![lambda, lambda],
            nu: 0.08 * lambda,
            sigma_i: 25.0 / 255.0,
            n_neighbors: 2,
            pyr_scale: 0.9,
            pyr_levels: None,
            eta_l: None,
            eps_l: None,
            eta_u: None,
            eps_u: None,
            outer_iters: 3,
            pd_iters: 30,
            flow_pd_iters: 30,
            flow_warps: 5,
            cg_iters: 30,
            cg_tol: 1e-4,
            blur_samples: None,
            sigma_w: 25.0 / 255.0,
            temporal_enabled: true,
            duty: None,
            filter_finest_only: false,
            filter_enabled: true,
            intensity_scale: 255.0,
        }
    }

    /// Weight applied to the data term of `[0, 1]` images.
    pub fn data_weight(&self) -> f64 {
        self.lambda * self.intensity_scale
    }

    /// Edge-map scale applied to the flow TV of `[0, 1]` images.
    pub fn edge_weight(&self) -> f64 {
        self.nu / self.intensity_scale
    }

    /// μ_n for a signed offset; zero for n = 0 or |n| > N.
    pub fn mu_for(&self, n: isize) -> f64 {
        let k = n.unsigned_abs();
        if k == 0 || k > self.n_neighbors {
            return 0.0;
        }
        self.mu
            .get(k - 1)
            .or_else(|| self.mu.last())
            .copied()
            .unwrap_or(0.0)
    }

    /// Signed temporal offsets that carry a non-zero weight.
    pub fn offsets(&self) -> Vec<isize> {
        if !self.temporal_enabled {
            return Vec::new();
        }
        let n = self.n_neighbors as isize;
        (-n..=n)
            .filter(|&k| k != 0 && self.mu_for(k) > 0.0)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        fn bad(name: &'static str, reason: impl Into<String>) -> Error {
            Error::InvalidParam {
                name,
                reason: reason.into(),
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(bad("lambda", "must be finite and non-negative"));
        }
        if self.mu.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
            return Err(bad("mu", "weights must be finite and non-negative"));
        }
        if !(self.nu >= 0.0 && self.nu.is_finite()) {
            return Err(bad("nu", "must be finite and non-negative"));
        }
        if !(self.intensity_scale > 0.0 && self.intensity_scale.is_finite()) {
            return Err(bad("intensity_scale", "must be finite and positive"));
        }
        if !(self.sigma_i > 0.0) {
            return Err(bad("sigma_i", "must be positive"));
        }
        if !(self.sigma_w > 0.0) {
            return Err(bad("sigma_w", "must be positive"));
        }
        if self.n_neighbors < 1 {
            return Err(bad("n_neighbors", "must be at least 1"));
        }
        if !(self.pyr_scale > 0.0 && self.pyr_scale < 1.0) {
            return Err(bad("pyr_scale", "must lie in (0, 1)"));
        }
        if self.pyr_levels == Some(0) {
            return Err(bad("pyr_levels", "must be at least 1"));
        }
        if self.blur_samples == Some(0) {
            return Err(bad("blur_samples", "must be at least 1"));
        }
        if !(self.cg_tol > 0.0) {
            return Err(bad("cg_tol", "must be positive"));
        }
        if let Some(t) = self.duty {
            if !(t > 0.0 && t <= 1.0) {
                return Err(bad("duty", "must lie in (0, 1]"));
            }
        }
        for (name, v) in [
            ("eta_l", self.eta_l),
            ("eps_l", self.eps_l),
            ("eta_u", self.eta_u),
            ("eps_u", self.eps_u),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(bad(name, "must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let p = SolverParams::default();
        assert_eq!(p.lambda, 250.0);
        assert_eq!(p.mu_for(1), 250.0);
        assert_eq!(p.mu_for(-2), 250.0);
        assert_eq!(p.mu_for(0), 0.0);
        assert_eq!(p.mu_for(3), 0.0);
        assert!((p.nu - 20.0).abs() < 1e-12);
        assert!((p.sigma_i - 25.0 / 255.0).abs() < 1e-15);
        assert_eq!(p.pyr_scale, 0.9);
        assert_eq!(p.offsets(), vec![-2, -1, 1, 2]);
        p.validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut p = SolverParams::default();
        p.pyr_scale = 1.0;
        assert!(p.validate().is_err());
        let mut p = SolverParams::default();
        p.n_neighbors = 0;
        assert!(p.validate().is_err());
        let mut p = SolverParams::default();
        p.duty = Some(1.5);
        assert!(p.validate().is_err());
        let mut p = SolverParams::default();
        p.blur_samples = Some(0);
        assert!(p.validate().is_err());
    }

    #[test]
    fn temporal_flag_clears_offsets() {
        let p = SolverParams {
            temporal_enabled: false,
            ..SolverParams::default()
        };
        assert!(p.offsets().is_empty());
    }
}
