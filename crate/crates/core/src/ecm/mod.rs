//! Expectation/conditional-maximization fitter.
//!
//! One iteration runs the E-step at the current parameters and then four
//! conditional maximizations in the order Ψ → Φ → Λ_s → β, each using the
//! freshest values of the blocks already updated in that iteration. All four
//! maximize the same surrogate (the expected complete-data log-likelihood
//! with the factor posterior frozen at the E-step), so the observed-data
//! log-likelihood never decreases.

pub mod moments;
pub mod objective;
pub mod updates;

pub use moments::{e_step, e_step_from_stats, residualize, EStepMoments, StudyMoments, StudyStats};
pub use objective::{expected_complete_loglik, observed_loglik, PosteriorSurrogate};
pub use updates::{cm_beta, cm_beta_weighted, cm_lambda, cm_phi, cm_phi_stacked, cm_psi, BetaUpdate};

use crate::error::{MsfrError, Result};
use crate::linalg::DiagMatrix;
use crate::model::{explained_variance, validate, ExplainedVariance, ModelDims, MultiStudyData, Params};

/// Log-likelihood sequence fed to the stopping rule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum StoppingStatistic {
    /// Observed-data log-likelihood. Bounded, so it settles even when some
    /// ψ drifts toward the floor.
    #[default]
    Observed,
    /// Expected complete-data log-likelihood Q(θ|θ). It differs from the
    /// observed one by the posterior entropy of the factors, which keeps
    /// growing while a uniqueness collapses, so such fits can run to
    /// `max_iter`.
    Complete,
}

/// Stopping rule and update options.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceConfig {
    /// Tolerance on the Aitken-extrapolated remaining gain in the
    /// log-likelihood chosen by `statistic`.
    pub eps_star: f64,
    pub max_iter: usize,
    /// Without Aitken extrapolation the raw increment is compared to `eps_star`.
    pub use_aitken: bool,
    pub statistic: StoppingStatistic,
    pub beta_update: BetaUpdate,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig {
            eps_star: 1e-7,
            max_iter: 50_000,
            use_aitken: true,
            statistic: StoppingStatistic::default(),
            beta_update: BetaUpdate::default(),
        }
    }
}

impl ConvergenceConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.eps_star > 0.0) || self.max_iter < 1 {
            return Err(MsfrError::InvalidArgument(format!(
                "eps_star must be positive and max_iter at least 1 (got {}, {})",
                self.eps_star, self.max_iter
            )));
        }
        Ok(())
    }
}

/// Outcome of a fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub dims: ModelDims,
    /// Identified parameters (varimax-rotated, sign-fixed loadings).
    pub params: Params,
    /// Parameters as returned by the iterations, before identification.
    pub raw_params: Params,
    /// Observed-data log-likelihood at every visited parameter value.
    pub loglik_trace: Vec<f64>,
    /// Expected complete-data log-likelihood at every visited parameter value.
    pub complete_loglik_trace: Vec<f64>,
    /// Number of completed CM cycles.
    pub n_iter: usize,
    pub converged: bool,
    pub observed_loglik: f64,
    pub n_params: usize,
    pub aic: f64,
    pub bic: f64,
    pub explained_variance: ExplainedVariance,
}

/// Tracks the stopping statistic across iterations.
#[derive(Debug, Default)]
struct AitkenMonitor {
    history: Vec<f64>,
}

impl AitkenMonitor {
    /// Pushes `l(θ⁽ᵗ⁺¹⁾)` and returns the convergence statistic, if any.
    ///
    /// With `c = (l_{t+1} − l_t) / (l_t − l_{t−1})` the extrapolated limit is
    /// `l_∞ = l_t + (l_{t+1} − l_t) / (1 − c)` and the statistic is
    /// `|l_∞ − l_{t+1}|`, the gain still expected from further iterations.
    /// No statistic is returned while the extrapolation is undefined
    /// (zero denominator or `c ≥ 1`). Without Aitken the raw increment is used.
    fn push(&mut self, value: f64, use_aitken: bool) -> Option<f64> {
        self.history.push(value);
        let h = &self.history;
        let t = h.len();
        if t < 2 {
            return None;
        }
        let num = h[t - 1] - h[t - 2];
        if !use_aitken {
            return Some(num.abs());
        }
        if t < 3 {
            return None;
        }
        let den = h[t - 2] - h[t - 3];
        if den == 0.0 {
            return if num == 0.0 { Some(0.0) } else { None };
        }
        let c = num / den;
        if !(c < 1.0) || !c.is_finite() {
            return None;
        }
        let limit = h[t - 2] + num / (1.0 - c);
        Some((limit - h[t - 1]).abs())
    }
}

/// One E-step and the four CM updates from `params`, returning the new
/// parameters together with the E-step moments they were derived from.
pub fn ecm_cycle(stats: &[StudyStats], params: &Params, beta_update: BetaUpdate) -> Result<(Params, EStepMoments)> {
    let moments = e_step_from_stats(stats, params)?;
    let next = cm_updates(stats, &moments, params, beta_update)?;
    Ok((next, moments))
}

fn cm_updates(
    stats: &[StudyStats],
    moments: &EStepMoments,
    params: &Params,
    beta_update: BetaUpdate,
) -> Result<Params> {
    // CM1
    let psis: Vec<_> =
        moments.studies.iter().enumerate().map(|(s, m)| cm_psi(m, &params.phi, &params.lambdas[s])).collect();
    cm_updates_after_psi(stats, moments, params, psis, beta_update)
}

/// CM2 to CM4 given the CM1 result.
fn cm_updates_after_psi(
    stats: &[StudyStats],
    moments: &EStepMoments,
    params: &Params,
    psis: Vec<DiagMatrix>,
    beta_update: BetaUpdate,
) -> Result<Params> {
    let n_s: Vec<usize> = stats.iter().map(|s| s.n).collect();
    // CM2
    let phi = cm_phi(moments, &params.lambdas, &psis, &n_s)?;
    // CM3
    let lambdas = moments.studies.iter().map(|m| cm_lambda(m, &phi)).collect::<Result<Vec<_>>>()?;
    // CM4
    let beta = if params.beta.ncols() == 0 {
        params.beta.clone()
    } else {
        updates::cm_beta_from_stats(stats, moments, &params.beta, &phi, &lambdas, &psis, beta_update)?
    };
    Ok(Params { beta, phi, lambdas, psis })
}

/// Runs the ECM iterations from `init` until the stopping rule fires or
/// `config.max_iter` cycles have run, then identifies the loadings.
pub fn fit(data: &MultiStudyData, dims: &ModelDims, config: &ConvergenceConfig, init: Params) -> Result<FitResult> {
    validate(data, dims)?;
    config.check()?;
    init.check_shapes(dims)?;
    let stats = StudyStats::from_data(data);
    fit_stats(&stats, dims, config, init)
}

pub(crate) fn fit_stats(
    stats: &[StudyStats],
    dims: &ModelDims,
    config: &ConvergenceConfig,
    init: Params,
) -> Result<FitResult> {
    let n_s: Vec<usize> = stats.iter().map(|s| s.n).collect();
    let mut params = init;
    let mut monitor = AitkenMonitor::default();
    let mut loglik_trace = Vec::new();
    let mut complete_trace = Vec::new();
    let mut converged = false;
    let mut n_iter = 0;
    loop {
        let moments = e_step_from_stats(stats, &params)?;
        // the CM1 target diagonal also gives l_c at the current parameters
        let targets: Vec<_> = moments
            .studies
            .iter()
            .enumerate()
            .map(|(s, m)| updates::psi_target(m, &params.phi, &params.lambdas[s]))
            .collect();
        let lc: f64 =
            targets.iter().enumerate().map(|(s, d)| objective::study_term(n_s[s], &params.psis[s], d.as_slice())).sum();
        let ll: f64 = moments.studies.iter().zip(&n_s).map(|(m, &n)| m.observed_loglik(n)).sum();
        loglik_trace.push(ll);
        complete_trace.push(lc);
        let tracked = match config.statistic {
            StoppingStatistic::Observed => ll,
            StoppingStatistic::Complete => lc,
        };
        if let Some(stat) = monitor.push(tracked, config.use_aitken) {
            if stat < config.eps_star {
                converged = true;
                break;
            }
        }
        if n_iter >= config.max_iter {
            break;
        }
        let psis = targets.into_iter().map(updates::floor_psi).collect();
        params = cm_updates_after_psi(stats, &moments, &params, psis, config.beta_update)?;
        n_iter += 1;
    }
    let observed = *loglik_trace.last().expect("at least one evaluation");
    let n_params = crate::select::n_free_params(dims);
    let n_total: usize = n_s.iter().sum();
    let identified = crate::scores::identify(&params);
    Ok(FitResult {
        dims: dims.clone(),
        explained_variance: explained_variance(&identified, &n_s),
        params: identified,
        raw_params: params,
        loglik_trace,
        complete_loglik_trace: complete_trace,
        n_iter,
        converged,
        observed_loglik: observed,
        n_params,
        aic: -2.0 * observed + 2.0 * n_params as f64,
        bic: -2.0 * observed + n_params as f64 * (n_total as f64).ln(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aitken_geometric_sequence() {
        let mut m = AitkenMonitor::default();
        assert_eq!(m.push(-10.0, true), None);
        assert_eq!(m.push(-9.0, true), None);
        // ratio 0.5: limit -8 is exact, remaining gain 0.5
        let s = m.push(-8.5, true).unwrap();
        assert!((s - 0.5).abs() < 1e-12, "{s}");
        let s = m.push(-8.25, true).unwrap();
        assert!((s - 0.25).abs() < 1e-12, "{s}");
    }

    #[test]
    fn aitken_undefined_extrapolation_continues() {
        let mut m = AitkenMonitor::default();
        m.push(1.0, true);
        m.push(2.0, true);
        // c = 2: no statistic
        assert_eq!(m.push(4.0, true), None);
        let mut flat = AitkenMonitor::default();
        for _ in 0..2 {
            flat.push(3.0, true);
        }
        assert_eq!(flat.push(3.0, true), Some(0.0));
    }

    #[test]
    fn raw_increment_without_aitken() {
        let mut m = AitkenMonitor::default();
        m.push(1.0, false);
        assert_eq!(m.push(0.25, false), Some(0.75));
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut c = ConvergenceConfig::default();
        assert!(c.check().is_ok());
        c.eps_star = 0.0;
        assert!(c.check().is_err());
    }
}
