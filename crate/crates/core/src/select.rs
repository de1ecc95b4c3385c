//! Latent-dimension selection by AIC or BIC over a grid of `(q, q_s)`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::ecm::{fit_stats, ConvergenceConfig, FitResult, StudyStats};
use crate::error::{MsfrError, Result};
use crate::init::initialize_from_stats;
use crate::model::{validate, ModelDims, MultiStudyData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Criterion {
    Aic,
    Bic,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Aic => "AIC",
            Criterion::Bic => "BIC",
        })
    }
}

impl FromStr for Criterion {
    type Err = MsfrError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aic" => Ok(Criterion::Aic),
            "bic" => Ok(Criterion::Bic),
            other => Err(MsfrError::InvalidArgument(format!("unknown criterion {other:?}"))),
        }
    }
}

/// Candidate dimensions; every `qs_values` entry is applied to all studies.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub q_values: Vec<usize>,
    pub qs_values: Vec<usize>,
    pub criterion: Criterion,
}

impl GridSpec {
    /// Grid points in `(q, q_s)` lexicographic order.
    pub fn points(&self) -> Vec<(usize, usize)> {
        self.q_values.iter().flat_map(|&q| self.qs_values.iter().map(move |&qs| (q, qs))).collect()
    }

    pub fn check(&self, p: usize, n_studies: usize) -> Result<()> {
        if self.q_values.is_empty() || self.qs_values.is_empty() {
            return Err(MsfrError::InvalidArgument("grid lists must be non-empty".into()));
        }
        for (q, qs) in self.points() {
            let total = q + n_studies * qs;
            if total > p || q + qs >= p {
                return Err(MsfrError::RankConstraintViolated {
                    total,
                    p,
                    detail: format!(" (grid point q = {q}, q_s = {qs})"),
                });
            }
        }
        Ok(())
    }
}

/// Free-parameter count `p·p_b + p·q + Σ_s p·q_s + S·p`, without
/// rotational corrections.
pub fn n_free_params(dims: &ModelDims) -> usize {
    let p = dims.p;
    p * dims.p_b + p * dims.q + dims.q_s.iter().map(|qs| p * qs).sum::<usize>() + dims.n_studies() * p
}

#[derive(Debug, Clone)]
pub struct SelectionRow {
    pub q: usize,
    pub q_s: usize,
    pub aic: f64,
    pub bic: f64,
    pub observed_loglik: f64,
    pub n_params: usize,
    pub converged: bool,
    pub n_iter: usize,
    /// Set when the fit aborted.
    pub error: Option<String>,
}

impl SelectionRow {
    pub fn value(&self, criterion: Criterion) -> f64 {
        match criterion {
            Criterion::Aic => self.aic,
            Criterion::Bic => self.bic,
        }
    }
}

/// One row per grid point plus the chosen point under `criterion`.
#[derive(Debug, Clone)]
pub struct SelectionReport {
    pub criterion: Criterion,
    pub rows: Vec<SelectionRow>,
    pub chosen: (usize, usize),
    /// Fitted models, aligned with `rows`; `None` where the fit aborted.
    pub fits: Vec<Option<FitResult>>,
    pub n_studies: usize,
}

impl SelectionReport {
    /// Index of the row minimizing `criterion` among converged fits. Exact ties
    /// go to the smaller total dimension `q + S·q_s`, then the smaller `q`.
    pub fn argmin(&self, criterion: Criterion) -> Option<usize> {
        let s = self.n_studies;
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.converged && r.value(criterion).is_finite())
            .min_by(|(_, a), (_, b)| {
                a.value(criterion)
                    .partial_cmp(&b.value(criterion))
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then((a.q + s * a.q_s).cmp(&(b.q + s * b.q_s)))
                    .then(a.q.cmp(&b.q))
            })
            .map(|(i, _)| i)
    }

    pub fn chosen_fit(&self) -> &FitResult {
        let i = self.index_of(self.chosen);
        self.fits[i].as_ref().expect("chosen point has a fit")
    }

    /// Best fit under another criterion, computed from the same rows.
    pub fn best_fit(&self, criterion: Criterion) -> Option<&FitResult> {
        self.argmin(criterion).and_then(|i| self.fits[i].as_ref())
    }

    fn index_of(&self, point: (usize, usize)) -> usize {
        self.rows.iter().position(|r| (r.q, r.q_s) == point).expect("point is on the grid")
    }
}

/// Fits every grid point from its own initialization and picks the one
/// minimizing the requested criterion among converged fits.
pub fn select(data: &MultiStudyData, grid: &GridSpec, config: &ConvergenceConfig) -> Result<SelectionReport> {
    let s = data.n_studies();
    grid.check(data.p(), s)?;
    config.check()?;
    let stats = StudyStats::from_data(data);
    let points = grid.points();
    for &(q, qs) in &points {
        validate(data, &ModelDims::uniform(data, q, qs))?;
    }
    let outcomes: Vec<Result<FitResult>> = points
        .par_iter()
        .map(|&(q, qs)| {
            let dims = ModelDims::uniform(data, q, qs);
            let init = initialize_from_stats(&stats, &dims)?;
            fit_stats(&stats, &dims, config, init)
        })
        .collect();
    let mut rows = Vec::with_capacity(points.len());
    let mut fits = Vec::with_capacity(points.len());
    for (&(q, qs), outcome) in points.iter().zip(outcomes) {
        let dims = ModelDims::uniform(data, q, qs);
        match outcome {
            Ok(f) => {
                rows.push(SelectionRow {
                    q,
                    q_s: qs,
                    aic: f.aic,
                    bic: f.bic,
                    observed_loglik: f.observed_loglik,
                    n_params: f.n_params,
                    converged: f.converged,
                    n_iter: f.n_iter,
                    error: None,
                });
                fits.push(Some(f));
            }
            Err(e) => {
                rows.push(SelectionRow {
                    q,
                    q_s: qs,
                    aic: f64::NAN,
                    bic: f64::NAN,
                    observed_loglik: f64::NAN,
                    n_params: n_free_params(&dims),
                    converged: false,
                    n_iter: 0,
                    error: Some(e.to_string()),
                });
                fits.push(None);
            }
        }
    }
    let mut report = SelectionReport { criterion: grid.criterion, rows, chosen: (0, 0), fits, n_studies: s };
    let best = report.argmin(grid.criterion).ok_or(MsfrError::AllFitsFailed(points.len()))?;
    report.chosen = (report.rows[best].q, report.rows[best].q_s);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(p: usize, p_b: usize, q: usize, q_s: Vec<usize>) -> ModelDims {
        let n_s = vec![10; q_s.len()];
        ModelDims { p, p_b, q, q_s, n_s }
    }

    #[test]
    fn parameter_count_examples() {
        assert_eq!(n_free_params(&dims(20, 2, 3, vec![1, 1])), 180);
        assert_eq!(n_free_params(&dims(7, 0, 0, vec![0])), 7);
        let one = dims(20, 2, 3, vec![1, 1]);
        let two = dims(20, 2, 3, vec![1, 1, 1, 1]);
        // Λ and Ψ contributions double
        assert_eq!(n_free_params(&two) - n_free_params(&one), 20 * 2 + 2 * 20);
    }

    fn row(q: usize, q_s: usize, v: f64) -> SelectionRow {
        SelectionRow {
            q,
            q_s,
            aic: v,
            bic: v,
            observed_loglik: 0.0,
            n_params: 0,
            converged: true,
            n_iter: 1,
            error: None,
        }
    }

    #[test]
    fn ties_prefer_smaller_dimension() {
        let report = SelectionReport {
            criterion: Criterion::Bic,
            rows: vec![row(2, 1, 5.0), row(1, 2, 5.0), row(1, 1, 5.0), row(3, 0, 4.0)],
            chosen: (0, 0),
            fits: vec![None; 4],
            n_studies: 2,
        };
        assert_eq!(report.argmin(Criterion::Bic), Some(3));
        let mut r2 = report.clone();
        r2.rows[3].converged = false;
        assert_eq!(r2.argmin(Criterion::Bic), Some(2));
        r2.rows.swap(0, 2);
        assert_eq!(r2.argmin(Criterion::Aic), Some(0));
    }

    #[test]
    fn criterion_parses() {
        assert_eq!("BIC".parse::<Criterion>().unwrap(), Criterion::Bic);
        assert!("xic".parse::<Criterion>().is_err());
    }

    #[test]
    fn grid_rank_checked() {
        let g = GridSpec { q_values: vec![1, 5], qs_values: vec![1], criterion: Criterion::Aic };
        assert!(g.check(6, 2).is_err());
        assert!(g.check(20, 2).is_ok());
    }
}
