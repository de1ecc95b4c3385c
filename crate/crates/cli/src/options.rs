//! Flags shared by every subcommand, optionally seeded from a TOML file.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use msfr::cv::CVSpec;
use msfr::scores::ScoreMethod;
use msfr::select::{Criterion, GridSpec};
use msfr::sim::{Method, ScenarioSpec};
use msfr::{ConvergenceConfig, MsfrError, Result};
use serde::{Deserialize, Serialize};

/// Run settings. Every field can come from `--config FILE` (same names with
/// underscores); flags given on the command line win.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Base seed; replication r uses seed + r.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// aic or bic.
    #[arg(long, global = true)]
    pub criterion: Option<String>,
    /// Candidate common dimensions, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub q_grid: Option<Vec<usize>>,
    /// Candidate study-specific dimensions, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub qs_grid: Option<Vec<usize>>,
    /// Convergence tolerance on the extrapolated log-likelihood gain.
    #[arg(long, global = true)]
    pub eps: Option<f64>,
    #[arg(long, global = true)]
    pub max_iter: Option<usize>,
    /// Disable Aitken extrapolation and stop on the raw increment.
    #[arg(long, global = true)]
    #[serde(default)]
    pub no_aitken: bool,
    #[arg(long, global = true)]
    pub reps: Option<usize>,
    /// Simulation scenario 1, 2 or 3.
    #[arg(long, global = true)]
    pub scenario: Option<u8>,
    /// Multiplier applied to the scenario's study sizes.
    #[arg(long, global = true)]
    pub scale: Option<f64>,
    /// msfr, msfa, fr or msfa-lr; comma separated where several are allowed.
    #[arg(long, global = true, value_delimiter = ',')]
    pub method: Option<Vec<String>>,
    /// bartlett or thurstone; comma separated for cv.
    #[arg(long, global = true, value_delimiter = ',')]
    pub score: Option<Vec<String>>,
    /// Number of cross-validation folds.
    #[arg(long, global = true)]
    pub folds: Option<usize>,
    /// Common dimension for fit and cv.
    #[arg(long, global = true)]
    pub q: Option<usize>,
    /// Study-specific dimension; one value for all studies or one per study.
    #[arg(long, global = true, value_delimiter = ',')]
    pub qs: Option<Vec<usize>>,
    /// Study manifest (TOML).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Parameter directory written by fit or simulate.
    #[arg(long, global = true)]
    pub params: Option<PathBuf>,
    /// Truth parameter directory; fit reports RV against it.
    #[arg(long, global = true)]
    pub truth: Option<PathBuf>,
    /// Score the raw responses instead of x − βb.
    #[arg(long, global = true)]
    #[serde(default)]
    pub raw: bool,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

fn invalid(msg: impl Into<String>) -> MsfrError {
    MsfrError::InvalidArgument(msg.into())
}

fn parse_list<T: FromStr<Err = MsfrError>>(items: &[String]) -> Result<Vec<T>> {
    items.iter().map(|s| s.trim().parse()).collect()
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MsfrError::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1).unwrap_or(0);
            MsfrError::ParseError { file: path.display().to_string(), line, message: e.message().to_string() }
        })
    }

    /// Fills every unset field from `base`.
    pub fn or(self, base: RunConfig) -> RunConfig {
        RunConfig {
            seed: self.seed.or(base.seed),
            criterion: self.criterion.or(base.criterion),
            q_grid: self.q_grid.or(base.q_grid),
            qs_grid: self.qs_grid.or(base.qs_grid),
            eps: self.eps.or(base.eps),
            max_iter: self.max_iter.or(base.max_iter),
            no_aitken: self.no_aitken || base.no_aitken,
            reps: self.reps.or(base.reps),
            scenario: self.scenario.or(base.scenario),
            scale: self.scale.or(base.scale),
            method: self.method.or(base.method),
            score: self.score.or(base.score),
            folds: self.folds.or(base.folds),
            q: self.q.or(base.q),
            qs: self.qs.or(base.qs),
            data: self.data.or(base.data),
            params: self.params.or(base.params),
            truth: self.truth.or(base.truth),
            raw: self.raw || base.raw,
            out: self.out.or(base.out),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn out(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn require<'a, T>(value: &'a Option<T>, flag: &str, command: &str) -> Result<&'a T> {
        value.as_ref().ok_or_else(|| invalid(format!("{command} requires --{flag}")))
    }

    pub fn convergence(&self) -> Result<ConvergenceConfig> {
        let defaults = ConvergenceConfig::default();
        let config = ConvergenceConfig {
            eps_star: self.eps.unwrap_or(defaults.eps_star),
            max_iter: self.max_iter.unwrap_or(defaults.max_iter),
            use_aitken: !self.no_aitken,
            ..defaults
        };
        config.check()?;
        Ok(config)
    }

    pub fn criterion(&self) -> Result<Criterion> {
        self.criterion.as_deref().map(str::parse).unwrap_or(Ok(Criterion::Bic))
    }

    pub fn methods(&self, default: &[Method]) -> Result<Vec<Method>> {
        match &self.method {
            Some(m) if !m.is_empty() => parse_list(m),
            _ => Ok(default.to_vec()),
        }
    }

    pub fn single_method(&self) -> Result<Method> {
        let methods = self.methods(&[Method::Msfr])?;
        match methods.as_slice() {
            [m] => Ok(*m),
            _ => Err(invalid("exactly one --method is expected here")),
        }
    }

    pub fn score_methods(&self, default: &[ScoreMethod]) -> Result<Vec<ScoreMethod>> {
        match &self.score {
            Some(s) if !s.is_empty() => parse_list(s),
            _ => Ok(default.to_vec()),
        }
    }

    pub fn scenario(&self) -> Result<ScenarioSpec> {
        let mut spec = ScenarioSpec::scenario(self.scenario.unwrap_or(1))?.with_seed(self.seed());
        if let Some(f) = self.scale {
            if !(f > 0.0) {
                return Err(invalid(format!("--scale must be positive, got {f}")));
            }
            spec = spec.scaled(f);
        }
        if let Some(r) = self.reps {
            spec = spec.with_reps(r);
        }
        spec.check()?;
        Ok(spec)
    }

    /// Grid from `--q-grid`/`--qs-grid`, falling back to `fallback`.
    pub fn grid(&self, fallback: GridSpec) -> Result<GridSpec> {
        Ok(GridSpec {
            q_values: self.q_grid.clone().unwrap_or(fallback.q_values),
            qs_values: self.qs_grid.clone().unwrap_or(fallback.qs_values),
            criterion: self.criterion()?,
        })
    }

    pub fn cv_spec(&self) -> Result<CVSpec> {
        let defaults = CVSpec::default();
        Ok(CVSpec {
            k: self.folds.unwrap_or(defaults.k),
            score_methods: self.score_methods(&defaults.score_methods)?,
            seed: self.seed(),
        })
    }
}
