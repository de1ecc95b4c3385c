//! Subcommand implementations. Each returns the lines it prints on success.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use msfr::cv::cv_mse;
use msfr::ecm::residualize;
use msfr::init::initialize;
use msfr::io::{load_multistudy, read_params, write_multistudy, write_params, write_scores, write_trace};
use msfr::scores::{scores, ScoreMethod};
use msfr::select::{GridSpec, SelectionReport};
use msfr::sim::{fit_method, generate_data, generate_truth, method_input, run_benchmark, rv_scores, Method};
use msfr::{fit, ModelDims, MsfrError, MultiStudyData, Result};

use crate::options::RunConfig;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| MsfrError::Io(format!("{}: {e}", dir.display())))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| MsfrError::Io(format!("{}: {e}", path.display())))
}

fn load(cfg: &RunConfig, command: &str) -> Result<MultiStudyData> {
    load_multistudy(RunConfig::require(&cfg.data, "data", command)?)
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    use std::io::Write;
    let mut w = create(path)?;
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn simulate(cfg: &RunConfig) -> Result<Vec<String>> {
    let spec = cfg.scenario()?;
    let truth = generate_truth(&spec, cfg.seed())?;
    let data = generate_data(&truth, &spec, cfg.seed())?;
    let out = cfg.out();
    let manifest = write_multistudy(&out.join("data"), &data)?;
    write_params(&out.join("truth"), &truth)?;
    Ok(vec![
        format!("scenario {} with n_s = {:?}", spec.name, spec.n_s),
        format!("manifest {}", manifest.display()),
        format!("truth {}", out.join("truth").display()),
    ])
}

pub fn fit_cmd(cfg: &RunConfig) -> Result<Vec<String>> {
    let data = load(cfg, "fit")?;
    let method = cfg.single_method()?;
    let q = *RunConfig::require(&cfg.q, "q", "fit")?;
    let qs_arg = cfg.qs.clone().unwrap_or_else(|| vec![0]);
    let q_s = match (method.has_specific(), qs_arg.as_slice()) {
        (false, _) => vec![0; data.n_studies()],
        (true, [one]) => vec![*one; data.n_studies()],
        (true, many) if many.len() == data.n_studies() => many.to_vec(),
        (true, many) => {
            return Err(MsfrError::InvalidArgument(format!(
                "--qs has {} values for {} studies",
                many.len(),
                data.n_studies()
            )))
        }
    };
    let config = cfg.convergence()?;
    let (input, beta) = method_input(method, &data)?;
    let dims = ModelDims::for_data(&input, q, q_s.clone());
    dims.check_rank()?;
    let result = fit(&input, &dims, &config, initialize(&input, &dims)?)?;
    let mut params = result.params.clone();
    if let Some(b) = beta {
        params.beta = b;
    }

    let out = cfg.out();
    write_params(&out.join("params"), &params)?;
    write_trace(&out.join("loglik_trace.csv"), "observed_loglik", &result.loglik_trace)?;
    write_trace(&out.join("complete_loglik_trace.csv"), "complete_loglik", &result.complete_loglik_trace)?;
    let qs_text = q_s.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
    write_lines(
        &out.join("fit_summary.csv"),
        &[
            "method,q,q_s,converged,n_iter,observed_loglik,n_params,aic,bic,explained_variance".into(),
            format!(
                "{method},{q},{qs_text},{},{},{:.6},{},{:.6},{:.6},{:.6}",
                result.converged,
                result.n_iter,
                result.observed_loglik,
                result.n_params,
                result.aic,
                result.bic,
                result.explained_variance.total()
            ),
        ],
    )?;
    let mut lines = vec![format!(
        "{method} q = {q} q_s = [{qs_text}]: loglik {:.6}, AIC {:.6}, BIC {:.6}, {} iterations{}",
        result.observed_loglik,
        result.aic,
        result.bic,
        result.n_iter,
        if result.converged { "" } else { " (not converged)" }
    )];
    if let Some(dir) = &cfg.truth {
        let truth = read_params(dir)?;
        let rv = rv_scores(&params, &truth)?;
        let mut rows = vec!["quantity,rv".to_string()];
        if let Some(b) = rv.beta {
            rows.push(format!("beta,{b:.6}"));
        }
        rows.push(format!("phi,{:.6}", rv.phi));
        for (s, l) in rv.lambdas.iter().enumerate() {
            if let Some(l) = l {
                rows.push(format!("lambda_{},{l:.6}", s + 1));
            }
        }
        for (s, v) in rv.sigmas.iter().enumerate() {
            rows.push(format!("sigma_{},{v:.6}", s + 1));
            lines.push(format!("RV(Sigma_{}) = {v:.6}", s + 1));
        }
        write_lines(&out.join("rv.csv"), &rows)?;
    }
    Ok(lines)
}

fn write_selection(path: &Path, report: &SelectionReport) -> Result<()> {
    let mut rows = vec!["q,q_s,aic,bic,observed_loglik,n_params,converged,n_iter,error".to_string()];
    for r in &report.rows {
        rows.push(format!(
            "{},{},{:.6},{:.6},{:.6},{},{},{},{}",
            r.q,
            r.q_s,
            r.aic,
            r.bic,
            r.observed_loglik,
            r.n_params,
            r.converged,
            r.n_iter,
            r.error.as_deref().unwrap_or("").replace(',', ";")
        ));
    }
    write_lines(path, &rows)
}

pub fn select_cmd(cfg: &RunConfig) -> Result<Vec<String>> {
    let data = load(cfg, "select")?;
    let method = cfg.single_method()?;
    let grid = GridSpec {
        q_values: RunConfig::require(&cfg.q_grid, "q-grid", "select")?.clone(),
        qs_values: cfg.qs_grid.clone().unwrap_or_else(|| vec![1]),
        criterion: cfg.criterion()?,
    };
    let fitted = fit_method(method, &data, &grid, &cfg.convergence()?)?;
    let out = cfg.out();
    write_selection(&out.join("selection.csv"), &fitted.report)?;
    let (params, (q, qs)) =
        fitted.estimate(grid.criterion).ok_or(MsfrError::AllFitsFailed(fitted.report.rows.len()))?;
    write_params(&out.join("params"), &params)?;
    Ok(vec![format!("{method} under {}: q = {q}, q_s = {qs}", grid.criterion)])
}

pub fn score_cmd(cfg: &RunConfig) -> Result<Vec<String>> {
    let data = load(cfg, "score")?;
    let params = read_params(RunConfig::require(&cfg.params, "params", "score")?)?;
    let method = match cfg.score_methods(&[ScoreMethod::Bartlett])?.as_slice() {
        [m] => *m,
        _ => return Err(MsfrError::InvalidArgument("score takes exactly one --score".into())),
    };
    if params.n_studies() != data.n_studies() || params.p() != data.p() {
        return Err(MsfrError::ShapeMismatch(format!(
            "parameters have S = {}, p = {}; data has S = {}, p = {}",
            params.n_studies(),
            params.p(),
            data.n_studies(),
            data.p()
        )));
    }
    let xtilde = if cfg.raw || params.p_b() == 0 {
        data.studies.iter().map(|s| s.x.clone()).collect()
    } else {
        if data.p_b() != params.p_b() {
            return Err(MsfrError::ShapeMismatch(format!(
                "parameters have {} covariates, data has {}",
                params.p_b(),
                data.p_b()
            )));
        }
        residualize(&data, &params.beta)?
    };
    let m = scores(method, &xtilde, &params)?;
    write_scores(&cfg.out(), &data, &m)?;
    Ok(vec![format!("{method} scores for {} studies in {}", data.n_studies(), cfg.out().display())])
}

pub fn cv_cmd(cfg: &RunConfig) -> Result<Vec<String>> {
    let data = load(cfg, "cv")?;
    let q = *RunConfig::require(&cfg.q, "q", "cv")?;
    let qs = match cfg.qs.as_deref() {
        None => 1,
        Some([one]) => *one,
        Some(_) => return Err(MsfrError::InvalidArgument("cv takes a single --qs value".into())),
    };
    let methods = cfg.methods(&Method::ALL)?;
    let report = cv_mse(&data, q, qs, &cfg.convergence()?, &cfg.cv_spec()?, &methods)?;
    let out = cfg.out();
    report.write_table_csv(create(&out.join("cv_table.csv"))?)?;
    report.write_long_csv(create(&out.join("cv_folds.csv"))?)?;
    Ok(report.rows.iter().map(|r| format!("{} {}: MSE {:.6}", r.method, r.score_method, r.mse_entry)).collect())
}

pub fn benchmark_cmd(cfg: &RunConfig) -> Result<Vec<String>> {
    let spec = cfg.scenario()?;
    let criterion = cfg.criterion()?;
    let grid = cfg.grid(spec.default_grid(criterion))?;
    let methods = cfg.methods(&Method::ALL)?;
    let report = run_benchmark(&spec, &methods, &grid, &cfg.convergence()?)?;
    let out = cfg.out();
    report.write_records_csv(create(&out.join("benchmark_records.csv"))?)?;
    report.write_summary_csv(create(&out.join("benchmark_summary.csv"))?)?;
    report.write_long_csv(create(&out.join("benchmark_long.csv"))?)?;
    if !report.failures.is_empty() {
        let mut rows = vec!["rep,method,error".to_string()];
        rows.extend(report.failures.iter().map(|(r, m, e)| format!("{r},{m},{}", e.replace(',', ";"))));
        write_lines(&out.join("benchmark_failures.csv"), &rows)?;
    }
    let mut lines = Vec::new();
    for m in &methods {
        if let Some(s) = report.summary(*m, criterion) {
            lines.push(format!(
                "{m} ({criterion}): mean q = {:.2}, mean q_s = {:.2}, RV(Phi) = {:.3}, {} replications",
                s.mean_q, s.mean_qs, s.rv_phi, s.n_ok
            ));
        }
    }
    if !report.failures.is_empty() {
        lines.push(format!("{} failed fits, see benchmark_failures.csv", report.failures.len()));
    }
    Ok(lines)
}

/// Output directory of a run, created if needed.
pub fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out();
    fs::create_dir_all(&out).map_err(|e| MsfrError::Io(format!("{}: {e}", out.display())))?;
    Ok(out)
}
