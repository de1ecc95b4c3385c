//! File formats: study manifests, subject-by-variable CSVs and parameter
//! directories.
//!
//! A manifest lists one `[[study]]` table per study:
//!
//! ```toml
//! [[study]]
//! id = "site_a"
//! data = "site_a.csv"
//! covariates = "site_a_b.csv"  # optional, but all or none
//! ```
//!
//! Paths are relative to the manifest. CSVs have a header row and one row
//! per subject. Parameter files use 17 significant digits so that values
//! survive a round trip exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MsfrError, Result};
use crate::linalg::{DenseMatrix, DiagMatrix};
use crate::model::{MultiStudyData, Params, StudyDataset};
use crate::scores::ScoreMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyEntry {
    pub id: String,
    pub data: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariates: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub study: Vec<StudyEntry>,
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

fn io_err(path: &Path, e: std::io::Error) -> MsfrError {
    MsfrError::Io(format!("{}: {e}", display(path)))
}

/// Formats a value with 17 significant digits.
pub fn fmt_exact(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn parse_manifest(text: &str, file: &str) -> Result<Manifest> {
    toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1).unwrap_or(0);
        MsfrError::ParseError { file: file.into(), line, message: e.message().to_string() }
    })
}

/// Reads a numeric CSV with a header row. Returns the header and a
/// `columns x rows` matrix (variables by subjects).
pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, DenseMatrix)> {
    let file = display(path);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| MsfrError::Io(format!("{file}: {e}")))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| MsfrError::ParseError { file: file.clone(), line: 1, message: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    let width = header.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| MsfrError::ParseError {
            file: file.clone(),
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(rows + 2);
        if record.len() != width {
            return Err(MsfrError::ParseError {
                file: file.clone(),
                line,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        for field in record.iter() {
            let v: f64 = field.parse().map_err(|_| MsfrError::ParseError {
                file: file.clone(),
                line,
                message: format!("not a number: {field:?}"),
            })?;
            values.push(v);
        }
        rows += 1;
    }
    // values are row-major subjects x variables == column-major variables x subjects
    Ok((header, DMatrix::from_vec(width, rows, values)))
}

/// Loads all studies listed in a manifest.
pub fn load_multistudy(manifest_path: &Path) -> Result<MultiStudyData> {
    let text = fs::read_to_string(manifest_path).map_err(|e| io_err(manifest_path, e))?;
    let manifest = parse_manifest(&text, &display(manifest_path))?;
    if manifest.study.is_empty() {
        return Err(MsfrError::InvalidArgument(format!("{} lists no studies", display(manifest_path))));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let with_b = manifest.study.iter().filter(|s| s.covariates.is_some()).count();
    if with_b != 0 && with_b != manifest.study.len() {
        let missing = manifest.study.iter().find(|s| s.covariates.is_none()).expect("some study lacks covariates");
        return Err(MsfrError::ShapeMismatch(format!(
            "study {} has no covariate file while other studies do",
            missing.id
        )));
    }
    let mut studies = Vec::with_capacity(manifest.study.len());
    let mut p_ref: Option<(usize, String)> = None;
    for entry in &manifest.study {
        let (_, x) = read_matrix_csv(&base.join(&entry.data))?;
        match &p_ref {
            Some((p, first)) if *p != x.nrows() => {
                return Err(MsfrError::ShapeMismatch(format!(
                    "study {} has {} variables, study {first} has {p}",
                    entry.id,
                    x.nrows()
                )))
            }
            None => p_ref = Some((x.nrows(), entry.id.clone())),
            _ => {}
        }
        let b = match &entry.covariates {
            Some(path) => {
                let (_, b) = read_matrix_csv(&base.join(path))?;
                if b.ncols() != x.ncols() {
                    return Err(MsfrError::ShapeMismatch(format!(
                        "study {}: {} data rows but {} covariate rows",
                        entry.id,
                        x.ncols(),
                        b.ncols()
                    )));
                }
                b
            }
            None => DMatrix::zeros(0, x.ncols()),
        };
        studies.push(StudyDataset::new(entry.id.clone(), x, b)?);
    }
    if let Some(first) = studies.first() {
        if let Some(bad) = studies.iter().find(|s| s.p_b() != first.p_b()) {
            return Err(MsfrError::ShapeMismatch(format!(
                "study {} has {} covariates, study {} has {}",
                bad.id,
                bad.p_b(),
                first.id,
                first.p_b()
            )));
        }
    }
    MultiStudyData::new(studies)
}

/// Writes `m` transposed (columns of `m` become CSV rows) under `header`.
pub fn write_columns_csv<W: Write>(out: W, header: &[String], m: &DenseMatrix, exact: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(|e| MsfrError::Io(e.to_string()))?;
    for col in m.column_iter() {
        let row: Vec<String> = col.iter().map(|v| if exact { fmt_exact(*v) } else { format!("{v:.6}") }).collect();
        w.write_record(&row).map_err(|e| MsfrError::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| io_err(path, e))
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

/// Writes each study as `<id>.csv` (and `<id>_b.csv` when it has covariates)
/// plus `manifest.toml` into `dir`. Returns the manifest path.
pub fn write_multistudy(dir: &Path, data: &MultiStudyData) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut entries = Vec::with_capacity(data.n_studies());
    for study in &data.studies {
        let x_name = PathBuf::from(format!("{}.csv", study.id));
        write_columns_csv(create(&dir.join(&x_name))?, &names("X", study.p()), &study.x, true)?;
        let covariates = if study.p_b() > 0 {
            let b_name = PathBuf::from(format!("{}_b.csv", study.id));
            write_columns_csv(create(&dir.join(&b_name))?, &names("B", study.p_b()), &study.b, true)?;
            Some(b_name)
        } else {
            None
        };
        entries.push(StudyEntry { id: study.id.clone(), data: x_name, covariates });
    }
    let text = toml::to_string(&Manifest { study: entries }).map_err(|e| MsfrError::Io(e.to_string()))?;
    let path = dir.join("manifest.toml");
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

fn write_rows_csv(path: &Path, header: &[String], m: &DenseMatrix) -> Result<()> {
    // zero-width blocks are written as a bare header; read_params restores the height
    let rows = if m.ncols() == 0 { DMatrix::zeros(0, 0) } else { m.transpose() };
    write_columns_csv(create(path)?, header, &rows, true)
}

/// Writes `phi.csv`, `lambda_<s>.csv` (1-based), `psi.csv` and `beta.csv`,
/// one row per response variable.
pub fn write_params(dir: &Path, params: &Params) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_rows_csv(&dir.join("phi.csv"), &names("F", params.q()), &params.phi)?;
    for (s, l) in params.lambdas.iter().enumerate() {
        write_rows_csv(&dir.join(format!("lambda_{}.csv", s + 1)), &names("L", l.ncols()), l)?;
    }
    let mut psi = DMatrix::zeros(params.p(), params.n_studies());
    for (s, d) in params.psis.iter().enumerate() {
        psi.set_column(s, d.diagonal());
    }
    write_rows_csv(&dir.join("psi.csv"), &names("psi_", params.n_studies()), &psi)?;
    write_rows_csv(&dir.join("beta.csv"), &names("B", params.p_b()), &params.beta)
}

fn read_rows_csv(path: &Path) -> Result<DenseMatrix> {
    if !path.exists() {
        return Err(MsfrError::Io(format!("{}: file not found", display(path))));
    }
    Ok(read_matrix_csv(path)?.1.transpose())
}

/// Reads a parameter directory written by [`write_params`].
pub fn read_params(dir: &Path) -> Result<Params> {
    let phi = read_rows_csv(&dir.join("phi.csv"))?;
    let psi = read_rows_csv(&dir.join("psi.csv"))?;
    let beta = read_rows_csv(&dir.join("beta.csv"))?;
    let p = psi.nrows();
    let fix_rows = |m: DenseMatrix, what: &str| -> Result<DenseMatrix> {
        // a file with only a header has no rows; give it the right height
        if m.nrows() == 0 {
            Ok(DMatrix::zeros(p, 0))
        } else if m.nrows() != p {
            Err(MsfrError::ShapeMismatch(format!("{what} has {} rows, psi.csv has {p}", m.nrows())))
        } else {
            Ok(m)
        }
    };
    let phi = fix_rows(phi, "phi.csv")?;
    let beta = fix_rows(beta, "beta.csv")?;
    let mut lambdas = Vec::with_capacity(psi.ncols());
    let mut psis = Vec::with_capacity(psi.ncols());
    for s in 0..psi.ncols() {
        let name = format!("lambda_{}.csv", s + 1);
        lambdas.push(fix_rows(read_rows_csv(&dir.join(&name))?, &name)?);
        psis.push(DiagMatrix::new(psi.column(s).into_owned())?);
    }
    Ok(Params { beta, phi, lambdas, psis })
}

/// Writes `scores_<id>.csv` per study with columns `F1..Fq, L1..Lq_s`.
pub fn write_scores(dir: &Path, data: &MultiStudyData, scores: &ScoreMatrix) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for (s, study) in data.studies.iter().enumerate() {
        let (f, l) = (&scores.common[s], &scores.specific[s]);
        let mut joint = DMatrix::zeros(f.nrows() + l.nrows(), f.ncols());
        joint.rows_mut(0, f.nrows()).copy_from(f);
        joint.rows_mut(f.nrows(), l.nrows()).copy_from(l);
        let mut header = names("F", f.nrows());
        header.extend(names("L", l.nrows()));
        write_columns_csv(create(&dir.join(format!("scores_{}.csv", study.id)))?, &header, &joint, true)?;
    }
    Ok(())
}

/// Writes a numeric trace as a one-column CSV.
pub fn write_trace(path: &Path, name: &str, values: &[f64]) -> Result<()> {
    let m = DMatrix::from_row_slice(1, values.len(), values);
    write_columns_csv(create(path)?, &[name.to_string()], &m, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parse_error_has_line() {
        let err = parse_manifest("[[study]]\nid = \"a\"\ndata = \n", "m.toml").unwrap_err();
        match err {
            MsfrError::ParseError { file, line, .. } => {
                assert_eq!(file, "m.toml");
                assert_eq!(line, 3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_optional_covariates() {
        let m = parse_manifest("[[study]]\nid = \"a\"\ndata = \"a.csv\"\n", "m").unwrap();
        assert_eq!(m.study[0].covariates, None);
    }

    #[test]
    fn exact_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 123456789.12345679, f64::MIN_POSITIVE] {
            assert_eq!(fmt_exact(v).parse::<f64>().unwrap(), v);
        }
    }
}
