//! Dataset CSV I/O and serializable run configuration.
//!
//! Dataset layout: one header row, then one row per observation with
//! `labeled` in {0, 1}, `y` (empty allowed on unlabeled rows), `y_tilde`,
//! and covariate columns `x1..xd`. Values use `.` as the decimal separator.
//! Floats are written in shortest round-trip form, so save followed by load
//! reproduces the dataset bit for bit.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{builtin_linreg_model, builtin_mean_model, builtin_overidentified_mean_model};
use super::{MomentModel, PPIDataset, ProblemConfig};
use crate::auxiliary::AuxSpec;
use crate::error::{Error, Result};

/// Maps logical dataset columns to CSV header names. An empty `x` list means
/// "auto-detect `x1`, `x2`, ... while consecutive names exist".
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ColumnSchema {
    #[serde(default = "default_labeled")]
    pub labeled: String,
    #[serde(default = "default_y")]
    pub y: String,
    #[serde(default = "default_y_tilde")]
    pub y_tilde: String,
    #[serde(default)]
    pub x: Vec<String>,
}

fn default_labeled() -> String {
    "labeled".into()
}
fn default_y() -> String {
    "y".into()
}
fn default_y_tilde() -> String {
    "y_tilde".into()
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            labeled: default_labeled(),
            y: default_y(),
            y_tilde: default_y_tilde(),
            x: Vec::new(),
        }
    }
}

fn header_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Dataset(format!("missing column '{name}'")))
}

fn parse_finite(field: &str, col: &str, row: usize) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| {
        Error::Dataset(format!("row {row}: cannot parse '{field}' in column '{col}'"))
    })?;
    if !v.is_finite() {
        return Err(Error::Dataset(format!(
            "row {row}: non-finite value in column '{col}'"
        )));
    }
    Ok(v)
}

/// Loads a dataset from CSV using `schema` to locate columns.
pub fn load_dataset(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<PPIDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();

    let i_lab = header_index(&headers, &schema.labeled)?;
    let i_y = header_index(&headers, &schema.y)?;
    let i_yt = header_index(&headers, &schema.y_tilde)?;
    let x_names: Vec<String> = if schema.x.is_empty() {
        let mut names = Vec::new();
        for k in 1.. {
            let cand = format!("x{k}");
            if headers.iter().any(|h| h == cand) {
                names.push(cand);
            } else {
                break;
            }
        }
        names
    } else {
        schema.x.clone()
    };
    let i_x: Vec<usize> = x_names
        .iter()
        .map(|nm| header_index(&headers, nm))
        .collect::<Result<_>>()?;
    let d = i_x.len();

    let mut lab_y = Vec::new();
    let mut lab_yt = Vec::new();
    let mut lab_x = Vec::new();
    let mut unl_yt = Vec::new();
    let mut unl_x = Vec::new();

    for (ridx, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = ridx + 2; // 1-based, after the header
        let lab_field = rec
            .get(i_lab)
            .ok_or_else(|| Error::Dataset(format!("row {row}: short record")))?
            .trim();
        let is_labeled = match lab_field {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Dataset(format!(
                    "row {row}: labeled flag must be 0 or 1, got '{other}'"
                )))
            }
        };
        let yt = parse_finite(rec.get(i_yt).unwrap_or(""), &schema.y_tilde, row)?;
        let mut xrow = Vec::with_capacity(d);
        for (j, &ix) in i_x.iter().enumerate() {
            xrow.push(parse_finite(rec.get(ix).unwrap_or(""), &x_names[j], row)?);
        }
        if is_labeled {
            let yf = rec.get(i_y).unwrap_or("").trim();
            if yf.is_empty() {
                return Err(Error::Dataset(format!(
                    "row {row}: labeled row with empty '{}'",
                    schema.y
                )));
            }
            lab_y.push(parse_finite(yf, &schema.y, row)?);
            lab_yt.push(yt);
            lab_x.extend_from_slice(&xrow);
        } else {
            // A response on an unlabeled row is ignored rather than rejected.
            unl_yt.push(yt);
            unl_x.extend_from_slice(&xrow);
        }
    }

    let n = lab_y.len();
    let m = unl_yt.len();
    if n < 2 {
        return Err(Error::Dataset(format!(
            "insufficient data: {n} labeled row(s), need at least 2"
        )));
    }
    PPIDataset::new(
        DVector::from_vec(lab_y),
        DMatrix::from_row_slice(n, d, &lab_x),
        DVector::from_vec(lab_yt),
        DMatrix::from_row_slice(m, d, &unl_x),
        DVector::from_vec(unl_yt),
    )
}

/// Writes a dataset as CSV with canonical column names
/// (`labeled,y,y_tilde,x1..xd`), labeled rows first.
pub fn save_dataset(path: impl AsRef<Path>, ds: &PPIDataset) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let d = ds.d();
    let mut header = vec!["labeled".to_string(), "y".into(), "y_tilde".into()];
    for k in 1..=d {
        header.push(format!("x{k}"));
    }
    writer.write_record(&header)?;
    let mut rec: Vec<String> = Vec::with_capacity(3 + d);
    for i in 0..ds.n() {
        rec.clear();
        rec.push("1".into());
        rec.push(format!("{}", ds.labeled_y[i]));
        rec.push(format!("{}", ds.labeled_ytilde[i]));
        for j in 0..d {
            rec.push(format!("{}", ds.labeled_x[(i, j)]));
        }
        writer.write_record(&rec)?;
    }
    for i in 0..ds.m() {
        rec.clear();
        rec.push("0".into());
        rec.push(String::new());
        rec.push(format!("{}", ds.unlabeled_ytilde[i]));
        for j in 0..d {
            rec.push(format!("{}", ds.unlabeled_x[(i, j)]));
        }
        writer.write_record(&rec)?;
    }
    writer.flush()?;
    Ok(())
}

/// Serializable choice of built-in moment model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Mean,
    Linreg { d: usize },
    OveridentifiedMean,
}

impl ModelSpec {
    pub fn build(&self) -> MomentModel {
        match self {
            ModelSpec::Mean => builtin_mean_model(),
            ModelSpec::Linreg { d } => builtin_linreg_model(*d),
            ModelSpec::OveridentifiedMean => builtin_overidentified_mean_model(),
        }
    }
}

/// Serializable run configuration accepted by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub aux: AuxSpec,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schema: ColumnSchema,
}

fn default_alpha() -> f64 {
    0.05
}

impl FitConfig {
    pub fn to_problem(&self) -> Result<ProblemConfig> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must be in (0,1), got {}", self.alpha)));
        }
        let mut cfg = ProblemConfig::new(self.model.build(), self.aux.clone());
        cfg.alpha = self.alpha;
        cfg.seed = self.seed;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn tricky_dataset() -> PPIDataset {
        PPIDataset::new(
            DVector::from_column_slice(&[0.1, -3.5e300, 7.0]),
            DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1e-308, -0.25, 3.25, 1e16]),
            DVector::from_column_slice(&[0.30000000000000004, 2.0, -1.5]),
            DMatrix::from_row_slice(2, 2, &[0.5, 0.75, 4.0, 5.0]),
            DVector::from_column_slice(&[9.0, 1.0 / 3.0]),
        )
        .unwrap()
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let ds = tricky_dataset();
        save_dataset(&path, &ds).unwrap();
        let back = load_dataset(&path, &ColumnSchema::default()).unwrap();
        assert_eq!(ds, back);
        // Second write of the reloaded dataset is byte-identical.
        let path2 = dir.path().join("ds2.csv");
        save_dataset(&path2, &back).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn schema_remaps_column_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "is_lab,resp,pred,a,b").unwrap();
        writeln!(f, "1,2.5,2.0,0.1,0.2").unwrap();
        writeln!(f, "1,3.5,3.0,0.5,0.6").unwrap();
        writeln!(f, "0,,1.0,0.3,0.4").unwrap();
        drop(f);
        let schema = ColumnSchema {
            labeled: "is_lab".into(),
            y: "resp".into(),
            y_tilde: "pred".into(),
            x: vec!["a".into(), "b".into()],
        };
        let ds = load_dataset(&path, &schema).unwrap();
        assert_eq!(ds.n(), 2);
        assert_eq!(ds.m(), 1);
        assert_eq!(ds.d(), 2);
        assert_eq!(ds.labeled_y[0], 2.5);
        assert_eq!(ds.unlabeled_x[(0, 1)], 0.4);
    }

    #[test]
    fn autodetects_consecutive_x_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "labeled,y,y_tilde,x1,x2,extra").unwrap();
        writeln!(f, "1,1.0,1.0,0.0,0.0,99").unwrap();
        writeln!(f, "1,2.0,2.0,0.5,0.5,99").unwrap();
        writeln!(f, "0,,2.0,1.0,1.0,99").unwrap();
        drop(f);
        let ds = load_dataset(&path, &ColumnSchema::default()).unwrap();
        assert_eq!(ds.d(), 2);
    }

    #[test]
    fn rejects_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        for (name, body) in [
            ("empty_y", "labeled,y,y_tilde\n1,,2.0\n"),
            ("bad_flag", "labeled,y,y_tilde\n2,1.0,2.0\n"),
            ("nonfinite", "labeled,y,y_tilde\n1,inf,2.0\n"),
            ("no_labeled", "labeled,y,y_tilde\n0,,2.0\n"),
        ] {
            let path = dir.path().join(format!("{name}.csv"));
            std::fs::write(&path, body).unwrap();
            assert!(
                load_dataset(&path, &ColumnSchema::default()).is_err(),
                "expected {name} to be rejected"
            );
        }
    }

    #[test]
    fn fit_config_parses_with_defaults() {
        let cfg: FitConfig = serde_json::from_str(
            r#"{"model": {"type": "linreg", "d": 3}, "alpha": 0.1}"#,
        )
        .unwrap();
        assert_eq!(cfg.model, ModelSpec::Linreg { d: 3 });
        assert_eq!(cfg.alpha, 0.1);
        assert_eq!(cfg.seed, 0);
        let problem = cfg.to_problem().unwrap();
        assert_eq!(problem.model.p(), 3);
    }
}
