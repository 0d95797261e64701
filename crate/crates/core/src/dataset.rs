//! The composite dataset: trial rows (`d = 1`) and external control rows
//! (`d = 0`) pooled into one sample.
//!
//! Every row carries an outcome `y`, covariates `x`, a treatment flag `t` and
//! a source flag `d`. External rows are always controls, so `d = 0` forces
//! `t = 0`. A [`CompositeDataset`] is validated once at construction and is
//! immutable afterwards.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observed unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: f64,
    pub x: Vec<f64>,
    /// Treatment indicator.
    pub t: bool,
    /// Source indicator: `true` for the trial, `false` for external data.
    pub d: bool,
}

impl Observation {
    pub fn new(y: f64, x: Vec<f64>, t: bool, d: bool) -> Self {
        Self { y, x, t, d }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Binary,
    Continuous,
}

impl OutcomeKind {
    /// Binary when every outcome is exactly 0 or 1.
    pub fn detect<'a>(ys: impl IntoIterator<Item = &'a f64>) -> Self {
        if ys.into_iter().all(|&y| y == 0.0 || y == 1.0) {
            OutcomeKind::Binary
        } else {
            OutcomeKind::Continuous
        }
    }
}

/// Maps CSV column names onto dataset roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schema {
    pub outcome: String,
    pub treatment: String,
    pub source: String,
    /// Covariate columns in order. `None` takes every remaining column.
    pub covariates: Option<Vec<String>>,
    /// Overrides outcome-kind detection.
    pub outcome_kind: Option<OutcomeKind>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            outcome: "y".into(),
            treatment: "t".into(),
            source: "d".into(),
            covariates: None,
            outcome_kind: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompositeDataset {
    rows: Vec<Observation>,
    covariate_names: Vec<String>,
    outcome_kind: OutcomeKind,
    n1: usize,
}

impl CompositeDataset {
    /// Builds a dataset, rejecting the first invariant violation found.
    ///
    /// `kind` overrides detection; declaring `Binary` for non-0/1 outcomes
    /// is an error.
    pub fn new(
        rows: Vec<Observation>,
        covariate_names: Vec<String>,
        kind: Option<OutcomeKind>,
    ) -> Result<Self> {
        let report = validate_rows(&rows, covariate_names.len(), kind);
        if let Some(v) = report.violations.first() {
            return Err(Error::InvariantViolation {
                row: v.row.unwrap_or(0),
                reason: v.message.clone(),
            });
        }
        let n1 = rows.iter().filter(|r| r.d).count();
        Ok(Self {
            outcome_kind: kind.unwrap_or(report.detected_kind),
            rows,
            covariate_names,
            n1,
        })
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn outcome_kind(&self) -> OutcomeKind {
        self.outcome_kind
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    /// Trial rows.
    pub fn n1(&self) -> usize {
        self.n1
    }

    /// External rows.
    pub fn n2(&self) -> usize {
        self.rows.len() - self.n1
    }

    /// Trial fraction `n1 / n`.
    pub fn q_hat(&self) -> f64 {
        self.n1 as f64 / self.rows.len() as f64
    }

    /// Same dataset with a different outcome kind.
    pub fn with_outcome_kind(&self, kind: OutcomeKind) -> Result<Self> {
        Self::new(self.rows.clone(), self.covariate_names.clone(), Some(kind))
    }

    /// New dataset made of the given rows (repeats allowed), keeping the
    /// outcome kind.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let rows = indices.iter().map(|&i| self.rows[i].clone()).collect();
        Self::new(rows, self.covariate_names.clone(), Some(self.outcome_kind))
    }

    pub fn validate(&self) -> ValidationReport {
        validate_rows(&self.rows, self.covariate_names.len(), Some(self.outcome_kind))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    ExternalTreated,
    NonFinite,
    CovariateLength,
    KindMismatch,
    NoTrialRows,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    /// 1-based data row, when the violation is row specific.
    pub row: Option<usize>,
    pub kind: ViolationKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnCheck {
    pub column: String,
    pub non_finite: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub warnings: Vec<String>,
    pub columns: Vec<ColumnCheck>,
    pub detected_kind: OutcomeKind,
    pub usable: bool,
}

/// Checks rows against the dataset invariants without failing.
///
/// The report is usable iff the violation list is empty.
pub fn validate_rows(
    rows: &[Observation],
    n_covariates: usize,
    declared: Option<OutcomeKind>,
) -> ValidationReport {
    let mut violations = Vec::new();
    let mut warnings = Vec::new();
    let mut y_bad = 0;
    let mut x_bad = vec![0usize; n_covariates];

    if rows.is_empty() {
        violations.push(Violation {
            row: None,
            kind: ViolationKind::Empty,
            message: "dataset has no rows".into(),
        });
    }

    for (i, r) in rows.iter().enumerate() {
        let row = Some(i + 1);
        if !r.d && r.t {
            violations.push(Violation {
                row,
                kind: ViolationKind::ExternalTreated,
                message: "external row (d = 0) has t = 1".into(),
            });
        }
        if !r.y.is_finite() {
            y_bad += 1;
            violations.push(Violation {
                row,
                kind: ViolationKind::NonFinite,
                message: "outcome is not finite".into(),
            });
        }
        if r.x.len() != n_covariates {
            violations.push(Violation {
                row,
                kind: ViolationKind::CovariateLength,
                message: format!("expected {n_covariates} covariates, found {}", r.x.len()),
            });
            continue;
        }
        for (j, v) in r.x.iter().enumerate() {
            if !v.is_finite() {
                x_bad[j] += 1;
                violations.push(Violation {
                    row,
                    kind: ViolationKind::NonFinite,
                    message: format!("covariate {j} is not finite"),
                });
            }
        }
        if declared == Some(OutcomeKind::Binary) && r.y != 0.0 && r.y != 1.0 {
            violations.push(Violation {
                row,
                kind: ViolationKind::KindMismatch,
                message: format!("outcome {} is not 0/1 but binary kind was declared", r.y),
            });
        }
    }

    let n1 = rows.iter().filter(|r| r.d).count();
    if !rows.is_empty() && n1 == 0 {
        violations.push(Violation {
            row: None,
            kind: ViolationKind::NoTrialRows,
            message: "no trial rows (d = 1)".into(),
        });
    }
    if !rows.is_empty() && n1 == rows.len() {
        warnings.push("no external controls; only trial-based estimators available".into());
    }

    let mut columns = vec![ColumnCheck {
        column: "y".into(),
        non_finite: y_bad,
    }];
    columns.extend(x_bad.into_iter().enumerate().map(|(j, c)| ColumnCheck {
        column: format!("x{j}"),
        non_finite: c,
    }));

    ValidationReport {
        usable: violations.is_empty(),
        violations,
        warnings,
        columns,
        detected_kind: OutcomeKind::detect(rows.iter().map(|r| &r.y)),
    }
}

fn parse_indicator(raw: &str, row: usize, column: &str) -> Result<bool> {
    match raw.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Parse {
            row,
            column: column.to_string(),
            value: other.to_string(),
        }),
    }
}

fn parse_real(raw: &str, row: usize, column: &str) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        value: raw.to_string(),
    })
}

/// Reads a composite dataset from CSV text. Row order is preserved.
pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<CompositeDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let yi = find(&schema.outcome)?;
    let ti = find(&schema.treatment)?;
    let di = find(&schema.source)?;

    let covariates: Vec<String> = match &schema.covariates {
        Some(cs) => cs.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| ![yi, ti, di].contains(i))
            .map(|(_, h)| h.trim().to_string())
            .collect(),
    };
    if covariates.is_empty() {
        return Err(Error::MissingColumn("at least one covariate column".into()));
    }
    let xi = covariates
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = k + 1;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let y = parse_real(field(yi), row, &schema.outcome)?;
        let t = parse_indicator(field(ti), row, &schema.treatment)?;
        let d = parse_indicator(field(di), row, &schema.source)?;
        let x = xi
            .iter()
            .zip(&covariates)
            .map(|(&i, name)| parse_real(field(i), row, name))
            .collect::<Result<Vec<_>>>()?;
        rows.push(Observation { y, x, t, d });
    }
    CompositeDataset::new(rows, covariates, schema.outcome_kind)
}

pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<CompositeDataset> {
    read_csv(std::fs::File::open(path)?, schema)
}

/// Writes the dataset with the schema's role column names. Reals use the
/// shortest representation that parses back to the same value.
pub fn write_csv<W: Write>(ds: &CompositeDataset, writer: W, schema: &Schema) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        schema.source.clone(),
        schema.treatment.clone(),
        schema.outcome.clone(),
    ];
    header.extend(ds.covariate_names().iter().cloned());
    w.write_record(&header)?;
    for r in ds.rows() {
        let mut rec = vec![
            u8::from(r.d).to_string(),
            u8::from(r.t).to_string(),
            r.y.to_string(),
        ];
        rec.extend(r.x.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellStats {
    pub d: u8,
    pub t: u8,
    pub count: usize,
    pub outcome_mean: Option<f64>,
    pub covariate_means: Vec<Option<f64>>,
    /// Sample standard deviations; absent below two rows.
    pub covariate_sds: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DescriptiveStats {
    pub n: usize,
    pub n1: usize,
    pub n2: usize,
    pub q_hat: f64,
    pub outcome_kind: OutcomeKind,
    pub trial_treated_fraction: f64,
    pub covariate_names: Vec<String>,
    pub cells: Vec<CellStats>,
    pub overall: CellStats,
}

fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.len() > 1).then(|| {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    });
    (Some(mean), sd)
}

fn cell_stats<'a>(
    d: u8,
    t: u8,
    rows: impl Iterator<Item = &'a Observation> + Clone,
    k: usize,
) -> CellStats {
    let ys: Vec<f64> = rows.clone().map(|r| r.y).collect();
    let (covariate_means, covariate_sds) = (0..k)
        .map(|j| mean_sd(&rows.clone().map(|r| r.x[j]).collect::<Vec<_>>()))
        .unzip();
    CellStats {
        d,
        t,
        count: ys.len(),
        outcome_mean: mean_sd(&ys).0,
        covariate_means,
        covariate_sds,
    }
}

pub fn summarize(ds: &CompositeDataset) -> DescriptiveStats {
    let k = ds.n_covariates();
    let cells = [(1u8, 1u8), (1, 0), (0, 0)]
        .into_iter()
        .map(|(d, t)| {
            let rows = ds
                .rows()
                .iter()
                .filter(move |r| u8::from(r.d) == d && u8::from(r.t) == t);
            cell_stats(d, t, rows, k)
        })
        .collect::<Vec<_>>();
    let treated = cells[0].count;
    DescriptiveStats {
        n: ds.n(),
        n1: ds.n1(),
        n2: ds.n2(),
        q_hat: ds.q_hat(),
        outcome_kind: ds.outcome_kind(),
        trial_treated_fraction: treated as f64 / ds.n1() as f64,
        covariate_names: ds.covariate_names().to_vec(),
        overall: cell_stats(2, 2, ds.rows().iter(), k),
        cells,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_ROWS: &str = "d,t,y,x1\n1,1,2.0,0.3\n0,0,1.1,-0.2\n";

    #[test]
    fn loads_two_row_csv() {
        let ds = read_csv(TWO_ROWS.as_bytes(), &Schema::default()).unwrap();
        assert_eq!(ds.n(), 2);
        assert_eq!(ds.n1(), 1);
        assert_eq!(ds.q_hat(), 0.5);
        assert_eq!(ds.rows()[1].x, vec![-0.2]);
        assert_eq!(ds.outcome_kind(), OutcomeKind::Continuous);
    }

    #[test]
    fn external_treated_row_is_rejected() {
        let csv = "d,t,y,x1\n1,1,2.0,0.3\n0,1,1.1,-0.2\n";
        match read_csv(csv.as_bytes(), &Schema::default()) {
            Err(Error::InvariantViolation { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected invariant violation, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_and_parse_errors_name_location() {
        let err = read_csv("d,y,x1\n1,2.0,0.3\n".as_bytes(), &Schema::default()).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(c) if c == "t"));

        let err = read_csv("d,t,y,x1\n1,1,2.0,abc\n".as_bytes(), &Schema::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 1, ref column, .. } if column == "x1"));

        let err = read_csv("d,t,y,x1\n1,2,2.0,0.1\n".as_bytes(), &Schema::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 1, ref column, .. } if column == "t"));

        // missing values are rejected outright
        let err = read_csv("d,t,y,x1\n1,1,,0.1\n".as_bytes(), &Schema::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 1, ref column, .. } if column == "y"));
    }

    #[test]
    fn column_order_is_free() {
        let schema = Schema {
            outcome: "cured".into(),
            treatment: "arm".into(),
            source: "site".into(),
            covariates: Some(vec!["bmi".into(), "age".into()]),
            outcome_kind: None,
        };
        let csv = "age,cured,site,bmi,arm\n40,1,1,22.5,1\n51,0,1,30.1,0\n63,1,0,25.0,0\n";
        let ds = read_csv(csv.as_bytes(), &schema).unwrap();
        assert_eq!(ds.covariate_names(), ["bmi", "age"]);
        assert_eq!(ds.rows()[0].x, vec![22.5, 40.0]);
        assert_eq!(ds.outcome_kind(), OutcomeKind::Binary);
    }

    #[test]
    fn realistic_sized_dataset_counts() {
        let mut rows = Vec::new();
        rows.extend((0..182).map(|_| Observation::new(1.0, vec![0.0], true, true)));
        rows.extend((0..180).map(|_| Observation::new(0.0, vec![0.0], false, true)));
        rows.extend((0..110).map(|_| Observation::new(0.0, vec![1.0], false, false)));
        let ds = CompositeDataset::new(rows, vec!["x".into()], None).unwrap();
        assert_eq!(ds.n(), 472);
        assert_eq!(ds.q_hat(), 362.0 / 472.0);
        assert_eq!(ds.q_hat() * ds.n() as f64, ds.n1() as f64);

        let s = summarize(&ds);
        let counts: Vec<_> = s.cells.iter().map(|c| (c.d, c.t, c.count)).collect();
        assert_eq!(counts, vec![(1, 1, 182), (1, 0, 180), (0, 0, 110)]);
        assert!((s.trial_treated_fraction - 182.0 / 362.0).abs() < 1e-15);
    }

    #[test]
    fn validation_reports() {
        let rows = vec![
            Observation::new(1.0, vec![0.1], true, true),
            Observation::new(0.0, vec![0.2], false, false),
        ];
        assert!(validate_rows(&rows, 1, None).violations.is_empty());

        let rows = vec![
            Observation::new(0.5, vec![0.1], true, true),
            Observation::new(0.0, vec![0.2], false, false),
        ];
        let rep = validate_rows(&rows, 1, Some(OutcomeKind::Binary));
        assert_eq!(rep.violations.len(), 1);
        assert_eq!(rep.violations[0].kind, ViolationKind::KindMismatch);
        assert!(!rep.usable);

        let rows = vec![
            Observation::new(0.5, vec![0.1], true, true),
            Observation::new(0.7, vec![f64::NAN], false, true),
        ];
        let rep = validate_rows(&rows, 1, None);
        assert!(rep
            .warnings
            .iter()
            .any(|w| w == "no external controls; only trial-based estimators available"));
        assert_eq!(rep.columns[1].non_finite, 1);
    }

    #[test]
    fn single_row_summary() {
        let ds = CompositeDataset::new(
            vec![Observation::new(2.5, vec![1.5, -3.0], true, true)],
            vec!["a".into(), "b".into()],
            None,
        )
        .unwrap();
        let s = summarize(&ds);
        assert_eq!(s.overall.outcome_mean, Some(2.5));
        assert_eq!(s.overall.covariate_means, vec![Some(1.5), Some(-3.0)]);
        assert_eq!(s.overall.covariate_sds, vec![None, None]);
        assert_eq!(s.cells[1].outcome_mean, None);
    }
}
