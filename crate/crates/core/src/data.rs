//! Observed-data model: one non-probability sample A with outcomes and one
//! design-weighted probability sample B with covariates only, held together
//! in a single validated container.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observation. Covariates never include the intercept; membership in
/// A (`delta`) and B (`in_b`) may overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub x: Vec<f64>,
    /// Member of the non-probability sample A.
    pub delta: bool,
    /// Member of the probability sample B.
    pub in_b: bool,
    /// Outcome, observed iff `delta`.
    pub y: Option<f64>,
    /// Design weight d = 1/pi, present iff `in_b`.
    pub d: Option<f64>,
    /// Design inclusion probability, stored when known.
    pub pi: Option<f64>,
}

impl UnitRecord {
    pub fn a_unit(x: Vec<f64>, y: f64) -> Self {
        UnitRecord {
            x,
            delta: true,
            in_b: false,
            y: Some(y),
            d: None,
            pi: None,
        }
    }

    pub fn b_unit(x: Vec<f64>, d: f64) -> Self {
        let pi = 1.0 / d;
        UnitRecord {
            x,
            delta: false,
            in_b: true,
            y: None,
            d: Some(d),
            pi: Some(pi),
        }
    }
}

/// Lower clamp applied to fitted propensities before any division.
#[derive(Debug, Clone, Copy)]
pub struct PositivityConfig {
    pub epsilon: f64,
}

impl Default for PositivityConfig {
    fn default() -> Self {
        PositivityConfig { epsilon: 1e-6 }
    }
}

impl PositivityConfig {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 0.5) {
            return Err(Error::Config(format!(
                "positivity epsilon must be in (0, 0.5), got {epsilon}"
            )));
        }
        Ok(PositivityConfig { epsilon })
    }

    /// Clamp a probability into [epsilon, 1 - 1e-12].
    pub fn clamp(&self, p: f64) -> f64 {
        p.max(self.epsilon).min(1.0 - 1e-12)
    }
}

/// Which rows a design matrix covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Membership {
    A,
    B,
    All,
}

/// Validated pair of samples sharing one covariate schema.
///
/// Immutable after construction; shared freely across threads.
#[derive(Debug, Clone)]
pub struct CombinedSample {
    records: Vec<UnitRecord>,
    p: usize,
    names: Vec<String>,
    n_a: usize,
    n_b: usize,
}

impl CombinedSample {
    pub fn new(records: Vec<UnitRecord>, names: Vec<String>) -> Result<Self> {
        let p = names.len();
        let n_a = records.iter().filter(|r| r.delta).count();
        let n_b = records.iter().filter(|r| r.in_b).count();
        let sample = CombinedSample {
            records,
            p,
            names,
            n_a,
            n_b,
        };
        let report = sample.validate();
        if report.is_empty() {
            Ok(sample)
        } else {
            Err(Error::Validation(report.join("; ")))
        }
    }

    pub fn records(&self) -> &[UnitRecord] {
        &self.records
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_a(&self) -> usize {
        self.n_a
    }

    pub fn n_b(&self) -> usize {
        self.n_b
    }

    /// Records of A, in stable record order.
    pub fn a_records(&self) -> impl Iterator<Item = &UnitRecord> {
        self.records.iter().filter(|r| r.delta)
    }

    /// Records of B, in stable record order.
    pub fn b_records(&self) -> impl Iterator<Item = &UnitRecord> {
        self.records.iter().filter(|r| r.in_b)
    }

    /// Outcomes over A in record order.
    pub fn y_a(&self) -> Vec<f64> {
        self.a_records().map(|r| r.y.unwrap()).collect()
    }

    /// Design weights over B in record order.
    pub fn d_b(&self) -> Vec<f64> {
        self.b_records().map(|r| r.d.unwrap()).collect()
    }

    /// A-membership indicators over B in record order (0 when overlap unknown).
    pub fn delta_b(&self) -> Vec<f64> {
        self.b_records()
            .map(|r| if r.delta { 1.0 } else { 0.0 })
            .collect()
    }

    /// Report every violated invariant; empty means valid. Pure, never mutates.
    pub fn validate(&self) -> Vec<String> {
        let mut report = Vec::new();
        if self.n_a == 0 {
            report.push("sample A is empty".to_string());
        }
        if self.n_b == 0 {
            report.push("sample B is empty".to_string());
        }
        let mut seen = HashSet::new();
        for name in &self.names {
            if !seen.insert(name.as_str()) {
                report.push(format!("duplicate covariate label '{name}'"));
            }
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.x.len() != self.p {
                report.push(format!(
                    "record {i}: covariate length {} != {}",
                    r.x.len(),
                    self.p
                ));
            }
            if r.x.iter().any(|v| !v.is_finite()) {
                report.push(format!("record {i}: non-finite covariate"));
            }
            if !r.delta && !r.in_b {
                report.push(format!("record {i}: belongs to neither sample"));
            }
            if r.delta && r.y.is_none() {
                report.push(format!("record {i}: missing outcome for A unit"));
            }
            if !r.delta && r.y.is_some() {
                report.push(format!("record {i}: outcome present on non-A unit"));
            }
            if r.in_b {
                match r.d {
                    None => report.push(format!("record {i}: missing design weight for B unit")),
                    Some(d) if !(d >= 1.0 && d.is_finite()) => {
                        report.push(format!("record {i}: design weight {d} < 1"))
                    }
                    _ => {}
                }
            } else if r.d.is_some() {
                report.push(format!("record {i}: design weight present on non-B unit"));
            }
            if let (Some(pi), Some(d)) = (r.pi, r.d) {
                if (pi * d - 1.0).abs() >= 1e-12 {
                    report.push(format!("record {i}: pi*d = {} != 1", pi * d));
                }
            }
        }
        report
    }

    /// Design matrix over the requested membership, in stable record order.
    /// `subset` holds covariate indices; an intercept column of ones is
    /// prepended when `with_intercept`.
    pub fn design_matrix(
        &self,
        subset: &[usize],
        with_intercept: bool,
        membership: Membership,
    ) -> Result<DMatrix<f64>> {
        if subset.is_empty() && !with_intercept {
            return Err(Error::Dimension(
                "empty covariate subset with no intercept".to_string(),
            ));
        }
        if let Some(&j) = subset.iter().find(|&&j| j >= self.p) {
            return Err(Error::Dimension(format!(
                "covariate index {j} out of range (p = {})",
                self.p
            )));
        }
        let rows: Vec<&UnitRecord> = self
            .records
            .iter()
            .filter(|r| match membership {
                Membership::A => r.delta,
                Membership::B => r.in_b,
                Membership::All => true,
            })
            .collect();
        let q = subset.len() + usize::from(with_intercept);
        let mut m = DMatrix::zeros(rows.len(), q);
        for (i, r) in rows.iter().enumerate() {
            let mut c = 0;
            if with_intercept {
                m[(i, c)] = 1.0;
                c += 1;
            }
            for &j in subset {
                m[(i, c)] = r.x[j];
                c += 1;
            }
        }
        Ok(m)
    }
}

/// Column mapping for CSV ingestion. Never positional: every field names a
/// header column explicitly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaDescriptor {
    pub covariates: Vec<String>,
    /// A-membership column; absent means every row is an A unit.
    pub delta: Option<String>,
    /// B-membership column; absent means every row is a B unit iff `d` given.
    pub in_b: Option<String>,
    pub y: Option<String>,
    pub d: Option<String>,
    pub pi: Option<String>,
}

impl SchemaDescriptor {
    /// Parse `key=value` lines (or `;`-separated pairs). Keys: covariates
    /// (comma list), delta, in_b, y, d, pi.
    pub fn parse(text: &str) -> Result<Self> {
        let mut covariates = Vec::new();
        let mut delta = None;
        let mut in_b = None;
        let mut y = None;
        let mut d = None;
        let mut pi = None;
        for pair in text.split(|c| c == ';' || c == '\n') {
            let pair = pair.trim();
            if pair.is_empty() || pair.starts_with('#') {
                continue;
            }
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("schema entry '{pair}' is not key=value")))?;
            let v = v.trim().to_string();
            match k.trim() {
                "covariates" => covariates = v.split(',').map(|s| s.trim().to_string()).collect(),
                "delta" => delta = Some(v),
                "in_b" => in_b = Some(v),
                "y" | "outcome" => y = Some(v),
                "d" | "weight" => d = Some(v),
                "pi" => pi = Some(v),
                other => return Err(Error::Config(format!("unknown schema key '{other}'"))),
            }
        }
        if covariates.is_empty() {
            return Err(Error::Config("schema names no covariates".to_string()));
        }
        Ok(SchemaDescriptor {
            covariates,
            delta,
            in_b,
            y,
            d,
            pi,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn parse_cell(raw: &str, row: usize, col: &str) -> Result<Option<f64>> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(None);
    }
    raw.parse::<f64>().map(Some).map_err(|_| Error::Parse {
        row,
        msg: format!("non-numeric value '{raw}' in column '{col}'"),
    })
}

fn parse_flag(raw: &str, row: usize, col: &str) -> Result<bool> {
    match raw.trim() {
        "1" | "1.0" | "true" => Ok(true),
        "0" | "0.0" | "false" | "" => Ok(false),
        other => Err(Error::Parse {
            row,
            msg: format!("column '{col}' must be 0/1, got '{other}'"),
        }),
    }
}

/// Parse rows of a CSV file into unit records; empty cell = structurally
/// absent y/d.
pub fn read_records(path: &Path, schema: &SchemaDescriptor) -> Result<Vec<UnitRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers().map_err(|e| Error::Parse {
        row: 0,
        msg: e.to_string(),
    })?;
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Validation(format!("missing required column '{name}'")))
    };
    let xi: Vec<usize> = schema
        .covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;
    let di = schema.delta.as_deref().map(col).transpose()?;
    let bi = schema.in_b.as_deref().map(col).transpose()?;
    let yi = schema.y.as_deref().map(col).transpose()?;
    let wi = schema.d.as_deref().map(col).transpose()?;
    let pii = schema.pi.as_deref().map(col).transpose()?;

    let mut records = Vec::new();
    for (idx, row) in reader.records().enumerate() {
        let rownum = idx + 1;
        let row = row.map_err(|e| Error::Parse {
            row: rownum,
            msg: e.to_string(),
        })?;
        let cell = |i: usize| row.get(i).unwrap_or("");
        let mut x = Vec::with_capacity(xi.len());
        for (&i, name) in xi.iter().zip(&schema.covariates) {
            let v = parse_cell(cell(i), rownum, name)?.ok_or_else(|| Error::Parse {
                row: rownum,
                msg: format!("missing covariate '{name}'"),
            })?;
            x.push(v);
        }
        let d_flag = match di {
            Some(i) => parse_flag(cell(i), rownum, schema.delta.as_deref().unwrap())?,
            None => true,
        };
        let b_flag = match bi {
            Some(i) => parse_flag(cell(i), rownum, schema.in_b.as_deref().unwrap())?,
            None => wi.is_some(),
        };
        let y = match yi {
            Some(i) => parse_cell(cell(i), rownum, schema.y.as_deref().unwrap())?,
            None => None,
        };
        let d = match wi {
            Some(i) => parse_cell(cell(i), rownum, schema.d.as_deref().unwrap())?,
            None => None,
        };
        let pi = match pii {
            Some(i) => parse_cell(cell(i), rownum, schema.pi.as_deref().unwrap())?,
            None => d.map(|d| 1.0 / d),
        };
        records.push(UnitRecord {
            x,
            delta: d_flag,
            in_b: b_flag,
            y,
            d,
            pi: if b_flag { pi } else { None },
        });
    }
    Ok(records)
}

/// Load a combined A+B file.
pub fn load_csv(path: &Path, schema: &SchemaDescriptor) -> Result<CombinedSample> {
    let records = read_records(path, schema)?;
    CombinedSample::new(records, schema.covariates.clone())
}

/// Load A and B from separate files sharing the covariate schema. Rows of
/// the A file are forced to delta=1, rows of the B file to in_b=1.
pub fn load_csv_pair(
    path_a: &Path,
    path_b: &Path,
    schema: &SchemaDescriptor,
) -> Result<CombinedSample> {
    let schema_a = SchemaDescriptor {
        d: None,
        pi: None,
        in_b: None,
        delta: None,
        ..schema.clone()
    };
    let schema_b = SchemaDescriptor {
        y: None,
        delta: schema.delta.clone(),
        in_b: None,
        ..schema.clone()
    };
    let mut records = read_records(path_a, &schema_a)?;
    for r in &mut records {
        r.delta = true;
        r.in_b = false;
    }
    let mut b_records = read_records(path_b, &schema_b)?;
    for r in &mut b_records {
        r.in_b = true;
        if r.pi.is_none() {
            r.pi = r.d.map(|d| 1.0 / d);
        }
    }
    records.extend(b_records);
    CombinedSample::new(records, schema.covariates.clone())
}

/// Write a combined CSV with columns covariates.., delta, in_b, y, d, pi.
pub fn write_csv(sample: &CombinedSample, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = sample.names().to_vec();
    header.extend(
        ["delta", "in_b", "y", "d", "pi"]
            .iter()
            .map(|s| s.to_string()),
    );
    writer.write_record(&header)?;
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.17e}")).unwrap_or_default();
    for r in sample.records() {
        let mut row: Vec<String> = r.x.iter().map(|v| format!("{v:.17e}")).collect();
        row.push(if r.delta { "1" } else { "0" }.to_string());
        row.push(if r.in_b { "1" } else { "0" }.to_string());
        row.push(fmt(r.y));
        row.push(fmt(r.d));
        row.push(fmt(r.pi));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Schema matching `write_csv` output for the given covariate names.
pub fn roundtrip_schema(names: &[String]) -> SchemaDescriptor {
    SchemaDescriptor {
        covariates: names.to_vec(),
        delta: Some("delta".to_string()),
        in_b: Some("in_b".to_string()),
        y: Some("y".to_string()),
        d: Some("d".to_string()),
        pi: Some("pi".to_string()),
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse {
            row: 0,
            msg: e.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_sample() -> CombinedSample {
        CombinedSample::new(
            vec![
                UnitRecord::a_unit(vec![1.0, 2.0], 5.0),
                UnitRecord::b_unit(vec![0.5, 1.0], 2.0),
                UnitRecord::b_unit(vec![0.0, -1.0], 4.0),
            ],
            vec!["x1".to_string(), "x2".to_string()],
        )
        .unwrap()
    }

    #[test]
    fn missing_outcome_reported() {
        let mut records = vec![
            UnitRecord::a_unit(vec![1.0], 5.0),
            UnitRecord::b_unit(vec![0.5], 2.0),
        ];
        records[0].y = None;
        let sample = CombinedSample {
            records,
            p: 1,
            names: vec!["x1".to_string()],
            n_a: 1,
            n_b: 1,
        };
        let report = sample.validate();
        assert!(report.iter().any(|m| m.contains("missing outcome")));
        // pure: identical on repeat
        assert_eq!(report, sample.validate());
    }

    #[test]
    fn valid_sample_empty_report() {
        assert!(toy_sample().validate().is_empty());
    }

    #[test]
    fn pi_d_consistency() {
        let r = UnitRecord::b_unit(vec![0.0], 2.0);
        assert_eq!(r.pi, Some(0.5));
        let s = CombinedSample::new(
            vec![UnitRecord::a_unit(vec![1.0], 1.0), r],
            vec!["x1".to_string()],
        )
        .unwrap();
        assert!(s.validate().is_empty());
    }

    #[test]
    fn overlap_accepted() {
        let mut r = UnitRecord::b_unit(vec![1.0], 2.0);
        r.delta = true;
        r.y = Some(3.0);
        let s = CombinedSample::new(vec![r], vec!["x1".to_string()]).unwrap();
        assert_eq!(s.n_a(), 1);
        assert_eq!(s.n_b(), 1);
    }

    #[test]
    fn design_matrix_shapes() {
        let s = toy_sample();
        let m = s.design_matrix(&[], true, Membership::B).unwrap();
        assert_eq!(m.shape(), (2, 1));
        assert!(m.iter().all(|&v| v == 1.0));
        let m = s.design_matrix(&[0, 1], true, Membership::A).unwrap();
        assert_eq!(m.shape(), (1, 3));
        assert_eq!(m[(0, 0)], 1.0);
        assert_eq!(m[(0, 1)], 1.0);
        assert_eq!(m[(0, 2)], 2.0);
        let m = s.design_matrix(&[0, 1], true, Membership::All).unwrap();
        assert_eq!(m.shape(), (3, 3));
        assert!(s.design_matrix(&[], false, Membership::B).is_err());
        assert!(s.design_matrix(&[7], true, Membership::B).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let s = toy_sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sample.csv");
        write_csv(&s, &path).unwrap();
        let schema = roundtrip_schema(s.names());
        let back = load_csv(&path, &schema).unwrap();
        assert_eq!(back.n_a(), s.n_a());
        assert_eq!(back.n_b(), s.n_b());
        for (a, b) in s.records().iter().zip(back.records()) {
            for (u, v) in a.x.iter().zip(&b.x) {
                assert!((u - v).abs() < 1e-12);
            }
            assert_eq!(a.delta, b.delta);
            assert_eq!(a.in_b, b.in_b);
            match (a.y, b.y) {
                (Some(u), Some(v)) => assert!((u - v).abs() < 1e-12),
                (None, None) => {}
                _ => panic!("outcome mismatch"),
            }
        }
    }

    #[test]
    fn csv_parse_error_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "x1,delta,in_b,y,d\n1.0,1,0,2.0,\nfoo,0,1,,3.0\n").unwrap();
        let schema =
            SchemaDescriptor::parse("covariates=x1;delta=delta;in_b=in_b;y=y;d=d").unwrap();
        match load_csv(&path, &schema) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_three_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(
            &path,
            "x1,delta,in_b,y,d\n1.0,1,0,2.0,\n0.5,0,1,,2.0\n0.2,0,1,,4.0\n",
        )
        .unwrap();
        let schema =
            SchemaDescriptor::parse("covariates=x1;delta=delta;in_b=in_b;y=y;d=d").unwrap();
        let s = load_csv(&path, &schema).unwrap();
        assert_eq!(s.n_a(), 1);
        assert_eq!(s.n_b(), 2);
    }
}
