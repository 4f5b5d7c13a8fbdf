//! Study archives: per-study reported estimates, covariances and reporting
//! operators, with CSV loading, writing and validation.
//!
//! CSV columns: `study_id, component_index, estimate, se, stratum_index,
//! weight, cov_row, cov_col, cov_value`. Indices are 1-based. A row with a
//! non-empty `estimate` declares a component; `stratum_index`/`weight` add one
//! entry of the reporting operator for `(study_id, component_index)` (weight
//! defaults to 1); `cov_row, cov_col, cov_value` set one covariance entry
//! (symmetrically), overriding the diagonal implied by `se`.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Relative eigenvalue floor below which a covariance is rejected.
pub const PD_REL_TOL: f64 = 1e-10;
/// Condition number above which a covariance draws a warning.
pub const COND_WARN: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub study_id: String,
    pub estimate: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub reporting_operator: DMatrix<f64>,
}

impl StudySummary {
    /// Study reporting the full parameter vector with independent errors.
    pub fn full(id: impl Into<String>, estimate: &[f64], se: &[f64]) -> Self {
        let g = estimate.len();
        Self {
            study_id: id.into(),
            estimate: DVector::from_column_slice(estimate),
            covariance: DMatrix::from_diagonal(&DVector::from_iterator(g, se.iter().map(|s| s * s))),
            reporting_operator: DMatrix::identity(g, g),
        }
    }

    /// Study reporting a subset of coordinates (0-based) of a `dim`-vector.
    pub fn selection(id: impl Into<String>, dim: usize, coords: &[usize], estimate: &[f64], se: &[f64]) -> Self {
        let k = coords.len();
        let mut r = DMatrix::zeros(k, dim);
        for (row, &c) in coords.iter().enumerate() {
            r[(row, c)] = 1.0;
        }
        Self {
            study_id: id.into(),
            estimate: DVector::from_column_slice(estimate),
            covariance: DMatrix::from_diagonal(&DVector::from_iterator(k, se.iter().map(|s| s * s))),
            reporting_operator: r,
        }
    }

    pub fn k(&self) -> usize {
        self.estimate.len()
    }

    /// Coordinate `g` is reported as a pure selection row; returns `(row, weight)`.
    pub fn selection_row(&self, g: usize) -> Option<(usize, f64)> {
        (0..self.k()).find_map(|row| {
            let r = self.reporting_operator.row(row);
            let w = r[g];
            let others = r.iter().enumerate().all(|(j, &x)| j == g || x == 0.0);
            (w != 0.0 && others).then_some((row, w))
        })
    }

    /// True if the operator is square and invertible.
    pub fn is_full_reporting(&self) -> bool {
        let r = &self.reporting_operator;
        r.is_square() && linalg::rank(r, 1e-12) == r.nrows()
    }

    /// Implied estimate of the full parameter vector for full-reporting studies.
    pub fn implied_full(&self) -> Option<(DVector<f64>, DMatrix<f64>)> {
        if !self.is_full_reporting() {
            return None;
        }
        let rinv = self.reporting_operator.clone().try_inverse()?;
        let cov = &rinv * &self.covariance * rinv.transpose();
        Some((&rinv * &self.estimate, linalg::symmetrize(&cov)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyArchive {
    pub studies: Vec<StudySummary>,
    pub dimension: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{tag}: {}", self.message)
    }
}

impl StudyArchive {
    /// Build an archive, rejecting it if validation reports any error.
    pub fn new(studies: Vec<StudySummary>, dimension: usize) -> Result<Self> {
        let archive = Self { studies, dimension };
        if let Some(d) = validate_archive(&archive).into_iter().find(|d| d.severity == Severity::Error) {
            return Err(Error::Invalid(d.message));
        }
        Ok(archive)
    }

    pub fn len(&self) -> usize {
        self.studies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.studies.is_empty()
    }

    /// Shift every estimate by `R_i b`.
    pub fn shifted(&self, b: &DVector<f64>) -> Self {
        let mut out = self.clone();
        for s in &mut out.studies {
            s.estimate += &s.reporting_operator * b;
        }
        out
    }

    /// One-dimensional archive for coordinate `g`, built from every study that
    /// reports `g` through a pure selection row.
    pub fn coordinate(&self, g: usize) -> Result<Self> {
        let studies: Vec<StudySummary> = self
            .studies
            .iter()
            .filter_map(|s| {
                let (row, w) = s.selection_row(g)?;
                let est = s.estimate[row] / w;
                let var = s.covariance[(row, row)] / (w * w);
                Some(StudySummary::full(s.study_id.clone(), &[est], &[var.sqrt()]))
            })
            .collect();
        if studies.is_empty() {
            return Err(Error::Identification(format!("coordinate {} unidentified", g + 1)));
        }
        Ok(Self { studies, dimension: 1 })
    }

    /// Per-coordinate implied estimates and standard errors.
    pub fn implied_by_coordinate(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut out = vec![(Vec::new(), Vec::new()); self.dimension];
        for s in &self.studies {
            if let Some((theta, cov)) = s.implied_full() {
                for g in 0..self.dimension {
                    out[g].0.push(theta[g]);
                    out[g].1.push(cov[(g, g)].sqrt());
                }
                continue;
            }
            for (g, slot) in out.iter_mut().enumerate() {
                if let Some((row, w)) = s.selection_row(g) {
                    slot.0.push(s.estimate[row] / w);
                    slot.1.push(s.covariance[(row, row)].sqrt() / w.abs());
                }
            }
        }
        out
    }
}

/// Structural diagnostics for an archive; empty iff the archive is clean.
pub fn validate_archive(archive: &StudyArchive) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let err = |m: String| Diagnostic { severity: Severity::Error, message: m };
    let g = archive.dimension;
    if g == 0 {
        out.push(err("dimension must be at least 1".into()));
        return out;
    }
    if archive.studies.is_empty() {
        out.push(err("archive contains no studies".into()));
        return out;
    }
    let mut touched = vec![false; g];
    for s in &archive.studies {
        let id = &s.study_id;
        let k = s.estimate.len();
        let r = &s.reporting_operator;
        if k == 0 || s.covariance.nrows() != k || s.covariance.ncols() != k || r.nrows() != k {
            out.push(err(format!(
                "study {id}: estimate length {k}, covariance {}x{}, operator rows {} disagree",
                s.covariance.nrows(),
                s.covariance.ncols(),
                r.nrows()
            )));
            continue;
        }
        if r.ncols() != g {
            out.push(err(format!("study {id}: operator has {} columns, expected {g}", r.ncols())));
            continue;
        }
        if k > g || linalg::rank(r, 1e-12) < k {
            out.push(err(format!("study {id}: reporting operator is rank deficient")));
        }
        if s.estimate.iter().chain(s.covariance.iter()).chain(r.iter()).any(|x| !x.is_finite()) {
            out.push(err(format!("study {id}: non-finite entry")));
            continue;
        }
        if !linalg::is_symmetric(&s.covariance, 1e-12) {
            out.push(err(format!("study {id}: covariance not symmetric")));
        } else {
            let (lo, hi) = linalg::eig_extremes(&s.covariance);
            if !(hi > 0.0 && lo > PD_REL_TOL * hi) {
                out.push(err(format!(
                    "study {id}: covariance not positive definite (eigenvalues {lo:e}..{hi:e})"
                )));
            } else if hi / lo > COND_WARN {
                out.push(Diagnostic {
                    severity: Severity::Warning,
                    message: format!("study {id}: near-singular covariance (condition number {:.3e})", hi / lo),
                });
            }
        }
        for (c, t) in touched.iter_mut().enumerate() {
            if r.column(c).iter().any(|&x| x != 0.0) {
                *t = true;
            }
        }
    }
    for (c, t) in touched.iter().enumerate() {
        if !t {
            out.push(err(format!("coordinate {} unidentified", c + 1)));
        }
    }
    out
}

#[derive(Default)]
struct Component {
    estimate: Option<f64>,
    se: Option<f64>,
    operator: Vec<(usize, f64)>,
    line: usize,
}

#[derive(Default)]
struct PendingStudy {
    components: HashMap<usize, Component>,
    cov: Vec<(usize, usize, f64, usize)>,
    first_line: usize,
}

fn parse_field<T: std::str::FromStr>(raw: Option<&str>, name: &str, src: &str, line: usize) -> Result<Option<T>> {
    match raw.map(str::trim) {
        None | Some("") => Ok(None),
        Some(v) => v.parse::<T>().map(Some).map_err(|_| Error::Parse {
            source_name: src.into(),
            line,
            msg: format!("cannot parse {name} value {v:?}"),
        }),
    }
}

/// Load and validate an archive CSV.
pub fn load_archive(path: impl AsRef<Path>, dimension: usize) -> Result<StudyArchive> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_archive(file, &path.display().to_string(), dimension)
}

/// Parse an archive from any reader; `source_name` is used in messages.
pub fn parse_archive<R: Read>(reader: R, source_name: &str, dimension: usize) -> Result<StudyArchive> {
    let perr = |line: usize, msg: String| Error::Parse { source_name: source_name.into(), line, msg };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| perr(1, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let required = ["study_id", "component_index", "estimate", "se", "stratum_index"];
    for name in required {
        if col(name).is_none() {
            return Err(perr(1, format!("missing column {name}")));
        }
    }
    let (c_id, c_comp, c_est, c_se, c_str) = (
        col("study_id").unwrap(),
        col("component_index").unwrap(),
        col("estimate").unwrap(),
        col("se").unwrap(),
        col("stratum_index").unwrap(),
    );
    let (c_w, c_cr, c_cc, c_cv) = (col("weight"), col("cov_row"), col("cov_col"), col("cov_value"));

    let mut order: Vec<String> = Vec::new();
    let mut pending: HashMap<String, PendingStudy> = HashMap::new();
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| perr(line, e.to_string()))?;
        let get = |c: Option<usize>| c.and_then(|c| rec.get(c));
        let id = get(Some(c_id)).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(perr(line, "empty study_id".into()));
        }
        let comp: usize = parse_field(get(Some(c_comp)), "component_index", source_name, line)?
            .ok_or_else(|| perr(line, "missing component_index".into()))?;
        if comp == 0 {
            return Err(perr(line, "component_index is 1-based".into()));
        }
        let est: Option<f64> = parse_field(get(Some(c_est)), "estimate", source_name, line)?;
        let se: Option<f64> = parse_field(get(Some(c_se)), "se", source_name, line)?;
        let stratum: Option<usize> = parse_field(get(Some(c_str)), "stratum_index", source_name, line)?;
        let weight: Option<f64> = parse_field(get(c_w), "weight", source_name, line)?;
        let cr: Option<usize> = parse_field(get(c_cr), "cov_row", source_name, line)?;
        let cc: Option<usize> = parse_field(get(c_cc), "cov_col", source_name, line)?;
        let cv: Option<f64> = parse_field(get(c_cv), "cov_value", source_name, line)?;

        if !pending.contains_key(&id) {
            order.push(id.clone());
        }
        let study = pending.entry(id.clone()).or_insert_with(|| PendingStudy { first_line: line, ..Default::default() });
        let entry = study.components.entry(comp).or_insert_with(|| Component { line, ..Default::default() });
        if let Some(e) = est {
            if entry.estimate.is_some_and(|old| old != e) {
                return Err(perr(line, format!("study {id}: conflicting estimates for component {comp}")));
            }
            entry.estimate = Some(e);
            entry.line = line;
        }
        if let Some(s) = se {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(perr(line, format!("study {id}: se must be finite and nonnegative")));
            }
            entry.se = Some(s);
        }
        if let Some(g) = stratum {
            if g == 0 || g > dimension {
                return Err(perr(line, format!("stratum_index {g} outside 1..={dimension}")));
            }
            entry.operator.push((g - 1, weight.unwrap_or(1.0)));
        } else if weight.is_some() {
            return Err(perr(line, "weight given without stratum_index".into()));
        }
        match (cr, cc, cv) {
            (None, None, None) => {}
            (Some(r), Some(c), Some(v)) if r >= 1 && c >= 1 => study.cov.push((r - 1, c - 1, v, line)),
            _ => return Err(perr(line, "incomplete covariance triple".into())),
        }
    }

    let mut studies = Vec::with_capacity(order.len());
    for id in order {
        let p = pending.remove(&id).expect("grouped study");
        let k = p.components.keys().copied().max().unwrap_or(0);
        let mut estimate = DVector::zeros(k);
        let mut cov = DMatrix::zeros(k, k);
        let mut r = DMatrix::zeros(k, dimension);
        let mut explicit_diag = vec![false; k];
        for &(i, j, _, line) in &p.cov {
            if i >= k || j >= k {
                return Err(perr(line, format!("study {id}: covariance index outside 1..={k}")));
            }
            if i == j {
                explicit_diag[i] = true;
            }
        }
        for c in 0..k {
            let comp = p
                .components
                .get(&(c + 1))
                .ok_or_else(|| perr(p.first_line, format!("study {id}: component {} missing", c + 1)))?;
            estimate[c] = comp.estimate.ok_or_else(|| perr(comp.line, format!("study {id}: component {} has no estimate", c + 1)))?;
            match comp.se {
                Some(s) => cov[(c, c)] = s * s,
                None if explicit_diag[c] => {}
                None => return Err(perr(comp.line, format!("study {id}: component {} has no se or variance", c + 1))),
            }
            if comp.operator.is_empty() {
                return Err(perr(comp.line, format!("study {id}: component {} has no stratum_index", c + 1)));
            }
            for &(g, w) in &comp.operator {
                r[(c, g)] += w;
            }
        }
        for &(i, j, v, _) in &p.cov {
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
        studies.push(StudySummary { study_id: id, estimate, covariance: cov, reporting_operator: r });
    }

    let archive = StudyArchive { studies, dimension };
    for d in validate_archive(&archive) {
        if d.severity == Severity::Error {
            let study = archive
                .studies
                .iter()
                .find(|s| d.message.starts_with(&format!("study {}:", s.study_id)))
                .map(|s| s.study_id.clone());
            return Err(match study {
                Some(study) => Error::Validation {
                    msg: d.message.splitn(2, ": ").nth(1).unwrap_or(&d.message).to_string(),
                    study,
                },
                None => Error::Invalid(d.message),
            });
        }
    }
    Ok(archive)
}

/// Write an archive as CSV. Covariances are written as explicit upper-triangle
/// entries so reloading reproduces them exactly.
pub fn write_archive<W: Write>(archive: &StudyArchive, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let wrap = |e: csv::Error| Error::Invalid(format!("csv write failed: {e}"));
    w.write_record(["study_id", "component_index", "estimate", "se", "stratum_index", "weight", "cov_row", "cov_col", "cov_value"])
        .map_err(wrap)?;
    for s in &archive.studies {
        let k = s.k();
        for c in 0..k {
            let nz: Vec<(usize, f64)> = (0..archive.dimension)
                .filter_map(|g| {
                    let x = s.reporting_operator[(c, g)];
                    (x != 0.0).then_some((g, x))
                })
                .collect();
            let comp = (c + 1).to_string();
            for (i, (g, x)) in nz.iter().enumerate() {
                let (est, se) = if i == 0 {
                    (s.estimate[c].to_string(), s.covariance[(c, c)].sqrt().to_string())
                } else {
                    (String::new(), String::new())
                };
                w.write_record([s.study_id.as_str(), &comp, &est, &se, &(g + 1).to_string(), &x.to_string(), "", "", ""])
                    .map_err(wrap)?;
            }
        }
        for i in 0..k {
            for j in i..k {
                let v = s.covariance[(i, j)];
                if i != j && v == 0.0 {
                    continue;
                }
                let (r, c) = ((i + 1).to_string(), (j + 1).to_string());
                w.write_record([s.study_id.as_str(), &r, "", "", "", "", &r, &c, &v.to_string()]).map_err(wrap)?;
            }
        }
    }
    w.flush().map_err(|e| Error::Invalid(format!("csv flush failed: {e}")))?;
    Ok(())
}

pub fn save_archive(archive: &StudyArchive, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_archive(archive, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "study_id,component_index,estimate,se,stratum_index,weight,cov_row,cov_col,cov_value\n";

    fn parse(body: &str, dim: usize) -> Result<StudyArchive> {
        parse_archive(format!("{HEADER}{body}").as_bytes(), "test.csv", dim)
    }

    #[test]
    fn two_full_studies_with_ses() {
        let a = parse("a,1,0.1,0.2,1,,,,\na,2,0.3,0.4,2,,,,\nb,1,1,1,1,,,,\nb,2,2,2,2,,,,\n", 2).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a.studies[0].reporting_operator, DMatrix::identity(2, 2));
        assert!((a.studies[0].covariance[(1, 1)] - 0.16).abs() < 1e-15);
        assert_eq!(a.studies[0].covariance[(0, 1)], 0.0);
        assert!(validate_archive(&a).is_empty());
    }

    #[test]
    fn zero_se_is_rejected() {
        let e = parse("a,1,0.1,0,1,,,,\n", 1).unwrap_err();
        match e {
            Error::Validation { study, .. } => assert_eq!(study, "a"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_row_reports_line() {
        let e = parse("a,1,0.1,0.2,1,,,,\nb,1,abc,0.2,1,,,,\n", 1).unwrap_err();
        match e {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn explicit_covariance_overrides_se() {
        let a = parse("a,1,0,1,1,,,,\na,2,0,1,2,,,,\na,1,,,,,1,2,0.5,\na,1,,,,,1,1,2\n", 2).unwrap();
        let c = &a.studies[0].covariance;
        assert_eq!(c[(0, 0)], 2.0);
        assert_eq!(c[(0, 1)], 0.5);
        assert_eq!(c[(1, 0)], 0.5);
        assert_eq!(c[(1, 1)], 1.0);
    }

    #[test]
    fn non_selection_operator_via_repeated_rows() {
        let a = parse("a,1,0.5,0.1,1,0.5,,,\na,1,,,2,0.5,,,\nb,1,0.2,0.1,1,,,,\n", 2).unwrap();
        let r = &a.studies[0].reporting_operator;
        assert_eq!(r.row(0).iter().copied().collect::<Vec<_>>(), vec![0.5, 0.5]);
        assert!(a.studies[0].selection_row(0).is_none());
    }

    #[test]
    fn rank_deficient_operator_rejected() {
        let e = parse("a,1,0.5,0.1,1,,,,\na,2,0.5,0.1,1,,,,\n", 2).unwrap_err();
        assert!(e.to_string().contains("rank deficient"), "{e}");
    }

    #[test]
    fn unidentified_coordinate_diagnostic() {
        let s = StudySummary::selection("a", 3, &[0, 1], &[0.0, 0.0], &[1.0, 1.0]);
        let a = StudyArchive { studies: vec![s], dimension: 3 };
        let d = validate_archive(&a);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].message, "coordinate 3 unidentified");
    }

    #[test]
    fn near_singular_covariance_warns() {
        let s = StudySummary {
            study_id: "x".into(),
            estimate: DVector::from_vec(vec![0.0, 0.0]),
            covariance: DMatrix::from_diagonal(&DVector::from_vec(vec![1e-3, 1e-12])),
            reporting_operator: DMatrix::identity(2, 2),
        };
        let a = StudyArchive { studies: vec![s], dimension: 2 };
        let d = validate_archive(&a);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].severity, Severity::Warning);
    }

    #[test]
    fn round_trip_is_exact() {
        let mut studies = vec![StudySummary::full("s1", &[0.123456789012345, -1.0 / 3.0], &[0.1, 0.7])];
        studies[0].covariance[(0, 1)] = 0.0123;
        studies[0].covariance[(1, 0)] = 0.0123;
        studies.push(StudySummary::selection("s2", 2, &[1], &[std::f64::consts::PI], &[0.3]));
        let a = StudyArchive::new(studies, 2).unwrap();
        let mut buf = Vec::new();
        write_archive(&a, &mut buf).unwrap();
        let b = parse_archive(buf.as_slice(), "mem", 2).unwrap();
        assert_eq!(a, b);
    }
}
