//! Observed-data model, standardization, CSV ingestion and sample splitting.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{purpose, stream_rng};
use crate::scalar::{mean, sample_variance, Scalar};

/// Observed sample `{(X_i, Y_i, A_i)}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    covariates: Array2<T>,
    treatment: Vec<bool>,
    outcome: Vec<T>,
    covariate_names: Vec<String>,
    outcome_name: String,
    treatment_name: String,
}

impl<T: Scalar> Dataset<T> {
    /// Builds a dataset with generated column names `x1..xp`, `y`, `a`.
    pub fn new(covariates: Array2<T>, treatment: Vec<bool>, outcome: Vec<T>) -> Result<Self> {
        let names = (1..=covariates.ncols()).map(|j| format!("x{j}")).collect();
        Self::with_names(covariates, treatment, outcome, names, "y".into(), "a".into())
    }

    pub fn with_names(
        covariates: Array2<T>,
        treatment: Vec<bool>,
        outcome: Vec<T>,
        covariate_names: Vec<String>,
        outcome_name: String,
        treatment_name: String,
    ) -> Result<Self> {
        let (n, p) = covariates.dim();
        if n < 2 {
            return Err(Error::Invariant(format!("need at least 2 rows, got {n}")));
        }
        if p < 1 {
            return Err(Error::Invariant("need at least one covariate".into()));
        }
        if treatment.len() != n || outcome.len() != n {
            return Err(Error::Invariant(format!(
                "length mismatch: {n} covariate rows, {} treatments, {} outcomes",
                treatment.len(),
                outcome.len()
            )));
        }
        if covariate_names.len() != p {
            return Err(Error::Invariant("covariate name count does not match p".into()));
        }
        if let Some(((i, j), _)) = covariates.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Invariant(format!("non-finite covariate at row {i}, column {j}")));
        }
        if let Some(i) = outcome.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invariant(format!("non-finite outcome at row {i}")));
        }
        Ok(Dataset {
            covariates,
            treatment,
            outcome,
            covariate_names,
            outcome_name,
            treatment_name,
        })
    }

    pub fn n(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn covariates(&self) -> &Array2<T> {
        &self.covariates
    }

    pub fn treatment(&self) -> &[bool] {
        &self.treatment
    }

    pub fn outcome(&self) -> &[T] {
        &self.outcome
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    pub fn treatment_name(&self) -> &str {
        &self.treatment_name
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, T> {
        self.covariates.row(i)
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        self.covariates.column(j).to_vec()
    }

    /// Treatment as 0/1 reals.
    pub fn treatment_values(&self) -> Vec<T> {
        self.treatment.iter().map(|&a| if a { T::one() } else { T::zero() }).collect()
    }

    pub fn n_treated(&self) -> usize {
        self.treatment.iter().filter(|&&a| a).count()
    }

    pub fn n_control(&self) -> usize {
        self.n() - self.n_treated()
    }

    /// Errors unless both arms are nonempty.
    pub fn require_both_groups(&self) -> Result<()> {
        let n1 = self.n_treated();
        if n1 == 0 || n1 == self.n() {
            return Err(Error::Invariant(format!(
                "both treatment groups must be nonempty (n1 = {n1}, n0 = {})",
                self.n() - n1
            )));
        }
        Ok(())
    }

    /// Rows `indices` in the given order (repeats allowed).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let covariates = self.covariates.select(ndarray::Axis(0), indices);
        Dataset::with_names(
            covariates,
            indices.iter().map(|&i| self.treatment[i]).collect(),
            indices.iter().map(|&i| self.outcome[i]).collect(),
            self.covariate_names.clone(),
            self.outcome_name.clone(),
            self.treatment_name.clone(),
        )
    }

    /// Copy with the outcome replaced.
    pub fn with_outcome(&self, outcome: Vec<T>) -> Result<Self> {
        Dataset::with_names(
            self.covariates.clone(),
            self.treatment.clone(),
            outcome,
            self.covariate_names.clone(),
            self.outcome_name.clone(),
            self.treatment_name.clone(),
        )
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            covariates: self.covariates.mapv(|v| U::of(v.f64())),
            treatment: self.treatment.clone(),
            outcome: self.outcome.iter().map(|v| U::of(v.f64())).collect(),
            covariate_names: self.covariate_names.clone(),
            outcome_name: self.outcome_name.clone(),
            treatment_name: self.treatment_name.clone(),
        }
    }
}

/// A vector mapped to mean 0 and unit sample variance, with the affine map
/// `original = scale * values + center`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardized<T> {
    pub values: Vec<T>,
    pub center: T,
    pub scale: T,
}

pub fn standardize<T: Scalar>(v: &[T]) -> Result<Standardized<T>> {
    if v.len() < 2 {
        return Err(Error::InvalidParameter("standardize needs at least 2 values".into()));
    }
    if v.iter().all(|&x| x == v[0]) {
        return Err(Error::ZeroVariance("all entries are equal".into()));
    }
    let center = mean(v);
    let scale = sample_variance(v).sqrt();
    let values = v.iter().map(|&x| (x - center) / scale).collect();
    Ok(Standardized { values, center, scale })
}

/// Jointly standardized outcome and treatment used as the forest response.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedPair<T> {
    pub y_tilde: Vec<T>,
    pub a_tilde: Vec<T>,
    pub y_center: T,
    pub y_scale: T,
    pub a_center: T,
    pub a_scale: T,
}

impl<T: Scalar> StandardizedPair<T> {
    pub fn new(y: &[T], a: &[T]) -> Result<Self> {
        let ys = standardize(y)?;
        let as_ = standardize(a)?;
        Ok(StandardizedPair {
            y_tilde: ys.values,
            a_tilde: as_.values,
            y_center: ys.center,
            y_scale: ys.scale,
            a_center: as_.center,
            a_scale: as_.scale,
        })
    }
}

/// Disjoint partition of row indices into a forest-fitting part and an
/// evaluation part. Both index lists are sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSplit {
    pub fit_indices: Vec<usize>,
    pub eval_indices: Vec<usize>,
    pub seed: u64,
}

const SPLIT_ATTEMPTS: u64 = 100;

/// Random split with `round(n * fit_fraction)` fitting rows. Draws are
/// repeated (at most 100 times) until both parts contain both arms.
pub fn split_sample<T: Scalar>(d: &Dataset<T>, fit_fraction: f64, seed: u64) -> Result<SampleSplit> {
    if !(fit_fraction > 0.0 && fit_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "fit fraction must lie in (0, 1), got {fit_fraction}"
        )));
    }
    let n = d.n();
    let n_fit = (n as f64 * fit_fraction).round() as usize;
    let n_eval = n.saturating_sub(n_fit);
    if n_fit < 2 || n_eval < 2 {
        return Err(Error::DegenerateSplit(format!(
            "split sizes {n_fit}/{n_eval} of n = {n}; both parts need at least 2 rows"
        )));
    }
    let n1 = d.n_treated();
    let n0 = n - n1;
    if n1 < 2 || n0 < 2 {
        return Err(Error::DegenerateSplit(format!(
            "each arm needs at least 2 units to appear on both sides (n1 = {n1}, n0 = {n0})"
        )));
    }
    let a = d.treatment();
    let both = |idx: &[usize]| idx.iter().any(|&i| a[i]) && idx.iter().any(|&i| !a[i]);
    let mut order: Vec<usize> = (0..n).collect();
    for attempt in 0..SPLIT_ATTEMPTS {
        let mut rng = stream_rng(seed, purpose::SPLIT + attempt);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut fit = order[..n_fit].to_vec();
        let mut eval = order[n_fit..].to_vec();
        if both(&eval) && both(&fit) {
            fit.sort_unstable();
            eval.sort_unstable();
            return Ok(SampleSplit { fit_indices: fit, eval_indices: eval, seed });
        }
    }
    Err(Error::DegenerateSplit(format!(
        "no split with both arms on each side after {SPLIT_ATTEMPTS} draws"
    )))
}

/// Column roles for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub outcome: String,
    pub treatment: String,
    /// `None` means every column that is neither outcome nor treatment.
    pub covariates: Option<Vec<String>>,
}

impl CsvSchema {
    pub fn new(outcome: &str, treatment: &str) -> Self {
        CsvSchema {
            outcome: outcome.to_string(),
            treatment: treatment.to_string(),
            covariates: None,
        }
    }

    pub fn with_covariates(mut self, names: &[&str]) -> Self {
        self.covariates = Some(names.iter().map(|s| s.to_string()).collect());
        self
    }
}

pub fn load_csv<T: Scalar>(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset<T>> {
    let file = File::open(path.as_ref())?;
    read_csv(file, schema)
}

fn parse_cell<T: Scalar>(cell: &str, line: usize, column: &str) -> Result<T> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Err(Error::Parse(format!("line {line}: missing value in column '{column}'")));
    }
    let v: f64 = cell
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: non-numeric value '{cell}' in column '{column}'")))?;
    if !v.is_finite() {
        return Err(Error::Invariant(format!(
            "line {line}: non-finite value '{cell}' in column '{column}'"
        )));
    }
    Ok(T::of(v))
}

pub fn read_csv<T: Scalar, R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset<T>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect::<Vec<_>>();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Parse("empty file: header row required".into()));
    }
    let position: HashMap<&str, usize> =
        headers.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let find = |name: &str| {
        position
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("column '{name}' not found")))
    };
    let y_col = find(&schema.outcome)?;
    let a_col = find(&schema.treatment)?;
    let covariate_names: Vec<String> = match &schema.covariates {
        Some(names) => names.clone(),
        None => headers
            .iter()
            .filter(|h| **h != schema.outcome && **h != schema.treatment)
            .cloned()
            .collect(),
    };
    if covariate_names.is_empty() {
        return Err(Error::Schema("no covariate columns".into()));
    }
    let x_cols = covariate_names.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;

    let p = x_cols.len();
    let mut xs = Vec::new();
    let mut treatment = Vec::new();
    let mut outcome = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let line = r + 2;
        let record = record.map_err(|e| Error::Parse(format!("line {line}: {e}")))?;
        if record.len() != headers.len() {
            return Err(Error::Parse(format!(
                "line {line}: expected {} fields, found {}",
                headers.len(),
                record.len()
            )));
        }
        outcome.push(parse_cell::<T>(&record[y_col], line, &schema.outcome)?);
        let a: f64 = parse_cell::<f64>(&record[a_col], line, &schema.treatment)?;
        treatment.push(match a {
            v if v == 0.0 => false,
            v if v == 1.0 => true,
            _ => {
                return Err(Error::Invariant(format!(
                    "line {line}: treatment must be 0 or 1, found '{}'",
                    record[a_col].trim()
                )))
            }
        });
        for (c, &col) in x_cols.iter().enumerate() {
            xs.push(parse_cell::<T>(&record[col], line, &covariate_names[c])?);
        }
    }
    if outcome.is_empty() {
        return Err(Error::Parse("no data rows".into()));
    }
    let covariates = Array2::from_shape_vec((outcome.len(), p), xs)
        .map_err(|e| Error::Parse(e.to_string()))?;
    Dataset::with_names(
        covariates,
        treatment,
        outcome,
        covariate_names,
        schema.outcome.clone(),
        schema.treatment.clone(),
    )
}

/// Writes `outcome, treatment, covariates...` with 17 significant digits,
/// which round-trips every `f64` exactly.
pub fn write_csv<T: Scalar, W: Write>(d: &Dataset<T>, mut out: W) -> Result<()> {
    let mut header = vec![d.outcome_name.clone(), d.treatment_name.clone()];
    header.extend(d.covariate_names.iter().cloned());
    writeln!(out, "{}", header.join(","))?;
    for i in 0..d.n() {
        let mut line = format!("{:.16e},{}", d.outcome[i].f64(), u8::from(d.treatment[i]));
        for v in d.covariates.row(i) {
            line.push_str(&format!(",{:.16e}", v.f64()));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn save_csv<T: Scalar>(d: &Dataset<T>, path: impl AsRef<Path>) -> Result<()> {
    let file = std::io::BufWriter::new(File::create(path)?);
    write_csv(d, file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy() -> Dataset<f64> {
        let x = Array2::from_shape_fn((10, 2), |(i, j)| (i * 3 + j) as f64 * 0.1);
        let a = (0..10).map(|i| i % 2 == 0).collect();
        let y = (0..10).map(|i| i as f64).collect();
        Dataset::new(x, a, y).unwrap()
    }

    #[test]
    fn standardize_two_points() {
        let s = standardize(&[1.0, 3.0]).unwrap();
        assert!((s.values[0] + 0.5f64.sqrt()).abs() < 1e-12);
        assert!((s.values[1] - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.center, 2.0);
        assert!((s.scale - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn standardize_constant_fails() {
        assert!(matches!(standardize(&[0.0, 0.0, 0.0]), Err(Error::ZeroVariance(_))));
    }

    #[test]
    fn standardize_is_idempotent() {
        let v = [0.3f64, -1.2, 4.4, 2.0, 0.0, 7.5];
        let once = standardize(&v).unwrap();
        let twice = standardize(&once.values).unwrap();
        assert!(twice.center.abs() < 1e-12);
        assert!((twice.scale - 1.0).abs() < 1e-12);
        for (a, b) in once.values.iter().zip(&twice.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn standardize_f32() {
        let s = standardize(&[1.0f32, 3.0]).unwrap();
        assert!((s.values[1] - 0.70710677).abs() < 1e-6);
    }

    #[test]
    fn dataset_rejects_non_finite() {
        let x = array![[1.0, f64::NAN], [0.0, 1.0]];
        assert!(Dataset::new(x, vec![true, false], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn csv_basic() {
        let text = "y,a,x1,x2\n1.5,1,0.1,0.2\n2.5,0,0.3,0.4\n0.5,1,0.5,0.6\n";
        let d: Dataset<f64> = read_csv(text.as_bytes(), &CsvSchema::new("y", "a")).unwrap();
        assert_eq!((d.n(), d.p()), (3, 2));
        assert_eq!(d.treatment(), &[true, false, true]);
        assert_eq!(d.outcome(), &[1.5, 2.5, 0.5]);
        assert_eq!(d.covariates()[[2, 1]], 0.6);
    }

    #[test]
    fn csv_declared_covariate_order() {
        let text = "x1,y,x2,a\n1,2,3,0\n4,5,6,1\n";
        let schema = CsvSchema::new("y", "a").with_covariates(&["x2", "x1"]);
        let d: Dataset<f64> = read_csv(text.as_bytes(), &schema).unwrap();
        assert_eq!(d.covariate_names(), &["x2".to_string(), "x1".to_string()]);
        assert_eq!(d.row(1).to_vec(), vec![6.0, 4.0]);
    }

    #[test]
    fn csv_errors() {
        let schema = CsvSchema::new("y", "a");
        let bad_a = "y,a,x1\n1,1,0\n2,2,1\n";
        assert!(matches!(read_csv::<f64, _>(bad_a.as_bytes(), &schema), Err(Error::Invariant(_))));
        assert!(matches!(read_csv::<f64, _>("".as_bytes(), &schema), Err(Error::Parse(_))));
        let missing = "y,x1\n1,0\n2,1\n";
        assert!(matches!(read_csv::<f64, _>(missing.as_bytes(), &schema), Err(Error::Schema(_))));
        let text = "y,a,x1\n1,1,abc\n2,0,1\n";
        assert!(matches!(read_csv::<f64, _>(text.as_bytes(), &schema), Err(Error::Parse(_))));
        let blank = "y,a,x1\n1,1,\n2,0,1\n";
        assert!(matches!(read_csv::<f64, _>(blank.as_bytes(), &schema), Err(Error::Parse(_))));
        let inf = "y,a,x1\n1,1,inf\n2,0,1\n";
        assert!(matches!(read_csv::<f64, _>(inf.as_bytes(), &schema), Err(Error::Invariant(_))));
        let quoted = "y,a,x1\n1,\"1\",0\n2,\"0\",1\n";
        assert!(read_csv::<f64, _>(quoted.as_bytes(), &schema).is_ok());
    }

    #[test]
    fn split_partitions_and_is_deterministic() {
        let d = toy();
        let s = split_sample(&d, 0.5, 7).unwrap();
        assert_eq!(s.fit_indices.len(), 5);
        assert_eq!(s.eval_indices.len(), 5);
        let mut all: Vec<usize> = s.fit_indices.iter().chain(&s.eval_indices).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(s, split_sample(&d, 0.5, 7).unwrap());
    }

    #[test]
    fn split_degenerate_single_treated() {
        let x = Array2::from_shape_fn((3, 1), |(i, _)| i as f64);
        let d = Dataset::new(x, vec![true, false, false], vec![0.0, 1.0, 2.0]).unwrap();
        assert!(matches!(split_sample(&d, 0.5, 1), Err(Error::DegenerateSplit(_))));
    }
}
