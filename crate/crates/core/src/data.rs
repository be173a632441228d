use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Column names with reserved meaning in feature CSV files.
pub const STRESS_COLUMN: &str = "stress";
pub const EXTREME_COLUMN: &str = "extreme";

/// N samples of D named features, optionally annotated with an observed
/// stress per sample and an extreme-event flag per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable<S: Scalar> {
    feature_names: Vec<String>,
    rows: DMatrix<S>,
    stress: Option<DVector<S>>,
    extreme: Option<Vec<bool>>,
}

impl<S: Scalar> FeatureTable<S> {
    pub fn new(
        feature_names: Vec<String>,
        rows: DMatrix<S>,
        stress: Option<DVector<S>>,
        extreme: Option<Vec<bool>>,
    ) -> Result<Self> {
        if feature_names.len() != rows.ncols() {
            return Err(Error::validation(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                rows.ncols()
            )));
        }
        for (i, name) in feature_names.iter().enumerate() {
            if feature_names[..i].contains(name) {
                return Err(Error::validation(format!("duplicate feature name `{name}`")));
            }
            if name == STRESS_COLUMN || name == EXTREME_COLUMN {
                return Err(Error::validation(format!(
                    "feature name `{name}` collides with a reserved column"
                )));
            }
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite feature entry"));
        }
        if let Some(s) = &stress {
            if s.len() != rows.nrows() {
                return Err(Error::validation(format!(
                    "stress length {} for {} rows",
                    s.len(),
                    rows.nrows()
                )));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation("non-finite stress entry"));
            }
        }
        if let Some(e) = &extreme {
            if e.len() != rows.nrows() {
                return Err(Error::validation(format!(
                    "extreme-flag length {} for {} rows",
                    e.len(),
                    rows.nrows()
                )));
            }
        }
        Ok(FeatureTable { feature_names, rows, stress, extreme })
    }

    pub fn n(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn rows(&self) -> &DMatrix<S> {
        &self.rows
    }

    pub fn stress(&self) -> Option<&DVector<S>> {
        self.stress.as_ref()
    }

    pub fn extreme(&self) -> Option<&[bool]> {
        self.extreme.as_deref()
    }

    pub fn row(&self, i: usize) -> DVector<S> {
        self.rows.row(i).transpose()
    }

    /// Table restricted to the given row indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        for &i in indices {
            if i >= self.n() {
                return Err(Error::validation(format!("row index {i} out of range")));
            }
        }
        let rows = DMatrix::from_fn(indices.len(), self.dim(), |r, c| self.rows[(indices[r], c)]);
        let stress = self
            .stress
            .as_ref()
            .map(|s| DVector::from_fn(indices.len(), |r, _| s[indices[r]]));
        let extreme = self
            .extreme
            .as_ref()
            .map(|e| indices.iter().map(|&i| e[i]).collect());
        FeatureTable::new(self.feature_names.clone(), rows, stress, extreme)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref()).map_err(|e| {
            Error::validation(format!("cannot open {}: {e}", path.as_ref().display()))
        })?;
        Self::read_csv_from(file)
    }

    pub fn read_csv_from(reader: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers()?.clone();
        let mut feature_cols = Vec::new();
        let mut feature_names = Vec::new();
        let mut stress_col = None;
        let mut extreme_col = None;
        for (i, name) in header.iter().enumerate() {
            match name {
                STRESS_COLUMN => stress_col = Some(i),
                EXTREME_COLUMN => extreme_col = Some(i),
                _ => {
                    feature_cols.push(i);
                    feature_names.push(name.to_string());
                }
            }
        }
        if feature_names.is_empty() {
            return Err(Error::validation("no feature columns in CSV header"));
        }

        let mut data: Vec<S> = Vec::new();
        let mut stress: Vec<S> = Vec::new();
        let mut extreme: Vec<bool> = Vec::new();
        let mut n = 0usize;
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            if record.len() != header.len() {
                return Err(Error::validation(format!(
                    "row {}: {} fields, header has {}",
                    line + 2,
                    record.len(),
                    header.len()
                )));
            }
            let parse = |i: usize| -> Result<S> {
                let raw = record.get(i).unwrap();
                raw.trim()
                    .parse::<f64>()
                    .map(S::c)
                    .map_err(|_| Error::validation(format!("row {}: bad number `{raw}`", line + 2)))
            };
            for &c in &feature_cols {
                data.push(parse(c)?);
            }
            if let Some(c) = stress_col {
                stress.push(parse(c)?);
            }
            if let Some(c) = extreme_col {
                let raw = record.get(c).unwrap().trim();
                extreme.push(match raw {
                    "0" => false,
                    "1" => true,
                    _ => {
                        return Err(Error::validation(format!(
                            "row {}: extreme flag `{raw}` is not 0/1",
                            line + 2
                        )))
                    }
                });
            }
            n += 1;
        }
        let d = feature_names.len();
        let rows = DMatrix::from_row_iterator(n, d, data);
        FeatureTable::new(
            feature_names,
            rows,
            stress_col.map(|_| DVector::from_vec(stress)),
            extreme_col.map(|_| extreme),
        )
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv_to(file)
    }

    pub fn write_csv_to(&self, writer: impl std::io::Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.feature_names.iter().map(|s| s.as_str()).collect();
        if self.stress.is_some() {
            header.push(STRESS_COLUMN);
        }
        if self.extreme.is_some() {
            header.push(EXTREME_COLUMN);
        }
        wtr.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for i in 0..self.n() {
            record.clear();
            for j in 0..self.dim() {
                record.push(format_scalar(self.rows[(i, j)]));
            }
            if let Some(s) = &self.stress {
                record.push(format_scalar(s[i]));
            }
            if let Some(e) = &self.extreme {
                record.push(if e[i] { "1".into() } else { "0".into() });
            }
            wtr.write_record(&record)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Shortest round-trip decimal form; used for every float the crate writes
/// to CSV so that reruns are byte-identical.
pub fn format_scalar<S: Scalar>(v: S) -> String {
    let v = v.f64();
    if v == v.trunc() && v.abs() < 1e15 {
        // keep integral values unambiguous as floats
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> FeatureTable<f64> {
        FeatureTable::new(
            vec!["a".into(), "b".into()],
            DMatrix::from_row_slice(3, 2, &[1.0, 2.5, -3.0, 0.25, 1e-7, 4.0]),
            Some(DVector::from_vec(vec![10.0, 20.0, 30.5])),
            Some(vec![false, true, false]),
        )
        .unwrap()
    }

    #[test]
    fn csv_round_trip() {
        let t = table();
        let mut buf = Vec::new();
        t.write_csv_to(&mut buf).unwrap();
        let back = FeatureTable::<f64>::read_csv_from(buf.as_slice()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn csv_round_trip_is_byte_stable() {
        let t = table();
        let mut first = Vec::new();
        t.write_csv_to(&mut first).unwrap();
        let back = FeatureTable::<f64>::read_csv_from(first.as_slice()).unwrap();
        let mut second = Vec::new();
        back.write_csv_to(&mut second).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn header_columns_classified_by_name() {
        let csv = "a,stress,b,extreme\n1,5,2,1\n3,6,4,0\n";
        let t = FeatureTable::<f64>::read_csv_from(csv.as_bytes()).unwrap();
        assert_eq!(t.feature_names(), &["a".to_string(), "b".to_string()]);
        assert_eq!(t.stress().unwrap()[1], 6.0);
        assert_eq!(t.extreme().unwrap(), &[true, false]);
        assert_eq!(t.rows()[(1, 1)], 4.0);
    }

    #[test]
    fn rejects_duplicate_names() {
        let r = FeatureTable::<f64>::new(
            vec!["a".into(), "a".into()],
            DMatrix::zeros(1, 2),
            None,
            None,
        );
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn rejects_non_finite() {
        let r = FeatureTable::<f64>::new(
            vec!["a".into()],
            DMatrix::from_row_slice(1, 1, &[f64::NAN]),
            None,
            None,
        );
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn rejects_length_mismatch() {
        let r = FeatureTable::<f64>::new(
            vec!["a".into()],
            DMatrix::zeros(2, 1),
            Some(DVector::from_vec(vec![1.0])),
            None,
        );
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn subset_keeps_order() {
        let t = table();
        let s = t.subset(&[2, 0]).unwrap();
        assert_eq!(s.n(), 2);
        assert_eq!(s.rows()[(0, 0)], 1e-7);
        assert_eq!(s.stress().unwrap()[1], 10.0);
        assert_eq!(s.extreme().unwrap(), &[false, false]);
    }
}
