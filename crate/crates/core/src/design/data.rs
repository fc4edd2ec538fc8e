use std::fmt;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Covariates, response and row labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub feature_names: Vec<String>,
    pub row_ids: Vec<String>,
}

impl Dataset {
    pub fn new(
        x: Array2<f64>,
        y: Array1<f64>,
        feature_names: Vec<String>,
        row_ids: Vec<String>,
    ) -> Result<Self> {
        let (n, p) = x.dim();
        if n == 0 || p == 0 {
            return Err(Error::Data(format!("dataset must be non-empty, got {n}×{p}")));
        }
        if y.len() != n || row_ids.len() != n || feature_names.len() != p {
            return Err(Error::Shape(format!(
                "x is {n}×{p}, y has {}, row_ids {}, feature_names {}",
                y.len(),
                row_ids.len(),
                feature_names.len()
            )));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite entries in dataset".into()));
        }
        Ok(Self {
            x,
            y,
            feature_names,
            row_ids,
        })
    }

    /// Dataset with generated feature names `x0, x1, ...` and row ids `0, 1, ...`.
    pub fn from_arrays(x: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        let names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        let ids = (0..x.nrows()).map(|i| i.to_string()).collect();
        Self::new(x, y, names, ids)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), rows),
            y: self.y.select(Axis(0), rows),
            feature_names: self.feature_names.clone(),
            row_ids: rows.iter().map(|&i| self.row_ids[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LoadOptions {
    pub response: String,
    pub exclude: Vec<String>,
    pub id_column: Option<String>,
}

/// What ingestion changed relative to the raw file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub rows_read: usize,
    pub rows_dropped: usize,
    pub columns_excluded: Vec<String>,
    pub excluded_not_found: Vec<String>,
    /// (column, number of imputed cells, imputed value)
    pub imputed: Vec<(String, usize, f64)>,
}

impl fmt::Display for LoadReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rows read: {}", self.rows_read)?;
        writeln!(f, "rows dropped (missing response): {}", self.rows_dropped)?;
        writeln!(f, "columns excluded: {}", self.columns_excluded.join(", "))?;
        if !self.excluded_not_found.is_empty() {
            writeln!(
                f,
                "excluded columns not present: {}",
                self.excluded_not_found.join(", ")
            )?;
        }
        let total: usize = self.imputed.iter().map(|(_, c, _)| c).sum();
        writeln!(f, "cells imputed: {total}")?;
        for (col, count, value) in &self.imputed {
            writeln!(f, "  {col}: {count} cell(s) set to column mean {value}")?;
        }
        Ok(())
    }
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c == "NA"
}

fn csv_err(path: &Path, source: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a UTF-8 CSV with a header row. Rows with a missing response are
/// dropped; missing covariate cells (empty or `NA`) are replaced by the mean
/// of the observed values in that column.
pub fn load_csv(path: impl AsRef<Path>, options: &LoadOptions) -> Result<(Dataset, LoadReport)> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let response_idx = headers
        .iter()
        .position(|h| *h == options.response)
        .ok_or_else(|| Error::MissingResponse(options.response.clone()))?;
    let id_idx = match &options.id_column {
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Data(format!("id column `{name}` not found")))?,
        ),
        None => None,
    };
    let mut report = LoadReport::default();
    for ex in &options.exclude {
        if headers.contains(ex) {
            report.columns_excluded.push(ex.clone());
        } else {
            report.excluded_not_found.push(ex.clone());
        }
    }
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != response_idx && Some(c) != id_idx && !options.exclude.contains(&headers[c]))
        .collect();
    if feature_cols.is_empty() {
        return Err(Error::Data("no covariate columns left after exclusions".into()));
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut ys = Vec::new();
    let mut ids = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        report.rows_read += 1;
        let resp = record.get(response_idx).unwrap_or("");
        if is_missing(resp) {
            report.rows_dropped += 1;
            continue;
        }
        let y: f64 = resp.trim().parse().map_err(|_| {
            Error::Data(format!(
                "line {}: response `{resp}` is not a number",
                line + 2
            ))
        })?;
        let mut row = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            let cell = record.get(c).unwrap_or("");
            if is_missing(cell) {
                row.push(f64::NAN);
            } else {
                let v: f64 = cell.trim().parse().map_err(|_| {
                    Error::Data(format!(
                        "line {}: column `{}` value `{cell}` is not a number",
                        line + 2,
                        headers[c]
                    ))
                })?;
                if !v.is_finite() {
                    return Err(Error::Data(format!(
                        "line {}: column `{}` is not finite",
                        line + 2,
                        headers[c]
                    )));
                }
                row.push(v);
            }
        }
        ids.push(match id_idx {
            Some(i) => record.get(i).unwrap_or("").to_string(),
            None => (line + 1).to_string(),
        });
        ys.push(y);
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{} has no usable rows", path.display())));
    }

    let p = feature_cols.len();
    let mut x = Array2::from_shape_fn((rows.len(), p), |(i, j)| rows[i][j]);
    let names: Vec<String> = feature_cols.iter().map(|&c| headers[c].clone()).collect();
    for j in 0..p {
        let mut col = x.column_mut(j);
        let observed: Vec<f64> = col.iter().copied().filter(|v| !v.is_nan()).collect();
        let missing = col.len() - observed.len();
        if missing == 0 {
            continue;
        }
        if observed.is_empty() {
            return Err(Error::Data(format!("column `{}` is entirely missing", names[j])));
        }
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        col.mapv_inplace(|v| if v.is_nan() { mean } else { v });
        report.imputed.push((names[j].clone(), missing, mean));
    }
    let data = Dataset::new(x, Array1::from(ys), names, ids)?;
    Ok((data, report))
}

/// Reads only the named covariate columns (plus optional id column) for
/// prediction. Missing cells are filled from `fill` (one value per feature).
pub fn load_features(
    path: impl AsRef<Path>,
    feature_names: &[String],
    id_column: Option<&str>,
    fill: &[f64],
) -> Result<(Array2<f64>, Vec<String>)> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let cols: Vec<usize> = feature_names
        .iter()
        .map(|name| {
            headers.iter().position(|h| h == name).ok_or_else(|| {
                Error::Shape(format!(
                    "{} lacks covariate column `{name}` ({} of {} model columns present)",
                    path.display(),
                    feature_names.iter().filter(|n| headers.contains(n)).count(),
                    feature_names.len()
                ))
            })
        })
        .collect::<Result<_>>()?;
    let id_idx = match id_column {
        None => None,
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Data(format!("id column `{name}` not found")))?,
        ),
    };

    let mut values = Vec::new();
    let mut ids = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        for (j, &c) in cols.iter().enumerate() {
            let cell = record.get(c).unwrap_or("");
            let v = if is_missing(cell) {
                fill[j]
            } else {
                cell.trim().parse::<f64>().map_err(|_| {
                    Error::Data(format!(
                        "line {}: column `{}` value `{cell}` is not a number",
                        line + 2,
                        feature_names[j]
                    ))
                })?
            };
            values.push(v);
        }
        ids.push(match id_idx {
            Some(i) => record.get(i).unwrap_or("").to_string(),
            None => (line + 1).to_string(),
        });
    }
    let x = Array2::from_shape_vec((ids.len(), cols.len()), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok((x, ids))
}

/// Per-column location and scale (sample standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Array1<f64>,
    pub stdevs: Array1<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<f64>, names: &[String]) -> Result<Self> {
        let n = x.nrows();
        let means = x.mean_axis(Axis(0)).ok_or(Error::Data("empty matrix".into()))?;
        let mut stdevs = Array1::zeros(x.ncols());
        for (j, col) in x.axis_iter(Axis(1)).enumerate() {
            let sd = if n > 1 {
                (col.iter().map(|v| (v - means[j]).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            if !(sd > 0.0) || !sd.is_finite() {
                return Err(Error::ZeroVariance {
                    column: names.get(j).cloned().unwrap_or_else(|| format!("#{j}")),
                });
            }
            stdevs[j] = sd;
        }
        Ok(Self { means, stdevs })
    }

    pub fn p(&self) -> usize {
        self.means.len()
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.p() {
            return Err(Error::Shape(format!(
                "expected {} columns, got {}",
                self.p(),
                x.ncols()
            )));
        }
        let mut out = x.to_owned();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.means[j], self.stdevs[j]);
            col.mapv_inplace(|v| (v - m) / s);
        }
        Ok(out)
    }

    pub fn inverse_transform(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        if z.ncols() != self.p() {
            return Err(Error::Shape(format!(
                "expected {} columns, got {}",
                self.p(),
                z.ncols()
            )));
        }
        let mut out = z.to_owned();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.means[j], self.stdevs[j]);
            col.mapv_inplace(|v| v * s + m);
        }
        Ok(out)
    }

    pub fn transform_dataset(&self, data: &Dataset) -> Result<Dataset> {
        Ok(Dataset {
            x: self.transform(data.x.view())?,
            ..data.clone()
        })
    }
}

/// Fits a [`Standardizer`] on `train` and returns the standardized copy.
pub fn standardize(train: &Dataset) -> Result<(Standardizer, Dataset)> {
    let s = Standardizer::fit(train.x.view(), &train.feature_names)?;
    let data = s.transform_dataset(train)?;
    Ok((s, data))
}

/// Seeded random partition into train / validation / test.
pub fn split(data: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = fractions;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be positive and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    let n = data.n();
    let n_train = (n as f64 * a).round() as usize;
    let n_val = (n as f64 * b).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Data(format!(
            "{n} rows are too few for a ({a}, {b}, {c}) split"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let part = |range: std::ops::Range<usize>| {
        let mut rows = perm[range].to_vec();
        rows.sort_unstable();
        data.select_rows(&rows)
    };
    let train = part(0..n_train);
    let val = part(n_train..n_train + n_val);
    let test = part(n_train + n_val..n);
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use std::io::Write;

    fn write_csv(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn opts(response: &str, exclude: &[&str]) -> LoadOptions {
        LoadOptions {
            response: response.into(),
            exclude: exclude.iter().map(|s| s.to_string()).collect(),
            id_column: None,
        }
    }

    #[test]
    fn loads_numeric_columns() {
        let f = write_csv("a,b,y\n1,2,3\n4,5,6\n7,8,9\n");
        let (d, report) = load_csv(f.path(), &opts("y", &[])).unwrap();
        assert_eq!((d.n(), d.p()), (3, 2));
        assert_eq!(d.feature_names, vec!["a", "b"]);
        assert_eq!(d.y, array![3.0, 6.0, 9.0]);
        assert_eq!(report.rows_read, 3);
    }

    #[test]
    fn excluded_columns_are_dropped() {
        let f = write_csv("State,a,y\nOhio,1,3\nUtah,4,6\n");
        let (d, report) = load_csv(f.path(), &opts("y", &["State"])).unwrap();
        assert_eq!(d.feature_names, vec!["a"]);
        assert_eq!(report.columns_excluded, vec!["State"]);
    }

    #[test]
    fn missing_cell_is_mean_imputed() {
        let f = write_csv("a,b,y\n1,2,3\nNA,5,6\n4,8,9\n,1,1\n");
        let (d, report) = load_csv(f.path(), &opts("y", &[])).unwrap();
        // mean of the observed a values: (1 + 4) / 2
        assert_eq!(d.x[[1, 0]], 2.5);
        assert_eq!(d.x[[3, 0]], 2.5);
        assert_eq!(report.imputed, vec![("a".to_string(), 2, 2.5)]);
        assert!(report.to_string().contains("cells imputed: 2"));
    }

    #[test]
    fn missing_response_rows_are_dropped() {
        let f = write_csv("a,y\n1,3\n2,\n3,NA\n4,5\n");
        let (d, report) = load_csv(f.path(), &opts("y", &[])).unwrap();
        assert_eq!(d.n(), 2);
        assert_eq!(report.rows_dropped, 2);
    }

    #[test]
    fn absent_response_column_is_named() {
        let f = write_csv("a,b\n1,2\n");
        let err = load_csv(f.path(), &opts("rate", &[])).unwrap_err();
        assert!(err.to_string().contains("rate"));
    }

    #[test]
    fn all_missing_column_is_rejected() {
        let f = write_csv("a,b,y\n,1,2\nNA,2,3\n");
        assert!(load_csv(f.path(), &opts("y", &[])).is_err());
    }

    #[test]
    fn standardize_uses_sample_sd() {
        let d = Dataset::from_arrays(array![[1.0], [2.0], [3.0]], array![0.0, 0.0, 0.0]).unwrap();
        let (s, z) = standardize(&d).unwrap();
        assert_eq!(s.stdevs[0], 1.0);
        assert_eq!(z.x.column(0).to_vec(), vec![-1.0, 0.0, 1.0]);
        let back = s.inverse_transform(z.x.view()).unwrap();
        assert_eq!(back, d.x);
        // idempotent on an already standardized column
        let (_, z2) = standardize(&z).unwrap();
        for (a, b) in z.x.iter().zip(z2.x.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn constant_column_names_itself() {
        let d = Dataset::new(
            array![[1.0, 2.0], [1.0, 3.0]],
            array![0.0, 1.0],
            vec!["flat".into(), "ok".into()],
            vec!["r1".into(), "r2".into()],
        )
        .unwrap();
        let err = standardize(&d).unwrap_err();
        assert!(err.to_string().contains("flat"));
    }

    fn rows(n: usize) -> Dataset {
        Dataset::from_arrays(
            Array2::from_shape_fn((n, 1), |(i, _)| i as f64),
            Array1::from_shape_fn(n, |i| i as f64),
        )
        .unwrap()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let d = rows(10);
        let (a, b, c) = split(&d, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((a.n(), b.n(), c.n()), (8, 1, 1));
        let (a2, b2, c2) = split(&d, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((a, b, c), (a2, b2, c2));
    }

    #[test]
    fn split_at_case_study_scale() {
        let d = rows(72_400);
        let (a, b, c) = split(&d, (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!((a.n(), b.n(), c.n()), (57_920, 7_240, 7_240));
        let mut all: Vec<f64> = a.y.iter().chain(b.y.iter()).chain(c.y.iter()).copied().collect();
        all.sort_by(f64::total_cmp);
        assert!(all.iter().enumerate().all(|(i, &v)| v == i as f64));
    }

    #[test]
    fn split_rejects_bad_fractions_and_tiny_data() {
        assert!(split(&rows(10), (0.5, 0.2, 0.2), 0).is_err());
        assert!(split(&rows(3), (0.8, 0.1, 0.1), 0).is_err());
    }
}
