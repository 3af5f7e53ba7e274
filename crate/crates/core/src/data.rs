//! Dataset ingestion from CSV, split policies, per-output transforms, and
//! prediction serialization.
//!
//! Missing output values are marked by an empty cell or a case-insensitive
//! `nan`; they are carried as a NaN sentinel guarded by the observation mask
//! and never read by numeric code. All floats are written with 17
//! significant digits so that save/load round-trips are bit-exact.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{GprnError, Result};
use crate::kernels::fmt17;
use crate::prediction::PredictiveDistribution;
use crate::rng::root_rng;

/// Inputs X (N x d), outputs Y (N x p), and the observation mask
/// (true = observed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: DMatrix<f64>,
    pub mask: DMatrix<bool>,
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        x: Vec<Vec<f64>>,
        y: DMatrix<f64>,
        mask: DMatrix<bool>,
        input_names: Vec<String>,
        output_names: Vec<String>,
    ) -> Result<Self> {
        if x.is_empty() {
            return Err(GprnError::input("dataset needs at least one row"));
        }
        let d = x[0].len();
        if d == 0 || x.iter().any(|row| row.len() != d) {
            return Err(GprnError::input("dataset input rows must share dimension >= 1"));
        }
        if y.nrows() != x.len() || mask.shape() != y.shape() {
            return Err(GprnError::input(format!(
                "dataset row counts disagree: X has {}, Y is {}x{}, mask is {}x{}",
                x.len(),
                y.nrows(),
                y.ncols(),
                mask.nrows(),
                mask.ncols()
            )));
        }
        if input_names.len() != d || output_names.len() != y.ncols() {
            return Err(GprnError::input("label counts do not match dimensions"));
        }
        let mut y = y;
        for r in 0..y.nrows() {
            for c in 0..y.ncols() {
                if !mask[(r, c)] {
                    y[(r, c)] = f64::NAN;
                }
            }
        }
        Ok(Dataset {
            x,
            y,
            mask,
            input_names,
            output_names,
        })
    }

    /// Dataset with every entry observed.
    pub fn fully_observed(x: Vec<Vec<f64>>, y: DMatrix<f64>) -> Result<Self> {
        let (n, p) = y.shape();
        let d = x.first().map(|r| r.len()).unwrap_or(0);
        Dataset::new(
            x,
            y,
            DMatrix::from_element(n, p, true),
            default_input_names(d),
            default_output_names(p),
        )
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn d(&self) -> usize {
        self.x[0].len()
    }

    pub fn p(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

pub fn default_input_names(d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("x{i}")).collect()
}

pub fn default_output_names(p: usize) -> Vec<String> {
    (1..=p).map(|i| format!("y{i}")).collect()
}

fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t.eq_ignore_ascii_case("nan")
}

/// Load a dataset from CSV. The first `n_input_cols` columns become X; the
/// rest become Y with empty/`NaN` cells masked out. A header row is required.
pub fn load_csv(path: impl AsRef<Path>, n_input_cols: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let pathname = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => GprnError::io(
                pathname.clone(),
                std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
            ),
            _ => GprnError::parse(pathname.clone(), e.to_string()),
        })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| GprnError::parse(&pathname, e.to_string()))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let total_cols = header.len();
    if n_input_cols == 0 || n_input_cols >= total_cols {
        return Err(GprnError::input(format!(
            "n_input_cols = {n_input_cols} must be in [1, {}] for a file with {total_cols} columns",
            total_cols.saturating_sub(1)
        )));
    }
    let p = total_cols - n_input_cols;
    let mut x = Vec::new();
    let mut y_rows: Vec<Vec<f64>> = Vec::new();
    let mut mask_rows: Vec<Vec<bool>> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2; // header is line 1
        let record = record.map_err(|e| GprnError::parse(format!("{pathname}:{line}"), e.to_string()))?;
        if record.len() != total_cols {
            return Err(GprnError::parse(
                format!("{pathname}:{line}"),
                format!("expected {total_cols} columns, found {}", record.len()),
            ));
        }
        let mut row_x = Vec::with_capacity(n_input_cols);
        for c in 0..n_input_cols {
            let cell = &record[c];
            let v: f64 = cell.parse().map_err(|_| {
                GprnError::parse(
                    format!("{pathname}:{line}"),
                    format!("invalid input value '{cell}' in column '{}'", header[c]),
                )
            })?;
            row_x.push(v);
        }
        let mut row_y = Vec::with_capacity(p);
        let mut row_m = Vec::with_capacity(p);
        for c in n_input_cols..total_cols {
            let cell = &record[c];
            if is_missing(cell) {
                row_y.push(f64::NAN);
                row_m.push(false);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    GprnError::parse(
                        format!("{pathname}:{line}"),
                        format!("invalid output value '{cell}' in column '{}'", header[c]),
                    )
                })?;
                row_y.push(v);
                row_m.push(true);
            }
        }
        x.push(row_x);
        y_rows.push(row_y);
        mask_rows.push(row_m);
    }
    if x.is_empty() {
        return Err(GprnError::parse(&pathname, "file contains no data rows"));
    }
    let n = x.len();
    let y = DMatrix::from_fn(n, p, |r, c| y_rows[r][c]);
    let mask = DMatrix::from_fn(n, p, |r, c| mask_rows[r][c]);
    Dataset::new(
        x,
        y,
        mask,
        header[..n_input_cols].to_vec(),
        header[n_input_cols..].to_vec(),
    )
}

/// Write a dataset back as CSV; masked entries become empty cells.
pub fn save_csv(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let pathname = path.as_ref().display().to_string();
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| {
        GprnError::io(
            pathname.clone(),
            std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
        )
    })?;
    let header: Vec<&str> = dataset
        .input_names
        .iter()
        .chain(dataset.output_names.iter())
        .map(|s| s.as_str())
        .collect();
    let io_err = |e: csv::Error| {
        GprnError::io(
            pathname.clone(),
            std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
        )
    };
    w.write_record(&header).map_err(io_err)?;
    for r in 0..dataset.n() {
        let mut record: Vec<String> = dataset.x[r].iter().map(|v| fmt17(*v)).collect();
        for c in 0..dataset.p() {
            record.push(if dataset.mask[(r, c)] {
                fmt17(dataset.y[(r, c)])
            } else {
                String::new()
            });
        }
        w.write_record(&record).map_err(io_err)?;
    }
    w.flush().map_err(|e| GprnError::io(pathname.clone(), e))?;
    Ok(())
}

/// How to carve a dataset into train and test parts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SplitSpec {
    /// Random row holdout, deterministic given the seed.
    HoldoutFraction { fraction: f64, seed: u64 },
    /// Explicit test-row indices.
    Indices(Vec<usize>),
    /// Multivariate missing-data mode: the listed rows stay in the training
    /// set with `output` masked out; the test set contains those rows with
    /// only `output` observed.
    OutputRegion { output: usize, rows: Vec<usize> },
}

/// Split into (train, test) according to the spec.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    match spec {
        SplitSpec::HoldoutFraction { fraction, seed } => {
            if !(*fraction > 0.0 && *fraction < 1.0) {
                return Err(GprnError::input(format!(
                    "holdout fraction must be in (0, 1), got {fraction}"
                )));
            }
            let n = dataset.n();
            let n_test = ((n as f64) * fraction).round() as usize;
            if n_test == 0 || n_test >= n {
                return Err(GprnError::input(format!(
                    "holdout fraction {fraction} leaves an empty train or test set for N = {n}"
                )));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut root_rng(*seed));
            let mut test_idx = order[..n_test].to_vec();
            test_idx.sort_unstable();
            split_by_indices(dataset, &test_idx)
        }
        SplitSpec::Indices(indices) => {
            let mut test_idx = indices.clone();
            test_idx.sort_unstable();
            test_idx.dedup();
            split_by_indices(dataset, &test_idx)
        }
        SplitSpec::OutputRegion { output, rows } => {
            if *output >= dataset.p() {
                return Err(GprnError::input(format!(
                    "target output {output} out of range for p = {}",
                    dataset.p()
                )));
            }
            let mut rows = rows.clone();
            rows.sort_unstable();
            rows.dedup();
            if rows.is_empty() || rows.iter().any(|&r| r >= dataset.n()) {
                return Err(GprnError::input(
                    "output-region split needs a nonempty in-range row list",
                ));
            }
            let mut train_mask = dataset.mask.clone();
            for &r in &rows {
                train_mask[(r, *output)] = false;
            }
            let train = Dataset::new(
                dataset.x.clone(),
                dataset.y.clone(),
                train_mask,
                dataset.input_names.clone(),
                dataset.output_names.clone(),
            )?;
            let test_x: Vec<Vec<f64>> = rows.iter().map(|&r| dataset.x[r].clone()).collect();
            let test_y = DMatrix::from_fn(rows.len(), dataset.p(), |r, c| dataset.y[(rows[r], c)]);
            let test_mask = DMatrix::from_fn(rows.len(), dataset.p(), |r, c| {
                c == *output && dataset.mask[(rows[r], c)]
            });
            if test_mask.iter().all(|m| !*m) {
                return Err(GprnError::input(
                    "output-region split: no observed values of the target output in the region",
                ));
            }
            let test = Dataset::new(
                test_x,
                test_y,
                test_mask,
                dataset.input_names.clone(),
                dataset.output_names.clone(),
            )?;
            Ok((train, test))
        }
    }
}

fn split_by_indices(dataset: &Dataset, test_idx: &[usize]) -> Result<(Dataset, Dataset)> {
    let n = dataset.n();
    if test_idx.is_empty() {
        return Err(GprnError::input("split produced an empty test set"));
    }
    if test_idx.iter().any(|&i| i >= n) {
        return Err(GprnError::input("test index out of range"));
    }
    if test_idx.len() >= n {
        return Err(GprnError::input("split produced an empty training set"));
    }
    let in_test: Vec<bool> = {
        let mut v = vec![false; n];
        for &i in test_idx {
            v[i] = true;
        }
        v
    };
    let take = |keep_test: bool| -> Result<Dataset> {
        let rows: Vec<usize> = (0..n).filter(|&r| in_test[r] == keep_test).collect();
        let x: Vec<Vec<f64>> = rows.iter().map(|&r| dataset.x[r].clone()).collect();
        let y = DMatrix::from_fn(rows.len(), dataset.p(), |r, c| dataset.y[(rows[r], c)]);
        let mask = DMatrix::from_fn(rows.len(), dataset.p(), |r, c| dataset.mask[(rows[r], c)]);
        Dataset::new(
            x,
            y,
            mask,
            dataset.input_names.clone(),
            dataset.output_names.clone(),
        )
    };
    Ok((take(false)?, take(true)?))
}

/// Per-output transform: optional log, then optional standardization. The
/// stored parameters invert predictions back to data units.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OutputTransform {
    pub log: bool,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl OutputTransform {
    pub fn identity(p: usize) -> Self {
        OutputTransform {
            log: false,
            means: vec![0.0; p],
            stds: vec![1.0; p],
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.log && self.means.iter().all(|m| *m == 0.0) && self.stds.iter().all(|s| *s == 1.0)
    }

    /// Map one predictive (mean, covariance) back to data units. The affine
    /// part is exact; the log part uses the lognormal moment formulas.
    pub fn inverse_mean_cov(
        &self,
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let p = mean.len();
        let m_aff = DVector::from_fn(p, |i, _| mean[i] * self.stds[i] + self.means[i]);
        let c_aff = DMatrix::from_fn(p, p, |i, j| cov[(i, j)] * self.stds[i] * self.stds[j]);
        if !self.log {
            return (m_aff, c_aff);
        }
        let m_out = DVector::from_fn(p, |i, _| (m_aff[i] + 0.5 * c_aff[(i, i)]).exp());
        let c_out = DMatrix::from_fn(p, p, |i, j| {
            (m_aff[i] + m_aff[j] + 0.5 * (c_aff[(i, i)] + c_aff[(j, j)])).exp()
                * (c_aff[(i, j)].exp_m1())
        });
        (m_out, c_out)
    }

    /// Point prediction in data units: the median under the log transform,
    /// otherwise the mean.
    pub fn inverse_point(&self, mean: &DVector<f64>) -> DVector<f64> {
        let p = mean.len();
        let aff = DVector::from_fn(p, |i, _| mean[i] * self.stds[i] + self.means[i]);
        if self.log {
            aff.map(f64::exp)
        } else {
            aff
        }
    }
}

/// Fit a per-output transform on observed entries and apply it, returning the
/// transformed dataset and the inverse parameters.
pub fn fit_transform(dataset: &Dataset, log: bool, normalize: bool) -> Result<(Dataset, OutputTransform)> {
    let p = dataset.p();
    let mut y = dataset.y.clone();
    if log {
        for r in 0..dataset.n() {
            for c in 0..p {
                if dataset.mask[(r, c)] {
                    if y[(r, c)] <= 0.0 {
                        return Err(GprnError::input(format!(
                            "log transform needs positive values; output '{}' row {} is {}",
                            dataset.output_names[c],
                            r,
                            y[(r, c)]
                        )));
                    }
                    y[(r, c)] = y[(r, c)].ln();
                }
            }
        }
    }
    let mut means = vec![0.0; p];
    let mut stds = vec![1.0; p];
    if normalize {
        for c in 0..p {
            let vals: Vec<f64> = (0..dataset.n())
                .filter(|&r| dataset.mask[(r, c)])
                .map(|r| y[(r, c)])
                .collect();
            if vals.is_empty() {
                return Err(GprnError::input(format!(
                    "output '{}' has no observed entries to normalize",
                    dataset.output_names[c]
                )));
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            let std = var.sqrt();
            if std < 1e-12 {
                return Err(GprnError::input(format!(
                    "output '{}' is constant; cannot normalize",
                    dataset.output_names[c]
                )));
            }
            means[c] = mean;
            stds[c] = std;
            for r in 0..dataset.n() {
                if dataset.mask[(r, c)] {
                    y[(r, c)] = (y[(r, c)] - mean) / std;
                }
            }
        }
    }
    let transformed = Dataset::new(
        dataset.x.clone(),
        y,
        dataset.mask.clone(),
        dataset.input_names.clone(),
        dataset.output_names.clone(),
    )?;
    Ok((
        transformed,
        OutputTransform {
            log,
            means,
            stds,
        },
    ))
}

/// Predictions loaded back from disk.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub x: Vec<Vec<f64>>,
    pub means: DMatrix<f64>,
    pub vars: DMatrix<f64>,
    pub covs: Vec<DMatrix<f64>>,
}

/// Write predictions as a plot-ready CSV: input dims, per-output means and
/// variances, then upper-triangle covariances labeled `cov_i_j`.
pub fn save_predictions(
    path: impl AsRef<Path>,
    x_stars: &[Vec<f64>],
    distributions: &[PredictiveDistribution],
    d: usize,
    p: usize,
) -> Result<()> {
    if x_stars.len() != distributions.len() {
        return Err(GprnError::input(
            "save_predictions: inputs and distributions differ in length",
        ));
    }
    let pathname = path.as_ref().display().to_string();
    let io_err = |e: String| {
        GprnError::io(
            pathname.clone(),
            std::io::Error::new(std::io::ErrorKind::Other, e),
        )
    };
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| io_err(e.to_string()))?;
    let mut header: Vec<String> = default_input_names(d);
    header.extend((1..=p).map(|i| format!("mean_{i}")));
    header.extend((1..=p).map(|i| format!("var_{i}")));
    for i in 1..=p {
        for j in (i + 1)..=p {
            header.push(format!("cov_{i}_{j}"));
        }
    }
    w.write_record(&header).map_err(|e| io_err(e.to_string()))?;
    for (xs, dist) in x_stars.iter().zip(distributions) {
        if xs.len() != d || dist.dim() != p {
            return Err(GprnError::input("save_predictions: dimension mismatch"));
        }
        let mut record: Vec<String> = xs.iter().map(|v| fmt17(*v)).collect();
        record.extend((0..p).map(|i| fmt17(dist.mean[i])));
        record.extend((0..p).map(|i| fmt17(dist.covariance[(i, i)])));
        for i in 0..p {
            for j in (i + 1)..p {
                record.push(fmt17(dist.covariance[(i, j)]));
            }
        }
        w.write_record(&record).map_err(|e| io_err(e.to_string()))?;
    }
    w.flush().map_err(|e| GprnError::io(pathname.clone(), e))?;
    Ok(())
}

/// Read back a predictions CSV written by [`save_predictions`].
pub fn load_predictions(path: impl AsRef<Path>) -> Result<Predictions> {
    let pathname = path.as_ref().display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(|e| {
            GprnError::io(
                pathname.clone(),
                std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
            )
        })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| GprnError::parse(&pathname, e.to_string()))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let d = header
        .iter()
        .position(|h| h == "mean_1")
        .ok_or_else(|| GprnError::parse(&pathname, "missing 'mean_1' column"))?;
    let p = header.iter().filter(|h| h.starts_with("mean_")).count();
    let expected_cols = d + 2 * p + p * (p - 1) / 2;
    if header.len() != expected_cols {
        return Err(GprnError::parse(
            &pathname,
            format!("expected {expected_cols} columns, found {}", header.len()),
        ));
    }
    let mut x = Vec::new();
    let mut means = Vec::new();
    let mut vars = Vec::new();
    let mut covs = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| GprnError::parse(format!("{pathname}:{line}"), e.to_string()))?;
        let cells: Vec<f64> = record
            .iter()
            .map(|c| {
                c.parse::<f64>().map_err(|_| {
                    GprnError::parse(format!("{pathname}:{line}"), format!("invalid number '{c}'"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if cells.len() != expected_cols {
            return Err(GprnError::parse(
                format!("{pathname}:{line}"),
                format!("expected {expected_cols} columns, found {}", cells.len()),
            ));
        }
        x.push(cells[..d].to_vec());
        means.push(cells[d..d + p].to_vec());
        vars.push(cells[d + p..d + 2 * p].to_vec());
        let mut cov = DMatrix::zeros(p, p);
        for i in 0..p {
            cov[(i, i)] = cells[d + p + i];
        }
        let mut k = d + 2 * p;
        for i in 0..p {
            for j in (i + 1)..p {
                cov[(i, j)] = cells[k];
                cov[(j, i)] = cells[k];
                k += 1;
            }
        }
        covs.push(cov);
    }
    let n = x.len();
    Ok(Predictions {
        x,
        means: DMatrix::from_fn(n, p, |r, c| means[r][c]),
        vars: DMatrix::from_fn(n, p, |r, c| vars[r][c]),
        covs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{log_likelihood, NetworkParams, NetworkShape};
    use approx::assert_relative_eq;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_csv_masks_missing_cells() {
        let f = write_tmp("x,y1,y2\n0,1.5,\n");
        let ds = load_csv(f.path(), 1).unwrap();
        assert_eq!(ds.x, vec![vec![0.0]]);
        assert_eq!(ds.y[(0, 0)], 1.5);
        assert!(ds.y[(0, 1)].is_nan());
        assert!(ds.mask[(0, 0)]);
        assert!(!ds.mask[(0, 1)]);
        assert_eq!(ds.output_names, vec!["y1", "y2"]);
    }

    #[test]
    fn load_csv_counts_rows() {
        let f = write_tmp("x,y\n0,1\n1,2\n2,NaN\n");
        let ds = load_csv(f.path(), 1).unwrap();
        assert_eq!(ds.n(), 3);
        assert!(!ds.mask[(2, 0)]);
    }

    #[test]
    fn load_csv_errors_carry_line_numbers() {
        let f = write_tmp("x,y\n0,1\n1\n");
        let err = load_csv(f.path(), 1).unwrap_err().to_string();
        assert!(err.contains(":3"), "{err}");

        let f = write_tmp("x,y\nzzz,1\n");
        let err = load_csv(f.path(), 1).unwrap_err().to_string();
        assert!(err.contains(":2") && err.contains("zzz"), "{err}");

        let f = write_tmp("x,y\n0,1\n");
        assert!(load_csv(f.path(), 2).is_err());
        assert!(load_csv(f.path(), 0).is_err());
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let x = vec![vec![0.1], vec![0.2019283746556677], vec![7.0]];
        let y = DMatrix::from_row_slice(3, 2, &[
            1.5,
            f64::NAN,
            std::f64::consts::PI,
            -1.0e-17,
            2.0 / 3.0,
            1.0e300,
        ]);
        let mask = DMatrix::from_fn(3, 2, |r, c| !(r == 0 && c == 1));
        let ds = Dataset::new(x, y, mask, default_input_names(1), default_output_names(2)).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_csv(f.path(), &ds).unwrap();
        let ds2 = load_csv(f.path(), 1).unwrap();
        assert_eq!(ds.x, ds2.x);
        assert_eq!(ds.mask, ds2.mask);
        for r in 0..3 {
            for c in 0..2 {
                if ds.mask[(r, c)] {
                    assert_eq!(ds.y[(r, c)].to_bits(), ds2.y[(r, c)].to_bits());
                }
            }
        }
    }

    fn toy_dataset(n: usize, p: usize) -> Dataset {
        let x: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
        let y = DMatrix::from_fn(n, p, |r, c| (r * p + c) as f64);
        Dataset::fully_observed(x, y).unwrap()
    }

    #[test]
    fn split_explicit_indices() {
        let ds = toy_dataset(2, 1);
        let (train, test) = split(&ds, &SplitSpec::Indices(vec![0])).unwrap();
        assert_eq!(test.x, vec![vec![0.0]]);
        assert_eq!(train.x, vec![vec![1.0]]);
    }

    #[test]
    fn split_rejects_empty_parts() {
        let ds = toy_dataset(4, 1);
        assert!(split(&ds, &SplitSpec::Indices(vec![])).is_err());
        assert!(split(&ds, &SplitSpec::Indices(vec![0, 1, 2, 3])).is_err());
        assert!(split(
            &ds,
            &SplitSpec::HoldoutFraction {
                fraction: 0.0,
                seed: 0
            }
        )
        .is_err());
    }

    #[test]
    fn split_holdout_fraction_deterministic() {
        let ds = toy_dataset(10, 2);
        let spec = SplitSpec::HoldoutFraction {
            fraction: 0.3,
            seed: 5,
        };
        let (tr1, te1) = split(&ds, &spec).unwrap();
        let (tr2, te2) = split(&ds, &spec).unwrap();
        assert_eq!(te1.x, te2.x);
        assert_eq!(tr1.x, tr2.x);
        assert_eq!(te1.n(), 3);
        assert_eq!(tr1.n(), 7);
    }

    #[test]
    fn split_output_region_keeps_all_training_rows() {
        let ds = toy_dataset(5, 3);
        let (train, test) = split(
            &ds,
            &SplitSpec::OutputRegion {
                output: 1,
                rows: vec![1, 3],
            },
        )
        .unwrap();
        assert_eq!(train.n(), 5);
        assert!(!train.mask[(1, 1)]);
        assert!(!train.mask[(3, 1)]);
        assert!(train.mask[(1, 0)] && train.mask[(1, 2)]);
        assert_eq!(test.n(), 2);
        assert!(test.mask[(0, 1)] && !test.mask[(0, 0)] && !test.mask[(0, 2)]);
        assert_eq!(test.y[(0, 1)], ds.y[(1, 1)]);
    }

    #[test]
    fn fully_masked_column_does_not_change_likelihood() {
        // Append an all-masked output column: the likelihood must not move.
        let n = 4;
        let x: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
        let y2 = DMatrix::from_fn(n, 2, |r, c| (r + c) as f64);
        let ds2 = Dataset::fully_observed(x.clone(), y2.clone()).unwrap();

        let y3 = DMatrix::from_fn(n, 3, |r, c| if c < 2 { y2[(r, c)] } else { 99.0 });
        let mask3 = DMatrix::from_fn(n, 3, |_, c| c < 2);
        let ds3 = Dataset::new(
            x,
            y3,
            mask3,
            default_input_names(1),
            default_output_names(3),
        )
        .unwrap();

        let sh2 = NetworkShape::new(n, 2, 1, 1).unwrap();
        let sh3 = NetworkShape::new(n, 3, 1, 1).unwrap();
        let mut params2 = NetworkParams::zeros(&sh2);
        let mut params3 = NetworkParams::zeros(&sh3);
        for r in 0..n {
            params2.fhat[(r, 0)] = 0.5 * r as f64;
            params3.fhat[(r, 0)] = 0.5 * r as f64;
            for i in 0..2 {
                params2.w[(r, i)] = 1.0 + i as f64;
                params3.w[(r, i)] = 1.0 + i as f64;
            }
            params3.w[(r, 2)] = -7.0; // unused weight for the masked output
        }
        let ll2 = log_likelihood(&params2, &ds2.y, &ds2.mask, 0.8).unwrap();
        let ll3 = log_likelihood(&params3, &ds3.y, &ds3.mask, 0.8).unwrap();
        assert_eq!(ll2, ll3);
    }

    #[test]
    fn transform_round_trip_moments() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let y = DMatrix::from_fn(6, 2, |r, c| 1.0 + (r as f64) * 0.5 + c as f64);
        let ds = Dataset::fully_observed(x, y).unwrap();
        let (t, tf) = fit_transform(&ds, false, true).unwrap();
        // Standardized columns: zero mean, unit variance.
        for c in 0..2 {
            let col: Vec<f64> = (0..6).map(|r| t.y[(r, c)]).collect();
            let m = col.iter().sum::<f64>() / 6.0;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 6.0;
            assert_relative_eq!(m, 0.0, epsilon = 1e-12);
            assert_relative_eq!(v, 1.0, epsilon = 1e-12);
        }
        // Affine inverse is exact.
        let mean = DVector::from_vec(vec![t.y[(2, 0)], t.y[(2, 1)]]);
        let cov = DMatrix::identity(2, 2) * 0.25;
        let (m_orig, c_orig) = tf.inverse_mean_cov(&mean, &cov);
        assert_relative_eq!(m_orig[0], ds.y[(2, 0)], epsilon = 1e-12);
        assert_relative_eq!(m_orig[1], ds.y[(2, 1)], epsilon = 1e-12);
        assert_relative_eq!(c_orig[(0, 0)], 0.25 * tf.stds[0] * tf.stds[0], epsilon = 1e-12);
    }

    #[test]
    fn log_transform_requires_positive_values() {
        let ds = toy_dataset(3, 1); // includes y = 0
        assert!(fit_transform(&ds, true, false).is_err());
    }

    #[test]
    fn lognormal_inverse_moments() {
        // z ~ N(mu, v) => E[exp z] = exp(mu + v/2), var = (e^v - 1) e^{2mu + v}.
        let tf = OutputTransform {
            log: true,
            means: vec![0.0],
            stds: vec![1.0],
        };
        let (m, c) = tf.inverse_mean_cov(
            &DVector::from_vec(vec![0.3]),
            &DMatrix::from_element(1, 1, 0.4),
        );
        assert_relative_eq!(m[0], (0.3f64 + 0.2).exp(), epsilon = 1e-12);
        assert_relative_eq!(
            c[(0, 0)],
            (0.4f64.exp() - 1.0) * (0.6f64 + 0.4).exp(),
            epsilon = 1e-12
        );
        assert_relative_eq!(tf.inverse_point(&DVector::from_vec(vec![0.3]))[0], 0.3f64.exp());
    }

    #[test]
    fn predictions_round_trip() {
        use crate::prediction::PredictiveDistribution;
        let x_stars = vec![vec![0.0], vec![1.0]];
        let dists: Vec<PredictiveDistribution> = (0..2)
            .map(|k| {
                let mean = DVector::from_vec(vec![k as f64, 2.0 * k as f64]);
                let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.25, 0.25, 2.0]);
                PredictiveDistribution::from_moments(mean, cov).unwrap()
            })
            .collect();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_predictions(f.path(), &x_stars, &dists, 1, 2).unwrap();

        let content = std::fs::read_to_string(f.path()).unwrap();
        assert!(content.starts_with("x1,mean_1,mean_2,var_1,var_2,cov_1_2"));

        let loaded = load_predictions(f.path()).unwrap();
        assert_eq!(loaded.x, x_stars);
        for k in 0..2 {
            for i in 0..2 {
                assert_eq!(loaded.means[(k, i)].to_bits(), dists[k].mean[i].to_bits());
                assert_eq!(
                    loaded.vars[(k, i)].to_bits(),
                    dists[k].covariance[(i, i)].to_bits()
                );
            }
            assert_eq!(
                loaded.covs[k][(0, 1)].to_bits(),
                dists[k].covariance[(0, 1)].to_bits()
            );
        }
    }

    #[test]
    fn empty_predictions_write_header_only() {
        let f = tempfile::NamedTempFile::new().unwrap();
        save_predictions(f.path(), &[], &[], 1, 2).unwrap();
        let content = std::fs::read_to_string(f.path()).unwrap();
        assert_eq!(content.trim(), "x1,mean_1,mean_2,var_1,var_2,cov_1_2");
    }
}
