//! The discrete target distribution: `N` points in `R^d` stored column-wise.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{standard_normal, RngSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Json,
}

impl DataFormat {
    pub fn from_path(path: &Path) -> DataFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("json") => DataFormat::Json,
            _ => DataFormat::Csv,
        }
    }
}

/// `d × N` matrix whose columns are the data points.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    points: DMatrix<f64>,
}

impl DataMatrix {
    pub fn new(points: DMatrix<f64>) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(invalid("data matrix needs d >= 1 and N >= 1"));
        }
        if let Some(pos) = points.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % points.nrows(), pos / points.nrows());
            return Err(invalid(format!("non-finite entry at coordinate {r} of point {c}")));
        }
        Ok(Self { points })
    }

    /// Builds from a list of points (each of length `d`).
    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(invalid("no points"));
        }
        let d = points[0].len();
        if points.iter().any(|p| p.len() != d) {
            return Err(invalid("points have differing dimensions"));
        }
        Self::new(DMatrix::from_fn(d, n, |i, j| points[j][i]))
    }

    pub fn dim(&self) -> usize {
        self.points.nrows()
    }

    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.points.ncols() == 0
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn point(&self, i: usize) -> DVectorView<'_, f64> {
        self.points.column(i)
    }

    pub fn to_points(&self) -> Vec<Vec<f64>> {
        self.points
            .column_iter()
            .map(|c| c.iter().copied().collect())
            .collect()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.points.column_mean()
    }

    /// Population covariance `(1/N) Σ (y - ȳ)(y - ȳ)ᵀ`.
    pub fn population_covariance(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let mut centered = self.points.clone();
        for mut c in centered.column_iter_mut() {
            c -= &mean;
        }
        &centered * centered.transpose() / self.len() as f64
    }

    /// Index and distance of the data point nearest to `x`, plus the runner-up distance
    /// (`f64::INFINITY` when `N = 1`).
    pub fn nearest(&self, x: &DVector<f64>) -> (usize, f64, f64) {
        let mut best = (0, f64::INFINITY);
        let mut second = f64::INFINITY;
        for (i, y) in self.points.column_iter().enumerate() {
            let dist = (x - y).norm();
            if dist < best.1 {
                second = best.1;
                best = (i, dist);
            } else if dist < second {
                second = dist;
            }
        }
        (best.0, best.1, second)
    }
}

/// Formats a float with 17 significant digits, enough to round-trip every `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn load_dataset(path: &Path, format: DataFormat) -> Result<DataMatrix> {
    let text = fs::read_to_string(path)?;
    let rows = match format {
        DataFormat::Csv => parse_csv(path, &text)?,
        DataFormat::Json => parse_json(path, &text)?,
    };
    if rows.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    DataMatrix::from_points(&rows)
}

fn parse_csv(path: &Path, text: &str) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            row: r + 1,
            col: 0,
            msg: e.to_string(),
        })?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let mut row = Vec::with_capacity(record.len());
        for (c, field) in record.iter().enumerate() {
            let v = parse_entry(field).map_err(|msg| Error::Parse {
                path: path.to_path_buf(),
                row: r + 1,
                col: c + 1,
                msg,
            })?;
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row: r + 1,
                    col: row.len().min(first.len()) + 1,
                    msg: format!("expected {} columns, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

fn parse_entry(field: &str) -> std::result::Result<f64, String> {
    let v: f64 = field
        .parse()
        .map_err(|_| format!("cannot parse {field:?} as a real number"))?;
    if !v.is_finite() {
        return Err(format!("non-finite entry {field:?}"));
    }
    Ok(v)
}

fn parse_json(path: &Path, text: &str) -> Result<Vec<Vec<f64>>> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let bad = |row: usize, col: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        row,
        col,
        msg: msg.to_string(),
    };
    let outer = value
        .as_array()
        .ok_or_else(|| bad(0, 0, "expected an array of arrays"))?;
    let mut rows = Vec::with_capacity(outer.len());
    for (r, row) in outer.iter().enumerate() {
        let inner = row
            .as_array()
            .ok_or_else(|| bad(r + 1, 0, "expected an array"))?;
        let mut out = Vec::with_capacity(inner.len());
        for (c, v) in inner.iter().enumerate() {
            let x = v
                .as_f64()
                .ok_or_else(|| bad(r + 1, c + 1, "expected a number"))?;
            out.push(x);
        }
        if let Some(first) = rows.first() {
            let first: &Vec<f64> = first;
            if first.len() != out.len() {
                return Err(bad(r + 1, 0, "rows have differing widths"));
            }
        }
        rows.push(out);
    }
    Ok(rows)
}

/// Writes one point per row with 17 significant digits.
pub fn save_dataset_csv(path: &Path, data: &DataMatrix) -> Result<()> {
    let mut out = fs::File::create(path)?;
    out.write_all(dataset_csv_string(data).as_bytes())?;
    Ok(())
}

pub fn dataset_csv_string(data: &DataMatrix) -> String {
    let mut s = String::new();
    for c in data.matrix().column_iter() {
        let row: Vec<String> = c.iter().map(|&v| fmt_f64(v)).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Synthetic datasets used by the experiments.
pub mod synthetic {
    use super::*;

    /// `n` points uniform in `[-half_width, half_width]^d`, redrawn until every pair is at
    /// least `min_separation` apart.
    pub fn sparse(rng: RngSpec, n: usize, d: usize, half_width: f64, min_separation: f64) -> Result<DataMatrix> {
        if n == 0 || d == 0 {
            return Err(invalid("sparse dataset needs n >= 1 and d >= 1"));
        }
        let mut r = rng.rng();
        for _attempt in 0..10_000 {
            let m = DMatrix::from_fn(d, n, |_, _| r.random_range(-half_width..=half_width));
            let data = DataMatrix::new(m)?;
            let ok = (0..n).all(|i| (i + 1..n).all(|j| (data.point(i) - data.point(j)).norm() >= min_separation));
            if ok {
                return Ok(data);
            }
        }
        Err(invalid(format!(
            "could not place {n} points with separation {min_separation} in the box"
        )))
    }

    /// Gaussian clusters around `centers` with `per_cluster` points each; point `k` of
    /// cluster `c` is column `c * per_cluster + k`.
    pub fn clusters(rng: RngSpec, centers: &[Vec<f64>], per_cluster: usize, std: f64) -> Result<DataMatrix> {
        let d = centers.first().map(|c| c.len()).unwrap_or(0);
        let mut r = rng.rng();
        let mut pts = Vec::with_capacity(centers.len() * per_cluster);
        for c in centers {
            for _ in 0..per_cluster {
                pts.push((0..d).map(|i| c[i] + std * standard_normal(&mut r)).collect());
            }
        }
        DataMatrix::from_points(&pts)
    }

    /// The four-cluster hierarchical configuration: centers `(±2, ±2)`.
    pub fn four_clusters(rng: RngSpec, per_cluster: usize, std: f64) -> Result<DataMatrix> {
        let centers = vec![
            vec![-2.0, 2.0],
            vec![-2.0, -2.0],
            vec![2.0, 2.0],
            vec![2.0, -2.0],
        ];
        clusters(rng, &centers, per_cluster, std)
    }

    /// `n` points uniform in the unit cube `[0,1]^d` with coordinates `active..d` set to zero.
    pub fn unit_cube_subspace(rng: RngSpec, n: usize, d: usize, active: usize) -> Result<DataMatrix> {
        if active > d {
            return Err(invalid("active dimension exceeds ambient dimension"));
        }
        let mut r = rng.rng();
        let m = DMatrix::from_fn(d, n, |i, _| if i < active { r.random::<f64>() } else { 0.0 });
        // from_fn fills column-major, so the draws are consumed point by point
        DataMatrix::new(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(contents: &str, ext: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn single_row_csv() {
        let f = write_tmp("2,0\n", ".csv");
        let d = load_dataset(f.path(), DataFormat::Csv).unwrap();
        assert_eq!((d.dim(), d.len()), (2, 1));
        assert_eq!(d.point(0)[0], 2.0);
        assert_eq!(d.point(0)[1], 0.0);
    }

    #[test]
    fn nan_entry_reports_position() {
        let f = write_tmp("1,2\n3,NaN\n", ".csv");
        match load_dataset(f.path(), DataFormat::Csv) {
            Err(Error::Parse { row, col, .. }) => assert_eq!((row, col), (2, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn garbage_entry_reports_position() {
        let f = write_tmp("1,2\n3,abc\n", ".csv");
        match load_dataset(f.path(), DataFormat::Csv) {
            Err(Error::Parse { row, col, .. }) => assert_eq!((row, col), (2, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ragged_rows_rejected() {
        let f = write_tmp("1,2\n3\n", ".csv");
        assert!(matches!(load_dataset(f.path(), DataFormat::Csv), Err(Error::Parse { row: 2, .. })));
    }

    #[test]
    fn empty_file_rejected() {
        let f = write_tmp("", ".csv");
        assert!(matches!(load_dataset(f.path(), DataFormat::Csv), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn json_array_of_arrays() {
        let f = write_tmp("[[1.5, 2], [3, -4]]", ".json");
        let d = load_dataset(f.path(), DataFormat::Json).unwrap();
        assert_eq!((d.dim(), d.len()), (2, 2));
        assert_eq!(d.point(1)[1], -4.0);
    }

    #[test]
    fn sparse_config_shape_and_separation() {
        let d = synthetic::sparse(RngSpec::new(1, 0), 6, 2, 10.0, 5.0).unwrap();
        assert_eq!((d.dim(), d.len()), (2, 6));
        assert!(d.matrix().iter().all(|v| v.abs() <= 10.0));
        for i in 0..6 {
            for j in i + 1..6 {
                assert!((d.point(i) - d.point(j)).norm() >= 5.0);
            }
        }
    }

    #[test]
    fn cube_subspace_zeroes_tail() {
        let d = synthetic::unit_cube_subspace(RngSpec::new(1, 0), 50, 10, 4).unwrap();
        for c in d.matrix().column_iter() {
            assert!(c.rows(4, 6).iter().all(|&v| v == 0.0));
            assert!(c.rows(0, 4).iter().all(|&v| (0.0..1.0).contains(&v)));
        }
    }

    #[test]
    fn covariance_of_two_points() {
        let d = DataMatrix::from_points(&[vec![-1.0], vec![1.0]]).unwrap();
        assert_eq!(d.population_covariance()[(0, 0)], 1.0);
    }
}
