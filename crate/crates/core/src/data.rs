//! Datasets, synthetic generators, CSV ingest and standardized splits.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{self, NetworkSpec, ParameterVector};
use crate::rng;

/// Per-feature and target location/scale captured from a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

impl NormStats {
    pub fn transform_y(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }

    pub fn inverse_y(&self, y: f64) -> f64 {
        y * self.y_std + self.y_mean
    }

    pub fn transform_x(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.x_mean.iter().zip(&self.x_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// `n × d` features stored row-major, plus targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Vec<f64>,
    dim: usize,
    y: Vec<f64>,
    /// Present when `x`/`y` are in standardized units.
    pub norm: Option<NormStats>,
}

impl Dataset {
    pub fn new(x: Vec<f64>, dim: usize, y: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("feature dimension must be positive".into()));
        }
        if x.len() != y.len() * dim {
            return Err(Error::DimensionMismatch {
                context: "dataset rows",
                expected: y.len() * dim,
                actual: x.len(),
            });
        }
        Ok(Self { x, dim, y, norm: None })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows `idx` gathered into a new dataset (norm stats carried over).
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(self.row(i));
            y.push(self.y[i]);
        }
        Dataset {
            x,
            dim: self.dim,
            y,
            norm: self.norm.clone(),
        }
    }

    /// Target in original units.
    pub fn y_original(&self, i: usize) -> f64 {
        match &self.norm {
            Some(n) => n.inverse_y(self.y[i]),
            None => self.y[i],
        }
    }

    pub fn write_csv(&self, path: &Path, feature_names: &[String], target: &str) -> Result<()> {
        let csv_err = |e: csv::Error| Error::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header: Vec<&str> = feature_names.iter().map(String::as_str).collect();
        header.push(target);
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.y[i].to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

type RegressionFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Known regression function `E[Y|x]` and observation variance.
#[derive(Clone)]
pub struct Truth {
    regression_fn: RegressionFn,
    pub noise_var: f64,
}

impl Truth {
    pub fn new(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static, noise_var: f64) -> Result<Self> {
        if !(noise_var >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise variance must be >= 0, got {noise_var}"
            )));
        }
        Ok(Self {
            regression_fn: Arc::new(f),
            noise_var,
        })
    }

    pub fn mean_at(&self, x: &[f64]) -> f64 {
        (self.regression_fn)(x)
    }
}

impl fmt::Debug for Truth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Truth")
            .field("noise_var", &self.noise_var)
            .finish_non_exhaustive()
    }
}

/// Dataset together with the process that generated it.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub data: Dataset,
    pub truth: Truth,
}

pub fn cubic_truth() -> Truth {
    Truth::new(|x| 0.5 * x[0].powi(3), 1.0).expect("valid noise variance")
}

/// `x ~ N(0,1)`, `y = 0.5x³ + ε`, `ε ~ N(0,1)`.
pub fn gen_cubic(n: usize, seed: u64) -> Synthetic {
    let mut rx = rng::stream_rng(seed, rng::stream::DATA_X);
    let mut re = rng::stream_rng(seed, rng::stream::DATA_NOISE);
    let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rx)).collect();
    let y = x
        .iter()
        .map(|&v| {
            let e: f64 = StandardNormal.sample(&mut re);
            0.5 * v.powi(3) + e
        })
        .collect();
    Synthetic {
        data: Dataset::new(x, 1, y).expect("consistent shapes"),
        truth: cubic_truth(),
    }
}

/// `x ~ N(0, I_d)`, `y = f_{θ*}(x) + N(0, noise_var)`.
pub fn gen_teacher(
    spec: &NetworkSpec,
    theta_star: &ParameterVector,
    n: usize,
    noise_var: f64,
    seed: u64,
) -> Result<Synthetic> {
    if spec.output_dim() != 1 {
        return Err(Error::DimensionMismatch {
            context: "teacher output width",
            expected: 1,
            actual: spec.output_dim(),
        });
    }
    if theta_star.len() != spec.param_count() {
        return Err(Error::DimensionMismatch {
            context: "teacher parameters",
            expected: spec.param_count(),
            actual: theta_star.len(),
        });
    }
    if !(noise_var >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise_var must be >= 0, got {noise_var}")));
    }
    let d = spec.input_dim();
    let mut rx = rng::stream_rng(seed, rng::stream::DATA_X);
    let mut re = rng::stream_rng(seed, rng::stream::DATA_NOISE);
    let x: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rx)).collect();
    let f = nn::forward_batch(spec, theta_star, &x, n)?;
    let sd = noise_var.sqrt();
    let y = f
        .iter()
        .map(|&m| {
            let e: f64 = StandardNormal.sample(&mut re);
            m + sd * e
        })
        .collect();
    let (spec_c, theta_c) = (spec.clone(), theta_star.clone());
    let truth = Truth::new(
        move |x| nn::forward(&spec_c, &theta_c, x).map(|o| o[0]).unwrap_or(f64::NAN),
        noise_var,
    )?;
    Ok(Synthetic {
        data: Dataset::new(x, d, y)?,
        truth,
    })
}

/// Features from every non-target column; header row required.
pub fn load_csv(path: &Path, target_column: &str) -> Result<(Dataset, Vec<String>)> {
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found", path.display()),
        )));
    }
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let target = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| Error::MissingColumn {
            path: path.to_path_buf(),
            column: target_column.to_string(),
        })?;
    let features: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != target)
        .map(|(_, h)| h.clone())
        .collect();
    if features.is_empty() {
        return Err(Error::InvalidArgument("csv has no feature columns".into()));
    }
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        // data rows are numbered from 1, after the header
        let row = r + 1;
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::NonNumeric {
                row,
                column: headers.get(c).cloned().unwrap_or_else(|| c.to_string()),
                value: cell.to_string(),
            })?;
            if c == target {
                y.push(v);
            } else {
                x.push(v);
            }
        }
    }
    if y.len() < 2 {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            message: format!("need at least 2 data rows, found {}", y.len()),
        });
    }
    Ok((Dataset::new(x, features.len(), y)?, features))
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let m = values.clone().sum::<f64>() / n;
    let v = values.map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Statistics of `data`; constant columns are an error.
pub fn norm_stats(data: &Dataset, feature_names: Option<&[String]>) -> Result<NormStats> {
    if data.is_empty() {
        return Err(Error::Empty("cannot standardize an empty dataset"));
    }
    let d = data.dim();
    let n = data.len();
    let mut x_mean = Vec::with_capacity(d);
    let mut x_std = Vec::with_capacity(d);
    for j in 0..d {
        let (m, s) = mean_std((0..n).map(|i| data.x[i * d + j]));
        if !(s > 0.0) {
            let column = feature_names
                .and_then(|f| f.get(j).cloned())
                .unwrap_or_else(|| format!("x{j}"));
            return Err(Error::ConstantColumn { column });
        }
        x_mean.push(m);
        x_std.push(s);
    }
    let (y_mean, y_std) = mean_std(data.y.iter().copied());
    if !(y_std > 0.0) {
        return Err(Error::ConstantColumn {
            column: "target".into(),
        });
    }
    Ok(NormStats {
        x_mean,
        x_std,
        y_mean,
        y_std,
    })
}

pub fn apply_norm(data: &Dataset, stats: &NormStats) -> Dataset {
    let mut x = Vec::with_capacity(data.x.len());
    for i in 0..data.len() {
        x.extend(stats.transform_x(data.row(i)));
    }
    Dataset {
        x,
        dim: data.dim,
        y: data.y.iter().map(|&v| stats.transform_y(v)).collect(),
        norm: Some(stats.clone()),
    }
}

/// Seeded shuffle, then standardize both parts with training statistics.
pub fn standardize_split(data: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split(data, train_frac, seed)?;
    let stats = norm_stats(&train, None)?;
    Ok((apply_norm(&train, &stats), apply_norm(&test, &stats)))
}

/// Seeded shuffle split without standardization.
pub fn split(data: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_frac must be in (0, 1), got {train_frac}"
        )));
    }
    let n = data.len();
    let n_train = (train_frac * n as f64).round() as usize;
    if n_train < 2 || n_train >= n {
        return Err(Error::InvalidArgument(format!(
            "{n} rows cannot be split with train_frac {train_frac}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream_rng(seed, rng::stream::SPLIT));
    Ok((data.select(&idx[..n_train]), data.select(&idx[n_train..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use std::io::Write;

    #[test]
    fn cubic_is_seeded_and_has_unit_noise() {
        assert_eq!(gen_cubic(50, 3).data, gen_cubic(50, 3).data);
        assert_ne!(gen_cubic(50, 3).data, gen_cubic(50, 4).data);
        let n = 100_000;
        let s = gen_cubic(n, 1);
        let r: Vec<f64> = (0..n).map(|i| s.data.y()[i] - 0.5 * s.data.row(i)[0].powi(3)).collect();
        let (m, sd) = mean_std(r.iter().copied());
        assert!(m.abs() < 3.0 / (n as f64).sqrt());
        assert!((sd * sd - 1.0).abs() < 0.05);
        assert_eq!(s.truth.mean_at(&[2.0]), 4.0);
        assert_eq!(s.truth.noise_var, 1.0);
    }

    fn teacher() -> (NetworkSpec, ParameterVector) {
        let spec = NetworkSpec::new(vec![3, 8, 1], Activation::Tanh).unwrap();
        let theta = nn::init_params(&spec, 77);
        (spec, theta)
    }

    #[test]
    fn noiseless_teacher_reproduces_forward() {
        let (spec, theta) = teacher();
        let s = gen_teacher(&spec, &theta, 20, 0.0, 5).unwrap();
        for i in 0..20 {
            assert_eq!(s.data.y()[i], nn::forward(&spec, &theta, s.data.row(i)).unwrap()[0]);
            assert_eq!(s.truth.mean_at(s.data.row(i)), s.data.y()[i]);
        }
        assert_eq!(gen_teacher(&spec, &theta, 20, 0.3, 5).unwrap().data, gen_teacher(&spec, &theta, 20, 0.3, 5).unwrap().data);
    }

    #[test]
    fn teacher_residual_variance() {
        let (spec, theta) = teacher();
        let n = 100_000;
        let s = gen_teacher(&spec, &theta, n, 0.25, 8).unwrap();
        let r = (0..n).map(|i| s.data.y()[i] - s.truth.mean_at(s.data.row(i)));
        let (_, sd) = mean_std(r);
        assert!((sd * sd / 0.25 - 1.0).abs() < 0.05);
    }

    #[test]
    fn teacher_rejects_vector_output() {
        let spec = NetworkSpec::new(vec![3, 2], Activation::Tanh).unwrap();
        let theta = nn::init_params(&spec, 1);
        assert!(gen_teacher(&spec, &theta, 5, 0.1, 1).is_err());
    }

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_numeric_csv() {
        let f = write("a,b,target\n1,2,3\n4,5,6\n7,8.5,9\n");
        let (d, names) = load_csv(f.path(), "target").unwrap();
        assert_eq!((d.len(), d.dim()), (3, 2));
        assert_eq!(names, vec!["a", "b"]);
        assert_eq!(d.row(2), &[7.0, 8.5]);
        assert_eq!(d.y(), &[3.0, 6.0, 9.0]);
    }

    #[test]
    fn csv_errors_are_named() {
        let f = write("a,b\n1,2\n3,4\n");
        assert!(matches!(load_csv(f.path(), "y"), Err(Error::MissingColumn { column, .. }) if column == "y"));
        let f = write("a,y\n1,2\n3,oops\n");
        match load_csv(f.path(), "y") {
            Err(Error::NonNumeric { row, column, .. }) => assert_eq!((row, column.as_str()), (2, "y")),
            other => panic!("unexpected {other:?}"),
        }
        let f = write("a,y\n1,2\n");
        assert!(load_csv(f.path(), "y").is_err());
        assert!(load_csv(Path::new("/nonexistent/file.csv"), "y").is_err());
    }

    #[test]
    fn csv_round_trip() {
        let s = gen_cubic(25, 9);
        let f = tempfile::NamedTempFile::new().unwrap();
        s.data.write_csv(f.path(), &["x".into()], "y").unwrap();
        let (back, _) = load_csv(f.path(), "y").unwrap();
        assert_eq!(back, s.data);
    }

    #[test]
    fn standardized_split_properties() {
        let (spec, theta) = teacher();
        let s = gen_teacher(&spec, &theta, 200, 0.1, 2).unwrap();
        let (tr, te) = standardize_split(&s.data, 0.9, 4).unwrap();
        assert_eq!((tr.len(), te.len()), (180, 20));
        for j in 0..tr.dim() {
            let (m, sd) = mean_std((0..tr.len()).map(|i| tr.row(i)[j]));
            assert!(m.abs() <= 1e-10 && (sd - 1.0).abs() <= 1e-10);
        }
        let stats = tr.norm.clone().unwrap();
        for &y in s.data.y() {
            assert!((stats.inverse_y(stats.transform_y(y)) - y).abs() <= 1e-12);
        }
        // no leakage: stats equal a recomputation on the raw training rows
        let (raw_tr, _) = split(&s.data, 0.9, 4).unwrap();
        assert_eq!(norm_stats(&raw_tr, None).unwrap(), stats);
        assert_eq!(standardize_split(&s.data, 0.9, 4).unwrap().0, tr);
    }

    #[test]
    fn constant_column_is_rejected() {
        let d = Dataset::new(vec![1.0, 5.0, 1.0, 6.0, 1.0, 7.0, 1.0, 8.0], 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let names = vec!["flat".to_string(), "ok".to_string()];
        assert!(matches!(norm_stats(&d, Some(&names)), Err(Error::ConstantColumn { column }) if column == "flat"));
        assert!(standardize_split(&d, 0.5, 1).is_err());
    }
}
