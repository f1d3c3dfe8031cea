//! Tabular datasets, splits, standardization and synthetic generators.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixing::MixingDistribution;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 0.0 && std.is_finite() { std } else { 1.0 })
}

impl Standardizer {
    /// Statistics over the given rows (population standard deviation).
    pub fn fit(x: &DMatrix<f64>, y: &[f64], rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("cannot standardize on zero rows".into()));
        }
        let (x_mean, x_std) = (0..x.ncols())
            .map(|j| mean_std(rows.iter().map(|&i| x[(i, j)])))
            .unzip();
        let (y_mean, y_std) = mean_std(rows.iter().map(|&i| y[i]));
        Ok(Self {
            x_mean,
            x_std,
            y_mean,
            y_std,
        })
    }

    pub fn transform_x(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.x_mean[j]) / self.x_std[j]
        })
    }

    pub fn transform_y(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }

    pub fn inverse_y(&self, y: f64) -> f64 {
        y * self.y_std + self.y_mean
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub feature_names: Vec<String>,
    pub target_name: String,
    /// Target was log-transformed at load time.
    pub log_target: bool,
    /// Set once `x` and `y` hold standardized values.
    pub scaler: Option<Standardizer>,
    pub split: Option<Split>,
    /// Noise-free latent values, for synthetic data.
    pub latent: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub log_target: bool,
}

/// Which rows of a dataset to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Train,
    Val,
    Test,
    All,
}

impl std::str::FromStr for SplitPart {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitPart::Train),
            "val" => Ok(SplitPart::Val),
            "test" => Ok(SplitPart::Test),
            "all" => Ok(SplitPart::All),
            _ => Err(Error::InvalidArgument(format!("unknown split '{s}'"))),
        }
    }
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                context: "dataset targets",
                expected: x.nrows(),
                got: y.len(),
            });
        }
        let feature_names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        Ok(Self {
            x,
            y,
            feature_names,
            target_name: "y".into(),
            log_target: false,
            scaler: None,
            split: None,
            latent: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn indices(&self, part: SplitPart) -> Result<Vec<usize>> {
        if part == SplitPart::All {
            return Ok((0..self.len()).collect());
        }
        let s = self
            .split
            .as_ref()
            .ok_or_else(|| Error::Data("dataset has no split".into()))?;
        Ok(match part {
            SplitPart::Train => s.train.clone(),
            SplitPart::Val => s.val.clone(),
            SplitPart::Test => s.test.clone(),
            SplitPart::All => unreachable!(),
        })
    }

    pub fn rows(&self, idx: &[usize]) -> (DMatrix<f64>, Vec<f64>) {
        (self.x.select_rows(idx.iter()), idx.iter().map(|&i| self.y[i]).collect())
    }

    pub fn part(&self, part: SplitPart) -> Result<(DMatrix<f64>, Vec<f64>)> {
        Ok(self.rows(&self.indices(part)?))
    }

    /// Deterministic shuffled partition; two fractions leave the validation
    /// part empty.
    pub fn split(&mut self, fractions: &[f64], seed: u64) -> Result<()> {
        let sum: f64 = fractions.iter().sum();
        if !(fractions.len() == 2 || fractions.len() == 3)
            || (sum - 1.0).abs() > 1e-9
            || fractions.iter().any(|f| *f < 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "split fractions {fractions:?} must be 2 or 3 nonnegative values summing to 1"
            )));
        }
        let n = self.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
        let n_val = if fractions.len() == 3 {
            ((fractions[1] * n as f64).round() as usize).min(n - n_train)
        } else {
            0
        };
        self.split = Some(Split {
            train: idx[..n_train].to_vec(),
            val: idx[n_train..n_train + n_val].to_vec(),
            test: idx[n_train + n_val..].to_vec(),
        });
        Ok(())
    }

    /// Standardizes features and target in place using training-split statistics.
    pub fn standardize(&mut self) -> Result<&Standardizer> {
        if self.scaler.is_some() {
            return Err(Error::Data("dataset is already standardized".into()));
        }
        let rows = match &self.split {
            Some(s) => s.train.clone(),
            None => (0..self.len()).collect(),
        };
        let sc = Standardizer::fit(&self.x, &self.y, &rows)?;
        self.x = sc.transform_x(&self.x);
        for v in &mut self.y {
            *v = sc.transform_y(*v);
        }
        if let Some(l) = &mut self.latent {
            for v in l.iter_mut() {
                *v = sc.transform_y(*v);
            }
        }
        Ok(self.scaler.insert(sc))
    }

    /// Applies an existing scaler (e.g. from a checkpoint).
    pub fn standardize_with(&mut self, sc: &Standardizer) -> Result<()> {
        if sc.x_mean.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "scaler feature count",
                expected: self.dim(),
                got: sc.x_mean.len(),
            });
        }
        self.x = sc.transform_x(&self.x);
        for v in &mut self.y {
            *v = sc.transform_y(*v);
        }
        self.scaler = Some(sc.clone());
        Ok(())
    }

    /// Targets on the original scale (undoing the log transform too).
    pub fn raw_y(&self, standardized: &[f64]) -> Vec<f64> {
        standardized
            .iter()
            .map(|&v| {
                let v = self.scaler.as_ref().map_or(v, |s| s.inverse_y(v));
                if self.log_target {
                    v.exp()
                } else {
                    v
                }
            })
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = self.feature_names.clone();
        header.push(self.target_name.clone());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(format!("{:?}", self.y[i]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a headed numeric CSV; `target` names the response column.
pub fn load_csv(path: impl AsRef<Path>, target: &str, options: &LoadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let t = header
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| Error::Data(format!("target column '{target}' not found in {}", path.display())))?;
    let mut rows = Vec::new();
    let mut y = Vec::new();
    let mut bad = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parsed: std::result::Result<Vec<f64>, usize> = rec
            .iter()
            .enumerate()
            .map(|(j, s)| s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or(j))
            .collect();
        match parsed {
            Ok(vals) if vals.len() == header.len() => {
                let mut v = vals;
                let mut target_value = v.remove(t);
                if options.log_target {
                    if target_value <= 0.0 {
                        bad.push(format!("row {r}: nonpositive target under log transform"));
                        continue;
                    }
                    target_value = target_value.ln();
                }
                y.push(target_value);
                rows.push(v);
            }
            Ok(vals) => bad.push(format!(
                "row {r}: expected {} fields, found {}",
                header.len(),
                vals.len()
            )),
            Err(j) => bad.push(format!("row {r}: column '{}' is not numeric", header[j])),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Data(format!(
            "malformed rows in {}: {}",
            path.display(),
            bad.join("; ")
        )));
    }
    if y.is_empty() {
        return Err(Error::Data(format!("{} has no data rows", path.display())));
    }
    let d = header.len() - 1;
    let x = DMatrix::from_fn(y.len(), d, |i, j| rows[i][j]);
    let mut features = header.clone();
    features.remove(t);
    let mut ds = Dataset::new(x, y)?;
    ds.feature_names = features;
    ds.target_name = target.to_string();
    ds.log_target = options.log_target;
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseVariant {
    Gauss,
    Student4,
    Cauchy,
}

impl std::str::FromStr for NoiseVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss" => Ok(NoiseVariant::Gauss),
            "student4" => Ok(NoiseVariant::Student4),
            "cauchy" => Ok(NoiseVariant::Cauchy),
            _ => Err(Error::InvalidArgument(format!("unknown noise variant '{s}'"))),
        }
    }
}

/// Scale of every noise-identification mixing law.
pub const NOISE_SCALE: f64 = 0.04;

impl NoiseVariant {
    pub fn mixing(self) -> MixingDistribution {
        match self {
            NoiseVariant::Gauss => MixingDistribution::Dirac { s: NOISE_SCALE },
            NoiseVariant::Student4 => MixingDistribution::ScaleInvChiSquare {
                nu: 4.0,
                tau2: NOISE_SCALE,
            },
            NoiseVariant::Cauchy => MixingDistribution::ScaleInvChiSquare {
                nu: 1.0,
                tau2: NOISE_SCALE,
            },
        }
    }
}

pub fn noise_identification_latent(x: f64) -> f64 {
    (3.0 * x).sin() / 2.0
}

/// `x ~ U(-2, 2)`, `y = sin(3x)/2 + √ω z` with `ω` from the variant's mixing.
pub fn gen_noise_identification(variant: NoiseVariant, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mixing = variant.mixing();
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let omega = mixing.sample_mix(n, &mut rng)?;
    let f: Vec<f64> = x.iter().map(|&v| noise_identification_latent(v)).collect();
    let y = (0..n)
        .map(|i| f[i] + omega[i].sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut ds = Dataset::new(DMatrix::from_column_slice(n, 1, &x), y)?;
    ds.latent = Some(f);
    Ok(ds)
}

pub fn hetero_latent(x: f64) -> f64 {
    (5.0 * x).sin() + x
}

/// Degrees of freedom `25 - 11|x + 1|^0.9`, clamped below at 0.6.
pub fn hetero_nu(x: f64) -> f64 {
    (25.0 - 11.0 * (x + 1.0).abs().powf(0.9)).max(0.6)
}

pub fn hetero_sigma(x: f64) -> f64 {
    0.5 * (x + 1.0).abs().powf(1.6) + 0.001
}

/// `x ~ U(0, 4)`, `y = sin(5x) + x + σ(x) t_ν(x)`.
pub fn gen_heteroscedastic(n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
    let f: Vec<f64> = x.iter().map(|&v| hetero_latent(v)).collect();
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let t = StudentT::new(hetero_nu(x[i])).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        y.push(f[i] + hetero_sigma(x[i]) * t.sample(&mut rng));
    }
    let mut ds = Dataset::new(DMatrix::from_column_slice(n, 1, &x), y)?;
    ds.latent = Some(f);
    Ok(ds)
}

/// Two Gaussian clusters at `(±1, ±1)` with unit spread and a fraction of
/// labels flipped.
pub fn gen_two_clusters(n: usize, flip: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&flip) {
        return Err(Error::Domain {
            what: "label flip fraction",
            value: flip,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as f64;
        let c = if label > 0.5 { 1.0 } else { -1.0 };
        x[(i, 0)] = c + rng.sample::<f64, _>(StandardNormal);
        x[(i, 1)] = c + rng.sample::<f64, _>(StandardNormal);
        y.push(label);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    for &i in idx.iter().take((flip * n as f64).round() as usize) {
        y[i] = 1.0 - y[i];
    }
    let mut ds = Dataset::new(x, y)?;
    ds.latent = None;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn loads_toy_csv_and_rejects_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("toy.csv");
        std::fs::write(&p, "a,b,target\n1,2,3\n4,5,6\n7,8,9\n").unwrap();
        let ds = load_csv(&p, "target", &LoadOptions::default()).unwrap();
        assert_eq!(ds.x.shape(), (3, 2));
        assert_eq!(ds.y, vec![3.0, 6.0, 9.0]);
        assert_eq!(ds.feature_names, vec!["a", "b"]);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "a,target\n1,2\nx,3\n4,5\n").unwrap();
        let err = load_csv(&bad, "target", &LoadOptions::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("row 1"), "{err}");
        assert!(load_csv(&p, "missing", &LoadOptions::default()).is_err());
        let empty = dir.path().join("empty.csv");
        std::fs::File::create(&empty).unwrap().write_all(b"a,target\n").unwrap();
        assert!(load_csv(&empty, "target", &LoadOptions::default()).is_err());
    }

    #[test]
    fn csv_round_trip_preserves_values() {
        let ds = gen_noise_identification(NoiseVariant::Student4, 50, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        ds.write_csv(&p).unwrap();
        let back = load_csv(&p, "y", &LoadOptions::default()).unwrap();
        assert!((back.x.clone() - ds.x.clone()).abs().max() < 1e-12);
        for (a, b) in back.y.iter().zip(&ds.y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn split_sizes_determinism_and_variety() {
        let mut ds = Dataset::new(DMatrix::zeros(10, 1), vec![0.0; 10]).unwrap();
        ds.split(&[0.6, 0.2, 0.2], 3).unwrap();
        let s = ds.split.clone().unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        ds.split(&[0.6, 0.2, 0.2], 3).unwrap();
        assert_eq!(ds.split.clone().unwrap(), s);
        let mut seen = std::collections::HashSet::new();
        for seed in 0..10 {
            ds.split(&[0.6, 0.2, 0.2], seed).unwrap();
            let sp = ds.split.clone().unwrap();
            seen.insert((sp.train, sp.val, sp.test));
        }
        assert_eq!(seen.len(), 10);
        assert!(ds.split(&[0.6, 0.3, 0.2], 0).is_err());
    }

    #[test]
    fn standardization_statistics_and_inverse() {
        let mut ds = gen_heteroscedastic(150, 2).unwrap();
        let raw = ds.y.clone();
        ds.split(&[0.6, 0.2, 0.2], 1).unwrap();
        ds.standardize().unwrap();
        let train = ds.split.clone().unwrap().train;
        let (m, s) = mean_std(train.iter().map(|&i| ds.y[i]));
        assert!(m.abs() < 1e-10 && (s - 1.0).abs() < 1e-10);
        let (m, s) = mean_std(train.iter().map(|&i| ds.x[(i, 0)]));
        assert!(m.abs() < 1e-10 && (s - 1.0).abs() < 1e-10);
        for (a, b) in ds.raw_y(&ds.y).iter().zip(&raw) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_identification_generator() {
        assert_eq!(noise_identification_latent(0.0), 0.0);
        let ds = gen_noise_identification(NoiseVariant::Gauss, 200, 4).unwrap();
        let f = ds.latent.clone().unwrap();
        let r: Vec<f64> = ds.y.iter().zip(&f).map(|(y, f)| y - f).collect();
        let var = r.iter().map(|v| v * v).sum::<f64>() / 200.0;
        assert!((var - 0.04).abs() < 0.2 * 0.04, "{var}");
        let ds = gen_noise_identification(NoiseVariant::Student4, 10_000, 5).unwrap();
        let f = ds.latent.clone().unwrap();
        let r: Vec<f64> = ds.y.iter().zip(&f).map(|(y, f)| y - f).collect();
        let (m, s) = mean_std(r.iter().cloned());
        let kurt = r.iter().map(|v| ((v - m) / s).powi(4)).sum::<f64>() / r.len() as f64 - 3.0;
        assert!(kurt > 0.0);
        assert_eq!(
            gen_noise_identification(NoiseVariant::Cauchy, 20, 9).unwrap(),
            gen_noise_identification(NoiseVariant::Cauchy, 20, 9).unwrap()
        );
    }

    #[test]
    fn heteroscedastic_generator() {
        assert!(hetero_sigma(0.0) < hetero_sigma(3.0));
        assert!((hetero_nu(0.0) - 14.0).abs() < 1e-12);
        assert_eq!(hetero_latent(0.0), 0.0);
        assert_eq!(hetero_nu(3.5), 0.6);
        let ds = gen_heteroscedastic(150, 3).unwrap();
        assert_eq!(ds.len(), 150);
        assert!(ds.x.iter().all(|v| (0.0..4.0).contains(v)));
    }

    #[test]
    fn two_clusters_flip_labels() {
        let clean = gen_two_clusters(400, 0.0, 6).unwrap();
        let noisy = gen_two_clusters(400, 0.05, 6).unwrap();
        let flipped = clean.y.iter().zip(&noisy.y).filter(|(a, b)| a != b).count();
        assert_eq!(flipped, 20);
        assert_eq!(clean.y.iter().filter(|v| **v > 0.5).count(), 200);
    }
}
