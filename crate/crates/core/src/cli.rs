//! Command-line surface: `train`, `predict`, `eval`, `fit-noise` and
//! `simulate`, each also callable as a library function.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, LoadOptions, NoiseVariant, SplitPart, Standardizer};
use crate::error::{Error, Result};
use crate::exact_gp::{ExactFitConfig, ExactGp};
use crate::kernels::KernelSpec;
use crate::likelihoods::{fit_noise, LikelihoodModel, NoiseFitConfig, HETERO_BINS, NOISE_BINS};
use crate::metrics::{self, Metrics};
use crate::mixing::MixingDistribution;
use crate::quadrature::BaseQuadrature;
use crate::variational::{self, ModelSpec, TraceRow, TrainConfig, DEFAULT_MAX_INDUCING, DEFAULT_XI_SAMPLES};

pub const FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRACE_FILE: &str = "trace.csv";

/// The model zoo: likelihood and posterior family of each variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    /// Exact GP, Gaussian noise, evidence maximization.
    ExactGp,
    /// Sparse variational GP with Gaussian noise.
    Svgp,
    /// Elliptical noise, Gaussian posterior.
    EpGp,
    /// Elliptical noise, elliptical prior and posterior.
    EpEp,
    /// Network-predicted Gaussian noise variance.
    HetGp,
    /// Network-predicted elliptical noise flow.
    HetEp,
}

impl ModelVariant {
    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::ExactGp => "exact-gp",
            ModelVariant::Svgp => "svgp",
            ModelVariant::EpGp => "ep-gp",
            ModelVariant::EpEp => "ep-ep",
            ModelVariant::HetGp => "het-gp",
            ModelVariant::HetEp => "het-ep",
        }
    }

    pub fn supports_classification(self) -> bool {
        matches!(self, ModelVariant::Svgp | ModelVariant::EpEp)
    }

    /// A fresh variational model with `z` as inducing inputs.
    pub fn build(self, kernel: KernelSpec, z: DMatrix<f64>, config: &RunConfig) -> Result<ModelSpec> {
        let d = z.ncols();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gaussian = MixingDistribution::gaussian;
        let lik = |elliptical: bool| {
            if config.classification {
                LikelihoodModel::BernoulliSigmoid
            } else if elliptical {
                LikelihoodModel::elliptical_flow(config.noise_bins)
            } else {
                LikelihoodModel::gaussian(config.init_noise_variance)
            }
        };
        let (prior, likelihood, posterior) = match self {
            ModelVariant::ExactGp => {
                return Err(Error::InvalidArgument("exact-gp has no variational form".into()));
            }
            ModelVariant::Svgp => (gaussian(), lik(false), gaussian()),
            ModelVariant::EpGp => (gaussian(), lik(true), gaussian()),
            ModelVariant::EpEp => (variational::prior_flow(), lik(true), variational::posterior_flow()),
            ModelVariant::HetGp => (
                gaussian(),
                LikelihoodModel::hetero_gaussian(d, &config.hidden, config.init_noise_variance.ln(), &mut rng),
                gaussian(),
            ),
            ModelVariant::HetEp => (
                gaussian(),
                LikelihoodModel::hetero_elliptical(d, &config.hidden, HETERO_BINS, &mut rng),
                gaussian(),
            ),
        };
        ModelSpec::new(kernel, prior, likelihood, z, posterior)
    }
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelVariant,
    /// `se`, `periodic` or `linear`, summed with `+`.
    pub kernel: String,
    /// Inducing points; defaults to `min(N, 500)`.
    pub inducing: Option<usize>,
    pub lr: f64,
    /// Defaults to 2000 for up to 1000 training rows, else 500.
    pub epochs: Option<usize>,
    pub mc_samples: Option<usize>,
    pub quad_nodes: usize,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub target: Option<String>,
    pub out: Option<PathBuf>,
    pub folds: Option<usize>,
    pub classification: bool,
    pub log_target: bool,
    /// Train/val/test fractions.
    pub split: Vec<f64>,
    pub hidden: Vec<usize>,
    pub noise_bins: usize,
    pub init_noise_variance: f64,
    pub early_stopping: bool,
    pub patience: usize,
    pub batch_size: Option<usize>,
    pub train_z: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelVariant::Svgp,
            kernel: "se".into(),
            inducing: None,
            lr: 0.01,
            epochs: None,
            mc_samples: None,
            quad_nodes: crate::quadrature::DEFAULT_NODES,
            seed: 0,
            data: None,
            target: None,
            out: None,
            folds: None,
            classification: false,
            log_target: false,
            split: vec![0.6, 0.2, 0.2],
            hidden: vec![128, 128],
            noise_bins: NOISE_BINS,
            init_noise_variance: 0.1,
            early_stopping: false,
            patience: 200,
            batch_size: None,
            train_z: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.epochs == Some(0) {
            return bad("epochs must be positive".into());
        }
        if self.inducing == Some(0) || self.mc_samples == Some(0) || self.batch_size == Some(0) {
            return bad("inducing, mc-samples and batch-size must be positive".into());
        }
        if self.quad_nodes < 2 {
            return bad("need at least two quadrature nodes".into());
        }
        if self.classification && !self.model.supports_classification() {
            return bad(format!(
                "{} does not support classification; use svgp or ep-ep",
                self.model.name()
            ));
        }
        if matches!(self.model, ModelVariant::HetGp | ModelVariant::HetEp) && self.hidden.is_empty() {
            return bad("heteroscedastic models need at least one hidden layer".into());
        }
        if self.noise_bins == 0 {
            return bad("noise flow needs at least one bin".into());
        }
        if !(self.init_noise_variance > 0.0) {
            return bad("initial noise variance must be positive".into());
        }
        if !(2..=3).contains(&self.split.len()) {
            return bad("split takes two or three fractions".into());
        }
        if self.folds == Some(0) {
            return bad("folds must be positive".into());
        }
        parse_kernel(&self.kernel, 1).map(|_| ())
    }

    pub fn epochs_for(&self, n_train: usize) -> usize {
        self.epochs.unwrap_or(if n_train <= 1000 { 2000 } else { 500 })
    }

    fn train_config(&self, n_train: usize) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs_for(n_train),
            n_mc: self.mc_samples,
            batch_size: self.batch_size,
            train_z: self.train_z,
            early_stopping: self.early_stopping,
            patience: self.patience,
            quad_nodes: self.quad_nodes,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

/// Kernel from `se`, `periodic`, `linear` or a `+`-separated sum.
pub fn parse_kernel(s: &str, dim: usize) -> Result<KernelSpec> {
    let parts: Vec<KernelSpec> = s
        .split('+')
        .map(|p| match p.trim().to_ascii_lowercase().as_str() {
            "se" | "rbf" => Ok(KernelSpec::se_ard(&vec![1.0; dim], 1.0)),
            "periodic" => Ok(KernelSpec::periodic(1.0, 1.0, 1.0)),
            "linear" => Ok(KernelSpec::linear(1.0, 0.0)),
            other => Err(Error::InvalidArgument(format!("unknown kernel '{other}'"))),
        })
        .collect::<Result<_>>()?;
    Ok(if parts.len() == 1 {
        parts.into_iter().next().expect("one kernel")
    } else {
        KernelSpec::sum(parts)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrainedModel {
    /// Keeps the standardized training data, which prediction needs.
    Exact {
        gp: ExactGp,
        x: DMatrix<f64>,
        y: Vec<f64>,
    },
    Variational {
        spec: Box<ModelSpec>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    pub feature_names: Vec<String>,
    pub target_name: String,
    pub scaler: Standardizer,
    pub model: TrainedModel,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            other => {
                return Err(Error::Data(format!(
                    "unsupported checkpoint format version {other:?}, expected {FORMAT_VERSION}"
                )))
            }
        }
        Ok(serde_json::from_value(value)?)
    }
}

/// Predictions on the standardized scale, whichever model produced them.
pub struct Prediction {
    pub mu_f: Vec<f64>,
    pub sd_f: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub prob: Option<Vec<f64>>,
    pub dist: Option<variational::PredictiveDistribution>,
}

const Z95: f64 = 1.959_963_984_540_054;

impl TrainedModel {
    pub fn input_dim(&self) -> usize {
        match self {
            TrainedModel::Exact { x, .. } => x.ncols(),
            TrainedModel::Variational { spec } => spec.input_dim(),
        }
    }

    pub fn predict(&self, xs: &DMatrix<f64>) -> Result<Prediction> {
        if xs.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "prediction inputs",
                expected: self.input_dim(),
                got: xs.ncols(),
            });
        }
        match self {
            TrainedModel::Exact { gp, x, y } => {
                let (mu, var) = gp.posterior_predict(x, y, xs)?;
                let sd: Vec<f64> = var.iter().map(|v| v.max(0.0).sqrt()).collect();
                Ok(Prediction {
                    lower: mu.iter().zip(&sd).map(|(m, s)| m - Z95 * s).collect(),
                    upper: mu.iter().zip(&sd).map(|(m, s)| m + Z95 * s).collect(),
                    mu_f: mu,
                    sd_f: sd,
                    prob: None,
                    dist: None,
                })
            }
            TrainedModel::Variational { spec } => {
                let dist = variational::predict(spec, xs, DEFAULT_XI_SAMPLES)?;
                let q = BaseQuadrature::default();
                let n = dist.len();
                let mut lower = Vec::with_capacity(n);
                let mut upper = Vec::with_capacity(n);
                for i in 0..n {
                    let (lo, hi) = dist.latent_interval(i, 0.95)?;
                    lower.push(lo);
                    upper.push(hi);
                }
                let prob = if spec.likelihood.is_classification() {
                    Some((0..n).map(|i| dist.class_probability(i, &q)).collect::<Result<_>>()?)
                } else {
                    None
                };
                Ok(Prediction {
                    mu_f: dist.mu_f.clone(),
                    sd_f: dist.sigma_f.iter().map(|v| v.max(0.0).sqrt()).collect(),
                    lower,
                    upper,
                    prob,
                    dist: Some(dist),
                })
            }
        }
    }

    /// Metrics on standardized targets.
    pub fn evaluate(&self, xs: &DMatrix<f64>, ys: &[f64]) -> Result<Metrics> {
        match self {
            TrainedModel::Exact { gp, x, y } => {
                let (mu, _) = gp.posterior_predict(x, y, xs)?;
                Ok(Metrics {
                    n: ys.len(),
                    mse: metrics::mse(&mu, ys)?,
                    nll: gp.predictive_nll(x, y, xs, ys)?,
                    accuracy: None,
                    auc: None,
                })
            }
            TrainedModel::Variational { spec } => {
                metrics::evaluate(&variational::predict(spec, xs, DEFAULT_XI_SAMPLES)?, ys)
            }
        }
    }
}

/// Loads the configured CSV, splits it by seed and standardizes.
pub fn prepare_data(config: &RunConfig, seed: u64) -> Result<Dataset> {
    let path = config
        .data
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--data is required".into()))?;
    let target = config
        .target
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("--target is required".into()))?;
    let mut ds = data::load_csv(
        path,
        target,
        &LoadOptions {
            log_target: config.log_target,
        },
    )?;
    if config.classification && ds.y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data("classification targets must be 0 or 1".into()));
    }
    ds.split(&config.split, seed)?;
    standardize(&mut ds, config.classification)?;
    Ok(ds)
}

/// Standardizes on the training rows; class labels are left unscaled.
pub fn standardize(ds: &mut Dataset, classification: bool) -> Result<()> {
    if classification {
        let rows = ds.indices(SplitPart::Train)?;
        let mut sc = Standardizer::fit(&ds.x, &ds.y, &rows)?;
        sc.y_mean = 0.0;
        sc.y_std = 1.0;
        ds.standardize_with(&sc)
    } else {
        ds.standardize().map(|_| ())
    }
}

/// Trains the configured model on the training split of a standardized
/// dataset, validating on its validation split.
pub fn fit(config: &RunConfig, ds: &Dataset) -> Result<(TrainedModel, Vec<TraceRow>)> {
    config.validate()?;
    let (x, y) = ds.part(SplitPart::Train)?;
    let (vx, vy) = ds.part(SplitPart::Val)?;
    let kernel = parse_kernel(&config.kernel, x.ncols())?;
    let epochs = config.epochs_for(y.len());
    if config.model == ModelVariant::ExactGp {
        let mut gp = ExactGp::new(kernel, config.init_noise_variance)?;
        let trace = gp.fit(
            &x,
            &y,
            &ExactFitConfig {
                lr: config.lr,
                epochs,
                patience: config.patience,
            },
        )?;
        let rows = trace
            .into_iter()
            .enumerate()
            .map(|(epoch, elbo)| TraceRow {
                epoch,
                elbo,
                val_nll: None,
            })
            .collect();
        return Ok((TrainedModel::Exact { gp, x, y }, rows));
    }
    let m = config
        .inducing
        .unwrap_or(y.len().min(DEFAULT_MAX_INDUCING))
        .min(y.len());
    let z = if m == y.len() {
        x.clone()
    } else {
        variational::init_inducing(&x, m, &mut ChaCha8Rng::seed_from_u64(config.seed))
    };
    let spec = config.model.build(kernel, z, config)?;
    let val = (!vy.is_empty()).then_some((&vx, vy.as_slice()));
    let result = variational::train(&spec, &x, &y, val, &config.train_config(y.len()))?;
    Ok((
        TrainedModel::Variational {
            spec: Box::new(result.spec),
        },
        result.trace,
    ))
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "elbo", "val_nll"])?;
    for r in trace {
        w.write_record([
            r.epoch.to_string(),
            format!("{:?}", r.elbo),
            r.val_nll.map(|v| format!("{v:?}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::Data(format!("bad trace field {i} in row {}", out.len())))
        };
        out.push(TraceRow {
            epoch: num(0)? as usize,
            elbo: num(1)?,
            val_nll: match rec.get(2) {
                Some("") | None => None,
                Some(_) => Some(num(2)?),
            },
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    pub epochs_run: usize,
    pub final_elbo: f64,
    pub final_val_nll: Option<f64>,
}

pub fn cmd_train(config: &RunConfig) -> Result<TrainSummary> {
    config.validate()?;
    let ds = prepare_data(config, config.seed)?;
    let (model, trace) = fit(config, &ds)?;
    let out = config.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out)?;
    let checkpoint = Checkpoint {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        feature_names: ds.feature_names.clone(),
        target_name: ds.target_name.clone(),
        scaler: ds.scaler.clone().expect("standardized above"),
        model,
    };
    let (cp, tp) = (out.join(CHECKPOINT_FILE), out.join(TRACE_FILE));
    checkpoint.save(&cp)?;
    write_trace(&tp, &trace)?;
    let last = trace.last();
    Ok(TrainSummary {
        checkpoint: cp,
        trace: tp,
        epochs_run: trace.len(),
        final_elbo: last.map_or(f64::NAN, |r| r.elbo),
        final_val_nll: last.and_then(|r| r.val_nll),
    })
}

/// Reads the named feature columns of a headed CSV.
pub fn read_features(path: &Path, names: &[String]) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let cols: Vec<usize> = names
        .iter()
        .map(|n| {
            header
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| Error::Data(format!("column '{n}' missing from {}", path.display())))
        })
        .collect::<Result<_>>()?;
    let mut values = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (&c, name) in cols.iter().zip(names) {
            let v: f64 = rec
                .get(c)
                .and_then(|s| s.parse().ok())
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::Data(format!("row {r}: column '{name}' is not numeric")))?;
            values.push(v);
        }
    }
    let n = values.len() / names.len().max(1);
    Ok(DMatrix::from_row_slice(n, names.len(), &values))
}

/// Companion path for mixing samples: `pred.csv` → `pred_mixing.csv`.
pub fn mixing_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("predictions");
    out.with_file_name(format!("{stem}_mixing.csv"))
}

/// Writes predictions on the target scale (log scale for log targets) and
/// mixing samples on the model scale.
pub fn cmd_predict(checkpoint: &Path, inputs: &Path, out: &Path) -> Result<usize> {
    let cp = Checkpoint::load(checkpoint)?;
    let raw_x = read_features(inputs, &cp.feature_names)?;
    let xs = cp.scaler.transform_x(&raw_x);
    let pred = cp.model.predict(&xs)?;
    let sc = &cp.scaler;
    let mut w = csv::Writer::from_path(out)?;
    let mut header: Vec<String> = cp.feature_names.clone();
    header.extend(["mu_f", "sigma_f", "lower95", "upper95"].map(String::from));
    if pred.prob.is_some() {
        header.push("prob".into());
    }
    w.write_record(&header)?;
    for i in 0..xs.nrows() {
        let mut rec: Vec<String> = raw_x.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(format!("{:?}", sc.inverse_y(pred.mu_f[i])));
        rec.push(format!("{:?}", pred.sd_f[i] * sc.y_std));
        rec.push(format!("{:?}", sc.inverse_y(pred.lower[i])));
        rec.push(format!("{:?}", sc.inverse_y(pred.upper[i])));
        if let Some(p) = &pred.prob {
            rec.push(format!("{:?}", p[i]));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut m = csv::Writer::from_path(mixing_path(out))?;
    m.write_record(["row", "component", "value"])?;
    if let (Some(dist), TrainedModel::Variational { spec }) = (&pred.dist, &cp.model) {
        for v in &dist.xi {
            m.write_record(["", "latent", &format!("{v:?}")])?;
        }
        let hetero = matches!(
            spec.likelihood,
            LikelihoodModel::HeteroElliptical { .. } | LikelihoodModel::HeteroGaussian { .. }
        );
        let rows: Vec<Option<usize>> = if hetero {
            (0..xs.nrows()).map(Some).collect()
        } else {
            vec![None]
        };
        for r in rows {
            let xr: Vec<f64> = match r {
                Some(i) => xs.row(i).iter().cloned().collect(),
                None => vec![0.0; xs.ncols()],
            };
            if let Some(mix) = spec.likelihood.noise_mixing_at(&xr)? {
                let label = r.map(|i| i.to_string()).unwrap_or_default();
                for v in mix.stratified_samples(DEFAULT_XI_SAMPLES)? {
                    m.write_record([label.as_str(), "noise", &format!("{v:?}")])?;
                }
            }
        }
    } else if let TrainedModel::Exact { gp, .. } = &cp.model {
        m.write_record(["", "latent", "1.0"])?;
        m.write_record(["", "noise", &format!("{:?}", gp.noise_variance())])?;
    }
    m.flush()?;
    Ok(xs.nrows())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mse: f64,
    pub nll: f64,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: SplitPart,
    pub rows: Vec<Metrics>,
    pub mean: Summary,
    /// Sample standard deviation across rows; zero for a single row.
    pub std: Summary,
    /// Mean squared error in target units, when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse_raw: Option<f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

pub fn aggregate(split: SplitPart, rows: Vec<Metrics>) -> EvalReport {
    let col = |f: &dyn Fn(&Metrics) -> Option<f64>| -> Option<(f64, f64)> {
        let v: Option<Vec<f64>> = rows.iter().map(f).collect();
        v.filter(|v| !v.is_empty()).map(|v| mean_std(&v))
    };
    let (mse, nll) = (
        col(&|m| Some(m.mse)).unwrap_or((f64::NAN, 0.0)),
        col(&|m| Some(m.nll)).unwrap_or((f64::NAN, 0.0)),
    );
    let (acc, auc) = (col(&|m| m.accuracy), col(&|m| m.auc));
    EvalReport {
        split,
        mean: Summary {
            mse: mse.0,
            nll: nll.0,
            accuracy: acc.map(|a| a.0),
            auc: auc.map(|a| a.0),
        },
        std: Summary {
            mse: mse.1,
            nll: nll.1,
            accuracy: acc.map(|a| a.1),
            auc: auc.map(|a| a.1),
        },
        rows,
        mse_raw: None,
    }
}

/// Metrics of a checkpoint on one split of `data`, or, with `folds` (here
/// or in the stored configuration), of the checkpoint's configuration
/// retrained on that many seeded splits.
pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    split: SplitPart,
    folds: Option<usize>,
    raw: bool,
) -> Result<EvalReport> {
    let cp = Checkpoint::load(checkpoint)?;
    let mut config = cp.config.clone();
    config.data = Some(data.to_path_buf());
    if let Some(t) = &config.target {
        if t != &cp.target_name {
            return Err(Error::Data("checkpoint target mismatch".into()));
        }
    }
    config.target = Some(cp.target_name.clone());
    let mut report = match folds.or(cp.config.folds) {
        None => {
            let mut ds = data::load_csv(
                data,
                &cp.target_name,
                &LoadOptions {
                    log_target: config.log_target,
                },
            )?;
            if ds.dim() != cp.model.input_dim() {
                return Err(Error::DimensionMismatch {
                    context: "dataset features vs checkpoint",
                    expected: cp.model.input_dim(),
                    got: ds.dim(),
                });
            }
            ds.split(&config.split, config.seed)?;
            ds.standardize_with(&cp.scaler)?;
            let (x, y) = ds.part(split)?;
            aggregate(split, vec![cp.model.evaluate(&x, &y)?])
        }
        Some(k) => {
            if k == 0 {
                return Err(Error::InvalidArgument("folds must be positive".into()));
            }
            let rows = (0..k as u64)
                .into_par_iter()
                .map(|f| {
                    let mut c = config.clone();
                    c.seed = config.seed + f;
                    let ds = prepare_data(&c, c.seed)?;
                    let (model, _) = fit(&c, &ds)?;
                    let (x, y) = ds.part(split)?;
                    model.evaluate(&x, &y)
                })
                .collect::<Result<Vec<_>>>()?;
            aggregate(split, rows)
        }
    };
    if raw && !config.classification {
        report.mse_raw = Some(report.mean.mse * cp.scaler.y_std * cp.scaler.y_std);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub n: usize,
    /// Mean NLL of the residuals under the fitted flow noise.
    pub nll: f64,
    /// Mean NLL under the best single Gaussian variance on a log grid.
    pub gaussian_nll: f64,
    pub gaussian_variance: f64,
    pub model: LikelihoodModel,
}

/// Best zero-mean Gaussian by grid search over `log σ² ∈ [-12, 6]`.
pub fn best_gaussian(residuals: &[f64]) -> (f64, f64) {
    let n = residuals.len() as f64;
    let ss = residuals.iter().map(|r| r * r).sum::<f64>();
    (0..=1800)
        .map(|k| (-12.0 + 0.01 * k as f64).exp())
        .map(|v| (0.5 * (2.0 * std::f64::consts::PI * v).ln() + 0.5 * ss / (n * v), v))
        .fold((f64::INFINITY, f64::NAN), |a, b| if b.0 < a.0 { b } else { a })
}

pub fn cmd_fit_noise(residuals: &Path, column: Option<&str>, config: &NoiseFitConfig) -> Result<NoiseReport> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(residuals)?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let c = match column {
        Some(name) => header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("column '{name}' not found")))?,
        None => 0,
    };
    let r: Vec<f64> = rdr
        .records()
        .enumerate()
        .map(|(i, rec)| {
            rec?.get(c)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data(format!("row {i}: residual is not numeric")))
        })
        .collect::<Result<_>>()?;
    let fit = fit_noise(&r, config)?;
    let q = BaseQuadrature::default();
    let nll = -r
        .iter()
        .map(|&v| fit.model.log_lik_point(v, 0.0, &[], &q))
        .sum::<Result<f64>>()?
        / r.len() as f64;
    let (gaussian_nll, gaussian_variance) = best_gaussian(&r);
    Ok(NoiseReport {
        n: r.len(),
        nll,
        gaussian_nll,
        gaussian_variance,
        model: fit.model,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Generator {
    Gauss,
    Student4,
    Cauchy,
    Hetero,
    Clusters,
}

pub fn cmd_simulate(generator: Generator, n: usize, seed: u64, flip: f64, out: &Path) -> Result<()> {
    let ds = match generator {
        Generator::Gauss => data::gen_noise_identification(NoiseVariant::Gauss, n, seed)?,
        Generator::Student4 => data::gen_noise_identification(NoiseVariant::Student4, n, seed)?,
        Generator::Cauchy => data::gen_noise_identification(NoiseVariant::Cauchy, n, seed)?,
        Generator::Hetero => data::gen_heteroscedastic(n, seed)?,
        Generator::Clusters => data::gen_two_clusters(n, flip, seed)?,
    };
    ds.write_csv(out)
}

/// Run-configuration flags; any flag given overrides the `--config` file.
#[derive(Args, Clone, Debug, Default)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: Option<ModelVariant>,
    /// se, periodic, linear, or a sum such as se+periodic.
    #[arg(long)]
    pub kernel: Option<String>,
    #[arg(long)]
    pub inducing: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub mc_samples: Option<usize>,
    #[arg(long)]
    pub quad_nodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seeded splits for `eval` to retrain on.
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub classification: bool,
    #[arg(long)]
    pub log_target: bool,
    #[arg(long)]
    pub early_stopping: bool,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub train_z: bool,
    /// Comma-separated train/val/test fractions.
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<f64>>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
            None => RunConfig::default(),
        };
        macro_rules! take {
            ($($f:ident),*) => {$(if let Some(v) = self.$f.clone() { c.$f = v.into(); })*};
        }
        take!(model, kernel, lr, quad_nodes, seed, split);
        take!(inducing, epochs, mc_samples, data, target, out, batch_size, folds);
        c.classification |= self.classification;
        c.log_target |= self.log_target;
        c.early_stopping |= self.early_stopping;
        c.train_z |= self.train_z;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "ep",
    version,
    about = "Elliptical processes: training, prediction and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes checkpoint.json and trace.csv to --out.
    Train(RunArgs),
    /// Predict at the rows of a CSV.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV holding the checkpoint's feature columns.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Retrain on this many seeded splits and aggregate.
        #[arg(long)]
        folds: Option<usize>,
        /// Also report MSE in target units.
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a flow noise model to a column of residuals.
    FitNoise {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        column: Option<String>,
        #[arg(long, default_value_t = 3000)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset as CSV.
    Simulate {
        #[arg(value_enum)]
        generator: Generator,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Label flip fraction for clusters.
        #[arg(long, default_value_t = 0.05)]
        flip: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => {
            let summary = cmd_train(&args.resolve()?)?;
            emit(&summary, None)
        }
        Command::Predict { checkpoint, data, out } => {
            let n = cmd_predict(&checkpoint, &data, &out)?;
            eprintln!("wrote {n} predictions to {}", out.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            folds,
            raw,
            out,
        } => {
            let report = cmd_eval(&checkpoint, &data, split.parse()?, folds, raw)?;
            emit(&report, out.as_deref())
        }
        Command::FitNoise {
            data,
            column,
            epochs,
            lr,
            seed,
            out,
        } => {
            let report = cmd_fit_noise(
                &data,
                column.as_deref(),
                &NoiseFitConfig {
                    epochs,
                    lr,
                    seed,
                    ..NoiseFitConfig::default()
                },
            )?;
            eprintln!(
                "flow noise NLL {:.4}, best Gaussian NLL {:.4} (variance {:.4})",
                report.nll, report.gaussian_nll, report.gaussian_variance
            );
            emit(&report, out.as_deref())
        }
        Command::Simulate {
            generator,
            n,
            seed,
            flip,
            out,
        } => cmd_simulate(generator, n, seed, flip, &out),
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// 2 for invalid arguments, 1 for everything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => 2,
        _ => 1,
    }
}
