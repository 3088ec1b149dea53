//! Experiment configuration: TOML-backed sections with CLI-flag overrides
//! (defaults < config file < flags), plus the generic run driver that
//! instantiates the numeric core at the configured precision.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sharplab::dataset::{
    decompose, load_csv, synth_gaussian, synth_minimal_data, CsvColumns, Dataset, LabelMode,
    SpectralData,
};
use sharplab::model::{nl_gradient, nl_residual_and_loss, Activation, NonlinearParams, Params};
use sharplab::optimize::{
    init_params, nl_rk4_step, run, GfStep, InitScheme, OptimizerConfig, OptimizerKind,
    RunStatus, TrajectoryRecord,
};
use sharplab::reparam::to_reparam;
use sharplab::rng::SplitMix64;
use sharplab::scalar::{DoubleDouble, Precision, Scalar};
use sharplab::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSpec {
    Csv {
        path: PathBuf,
        #[serde(default)]
        features: Vec<String>,
        #[serde(default)]
        label: Option<String>,
        #[serde(default)]
        standardize: bool,
    },
    Gaussian {
        n: usize,
        d: usize,
        #[serde(default = "default_label_mode")]
        label_mode: LabelMode,
        #[serde(default)]
        data_seed: u64,
    },
    Minimal {
        #[serde(default = "default_minimal_dim")]
        d: usize,
        #[serde(default = "default_common_size")]
        common_size: f64,
        #[serde(default = "default_signal_size")]
        signal_size: f64,
        #[serde(default = "default_minimal_alpha")]
        alpha: f64,
        #[serde(default = "default_minimal_beta")]
        beta: f64,
        #[serde(default)]
        data_seed: u64,
    },
    /// The embedded 2x2 edge-of-stability instance.
    Eos,
}

fn default_label_mode() -> LabelMode {
    LabelMode::Gaussian
}
fn default_minimal_dim() -> usize {
    100
}
fn default_common_size() -> f64 {
    5.477
}
fn default_signal_size() -> f64 {
    0.233
}
fn default_minimal_alpha() -> f64 {
    0.3
}
fn default_minimal_beta() -> f64 {
    1.414
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset<f64>> {
        match self {
            DatasetSpec::Csv {
                path,
                features,
                label,
                standardize,
            } => {
                let columns = CsvColumns {
                    features: features.clone(),
                    label: label.clone(),
                };
                load_csv(path, &columns, *standardize)
            }
            DatasetSpec::Gaussian {
                n,
                d,
                label_mode,
                data_seed,
            } => synth_gaussian(*n, *d, *label_mode, *data_seed),
            DatasetSpec::Minimal {
                d,
                common_size,
                signal_size,
                alpha,
                beta,
                data_seed,
            } => synth_minimal_data(*d, *common_size, *signal_size, *alpha, *beta, *data_seed),
            DatasetSpec::Eos => Ok(sharplab::dataset::eos_dataset()),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelSpec {
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_depth() -> usize {
    2
}
fn default_activation() -> Activation {
    Activation::Identity
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            depth: 2,
            activation: Activation::Identity,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct OutputSpec {
    pub dir: PathBuf,
    #[serde(default)]
    pub svg: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            dir: PathBuf::from("out"),
            svg: false,
        }
    }
}

/// A full experiment: dataset, model, optimizer, initialization, outputs.
/// A run is reconstructible from this value alone.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_init")]
    pub init: InitScheme,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig::default()
}

fn default_init() -> InitScheme {
    InitScheme::UniformFanIn
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config parse: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Everything a driver reports back from one run, already at binary64.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub records: Vec<TrajectoryRecord>,
    pub status: String,
    pub steps: u64,
    pub final_loss: f64,
    pub final_sharpness: Option<f64>,
    pub final_imbalance: Option<f64>,
    pub final_u: Vec<f64>,
    pub final_v: Vec<f64>,
    pub loss_floor: f64,
}

fn status_name(status: &RunStatus) -> String {
    match status {
        RunStatus::LossStop => "loss_stop".into(),
        RunStatus::MaxSteps => "max_steps".into(),
        RunStatus::Diverged { step } => format!("diverged_at_{step}"),
    }
}

/// Runs the experiment at one precision.
fn drive<T: Scalar>(cfg: &ExperimentConfig, ds64: &Dataset<f64>) -> Result<RunOutput> {
    let ds = Dataset::<T>::cast_from_f64(ds64);
    let sd = decompose(&ds)?;
    if cfg.model.activation != Activation::Identity {
        return drive_nonlinear(cfg, &ds, &sd);
    }
    let mut rng = SplitMix64::new(cfg.optimizer.seed);
    let init = init_params(&cfg.init, ds.dim(), cfg.model.depth, &sd, &mut rng)?;
    let result = run(&cfg.optimizer, &init, &sd)?;
    let final_rec = result.records.last().cloned();
    let theta = sharplab::reparam::from_reparam(&result.final_state, &sd)?;
    Ok(RunOutput {
        status: status_name(&result.status),
        steps: final_rec.as_ref().map_or(0, |r| r.step),
        final_loss: final_rec.as_ref().map_or(f64::NAN, |r| r.loss),
        final_sharpness: final_rec.as_ref().and_then(|r| r.sharpness),
        final_imbalance: final_rec.as_ref().and_then(|r| r.imbalance),
        final_u: theta.u.iter().map(|x| x.to_f64()).collect(),
        final_v: theta.v.iter().map(|x| x.to_f64()).collect(),
        loss_floor: sd.loss_floor().to_f64(),
        records: result.records,
    })
}

/// Gradient-flow training of the two-layer nonlinear model (the only
/// optimizer with nonlinear theory behind it). Sharpness is not reported.
fn drive_nonlinear<T: Scalar>(
    cfg: &ExperimentConfig,
    ds: &Dataset<T>,
    sd: &SpectralData<T>,
) -> Result<RunOutput> {
    if cfg.model.depth != 2 {
        return Err(Error::UnsupportedDepth {
            expected: 2,
            got: cfg.model.depth,
        });
    }
    if cfg.optimizer.kind != OptimizerKind::Gf {
        return Err(Error::InvalidArgument(
            "nonlinear activations train with the gf optimizer only".into(),
        ));
    }
    let h64 = match cfg.optimizer.gf_step {
        GfStep::Fixed(h) => h,
        GfStep::Adaptive { .. } => 1e-3,
    };
    let mut rng = SplitMix64::new(cfg.optimizer.seed);
    let state = init_params(&cfg.init, ds.dim(), 2, sd, &mut rng)?;
    let theta0 = sharplab::reparam::from_reparam(&state, sd)?;
    let mut theta = NonlinearParams {
        u: theta0.u,
        v1: theta0.v[0],
        activation: cfg.model.activation,
    };
    let floor = sd.loss_floor().to_f64();
    let h = T::from_f64(h64);
    let mut records = Vec::new();
    let mut step = 0u64;
    let mut time = 0.0f64;
    let status = loop {
        let (_, loss) = nl_residual_and_loss(ds, &theta)?;
        let loss = loss.to_f64();
        if !loss.is_finite() || loss > 1e30 {
            break RunStatus::Diverged { step };
        }
        if step % cfg.optimizer.record_every == 0 {
            records.push(nl_checkpoint(ds, sd, &theta, step, time, loss)?);
        }
        if loss - floor <= cfg.optimizer.loss_stop {
            break RunStatus::LossStop;
        }
        if step >= cfg.optimizer.max_steps {
            break RunStatus::MaxSteps;
        }
        match nl_rk4_step(ds, &theta, h) {
            Ok(next) => theta = next,
            Err(Error::Diverged { .. }) => break RunStatus::Diverged { step: step + 1 },
            Err(e) => return Err(e),
        }
        time += h64;
        step += 1;
    };
    if records.last().map_or(true, |r| r.step != step) {
        if let RunStatus::Diverged { .. } = status {
        } else {
            let (_, loss) = nl_residual_and_loss(ds, &theta)?;
            records.push(nl_checkpoint(ds, sd, &theta, step, time, loss.to_f64())?);
        }
    }
    let final_rec = records.last().cloned();
    Ok(RunOutput {
        status: status_name(&status),
        steps: final_rec.as_ref().map_or(0, |r| r.step),
        final_loss: final_rec.as_ref().map_or(f64::NAN, |r| r.loss),
        final_sharpness: None,
        final_imbalance: final_rec.as_ref().and_then(|r| r.imbalance),
        final_u: theta.u.iter().map(|x| x.to_f64()).collect(),
        final_v: vec![theta.v1.to_f64()],
        loss_floor: floor,
        records,
    })
}

fn nl_checkpoint<T: Scalar>(
    ds: &Dataset<T>,
    sd: &SpectralData<T>,
    theta: &NonlinearParams<T>,
    step: u64,
    time: f64,
    loss: f64,
) -> Result<TrajectoryRecord> {
    let state = to_reparam(
        &Params::new(theta.u.clone(), vec![theta.v1])?,
        sd,
    )?;
    let c = sharplab::quantities::nl_layer_imbalance(&state, sd, theta.activation)?;
    let g = nl_gradient(ds, theta)?;
    let grad_norm = g
        .iter()
        .map(|x| x.to_f64() * x.to_f64())
        .sum::<f64>()
        .sqrt();
    Ok(TrajectoryRecord {
        step,
        time: Some(time),
        loss,
        sharpness: None,
        imbalance: Some(c.to_f64()),
        balance_dev: None,
        grad_norm,
        terms: None,
        v_magnitudes: vec![theta.v1.abs().to_f64()],
    })
}

/// Dispatches on the configured precision.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let ds64 = cfg.dataset.load()?;
    match cfg.optimizer.precision {
        Precision::Binary32 => drive::<f32>(cfg, &ds64),
        Precision::Binary64 => drive::<f64>(cfg, &ds64),
        Precision::Extended => drive::<DoubleDouble>(cfg, &ds64),
    }
}
