//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::Args;
use rayon::prelude::*;
use serde::Deserialize;

use sharplab::dataset::{
    c_tilde, decompose, difficulty, load_csv, predicted_sharpness, save_csv, synth_gaussian,
    synth_minimal_data, CsvColumns, Dataset, LabelMode,
};
use sharplab::optimize::{trajectory_to_csv, InitScheme, OptimizerConfig, OptimizerKind,
    Sampling};
use sharplab::quantities::{
    convergence_sharpness_bounds, init_sharpness_bounds, minimizer_bounds_2layer,
    minimizer_bounds_deep, BoundsReport,
};
use sharplab::scalar::Precision;
use sharplab::{Error, Result};

use crate::config::{DatasetSpec, ExperimentConfig, ModelSpec, OutputSpec, RunOutput};
use crate::plot::{render, PlotSpec, Series};
use crate::DataArgs;

fn load_from_args(args: &DataArgs) -> Result<Dataset<f64>> {
    match (&args.data, args.preset.as_deref()) {
        (Some(path), None) => load_csv(
            path,
            &CsvColumns {
                features: vec![],
                label: args.label.clone(),
            },
            args.standardize,
        ),
        (None, Some("eos")) => Ok(sharplab::dataset::eos_dataset()),
        (None, Some("minimal")) => {
            synth_minimal_data(100, 5.477, 0.233, 0.3, 1.414, args.seed)
        }
        (None, Some(other)) => Err(Error::InvalidArgument(format!(
            "unknown preset `{other}` (expected `eos` or `minimal`)"
        ))),
        (None, None) => Err(Error::InvalidArgument(
            "provide --data <csv> or --preset <name>".into(),
        )),
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    }
}

pub fn cmd_difficulty(args: &DataArgs, out: Option<&Path>) -> Result<()> {
    let ds = load_from_args(args)?;
    let sd = decompose(&ds)?;
    let q = difficulty(&sd)?;
    let ct = c_tilde(&sd);
    println!("N         = {}", ds.n());
    println!("d         = {}", ds.dim());
    println!("r         = {}", sd.rank());
    println!("sigma1    = {}", sd.sigma1());
    println!("Q         = {q}");
    match &ct {
        Ok(v) => println!("c_tilde   = {v}"),
        Err(_) => println!("c_tilde   = undefined"),
    }
    println!("sum_d_sq  = {}", sd.sum_d_sq);
    println!("loss_floor= {}", sd.loss_floor());
    let mut shat = serde_json::Map::new();
    for depth in 2..=5usize {
        let s = predicted_sharpness(&sd, depth, ds.n())?;
        println!("S_hat[D={depth}] = {s}");
        shat.insert(format!("D{depth}"), serde_json::json!(s));
    }
    if let Some(path) = out {
        let report = serde_json::json!({
            "N": ds.n(),
            "d": ds.dim(),
            "r": sd.rank(),
            "sigma1": sd.sigma1(),
            "Q": q,
            "c_tilde": ct.ok(),
            "sum_d_sq": sd.sum_d_sq,
            "loss_floor": sd.loss_floor(),
            "predicted_sharpness": shat,
        });
        std::fs::write(path, serde_json::to_string_pretty(&report).unwrap())?;
    }
    Ok(())
}

#[derive(Args, Clone, Debug)]
pub struct TrainArgs {
    /// TOML experiment config; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV dataset (overrides the config's dataset section).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub depth: Option<usize>,
    /// identity | tanh | sigmoid
    #[arg(long)]
    pub activation: Option<String>,
    /// gf | gd | sgd
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// uniform | reshuffle
    #[arg(long)]
    pub sampling: Option<String>,
    /// balanced | alpha_beta | uniform_fan_in
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Balanced-init scale.
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub record_every: Option<u64>,
    #[arg(long)]
    pub loss_stop: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Emit loss/sharpness SVG plots next to the CSV.
    #[arg(long, default_value_t = false)]
    pub svg: bool,
}

fn parse_optimizer_kind(s: &str) -> Result<OptimizerKind> {
    match s {
        "gf" => Ok(OptimizerKind::Gf),
        "gd" => Ok(OptimizerKind::Gd),
        "sgd" => Ok(OptimizerKind::Sgd),
        other => Err(Error::InvalidArgument(format!("unknown optimizer `{other}`"))),
    }
}

fn parse_sampling(s: &str) -> Result<Sampling> {
    match s {
        "uniform" => Ok(Sampling::Uniform),
        "reshuffle" | "random_reshuffling" => Ok(Sampling::RandomReshuffling),
        other => Err(Error::InvalidArgument(format!("unknown sampling `{other}`"))),
    }
}

fn parse_activation(s: &str) -> Result<sharplab::model::Activation> {
    match s {
        "identity" => Ok(sharplab::model::Activation::Identity),
        "tanh" => Ok(sharplab::model::Activation::Tanh),
        "sigmoid" => Ok(sharplab::model::Activation::Sigmoid),
        other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
    }
}

/// Builds the effective config: defaults, then the file, then flags.
pub fn effective_config(args: &TrainArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig {
            dataset: DatasetSpec::Eos,
            model: ModelSpec::default(),
            optimizer: OptimizerConfig::default(),
            init: InitScheme::UniformFanIn,
            output: OutputSpec::default(),
        },
    };
    if let Some(path) = &args.data {
        cfg.dataset = DatasetSpec::Csv {
            path: path.clone(),
            features: vec![],
            label: None,
            standardize: false,
        };
    } else if let Some(preset) = &args.preset {
        cfg.dataset = match preset.as_str() {
            "eos" => DatasetSpec::Eos,
            "minimal" => DatasetSpec::Minimal {
                d: 100,
                common_size: 5.477,
                signal_size: 0.233,
                alpha: 0.3,
                beta: 1.414,
                data_seed: args.seed.unwrap_or(0),
            },
            other => {
                return Err(Error::InvalidArgument(format!("unknown preset `{other}`")));
            }
        };
    }
    if let Some(d) = args.depth {
        cfg.model.depth = d;
    }
    if let Some(a) = &args.activation {
        cfg.model.activation = parse_activation(a)?;
    }
    if let Some(k) = &args.optimizer {
        cfg.optimizer.kind = parse_optimizer_kind(k)?;
    }
    if let Some(lr) = args.lr {
        cfg.optimizer.eta = lr;
    }
    if let Some(b) = args.batch {
        cfg.optimizer.batch = b;
    }
    if let Some(s) = &args.sampling {
        cfg.optimizer.sampling = parse_sampling(s)?;
    }
    if let Some(scheme) = &args.init {
        cfg.init = match scheme.as_str() {
            "balanced" => InitScheme::Balanced {
                c: args.scale.unwrap_or(1.0),
            },
            "alpha_beta" => InitScheme::AlphaBeta {
                alpha: args.alpha.unwrap_or(0.5),
                beta: args.beta.unwrap_or(0.5),
            },
            "uniform_fan_in" => InitScheme::UniformFanIn,
            other => {
                return Err(Error::InvalidArgument(format!("unknown init `{other}`")));
            }
        };
    }
    if let Some(seed) = args.seed {
        cfg.optimizer.seed = seed;
    }
    if let Some(p) = args.precision {
        cfg.optimizer.precision = p;
    }
    if let Some(n) = args.record_every {
        cfg.optimizer.record_every = n;
    }
    if let Some(l) = args.loss_stop {
        cfg.optimizer.loss_stop = l;
    }
    if let Some(m) = args.max_steps {
        cfg.optimizer.max_steps = m;
    }
    if let Some(out) = &args.out {
        cfg.output.dir = out.clone();
    }
    if args.svg {
        cfg.output.svg = true;
    }
    Ok(cfg)
}

fn unix_seconds() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Writes trajectory CSV (with a `#` timestamp line excluded from identity
/// comparisons), final-state JSON, the echoed config, and optional plots.
pub fn write_run_outputs(
    cfg: &ExperimentConfig,
    out: &RunOutput,
    dir: &Path,
    guide_2_over_eta: Option<f64>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = format!("# generated-at {}\n", unix_seconds());
    csv.push_str(&trajectory_to_csv(&out.records));
    std::fs::write(dir.join("trajectory.csv"), csv)?;
    let final_json = serde_json::json!({
        "status": out.status,
        "steps": out.steps,
        "loss": out.final_loss,
        "loss_floor": out.loss_floor,
        "sharpness": out.final_sharpness,
        "imbalance": out.final_imbalance,
        "theta": { "u": out.final_u, "v": out.final_v },
        "precision": cfg.optimizer.precision.name(),
    });
    std::fs::write(
        dir.join("final.json"),
        serde_json::to_string_pretty(&final_json).unwrap(),
    )?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    if cfg.output.svg {
        let xs: Vec<f64> = out.records.iter().map(|r| r.step as f64).collect();
        let loss: Vec<f64> = out.records.iter().map(|r| r.loss).collect();
        std::fs::write(
            dir.join("loss.svg"),
            render(&PlotSpec {
                title: "training loss",
                x_label: "step",
                y_label: "loss (log10)",
                series: Series { xs: &xs, ys: &loss },
                log_y: true,
                guide_y: None,
            }),
        )?;
        let sharp: Vec<(f64, f64)> = out
            .records
            .iter()
            .filter_map(|r| r.sharpness.map(|s| (r.step as f64, s)))
            .collect();
        if !sharp.is_empty() {
            let sx: Vec<f64> = sharp.iter().map(|p| p.0).collect();
            let sy: Vec<f64> = sharp.iter().map(|p| p.1).collect();
            std::fs::write(
                dir.join("sharpness.svg"),
                render(&PlotSpec {
                    title: "sharpness",
                    x_label: "step",
                    y_label: "S",
                    series: Series { xs: &sx, ys: &sy },
                    log_y: false,
                    guide_y: guide_2_over_eta,
                }),
            )?;
        }
    }
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = effective_config(args)?;
    let out = crate::config::run_experiment(&cfg)?;
    let guide = match cfg.optimizer.kind {
        OptimizerKind::Gd | OptimizerKind::Sgd => Some(2.0 / cfg.optimizer.eta),
        OptimizerKind::Gf => None,
    };
    write_run_outputs(&cfg, &out, &cfg.output.dir, guide)?;
    println!(
        "run finished: status={} steps={} loss={:e}{}",
        out.status,
        out.steps,
        out.final_loss,
        out.final_sharpness
            .map_or(String::new(), |s| format!(" sharpness={s:.6}"))
    );
    println!("outputs in {}", cfg.output.dir.display());
    Ok(())
}

pub fn cmd_bounds(
    data: &DataArgs,
    depth: usize,
    imbalance: f64,
    alpha: Option<f64>,
    beta: Option<f64>,
    out: Option<&Path>,
) -> Result<()> {
    let ds = load_from_args(data)?;
    let sd = decompose(&ds)?;
    let n = ds.n();
    let reports: Vec<BoundsReport> = match (alpha, beta) {
        (Some(a), Some(b)) => {
            if depth != 2 {
                return Err(Error::UnsupportedDepth {
                    expected: 2,
                    got: depth,
                });
            }
            vec![
                init_sharpness_bounds(&sd, a, b, n)?,
                convergence_sharpness_bounds(&sd, a, b, n)?,
            ]
        }
        (None, None) => {
            if depth == 2 {
                vec![minimizer_bounds_2layer(&sd, imbalance, n)?]
            } else {
                vec![minimizer_bounds_deep(&sd, depth, n)?]
            }
        }
        _ => {
            return Err(Error::InvalidArgument(
                "provide both --alpha and --beta or neither".into(),
            ));
        }
    };
    let json = serde_json::to_string_pretty(&reports).unwrap();
    match out {
        Some(path) => std::fs::write(path, &json)?,
        None => println!("{json}"),
    }
    Ok(())
}

pub fn cmd_verify(suite: &str, seed: u64, tolerance_scale: f64) -> ExitCode {
    match sharplab::verify::run_selected(suite, seed, tolerance_scale) {
        Ok(reports) => {
            let mut all_ok = true;
            for r in &reports {
                println!(
                    "suite {}: {} cases={} failures={} max_err={:.3e}",
                    r.name,
                    if r.passed() { "pass" } else { "FAIL" },
                    r.cases,
                    r.failures,
                    r.max_err
                );
                all_ok &= r.passed();
            }
            if all_ok {
                println!("verify: all selected suites passed");
                ExitCode::SUCCESS
            } else {
                println!("verify: FAILURES present");
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

#[derive(Args, Clone, Debug)]
pub struct SynthArgs {
    /// minimal | gaussian
    #[arg(long)]
    pub kind: String,
    #[arg(long, default_value_t = 100)]
    pub d: usize,
    #[arg(long, default_value_t = 2)]
    pub n: usize,
    #[arg(long, default_value_t = 5.477)]
    pub common_size: f64,
    #[arg(long, default_value_t = 0.233)]
    pub signal_size: f64,
    #[arg(long, default_value_t = 0.3)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.414)]
    pub beta: f64,
    /// gaussian | pm1
    #[arg(long, default_value = "gaussian")]
    pub label_mode: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let ds = match args.kind.as_str() {
        "minimal" => synth_minimal_data(
            args.d,
            args.common_size,
            args.signal_size,
            args.alpha,
            args.beta,
            args.seed,
        )?,
        "gaussian" => {
            let mode = match args.label_mode.as_str() {
                "gaussian" => LabelMode::Gaussian,
                "pm1" | "plus_minus_balanced" => LabelMode::PlusMinusBalanced,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown label mode `{other}`"
                    )));
                }
            };
            synth_gaussian(args.n, args.d, mode, args.seed)?
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown generator `{other}` (expected minimal|gaussian)"
            )));
        }
    };
    save_csv(&ds, &args.out)?;
    println!("wrote {} samples x {} features to {}", ds.n(), ds.dim(), args.out.display());
    Ok(())
}

pub fn cmd_eos_demo(
    precision: Precision,
    lr: f64,
    max_steps: u64,
    loss_stop: f64,
    record_every: u64,
    out: &Path,
) -> Result<()> {
    let cfg = ExperimentConfig {
        dataset: DatasetSpec::Eos,
        model: ModelSpec::default(),
        optimizer: OptimizerConfig {
            kind: OptimizerKind::Gd,
            eta: lr,
            record_every,
            max_steps,
            loss_stop,
            precision,
            ..OptimizerConfig::default()
        },
        init: InitScheme::Explicit {
            u: vec![0.01, 0.01],
            v: vec![0.01],
        },
        output: OutputSpec {
            dir: out.to_path_buf(),
            svg: true,
        },
    };
    let run_out = crate::config::run_experiment(&cfg)?;
    write_run_outputs(&cfg, &run_out, out, Some(2.0 / lr))?;
    let threshold = 2.0 / lr;
    let crossing = run_out
        .records
        .iter()
        .find(|r| r.sharpness.is_some_and(|s| s >= threshold));
    match crossing {
        Some(rec) => println!(
            "sharpness first crossed 2/eta = {threshold} at step {} (value {:.3})",
            rec.step,
            rec.sharpness.unwrap()
        ),
        None => println!("sharpness never crossed 2/eta = {threshold}"),
    }
    println!(
        "final: status={} steps={} loss={:e}",
        run_out.status, run_out.steps, run_out.final_loss
    );
    println!("outputs in {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Sweep.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, Deserialize)]
pub struct SweepAxes {
    #[serde(default)]
    pub lr: Vec<f64>,
    #[serde(default)]
    pub batch: Vec<usize>,
    #[serde(default)]
    pub depth: Vec<usize>,
    #[serde(default)]
    pub n: Vec<usize>,
    #[serde(default)]
    pub precision: Vec<Precision>,
}

#[derive(Debug, Deserialize)]
pub struct SweepConfig {
    #[serde(flatten)]
    pub base: ExperimentConfig,
    #[serde(default)]
    pub sweep: SweepAxes,
}

#[derive(Clone, Debug)]
struct SweepPoint {
    index: usize,
    lr: f64,
    batch: usize,
    depth: usize,
    n: Option<usize>,
    precision: Precision,
    seed: u64,
}

fn fmt_cell(v: f64) -> String {
    format!("{v}")
}

pub fn cmd_sweep(config_path: &Path, out_override: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(config_path)?;
    let sweep_cfg: SweepConfig =
        toml::from_str(&text).map_err(|e| Error::InvalidArgument(format!("config parse: {e}")))?;
    let base = sweep_cfg.base;
    let axes = sweep_cfg.sweep;
    let out_dir = out_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| base.output.dir.clone());
    std::fs::create_dir_all(&out_dir)?;

    let lrs = if axes.lr.is_empty() { vec![base.optimizer.eta] } else { axes.lr.clone() };
    let batches = if axes.batch.is_empty() { vec![base.optimizer.batch] } else { axes.batch.clone() };
    let depths = if axes.depth.is_empty() { vec![base.model.depth] } else { axes.depth.clone() };
    let ns: Vec<Option<usize>> = if axes.n.is_empty() {
        vec![None]
    } else {
        axes.n.iter().copied().map(Some).collect()
    };
    let precisions = if axes.precision.is_empty() {
        vec![base.optimizer.precision]
    } else {
        axes.precision.clone()
    };

    // per-run seeds derived by splitting the master seed in grid order
    let mut seeder = sharplab::rng::SplitMix64::new(base.optimizer.seed);
    let mut points = Vec::new();
    for &lr in &lrs {
        for &batch in &batches {
            for &depth in &depths {
                for &n in &ns {
                    for &precision in &precisions {
                        points.push(SweepPoint {
                            index: points.len(),
                            lr,
                            batch,
                            depth,
                            n,
                            precision,
                            // 63 bits: the echoed config must stay
                            // representable as a TOML integer
                            seed: seeder.next_u64() >> 1,
                        });
                    }
                }
            }
        }
    }

    let results: Vec<(SweepPoint, Result<RunOutput>)> = points
        .par_iter()
        .map(|p| {
            let mut cfg = base.clone();
            cfg.optimizer.eta = p.lr;
            cfg.optimizer.batch = p.batch;
            cfg.model.depth = p.depth;
            cfg.optimizer.precision = p.precision;
            cfg.optimizer.seed = p.seed;
            if let (Some(n), DatasetSpec::Gaussian { n: base_n, .. }) = (p.n, &mut cfg.dataset) {
                *base_n = n;
            }
            let result = crate::config::run_experiment(&cfg);
            if let Ok(out) = &result {
                let dir = out_dir.join(format!("run_{:03}", p.index));
                let guide = match cfg.optimizer.kind {
                    OptimizerKind::Gd | OptimizerKind::Sgd => Some(2.0 / cfg.optimizer.eta),
                    OptimizerKind::Gf => None,
                };
                let _ = write_run_outputs(&cfg, out, &dir, guide);
            }
            (p.clone(), result)
        })
        .collect();

    let mut summary = String::from(
        "run,lr,batch,depth,n,precision,seed,status,steps,final_loss,final_sharpness,final_imbalance\n",
    );
    for (p, result) in &results {
        match result {
            Ok(out) => {
                summary.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    p.index,
                    fmt_cell(p.lr),
                    p.batch,
                    p.depth,
                    p.n.map_or(String::new(), |n| n.to_string()),
                    p.precision.name(),
                    p.seed,
                    out.status,
                    out.steps,
                    out.final_loss,
                    out.final_sharpness.map_or(String::new(), fmt_cell),
                    out.final_imbalance.map_or(String::new(), fmt_cell),
                ));
            }
            Err(e) => {
                summary.push_str(&format!(
                    "{},{},{},{},{},{},{},error: {},,,,\n",
                    p.index,
                    fmt_cell(p.lr),
                    p.batch,
                    p.depth,
                    p.n.map_or(String::new(), |n| n.to_string()),
                    p.precision.name(),
                    p.seed,
                    e.to_string().replace(',', ";"),
                ));
            }
        }
    }
    std::fs::write(out_dir.join("summary.csv"), &summary)?;

    // pairwise precision-divergence report for runs differing only in
    // precision
    if precisions.len() >= 2 {
        let mut report =
            String::from("lr,batch,depth,n,precision_a,precision_b,divergence_step,max_sharpness_diff\n");
        for (i, (pa, ra)) in results.iter().enumerate() {
            for (pb, rb) in results.iter().skip(i + 1) {
                let same_group = pa.lr == pb.lr
                    && pa.batch == pb.batch
                    && pa.depth == pb.depth
                    && pa.n == pb.n
                    && pa.precision != pb.precision;
                if !same_group {
                    continue;
                }
                if let (Ok(a), Ok(b)) = (ra, rb) {
                    let common = a.records.len().min(b.records.len());
                    let mut max_diff = 0.0f64;
                    let mut div_step: Option<u64> = None;
                    for k in 0..common {
                        if let (Some(sa), Some(sb)) =
                            (a.records[k].sharpness, b.records[k].sharpness)
                        {
                            let d = (sa - sb).abs();
                            max_diff = max_diff.max(d);
                            if div_step.is_none() && d > 1.0 {
                                div_step = Some(a.records[k].step);
                            }
                        }
                    }
                    report.push_str(&format!(
                        "{},{},{},{},{},{},{},{}\n",
                        fmt_cell(pa.lr),
                        pa.batch,
                        pa.depth,
                        pa.n.map_or(String::new(), |n| n.to_string()),
                        pa.precision.name(),
                        pb.precision.name(),
                        div_step.map_or(String::new(), |s| s.to_string()),
                        max_diff,
                    ));
                }
            }
        }
        std::fs::write(out_dir.join("precision_divergence.csv"), report)?;
    }

    let failures = results.iter().filter(|(_, r)| r.is_err()).count();
    println!(
        "sweep complete: {} runs, {} failed; summary in {}",
        results.len(),
        failures,
        out_dir.join("summary.csv").display()
    );
    Ok(())
}
