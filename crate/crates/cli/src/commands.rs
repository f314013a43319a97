//! Subcommand implementations. Each returns a JSON value for `--json` and a
//! short human-readable summary.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use rand::Rng;
use rana_core::adapters::{self, build_relu_equivalent, neuron_adapted_relu, Forward};
use rana_core::allocation::{self, MlpSearchOptions};
use rana_core::decomposition::{self, CalibrationSet, DecomposeOptions};
use rana_core::evaluation::{self, AdapterKind, CompareOptions};
use rana_core::flops::{self, MaskerKind};
use rana_core::kernels::{self, BenchConfig};
use rana_core::maskers::{Mask, TrainOptions};
use rana_core::tensor::{self, seeded_rng, Matrix};
use rana_core::toy::{self, AdaptTargets, DivergenceConfig, ToyMlpConfig, ToyTransformer, ToyTransformerSpec};
use rana_core::{Exec, RanaError};
use serde::Serialize;
use serde_json::{json, Value};

use crate::bundle::{
    self, AllocationPlan, LayerPlan, LayerSpec, LoadedLayer, MaskerChoice, ModelBundle, ModelManifest, PlanSummary, RunConfig,
    MANIFEST_FILE, PLAN_FILE, SCHEMA_VERSION,
};
use crate::error::{CliError, CliResult};
use crate::tensor_file::{self, Tensor};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

pub struct Output {
    pub json: Value,
    pub text: String,
}

fn check_fraction(name: &str, v: f64, lo_open: f64, hi: f64) -> CliResult<()> {
    if !(v > lo_open && v <= hi) {
        return Err(CliError::Argument(format!("{name} {v} outside ({lo_open}, {hi}]")));
    }
    Ok(())
}

#[derive(Args, Clone, Debug)]
pub struct DecomposeArgs {
    /// Weight tensor (o × i).
    #[arg(long)]
    pub weights: PathBuf,
    /// Calibration inputs (i × k).
    #[arg(long)]
    pub calib: PathBuf,
    /// Ranks to keep; defaults to min(o, i).
    #[arg(long)]
    pub keep_ranks: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct DecomposeManifest {
    schema_version: u32,
    toolkit_version: &'static str,
    config_hash: String,
    seed: u64,
    weight_shape: (usize, usize),
    calib_shape: (usize, usize),
    kept_ranks: usize,
    dropped_ranks: usize,
    a: &'static str,
    b: &'static str,
    s: &'static str,
    discarded_energy: f64,
}

pub fn decompose(args: &DecomposeArgs, exec: Exec) -> CliResult<Output> {
    let w = tensor_file::read_matrix(&args.weights)?;
    let x = tensor_file::read_matrix(&args.calib)?;
    if w.cols() != x.rows() {
        return Err(CliError::Shape(format!("weights are {:?} but calibration inputs are {:?}", w.shape(), x.shape())));
    }
    let calib = CalibrationSet::new(x);
    let dec = decomposition::decompose_with(&w, &calib, DecomposeOptions { keep_ranks: args.keep_ranks, exec, ..Default::default() })?;
    tensor_file::write_matrix(&args.out.join("A.rana"), dec.a())?;
    tensor_file::write_matrix(&args.out.join("B.rana"), dec.b())?;
    tensor_file::write_tensor(&args.out.join("S.rana"), &Tensor::from_vector(dec.singular_values()))?;
    let hash_input = json!({
        "command": "decompose",
        "weights": bundle::sha256_hex(&tensor_file::encode(&Tensor::from_matrix(&w))),
        "calib": bundle::sha256_hex(&tensor_file::encode(&Tensor::from_matrix(calib.x()))),
        "keep_ranks": args.keep_ranks,
        "seed": args.seed,
    });
    let manifest = DecomposeManifest {
        schema_version: SCHEMA_VERSION,
        toolkit_version: TOOLKIT_VERSION,
        config_hash: bundle::sha256_hex(hash_input.to_string().as_bytes()),
        seed: args.seed,
        weight_shape: w.shape(),
        calib_shape: calib.x().shape(),
        kept_ranks: dec.kept(),
        dropped_ranks: dec.dropped_ranks(),
        a: "A.rana",
        b: "B.rana",
        s: "S.rana",
        discarded_energy: dec.discarded_energy(dec.kept()),
    };
    bundle::write_json(&args.out.join(MANIFEST_FILE), &manifest)?;
    let text = format!("kept {} ranks, discarded energy {:.6e}, wrote {}", dec.kept(), manifest.discarded_energy, args.out.display());
    Ok(Output { json: serde_json::to_value(&manifest).expect("serializable"), text })
}

#[derive(Args, Clone, Debug)]
pub struct CalibrateArgs {
    /// Input dimension.
    #[arg(long)]
    pub dim: usize,
    #[arg(long)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Covariance matrix (dim × dim) to sample from.
    #[arg(long, conflicts_with = "activations")]
    pub covariance: Option<PathBuf>,
    /// Stored activations (dim × n) to resample with replacement.
    #[arg(long)]
    pub activations: Option<PathBuf>,
    /// Spectrum decay of the default anisotropic Gaussian.
    #[arg(long, default_value_t = 0.7)]
    pub decay: f64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn calibrate(args: &CalibrateArgs) -> CliResult<Output> {
    if args.dim == 0 || args.samples == 0 {
        return Err(CliError::Argument("dim and samples must be positive".into()));
    }
    let mut rng = seeded_rng(args.seed);
    let (source, x) = if let Some(path) = &args.covariance {
        let cov = tensor_file::read_matrix(path)?;
        if cov.shape() != (args.dim, args.dim) {
            return Err(CliError::Shape(format!("covariance is {:?}, expected {}×{}", cov.shape(), args.dim, args.dim)));
        }
        let (vals, vecs) = tensor::symmetric_eigen(&cov)?;
        let root = Matrix::from_fn(args.dim, args.dim, |r, c| vecs.get(r, c) * vals[c].max(0.0).sqrt());
        ("covariance", tensor::matmul(&root, &Matrix::gaussian(args.dim, args.samples, 1.0, &mut rng))?)
    } else if let Some(path) = &args.activations {
        let dump = tensor_file::read_matrix(path)?;
        if dump.rows() != args.dim {
            return Err(CliError::Shape(format!("activations have dimension {}, expected {}", dump.rows(), args.dim)));
        }
        let cols: Vec<Vec<f64>> = (0..args.samples).map(|_| dump.column(rng.random_range(0..dump.cols()))).collect();
        ("activations", Matrix::from_columns(&cols)?)
    } else {
        ("anisotropic", toy::anisotropic_inputs(args.dim, args.samples, args.decay, &mut rng)?)
    };
    tensor_file::write_matrix(&args.out, &x)?;
    Ok(Output {
        json: json!({ "source": source, "dim": args.dim, "samples": args.samples, "out": args.out }),
        text: format!("wrote {}×{} calibration inputs from {source} to {}", args.dim, args.samples, args.out.display()),
    })
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskerArg {
    B,
    Sigmoid,
}

#[derive(Args, Clone, Debug)]
pub struct CompressArgs {
    /// Model bundle directory containing manifest.json.
    #[arg(long)]
    pub model: PathBuf,
    /// Fraction of dense FLOPs to keep, in (0, 1].
    #[arg(long)]
    pub budget: f64,
    #[arg(long, default_value_t = allocation::DEFAULT_GRID_STEP)]
    pub grid_step: f64,
    #[arg(long, value_enum, default_value_t = MaskerArg::B)]
    pub masker: MaskerArg,
    /// Inner width of sigmoid maskers.
    #[arg(long, default_value_t = 4)]
    pub sigmoid_inner: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Share of each layer's calibration inputs used for fitting; the rest is held out.
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    /// Output directory for plan.json and factor files.
    #[arg(long)]
    pub out: PathBuf,
}

fn minimum_fraction(layer: &LoadedLayer, kind: MaskerKind) -> CliResult<f64> {
    Ok(match layer {
        LoadedLayer::Linear { weight } => {
            let (o, i) = weight.shape();
            allocation::minimum_layer_flops(o, i, kind)? / flops::dense_linear_flops(o, i).total()
        }
        LoadedLayer::Mlp { weights } => allocation::minimum_mlp_flops(weights.shape(), kind)? / weights.dense_flops().total(),
    })
}

pub fn compress(args: &CompressArgs, exec: Exec) -> CliResult<Output> {
    check_fraction("budget", args.budget, 0.0, 1.0)?;
    check_fraction("train fraction", args.train_fraction, 0.0, 1.0)?;
    let model = ModelBundle::open(&args.model)?;
    let config = RunConfig {
        seed: args.seed,
        budget: args.budget,
        grid_step: args.grid_step,
        masker: match args.masker {
            MaskerArg::B => MaskerChoice::B,
            MaskerArg::Sigmoid => MaskerChoice::Sigmoid,
        },
        sigmoid_inner: args.sigmoid_inner,
        train_fraction: args.train_fraction,
        model_digest: model.digest()?,
    };
    let kind = match config.masker {
        MaskerChoice::B => MaskerKind::BMasker,
        MaskerChoice::Sigmoid => MaskerKind::Sigmoid { inner: args.sigmoid_inner },
    };
    let train_opts = TrainOptions { inner: args.sigmoid_inner, seed: args.seed, ..Default::default() };

    let mut layers = Vec::new();
    let mut infeasible = Vec::new();
    let (mut dense_total, mut achieved_total) = (0.0, 0.0);
    for spec in &model.manifest.layers {
        let layer = model.load_layer(spec)?;
        let calib = model.load_calib(spec)?;
        let (train, _) = split(&calib, args.train_fraction, args.seed)?;
        let result = match &layer {
            LoadedLayer::Linear { weight } => compress_linear(spec.name(), weight, &train, args, kind, &train_opts, exec),
            LoadedLayer::Mlp { weights } => compress_mlp(spec.name(), weights, &train, args, kind, &train_opts, exec),
        };
        match result {
            Ok((plan, dense, achieved)) => {
                dense_total += dense;
                achieved_total += achieved;
                layers.push(plan);
            }
            Err(CliError::Core(RanaError::InfeasibleBudget { .. })) => infeasible.push((spec.name().to_string(), minimum_fraction(&layer, kind)?)),
            Err(e) => return Err(e),
        }
    }
    if !infeasible.is_empty() {
        return Err(CliError::Infeasible(infeasible));
    }
    let plan = AllocationPlan {
        schema_version: SCHEMA_VERSION,
        toolkit_version: TOOLKIT_VERSION.to_string(),
        config_hash: config.hash(),
        config,
        layers,
        summary: PlanSummary {
            dense_flops: dense_total,
            achieved_flops: achieved_total,
            compression: flops::compression_rate(achieved_total, dense_total),
        },
    };
    bundle::write_json(&args.out.join(PLAN_FILE), &plan)?;
    let text = format!(
        "compressed {} layers: {:.2}% of dense FLOPs removed; plan at {}",
        plan.layers.len(),
        100.0 * plan.summary.compression,
        args.out.join(PLAN_FILE).display()
    );
    Ok(Output {
        json: json!({ "plan": args.out.join(PLAN_FILE), "config_hash": plan.config_hash, "summary": plan.summary }),
        text,
    })
}

fn split(calib: &CalibrationSet, fraction: f64, seed: u64) -> CliResult<(CalibrationSet, CalibrationSet)> {
    if fraction >= 1.0 {
        return Ok((calib.clone(), calib.clone()));
    }
    Ok(calib.split(fraction, seed)?)
}

fn compress_linear(
    name: &str,
    weight: &Matrix,
    train: &CalibrationSet,
    args: &CompressArgs,
    kind: MaskerKind,
    train_opts: &TrainOptions,
    exec: Exec,
) -> CliResult<(LayerPlan, f64, f64)> {
    let (o, i) = weight.shape();
    if train.dim() != i {
        return Err(CliError::Shape(format!("layer {name}: weight is {o}×{i}, calibration dimension {}", train.dim())));
    }
    let dense = flops::dense_linear_flops(o, i).total();
    let dec = decomposition::decompose_with(weight, train, DecomposeOptions { keep_ranks: None, exec, ..Default::default() })?;
    let stats = decomposition::rank_contributions_with(&dec, train, exec)?;
    let search = allocation::line_search_layer_with(&dec, &stats, args.budget * dense, kind, exec)?;
    let built = match kind {
        MaskerKind::Sigmoid { .. } => allocation::build_sigmoid_layer(&dec, &search.allocation, train, train_opts)?,
        _ => allocation::build_layer(&dec, &search.allocation)?,
    };
    let factors = built.as_ref().map(|l| bundle::save_factors(&args.out, name, l)).transpose()?;
    let achieved = search.allocation.achieved_flops.total();
    Ok((LayerPlan::Linear { name: name.to_string(), allocation: search.allocation, factors, search_log: search.log }, dense, achieved))
}

fn compress_mlp(
    name: &str,
    weights: &adapters::MlpWeights,
    train: &CalibrationSet,
    args: &CompressArgs,
    kind: MaskerKind,
    train_opts: &TrainOptions,
    exec: Exec,
) -> CliResult<(LayerPlan, f64, f64)> {
    if train.dim() != weights.shape().d {
        return Err(CliError::Shape(format!("layer {name}: MLP width {}, calibration dimension {}", weights.shape().d, train.dim())));
    }
    let opts = MlpSearchOptions { grid_step: args.grid_step, masker: kind, exec };
    let search = allocation::grid_search_mlp(weights, train, args.budget, &opts)?;
    let mlp = match kind {
        MaskerKind::Sigmoid { .. } => allocation::with_sigmoid_maskers(&search, weights, train, train_opts)?,
        _ => search.mlp.clone(),
    };
    let save = |stem: &str, l: &adapters::AdaptedLinear| -> CliResult<Option<bundle::FactorFiles>> {
        match l {
            adapters::AdaptedLinear::Rank(r) => Ok(Some(bundle::save_factors(&args.out, stem, r)?)),
            adapters::AdaptedLinear::Dense(_) => Ok(None),
        }
    };
    let up = save(&format!("{name}.up"), &mlp.up)?;
    let gate = mlp.gate.as_ref().map(|g| save(&format!("{name}.gate"), g)).transpose()?.flatten();
    let dense = search.allocation.dense_flops;
    let achieved = search.allocation.achieved_flops.total();
    Ok((
        LayerPlan::Mlp { name: name.to_string(), allocation: search.allocation, up, gate, search_log: search.log, uniform_error: search.uniform_error },
        dense,
        achieved,
    ))
}

#[derive(Args, Clone, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Adapted bundle written by `compress`.
    #[arg(long)]
    pub adapted: PathBuf,
    /// Error table destination (CSV).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub const EVAL_CSV_HEADER: &str = "layer,mean,median,max,skipped,compression,adapted_flops,original_flops";

pub fn eval(args: &EvalArgs, exec: Exec) -> CliResult<Output> {
    let plan = bundle::open_plan(&args.adapted)?;
    let model = ModelBundle::open(&args.model)?;
    if plan.config.model_digest != model.digest()? {
        return Err(CliError::Argument("adapted bundle was built from a different model bundle".into()));
    }
    let mut csv = format!("{EVAL_CSV_HEADER}\n");
    let mut reports = Vec::new();
    for (spec, lp) in model.manifest.layers.iter().zip(&plan.layers) {
        if spec.name() != lp.name() {
            return Err(CliError::Argument(format!("plan layer {} does not match model layer {}", lp.name(), spec.name())));
        }
        let layer = model.load_layer(spec)?;
        let (_, held) = split(&model.load_calib(spec)?, plan.config.train_fraction, plan.config.seed)?;
        let adapted = bundle::load_adapted(&args.adapted, lp, &layer)?;
        let original: &dyn Forward = match &layer {
            LoadedLayer::Linear { weight } => weight,
            LoadedLayer::Mlp { weights } => weights,
        };
        let r = evaluation::measure_layer_error(spec.name(), original, adapted.as_ref(), held.x(), exec)?;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            spec.name(), r.mean, r.median, r.max, r.skipped, r.compression, r.adapted_flops, r.original_flops
        ));
        reports.push(r);
    }
    if let Some(out) = &args.out {
        bundle::write_atomic(out, csv.as_bytes())?;
    }
    let mean = reports.iter().map(|r| r.mean).sum::<f64>() / reports.len().max(1) as f64;
    let skipped: usize = reports.iter().map(|r| r.skipped).sum();
    if skipped > 0 {
        eprintln!("warning: {skipped} evaluation inputs had zero reference output and were skipped");
    }
    Ok(Output {
        json: json!({ "config_hash": plan.config_hash, "mean_error": mean, "layers": reports }),
        text: if args.out.is_some() { format!("mean normalized error {mean:.6e}") } else { csv },
    })
}

#[derive(Args, Clone, Debug)]
pub struct CompareArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub budget: f64,
    /// Adapter kinds to compare.
    #[arg(long, value_delimiter = ',', default_values = ["rana", "cats-like", "neuron-adapter", "fixed-svd"])]
    pub adapters: Vec<AdapterArg>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterArg {
    Rana,
    CatsLike,
    NeuronAdapter,
    FixedSvd,
}

impl From<AdapterArg> for AdapterKind {
    fn from(a: AdapterArg) -> Self {
        match a {
            AdapterArg::Rana => AdapterKind::Rana,
            AdapterArg::CatsLike => AdapterKind::CatsLike,
            AdapterArg::NeuronAdapter => AdapterKind::NeuronAdapter,
            AdapterArg::FixedSvd => AdapterKind::FixedSvd,
        }
    }
}

pub const COMPARE_CSV_HEADER: &str = "layer,adapter,target_flops,expected_flops,mean,median,max,skipped,compression,note";

/// Matched-FLOP comparison over the MLP layers of a model bundle.
pub fn compare(args: &CompareArgs, exec: Exec) -> CliResult<Output> {
    check_fraction("budget", args.budget, 0.0, 1.0)?;
    let model = ModelBundle::open(&args.model)?;
    let kinds: Vec<AdapterKind> = args.adapters.iter().map(|&a| a.into()).collect();
    let opts = CompareOptions {
        search: MlpSearchOptions { exec, ..Default::default() },
        train: TrainOptions { seed: args.seed, ..Default::default() },
    };
    let mut csv = format!("{COMPARE_CSV_HEADER}\n");
    let mut out = Vec::new();
    for spec in &model.manifest.layers {
        let LoadedLayer::Mlp { weights } = model.load_layer(spec)? else {
            eprintln!("note: skipping linear layer {}; comparisons cover MLPs", spec.name());
            continue;
        };
        let (train, held) = split(&model.load_calib(spec)?, args.train_fraction, args.seed)?;
        let rows = evaluation::compare_adapters(&weights, &train, &held, args.budget, &kinds, &opts)?;
        for r in &rows {
            let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
            let rep = r.report.as_ref();
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                spec.name(),
                r.kind.name(),
                r.target_flops,
                opt(r.expected_flops),
                opt(rep.map(|x| x.mean)),
                opt(rep.map(|x| x.median)),
                opt(rep.map(|x| x.max)),
                rep.map_or(String::new(), |x| x.skipped.to_string()),
                opt(rep.map(|x| x.compression)),
                r.note.as_deref().map_or(String::new(), |n| format!("\"infeasible: {}\"", n.replace('"', "'"))),
            ));
        }
        out.push(json!({ "layer": spec.name(), "rows": rows }));
    }
    if let Some(path) = &args.out {
        bundle::write_atomic(path, csv.as_bytes())?;
    }
    Ok(Output { json: json!({ "budget": args.budget, "layers": out }), text: csv })
}

#[derive(Args, Clone, Debug)]
pub struct HistArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long, default_value_t = evaluation::DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long)]
    pub keep_ranks: Option<usize>,
    /// Histogram destination (CSV); printed when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn hist(args: &HistArgs, exec: Exec) -> CliResult<Output> {
    let w = tensor_file::read_matrix(&args.weights)?;
    let x = tensor_file::read_matrix(&args.calib)?;
    if w.cols() != x.rows() {
        return Err(CliError::Shape(format!("weights are {:?} but calibration inputs are {:?}", w.shape(), x.shape())));
    }
    let calib = CalibrationSet::new(x);
    let dec = decomposition::decompose_with(&w, &calib, DecomposeOptions { keep_ranks: args.keep_ranks, exec, ..Default::default() })?;
    let stats = decomposition::rank_contributions_with(&dec, &calib, exec)?;
    let h = evaluation::build_sparsity_histogram(&stats, args.bins)?;
    let csv = evaluation::histogram_to_csv(&h);
    if let Some(out) = &args.out {
        bundle::write_atomic(out, csv.as_bytes())?;
    }
    Ok(Output {
        json: json!({
            "bins": args.bins,
            "threshold_50": h.threshold_50,
            "mass_below_50pct_threshold": h.mass_below_50pct_threshold,
            "top_half_mass": h.top_half_mass,
        }),
        text: if args.out.is_some() { format!("top-half mass {:.4}", h.top_half_mass) } else { csv },
    })
}

#[derive(Args, Clone, Debug)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [1024usize, 4096])]
    pub sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0f64, 0.5, 0.25, 0.1])]
    pub densities: Vec<f64>,
    #[arg(long, default_value_t = 30)]
    pub repetitions: usize,
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn bench(args: &BenchArgs) -> CliResult<Output> {
    let cfg = BenchConfig {
        sizes: args.sizes.clone(),
        densities: args.densities.clone(),
        repetitions: args.repetitions,
        warmup: args.warmup,
        seed: args.seed,
    };
    let rows = kernels::bench_masked_gemv(&cfg)?;
    let csv = kernels::bench_rows_to_csv(&rows);
    if let Some(out) = &args.out {
        bundle::write_atomic(out, csv.as_bytes())?;
    }
    Ok(Output { json: json!({ "rows": rows }), text: csv })
}

#[derive(Args, Clone, Debug)]
pub struct ReluCheckArgs {
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest allowed absolute difference.
    #[arg(long, default_value_t = 1e-12)]
    pub tolerance: f64,
}

/// Largest absolute gap between the rank-adapted construction and the
/// neuron-adapted ReLU MLP over random (weights, mask, input) triples.
pub fn relu_equivalence_gap(trials: usize, seed: u64) -> CliResult<f64> {
    let mut rng = seeded_rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (d, h) = (rng.random_range(1..12), rng.random_range(1..24));
        let up = Matrix::gaussian(h, d, 1.0, &mut rng);
        let down = Matrix::gaussian(d, h, 1.0, &mut rng);
        let x = Matrix::gaussian(d, 1, 1.0, &mut rng).into_vec();
        let mask = Mask::from_bits((0..h).map(|_| rng.random_bool(0.5)).collect());
        let got = build_relu_equivalent(&up, &down)?.forward(&x, &mask)?;
        let want = neuron_adapted_relu(&up, &down, &x, &mask)?;
        worst = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    Ok(worst)
}

pub fn relu_check(args: &ReluCheckArgs) -> CliResult<Output> {
    let gap = relu_equivalence_gap(args.trials, args.seed)?;
    let pass = gap <= args.tolerance;
    let out = Output {
        json: json!({ "trials": args.trials, "max_abs_gap": gap, "tolerance": args.tolerance, "pass": pass }),
        text: format!("{} trials, max |gap| = {gap:.3e} ({})", args.trials, if pass { "pass" } else { "FAIL" }),
    };
    if !pass {
        return Err(CliError::CheckFailed(out.text));
    }
    Ok(out)
}

#[derive(Args, Clone, Debug)]
pub struct ToyFixtureArgs {
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    #[arg(long, default_value_t = 32)]
    pub h: usize,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Writes a model bundle with one trained SwiGLU MLP and one linear layer.
pub fn toy_fixture(args: &ToyFixtureArgs) -> CliResult<Output> {
    let cfg = ToyMlpConfig { d: args.d, h: args.h, samples: args.samples, steps: args.steps, seed: args.seed, ..Default::default() };
    let trained = toy::train_toy_swiglu(&cfg)?;
    let w = &trained.weights;
    let dir = &args.out;
    tensor_file::write_matrix(&dir.join("mlp0.up.rana"), &w.up)?;
    tensor_file::write_matrix(&dir.join("mlp0.gate.rana"), w.gate.as_ref().expect("toy MLP is gated"))?;
    tensor_file::write_matrix(&dir.join("mlp0.down.rana"), &w.down)?;
    tensor_file::write_matrix(&dir.join("mlp0.x.rana"), trained.inputs.x())?;
    let mut rng = seeded_rng(args.seed ^ 0x5eed);
    let proj = toy::spectral_matrix(args.d, args.d, 1.0, 0.8, &mut rng)?;
    tensor_file::write_matrix(&dir.join("proj.w.rana"), &proj)?;
    let manifest = ModelManifest {
        schema_version: SCHEMA_VERSION,
        layers: vec![
            LayerSpec::Mlp {
                name: "mlp0".into(),
                up: "mlp0.up.rana".into(),
                gate: Some("mlp0.gate.rana".into()),
                down: "mlp0.down.rana".into(),
                activation: w.activation,
                calib: "mlp0.x.rana".into(),
            },
            LayerSpec::Linear { name: "proj".into(), weight: "proj.w.rana".into(), calib: "mlp0.x.rana".into() },
        ],
    };
    bundle::write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(Output {
        json: json!({ "out": dir, "initial_loss": trained.initial_loss, "final_loss": trained.final_loss }),
        text: format!("trained toy SwiGLU (loss {:.4} -> {:.4}); bundle at {}", trained.initial_loss, trained.final_loss, dir.display()),
    })
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetsArg {
    QkvMlp,
    MlpOnly,
}

#[derive(Args, Clone, Debug)]
pub struct DivergenceArgs {
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    #[arg(long, default_value_t = 16)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Compression rates to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [0.1f64, 0.3, 0.5])]
    pub compression: Vec<f64>,
    #[arg(long, value_enum, default_value_t = TargetsArg::QkvMlp)]
    pub targets: TargetsArg,
    #[arg(long, default_value_t = 64)]
    pub calib_sequences: usize,
    #[arg(long, default_value_t = 16)]
    pub eval_sequences: usize,
}

pub fn divergence(args: &DivergenceArgs, exec: Exec) -> CliResult<Output> {
    let spec = ToyTransformerSpec {
        blocks: args.blocks,
        width: args.width,
        hidden: args.hidden,
        vocab: args.vocab,
        seq_len: args.seq_len,
        seed: args.seed,
        ..Default::default()
    };
    let model = ToyTransformer::new(spec)?;
    let calib = model.sample_sequences(args.calib_sequences, args.seed);
    let eval = model.sample_sequences(args.eval_sequences, args.seed.wrapping_add(1 << 32));
    let targets = match args.targets {
        TargetsArg::QkvMlp => AdaptTargets::QkvAndMlp,
        TargetsArg::MlpOnly => AdaptTargets::MlpOnly,
    };
    let mut reports = Vec::new();
    let mut text = String::from("compression,mean_logit_deviation\n");
    for &c in &args.compression {
        let cfg = DivergenceConfig { compression: c, targets, search: MlpSearchOptions { exec, ..Default::default() } };
        let r = toy::toy_model_divergence(&model, &cfg, &calib, &eval)?;
        text.push_str(&format!("{c},{}\n", r.mean_logit_deviation));
        reports.push(r);
    }
    Ok(Output { json: json!({ "spec": spec, "reports": reports }), text })
}

/// Resolves `RANA_THREADS`: `None` or a positive count.
pub fn threads_from_env(value: Option<&str>) -> CliResult<Option<usize>> {
    match value {
        None => Ok(None),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Argument(format!("RANA_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

pub fn exec_for_threads(threads: Option<usize>) -> Exec {
    match threads {
        Some(1) => Exec::Sequential,
        _ => Exec::default(),
    }
}

