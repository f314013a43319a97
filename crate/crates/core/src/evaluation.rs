//! Error measurement, contribution histograms and matched-FLOP adapter comparisons.

use serde::{Deserialize, Serialize};

use crate::adapters::{self, Activation, CatsMlp, FixedSvdLayer, Forward, MlpWeights, NeuronAdapterMlp};
use crate::allocation::{self, MlpSearchOptions};
use crate::decomposition::{self, CalibrationSet, ContributionStats, RankDecomposition};
use crate::error::{RanaError, Result};
use crate::exec::Exec;
use crate::flops::{FlopCount, MlpShape, OpTally};
use crate::maskers::{oracle_topk, Mask, TrainOptions};
use crate::tensor::{self, Matrix};

/// `‖y − y'‖² / ‖y‖²`, or `None` when `y = 0`.
pub fn normalized_error(y: &[f64], y_hat: &[f64]) -> Option<f64> {
    let denom = tensor::norm_sq(y);
    if denom == 0.0 {
        return None;
    }
    let num: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Some(num / denom)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub adapter: String,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    /// Inputs skipped because the reference output was zero.
    pub skipped: usize,
    /// `1 − adapted / original`, from executed FLOPs averaged over the inputs.
    pub compression: f64,
    pub adapted_flops: f64,
    pub original_flops: f64,
}

/// Normalized error of `adapted` against `original` over the columns of `inputs`.
pub fn measure_layer_error(name: &str, original: &dyn Forward, adapted: &dyn Forward, inputs: &Matrix, exec: Exec) -> Result<ErrorReport> {
    let (y, f0) = adapters::forward_batch_counted(original, inputs, exec)?;
    let (y_hat, f1) = adapters::forward_batch_counted(adapted, inputs, exec)?;
    let mut errors = Vec::with_capacity(inputs.cols());
    let mut skipped = 0;
    for s in 0..inputs.cols() {
        match normalized_error(&y.column(s), &y_hat.column(s)) {
            Some(e) => errors.push(e),
            None => skipped += 1,
        }
    }
    if errors.is_empty() {
        return Err(RanaError::EmptyInput("every reference output is zero"));
    }
    Ok(ErrorReport {
        adapter: name.to_string(),
        mean: errors.iter().sum::<f64>() / errors.len() as f64,
        median: tensor::quantile(&errors, 0.5)?,
        max: errors.iter().copied().fold(0.0, f64::max),
        skipped,
        compression: if f0 > 0.0 { 1.0 - f1 / f0 } else { 0.0 },
        adapted_flops: f1,
        original_flops: f0,
    })
}

pub const ERROR_CSV_HEADER: &str = "adapter,mean,median,max,skipped,compression,adapted_flops,original_flops";

pub fn error_reports_to_csv(rows: &[ErrorReport]) -> String {
    let mut out = format!("{ERROR_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.adapter, r.mean, r.median, r.max, r.skipped, r.compression, r.adapted_flops, r.original_flops
        ));
    }
    out
}

pub const DEFAULT_BINS: usize = 128;
/// Lower edge of the first log-spaced bin; smaller values land in bin 0.
pub const HISTOGRAM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityHistogram {
    /// `bins + 1` ascending edges, log-spaced over `[floor, 1]`.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Pooled median of the normalized contributions: keeping entries at or
    /// above it gives 50% sparsity.
    pub threshold_50: f64,
    /// Share of the normalized mass lying strictly below `threshold_50`.
    pub mass_below_50pct_threshold: f64,
    /// Mean per-sample share of energy in the top half of ranks.
    pub top_half_mass: f64,
}

fn bin_index(edges: &[f64], v: f64) -> usize {
    let bins = edges.len() - 1;
    edges.partition_point(|&e| e <= v).saturating_sub(1).min(bins - 1)
}

/// Histogram of contributions with each sample normalized to unit sum.
/// Samples with zero total energy contribute zeros.
pub fn build_sparsity_histogram(stats: &ContributionStats, bins: usize) -> Result<SparsityHistogram> {
    if bins < 2 {
        return Err(RanaError::InvalidArgument(format!("need at least 2 bins, got {bins}")));
    }
    let (d, k) = (stats.ranks(), stats.samples());
    let lo = HISTOGRAM_FLOOR.ln();
    let bin_edges: Vec<f64> = (0..=bins)
        .map(|b| if b == bins { 1.0 } else { (lo + (0.0 - lo) * b as f64 / bins as f64).exp() })
        .collect();
    let mut counts = vec![0u64; bins];
    let mut normalized = Vec::with_capacity(d * k);
    let top = (d / 2).max(1);
    let mut top_half = 0.0;
    for s in 0..k {
        let mut col = stats.sample(s);
        let sum: f64 = col.iter().sum();
        if sum > 0.0 {
            col.iter_mut().for_each(|v| *v /= sum);
        }
        for &v in &col {
            counts[bin_index(&bin_edges, v)] += 1;
        }
        let mut sorted = col.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        top_half += sorted[..top].iter().sum::<f64>();
        normalized.extend(col);
    }
    let threshold_50 = tensor::quantile(&normalized, 0.5)?;
    let total: f64 = normalized.iter().sum();
    let below: f64 = normalized.iter().filter(|&&v| v < threshold_50).sum();
    Ok(SparsityHistogram {
        bin_edges,
        counts,
        threshold_50,
        mass_below_50pct_threshold: if total > 0.0 { below / total } else { 0.0 },
        top_half_mass: top_half / k as f64,
    })
}

pub const HISTOGRAM_CSV_HEADER: &str = "bin_lo,bin_hi,count";

pub fn histogram_to_csv(h: &SparsityHistogram) -> String {
    let mut out = format!("{HISTOGRAM_CSV_HEADER}\n");
    for (b, c) in h.counts.iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", h.bin_edges[b], h.bin_edges[b + 1], c));
    }
    out
}

/// `‖W x − A (mask ⊙ B x)‖²`.
pub fn masked_reconstruction_error(dec: &RankDecomposition, x: &[f64], mask: &Mask) -> Result<f64> {
    let y = dec.weight().matvec(x)?;
    let y_hat = dec.a().matvec(&mask.apply(&dec.project(x)?))?;
    Ok(y.iter().zip(&y_hat).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Mean error keeping the per-sample top-`k` ranks of `dec`.
pub fn oracle_topk_error(dec: &RankDecomposition, calib: &CalibrationSet, k: usize) -> Result<f64> {
    let mut total = 0.0;
    for s in 0..calib.samples() {
        let x = calib.sample(s);
        let mask = oracle_topk(&dec.project(&x)?, k);
        total += masked_reconstruction_error(dec, &x, &mask)?;
    }
    Ok(total / calib.samples() as f64)
}

/// Mean error keeping the first `r` ranks for every sample.
pub fn static_topk_error(dec: &RankDecomposition, calib: &CalibrationSet, r: usize) -> Result<f64> {
    let mask = Mask::from_bits((0..dec.kept()).map(|j| j < r).collect());
    let mut total = 0.0;
    for s in 0..calib.samples() {
        total += masked_reconstruction_error(dec, &calib.sample(s), &mask)?;
    }
    Ok(total / calib.samples() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Rana,
    CatsLike,
    NeuronAdapter,
    FixedSvd,
}

impl AdapterKind {
    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Rana => "rana",
            AdapterKind::CatsLike => "cats_like",
            AdapterKind::NeuronAdapter => "neuron_adapter",
            AdapterKind::FixedSvd => "fixed_svd",
        }
    }

    pub const ALL: [AdapterKind; 4] = [AdapterKind::Rana, AdapterKind::CatsLike, AdapterKind::NeuronAdapter, AdapterKind::FixedSvd];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub kind: AdapterKind,
    pub target_flops: f64,
    /// Expected FLOPs at the calibrated mean active counts.
    pub expected_flops: Option<f64>,
    pub report: Option<ErrorReport>,
    /// Why the row has no report.
    pub note: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[derive(Default)]
pub struct CompareOptions {
    pub search: MlpSearchOptions,
    /// Neuron-adapter masker training.
    pub train: TrainOptions,
}


/// Static low-rank MLP: every projection replaced by a rank-`r` product.
#[derive(Clone, Debug)]
pub struct FixedSvdMlp {
    pub up: FixedSvdLayer,
    pub gate: Option<FixedSvdLayer>,
    pub down: FixedSvdLayer,
    pub activation: Activation,
}

impl FixedSvdMlp {
    /// Largest common rank whose cost fits `budget`.
    pub fn build(weights: &MlpWeights, calib: &CalibrationSet, budget: f64) -> Result<Self> {
        let shape = weights.shape();
        let n = if shape.gated { 3.0 } else { 2.0 };
        let per_rank = n * 2.0 * (shape.d + shape.h) as f64;
        let r = ((budget - shape.activation_flops()) / per_rank).floor() as usize;
        if r == 0 {
            return Err(RanaError::InfeasibleBudget { budget, minimum: per_rank + shape.activation_flops() });
        }
        let r = r.min(shape.d.min(shape.h));
        let layer = |w: &Matrix, c: &CalibrationSet| -> Result<FixedSvdLayer> {
            let dec = decomposition::decompose_with(w, c, Default::default())?;
            FixedSvdLayer::new(&dec, r.min(dec.kept()))
        };
        let hidden = CalibrationSet::new(weights.hidden_batch(calib.x(), Exec::default())?);
        Ok(Self {
            up: layer(&weights.up, calib)?,
            gate: weights.gate.as_ref().map(|g| layer(g, calib)).transpose()?,
            down: layer(&weights.down, &hidden)?,
            activation: weights.activation,
        })
    }

    pub fn flops(&self, shape: MlpShape) -> FlopCount {
        let mut c = FlopCount::new();
        c.merge_prefixed("up", &self.up.flops());
        if let Some(g) = &self.gate {
            c.merge_prefixed("gate", &g.flops());
        }
        c.add("activation", shape.activation_flops());
        c.merge_prefixed("down", &self.down.flops());
        c
    }
}

impl Forward for FixedSvdMlp {
    fn in_dim(&self) -> usize {
        self.up.in_dim()
    }

    fn out_dim(&self) -> usize {
        self.down.out_dim()
    }

    fn forward_counted(&self, x: &[f64], tally: &mut OpTally) -> Result<Vec<f64>> {
        let u = self.up.forward_counted(x, tally)?;
        let h: Vec<f64> = match &self.gate {
            Some(g) => {
                let gx = g.forward_counted(x, tally)?;
                gx.iter().zip(&u).map(|(&a, b)| self.activation.apply(a) * b).collect()
            }
            None => u.iter().map(|&v| self.activation.apply(v)).collect(),
        };
        tally.add(if self.gate.is_some() { 2 * h.len() } else { h.len() });
        self.down.forward_counted(&h, tally)
    }
}

/// Builds every requested adapter at `budget_fraction` of the dense MLP
/// FLOPs on `calib` and measures it on `eval`. Rows whose adapter cannot
/// meet the budget carry a note instead of a report.
pub fn compare_adapters(
    weights: &MlpWeights,
    calib: &CalibrationSet,
    eval: &CalibrationSet,
    budget_fraction: f64,
    kinds: &[AdapterKind],
    opts: &CompareOptions,
) -> Result<Vec<ComparisonRow>> {
    let shape = weights.shape();
    let budget = budget_fraction * weights.dense_flops().total();
    let exec = opts.search.exec;
    let mut rows = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let built: Result<(Box<dyn Forward>, f64)> = match kind {
            AdapterKind::Rana => allocation::grid_search_mlp(weights, calib, budget_fraction, &opts.search)
                .map(|s| (Box::new(s.mlp) as Box<dyn Forward>, s.allocation.achieved_flops.total())),
            AdapterKind::CatsLike => CatsMlp::active_for_budget(shape, budget)
                .and_then(|e| CatsMlp::calibrate(weights, calib, e))
                .map(|c| {
                    let f = CatsMlp::flops(shape, c.calibrated_mean_active).total();
                    (Box::new(c) as Box<dyn Forward>, f)
                }),
            AdapterKind::NeuronAdapter => {
                let inner = NeuronAdapterMlp::masker_inner(shape);
                NeuronAdapterMlp::active_for_budget(shape, inner, budget)
                    .and_then(|e| NeuronAdapterMlp::build(weights, calib, e, &TrainOptions { inner, ..opts.train }))
                    .map(|(n, _)| {
                        let f = NeuronAdapterMlp::flops(shape, inner, n.calibrated_mean_active).total();
                        (Box::new(n) as Box<dyn Forward>, f)
                    })
            }
            AdapterKind::FixedSvd => FixedSvdMlp::build(weights, calib, budget).map(|f| {
                let fl = f.flops(shape).total();
                (Box::new(f) as Box<dyn Forward>, fl)
            }),
        };
        rows.push(match built {
            Ok((adapter, expected)) => ComparisonRow {
                kind,
                target_flops: budget,
                expected_flops: Some(expected),
                report: Some(measure_layer_error(kind.name(), weights, adapter.as_ref(), eval.x(), exec)?),
                note: None,
            },
            Err(e) => ComparisonRow { kind, target_flops: budget, expected_flops: None, report: None, note: Some(e.to_string()) },
        });
    }
    Ok(rows)
}
