//! FLOP allocation.
//!
//! [`line_search_layer`] splits one layer's budget between kept ranks and
//! expected active ranks. [`grid_search_mlp`] splits an MLP budget across
//! Up, Gate and Down on a simplex grid and keeps the split with the lowest
//! end-to-end calibration error. Every evaluated candidate is logged.

use serde::{Deserialize, Serialize};

use crate::adapters::{AdaptedLinear, MlpWeights, RanaMlp, RankAdaptedLinear, RankMasker};
use crate::decomposition::{self, CalibrationSet, ContributionStats, DecomposeOptions, RankDecomposition};
use crate::error::{RanaError, Result};
use crate::exec::Exec;
use crate::flops::{self, FlopCount, MaskerKind, MlpShape};
use crate::maskers::{self, BMasker, TrainOptions};
use crate::tensor::{self, Matrix};

/// Above this many ranks the line search uses a geometric schedule.
pub const EXHAUSTIVE_SCHEDULE_MAX: usize = 256;
pub const GEOMETRIC_SCHEDULE_LEN: usize = 64;
pub const DEFAULT_GRID_STEP: f64 = 0.1;

/// Candidate kept-rank values for a layer with `d_max` ranks. Depends only
/// on `d_max`, so schedules are nested across budgets.
pub fn rank_schedule(d_max: usize) -> Vec<usize> {
    if d_max <= EXHAUSTIVE_SCHEDULE_MAX {
        return (1..=d_max).collect();
    }
    let ratio = (d_max as f64).ln() / (GEOMETRIC_SCHEDULE_LEN - 1) as f64;
    let mut out: Vec<usize> = (0..GEOMETRIC_SCHEDULE_LEN)
        .map(|n| ((n as f64 * ratio).exp().round() as usize).clamp(1, d_max))
        .collect();
    out.push(d_max);
    out.sort_unstable();
    out.dedup();
    out
}

/// One line-search candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineCandidate {
    /// Kept ranks; `None` for the dense layer.
    pub kept: Option<usize>,
    /// Active ranks the budget pays for.
    pub target_active: f64,
    /// Realized mean active count on the calibration set.
    pub realized_active: f64,
    pub threshold: f64,
    pub flops: f64,
    pub error: f64,
    /// The budget would pay for more than `kept` active ranks.
    pub capped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAllocation {
    /// `None` when the layer stays dense.
    pub kept_ranks: Option<usize>,
    pub target_expected_active: f64,
    pub calibrated_mean_active: f64,
    pub threshold: f64,
    pub masker_kind: MaskerKind,
    pub budget: f64,
    pub achieved_flops: FlopCount,
    /// Mean over calibration samples of `‖W x − A (m ⊙ B x)‖²`.
    pub calib_error: f64,
}

impl LayerAllocation {
    pub fn is_dense(&self) -> bool {
        self.kept_ranks.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSearch {
    pub allocation: LayerAllocation,
    pub log: Vec<LineCandidate>,
}

/// Fixed and per-active-rank cost for a candidate with `d` kept ranks.
fn cost_terms(d: usize, o: usize, i: usize, kind: MaskerKind) -> Result<(f64, f64)> {
    let (df, of, inf) = (d as f64, o as f64, i as f64);
    match kind {
        MaskerKind::BMasker => Ok((2.0 * df * inf + 2.0 * df, 2.0 * of)),
        MaskerKind::Sigmoid { inner } => {
            let r = inner as f64;
            Ok((2.0 * r * inf + 2.0 * df * r + df, 2.0 * (inf + of)))
        }
        MaskerKind::Open => Err(RanaError::InvalidArgument("line search needs an adaptive masker".into())),
    }
}

/// Smallest budget any candidate can meet: one kept rank with one active rank.
pub fn minimum_layer_flops(o: usize, i: usize, kind: MaskerKind) -> Result<f64> {
    let (fixed, per) = cost_terms(1, o, i, kind)?;
    Ok(fixed + per)
}

fn evaluate_candidate(
    stats: &ContributionStats,
    mean_output_energy: f64,
    d: usize,
    shape: (usize, usize),
    kind: MaskerKind,
    budget: f64,
) -> Result<Option<LineCandidate>> {
    let (o, i) = shape;
    let (fixed, per) = cost_terms(d, o, i, kind)?;
    let e = (budget - fixed) / per;
    if e <= 0.0 {
        return Ok(None);
    }
    let k = stats.samples();
    let pooled = &stats.pooled()[..d * k];
    let capped = e >= d as f64;
    let target = e.min(d as f64);
    let m = ((target * k as f64).round() as usize).clamp(1, pooled.len());
    let threshold = tensor::kth_largest(pooled, m)?;
    let (mut count, mut kept_energy) = (0usize, 0.0);
    for &v in pooled {
        if v >= threshold {
            count += 1;
            kept_energy += v;
        }
    }
    let realized = count as f64 / k as f64;
    Ok(Some(LineCandidate {
        kept: Some(d),
        target_active: target,
        realized_active: realized,
        threshold,
        flops: fixed + per * realized,
        error: (mean_output_energy - kept_energy / k as f64).max(0.0),
        capped,
    }))
}

/// Lower error wins; ties go to fewer FLOPs, then fewer kept ranks.
fn better(a: &LineCandidate, b: &LineCandidate) -> bool {
    a.error
        .total_cmp(&b.error)
        .then(a.flops.total_cmp(&b.flops))
        .then(a.kept.unwrap_or(usize::MAX).cmp(&b.kept.unwrap_or(usize::MAX)))
        .is_lt()
}

/// Picks kept ranks and a B-masker threshold for `budget` FLOPs.
///
/// For each scheduled `D`, the active count `E` is solved from the cost
/// model, a threshold is calibrated to `E` and the calibration error
/// `mean_s(‖W x_s‖² − kept energy)` is recorded. Candidates whose budget
/// covers more than `D` active ranks are only used when nothing else fits,
/// since they cannot spend the budget. With the sigmoid kind the B-masker
/// stands in for the trained predictor during the search.
pub fn line_search_layer(dec: &RankDecomposition, stats: &ContributionStats, budget: f64, kind: MaskerKind) -> Result<LayerSearch> {
    line_search_layer_with(dec, stats, budget, kind, Exec::Sequential)
}

pub fn line_search_layer_with(
    dec: &RankDecomposition,
    stats: &ContributionStats,
    budget: f64,
    kind: MaskerKind,
    exec: Exec,
) -> Result<LayerSearch> {
    let (o, i) = dec.source_shape();
    if stats.ranks() != dec.kept() {
        return Err(RanaError::ShapeMismatch { op: "line_search", left: (dec.kept(), i), right: (stats.ranks(), stats.samples()) });
    }
    let minimum = minimum_layer_flops(o, i, kind)?;
    if budget.is_nan() || budget < minimum {
        return Err(RanaError::InfeasibleBudget { budget, minimum });
    }
    let mean_out = stats.output_energy().iter().sum::<f64>() / stats.samples() as f64;
    let schedule = rank_schedule(dec.kept());
    let evaluated: Vec<Result<Option<LineCandidate>>> =
        exec.map(schedule.len(), |n| evaluate_candidate(stats, mean_out, schedule[n], (o, i), kind, budget));
    let mut log = Vec::with_capacity(schedule.len() + 1);
    for c in evaluated {
        if let Some(c) = c? {
            log.push(c);
        }
    }
    let dense = flops::dense_linear_flops(o, i).total();
    if budget >= dense {
        log.push(LineCandidate {
            kept: None,
            target_active: 0.0,
            realized_active: 0.0,
            threshold: 0.0,
            flops: dense,
            error: 0.0,
            capped: false,
        });
    }
    let uncapped = log.iter().any(|c| !c.capped);
    let best = log
        .iter()
        .filter(|c| !uncapped || !c.capped)
        .fold(None::<&LineCandidate>, |acc, c| match acc {
            Some(b) if !better(c, b) => Some(b),
            _ => Some(c),
        })
        .ok_or(RanaError::InfeasibleBudget { budget, minimum })?
        .clone();

    let achieved_flops = match best.kept {
        Some(d) => flops::rank_adapted_flops(d, o, i, best.realized_active, kind)?,
        None => flops::dense_linear_flops(o, i),
    };
    let allocation = LayerAllocation {
        kept_ranks: best.kept,
        target_expected_active: best.target_active,
        calibrated_mean_active: best.realized_active,
        threshold: best.threshold,
        masker_kind: if best.kept.is_some() { kind } else { MaskerKind::Open },
        budget,
        achieved_flops,
        calib_error: best.error,
    };
    Ok(LayerSearch { allocation, log })
}

/// Builds the B-masked layer an allocation describes (`None` when dense).
pub fn build_layer(dec: &RankDecomposition, alloc: &LayerAllocation) -> Result<Option<RankAdaptedLinear>> {
    let Some(d) = alloc.kept_ranks else { return Ok(None) };
    let masker = BMasker {
        threshold: alloc.threshold,
        target_active: alloc.target_expected_active,
        calibrated_mean_active: alloc.calibrated_mean_active,
    };
    Ok(Some(RankAdaptedLinear::new(dec.truncated(d)?, RankMasker::B(masker))?))
}

/// Builds a sigmoid-masked layer: trains the predictor against the
/// allocation's B-masker, then moves its cutoff to the allocation's target.
pub fn build_sigmoid_layer(
    dec: &RankDecomposition,
    alloc: &LayerAllocation,
    calib: &CalibrationSet,
    opts: &TrainOptions,
) -> Result<Option<RankAdaptedLinear>> {
    let Some(d) = alloc.kept_ranks else { return Ok(None) };
    let dec = dec.truncated(d)?;
    let teacher = BMasker::with_threshold(alloc.threshold);
    let (mut masker, _) = maskers::train_sigmoid_masker(&teacher, &dec, calib, opts)?;
    masker.recalibrate(calib.x(), alloc.target_expected_active)?;
    Ok(Some(RankAdaptedLinear::new(dec, RankMasker::Sigmoid(masker))?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSearchOptions {
    pub grid_step: f64,
    pub masker: MaskerKind,
    pub exec: Exec,
}

impl Default for MlpSearchOptions {
    fn default() -> Self {
        Self { grid_step: DEFAULT_GRID_STEP, masker: MaskerKind::BMasker, exec: Exec::default() }
    }
}

impl Serialize for Exec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(match self {
            Exec::Sequential => "sequential",
            Exec::Parallel => "parallel",
        })
    }
}

impl<'de> Deserialize<'de> for Exec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match String::deserialize(d)?.as_str() {
            "sequential" => Ok(Exec::Sequential),
            "parallel" => Ok(Exec::Parallel),
            other => Err(serde::de::Error::unknown_variant(other, &["sequential", "parallel"])),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownAllocation {
    /// `None` when Down stays dense.
    pub target_active: Option<f64>,
    pub calibrated_mean_active: f64,
    pub threshold: f64,
    pub budget: f64,
    pub flops: FlopCount,
}

/// One grid point of the MLP search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCandidate {
    /// Budget shares `[up, gate, down]` as enumerated (`gate` is 0 for non-gated MLPs).
    pub fractions: [f64; 3],
    pub uniform: bool,
    /// Component budgets after moving surplus away from components that went dense.
    pub budgets: [f64; 3],
    /// `None` for infeasible points.
    pub flops: Option<f64>,
    pub error: Option<f64>,
    /// Why the point is infeasible.
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpAllocation {
    pub up: LayerAllocation,
    pub gate: Option<LayerAllocation>,
    pub down: DownAllocation,
    /// Grid point that won.
    pub fractions: [f64; 3],
    /// Component budgets over the budget left after activations.
    pub effective_fractions: [f64; 3],
    pub grid_step: f64,
    pub budget_fraction: f64,
    pub budget: f64,
    pub dense_flops: f64,
    pub achieved_flops: FlopCount,
    /// Mean over calibration samples of `‖MLP(x) − MLP'(x)‖²`.
    pub calib_error: f64,
}

#[derive(Clone, Debug)]
pub struct MlpSearch {
    pub allocation: MlpAllocation,
    pub mlp: RanaMlp,
    pub log: Vec<GridCandidate>,
    /// Error of the split proportional to dense component costs.
    pub uniform_error: Option<f64>,
}

/// Points of the simplex `Σ f = 1` with `n` components and step `step`.
pub fn simplex_grid(n: usize, step: f64) -> Result<Vec<Vec<f64>>> {
    let steps = (1.0 / step).round() as usize;
    if steps == 0 || ((steps as f64) * step - 1.0).abs() > 1e-9 {
        return Err(RanaError::InvalidArgument(format!("grid step {step} does not divide 1")));
    }
    fn rec(n: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if n == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for a in 0..=left {
            prefix.push(a);
            rec(n - 1, left - a, prefix, out);
            prefix.pop();
        }
    }
    let mut ints = Vec::new();
    rec(n, steps, &mut Vec::new(), &mut ints);
    Ok(ints.into_iter().map(|v| v.into_iter().map(|a| a as f64 / steps as f64).collect()).collect())
}

/// Splits `available` by `fractions`; components whose share reaches `caps`
/// are pinned at the cap and the surplus flows to the rest in proportion to
/// their fractions.
fn distribute(available: f64, fractions: &[f64], caps: &[f64]) -> Vec<f64> {
    let n = fractions.len();
    let mut pinned = vec![false; n];
    loop {
        let spent: f64 = (0..n).filter(|&c| pinned[c]).map(|c| caps[c]).sum();
        let free: f64 = (0..n).filter(|&c| !pinned[c]).map(|c| fractions[c]).sum();
        let budgets: Vec<f64> = (0..n)
            .map(|c| {
                if pinned[c] {
                    caps[c]
                } else if free > 0.0 {
                    (available - spent) * fractions[c] / free
                } else {
                    0.0
                }
            })
            .collect();
        let newly: Vec<usize> = (0..n).filter(|&c| !pinned[c] && budgets[c] >= caps[c]).collect();
        if newly.is_empty() {
            return budgets;
        }
        newly.into_iter().for_each(|c| pinned[c] = true);
    }
}

struct Prepared<'a> {
    weights: &'a MlpWeights,
    calib: &'a CalibrationSet,
    up: (RankDecomposition, ContributionStats),
    gate: Option<(RankDecomposition, ContributionStats)>,
    target: Matrix,
    kind: MaskerKind,
}

struct Evaluated {
    up: LayerAllocation,
    gate: Option<LayerAllocation>,
    down: DownAllocation,
    mlp: RanaMlp,
    error: f64,
    flops: FlopCount,
}

fn prepare_layer(w: &Matrix, calib: &CalibrationSet, exec: Exec) -> Result<(RankDecomposition, ContributionStats)> {
    let dec = decomposition::decompose_with(w, calib, DecomposeOptions { keep_ranks: None, exec, ..Default::default() })?;
    let stats = decomposition::rank_contributions_with(&dec, calib, exec)?;
    Ok((dec, stats))
}

fn adapted(w: &Matrix, prepared: &(RankDecomposition, ContributionStats), budget: f64, kind: MaskerKind) -> Result<(LayerAllocation, AdaptedLinear)> {
    let search = line_search_layer(&prepared.0, &prepared.1, budget, kind)?;
    let layer = match build_layer(&prepared.0, &search.allocation)? {
        Some(l) => AdaptedLinear::Rank(l),
        None => AdaptedLinear::Dense(w.clone()),
    };
    Ok((search.allocation, layer))
}

fn mean_sq_error(target: &Matrix, got: &Matrix) -> f64 {
    got.sub(target).map(|d| d.frobenius_sq() / target.cols() as f64).unwrap_or(f64::INFINITY)
}

fn evaluate_point(p: &Prepared, budgets: &[f64; 3]) -> Result<Evaluated> {
    let shape = p.weights.shape();
    let (up, up_layer) = adapted(&p.weights.up, &p.up, budgets[0], p.kind)?;
    let (gate, gate_layer) = match (&p.weights.gate, &p.gate) {
        (Some(w), Some(prep)) => {
            let (a, l) = adapted(w, prep, budgets[1], p.kind)?;
            (Some(a), Some(l))
        }
        _ => (None, None),
    };
    let mut mlp = RanaMlp::new(up_layer, gate_layer, p.weights.down.clone(), None, p.weights.activation)?;
    let (d, h) = (shape.d, shape.h);
    let down_dense = flops::dense_linear_flops(d, h).total();
    let down = if budgets[2] >= down_dense {
        DownAllocation {
            target_active: None,
            calibrated_mean_active: h as f64,
            threshold: 0.0,
            budget: budgets[2],
            flops: flops::dense_linear_flops(d, h),
        }
    } else {
        let e = (budgets[2] - 3.0 * h as f64) / (2.0 * d as f64);
        if e <= 0.0 {
            return Err(RanaError::InfeasibleBudget { budget: budgets[2], minimum: 3.0 * h as f64 + 2.0 * d as f64 });
        }
        let hidden = mlp.hidden_batch(p.calib.x(), Exec::Sequential)?;
        let m = maskers::calibrate_neuron_masker(&p.weights.down, &hidden, e.min(h as f64))?;
        let alloc = DownAllocation {
            target_active: Some(m.target_active),
            calibrated_mean_active: m.calibrated_mean_active,
            threshold: m.threshold,
            budget: budgets[2],
            flops: flops::neuron_thresholded_flops(d, h, m.calibrated_mean_active)?,
        };
        mlp.down_masker = Some(m);
        alloc
    };
    let got = crate::adapters::forward_batch(&mlp, p.calib.x(), Exec::Sequential)?;
    let error = mean_sq_error(&p.target, &got);
    let mut total = FlopCount::new();
    total.merge_prefixed("up", &up.achieved_flops);
    if let Some(g) = &gate {
        total.merge_prefixed("gate", &g.achieved_flops);
    }
    total.add("activation", shape.activation_flops());
    total.merge_prefixed("down", &down.flops);
    Ok(Evaluated { up, gate, down, mlp, error, flops: total })
}

/// Replaces the B-maskers of a searched MLP's Up/Gate layers with trained
/// sigmoid maskers recalibrated to the same targets.
pub fn with_sigmoid_maskers(search: &MlpSearch, weights: &MlpWeights, calib: &CalibrationSet, opts: &TrainOptions) -> Result<RanaMlp> {
    let swap = |w: &Matrix, alloc: &LayerAllocation, current: &AdaptedLinear| -> Result<AdaptedLinear> {
        let AdaptedLinear::Rank(_) = current else { return Ok(current.clone()) };
        let (dec, _) = prepare_layer(w, calib, Exec::Sequential)?;
        Ok(match build_sigmoid_layer(&dec, alloc, calib, opts)? {
            Some(l) => AdaptedLinear::Rank(l),
            None => current.clone(),
        })
    };
    let mut mlp = search.mlp.clone();
    mlp.up = swap(&weights.up, &search.allocation.up, &mlp.up)?;
    if let (Some(w), Some(a), Some(g)) = (&weights.gate, &search.allocation.gate, &mlp.gate) {
        mlp.gate = Some(swap(w, a, g)?);
    }
    Ok(mlp)
}

/// Searches the Up/Gate/Down budget split for an MLP at `budget_fraction` of its dense FLOPs.
pub fn grid_search_mlp(weights: &MlpWeights, calib: &CalibrationSet, budget_fraction: f64, opts: &MlpSearchOptions) -> Result<MlpSearch> {
    if !(budget_fraction > 0.0 && budget_fraction <= 1.0) {
        return Err(RanaError::InvalidArgument(format!("budget fraction {budget_fraction} outside (0, 1]")));
    }
    let shape = weights.shape();
    let dense_total = weights.dense_flops().total();
    let budget = budget_fraction * dense_total;
    let available = budget - shape.activation_flops();

    let minimum = minimum_mlp_flops(shape, opts.masker)?;
    if budget < minimum {
        return Err(RanaError::InfeasibleBudget { budget, minimum });
    }

    let exec = opts.exec;
    let prepared = Prepared {
        weights,
        calib,
        up: prepare_layer(&weights.up, calib, exec)?,
        gate: weights.gate.as_ref().map(|g| prepare_layer(g, calib, exec)).transpose()?,
        target: crate::adapters::forward_batch(weights, calib.x(), exec)?,
        kind: opts.masker,
    };

    let n = if shape.gated { 3 } else { 2 };
    let mut points: Vec<(Vec<f64>, bool)> = simplex_grid(n, opts.grid_step)?.into_iter().map(|f| (f, false)).collect();
    let comp = shape.dense_component_flops();
    let uniform = vec![1.0 / n as f64; n];
    if !points.iter().any(|(f, _)| f.iter().zip(&uniform).all(|(a, b)| (a - b).abs() < 1e-12)) {
        points.push((uniform, true));
    } else if let Some(p) = points.iter_mut().find(|(f, _)| f.iter().zip(&uniform).all(|(a, b)| (a - b).abs() < 1e-12)) {
        p.1 = true;
    }
    let caps = vec![comp; n];

    let results: Vec<(GridCandidate, Option<Evaluated>)> = exec.map(points.len(), |idx| {
        let (fr, is_uniform) = &points[idx];
        let b = distribute(available, fr, &caps);
        let widen = |v: &[f64]| if shape.gated { [v[0], v[1], v[2]] } else { [v[0], 0.0, v[1]] };
        let (fractions, budgets) = (widen(fr), widen(&b));
        let eval = evaluate_point(&prepared, &budgets);
        let cand = |flops, error, note| GridCandidate { fractions, uniform: *is_uniform, budgets, flops, error, note };
        match eval {
            Ok(e) => (cand(Some(e.flops.total()), Some(e.error), None), Some(e)),
            Err(err) => (cand(None, None, Some(err.to_string())), None),
        }
    });

    let mut best: Option<(usize, &Evaluated)> = None;
    for (idx, (cand, eval)) in results.iter().enumerate() {
        let Some(e) = eval else { continue };
        let wins = match best {
            None => true,
            Some((b, be)) => e.error.total_cmp(&be.error).then_with(|| lex(&cand.fractions, &results[b].0.fractions)).is_lt(),
        };
        if wins {
            best = Some((idx, e));
        }
    }
    let (idx, e) = best.ok_or(RanaError::InfeasibleBudget { budget, minimum })?;
    let uniform_error = results.iter().find(|(c, _)| c.uniform).and_then(|(c, _)| c.error);
    let b = results[idx].0.budgets;
    let allocation = MlpAllocation {
        up: e.up.clone(),
        gate: e.gate.clone(),
        down: e.down.clone(),
        fractions: results[idx].0.fractions,
        effective_fractions: [b[0] / available, b[1] / available, b[2] / available],
        grid_step: opts.grid_step,
        budget_fraction,
        budget,
        dense_flops: dense_total,
        achieved_flops: e.flops.clone(),
        calib_error: e.error,
    };
    let mlp = e.mlp.clone();
    let log = results.into_iter().map(|(c, _)| c).collect();
    Ok(MlpSearch { allocation, mlp, log, uniform_error })
}

fn lex(a: &[f64; 3], b: &[f64; 3]) -> std::cmp::Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
}

/// Smallest MLP budget any grid point could meet.
pub fn minimum_mlp_flops(shape: MlpShape, kind: MaskerKind) -> Result<f64> {
    let rank = minimum_layer_flops(shape.h, shape.d, kind)?;
    let n_rank = if shape.gated { 2.0 } else { 1.0 };
    Ok(n_rank * rank + shape.activation_flops() + 3.0 * shape.h as f64 + 2.0 * shape.d as f64)
}

/// Builds the MLP for the single split `fractions` (length 3; gate ignored
/// when not gated) and returns it with its calibration error and FLOPs.
pub fn build_split(
    weights: &MlpWeights,
    calib: &CalibrationSet,
    budget_fraction: f64,
    fractions: [f64; 3],
    kind: MaskerKind,
) -> Result<(RanaMlp, f64, FlopCount)> {
    let shape = weights.shape();
    let budget = budget_fraction * weights.dense_flops().total();
    let available = budget - shape.activation_flops();
    let fr: Vec<f64> = if shape.gated { fractions.to_vec() } else { vec![fractions[0], fractions[2]] };
    let b = distribute(available, &fr, &vec![shape.dense_component_flops(); fr.len()]);
    let budgets = if shape.gated { [b[0], b[1], b[2]] } else { [b[0], 0.0, b[1]] };
    let prepared = Prepared {
        weights,
        calib,
        up: prepare_layer(&weights.up, calib, Exec::default())?,
        gate: weights.gate.as_ref().map(|g| prepare_layer(g, calib, Exec::default())).transpose()?,
        target: crate::adapters::forward_batch(weights, calib.x(), Exec::default())?,
        kind,
    };
    let e = evaluate_point(&prepared, &budgets)?;
    Ok((e.mlp, e.error, e.flops))
}

/// Error of the single evaluated split `fractions`.
pub fn evaluate_split(weights: &MlpWeights, calib: &CalibrationSet, budget_fraction: f64, fractions: [f64; 3], kind: MaskerKind) -> Result<(f64, FlopCount)> {
    build_split(weights, calib, budget_fraction, fractions, kind).map(|(_, e, f)| (e, f))
}
