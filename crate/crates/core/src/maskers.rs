//! Input-adaptive routers.
//!
//! * [`BMasker`] keeps rank `j` when `(Bx)_j² ≥ t`.
//! * [`NeuronThresholdMasker`] keeps neuron `i` when `|h_i|·‖W[:, i]‖ ≥ t`.
//! * [`SigmoidMlpMasker`] predicts the mask as `σ(C D x + b) ≥ cutoff`.
//! * [`oracle_topk`] keeps the `k` largest `(Bx)_j²`, a per-sample optimum used as a reference.
//!
//! Thresholds are fit so that the mean popcount over the calibration set
//! matches a target: `t` is the `m`-th largest pooled statistic with
//! `m = round(target · samples)`, which keeps exactly `m` pooled entries when
//! the statistic has no ties.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::decomposition::{CalibrationSet, ContributionStats, RankDecomposition};
use crate::error::{RanaError, Result};
use crate::flops::OpTally;
use crate::tensor::{self, matmul, seeded_rng, Matrix};

/// Binary mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    bits: Vec<bool>,
}

impl Mask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn ones(n: usize) -> Self {
        Self { bits: vec![true; n] }
    }

    pub fn zeros(n: usize) -> Self {
        Self { bits: vec![false; n] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, j: usize) -> bool {
        self.bits[j]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn active(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&j| self.bits[j]).collect()
    }

    /// `m ⊙ v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.bits.len());
        v.iter().zip(&self.bits).map(|(&x, &b)| if b { x } else { 0.0 }).collect()
    }

    /// Sum of `v_j` over set bits.
    pub fn kept_sum(&self, v: &[f64]) -> f64 {
        v.iter().zip(&self.bits).filter(|(_, &b)| b).map(|(x, _)| x).sum()
    }
}

/// Threshold keeping `round(target · samples)` of the pooled statistics.
fn pooled_threshold(pooled: &[f64], target: f64, samples: usize) -> Result<f64> {
    let m = ((target * samples as f64).round() as usize).clamp(1, pooled.len());
    tensor::kth_largest(pooled, m)
}

fn mean_count_at_or_above(pooled: &[f64], t: f64, samples: usize) -> f64 {
    pooled.iter().filter(|&&v| v >= t).count() as f64 / samples as f64
}

fn check_target(target: f64, width: usize) -> Result<()> {
    if !(target > 0.0 && target <= width as f64) {
        return Err(RanaError::TargetOutOfRange { target, max: width as f64 });
    }
    Ok(())
}

/// `mask_j = 1{(Bx)_j² ≥ t}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BMasker {
    pub threshold: f64,
    pub target_active: f64,
    pub calibrated_mean_active: f64,
}

impl BMasker {
    pub fn with_threshold(threshold: f64) -> Self {
        Self { threshold, target_active: f64::NAN, calibrated_mean_active: f64::NAN }
    }

    pub fn apply(&self, bx: &[f64]) -> Mask {
        Mask::from_bits(bx.iter().map(|v| v * v >= self.threshold).collect())
    }

    /// Same rule on precomputed energies `(Bx)_j²`.
    pub fn apply_energies(&self, energies: &[f64]) -> Mask {
        Mask::from_bits(energies.iter().map(|&e| e >= self.threshold).collect())
    }
}

pub fn calibrate_b_masker(stats: &ContributionStats, target_active: f64) -> Result<BMasker> {
    check_target(target_active, stats.ranks())?;
    let pooled = stats.pooled();
    let k = stats.samples();
    let threshold = pooled_threshold(pooled, target_active, k)?;
    Ok(BMasker {
        threshold,
        target_active,
        calibrated_mean_active: mean_count_at_or_above(pooled, threshold, k),
    })
}

/// `mask_i = 1{|h_i| · norms_i ≥ t}` on the Down-projection input `h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronThresholdMasker {
    pub threshold: f64,
    /// `‖W_down[:, i]‖` for each hidden neuron `i`.
    pub norms: Vec<f64>,
    pub target_active: f64,
    pub calibrated_mean_active: f64,
}

impl NeuronThresholdMasker {
    pub fn statistic(&self, h: &[f64]) -> Vec<f64> {
        h.iter().zip(&self.norms).map(|(x, n)| x.abs() * n).collect()
    }

    pub fn apply(&self, h: &[f64]) -> Mask {
        Mask::from_bits(h.iter().zip(&self.norms).map(|(x, n)| x.abs() * n >= self.threshold).collect())
    }

    /// Always-open masker for `h` neurons.
    pub fn open(h: usize) -> Self {
        Self { threshold: 0.0, norms: vec![1.0; h], target_active: h as f64, calibrated_mean_active: h as f64 }
    }
}

/// `hidden` is h × k, one post-activation vector per column.
pub fn calibrate_neuron_masker(w_down: &Matrix, hidden: &Matrix, target_active: f64) -> Result<NeuronThresholdMasker> {
    let h = w_down.cols();
    if hidden.rows() != h {
        return Err(RanaError::ShapeMismatch { op: "calibrate_neuron_masker", left: w_down.shape(), right: hidden.shape() });
    }
    check_target(target_active, h)?;
    let norms = w_down.column_norms();
    if norms.iter().all(|&n| n == 0.0) {
        return Err(RanaError::AllRowNormsZero);
    }
    let k = hidden.cols();
    let mut pooled = Vec::with_capacity(h * k);
    for (i, n) in norms.iter().enumerate() {
        pooled.extend(hidden.row(i).iter().map(|x| x.abs() * n));
    }
    let threshold = pooled_threshold(&pooled, target_active, k)?;
    Ok(NeuronThresholdMasker {
        threshold,
        calibrated_mean_active: mean_count_at_or_above(&pooled, threshold, k),
        norms,
        target_active,
    })
}

/// Keeps the `k` largest `(Bx)_j²`; ties go to the lower index.
pub fn oracle_topk(bx: &[f64], k: usize) -> Mask {
    let mut order: Vec<usize> = (0..bx.len()).collect();
    order.sort_by(|&a, &b| (bx[b] * bx[b]).total_cmp(&(bx[a] * bx[a])).then(a.cmp(&b)));
    let mut bits = vec![false; bx.len()];
    for &j in order.iter().take(k) {
        bits[j] = true;
    }
    Mask::from_bits(bits)
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Weights of `σ(C D x + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmoidParams {
    /// out × r'.
    pub c: Matrix,
    /// r' × i.
    pub d: Matrix,
    /// One bias per output.
    pub bias: Vec<f64>,
}

impl SigmoidParams {
    pub fn outputs(&self) -> usize {
        self.c.rows()
    }

    pub fn inner(&self) -> usize {
        self.d.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.d.cols()
    }

    /// Returns `(D x, C D x + b)`.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hidden = self.d.matvec(x).expect("shape checked by caller");
        let mut z = self.c.matvec(&hidden).expect("shape checked by caller");
        for (zj, b) in z.iter_mut().zip(&self.bias) {
            *zj += b;
        }
        (hidden, z)
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).1
    }
}

/// Mean binary cross-entropy over every (output, sample) pair. `x` is i×n, `y` out×n with entries in {0, 1}.
pub fn bce_loss(p: &SigmoidParams, x: &Matrix, y: &Matrix) -> f64 {
    let n = x.cols();
    let mut total = 0.0;
    for s in 0..n {
        let (_, z) = p.forward(&x.column(s));
        for (j, &zj) in z.iter().enumerate() {
            total += bce_from_logit(zj, y.get(j, s));
        }
    }
    total / (n * p.outputs()) as f64
}

/// `−y ln σ(z) − (1−y) ln(1−σ(z))` without cancellation.
fn bce_from_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Analytic gradient of [`bce_loss`] with respect to every parameter.
pub fn bce_gradients(p: &SigmoidParams, x: &Matrix, y: &Matrix) -> SigmoidParams {
    let cols: Vec<usize> = (0..x.cols()).collect();
    bce_gradients_on(p, x, y, &cols)
}

fn bce_gradients_on(p: &SigmoidParams, x: &Matrix, y: &Matrix, cols: &[usize]) -> SigmoidParams {
    let (out, inner, dim) = (p.outputs(), p.inner(), p.input_dim());
    let scale = 1.0 / (cols.len() * out) as f64;
    let mut gc = vec![0.0; out * inner];
    let mut gd = vec![0.0; inner * dim];
    let mut gb = vec![0.0; out];
    for &s in cols {
        let xs = x.column(s);
        let (hidden, z) = p.forward(&xs);
        let dz: Vec<f64> = z.iter().enumerate().map(|(j, &zj)| (sigmoid(zj) - y.get(j, s)) * scale).collect();
        let mut dh = vec![0.0; inner];
        for j in 0..out {
            gb[j] += dz[j];
            let crow = p.c.row(j);
            for r in 0..inner {
                gc[j * inner + r] += dz[j] * hidden[r];
                dh[r] += crow[r] * dz[j];
            }
        }
        for r in 0..inner {
            let row = &mut gd[r * dim..(r + 1) * dim];
            for (g, xv) in row.iter_mut().zip(&xs) {
                *g += dh[r] * xv;
            }
        }
    }
    SigmoidParams { c: Matrix::from_raw(out, inner, gc), d: Matrix::from_raw(inner, dim, gd), bias: gb }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    /// Inner width r'.
    pub inner: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { inner: 4, epochs: 40, lr: 0.5, momentum: 0.9, batch: 32, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Full-data loss after each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Fits `σ(C D x + b)` to binary `labels` (out × k) by minibatch SGD with momentum.
///
/// Inputs are divided by their overall RMS during training and the scale is
/// folded back into `D`, so the returned parameters act on raw inputs. The
/// weights with the lowest full-data loss seen (including the initial ones)
/// are returned.
pub fn train_bce(inputs: &Matrix, labels: &Matrix, opts: &TrainOptions) -> Result<(SigmoidParams, TrainReport)> {
    if inputs.cols() != labels.cols() {
        return Err(RanaError::ShapeMismatch { op: "train_bce", left: inputs.shape(), right: labels.shape() });
    }
    if opts.inner == 0 || opts.batch == 0 {
        return Err(RanaError::InvalidArgument("inner width and batch size must be positive".into()));
    }
    let (dim, k) = inputs.shape();
    let out = labels.rows();
    let rms = (inputs.frobenius_sq() / (dim * k) as f64).sqrt();
    if rms == 0.0 {
        return Err(RanaError::NoCalibrationSignal);
    }
    let x = inputs.scaled(1.0 / rms);

    let mut rng = seeded_rng(opts.seed);
    let mut p = SigmoidParams {
        c: Matrix::gaussian(out, opts.inner, (1.0 / opts.inner as f64).sqrt(), &mut rng),
        d: Matrix::gaussian(opts.inner, dim, (1.0 / dim as f64).sqrt(), &mut rng),
        bias: (0..out)
            .map(|j| {
                let rate = labels.row(j).iter().sum::<f64>() / k as f64;
                logit(rate.clamp(0.01, 0.99))
            })
            .collect(),
    };
    let mut vel = SigmoidParams {
        c: Matrix::zeros(out, opts.inner),
        d: Matrix::zeros(opts.inner, dim),
        bias: vec![0.0; out],
    };

    let initial_loss = bce_loss(&p, &x, labels);
    let mut best = (initial_loss, p.clone());
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    let mut order: Vec<usize> = (0..k).collect();
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(opts.batch) {
            let g = bce_gradients_on(&p, &x, labels, batch);
            step(&mut p.c, &mut vel.c, &g.c, opts);
            step(&mut p.d, &mut vel.d, &g.d, opts);
            for ((w, v), gv) in p.bias.iter_mut().zip(vel.bias.iter_mut()).zip(&g.bias) {
                *v = opts.momentum * *v - opts.lr * gv;
                *w += *v;
            }
        }
        let loss = bce_loss(&p, &x, labels);
        if !loss.is_finite() || p.c.as_slice().iter().chain(p.d.as_slice()).any(|v| !v.is_finite()) {
            return Err(RanaError::TrainingDiverged { epoch });
        }
        epoch_losses.push(loss);
        if loss < best.0 {
            best = (loss, p.clone());
        }
    }
    let (final_loss, mut p) = best;
    p.d = p.d.scaled(1.0 / rms);
    Ok((p, TrainReport { initial_loss, final_loss, epoch_losses }))
}

fn step(w: &mut Matrix, v: &mut Matrix, g: &Matrix, opts: &TrainOptions) {
    let (rows, cols) = w.shape();
    for i in 0..rows {
        for j in 0..cols {
            let nv = opts.momentum * v.get(i, j) - opts.lr * g.get(i, j);
            v.set(i, j, nv);
            w.set(i, j, w.get(i, j) + nv);
        }
    }
}

/// `mask_j = 1{σ((C D x + b)_j) ≥ cutoff}`.
///
/// The comparison is carried out on logits against `τ = logit(cutoff)`. The
/// bias is counted as part of the compare, since `(C D x)_j ≥ τ − b_j` is the
/// same rule with a per-output threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmoidMlpMasker {
    pub params: SigmoidParams,
    logit_cutoff: f64,
}

impl SigmoidMlpMasker {
    pub fn new(params: SigmoidParams, decision_cutoff: f64) -> Result<Self> {
        if !(decision_cutoff > 0.0 && decision_cutoff < 1.0) {
            return Err(RanaError::InvalidArgument(format!("decision cutoff {decision_cutoff} outside (0, 1)")));
        }
        Ok(Self { params, logit_cutoff: logit(decision_cutoff) })
    }

    /// Same as [`Self::new`] but takes the logit-space cutoff directly, so a
    /// stored masker reloads bit for bit.
    pub fn from_logit_cutoff(params: SigmoidParams, logit_cutoff: f64) -> Result<Self> {
        if !logit_cutoff.is_finite() {
            return Err(RanaError::InvalidArgument(format!("logit cutoff {logit_cutoff} is not finite")));
        }
        Ok(Self { params, logit_cutoff })
    }

    pub fn decision_cutoff(&self) -> f64 {
        sigmoid(self.logit_cutoff)
    }

    pub fn logit_cutoff(&self) -> f64 {
        self.logit_cutoff
    }

    pub fn inner(&self) -> usize {
        self.params.inner()
    }

    pub fn outputs(&self) -> usize {
        self.params.outputs()
    }

    pub fn apply(&self, x: &[f64]) -> Mask {
        self.apply_counted(x, &mut OpTally::default())
    }

    pub fn apply_counted(&self, x: &[f64], tally: &mut OpTally) -> Mask {
        let hidden = self.params.d.matvec(x).expect("masker input width");
        let cdx = self.params.c.matvec(&hidden).expect("masker inner width");
        let (out, inner, dim) = (self.outputs(), self.inner(), self.params.input_dim());
        tally.add(2 * inner * dim + 2 * out * inner + out);
        Mask::from_bits(cdx.iter().zip(&self.params.bias).map(|(v, b)| v + b >= self.logit_cutoff).collect())
    }

    /// Moves the cutoff so that the mean popcount over `inputs` (i × k) is `target`.
    pub fn recalibrate(&mut self, inputs: &Matrix, target: f64) -> Result<f64> {
        check_target(target, self.outputs())?;
        let k = inputs.cols();
        let pooled: Vec<f64> = (0..k).flat_map(|s| self.params.logits(&inputs.column(s))).collect();
        self.logit_cutoff = pooled_threshold(&pooled, target, k)?;
        Ok(mean_count_at_or_above(&pooled, self.logit_cutoff, k))
    }
}

/// Trains a sigmoid masker to imitate `teacher` on the calibration inputs.
pub fn train_sigmoid_masker(
    teacher: &BMasker,
    dec: &RankDecomposition,
    calib: &CalibrationSet,
    opts: &TrainOptions,
) -> Result<(SigmoidMlpMasker, TrainReport)> {
    let bx = matmul(dec.b(), calib.x())?;
    let labels = Matrix::from_fn(bx.rows(), bx.cols(), |j, s| {
        let v = bx.get(j, s);
        if v * v >= teacher.threshold {
            1.0
        } else {
            0.0
        }
    });
    let (params, report) = train_bce(calib.x(), &labels, opts)?;
    Ok((SigmoidMlpMasker::new(params, 0.5)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::{decompose, rank_contributions};
    use rand::Rng;

    fn stats_from(columns: &[Vec<f64>]) -> ContributionStats {
        // Identity layer: contributions are the squared inputs.
        let n = columns[0].len();
        let calib = CalibrationSet::from_samples(columns).unwrap();
        let dec = decompose(&Matrix::identity(n), &CalibrationSet::new(Matrix::identity(n)), n).unwrap();
        rank_contributions(&dec, &calib).unwrap()
    }

    #[test]
    fn equal_contributions_keep_everything() {
        let stats = stats_from(&[vec![1.0; 4], vec![-1.0; 4]]);
        let m = calibrate_b_masker(&stats, 4.0).unwrap();
        assert!(m.threshold <= 1.0);
        assert_eq!(m.calibrated_mean_active, 4.0);
    }

    #[test]
    fn four_three_two_one() {
        let stats = stats_from(&[vec![2.0, 3f64.sqrt(), 2f64.sqrt(), 1.0]]);
        let m = calibrate_b_masker(&stats, 2.0).unwrap();
        assert!((m.threshold - 3.0).abs() < 1e-12);
        assert_eq!(m.apply(&[2.0, 3f64.sqrt(), 2f64.sqrt(), 1.0]).bits(), &[true, true, false, false]);
        // Brute force over candidate thresholds: only t = 3 keeps exactly two.
        let vals = [4.0, 3.0, 2.0, 1.0];
        let hits: Vec<f64> = vals.iter().copied().filter(|&t| vals.iter().filter(|&&v| v >= t).count() == 2).collect();
        assert_eq!(hits, vec![3.0]);
    }

    #[test]
    fn target_out_of_range() {
        let stats = stats_from(&[vec![1.0, 2.0]]);
        assert!(calibrate_b_masker(&stats, 0.0).is_err());
        assert!(calibrate_b_masker(&stats, 2.5).is_err());
    }

    #[test]
    fn b_masker_rules() {
        assert_eq!(BMasker::with_threshold(0.0).apply(&[0.0, -1.0, 2.0]), Mask::ones(3));
        assert_eq!(BMasker::with_threshold(2.0).apply(&[2.0, -1.0]).bits(), &[true, false]);
        let mut rng = seeded_rng(3);
        for _ in 0..50 {
            let bx: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
            let t = rng.random_range(0.0..2.0);
            let naive = bx.iter().filter(|v| *v * *v >= t).count();
            assert_eq!(BMasker::with_threshold(t).apply(&bx).count_ones(), naive);
        }
    }

    #[test]
    fn calibration_hits_targets() {
        let mut rng = seeded_rng(11);
        let w = Matrix::gaussian(24, 16, 1.0, &mut rng);
        let x = Matrix::gaussian(16, 500, 1.0, &mut rng);
        let calib = CalibrationSet::new(x.clone());
        let dec = decompose(&w, &calib, 16).unwrap();
        let stats = rank_contributions(&dec, &calib).unwrap();
        for frac in [0.1, 0.25, 0.5, 0.75] {
            let target = frac * 16.0;
            let m = calibrate_b_masker(&stats, target).unwrap();
            let realized = (0..500).map(|s| m.apply(&dec.project(&calib.sample(s)).unwrap()).count_ones()).sum::<usize>() as f64 / 500.0;
            assert!((realized - target).abs() <= 0.02 * target, "{frac}: {realized}");
            assert_eq!(realized, m.calibrated_mean_active);

            let nm = calibrate_neuron_masker(&w, &x, target).unwrap();
            let realized = (0..500).map(|s| nm.apply(&x.column(s)).count_ones()).sum::<usize>() as f64 / 500.0;
            assert!((realized - target).abs() <= 0.02 * target);
        }
    }

    #[test]
    fn neuron_masker_examples() {
        let w = Matrix::identity(2);
        let hidden = Matrix::from_columns(&[vec![5.0, 0.1]]).unwrap();
        let m = calibrate_neuron_masker(&w, &hidden, 1.0).unwrap();
        assert!(m.threshold > 0.1 && m.threshold <= 5.0);
        assert_eq!(m.apply(&[5.0, 0.1]).bits(), &[true, false]);
        assert_eq!(m.apply(&[0.0, 0.0]), Mask::zeros(2));
        assert_eq!(calibrate_neuron_masker(&Matrix::zeros(2, 2), &hidden, 1.0).unwrap_err(), RanaError::AllRowNormsZero);
    }

    #[test]
    fn uniform_norms_select_by_magnitude() {
        let mut rng = seeded_rng(12);
        let w = Matrix::from_fn(3, 10, |_, _| 1.0);
        let hidden = Matrix::gaussian(10, 1, 1.0, &mut rng);
        let m = calibrate_neuron_masker(&w, &hidden, 4.0).unwrap();
        let h = hidden.column(0);
        let mut order: Vec<usize> = (0..10).collect();
        order.sort_by(|&a, &b| h[b].abs().total_cmp(&h[a].abs()));
        let mut want = [false; 10];
        order[..4].iter().for_each(|&j| want[j] = true);
        assert_eq!(m.apply(&h).bits(), &want[..]);
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(oracle_topk(&[1.0, -3.0, 2.0], 3), Mask::ones(3));
        assert_eq!(oracle_topk(&[1.0, -3.0, 2.0], 2).bits(), &[false, true, true]);
        assert_eq!(oracle_topk(&[1.0, -1.0, 1.0], 2).bits(), &[true, true, false]);
    }

    #[test]
    fn oracle_is_exhaustively_optimal() {
        let mut rng = seeded_rng(13);
        for d in 1..=12usize {
            let bx: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let e: Vec<f64> = bx.iter().map(|v| v * v).collect();
            for k in 0..=d {
                let got = oracle_topk(&bx, k).kept_sum(&e);
                for bits in 0u32..(1 << d) {
                    if bits.count_ones() as usize == k {
                        let alt: f64 = (0..d).filter(|j| bits >> j & 1 == 1).map(|j| e[j]).sum();
                        assert!(got >= alt);
                    }
                }
            }
        }
    }

    #[test]
    fn mask_is_idempotent() {
        let m = Mask::from_bits(vec![true, false, true]);
        let v = [1.0, 2.0, 3.0];
        assert_eq!(m.apply(&m.apply(&v)), m.apply(&v));
    }

    fn small_params(rng: &mut crate::tensor::SeededRng) -> SigmoidParams {
        SigmoidParams {
            c: Matrix::gaussian(3, 2, 1.0, rng),
            d: Matrix::gaussian(2, 2, 1.0, rng),
            bias: vec![0.1, -0.2, 0.3],
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seeded_rng(14);
        let p = small_params(&mut rng);
        let x = Matrix::gaussian(2, 7, 1.0, &mut rng);
        let y = Matrix::from_fn(3, 7, |_, _| if rng.random::<bool>() { 1.0 } else { 0.0 });
        let g = bce_gradients(&p, &x, &y);
        let h = 1e-5;
        let check = |analytic: f64, plus: SigmoidParams, minus: SigmoidParams| {
            let fd = (bce_loss(&plus, &x, &y) - bce_loss(&minus, &x, &y)) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "{analytic} vs {fd}");
        };
        for i in 0..3 {
            for j in 0..2 {
                let (mut a, mut b) = (p.clone(), p.clone());
                a.c.set(i, j, p.c.get(i, j) + h);
                b.c.set(i, j, p.c.get(i, j) - h);
                check(g.c.get(i, j), a, b);
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                let (mut a, mut b) = (p.clone(), p.clone());
                a.d.set(i, j, p.d.get(i, j) + h);
                b.d.set(i, j, p.d.get(i, j) - h);
                check(g.d.get(i, j), a, b);
            }
        }
        for j in 0..3 {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.bias[j] += h;
            b.bias[j] -= h;
            check(g.bias[j], a, b);
        }
    }

    #[test]
    fn zero_logits_keep_everything_and_saturation_drops_everything() {
        let p = SigmoidParams { c: Matrix::zeros(3, 2), d: Matrix::identity(2), bias: vec![0.0; 3] };
        let m = SigmoidMlpMasker::new(p.clone(), 0.5).unwrap();
        assert_eq!(m.apply(&[1.0, -4.0]), Mask::ones(3));
        let neg = SigmoidMlpMasker::new(SigmoidParams { bias: vec![-50.0; 3], ..p }, 0.5).unwrap();
        assert_eq!(neg.apply(&[1.0, -4.0]), Mask::zeros(3));
    }

    #[test]
    fn sigmoid_apply_matches_elementwise_oracle() {
        let mut rng = seeded_rng(15);
        let p = small_params(&mut rng);
        let m = SigmoidMlpMasker::new(p.clone(), 0.5).unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let h = p.d.matvec(&x).unwrap();
            let z = p.c.matvec(&h).unwrap();
            let want: Vec<bool> = z.iter().zip(&p.bias).map(|(zj, b)| sigmoid(zj + b) >= 0.5).collect();
            assert_eq!(m.apply(&x).bits(), &want[..]);
        }
    }

    #[test]
    fn constant_targets_are_learned() {
        let mut rng = seeded_rng(16);
        let x = Matrix::gaussian(4, 200, 1.0, &mut rng);
        let y = Matrix::from_fn(3, 200, |_, _| 1.0);
        let (p, report) = train_bce(&x, &y, &TrainOptions { epochs: 10, ..Default::default() }).unwrap();
        assert!(report.final_loss < report.initial_loss);
        let m = SigmoidMlpMasker::new(p, 0.5).unwrap();
        assert!((0..200).all(|s| m.apply(&x.column(s)) == Mask::ones(3)));
    }

    #[test]
    fn separable_labels_generalize() {
        let mut rng = seeded_rng(17);
        let w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Matrix::gaussian(6, 1000, 1.0, &mut rng);
        let y = Matrix::from_fn(1, 1000, |_, s| if tensor::dot(&w, &x.column(s)) >= 0.0 { 1.0 } else { 0.0 });
        let train = x.select_cols(&(0..800).collect::<Vec<_>>());
        let ty = y.select_cols(&(0..800).collect::<Vec<_>>());
        let (p, _) = train_bce(&train, &ty, &TrainOptions { inner: 4, epochs: 60, ..Default::default() }).unwrap();
        let m = SigmoidMlpMasker::new(p, 0.5).unwrap();
        let agree = (800..1000).filter(|&s| m.apply(&x.column(s)).get(0) == (y.get(0, s) == 1.0)).count();
        assert!(agree as f64 >= 0.95 * 200.0, "{agree}");
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = seeded_rng(18);
        let x = Matrix::gaussian(4, 64, 1.0, &mut rng);
        let y = Matrix::from_fn(2, 64, |j, s| if x.get(j, s) > 0.0 { 1.0 } else { 0.0 });
        let opts = TrainOptions { epochs: 5, ..Default::default() };
        assert_eq!(train_bce(&x, &y, &opts).unwrap(), train_bce(&x, &y, &opts).unwrap());
    }

    #[test]
    fn recalibrated_cutoff_hits_target() {
        let mut rng = seeded_rng(19);
        let p = SigmoidParams { c: Matrix::gaussian(8, 3, 1.0, &mut rng), d: Matrix::gaussian(3, 5, 1.0, &mut rng), bias: vec![0.0; 8] };
        let x = Matrix::gaussian(5, 400, 1.0, &mut rng);
        let mut m = SigmoidMlpMasker::new(p, 0.5).unwrap();
        let realized = m.recalibrate(&x, 3.0).unwrap();
        assert!((realized - 3.0).abs() <= 0.06);
        let counted = (0..400).map(|s| m.apply(&x.column(s)).count_ones()).sum::<usize>() as f64 / 400.0;
        assert_eq!(counted, realized);
    }
}
