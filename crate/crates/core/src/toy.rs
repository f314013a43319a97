//! Small synthetic models: a trained SwiGLU MLP and a few-block transformer
//! used for end-to-end divergence measurements.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{Activation, Forward, MlpWeights};
use crate::allocation::{self, MlpSearchOptions};
use crate::decomposition::{self, CalibrationSet};
use crate::error::{RanaError, Result};
use crate::evaluation::normalized_error;
use crate::flops::{self, CompressionBreakdown, FlopLedger, MaskerKind};
use crate::tensor::{self, seeded_rng, Matrix, SeededRng};

/// `d × n` Gaussian samples with covariance `Q diag(s²) Qᵀ`, `s_j = (j+1)^-decay`,
/// for a random rotation `Q`.
pub fn anisotropic_inputs(d: usize, n: usize, decay: f64, rng: &mut SeededRng) -> Result<Matrix> {
    let q = tensor::thin_svd(&Matrix::gaussian(d, d, 1.0, rng))?.u;
    let scales: Vec<f64> = (0..d).map(|j| ((j + 1) as f64).powf(-decay)).collect();
    let z = Matrix::gaussian(d, n, 1.0, rng);
    let scaled = Matrix::from_fn(d, n, |i, s| z.get(i, s) * scales[i]);
    tensor::matmul(&q, &scaled)
}

/// `o × i` matrix with singular values `scale·(j+1)^-decay` and random singular vectors.
pub fn spectral_matrix(o: usize, i: usize, scale: f64, decay: f64, rng: &mut SeededRng) -> Result<Matrix> {
    let m = o.min(i);
    let u = tensor::thin_svd(&Matrix::gaussian(o, m, 1.0, rng))?.u;
    let v = tensor::thin_svd(&Matrix::gaussian(i, m, 1.0, rng))?.u;
    let s: Vec<f64> = (0..m).map(|j| scale * ((j + 1) as f64).powf(-decay)).collect();
    let us = Matrix::from_fn(o, m, |r, c| u.get(r, c) * s[c]);
    tensor::matmul(&us, &v.transpose())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyMlpConfig {
    pub d: usize,
    pub h: usize,
    pub samples: usize,
    pub steps: usize,
    pub lr: f64,
    /// Decay exponent of the input spectrum.
    pub input_decay: f64,
    pub seed: u64,
}

impl Default for ToyMlpConfig {
    fn default() -> Self {
        Self { d: 16, h: 32, samples: 1000, steps: 300, lr: 1e-2, input_decay: 0.7, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct ToyMlp {
    pub weights: MlpWeights,
    pub inputs: CalibrationSet,
    pub initial_loss: f64,
    pub final_loss: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let (c1, c2) = (1.0 - B1.powi(self.t), 1.0 - B2.powi(self.t));
        for k in 0..params.len() {
            self.m[k] = B1 * self.m[k] + (1.0 - B1) * grad[k];
            self.v[k] = B2 * self.v[k] + (1.0 - B2) * grad[k] * grad[k];
            params[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + 1e-8);
        }
    }
}

fn silu_grad(g: f64) -> f64 {
    let s = 1.0 / (1.0 + (-g).exp());
    s * (1.0 + g * (1.0 - s))
}

/// Mean squared error `Σ_s ‖MLP(x_s) − t_s‖² / n` and gradients for
/// `(up, gate, down)` of a SwiGLU MLP.
pub fn swiglu_loss_and_grads(w: &MlpWeights, x: &Matrix, t: &Matrix) -> Result<(f64, [Matrix; 3])> {
    let gate = w.gate.as_ref().ok_or_else(|| RanaError::InvalidArgument("SwiGLU needs a gate".into()))?;
    let n = x.cols() as f64;
    let u = tensor::matmul(&w.up, x)?;
    let g = tensor::matmul(gate, x)?;
    let (h, k) = u.shape();
    let a = Matrix::from_fn(h, k, |i, s| Activation::Silu.apply(g.get(i, s)));
    let hid = Matrix::from_fn(h, k, |i, s| a.get(i, s) * u.get(i, s));
    let y = tensor::matmul(&w.down, &hid)?;
    let r = y.sub(t)?;
    let loss = r.frobenius_sq() / n;
    let dy = r.scaled(2.0 / n);
    let d_down = tensor::matmul(&dy, &hid.transpose())?;
    let dh = tensor::matmul(&w.down.transpose(), &dy)?;
    let du = Matrix::from_fn(h, k, |i, s| dh.get(i, s) * a.get(i, s));
    let dg = Matrix::from_fn(h, k, |i, s| dh.get(i, s) * u.get(i, s) * silu_grad(g.get(i, s)));
    let xt = x.transpose();
    Ok((loss, [tensor::matmul(&du, &xt)?, tensor::matmul(&dg, &xt)?, d_down]))
}

/// Fits a SwiGLU MLP by Adam to a random tanh teacher on anisotropic inputs.
/// Returns the trained weights and a fresh input set drawn from the same
/// distribution.
pub fn train_toy_swiglu(cfg: &ToyMlpConfig) -> Result<ToyMlp> {
    let (d, h) = (cfg.d, cfg.h);
    if d == 0 || h == 0 || cfg.samples == 0 {
        return Err(RanaError::InvalidArgument("toy MLP dimensions must be positive".into()));
    }
    let mut rng = seeded_rng(cfg.seed);
    let basis = tensor::thin_svd(&Matrix::gaussian(d, d, 1.0, &mut rng))?.u;
    let draw = |n: usize, rng: &mut SeededRng| -> Result<Matrix> {
        let scales: Vec<f64> = (0..d).map(|j| ((j + 1) as f64).powf(-cfg.input_decay)).collect();
        let z = Matrix::gaussian(d, n, 1.0, rng);
        tensor::matmul(&basis, &Matrix::from_fn(d, n, |i, s| z.get(i, s) * scales[i] * 2.0))
    };
    let x = draw(cfg.samples, &mut rng)?;
    let t1 = Matrix::gaussian(2 * h, d, 1.5 / (d as f64).sqrt(), &mut rng);
    let t2 = Matrix::gaussian(d, 2 * h, 1.0 / (2.0 * h as f64).sqrt(), &mut rng);
    let pre = tensor::matmul(&t1, &x)?;
    let act = Matrix::from_fn(2 * h, cfg.samples, |i, s| pre.get(i, s).tanh());
    let target = tensor::matmul(&t2, &act)?;

    let std_in = 1.0 / (d as f64).sqrt();
    let mut w = MlpWeights::new(
        Matrix::gaussian(h, d, std_in, &mut rng),
        Some(Matrix::gaussian(h, d, std_in, &mut rng)),
        Matrix::gaussian(d, h, 1.0 / (h as f64).sqrt(), &mut rng),
        Activation::Silu,
    )?;
    let mut opt = [Adam::new(h * d), Adam::new(h * d), Adam::new(d * h)];
    let mut initial_loss = None;
    for _ in 0..cfg.steps {
        let (l, grads) = swiglu_loss_and_grads(&w, &x, &target)?;
        if !l.is_finite() {
            return Err(RanaError::TrainingDiverged { epoch: 0 });
        }
        initial_loss.get_or_insert(l);
        let gate = w.gate.as_mut().expect("gated");
        for (p, (o, g)) in [&mut w.up, gate, &mut w.down].into_iter().zip(opt.iter_mut().zip(&grads)) {
            o.step(p.data_mut(), g.as_slice(), cfg.lr);
        }
    }
    let (final_loss, _) = swiglu_loss_and_grads(&w, &x, &target)?;
    let inputs = CalibrationSet::new(draw(cfg.samples, &mut rng)?);
    Ok(ToyMlp { weights: w, inputs, initial_loss: initial_loss.unwrap_or(final_loss), final_loss })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTransformerSpec {
    pub blocks: usize,
    pub width: usize,
    pub hidden: usize,
    pub vocab: usize,
    pub seq_len: usize,
    /// Decay exponent for the singular values of every weight.
    pub spectral_decay: f64,
    pub seed: u64,
}

impl Default for ToyTransformerSpec {
    fn default() -> Self {
        Self { blocks: 2, width: 32, hidden: 64, vocab: 64, seq_len: 16, spectral_decay: 0.8, seed: 0 }
    }
}

pub const MAX_TOY_BLOCKS: usize = 4;
pub const MAX_TOY_WIDTH: usize = 128;

#[derive(Clone)]
pub struct ToyBlock {
    /// Fused query/key/value projection, `3w × w`.
    pub qkv: Arc<dyn Forward>,
    pub wo: Matrix,
    pub mlp: Arc<dyn Forward>,
}

/// Pre-norm, single-head, causal transformer with SwiGLU MLPs.
#[derive(Clone)]
pub struct ToyTransformer {
    pub spec: ToyTransformerSpec,
    pub embed: Matrix,
    pub blocks: Vec<ToyBlock>,
    pub unembed: Matrix,
    dense_qkv: Vec<Matrix>,
    dense_mlp: Vec<MlpWeights>,
}

fn rms_norm(x: &[f64]) -> Vec<f64> {
    let rms = (tensor::norm_sq(x) / x.len() as f64 + 1e-6).sqrt();
    x.iter().map(|v| v / rms).collect()
}

/// Activations recorded during a forward pass, one column per token.
pub struct Trace {
    pub logits: Vec<Vec<f64>>,
    /// Residual stream after each block.
    pub residuals: Vec<Vec<Vec<f64>>>,
    pub qkv_inputs: Vec<Vec<Vec<f64>>>,
    pub mlp_inputs: Vec<Vec<Vec<f64>>>,
}

impl ToyTransformer {
    pub fn new(spec: ToyTransformerSpec) -> Result<Self> {
        if spec.blocks == 0 || spec.blocks > MAX_TOY_BLOCKS || spec.width == 0 || spec.width > MAX_TOY_WIDTH {
            return Err(RanaError::InvalidArgument(format!(
                "toy model needs 1..={MAX_TOY_BLOCKS} blocks and width 1..={MAX_TOY_WIDTH}"
            )));
        }
        if spec.hidden == 0 || spec.vocab == 0 || spec.seq_len == 0 {
            return Err(RanaError::InvalidArgument("toy model dimensions must be positive".into()));
        }
        let (w, h, c) = (spec.width, spec.hidden, spec.spectral_decay);
        let mut rng = seeded_rng(spec.seed);
        let embed = spectral_matrix(w, spec.vocab, (w as f64).sqrt(), c, &mut rng)?;
        let mut dense_qkv = Vec::new();
        let mut dense_mlp = Vec::new();
        let mut blocks = Vec::new();
        for _ in 0..spec.blocks {
            let qkv = spectral_matrix(3 * w, w, 2.0, c, &mut rng)?;
            let wo = spectral_matrix(w, w, 0.5, c, &mut rng)?;
            let mlp = MlpWeights::new(
                spectral_matrix(h, w, 2.0, c, &mut rng)?,
                Some(spectral_matrix(h, w, 2.0, c, &mut rng)?),
                spectral_matrix(w, h, 1.0, c, &mut rng)?,
                Activation::Silu,
            )?;
            blocks.push(ToyBlock { qkv: Arc::new(qkv.clone()), wo, mlp: Arc::new(mlp.clone()) });
            dense_qkv.push(qkv);
            dense_mlp.push(mlp);
        }
        let unembed = spectral_matrix(spec.vocab, w, 2.0, c, &mut rng)?;
        Ok(Self { spec, embed, blocks, unembed, dense_qkv, dense_mlp })
    }

    pub fn dense_qkv(&self, block: usize) -> &Matrix {
        &self.dense_qkv[block]
    }

    pub fn dense_mlp(&self, block: usize) -> &MlpWeights {
        &self.dense_mlp[block]
    }

    /// Uniformly random token sequences.
    pub fn sample_sequences(&self, n: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = seeded_rng(seed);
        (0..n).map(|_| (0..self.spec.seq_len).map(|_| rng.random_range(0..self.spec.vocab)).collect()).collect()
    }

    pub fn trace(&self, tokens: &[usize]) -> Result<Trace> {
        let w = self.spec.width;
        let mut xs: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&t| {
                if t >= self.spec.vocab {
                    return Err(RanaError::InvalidArgument(format!("token {t} outside vocabulary")));
                }
                Ok(self.embed.column(t))
            })
            .collect::<Result<_>>()?;
        let mut trace = Trace { logits: Vec::new(), residuals: Vec::new(), qkv_inputs: Vec::new(), mlp_inputs: Vec::new() };
        let scale = 1.0 / (w as f64).sqrt();
        for block in &self.blocks {
            let normed: Vec<Vec<f64>> = xs.iter().map(|x| rms_norm(x)).collect();
            let qkv: Vec<Vec<f64>> = normed.iter().map(|n| block.qkv.forward(n)).collect::<Result<_>>()?;
            for (t, x) in xs.iter_mut().enumerate() {
                let q = &qkv[t][..w];
                let scores: Vec<f64> = (0..=t).map(|s| tensor::dot(q, &qkv[s][w..2 * w]) * scale).collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                let mut attn = vec![0.0; w];
                for (s, p) in e.iter().enumerate() {
                    for (a, v) in attn.iter_mut().zip(&qkv[s][2 * w..]) {
                        *a += p / z * v;
                    }
                }
                for (xi, oi) in x.iter_mut().zip(block.wo.matvec(&attn)?) {
                    *xi += oi;
                }
            }
            let mlp_in: Vec<Vec<f64>> = xs.iter().map(|x| rms_norm(x)).collect();
            for (x, n) in xs.iter_mut().zip(&mlp_in) {
                for (xi, m) in x.iter_mut().zip(block.mlp.forward(n)?) {
                    *xi += m;
                }
            }
            trace.qkv_inputs.push(normed);
            trace.mlp_inputs.push(mlp_in);
            trace.residuals.push(xs.clone());
        }
        trace.logits = xs.iter().map(|x| self.unembed.matvec(&rms_norm(x))).collect::<Result<_>>()?;
        Ok(trace)
    }

    /// Per-token FLOPs outside the QKV and MLP projections, averaged over positions.
    pub fn other_flops(&self) -> f64 {
        let (w, l) = (self.spec.width as f64, self.spec.seq_len as f64);
        let mean_ctx = (l + 1.0) / 2.0;
        let per_block = 2.0 * 3.0 * w + 4.0 * w * mean_ctx + 3.0 * mean_ctx + 2.0 * w * w + 2.0 * w;
        self.spec.blocks as f64 * per_block + 3.0 * w + 2.0 * self.spec.vocab as f64 * w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptTargets {
    MlpOnly,
    QkvAndMlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceConfig {
    /// Fraction of the QKV+MLP FLOPs to remove.
    pub compression: f64,
    pub targets: AdaptTargets,
    pub search: MlpSearchOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub config: DivergenceConfig,
    pub ledger: FlopLedger,
    pub achieved: CompressionBreakdown,
    /// Mean over positions of `‖z − z'‖ / ‖z‖` for the logits.
    pub mean_logit_deviation: f64,
    /// Same measure on the residual stream after each block.
    pub per_block_deviation: Vec<f64>,
}

fn relative(a: &[f64], b: &[f64]) -> f64 {
    normalized_error(a, b).map_or(0.0, f64::sqrt)
}

/// Adapts the model at `cfg.compression`, calibrating every block on the
/// activations of the dense model over `calib`, and measures how far the
/// adapted model drifts from the dense one on `eval`.
pub fn toy_model_divergence(
    model: &ToyTransformer,
    cfg: &DivergenceConfig,
    calib: &[Vec<usize>],
    eval: &[Vec<usize>],
) -> Result<DivergenceReport> {
    if !(0.0..1.0).contains(&cfg.compression) {
        return Err(RanaError::InvalidArgument(format!("compression {} outside [0, 1)", cfg.compression)));
    }
    if calib.is_empty() || eval.is_empty() {
        return Err(RanaError::EmptyInput("token sequences"));
    }
    let exec = cfg.search.exec;
    let traces: Vec<Trace> = exec.map(calib.len(), |s| model.trace(&calib[s])).into_iter().collect::<Result<_>>()?;
    let w = model.spec.width;
    let keep = 1.0 - cfg.compression;
    let mut adapted = model.clone();
    let mut ledger = FlopLedger { other: model.other_flops(), ..Default::default() };
    for b in 0..model.blocks.len() {
        let pool = |f: fn(&Trace) -> &Vec<Vec<Vec<f64>>>| -> Result<CalibrationSet> {
            let cols: Vec<Vec<f64>> = traces.iter().flat_map(|t| f(t)[b].iter().cloned()).collect();
            CalibrationSet::from_samples(&cols)
        };
        let qkv_w = model.dense_qkv(b);
        let mlp_w = model.dense_mlp(b);
        let qkv_dense = flops::dense_linear_flops(3 * w, w).total();
        let mlp_dense = mlp_w.dense_flops().total();
        ledger.qkv_dense += qkv_dense;
        ledger.mlp_dense += mlp_dense;
        let mlp_fraction = match cfg.targets {
            AdaptTargets::QkvAndMlp => {
                let calib_qkv = pool(|t| &t.qkv_inputs)?;
                let dec = decomposition::decompose_with(qkv_w, &calib_qkv, Default::default())?;
                let stats = decomposition::rank_contributions_with(&dec, &calib_qkv, exec)?;
                let search = allocation::line_search_layer_with(&dec, &stats, keep * qkv_dense, MaskerKind::BMasker, exec)?;
                ledger.qkv_adapted += search.allocation.achieved_flops.total();
                if let Some(layer) = allocation::build_layer(&dec, &search.allocation)? {
                    adapted.blocks[b].qkv = Arc::new(layer);
                }
                keep
            }
            AdaptTargets::MlpOnly => {
                ledger.qkv_adapted += qkv_dense;
                (keep * (qkv_dense + mlp_dense) - qkv_dense) / mlp_dense
            }
        };
        let mlp_search = allocation::grid_search_mlp(mlp_w, &pool(|t| &t.mlp_inputs)?, mlp_fraction.min(1.0), &cfg.search)?;
        ledger.mlp_adapted += mlp_search.allocation.achieved_flops.total();
        adapted.blocks[b].mlp = Arc::new(mlp_search.mlp);
    }

    let pairs: Vec<(f64, Vec<f64>, usize)> = exec
        .map(eval.len(), |s| -> Result<(f64, Vec<f64>, usize)> {
            let a = model.trace(&eval[s])?;
            let z = adapted.trace(&eval[s])?;
            let logit: f64 = a.logits.iter().zip(&z.logits).map(|(p, q)| relative(p, q)).sum();
            let blocks = a
                .residuals
                .iter()
                .zip(&z.residuals)
                .map(|(ra, rz)| ra.iter().zip(rz).map(|(p, q)| relative(p, q)).sum())
                .collect();
            Ok((logit, blocks, a.logits.len()))
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let positions: usize = pairs.iter().map(|p| p.2).sum();
    let mut per_block = vec![0.0; model.blocks.len()];
    let mut logit = 0.0;
    for (l, bl, _) in &pairs {
        logit += l;
        for (acc, v) in per_block.iter_mut().zip(bl) {
            *acc += v;
        }
    }
    per_block.iter_mut().for_each(|v| *v /= positions as f64);
    Ok(DivergenceReport {
        config: *cfg,
        achieved: ledger.breakdown(),
        ledger,
        mean_logit_deviation: logit / positions as f64,
        per_block_deviation: per_block,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swiglu_gradients_match_finite_differences() {
        let mut rng = seeded_rng(7);
        let (d, h, n) = (3, 5, 6);
        let w = MlpWeights::new(
            Matrix::gaussian(h, d, 0.7, &mut rng),
            Some(Matrix::gaussian(h, d, 0.7, &mut rng)),
            Matrix::gaussian(d, h, 0.7, &mut rng),
            Activation::Silu,
        )
        .unwrap();
        let x = Matrix::gaussian(d, n, 1.0, &mut rng);
        let t = Matrix::gaussian(d, n, 1.0, &mut rng);
        let (_, grads) = swiglu_loss_and_grads(&w, &x, &t).unwrap();
        let eps = 1e-6;
        for which in 0..3 {
            let g = &grads[which];
            for r in 0..g.rows() {
                for c in 0..g.cols() {
                    let nudge = |delta: f64| {
                        let mut p = w.clone();
                        let m = match which {
                            0 => &mut p.up,
                            1 => p.gate.as_mut().unwrap(),
                            _ => &mut p.down,
                        };
                        m.set(r, c, m.get(r, c) + delta);
                        swiglu_loss_and_grads(&p, &x, &t).unwrap().0
                    };
                    let fd = (nudge(eps) - nudge(-eps)) / (2.0 * eps);
                    let an = g.get(r, c);
                    assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "{which} {r} {c}: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let cfg = ToyMlpConfig { steps: 60, samples: 200, ..Default::default() };
        let a = train_toy_swiglu(&cfg).unwrap();
        assert!(a.final_loss < 0.5 * a.initial_loss, "{} -> {}", a.initial_loss, a.final_loss);
        let b = train_toy_swiglu(&cfg).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.inputs, b.inputs);
    }

    #[test]
    fn anisotropic_spectrum_decays() {
        let mut rng = seeded_rng(1);
        let x = anisotropic_inputs(8, 4000, 1.0, &mut rng).unwrap();
        let s = tensor::thin_svd(&x).unwrap().s;
        assert!(s[0] > 4.0 * s[7]);
        let m = spectral_matrix(6, 4, 2.0, 1.0, &mut rng).unwrap();
        let sv = tensor::thin_svd(&m).unwrap().s;
        for (j, v) in sv.iter().enumerate() {
            assert!((v - 2.0 / (j + 1) as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn spec_limits_are_enforced() {
        assert!(ToyTransformer::new(ToyTransformerSpec { blocks: 5, ..Default::default() }).is_err());
        assert!(ToyTransformer::new(ToyTransformerSpec { width: 129, ..Default::default() }).is_err());
    }

    fn small() -> ToyTransformer {
        ToyTransformer::new(ToyTransformerSpec { blocks: 2, width: 12, hidden: 24, vocab: 20, seq_len: 6, ..Default::default() }).unwrap()
    }

    #[test]
    fn zero_compression_is_exact() {
        let m = small();
        let calib = m.sample_sequences(40, 1);
        let eval = m.sample_sequences(8, 2);
        for targets in [AdaptTargets::QkvAndMlp, AdaptTargets::MlpOnly] {
            let cfg = DivergenceConfig { compression: 0.0, targets, search: Default::default() };
            let r = toy_model_divergence(&m, &cfg, &calib, &eval).unwrap();
            assert!(r.mean_logit_deviation <= 1e-8, "{targets:?}: {}", r.mean_logit_deviation);
        }
    }

    #[test]
    fn achieved_compression_tracks_request() {
        let m = small();
        let calib = m.sample_sequences(40, 1);
        let eval = m.sample_sequences(8, 2);
        let cfg = DivergenceConfig { compression: 0.3, targets: AdaptTargets::QkvAndMlp, search: Default::default() };
        let r = toy_model_divergence(&m, &cfg, &calib, &eval).unwrap();
        let adapted = r.ledger.qkv_adapted + r.ledger.mlp_adapted;
        let dense = r.ledger.qkv_dense + r.ledger.mlp_dense;
        assert!((1.0 - adapted / dense - 0.3).abs() <= 0.01, "{}", 1.0 - adapted / dense);
        assert!(r.mean_logit_deviation > 0.0);
        assert_eq!(r.per_block_deviation.len(), 2);
    }
}
