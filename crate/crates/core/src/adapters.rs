//! Compressed layers built from decompositions and maskers, plus the
//! baselines they are compared against.
//!
//! Every forward has an instrumented variant that adds the executed FLOPs to
//! an [`OpTally`]; those counts agree with [`crate::flops`] when the expected
//! active count is replaced by the realized one.

use serde::{Deserialize, Serialize};

use crate::decomposition::{CalibrationSet, RankDecomposition};
use crate::error::{RanaError, Result};
use crate::exec::Exec;
use crate::flops::{self, FlopCount, MaskerKind, MlpShape, OpTally};
use crate::kernels::MaskedGemv;
use crate::maskers::{
    self, BMasker, Mask, NeuronThresholdMasker, SigmoidMlpMasker, TrainOptions, TrainReport,
};
use crate::tensor::{self, Matrix};

/// A map from input vectors to output vectors.
pub trait Forward: Send + Sync {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn forward_counted(&self, x: &[f64], tally: &mut OpTally) -> Result<Vec<f64>>;

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_counted(x, &mut OpTally::default())
    }
}

fn check_input(op: &'static str, expected: usize, x: &[f64]) -> Result<()> {
    if x.len() != expected {
        return Err(RanaError::ShapeMismatch { op, left: (expected, 1), right: (x.len(), 1) });
    }
    Ok(())
}

/// Applies `f` to every column of `x` (in × n), returning out × n.
pub fn forward_batch(f: &dyn Forward, x: &Matrix, exec: Exec) -> Result<Matrix> {
    let cols: Result<Vec<Vec<f64>>> = exec.map(x.cols(), |s| f.forward(&x.column(s))).into_iter().collect();
    Matrix::from_columns(&cols?)
}

/// Batch forward that also returns the mean executed FLOPs per input.
pub fn forward_batch_counted(f: &dyn Forward, x: &Matrix, exec: Exec) -> Result<(Matrix, f64)> {
    let results: Vec<Result<(Vec<f64>, u64)>> = exec.map(x.cols(), |s| {
        let mut tally = OpTally::default();
        f.forward_counted(&x.column(s), &mut tally).map(|y| (y, tally.flops))
    });
    let mut cols = Vec::with_capacity(results.len());
    let mut total = 0u64;
    for r in results {
        let (y, fl) = r?;
        cols.push(y);
        total += fl;
    }
    Ok((Matrix::from_columns(&cols)?, total as f64 / x.cols() as f64))
}

impl Forward for Matrix {
    fn in_dim(&self) -> usize {
        self.cols()
    }

    fn out_dim(&self) -> usize {
        self.rows()
    }

    fn forward_counted(&self, x: &[f64], tally: &mut OpTally) -> Result<Vec<f64>> {
        let y = self.matvec(x)?;
        tally.add(2 * self.rows() * self.cols());
        Ok(y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    /// Tanh approximation: `0.5 x (1 + tanh(√(2/π) (x + 0.044715 x³)))`.
    Gelu,
    Relu,
}

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_CUBIC: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * maskers::sigmoid(x),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_CUBIC * x * x * x)).tanh()),
            Activation::Relu => x.max(0.0),
        }
    }

    /// SwiGLU-style MLPs gate with SiLU; the others are single-path.
    pub fn is_gated(self) -> bool {
        self == Activation::Silu
    }
}

/// Mask source for a rank-adapted layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RankMasker {
    B(BMasker),
    Sigmoid(SigmoidMlpMasker),
    /// Static low-rank product.
    Open,
}

/// `x ↦ A (m(x) ⊙ B x)`.
#[derive(Clone, Debug)]
pub struct RankAdaptedLinear {
    dec: RankDecomposition,
    masker: RankMasker,
    a_cols: MaskedGemv,
}

impl RankAdaptedLinear {
    pub fn new(dec: RankDecomposition, masker: RankMasker) -> Result<Self> {
        if let RankMasker::Sigmoid(s) = &masker {
            let (_, i) = dec.source_shape();
            if s.outputs() != dec.kept() || s.params.input_dim() != i {
                return Err(RanaError::ShapeMismatch {
                    op: "rank_adapted_masker",
                    left: (dec.kept(), i),
                    right: (s.outputs(), s.params.input_dim()),
                });
            }
        }
        let a_cols = MaskedGemv::new(dec.a());
        Ok(Self { dec, masker, a_cols })
    }

    pub fn decomposition(&self) -> &RankDecomposition {
        &self.dec
    }

    pub fn masker(&self) -> &RankMasker {
        &self.masker
    }

    pub fn kept(&self) -> usize {
        self.dec.kept()
    }

    pub fn masker_kind(&self) -> MaskerKind {
        match &self.masker {
            RankMasker::B(_) => MaskerKind::BMasker,
            RankMasker::Sigmoid(s) => MaskerKind::Sigmoid { inner: s.inner() },
            RankMasker::Open => MaskerKind::Open,
        }
    }

    pub fn expected_flops(&self, active: f64) -> Result<FlopCount> {
        let (o, i) = self.dec.source_shape();
        flops::rank_adapted_flops(self.kept(), o, i, active, self.masker_kind())
    }

    /// The mask this layer would use for `x`.
    pub fn mask(&self, x: &[f64]) -> Result<Mask> {
        check_input("rank_adapted_linear", self.in_dim(), x)?;
        Ok(match &self.masker {
            RankMasker::B(m) => m.apply(&self.dec.project(x)?),
            RankMasker::Sigmoid(s) => s.apply(x),
            RankMasker::Open => Mask::ones(self.kept()),
        })
    }

    /// `A (mask ⊙ B x)` for an externally chosen mask.
    pub fn forward_with_mask(&self, x: &[f64], mask: &Mask) -> Result<Vec<f64>> {
        check_input("rank_adapted_linear", self.in_dim(), x)?;
        let bx = self.dec.project(x)?;
        self.a_cols.apply(mask, &bx, &mut OpTally::default())
    }

    /// Forward returning the mask that was used.
    pub fn forward_masked(&self, x: &[f64], tally: &mut OpTally) -> Result<(Vec<f64>, Mask)> {
        check_input("rank_adapted_linear", self.in_dim(), x)?;
        let (d, i) = (self.kept(), self.in_dim());
        match &self.masker {
            RankMasker::B(m) => {
                let bx = self.dec.project(x)?;
                tally.add(2 * d * i);
                let mask = m.apply(&bx);
                tally.add(2 * d);
                let y = self.a_cols.apply(&mask, &bx, tally)?;
                Ok((y, mask))
            }
            RankMasker::Sigmoid(s) => {
                let mask = s.apply_counted(x, tally);
                let active = mask.active();
                let b = self.dec.b();
                let bx: Vec<f64> = active.iter().map(|&j| tensor::dot(b.row(j), x)).collect();
                tally.add(2 * active.len() * i);
                let y = self.a_cols.apply_indexed(&active, &bx, tally);
                Ok((y, mask))
            }
            RankMasker::Open => {
                let bx = self.dec.project(x)?;
                tally.add(2 * d * i);
                let mask = Mask::ones(d);
                let y = self.a_cols.apply(&mask, &bx, tally)?;
                Ok((y, mask))
            }
        }
    }
}

impl Forward for RankAdaptedLinear {
    fn in_dim(&self) -> usize {
        self.dec.source_shape().1
    }

    fn out_dim(&self) -> usize {
        self.dec.source_shape().0
    }

    fn forward_counted(&self, x: &[f64], tally: &mut OpTally) -> Result<Vec<f64>> {
        self.forward_masked(x, tally).map(|(y, _)| y)
    }
}

/// Dense MLP weights. `up`/`gate` are h × d, `down` is d × h.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpWeights {
    pub up: Matrix,
    pub gate: Option<Matrix>,
    pub down: Matrix,
    pub activation: Activation,
}

impl MlpWeights {
    pub fn new(up: Matrix, gate: Option<Matrix>, down: Matrix, activation: Activation) -> Result<Self> {
        let (h, d) = up.shape();
        if down.shape() != (d, h) {
            return Err(RanaError::ShapeMismatch { op: "mlp_down", left: up.shape(), right: down.shape() });
        }
        if let Some(g) = &gate {
            if g.shape() != (h, d) {
                return Err(RanaError::ShapeMismatch { op: "mlp_gate", left: up.shape(), right: g.shape() });
            }
        }
        if gate.is_some() != activation.is_gated() {
            return Err(RanaError::InvalidArgument("gate projection present iff activation is SiLU".into()));
        }
        Ok(Self { up, gate, down, activation })
    }

    pub fn shape(&self) -> MlpShape {
        MlpShape { d: self.up.cols(), h: self.up.rows(), gated: self.gate.is_some() }
    }

    pub fn dense_flops(&self) -> FlopCount {
        flops::dense_mlp_flops(self.shape())
    }

    /// Input of the Down projection.
    pub fn hidden(&self, x: &[f64]) -> Result<Vec<f64>> {
        let u = self.up.matvec(x)?;
        Ok(match &self.gate {
            Some(g) => {
                let gx = g.matvec(x)?;
                gx.iter().zip(&u).map(|(&gv, uv)| self.activation.apply(gv) * uv).collect()
            }
            None => u.iter().map(|&v| self.activation.apply(v)).collect(),
        })
    }

    /// Hidden activations for every calibration column (h × k).
    pub fn hidden_batch(&self, x: &Matrix, exec: Exec) -> Result<Matrix> {
        let cols: Result<Vec<Vec<f64>>> = exec.map(x.cols(), |s| self.hidden(&x.column(s))).into_iter().collect();
        Matrix::from_columns(&cols?)
    }
}

impl Forward for MlpWeights {
    fn in_dim(&self) -> usize {
        self.up.cols()
    }

    fn out_dim(&self) -> usize {
        self.down.rows()
    }

    fn forward_counted(&self, x: &[f64], tally: &mut OpTally) -> Result<Vec<f64>> {
        check_input("mlp", self.in_dim(), x)?;
        let h = self.hidden(x)?;
        let y = self.down.matvec(&h)?;
        tally.add(self.dense_flops().total() as usize);
        Ok(y)
    }
}

/// Up/Gate component of an adapted MLP.
#[derive(Clone, Debug)]
pub enum AdaptedLinear {
    Dense(Matrix),
    Rank(RankAdaptedLinear),
}

impl From<RankAdaptedLinear> for AdaptedLinear {
    fn from(r: RankAdaptedLinear) -> Self {
        AdaptedLinear::Rank(r)
    }
}

impl Forward for AdaptedLinear {
    fn in_dim(&self) -> usize {
        match self {
            AdaptedLinear::Dense(m) => m.in_dim(),
            AdaptedLinear::Rank(r) => r.in_dim(),
        }
    }

    fn out_dim(&self) -> usize {
        match self {
            AdaptedLinear::Dense(m) => m.out_dim(),
            AdaptedLinear::Rank(r) => r.out_dim(),
        }
    }

    fn forward_counted(&self, x: &[f64], tally: &mut OpTally) -> Result<Vec<f64>> {
        match self {
            AdaptedLinear::Dense(m) => m.forward_counted(x, tally),
            AdaptedLinear::Rank(r) => r.forward_counted(x, tally),
        }
    }
}

/// `Down'(act(Gate'(x)) ⊙ Up'(x))` with rank-adapted Up/Gate and a
/// neuron-thresholded Down. A missing Down masker means a dense Down.
#[derive(Clone, Debug)]
pub struct RanaMlp {
    pub up: AdaptedLinear,
    pub gate: Option<AdaptedLinear>,
    down: Matrix,
    down_cols: MaskedGemv,
    pub down_masker: Option<NeuronThresholdMasker>,
    pub activation: Activation,
}

impl RanaMlp {
    pub fn new(
        up: AdaptedLinear,
        gate: Option<AdaptedLinear>,
        down: Matrix,
        down_masker: Option<NeuronThresholdMasker>,
        activation: Activation,
    ) -> Result<Self> {
        let (h, d) = (up.out_dim(), up.in_dim());
        if down.shape() != (d, h) || down_masker.as_ref().is_some_and(|m| m.norms.len() != h) {
            return Err(RanaError::ShapeMismatch { op: "rana_mlp", left: (h, d), right: down.shape() });
        }
        if let Some(g) = &gate {
            if (g.out_dim(), g.in_dim()) != (h, d) {
                return Err(RanaError::ShapeMismatch { op: "rana_mlp_gate", left: (h, d), right: (g.out_dim(), g.in_dim()) });
            }
        }
        if gate.is_some() != activation.is_gated() {
            return Err(RanaError::InvalidArgument("gate adapter present iff activation is SiLU".into()));
        }
        let down_cols = MaskedGemv::new(&down);
        Ok(Self { up, gate, down, down_cols, down_masker, activation })
    }

    pub fn down(&self) -> &Matrix {
        &self.down
    }

    pub fn shape(&self) -> MlpShape {
        MlpShape { d: self.up.in_dim(), h: self.up.out_dim(), gated: self.gate.is_some() }
    }

    /// Adapted Down input `h` (before the Down masker).
    pub fn hidden_counted(&self, x: &[f64], tally: &mut OpTally) -> Result<Vec<f64>> {
        let u = self.up.forward_counted(x, tally)?;
        let h = match &self.gate {
            Some(g) => {
                let gx = g.forward_counted(x, tally)?;
                gx.iter().zip(&u).map(|(&gv, uv)| self.activation.apply(gv) * uv).collect::<Vec<_>>()
            }
            None => u.iter().map(|&v| self.activation.apply(v)).collect(),
        };
        tally.add(self.shape().activation_flops() as usize);
        Ok(h)
    }

    pub fn hidden(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.hidden_counted(x, &mut OpTally::default())
    }

    pub fn hidden_batch(&self, x: &Matrix, exec: Exec) -> Result<Matrix> {
        let cols: Result<Vec<Vec<f64>>> = exec.map(x.cols(), |s| self.hidden(&x.column(s))).into_iter().collect();
        Matrix::from_columns(&cols?)
    }
}

impl Forward for RanaMlp {
    fn in_dim(&self) -> usize {
        self.up.in_dim()
    }

    fn out_dim(&self) -> usize {
        self.down.rows()
    }

    fn forward_counted(&self, x: &[f64], tally: &mut OpTally) -> Result<Vec<f64>> {
        let h = self.hidden_counted(x, tally)?;
        match &self.down_masker {
            Some(m) => {
                let mask = m.apply(&h);
                tally.add(3 * h.len());
                self.down_cols.apply(&mask, &h, tally)
            }
            None => self.down.forward_counted(&h, tally),
        }
    }
}

/// A ReLU MLP with a neuron mask written as a rank adapter on Down:
/// `A_down = W_down`, `B_down = I`, so `A_down (m ⊙ B_down h) = W_down (m ⊙ h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReluEquivalence {
    pub w_up: Matrix,
    pub a_down: Matrix,
    pub b_down: Matrix,
}

pub fn build_relu_equivalent(w_up: &Matrix, w_down: &Matrix) -> Result<ReluEquivalence> {
    if w_down.cols() != w_up.rows() {
        return Err(RanaError::ShapeMismatch { op: "relu_equivalence", left: w_up.shape(), right: w_down.shape() });
    }
    Ok(ReluEquivalence { w_up: w_up.clone(), a_down: w_down.clone(), b_down: Matrix::identity(w_up.rows()) })
}

impl ReluEquivalence {
    /// `A_down (m ⊙ B_down ReLU(W_up x))`.
    pub fn forward(&self, x: &[f64], mask: &Mask) -> Result<Vec<f64>> {
        let h: Vec<f64> = self.w_up.matvec(x)?.into_iter().map(|v| v.max(0.0)).collect();
        let bh = self.b_down.matvec(&h)?;
        self.a_down.matvec(&mask.apply(&bh))
    }
}

/// `W_down (m ⊙ ReLU(W_up x))`.
pub fn neuron_adapted_relu(w_up: &Matrix, w_down: &Matrix, x: &[f64], mask: &Mask) -> Result<Vec<f64>> {
    let h: Vec<f64> = w_up.matvec(x)?.into_iter().map(|v| v.max(0.0)).collect();
    w_down.matvec(&mask.apply(&h))
}

/// Neuron adapter: a sigmoid masker on the MLP input picks hidden neurons,
/// and only those rows of Up/Gate and columns of Down are computed.
#[derive(Clone, Debug)]
pub struct NeuronAdapterMlp {
    pub weights: MlpWeights,
    pub masker: SigmoidMlpMasker,
    down_cols: MaskedGemv,
    pub calibrated_mean_active: f64,
}

impl NeuronAdapterMlp {
    /// Masker cost as a fraction of dense MLP FLOPs.
    pub const MASKER_SHARE: f64 = 0.06;

    /// Inner width giving a masker near [`Self::MASKER_SHARE`] of the dense MLP.
    pub fn masker_inner(shape: MlpShape) -> usize {
        let dense = flops::dense_mlp_flops(shape).total();
        let (d, h) = (shape.d as f64, shape.h as f64);
        (((Self::MASKER_SHARE * dense - h) / (2.0 * d + 2.0 * h)).floor() as usize).max(1)
    }

    fn per_active(shape: MlpShape) -> f64 {
        let d = shape.d as f64;
        if shape.gated {
            6.0 * d + 2.0
        } else {
            4.0 * d + 1.0
        }
    }

    pub fn masker_flops(shape: MlpShape, inner: usize) -> f64 {
        let (d, h, r) = (shape.d as f64, shape.h as f64, inner as f64);
        2.0 * r * d + 2.0 * h * r + h
    }

    pub fn flops(shape: MlpShape, inner: usize, active: f64) -> FlopCount {
        let mut c = FlopCount::new();
        c.add("masker", Self::masker_flops(shape, inner));
        c.add("active_neurons", active * Self::per_active(shape));
        c
    }

    /// Expected active neurons that spend `budget` FLOPs.
    pub fn active_for_budget(shape: MlpShape, inner: usize, budget: f64) -> Result<f64> {
        let fixed = Self::masker_flops(shape, inner);
        let e = (budget - fixed) / Self::per_active(shape);
        if e <= 0.0 {
            return Err(RanaError::InfeasibleBudget { budget, minimum: fixed + Self::per_active(shape) });
        }
        Ok(e.min(shape.h as f64))
    }

    /// Trains the masker to imitate the neuron-threshold mask of the dense
    /// hidden activations at `target_active`, then moves its cutoff so the
    /// calibration mean hits the target.
    pub fn build(weights: &MlpWeights, calib: &CalibrationSet, target_active: f64, opts: &TrainOptions) -> Result<(Self, TrainReport)> {
        let hidden = weights.hidden_batch(calib.x(), Exec::default())?;
        let teacher = maskers::calibrate_neuron_masker(&weights.down, &hidden, target_active)?;
        let labels = Matrix::from_fn(hidden.rows(), hidden.cols(), |i, s| {
            if hidden.get(i, s).abs() * teacher.norms[i] >= teacher.threshold {
                1.0
            } else {
                0.0
            }
        });
        let (params, report) = maskers::train_bce(calib.x(), &labels, opts)?;
        let mut masker = SigmoidMlpMasker::new(params, 0.5)?;
        let calibrated_mean_active = masker.recalibrate(calib.x(), target_active)?;
        let down_cols = MaskedGemv::new(&weights.down);
        Ok((Self { weights: weights.clone(), masker, down_cols, calibrated_mean_active }, report))
    }
}

impl Forward for NeuronAdapterMlp {
    fn in_dim(&self) -> usize {
        self.weights.up.cols()
    }

    fn out_dim(&self) -> usize {
        self.weights.down.rows()
    }

    fn forward_counted(&self, x: &[f64], tally: &mut OpTally) -> Result<Vec<f64>> {
        check_input("neuron_adapter", self.in_dim(), x)?;
        let mask = self.masker.apply_counted(x, tally);
        let active = mask.active();
        let w = &self.weights;
        let d = x.len();
        let h: Vec<f64> = active
            .iter()
            .map(|&i| {
                let u = tensor::dot(w.up.row(i), x);
                match &w.gate {
                    Some(g) => w.activation.apply(tensor::dot(g.row(i), x)) * u,
                    None => w.activation.apply(u),
                }
            })
            .collect();
        let per = if w.gate.is_some() { 4 * d + 2 } else { 2 * d + 1 };
        tally.add(per * active.len());
        Ok(self.down_cols.apply_indexed(&active, &h, tally))
    }
}

/// CATS-style: full SiLU(Gate x), keep neurons with `|g_i| ≥ t`, then Up and
/// Down only on kept neurons.
#[derive(Clone, Debug)]
pub struct CatsMlp {
    pub weights: MlpWeights,
    pub threshold: f64,
    pub target_active: f64,
    pub calibrated_mean_active: f64,
    down_cols: MaskedGemv,
}

impl CatsMlp {
    pub fn flops(shape: MlpShape, active: f64) -> FlopCount {
        let (d, h) = (shape.d as f64, shape.h as f64);
        let mut c = FlopCount::new();
        c.add("gate", 2.0 * h * d + h);
        c.add("masker", 2.0 * h);
        c.add("active_neurons", active * (4.0 * d + 1.0));
        c
    }

    pub fn active_for_budget(shape: MlpShape, budget: f64) -> Result<f64> {
        let (d, h) = (shape.d as f64, shape.h as f64);
        let fixed = 2.0 * h * d + 3.0 * h;
        let e = (budget - fixed) / (4.0 * d + 1.0);
        if e <= 0.0 {
            return Err(RanaError::InfeasibleBudget { budget, minimum: fixed + 4.0 * d + 1.0 });
        }
        Ok(e.min(h))
    }

    pub fn with_threshold(weights: &MlpWeights, threshold: f64) -> Result<Self> {
        if weights.gate.is_none() {
            return Err(RanaError::InvalidArgument("CATS baseline needs a gated MLP".into()));
        }
        Ok(Self {
            weights: weights.clone(),
            threshold,
            target_active: f64::NAN,
            calibrated_mean_active: f64::NAN,
            down_cols: MaskedGemv::new(&weights.down),
        })
    }

    /// Threshold on pooled `|SiLU(W_gate x)|` so that `target_active` neurons survive on average.
    pub fn calibrate(weights: &MlpWeights, calib: &CalibrationSet, target_active: f64) -> Result<Self> {
        let mut cats = Self::with_threshold(weights, 0.0)?;
        let gate = weights.gate.as_ref().expect("checked above");
        let h = gate.rows();
        if !(target_active > 0.0 && target_active <= h as f64) {
            return Err(RanaError::TargetOutOfRange { target: target_active, max: h as f64 });
        }
        let g = tensor::matmul(gate, calib.x())?;
        let pooled: Vec<f64> = g.as_slice().iter().map(|&v| weights.activation.apply(v).abs()).collect();
        let k = calib.samples();
        let m = ((target_active * k as f64).round() as usize).clamp(1, pooled.len());
        cats.threshold = tensor::kth_largest(&pooled, m)?;
        cats.target_active = target_active;
        cats.calibrated_mean_active = pooled.iter().filter(|&&v| v >= cats.threshold).count() as f64 / k as f64;
        Ok(cats)
    }
}

impl Forward for CatsMlp {
    fn in_dim(&self) -> usize {
        self.weights.up.cols()
    }

    fn out_dim(&self) -> usize {
        self.weights.down.rows()
    }

    fn forward_counted(&self, x: &[f64], tally: &mut OpTally) -> Result<Vec<f64>> {
        check_input("cats", self.in_dim(), x)?;
        let w = &self.weights;
        let gate = w.gate.as_ref().expect("gated by construction");
        let g: Vec<f64> = gate.matvec(x)?.into_iter().map(|v| w.activation.apply(v)).collect();
        let (h, d) = gate.shape();
        tally.add(2 * h * d + h + 2 * h);
        let active: Vec<usize> = (0..h).filter(|&i| g[i].abs() >= self.threshold).collect();
        let hv: Vec<f64> = active.iter().map(|&i| g[i] * tensor::dot(w.up.row(i), x)).collect();
        tally.add((2 * d + 1) * active.len());
        Ok(self.down_cols.apply_indexed(&active, &hv, tally))
    }
}

/// Static rank-`r` product `A_r B_r x`.
#[derive(Clone, Debug)]
pub struct FixedSvdLayer {
    inner: RankAdaptedLinear,
}

impl FixedSvdLayer {
    pub fn new(dec: &RankDecomposition, rank: usize) -> Result<Self> {
        Ok(Self { inner: RankAdaptedLinear::new(dec.truncated(rank)?, RankMasker::Open)? })
    }

    pub fn rank(&self) -> usize {
        self.inner.kept()
    }

    pub fn flops(&self) -> FlopCount {
        let (o, i) = self.inner.dec.source_shape();
        flops::rank_adapted_flops(self.rank(), o, i, self.rank() as f64, MaskerKind::Open).expect("active equals kept")
    }

    /// Largest static rank whose cost `2r(o + i)` fits `budget`.
    pub fn rank_for_budget(o: usize, i: usize, budget: f64) -> Result<usize> {
        let r = (budget / (2.0 * (o + i) as f64)).floor() as usize;
        if r == 0 {
            return Err(RanaError::InfeasibleBudget { budget, minimum: 2.0 * (o + i) as f64 });
        }
        Ok(r.min(o.min(i)))
    }
}

impl Forward for FixedSvdLayer {
    fn in_dim(&self) -> usize {
        self.inner.in_dim()
    }

    fn out_dim(&self) -> usize {
        self.inner.out_dim()
    }

    fn forward_counted(&self, x: &[f64], tally: &mut OpTally) -> Result<Vec<f64>> {
        self.inner.forward_counted(x, tally)
    }
}

#[derive(Clone, Debug)]
pub enum BaselineAdapter {
    NeuronAdapter(NeuronAdapterMlp),
    CatsLike(CatsMlp),
    FixedSvd(FixedSvdLayer),
}

pub fn forward_baseline(b: &BaselineAdapter, x: &[f64]) -> Result<Vec<f64>> {
    match b {
        BaselineAdapter::NeuronAdapter(n) => n.forward(x),
        BaselineAdapter::CatsLike(c) => c.forward(x),
        BaselineAdapter::FixedSvd(f) => f.forward(x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::{decompose, rank_contributions};
    use crate::maskers::{calibrate_b_masker, SigmoidParams};
    use crate::tensor::{seeded_rng, SeededRng};
    use rand::Rng;

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    fn swiglu(rng: &mut SeededRng, d: usize, h: usize) -> MlpWeights {
        MlpWeights::new(
            Matrix::gaussian(h, d, 0.3, rng),
            Some(Matrix::gaussian(h, d, 0.3, rng)),
            Matrix::gaussian(d, h, 0.3, rng),
            Activation::Silu,
        )
        .unwrap()
    }

    #[test]
    fn activations() {
        assert_eq!(Activation::Silu.apply(0.0), 0.0);
        assert_eq!(Activation::Relu.apply(-2.0), 0.0);
        assert!((Activation::Gelu.apply(1.0) - 0.841_191_990_607_477).abs() < 1e-12);
        assert!((Activation::Silu.apply(2.0) - 2.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn all_ones_and_all_zeros_masks() {
        let mut rng = seeded_rng(1);
        let w = Matrix::gaussian(10, 8, 1.0, &mut rng);
        let calib = CalibrationSet::new(Matrix::gaussian(8, 40, 1.0, &mut rng));
        let dec = decompose(&w, &calib, 8).unwrap();
        let layer = RankAdaptedLinear::new(dec, RankMasker::Open).unwrap();
        let x = calib.sample(0);
        assert!(max_diff(&layer.forward(&x).unwrap(), &w.matvec(&x).unwrap()) < 1e-10);
        assert_eq!(layer.forward_with_mask(&x, &Mask::zeros(8)).unwrap(), vec![0.0; 10]);
    }

    #[test]
    fn b_masked_forward_matches_materialized_oracle() {
        let mut rng = seeded_rng(2);
        let w = Matrix::gaussian(10, 8, 1.0, &mut rng);
        let calib = CalibrationSet::new(Matrix::gaussian(8, 100, 1.0, &mut rng));
        let dec = decompose(&w, &calib, 8).unwrap();
        let stats = rank_contributions(&dec, &calib).unwrap();
        let masker = calibrate_b_masker(&stats, 4.0).unwrap();
        let layer = RankAdaptedLinear::new(dec.clone(), RankMasker::B(masker.clone())).unwrap();
        for s in 0..20 {
            let x = calib.sample(s);
            let mask = masker.apply(&dec.project(&x).unwrap());
            let diag = Matrix::diag(&mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect::<Vec<_>>());
            let m = tensor::matmul(&tensor::matmul(dec.a(), &diag).unwrap(), dec.b()).unwrap();
            let mut tally = OpTally::default();
            let (y, used) = layer.forward_masked(&x, &mut tally).unwrap();
            assert_eq!(used, mask);
            assert!(max_diff(&y, &m.matvec(&x).unwrap()) < 1e-10);
            let e = mask.count_ones() as f64;
            assert_eq!(tally.flops as f64, layer.expected_flops(e).unwrap().total());
        }
    }

    #[test]
    fn sigmoid_forward_skips_rows_and_counts_flops() {
        let mut rng = seeded_rng(3);
        let w = Matrix::gaussian(12, 6, 1.0, &mut rng);
        let calib = CalibrationSet::new(Matrix::gaussian(6, 30, 1.0, &mut rng));
        let dec = decompose(&w, &calib, 6).unwrap();
        let params = SigmoidParams { c: Matrix::gaussian(6, 2, 1.0, &mut rng), d: Matrix::gaussian(2, 6, 1.0, &mut rng), bias: vec![0.0; 6] };
        let s = SigmoidMlpMasker::new(params, 0.5).unwrap();
        let layer = RankAdaptedLinear::new(dec.clone(), RankMasker::Sigmoid(s.clone())).unwrap();
        for k in 0..10 {
            let x = calib.sample(k);
            let mask = s.apply(&x);
            let mut tally = OpTally::default();
            let y = layer.forward_counted(&x, &mut tally).unwrap();
            assert!(max_diff(&y, &layer.forward_with_mask(&x, &mask).unwrap()) < 1e-12);
            let e = mask.count_ones() as f64;
            assert_eq!(tally.flops as f64, layer.expected_flops(e).unwrap().total());
        }
    }

    #[test]
    fn open_rana_mlp_equals_dense() {
        let mut rng = seeded_rng(4);
        let w = swiglu(&mut rng, 8, 16);
        let calib = CalibrationSet::new(Matrix::gaussian(8, 50, 1.0, &mut rng));
        let up = RankAdaptedLinear::new(decompose(&w.up, &calib, 8).unwrap(), RankMasker::Open).unwrap();
        let gate = RankAdaptedLinear::new(decompose(w.gate.as_ref().unwrap(), &calib, 8).unwrap(), RankMasker::Open).unwrap();
        let mlp = RanaMlp::new(up.into(), Some(gate.into()), w.down.clone(), Some(NeuronThresholdMasker::open(16)), Activation::Silu).unwrap();
        for s in 0..10 {
            let x = calib.sample(s);
            let want = w.forward(&x).unwrap();
            let got = mlp.forward(&x).unwrap();
            assert!(max_diff(&got, &want) <= 1e-8 * tensor::norm_sq(&want).sqrt());
        }
        assert_eq!(mlp.forward(&[0.0; 8]).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn rana_mlp_matches_compositional_oracle() {
        let mut rng = seeded_rng(5);
        let w = swiglu(&mut rng, 8, 16);
        let calib = CalibrationSet::new(Matrix::gaussian(8, 80, 1.0, &mut rng));
        let mk = |m: &Matrix| {
            let dec = decompose(m, &calib, 8).unwrap();
            let stats = rank_contributions(&dec, &calib).unwrap();
            RankAdaptedLinear::new(dec, RankMasker::B(calibrate_b_masker(&stats, 5.0).unwrap())).unwrap()
        };
        let (up, gate) = (mk(&w.up), mk(w.gate.as_ref().unwrap()));
        let hidden = Matrix::from_columns(
            &(0..80)
                .map(|s| {
                    let x = calib.sample(s);
                    let u = up.forward(&x).unwrap();
                    let g = gate.forward(&x).unwrap();
                    g.iter().zip(&u).map(|(a, b)| Activation::Silu.apply(*a) * b).collect()
                })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let dm = maskers::calibrate_neuron_masker(&w.down, &hidden, 8.0).unwrap();
        let mlp = RanaMlp::new(up.clone().into(), Some(gate.clone().into()), w.down.clone(), Some(dm.clone()), Activation::Silu).unwrap();
        for s in 0..20 {
            let x = calib.sample(s);
            let bu = up.decomposition().project(&x).unwrap();
            let bg = gate.decomposition().project(&x).unwrap();
            let mu = match up.masker() { RankMasker::B(m) => m.apply(&bu), _ => unreachable!() };
            let mg = match gate.masker() { RankMasker::B(m) => m.apply(&bg), _ => unreachable!() };
            let u = up.decomposition().a().matvec(&mu.apply(&bu)).unwrap();
            let g = gate.decomposition().a().matvec(&mg.apply(&bg)).unwrap();
            let h: Vec<f64> = g.iter().zip(&u).map(|(a, b)| Activation::Silu.apply(*a) * b).collect();
            let want = w.down.matvec(&dm.apply(&h).apply(&h)).unwrap();
            assert!(max_diff(&mlp.forward(&x).unwrap(), &want) < 1e-10);
        }
    }

    #[test]
    fn relu_equivalence_examples() {
        let mut rng = seeded_rng(6);
        let up = Matrix::gaussian(10, 6, 1.0, &mut rng);
        let down = Matrix::gaussian(6, 10, 1.0, &mut rng);
        let c = build_relu_equivalent(&up, &down).unwrap();
        for _ in 0..50 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mask = Mask::from_bits((0..10).map(|_| rng.random::<bool>()).collect());
            let got = c.forward(&x, &mask).unwrap();
            assert!(max_diff(&got, &neuron_adapted_relu(&up, &down, &x, &mask).unwrap()) < 1e-12);
        }
        let x = vec![0.5; 6];
        let h: Vec<f64> = up.matvec(&x).unwrap().into_iter().map(|v| v.max(0.0)).collect();
        assert!(max_diff(&c.forward(&x, &Mask::ones(10)).unwrap(), &down.matvec(&h).unwrap()) < 1e-12);
        assert_eq!(c.forward(&x, &Mask::zeros(10)).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn cats_zero_threshold_is_dense() {
        let mut rng = seeded_rng(7);
        let w = swiglu(&mut rng, 6, 12);
        let cats = CatsMlp::with_threshold(&w, 0.0).unwrap();
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert!(max_diff(&cats.forward(&x).unwrap(), &w.forward(&x).unwrap()) < 1e-12);
    }

    #[test]
    fn cats_matches_zeroing_oracle() {
        let mut rng = seeded_rng(8);
        let w = swiglu(&mut rng, 8, 16);
        let calib = CalibrationSet::new(Matrix::gaussian(8, 200, 1.0, &mut rng));
        let cats = CatsMlp::calibrate(&w, &calib, 8.0).unwrap();
        assert!((cats.calibrated_mean_active - 8.0).abs() <= 0.16);
        for s in 0..20 {
            let x = calib.sample(s);
            let g: Vec<f64> = w.gate.as_ref().unwrap().matvec(&x).unwrap().into_iter().map(|v| Activation::Silu.apply(v)).collect();
            let u = w.up.matvec(&x).unwrap();
            let h: Vec<f64> = g.iter().zip(&u).map(|(gv, uv)| if gv.abs() >= cats.threshold { gv * uv } else { 0.0 }).collect();
            let mut tally = OpTally::default();
            let got = cats.forward_counted(&x, &mut tally).unwrap();
            assert!(max_diff(&got, &w.down.matvec(&h).unwrap()) < 1e-12);
            let e = g.iter().filter(|v| v.abs() >= cats.threshold).count() as f64;
            assert_eq!(tally.flops as f64, CatsMlp::flops(w.shape(), e).total());
        }
    }

    #[test]
    fn fixed_svd_full_rank_is_dense() {
        let mut rng = seeded_rng(9);
        let w = Matrix::gaussian(7, 5, 1.0, &mut rng);
        let calib = CalibrationSet::new(Matrix::gaussian(5, 20, 1.0, &mut rng));
        let f = FixedSvdLayer::new(&decompose(&w, &calib, 5).unwrap(), 5).unwrap();
        let x = calib.sample(3);
        let want = w.matvec(&x).unwrap();
        assert!(max_diff(&forward_baseline(&BaselineAdapter::FixedSvd(f), &x).unwrap(), &want) < 1e-8);
    }

    #[test]
    fn neuron_adapter_counts_and_hits_target() {
        let mut rng = seeded_rng(10);
        let w = swiglu(&mut rng, 8, 32);
        let calib = CalibrationSet::new(Matrix::gaussian(8, 300, 1.0, &mut rng));
        let inner = NeuronAdapterMlp::masker_inner(w.shape());
        let (na, report) = NeuronAdapterMlp::build(&w, &calib, 16.0, &TrainOptions { inner, epochs: 5, ..Default::default() }).unwrap();
        assert!(report.final_loss < report.initial_loss);
        assert!((na.calibrated_mean_active - 16.0).abs() <= 0.32);
        let x = calib.sample(0);
        let mut tally = OpTally::default();
        na.forward_counted(&x, &mut tally).unwrap();
        let e = na.masker.apply(&x).count_ones() as f64;
        assert_eq!(tally.flops as f64, NeuronAdapterMlp::flops(w.shape(), inner, e).total());
    }

    #[test]
    fn batch_forward_is_strategy_independent() {
        let mut rng = seeded_rng(11);
        let w = swiglu(&mut rng, 8, 16);
        let x = Matrix::gaussian(8, 64, 1.0, &mut rng);
        let a = forward_batch(&w, &x, Exec::Sequential).unwrap();
        let b = forward_batch(&w, &x, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }
}
