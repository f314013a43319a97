//! Activation-aware low-rank factorization of a linear layer.
//!
//! For a weight `W` (o×i) and calibration inputs `X` (i×k), `A` holds the
//! leading left singular vectors of `W X` and `B = Aᵀ W`. Truncating both to
//! the first `r` ranks gives the rank-`r` map minimizing `‖W X − M X‖_F²`,
//! with residual equal to the sum of the discarded squared singular values.
//!
//! Inputs are used as given; no normalization is applied to `X`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{RanaError, Result};
use crate::exec::Exec;
use crate::tensor::{self, matmul_with, seeded_rng, Matrix};

/// Calibration sample count used for full-size layers.
pub const DEFAULT_CALIBRATION_SAMPLES: usize = 32_000;

/// Singular values below this fraction of the largest are treated as zero.
pub const RANK_CUTOFF: f64 = 1e-12;

/// Layer inputs observed on calibration data, one sample per column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    x: Matrix,
}

impl CalibrationSet {
    pub fn new(x: Matrix) -> Self {
        Self { x }
    }

    /// Builds the set from per-sample vectors.
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        Ok(Self::new(Matrix::from_columns(samples)?))
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    /// Input width.
    pub fn dim(&self) -> usize {
        self.x.rows()
    }

    pub fn samples(&self) -> usize {
        self.x.cols()
    }

    pub fn sample(&self, s: usize) -> Vec<f64> {
        self.x.column(s)
    }

    /// Seeded shuffle of the columns, then a split with `train_fraction` of them first.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(CalibrationSet, CalibrationSet)> {
        let k = self.samples();
        let n_train = (train_fraction * k as f64).round() as usize;
        if n_train == 0 || n_train >= k {
            return Err(RanaError::InvalidArgument(format!(
                "split of {k} samples at {train_fraction} leaves an empty side"
            )));
        }
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut seeded_rng(seed));
        let (a, b) = order.split_at(n_train);
        Ok((Self::new(self.x.select_cols(a)), Self::new(self.x.select_cols(b))))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvdMethod {
    /// One-sided Jacobi on `W X`.
    #[default]
    Jacobi,
    /// Eigendecomposition of `(W X)(W X)ᵀ`; falls back to Jacobi when ill-conditioned.
    Gram,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[derive(Default)]
pub struct DecomposeOptions {
    /// Ranks to materialize; `None` keeps every numerically nonzero rank.
    pub keep_ranks: Option<usize>,
    pub method: SvdMethod,
    pub exec: Exec,
}


/// Condition bound under which the Gram route is trusted.
const GRAM_MAX_CONDITION: f64 = 1e6;

/// `W ≈ A B` with orthonormal `A` (o×D) and `B = Aᵀ W` (D×i).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankDecomposition {
    a: Matrix,
    b: Matrix,
    singular_values: Vec<f64>,
    /// Full spectrum of `W X`, including ranks beyond `D`.
    spectrum: Vec<f64>,
    weight: Matrix,
    /// Requested ranks dropped because their singular value was numerically zero.
    dropped_ranks: usize,
}

impl RankDecomposition {
    /// Rebuilds a decomposition from stored factors. `A` must be o×D with
    /// orthonormal columns (checked to 1e-8) and `B` D×i.
    pub fn from_factors(weight: Matrix, a: Matrix, b: Matrix, singular_values: Vec<f64>) -> Result<Self> {
        let (o, i) = weight.shape();
        let d = singular_values.len();
        if a.shape() != (o, d) {
            return Err(RanaError::ShapeMismatch { op: "from_factors_a", left: (o, d), right: a.shape() });
        }
        if b.shape() != (d, i) {
            return Err(RanaError::ShapeMismatch { op: "from_factors_b", left: (d, i), right: b.shape() });
        }
        let gram = tensor::matmul(&a.transpose(), &a)?;
        if gram.sub(&Matrix::identity(d))?.max_abs() > 1e-8 {
            return Err(RanaError::InvalidArgument("factor A does not have orthonormal columns".into()));
        }
        Ok(Self { a, b, spectrum: singular_values.clone(), singular_values, weight, dropped_ranks: 0 })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn kept(&self) -> usize {
        self.singular_values.len()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    /// `(o, i)` of the decomposed layer.
    pub fn source_shape(&self) -> (usize, usize) {
        self.weight.shape()
    }

    pub fn dropped_ranks(&self) -> usize {
        self.dropped_ranks
    }

    /// Keeps the first `d` ranks.
    pub fn truncated(&self, d: usize) -> Result<RankDecomposition> {
        if d == 0 || d > self.kept() {
            return Err(RanaError::InvalidArgument(format!("cannot truncate {} ranks to {d}", self.kept())));
        }
        Ok(RankDecomposition {
            a: self.a.left_cols(d),
            b: self.b.top_rows(d),
            singular_values: self.singular_values[..d].to_vec(),
            spectrum: self.spectrum.clone(),
            weight: self.weight.clone(),
            dropped_ranks: self.dropped_ranks,
        })
    }

    /// `B x`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.b.matvec(x)
    }

    /// `A (B x)`.
    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.a.matvec(&self.b.matvec(x)?)
    }

    /// `Σ_{j>r} σ_j²` of `W X`: the optimal rank-`r` residual.
    pub fn discarded_energy(&self, r: usize) -> f64 {
        self.spectrum.iter().skip(r).map(|s| s * s).sum()
    }
}

pub fn decompose(w: &Matrix, calib: &CalibrationSet, keep_ranks: usize) -> Result<RankDecomposition> {
    decompose_with(w, calib, DecomposeOptions { keep_ranks: Some(keep_ranks), ..Default::default() })
}

pub fn decompose_with(w: &Matrix, calib: &CalibrationSet, opts: DecomposeOptions) -> Result<RankDecomposition> {
    let (o, i) = w.shape();
    if calib.dim() != i {
        return Err(RanaError::ShapeMismatch { op: "decompose", left: w.shape(), right: calib.x().shape() });
    }
    let max_rank = o.min(i);
    let requested = opts.keep_ranks.unwrap_or(max_rank);
    if requested == 0 || requested > max_rank {
        return Err(RanaError::InvalidArgument(format!("keep_ranks {requested} outside 1..={max_rank}")));
    }
    if calib.x().max_abs() == 0.0 {
        return Err(RanaError::NoCalibrationSignal);
    }
    let wx = matmul_with(w, calib.x(), opts.exec)?;
    let (u, spectrum) = left_singular(&wx, opts.method)?;
    let s_max = spectrum[0];
    if s_max == 0.0 {
        return Err(RanaError::NoCalibrationSignal);
    }
    let numerical_rank = spectrum.iter().take_while(|&&s| s > RANK_CUTOFF * s_max).count();
    let d = requested.min(numerical_rank);
    let a = u.left_cols(d);
    let b = matmul_with(&a.transpose(), w, opts.exec)?;
    Ok(RankDecomposition {
        a,
        b,
        singular_values: spectrum[..d].to_vec(),
        spectrum,
        weight: w.clone(),
        dropped_ranks: requested - d,
    })
}

fn left_singular(wx: &Matrix, method: SvdMethod) -> Result<(Matrix, Vec<f64>)> {
    if method == SvdMethod::Gram {
        if let Some(found) = tensor::left_singular_gram(wx, GRAM_MAX_CONDITION)? {
            return Ok(found);
        }
    }
    let svd = tensor::thin_svd(wx)?;
    Ok((svd.u, svd.s))
}

/// Per-sample rank energies `(B x_s)_j²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContributionStats {
    /// D × k.
    contributions: Matrix,
    /// Mean over samples, per rank.
    mean_energy: Vec<f64>,
    /// `‖W x_s‖²` per sample.
    output_energy: Vec<f64>,
}

impl ContributionStats {
    pub fn contributions(&self) -> &Matrix {
        &self.contributions
    }

    pub fn ranks(&self) -> usize {
        self.contributions.rows()
    }

    pub fn samples(&self) -> usize {
        self.contributions.cols()
    }

    pub fn mean_energy(&self) -> &[f64] {
        &self.mean_energy
    }

    pub fn output_energy(&self) -> &[f64] {
        &self.output_energy
    }

    /// Every entry, rank-major.
    pub fn pooled(&self) -> &[f64] {
        self.contributions.as_slice()
    }

    /// Same samples restricted to the first `d` ranks.
    pub fn truncated(&self, d: usize) -> Result<ContributionStats> {
        if d == 0 || d > self.ranks() {
            return Err(RanaError::InvalidArgument(format!("cannot truncate {} ranks to {d}", self.ranks())));
        }
        Ok(ContributionStats {
            contributions: self.contributions.top_rows(d),
            mean_energy: self.mean_energy[..d].to_vec(),
            output_energy: self.output_energy.clone(),
        })
    }

    /// Column `s`: the energies of sample `s`.
    pub fn sample(&self, s: usize) -> Vec<f64> {
        self.contributions.column(s)
    }
}

pub fn rank_contributions(dec: &RankDecomposition, calib: &CalibrationSet) -> Result<ContributionStats> {
    rank_contributions_with(dec, calib, Exec::default())
}

pub fn rank_contributions_with(dec: &RankDecomposition, calib: &CalibrationSet, exec: Exec) -> Result<ContributionStats> {
    let bx = matmul_with(dec.b(), calib.x(), exec)?;
    let wx = matmul_with(dec.weight(), calib.x(), exec)?;
    let (d, k) = bx.shape();
    let contributions = Matrix::from_fn(d, k, |j, s| {
        let v = bx.get(j, s);
        v * v
    });
    let mean_energy = (0..d).map(|j| contributions.row(j).iter().sum::<f64>() / k as f64).collect();
    let mut output_energy = vec![0.0; k];
    for r in 0..wx.rows() {
        for (e, v) in output_energy.iter_mut().zip(wx.row(r)) {
            *e += v * v;
        }
    }
    Ok(ContributionStats { contributions, mean_energy, output_energy })
}

/// `‖W X − A_r B_r X‖_F²`, evaluated directly.
pub fn truncation_error(dec: &RankDecomposition, calib: &CalibrationSet, r: usize) -> Result<f64> {
    let t = dec.truncated(r)?;
    let x = calib.x();
    let wx = tensor::matmul(dec.weight(), x)?;
    let abx = tensor::matmul(t.a(), &tensor::matmul(t.b(), x)?)?;
    Ok(wx.sub(&abx)?.frobenius_sq())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;

    fn calib(x: Matrix) -> CalibrationSet {
        CalibrationSet::new(x)
    }

    #[test]
    fn identity_layer() {
        let dec = decompose(&Matrix::identity(2), &calib(Matrix::identity(2)), 2).unwrap();
        assert_eq!(dec.a(), &Matrix::identity(2));
        assert_eq!(dec.b(), &Matrix::identity(2));
    }

    #[test]
    fn diagonal_layer_rank_one() {
        let w = Matrix::diag(&[3.0, 1.0]);
        let c = calib(Matrix::identity(2));
        let dec = decompose(&w, &c, 1).unwrap();
        assert_eq!(dec.a().column(0), vec![1.0, 0.0]);
        assert_eq!(dec.b().row(0), &[3.0, 0.0]);
        assert!((truncation_error(&dec, &c, 1).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn orthonormal_a_and_b_matches_projection() {
        let mut rng = seeded_rng(4);
        let w = Matrix::gaussian(16, 12, 1.0, &mut rng);
        let c = calib(Matrix::gaussian(12, 64, 1.0, &mut rng));
        let dec = decompose(&w, &c, 12).unwrap();
        let ata = matmul(&dec.a().transpose(), dec.a()).unwrap();
        assert!(ata.sub(&Matrix::identity(12)).unwrap().max_abs() < 1e-8);
        let atw = matmul(&dec.a().transpose(), &w).unwrap();
        assert!(atw.sub(dec.b()).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn residual_equals_discarded_energy_and_is_monotone() {
        let mut rng = seeded_rng(5);
        let w = Matrix::gaussian(16, 12, 1.0, &mut rng);
        let c = calib(Matrix::gaussian(12, 64, 1.0, &mut rng));
        let dec = decompose(&w, &c, 12).unwrap();
        let mut last = f64::INFINITY;
        for r in 1..=12 {
            let err = truncation_error(&dec, &c, r).unwrap();
            let want = dec.discarded_energy(r);
            assert!((err - want).abs() <= 1e-8 * want.max(1e-300) || err < 1e-18, "r={r} {err} {want}");
            assert!(err <= last + 1e-12);
            last = err;
        }
    }

    #[test]
    fn zero_calibration_is_rejected() {
        let w = Matrix::identity(3);
        assert_eq!(decompose(&w, &calib(Matrix::zeros(3, 4)), 2).unwrap_err(), RanaError::NoCalibrationSignal);
    }

    #[test]
    fn too_many_ranks_is_rejected() {
        let w = Matrix::identity(3);
        assert!(decompose(&w, &calib(Matrix::identity(3)), 4).is_err());
    }

    #[test]
    fn rank_deficient_calibration_drops_ranks() {
        let mut rng = seeded_rng(6);
        let w = Matrix::gaussian(8, 8, 1.0, &mut rng);
        let c = calib(Matrix::gaussian(8, 3, 1.0, &mut rng));
        let dec = decompose(&w, &c, 8).unwrap();
        assert_eq!(dec.kept(), 3);
        assert_eq!(dec.dropped_ranks(), 5);
    }

    #[test]
    fn gram_route_agrees_with_jacobi() {
        let mut rng = seeded_rng(7);
        let w = Matrix::gaussian(10, 6, 1.0, &mut rng);
        let c = calib(Matrix::gaussian(6, 40, 1.0, &mut rng));
        let j = decompose(&w, &c, 6).unwrap();
        let g = decompose_with(&w, &c, DecomposeOptions { keep_ranks: Some(6), method: SvdMethod::Gram, ..Default::default() })
            .unwrap();
        for (a, b) in j.singular_values().iter().zip(g.singular_values()) {
            assert!((a - b).abs() < 1e-8 * a);
        }
        assert!(j.b().sub(g.b()).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn contributions_square_bx() {
        let dec = decompose(&Matrix::identity(2), &calib(Matrix::identity(2)), 2).unwrap();
        let c = CalibrationSet::from_samples(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        let stats = rank_contributions(&dec, &c).unwrap();
        assert_eq!(stats.sample(0), vec![9.0, 16.0]);
        assert_eq!(stats.sample(1), vec![0.0, 0.0]);
        assert_eq!(stats.mean_energy(), &[4.5, 8.0]);
    }

    #[test]
    fn contribution_columns_sum_to_reconstruction_energy() {
        let mut rng = seeded_rng(8);
        let w = Matrix::gaussian(12, 9, 1.0, &mut rng);
        let c = calib(Matrix::gaussian(9, 30, 1.0, &mut rng));
        let dec = decompose(&w, &c, 5).unwrap();
        let stats = rank_contributions(&dec, &c).unwrap();
        for s in 0..30 {
            let y = dec.reconstruct(&c.sample(s)).unwrap();
            let want = tensor::norm_sq(&y);
            let got: f64 = stats.sample(s).iter().sum();
            assert!((got - want).abs() <= 1e-9 * want.max(1.0));
        }
    }

    #[test]
    fn parallel_contributions_match_sequential() {
        let mut rng = seeded_rng(9);
        let w = Matrix::gaussian(40, 30, 1.0, &mut rng);
        let c = calib(Matrix::gaussian(30, 200, 1.0, &mut rng));
        let dec = decompose(&w, &c, 20).unwrap();
        let a = rank_contributions_with(&dec, &c, Exec::Sequential).unwrap();
        let b = rank_contributions_with(&dec, &c, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_partitions_columns() {
        let c = calib(Matrix::from_fn(2, 10, |i, j| (i * 10 + j) as f64));
        let (a, b) = c.split(0.8, 1).unwrap();
        assert_eq!((a.samples(), b.samples()), (8, 2));
        let mut seen: Vec<f64> = (0..8).map(|s| a.sample(s)[0]).chain((0..2).map(|s| b.sample(s)[0])).collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (0..10).map(|v| v as f64).collect::<Vec<_>>());
        assert_eq!(c.split(0.8, 1).unwrap(), (a, b));
    }
}
