//! Masked matrix-vector kernel and a latency harness for it.
//!
//! `A (m ⊙ v)` only touches the columns of `A` whose mask bit is set, so the
//! matrix is kept column-major and each active column is one contiguous axpy.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{RanaError, Result};
use crate::flops::OpTally;
use crate::maskers::Mask;
use crate::tensor::{self, seeded_rng, Matrix};

/// Column-major copy of an `o × n` matrix prepared for masked GEMV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedGemv {
    rows: usize,
    cols: usize,
    col_major: Vec<f64>,
}

impl MaskedGemv {
    pub fn new(m: &Matrix) -> Self {
        let (rows, cols) = m.shape();
        let mut col_major = vec![0.0; rows * cols];
        for i in 0..rows {
            for (j, &v) in m.row(i).iter().enumerate() {
                col_major[j * rows + i] = v;
            }
        }
        Self { rows, cols, col_major }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn column(&self, j: usize) -> &[f64] {
        &self.col_major[j * self.rows..(j + 1) * self.rows]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| self.col_major[j * self.rows + i])
    }

    /// `Σ_{j: mask_j} v_j · M[:, j]`. Skipped columns are never read.
    pub fn apply(&self, mask: &Mask, v: &[f64], tally: &mut OpTally) -> Result<Vec<f64>> {
        if mask.len() != self.cols || v.len() != self.cols {
            return Err(RanaError::ShapeMismatch {
                op: "masked_gemv",
                left: (self.rows, self.cols),
                right: (v.len(), mask.len()),
            });
        }
        let mut y = vec![0.0; self.rows];
        for (j, (&on, &vj)) in mask.bits().iter().zip(v).enumerate() {
            if on {
                axpy(&mut y, vj, self.column(j));
                tally.column_reads += 1;
                tally.add(2 * self.rows);
            }
        }
        Ok(y)
    }

    /// Masked product over an explicit list of active columns, with `v`
    /// holding only the active entries in the same order.
    pub fn apply_indexed(&self, active: &[usize], v: &[f64], tally: &mut OpTally) -> Vec<f64> {
        debug_assert_eq!(active.len(), v.len());
        let mut y = vec![0.0; self.rows];
        for (&j, &vj) in active.iter().zip(v) {
            axpy(&mut y, vj, self.column(j));
        }
        tally.column_reads += active.len() as u64;
        tally.add(2 * self.rows * active.len());
        y
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn masked_gemv(m: &MaskedGemv, mask: &Mask, v: &[f64]) -> Result<Vec<f64>> {
    m.apply(mask, v, &mut OpTally::default())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Square matrix sizes.
    pub sizes: Vec<usize>,
    /// Mask densities in (0, 1]. Density 1.0 is always measured as the reference.
    pub densities: Vec<f64>,
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![1024, 4096],
            densities: vec![1.0, 0.5, 0.25, 0.1],
            repetitions: 30,
            warmup: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub size: usize,
    pub density: f64,
    pub median_ns: f64,
    pub p10_ns: f64,
    pub p90_ns: f64,
    /// Reference (density 1.0) median over this row's median.
    pub speedup: f64,
}

pub const BENCH_CSV_HEADER: &str = "size,density,median_ns,p10_ns,p90_ns,speedup";

/// Times the masked GEMV on the calling thread. Rows come out ordered by
/// size, then by density as given (with 1.0 first if it was not listed).
pub fn bench_masked_gemv(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.warmup < 10 {
        return Err(RanaError::InvalidArgument("benchmark needs at least 10 warmup iterations".into()));
    }
    if cfg.repetitions == 0 {
        return Err(RanaError::InvalidArgument("benchmark needs at least one repetition".into()));
    }
    if let Some(d) = cfg.densities.iter().find(|d| !(**d > 0.0 && **d <= 1.0)) {
        return Err(RanaError::InvalidArgument(format!("density {d} outside (0, 1]")));
    }
    let mut densities = cfg.densities.clone();
    if !densities.contains(&1.0) {
        densities.insert(0, 1.0);
    }

    let mut rng = seeded_rng(cfg.seed);
    let mut rows = Vec::new();
    for &n in &cfg.sizes {
        let m = MaskedGemv::new(&Matrix::gaussian(n, n, 1.0, &mut rng));
        let v: Vec<f64> = Matrix::gaussian(n, 1, 1.0, &mut rng).into_vec();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        let mut timings = Vec::with_capacity(densities.len());
        for &density in &densities {
            let active = ((density * n as f64).round() as usize).clamp(1, n);
            let mut bits = vec![false; n];
            order[..active].iter().for_each(|&j| bits[j] = true);
            let mask = Mask::from_bits(bits);
            let mut tally = OpTally::default();
            for _ in 0..cfg.warmup {
                std::hint::black_box(m.apply(&mask, &v, &mut tally)?);
            }
            let mut samples = Vec::with_capacity(cfg.repetitions);
            for _ in 0..cfg.repetitions {
                let start = Instant::now();
                std::hint::black_box(m.apply(&mask, std::hint::black_box(&v), &mut tally)?);
                samples.push(start.elapsed().as_nanos() as f64);
            }
            timings.push((density, samples));
        }
        let reference = tensor::quantile(&timings[densities.iter().position(|&d| d == 1.0).unwrap()].1, 0.5)?;
        for (density, samples) in timings {
            let median = tensor::quantile(&samples, 0.5)?;
            rows.push(BenchRow {
                size: n,
                density,
                median_ns: median,
                p10_ns: tensor::quantile(&samples, 0.1)?,
                p90_ns: tensor::quantile(&samples, 0.9)?,
                speedup: reference / median,
            });
        }
    }
    Ok(rows)
}

pub fn bench_rows_to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.size, r.density, r.median_ns, r.p10_ns, r.p90_ns, r.speedup
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn dense_on_masked(m: &Matrix, mask: &Mask, v: &[f64]) -> Vec<f64> {
        let masked: Vec<f64> = v.iter().zip(mask.bits()).map(|(x, &b)| if b { *x } else { 0.0 }).collect();
        m.matvec(&masked).unwrap()
    }

    #[test]
    fn full_mask_is_dense_gemv() {
        let mut rng = seeded_rng(1);
        let m = Matrix::gaussian(9, 7, 1.0, &mut rng);
        let v = Matrix::gaussian(7, 1, 1.0, &mut rng).into_vec();
        let got = masked_gemv(&MaskedGemv::new(&m), &Mask::ones(7), &v).unwrap();
        let want = m.matvec(&v).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn empty_mask_reads_nothing() {
        let m = MaskedGemv::new(&Matrix::identity(5));
        let mut tally = OpTally::default();
        let y = m.apply(&Mask::zeros(5), &[1.0; 5], &mut tally).unwrap();
        assert_eq!(y, vec![0.0; 5]);
        assert_eq!(tally, OpTally::default());
    }

    #[test]
    fn random_quarter_density_matches_oracle() {
        let mut rng = seeded_rng(2);
        let m = Matrix::gaussian(512, 512, 1.0, &mut rng);
        let plan = MaskedGemv::new(&m);
        let v = Matrix::gaussian(512, 1, 1.0, &mut rng).into_vec();
        let mask = Mask::from_bits((0..512).map(|_| rng.random::<f64>() < 0.25).collect());
        let mut tally = OpTally::default();
        let got = plan.apply(&mask, &v, &mut tally).unwrap();
        let want = dense_on_masked(&m, &mask, &v);
        let err = got.iter().zip(&want).fold(0.0f64, |e, (a, b)| e.max((a - b).abs()));
        assert!(err <= 1e-12, "{err}");
        assert_eq!(tally.column_reads, mask.count_ones() as u64);
        assert_eq!(tally.flops, 2 * 512 * mask.count_ones() as u64);
        // Bitwise deterministic.
        assert_eq!(got, plan.apply(&mask, &v, &mut OpTally::default()).unwrap());
    }

    #[test]
    fn shape_mismatch() {
        let m = MaskedGemv::new(&Matrix::identity(3));
        assert!(m.apply(&Mask::ones(2), &[1.0, 2.0], &mut OpTally::default()).is_err());
    }

    #[test]
    fn bench_reference_speedup_is_one() {
        let cfg = BenchConfig { sizes: vec![64], densities: vec![0.5], repetitions: 5, warmup: 10, seed: 3 };
        let rows = bench_masked_gemv(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].density, 1.0);
        assert_eq!(rows[0].speedup, 1.0);
        assert!(rows.iter().all(|r| r.p10_ns <= r.median_ns && r.median_ns <= r.p90_ns));
        let csv = bench_rows_to_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(bench_masked_gemv(&BenchConfig { warmup: 3, ..cfg }).is_err());
    }
}
