//! Dense row-major matrices and the numeric primitives the rest of the crate
//! builds on: products, a one-sided Jacobi thin SVD, a symmetric eigen solver
//! for the Gram-matrix route, and exact order-statistic quantiles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{RanaError, Result};
use crate::exec::Exec;

pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Row-major `f64` matrix. All entries are finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(RanaError::InvalidShape {
                rows,
                cols,
                expected: rows * cols,
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(RanaError::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor for buffers produced by finite arithmetic.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_raw(rows, cols, data)
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        Self::from_fn(n, n, |i, j| if i == j { values[i] } else { 0.0 })
    }

    /// Matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(RanaError::InvalidArgument("ragged columns".into()));
        }
        let mut data = vec![0.0; rows * cols];
        for (j, c) in columns.iter().enumerate() {
            for (i, &v) in c.iter().enumerate() {
                data[i * cols + j] = v;
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Self {
        Self::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// First `n` rows.
    pub fn top_rows(&self, n: usize) -> Matrix {
        let n = n.min(self.rows);
        Matrix::from_raw(n, self.cols, self.data[..n * self.cols].to_vec())
    }

    /// First `n` columns.
    pub fn left_cols(&self, n: usize) -> Matrix {
        let n = n.min(self.cols);
        Matrix::from_fn(self.rows, n, |i, j| self.get(i, j))
    }

    /// Columns selected by index, in the given order.
    pub fn select_cols(&self, idx: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, idx.len(), |i, j| self.get(i, idx[j]))
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(RanaError::ShapeMismatch {
                op: "sub",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        ))
    }

    /// Euclidean norm of each column.
    pub fn column_norms(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (a, v) in acc.iter_mut().zip(self.row(i)) {
                *a += v * v;
            }
        }
        acc.into_iter().map(f64::sqrt).collect()
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(RanaError::ShapeMismatch {
                op: "matvec",
                left: self.shape(),
                right: (x.len(), 1),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `selfᵀ · x`.
    pub fn t_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(RanaError::ShapeMismatch {
                op: "t_matvec",
                left: (self.cols, self.rows),
                right: (x.len(), 1),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.row(i)) {
                *o += xi * w;
            }
        }
        Ok(out)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matmul_with(a, b, Exec::default())
}

/// Row-major product. Each output row accumulates `a[i,p] * b[p,:]` for `p`
/// in increasing order, so every entry is summed in the same order as the
/// textbook triple loop regardless of `exec`.
pub fn matmul_with(a: &Matrix, b: &Matrix, exec: Exec) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(RanaError::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, m) = (a.rows, b.cols);
    let mut out = vec![0.0; n * m];
    let exec = if n * m * a.cols < 1 << 15 { Exec::Sequential } else { exec };
    exec.for_each_chunk(&mut out, m, |i, row| {
        for (p, &av) in a.row(i).iter().enumerate() {
            for (o, &bv) in row.iter_mut().zip(b.row(p)) {
                *o += av * bv;
            }
        }
    });
    Ok(Matrix::from_raw(n, m, out))
}

/// Thin SVD `M = U · diag(S) · Vt` with `p = min(rows, cols)`.
#[derive(Clone, Debug)]
pub struct Svd {
    /// rows × p, orthonormal columns.
    pub u: Matrix,
    /// p singular values, descending.
    pub s: Vec<f64>,
    /// p × cols, orthonormal rows.
    pub vt: Matrix,
}

impl Svd {
    pub fn reconstruct(&self, rank: usize) -> Matrix {
        let r = rank.min(self.s.len());
        let (rows, cols) = (self.u.rows, self.vt.cols);
        let mut out = Matrix::zeros(rows, cols);
        for j in 0..r {
            let s = self.s[j];
            for i in 0..rows {
                let us = self.u.get(i, j) * s;
                let row = &mut out.data[i * cols..(i + 1) * cols];
                for (o, v) in row.iter_mut().zip(self.vt.row(j)) {
                    *o += us * v;
                }
            }
        }
        out
    }
}

const MAX_SWEEPS: usize = 80;

/// One-sided (Hestenes) Jacobi SVD.
///
/// Works on the taller orientation so rotations act on `min(rows, cols)`
/// vectors. Singular vectors for numerically zero singular values are
/// completed to an orthonormal set. Each column of `U` is signed so that its
/// first component with magnitude above 1e-12 is positive.
pub fn thin_svd(m: &Matrix) -> Result<Svd> {
    let mut svd = if m.rows >= m.cols {
        svd_tall(m)?
    } else {
        let t = svd_tall(&m.transpose())?;
        Svd {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        }
    };
    canonicalize_signs(&mut svd);
    Ok(svd)
}

fn svd_tall(m: &Matrix) -> Result<Svd> {
    let (len, n) = (m.rows, m.cols);
    // g[j] is column j of M, contiguous.
    let mut g: Vec<Vec<f64>> = (0..n).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let tol = f64::EPSILON * (len as f64).sqrt();
    // Columns below rounding level of ‖M‖ carry no signal and would rotate forever.
    let floor = f64::EPSILON * f64::EPSILON * m.frobenius_sq();

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = norm_sq(&g[p]);
                let beta = norm_sq(&g[q]);
                let gamma = dot(&g[p], &g[q]);
                if gamma == 0.0 || alpha <= floor || beta <= floor || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + 1f64.hypot(zeta));
                let c = 1.0 / 1f64.hypot(t);
                let s = c * t;
                rotate_pair(&mut g, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(RanaError::SvdNotConverged { iterations: MAX_SWEEPS });
    }

    let sigma: Vec<f64> = g.iter().map(|c| norm_sq(c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));

    let s_max = sigma[order[0]];
    let zero_tol = s_max * f64::EPSILON * len as f64;
    let mut u_cols: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&j| {
            let sj = sigma[j];
            (sj > zero_tol && sj > 0.0).then(|| g[j].iter().map(|x| x / sj).collect())
        })
        .collect();
    complete_orthonormal(&mut u_cols, len);

    let u_cols: Vec<Vec<f64>> = u_cols.into_iter().map(|c| c.expect("completed")).collect();
    let u = Matrix::from_columns(&u_cols)?;
    let s: Vec<f64> = order.iter().map(|&j| sigma[j]).collect();
    let vt = Matrix::from_fn(n, n, |r, c| v[order[r]][c]);
    Ok(Svd { u, s, vt })
}

fn rotate_pair(vecs: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = vecs.split_at_mut(q);
    let (a, b) = (&mut lo[p], &mut hi[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills the `None` slots with unit vectors orthogonal to every other slot.
/// Each slot takes the coordinate vector with the largest residual after projection.
fn complete_orthonormal(cols: &mut [Option<Vec<f64>>], len: usize) {
    for slot in 0..cols.len() {
        if cols[slot].is_some() {
            continue;
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for candidate in 0..len {
            let mut w = vec![0.0; len];
            w[candidate] = 1.0;
            // Two passes of Gram-Schmidt against everything already placed.
            for _ in 0..2 {
                for u in cols.iter().flatten() {
                    let d = dot(u, &w);
                    for (wi, ui) in w.iter_mut().zip(u) {
                        *wi -= d * ui;
                    }
                }
            }
            let nrm = norm_sq(&w).sqrt();
            if best.as_ref().is_none_or(|(b, _)| nrm > *b) {
                best = Some((nrm, w));
            }
        }
        let (nrm, mut w) = best.expect("len > 0");
        w.iter_mut().for_each(|x| *x /= nrm);
        cols[slot] = Some(w);
    }
}

fn canonicalize_signs(svd: &mut Svd) {
    let p = svd.s.len();
    for j in 0..p {
        let lead = (0..svd.u.rows)
            .map(|i| svd.u.get(i, j))
            .find(|v| v.abs() > 1e-12)
            .unwrap_or(0.0);
        if lead < 0.0 {
            for i in 0..svd.u.rows {
                let v = svd.u.get(i, j);
                svd.u.set(i, j, -v);
            }
            for c in 0..svd.vt.cols {
                let v = svd.vt.get(j, c);
                svd.vt.set(j, c, -v);
            }
        }
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns eigenvalues in descending order and the matching eigenvectors as columns.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if a.rows != a.cols {
        return Err(RanaError::ShapeMismatch {
            op: "symmetric_eigen",
            left: a.shape(),
            right: a.shape(),
        });
    }
    let n = a.rows;
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let floor = f64::EPSILON * f64::EPSILON * m.frobenius_sq();
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                let diag = (m.get(p, p) * m.get(q, q)).abs().sqrt();
                if apq.abs() <= f64::EPSILON * diag || apq * apq <= floor {
                    continue;
                }
                rotated = true;
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + 1f64.hypot(theta));
                let c = 1.0 / 1f64.hypot(t);
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m.get(k, p), m.get(k, q));
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let (mpk, mqk) = (m.get(p, k), m.get(q, k));
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(RanaError::SvdNotConverged { iterations: MAX_SWEEPS });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| m.get(b, b).total_cmp(&m.get(a, a)).then(a.cmp(&b)));
    let vals = order.iter().map(|&i| m.get(i, i)).collect();
    let vecs = v.select_cols(&order);
    Ok((vals, vecs))
}

/// Left singular vectors and singular values of a wide matrix through the
/// eigendecomposition of `M Mᵀ`.
///
/// This squares the condition number, so it returns `None` when the
/// estimated condition of the retained spectrum reaches `max_condition`;
/// callers then fall back to [`thin_svd`].
pub fn left_singular_gram(m: &Matrix, max_condition: f64) -> Result<Option<(Matrix, Vec<f64>)>> {
    let gram = matmul(m, &m.transpose())?;
    let (vals, vecs) = symmetric_eigen(&gram)?;
    let s: Vec<f64> = vals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let s_max = s[0];
    if s_max == 0.0 {
        return Ok(None);
    }
    let s_min = s
        .iter()
        .copied()
        .filter(|&x| x > 1e-12 * s_max)
        .fold(f64::INFINITY, f64::min);
    if s_max / s_min >= max_condition {
        return Ok(None);
    }
    let mut svd = Svd {
        u: vecs,
        vt: Matrix::zeros(s.len(), 1),
        s,
    };
    canonicalize_signs(&mut svd);
    Ok(Some((svd.u, svd.s)))
}

/// Smallest element `v` such that the fraction of elements `≤ v` is at least `q`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(RanaError::EmptyInput("quantile"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(RanaError::InvalidArgument(format!("quantile level {q} outside [0, 1]")));
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(RanaError::NonFinite { index });
    }
    let n = values.len();
    let nf = n as f64;
    let mut idx = ((q * nf).ceil() as usize).saturating_sub(1).min(n - 1);
    while idx > 0 && idx as f64 / nf >= q {
        idx -= 1;
    }
    while idx + 1 < n && (idx + 1) as f64 / nf < q {
        idx += 1;
    }
    Ok(select_nth(values, idx))
}

/// The `m`-th largest value (1-based). Keeping every element `≥` it keeps at
/// least `m` elements, and exactly `m` when there are no ties.
pub fn kth_largest(values: &[f64], m: usize) -> Result<f64> {
    if values.is_empty() {
        return Err(RanaError::EmptyInput("kth_largest"));
    }
    if m == 0 || m > values.len() {
        return Err(RanaError::InvalidArgument(format!(
            "rank {m} outside 1..={}",
            values.len()
        )));
    }
    Ok(select_nth(values, values.len() - m))
}

fn select_nth(values: &[f64], idx: usize) -> f64 {
    let mut buf = values.to_vec();
    let (_, v, _) = buf.select_nth_unstable_by(idx, f64::total_cmp);
    *v
}
