//! Dense real matrices, a one-sided Jacobi SVD used as the exact reference,
//! and randomized truncated SVD for dimensionality reduction.
//!
//! The randomized factorization follows the usual range-finder recipe:
//! sketch the column space with a Gaussian test matrix, sharpen it with `q`
//! rounds of power iteration, orthonormalize, then take an exact SVD of the
//! small projected matrix `QᵀA` and lift its left vectors back through `Q`.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ingest::DatasetTable;
use crate::{Error, Result};

/// Largest `min(m, n)` accepted by [`svd_oracle`].
pub const ORACLE_MAX_DIM: usize = 512;

/// Relative column norm below which [`orthonormal_basis`] treats a column as
/// linearly dependent.
const RANK_TOL: f64 = 1e-12;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("matrix contains non-finite values".into()));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
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
        DenseMatrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("rows have different lengths".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Matrix whose columns are the given vectors.
    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Self {
        Self::from_fn(rows, columns.len(), |i, j| columns[j][i])
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let n = values.len();
        Self::from_fn(n, n, |i, j| if i == j { values[i] } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..self.cols).map(|j| self.column(j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        DenseMatrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn select_columns(&self, cols: &[usize]) -> Self {
        Self::from_fn(self.rows, cols.len(), |i, j| self.get(i, cols[j]))
    }

    /// Leading `k` columns.
    pub fn leading_columns(&self, k: usize) -> Self {
        Self::from_fn(self.rows, k, |i, j| self.get(i, j))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot subtract {:?} from {:?}",
                other.shape(),
                self.shape()
            )));
        }
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `self * diag(d)`.
    pub fn scale_columns(&self, d: &[f64]) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| self.get(i, j) * d[j])
    }
}

/// `a * b`, summed in a fixed i-k-j order so results are bit-reproducible.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        let acc = &mut out[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in acc.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(DenseMatrix {
        rows: a.rows,
        cols: b.cols,
        data: out,
    })
}

/// `aᵀ * b` without materializing the transpose.
pub fn transpose_matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply ({}x{})ᵀ by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = vec![0.0; a.cols * b.cols];
    for r in 0..a.rows {
        let brow = b.row(r);
        for (i, &ari) in a.row(r).iter().enumerate() {
            if ari == 0.0 {
                continue;
            }
            let acc = &mut out[i * b.cols..(i + 1) * b.cols];
            for (o, &brj) in acc.iter_mut().zip(brow) {
                *o += ari * brj;
            }
        }
    }
    Ok(DenseMatrix {
        rows: a.cols,
        cols: b.cols,
        data: out,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Removes from `v` its components along every vector in `basis` (twice, for
/// stability). Returns the remaining norm.
fn project_out(v: &mut [f64], basis: &[Vec<f64>]) -> f64 {
    for _ in 0..2 {
        for q in basis {
            let c = dot(v, q);
            for (x, y) in v.iter_mut().zip(q) {
                *x -= c * y;
            }
        }
    }
    norm(v)
}

/// Orthonormal basis for the column space of `y` by modified Gram-Schmidt
/// with reorthogonalization. Columns that are numerically dependent on
/// earlier ones are dropped, so the result may be narrower than `y`.
pub fn orthonormal_basis(y: &DenseMatrix) -> Result<DenseMatrix> {
    if y.cols == 0 {
        return Err(Error::InvalidArgument("matrix has no columns".into()));
    }
    if y.rows < y.cols {
        return Err(Error::Shape(format!(
            "need at least as many rows as columns, got {}x{}",
            y.rows, y.cols
        )));
    }
    let columns = y.columns();
    let scale = columns.iter().map(|c| norm(c)).fold(0.0, f64::max);
    if scale == 0.0 {
        return Err(Error::Numeric("rank zero".into()));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(y.cols);
    for mut col in columns {
        let residual = project_out(&mut col, &basis);
        if residual > RANK_TOL * scale {
            col.iter_mut().for_each(|x| *x /= residual);
            basis.push(col);
        }
    }
    Ok(DenseMatrix::from_columns(y.rows, &basis))
}

/// Extends orthonormal `columns` (each of length `dim`) to `target` columns
/// using standard basis vectors.
fn complete_orthonormal(columns: &mut Vec<Vec<f64>>, dim: usize, target: usize) {
    let mut e = 0;
    while columns.len() < target && e < dim {
        let mut v = vec![0.0; dim];
        v[e] = 1.0;
        e += 1;
        let r = project_out(&mut v, columns);
        if r > 1e-6 {
            v.iter_mut().for_each(|x| *x /= r);
            columns.push(v);
        }
    }
}

/// Singular value decomposition `A ≈ U·diag(S)·Vᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    pub u: DenseMatrix,
    pub s: Vec<f64>,
    pub v: DenseMatrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn truncate(&self, k: usize) -> SvdFactors {
        let k = k.min(self.rank());
        SvdFactors {
            u: self.u.leading_columns(k),
            s: self.s[..k].to_vec(),
            v: self.v.leading_columns(k),
        }
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        let us = self.u.scale_columns(&self.s);
        matmul(&us, &self.v.transpose()).expect("factor shapes agree")
    }

    /// Writes `U.csv`, `S.csv` and `V.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, m: &DenseMatrix| -> Result<()> {
            let mut out = String::new();
            for i in 0..m.rows() {
                let line: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
                let _ = writeln!(out, "{}", line.join(","));
            }
            let path = dir.join(name);
            std::fs::write(&path, out).map_err(|e| Error::io(path, e))
        };
        write("U.csv", &self.u)?;
        write("S.csv", &DenseMatrix::from_fn(self.rank(), 1, |i, _| self.s[i]))?;
        write("V.csv", &self.v)
    }
}

/// Exact thin SVD by one-sided (Hestenes) Jacobi rotations. Intended as the
/// reference factorization for desk-sized matrices.
pub fn svd_oracle(a: &DenseMatrix) -> Result<SvdFactors> {
    let (m, n) = a.shape();
    if m.min(n) > ORACLE_MAX_DIM {
        return Err(Error::InvalidArgument(format!(
            "oracle SVD limited to min(m, n) <= {ORACLE_MAX_DIM}, got {m}x{n}"
        )));
    }
    if m.min(n) == 0 {
        return Err(Error::Shape("empty matrix".into()));
    }
    if m < n {
        let t = jacobi_tall(&a.transpose());
        return Ok(SvdFactors {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }
    Ok(jacobi_tall(a))
}

fn jacobi_tall(a: &DenseMatrix) -> SvdFactors {
    let (m, n) = a.shape();
    let mut cols = a.columns();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    const MAX_SWEEPS: usize = 80;
    let tol = f64::EPSILON * (m as f64).sqrt();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable: equal values keep iteration order
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));

    let smax = norms[order[0]];
    let cutoff = smax * f64::EPSILON * m.max(n) as f64;
    let mut s = Vec::with_capacity(n);
    let mut ucols = Vec::with_capacity(n);
    for &j in &order {
        let sigma = norms[j];
        if sigma > cutoff && sigma > 0.0 {
            ucols.push(cols[j].iter().map(|x| x / sigma).collect());
            s.push(sigma);
        } else {
            s.push(0.0);
        }
    }
    complete_orthonormal(&mut ucols, m, n);
    let vsorted: Vec<Vec<f64>> = order.iter().map(|&j| vcols[j].clone()).collect();
    SvdFactors {
        u: DenseMatrix::from_columns(m, &ucols),
        s,
        v: DenseMatrix::from_columns(n, &vsorted),
    }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Randomized SVD settings: target rank `k`, oversampling `p` (sketch width
/// `k + p`), power iterations `q` and the seed for the Gaussian sketch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RsvdConfig {
    pub k: usize,
    pub p: usize,
    pub q: usize,
    pub seed: u64,
}

impl Default for RsvdConfig {
    fn default() -> Self {
        RsvdConfig {
            k: 16,
            p: 10,
            q: 2,
            seed: 42,
        }
    }
}

impl RsvdConfig {
    pub fn sketch_width(&self) -> usize {
        self.k + self.p
    }

    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("target rank k must be at least 1".into()));
        }
        if self.sketch_width() > rows.min(cols) {
            return Err(Error::InvalidArgument(format!(
                "k + p = {} exceeds min(m, n) = {} for a {rows}x{cols} matrix",
                self.sketch_width(),
                rows.min(cols)
            )));
        }
        Ok(())
    }
}

/// Rank-`k` randomized SVD.
///
/// Power iteration re-orthonormalizes after every product with `A` and `Aᵀ`,
/// which spans the same space as `(AAᵀ)^q AΩ` without the loss of small
/// directions to round-off.
pub fn randomized_svd(a: &DenseMatrix, cfg: &RsvdConfig) -> Result<SvdFactors> {
    let (m, n) = a.shape();
    cfg.validate(m, n)?;
    let width = cfg.sketch_width();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let omega = DenseMatrix::from_fn(n, width, |_, _| StandardNormal.sample(&mut rng));

    let mut q = orthonormal_basis(&matmul(a, &omega)?)?;
    for _ in 0..cfg.q {
        let z = orthonormal_basis(&transpose_matmul(a, &q)?)?;
        q = orthonormal_basis(&matmul(a, &z)?)?;
    }

    let b = transpose_matmul(&q, a)?;
    let small = svd_oracle(&b)?;
    let u = matmul(&q, &small.u)?;

    let keep = cfg.k.min(small.rank());
    let mut ucols = u.leading_columns(keep).columns();
    let mut vcols = small.v.leading_columns(keep).columns();
    let mut s = small.s[..keep].to_vec();
    if keep < cfg.k {
        // sketch collapsed below k: pad with zero singular triplets
        complete_orthonormal(&mut ucols, m, cfg.k);
        complete_orthonormal(&mut vcols, n, cfg.k);
        s.resize(cfg.k, 0.0);
    }
    Ok(SvdFactors {
        u: DenseMatrix::from_columns(m, &ucols),
        s,
        v: DenseMatrix::from_columns(n, &vcols),
    })
}

/// Replaces the table's features with their coordinates along `factors.v`.
pub fn project(table: &DatasetTable, factors: &SvdFactors) -> Result<DatasetTable> {
    if factors.v.rows() != table.n_cols() {
        return Err(Error::Shape(format!(
            "projection expects {} features, table has {}",
            factors.v.rows(),
            table.n_cols()
        )));
    }
    let features = matmul(table.features(), &factors.v)?;
    let names = (0..factors.v.cols()).map(|i| format!("svd_{i}")).collect();
    table.with_features(features, names)
}
