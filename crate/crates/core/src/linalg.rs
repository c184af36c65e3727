//! Dense helpers: SVD-based range/null-space splitting, constraint row
//! compression, and a block-tridiagonal solver with block-LU pivots.

use nalgebra::{DMatrix, DVector, LU};

use crate::error::{Result, SolverError};

/// Thin singular value decomposition `A = U diag(σ) Vᵀ` with `σ` sorted
/// descending; `U` is r×k and `V` is c×k for `k = min(r, c)`. Columns of `U`
/// belonging to zero singular values are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl Svd {
    /// One-sided Jacobi iteration. nalgebra's bidiagonal SVD returns wrong
    /// factors for some rank-deficient inputs, which is exactly where rank
    /// decisions matter here.
    pub fn new(a: &DMatrix<f64>) -> Self {
        let (r, c) = a.shape();
        if r < c {
            let t = Self::new(&a.transpose());
            return Self {
                u: t.v,
                singular_values: t.singular_values,
                v: t.u,
            };
        }
        let mut w = a.clone();
        let mut v = DMatrix::<f64>::identity(c, c);
        for _sweep in 0..80 {
            let mut rotated = false;
            for p in 0..c {
                for q in p + 1..c {
                    let alpha = w.column(p).norm_squared();
                    let beta = w.column(q).norm_squared();
                    let gamma = w.column(p).dot(&w.column(q));
                    if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let cs = 1.0 / (1.0 + t * t).sqrt();
                    let sn = cs * t;
                    rotate_columns(&mut w, p, q, cs, sn);
                    rotate_columns(&mut v, p, q, cs, sn);
                }
            }
            if !rotated {
                break;
            }
        }
        let norms: Vec<f64> = (0..c).map(|j| w.column(j).norm()).collect();
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
        let mut u = DMatrix::zeros(r, c);
        let mut vs = DMatrix::zeros(c, c);
        let mut sv = DVector::zeros(c);
        for (k, &j) in order.iter().enumerate() {
            sv[k] = norms[j];
            if norms[j] > 0.0 {
                u.column_mut(k).copy_from(&(w.column(j) / norms[j]));
            }
            vs.column_mut(k).copy_from(&v.column(j));
        }
        Self {
            u,
            singular_values: sv,
            v: vs,
        }
    }
}

fn rotate_columns(a: &mut DMatrix<f64>, p: usize, q: usize, cs: f64, sn: f64) {
    for i in 0..a.nrows() {
        let (x, y) = (a[(i, p)], a[(i, q)]);
        a[(i, p)] = cs * x - sn * y;
        a[(i, q)] = sn * x + cs * y;
    }
}

/// Orthonormal splitting of the control space induced by a constraint
/// Jacobian `Nu` (r×m): `py` spans range(Nuᵀ), `zw` spans null(Nu).
#[derive(Debug, Clone)]
pub struct RangeNullSplit {
    pub rank: usize,
    /// m×p.
    pub py: DMatrix<f64>,
    /// m×(m−p).
    pub zw: DMatrix<f64>,
    /// p×r pseudo-inverse of `Nu·py`.
    pub pinv: DMatrix<f64>,
    /// r×p orthonormal basis of range(Nu); the projector `Nu py (Nu py)†`
    /// equals `u_range u_rangeᵀ`.
    pub u_range: DMatrix<f64>,
}

impl RangeNullSplit {
    /// Singular values at or below `rank_tol · max(σ_max, scale)` count as
    /// zero, so `scale` sets the magnitude below which `Nu` is treated as
    /// round-off.
    pub fn new(nu: &DMatrix<f64>, rank_tol: f64, scale: f64) -> Self {
        let (r, m) = nu.shape();
        if r == 0 {
            return Self {
                rank: 0,
                py: DMatrix::zeros(m, 0),
                zw: DMatrix::identity(m, m),
                pinv: DMatrix::zeros(0, 0),
                u_range: DMatrix::zeros(0, 0),
            };
        }
        // Pad with zero rows so the SVD returns a full m×m right basis.
        let rows = r.max(m);
        let mut padded = DMatrix::zeros(rows, m);
        padded.view_mut((0, 0), (r, m)).copy_from(nu);
        let svd = Svd::new(&padded);
        let sv = &svd.singular_values;
        let u = &svd.u;
        let v = &svd.v;
        let rank = numerical_rank(sv.as_slice(), rank_tol, scale).min(r);
        let py = v.columns(0, rank).into_owned();
        let zw = v.columns(rank, m - rank).into_owned();
        let u_range = u.view((0, 0), (r, rank)).into_owned();
        let mut pinv = u_range.transpose();
        for i in 0..rank {
            pinv.row_mut(i).scale_mut(1.0 / sv[i]);
        }
        Self {
            rank,
            py,
            zw,
            pinv,
            u_range,
        }
    }

    /// `I − Nu py (Nu py)†` as an explicit r×r matrix.
    pub fn residual_projector(&self, r: usize) -> DMatrix<f64> {
        DMatrix::identity(r, r) - &self.u_range * self.u_range.transpose()
    }

    /// Applies the residual projector without forming it.
    pub fn project_residual(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        if self.rank == 0 {
            return a.clone();
        }
        a - &self.u_range * (self.u_range.tr_mul(a))
    }
}

/// Number of singular values above `rank_tol · max(σ_max, scale)`.
pub fn numerical_rank(sv: &[f64], rank_tol: f64, scale: f64) -> usize {
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax <= 0.0 || !smax.is_finite() {
        return 0;
    }
    let cut = rank_tol * smax.max(scale);
    sv.iter().filter(|&&s| s > cut).count()
}

/// Affine row set `Hx x + Hz z + h1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineRows {
    pub hx: DMatrix<f64>,
    pub hz: DMatrix<f64>,
    pub h1: DVector<f64>,
    /// Number of trailing rows with `[Hx Hz] = 0` but `h1 ≠ 0`.
    pub certificates: usize,
}

impl AffineRows {
    pub fn empty(n: usize) -> Self {
        Self {
            hx: DMatrix::zeros(0, n),
            hz: DMatrix::zeros(0, n),
            h1: DVector::zeros(0),
            certificates: 0,
        }
    }

    pub fn rows(&self) -> usize {
        self.h1.len()
    }

    pub fn eval(&self, x: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        &self.hx * x + &self.hz * z + &self.h1
    }

    /// Reduces the rows to a linearly independent set with the same solution
    /// set and the same least-squares residual norm up to a constant.
    ///
    /// Rows are left untouched when already independent. Otherwise they are
    /// rotated onto the leading left singular vectors of `[Hx Hz]`; a part of
    /// `h1` outside that range is kept as a single certificate row. Rank and
    /// certificate decisions are relative to `max(σ_max, scale)`.
    pub fn compress(self, rank_tol: f64, scale: f64) -> Self {
        let r = self.rows();
        let n = self.hx.ncols();
        if r == 0 {
            return self;
        }
        let mut joint = DMatrix::zeros(r, 2 * n);
        joint.view_mut((0, 0), (r, n)).copy_from(&self.hx);
        joint.view_mut((0, n), (r, n)).copy_from(&self.hz);
        let svd = Svd::new(&joint);
        let sv = &svd.singular_values;
        let rank = numerical_rank(sv.as_slice(), rank_tol, scale);
        if rank == r && self.certificates == 0 {
            return self;
        }
        let uq = svd.u.columns(0, rank);
        let rotated = uq.tr_mul(&joint);
        let h1q = uq.tr_mul(&self.h1);
        let residual = &self.h1 - uq * &h1q;
        let res_norm = residual.norm();
        let smax = if sv.is_empty() { 0.0 } else { sv[0] };
        let keep_cert = res_norm > rank_tol * scale.max(smax);
        let rows = rank + usize::from(keep_cert);
        let mut hx = DMatrix::zeros(rows, n);
        let mut hz = DMatrix::zeros(rows, n);
        let mut h1 = DVector::zeros(rows);
        hx.view_mut((0, 0), (rank, n)).copy_from(&rotated.columns(0, n));
        hz.view_mut((0, 0), (rank, n)).copy_from(&rotated.columns(n, n));
        h1.rows_mut(0, rank).copy_from(&h1q);
        if keep_cert {
            h1[rank] = res_norm;
        }
        Self {
            hx,
            hz,
            h1,
            certificates: usize::from(keep_cert),
        }
    }
}

fn pivot_is_singular(lu: &LU<f64, nalgebra::Dyn, nalgebra::Dyn>) -> bool {
    let u = lu.u();
    let diag = u.diagonal();
    if diag.is_empty() {
        return false;
    }
    let max = diag.amax();
    let min = diag.iter().fold(f64::INFINITY, |a, &b| a.min(b.abs()));
    !(max.is_finite() && min > 1e-14 * max && max > 0.0)
}

/// `A` with square diagonal blocks `diag[i]`, `lower[i] = A[i+1][i]` and
/// `upper[i] = A[i][i+1]`. Block sizes may vary.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTridiagonal {
    pub lower: Vec<DMatrix<f64>>,
    pub diag: Vec<DMatrix<f64>>,
    pub upper: Vec<DMatrix<f64>>,
}

impl BlockTridiagonal {
    pub fn new(lower: Vec<DMatrix<f64>>, diag: Vec<DMatrix<f64>>, upper: Vec<DMatrix<f64>>) -> Result<Self> {
        let nb = diag.len();
        if nb == 0 || lower.len() + 1 != nb || upper.len() + 1 != nb {
            return Err(SolverError::DimensionMismatch(format!(
                "block-tridiagonal with {nb} diagonal blocks needs {} off-diagonal blocks",
                nb.saturating_sub(1)
            )));
        }
        for (i, d) in diag.iter().enumerate() {
            if !d.is_square() {
                return Err(SolverError::DimensionMismatch(format!("diagonal block {i} is not square")));
            }
            if i + 1 < nb {
                let s = diag[i + 1].nrows();
                if upper[i].shape() != (d.nrows(), s) || lower[i].shape() != (s, d.nrows()) {
                    return Err(SolverError::DimensionMismatch(format!(
                        "off-diagonal blocks around {i} do not match the diagonal sizes"
                    )));
                }
            }
        }
        Ok(Self { lower, diag, upper })
    }

    pub fn num_blocks(&self) -> usize {
        self.diag.len()
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.diag.iter().map(|d| d.nrows()).collect()
    }

    pub fn dim(&self) -> usize {
        self.block_sizes().iter().sum()
    }

    /// `A X` for a block-partitioned `X`.
    pub fn mul(&self, x: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        let nb = self.num_blocks();
        (0..nb)
            .map(|i| {
                let mut y = &self.diag[i] * &x[i];
                if i > 0 {
                    y += &self.lower[i - 1] * &x[i - 1];
                }
                if i + 1 < nb {
                    y += &self.upper[i] * &x[i + 1];
                }
                y
            })
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let sizes = self.block_sizes();
        let offs: Vec<usize> = sizes
            .iter()
            .scan(0, |acc, &s| {
                let o = *acc;
                *acc += s;
                Some(o)
            })
            .collect();
        let dim = self.dim();
        let mut a = DMatrix::zeros(dim, dim);
        for i in 0..self.num_blocks() {
            a.view_mut((offs[i], offs[i]), (sizes[i], sizes[i])).copy_from(&self.diag[i]);
            if i + 1 < self.num_blocks() {
                a.view_mut((offs[i], offs[i + 1]), (sizes[i], sizes[i + 1]))
                    .copy_from(&self.upper[i]);
                a.view_mut((offs[i + 1], offs[i]), (sizes[i + 1], sizes[i]))
                    .copy_from(&self.lower[i]);
            }
        }
        a
    }

    /// Solves `A X = B` by block elimination without inter-block pivoting.
    pub fn solve(&self, rhs: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
        self.solve_with_last(rhs, |block, schur, r| {
            let lu = schur.clone().lu();
            if pivot_is_singular(&lu) {
                return Err(SolverError::FactorizationFailure { block });
            }
            lu.solve(r).ok_or(SolverError::FactorizationFailure { block })
        })
    }

    /// Block elimination where the final pivot system `S X_last = B'_last` is
    /// solved by `last(index, S, B'_last)`. The closure may return extra
    /// columns; those are carried through back substitution as homogeneous
    /// solutions (zero right-hand side in every other block).
    pub fn solve_with_last<F>(&self, rhs: &[DMatrix<f64>], last: F) -> Result<Vec<DMatrix<f64>>>
    where
        F: FnOnce(usize, &DMatrix<f64>, &DMatrix<f64>) -> Result<DMatrix<f64>>,
    {
        let nb = self.num_blocks();
        if rhs.len() != nb {
            return Err(SolverError::DimensionMismatch(format!(
                "right-hand side has {} blocks, system has {nb}",
                rhs.len()
            )));
        }
        let cols = rhs[0].ncols();
        for (i, b) in rhs.iter().enumerate() {
            if b.nrows() != self.diag[i].nrows() || b.ncols() != cols {
                return Err(SolverError::DimensionMismatch(format!("right-hand side block {i} has the wrong shape")));
            }
        }
        // Forward sweep: pivots[i] = LU of the Schur complement at block i,
        // gain[i] = pivot_i⁻¹ upper[i].
        let mut gains: Vec<DMatrix<f64>> = Vec::with_capacity(nb.saturating_sub(1));
        let mut elim: Vec<DMatrix<f64>> = Vec::with_capacity(nb);
        let mut schur = self.diag[0].clone();
        let mut b = rhs[0].clone();
        for i in 0..nb - 1 {
            let lu = schur.lu();
            if pivot_is_singular(&lu) {
                return Err(SolverError::FactorizationFailure { block: i });
            }
            let gain = lu
                .solve(&self.upper[i])
                .ok_or(SolverError::FactorizationFailure { block: i })?;
            let y = lu.solve(&b).ok_or(SolverError::FactorizationFailure { block: i })?;
            schur = &self.diag[i + 1] - &self.lower[i] * &gain;
            let next_b = &rhs[i + 1] - &self.lower[i] * &y;
            gains.push(gain);
            elim.push(y);
            b = next_b;
        }
        let x_last = last(nb - 1, &schur, &b)?;
        let total_cols = x_last.ncols();
        if x_last.nrows() != schur.nrows() || total_cols < cols {
            return Err(SolverError::DimensionMismatch("last-block solve returned a bad shape".into()));
        }
        let mut x = vec![DMatrix::zeros(0, 0); nb];
        x[nb - 1] = x_last;
        for i in (0..nb - 1).rev() {
            // y_i already holds pivot⁻¹ b'_i; extra columns have zero rhs.
            let mut xi = DMatrix::zeros(elim[i].nrows(), total_cols);
            xi.columns_mut(0, cols).copy_from(&elim[i]);
            xi -= &gains[i] * &x[i + 1];
            x[i] = xi;
        }
        Ok(x)
    }
}
