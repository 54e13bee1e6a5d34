//! Null-space machinery for the hard-constraint estimators.
//!
//! Every cell vector satisfying `L N = N··` can be written as `N₀ + C t`
//! (basis form) or `N₀ + P v` (projection form), where `C` spans `Null(L)` and
//! `P = C (C'C)⁻¹ C'`.  The basis here comes from a Householder QR of `L'`
//! with column pivoting; the trailing columns of `Q` are an orthonormal basis
//! of the null space.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ipf::{ipf_rake, IpfOptions};
use crate::table::{independence_init, CellTable, LoadingMatrix, MarginSet};

/// Basis `C` (J × d_null) of `Null(L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis {
    basis: DMatrix<f64>,
    rank: usize,
}

struct PivotedQr {
    reflectors: Vec<(usize, DVector<f64>, f64)>,
    rank: usize,
    n_rows: usize,
}

/// Householder QR with column pivoting of `a` (m × n).  Columns are pivoted
/// by largest remaining norm, ties broken by lowest index.
fn pivoted_qr(mut a: DMatrix<f64>) -> PivotedQr {
    let (m, n) = a.shape();
    let scale = (0..n).map(|c| a.column(c).norm()).fold(0.0, f64::max);
    let tol = (m.max(n) as f64) * f64::EPSILON * scale.max(1.0);
    let mut reflectors = Vec::new();
    let mut rank = 0;
    for k in 0..m.min(n) {
        let (mut best, mut best_norm) = (k, -1.0);
        for c in k..n {
            let norm = a.view((k, c), (m - k, 1)).norm();
            if norm > best_norm {
                best = c;
                best_norm = norm;
            }
        }
        if best_norm <= tol {
            break;
        }
        a.swap_columns(k, best);
        let mut v: DVector<f64> = a.view((k, k), (m - k, 1)).column(0).into_owned();
        let alpha = if v[0] >= 0.0 { -best_norm } else { best_norm };
        v[0] -= alpha;
        let vv = v.norm_squared();
        if vv == 0.0 {
            rank += 1;
            continue;
        }
        let beta = 2.0 / vv;
        for c in k..n {
            let mut col = a.view_mut((k, c), (m - k, 1));
            let dot = v.dot(&col.column(0));
            col.column_mut(0).axpy(-beta * dot, &v, 1.0);
        }
        reflectors.push((k, v, beta));
        rank += 1;
    }
    PivotedQr {
        reflectors,
        rank,
        n_rows: m,
    }
}

impl PivotedQr {
    /// Columns `rank..m` of `Q`.
    fn trailing_q(&self) -> DMatrix<f64> {
        let m = self.n_rows;
        let d = m - self.rank;
        let mut out = DMatrix::zeros(m, d);
        for (c, i) in (self.rank..m).enumerate() {
            let mut e = DVector::zeros(m);
            e[i] = 1.0;
            for (k, v, beta) in self.reflectors.iter().rev() {
                let mut seg = e.rows_mut(*k, m - k);
                let dot = v.dot(&seg);
                seg.axpy(-beta * dot, v, 1.0);
            }
            out.set_column(c, &e);
        }
        out
    }
}

/// Numerical rank of `L` from the same pivoted decomposition.
pub fn loading_rank(loading: &LoadingMatrix) -> usize {
    pivoted_qr(loading.to_dense().transpose()).rank
}

/// Orthonormal basis of `Null(L)`.  A full-column-rank `L` yields an empty
/// (J × 0) basis.
pub fn null_space_basis(loading: &LoadingMatrix) -> SubspaceBasis {
    let qr = pivoted_qr(loading.to_dense().transpose());
    SubspaceBasis {
        basis: qr.trailing_q(),
        rank: qr.rank,
    }
}

impl SubspaceBasis {
    /// Wraps a caller-supplied basis after checking `L C = 0`, column
    /// independence and that it spans the whole null space.
    pub fn from_matrix(basis: DMatrix<f64>, loading: &LoadingMatrix) -> Result<Self> {
        if basis.nrows() != loading.n_cols() {
            return Err(Error::DimensionMismatch {
                what: "basis rows",
                expected: loading.n_cols(),
                got: basis.nrows(),
            });
        }
        let rank = loading_rank(loading);
        let d_null = loading.n_cols() - rank;
        if basis.ncols() != d_null {
            return Err(Error::DimensionMismatch {
                what: "basis columns",
                expected: d_null,
                got: basis.ncols(),
            });
        }
        let out = Self { basis, rank };
        let resid = out.residual(loading);
        if resid > 1e-10 * out.basis.amax().max(1.0) {
            return Err(Error::InvalidInput(format!(
                "basis is not in the null space (max |LC| = {resid:e})"
            )));
        }
        if d_null > 0 && out.min_normalized_singular_value() <= 1e-10 {
            return Err(Error::RankDeficient);
        }
        Ok(out)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn d_null(&self) -> usize {
        self.basis.ncols()
    }

    pub fn n_cells(&self) -> usize {
        self.basis.nrows()
    }

    /// Rank of the loading matrix.
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// `max |L C|` entrywise.
    pub fn residual(&self, loading: &LoadingMatrix) -> f64 {
        let mut worst: f64 = 0.0;
        for c in 0..self.d_null() {
            let col: Vec<f64> = self.basis.column(c).iter().copied().collect();
            worst = loading
                .apply(&col)
                .iter()
                .fold(worst, |w, v| w.max(v.abs()));
        }
        worst
    }

    /// Smallest singular value after scaling every column to unit norm.
    pub fn min_normalized_singular_value(&self) -> f64 {
        if self.d_null() == 0 {
            return f64::INFINITY;
        }
        let mut c = self.basis.clone();
        for mut col in c.column_iter_mut() {
            let n = col.norm();
            if n > 0.0 {
                col /= n;
            }
        }
        c.singular_values().min()
    }

    /// `C t`.
    pub fn apply(&self, t: &[f64]) -> Vec<f64> {
        let t = DVector::from_column_slice(t);
        (&self.basis * t).iter().copied().collect()
    }

    /// `C' g`.
    pub fn apply_transpose(&self, g: &[f64]) -> Vec<f64> {
        let g = DVector::from_column_slice(g);
        self.basis.tr_mul(&g).iter().copied().collect()
    }

    /// Least-squares coordinates `t = (C'C)⁻¹ C' x`.
    pub fn coordinates(&self, x: &[f64]) -> Result<Vec<f64>> {
        let gram = self.basis.tr_mul(&self.basis);
        let chol = gram.cholesky().ok_or(Error::RankDeficient)?;
        let rhs = self.basis.tr_mul(&DVector::from_column_slice(x));
        Ok(chol.solve(&rhs).iter().copied().collect())
    }
}

/// Orthogonal projector onto `span(C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    p: DMatrix<f64>,
}

pub fn projection_matrix(basis: &SubspaceBasis) -> Result<ProjectionMatrix> {
    if basis.d_null() == 0 {
        return Err(Error::EmptyNullSpace);
    }
    let c = basis.matrix();
    let gram = c.tr_mul(c);
    let chol = gram.cholesky().ok_or(Error::RankDeficient)?;
    // P = C G⁻¹ C'
    let g_inv_ct = chol.solve(&c.transpose());
    let p = c * g_inv_ct;
    let p = (&p + p.transpose()) * 0.5;
    Ok(ProjectionMatrix { p })
}

impl ProjectionMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    /// `P v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(v);
        (&self.p * v).iter().copied().collect()
    }

    pub fn trace(&self) -> f64 {
        self.p.trace()
    }
}

/// A cell vector `N₀` known to reproduce the margins.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    counts: Vec<f64>,
}

impl Anchor {
    /// Checks `max |L N₀ - N··| ≤ 1e-8 · max(N, 1)`.
    pub fn new(counts: Vec<f64>, loading: &LoadingMatrix, margins: &MarginSet) -> Result<Self> {
        if counts.len() != loading.n_cols() {
            return Err(Error::DimensionMismatch {
                what: "anchor",
                expected: loading.n_cols(),
                got: counts.len(),
            });
        }
        let dev = loading
            .apply(&counts)
            .iter()
            .zip(margins.stacked())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if !(dev <= 1e-8 * margins.total().max(1.0)) {
            return Err(Error::InfeasibleAnchor(dev));
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }
}

/// A point of either solution subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspacePoint {
    pub counts: Vec<f64>,
    /// All entries nonnegative.
    pub feasible: bool,
}

impl SubspacePoint {
    fn new(counts: Vec<f64>) -> Self {
        let feasible = counts.iter().all(|&c| c >= 0.0);
        Self { counts, feasible }
    }
}

/// `N₀ + C t`.
pub fn basis_point(anchor: &Anchor, basis: &SubspaceBasis, t: &[f64]) -> Result<SubspacePoint> {
    if t.len() != basis.d_null() {
        return Err(Error::DimensionMismatch {
            what: "free vector t",
            expected: basis.d_null(),
            got: t.len(),
        });
    }
    if t.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("free vector must be finite".into()));
    }
    let offset = basis.apply(t);
    Ok(SubspacePoint::new(
        anchor
            .counts
            .iter()
            .zip(offset)
            .map(|(a, o)| a + o)
            .collect(),
    ))
}

/// `N₀ + P v`.
pub fn projection_point(
    anchor: &Anchor,
    projection: &ProjectionMatrix,
    v: &[f64],
) -> Result<SubspacePoint> {
    if v.len() != projection.dim() {
        return Err(Error::DimensionMismatch {
            what: "free vector v",
            expected: projection.dim(),
            got: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("free vector must be finite".into()));
    }
    let offset = projection.apply(v);
    Ok(SubspacePoint::new(
        anchor
            .counts
            .iter()
            .zip(offset)
            .map(|(a, o)| a + o)
            .collect(),
    ))
}

/// Default anchor: the raking fit when it converges, otherwise the
/// independence table.  A converged raking fit with zero cells is pulled
/// 10% of the way toward the independence table so the anchor sits strictly
/// inside the feasible region.
pub fn default_anchor(
    table: &CellTable,
    margins: &MarginSet,
    opts: &IpfOptions,
) -> Result<Vec<f64>> {
    let independent = independence_init(margins, table)?;
    let rake = match ipf_rake(table, margins, opts) {
        Ok(r) if r.converged => r.fitted,
        _ => return Ok(independent),
    };
    if rake.iter().all(|&v| v > 0.0) {
        return Ok(rake);
    }
    Ok(rake
        .iter()
        .zip(&independent)
        .map(|(r, i)| 0.9 * r + 0.1 * i)
        .collect())
}
