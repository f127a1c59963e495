//! P-spline smoothing of coefficient functions along the grid.
//!
//! Cubic B-splines on equally spaced knots over [0,1] with a difference
//! penalty on adjacent coefficients. With `B'B = LL'` and the eigen
//! decomposition `L^{-1} D'D L^{-T} = U Λ U'`, the smoother is
//! `S_λ = F diag(1/(1 + λΛ)) F'` with `F = B L^{-T} U` orthonormal, which
//! makes every GCV evaluation a cheap diagonal rescaling.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::data::normalize_grid;
use crate::error::{Error, Result};
use crate::glm::RawCoefficientMatrix;

const LOG10_LAMBDA_MIN: f64 = -10.0;
const LOG10_LAMBDA_MAX: f64 = 12.0;
const LOG10_LAMBDA_STEP: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Lambda {
    /// Chosen per coefficient by generalized cross-validation.
    Auto,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmootherSpec {
    /// Number of B-spline basis functions; `None` picks a default from `L`.
    pub basis_dim: Option<usize>,
    pub degree: usize,
    pub penalty_order: usize,
    pub lambda: Lambda,
}

impl Default for SmootherSpec {
    fn default() -> Self {
        Self {
            basis_dim: None,
            degree: 3,
            penalty_order: 2,
            lambda: Lambda::Auto,
        }
    }
}

/// Default basis size for a grid of `len` points: `min(L, 100)`. Knot
/// spacing must stay well below the width of the narrowest feature the
/// coefficient functions carry; GCV controls the effective smoothness.
pub fn default_basis_dim(len: usize) -> usize {
    len.min(100)
}

impl SmootherSpec {
    pub fn resolved_basis_dim(&self, len: usize) -> usize {
        self.basis_dim.unwrap_or_else(|| default_basis_dim(len))
    }

    fn validate(&self, len: usize) -> Result<usize> {
        let k = self.resolved_basis_dim(len);
        if k < self.penalty_order + 2 {
            return Err(Error::Smoother(format!(
                "basis dimension {k} must be at least penalty order + 2 = {}",
                self.penalty_order + 2
            )));
        }
        if k < self.degree + 1 {
            return Err(Error::Smoother(format!(
                "basis dimension {k} is too small for degree {}",
                self.degree
            )));
        }
        if k > len {
            return Err(Error::Smoother(format!(
                "basis dimension {k} exceeds the {len} grid points; use a basis of at most {len}"
            )));
        }
        if let Lambda::Fixed(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Smoother(format!("lambda must be nonnegative, got {l}")));
            }
        }
        Ok(k)
    }
}

/// B-spline basis of `n_basis` functions of the given degree on equally
/// spaced knots over [0,1], evaluated at `x` (`len(x) × n_basis`).
pub fn bspline_basis(x: &[f64], n_basis: usize, degree: usize) -> DMatrix<f64> {
    assert!(n_basis > degree, "need more basis functions than the degree");
    let intervals = n_basis - degree;
    let h = 1.0 / intervals as f64;
    let knots: Vec<f64> = (0..n_basis + degree + 1)
        .map(|j| (j as f64 - degree as f64) * h)
        .collect();
    let mut out = DMatrix::zeros(x.len(), n_basis);
    let mut vals = vec![0.0; degree + 1];
    for (row, &xv) in x.iter().enumerate() {
        // span index so that knots[span] <= x < knots[span + 1]
        let span = (((xv / h).floor() as isize).clamp(0, intervals as isize - 1) as usize) + degree;
        vals.iter_mut().for_each(|v| *v = 0.0);
        vals[0] = 1.0;
        // de Boor triangular recursion
        let mut left = vec![0.0; degree + 1];
        let mut right = vec![0.0; degree + 1];
        for d in 1..=degree {
            left[d] = xv - knots[span + 1 - d];
            right[d] = knots[span + d] - xv;
            let mut saved = 0.0;
            for r in 0..d {
                let tmp = vals[r] / (right[r + 1] + left[d - r]);
                vals[r] = saved + right[r + 1] * tmp;
                saved = left[d - r] * tmp;
            }
            vals[d] = saved;
        }
        for (r, v) in vals.iter().enumerate() {
            out[(row, span - degree + r)] = *v;
        }
    }
    out
}

/// Difference operator of the given order (`(k - order) × k`).
pub fn difference_matrix(k: usize, order: usize) -> DMatrix<f64> {
    let mut d = DMatrix::<f64>::identity(k, k);
    for _ in 0..order {
        let rows = d.nrows();
        d = DMatrix::from_fn(rows - 1, k, |i, j| d[(i + 1, j)] - d[(i, j)]);
    }
    d
}

/// Basis and penalty factorization for one grid, shared by all fits on it.
#[derive(Clone, Debug)]
pub struct SmootherBasis {
    grid: Vec<f64>,
    spec: SmootherSpec,
    basis: DMatrix<f64>,
    penalty: DMatrix<f64>,
    /// Orthonormal `L × K` factor of the smoother.
    factor: DMatrix<f64>,
    /// Penalty eigenvalues in the `factor` coordinates; null space exactly 0.
    eigenvalues: Vec<f64>,
}

impl SmootherBasis {
    pub fn new(grid: &[f64], spec: SmootherSpec) -> Result<Self> {
        let k = spec.validate(grid.len())?;
        let grid = normalize_grid(grid)?;
        let basis = bspline_basis(&grid, k, spec.degree);
        let penalty = difference_matrix(k, spec.penalty_order);
        let gram = basis.tr_mul(&basis);
        let chol = gram.cholesky().ok_or_else(|| {
            Error::Smoother(format!("basis of dimension {k} is not identifiable on this grid"))
        })?;
        let lower = chol.l();
        // M = L^{-1} D'D L^{-T}
        let dtd = penalty.tr_mul(&penalty);
        let mut a = dtd;
        if !lower.solve_lower_triangular_mut(&mut a) {
            return Err(Error::Smoother("singular basis Gram matrix".into()));
        }
        let mut m = a.transpose();
        if !lower.solve_lower_triangular_mut(&mut m) {
            return Err(Error::Smoother("singular basis Gram matrix".into()));
        }
        let m = (&m + m.transpose()) * 0.5;
        // The penalty null space (polynomials of degree < order in the
        // coefficient index) maps to L' N in these coordinates. Fixing it
        // explicitly keeps it exact when B'B is badly conditioned.
        let order = spec.penalty_order;
        let null = DMatrix::from_fn(k, order, |j, r| (j as f64 / (k - 1) as f64).powi(r as i32));
        let z = lower.transpose() * null;
        let q_full = {
            let qr = z.qr();
            let mut eye = DMatrix::<f64>::identity(k, k);
            qr.q_tr_mul(&mut eye);
            eye.transpose()
        };
        let q_range = q_full.columns(order, k - order).into_owned();
        let reduced = q_range.tr_mul(&m) * &q_range;
        let reduced = (&reduced + reduced.transpose()) * 0.5;
        let eig = reduced.symmetric_eigen();
        let mut idx: Vec<usize> = (0..k - order).collect();
        idx.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let mut eigenvalues = vec![0.0; order];
        eigenvalues.extend(idx.iter().map(|&i| eig.eigenvalues[i].max(0.0)));
        let rotated = &q_range * DMatrix::from_fn(k - order, k - order, |r, c| eig.eigenvectors[(r, idx[c])]);
        let mut u = DMatrix::<f64>::zeros(k, k);
        u.columns_mut(0, order).copy_from(&q_full.columns(0, order));
        u.columns_mut(order, k - order).copy_from(&rotated);
        // F = B L^{-T} U  <=>  F' = U' L^{-1} B'
        let mut bt = basis.transpose();
        if !lower.solve_lower_triangular_mut(&mut bt) {
            return Err(Error::Smoother("singular basis Gram matrix".into()));
        }
        let factor = (u.transpose() * bt).transpose();
        Ok(Self {
            grid,
            spec,
            basis,
            penalty,
            factor,
            eigenvalues,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn spec(&self) -> SmootherSpec {
        self.spec
    }

    /// B-spline basis evaluated on the grid.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn penalty(&self) -> &DMatrix<f64> {
        &self.penalty
    }

    pub fn basis_dim(&self) -> usize {
        self.basis.ncols()
    }

    fn shrinkage(&self, lambda: f64) -> Vec<f64> {
        self.eigenvalues.iter().map(|e| 1.0 / (1.0 + lambda * e)).collect()
    }

    /// Effective degrees of freedom `tr(S_λ)`.
    pub fn edf(&self, lambda: f64) -> f64 {
        self.shrinkage(lambda).iter().sum()
    }

    /// `S_λ y`.
    pub fn apply(&self, y: &[f64], lambda: f64) -> Vec<f64> {
        let yv = DVector::from_column_slice(y);
        let mut c = self.factor.tr_mul(&yv);
        for (ci, d) in c.iter_mut().zip(self.shrinkage(lambda)) {
            *ci *= d;
        }
        (&self.factor * c).iter().cloned().collect()
    }

    /// Generalized cross-validation score `L · RSS / (L - tr S_λ)²`.
    pub fn gcv(&self, y: &[f64], lambda: f64) -> f64 {
        let proj = ProjectedRow::new(self, y);
        proj.gcv(&self.eigenvalues, lambda)
    }

    /// GCV-minimizing λ: a grid search on log10 λ refined by golden section.
    pub fn select_lambda(&self, y: &[f64]) -> f64 {
        let proj = ProjectedRow::new(self, y);
        let score = |log_l: f64| proj.gcv(&self.eigenvalues, 10f64.powf(log_l));
        let steps = ((LOG10_LAMBDA_MAX - LOG10_LAMBDA_MIN) / LOG10_LAMBDA_STEP).round() as usize;
        let mut best = (LOG10_LAMBDA_MIN, f64::INFINITY);
        for s in 0..=steps {
            let ll = LOG10_LAMBDA_MIN + s as f64 * LOG10_LAMBDA_STEP;
            let g = score(ll);
            if g < best.1 {
                best = (ll, g);
            }
        }
        if !best.1.is_finite() {
            return 10f64.powf(LOG10_LAMBDA_MAX);
        }
        let mut lo = (best.0 - LOG10_LAMBDA_STEP).max(LOG10_LAMBDA_MIN);
        let mut hi = (best.0 + LOG10_LAMBDA_STEP).min(LOG10_LAMBDA_MAX);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut a = hi - phi * (hi - lo);
        let mut b = lo + phi * (hi - lo);
        let mut fa = score(a);
        let mut fb = score(b);
        for _ in 0..40 {
            if fa <= fb {
                hi = b;
                b = a;
                fb = fa;
                a = hi - phi * (hi - lo);
                fa = score(a);
            } else {
                lo = a;
                a = b;
                fa = fb;
                b = lo + phi * (hi - lo);
                fb = score(b);
            }
        }
        let (ll, g) = if fa <= fb { (a, fa) } else { (b, fb) };
        if g <= best.1 {
            10f64.powf(ll)
        } else {
            10f64.powf(best.0)
        }
    }
}

/// A row expressed in the smoother's orthonormal coordinates.
struct ProjectedRow {
    coords: Vec<f64>,
    /// Squared norm of the part of the row outside the basis span.
    outside: f64,
    len: usize,
}

impl ProjectedRow {
    fn new(basis: &SmootherBasis, y: &[f64]) -> Self {
        let yv = DVector::from_column_slice(y);
        let c = basis.factor.tr_mul(&yv);
        let resid = &yv - &basis.factor * &c;
        Self {
            coords: c.iter().cloned().collect(),
            outside: resid.norm_squared(),
            len: y.len(),
        }
    }

    fn gcv(&self, eigenvalues: &[f64], lambda: f64) -> f64 {
        let mut rss = self.outside;
        let mut tr = 0.0;
        for (c, e) in self.coords.iter().zip(eigenvalues) {
            let d = 1.0 / (1.0 + lambda * e);
            tr += d;
            rss += (c * (1.0 - d)).powi(2);
        }
        let n = self.len as f64;
        let denom = n - tr;
        if denom <= 1e-8 * n {
            return f64::INFINITY;
        }
        n * rss / (denom * denom)
    }
}

/// Smoothed coefficient functions and the λ used for each.
#[derive(Clone, Debug)]
pub struct SmoothedCoefficients {
    /// `P × L`.
    pub beta: DMatrix<f64>,
    pub lambdas: Vec<f64>,
    pub basis: Arc<SmootherBasis>,
}

/// Smooths every row of the raw coefficient matrix, choosing λ by GCV when
/// `spec.lambda` is `Auto`.
pub fn smooth_coefficients(
    raw: &RawCoefficientMatrix,
    grid: &[f64],
    spec: SmootherSpec,
) -> Result<SmoothedCoefficients> {
    if raw.beta.ncols() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "{} coefficient columns for a grid of {}",
            raw.beta.ncols(),
            grid.len()
        )));
    }
    let basis = Arc::new(SmootherBasis::new(grid, spec)?);
    let lambdas: Vec<f64> = match spec.lambda {
        Lambda::Fixed(l) => vec![l; raw.beta.nrows()],
        Lambda::Auto => (0..raw.beta.nrows())
            .map(|p| {
                let row: Vec<f64> = raw.beta.row(p).iter().cloned().collect();
                basis.select_lambda(&row)
            })
            .collect(),
    };
    smooth_with_fixed_lambda(raw, &lambdas, &basis)
}

/// Smooths each row `p` with the supplied `lambdas[p]` on a prebuilt basis.
pub fn smooth_with_fixed_lambda(
    raw: &RawCoefficientMatrix,
    lambdas: &[f64],
    basis: &Arc<SmootherBasis>,
) -> Result<SmoothedCoefficients> {
    let (p, l) = raw.beta.shape();
    if lambdas.len() != p {
        return Err(Error::Smoother(format!("{} lambdas for {p} coefficients", lambdas.len())));
    }
    if let Some(bad) = lambdas.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::Smoother(format!("lambda must be nonnegative, got {bad}")));
    }
    if l != basis.grid.len() {
        return Err(Error::GridMismatch(format!(
            "basis built for {} grid points, coefficients have {l}",
            basis.grid.len()
        )));
    }
    let mut beta = DMatrix::zeros(p, l);
    for (row, &lambda) in lambdas.iter().enumerate() {
        let y: Vec<f64> = raw.beta.row(row).iter().cloned().collect();
        let fitted = basis.apply(&y, lambda);
        for (col, v) in fitted.into_iter().enumerate() {
            beta[(row, col)] = v;
        }
    }
    Ok(SmoothedCoefficients {
        beta,
        lambdas: lambdas.to_vec(),
        basis: Arc::clone(basis),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::equispaced_grid;

    fn raw_from_rows(rows: &[Vec<f64>]) -> RawCoefficientMatrix {
        let l = rows[0].len();
        RawCoefficientMatrix {
            beta: DMatrix::from_fn(rows.len(), l, |p, c| rows[p][c]),
            converged: vec![true; l],
            iterations: vec![1; l],
        }
    }

    #[test]
    fn basis_is_partition_of_unity() {
        let x = equispaced_grid(101);
        let b = bspline_basis(&x, 12, 3);
        for r in 0..x.len() {
            let s: f64 = b.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
            assert!(b.row(r).iter().all(|v| *v >= -1e-15));
        }
    }

    #[test]
    fn difference_matrix_second_order() {
        let d = difference_matrix(5, 2);
        assert_eq!(d.shape(), (3, 5));
        assert_eq!(d.row(0).iter().cloned().collect::<Vec<_>>(), vec![1.0, -2.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn saturated_unpenalized_fit_interpolates() {
        let grid = equispaced_grid(20);
        let row: Vec<f64> = grid.iter().map(|s| (7.0 * s).sin() + s * s).collect();
        let spec = SmootherSpec {
            basis_dim: Some(20),
            lambda: Lambda::Fixed(0.0),
            ..SmootherSpec::default()
        };
        let out = smooth_coefficients(&raw_from_rows(&[row.clone()]), &grid, spec).unwrap();
        for (a, b) in out.beta.row(0).iter().zip(&row) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn heavy_penalty_gives_linear_fit() {
        let grid = equispaced_grid(60);
        let row: Vec<f64> = grid.iter().map(|s| (5.0 * s).cos() + 2.0 * s).collect();
        let spec = SmootherSpec {
            basis_dim: Some(15),
            lambda: Lambda::Fixed(1e12),
            ..SmootherSpec::default()
        };
        let out = smooth_coefficients(&raw_from_rows(&[row.clone()]), &grid, spec).unwrap();
        // least-squares line through the row
        let n = grid.len() as f64;
        let sx: f64 = grid.iter().sum();
        let sy: f64 = row.iter().sum();
        let sxx: f64 = grid.iter().map(|s| s * s).sum();
        let sxy: f64 = grid.iter().zip(&row).map(|(s, y)| s * y).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let icpt = (sy - slope * sx) / n;
        let max_dev = grid
            .iter()
            .zip(out.beta.row(0).iter())
            .map(|(s, f)| (f - (icpt + slope * s)).abs())
            .fold(0.0, f64::max);
        assert!(max_dev < 1e-4, "max deviation {max_dev}");
    }

    #[test]
    fn constants_are_preserved() {
        let grid = equispaced_grid(40);
        let spec = SmootherSpec {
            lambda: Lambda::Fixed(123.0),
            ..SmootherSpec::default()
        };
        let out = smooth_coefficients(&raw_from_rows(&[vec![2.5; 40]]), &grid, spec).unwrap();
        let dev = out.beta.iter().map(|v| (v - 2.5).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-10, "{dev}");
    }

    #[test]
    fn fixed_lambda_replays_gcv_choice() {
        let grid = equispaced_grid(50);
        let row: Vec<f64> = grid.iter().enumerate().map(|(i, s)| s.sin() + 0.01 * ((i * 7919) % 13) as f64).collect();
        let raw = raw_from_rows(&[row]);
        let first = smooth_coefficients(&raw, &grid, SmootherSpec::default()).unwrap();
        let again = smooth_with_fixed_lambda(&raw, &first.lambdas, &first.basis).unwrap();
        assert_eq!(first.beta, again.beta);
    }

    #[test]
    fn rows_are_smoothed_independently() {
        let grid = equispaced_grid(30);
        let a: Vec<f64> = grid.iter().map(|s| (9.0 * s).sin()).collect();
        let b: Vec<f64> = grid.iter().map(|s| s * s * s).collect();
        let basis = Arc::new(SmootherBasis::new(&grid, SmootherSpec::default()).unwrap());
        let both = smooth_with_fixed_lambda(&raw_from_rows(&[a.clone(), b.clone()]), &[0.5, 40.0], &basis).unwrap();
        let only_a = smooth_with_fixed_lambda(&raw_from_rows(&[a]), &[0.5], &basis).unwrap();
        let only_b = smooth_with_fixed_lambda(&raw_from_rows(&[b]), &[40.0], &basis).unwrap();
        assert_eq!(both.beta.row(0), only_a.beta.row(0));
        assert_eq!(both.beta.row(1), only_b.beta.row(0));
    }

    #[test]
    fn spec_errors() {
        let grid = equispaced_grid(10);
        let raw = raw_from_rows(&[vec![0.0; 10]]);
        let too_big = SmootherSpec {
            basis_dim: Some(12),
            ..SmootherSpec::default()
        };
        assert!(matches!(smooth_coefficients(&raw, &grid, too_big), Err(Error::Smoother(_))));
        let basis = Arc::new(SmootherBasis::new(&grid, SmootherSpec::default()).unwrap());
        assert!(matches!(
            smooth_with_fixed_lambda(&raw, &[-1.0], &basis),
            Err(Error::Smoother(_))
        ));
    }
}
