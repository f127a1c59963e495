//! Pointwise survey-weighted GLMs fit at every grid point at once.
//!
//! The design matrix is shared by all `L` grid points, so the Gaussian fit
//! needs a single QR factorization of `W^{1/2} X` followed by one
//! application of `Q'` to the whole `n × L` outcome block. Non-Gaussian fits
//! run IRLS over all still-active grid points together: the survey-weighted
//! cross products of `X` are formed once and every iteration assembles the
//! `L` working Gram matrices with a single matrix product.

use nalgebra::{DMatrix, DVector};

use crate::data::FunctionalDesignDataset;
use crate::error::{Error, Result};
use crate::family::{GlmFamily, BERNOULLI_ETA_LIMIT};

const POISSON_ETA_LIMIT: f64 = 50.0;
/// Relative size of an `R` diagonal entry below which the design is singular.
const RANK_TOL: f64 = 1e-10;

/// Unsmoothed coefficient functions, one column per grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCoefficientMatrix {
    /// `P × L`.
    pub beta: DMatrix<f64>,
    pub converged: Vec<bool>,
    pub iterations: Vec<usize>,
}

impl RawCoefficientMatrix {
    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|&c| c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IrlsOptions {
    /// Per-column relative change in coefficients that counts as converged.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 50,
        }
    }
}

/// Fits the dataset's outcomes under weights `w` (not necessarily the
/// dataset's own), dispatching on family.
pub fn fit_pointwise(
    ds: &FunctionalDesignDataset,
    w: &[f64],
    family: GlmFamily,
    opts: IrlsOptions,
) -> Result<RawCoefficientMatrix> {
    if family.is_gaussian() {
        fit_pointwise_gaussian(ds, w)
    } else {
        fit_pointwise_irls(ds, w, family, opts)
    }
}

pub fn fit_pointwise_gaussian(ds: &FunctionalDesignDataset, w: &[f64]) -> Result<RawCoefficientMatrix> {
    gaussian_wls(ds.covariates(), ds.outcomes(), w, ds.covariate_names())
}

pub fn fit_pointwise_irls(
    ds: &FunctionalDesignDataset,
    w: &[f64],
    family: GlmFamily,
    opts: IrlsOptions,
) -> Result<RawCoefficientMatrix> {
    irls(ds.covariates(), ds.outcomes(), w, family, opts, ds.covariate_names())
}

fn check_weights(w: &[f64], n: usize) -> Result<()> {
    if w.len() != n {
        return Err(Error::Parameter(format!("{} weights for {n} rows", w.len())));
    }
    let bad: Vec<usize> = w
        .iter()
        .enumerate()
        .filter(|(_, v)| !(v.is_finite() && **v >= 0.0))
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        return Err(Error::validation("fit weights must be finite and nonnegative", bad));
    }
    Ok(())
}

fn scale_rows(m: &DMatrix<f64>, s: &[f64]) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        for (v, f) in col.iter_mut().zip(s) {
            *v *= f;
        }
    }
    out
}

fn column_name(names: &[String], j: usize) -> String {
    names.get(j).cloned().unwrap_or_else(|| format!("x{j}"))
}

/// QR of `W^{1/2} X`, failing on the first pivot that collapses.
fn weighted_qr(x: &DMatrix<f64>, sqrt_w: &[f64], names: &[String]) -> Result<nalgebra::QR<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    let p = x.ncols();
    if x.nrows() < p {
        return Err(Error::SingularDesign {
            column: x.nrows(),
            name: column_name(names, x.nrows()),
        });
    }
    let qr = scale_rows(x, sqrt_w).qr();
    let r = qr.r();
    let col_norms: Vec<f64> = (0..p)
        .map(|j| x.column(j).iter().zip(sqrt_w).map(|(v, s)| (v * s).powi(2)).sum::<f64>().sqrt())
        .collect();
    let scale = col_norms.iter().cloned().fold(0.0, f64::max);
    for j in 0..p {
        let d = r[(j, j)].abs();
        if !(d > RANK_TOL * scale.max(f64::MIN_POSITIVE)) || !(d > RANK_TOL * col_norms[j]) {
            return Err(Error::SingularDesign {
                column: j,
                name: column_name(names, j),
            });
        }
    }
    Ok(qr)
}

/// Batched weighted least squares `B = R^{-1} Q' W^{1/2} Y` with
/// `W^{1/2} X = QR` (thin `Q`).
pub fn gaussian_wls(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    w: &[f64],
    names: &[String],
) -> Result<RawCoefficientMatrix> {
    let n = x.nrows();
    let p = x.ncols();
    check_weights(w, n)?;
    if y.nrows() != n {
        return Err(Error::Parameter(format!("{} outcome rows for {n} design rows", y.nrows())));
    }
    let sqrt_w: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let qr = weighted_qr(x, &sqrt_w, names)?;
    // (W^{1/2} Q)' Y in one product, without a weighted copy of Y
    let qw = scale_rows(&qr.q(), &sqrt_w);
    let mut beta = qw.tr_mul(y);
    let r = qr.r();
    if !r.solve_upper_triangular_mut(&mut beta) {
        return Err(Error::SingularDesign {
            column: p - 1,
            name: column_name(names, p - 1),
        });
    }
    let l = y.ncols();
    Ok(RawCoefficientMatrix {
        beta,
        converged: vec![true; l],
        iterations: vec![1; l],
    })
}

/// Index pairs `(j, k)`, `j <= k`, of the packed upper triangle.
fn packed_pairs(p: usize) -> Vec<(usize, usize)> {
    (0..p).flat_map(|j| (j..p).map(move |k| (j, k))).collect()
}

/// Batched IRLS for the survey-weighted pseudo-likelihood.
///
/// Working weights are `w_i · (dμ/dη)² / V(μ)`. Columns that meet the
/// convergence rule are frozen; the rest keep iterating together.
pub fn irls(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    w: &[f64],
    family: GlmFamily,
    opts: IrlsOptions,
    names: &[String],
) -> Result<RawCoefficientMatrix> {
    if family.is_gaussian() {
        return gaussian_wls(x, y, w, names);
    }
    let n = x.nrows();
    let p = x.ncols();
    let l = y.ncols();
    check_weights(w, n)?;
    if y.nrows() != n {
        return Err(Error::Parameter(format!("{} outcome rows for {n} design rows", y.nrows())));
    }
    let bad: Vec<usize> = (0..n)
        .filter(|&i| w[i] > 0.0 && y.row(i).iter().any(|&v| !family.in_support(v)))
        .collect();
    if !bad.is_empty() {
        return Err(Error::validation(
            format!("outcomes outside the {family} support"),
            bad,
        ));
    }
    let sqrt_w: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    weighted_qr(x, &sqrt_w, names)?;

    let eta_limit = match family {
        GlmFamily::Bernoulli => BERNOULLI_ETA_LIMIT,
        _ => POISSON_ETA_LIMIT,
    };
    let pairs = packed_pairs(p);
    // survey-weighted cross products, reused by every iteration
    let mut xx_w = DMatrix::<f64>::zeros(n, pairs.len());
    for (q, &(j, k)) in pairs.iter().enumerate() {
        for i in 0..n {
            xx_w[(i, q)] = w[i] * x[(i, j)] * x[(i, k)];
        }
    }
    let x_w = scale_rows(x, w);

    let mut beta = DMatrix::<f64>::zeros(p, l);
    let mut eta = y.map(|v| family.link(family.initial_mu(v)));
    let mut converged = vec![false; l];
    let mut clamped = vec![false; l];
    let mut iterations = vec![0usize; l];
    let mut active: Vec<usize> = (0..l).collect();
    let mut first = true;

    for _ in 0..opts.max_iter {
        if active.is_empty() {
            break;
        }
        let la = active.len();
        let mut v = DMatrix::<f64>::zeros(n, la);
        let mut vz = DMatrix::<f64>::zeros(n, la);
        for (a, &col) in active.iter().enumerate() {
            for i in 0..n {
                let e = eta[(i, col)];
                let mu = family.inverse_link(e);
                let d = family.mu_eta(e);
                let wt = d * d / family.variance(mu);
                let z = e + (y[(i, col)] - mu) / d;
                v[(i, a)] = wt;
                vz[(i, a)] = wt * z;
            }
        }
        let gram = xx_w.tr_mul(&v);
        let rhs = x_w.tr_mul(&vz);

        let mut new_beta = DMatrix::<f64>::zeros(p, la);
        let mut solved = vec![true; la];
        let mut g = DMatrix::<f64>::zeros(p, p);
        for a in 0..la {
            for (q, &(j, k)) in pairs.iter().enumerate() {
                g[(j, k)] = gram[(q, a)];
                g[(k, j)] = gram[(q, a)];
            }
            match g.clone().cholesky() {
                Some(ch) => {
                    let sol = ch.solve(&DVector::from_iterator(p, rhs.column(a).iter().cloned()));
                    new_beta.set_column(a, &sol);
                }
                None => solved[a] = false,
            }
        }
        let new_eta = x * &new_beta;

        let mut still_active = Vec::with_capacity(la);
        for (a, &col) in active.iter().enumerate() {
            iterations[col] += 1;
            if !solved[a] {
                // working weights collapsed; keep the last iterate, unconverged
                continue;
            }
            let mut change: f64 = 0.0;
            for j in 0..p {
                let nb = new_beta[(j, a)];
                change = change.max((nb - beta[(j, col)]).abs() / (nb.abs() + 0.1));
                beta[(j, col)] = nb;
            }
            for i in 0..n {
                let mut e = new_eta[(i, a)];
                if e.abs() > eta_limit {
                    e = e.signum() * eta_limit;
                    if w[i] > 0.0 {
                        clamped[col] = true;
                    }
                }
                eta[(i, col)] = e;
            }
            if !first && change < opts.tol {
                converged[col] = true;
            } else {
                still_active.push(col);
            }
        }
        active = still_active;
        first = false;
    }
    for col in 0..l {
        if clamped[col] {
            converged[col] = false;
        }
    }
    Ok(RawCoefficientMatrix {
        beta,
        converged,
        iterations,
    })
}
