//! The full estimation pipeline and its confidence bands.
//!
//! 1. pointwise survey-weighted GLMs on the original weights,
//! 2. P-spline smoothing of each coefficient function (λ by GCV),
//! 3. refits under each replicate weight vector, smoothed with the
//!    original λ, giving replicate curves from which the pointwise
//!    standard errors and the CMA joint bands are computed.

use std::io::{Read, Write};
use std::sync::Arc;

use log::{debug, warn};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{format_float, summarize_design, FunctionalDesignDataset};
use crate::error::{Error, Result};
use crate::family::GlmFamily;
use crate::glm::{fit_pointwise, IrlsOptions, RawCoefficientMatrix};
use crate::resampling::{replicate_set, BootScheme, ReplicateRequest, StageProbabilities};
use crate::rng::{derive_seed, stream_rng};
use crate::smoothing::{smooth_coefficients, smooth_with_fixed_lambda, SmoothedCoefficients, SmootherSpec};

/// Eigenvalue floor applied to estimated correlation matrices.
pub const EIGEN_FLOOR: f64 = 1e-10;
const MC_BLOCK: usize = 2048;
const CMA_STREAM: u64 = 0xC3A;

/// Multiplier of the standard error in the pointwise band.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PointwiseMultiplier {
    /// `z_{1-α/2}`.
    Normal,
    /// A flat ±2 standard errors.
    TwoSd,
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub family: GlmFamily,
    pub scheme: BootScheme,
    pub n_replicates: usize,
    pub smoother: SmootherSpec,
    pub alpha: f64,
    pub seed: u64,
    pub mc_samples: usize,
    pub irls: IrlsOptions,
    pub pointwise: PointwiseMultiplier,
    /// Largest tolerated share of failed replicate fits.
    pub max_failure_rate: f64,
    /// RWYB bootstrap draws per stratum; `None` means `n_1 - 1`.
    pub m1: Option<usize>,
    /// Worker threads for replicate fitting; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Retain the replicate correlation matrix of each coefficient.
    pub keep_correlation: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            family: GlmFamily::Gaussian,
            scheme: BootScheme::Weighted,
            n_replicates: 100,
            smoother: SmootherSpec::default(),
            alpha: 0.05,
            seed: 1,
            mc_samples: 10_000,
            irls: IrlsOptions::default(),
            pointwise: PointwiseMultiplier::Normal,
            max_failure_rate: 0.05,
            m1: None,
            threads: None,
            keep_correlation: false,
        }
    }
}

/// Point estimates with pointwise and joint bands, all `P × L`.
#[derive(Clone, Debug)]
pub struct BandEstimate {
    pub coefficient_names: Vec<String>,
    /// Grid in input units.
    pub grid: Vec<f64>,
    pub beta_hat: DMatrix<f64>,
    pub se: DMatrix<f64>,
    pub pointwise_lo: DMatrix<f64>,
    pub pointwise_hi: DMatrix<f64>,
    pub cma_lo: DMatrix<f64>,
    pub cma_hi: DMatrix<f64>,
    /// Max-statistic quantile per coefficient.
    pub q: Vec<f64>,
    /// Pointwise multiplier used.
    pub z: f64,
    pub alpha: f64,
    /// Replicate correlation over the grid, per coefficient, when requested.
    pub corr: Option<Vec<DMatrix<f64>>>,
}

impl BandEstimate {
    pub fn n_coefficients(&self) -> usize {
        self.beta_hat.nrows()
    }

    pub fn n_grid(&self) -> usize {
        self.beta_hat.ncols()
    }
}

#[derive(Clone, Debug)]
pub struct SvyFosrFit {
    pub bands: BandEstimate,
    pub raw: RawCoefficientMatrix,
    pub smoothed: SmoothedCoefficients,
    /// Smoothed replicate curves, one `B_used × L` matrix per coefficient.
    pub replicate_curves: Vec<DMatrix<f64>>,
    pub n_requested: usize,
    pub n_failed: usize,
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Runs the pointwise fit, smoothing and replicate inference.
///
/// `probabilities` is required for the RWYB scheme only.
pub fn fit_svy_fosr(
    ds: &FunctionalDesignDataset,
    opts: &FitOptions,
    probabilities: Option<&StageProbabilities>,
) -> Result<SvyFosrFit> {
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha must lie in (0,1), got {}", opts.alpha)));
    }
    if opts.n_replicates < 2 {
        return Err(Error::Parameter("at least 2 replicates are needed".into()));
    }
    if opts.n_replicates < 50 {
        warn!("{} replicates requested; bands are unstable below 50", opts.n_replicates);
    }
    if 2 * opts.n_replicates < ds.n_grid() {
        warn!(
            "{} replicates for {} grid points; the replicate correlation is rank deficient",
            opts.n_replicates,
            ds.n_grid()
        );
    }
    match opts.threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t.max(1))
                .build()
                .map_err(|e| Error::Parameter(format!("cannot build thread pool: {e}")))?;
            pool.install(|| run_pipeline(ds, opts, probabilities))
        }
        None => run_pipeline(ds, opts, probabilities),
    }
}

fn run_pipeline(
    ds: &FunctionalDesignDataset,
    opts: &FitOptions,
    probabilities: Option<&StageProbabilities>,
) -> Result<SvyFosrFit> {
    let unit = vec![1.0; ds.n()];
    let point_weights: &[f64] = if opts.scheme.uses_survey_weights() { ds.weights() } else { &unit };
    let raw = fit_pointwise(ds, point_weights, opts.family, opts.irls)?;
    if !raw.all_converged() {
        warn!(
            "{} grid points did not converge in the full-sample fit",
            raw.converged.iter().filter(|c| !**c).count()
        );
    }
    let smoothed = smooth_coefficients(&raw, ds.grid(), opts.smoother)?;

    let design = summarize_design(ds);
    let set = replicate_set(
        ds,
        &design,
        ReplicateRequest {
            scheme: opts.scheme,
            n_replicates: opts.n_replicates,
            seed: opts.seed,
            probabilities,
            m1: opts.m1,
        },
    )?;

    let basis = Arc::clone(&smoothed.basis);
    let fits: Vec<Option<DMatrix<f64>>> = (0..set.len())
        .into_par_iter()
        .map(|b| {
            let w = set.fit_weights(b, ds.weights());
            match fit_pointwise(ds, &w, opts.family, opts.irls) {
                Ok(r) if r.all_converged() => smooth_with_fixed_lambda(&r, &smoothed.lambdas, &basis)
                    .ok()
                    .map(|s| s.beta),
                Ok(_) => None,
                Err(e) => {
                    debug!("replicate {b} failed: {e}");
                    None
                }
            }
        })
        .collect();
    let n_failed = fits.iter().filter(|f| f.is_none()).count();
    let total = fits.len();
    if n_failed as f64 > opts.max_failure_rate * total as f64 {
        return Err(Error::ReplicateFailures { failed: n_failed, total });
    }
    if n_failed > 0 {
        warn!("dropped {n_failed} of {total} replicate fits that failed");
    }
    let good: Vec<DMatrix<f64>> = fits.into_iter().flatten().collect();
    if good.len() < 2 {
        return Err(Error::ReplicateFailures { failed: n_failed, total });
    }
    let (p, l) = smoothed.beta.shape();
    let replicate_curves: Vec<DMatrix<f64>> = (0..p)
        .map(|j| DMatrix::from_fn(good.len(), l, |b, s| good[b][(j, s)]))
        .collect();

    let bands = build_bands(ds, &smoothed.beta, &replicate_curves, opts)?;
    Ok(SvyFosrFit {
        bands,
        raw,
        smoothed,
        replicate_curves,
        n_requested: total,
        n_failed,
    })
}

fn build_bands(
    ds: &FunctionalDesignDataset,
    beta_hat: &DMatrix<f64>,
    curves: &[DMatrix<f64>],
    opts: &FitOptions,
) -> Result<BandEstimate> {
    let (p, l) = beta_hat.shape();
    let z_normal = normal_quantile(1.0 - opts.alpha / 2.0);
    let z = match opts.pointwise {
        PointwiseMultiplier::Normal => z_normal,
        PointwiseMultiplier::TwoSd => 2.0,
    };
    let mut se = DMatrix::zeros(p, l);
    let mut q = Vec::with_capacity(p);
    let mut corr = Vec::new();
    for (j, reps) in curves.iter().enumerate() {
        for s in 0..l {
            se[(j, s)] = column_sd(reps, s);
        }
        let c = replicate_correlation(reps);
        let seed = derive_seed(opts.seed, &[CMA_STREAM, j as u64]);
        q.push(max_abs_quantile(&c, opts.alpha, opts.mc_samples, seed)?.max(z_normal));
        if opts.keep_correlation {
            corr.push(c);
        }
    }
    let band = |mult: &dyn Fn(usize) -> f64, sign: f64| {
        DMatrix::from_fn(p, l, |j, s| beta_hat[(j, s)] + sign * mult(j) * se[(j, s)])
    };
    let pointwise_lo = band(&|_| z, -1.0);
    let pointwise_hi = band(&|_| z, 1.0);
    let cma_lo = band(&|j| q[j], -1.0);
    let cma_hi = band(&|j| q[j], 1.0);
    Ok(BandEstimate {
        coefficient_names: ds.covariate_names().to_vec(),
        grid: ds.grid_labels().to_vec(),
        beta_hat: beta_hat.clone(),
        se,
        pointwise_lo,
        pointwise_hi,
        cma_lo,
        cma_hi,
        q,
        z,
        alpha: opts.alpha,
        corr: opts.keep_correlation.then_some(corr),
    })
}

fn column_sd(m: &DMatrix<f64>, col: usize) -> f64 {
    let b = m.nrows() as f64;
    let mean = m.column(col).sum() / b;
    let ss: f64 = m.column(col).iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (b - 1.0)).sqrt()
}

/// Correlation across grid points of `B × L` replicate curves. Grid points
/// with zero replicate variance are treated as uncorrelated with the rest.
pub fn replicate_correlation(reps: &DMatrix<f64>) -> DMatrix<f64> {
    let (b, l) = reps.shape();
    let mut centered = reps.clone();
    for mut col in centered.column_iter_mut() {
        let mean = col.sum() / b as f64;
        col.add_scalar_mut(-mean);
    }
    let cov = centered.tr_mul(&centered);
    let sd: Vec<f64> = (0..l).map(|s| cov[(s, s)].sqrt()).collect();
    DMatrix::from_fn(l, l, |r, c| {
        if r == c {
            1.0
        } else if sd[r] > 0.0 && sd[c] > 0.0 {
            (cov[(r, c)] / (sd[r] * sd[c])).clamp(-1.0, 1.0)
        } else {
            0.0
        }
    })
}

/// `(1 - α)` quantile of `max_s |Z(s)|` for `Z ~ N(0, C)`, by Monte Carlo.
///
/// Eigenvalues of `C` are floored at [`EIGEN_FLOOR`]; floored directions
/// carry a standard deviation of 1e-5 and are left out of the draws.
pub fn max_abs_quantile(corr: &DMatrix<f64>, alpha: f64, mc_samples: usize, seed: u64) -> Result<f64> {
    let l = corr.nrows();
    if l == 0 || corr.ncols() != l {
        return Err(Error::Parameter("correlation matrix must be square and nonempty".into()));
    }
    if mc_samples == 0 {
        return Err(Error::Parameter("mc_samples must be positive".into()));
    }
    if corr.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("correlation matrix has non-finite entries".into()));
    }
    let sym = (corr + corr.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_eig < -1e-8 {
        warn!("correlation matrix not positive semi-definite (min eigenvalue {min_eig:.3e}); clipping at {EIGEN_FLOOR}");
    }
    let keep: Vec<usize> = (0..l).filter(|&k| eig.eigenvalues[k] > EIGEN_FLOOR).collect();
    let r = keep.len();
    let factor = DMatrix::from_fn(l, r.max(1), |i, k| {
        if r == 0 {
            0.0
        } else {
            eig.eigenvectors[(i, keep[k])] * eig.eigenvalues[keep[k]].sqrt()
        }
    });
    let mut maxima = Vec::with_capacity(mc_samples);
    let mut rng = stream_rng(seed, CMA_STREAM);
    let mut done = 0;
    while done < mc_samples {
        let m = MC_BLOCK.min(mc_samples - done);
        let g = DMatrix::<f64>::from_fn(r.max(1), m, |_, _| rng.sample(StandardNormal));
        let draws = &factor * g;
        for col in draws.column_iter() {
            maxima.push(col.iter().fold(0.0f64, |a, v| a.max(v.abs())));
        }
        done += m;
    }
    Ok(quantile_type7(&mut maxima, 1.0 - alpha))
}

/// CMA quantile for one coefficient's `B × L` replicate curves.
pub fn cma_quantile(replicates: &DMatrix<f64>, alpha: f64, mc_samples: usize, seed: u64) -> Result<f64> {
    if replicates.nrows() < 2 {
        return Err(Error::Parameter("at least 2 replicates are needed".into()));
    }
    if replicates.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("replicate curves contain non-finite values".into()));
    }
    max_abs_quantile(&replicate_correlation(replicates), alpha, mc_samples, seed)
}

/// Linear-interpolation sample quantile (sorts `values`).
pub fn quantile_type7(values: &mut [f64], prob: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let h = (n - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    values[lo] + (h - lo as f64) * (values[hi] - values[lo])
}

/// Percentile interval of replicate curves at each grid point; diagnostic
/// only, the bands themselves are variance based.
pub fn percentile_band(replicates: &DMatrix<f64>, alpha: f64) -> (Vec<f64>, Vec<f64>) {
    (0..replicates.ncols())
        .map(|s| {
            let mut col: Vec<f64> = replicates.column(s).iter().cloned().collect();
            let lo = quantile_type7(&mut col, alpha / 2.0);
            let hi = quantile_type7(&mut col, 1.0 - alpha / 2.0);
            (lo, hi)
        })
        .unzip()
}

pub const BAND_COLUMNS: [&str; 7] = ["s", "beta_hat", "se", "pw_lo", "pw_hi", "cma_lo", "cma_hi"];

/// Writes coefficient `j` as CSV with columns `s, beta_hat, se, pw_lo, pw_hi, cma_lo, cma_hi`.
pub fn write_band_csv<W: Write>(bands: &BandEstimate, j: usize, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(BAND_COLUMNS)?;
    for s in 0..bands.n_grid() {
        wtr.write_record([
            format_float(bands.grid[s]),
            format_float(bands.beta_hat[(j, s)]),
            format_float(bands.se[(j, s)]),
            format_float(bands.pointwise_lo[(j, s)]),
            format_float(bands.pointwise_hi[(j, s)]),
            format_float(bands.cma_lo[(j, s)]),
            format_float(bands.cma_hi[(j, s)]),
        ])?;
    }
    wtr.flush().map_err(|e| Error::Io {
        path: "<writer>".into(),
        source: e,
    })?;
    Ok(())
}

/// One coefficient's band table as read back from CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct BandTable {
    pub s: Vec<f64>,
    pub beta_hat: Vec<f64>,
    pub se: Vec<f64>,
    pub pw_lo: Vec<f64>,
    pub pw_hi: Vec<f64>,
    pub cma_lo: Vec<f64>,
    pub cma_hi: Vec<f64>,
}

impl BandTable {
    pub fn from_bands(bands: &BandEstimate, j: usize) -> Self {
        let row = |m: &DMatrix<f64>| m.row(j).iter().cloned().collect::<Vec<_>>();
        Self {
            s: bands.grid.clone(),
            beta_hat: row(&bands.beta_hat),
            se: row(&bands.se),
            pw_lo: row(&bands.pointwise_lo),
            pw_hi: row(&bands.pointwise_hi),
            cma_lo: row(&bands.cma_lo),
            cma_hi: row(&bands.cma_hi),
        }
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let idx: Vec<usize> = BAND_COLUMNS
            .iter()
            .map(|name| {
                headers
                    .iter()
                    .position(|h| h == *name)
                    .ok_or_else(|| Error::Schema(format!("band file lacks column `{name}`")))
            })
            .collect::<Result<_>>()?;
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); BAND_COLUMNS.len()];
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            for (k, &c) in idx.iter().enumerate() {
                let v = rec
                    .get(c)
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::validation(format!("bad `{}` value", BAND_COLUMNS[k]), vec![row]))?;
                cols[k].push(v);
            }
        }
        let mut it = cols.into_iter();
        let mut next = || it.next().unwrap_or_default();
        Ok(Self {
            s: next(),
            beta_hat: next(),
            se: next(),
            pw_lo: next(),
            pw_hi: next(),
            cma_lo: next(),
            cma_hi: next(),
        })
    }
}
