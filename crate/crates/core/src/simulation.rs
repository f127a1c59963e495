//! Superpopulation generator, two-stage informative sampling and the
//! empirical informative subsampler.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::data::{equispaced_grid, DatasetParts, FunctionalDesignDataset, INTERCEPT};
use crate::error::{Error, Result};
use crate::family::{logistic, GlmFamily};
use crate::glm::{irls, IrlsOptions};
use crate::resampling::StageProbabilities;
use crate::rng::{derive_seed, stream_rng};
use crate::smoothing::bspline_basis;

const STRUCTURE_KEY: u64 = 0x5157;
const STRATUM_KEY: u64 = 0x5354;
const OUTCOME_KEY: u64 = 0x4f55;
const SAMPLE_KEY: u64 = 0x5341;
const SUBSAMPLE_KEY: u64 = 0x5342;
const PILOT_KEY: u64 = 0x5049;
const PILOT_SIZE: usize = 10_000;
const STREAM_CHUNK: usize = 4096;

/// Which stratum/PSU effects enter the linear predictor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReMode {
    None,
    /// Stratum and PSU random curves, no slope scaling.
    NoiseOnly,
    ScalingAndNoise,
}

impl ReMode {
    pub fn name(self) -> &'static str {
        match self {
            ReMode::None => "none",
            ReMode::NoiseOnly => "noise-only",
            ReMode::ScalingAndNoise => "scaling-and-noise",
        }
    }

    fn has_effects(self) -> bool {
        self != ReMode::None
    }
}

impl fmt::Display for ReMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "none" => Ok(ReMode::None),
            "noise-only" | "noise" => Ok(ReMode::NoiseOnly),
            "scaling-and-noise" | "scaling" | "full" => Ok(ReMode::ScalingAndNoise),
            other => Err(Error::Parameter(format!(
                "unknown random-effect mode `{other}` (none, noise-only, scaling-and-noise)"
            ))),
        }
    }
}

/// Strength of outcome-dependent selection at the second stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Informativeness {
    None,
    Medium,
    High,
}

impl Informativeness {
    pub const ALL: [Informativeness; 3] = [Informativeness::None, Informativeness::Medium, Informativeness::High];

    /// Slope of the logistic selection score.
    pub fn kappa(self) -> f64 {
        match self {
            Informativeness::None => 0.0,
            Informativeness::Medium => 1.0,
            Informativeness::High => 2.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Informativeness::None => "none",
            Informativeness::Medium => "medium",
            Informativeness::High => "high",
        }
    }
}

impl fmt::Display for Informativeness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Informativeness {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "uniform" => Ok(Informativeness::None),
            "medium" => Ok(Informativeness::Medium),
            "high" => Ok(Informativeness::High),
            other => Err(Error::Parameter(format!(
                "unknown informativeness `{other}` (none, medium, high)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuperpopulationConfig {
    pub n_pop: usize,
    pub n_strata: usize,
    /// Inclusive range of PSU counts per stratum.
    pub psu_range: (usize, usize),
    pub dirichlet_strata: f64,
    pub dirichlet_psu: f64,
    pub family: GlmFamily,
    /// Dimension of the B-spline basis of the random curves.
    pub re_basis_dim: usize,
    pub sigma_s: f64,
    /// SD of stratum-level basis coefficients; PSU-level variance is half.
    pub sigma_h: f64,
    pub sigma_eps: f64,
    pub re_mode: ReMode,
    pub grid_len: usize,
    pub seed: u64,
    /// Largest outcome matrix held in memory, in bytes.
    pub memory_cap_bytes: usize,
    /// Regenerate outcome rows on demand instead of failing above the cap.
    pub streaming: bool,
}

impl Default for SuperpopulationConfig {
    fn default() -> Self {
        Self {
            n_pop: 100_000,
            n_strata: 30,
            psu_range: (75, 125),
            dirichlet_strata: 4.0,
            dirichlet_psu: 10.0,
            family: GlmFamily::Gaussian,
            re_basis_dim: 5,
            sigma_s: 0.25,
            sigma_h: 0.1,
            sigma_eps: 0.1,
            re_mode: ReMode::ScalingAndNoise,
            grid_len: 50,
            seed: 1,
            memory_cap_bytes: 1 << 30,
            streaming: false,
        }
    }
}

pub const CONFIG_KEYS: [&str; 15] = [
    "n-pop",
    "strata",
    "psu-range",
    "dirichlet-strata",
    "dirichlet-psu",
    "family",
    "re-basis-dim",
    "sigma-s",
    "sigma-h",
    "sigma-eps",
    "re-mode",
    "grid-len",
    "seed",
    "memory-cap",
    "streaming",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Parameter(format!("invalid value `{value}` for configuration key `{key}`")))
}

impl SuperpopulationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.n_pop == 0 {
            return bad("population size must be positive".into());
        }
        if self.n_strata == 0 {
            return bad("at least one stratum is required".into());
        }
        if self.psu_range.0 < 2 || self.psu_range.0 > self.psu_range.1 {
            return bad(format!(
                "psu range [{}, {}] must satisfy 2 <= min <= max",
                self.psu_range.0, self.psu_range.1
            ));
        }
        if !(self.dirichlet_strata > 0.0 && self.dirichlet_psu > 0.0) {
            return bad("Dirichlet concentrations must be positive".into());
        }
        if self.re_basis_dim < 2 {
            return bad("random-effect basis dimension must be at least 2".into());
        }
        for (name, v) in [("sigma-s", self.sigma_s), ("sigma-h", self.sigma_h), ("sigma-eps", self.sigma_eps)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.grid_len < self.re_basis_dim {
            return bad(format!(
                "grid length {} is shorter than the random-effect basis ({})",
                self.grid_len, self.re_basis_dim
            ));
        }
        Ok(())
    }

    /// Sets one key of the plain-text configuration.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n-pop" => self.n_pop = parse_value(key, value)?,
            "strata" => self.n_strata = parse_value(key, value)?,
            "psu-range" => {
                let parts: Vec<&str> = value.split(|c| c == ',' || c == ':' || c == '-').collect();
                if parts.len() != 2 {
                    return Err(Error::Parameter(format!("`psu-range` expects `min,max`, got `{value}`")));
                }
                self.psu_range = (parse_value(key, parts[0])?, parse_value(key, parts[1])?);
            }
            "dirichlet-strata" => self.dirichlet_strata = parse_value(key, value)?,
            "dirichlet-psu" => self.dirichlet_psu = parse_value(key, value)?,
            "family" => self.family = value.parse()?,
            "re-basis-dim" => self.re_basis_dim = parse_value(key, value)?,
            "sigma-s" => self.sigma_s = parse_value(key, value)?,
            "sigma-h" => self.sigma_h = parse_value(key, value)?,
            "sigma-eps" => self.sigma_eps = parse_value(key, value)?,
            "re-mode" => self.re_mode = value.parse()?,
            "grid-len" => self.grid_len = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "memory-cap" => self.memory_cap_bytes = parse_value(key, value)?,
            "streaming" => self.streaming = parse_value(key, value)?,
            _ => return Err(Error::Parameter(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// `(key, value)` pairs in the same syntax [`set`](Self::set) accepts.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let v = |k: &str, s: String| (k.to_string(), s);
        vec![
            v("n-pop", self.n_pop.to_string()),
            v("strata", self.n_strata.to_string()),
            v("psu-range", format!("{},{}", self.psu_range.0, self.psu_range.1)),
            v("dirichlet-strata", self.dirichlet_strata.to_string()),
            v("dirichlet-psu", self.dirichlet_psu.to_string()),
            v("family", self.family.to_string()),
            v("re-basis-dim", self.re_basis_dim.to_string()),
            v("sigma-s", self.sigma_s.to_string()),
            v("sigma-h", self.sigma_h.to_string()),
            v("sigma-eps", self.sigma_eps.to_string()),
            v("re-mode", self.re_mode.to_string()),
            v("grid-len", self.grid_len.to_string()),
            v("seed", self.seed.to_string()),
            v("memory-cap", self.memory_cap_bytes.to_string()),
            v("streaming", self.streaming.to_string()),
        ]
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .or_else(|| line.split_once(':'))
            .ok_or_else(|| Error::Parameter(format!("line {}: expected `key = value`", no + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn beta0(s: f64) -> f64 {
    0.53 + 0.06 * (3.0 * PI * s).sin() - 0.03 * (6.5 * PI * s).cos()
}

pub fn beta1(s: f64) -> f64 {
    let z = (s - 0.6) / 0.0225;
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt() / 20.0
}

/// Data-generating coefficient curves on the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TrueCoefficients {
    pub grid: Vec<f64>,
    pub beta0: Vec<f64>,
    pub beta1: Vec<f64>,
    /// Per-stratum slope scales.
    pub gamma: Vec<f64>,
}

impl TrueCoefficients {
    fn on_grid(grid: Vec<f64>, gamma: Vec<f64>) -> Self {
        Self {
            beta0: grid.iter().map(|&s| beta0(s)).collect(),
            beta1: grid.iter().map(|&s| beta1(s)).collect(),
            grid,
            gamma,
        }
    }
}

/// A generated superpopulation. Individuals are stored PSU by PSU,
/// strata in order.
#[derive(Clone, Debug)]
pub struct Superpopulation {
    cfg: SuperpopulationConfig,
    truth: TrueCoefficients,
    re_basis: DMatrix<f64>,
    stratum_re: DMatrix<f64>,
    psu_re: DMatrix<f64>,
    stratum_psus: Vec<std::ops::Range<usize>>,
    psu_stratum: Vec<usize>,
    psu_start: Vec<usize>,
    psu_size: Vec<usize>,
    individual_psu: Vec<usize>,
    x: Vec<f64>,
    outcomes: Option<DMatrix<f64>>,
    reference: DMatrix<f64>,
}

struct StratumDraw {
    gamma: f64,
    xi: Vec<f64>,
    psu_sizes: Vec<usize>,
    zeta: Vec<Vec<f64>>,
    x: Vec<f64>,
}

fn dirichlet(rng: &mut ChaCha8Rng, k: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    let g: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

fn multinomial(rng: &mut ChaCha8Rng, n: usize, probs: &[f64]) -> Vec<usize> {
    let mut left = n as u64;
    let mut mass = 1.0;
    let mut out = Vec::with_capacity(probs.len());
    for (k, &p) in probs.iter().enumerate() {
        let c = if k + 1 == probs.len() {
            left
        } else if left == 0 {
            0
        } else {
            let q = (p / mass).clamp(0.0, 1.0);
            Binomial::new(left, q).expect("valid binomial").sample(rng)
        };
        out.push(c as usize);
        left -= c;
        mass -= p;
    }
    out
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    mean + sd * rng.sample::<f64, _>(StandardNormal)
}

pub fn generate_superpopulation(cfg: &SuperpopulationConfig) -> Result<Superpopulation> {
    cfg.validate()?;
    let bytes = cfg.n_pop.saturating_mul(cfg.grid_len).saturating_mul(8);
    let store = bytes <= cfg.memory_cap_bytes;
    if !store && !cfg.streaming {
        return Err(Error::Capacity(format!(
            "{} x {} outcomes need {bytes} bytes, above the {} byte cap; enable streaming generation",
            cfg.n_pop, cfg.grid_len, cfg.memory_cap_bytes
        )));
    }
    let mut pop = build_structure(cfg)?;
    if store {
        pop.outcomes = Some(pop.outcome_block(0, cfg.n_pop));
    }
    pop.reference = pop.fit_reference()?;
    Ok(pop)
}

fn build_structure(cfg: &SuperpopulationConfig) -> Result<Superpopulation> {
    let grid = equispaced_grid(cfg.grid_len);
    let mut rng = stream_rng(derive_seed(cfg.seed, &[STRUCTURE_KEY]), 0);
    let stratum_probs = dirichlet(&mut rng, cfg.n_strata, cfg.dirichlet_strata);
    let stratum_sizes = multinomial(&mut rng, cfg.n_pop, &stratum_probs);

    let psu_sd = cfg.sigma_h / 2f64.sqrt();
    let draws: Vec<StratumDraw> = stratum_sizes
        .par_iter()
        .enumerate()
        .map(|(h, &m_h)| {
            let mut rng = stream_rng(derive_seed(cfg.seed, &[STRATUM_KEY, h as u64]), 0);
            let n_psu = rng.gen_range(cfg.psu_range.0..=cfg.psu_range.1);
            let q = dirichlet(&mut rng, n_psu, cfg.dirichlet_psu);
            let psu_sizes = multinomial(&mut rng, m_h, &q);
            let gamma = normal(&mut rng, 1.0, cfg.sigma_s);
            let xi = (0..cfg.re_basis_dim).map(|_| normal(&mut rng, 0.0, cfg.sigma_h)).collect();
            let zeta = (0..n_psu)
                .map(|_| (0..cfg.re_basis_dim).map(|_| normal(&mut rng, 0.0, psu_sd)).collect())
                .collect();
            let x = (0..m_h).map(|_| normal(&mut rng, 0.0, 2f64.sqrt())).collect();
            StratumDraw {
                gamma,
                xi,
                psu_sizes,
                zeta,
                x,
            }
        })
        .collect();

    let re_basis = bspline_basis(&grid, cfg.re_basis_dim, 3);
    let n_psus: usize = draws.iter().map(|d| d.psu_sizes.len()).sum();
    let mut xi = DMatrix::zeros(cfg.re_basis_dim, cfg.n_strata);
    let mut zeta = DMatrix::zeros(cfg.re_basis_dim, n_psus);
    let mut stratum_psus = Vec::with_capacity(cfg.n_strata);
    let mut psu_stratum = Vec::with_capacity(n_psus);
    let mut psu_start = Vec::with_capacity(n_psus);
    let mut psu_size = Vec::with_capacity(n_psus);
    let mut individual_psu = Vec::with_capacity(cfg.n_pop);
    let mut x = Vec::with_capacity(cfg.n_pop);
    let mut gamma = Vec::with_capacity(cfg.n_strata);
    for (h, d) in draws.into_iter().enumerate() {
        gamma.push(d.gamma);
        for (k, v) in d.xi.iter().enumerate() {
            xi[(k, h)] = *v;
        }
        let first = psu_stratum.len();
        for (c, (&size, z)) in d.psu_sizes.iter().zip(&d.zeta).enumerate() {
            let g = first + c;
            for (k, v) in z.iter().enumerate() {
                zeta[(k, g)] = *v;
            }
            psu_stratum.push(h);
            psu_start.push(individual_psu.len());
            psu_size.push(size);
            individual_psu.extend(std::iter::repeat(g).take(size));
        }
        stratum_psus.push(first..psu_stratum.len());
        x.extend(d.x);
    }
    let stratum_re = (&re_basis * xi).transpose();
    let psu_re = (&re_basis * zeta).transpose();
    Ok(Superpopulation {
        cfg: cfg.clone(),
        truth: TrueCoefficients::on_grid(grid, gamma),
        re_basis,
        stratum_re,
        psu_re,
        stratum_psus,
        psu_stratum,
        psu_start,
        psu_size,
        individual_psu,
        x,
        outcomes: None,
        reference: DMatrix::zeros(2, cfg.grid_len),
    })
}

impl Superpopulation {
    pub fn config(&self) -> &SuperpopulationConfig {
        &self.cfg
    }

    pub fn truth(&self) -> &TrueCoefficients {
        &self.truth
    }

    /// Unweighted pointwise fit on the whole superpopulation, `2 × L`
    /// (intercept, x).
    pub fn reference(&self) -> &DMatrix<f64> {
        &self.reference
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn grid(&self) -> &[f64] {
        &self.truth.grid
    }

    pub fn n_strata(&self) -> usize {
        self.stratum_psus.len()
    }

    pub fn n_psus(&self) -> usize {
        self.psu_size.len()
    }

    /// Global PSU indices of stratum `h`.
    pub fn stratum_psus(&self, h: usize) -> std::ops::Range<usize> {
        self.stratum_psus[h].clone()
    }

    pub fn psu_size(&self, c: usize) -> usize {
        self.psu_size[c]
    }

    pub fn psu_stratum(&self, c: usize) -> usize {
        self.psu_stratum[c]
    }

    pub fn psu_rows(&self, c: usize) -> std::ops::Range<usize> {
        self.psu_start[c]..self.psu_start[c] + self.psu_size[c]
    }

    pub fn stratum_size(&self, h: usize) -> usize {
        self.stratum_psus[h].clone().map(|c| self.psu_size[c]).sum()
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn is_streaming(&self) -> bool {
        self.outcomes.is_none()
    }

    /// `K`-dimensional B-spline basis of the random curves, `L × K`.
    pub fn re_basis(&self) -> &DMatrix<f64> {
        &self.re_basis
    }

    /// Stratum random curves `b_h(s)`, `H × L`.
    pub fn stratum_effects(&self) -> &DMatrix<f64> {
        &self.stratum_re
    }

    /// PSU random curves `b_c(s)`, one row per global PSU.
    pub fn psu_effects(&self) -> &DMatrix<f64> {
        &self.psu_re
    }

    fn slope_scale(&self, h: usize) -> f64 {
        if self.cfg.re_mode == ReMode::ScalingAndNoise {
            self.truth.gamma[h]
        } else {
            1.0
        }
    }

    /// `β_0(s) + X_i γ_h β_1(s)`.
    pub fn fixed_part(&self, i: usize) -> Vec<f64> {
        let h = self.psu_stratum[self.individual_psu[i]];
        let g = self.slope_scale(h) * self.x[i];
        self.truth.beta0.iter().zip(&self.truth.beta1).map(|(b0, b1)| b0 + g * b1).collect()
    }

    /// `b_h(s) + b_c(s)`, zero without random effects.
    pub fn random_part(&self, i: usize) -> Vec<f64> {
        let c = self.individual_psu[i];
        let h = self.psu_stratum[c];
        if !self.cfg.re_mode.has_effects() {
            return vec![0.0; self.truth.grid.len()];
        }
        (0..self.truth.grid.len())
            .map(|s| self.stratum_re[(h, s)] + self.psu_re[(c, s)])
            .collect()
    }

    pub fn linear_predictor(&self, i: usize) -> Vec<f64> {
        let mut eta = self.fixed_part(i);
        for (e, r) in eta.iter_mut().zip(self.random_part(i)) {
            *e += r;
        }
        eta
    }

    fn generate_row(&self, i: usize, out: &mut [f64]) {
        let eta = self.linear_predictor(i);
        let mut rng = stream_rng(derive_seed(self.cfg.seed, &[OUTCOME_KEY]), i as u64);
        for (o, e) in out.iter_mut().zip(eta) {
            *o = match self.cfg.family {
                GlmFamily::Gaussian => normal(&mut rng, e, self.cfg.sigma_eps),
                GlmFamily::Bernoulli => f64::from(rng.gen::<f64>() < logistic(e)),
                GlmFamily::Poisson => {
                    let mean = e.min(50.0).exp();
                    if mean > 0.0 {
                        Poisson::new(mean).map(|d| d.sample(&mut rng)).unwrap_or(0.0)
                    } else {
                        0.0
                    }
                }
            };
        }
    }

    /// Outcome curve of individual `i`, stored or regenerated.
    pub fn outcome_row(&self, i: usize) -> Vec<f64> {
        match &self.outcomes {
            Some(y) => y.row(i).iter().cloned().collect(),
            None => {
                let mut out = vec![0.0; self.truth.grid.len()];
                self.generate_row(i, &mut out);
                out
            }
        }
    }

    /// Outcomes of rows `start..start+len`, `len × L`.
    pub fn outcome_block(&self, start: usize, len: usize) -> DMatrix<f64> {
        if let Some(y) = &self.outcomes {
            return y.rows(start, len).into_owned();
        }
        let l = self.truth.grid.len();
        let rows: Vec<Vec<f64>> = (start..start + len)
            .into_par_iter()
            .map(|i| {
                let mut r = vec![0.0; l];
                self.generate_row(i, &mut r);
                r
            })
            .collect();
        DMatrix::from_fn(len, l, |i, s| rows[i][s])
    }

    fn fit_reference(&self) -> Result<DMatrix<f64>> {
        let names = vec![INTERCEPT.to_string(), "x".to_string()];
        match &self.outcomes {
            Some(y) => {
                let x = DMatrix::from_fn(self.n(), 2, |i, j| if j == 0 { 1.0 } else { self.x[i] });
                let fit = irls(&x, y, &vec![1.0; self.n()], self.cfg.family, IrlsOptions::default(), &names)?;
                if !fit.all_converged() {
                    warn!("superpopulation reference fit did not converge at every grid point");
                }
                Ok(fit.beta)
            }
            None => self.streamed_reference(IrlsOptions::default()),
        }
    }

    /// Reference fit accumulating cross products over row chunks, so the
    /// outcome matrix is never held in memory.
    fn streamed_reference(&self, opts: IrlsOptions) -> Result<DMatrix<f64>> {
        let fam = self.cfg.family;
        let l = self.truth.grid.len();
        let n = self.n();
        let mut beta: Option<DMatrix<f64>> = None;
        let iterations = if fam.is_gaussian() { 1 } else { opts.max_iter };
        for _ in 0..iterations {
            let mut gram = vec![[0.0f64; 3]; l];
            let mut rhs = vec![[0.0f64; 2]; l];
            let mut start = 0;
            while start < n {
                let len = STREAM_CHUNK.min(n - start);
                let y = self.outcome_block(start, len);
                for r in 0..len {
                    let xi = self.x[start + r];
                    for s in 0..l {
                        let yv = y[(r, s)];
                        let (wt, z) = match &beta {
                            _ if fam.is_gaussian() => (1.0, yv),
                            None => {
                                let mu = fam.initial_mu(yv);
                                let eta = fam.link(mu);
                                let d = fam.mu_eta(eta);
                                (d * d / fam.variance(mu), eta + (yv - mu) / d)
                            }
                            Some(b) => {
                                let eta = clamp_eta(fam, b[(0, s)] + xi * b[(1, s)]);
                                let mu = fam.inverse_link(eta);
                                let d = fam.mu_eta(eta);
                                (d * d / fam.variance(mu), eta + (yv - mu) / d)
                            }
                        };
                        gram[s][0] += wt;
                        gram[s][1] += wt * xi;
                        gram[s][2] += wt * xi * xi;
                        rhs[s][0] += wt * z;
                        rhs[s][1] += wt * xi * z;
                    }
                }
                start += len;
            }
            let mut next = DMatrix::zeros(2, l);
            for s in 0..l {
                let [a, b, c] = gram[s];
                let det = a * c - b * b;
                if det.abs() <= 1e-12 * (a * c).abs().max(f64::MIN_POSITIVE) {
                    return Err(Error::SingularDesign {
                        column: 1,
                        name: "x".into(),
                    });
                }
                next[(0, s)] = (c * rhs[s][0] - b * rhs[s][1]) / det;
                next[(1, s)] = (a * rhs[s][1] - b * rhs[s][0]) / det;
            }
            let done = beta.as_ref().is_some_and(|old| {
                old.iter()
                    .zip(next.iter())
                    .all(|(o, v)| (v - o).abs() / (v.abs() + 0.1) < opts.tol)
            });
            beta = Some(next);
            if done {
                break;
            }
        }
        Ok(beta.expect("at least one pass"))
    }
}

fn clamp_eta(fam: GlmFamily, eta: f64) -> f64 {
    match fam {
        GlmFamily::Gaussian => eta,
        GlmFamily::Bernoulli => eta.clamp(-30.0, 30.0),
        GlmFamily::Poisson => eta.min(50.0),
    }
}

/// A sampled dataset with its design probabilities and the truth it
/// should be compared against.
#[derive(Clone, Debug)]
pub struct SampleDraw {
    pub dataset: FunctionalDesignDataset,
    pub probabilities: StageProbabilities,
    /// Generating curves; absent for empirical subsamples.
    pub truth: Option<TrueCoefficients>,
    /// Unweighted pointwise fit on the population, `P × L`, when known.
    pub reference: Option<DMatrix<f64>>,
}

/// Poisson-sampling inclusion probabilities proportional to `scores`,
/// summing to `n`, capped at 1 with the excess redistributed.
/// Returns the probabilities and whether any cap was applied.
pub fn inclusion_probabilities(scores: &[f64], n: f64) -> (Vec<f64>, bool) {
    let m = scores.len();
    if n >= m as f64 {
        return (vec![1.0; m], n > m as f64);
    }
    let mut fixed = vec![false; m];
    let mut pi = vec![0.0; m];
    let mut clipped = false;
    loop {
        let n_fixed = fixed.iter().filter(|f| **f).count() as f64;
        let free: f64 = scores.iter().zip(&fixed).filter(|(_, f)| !**f).map(|(s, _)| s).sum();
        let mut changed = false;
        for i in 0..m {
            if fixed[i] {
                pi[i] = 1.0;
                continue;
            }
            pi[i] = if free > 0.0 { (n - n_fixed) * scores[i] / free } else { 0.0 };
            if pi[i] >= 1.0 {
                fixed[i] = true;
                changed = true;
                clipped = true;
            }
        }
        if !changed {
            return (pi, clipped);
        }
    }
}

/// Mean 0, variance 1 scores; a constant input gives zeros.
pub fn standardize(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > 1e-12 * mean.abs().max(1.0)) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / sd).collect()
}

struct PsuSample {
    psu: usize,
    pi1: f64,
    rows: Vec<usize>,
    pi2: Vec<f64>,
    y: Vec<Vec<f64>>,
}

/// Sequential PPS draw of two distinct PSUs; `sizes` must have at least two
/// positive entries.
pub fn ppswor_two(rng: &mut ChaCha8Rng, sizes: &[usize]) -> [usize; 2] {
    let pick = |rng: &mut ChaCha8Rng, skip: Option<usize>| {
        let total: usize = sizes.iter().enumerate().filter(|(k, _)| Some(*k) != skip).map(|(_, s)| s).sum();
        let mut u = rng.gen_range(0..total);
        for (k, &s) in sizes.iter().enumerate() {
            if Some(k) == skip {
                continue;
            }
            if u < s {
                return k;
            }
            u -= s;
        }
        unreachable!("draw exceeds total size")
    };
    let first = pick(rng, None);
    let second = pick(rng, Some(first));
    [first, second]
}

/// Stage 1 draws two PSUs per stratum by sequential PPSWOR; stage 2 draws
/// individuals by Poisson sampling with `π_2 ∝ logistic(κ Ȳ^sc)`, `Ȳ^sc`
/// the within-PSU standardized mean outcome, scaled to an expected take of
/// `per_psu_n`.
pub fn draw_two_stage_sample(
    pop: &Superpopulation,
    per_psu_n: usize,
    informativeness: Informativeness,
    seed: u64,
) -> Result<SampleDraw> {
    if per_psu_n == 0 {
        return Err(Error::Parameter("per-PSU sample size must be positive".into()));
    }
    let kappa = informativeness.kappa();
    let per_stratum: Vec<Result<Vec<PsuSample>>> = (0..pop.n_strata())
        .into_par_iter()
        .map(|h| {
            let psus: Vec<usize> = pop.stratum_psus(h).collect();
            let sizes: Vec<usize> = psus.iter().map(|&c| pop.psu_size(c)).collect();
            if sizes.iter().filter(|&&s| s > 0).count() < 2 {
                return Err(Error::Design(format!("stratum {h} has fewer than two non-empty PSUs")));
            }
            let m_h: usize = sizes.iter().sum();
            let mut rng = stream_rng(derive_seed(seed, &[SAMPLE_KEY, h as u64]), 0);
            let picks = ppswor_two(&mut rng, &sizes);
            let mut out = Vec::with_capacity(2);
            let mut sorted = picks;
            sorted.sort_unstable();
            for k in sorted {
                let c = psus[k];
                let rows: Vec<usize> = pop.psu_rows(c).collect();
                let y: Vec<Vec<f64>> = rows.iter().map(|&i| pop.outcome_row(i)).collect();
                let means: Vec<f64> = y.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
                let scores: Vec<f64> = standardize(&means).into_iter().map(|z| logistic(kappa * z)).collect();
                let (pi2, clipped) = inclusion_probabilities(&scores, per_psu_n as f64);
                if clipped {
                    warn!(
                        "stratum {h}, PSU {k}: expected take {per_psu_n} needs probabilities above 1 (size {}); clipped and renormalized",
                        rows.len()
                    );
                }
                let pi1 = (2.0 * sizes[k] as f64 / m_h as f64).min(0.999);
                let mut keep = PsuSample {
                    psu: k,
                    pi1,
                    rows: Vec::new(),
                    pi2: Vec::new(),
                    y: Vec::new(),
                };
                for (j, (&i, yrow)) in rows.iter().zip(y).enumerate() {
                    if rng.gen::<f64>() < pi2[j] {
                        keep.rows.push(i);
                        keep.pi2.push(pi2[j]);
                        keep.y.push(yrow);
                    }
                }
                out.push(keep);
            }
            Ok(out)
        })
        .collect();

    let l = pop.grid().len();
    let mut strata = Vec::new();
    let mut psus = Vec::new();
    let mut xs = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut pi1_rows = Vec::new();
    let mut pi2 = Vec::new();
    for (h, res) in per_stratum.into_iter().enumerate() {
        for ps in res? {
            for (j, &i) in ps.rows.iter().enumerate() {
                strata.push(format!("h{:03}", h + 1));
                psus.push(format!("h{:03}c{:03}", h + 1, ps.psu + 1));
                xs.push(pop.x[i]);
                ys.extend_from_slice(&ps.y[j]);
                pi1_rows.push(ps.pi1);
                pi2.push(ps.pi2[j]);
            }
        }
    }
    let n = xs.len();
    let weights: Vec<f64> = pi1_rows.iter().zip(&pi2).map(|(a, b)| 1.0 / (a * b)).collect();
    let dataset = FunctionalDesignDataset::new(DatasetParts {
        outcomes: DMatrix::from_row_slice(n, l, &ys),
        covariates: DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { xs[i] }),
        covariate_names: vec![INTERCEPT.to_string(), "x".to_string()],
        weights,
        strata,
        psus,
        grid: Some(pop.grid().to_vec()),
    })?;
    let probabilities = StageProbabilities::from_rows(&dataset, &pi1_rows, pi2)?;
    Ok(SampleDraw {
        dataset,
        probabilities,
        truth: Some(pop.truth.clone()),
        reference: Some(pop.reference.clone()),
    })
}

/// Selection rule of the empirical subsampler.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubsampleScheme {
    Uniform,
    WeightBased,
    OutcomeBased,
    Mixed,
}

impl SubsampleScheme {
    pub const ALL: [SubsampleScheme; 4] = [
        SubsampleScheme::Uniform,
        SubsampleScheme::WeightBased,
        SubsampleScheme::OutcomeBased,
        SubsampleScheme::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SubsampleScheme::Uniform => "uniform",
            SubsampleScheme::WeightBased => "weight",
            SubsampleScheme::OutcomeBased => "outcome",
            SubsampleScheme::Mixed => "mixed",
        }
    }
}

impl fmt::Display for SubsampleScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SubsampleScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "uniform" => Ok(SubsampleScheme::Uniform),
            "weight" | "weight-based" => Ok(SubsampleScheme::WeightBased),
            "outcome" | "outcome-based" => Ok(SubsampleScheme::OutcomeBased),
            "mixed" => Ok(SubsampleScheme::Mixed),
            other => Err(Error::Parameter(format!(
                "unknown subsampling scheme `{other}` (uniform, weight, outcome, mixed)"
            ))),
        }
    }
}

/// Selection scores of the empirical subsampler before scaling.
pub fn subsample_scores(pop: &FunctionalDesignDataset, scheme: SubsampleScheme) -> Vec<f64> {
    let trunc = |v: Vec<f64>| v.into_iter().map(|z| z.clamp(-2.0, 2.0)).collect::<Vec<_>>();
    let w_sc = trunc(standardize(pop.weights()));
    let m_sc = trunc(standardize(&pop.outcome_means()));
    (0..pop.n())
        .map(|i| match scheme {
            SubsampleScheme::Uniform => 1.0,
            SubsampleScheme::WeightBased => logistic(w_sc[i]),
            SubsampleScheme::OutcomeBased => logistic(m_sc[i]),
            SubsampleScheme::Mixed => logistic(0.5 * w_sc[i] + 0.5 * m_sc[i]),
        })
        .collect()
}

/// Poisson subsample of expected size `n` with `π_i ∝` the scheme's score
/// and weights `1/π_i`. Design labels are carried over; the result is
/// single-stage.
pub fn empirical_subsample(
    pop: &FunctionalDesignDataset,
    scheme: SubsampleScheme,
    n: usize,
    seed: u64,
) -> Result<SampleDraw> {
    if n == 0 || n > pop.n() {
        return Err(Error::Parameter(format!(
            "subsample size {n} must lie in 1..={}",
            pop.n()
        )));
    }
    let (pi, clipped) = inclusion_probabilities(&subsample_scores(pop, scheme), n as f64);
    if clipped {
        warn!("subsample probabilities above 1 were clipped and renormalized");
    }
    let mut rng = stream_rng(derive_seed(seed, &[SUBSAMPLE_KEY]), 0);
    let rows: Vec<usize> = (0..pop.n()).filter(|&i| rng.gen::<f64>() < pi[i]).collect();
    if rows.len() < pop.n_covariates() {
        return Err(Error::Parameter(format!(
            "subsample drew {} rows, fewer than the {} covariates",
            rows.len(),
            pop.n_covariates()
        )));
    }
    let pi2: Vec<f64> = rows.iter().map(|&i| pi[i]).collect();
    let dataset = pop
        .select_rows(&rows)?
        .with_weights(pi2.iter().map(|p| 1.0 / p).collect())?;
    let probabilities = StageProbabilities {
        pi1: vec![1.0; dataset.n_psus()],
        pi2,
        single_stage: true,
    };
    Ok(SampleDraw {
        dataset,
        probabilities,
        truth: None,
        reference: None,
    })
}

fn pooled_sd(rows: impl Iterator<Item = Vec<f64>>) -> f64 {
    let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
    for r in rows {
        for v in r {
            n += 1.0;
            sum += v;
            sq += v * v;
        }
    }
    let mean = sum / n;
    ((sq / n - mean * mean).max(0.0)).sqrt()
}

/// Empirical SDs of the fixed part, the random part and the linear
/// predictor, pooled over individuals and grid points.
pub fn component_sds(pop: &Superpopulation) -> (f64, f64, f64) {
    let n = pop.n();
    (
        pooled_sd((0..n).map(|i| pop.fixed_part(i))),
        pooled_sd((0..n).map(|i| pop.random_part(i))),
        pooled_sd((0..n).map(|i| pop.linear_predictor(i))),
    )
}

/// `(σ_h, σ_ε)` achieving the target SNRs on a pilot of 10^4 individuals.
pub fn calibrate_variances(cfg: &SuperpopulationConfig, snr_b: f64, snr_eps: f64) -> Result<(f64, f64)> {
    for (name, v) in [("snr-b", snr_b), ("snr-eps", snr_eps)] {
        if !(v > 0.0) {
            return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
        }
    }
    let mut pilot_cfg = cfg.clone();
    pilot_cfg.n_pop = PILOT_SIZE;
    pilot_cfg.sigma_h = 1.0;
    pilot_cfg.seed = derive_seed(cfg.seed, &[PILOT_KEY]);
    pilot_cfg.validate()?;
    let pilot = build_structure(&pilot_cfg)?;
    let n = pilot.n();
    let fixed: Vec<Vec<f64>> = (0..n).map(|i| pilot.fixed_part(i)).collect();
    let sd_fixed = pooled_sd(fixed.iter().cloned());
    let sigma_h = if cfg.re_mode.has_effects() {
        let sd_unit = pooled_sd((0..n).map(|i| pilot.random_part(i)));
        if sd_unit > 0.0 {
            sd_fixed / (snr_b * sd_unit)
        } else {
            0.0
        }
    } else {
        0.0
    };
    let sd_eta = pooled_sd((0..n).map(|i| {
        let mut eta = fixed[i].clone();
        for (e, r) in eta.iter_mut().zip(pilot.random_part(i)) {
            *e += sigma_h * r;
        }
        eta
    }));
    Ok((sigma_h, sd_eta / snr_eps))
}

/// Least-squares residual of projecting `curve` onto the columns of `basis`.
pub fn projection_residual(basis: &DMatrix<f64>, curve: &[f64]) -> f64 {
    let y = DVector::from_column_slice(curve);
    let qr = basis.clone().qr();
    let q = qr.q();
    let fitted = &q * (q.transpose() * &y);
    (y - fitted).norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SuperpopulationConfig {
        SuperpopulationConfig {
            n_pop: 4000,
            n_strata: 4,
            psu_range: (4, 6),
            grid_len: 20,
            ..Default::default()
        }
    }

    #[test]
    fn printed_curve_values() {
        assert!((beta0(0.0) - 0.50).abs() < 1e-12);
        assert!((beta1(0.6) - 0.019947114020071637).abs() < 1e-12);
    }

    #[test]
    fn structure_is_consistent() {
        let pop = generate_superpopulation(&small_cfg()).unwrap();
        assert_eq!(pop.n(), 4000);
        let total: usize = (0..pop.n_strata()).map(|h| pop.stratum_size(h)).sum();
        assert_eq!(total, 4000);
        for c in 0..pop.n_psus() {
            for i in pop.psu_rows(c) {
                assert_eq!(pop.individual_psu[i], c);
            }
        }
    }

    #[test]
    fn noiseless_model_is_recovered() {
        let cfg = SuperpopulationConfig {
            re_mode: ReMode::None,
            sigma_eps: 0.0,
            ..small_cfg()
        };
        let pop = generate_superpopulation(&cfg).unwrap();
        let t = pop.truth();
        for s in 0..t.grid.len() {
            assert!((pop.reference()[(0, s)] - t.beta0[s]).abs() < 1e-10);
            assert!((pop.reference()[(1, s)] - t.beta1[s]).abs() < 1e-10);
        }
    }

    #[test]
    fn streaming_matches_stored() {
        for family in [GlmFamily::Gaussian, GlmFamily::Bernoulli, GlmFamily::Poisson] {
            let cfg = SuperpopulationConfig { family, ..small_cfg() };
            let stored = generate_superpopulation(&cfg).unwrap();
            let streamed = generate_superpopulation(&SuperpopulationConfig {
                memory_cap_bytes: 1000,
                streaming: true,
                ..cfg.clone()
            })
            .unwrap();
            assert!(streamed.is_streaming());
            assert_eq!(stored.outcome_row(17), streamed.outcome_row(17));
            let diff = (stored.reference() - streamed.reference()).abs().max();
            assert!(diff < 1e-7, "{family}: {diff}");
        }
    }

    #[test]
    fn capacity_error_without_streaming() {
        let cfg = SuperpopulationConfig {
            memory_cap_bytes: 1000,
            ..small_cfg()
        };
        assert!(matches!(generate_superpopulation(&cfg), Err(Error::Capacity(_))));
    }

    #[test]
    fn inclusion_probabilities_are_capped() {
        let (pi, clipped) = inclusion_probabilities(&[10.0, 1.0, 1.0, 1.0], 2.0);
        assert!(clipped);
        assert_eq!(pi[0], 1.0);
        assert!((pi.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        assert!((pi[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn uninformative_weights_constant_within_psu() {
        let pop = generate_superpopulation(&small_cfg()).unwrap();
        let draw = draw_two_stage_sample(&pop, 50, Informativeness::None, 3).unwrap();
        let ds = &draw.dataset;
        for c in 0..ds.n_psus() {
            let w: Vec<f64> = (0..ds.n()).filter(|&i| ds.psus()[i] == c).map(|i| ds.weights()[i]).collect();
            assert!(w.iter().all(|v| (v - w[0]).abs() < 1e-9 * w[0]));
        }
        assert_eq!(ds.n_psus(), 2 * pop.n_strata());
    }

    #[test]
    fn config_keys_round_trip() {
        let mut cfg = SuperpopulationConfig::default();
        let text = "n-pop = 500\npsu-range = 4,8 # comment\nre-mode: none\nfamily = poisson\n";
        for (k, v) in parse_key_values(text).unwrap() {
            cfg.set(&k, &v).unwrap();
        }
        assert_eq!(cfg.n_pop, 500);
        assert_eq!(cfg.psu_range, (4, 8));
        assert_eq!(cfg.re_mode, ReMode::None);
        let mut again = SuperpopulationConfig::default();
        for (k, v) in cfg.to_pairs() {
            again.set(&k, &v).unwrap();
        }
        assert_eq!(again, cfg);
        let err = cfg.set("sigma_q", "1").unwrap_err();
        assert!(err.to_string().contains("sigma_q"));
    }

    #[test]
    fn constant_outcomes_make_outcome_scheme_uniform() {
        let n = 40;
        let ds = FunctionalDesignDataset::new(DatasetParts {
            outcomes: DMatrix::from_element(n, 5, 2.0),
            covariates: DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 }),
            covariate_names: vec![INTERCEPT.into(), "x".into()],
            weights: (0..n).map(|i| 1.0 + i as f64).collect(),
            strata: vec!["a".into(); n],
            psus: (0..n).map(|i| (i % 2).to_string()).collect(),
            grid: None,
        })
        .unwrap();
        let scores = subsample_scores(&ds, SubsampleScheme::OutcomeBased);
        assert!(scores.iter().all(|&s| s == 0.5));
    }
}
