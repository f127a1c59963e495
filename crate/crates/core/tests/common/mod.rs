#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use svyfosr::data::{DatasetParts, INTERCEPT};
use svyfosr::{FunctionalDesignDataset, GlmFamily};

pub struct Fixture {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub w: Vec<f64>,
    pub names: Vec<String>,
}

/// Intercept plus `p - 1` standard normal covariates, weights in [0.5, 3],
/// outcomes drawn from `family` with smooth coefficient curves.
pub fn fixture(seed: u64, n: usize, p: usize, l: usize, family: GlmFamily) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.sample::<f64, _>(StandardNormal) });
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..3.0)).collect();
    let scale = match family {
        GlmFamily::Gaussian => 1.0,
        GlmFamily::Bernoulli => 0.25,
        GlmFamily::Poisson => 0.12,
    };
    let phase: Vec<f64> = (0..p).map(|_| rng.gen_range(0.0..6.0)).collect();
    let beta = DMatrix::from_fn(p, l, |j, s| scale * (phase[j] + 4.0 * s as f64 / l as f64).sin());
    let eta = &x * &beta;
    let y = DMatrix::from_fn(n, l, |i, s| {
        let e = eta[(i, s)];
        match family {
            GlmFamily::Gaussian => e + rng.sample::<f64, _>(StandardNormal),
            GlmFamily::Bernoulli => f64::from(rng.gen::<f64>() < 1.0 / (1.0 + (-e).exp())),
            GlmFamily::Poisson => Poisson::new(e.exp()).unwrap().sample(&mut rng),
        }
    });
    let names = std::iter::once(INTERCEPT.to_string())
        .chain((1..p).map(|j| format!("x{j}")))
        .collect();
    Fixture { x, y, w, names }
}

/// Solves the symmetric positive definite system `a z = b` by an explicit
/// Cholesky factorization.
pub fn cholesky_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let p = b.len();
    let mut l = vec![vec![0.0; p]; p];
    for i in 0..p {
        for j in 0..=i {
            let s: f64 = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                assert!(s > 0.0, "oracle matrix not positive definite");
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut z = vec![0.0; p];
    for i in 0..p {
        z[i] = (b[i] - (0..i).map(|k| l[i][k] * z[k]).sum::<f64>()) / l[i][i];
    }
    let mut out = vec![0.0; p];
    for i in (0..p).rev() {
        out[i] = (z[i] - (i + 1..p).map(|k| l[k][i] * out[k]).sum::<f64>()) / l[i][i];
    }
    out
}

/// Weighted normal equations for one outcome column.
pub fn wls_column(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Vec<f64> {
    let (n, p) = x.shape();
    let mut a = vec![vec![0.0; p]; p];
    let mut b = vec![0.0; p];
    for i in 0..n {
        for j in 0..p {
            b[j] += w[i] * x[(i, j)] * y[i];
            for k in 0..p {
                a[j][k] += w[i] * x[(i, j)] * x[(i, k)];
            }
        }
    }
    cholesky_solve(&a, &b)
}

/// Textbook IRLS for one column, iterated to a tight tolerance.
pub fn irls_column(x: &DMatrix<f64>, y: &[f64], w: &[f64], family: GlmFamily) -> Vec<f64> {
    let (n, p) = x.shape();
    let mean_y = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>();
    let mut beta = vec![0.0; p];
    beta[0] = match family {
        GlmFamily::Bernoulli => (mean_y / (1.0 - mean_y)).ln(),
        GlmFamily::Poisson => mean_y.ln(),
        GlmFamily::Gaussian => mean_y,
    };
    for _ in 0..200 {
        let mut ww = vec![0.0; n];
        let mut z = vec![0.0; n];
        for i in 0..n {
            let eta: f64 = (0..p).map(|j| x[(i, j)] * beta[j]).sum();
            let (mu, v) = match family {
                GlmFamily::Bernoulli => {
                    let mu = 1.0 / (1.0 + (-eta).exp());
                    (mu, mu * (1.0 - mu))
                }
                GlmFamily::Poisson => {
                    let mu = eta.exp();
                    (mu, mu)
                }
                GlmFamily::Gaussian => (eta, 1.0),
            };
            ww[i] = w[i] * v;
            z[i] = eta + (y[i] - mu) / v;
        }
        let next = wls_column(x, &z, &ww);
        let delta = next.iter().zip(&beta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        beta = next;
        if delta < 1e-13 {
            break;
        }
    }
    beta
}

/// Max absolute difference divided by the max absolute oracle entry.
pub fn relative_error(got: &DMatrix<f64>, oracle: &DMatrix<f64>) -> f64 {
    let scale = oracle.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    got.iter().zip(oracle.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
}

pub fn dataset(
    y: DMatrix<f64>,
    x: DMatrix<f64>,
    names: Vec<String>,
    w: Vec<f64>,
    strata: Vec<String>,
    psus: Vec<String>,
) -> FunctionalDesignDataset {
    FunctionalDesignDataset::new(DatasetParts {
        outcomes: y,
        covariates: x,
        covariate_names: names,
        weights: w,
        strata,
        psus,
        grid: None,
    })
    .unwrap()
}

/// `H` strata, `C` PSUs each, `m` rows per PSU, row labels `h{h}` / `c{h}.{c}`.
pub fn design_labels(h: usize, c: usize, m: usize) -> (Vec<String>, Vec<String>) {
    let mut strata = Vec::new();
    let mut psus = Vec::new();
    for a in 0..h {
        for b in 0..c {
            for _ in 0..m {
                strata.push(format!("h{a}"));
                psus.push(format!("c{a}.{b}"));
            }
        }
    }
    (strata, psus)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    let p: f64 = (1..=100)
        .map(|k| {
            let k = k as f64;
            2.0 * (-1.0f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp()
        })
        .sum();
    (d, p.clamp(0.0, 1.0))
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}
