//! Exponential-family outcome models with their canonical links.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Linear predictors of Bernoulli fits are clamped to this magnitude.
pub const BERNOULLI_ETA_LIMIT: f64 = 30.0;

const MU_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlmFamily {
    /// Gaussian outcome, identity link.
    Gaussian,
    /// Bernoulli outcome, logit link.
    Bernoulli,
    /// Poisson outcome, log link.
    Poisson,
}

impl GlmFamily {
    pub fn link(self, mu: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => mu,
            GlmFamily::Bernoulli => (mu / (1.0 - mu)).ln(),
            GlmFamily::Poisson => mu.ln(),
        }
    }

    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => eta,
            GlmFamily::Bernoulli => logistic(eta),
            GlmFamily::Poisson => eta.exp(),
        }
    }

    /// dμ/dη evaluated at η.
    pub fn mu_eta(self, eta: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => 1.0,
            GlmFamily::Bernoulli => {
                let p = logistic(eta);
                (p * (1.0 - p)).max(f64::MIN_POSITIVE)
            }
            GlmFamily::Poisson => eta.exp().max(f64::MIN_POSITIVE),
        }
    }

    pub fn variance(self, mu: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => 1.0,
            GlmFamily::Bernoulli => (mu * (1.0 - mu)).max(f64::MIN_POSITIVE),
            GlmFamily::Poisson => mu.max(f64::MIN_POSITIVE),
        }
    }

    /// Starting mean used to seed IRLS.
    pub fn initial_mu(self, y: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => y,
            GlmFamily::Bernoulli => (y + 0.5) / 2.0,
            GlmFamily::Poisson => y + 0.1,
        }
    }

    pub fn is_gaussian(self) -> bool {
        self == GlmFamily::Gaussian
    }

    /// Whether `y` lies in the support of the outcome distribution.
    pub fn in_support(self, y: f64) -> bool {
        match self {
            GlmFamily::Gaussian => y.is_finite(),
            GlmFamily::Bernoulli => y == 0.0 || y == 1.0,
            GlmFamily::Poisson => y >= 0.0 && y.fract() == 0.0 && y.is_finite(),
        }
    }

    /// Whether μ is a valid mean for the family.
    pub fn valid_mu(self, mu: f64) -> bool {
        match self {
            GlmFamily::Gaussian => mu.is_finite(),
            GlmFamily::Bernoulli => mu > MU_EPS && mu < 1.0 - MU_EPS,
            GlmFamily::Poisson => mu > 0.0 && mu.is_finite(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GlmFamily::Gaussian => "gaussian",
            GlmFamily::Bernoulli => "bernoulli",
            GlmFamily::Poisson => "poisson",
        }
    }
}

impl fmt::Display for GlmFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GlmFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(GlmFamily::Gaussian),
            "bernoulli" | "binomial" | "binary" => Ok(GlmFamily::Bernoulli),
            "poisson" | "count" => Ok(GlmFamily::Poisson),
            other => Err(Error::Parameter(format!("unknown family `{other}`"))),
        }
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn link_round_trip() {
        let cases = [
            (GlmFamily::Gaussian, vec![-3.0, 0.0, 2.5, 1e6]),
            (GlmFamily::Bernoulli, vec![1e-6, 0.01, 0.25, 0.5, 0.9, 0.999999]),
            (GlmFamily::Poisson, vec![1e-8, 0.1, 1.0, 4.0, 1e5]),
        ];
        for (fam, mus) in cases {
            for mu in mus {
                let back = fam.inverse_link(fam.link(mu));
                assert!((back - mu).abs() <= 1e-12 * mu.abs().max(1.0), "{fam} {mu} {back}");
            }
        }
    }

    #[test]
    fn canonical_irls_weights() {
        // canonical links: mu_eta == variance
        for eta in [-2.0, 0.0, 1.3] {
            let fam = GlmFamily::Bernoulli;
            let mu = fam.inverse_link(eta);
            assert!((fam.mu_eta(eta) - fam.variance(mu)).abs() < 1e-15);
            let fam = GlmFamily::Poisson;
            let mu = fam.inverse_link(eta);
            assert!((fam.mu_eta(eta) - fam.variance(mu)).abs() < 1e-12);
        }
    }

    #[test]
    fn parse_names() {
        assert_eq!("binomial".parse::<GlmFamily>().unwrap(), GlmFamily::Bernoulli);
        assert_eq!("Gaussian".parse::<GlmFamily>().unwrap(), GlmFamily::Gaussian);
        assert!("gamma".parse::<GlmFamily>().is_err());
    }

    #[test]
    fn logistic_is_stable() {
        assert_eq!(logistic(-800.0), 0.0);
        assert_eq!(logistic(800.0), 1.0);
        assert!((logistic(0.0) - 0.5).abs() < 1e-16);
    }
}
