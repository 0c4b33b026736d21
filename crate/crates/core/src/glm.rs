//! Exponential-family links, variance functions and Pearson residuals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::CompensatedSum;

const MU_EPS: f64 = 1e-8;

/// Supported canonical family/link pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Gaussian with identity link.
    Gaussian,
    /// Binomial proportions with logit link; the observation weight is the denominator.
    Binomial,
    /// Poisson with log link.
    Poisson,
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" | "gaussian/identity" => Ok(Family::Gaussian),
            "binomial" | "binomial/logit" => Ok(Family::Binomial),
            "poisson" | "poisson/log" => Ok(Family::Poisson),
            other => Err(Error::InvalidConfig(format!("unknown family `{other}`"))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Gaussian => "gaussian",
            Family::Binomial => "binomial",
            Family::Poisson => "poisson",
        })
    }
}

impl Family {
    pub fn link_name(self) -> &'static str {
        match self {
            Family::Gaussian => "identity",
            Family::Binomial => "logit",
            Family::Poisson => "log",
        }
    }

    /// `g(μ)`.
    pub fn link(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => mu,
            Family::Binomial => {
                let m = mu.clamp(MU_EPS, 1.0 - MU_EPS);
                (m / (1.0 - m)).ln()
            }
            Family::Poisson => mu.max(MU_EPS).ln(),
        }
    }

    /// `(μ, dμ/dη, V(μ))` at one linear predictor value.
    pub fn eval(self, eta: f64) -> (f64, f64, f64) {
        match self {
            Family::Gaussian => (eta, 1.0, 1.0),
            Family::Binomial => {
                let mu = (1.0 / (1.0 + (-eta).exp())).clamp(MU_EPS, 1.0 - MU_EPS);
                let v = mu * (1.0 - mu);
                (mu, v, v)
            }
            Family::Poisson => {
                let mu = eta.exp().max(MU_EPS);
                (mu, mu, mu)
            }
        }
    }

    pub fn variance(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Binomial => {
                let m = mu.clamp(MU_EPS, 1.0 - MU_EPS);
                m * (1.0 - m)
            }
            Family::Poisson => mu.max(MU_EPS),
        }
    }

    /// Quasi-likelihood contribution of one observation with unit scale.
    pub fn quasi_likelihood(self, y: f64, mu: f64, weight: f64) -> f64 {
        match self {
            Family::Gaussian => -0.5 * weight * (y - mu) * (y - mu),
            Family::Binomial => {
                let m = mu.clamp(MU_EPS, 1.0 - MU_EPS);
                weight * (y * m.ln() + (1.0 - y) * (1.0 - m).ln())
            }
            Family::Poisson => {
                let m = mu.max(MU_EPS);
                weight * (y * m.ln() - m)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyEval {
    pub mu: Vec<f64>,
    pub dmu_deta: Vec<f64>,
    pub var_mu: Vec<f64>,
}

pub fn family_eval(family: Family, eta: &[f64]) -> FamilyEval {
    let mut out = FamilyEval {
        mu: Vec::with_capacity(eta.len()),
        dmu_deta: Vec::with_capacity(eta.len()),
        var_mu: Vec::with_capacity(eta.len()),
    };
    for &e in eta {
        let (m, d, v) = family.eval(e);
        out.mu.push(m);
        out.dmu_deta.push(d);
        out.var_mu.push(v);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBundle {
    pub pearson: Vec<f64>,
    pub dispersion: f64,
}

/// Pearson residuals with unit prior weights.
pub fn pearson(family: Family, y: &[f64], mu: &[f64], p_effective: f64) -> Result<ResidualBundle> {
    pearson_weighted(family, y, mu, None, p_effective)
}

/// `r = √w (y − μ)/√V(μ)`, `φ̂ = Σr² / (N − p_effective)`.
///
/// The residual degrees of freedom are floored at 1.
pub fn pearson_weighted(
    family: Family,
    y: &[f64],
    mu: &[f64],
    weights: Option<&[f64]>,
    p_effective: f64,
) -> Result<ResidualBundle> {
    if y.len() != mu.len() || weights.is_some_and(|w| w.len() != y.len()) {
        return Err(Error::DataShapeMismatch { expected: y.len(), found: mu.len() });
    }
    let mut r = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        let v = family.variance(mu[i]);
        if !(v >= 1e-12) {
            return Err(Error::DegenerateVariance { index: i });
        }
        let w = weights.map_or(1.0, |w| w[i]);
        r.push((y[i] - mu[i]) * (w / v).sqrt());
    }
    let ss: CompensatedSum = r.iter().map(|x| x * x).collect();
    let df = (y.len() as f64 - p_effective).max(1.0);
    Ok(ResidualBundle { pearson: r, dispersion: ss.value() / df })
}
