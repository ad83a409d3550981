use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Conditional response distribution with its canonical link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Poisson,
    Bernoulli,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Poisson => "poisson",
            Family::Bernoulli => "bernoulli",
        }
    }

    pub fn link_name(self) -> &'static str {
        match self {
            Family::Gaussian => "identity",
            Family::Poisson => "log",
            Family::Bernoulli => "logit",
        }
    }

    pub fn linkinv(self, eta: f64) -> f64 {
        match self {
            Family::Gaussian => eta,
            Family::Poisson => eta.exp(),
            Family::Bernoulli => {
                if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                }
            }
        }
    }

    pub fn link(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => mu,
            Family::Poisson => mu.ln(),
            Family::Bernoulli => (mu / (1.0 - mu)).ln(),
        }
    }

    /// Variance function, which for canonical links is also `dμ/dη` and the
    /// IRLS weight.
    pub fn variance(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Poisson => mu,
            Family::Bernoulli => mu * (1.0 - mu),
        }
    }

    /// Checks that every response value is in the support.
    pub fn validate(self, y: &[f64]) -> Result<()> {
        let bad = match self {
            Family::Gaussian => y.iter().position(|v| !v.is_finite()),
            Family::Poisson => y.iter().position(|&v| !(v >= 0.0 && v.fract() == 0.0 && v.is_finite())),
            Family::Bernoulli => y.iter().position(|&v| v != 0.0 && v != 1.0),
        };
        match bad {
            Some(i) => Err(Error::Data(format!(
                "response value {} at row {} is invalid for the {} family",
                y[i],
                i + 1,
                self.name()
            ))),
            None => Ok(()),
        }
    }

    /// `log f(y | η)` for the non-Gaussian families.
    pub fn log_density(self, y: f64, eta: f64) -> f64 {
        match self {
            Family::Gaussian => unreachable!("gaussian density needs a scale"),
            Family::Poisson => {
                let mu = eta.exp();
                if y == 0.0 {
                    -mu
                } else {
                    y * eta - mu - ln_factorial(y)
                }
            }
            Family::Bernoulli => y * eta - softplus(eta),
        }
    }

    /// `-2 Σ log f(y_i | η_i)`
    pub fn deviance_sum(self, y: &[f64], eta: &[f64]) -> f64 {
        -2.0 * y.iter().zip(eta).map(|(&yi, &ei)| self.log_density(yi, ei)).sum::<f64>()
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(Family::Gaussian),
            "poisson" => Ok(Family::Poisson),
            "bernoulli" | "binomial" => Ok(Family::Bernoulli),
            other => Err(Error::Unsupported(format!("family `{other}`"))),
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn ln_factorial(y: f64) -> f64 {
    let k = y as u64;
    (2..=k).map(|i| (i as f64).ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn densities() {
        let f = Family::Poisson;
        // dpois(3, 2) = 0.180447...
        assert!((f.log_density(3.0, 2f64.ln()) - 0.18044704431548356f64.ln()).abs() < 1e-12);
        assert_eq!(f.log_density(0.0, 0.0), -1.0);
        let b = Family::Bernoulli;
        assert!((b.log_density(1.0, 0.3) - b.linkinv(0.3).ln()).abs() < 1e-14);
        assert!((b.log_density(0.0, 0.3) - (1.0 - b.linkinv(0.3)).ln()).abs() < 1e-14);
        assert!(b.log_density(0.0, 800.0).is_finite());
    }

    #[test]
    fn link_round_trip() {
        for f in [Family::Gaussian, Family::Poisson, Family::Bernoulli] {
            for eta in [-3.0, -0.2, 0.0, 1.5] {
                assert!((f.link(f.linkinv(eta)) - eta).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn validation() {
        assert!(Family::Poisson.validate(&[0.0, 3.0]).is_ok());
        assert!(Family::Poisson.validate(&[1.5]).is_err());
        assert!(Family::Bernoulli.validate(&[2.0]).is_err());
        assert!("binomial".parse::<Family>().is_ok());
        assert!("gamma".parse::<Family>().is_err());
    }
}
