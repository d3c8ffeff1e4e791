//! Smooth functions of (arm) means together with their exact gradients.
//!
//! Two-argument functionals always take `(control mean, treatment mean)`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Per-coordinate tolerance below which a gradient counts as vanishing.
pub const DEFAULT_DEGENERACY_TOL: f64 = 1e-8;

type EvalFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;
type DomainFn = dyn Fn(&[f64]) -> Option<usize> + Send + Sync;

/// Where a functional is defined.
#[derive(Clone)]
pub enum Domain {
    Everywhere,
    /// Every coordinate strictly positive.
    PositiveOrthant,
    /// Returns the index of the first offending coordinate, if any.
    Custom(Arc<DomainFn>),
}

impl Domain {
    pub fn violation(&self, point: &[f64]) -> Option<usize> {
        match self {
            Domain::Everywhere => point.iter().position(|v| !v.is_finite()),
            Domain::PositiveOrthant => point.iter().position(|&v| !(v > 0.0 && v.is_finite())),
            Domain::Custom(f) => f(point),
        }
    }
}

impl fmt::Debug for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Everywhere => f.write_str("Everywhere"),
            Domain::PositiveOrthant => f.write_str("PositiveOrthant"),
            Domain::Custom(_) => f.write_str("Custom"),
        }
    }
}

/// A differentiable `g: R^K -> R` with analytic gradient and domain.
#[derive(Clone)]
pub struct SmoothFunctional {
    name: String,
    arity: usize,
    eval: Arc<EvalFn>,
    grad: Arc<GradFn>,
    domain: Domain,
}

impl fmt::Debug for SmoothFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SmoothFunctional")
            .field("name", &self.name)
            .field("arity", &self.arity)
            .field("domain", &self.domain)
            .finish()
    }
}

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: [&str; 4] = ["square", "difference", "ratio", "identity"];

impl SmoothFunctional {
    /// User extension point: supply `eval`, its exact gradient and a domain.
    pub fn new<E, G>(name: impl Into<String>, arity: usize, eval: E, grad: G, domain: Domain) -> Self
    where
        E: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            arity,
            eval: Arc::new(eval),
            grad: Arc::new(grad),
            domain,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn check_domain(&self, point: &[f64]) -> Result<()> {
        if point.len() != self.arity {
            return Err(Error::ArityMismatch {
                functional: self.name.clone(),
                expected: self.arity,
                got: point.len(),
            });
        }
        match self.domain.violation(point) {
            None => Ok(()),
            Some(coordinate) => Err(Error::DomainViolation {
                functional: self.name.clone(),
                coordinate,
                value: point.get(coordinate).copied().unwrap_or(f64::NAN),
            }),
        }
    }

    pub fn evaluate(&self, point: &[f64]) -> Result<f64> {
        self.check_domain(point)?;
        Ok((self.eval)(point))
    }

    pub fn gradient(&self, point: &[f64]) -> Result<Vec<f64>> {
        self.check_domain(point)?;
        Ok((self.grad)(point))
    }

    /// Central differences with the same `step` on every coordinate. Every
    /// perturbed point must lie in the domain.
    pub fn fd_gradient(&self, point: &[f64], step: f64) -> Result<Vec<f64>> {
        self.check_domain(point)?;
        let mut probe = point.to_vec();
        let mut out = Vec::with_capacity(point.len());
        for k in 0..point.len() {
            probe[k] = point[k] + step;
            let up = self.evaluate(&probe)?;
            probe[k] = point[k] - step;
            let down = self.evaluate(&probe)?;
            probe[k] = point[k];
            out.push((up - down) / (2.0 * step));
        }
        Ok(out)
    }
}

/// True when every gradient component is below `tol` in absolute value.
pub fn is_degenerate(gradient: &[f64], tol: f64) -> bool {
    gradient.iter().all(|g| g.abs() < tol)
}

pub fn builtin(name: &str) -> Result<SmoothFunctional> {
    let f = match name {
        "identity" => SmoothFunctional::new("identity", 1, |x| x[0], |_| vec![1.0], Domain::Everywhere),
        "square" => SmoothFunctional::new(
            "square",
            1,
            |x| x[0] * x[0],
            |x| vec![2.0 * x[0]],
            Domain::Everywhere,
        ),
        "difference" => SmoothFunctional::new(
            "difference",
            2,
            |x| x[1] - x[0],
            |_| vec![-1.0, 1.0],
            Domain::Everywhere,
        ),
        "ratio" => SmoothFunctional::new(
            "ratio",
            2,
            |x| x[1] / x[0],
            |x| vec![-x[1] / (x[0] * x[0]), 1.0 / x[0]],
            Domain::PositiveOrthant,
        ),
        other => return Err(Error::UnknownFunctional(other.to_string())),
    };
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    #[test]
    fn builtin_values() {
        let ratio = builtin("ratio").unwrap();
        assert_eq!(ratio.evaluate(&[2.5, 5.0]).unwrap(), 2.0);
        let g = ratio.gradient(&[2.5, 5.0]).unwrap();
        assert_relative_eq!(g[0], -0.8, max_relative = 1e-15);
        assert_relative_eq!(g[1], 0.4, max_relative = 1e-15);
        assert_eq!(builtin("square").unwrap().gradient(&[2.5]).unwrap(), vec![5.0]);
        assert_eq!(builtin("square").unwrap().gradient(&[0.0]).unwrap(), vec![0.0]);
        let diff = builtin("difference").unwrap();
        assert_eq!(diff.gradient(&[3.0, 9.0]).unwrap(), vec![-1.0, 1.0]);
        assert_eq!(diff.gradient(&[-1e9, 17.0]).unwrap(), vec![-1.0, 1.0]);
        assert_eq!(builtin("identity").unwrap().evaluate(&[7.0]).unwrap(), 7.0);
        assert!(matches!(builtin("cube"), Err(Error::UnknownFunctional(_))));
    }

    #[test]
    fn domain_errors_name_the_coordinate() {
        let ratio = builtin("ratio").unwrap();
        match ratio.evaluate(&[0.0, 1.0]).unwrap_err() {
            Error::DomainViolation { coordinate, .. } => assert_eq!(coordinate, 0),
            other => panic!("unexpected {other:?}"),
        }
        match ratio.gradient(&[1.0, -2.0]).unwrap_err() {
            Error::DomainViolation { coordinate, .. } => assert_eq!(coordinate, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(ratio.evaluate(&[1.0]), Err(Error::ArityMismatch { .. })));
    }

    #[test]
    fn finite_differences() {
        let ratio = builtin("ratio").unwrap();
        let fd = ratio.fd_gradient(&[2.5, 5.0], 1e-6).unwrap();
        assert_relative_eq!(fd[0], -0.8, max_relative = 1e-6);
        assert_relative_eq!(fd[1], 0.4, max_relative = 1e-6);
        let fd = builtin("square").unwrap().fd_gradient(&[3.0], 1e-6).unwrap();
        assert!((fd[0] - 6.0).abs() <= 1e-8);
        assert!(matches!(
            ratio.fd_gradient(&[1e-7, 1.0], 1e-6),
            Err(Error::DomainViolation { coordinate: 0, .. })
        ));
    }

    #[test]
    fn degeneracy_flag() {
        let g = builtin("square").unwrap().gradient(&[0.0]).unwrap();
        assert!(is_degenerate(&g, DEFAULT_DEGENERACY_TOL));
        assert!(!is_degenerate(&[0.0, 1e-3], DEFAULT_DEGENERACY_TOL));
    }

    #[test]
    fn user_defined_functional() {
        // log ratio, g(c, t) = ln t - ln c
        let f = SmoothFunctional::new(
            "log_ratio",
            2,
            |x| x[1].ln() - x[0].ln(),
            |x| vec![-1.0 / x[0], 1.0 / x[1]],
            Domain::PositiveOrthant,
        );
        let p = [1.5, 4.0];
        let g = f.gradient(&p).unwrap();
        let fd = f.fd_gradient(&p, 1e-6).unwrap();
        for k in 0..2 {
            assert!((g[k] - fd[k]).abs() / (1.0 + g[k].abs()) <= 1e-6);
        }
    }

    #[test]
    fn analytic_matches_finite_difference_on_random_points() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(20);
        for name in BUILTIN_NAMES {
            let f = builtin(name).unwrap();
            for _ in 0..1000 {
                let point: Vec<f64> = (0..f.arity())
                    .map(|_| match f.domain() {
                        Domain::PositiveOrthant => rng.random_range(0.1..10.0),
                        _ => rng.random_range(-10.0..10.0),
                    })
                    .collect();
                let g = f.gradient(&point).unwrap();
                for k in 0..point.len() {
                    let step = 1e-6 * (1.0 + point[k].abs());
                    let mut up = point.clone();
                    let mut down = point.clone();
                    up[k] += step;
                    down[k] -= step;
                    let fd = (f.evaluate(&up).unwrap() - f.evaluate(&down).unwrap()) / (2.0 * step);
                    assert!((g[k] - fd).abs() / (1.0 + g[k].abs()) <= 1e-6, "{name} at {point:?}");
                }
            }
        }
    }

    #[test]
    fn invariance_identities() {
        let ratio = builtin("ratio").unwrap();
        let diff = builtin("difference").unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (c, t) = (rng.random_range(0.1..10.0), rng.random_range(0.1..10.0));
            let lambda = rng.random_range(0.01..100.0);
            let a = rng.random_range(-5.0..5.0);
            assert_relative_eq!(
                ratio.evaluate(&[lambda * c, lambda * t]).unwrap(),
                ratio.evaluate(&[c, t]).unwrap(),
                max_relative = 1e-14
            );
            assert_relative_eq!(
                diff.evaluate(&[c + a, t + a]).unwrap(),
                diff.evaluate(&[c, t]).unwrap(),
                epsilon = 1e-12
            );
        }
    }
}
