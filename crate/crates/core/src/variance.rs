//! Design variances, the delta-method quadratic form and the conservative
//! Neyman plug-in estimator.
//!
//! Every finite-population variance uses the `N - 1` denominator. The
//! limiting correlation matrix of the arm means is replaced by the exact
//! finite-population covariance, so every "delta variance" here is a
//! finite-N plug-in rather than a limit.

use serde::Serialize;

use crate::design::{check_margin, Assignment};
use crate::error::{Error, Result};
use crate::functionals::{is_degenerate, SmoothFunctional, DEFAULT_DEGENERACY_TOL};
use crate::normal;
use crate::population::{self, mean, transform_outcomes, variance, PopulationKind, PotentialPopulation};

/// `Var(sample mean) = (1/n - 1/N) v_N` under simple random sampling.
pub fn true_mean_variance(pop: &PotentialPopulation, n: usize) -> Result<f64> {
    let y = pop.require_survey()?;
    srs_mean_variance(y, n)
}

fn srs_mean_variance(y: &[f64], n: usize) -> Result<f64> {
    let big_n = y.len();
    check_margin(big_n, n)?;
    Ok((1.0 / n as f64 - 1.0 / big_n as f64) * variance(y))
}

/// Covariance matrix of `(control mean, treatment mean)` under complete
/// randomization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArmCovariance {
    pub var0: f64,
    pub var1: f64,
    pub cov: f64,
}

impl ArmCovariance {
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        [[self.var0, self.cov], [self.cov, self.var1]]
    }

    /// Correlation of the two arm means; `None` when either variance is zero.
    pub fn correlation(&self) -> Option<f64> {
        let denom = (self.var0 * self.var1).sqrt();
        (denom > 0.0).then(|| (self.cov / denom).clamp(-1.0, 1.0))
    }

    /// `g^T C g`.
    pub fn quadratic_form(&self, g: [f64; 2]) -> f64 {
        g[0] * g[0] * self.var0 + 2.0 * g[0] * g[1] * self.cov + g[1] * g[1] * self.var1
    }
}

pub fn arm_covariance_matrix(pop: &PotentialPopulation, n1: usize) -> Result<ArmCovariance> {
    let (y0, y1) = pop.arms()?;
    let big_n = pop.n_units();
    check_margin(big_n, n1)?;
    let n0 = big_n - n1;
    let inv_n = 1.0 / big_n as f64;
    Ok(ArmCovariance {
        var0: (1.0 / n0 as f64 - inv_n) * variance(y0),
        var1: (1.0 / n1 as f64 - inv_n) * variance(y1),
        cov: -population::covariance(y1, y0) * inv_n,
    })
}

/// Randomization variance of the difference in means,
/// `v0/n0 + v1/n1 - S_tau/N` with `S_tau` the variance of unit effects.
pub fn neyman_difference_variance(pop: &PotentialPopulation, n1: usize) -> Result<f64> {
    let (y0, y1) = pop.arms()?;
    let big_n = pop.n_units();
    check_margin(big_n, n1)?;
    let n0 = big_n - n1;
    let effects: Vec<f64> = y1.iter().zip(y0).map(|(t, c)| t - c).collect();
    Ok(variance(y0) / n0 as f64 + variance(y1) / n1 as f64 - variance(&effects) / big_n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceComponents {
    pub term_v0: f64,
    pub term_v1: f64,
    pub negative_term: f64,
}

/// Delta-method variance of `g(estimator)` with its three algebraically
/// equivalent representations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaVarianceReport {
    pub functional: String,
    pub kind: PopulationKind,
    pub n_units: usize,
    pub margin: usize,
    /// True means at which the gradient is taken (control, treatment).
    pub evaluated_at: Vec<f64>,
    pub value_at_truth: f64,
    pub gradient_at: Vec<f64>,
    /// `grad^T C grad` with `C` the finite-population covariance.
    pub quadratic_form: f64,
    /// `term_v0 + term_v1 - negative_term`.
    pub expanded: f64,
    /// Difference-in-means variance on gradient-scaled outcomes.
    pub transformed: f64,
    pub components: VarianceComponents,
    pub degenerate_gradient: bool,
    pub covariance_source: &'static str,
}

pub fn delta_variance(f: &SmoothFunctional, pop: &PotentialPopulation, margin: usize) -> Result<DeltaVarianceReport> {
    delta_variance_with_tol(f, pop, margin, DEFAULT_DEGENERACY_TOL)
}

/// As [`delta_variance`] with an explicit gradient-degeneracy tolerance.
///
/// Survey populations take a one-argument functional of the sample mean
/// (`margin` = sample size); experiment populations take a two-argument
/// functional of `(control mean, treatment mean)` (`margin` = treated count).
pub fn delta_variance_with_tol(
    f: &SmoothFunctional,
    pop: &PotentialPopulation,
    margin: usize,
    tol: f64,
) -> Result<DeltaVarianceReport> {
    let big_n = pop.n_units();
    check_margin(big_n, margin)?;
    match pop.kind() {
        PopulationKind::Survey => survey_delta(f, pop, margin, tol),
        PopulationKind::Experiment => experiment_delta(f, pop, margin, tol),
    }
    .map(|mut r| {
        r.quadratic_form = r.quadratic_form.max(0.0);
        r
    })
}

fn survey_delta(f: &SmoothFunctional, pop: &PotentialPopulation, n: usize, tol: f64) -> Result<DeltaVarianceReport> {
    let y = pop.y0();
    let big_n = y.len() as f64;
    let truth = [mean(y)];
    let value = f.evaluate(&truth)?;
    let grad = f.gradient(&truth)?;
    let g = grad[0];
    let v = variance(y);

    let quadratic_form = g * g * srs_mean_variance(y, n)?;
    let components = VarianceComponents {
        term_v0: g * g * v / n as f64,
        term_v1: 0.0,
        negative_term: g * g * v / big_n,
    };
    let scaled: Vec<f64> = y.iter().map(|x| g * x).collect();
    let transformed = srs_mean_variance(&scaled, n)?;

    Ok(DeltaVarianceReport {
        functional: f.name().to_string(),
        kind: PopulationKind::Survey,
        n_units: y.len(),
        margin: n,
        evaluated_at: truth.to_vec(),
        value_at_truth: value,
        degenerate_gradient: is_degenerate(&grad, tol),
        gradient_at: grad,
        quadratic_form,
        expanded: components.term_v0 + components.term_v1 - components.negative_term,
        transformed,
        components,
        covariance_source: "finite-N plug-in",
    })
}

fn experiment_delta(f: &SmoothFunctional, pop: &PotentialPopulation, n1: usize, tol: f64) -> Result<DeltaVarianceReport> {
    let (y0, y1) = pop.arms()?;
    let big_n = pop.n_units();
    let n0 = big_n - n1;
    let truth = [mean(y0), mean(y1)];
    let value = f.evaluate(&truth)?;
    let grad = f.gradient(&truth)?;
    let (g0, g1) = (grad[0], grad[1]);

    let quadratic_form = arm_covariance_matrix(pop, n1)?.quadratic_form([g0, g1]);

    let center = g1 * truth[1] + g0 * truth[0];
    let centered_sq: f64 = y0
        .iter()
        .zip(y1)
        .map(|(c, t)| {
            let d = g1 * t + g0 * c - center;
            d * d
        })
        .sum();
    let components = VarianceComponents {
        term_v0: g0 * g0 * variance(y0) / n0 as f64,
        term_v1: g1 * g1 * variance(y1) / n1 as f64,
        negative_term: centered_sq / (big_n as f64 * (big_n - 1) as f64),
    };

    // The expansion pairs the arms through g1*Y(1) + g0*Y(0); as a difference
    // in means that is Y~(1) - Y~(0) with Y~(0) = -g0*Y(0).
    let transformed = neyman_difference_variance(&transform_outcomes(pop, -g0, g1)?, n1)?;

    Ok(DeltaVarianceReport {
        functional: f.name().to_string(),
        kind: PopulationKind::Experiment,
        n_units: big_n,
        margin: n1,
        evaluated_at: truth.to_vec(),
        value_at_truth: value,
        degenerate_gradient: is_degenerate(&grad, tol),
        gradient_at: grad,
        quadratic_form,
        expanded: components.term_v0 + components.term_v1 - components.negative_term,
        transformed,
        components,
        covariance_source: "finite-N plug-in",
    })
}

/// Closed-form delta variance of the ratio of treatment to control means.
pub fn ratio_variance(pop: &PotentialPopulation, n1: usize) -> Result<f64> {
    let (y0, y1) = pop.arms()?;
    for (arm, column) in [(0, y0), (1, y1)] {
        if let Some(unit) = column.iter().position(|&v| v <= 0.0) {
            return Err(Error::NonPositiveOutcome {
                unit,
                arm,
                value: column[unit],
            });
        }
    }
    let big_n = pop.n_units();
    check_margin(big_n, n1)?;
    let n0 = big_n - n1;
    let (m0, m1) = (mean(y0), mean(y1));
    let tau = m1 / m0;
    let lead = (variance(y1) / n1 as f64 + tau * tau * variance(y0) / n0 as f64) / (m0 * m0);
    let spread: f64 = y0
        .iter()
        .zip(y1)
        .map(|(c, t)| {
            let d = t / c - tau;
            (c * c) / (m0 * m0) * d * d
        })
        .sum();
    Ok(lead - spread / (big_n as f64 * (big_n - 1) as f64))
}

/// Observed arm means and within-arm sample variances (denominator `n_z - 1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObservedArms {
    pub ybar0: f64,
    pub ybar1: f64,
    pub n0: usize,
    pub n1: usize,
    pub vhat0: f64,
    pub vhat1: f64,
}

impl ObservedArms {
    pub fn means(&self) -> [f64; 2] {
        [self.ybar0, self.ybar1]
    }
}

pub fn observed_arms(pop: &PotentialPopulation, z: &Assignment) -> Result<ObservedArms> {
    let (y0, y1) = pop.arms()?;
    if z.n_units() != pop.n_units() {
        return Err(Error::InvalidArgument(format!(
            "assignment has {} units, population has {}",
            z.n_units(),
            pop.n_units()
        )));
    }
    arms_from_slice(y0, y1, z.as_slice())
}

pub(crate) fn arms_from_slice(y0: &[f64], y1: &[f64], z: &[bool]) -> Result<ObservedArms> {
    let n1 = z.iter().filter(|&&b| b).count();
    let n0 = z.len() - n1;
    if n1 < 2 {
        return Err(Error::ArmTooSmall { arm: 1, size: n1 });
    }
    if n0 < 2 {
        return Err(Error::ArmTooSmall { arm: 0, size: n0 });
    }
    let (mut s0, mut s1) = (0.0, 0.0);
    for ((&t, &c), &treated) in y1.iter().zip(y0).zip(z) {
        if treated {
            s1 += t;
        } else {
            s0 += c;
        }
    }
    let (ybar0, ybar1) = (s0 / n0 as f64, s1 / n1 as f64);
    let (mut q0, mut q1) = (0.0, 0.0);
    for ((&t, &c), &treated) in y1.iter().zip(y0).zip(z) {
        if treated {
            q1 += (t - ybar1) * (t - ybar1);
        } else {
            q0 += (c - ybar0) * (c - ybar0);
        }
    }
    Ok(ObservedArms {
        ybar0,
        ybar1,
        n0,
        n1,
        vhat0: q0 / (n0 - 1) as f64,
        vhat1: q1 / (n1 - 1) as f64,
    })
}

/// Sample mean and sample variance of a simple random sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObservedSample {
    pub ybar: f64,
    pub n: usize,
    pub n_units: usize,
    pub vhat: f64,
}

pub fn observed_sample(pop: &PotentialPopulation, z: &Assignment) -> Result<ObservedSample> {
    let y = pop.require_survey()?;
    if z.n_units() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "sample indicator has {} units, population has {}",
            z.n_units(),
            y.len()
        )));
    }
    sample_from_slice(y, z.as_slice())
}

pub(crate) fn sample_from_slice(y: &[f64], z: &[bool]) -> Result<ObservedSample> {
    let n = z.iter().filter(|&&b| b).count();
    if n < 2 {
        return Err(Error::ArmTooSmall { arm: 1, size: n });
    }
    let sum: f64 = y.iter().zip(z).filter(|(_, &s)| s).map(|(v, _)| v).sum();
    let ybar = sum / n as f64;
    let ss: f64 = y
        .iter()
        .zip(z)
        .filter(|(_, &s)| s)
        .map(|(v, _)| (v - ybar) * (v - ybar))
        .sum();
    Ok(ObservedSample {
        ybar,
        n,
        n_units: y.len(),
        vhat: ss / (n - 1) as f64,
    })
}

/// Plug-in variance estimate with the degeneracy flag of the gradient used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PluginVariance {
    pub value: f64,
    pub degenerate_gradient: bool,
}

/// Conservative Neyman-style estimate: the negative term is dropped and the
/// gradient is taken at the observed means.
pub fn neyman_plugin_variance(obs: &ObservedArms, f: &SmoothFunctional) -> Result<PluginVariance> {
    let g = f.gradient(&obs.means())?;
    Ok(PluginVariance {
        value: g[0] * g[0] * obs.vhat0 / obs.n0 as f64 + g[1] * g[1] * obs.vhat1 / obs.n1 as f64,
        degenerate_gradient: is_degenerate(&g, DEFAULT_DEGENERACY_TOL),
    })
}

/// `g'(ybar)^2 (1/n - 1/N) vhat`, unbiased for the sampling variance of the
/// mean when `g` is linear.
pub fn srs_plugin_variance(obs: &ObservedSample, f: &SmoothFunctional) -> Result<PluginVariance> {
    let g = f.gradient(&[obs.ybar])?;
    let fpc = 1.0 / obs.n as f64 - 1.0 / obs.n_units as f64;
    Ok(PluginVariance {
        value: g[0] * g[0] * fpc * obs.vhat,
        degenerate_gradient: is_degenerate(&g, DEFAULT_DEGENERACY_TOL),
    })
}

pub fn standardized_statistic(estimate: f64, truth: f64, variance: f64) -> Result<f64> {
    if !(variance > 0.0) {
        return Err(Error::NonPositiveVariance(variance));
    }
    Ok((estimate - truth) / variance.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// Two-sided normal-theory interval `estimate +/- q sqrt(variance_hat)`.
pub fn confidence_interval(estimate: f64, variance_hat: f64, level: f64) -> Result<Interval> {
    let q = two_sided_quantile(level)?;
    if !(variance_hat >= 0.0) {
        return Err(Error::InvalidArgument(format!("variance estimate {variance_hat} is negative")));
    }
    let half = q * variance_hat.sqrt();
    Ok(Interval {
        lower: estimate - half,
        upper: estimate + half,
    })
}

pub(crate) fn two_sided_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidLevel(level));
    }
    normal::quantile(0.5 + level / 2.0)
}
