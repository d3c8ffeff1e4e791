//! Exact and Monte Carlo randomization distributions.
//!
//! Replicate `r` under seed `s` always draws from counter-based stream
//! `(s, r)`, and every reduction runs in replicate order, so results do not
//! depend on how many worker threads ran the replications.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::design::{check_margin, enumerate_designs_with_cap, stream_rng, AssignmentSampler, DEFAULT_ENUM_CAP};
use crate::error::{Error, Result};
use crate::functionals::SmoothFunctional;
use crate::normal;
use crate::population::{mean, PopulationKind, PotentialPopulation};
use crate::variance::{
    arms_from_slice, delta_variance, neyman_plugin_variance, sample_from_slice, srs_plugin_variance,
    two_sided_quantile,
};

/// Largest tolerated share of failed replicates.
pub const MAX_FAILURE_RATE: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportPoint {
    pub value: f64,
    /// Number of assignments producing `value`.
    pub multiplicity: u64,
    pub probability: f64,
}

/// Distribution of an estimator over every assignment with a given margin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactDistribution {
    pub functional: String,
    pub margin: usize,
    pub count: u64,
    pub mean: f64,
    pub variance: f64,
    /// Distinct values in increasing order. Values are merged only when
    /// bitwise equal.
    pub support: Vec<SupportPoint>,
}

fn estimate_at(pop: &PotentialPopulation, f: &SmoothFunctional, z: &[bool]) -> Result<f64> {
    match pop.y1() {
        None => {
            let (mut sum, mut n) = (0.0, 0usize);
            for (v, &s) in pop.y0().iter().zip(z) {
                if s {
                    sum += v;
                    n += 1;
                }
            }
            f.evaluate(&[sum / n as f64])
        }
        Some(y1) => {
            let (mut s0, mut s1, mut n1) = (0.0, 0.0, 0usize);
            for ((c, t), &treated) in pop.y0().iter().zip(y1).zip(z) {
                if treated {
                    s1 += t;
                    n1 += 1;
                } else {
                    s0 += c;
                }
            }
            let n0 = z.len() - n1;
            f.evaluate(&[s0 / n0 as f64, s1 / n1 as f64])
        }
    }
}

fn check_arity(pop: &PotentialPopulation, f: &SmoothFunctional) -> Result<()> {
    let expected = match pop.kind() {
        PopulationKind::Survey => 1,
        PopulationKind::Experiment => 2,
    };
    if f.arity() != expected {
        return Err(Error::ArityMismatch {
            functional: f.name().to_string(),
            expected,
            got: f.arity(),
        });
    }
    Ok(())
}

pub fn exact_distribution(pop: &PotentialPopulation, f: &SmoothFunctional, margin: usize) -> Result<ExactDistribution> {
    exact_distribution_with_cap(pop, f, margin, DEFAULT_ENUM_CAP)
}

pub fn exact_distribution_with_cap(
    pop: &PotentialPopulation,
    f: &SmoothFunctional,
    margin: usize,
    cap: u64,
) -> Result<ExactDistribution> {
    check_arity(pop, f)?;
    check_margin(pop.n_units(), margin)?;
    let n_units = pop.n_units();
    let mut designs = enumerate_designs_with_cap(n_units, margin, cap)?;
    let mut values = Vec::with_capacity(designs.remaining() as usize);
    let mut z = vec![false; n_units];
    while let Some(positions) = designs.next_positions() {
        z.iter_mut().for_each(|b| *b = false);
        for &i in positions {
            z[i] = true;
        }
        let value = estimate_at(pop, f, &z).map_err(|e| Error::DomainAtAssignment {
            assignment: z.iter().map(|&b| if b { '1' } else { '0' }).collect(),
            source: Box::new(e),
        })?;
        values.push(value);
    }

    let count = values.len() as u64;
    let mu = mean(&values);
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / count as f64;

    values.sort_by(f64::total_cmp);
    let mut support: Vec<SupportPoint> = Vec::new();
    for v in values {
        match support.last_mut() {
            Some(last) if last.value.to_bits() == v.to_bits() => last.multiplicity += 1,
            _ => support.push(SupportPoint {
                value: v,
                multiplicity: 1,
                probability: 0.0,
            }),
        }
    }
    for point in &mut support {
        point.probability = point.multiplicity as f64 / count as f64;
    }

    Ok(ExactDistribution {
        functional: f.name().to_string(),
        margin,
        count,
        mean: mu,
        variance: var,
        support,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Replicate {
    pub index: u64,
    pub estimate: f64,
    pub plugin_variance: f64,
    /// `(estimate - g(true means)) / sqrt(true delta variance)`.
    pub standardized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateFailure {
    pub index: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationRun {
    pub functional: String,
    pub margin: usize,
    pub replications: u64,
    pub seed: u64,
    pub truth: f64,
    pub true_variance: f64,
    pub records: Vec<Replicate>,
    pub failures: Vec<ReplicateFailure>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReplicationOptions {
    /// Worker threads; `None` uses the global rayon pool. Never affects results.
    pub workers: Option<usize>,
}

pub fn replicate(
    pop: &PotentialPopulation,
    f: &SmoothFunctional,
    margin: usize,
    replications: u64,
    seed: u64,
) -> Result<ReplicationRun> {
    replicate_with(pop, f, margin, replications, seed, ReplicationOptions::default())
}

pub fn replicate_with(
    pop: &PotentialPopulation,
    f: &SmoothFunctional,
    margin: usize,
    replications: u64,
    seed: u64,
    options: ReplicationOptions,
) -> Result<ReplicationRun> {
    if replications == 0 {
        return Err(Error::InvalidArgument("at least one replication is required".into()));
    }
    check_arity(pop, f)?;
    let n_units = pop.n_units();
    check_margin(n_units, margin)?;
    match pop.kind() {
        PopulationKind::Survey if margin < 2 => return Err(Error::ArmTooSmall { arm: 1, size: margin }),
        PopulationKind::Experiment if margin < 2 => return Err(Error::ArmTooSmall { arm: 1, size: margin }),
        PopulationKind::Experiment if n_units - margin < 2 => {
            return Err(Error::ArmTooSmall {
                arm: 0,
                size: n_units - margin,
            })
        }
        _ => {}
    }

    let report = delta_variance(f, pop, margin)?;
    let truth = report.value_at_truth;
    let true_variance = report.quadratic_form;
    if !(true_variance > 0.0) {
        return Err(Error::ZeroTrueVariance);
    }
    let scale = true_variance.sqrt();
    let sampler = AssignmentSampler::new(n_units, margin)?;

    let one = |state: &mut (AssignmentSampler, Vec<bool>), index: u64| -> std::result::Result<Replicate, ReplicateFailure> {
        let (sampler, z) = state;
        sampler.draw_into(&mut stream_rng(seed, index), z);
        let outcome = match pop.y1() {
            None => sample_from_slice(pop.y0(), z).and_then(|obs| {
                let estimate = f.evaluate(&[obs.ybar])?;
                Ok((estimate, srs_plugin_variance(&obs, f)?.value))
            }),
            Some(y1) => arms_from_slice(pop.y0(), y1, z).and_then(|obs| {
                let estimate = f.evaluate(&obs.means())?;
                Ok((estimate, neyman_plugin_variance(&obs, f)?.value))
            }),
        };
        match outcome {
            Ok((estimate, plugin_variance)) => Ok(Replicate {
                index,
                estimate,
                plugin_variance,
                standardized: (estimate - truth) / scale,
            }),
            Err(e) => Err(ReplicateFailure {
                index,
                error: e.to_string(),
            }),
        }
    };

    let run = || -> Vec<std::result::Result<Replicate, ReplicateFailure>> {
        (0..replications)
            .into_par_iter()
            .map_init(|| (sampler.clone(), Vec::with_capacity(n_units)), one)
            .collect()
    };
    let outcomes = match options.workers {
        None => run(),
        Some(workers) => rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot start {workers} workers: {e}")))?
            .install(run),
    };

    let mut records = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(r) => records.push(r),
            Err(e) => failures.push(e),
        }
    }
    if failures.len() as f64 > MAX_FAILURE_RATE * replications as f64 {
        return Err(Error::FailureRateExceeded {
            failures: failures.len(),
            replications: replications as usize,
        });
    }

    Ok(ReplicationRun {
        functional: f.name().to_string(),
        margin,
        replications,
        seed,
        truth,
        true_variance,
        records,
        failures,
    })
}

/// Sup-distance between the empirical CDF of `draws` and the standard
/// normal CDF.
pub fn ks_distance(draws: &[f64]) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut sup = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let cdf = normal::cdf(x);
        let above = (i + 1) as f64 / n - cdf;
        let below = cdf - i as f64 / n;
        sup = sup.max(above).max(below);
    }
    Ok(sup.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloSummary {
    pub functional: String,
    pub margin: usize,
    pub replications: u64,
    pub failures: usize,
    pub seed: u64,
    pub truth: f64,
    pub true_variance: f64,
    pub estimates_mean: f64,
    pub estimates_var: f64,
    pub standardized_mean: f64,
    pub standardized_var: f64,
    pub plugin_variance_mean: f64,
    pub ks_distance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    /// Seconds spent replicating; left out of serialized output when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

fn mean_and_var(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (mut n, mut sum) = (0usize, 0.0);
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = sum / n as f64;
    if n == 1 {
        return (m, 0.0);
    }
    let ss: f64 = values.map(|v| (v - m) * (v - m)).sum();
    (m, ss / (n - 1) as f64)
}

/// Moments, KS distance and (when `level` is given) the share of plug-in
/// intervals covering the true value, over successful replicates.
pub fn summarize(run: &ReplicationRun, level: Option<f64>) -> Result<MonteCarloSummary> {
    if run.records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (estimates_mean, estimates_var) = mean_and_var(run.records.iter().map(|r| r.estimate));
    let (standardized_mean, standardized_var) = mean_and_var(run.records.iter().map(|r| r.standardized));
    let (plugin_variance_mean, _) = mean_and_var(run.records.iter().map(|r| r.plugin_variance));
    let standardized: Vec<f64> = run.records.iter().map(|r| r.standardized).collect();
    let coverage = match level {
        None => None,
        Some(level) => {
            let q = two_sided_quantile(level)?;
            let hits = run
                .records
                .iter()
                .filter(|r| (r.estimate - run.truth).abs() <= q * r.plugin_variance.sqrt())
                .count();
            Some(hits as f64 / run.records.len() as f64)
        }
    };
    Ok(MonteCarloSummary {
        functional: run.functional.clone(),
        margin: run.margin,
        replications: run.replications,
        failures: run.failures.len(),
        seed: run.seed,
        truth: run.truth,
        true_variance: run.true_variance,
        estimates_mean,
        estimates_var,
        standardized_mean,
        standardized_var,
        plugin_variance_mean,
        ks_distance: ks_distance(&standardized)?,
        level,
        coverage,
        wall_time: None,
    })
}

/// Replicates and summarizes without coverage.
pub fn simulate(
    pop: &PotentialPopulation,
    f: &SmoothFunctional,
    margin: usize,
    replications: u64,
    seed: u64,
    options: ReplicationOptions,
) -> Result<(ReplicationRun, MonteCarloSummary)> {
    let start = Instant::now();
    let run = replicate_with(pop, f, margin, replications, seed, options)?;
    let mut summary = summarize(&run, None)?;
    summary.wall_time = Some(start.elapsed().as_secs_f64());
    Ok((run, summary))
}

/// Coverage of `level` plug-in intervals for `g(true means)`.
pub fn coverage(
    pop: &PotentialPopulation,
    f: &SmoothFunctional,
    margin: usize,
    replications: u64,
    level: f64,
    seed: u64,
    options: ReplicationOptions,
) -> Result<(ReplicationRun, MonteCarloSummary)> {
    two_sided_quantile(level)?;
    let start = Instant::now();
    let run = replicate_with(pop, f, margin, replications, seed, options)?;
    let mut summary = summarize(&run, Some(level))?;
    summary.wall_time = Some(start.elapsed().as_secs_f64());
    Ok((run, summary))
}

/// `index,estimate,plugin_variance,standardized` rows for external plotting.
pub fn draws_csv(run: &ReplicationRun) -> String {
    let mut out = String::from("index,estimate,plugin_variance,standardized\n");
    for r in &run.records {
        out.push_str(&format!("{},{},{},{}\n", r.index, r.estimate, r.plugin_variance, r.standardized));
    }
    out
}
