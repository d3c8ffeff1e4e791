//! Regularity-condition diagnostics along sequences of growing populations.
//!
//! Nothing here proves a limit. Traces report finite-k values and simple
//! trend verdicts that can be checked against exact arithmetic.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::design::{check_margin, sample_size, stream_rng};
use crate::error::{Error, Result};
use crate::population::{max_sq_deviation, variance, PopulationKind, PotentialPopulation};
use crate::variance::{arm_covariance_matrix, true_mean_variance};

/// `k` back-to-back copies of `base`.
pub fn tile_population(base: &PotentialPopulation, k: usize) -> Result<PotentialPopulation> {
    if k == 0 {
        return Err(Error::InvalidArgument("tiling factor must be at least 1".into()));
    }
    let repeat = |y: &[f64]| -> Vec<f64> { y.iter().copied().cycle().take(y.len() * k).collect() };
    let tiled = match base.y1() {
        None => PotentialPopulation::survey(repeat(base.y0()))?,
        Some(y1) => PotentialPopulation::experiment(repeat(base.y0()), repeat(y1))?,
    };
    match base.labels() {
        Some(labels) => tiled.with_labels(labels.iter().cycle().take(labels.len() * k).cloned().collect()),
        None => Ok(tiled),
    }
}

/// `m_N / (min(n, N - n) v_N)` for a survey population.
pub fn univariate_condition(pop: &PotentialPopulation, n: usize) -> Result<f64> {
    let y = pop.require_survey()?;
    let big_n = y.len();
    check_margin(big_n, n)?;
    let v = variance(y);
    if !(v > 0.0) {
        return Err(Error::ConstantPopulation);
    }
    Ok(max_sq_deviation(y) / (n.min(big_n - n) as f64 * v))
}

/// Two-arm analogue: `max_z m_z / n_z^2` over
/// `(1/n1 - 1/N) v1 + (1/n0 - 1/N) v0`.
pub fn bivariate_condition(pop: &PotentialPopulation, n1: usize) -> Result<f64> {
    let (y0, y1) = pop.arms()?;
    let big_n = pop.n_units();
    check_margin(big_n, n1)?;
    let n0 = big_n - n1;
    let inv_n = 1.0 / big_n as f64;
    let denom = (1.0 / n1 as f64 - inv_n) * variance(y1) + (1.0 / n0 as f64 - inv_n) * variance(y0);
    if !(denom > 0.0) {
        return Err(Error::ConstantPopulation);
    }
    let arm0 = max_sq_deviation(y0) / (n0 as f64 * n0 as f64);
    let arm1 = max_sq_deviation(y1) / (n1 as f64 * n1 as f64);
    Ok(arm0.max(arm1) / denom)
}

/// Maps a population size to a sample size / treated count.
#[derive(Clone)]
pub enum DesignRule {
    /// `ceil(p N)`, clamped to `[1, N - 1]`.
    CeilProportion(f64),
    /// `p N`, which must be an integer.
    ExactProportion(f64),
    Custom(Arc<dyn Fn(usize) -> Result<usize> + Send + Sync>),
}

impl DesignRule {
    pub fn margin(&self, n_units: usize) -> Result<usize> {
        let margin = match self {
            DesignRule::CeilProportion(p) => sample_size(n_units, *p)?,
            DesignRule::ExactProportion(p) => {
                if !(*p > 0.0 && *p < 1.0) {
                    return Err(Error::InvalidProportion(*p));
                }
                let exact = p * n_units as f64;
                let rounded = exact.round();
                if (exact - rounded).abs() > 1e-9 * exact.max(1.0) {
                    return Err(Error::InvalidArgument(format!("p N = {exact} is not an integer")));
                }
                rounded as usize
            }
            DesignRule::Custom(rule) => rule(n_units)?,
        };
        check_margin(n_units, margin)?;
        Ok(margin)
    }
}

impl fmt::Debug for DesignRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DesignRule::CeilProportion(p) => write!(f, "CeilProportion({p})"),
            DesignRule::ExactProportion(p) => write!(f, "ExactProportion({p})"),
            DesignRule::Custom(_) => f.write_str("Custom"),
        }
    }
}

type Generator = dyn Fn(usize) -> Result<PotentialPopulation> + Send + Sync;

/// Indexed family of populations whose size strictly increases with `k`.
#[derive(Clone)]
pub struct PopulationSequence {
    generator: Arc<Generator>,
    design_rule: DesignRule,
    description: String,
}

/// Parameters of the seeded lognormal growth scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LognormalSpec {
    /// Units per unit of `k`; population `k` has `k * base_units` units.
    pub base_units: usize,
    pub log_mean: f64,
    pub log_sd: f64,
    /// Treatment multiplies the control outcome by `exp(log_effect + effect_sd W)`.
    pub log_effect: f64,
    pub effect_sd: f64,
    pub seed: u64,
}

impl PopulationSequence {
    pub fn new<G>(description: impl Into<String>, design_rule: DesignRule, generator: G) -> Self
    where
        G: Fn(usize) -> Result<PotentialPopulation> + Send + Sync + 'static,
    {
        Self {
            generator: Arc::new(generator),
            design_rule,
            description: description.into(),
        }
    }

    /// Population `k` is `k` copies of `base`. Moments stay fixed (up to the
    /// `N - 1` denominator), which makes limits checkable exactly.
    pub fn tiled(base: PotentialPopulation, design_rule: DesignRule) -> Self {
        let description = format!("{} population of {} units tiled k times", base.kind(), base.n_units());
        Self::new(description, design_rule, move |k| tile_population(&base, k))
    }

    /// Positive experiment populations with i.i.d. lognormal control outcomes.
    pub fn lognormal(spec: LognormalSpec, design_rule: DesignRule) -> Self {
        let description = format!(
            "lognormal(mu = {}, sigma = {}) experiment, {} units per k, seed {}",
            spec.log_mean, spec.log_sd, spec.base_units, spec.seed
        );
        Self::new(description, design_rule, move |k| {
            if k == 0 || spec.base_units == 0 {
                return Err(Error::InvalidArgument("lognormal sequence needs k >= 1".into()));
            }
            let n = k * spec.base_units;
            let mut rng = stream_rng(spec.seed, k as u64);
            let mut y0 = Vec::with_capacity(n);
            let mut y1 = Vec::with_capacity(n);
            for _ in 0..n {
                let z: f64 = rng.sample(StandardNormal);
                let w: f64 = rng.sample(StandardNormal);
                let control = (spec.log_mean + spec.log_sd * z).exp();
                y0.push(control);
                y1.push(control * (spec.log_effect + spec.effect_sd * w).exp());
            }
            PotentialPopulation::experiment(y0, y1)
        })
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn design_rule(&self) -> &DesignRule {
        &self.design_rule
    }

    pub fn population(&self, k: usize) -> Result<PotentialPopulation> {
        (self.generator)(k)
    }
}

impl fmt::Debug for PopulationSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PopulationSequence")
            .field("description", &self.description)
            .field("design_rule", &self.design_rule)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceAux {
    /// `N Var(mean)` for surveys, `N Var(control mean)` for experiments.
    pub n_var0: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_var1: Option<f64>,
    /// Finite-N correlation of the two arm means.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correlation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub k: usize,
    pub n_units: usize,
    pub margin: usize,
    pub ratio: f64,
    pub aux: TraceAux,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionTrace {
    pub description: String,
    pub kind: PopulationKind,
    pub rows: Vec<TraceRow>,
    /// Condition ratio strictly decreasing over the requested `k`.
    pub ratio_decreasing: bool,
    /// Every `N Var` series ends below where it started and moved less than
    /// 5% (relative) over the final doubling of `k`.
    pub n_var_settling: bool,
}

impl ConditionTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,n_units,margin,ratio,n_var0,n_var1,correlation\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.k,
                r.n_units,
                r.margin,
                r.ratio,
                r.aux.n_var0,
                opt(r.aux.n_var1),
                opt(r.aux.correlation)
            ));
        }
        out
    }
}

fn trace_row(seq: &PopulationSequence, k: usize) -> Result<(TraceRow, PopulationKind)> {
    let pop = seq.population(k)?;
    let n_units = pop.n_units();
    let margin = seq.design_rule.margin(n_units)?;
    let big_n = n_units as f64;
    let (ratio, aux) = match pop.kind() {
        PopulationKind::Survey => (
            univariate_condition(&pop, margin)?,
            TraceAux {
                n_var0: big_n * true_mean_variance(&pop, margin)?,
                n_var1: None,
                correlation: None,
            },
        ),
        PopulationKind::Experiment => {
            let cov = arm_covariance_matrix(&pop, margin)?;
            (
                bivariate_condition(&pop, margin)?,
                TraceAux {
                    n_var0: big_n * cov.var0,
                    n_var1: Some(big_n * cov.var1),
                    correlation: cov.correlation(),
                },
            )
        }
    };
    Ok((
        TraceRow {
            k,
            n_units,
            margin,
            ratio,
            aux,
        },
        pop.kind(),
    ))
}

fn settles(rows: &[TraceRow], series: impl Fn(&TraceRow) -> f64) -> bool {
    let (Some(first), Some(last)) = (rows.first(), rows.last()) else {
        return false;
    };
    let Some(reference) = rows.iter().rev().find(|r| 2 * r.k <= last.k) else {
        return false;
    };
    let (start, end, mid) = (series(first), series(last), series(reference));
    end < start && (end - mid).abs() < 0.05 * mid.abs()
}

/// One row per distinct `k` (sorted), computed in parallel.
pub fn condition_trace(seq: &PopulationSequence, ks: &[usize]) -> Result<ConditionTrace> {
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() {
        return Err(Error::EmptyInput);
    }
    let computed: Vec<(TraceRow, PopulationKind)> =
        ks.par_iter().map(|&k| trace_row(seq, k)).collect::<Result<_>>()?;
    let kind = computed[0].1;
    if computed.iter().any(|(_, k)| *k != kind) {
        return Err(Error::InvalidArgument("sequence mixes population kinds".into()));
    }
    let rows: Vec<TraceRow> = computed.into_iter().map(|(r, _)| r).collect();
    if rows.windows(2).any(|w| w[1].n_units <= w[0].n_units) {
        return Err(Error::InvalidArgument(
            "population size must strictly increase with k".into(),
        ));
    }
    let ratio_decreasing = rows.windows(2).all(|w| w[1].ratio < w[0].ratio);
    let n_var_settling = settles(&rows, |r| r.aux.n_var0)
        && (kind == PopulationKind::Survey || settles(&rows, |r| r.aux.n_var1.unwrap_or(f64::NAN)));
    Ok(ConditionTrace {
        description: seq.description.clone(),
        kind,
        rows,
        ratio_decreasing,
        n_var_settling,
    })
}
