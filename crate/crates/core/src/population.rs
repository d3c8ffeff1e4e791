//! Fixed finite populations and their exact moments.
//!
//! A survey population carries one outcome column; an experiment population
//! carries both potential-outcome columns, ordered (control, treatment).

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopulationKind {
    Survey,
    Experiment,
}

impl std::fmt::Display for PopulationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PopulationKind::Survey => f.write_str("survey"),
            PopulationKind::Experiment => f.write_str("experiment"),
        }
    }
}

impl std::str::FromStr for PopulationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "survey" => Ok(PopulationKind::Survey),
            "experiment" => Ok(PopulationKind::Experiment),
            other => Err(Error::InvalidArgument(format!("unknown population kind `{other}`"))),
        }
    }
}

/// A fixed population of `N >= 2` units.
///
/// For survey populations `y0` is the single outcome column. For experiment
/// populations `y0` holds the control and `y1` the treatment potential
/// outcomes. Labels are carried along but never enter any computation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PotentialPopulation {
    kind: PopulationKind,
    y0: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    y1: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
}

impl PotentialPopulation {
    pub fn survey(y: Vec<f64>) -> Result<Self> {
        check_column(&y)?;
        Ok(Self {
            kind: PopulationKind::Survey,
            y0: y,
            y1: None,
            labels: None,
        })
    }

    pub fn experiment(y0: Vec<f64>, y1: Vec<f64>) -> Result<Self> {
        if y0.len() != y1.len() {
            return Err(Error::KindMismatch(format!(
                "y0 has {} units but y1 has {}",
                y0.len(),
                y1.len()
            )));
        }
        check_column(&y0)?;
        check_column(&y1)?;
        Ok(Self {
            kind: PopulationKind::Experiment,
            y0,
            y1: Some(y1),
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n_units() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} units",
                labels.len(),
                self.n_units()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn kind(&self) -> PopulationKind {
        self.kind
    }

    pub fn n_units(&self) -> usize {
        self.y0.len()
    }

    /// Survey outcome, or control potential outcome.
    pub fn y0(&self) -> &[f64] {
        &self.y0
    }

    /// Treatment potential outcome; `None` for survey populations.
    pub fn y1(&self) -> Option<&[f64]> {
        self.y1.as_deref()
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Both potential-outcome columns, or [`Error::WrongKind`] for a survey.
    pub fn arms(&self) -> Result<(&[f64], &[f64])> {
        match &self.y1 {
            Some(y1) => Ok((&self.y0, y1)),
            None => Err(Error::WrongKind {
                expected: "experiment",
            }),
        }
    }

    pub(crate) fn require_survey(&self) -> Result<&[f64]> {
        match self.kind {
            PopulationKind::Survey => Ok(&self.y0),
            PopulationKind::Experiment => Err(Error::WrongKind { expected: "survey" }),
        }
    }
}

fn check_column(y: &[f64]) -> Result<()> {
    if y.len() < 2 {
        return Err(Error::TooFewUnits(y.len()));
    }
    if let Some(unit) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { unit });
    }
    Ok(())
}

/// Reads a population from CSV with header `id,y0` or `id,y0,y1`.
///
/// The kind is inferred from the columns unless `kind` is given, in which case
/// it must agree with them. Row numbers in errors count data rows from 1.
pub fn load_population<R: Read>(source: R, kind: Option<PopulationKind>) -> Result<PotentialPopulation> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);

    let headers = reader
        .headers()
        .map_err(|e| Error::MalformedRow {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let columns: Vec<&str> = headers.iter().collect();
    let has_y1 = match columns.as_slice() {
        ["id", "y0"] => false,
        ["id", "y0", "y1"] => true,
        other => {
            return Err(Error::MalformedRow {
                row: 0,
                message: format!("expected header `id,y0[,y1]`, found `{}`", other.join(",")),
            })
        }
    };
    let kind = match (kind, has_y1) {
        (None, false) | (Some(PopulationKind::Survey), false) => PopulationKind::Survey,
        (None, true) | (Some(PopulationKind::Experiment), true) => PopulationKind::Experiment,
        (Some(PopulationKind::Survey), true) => {
            return Err(Error::KindMismatch(
                "survey population requested but the file has a y1 column".into(),
            ))
        }
        (Some(PopulationKind::Experiment), false) => {
            return Err(Error::KindMismatch(
                "experiment population requested but the file has no y1 column".into(),
            ))
        }
    };

    let mut labels = Vec::new();
    let mut y0 = Vec::new();
    let mut y1 = Vec::new();
    for (index, record) in reader.records().enumerate() {
        let row = index + 1;
        let record = record.map_err(|e| Error::MalformedRow {
            row,
            message: e.to_string(),
        })?;
        if record.len() != columns.len() {
            return Err(Error::MalformedRow {
                row,
                message: format!("expected {} fields, found {}", columns.len(), record.len()),
            });
        }
        labels.push(record[0].to_string());
        y0.push(parse_cell(&record[1], row, "y0")?);
        if has_y1 {
            y1.push(parse_cell(&record[2], row, "y1")?);
        }
    }

    let pop = match kind {
        PopulationKind::Survey => PotentialPopulation::survey(y0)?,
        PopulationKind::Experiment => PotentialPopulation::experiment(y0, y1)?,
    };
    pop.with_labels(labels)
}

fn parse_cell(cell: &str, row: usize, column: &str) -> Result<f64> {
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(Error::MalformedRow {
            row,
            message: format!("{column} is not finite: `{cell}`"),
        }),
        Err(_) => Err(Error::MalformedRow {
            row,
            message: format!("{column} is not a number: `{cell}`"),
        }),
    }
}

/// Population-level moments. Variances and the cross-moment use the `N - 1`
/// denominator; `m0`/`m1` are the maximum squared deviations from the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n_units: usize,
    pub mean0: f64,
    pub v0: f64,
    pub m0: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s10: Option<f64>,
}

pub(crate) fn mean(y: &[f64]) -> f64 {
    y.iter().sum::<f64>() / y.len() as f64
}

/// Two-pass variance with denominator `len - 1`.
pub(crate) fn variance(y: &[f64]) -> f64 {
    let m = mean(y);
    y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (y.len() - 1) as f64
}

pub(crate) fn max_sq_deviation(y: &[f64]) -> f64 {
    let m = mean(y);
    y.iter().map(|v| (v - m) * (v - m)).fold(0.0, f64::max)
}

pub(crate) fn covariance(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / (x.len() - 1) as f64
}

pub fn moments(pop: &PotentialPopulation) -> Moments {
    let y0 = pop.y0();
    let mut out = Moments {
        n_units: pop.n_units(),
        mean0: mean(y0),
        v0: variance(y0),
        m0: max_sq_deviation(y0),
        mean1: None,
        v1: None,
        m1: None,
        s10: None,
    };
    if let Some(y1) = pop.y1() {
        out.mean1 = Some(mean(y1));
        out.v1 = Some(variance(y1));
        out.m1 = Some(max_sq_deviation(y1));
        out.s10 = Some(covariance(y1, y0));
    }
    out
}

/// Scales the control column by `grad0` and the treatment column by `grad1`.
pub fn transform_outcomes(pop: &PotentialPopulation, grad0: f64, grad1: f64) -> Result<PotentialPopulation> {
    let (y0, y1) = pop.arms()?;
    let mut out = PotentialPopulation::experiment(
        y0.iter().map(|v| grad0 * v).collect(),
        y1.iter().map(|v| grad1 * v).collect(),
    )?;
    out.labels = pop.labels.clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn p4() -> PotentialPopulation {
        PotentialPopulation::experiment(vec![1.0, 2.0, 3.0, 4.0], vec![2.0, 4.0, 6.0, 8.0]).unwrap()
    }

    // Pairwise-difference forms: v = sum_{i<j} (y_i - y_j)^2 / (N (N - 1)).
    fn pairwise_cov(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len();
        let mut acc = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                acc += (x[i] - x[j]) * (y[i] - y[j]);
            }
        }
        acc / (n * (n - 1)) as f64
    }

    fn brute_max_sq(y: &[f64]) -> f64 {
        let m = y.iter().sum::<f64>() / y.len() as f64;
        let mut best = 0.0f64;
        for v in y {
            if (v - m).powi(2) > best {
                best = (v - m).powi(2);
            }
        }
        best
    }

    #[test]
    fn loads_survey_csv() {
        let csv = "id,y0\n1,1\n2,2\n3,3\n4,4\n";
        let pop = load_population(csv.as_bytes(), None).unwrap();
        assert_eq!(pop.kind(), PopulationKind::Survey);
        assert_eq!(pop.y0(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(pop.y1().is_none());
        assert_eq!(pop.labels().unwrap()[3], "4");
    }

    #[test]
    fn loads_experiment_csv() {
        let csv = "id,y0,y1\n1,1,2\n2,2,4\n3,3,6\n4,4,8\n";
        let pop = load_population(csv.as_bytes(), None).unwrap();
        assert_eq!(pop, p4().with_labels(vec!["1".into(), "2".into(), "3".into(), "4".into()]).unwrap());
    }

    #[test]
    fn rejects_kind_mismatch() {
        let csv = "id,y0,y1\n1,1,2\n2,2,4\n";
        let err = load_population(csv.as_bytes(), Some(PopulationKind::Survey)).unwrap_err();
        assert!(matches!(err, Error::KindMismatch(_)));
        let csv = "id,y0\n1,1\n2,2\n";
        let err = load_population(csv.as_bytes(), Some(PopulationKind::Experiment)).unwrap_err();
        assert!(matches!(err, Error::KindMismatch(_)));
    }

    #[test]
    fn reports_malformed_row_index() {
        let csv = "id,y0\n1,1\n2,abc\n3,3\n";
        match load_population(csv.as_bytes(), None).unwrap_err() {
            Error::MalformedRow { row, .. } => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
        let csv = "id,y0\n1,1\n2,inf\n";
        assert!(matches!(
            load_population(csv.as_bytes(), None).unwrap_err(),
            Error::MalformedRow { row: 2, .. }
        ));
        let csv = "id,y0,y1\n1,1,2\n2,2\n";
        assert!(matches!(
            load_population(csv.as_bytes(), None).unwrap_err(),
            Error::MalformedRow { row: 2, .. }
        ));
    }

    #[test]
    fn rejects_too_few_units() {
        let csv = "id,y0\n1,1\n";
        assert!(matches!(load_population(csv.as_bytes(), None).unwrap_err(), Error::TooFewUnits(1)));
        assert!(PotentialPopulation::survey(vec![f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn p4_moments() {
        let m = moments(&p4());
        assert_eq!(m.n_units, 4);
        assert_relative_eq!(m.mean0, 2.5, max_relative = 1e-15);
        assert_relative_eq!(m.mean1.unwrap(), 5.0, max_relative = 1e-15);
        assert_relative_eq!(m.v0, 5.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(m.v1.unwrap(), 20.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(m.m0, 2.25, max_relative = 1e-15);
        assert_relative_eq!(m.m1.unwrap(), 9.0, max_relative = 1e-15);
        assert_relative_eq!(m.s10.unwrap(), 10.0 / 3.0, max_relative = 1e-14);

        let (y0, y1) = p4().arms().map(|(a, b)| (a.to_vec(), b.to_vec())).unwrap();
        assert_relative_eq!(m.v0, pairwise_cov(&y0, &y0), max_relative = 1e-14);
        assert_relative_eq!(m.s10.unwrap(), pairwise_cov(&y0, &y1), max_relative = 1e-14);
        assert_eq!(m.m1.unwrap(), brute_max_sq(&y1));
    }

    #[test]
    fn constant_population_has_zero_spread() {
        let m = moments(&PotentialPopulation::survey(vec![3.0; 3]).unwrap());
        assert_eq!(m.v0, 0.0);
        assert_eq!(m.m0, 0.0);
        assert!(m.s10.is_none());
    }

    #[test]
    fn identical_columns_give_s10_equal_v() {
        let y = vec![0.3, 1.7, -2.0, 5.5, 0.0];
        let m = moments(&PotentialPopulation::experiment(y.clone(), y).unwrap());
        assert_relative_eq!(m.s10.unwrap(), m.v0, max_relative = 1e-14);
        assert_relative_eq!(m.v1.unwrap(), m.v0, max_relative = 1e-14);
    }

    #[test]
    fn transform_scales_columns() {
        let same = transform_outcomes(&p4(), 1.0, 1.0).unwrap();
        assert_eq!(same, p4());
        let t = transform_outcomes(&p4(), 2.0, 0.5).unwrap();
        assert_eq!(t.y0(), &[2.0, 4.0, 6.0, 8.0]);
        assert_eq!(t.y1().unwrap(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(transform_outcomes(&PotentialPopulation::survey(vec![1.0, 2.0]).unwrap(), 1.0, 1.0).is_err());
    }

    #[test]
    fn ratio_gradient_scaling_removes_effect_heterogeneity() {
        // control column scaled by mean1/mean0 = 2 reproduces y1 exactly
        let t = transform_outcomes(&p4(), 2.0, 1.0).unwrap();
        assert_eq!(t.y0(), t.y1().unwrap());
        let effects: Vec<f64> = t.y1().unwrap().iter().zip(t.y0()).map(|(a, b)| a - b).collect();
        assert_eq!(variance(&effects), 0.0);
    }

    fn column(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, n)
    }

    fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..30).prop_flat_map(|n| (column(n), column(n)))
    }

    proptest! {
        #[test]
        fn moments_are_permutation_invariant((y0, y1) in pair(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut order: Vec<usize> = (0..y0.len()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = moments(&PotentialPopulation::experiment(y0.clone(), y1.clone()).unwrap());
            let b = moments(&PotentialPopulation::experiment(
                order.iter().map(|&i| y0[i]).collect(),
                order.iter().map(|&i| y1[i]).collect(),
            ).unwrap());
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-10 * (1.0 + x.abs().max(y.abs()));
            prop_assert!(close(a.mean0, b.mean0) && close(a.v0, b.v0) && close(a.m0, b.m0));
            prop_assert!(close(a.v1.unwrap(), b.v1.unwrap()) && close(a.m1.unwrap(), b.m1.unwrap()));
            prop_assert!(close(a.s10.unwrap(), b.s10.unwrap()));
        }

        #[test]
        fn affine_maps_of_the_control_column(y in column(12), a in -10.0f64..10.0, b in -3.0f64..3.0) {
            let base = moments(&PotentialPopulation::survey(y.clone()).unwrap());
            let mapped = moments(&PotentialPopulation::survey(y.iter().map(|v| a + b * v).collect()).unwrap());
            prop_assert!((mapped.mean0 - (a + b * base.mean0)).abs() <= 1e-10 * (1.0 + mapped.mean0.abs()));
            prop_assert!((mapped.v0 - b * b * base.v0).abs() <= 1e-9 * (1.0 + mapped.v0));
            prop_assert!((mapped.m0 - b * b * base.m0).abs() <= 1e-9 * (1.0 + mapped.m0));
        }

        #[test]
        fn transform_scales_variances((y0, y1) in pair(), c0 in -4.0f64..4.0, c1 in -4.0f64..4.0) {
            let pop = PotentialPopulation::experiment(y0, y1).unwrap();
            let base = moments(&pop);
            let t = moments(&transform_outcomes(&pop, c0, c1).unwrap());
            prop_assert!((t.v0 - c0 * c0 * base.v0).abs() <= 1e-9 * (1.0 + t.v0));
            prop_assert!((t.v1.unwrap() - c1 * c1 * base.v1.unwrap()).abs() <= 1e-9 * (1.0 + t.v1.unwrap()));
        }

        #[test]
        fn moment_structure((y0, y1) in pair()) {
            let pop = PotentialPopulation::experiment(y0.clone(), y1.clone()).unwrap();
            let m = moments(&pop);
            let (v0, v1, s10) = (m.v0, m.v1.unwrap(), m.s10.unwrap());
            prop_assert!(s10.abs() <= (v0 * v1).sqrt() * (1.0 + 1e-12) + 1e-12);
            prop_assert!(m.m0 >= 0.0 && (m.m0 == 0.0) == (v0 == 0.0));
            prop_assert_eq!(m.m0, brute_max_sq(&y0));
            // polarization
            let sum: Vec<f64> = y0.iter().zip(&y1).map(|(a, b)| a + b).collect();
            let polar = (variance(&sum) - v0 - v1) / 2.0;
            let scale = v0.max(v1).max(1e-300);
            prop_assert!((polar - s10).abs() <= 1e-10 * scale);
        }
    }
}
