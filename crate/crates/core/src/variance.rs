//! Multiplier-resampling standard errors and the replicate-study harness.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::census_fit::{
    solve, CensusConfig, CensusFitResult, CensusProblem, Design, Membership, RiskProvider,
};
use crate::data::{CensusTable, CohortDataset};
use crate::error::{Error, Result};
use crate::model::{Baseline, ModelCell, Parameters};
use crate::numeric::{mean, sample_sd};
use crate::simulate::{
    build_census, derive_seed, extract_cohort, extract_cohort_known_strata,
    extract_doubly_censored, simulate_population, PreWindow, ScenarioConfig,
};
use crate::zt::{em_fit, fit_known_strata, known_entry_strata, EmConfig, ZtFitResult};

/// Law of the per-subject multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiplierLaw {
    Poisson,
    /// `1 + N(0, 1)`: mean one and unit variance, like `Poisson(1)`.
    StandardNormal,
}

impl FromStr for MultiplierLaw {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "poisson" => Ok(MultiplierLaw::Poisson),
            "normal" | "standard-normal" | "standard_normal" => Ok(MultiplierLaw::StandardNormal),
            _ => Err(Error::InvalidArgument(format!("unknown multiplier law '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResampleConfig {
    pub draws: usize,
    pub seed: u64,
    pub law: MultiplierLaw,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        ResampleConfig {
            draws: 1000,
            seed: 0,
            law: MultiplierLaw::Poisson,
        }
    }
}

/// Multipliers for draw `b`.
pub fn draw_multipliers(law: MultiplierLaw, n: usize, seed: u64, b: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, b as u64));
    match law {
        MultiplierLaw::Poisson => {
            let d = Poisson::new(1.0).expect("unit mean is valid");
            (0..n).map(|_| d.sample(&mut rng)).collect()
        }
        MultiplierLaw::StandardNormal => (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                1.0 + e
            })
            .collect(),
    }
}

/// Reported estimate of one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterEstimate {
    /// `"1"`, `"2"`, or `"all"` for unstratified cells.
    pub stratum: String,
    pub parameter: String,
    pub value: f64,
}

fn beta_name(j: usize) -> String {
    format!("beta{}", j + 1)
}

/// Flat parameter list of a census fit.
pub fn census_estimates(fit: &CensusFitResult) -> Vec<ParameterEstimate> {
    let mut out = Vec::new();
    let labels: Vec<String> = if fit.beta.len() == 1 {
        vec!["all".into()]
    } else {
        vec!["1".into(), "2".into()]
    };
    for (s, label) in labels.iter().enumerate() {
        if let Some(l) = fit.lambda0(s) {
            out.push(ParameterEstimate {
                stratum: label.clone(),
                parameter: "lambda0".into(),
                value: l,
            });
        }
        for (j, &b) in fit.beta[s].iter().enumerate() {
            out.push(ParameterEstimate {
                stratum: label.clone(),
                parameter: beta_name(j),
                value: b,
            });
        }
    }
    if let Some(a) = fit.indicator_coefficient {
        out.push(ParameterEstimate {
            stratum: "2".into(),
            parameter: "alpha".into(),
            value: a,
        });
    }
    out
}

/// Flat parameter list of a zero-truncated fit with model-based standard errors.
pub fn zt_estimates(fit: &ZtFitResult) -> Vec<(ParameterEstimate, f64)> {
    let mut out = Vec::new();
    let strata: Vec<(usize, String)> = if fit.model.is_unstratified() {
        vec![(0, "all".into())]
    } else {
        vec![(0, "1".into()), (1, "2".into())]
    };
    for (s, label) in strata {
        let se = &fit.alpha_se[s];
        // Delta method for λ = exp(log λ).
        out.push((
            ParameterEstimate {
                stratum: label.clone(),
                parameter: "lambda0".into(),
                value: fit.lambda0[s],
            },
            fit.lambda0[s] * se[0],
        ));
        for (j, &b) in fit.beta[s].iter().enumerate() {
            out.push((
                ParameterEstimate {
                    stratum: label.clone(),
                    parameter: beta_name(j),
                    value: b,
                },
                se[j + 1],
            ));
        }
    }
    out
}

/// One resampling draw.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DrawResult {
    pub estimates: Vec<f64>,
    /// Cumulative baseline per stratum on the reporting grid.
    pub cumulative: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResampleResult {
    pub model: ModelCell,
    pub parameters: Vec<ParameterEstimate>,
    pub se: Vec<Option<f64>>,
    pub draws: Vec<DrawResult>,
    pub dropped: usize,
    pub total: usize,
    pub grid: Vec<f64>,
}

/// Reporting grid `0, 0.1, ..., A*`.
pub fn age_grid(horizon: f64) -> Vec<f64> {
    let n = (horizon * 10.0).round() as usize;
    (0..=n).map(|i| i as f64 / 10.0).collect()
}

/// Cumulative baseline of every stratum on `grid`.
pub fn cumulative_on_grid(baselines: &[Baseline], grid: &[f64]) -> Vec<Vec<f64>> {
    baselines
        .iter()
        .map(|b| grid.iter().map(|&a| b.cumulative(a)).collect())
        .collect()
}

/// Which fit is resampled.
#[derive(Debug, Clone, Copy)]
pub struct FitTarget {
    pub cell: ModelCell,
    /// Fit the SNC cell through a stratum indicator.
    pub indicator: bool,
    pub membership: Membership,
}

impl FitTarget {
    pub fn cell(cell: ModelCell) -> Self {
        FitTarget {
            cell,
            indicator: false,
            membership: Membership::Posterior,
        }
    }

    fn design(&self, p: usize) -> Design {
        if self.indicator {
            Design::stratum_indicator(self.cell.baseline_time_varying(), p)
        } else {
            Design::for_cell(self.cell, p)
        }
    }
}

/// Base fit followed by `draws` multiplier-weighted refits warm-started at it.
///
/// The census is held fixed. Draws that fail or do not converge are dropped;
/// more than 10% dropped is an error.
pub fn resample_variance(
    cohort: &CohortDataset,
    census: &CensusTable,
    target: FitTarget,
    fit_config: &CensusConfig,
    resample: &ResampleConfig,
    base: Option<&CensusFitResult>,
) -> Result<(CensusFitResult, ResampleResult)> {
    if resample.draws < 2 {
        return Err(Error::InvalidArgument("at least two resampling draws required".into()));
    }
    let design = target.design(cohort.dim);
    let risk = RiskProvider::census(census, design.strata, cohort.horizon)?;
    let problem = CensusProblem::new(cohort, risk, design, target.membership, None)?;
    let base = match base {
        Some(b) => b.clone(),
        None => solve(&mut problem.clone(), fit_config)?,
    };
    let grid = age_grid(cohort.horizon);
    let warm = CensusConfig {
        initial: Some((base.theta.clone(), base.group_baseline.clone())),
        ..fit_config.clone()
    };
    let outcomes: Vec<Option<DrawResult>> = (0..resample.draws)
        .into_par_iter()
        .map(|b| {
            let w = draw_multipliers(resample.law, cohort.len(), resample.seed, b);
            let mut pr = problem.clone();
            pr.set_multipliers(&w);
            match solve(&mut pr, &warm) {
                Ok(fit) if fit.converged() => Some(DrawResult {
                    estimates: census_estimates(&fit).iter().map(|e| e.value).collect(),
                    cumulative: cumulative_on_grid(&fit.baseline, &grid),
                }),
                _ => None,
            }
        })
        .collect();
    let total = outcomes.len();
    let draws: Vec<DrawResult> = outcomes.into_iter().flatten().collect();
    let dropped = total - draws.len();
    if dropped * 10 > total {
        return Err(Error::TooManyDroppedDraws { dropped, total });
    }
    let parameters = census_estimates(&base);
    let se = (0..parameters.len())
        .map(|k| {
            let v: Vec<f64> = draws.iter().map(|d| d.estimates[k]).collect();
            sample_sd(&v)
        })
        .collect();
    Ok((
        base,
        ResampleResult {
            model: target.cell,
            parameters,
            se,
            draws,
            dropped,
            total,
            grid,
        },
    ))
}

/// Estimation approach in a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Approach {
    /// Zero-truncated likelihood, EM over unknown entry strata.
    Zt,
    /// Zero-truncated likelihood with entry strata revealed.
    ZtKnown,
    /// Census-augmented estimating equations.
    Census,
    /// Realized risk sets from the full doubly-censored data.
    Ideal,
}

impl Approach {
    pub fn label(self) -> &'static str {
        match self {
            Approach::Zt => "zt",
            Approach::ZtKnown => "zt-known",
            Approach::Census => "census",
            Approach::Ideal => "ideal",
        }
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Approach {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "zt" => Ok(Approach::Zt),
            "zt-known" | "zt_known" => Ok(Approach::ZtKnown),
            "census" => Ok(Approach::Census),
            "ideal" => Ok(Approach::Ideal),
            _ => Err(Error::InvalidArgument(format!("unknown approach '{s}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub scenario_label: String,
    pub scenario: ScenarioConfig,
    pub replicates: usize,
    pub fits: Vec<(Approach, ModelCell)>,
    pub seed: u64,
    /// Resampling draws per census fit; 0 skips resampling.
    pub resample_draws: usize,
    pub em: EmConfig,
    pub census_config: CensusConfig,
}

/// Per-replicate estimates for one fit, `None` on failure.
type FitOutcome = Option<Vec<(ParameterEstimate, Option<f64>)>>;

/// One report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub scenario: String,
    pub approach: Approach,
    pub model: ModelCell,
    pub stratum: String,
    pub parameter: String,
    pub truth: Option<f64>,
    pub mean: Option<f64>,
    pub ssd: Option<f64>,
    pub mean_resampled_se: Option<f64>,
    pub n_replicates: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
    /// Raw estimates per row, in replicate order.
    #[serde(skip)]
    pub samples: Vec<Vec<f64>>,
}

impl StudyReport {
    pub fn row(&self, approach: Approach, model: ModelCell, stratum: &str, parameter: &str) -> Option<&StudyRow> {
        self.rows.iter().find(|r| {
            r.approach == approach && r.model == model && r.stratum == stratum && r.parameter == parameter
        })
    }

    pub fn samples_for(&self, approach: Approach, model: ModelCell, stratum: &str, parameter: &str) -> Option<&[f64]> {
        let i = self.rows.iter().position(|r| {
            r.approach == approach && r.model == model && r.stratum == stratum && r.parameter == parameter
        })?;
        Some(&self.samples[i])
    }

    /// CSV with undefined values written as `NA`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "scenario",
            "approach",
            "model",
            "stratum",
            "parameter",
            "truth",
            "mean",
            "ssd",
            "mean_resampled_se",
            "n_replicates",
            "n_failed",
        ])?;
        let f = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        for r in &self.rows {
            w.write_record([
                r.scenario.clone(),
                r.approach.to_string(),
                r.model.to_string(),
                r.stratum.clone(),
                r.parameter.clone(),
                f(r.truth),
                f(r.mean),
                f(r.ssd),
                f(r.mean_resampled_se),
                r.n_replicates.to_string(),
                r.n_failed.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// True parameter value for a reported stratum, when well defined.
fn truth_value(truth: &Parameters, stratum: &str, parameter: &str) -> Option<f64> {
    let strata: Vec<usize> = match stratum {
        "1" => vec![0],
        "2" => vec![1.min(truth.beta.len() - 1)],
        _ => (0..truth.beta.len()).collect(),
    };
    let values: Vec<Option<f64>> = strata
        .iter()
        .map(|&s| match parameter {
            "lambda0" => match &truth.baseline[s] {
                Baseline::Constant(r) => Some(*r),
                _ => None,
            },
            p => p
                .strip_prefix("beta")
                .and_then(|j| j.parse::<usize>().ok())
                .and_then(|j| truth.beta[s].get(j - 1).copied()),
        })
        .collect();
    let first = values.first().copied().flatten()?;
    values.iter().all(|v| *v == Some(first)).then_some(first)
}

fn run_fit(
    cfg: &StudyConfig,
    approach: Approach,
    cell: ModelCell,
    data: &ReplicateData,
    seed: u64,
) -> FitOutcome {
    let finite = |v: &[(ParameterEstimate, Option<f64>)]| v.iter().all(|(e, _)| e.value.is_finite());
    let out: Result<Vec<(ParameterEstimate, Option<f64>)>> = match approach {
        Approach::Zt => em_fit(&data.cohort, cell, &cfg.em)
            .map(|f| zt_estimates(&f).into_iter().map(|(e, s)| (e, Some(s))).collect()),
        Approach::ZtKnown => known_entry_strata(&data.known)
            .and_then(|st| fit_known_strata(&data.known, cell, &st, &cfg.em))
            .map(|f| zt_estimates(&f).into_iter().map(|(e, s)| (e, Some(s))).collect()),
        Approach::Census => {
            if cfg.resample_draws >= 2 {
                let rc = ResampleConfig {
                    draws: cfg.resample_draws,
                    seed,
                    law: MultiplierLaw::Poisson,
                };
                resample_variance(
                    &data.cohort,
                    &data.census,
                    FitTarget::cell(cell),
                    &cfg.census_config,
                    &rc,
                    None,
                )
                .and_then(|(fit, res)| {
                    if !fit.converged() {
                        return Err(Error::NonFinite("base fit did not converge".into()));
                    }
                    Ok(res.parameters.into_iter().zip(res.se).collect())
                })
            } else {
                crate::census_fit::fit_census(
                    &data.cohort,
                    &data.census,
                    cell,
                    Membership::Posterior,
                    &cfg.census_config,
                )
                .and_then(|f| {
                    if f.converged() {
                        Ok(census_estimates(&f).into_iter().map(|e| (e, None)).collect())
                    } else {
                        Err(Error::NonFinite("fit did not converge".into()))
                    }
                })
            }
        }
        Approach::Ideal => crate::census_fit::fit_ideal(&data.doubly, cell, &cfg.census_config)
            .map(|f| census_estimates(&f).into_iter().map(|e| (e, None)).collect()),
    };
    match out {
        Ok(v) if finite(&v) => Some(v),
        _ => None,
    }
}

struct ReplicateData {
    cohort: CohortDataset,
    known: CohortDataset,
    doubly: CohortDataset,
    census: CensusTable,
}

/// Simulate `replicates` populations and summarize every requested fit.
pub fn replicate_study(cfg: &StudyConfig) -> Result<StudyReport> {
    if cfg.replicates == 0 {
        return Err(Error::InvalidArgument("at least one replicate required".into()));
    }
    cfg.scenario.validate()?;
    let per_rep: Vec<Vec<FitOutcome>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let mut sc = cfg.scenario.clone();
            sc.seed = derive_seed(cfg.seed, r as u64);
            let pop = simulate_population(&sc)?;
            let needs = |a: Approach| cfg.fits.iter().any(|(x, _)| *x == a);
            let data = ReplicateData {
                cohort: extract_cohort(&pop, sc.window),
                known: if needs(Approach::ZtKnown) {
                    extract_cohort_known_strata(&pop, sc.window)
                } else {
                    extract_cohort(&pop, sc.window)
                },
                doubly: if needs(Approach::Ideal) {
                    extract_doubly_censored(&pop, sc.window, PreWindow::Revealed)
                } else {
                    extract_cohort(&pop, sc.window)
                },
                census: build_census(&pop, sc.window)?,
            };
            Ok(cfg
                .fits
                .iter()
                .enumerate()
                .map(|(k, &(a, cell))| {
                    run_fit(cfg, a, cell, &data, derive_seed(sc.seed, 1_000 + k as u64))
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut samples = Vec::new();
    for (k, &(approach, cell)) in cfg.fits.iter().enumerate() {
        let outcomes: Vec<&FitOutcome> = per_rep.iter().map(|r| &r[k]).collect();
        let n_failed = outcomes.iter().filter(|o| o.is_none()).count();
        let Some(template) = outcomes.iter().find_map(|o| o.as_ref()) else {
            rows.push(StudyRow {
                scenario: cfg.scenario_label.clone(),
                approach,
                model: cell,
                stratum: "NA".into(),
                parameter: "NA".into(),
                truth: None,
                mean: None,
                ssd: None,
                mean_resampled_se: None,
                n_replicates: cfg.replicates,
                n_failed,
            });
            samples.push(Vec::new());
            continue;
        };
        for (j, (est, _)) in template.iter().enumerate() {
            let vals: Vec<f64> = outcomes
                .iter()
                .filter_map(|o| o.as_ref().map(|v| v[j].0.value))
                .collect();
            let ses: Vec<f64> = outcomes
                .iter()
                .filter_map(|o| o.as_ref().and_then(|v| v[j].1))
                .collect();
            rows.push(StudyRow {
                scenario: cfg.scenario_label.clone(),
                approach,
                model: cell,
                stratum: est.stratum.clone(),
                parameter: est.parameter.clone(),
                truth: truth_value(&cfg.scenario.truth, &est.stratum, &est.parameter),
                mean: mean(&vals),
                ssd: sample_sd(&vals),
                mean_resampled_se: mean(&ses),
                n_replicates: cfg.replicates,
                n_failed,
            });
            samples.push(vals);
        }
    }
    Ok(StudyReport { rows, samples })
}
