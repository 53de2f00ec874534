//! Population simulation under the stratified model, cohort extraction and census aggregation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CensusTable, CohortDataset};
use crate::error::{Error, Result};
use crate::model::{
    Baseline, Model, ModelCell, ModelSpec, ObservationWindow, Parameters, StratumId, SubjectPath,
    DEFAULT_HORIZON,
};

/// Covariate law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateGenerator {
    /// `Z1 ~ Bernoulli(p)`; `log X ~ N(log_mean, log_sd^2)`,
    /// `Z2 = I(lower < X <= upper)`, `Z3 = I(X > upper)`.
    BinaryAndBanded {
        p_binary: f64,
        log_mean: f64,
        log_sd: f64,
        lower: f64,
        upper: f64,
    },
    /// Every subject gets the same vector.
    Fixed(Vec<f64>),
}

impl CovariateGenerator {
    pub fn standard() -> Self {
        CovariateGenerator::BinaryAndBanded {
            p_binary: 0.5,
            log_mean: 8f64.ln(),
            log_sd: 3f64.ln(),
            lower: 5.0,
            upper: 13.0,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            CovariateGenerator::BinaryAndBanded { .. } => 3,
            CovariateGenerator::Fixed(z) => z.len(),
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            CovariateGenerator::BinaryAndBanded {
                p_binary,
                log_mean,
                log_sd,
                lower,
                upper,
            } => {
                let z1 = rng.random_bool(*p_binary);
                let n: f64 = StandardNormal.sample(rng);
                let x = (log_mean + log_sd * n).exp();
                let (z2, z3) = band(x, *lower, *upper);
                vec![f64::from(u8::from(z1)), z2, z3]
            }
            CovariateGenerator::Fixed(z) => z.clone(),
        }
    }
}

/// `(I(lower < x <= upper), I(x > upper))`.
pub fn band(x: f64, lower: f64, upper: f64) -> (f64, f64) {
    let mid = x > lower && x <= upper;
    let high = x > upper;
    (f64::from(u8::from(mid)), f64::from(u8::from(high)))
}

/// Simulation settings for one population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub population_size: usize,
    /// Calendar extraction window `(W_L, W_R]`.
    pub window: (f64, f64),
    pub spec: ModelSpec,
    pub truth: Parameters,
    pub covariates: CovariateGenerator,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size == 0 {
            return Err(Error::InvalidArgument("population size must be at least 1".into()));
        }
        let (wl, wr) = self.window;
        if !(wl.is_finite() && wr.is_finite() && wl < wr) {
            return Err(Error::InvalidArgument(format!("invalid window ({wl}, {wr})")));
        }
        let model = Model::new(self.spec, self.truth.clone())?;
        if model.params.baseline.iter().any(Baseline::is_step) {
            return Err(Error::InvalidModel("step baselines cannot generate events".into()));
        }
        if self.truth.dim() != self.covariates.dim() {
            return Err(Error::InvalidModel(
                "coefficient length does not match covariate generator".into(),
            ));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(self.spec, self.truth.clone())
    }

    pub fn horizon(&self) -> f64 {
        self.spec.horizon
    }
}

/// Built-in scenario presets (1, 2 or 3).
pub fn scenario(id: u8) -> Result<ScenarioConfig> {
    let b1 = vec![-2.0, -1.0, -1.5];
    let b2 = vec![-1.0, 0.5, -0.5];
    let (spec, truth) = match id {
        1 => (
            ModelSpec::from_cell(ModelCell::Nnc, DEFAULT_HORIZON),
            Parameters::shared(b1, Baseline::Constant(0.05)),
        ),
        2 => (
            ModelSpec::from_cell(ModelCell::Ssc, DEFAULT_HORIZON),
            Parameters::new(
                vec![b1, b2],
                vec![Baseline::Constant(0.05), Baseline::Constant(0.07)],
            ),
        ),
        3 => (
            ModelSpec::from_cell(ModelCell::Ssv, DEFAULT_HORIZON),
            Parameters::new(
                vec![b1, b2],
                vec![
                    Baseline::PiecewiseConstant {
                        breaks: vec![0.0, 11.0],
                        rates: vec![0.03, 0.06],
                    },
                    Baseline::PiecewiseConstant {
                        breaks: vec![0.0, 11.0],
                        rates: vec![0.04, 0.08],
                    },
                ],
            ),
        ),
        _ => return Err(Error::InvalidArgument(format!("unknown scenario {id}"))),
    };
    Ok(ScenarioConfig {
        population_size: 100_000,
        window: (0.0, 7.0),
        spec,
        truth,
        covariates: CovariateGenerator::standard(),
        seed: 0,
    })
}

/// One simulated subject with full history on `(0, A*)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Person {
    pub birthdate: f64,
    pub covariates: Vec<f64>,
    pub events: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub people: Vec<Person>,
    pub dim: usize,
    pub horizon: f64,
}

/// SplitMix64 finalizer applied to `seed + index`; used to derive
/// independent seeds for replicates and resampling draws.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for subject `index`: stream `index` of the seeded ChaCha8 generator.
pub fn subject_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn draw_covariates<R: Rng + ?Sized>(
    generator: &CovariateGenerator,
    n: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    (0..n).map(|_| generator.draw(rng)).collect()
}

/// Birthdates uniform on `(W_L - A*, W_R)`.
pub fn draw_birthdates<R: Rng + ?Sized>(
    window: (f64, f64),
    horizon: f64,
    n: usize,
    rng: &mut R,
) -> Vec<f64> {
    (0..n).map(|_| draw_birthdate(window, horizon, rng)).collect()
}

fn draw_birthdate<R: Rng + ?Sized>(window: (f64, f64), horizon: f64, rng: &mut R) -> f64 {
    let lo = window.0 - horizon;
    let u: f64 = rng.random();
    // Open interval: resample the (measure-zero) left endpoint.
    let mut b = lo + u * (window.1 - lo);
    while b <= lo {
        b = lo + rng.random::<f64>() * (window.1 - lo);
    }
    b
}

/// Age at which `∫_{start}^{age} baseline * scale` reaches `target`, or
/// `None` when that age is at or beyond `horizon`.
pub fn invert_cumulative(
    baseline: &Baseline,
    scale: f64,
    start: f64,
    target: f64,
    horizon: f64,
) -> Option<f64> {
    match baseline {
        Baseline::Constant(r) => {
            let rate = r * scale;
            if rate <= 0.0 {
                return None;
            }
            let a = start + target / rate;
            (a < horizon).then_some(a)
        }
        Baseline::PiecewiseConstant { breaks, rates } => {
            let mut remaining = target;
            let mut pos = start;
            let first = breaks.partition_point(|&b| b <= start).saturating_sub(1);
            for k in first..breaks.len() {
                let end = breaks.get(k + 1).copied().unwrap_or(horizon).min(horizon);
                if end <= pos {
                    continue;
                }
                let rate = rates[k] * scale;
                let mass = rate * (end - pos);
                if rate > 0.0 && mass >= remaining {
                    let a = pos + remaining / rate;
                    return (a < horizon).then_some(a);
                }
                remaining -= mass;
                pos = end;
                if pos >= horizon {
                    break;
                }
            }
            None
        }
        Baseline::Step(_) => None,
    }
}

/// Exact event ages on `(0, A*)`: first event under stratum 1, later ones under stratum 2.
pub fn simulate_events<R: Rng + ?Sized>(model: &Model, z: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if model.params.baseline.iter().any(Baseline::is_step) {
        return Err(Error::InvalidModel("step baselines cannot generate events".into()));
    }
    let horizon = model.spec.horizon;
    let mut events = Vec::new();
    let mut a = 0.0;
    let mut stratum = StratumId::S1;
    loop {
        let e: f64 = Exp1.sample(rng);
        let scale = model.linear_predictor(stratum, z).exp();
        match invert_cumulative(model.baseline(stratum), scale, a, e, horizon) {
            Some(next) if next > a => {
                events.push(next);
                a = next;
                if model.spec.num_strata() > 1 {
                    stratum = StratumId::S2;
                }
            }
            Some(_) => continue,
            None => break,
        }
    }
    Ok(events)
}

/// Simulate a full population; per-subject streams make the result
/// independent of thread scheduling.
pub fn simulate_population(config: &ScenarioConfig) -> Result<Population> {
    config.validate()?;
    let model = config.model()?;
    let horizon = config.horizon();
    let people = (0..config.population_size)
        .into_par_iter()
        .map(|i| {
            let mut rng = subject_rng(config.seed, i as u64);
            let birthdate = draw_birthdate(config.window, horizon, &mut rng);
            let covariates = config.covariates.draw(&mut rng);
            let events = simulate_events(&model, &covariates, &mut rng)?;
            Ok(Person {
                birthdate,
                covariates,
                events,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Population {
        people,
        dim: config.covariates.dim(),
        horizon,
    })
}

/// How much pre-window history the extracted records carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreWindow {
    /// Unknown whenever the window starts after birth.
    Hidden,
    /// Exact pre-window event counts.
    Revealed,
}

fn extract(
    pop: &Population,
    window: (f64, f64),
    keep_empty: bool,
    pre: PreWindow,
) -> CohortDataset {
    let mut ids = Vec::new();
    let mut subjects = Vec::new();
    for (i, p) in pop.people.iter().enumerate() {
        let Some(w) = ObservationWindow::from_birthdate(p.birthdate, window.0, window.1, pop.horizon)
        else {
            continue;
        };
        let event_ages: Vec<f64> = p.events.iter().copied().filter(|&e| w.contains(e)).collect();
        if event_ages.is_empty() && !keep_empty {
            continue;
        }
        let before = p.events.iter().filter(|&&e| e <= w.c_left).count() as u32;
        let pre_window_events = match pre {
            PreWindow::Revealed => Some(before),
            PreWindow::Hidden if w.c_left <= 0.0 => Some(0),
            PreWindow::Hidden => None,
        };
        ids.push(i as u64 + 1);
        subjects.push(SubjectPath {
            window: w,
            covariates: p.covariates.clone(),
            event_ages,
            pre_window_events,
        });
    }
    CohortDataset {
        ids,
        subjects,
        dim: pop.dim,
        horizon: pop.horizon,
        zero_truncated: !keep_empty,
    }
}

/// Subjects with at least one event in `(C_L, C_R]`; pre-window history dropped.
pub fn extract_cohort(pop: &Population, window: (f64, f64)) -> CohortDataset {
    extract(pop, window, false, PreWindow::Hidden)
}

/// Zero-truncated cohort with exact pre-window counts (known strata).
pub fn extract_cohort_known_strata(pop: &Population, window: (f64, f64)) -> CohortDataset {
    extract(pop, window, false, PreWindow::Revealed)
}

/// Every subject whose window is non-empty, including those without events.
pub fn extract_doubly_censored(pop: &Population, window: (f64, f64), pre: PreWindow) -> CohortDataset {
    extract(pop, window, true, pre)
}

/// Calendar years `ceil(W_L), ..., ceil(W_R) - 1` at which the census is taken.
pub fn census_years(window: (f64, f64)) -> Vec<i64> {
    let first = window.0.ceil() as i64;
    let last = window.1.ceil() as i64;
    (first..last).collect()
}

/// Census counts at the start of each calendar year in the window.
pub fn build_census(pop: &Population, window: (f64, f64)) -> Result<CensusTable> {
    let ages = integer_horizon(pop.horizon)?;
    let mut cells: Vec<Vec<f64>> = pop.people.iter().map(|p| p.covariates.clone()).collect();
    cells.sort_by(|a, b| crate::data::cmp_cells(a, b));
    cells.dedup();
    let years = census_years(window);
    let mut table = CensusTable::zeros(years.clone(), cells, ages);
    for p in &pop.people {
        let cell = table
            .cell_index(&p.covariates)
            .expect("catalog built from population");
        for (yi, &l) in years.iter().enumerate() {
            let age = l as f64 - p.birthdate;
            if age >= 0.0 && age < pop.horizon {
                table.add(yi, cell, age.floor() as usize, 1);
            }
        }
    }
    Ok(table)
}

/// The census bins unit ages, so the horizon must be a whole number of years.
pub fn integer_horizon(horizon: f64) -> Result<usize> {
    if horizon.fract() != 0.0 || horizon < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "census requires an integer age horizon, got {horizon}"
        )));
    }
    Ok(horizon as usize)
}
