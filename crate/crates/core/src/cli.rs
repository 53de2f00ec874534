//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use recurstrat::census_fit::{fit_census, fit_ideal, CensusConfig, Membership};
use recurstrat::data::CohortDataset;
use recurstrat::io::{
    baseline_csv, baseline_curves_csv, census_csv, events_csv, read_census, read_cohort,
    subjects_csv, write_all, FitRecord,
};
use recurstrat::model::ModelCell;
use recurstrat::simulate::{
    build_census, extract_cohort, extract_doubly_censored, scenario, simulate_population,
    PreWindow, ScenarioConfig,
};
use recurstrat::variance::{
    age_grid, replicate_study, resample_variance, Approach, FitTarget, MultiplierLaw,
    ResampleConfig, ResampleResult, StudyConfig,
};
use recurstrat::zt::{em_fit, fit_known_strata, known_entry_strata, EmConfig};

/// Exit status for a fit that ran but did not converge.
pub const EXIT_NOT_CONVERGED: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "recurstrat", version, about = "Stratified recurrent-event models for zero-truncated cohorts")]
pub struct Cli {
    /// Worker threads for replicate and resampling fan-out.
    #[arg(long, global = true)]
    pub parallel: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a population and write the cohort and census files.
    Simulate(SimulateArgs),
    /// Fit one model to cohort files.
    Fit(FitArgs),
    /// Multiplier-resampling standard errors for a census fit.
    Variance(VarianceArgs),
    /// Replicate simulation study.
    Study(StudyArgs),
    /// Baseline curves with percentile bands.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SeedArg {
    /// Random seed; falls back to RECURSTRAT_SEED, then 0.
    #[arg(long, env = "RECURSTRAT_SEED")]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Built-in scenario (1, 2 or 3).
    #[arg(long, conflicts_with = "config")]
    pub scenario: Option<u8>,
    /// Scenario configuration as a JSON file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub population: Option<usize>,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Also write the doubly-censored records with pre-window counts.
    #[arg(long)]
    pub full: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    #[arg(long)]
    pub subjects: PathBuf,
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long)]
    pub census: Option<PathBuf>,
    /// Upper age limit A*.
    #[arg(long, default_value_t = 18.0)]
    pub horizon: f64,
}

#[derive(Args, Debug)]
pub struct ToleranceArgs {
    /// Relative convergence tolerance of the outer iteration.
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
}

impl ToleranceArgs {
    fn em(&self) -> EmConfig {
        let mut c = EmConfig::default();
        if let Some(t) = self.tolerance {
            c.tolerance = t;
        }
        if let Some(m) = self.max_iterations {
            c.max_iterations = m;
        }
        c
    }

    fn census_config(&self) -> CensusConfig {
        let mut c = CensusConfig::default();
        if let Some(t) = self.tolerance {
            c.tolerance = t;
        }
        if let Some(m) = self.max_iterations {
            c.max_outer_iterations = m;
        }
        c
    }

    fn validate(&self) -> Result<()> {
        if self.tolerance.is_some_and(|t| !(t > 0.0 && t.is_finite())) {
            bail!("--tolerance must be positive");
        }
        if self.max_iterations == Some(0) {
            bail!("--max-iterations must be at least 1");
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub approach: Approach,
    #[arg(long)]
    pub model: ModelCell,
    #[command(flatten)]
    pub tol: ToleranceArgs,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct VarianceArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub model: ModelCell,
    /// Number of resampling draws.
    #[arg(long, default_value_t = 1000)]
    pub draws: usize,
    /// Multiplier law: poisson or normal.
    #[arg(long, default_value = "poisson")]
    pub law: MultiplierLaw,
    #[command(flatten)]
    pub seed: SeedArg,
    #[command(flatten)]
    pub tol: ToleranceArgs,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct StudyArgs {
    #[arg(long)]
    pub scenario: u8,
    #[arg(long, default_value_t = 100)]
    pub replicates: usize,
    /// Comma-separated model cells.
    #[arg(long, value_delimiter = ',', default_value = "ssc")]
    pub models: Vec<ModelCell>,
    /// Comma-separated approaches.
    #[arg(long, value_delimiter = ',', default_value = "census")]
    pub approaches: Vec<Approach>,
    #[arg(long)]
    pub population: Option<usize>,
    /// Resampling draws per census fit (0 skips resampling).
    #[arg(long, default_value_t = 0)]
    pub draws: usize,
    #[command(flatten)]
    pub seed: SeedArg,
    #[command(flatten)]
    pub tol: ToleranceArgs,
    #[arg(long, default_value = "study_report.csv")]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Fit JSON written by `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    /// Resampling JSON written by `variance`.
    #[arg(long)]
    pub draws: Option<PathBuf>,
    /// Upper age limit A*.
    #[arg(long, default_value_t = 18.0)]
    pub horizon: f64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

fn check_targets(paths: &[&Path], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    if let Some(p) = paths.iter().find(|p| p.exists()) {
        bail!("{} already exists (use --force to overwrite)", p.display());
    }
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Runs the parsed command and returns the process exit status.
pub fn run(cli: Cli) -> Result<u8> {
    if let Some(n) = cli.parallel {
        if n == 0 {
            bail!("--parallel must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Variance(a) => variance(a),
        Command::Study(a) => study(a),
        Command::Report(a) => report(a),
    }
}

fn simulate(a: SimulateArgs) -> Result<u8> {
    let mut cfg: ScenarioConfig = match (&a.scenario, &a.config) {
        (Some(id), None) => scenario(*id)?,
        (None, Some(p)) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        _ => bail!("exactly one of --scenario or --config is required"),
    };
    if let Some(n) = a.population {
        cfg.population_size = n;
    }
    cfg.seed = a.seed.seed.unwrap_or(if a.config.is_some() { cfg.seed } else { 0 });
    cfg.validate()?;

    let names = ["subjects.csv", "events.csv", "census.csv", "truth.json"];
    let full_names = ["subjects_full.csv", "events_full.csv"];
    let mut targets: Vec<PathBuf> = names.iter().map(|n| a.out.join(n)).collect();
    if a.full {
        targets.extend(full_names.iter().map(|n| a.out.join(n)));
    }
    check_targets(&targets.iter().map(PathBuf::as_path).collect::<Vec<_>>(), a.force)?;

    let pop = simulate_population(&cfg)?;
    let cohort = extract_cohort(&pop, cfg.window);
    let census = build_census(&pop, cfg.window)?;
    let mut contents = vec![
        subjects_csv(&cohort)?,
        events_csv(&cohort)?,
        census_csv(&census)?,
        serde_json::to_string_pretty(&cfg)?,
    ];
    let eligible = extract_doubly_censored(&pop, cfg.window, PreWindow::Hidden);
    if a.full {
        let full = extract_doubly_censored(&pop, cfg.window, PreWindow::Revealed);
        contents.push(subjects_csv(&full)?);
        contents.push(events_csv(&full)?);
    }
    ensure_dir(&a.out)?;
    let files: Vec<(&Path, &str)> = targets.iter().map(PathBuf::as_path).zip(contents.iter().map(String::as_str)).collect();
    write_all(&files)?;
    println!(
        "cohort size {} of population {} (fraction {:.4}); {} of {} subjects observed in the window were truncated ({:.4})",
        cohort.len(),
        cfg.population_size,
        cohort.len() as f64 / cfg.population_size as f64,
        eligible.len() - cohort.len(),
        eligible.len(),
        (eligible.len() - cohort.len()) as f64 / eligible.len().max(1) as f64,
    );
    Ok(0)
}

fn load(data: &DataArgs) -> Result<CohortDataset> {
    Ok(read_cohort(&data.subjects, &data.events, data.horizon)?)
}

fn fit(a: FitArgs) -> Result<u8> {
    a.tol.validate()?;
    if matches!(a.approach, Approach::Zt | Approach::ZtKnown) && a.model.baseline_time_varying() {
        bail!(
            "model {} has an unspecified baseline; the zero-truncated likelihood supports constant-baseline models only",
            a.model
        );
    }
    let fit_path = a.out.join("fit.json");
    let base_path = a.out.join("baseline.csv");
    check_targets(&[&fit_path, &base_path], a.force)?;
    let cohort = load(&a.data)?;
    let record = match a.approach {
        Approach::Zt => FitRecord::Zt(em_fit(&cohort, a.model, &a.tol.em())?),
        Approach::ZtKnown => {
            let strata = known_entry_strata(&cohort)?;
            FitRecord::ZtKnown(fit_known_strata(&cohort, a.model, &strata, &a.tol.em())?)
        }
        Approach::Census => {
            let path = a.data.census.as_ref().context("--census is required for the census approach")?;
            let census = read_census(path, a.data.horizon)?;
            FitRecord::Census(fit_census(
                &cohort,
                &census,
                a.model,
                Membership::Posterior,
                &a.tol.census_config(),
            )?)
        }
        Approach::Ideal => {
            if !cohort.strata_known() {
                bail!("the ideal approach needs pre_window_events for every subject with c_left > 0");
            }
            FitRecord::Ideal(fit_ideal(&cohort, a.model, &a.tol.census_config())?)
        }
    };
    let grid = age_grid(a.data.horizon);
    let json = record.to_json()?;
    let curve = baseline_csv(&record.baselines(), &grid)?;
    ensure_dir(&a.out)?;
    write_all(&[(&fit_path, &json), (&base_path, &curve)])?;
    print_fit(&record);
    if record.converged() {
        Ok(0)
    } else {
        eprintln!("warning: fit did not converge; results written with converged=false");
        Ok(EXIT_NOT_CONVERGED)
    }
}

fn print_fit(record: &FitRecord) {
    use recurstrat::variance::{census_estimates, zt_estimates};
    let rows: Vec<(String, String, f64, Option<f64>)> = match record {
        FitRecord::Zt(f) | FitRecord::ZtKnown(f) => zt_estimates(f)
            .into_iter()
            .map(|(e, se)| (e.stratum, e.parameter, e.value, Some(se)))
            .collect(),
        FitRecord::Census(f) | FitRecord::Ideal(f) => census_estimates(f)
            .into_iter()
            .map(|e| (e.stratum, e.parameter, e.value, None))
            .collect(),
    };
    println!("stratum  parameter  estimate  se");
    for (s, p, v, se) in rows {
        let se = se.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"));
        println!("{s:<8} {p:<10} {v:>9.4} {se}");
    }
}

fn variance(a: VarianceArgs) -> Result<u8> {
    a.tol.validate()?;
    let json_path = a.out.join("variance.json");
    let csv_path = a.out.join("variance.csv");
    check_targets(&[&json_path, &csv_path], a.force)?;
    let cohort = load(&a.data)?;
    let path = a.data.census.as_ref().context("--census is required for resampling")?;
    let census = read_census(path, a.data.horizon)?;
    let rc = ResampleConfig {
        draws: a.draws,
        seed: a.seed.seed.unwrap_or(0),
        law: a.law,
    };
    let (base, res) = resample_variance(
        &cohort,
        &census,
        FitTarget::cell(a.model),
        &a.tol.census_config(),
        &rc,
        None,
    )?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["stratum", "parameter", "estimate", "se"])?;
    for (e, se) in res.parameters.iter().zip(&res.se) {
        w.write_record([
            e.stratum.clone(),
            e.parameter.clone(),
            format!("{}", e.value),
            se.map_or_else(|| "NA".to_string(), |x| format!("{x}")),
        ])?;
    }
    let table = String::from_utf8(w.into_inner()?)?;
    let json = serde_json::to_string(&res)?;
    ensure_dir(&a.out)?;
    write_all(&[(&json_path, &json), (&csv_path, &table)])?;
    print!("{table}");
    println!("{} of {} draws dropped", res.dropped, res.total);
    Ok(if base.converged() { 0 } else { EXIT_NOT_CONVERGED })
}

fn study(a: StudyArgs) -> Result<u8> {
    a.tol.validate()?;
    if a.replicates == 0 {
        bail!("--replicates must be at least 1");
    }
    check_targets(&[&a.out], a.force)?;
    let mut sc = scenario(a.scenario)?;
    if let Some(n) = a.population {
        sc.population_size = n;
    }
    let mut fits = Vec::new();
    for &ap in &a.approaches {
        for &m in &a.models {
            if matches!(ap, Approach::Zt | Approach::ZtKnown) && m.baseline_time_varying() {
                eprintln!("skipping {ap} with {m}: constant-baseline models only");
                continue;
            }
            fits.push((ap, m));
        }
    }
    if fits.is_empty() {
        bail!("no admissible (approach, model) pairs");
    }
    let cfg = StudyConfig {
        scenario_label: a.scenario.to_string(),
        scenario: sc,
        replicates: a.replicates,
        fits,
        seed: a.seed.seed.unwrap_or(0),
        resample_draws: a.draws,
        em: a.tol.em(),
        census_config: a.tol.census_config(),
    };
    let report = replicate_study(&cfg)?;
    let csv = report.to_csv()?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_all(&[(&a.out, &csv)])?;
    print!("{csv}");
    Ok(0)
}

fn report(a: ReportArgs) -> Result<u8> {
    let out = a.out.join("baseline_curves.csv");
    check_targets(&[&out], a.force)?;
    let text = fs::read_to_string(&a.fit).with_context(|| format!("reading {}", a.fit.display()))?;
    let record = FitRecord::from_json(&text)?;
    let draws: Option<ResampleResult> = match &a.draws {
        Some(p) if p.exists() => {
            let t = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(serde_json::from_str(&t).with_context(|| format!("parsing {}", p.display()))?)
        }
        _ => None,
    };
    let grid = age_grid(a.horizon);
    let baselines = record.baselines();
    let usable = draws.as_ref().filter(|r| {
        r.model == record.model() && r.grid == grid && r.draws.iter().all(|d| d.cumulative.len() == baselines.len())
    });
    if usable.is_none() {
        eprintln!("notice: no matching resampling draws; percentile bands omitted");
    }
    let csv = baseline_curves_csv(&baselines, &grid, usable)?;
    ensure_dir(&a.out)?;
    write_all(&[(&out, &csv)])?;
    println!("wrote {}", out.display());
    Ok(0)
}
