use recurstrat::census_fit::{fit_census, CensusConfig, Membership};
use recurstrat::model::ModelCell;
use recurstrat::simulate::{build_census, extract_cohort, scenario, simulate_population};
use recurstrat::variance::{
    draw_multipliers, replicate_study, resample_variance, Approach, FitTarget, MultiplierLaw,
    ResampleConfig, StudyConfig,
};
use recurstrat::zt::EmConfig;

fn study(replicates: usize, draws: usize) -> StudyConfig {
    let mut sc = scenario(2).unwrap();
    sc.population_size = 20_000;
    StudyConfig {
        scenario_label: "S2".into(),
        scenario: sc,
        replicates,
        fits: vec![(Approach::Census, ModelCell::Ssc), (Approach::Zt, ModelCell::Nnc)],
        seed: 31,
        resample_draws: draws,
        em: EmConfig::default(),
        census_config: CensusConfig::default(),
    }
}

#[test]
fn multipliers_have_unit_mean() {
    let n = 2000;
    let b = 200;
    for law in [MultiplierLaw::Poisson, MultiplierLaw::StandardNormal] {
        let mut total = 0.0;
        for k in 0..b {
            total += draw_multipliers(law, n, 5, k).iter().sum::<f64>();
        }
        let m = total / (b * n) as f64;
        assert!((m - 1.0).abs() <= 4.0 / ((b * n) as f64).sqrt(), "{law:?}: {m}");
    }
}

#[test]
fn study_is_reproducible_and_single_replicate_has_no_spread() {
    let a = replicate_study(&study(3, 0)).unwrap().to_csv().unwrap();
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(2)
        .build()
        .unwrap()
        .install(|| replicate_study(&study(3, 0)).unwrap().to_csv().unwrap());
    assert_eq!(a, b);
    let one = replicate_study(&study(1, 0)).unwrap();
    assert!(!one.rows.is_empty());
    for r in &one.rows {
        assert!(r.ssd.is_none());
        assert!(r.mean.is_some());
    }
    assert!(one.to_csv().unwrap().contains(",NA,"));
}

#[test]
fn resampled_ses_are_positive_and_law_insensitive() {
    let mut sc = scenario(2).unwrap();
    sc.population_size = 30_000;
    sc.seed = 12;
    let pop = simulate_population(&sc).unwrap();
    let cohort = extract_cohort(&pop, sc.window);
    let census = build_census(&pop, sc.window).unwrap();
    let cfg = CensusConfig::default();
    let base = fit_census(&cohort, &census, ModelCell::Snc, Membership::Posterior, &cfg).unwrap();
    let run = |law| {
        let rc = ResampleConfig { draws: 500, seed: 1, law };
        resample_variance(&cohort, &census, FitTarget::cell(ModelCell::Snc), &cfg, &rc, Some(&base))
            .unwrap()
            .1
    };
    let p = run(MultiplierLaw::Poisson);
    let n = run(MultiplierLaw::StandardNormal);
    for (k, est) in p.parameters.iter().enumerate() {
        let (sp, sn) = (p.se[k].unwrap(), n.se[k].unwrap());
        assert!(sp > 0.0 && sn > 0.0);
        assert!((sp / sn - 1.0).abs() <= 0.15, "{}/{}: {sp} vs {sn}", est.stratum, est.parameter);
    }
    assert_eq!(p.draws.len() + p.dropped, 500);
}

#[test]
fn too_few_draws_rejected() {
    let mut sc = scenario(1).unwrap();
    sc.population_size = 5000;
    let pop = simulate_population(&sc).unwrap();
    let cohort = extract_cohort(&pop, sc.window);
    let census = build_census(&pop, sc.window).unwrap();
    let rc = ResampleConfig { draws: 1, ..ResampleConfig::default() };
    assert!(resample_variance(&cohort, &census, FitTarget::cell(ModelCell::Nnc), &CensusConfig::default(), &rc, None).is_err());
}
