//! Maximum likelihood for zero-truncated cohorts under constant baselines.
//!
//! Parameters are `α_s = (log λ_0s, β_s)` acting on `z* = (1, z)`. Grid cells
//! with shared components are fitted through a linear map `α = M φ` from the
//! free parameters `φ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::CohortDataset;
use crate::error::{Error, Result};
use crate::model::{ModelCell, StratumAt, StratumId};
use crate::numeric::{
    covariance_from_hessian, fd_step, log1m_exp, log_add_exp, maximize, symmetrize, x_over_expm1,
    NewtonOptions, Objective,
};

/// Per-stratum `α_s = (log λ_0s, β_s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaParams {
    pub alpha: [Vec<f64>; 2],
}

impl AlphaParams {
    pub fn new(alpha1: Vec<f64>, alpha2: Vec<f64>) -> Self {
        AlphaParams {
            alpha: [alpha1, alpha2],
        }
    }

    pub fn from_rates(lambda: [f64; 2], beta: [Vec<f64>; 2]) -> Self {
        let mk = |l: f64, b: &Vec<f64>| {
            let mut v = vec![l.ln()];
            v.extend_from_slice(b);
            v
        };
        AlphaParams::new(mk(lambda[0], &beta[0]), mk(lambda[1], &beta[1]))
    }

    pub fn lambda0(&self, s: StratumId) -> f64 {
        self.alpha[s.index()][0].exp()
    }

    pub fn beta(&self, s: StratumId) -> &[f64] {
        &self.alpha[s.index()][1..]
    }

    fn stacked(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.alpha[0].len() * 2,
            self.alpha[0].iter().chain(self.alpha[1].iter()).copied(),
        )
    }

    fn from_stacked(v: &DVector<f64>) -> Self {
        let k = v.len() / 2;
        AlphaParams::new(v.rows(0, k).iter().copied().collect(), v.rows(k, k).iter().copied().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Entry {
    One,
    Two,
    Unknown,
}

/// Subject summary sufficient for the constant-baseline likelihood.
#[derive(Debug, Clone)]
struct Subj {
    zs: Vec<f64>,
    cl: f64,
    cr: f64,
    a1: f64,
    n: f64,
    entry: Entry,
}

impl Subj {
    fn eta(&self, alpha: &[f64]) -> f64 {
        self.zs.iter().zip(alpha).map(|(z, a)| z * a).sum()
    }
}

fn prepare(cohort: &CohortDataset, initial: Option<&[StratumId]>) -> Result<Vec<Subj>> {
    if !cohort.zero_truncated {
        return Err(Error::InvalidArgument(
            "zero-truncated likelihood needs a zero-truncated cohort".into(),
        ));
    }
    if let Some(init) = initial {
        if init.len() != cohort.len() {
            return Err(Error::InvalidArgument(
                "one initial stratum per subject required".into(),
            ));
        }
    }
    cohort
        .subjects
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let a1 = s.first_event().ok_or_else(|| {
                Error::InvalidArgument(format!("subject {} has no events", cohort.ids[i]))
            })?;
            let entry = match initial {
                Some(init) => match init[i] {
                    StratumId::S1 => Entry::One,
                    StratumId::S2 => Entry::Two,
                },
                None => match s.entry_stratum() {
                    StratumAt::Known(StratumId::S1) => Entry::One,
                    StratumAt::Known(StratumId::S2) => Entry::Two,
                    StratumAt::Unknown => Entry::Unknown,
                },
            };
            let mut zs = Vec::with_capacity(cohort.dim + 1);
            zs.push(1.0);
            zs.extend_from_slice(&s.covariates);
            Ok(Subj {
                zs,
                cl: s.window.c_left,
                cr: s.window.c_right,
                a1,
                n: s.event_ages.len() as f64,
                entry,
            })
        })
        .collect()
}

/// How a subject with unknown entry stratum contributes.
#[derive(Debug, Clone, Copy)]
enum Mode {
    /// Marginal mixture over the entry stratum.
    Mixture,
    /// Complete-data expectation with fixed posterior `P(entry = 1)`.
    Weighted(f64),
}

/// Log-likelihood contribution and its derivatives in `(η1, η2)`.
fn contribution(s: &Subj, e1: f64, e2: f64, mode: Mode) -> (f64, f64, f64) {
    let (t1, t2) = (e1.exp(), e2.exp());
    let w = s.cr - s.cl;
    let r1 = s.cr - s.a1;
    let entry = if s.entry == Entry::Unknown && s.cl <= 0.0 {
        Entry::One
    } else {
        s.entry
    };
    match entry {
        Entry::One => {
            let x = t1 * w;
            let v = e1 - t1 * (s.a1 - s.cl) - log1m_exp(x) + (s.n - 1.0) * e2 - t2 * r1;
            let g1 = 1.0 - t1 * (s.a1 - s.cl) - x_over_expm1(x);
            let g2 = (s.n - 1.0) - t2 * r1;
            (v, g1, g2)
        }
        Entry::Two => {
            let x = t2 * w;
            let v = s.n * e2 - x - log1m_exp(x);
            (v, 0.0, s.n - x - x_over_expm1(x))
        }
        Entry::Unknown => {
            let a = e1 - t1 * s.a1 + (s.n - 1.0) * e2 - t2 * r1;
            let l1cl = log1m_exp(t1 * s.cl);
            let b = l1cl + s.n * e2 - t2 * w;
            let log_h0 = log_add_exp(l1cl + log1m_exp(t2 * w), -t1 * s.cl + log1m_exp(t1 * w));
            let dh1 = t1
                * (s.cr * (-t1 * s.cr - log_h0).exp()
                    - s.cl * (-t1 * s.cl - t2 * w - log_h0).exp());
            let dh2 = t2 * w * (l1cl - t2 * w - log_h0).exp();
            let (da1, da2) = (1.0 - t1 * s.a1, (s.n - 1.0) - t2 * r1);
            let (db1, db2) = (x_over_expm1(t1 * s.cl), s.n - t2 * w);
            let (v, p1) = match mode {
                Mode::Mixture => {
                    let lse = log_add_exp(a, b);
                    (lse - log_h0, (a - lse).exp())
                }
                Mode::Weighted(p1) => {
                    let ab = if p1 > 0.0 { p1 * a } else { 0.0 }
                        + if p1 < 1.0 { (1.0 - p1) * b } else { 0.0 };
                    (ab - log_h0, p1)
                }
            };
            let p2 = 1.0 - p1;
            (v, p1 * da1 + p2 * db1 - dh1, p1 * da2 + p2 * db2 - dh2)
        }
    }
}

/// Posterior probability that the subject entered the window in stratum 1.
fn entry_posterior(s: &Subj, e1: f64, e2: f64) -> f64 {
    if s.entry != Entry::Unknown || s.cl <= 0.0 {
        return if s.entry == Entry::Two { 0.0 } else { 1.0 };
    }
    let (t1, t2) = (e1.exp(), e2.exp());
    let a = e1 - t1 * s.a1 + (s.n - 1.0) * e2 - t2 * (s.cr - s.a1);
    let b = log1m_exp(t1 * s.cl) + s.n * e2 - t2 * (s.cr - s.cl);
    (a - log_add_exp(a, b)).exp()
}

fn total(subjects: &[Subj], alpha: &AlphaParams, weights: Option<&[f64]>) -> (f64, DVector<f64>) {
    let k = alpha.alpha[0].len();
    let mut g = DVector::zeros(2 * k);
    let mut v = 0.0;
    for (i, s) in subjects.iter().enumerate() {
        let e1 = s.eta(&alpha.alpha[0]);
        let e2 = s.eta(&alpha.alpha[1]);
        let mode = match weights {
            Some(w) => Mode::Weighted(w[i]),
            None => Mode::Mixture,
        };
        let (c, g1, g2) = contribution(s, e1, e2, mode);
        v += c;
        for (j, z) in s.zs.iter().enumerate() {
            g[j] += g1 * z;
            g[k + j] += g2 * z;
        }
    }
    (v, g)
}

/// Log-likelihood with every subject's stratum at `C_L` supplied.
pub fn loglik_zt_known_strata(
    alpha: &AlphaParams,
    cohort: &CohortDataset,
    initial_strata: &[StratumId],
) -> Result<f64> {
    let subjects = prepare(cohort, Some(initial_strata))?;
    Ok(total(&subjects, alpha, None).0)
}

/// Log-likelihood marginal over unknown entry strata.
pub fn mixture_loglik(alpha: &AlphaParams, cohort: &CohortDataset) -> Result<f64> {
    let subjects = prepare(cohort, None)?;
    Ok(total(&subjects, alpha, None).0)
}

/// Gradient of [`mixture_loglik`] in the stacked `(α_1, α_2)` coordinates.
pub fn mixture_score(alpha: &AlphaParams, cohort: &CohortDataset) -> Result<DVector<f64>> {
    let subjects = prepare(cohort, None)?;
    Ok(total(&subjects, alpha, None).1)
}

/// M-step objective `Q(α | α_ref)` and its gradient in stacked coordinates.
///
/// Entry posteriors are evaluated at `reference` and held fixed.
pub fn em_objective(
    alpha: &AlphaParams,
    reference: &AlphaParams,
    cohort: &CohortDataset,
) -> Result<(f64, DVector<f64>)> {
    let subjects = prepare(cohort, None)?;
    let weights: Vec<f64> = subjects
        .iter()
        .map(|s| entry_posterior(s, s.eta(&reference.alpha[0]), s.eta(&reference.alpha[1])))
        .collect();
    Ok(total(&subjects, alpha, Some(&weights)))
}

/// Linear map from free parameters to stacked `(α_1, α_2)` for a constant-baseline cell.
pub fn constraint_matrix(cell: ModelCell, p: usize) -> Result<DMatrix<f64>> {
    let k = p + 1;
    let (bs, cs, varying) = cell.flags();
    if varying {
        return Err(Error::InvalidModel(format!(
            "{cell}: zero-truncated fits require constant baselines"
        )));
    }
    let n_free = if bs { 2 } else { 1 } + if cs { 2 * p } else { p };
    let mut m = DMatrix::zeros(2 * k, n_free);
    let beta_offset = if bs { 2 } else { 1 };
    for s in 0..2 {
        m[(s * k, if bs { s } else { 0 })] = 1.0;
        for j in 0..p {
            let col = beta_offset + if cs { s * p + j } else { j };
            m[(s * k + 1 + j, col)] = 1.0;
        }
    }
    Ok(m)
}

/// Names of the free parameters of `cell`, aligned with [`constraint_matrix`] columns.
pub fn free_parameter_names(cell: ModelCell, p: usize) -> Vec<String> {
    let (bs, cs, _) = cell.flags();
    let mut names = Vec::new();
    if bs {
        names.push("log_lambda0_1".into());
        names.push("log_lambda0_2".into());
    } else {
        names.push("log_lambda0".into());
    }
    if cs {
        for s in 1..=2 {
            names.extend((1..=p).map(|j| format!("beta{s}_{j}")));
        }
    } else {
        names.extend((1..=p).map(|j| format!("beta_{j}")));
    }
    names
}

struct Constrained<'a> {
    subjects: &'a [Subj],
    m: &'a DMatrix<f64>,
    weights: Option<&'a [f64]>,
}

impl Constrained<'_> {
    fn alpha(&self, phi: &DVector<f64>) -> AlphaParams {
        AlphaParams::from_stacked(&(self.m * phi))
    }

    fn value_grad(&self, phi: &DVector<f64>) -> (f64, DVector<f64>) {
        let (v, g) = total(self.subjects, &self.alpha(phi), self.weights);
        (v, self.m.transpose() * g)
    }
}

impl Objective for Constrained<'_> {
    fn value(&self, phi: &DVector<f64>) -> f64 {
        let v = self.value_grad(phi).0;
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }

    fn derivatives(&self, phi: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let (v, g) = self.value_grad(phi);
        let h = gradient_jacobian(|x| self.value_grad(x).1, phi);
        (v, g, h)
    }
}

/// Symmetrized central-difference Jacobian of an analytic gradient.
fn gradient_jacobian<F: Fn(&DVector<f64>) -> DVector<f64>>(grad: F, x: &DVector<f64>) -> DMatrix<f64> {
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let mut xp = x.clone();
    for i in 0..n {
        let step = fd_step(x[i]);
        xp[i] = x[i] + step;
        let gp = grad(&xp);
        xp[i] = x[i] - step;
        let gm = grad(&xp);
        xp[i] = x[i];
        h.set_column(i, &((gp - gm) / (2.0 * step)));
    }
    symmetrize(&mut h);
    h
}

#[derive(Debug, Clone)]
pub struct EmConfig {
    /// Bound on the per-stratum L1 relative parameter change. Convergence
    /// also needs the observed-data score within `1e-6 (1 + events)`.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub initial: Option<AlphaParams>,
    pub newton: NewtonOptions,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            tolerance: 1e-6,
            max_iterations: 500,
            initial: None,
            newton: NewtonOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZtFitResult {
    pub model: ModelCell,
    pub alpha: AlphaParams,
    pub lambda0: [f64; 2],
    pub beta: [Vec<f64>; 2],
    /// Covariance of the free parameters.
    pub covariance: Vec<Vec<f64>>,
    pub parameter_names: Vec<String>,
    /// Standard errors of `α_s` per stratum.
    pub alpha_se: [Vec<f64>; 2],
    pub information_positive_definite: bool,
    pub loglik: f64,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Map a stacked `α` to free parameters by least squares (exact when `α` satisfies the constraint).
fn project(m: &DMatrix<f64>, alpha: &AlphaParams) -> DVector<f64> {
    let mt = m.transpose();
    let a = &mt * m;
    let b = &mt * alpha.stacked();
    a.cholesky().expect("constraint matrix has full column rank").solve(&b)
}

/// Zero-truncated Poisson fit with both strata sharing one `α`.
fn pooled_start(cohort: &CohortDataset, newton: &NewtonOptions) -> Result<AlphaParams> {
    let p = cohort.dim;
    let subjects: Vec<Subj> = prepare(cohort, None)?
        .into_iter()
        .map(|mut s| {
            s.entry = Entry::Two;
            s
        })
        .collect();
    let m = constraint_matrix(ModelCell::Nnc, p)?;
    let events = cohort.num_events() as f64;
    let exposure: f64 = subjects.iter().map(|s| s.cr - s.cl).sum();
    let mut x0 = DVector::zeros(p + 1);
    x0[0] = (events / exposure.max(f64::MIN_POSITIVE)).ln();
    let obj = Constrained {
        subjects: &subjects,
        m: &m,
        weights: None,
    };
    let out = maximize(&obj, x0, newton)?;
    Ok(obj.alpha(&out.x))
}

fn finish(
    cell: ModelCell,
    p: usize,
    subjects: &[Subj],
    m: &DMatrix<f64>,
    phi: &DVector<f64>,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
) -> ZtFitResult {
    let obj = Constrained {
        subjects,
        m,
        weights: None,
    };
    let alpha = obj.alpha(phi);
    let loglik = obj.value_grad(phi).0;
    let h = gradient_jacobian(|x| obj.value_grad(x).1, phi);
    let (cov, pd) = covariance_from_hessian(&h);
    let cov_alpha = m * &cov * m.transpose();
    let k = p + 1;
    let se = |s: usize| -> Vec<f64> {
        (0..k)
            .map(|j| cov_alpha[(s * k + j, s * k + j)].max(0.0).sqrt())
            .collect()
    };
    ZtFitResult {
        model: cell,
        lambda0: [alpha.lambda0(StratumId::S1), alpha.lambda0(StratumId::S2)],
        beta: [
            alpha.beta(StratumId::S1).to_vec(),
            alpha.beta(StratumId::S2).to_vec(),
        ],
        alpha,
        covariance: to_rows(&cov),
        parameter_names: free_parameter_names(cell, p),
        alpha_se: [se(0), se(1)],
        information_positive_definite: pd,
        loglik,
        loglik_trace: trace,
        iterations,
        converged,
    }
}

fn l1_relative_change(new: &AlphaParams, old: &AlphaParams) -> [f64; 2] {
    let f = |s: usize| {
        let num: f64 = new.alpha[s]
            .iter()
            .zip(&old.alpha[s])
            .map(|(a, b)| (a - b).abs())
            .sum();
        let den: f64 = old.alpha[s].iter().map(|v| v.abs()).sum();
        num / den.max(1e-12)
    };
    [f(0), f(1)]
}

/// EM fit over unknown entry strata for a constant-baseline cell.
///
/// Subjects whose pre-window event count is recorded enter with their known
/// stratum. When no subject has an unknown entry stratum the likelihood is
/// maximized directly and one iteration is reported.
pub fn em_fit(cohort: &CohortDataset, cell: ModelCell, config: &EmConfig) -> Result<ZtFitResult> {
    if cohort.is_empty() {
        return Err(Error::InvalidArgument("empty cohort".into()));
    }
    if !(config.tolerance > 0.0) {
        return Err(Error::InvalidArgument("EM tolerance must be positive".into()));
    }
    let p = cohort.dim;
    let m = constraint_matrix(cell, p)?;
    let subjects = prepare(cohort, None)?;
    let start = match &config.initial {
        Some(a) => a.clone(),
        None => pooled_start(cohort, &config.newton)?,
    };
    let mut phi = project(&m, &start);
    let full = Constrained {
        subjects: &subjects,
        m: &m,
        weights: None,
    };
    let latent = subjects
        .iter()
        .any(|s| s.entry == Entry::Unknown && s.cl > 0.0);
    if cell.is_unstratified() || !latent {
        let v0 = full.value(&phi);
        let out = maximize(&full, phi, &config.newton)?;
        return Ok(finish(
            cell,
            p,
            &subjects,
            &m,
            &out.x,
            vec![v0, out.value],
            1,
            out.converged,
        ));
    }

    // Parameter changes alone can stall along weakly identified directions.
    let score_bound = 1e-6 * (1.0 + cohort.num_events() as f64);
    let mut trace = vec![full.value(&phi)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        iterations += 1;
        let old = full.alpha(&phi);
        let weights: Vec<f64> = subjects
            .iter()
            .map(|s| entry_posterior(s, s.eta(&old.alpha[0]), s.eta(&old.alpha[1])))
            .collect();
        let q = Constrained {
            subjects: &subjects,
            m: &m,
            weights: Some(&weights),
        };
        let out = maximize(&q, phi.clone(), &config.newton).map_err(|e| match e {
            Error::SingularHessian { .. } => Error::SingularHessian {
                stratum: singular_stratum(&q, &phi, p),
            },
            other => other,
        })?;
        phi = out.x;
        let new = full.alpha(&phi);
        trace.push(full.value(&phi));
        if l1_relative_change(&new, &old)
            .iter()
            .all(|&c| c <= config.tolerance)
            && full.value_grad(&phi).1.amax() <= score_bound
        {
            converged = true;
            break;
        }
    }
    Ok(finish(cell, p, &subjects, &m, &phi, trace, iterations, converged))
}

/// Stratum whose diagonal block of the complete-data information is least well conditioned.
fn singular_stratum(q: &Constrained<'_>, phi: &DVector<f64>, p: usize) -> usize {
    let h = q.derivatives(phi).2;
    let h_alpha = q.m * h * q.m.transpose();
    let k = p + 1;
    let det = |s: usize| h_alpha.view((s * k, s * k), (k, k)).determinant().abs();
    if det(0) <= det(1) {
        1
    } else {
        2
    }
}

/// Direct maximum likelihood with every entry stratum supplied.
pub fn fit_known_strata(
    cohort: &CohortDataset,
    cell: ModelCell,
    initial_strata: &[StratumId],
    config: &EmConfig,
) -> Result<ZtFitResult> {
    let p = cohort.dim;
    let m = constraint_matrix(cell, p)?;
    let subjects = prepare(cohort, Some(initial_strata))?;
    let start = match &config.initial {
        Some(a) => a.clone(),
        None => pooled_start(cohort, &config.newton)?,
    };
    let obj = Constrained {
        subjects: &subjects,
        m: &m,
        weights: None,
    };
    let phi = project(&m, &start);
    let v0 = obj.value(&phi);
    let out = maximize(&obj, phi, &config.newton)?;
    Ok(finish(
        cell,
        p,
        &subjects,
        &m,
        &out.x,
        vec![v0, out.value],
        1,
        out.converged,
    ))
}

/// Entry strata read from recorded pre-window counts.
pub fn known_entry_strata(cohort: &CohortDataset) -> Result<Vec<StratumId>> {
    cohort
        .subjects
        .iter()
        .zip(&cohort.ids)
        .map(|(s, id)| match s.entry_stratum() {
            StratumAt::Known(k) => Ok(k),
            StratumAt::Unknown => Err(Error::InvalidArgument(format!(
                "subject {id}: entry stratum unknown"
            ))),
        })
        .collect()
}

/// Inverse of the negative Hessian of [`mixture_loglik`] at `alpha_hat` over
/// the free parameters of `cell`, with a positive-definiteness flag.
pub fn zt_information(
    alpha_hat: &AlphaParams,
    cohort: &CohortDataset,
    cell: ModelCell,
) -> Result<(DMatrix<f64>, bool)> {
    let m = constraint_matrix(cell, cohort.dim)?;
    let subjects = prepare(cohort, None)?;
    let obj = Constrained {
        subjects: &subjects,
        m: &m,
        weights: None,
    };
    let phi = project(&m, alpha_hat);
    let h = gradient_jacobian(|x| obj.value_grad(x).1, &phi);
    Ok(covariance_from_hessian(&h))
}

/// Poisson fit that ignores zero truncation and strata.
pub fn fit_poisson_ignoring_truncation(cohort: &CohortDataset) -> Result<AlphaParams> {
    struct Naive<'a>(&'a [Subj]);
    impl Naive<'_> {
        fn vg(&self, a: &DVector<f64>) -> (f64, DVector<f64>) {
            let mut g = DVector::zeros(a.len());
            let mut v = 0.0;
            for s in self.0 {
                let e: f64 = s.zs.iter().zip(a.iter()).map(|(z, b)| z * b).sum();
                let mu = e.exp() * (s.cr - s.cl);
                v += s.n * e - mu;
                for (j, z) in s.zs.iter().enumerate() {
                    g[j] += (s.n - mu) * z;
                }
            }
            (v, g)
        }
    }
    impl Objective for Naive<'_> {
        fn value(&self, x: &DVector<f64>) -> f64 {
            self.vg(x).0
        }
        fn derivatives(&self, x: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
            let (v, g) = self.vg(x);
            let mut h = DMatrix::zeros(x.len(), x.len());
            for s in self.0 {
                let e: f64 = s.zs.iter().zip(x.iter()).map(|(z, b)| z * b).sum();
                let mu = e.exp() * (s.cr - s.cl);
                let zv = DVector::from_column_slice(&s.zs);
                h -= mu * &zv * zv.transpose();
            }
            (v, g, h)
        }
    }
    let subjects = prepare(cohort, None)?;
    let mut x0 = DVector::zeros(cohort.dim + 1);
    let exposure: f64 = subjects.iter().map(|s| s.cr - s.cl).sum();
    x0[0] = (cohort.num_events() as f64 / exposure).ln();
    let out = maximize(&Naive(&subjects), x0, &NewtonOptions::default())?;
    let a: Vec<f64> = out.x.iter().copied().collect();
    Ok(AlphaParams::new(a.clone(), a))
}
