//! Census-augmented estimating equations for zero-truncated recurrent events.
//!
//! Each stratum `s` maps to a baseline group `g(s)` and to a design
//! `x_s(z) = A_s z + b_s`, so the fitted intensity in stratum `s` is
//! `λ_{0,g(s)}(a) exp(θ' x_s(z))`. Every grid cell, and the single-baseline
//! model with a stratum indicator, is a choice of `(A_s, b_s, g)`.
//!
//! Time-varying cells solve the weighted partial-likelihood score and use the
//! Breslow estimator for the baselines. Constant-baseline cells solve the
//! Poisson score with the baseline profiled out, `λ_g = E_g / ∫ G_g`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{cmp_cells, CensusTable, CohortDataset};
use crate::error::{Error, Result};
use crate::model::{
    Baseline, Model, ModelCell, ModelSpec, Parameters, StratificationScheme, StepFunction,
    StratumAt, StratumId,
};
use crate::numeric::{maximize, NewtonOptions, Objective};
use crate::simulate::integer_horizon;

/// How observed events are assigned to strata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Membership {
    /// Indicators from recorded pre-window counts.
    KnownStrata,
    /// Posterior stratum probabilities given the observed record.
    Posterior,
}

/// Linear designs and baseline groups of a fitted model.
#[derive(Debug, Clone)]
pub struct Design {
    pub cell: ModelCell,
    pub strata: usize,
    pub groups: usize,
    pub group_of: Vec<usize>,
    a: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
    pub q: usize,
    pub p: usize,
    pub indicator: bool,
}

impl Design {
    pub fn for_cell(cell: ModelCell, p: usize) -> Self {
        let (bs, cs, _) = cell.flags();
        let eye = DMatrix::<f64>::identity(p, p);
        if !bs && !cs {
            return Design {
                cell,
                strata: 1,
                groups: 1,
                group_of: vec![0],
                a: vec![eye],
                b: vec![DVector::zeros(p)],
                q: p,
                p,
                indicator: false,
            };
        }
        let (a, q) = if cs {
            let mut a1 = DMatrix::zeros(2 * p, p);
            let mut a2 = DMatrix::zeros(2 * p, p);
            a1.view_mut((0, 0), (p, p)).copy_from(&eye);
            a2.view_mut((p, 0), (p, p)).copy_from(&eye);
            (vec![a1, a2], 2 * p)
        } else {
            (vec![eye.clone(), eye], p)
        };
        Design {
            cell,
            strata: 2,
            groups: if bs { 2 } else { 1 },
            group_of: if bs { vec![0, 1] } else { vec![0, 0] },
            a,
            b: vec![DVector::zeros(q), DVector::zeros(q)],
            q,
            p,
            indicator: false,
        }
    }

    /// One shared baseline and shared coefficients plus an indicator of stratum 2.
    pub fn stratum_indicator(varying: bool, p: usize) -> Self {
        let mut a = DMatrix::zeros(p + 1, p);
        a.view_mut((0, 0), (p, p))
            .copy_from(&DMatrix::<f64>::identity(p, p));
        let mut b2 = DVector::zeros(p + 1);
        b2[p] = 1.0;
        Design {
            cell: if varying { ModelCell::Snv } else { ModelCell::Snc },
            strata: 2,
            groups: 1,
            group_of: vec![0, 0],
            a: vec![a.clone(), a],
            b: vec![DVector::zeros(p + 1), b2],
            q: p + 1,
            p,
            indicator: true,
        }
    }

    pub fn varying(&self) -> bool {
        self.cell.baseline_time_varying()
    }

    /// `x_s(z)`.
    pub fn x(&self, s: usize, z: &[f64]) -> DVector<f64> {
        &self.a[s] * DVector::from_column_slice(z) + &self.b[s]
    }

    /// Stratum coefficients `A_s' θ`.
    pub fn beta(&self, s: usize, theta: &DVector<f64>) -> Vec<f64> {
        (self.a[s].transpose() * theta).iter().copied().collect()
    }

    /// Stratum log-rate offset `b_s' θ`.
    pub fn offset(&self, s: usize, theta: &DVector<f64>) -> f64 {
        self.b[s].dot(theta)
    }

    fn stratum_rows(&self, s: usize) -> Vec<usize> {
        (0..self.q)
            .filter(|&r| self.a[s].row(r).iter().any(|&v| v != 0.0))
            .collect()
    }

    /// Intensity model implied by `θ` and the group baselines.
    pub fn model(&self, theta: &DVector<f64>, group_baselines: &[Baseline], horizon: f64) -> Result<Model> {
        let beta: Vec<Vec<f64>> = (0..self.strata).map(|s| self.beta(s, theta)).collect();
        let baseline: Vec<Baseline> = (0..self.strata)
            .map(|s| scale_baseline(&group_baselines[self.group_of[s]], self.offset(s, theta).exp()))
            .collect();
        let spec = if self.strata == 1 {
            ModelSpec {
                baseline_stratified: false,
                coefficients_stratified: false,
                baseline_time_varying: self.varying(),
                scheme: StratificationScheme::None,
                horizon,
            }
        } else {
            ModelSpec::from_cell(ModelCell::Ssv, horizon)
        };
        Model::new(spec, Parameters::new(beta, baseline))
    }
}

/// Multiply a baseline by a positive factor.
pub fn scale_baseline(b: &Baseline, f: f64) -> Baseline {
    match b {
        Baseline::Constant(r) => Baseline::Constant(r * f),
        Baseline::PiecewiseConstant { breaks, rates } => Baseline::PiecewiseConstant {
            breaks: breaks.clone(),
            rates: rates.iter().map(|r| r * f).collect(),
        },
        Baseline::Step(s) => Baseline::Step(
            StepFunction::new(
                s.ages().to_vec(),
                s.increments().iter().map(|d| d * f).collect(),
            )
            .expect("scaling preserves validity"),
        ),
    }
}

/// `∫_{lo}^{hi} exp(-Λ(u) k) du` for constant or piecewise-constant `Λ'`.
fn integral_survival(b: &Baseline, k: f64, lo: f64, hi: f64) -> Result<f64> {
    let mut cuts = vec![lo, hi];
    match b {
        Baseline::Constant(_) => {}
        Baseline::PiecewiseConstant { breaks, .. } => {
            cuts.extend(breaks.iter().copied().filter(|&x| x > lo && x < hi));
        }
        Baseline::Step(_) => {
            return Err(Error::InvalidModel(
                "exposure integral needs a continuous baseline".into(),
            ))
        }
    }
    cuts.sort_by(f64::total_cmp);
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (u0, u1) = (w[0], w[1]);
        let len = u1 - u0;
        if len <= 0.0 {
            continue;
        }
        let rate = b.rate(0.5 * (u0 + u1)).unwrap_or(0.0) * k;
        let start = (-b.cumulative(u0) * k).exp();
        total += if rate * len < 1e-12 {
            start * len * (1.0 - 0.5 * rate * len)
        } else {
            start * crate::numeric::one_minus_exp(rate * len) / rate
        };
    }
    Ok(total)
}

#[derive(Debug, Clone)]
enum RiskSource {
    /// Sorted segment starts and ends per `[stratum][cell]`.
    Ideal {
        starts: Vec<Vec<Vec<f64>>>,
        ends: Vec<Vec<Vec<f64>>>,
        lengths: Vec<Vec<f64>>,
    },
    /// Census totals over years per `[cell][age]`.
    Census { totals: Vec<Vec<f64>> },
}

/// At-risk masses `m_s(c, a)` and exposures `∫ m_s(c, a) da` by stratum and covariate cell.
#[derive(Debug, Clone)]
pub struct RiskProvider {
    source: RiskSource,
    pub cells: Vec<Vec<f64>>,
    pub strata: usize,
    pub horizon: f64,
}

impl RiskProvider {
    /// Realized risk sets of a doubly-censored dataset.
    pub fn ideal(data: &CohortDataset, strata: usize) -> Result<Self> {
        if strata == 2 && !data.strata_known() {
            return Err(Error::InvalidArgument(
                "ideal risk sets need every entry stratum".into(),
            ));
        }
        let mut cells: Vec<Vec<f64>> = data.subjects.iter().map(|s| s.covariates.clone()).collect();
        cells.sort_by(|a, b| cmp_cells(a, b));
        cells.dedup();
        let nc = cells.len();
        let mut starts = vec![vec![Vec::new(); nc]; strata];
        let mut ends = vec![vec![Vec::new(); nc]; strata];
        let mut lengths = vec![vec![0.0; nc]; strata];
        for s in &data.subjects {
            let c = cells
                .binary_search_by(|x| cmp_cells(x, &s.covariates))
                .expect("catalog built from data");
            let (cl, cr) = (s.window.c_left, s.window.c_right);
            let mut push = |st: usize, lo: f64, hi: f64| {
                if hi > lo {
                    starts[st][c].push(lo);
                    ends[st][c].push(hi);
                    lengths[st][c] += hi - lo;
                }
            };
            if strata == 1 {
                push(0, cl, cr);
                continue;
            }
            match s.entry_stratum() {
                StratumAt::Known(StratumId::S2) => push(1, cl, cr),
                _ => {
                    let a1 = s.first_event().unwrap_or(cr);
                    push(0, cl, a1);
                    push(1, a1, cr);
                }
            }
        }
        for v in starts.iter_mut().chain(ends.iter_mut()).flatten() {
            v.sort_by(f64::total_cmp);
        }
        Ok(RiskProvider {
            source: RiskSource::Ideal {
                starts,
                ends,
                lengths,
            },
            cells,
            strata,
            horizon: data.horizon,
        })
    }

    pub fn census(census: &CensusTable, strata: usize, horizon: f64) -> Result<Self> {
        let ages = integer_horizon(horizon)?;
        if census.ages != ages {
            return Err(Error::InvalidArgument(format!(
                "census covers {} ages but the horizon is {horizon}",
                census.ages
            )));
        }
        Ok(RiskProvider {
            source: RiskSource::Census {
                totals: census.totals_by_cell(),
            },
            cells: census.cells.clone(),
            strata,
            horizon,
        })
    }

    pub fn is_ideal(&self) -> bool {
        matches!(self.source, RiskSource::Ideal { .. })
    }

    pub fn cell_index(&self, z: &[f64]) -> Option<usize> {
        self.cells.binary_search_by(|c| cmp_cells(c, z)).ok()
    }

    fn age_bin(&self, a: f64) -> Result<usize> {
        if !(a >= 0.0 && a <= self.horizon) {
            return Err(Error::CensusAgeRange {
                age: a,
                horizon: self.horizon,
            });
        }
        Ok((a.floor() as usize).min(self.horizon as usize - 1))
    }

    /// Stratum probabilities of cell `c` at age `a`.
    fn probs(&self, model: Option<&Model>, c: usize, a: f64) -> [f64; 2] {
        match (self.strata, model) {
            (2, Some(m)) => {
                let p1 = m.stratum_prob_marginal(&self.cells[c], a, StratumId::S1);
                [p1, 1.0 - p1]
            }
            _ => [1.0, 0.0],
        }
    }

    /// At-risk mass `m_s(c, a)`. The model supplies stratum probabilities in census mode.
    pub fn mass(&self, model: Option<&Model>, s: usize, c: usize, a: f64) -> Result<f64> {
        match &self.source {
            RiskSource::Ideal { starts, ends, .. } => {
                let n_start = starts[s][c].partition_point(|&x| x < a);
                let n_end = ends[s][c].partition_point(|&x| x < a);
                Ok((n_start - n_end) as f64)
            }
            RiskSource::Census { totals } => {
                let k = self.age_bin(a)?;
                Ok(self.probs(model, c, a)[s] * totals[c][k])
            }
        }
    }

    /// Masses for all strata and cells at age `a`, indexed `[s * cells + c]`.
    fn masses_at(&self, model: Option<&Model>, a: f64, out: &mut [f64]) -> Result<()> {
        let nc = self.cells.len();
        match &self.source {
            RiskSource::Ideal { .. } => {
                for s in 0..self.strata {
                    for c in 0..nc {
                        out[s * nc + c] = self.mass(model, s, c, a)?;
                    }
                }
            }
            RiskSource::Census { totals } => {
                let k = self.age_bin(a)?;
                for c in 0..nc {
                    let p = self.probs(model, c, a);
                    for s in 0..self.strata {
                        out[s * nc + c] = p[s] * totals[c][k];
                    }
                }
            }
        }
        Ok(())
    }

    /// `∫_0^{A*} m_s(c, a) da`.
    pub fn exposure(&self, model: Option<&Model>, s: usize, c: usize) -> Result<f64> {
        match &self.source {
            RiskSource::Ideal { lengths, .. } => Ok(lengths[s][c]),
            RiskSource::Census { totals } => {
                if self.strata == 1 {
                    return Ok(totals[c].iter().sum());
                }
                let m = model.ok_or_else(|| {
                    Error::InvalidArgument("census exposure needs a model".into())
                })?;
                let b1 = m.baseline(StratumId::S1);
                let k1 = m.linear_predictor(StratumId::S1, &self.cells[c]).exp();
                let mut total = 0.0;
                for (k, &cnt) in totals[c].iter().enumerate() {
                    if cnt == 0.0 {
                        continue;
                    }
                    let surv = integral_survival(b1, k1, k as f64, k as f64 + 1.0)?;
                    total += cnt * if s == 0 { surv } else { 1.0 - surv };
                }
                Ok(total)
            }
        }
    }

    /// `(G^(0), G^(1), G^(2))` of stratum `s` at age `a` for coefficients `beta` on `z`.
    pub fn risk_moments(
        &self,
        model: Option<&Model>,
        s: usize,
        beta: &[f64],
        a: f64,
    ) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let p = beta.len();
        let mut g0 = 0.0;
        let mut g1 = DVector::zeros(p);
        let mut g2 = DMatrix::zeros(p, p);
        for c in 0..self.cells.len() {
            let m = self.mass(model, s, c, a)?;
            if m == 0.0 {
                continue;
            }
            let z = DVector::from_column_slice(&self.cells[c]);
            let w = m * beta.iter().zip(z.iter()).map(|(b, x)| b * x).sum::<f64>().exp();
            g0 += w;
            g1 += w * &z;
            g2 += w * &z * z.transpose();
        }
        Ok((g0, g1, g2))
    }
}

#[derive(Debug, Clone)]
struct EventRec {
    subject: usize,
    age: f64,
    /// Index among the subject's events.
    order: usize,
}

/// Frozen estimating-equation problem for one outer iteration.
#[derive(Debug, Clone)]
pub struct CensusProblem {
    pub design: Design,
    pub risk: RiskProvider,
    membership: Membership,
    /// Subject covariates, entry strata and event counts.
    cohort: CohortDataset,
    subject_weight: Vec<f64>,
    events: Vec<EventRec>,
    /// Design rows `x_s(z_c)` indexed `[s * cells + c]`.
    x_cells: Vec<DVector<f64>>,
    /// Frozen event weights `[e * strata + s]`.
    w: Vec<f64>,
    /// Frozen masses `[e][s * cells + c]` (time-varying cells only).
    m: Vec<f64>,
    /// Frozen exposures `[s * cells + c]` (constant cells only).
    exposure: Vec<f64>,
    /// `Σ_e Σ_s w x_s(z_i)`.
    numerator: DVector<f64>,
}

impl CensusProblem {
    pub fn new(
        cohort: &CohortDataset,
        risk: RiskProvider,
        design: Design,
        membership: Membership,
        multipliers: Option<&[f64]>,
    ) -> Result<Self> {
        if cohort.dim != design.p {
            return Err(Error::InvalidArgument(format!(
                "dataset has {} covariates, model expects {}",
                cohort.dim, design.p
            )));
        }
        if risk.strata != design.strata {
            return Err(Error::InvalidArgument("risk provider strata mismatch".into()));
        }
        if let Some(w) = multipliers {
            if w.len() != cohort.len() {
                return Err(Error::InvalidArgument("one multiplier per subject required".into()));
            }
        }
        if (membership == Membership::KnownStrata || risk.is_ideal())
            && design.strata == 2
            && !cohort.strata_known()
        {
            return Err(Error::InvalidArgument(
                "known-strata fits need every subject's pre-window event count".into(),
            ));
        }
        for s in &cohort.subjects {
            if risk.cell_index(&s.covariates).is_none() {
                return Err(Error::UnknownCovariateCell(s.covariates.clone()));
            }
        }
        let mut events: Vec<EventRec> = cohort
            .subjects
            .iter()
            .enumerate()
            .flat_map(|(i, s)| {
                s.event_ages.iter().enumerate().map(move |(k, &a)| EventRec {
                    subject: i,
                    age: a,
                    order: k,
                })
            })
            .collect();
        events.sort_by(|x, y| x.age.total_cmp(&y.age).then(x.subject.cmp(&y.subject)));
        if !risk.is_ideal() {
            for e in &events {
                risk.age_bin(e.age)?;
            }
        }
        let nc = risk.cells.len();
        let x_cells = (0..design.strata)
            .flat_map(|s| (0..nc).map(move |c| (s, c)))
            .map(|(s, c)| design.x(s, &risk.cells[c]))
            .collect();
        let q = design.q;
        Ok(CensusProblem {
            subject_weight: multipliers
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![1.0; cohort.len()]),
            w: vec![0.0; events.len() * design.strata],
            m: Vec::new(),
            exposure: vec![0.0; design.strata * nc],
            numerator: DVector::zeros(q),
            x_cells,
            events,
            cohort: cohort.clone(),
            membership,
            design,
            risk,
        })
    }

    pub fn num_events(&self) -> usize {
        self.events.len()
    }

    /// Replace the per-subject multipliers.
    pub fn set_multipliers(&mut self, w: &[f64]) {
        self.subject_weight.copy_from_slice(w);
    }

    /// Event weights by stratum under `model`.
    fn event_weights(&self, model: &Model, e: &EventRec) -> Result<[f64; 2]> {
        if self.design.strata == 1 {
            return Ok([1.0, 0.0]);
        }
        if e.order > 0 {
            return Ok([0.0, 1.0]);
        }
        let path = &self.cohort.subjects[e.subject];
        match (self.membership, path.entry_stratum()) {
            (_, StratumAt::Known(StratumId::S1)) => Ok([1.0, 0.0]),
            (_, StratumAt::Known(StratumId::S2)) => Ok([0.0, 1.0]),
            (Membership::KnownStrata, StratumAt::Unknown) => Err(Error::InvalidArgument(
                "entry stratum unknown under known-strata membership".into(),
            )),
            (Membership::Posterior, StratumAt::Unknown) => model.stratum_prob_posterior(path, e.age),
        }
    }

    /// Recompute event weights, risk masses and exposures from `model` (Step 1).
    pub fn refresh(&mut self, model: &Model) -> Result<()> {
        let ns = self.design.strata;
        let nc = self.risk.cells.len();
        let prob_model = (ns == 2).then_some(model);
        let mut numerator = DVector::zeros(self.design.q);
        for (k, e) in self.events.iter().enumerate() {
            let w = self.event_weights(model, e)?;
            let mult = self.subject_weight[e.subject];
            let z = &self.cohort.subjects[e.subject].covariates;
            for s in 0..ns {
                let v = w[s] * mult;
                self.w[k * ns + s] = v;
                if v != 0.0 {
                    numerator += v * self.design.x(s, z);
                }
            }
        }
        self.numerator = numerator;
        if self.design.varying() {
            self.m.resize(self.events.len() * ns * nc, 0.0);
            for (k, e) in self.events.iter().enumerate() {
                let slice = &mut self.m[k * ns * nc..(k + 1) * ns * nc];
                self.risk.masses_at(prob_model, e.age, slice)?;
            }
        } else {
            for s in 0..ns {
                for c in 0..nc {
                    self.exposure[s * nc + c] = self.risk.exposure(prob_model, s, c)?;
                }
            }
        }
        Ok(())
    }

    fn rates(&self, theta: &DVector<f64>) -> Vec<f64> {
        self.x_cells.iter().map(|x| x.dot(theta).exp()).collect()
    }

    /// Weighted event totals per group.
    fn group_event_totals(&self) -> Vec<f64> {
        let ns = self.design.strata;
        let mut e = vec![0.0; self.design.groups];
        for k in 0..self.events.len() {
            for s in 0..ns {
                e[self.design.group_of[s]] += self.w[k * ns + s];
            }
        }
        e
    }

    /// Objective, score and Jacobian at `θ` with frozen weights.
    pub fn evaluate(&self, theta: &DVector<f64>, want_jacobian: bool) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let q = self.design.q;
        let ns = self.design.strata;
        let nc = self.risk.cells.len();
        let ng = self.design.groups;
        let r = self.rates(theta);
        let mut val = self.numerator.dot(theta);
        let mut grad = self.numerator.clone();
        let mut hess = DMatrix::zeros(q, q);
        let mut acc = vec![0.0; ns * nc];
        if self.design.varying() {
            let mut g1 = vec![DVector::<f64>::zeros(q); ng];
            let mut g0 = vec![0.0; ng];
            let mut wg = vec![0.0; ng];
            for (k, e) in self.events.iter().enumerate() {
                wg.iter_mut().for_each(|v| *v = 0.0);
                for s in 0..ns {
                    wg[self.design.group_of[s]] += self.w[k * ns + s];
                }
                let m = &self.m[k * ns * nc..(k + 1) * ns * nc];
                for g in 0..ng {
                    if wg[g] == 0.0 {
                        continue;
                    }
                    g0[g] = 0.0;
                    g1[g].fill(0.0);
                    for s in (0..ns).filter(|&s| self.design.group_of[s] == g) {
                        for c in 0..nc {
                            let mr = m[s * nc + c] * r[s * nc + c];
                            if mr != 0.0 {
                                g0[g] += mr;
                                g1[g].axpy(mr, &self.x_cells[s * nc + c], 1.0);
                            }
                        }
                    }
                    if !(g0[g] > 0.0) {
                        return Err(Error::CensusSupportHole {
                            age: e.age,
                            stratum: g + 1,
                        });
                    }
                    val -= wg[g] * g0[g].ln();
                    let mean = &g1[g] / g0[g];
                    grad.axpy(-wg[g], &mean, 1.0);
                    if want_jacobian {
                        hess.ger(wg[g], &mean, &mean, 1.0);
                        for s in (0..ns).filter(|&s| self.design.group_of[s] == g) {
                            for c in 0..nc {
                                acc[s * nc + c] += wg[g] * m[s * nc + c] * r[s * nc + c] / g0[g];
                            }
                        }
                    }
                }
            }
        } else {
            let eg = self.group_event_totals();
            for g in 0..ng {
                if eg[g] == 0.0 {
                    continue;
                }
                let mut i0 = 0.0;
                let mut i1 = DVector::zeros(q);
                for s in (0..ns).filter(|&s| self.design.group_of[s] == g) {
                    for c in 0..nc {
                        let lr = self.exposure[s * nc + c] * r[s * nc + c];
                        i0 += lr;
                        i1.axpy(lr, &self.x_cells[s * nc + c], 1.0);
                    }
                }
                if !(i0 > 0.0) {
                    return Err(Error::NonFinite(format!(
                        "zero exposure in baseline group {}",
                        g + 1
                    )));
                }
                val -= eg[g] * i0.ln();
                let mean = &i1 / i0;
                grad.axpy(-eg[g], &mean, 1.0);
                if want_jacobian {
                    hess.ger(eg[g], &mean, &mean, 1.0);
                    for s in (0..ns).filter(|&s| self.design.group_of[s] == g) {
                        for c in 0..nc {
                            acc[s * nc + c] += eg[g] * self.exposure[s * nc + c] * r[s * nc + c] / i0;
                        }
                    }
                }
            }
        }
        if want_jacobian {
            for (sc, &a) in acc.iter().enumerate() {
                if a != 0.0 {
                    let x = &self.x_cells[sc];
                    hess.ger(-a, x, x, 1.0);
                }
            }
        }
        Ok((val, grad, hess))
    }

    /// Estimating function at `θ` with frozen weights.
    pub fn score(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.evaluate(theta, false)?.1)
    }

    /// Analytic derivative of [`Self::score`].
    pub fn jacobian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.evaluate(theta, true)?.2)
    }

    /// Baselines per group at `θ`: Breslow steps or profiled constants.
    pub fn baselines(&self, theta: &DVector<f64>) -> Result<Vec<Baseline>> {
        let ns = self.design.strata;
        let nc = self.risk.cells.len();
        let ng = self.design.groups;
        let r = self.rates(theta);
        if !self.design.varying() {
            let eg = self.group_event_totals();
            return (0..ng)
                .map(|g| {
                    if eg[g] == 0.0 {
                        return Ok(Baseline::Constant(0.0));
                    }
                    let i0: f64 = (0..ns)
                        .filter(|&s| self.design.group_of[s] == g)
                        .flat_map(|s| (0..nc).map(move |c| s * nc + c))
                        .map(|sc| self.exposure[sc] * r[sc])
                        .sum();
                    if !(i0 > 0.0) {
                        return Err(Error::NonFinite(format!(
                            "zero exposure in baseline group {}",
                            g + 1
                        )));
                    }
                    Ok(Baseline::Constant(eg[g] / i0))
                })
                .collect();
        }
        let mut ages: Vec<Vec<f64>> = vec![Vec::new(); ng];
        let mut incs: Vec<Vec<f64>> = vec![Vec::new(); ng];
        for (k, e) in self.events.iter().enumerate() {
            let m = &self.m[k * ns * nc..(k + 1) * ns * nc];
            for g in 0..ng {
                let strata: Vec<usize> = (0..ns).filter(|&s| self.design.group_of[s] == g).collect();
                let wg: f64 = strata.iter().map(|&s| self.w[k * ns + s]).sum();
                if wg == 0.0 {
                    continue;
                }
                let g0: f64 = strata
                    .iter()
                    .flat_map(|&s| (0..nc).map(move |c| s * nc + c))
                    .map(|sc| m[sc] * r[sc])
                    .sum();
                if !(g0 > 0.0) {
                    return Err(Error::CensusSupportHole {
                        age: e.age,
                        stratum: g + 1,
                    });
                }
                let d = wg / g0;
                if ages[g].last() == Some(&e.age) {
                    *incs[g].last_mut().expect("paired with ages") += d;
                } else {
                    ages[g].push(e.age);
                    incs[g].push(d);
                }
            }
        }
        ages.into_iter()
            .zip(incs)
            .map(|(a, d)| Ok(Baseline::Step(StepFunction::new(a, d)?)))
            .collect()
    }
}

struct InnerObjective<'a>(&'a CensusProblem);

impl Objective for InnerObjective<'_> {
    fn value(&self, x: &DVector<f64>) -> f64 {
        match self.0.evaluate(x, false) {
            Ok((v, _, _)) if v.is_finite() => v,
            _ => f64::NEG_INFINITY,
        }
    }

    fn derivatives(&self, x: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        match self.0.evaluate(x, true) {
            Ok(t) => t,
            Err(_) => (
                f64::NEG_INFINITY,
                DVector::from_element(x.len(), f64::NAN),
                DMatrix::from_element(x.len(), x.len(), f64::NAN),
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceStatus {
    Converged,
    MaxIterations,
    Oscillating,
}

#[derive(Debug, Clone)]
pub struct CensusConfig {
    pub tolerance: f64,
    pub max_outer_iterations: usize,
    pub inner: NewtonOptions,
    /// Warm start: `θ` and group baselines.
    pub initial: Option<(Vec<f64>, Vec<Baseline>)>,
}

impl Default for CensusConfig {
    fn default() -> Self {
        CensusConfig {
            tolerance: 1e-6,
            max_outer_iterations: 200,
            inner: NewtonOptions {
                tolerance: 1e-10,
                max_iterations: 100,
                max_halvings: 20,
            },
            initial: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CensusFitResult {
    pub model: ModelCell,
    /// Fitted with a stratum-indicator covariate on a shared baseline.
    pub indicator: bool,
    pub theta: Vec<f64>,
    /// Coefficients per stratum (one entry for unstratified cells).
    pub beta: Vec<Vec<f64>>,
    /// Baseline per stratum.
    pub baseline: Vec<Baseline>,
    /// Baseline per group, before stratum offsets.
    pub group_baseline: Vec<Baseline>,
    /// Indicator coefficient when fitted.
    pub indicator_coefficient: Option<f64>,
    pub status: ConvergenceStatus,
    pub iterations: usize,
    pub beta_trace: Vec<Vec<f64>>,
    /// `‖U‖∞` per stratum at the final inner solution.
    pub score_norm: Vec<f64>,
    /// `‖U‖∞` after refreshing weights at the solution.
    pub refreshed_score_norm: f64,
    /// Smallest eigenvalue of `-∂U/∂θ` at the solution.
    pub min_information_eigenvalue: f64,
    pub num_events: usize,
}

impl CensusFitResult {
    pub fn converged(&self) -> bool {
        self.status == ConvergenceStatus::Converged
    }

    /// Constant baseline rate of stratum `s` (0-based), when constant.
    pub fn lambda0(&self, s: usize) -> Option<f64> {
        match self.baseline.get(s)? {
            Baseline::Constant(r) => Some(*r),
            _ => None,
        }
    }
}

fn initial_rate(problem: &CensusProblem) -> Result<f64> {
    let ns = problem.design.strata;
    let nc = problem.risk.cells.len();
    let mut person_time = 0.0;
    for c in 0..nc {
        for s in 0..ns {
            person_time += match &problem.risk.source {
                RiskSource::Census { totals } => {
                    if s == 0 {
                        totals[c].iter().sum()
                    } else {
                        0.0
                    }
                }
                RiskSource::Ideal { lengths, .. } => lengths[s][c],
            };
        }
    }
    if !(person_time > 0.0) {
        return Err(Error::InvalidArgument("no at-risk person-time".into()));
    }
    Ok(problem.num_events() as f64 / person_time)
}

fn rel_l1(new: &[f64], old: &[f64]) -> f64 {
    let num: f64 = new.iter().zip(old).map(|(a, b)| (a - b).abs()).sum();
    let den: f64 = old.iter().map(|v| v.abs()).sum();
    num / den.max(1e-12)
}

/// Alternate stratum probabilities, coefficient solve and baseline update.
pub fn solve(problem: &mut CensusProblem, config: &CensusConfig) -> Result<CensusFitResult> {
    if !(config.tolerance > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let design = problem.design.clone();
    let horizon = problem.risk.horizon;
    let (mut theta, mut baselines) = match &config.initial {
        Some((t, b)) => (DVector::from_column_slice(t), b.clone()),
        None => {
            let rate = initial_rate(problem)?;
            (
                DVector::zeros(design.q),
                vec![Baseline::Constant(rate); design.groups],
            )
        }
    };
    if theta.len() != design.q || baselines.len() != design.groups {
        return Err(Error::InvalidArgument("warm start has the wrong shape".into()));
    }
    let betas = |t: &DVector<f64>| -> Vec<Vec<f64>> {
        (0..design.strata).map(|s| design.beta(s, t)).collect()
    };
    let mut trace: Vec<Vec<f64>> = vec![theta.iter().copied().collect()];
    let mut status = ConvergenceStatus::MaxIterations;
    let mut iterations = 0;
    let mut last_hessian = DMatrix::zeros(design.q, design.q);
    let mut last_score = DVector::zeros(design.q);
    while iterations < config.max_outer_iterations {
        iterations += 1;
        let model = design.model(&theta, &baselines, horizon)?;
        problem.refresh(&model)?;
        let out = maximize(&InnerObjective(problem), theta.clone(), &config.inner)?;
        let new_theta = out.x;
        last_hessian = out.hessian;
        last_score = out.gradient;
        baselines = problem.baselines(&new_theta)?;
        let old_b = betas(&theta);
        let new_b = betas(&new_theta);
        let changes: Vec<f64> = old_b.iter().zip(&new_b).map(|(o, n)| rel_l1(n, o)).collect();
        let mut converged = changes.iter().all(|&c| c <= config.tolerance);
        if design.indicator {
            converged &= rel_l1(&[new_theta[design.q - 1]], &[theta[design.q - 1]]) <= config.tolerance;
        }
        trace.push(new_theta.iter().copied().collect());
        theta = new_theta;
        if converged {
            status = ConvergenceStatus::Converged;
            break;
        }
        if trace.len() >= 4 {
            let n = trace.len();
            let two_back = rel_l1(&trace[n - 1], &trace[n - 3]);
            let prev = rel_l1(&trace[n - 2], &trace[n - 4]);
            if two_back <= config.tolerance && prev <= config.tolerance {
                status = ConvergenceStatus::Oscillating;
                break;
            }
        }
    }

    let score_norm: Vec<f64> = (0..design.strata)
        .map(|s| {
            design
                .stratum_rows(s)
                .iter()
                .map(|&r| last_score[r].abs())
                .chain(design.indicator.then(|| last_score[design.q - 1].abs()))
                .fold(0.0, f64::max)
        })
        .collect();
    let min_eig = (-last_hessian.clone())
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let final_model = design.model(&theta, &baselines, horizon)?;
    let mut refreshed = problem.clone();
    refreshed.refresh(&final_model)?;
    let refreshed_score_norm = refreshed.score(&theta)?.amax();

    Ok(CensusFitResult {
        model: design.cell,
        indicator: design.indicator,
        beta: betas(&theta),
        baseline: final_model.params.baseline.clone(),
        group_baseline: baselines,
        indicator_coefficient: design.indicator.then(|| theta[design.q - 1]),
        theta: theta.iter().copied().collect(),
        status,
        iterations,
        beta_trace: trace,
        score_norm,
        refreshed_score_norm,
        min_information_eigenvalue: min_eig,
        num_events: problem.num_events(),
    })
}

/// Census-augmented fit of a grid cell to a zero-truncated cohort.
pub fn fit_census(
    cohort: &CohortDataset,
    census: &CensusTable,
    cell: ModelCell,
    membership: Membership,
    config: &CensusConfig,
) -> Result<CensusFitResult> {
    let design = Design::for_cell(cell, cohort.dim);
    let risk = RiskProvider::census(census, design.strata, cohort.horizon)?;
    let mut problem = CensusProblem::new(cohort, risk, design, membership, None)?;
    solve(&mut problem, config)
}

/// Fit with realized risk sets from a doubly-censored dataset with known strata.
pub fn fit_ideal(data: &CohortDataset, cell: ModelCell, config: &CensusConfig) -> Result<CensusFitResult> {
    let design = Design::for_cell(cell, data.dim);
    let risk = RiskProvider::ideal(data, design.strata)?;
    let mut problem = CensusProblem::new(data, risk, design, Membership::KnownStrata, None)?;
    solve(&mut problem, config)
}

/// SNC fitted as one shared baseline with a stratum-2 indicator covariate.
pub fn fit_snc_via_indicator(
    cohort: &CohortDataset,
    census: &CensusTable,
    config: &CensusConfig,
) -> Result<CensusFitResult> {
    let design = Design::stratum_indicator(false, cohort.dim);
    let risk = RiskProvider::census(census, 2, cohort.horizon)?;
    let mut problem = CensusProblem::new(cohort, risk, design, Membership::Posterior, None)?;
    solve(&mut problem, config)
}
