//! Stratified intensity model `λ_0s(a) exp(β_s'z)` and stratum-membership probabilities.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log1m_exp, one_minus_exp};

/// Default age horizon in years.
pub const DEFAULT_HORIZON: f64 = 18.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StratumId {
    /// No event yet.
    S1,
    /// At least one prior event.
    S2,
}

impl StratumId {
    pub const ALL: [StratumId; 2] = [StratumId::S1, StratumId::S2];

    pub fn index(self) -> usize {
        match self {
            StratumId::S1 => 0,
            StratumId::S2 => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(StratumId::S1),
            1 => Some(StratumId::S2),
            _ => None,
        }
    }

    /// One-based label.
    pub fn number(self) -> usize {
        self.index() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StratumAt {
    Known(StratumId),
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratificationScheme {
    FirstEvent,
    None,
}

impl StratificationScheme {
    pub fn num_strata(self) -> usize {
        match self {
            StratificationScheme::FirstEvent => 2,
            StratificationScheme::None => 1,
        }
    }
}

/// Stratum of a subject at age `a` (left-continuous in `a`).
///
/// `pre_window_events` is the number of events before `c_left` when known.
pub fn stratum_at(
    scheme: StratificationScheme,
    observed_event_ages: &[f64],
    pre_window_events: Option<u32>,
    c_left: f64,
    a: f64,
) -> StratumAt {
    if scheme == StratificationScheme::None {
        return StratumAt::Known(StratumId::S1);
    }
    if observed_event_ages.iter().any(|&e| e < a) {
        return StratumAt::Known(StratumId::S2);
    }
    match pre_window_events {
        Some(0) => StratumAt::Known(StratumId::S1),
        Some(_) => StratumAt::Known(StratumId::S2),
        None if c_left <= 0.0 => StratumAt::Known(StratumId::S1),
        None => StratumAt::Unknown,
    }
}

/// Cumulative step function with jumps at `ages`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StepRepr", into = "StepRepr")]
pub struct StepFunction {
    ages: Vec<f64>,
    increments: Vec<f64>,
    cumulative: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StepRepr {
    ages: Vec<f64>,
    increments: Vec<f64>,
}

impl TryFrom<StepRepr> for StepFunction {
    type Error = Error;
    fn try_from(r: StepRepr) -> Result<Self> {
        StepFunction::new(r.ages, r.increments)
    }
}

impl From<StepFunction> for StepRepr {
    fn from(s: StepFunction) -> Self {
        StepRepr {
            ages: s.ages,
            increments: s.increments,
        }
    }
}

impl StepFunction {
    pub fn new(ages: Vec<f64>, increments: Vec<f64>) -> Result<Self> {
        if ages.len() != increments.len() {
            return Err(Error::InvalidModel(
                "step ages and increments differ in length".into(),
            ));
        }
        if ages.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidModel(
                "step jump ages must be strictly ascending".into(),
            ));
        }
        if increments.iter().any(|&d| !(d >= 0.0) || !d.is_finite()) {
            return Err(Error::InvalidModel(
                "step increments must be finite and nonnegative".into(),
            ));
        }
        let mut acc = 0.0;
        let cumulative = increments
            .iter()
            .map(|d| {
                acc += d;
                acc
            })
            .collect();
        Ok(StepFunction {
            ages,
            increments,
            cumulative,
        })
    }

    pub fn zero() -> Self {
        StepFunction {
            ages: vec![],
            increments: vec![],
            cumulative: vec![],
        }
    }

    pub fn ages(&self) -> &[f64] {
        &self.ages
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Sum of increments at ages `<= a`.
    pub fn at(&self, a: f64) -> f64 {
        let k = self.ages.partition_point(|&x| x <= a);
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1]
        }
    }

    /// Sum of increments at ages `< a`.
    pub fn left_limit(&self, a: f64) -> f64 {
        let k = self.ages.partition_point(|&x| x < a);
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1]
        }
    }
}

/// Baseline intensity of one stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Constant(f64),
    /// Piece `k` has rate `rates[k]` on `(breaks[k], breaks[k+1]]`; the first
    /// break is 0 and the last piece extends to the horizon.
    PiecewiseConstant { breaks: Vec<f64>, rates: Vec<f64> },
    Step(StepFunction),
}

impl Baseline {
    pub fn validate(&self, horizon: f64) -> Result<()> {
        match self {
            Baseline::Constant(r) => {
                if !(r.is_finite() && *r >= 0.0) {
                    return Err(Error::InvalidModel(format!("invalid constant rate {r}")));
                }
            }
            Baseline::PiecewiseConstant { breaks, rates } => {
                if breaks.is_empty() || breaks.len() != rates.len() {
                    return Err(Error::InvalidModel(
                        "piecewise baseline needs one rate per break".into(),
                    ));
                }
                if breaks[0] != 0.0 {
                    return Err(Error::InvalidModel(
                        "piecewise baseline must start at age 0".into(),
                    ));
                }
                if breaks.windows(2).any(|w| w[1] <= w[0]) || breaks.iter().any(|&b| b >= horizon)
                {
                    return Err(Error::InvalidModel(
                        "breakpoints must ascend strictly within [0, horizon)".into(),
                    ));
                }
                if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
                    return Err(Error::InvalidModel("invalid piecewise rate".into()));
                }
            }
            Baseline::Step(_) => {}
        }
        Ok(())
    }

    pub fn is_step(&self) -> bool {
        matches!(self, Baseline::Step(_))
    }

    /// Rate at age `a`; `None` for step baselines.
    pub fn rate(&self, a: f64) -> Option<f64> {
        match self {
            Baseline::Constant(r) => Some(*r),
            Baseline::PiecewiseConstant { breaks, rates } => {
                let k = breaks.partition_point(|&b| b < a).saturating_sub(1);
                Some(rates[k])
            }
            Baseline::Step(_) => None,
        }
    }

    /// `Λ(a)` over `(0, a]`.
    pub fn cumulative(&self, a: f64) -> f64 {
        self.between(0.0, a)
    }

    /// `Λ(a-)`; equals `Λ(a)` for continuous baselines.
    pub fn cumulative_left(&self, a: f64) -> f64 {
        match self {
            Baseline::Step(s) => s.left_limit(a),
            _ => self.cumulative(a),
        }
    }

    /// `Λ(a1) - Λ(a0)`, zero when `a1 <= a0`.
    pub fn between(&self, a0: f64, a1: f64) -> f64 {
        if a1 <= a0 {
            return 0.0;
        }
        match self {
            Baseline::Constant(r) => r * (a1 - a0),
            Baseline::PiecewiseConstant { breaks, rates } => {
                let mut total = 0.0;
                for k in 0..breaks.len() {
                    let lo = breaks[k].max(a0);
                    let hi = breaks.get(k + 1).copied().unwrap_or(f64::INFINITY).min(a1);
                    if hi > lo {
                        total += rates[k] * (hi - lo);
                    }
                }
                total
            }
            Baseline::Step(s) => s.at(a1) - s.at(a0),
        }
    }

    /// Rate at `a`, or for step baselines the mass over the unit age bin containing `a`.
    pub fn rate_or_bin_mass(&self, a: f64, horizon: f64) -> f64 {
        match self.rate(a) {
            Some(r) => r,
            None => {
                let top = (horizon.ceil() - 1.0).max(0.0);
                let k = a.floor().clamp(0.0, top);
                self.between(k, k + 1.0)
            }
        }
    }
}

/// One cell of the model grid: baseline stratified, coefficients stratified,
/// constant or time-varying baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelCell {
    Nnc,
    Nsc,
    Snc,
    Ssc,
    Nnv,
    Nsv,
    Snv,
    Ssv,
}

impl ModelCell {
    pub const ALL: [ModelCell; 8] = [
        ModelCell::Nnc,
        ModelCell::Nsc,
        ModelCell::Snc,
        ModelCell::Ssc,
        ModelCell::Nnv,
        ModelCell::Nsv,
        ModelCell::Snv,
        ModelCell::Ssv,
    ];

    pub fn flags(self) -> (bool, bool, bool) {
        use ModelCell::*;
        match self {
            Nnc => (false, false, false),
            Nsc => (false, true, false),
            Snc => (true, false, false),
            Ssc => (true, true, false),
            Nnv => (false, false, true),
            Nsv => (false, true, true),
            Snv => (true, false, true),
            Ssv => (true, true, true),
        }
    }

    pub fn from_flags(baseline_stratified: bool, coef_stratified: bool, varying: bool) -> Self {
        ModelCell::ALL
            .into_iter()
            .find(|c| c.flags() == (baseline_stratified, coef_stratified, varying))
            .expect("every flag triple names a cell")
    }

    pub fn label(self) -> &'static str {
        use ModelCell::*;
        match self {
            Nnc => "NNC",
            Nsc => "NSC",
            Snc => "SNC",
            Ssc => "SSC",
            Nnv => "NNV",
            Nsv => "NSV",
            Snv => "SNV",
            Ssv => "SSV",
        }
    }

    pub fn baseline_time_varying(self) -> bool {
        self.flags().2
    }

    pub fn is_unstratified(self) -> bool {
        let (b, c, _) = self.flags();
        !b && !c
    }
}

impl fmt::Display for ModelCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ModelCell {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ModelCell::ALL
            .into_iter()
            .find(|c| c.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model cell '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub baseline_stratified: bool,
    pub coefficients_stratified: bool,
    pub baseline_time_varying: bool,
    pub scheme: StratificationScheme,
    pub horizon: f64,
}

impl ModelSpec {
    /// Model specification for a grid cell under the first-event scheme.
    pub fn from_cell(cell: ModelCell, horizon: f64) -> Self {
        let (b, c, v) = cell.flags();
        ModelSpec {
            baseline_stratified: b,
            coefficients_stratified: c,
            baseline_time_varying: v,
            scheme: StratificationScheme::FirstEvent,
            horizon,
        }
    }

    pub fn cell(&self) -> ModelCell {
        ModelCell::from_flags(
            self.baseline_stratified,
            self.coefficients_stratified,
            self.baseline_time_varying,
        )
    }

    pub fn num_strata(&self) -> usize {
        self.scheme.num_strata()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::InvalidModel(format!("invalid horizon {}", self.horizon)));
        }
        if self.scheme == StratificationScheme::None
            && (self.baseline_stratified || self.coefficients_stratified)
        {
            return Err(Error::InvalidModel(
                "stratified cells require the first-event scheme".into(),
            ));
        }
        Ok(())
    }
}

/// Per-stratum coefficients and baselines; unstratified components repeat the
/// shared value in every stratum slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub beta: Vec<Vec<f64>>,
    pub baseline: Vec<Baseline>,
}

impl Parameters {
    pub fn new(beta: Vec<Vec<f64>>, baseline: Vec<Baseline>) -> Self {
        Parameters { beta, baseline }
    }

    /// Same coefficients and baseline in both strata.
    pub fn shared(beta: Vec<f64>, baseline: Baseline) -> Self {
        Parameters {
            beta: vec![beta.clone(), beta],
            baseline: vec![baseline.clone(), baseline],
        }
    }

    pub fn dim(&self) -> usize {
        self.beta.first().map_or(0, |b| b.len())
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let s = spec.num_strata();
        if self.beta.len() != s || self.baseline.len() != s {
            return Err(Error::InvalidModel(format!(
                "expected {s} strata, got {} coefficient and {} baseline entries",
                self.beta.len(),
                self.baseline.len()
            )));
        }
        let p = self.dim();
        if self.beta.iter().any(|b| b.len() != p) {
            return Err(Error::InvalidModel("coefficient lengths differ".into()));
        }
        if self.beta.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel("non-finite coefficient".into()));
        }
        for b in &self.baseline {
            b.validate(spec.horizon)?;
        }
        if s == 2 {
            if !spec.coefficients_stratified && self.beta[0] != self.beta[1] {
                return Err(Error::InvalidModel(
                    "unstratified coefficients must be shared".into(),
                ));
            }
            if !spec.baseline_stratified && self.baseline[0] != self.baseline[1] {
                return Err(Error::InvalidModel("unstratified baseline must be shared".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationWindow {
    pub c_left: f64,
    pub c_right: f64,
}

impl ObservationWindow {
    pub fn new(c_left: f64, c_right: f64) -> Result<Self> {
        if !(c_left.is_finite() && c_right.is_finite() && c_left >= 0.0 && c_left < c_right) {
            return Err(Error::InvalidArgument(format!(
                "invalid observation window ({c_left}, {c_right}]"
            )));
        }
        Ok(ObservationWindow { c_left, c_right })
    }

    /// Age window of a subject born at calendar time `birth`, or `None` when
    /// the window is empty.
    pub fn from_birthdate(birth: f64, w_left: f64, w_right: f64, horizon: f64) -> Option<Self> {
        let c_left = (w_left - birth).max(0.0);
        let c_right = (w_right - birth).min(horizon);
        (c_left < c_right).then_some(ObservationWindow { c_left, c_right })
    }

    pub fn length(&self) -> f64 {
        self.c_right - self.c_left
    }

    pub fn contains(&self, a: f64) -> bool {
        a > self.c_left && a <= self.c_right
    }
}

/// Observed record of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectPath {
    pub window: ObservationWindow,
    pub covariates: Vec<f64>,
    /// Strictly ascending ages in `(c_left, c_right]`.
    pub event_ages: Vec<f64>,
    /// Number of events before `c_left`, when known.
    pub pre_window_events: Option<u32>,
}

impl SubjectPath {
    pub fn first_event(&self) -> Option<f64> {
        self.event_ages.first().copied()
    }

    /// Known stratum at the window's left edge.
    pub fn entry_stratum(&self) -> StratumAt {
        match self.pre_window_events {
            Some(0) => StratumAt::Known(StratumId::S1),
            Some(_) => StratumAt::Known(StratumId::S2),
            None if self.window.c_left <= 0.0 => StratumAt::Known(StratumId::S1),
            None => StratumAt::Unknown,
        }
    }
}

/// A validated specification together with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Parameters,
}

impl Model {
    pub fn new(spec: ModelSpec, params: Parameters) -> Result<Self> {
        spec.validate()?;
        params.validate(&spec)?;
        Ok(Model { spec, params })
    }

    fn slot(&self, s: StratumId) -> Result<usize> {
        let i = s.index();
        if i < self.spec.num_strata() {
            Ok(i)
        } else {
            Err(Error::InvalidArgument(format!(
                "stratum {} not defined under {:?}",
                s.number(),
                self.spec.scheme
            )))
        }
    }

    fn slot_or_first(&self, s: StratumId) -> usize {
        s.index().min(self.spec.num_strata() - 1)
    }

    pub fn baseline(&self, s: StratumId) -> &Baseline {
        &self.params.baseline[self.slot_or_first(s)]
    }

    /// `β_s'z`.
    pub fn linear_predictor(&self, s: StratumId, z: &[f64]) -> f64 {
        self.params.beta[self.slot_or_first(s)]
            .iter()
            .zip(z)
            .map(|(b, x)| b * x)
            .sum()
    }

    /// `λ_0s(a) exp(β_s'z)`.
    pub fn intensity(&self, s: StratumId, z: &[f64], a: f64) -> Result<f64> {
        let i = self.slot(s)?;
        let rate = self.params.baseline[i]
            .rate(a)
            .ok_or(Error::StepBaselineDensity)?;
        Ok(rate * self.linear_predictor(s, z).exp())
    }

    /// `∫_{a0}^{a1} λ_0s(u) exp(β_s'z) du`.
    pub fn cumulative_intensity(&self, s: StratumId, z: &[f64], a0: f64, a1: f64) -> f64 {
        self.baseline(s).between(a0, a1) * self.linear_predictor(s, z).exp()
    }

    fn require_first_event(&self) -> Result<()> {
        if self.spec.scheme != StratificationScheme::FirstEvent {
            return Err(Error::InvalidModel(
                "closed forms exist only for the first-event scheme".into(),
            ));
        }
        Ok(())
    }

    /// Ratio `R(a, z)` of at-least-one-in-window probabilities without and
    /// with an event at `a`.
    ///
    /// `post_first_event` states that a within-window event precedes `a`.
    pub fn truncation_factor(
        &self,
        z: &[f64],
        window: &ObservationWindow,
        a: f64,
        s: StratumId,
        post_first_event: bool,
    ) -> Result<f64> {
        self.require_first_event()?;
        let (cl, cr) = (window.c_left, window.c_right);
        if a > cr {
            return Err(Error::OutsideWindow { age: a, c_right: cr });
        }
        match s {
            StratumId::S2 => {
                if !post_first_event && a > cl {
                    Ok(one_minus_exp(self.cumulative_intensity(s, z, a, cr)))
                } else {
                    Ok(1.0)
                }
            }
            StratumId::S1 if a > cl => Ok(one_minus_exp(
                self.cumulative_intensity(StratumId::S1, z, a, cr),
            )),
            StratumId::S1 => {
                let l2 = self.cumulative_intensity(StratumId::S2, z, cl, cr);
                let num = one_minus_exp(self.cumulative_intensity(StratumId::S1, z, a, cr))
                    - one_minus_exp(self.cumulative_intensity(StratumId::S1, z, a, cl))
                        * (-l2).exp();
                let den = one_minus_exp(l2);
                if den <= 0.0 {
                    return Err(Error::NonFinite(
                        "truncation factor with zero stratum-2 window mass".into(),
                    ));
                }
                Ok(num / den)
            }
        }
    }

    /// `λ / R`.
    pub fn induced_intensity(
        &self,
        z: &[f64],
        window: &ObservationWindow,
        a: f64,
        s: StratumId,
        post_first_event: bool,
    ) -> Result<f64> {
        let r = self.truncation_factor(z, window, a, s, post_first_event)?;
        if r <= 0.0 {
            return Err(Error::ZeroTruncationFactor { age: a });
        }
        Ok(self.intensity(s, z, a)? / r)
    }

    /// `P(S(a) = s | z)` from the model alone.
    pub fn stratum_prob_marginal(&self, z: &[f64], a: f64, s: StratumId) -> f64 {
        if self.spec.scheme == StratificationScheme::None {
            return if s == StratumId::S1 { 1.0 } else { 0.0 };
        }
        let eta = self.linear_predictor(StratumId::S1, z).exp();
        let lam = self.baseline(StratumId::S1).cumulative_left(a) * eta;
        match s {
            StratumId::S1 => (-lam).exp(),
            StratumId::S2 => one_minus_exp(lam),
        }
    }

    /// `P(S(a) = s | observed record)`, indexed by stratum.
    pub fn stratum_prob_posterior(&self, path: &SubjectPath, a: f64) -> Result<[f64; 2]> {
        self.require_first_event()?;
        if path.event_ages.iter().any(|&e| e < a) {
            return Ok([0.0, 1.0]);
        }
        match path.entry_stratum() {
            StratumAt::Known(StratumId::S1) => Ok([1.0, 0.0]),
            StratumAt::Known(StratumId::S2) => Ok([0.0, 1.0]),
            StratumAt::Unknown => {
                let p1 = self.first_event_stratum1_prob(path)?;
                Ok([p1, 1.0 - p1])
            }
        }
    }

    /// Posterior probability that the first observed event occurred in stratum 1.
    fn first_event_stratum1_prob(&self, path: &SubjectPath) -> Result<f64> {
        let a1 = path
            .first_event()
            .ok_or_else(|| Error::InvalidArgument("posterior needs an observed event".into()))?;
        let z = &path.covariates;
        let cl = path.window.c_left;
        let h = self.spec.horizon;
        let (b1, b2) = (self.baseline(StratumId::S1), self.baseline(StratumId::S2));
        let (e1, e2) = (
            self.linear_predictor(StratumId::S1, z),
            self.linear_predictor(StratumId::S2, z),
        );
        let log_t1 = b1.rate_or_bin_mass(a1, h).ln() + e1 - b1.cumulative_left(a1) * e1.exp();
        let log_t2 = b2.rate_or_bin_mass(a1, h).ln()
            + e2
            + log1m_exp(b1.cumulative(cl) * e1.exp())
            - (b2.cumulative_left(a1) - b2.cumulative(cl)) * e2.exp();
        if log_t1 == f64::NEG_INFINITY && log_t2 == f64::NEG_INFINITY {
            return Ok(self.stratum_prob_marginal(z, cl, StratumId::S1));
        }
        let d = log_t2 - log_t1;
        if d.is_nan() {
            return Err(Error::NonFinite("posterior stratum probability".into()));
        }
        Ok(1.0 / (1.0 + d.exp()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_model(l1: f64, l2: f64, b1: Vec<f64>, b2: Vec<f64>) -> Model {
        Model::new(
            ModelSpec::from_cell(ModelCell::Ssc, DEFAULT_HORIZON),
            Parameters::new(vec![b1, b2], vec![Baseline::Constant(l1), Baseline::Constant(l2)]),
        )
        .unwrap()
    }

    #[test]
    fn stratum_at_left_continuity() {
        let s = StratificationScheme::FirstEvent;
        assert_eq!(
            stratum_at(s, &[3.2], Some(0), 0.0, 3.2),
            StratumAt::Known(StratumId::S1)
        );
        assert_eq!(
            stratum_at(s, &[3.2], None, 2.0, 5.0),
            StratumAt::Known(StratumId::S2)
        );
        assert_eq!(stratum_at(s, &[3.2], None, 2.0, 2.5), StratumAt::Unknown);
    }

    #[test]
    fn intensity_examples() {
        let m = Model::new(
            ModelSpec::from_cell(ModelCell::Nnc, DEFAULT_HORIZON),
            Parameters::shared(vec![-2.0, -1.0, -1.5], Baseline::Constant(0.05)),
        )
        .unwrap();
        let v = m.intensity(StratumId::S1, &[1.0, 0.0, 0.0], 4.0).unwrap();
        assert!((v - 0.05 * (-2.0f64).exp()).abs() < 1e-15);
        let c = m.cumulative_intensity(StratumId::S1, &[1.0, 0.0, 0.0], 0.0, 10.0);
        assert!((c - 0.5 * (-2.0f64).exp()).abs() < 1e-15);
        assert_eq!(m.cumulative_intensity(StratumId::S1, &[1.0, 0.0, 0.0], 3.0, 3.0), 0.0);
    }

    #[test]
    fn piecewise_examples() {
        let b = Baseline::PiecewiseConstant {
            breaks: vec![0.0, 11.0],
            rates: vec![0.03, 0.06],
        };
        assert_eq!(b.rate(12.0), Some(0.06));
        assert_eq!(b.rate(11.0), Some(0.03));
        assert!((b.between(10.0, 12.0) - 0.09).abs() < 1e-15);
    }

    #[test]
    fn step_baseline_has_no_density() {
        let step = Baseline::Step(StepFunction::new(vec![1.0, 2.0], vec![0.1, 0.2]).unwrap());
        let m = Model::new(
            ModelSpec::from_cell(ModelCell::Nnv, DEFAULT_HORIZON),
            Parameters::shared(vec![0.0], step.clone()),
        )
        .unwrap();
        assert!(matches!(
            m.intensity(StratumId::S1, &[0.0], 1.5),
            Err(Error::StepBaselineDensity)
        ));
        assert!((step.cumulative(2.0) - 0.3).abs() < 1e-15);
        assert!((step.cumulative_left(2.0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn truncation_factor_examples() {
        let m = constant_model(0.1, 0.1, vec![0.0], vec![0.0]);
        let w = ObservationWindow::new(0.0, 7.0).unwrap();
        let r = m.truncation_factor(&[0.0], &w, 3.0, StratumId::S1, false).unwrap();
        assert!((r - (1.0 - (-0.4f64).exp())).abs() < 1e-15);
        assert!((r - 0.32968).abs() < 1e-5);
        let ind = m.induced_intensity(&[0.0], &w, 3.0, StratumId::S1, false).unwrap();
        assert!((ind - 0.30333).abs() < 1e-5);
        assert_eq!(m.truncation_factor(&[0.0], &w, 7.0, StratumId::S1, false).unwrap(), 0.0);
        assert_eq!(m.truncation_factor(&[0.0], &w, 5.0, StratumId::S2, true).unwrap(), 1.0);
        assert!(m.truncation_factor(&[0.0], &w, 7.5, StratumId::S1, false).is_err());
        assert!(matches!(
            m.induced_intensity(&[0.0], &w, 7.0, StratumId::S1, false),
            Err(Error::ZeroTruncationFactor { .. })
        ));
    }

    #[test]
    fn marginal_examples() {
        let m = constant_model(0.05, 0.07, vec![0.0], vec![0.0]);
        assert_eq!(m.stratum_prob_marginal(&[0.0], 0.0, StratumId::S1), 1.0);
        let p = m.stratum_prob_marginal(&[0.0], 7.0, StratumId::S1);
        assert!((p - (-0.35f64).exp()).abs() < 1e-15);
        assert!((p - 0.70469).abs() < 1e-5);
    }

    #[test]
    fn posterior_examples() {
        let m = constant_model(0.1, 0.1, vec![0.0], vec![0.0]);
        let path = SubjectPath {
            window: ObservationWindow::new(2.0, 7.0).unwrap(),
            covariates: vec![0.0],
            event_ages: vec![4.0],
            pre_window_events: None,
        };
        let p = m.stratum_prob_posterior(&path, 3.0).unwrap();
        // Equal constant rates cancel everything except exp(-λ C_L).
        assert!((p[0] - (-0.2f64).exp()).abs() < 1e-14);
        assert_eq!(m.stratum_prob_posterior(&path, 4.5).unwrap(), [0.0, 1.0]);
        let known = SubjectPath {
            window: ObservationWindow::new(0.0, 7.0).unwrap(),
            ..path
        };
        assert_eq!(m.stratum_prob_posterior(&known, 3.0).unwrap(), [1.0, 0.0]);
    }

    #[test]
    fn window_from_birthdate() {
        let w = ObservationWindow::from_birthdate(-5.0, 0.0, 7.0, 18.0).unwrap();
        assert_eq!((w.c_left, w.c_right), (5.0, 12.0));
        let w = ObservationWindow::from_birthdate(3.0, 0.0, 7.0, 18.0).unwrap();
        assert_eq!((w.c_left, w.c_right), (0.0, 4.0));
        let w = ObservationWindow::from_birthdate(-15.0, 0.0, 7.0, 18.0).unwrap();
        assert_eq!((w.c_left, w.c_right), (15.0, 18.0));
    }

    #[test]
    fn cell_labels_roundtrip() {
        for c in ModelCell::ALL {
            assert_eq!(c.label().parse::<ModelCell>().unwrap(), c);
            let (b, s, v) = c.flags();
            assert_eq!(ModelCell::from_flags(b, s, v), c);
        }
    }
}
