//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use recurstrat::data::CohortDataset;
use recurstrat::model::{
    Baseline, Model, ModelCell, ModelSpec, ObservationWindow, Parameters, StratumAt, StratumId,
    SubjectPath,
};

/// Two-piece rate with the break owned by the left piece.
#[derive(Debug, Clone, Copy)]
pub struct TwoPiece {
    pub brk: f64,
    pub lo: f64,
    pub hi: f64,
}

impl TwoPiece {
    pub fn rate(&self, a: f64) -> f64 {
        if a <= self.brk {
            self.lo
        } else {
            self.hi
        }
    }

    pub fn max(&self) -> f64 {
        self.lo.max(self.hi)
    }

    pub fn baseline(&self) -> Baseline {
        Baseline::PiecewiseConstant {
            breaks: vec![0.0, self.brk],
            rates: vec![self.lo, self.hi],
        }
    }

    pub fn scaled(&self, k: f64) -> TwoPiece {
        TwoPiece {
            brk: self.brk,
            lo: self.lo * k,
            hi: self.hi * k,
        }
    }
}

/// Adaptive Simpson quadrature.
pub fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    if b <= a {
        return 0.0;
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Quadrature of a two-piece rate, split at the break so the integrand is smooth.
pub fn integrate_rate(r: &TwoPiece, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let f = |u: f64| r.rate(u);
    if r.brk > a && r.brk < b {
        simpson(&|u| if u <= r.brk { r.lo } else { f(u) }, a, r.brk, 1e-14)
            + simpson(&|u| if u > r.brk { r.hi } else { f(u) }, r.brk, b, 1e-14)
    } else {
        simpson(&f, a, b, 1e-14)
    }
}

/// First event after `start` by thinning, or `None` past `end`.
pub fn thin_first<R: Rng>(r: &TwoPiece, start: f64, end: f64, rng: &mut R) -> Option<f64> {
    let m = r.max();
    if m <= 0.0 {
        return None;
    }
    let mut t = start;
    loop {
        let u: f64 = rng.random();
        t += -(1.0 - u).ln() / m;
        if t > end {
            return None;
        }
        let v: f64 = rng.random();
        if v * m <= r.rate(t) {
            return Some(t);
        }
    }
}

/// Central-difference gradient with step `h`.
pub fn fd_gradient<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Central-difference Jacobian with step `h`.
pub fn fd_jacobian<F: Fn(&DVector<f64>) -> DVector<f64>>(f: F, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let n = x.len();
    let m = f(x).len();
    let mut j = DMatrix::zeros(m, n);
    let mut xp = x.clone();
    for i in 0..n {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        j.set_column(i, &((fp - fm) / (2.0 * h)));
    }
    j
}

/// Two-stratum single-covariate model with two-piece baselines.
pub fn two_piece_model(r1: TwoPiece, r2: TwoPiece, b1: f64, b2: f64) -> Model {
    Model::new(
        ModelSpec::from_cell(ModelCell::Ssv, 18.0),
        Parameters::new(vec![vec![b1], vec![b2]], vec![r1.baseline(), r2.baseline()]),
    )
    .unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct RandomConfig {
    pub r1: TwoPiece,
    pub r2: TwoPiece,
    pub b1: f64,
    pub b2: f64,
    pub z: f64,
    pub cl: f64,
    pub cr: f64,
}

impl RandomConfig {
    pub fn draw<R: Rng>(rng: &mut R) -> Self {
        let piece = |rng: &mut R| TwoPiece {
            brk: rng.random_range(2.0..16.0),
            lo: rng.random_range(0.02..0.3),
            hi: rng.random_range(0.02..0.3),
        };
        let cl = rng.random_range(0.5..10.0);
        RandomConfig {
            r1: piece(rng),
            r2: piece(rng),
            b1: rng.random_range(-1.0..1.0),
            b2: rng.random_range(-1.0..1.0),
            z: if rng.random::<bool>() { 1.0 } else { 0.0 },
            cl,
            cr: (cl + rng.random_range(1.0..7.0)).min(18.0),
        }
    }

    pub fn model(&self) -> Model {
        two_piece_model(self.r1, self.r2, self.b1, self.b2)
    }

    /// Subject-level rates including the covariate effect.
    pub fn rates(&self) -> (TwoPiece, TwoPiece) {
        (
            self.r1.scaled((self.b1 * self.z).exp()),
            self.r2.scaled((self.b2 * self.z).exp()),
        )
    }

    pub fn window(&self) -> ObservationWindow {
        ObservationWindow::new(self.cl, self.cr).unwrap()
    }

    pub fn path(&self, events: Vec<f64>) -> SubjectPath {
        SubjectPath {
            window: self.window(),
            covariates: vec![self.z],
            event_ages: events,
            pre_window_events: None,
        }
    }
}

/// Monte-Carlo estimate of the truncation factor with its standard error.
pub fn truncation_factor_mc<R: Rng>(
    cfg: &RandomConfig,
    a: f64,
    stratum: StratumId,
    paths: usize,
    rng: &mut R,
) -> (f64, f64) {
    let (q1, q2) = cfg.rates();
    let (cl, cr) = (cfg.cl, cfg.cr);
    let mut hit = 0usize;
    for _ in 0..paths {
        let ok = match stratum {
            StratumId::S2 => thin_first(&q2, a.max(cl), cr, rng).is_some(),
            StratumId::S1 => match thin_first(&q1, a, cr, rng) {
                None => false,
                Some(t) if t > cl => true,
                Some(t) => thin_first(&q2, cl.max(t), cr, rng).is_some(),
            },
        };
        hit += usize::from(ok);
    }
    let p = hit as f64 / paths as f64;
    let se_p = (p * (1.0 - p) / paths as f64).sqrt();
    if stratum == StratumId::S1 && a <= cl {
        let mut den_hit = 0usize;
        for _ in 0..paths {
            den_hit += usize::from(thin_first(&q2, cl, cr, rng).is_some());
        }
        let d = den_hit as f64 / paths as f64;
        let se_d = (d * (1.0 - d) / paths as f64).sqrt();
        let r = p / d;
        (r, r * ((se_p / p).powi(2) + (se_d / d).powi(2)).sqrt())
    } else {
        (p, se_p)
    }
}

/// Conditional Monte-Carlo estimate of `P(S = 1 on (C_L, a1])` with its standard error.
///
/// Pre-window histories are simulated; the in-window record enters through
/// its density given the stratum at `C_L`, computed by quadrature.
pub fn posterior_mc<R: Rng>(cfg: &RandomConfig, a1: f64, paths: usize, rng: &mut R) -> (f64, f64) {
    let (q1, q2) = cfg.rates();
    let w1 = q1.rate(a1) * (-integrate_rate(&q1, cfg.cl, a1)).exp();
    let w2 = q2.rate(a1) * (-integrate_rate(&q2, cfg.cl, a1)).exp();
    let mut none = 0usize;
    for _ in 0..paths {
        none += usize::from(thin_first(&q1, 0.0, cfg.cl, rng).is_none());
    }
    let pi = none as f64 / paths as f64;
    let post = pi * w1 / (pi * w1 + (1.0 - pi) * w2);
    let dpost = w1 * w2 / (pi * w1 + (1.0 - pi) * w2).powi(2);
    (post, dpost * (pi * (1.0 - pi) / paths as f64).sqrt())
}

/// Realized at-risk indicator of subject `i` in stratum `s` (0 or 1) at age `a`.
pub fn at_risk(data: &CohortDataset, i: usize, s: usize, a: f64) -> bool {
    let p = &data.subjects[i];
    let (cl, cr) = (p.window.c_left, p.window.c_right);
    if !(a > cl && a <= cr) {
        return false;
    }
    let entry_two = p.entry_stratum() == StratumAt::Known(StratumId::S2);
    let a1 = p.first_event().unwrap_or(cr);
    match s {
        0 => !entry_two && a <= a1,
        _ => entry_two || a > a1,
    }
}

/// Brute-force weighted risk-set sums of orders 0, 1 and 2.
pub fn brute_moments(data: &CohortDataset, s: usize, beta: &[f64], a: f64) -> (f64, DVector<f64>, DMatrix<f64>) {
    let p = beta.len();
    let mut g0 = 0.0;
    let mut g1 = DVector::zeros(p);
    let mut g2 = DMatrix::zeros(p, p);
    for i in 0..data.len() {
        if !at_risk(data, i, s, a) {
            continue;
        }
        let z = DVector::from_column_slice(&data.subjects[i].covariates);
        let w = beta.iter().zip(z.iter()).map(|(b, x)| b * x).sum::<f64>().exp();
        g0 += w;
        g1 += w * &z;
        g2 += w * &z * z.transpose();
    }
    (g0, g1, g2)
}

/// `P(at least one event in (lo, hi])` for a constant rate `t`, by nested quadrature.
pub fn hit_prob(t: f64, lo: f64, hi: f64) -> f64 {
    let surv = |u: f64| (-simpson(&|_| t, lo, u, 1e-15)).exp();
    simpson(&|u| t * surv(u), lo, hi, 1e-13)
}

fn int_const(t: f64, lo: f64, hi: f64) -> f64 {
    simpson(&|_| t, lo, hi, 1e-15)
}

/// Zero-truncated log-likelihood of one subject with constant rates `t1`, `t2`
/// and a known entry stratum, by quadrature.
pub fn zt_known_oracle(t1: f64, t2: f64, cl: f64, cr: f64, events: &[f64], entry: StratumId) -> f64 {
    let n = events.len() as f64;
    let a1 = events[0];
    match entry {
        StratumId::S1 => {
            t1.ln() - int_const(t1, cl, a1) + (n - 1.0) * t2.ln() - int_const(t2, a1, cr) - hit_prob(t1, cl, cr).ln()
        }
        StratumId::S2 => n * t2.ln() - int_const(t2, cl, cr) - hit_prob(t2, cl, cr).ln(),
    }
}

/// Zero-truncated log-likelihood of one subject with the entry stratum
/// integrated out, by quadrature.
pub fn zt_mixture_oracle(t1: f64, t2: f64, cl: f64, cr: f64, events: &[f64]) -> f64 {
    let n = events.len() as f64;
    let a1 = events[0];
    let pi1 = 1.0 - hit_prob(t1, 0.0, cl);
    let f1 = t1 * (-int_const(t1, cl, a1)).exp() * t2.powf(n - 1.0) * (-int_const(t2, a1, cr)).exp();
    let f2 = t2.powf(n) * (-int_const(t2, cl, cr)).exp();
    let h0 = pi1 * hit_prob(t1, cl, cr) + (1.0 - pi1) * hit_prob(t2, cl, cr);
    (pi1 * f1 + (1.0 - pi1) * f2).ln() - h0.ln()
}
