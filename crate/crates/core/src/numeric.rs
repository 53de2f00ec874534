//! Stable scalar primitives and a safeguarded Newton maximizer.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `1 - exp(-x)` without cancellation for small `x`.
#[inline]
pub fn one_minus_exp(x: f64) -> f64 {
    -(-x).exp_m1()
}

/// `log(1 - exp(-x))` for `x > 0`.
#[inline]
pub fn log1m_exp(x: f64) -> f64 {
    if x <= 0.0 {
        f64::NEG_INFINITY
    } else if x < std::f64::consts::LN_2 {
        (-(-x).exp_m1()).ln()
    } else {
        (-(-x).exp()).ln_1p()
    }
}

/// `log(exp(x) - 1)` for `x > 0`.
#[inline]
pub fn ln_expm1(x: f64) -> f64 {
    if x <= 0.0 {
        f64::NEG_INFINITY
    } else if x > 35.0 {
        x + (-(-x).exp()).ln_1p()
    } else {
        x.exp_m1().ln()
    }
}

/// `x / (exp(x) - 1)`, equal to 1 at the origin.
#[inline]
pub fn x_over_expm1(x: f64) -> f64 {
    if x.abs() < 1e-10 {
        1.0 - 0.5 * x
    } else if x > 700.0 {
        0.0
    } else {
        x / x.exp_m1()
    }
}

/// `log(exp(a) + exp(b))`.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Central-difference gradient.
pub fn numerical_gradient<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>) -> DVector<f64> {
    let n = x.len();
    let mut g = DVector::zeros(n);
    let mut xp = x.clone();
    for i in 0..n {
        let h = fd_step(x[i]);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Finite-difference step `max(1e-5, 1e-5 |x|)`.
#[inline]
pub fn fd_step(x: f64) -> f64 {
    (1e-5 * x.abs()).max(1e-5)
}

/// Hessian from second-order central differences of `f` with step
/// `max(1e-4, 1e-4 |x|)`.
///
/// Diagonal entries use the three-point rule, off-diagonal entries the
/// four-point cross rule.
pub fn numerical_hessian<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>) -> DMatrix<f64> {
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let f0 = f(x);
    let steps: Vec<f64> = x.iter().map(|&v| (1e-4 * v.abs()).max(1e-4)).collect();
    let mut xp = x.clone();
    for i in 0..n {
        let hi = steps[i];
        xp[i] = x[i] + hi;
        let fp = f(&xp);
        xp[i] = x[i] - hi;
        let fm = f(&xp);
        xp[i] = x[i];
        h[(i, i)] = (fp - 2.0 * f0 + fm) / (hi * hi);
        for j in 0..i {
            let hj = steps[j];
            let mut eval = |si: f64, sj: f64| {
                xp[i] = x[i] + si * hi;
                xp[j] = x[j] + sj * hj;
                let v = f(&xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0))
                / (4.0 * hi * hj);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    h
}

/// Jacobian of a vector field by central differences (columns are partials).
pub fn numerical_jacobian<F: Fn(&DVector<f64>) -> DVector<f64>>(
    f: F,
    x: &DVector<f64>,
) -> DMatrix<f64> {
    let n = x.len();
    let mut xp = x.clone();
    let mut cols = Vec::with_capacity(n);
    for i in 0..n {
        let h = fd_step(x[i]);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        cols.push((fp - fm) / (2.0 * h));
    }
    let m = cols.first().map_or(0, |c| c.len());
    DMatrix::from_fn(m, n, |r, c| cols[c][r])
}

/// Symmetrize in place.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Concave objective for [`maximize`].
pub trait Objective {
    fn value(&self, x: &DVector<f64>) -> f64;
    /// Value, gradient and Hessian at `x`.
    fn derivatives(&self, x: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>);
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tolerance: 1e-10,
            max_iterations: 100,
            max_halvings: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Solve `(-H) d = g` with a Levenberg shift when `-H` is not positive definite.
fn ascent_direction(g: &DVector<f64>, h: &DMatrix<f64>) -> Option<DVector<f64>> {
    let neg = -h;
    if let Some(ch) = neg.clone().cholesky() {
        let d = ch.solve(g);
        if d.iter().all(|v| v.is_finite()) {
            return Some(d);
        }
    }
    let scale = neg.diagonal().iter().fold(1e-8_f64, |m, v| m.max(v.abs()));
    let mut shift = 1e-8 * scale;
    for _ in 0..60 {
        let mut m = neg.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += shift;
        }
        if let Some(ch) = m.cholesky() {
            let d = ch.solve(g);
            if d.iter().all(|v| v.is_finite()) {
                return Some(d);
            }
        }
        shift *= 10.0;
    }
    None
}

/// Damped Newton ascent with step halving.
///
/// Converges when the Newton step is below `tolerance * (1 + |x|)` in every
/// coordinate or the gradient vanishes to `tolerance * (1 + |f|)`.
pub fn maximize<O: Objective>(
    obj: &O,
    x0: DVector<f64>,
    opts: &NewtonOptions,
) -> Result<NewtonOutcome> {
    let mut x = x0;
    let (mut f, mut g, mut h) = obj.derivatives(&x);
    if !f.is_finite() {
        return Err(Error::NonFinite("objective at starting point".into()));
    }
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        if g.amax() <= opts.tolerance * (1.0 + f.abs()) {
            converged = true;
            break;
        }
        let d = ascent_direction(&g, &h).ok_or(Error::SingularHessian { stratum: 0 })?;
        iterations += 1;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = &x + &d * t;
            let fc = obj.value(&cand);
            if fc.is_finite() && fc >= f - 1e-12 * (1.0 + f.abs()) {
                accepted = Some(cand);
                break;
            }
            t *= 0.5;
        }
        let Some(xn) = accepted else {
            // No progress possible along the direction: accept the current
            // point when the step itself was negligible.
            if small_step(&d, &x, opts.tolerance) {
                converged = true;
                break;
            }
            return Err(Error::LineSearch {
                halvings: opts.max_halvings,
            });
        };
        let step_small = small_step(&(&d * t), &x, opts.tolerance);
        x = xn;
        (f, g, h) = obj.derivatives(&x);
        if step_small {
            converged = true;
            break;
        }
    }
    Ok(NewtonOutcome {
        x,
        value: f,
        gradient: g,
        hessian: h,
        iterations,
        converged,
    })
}

fn small_step(d: &DVector<f64>, x: &DVector<f64>, tol: f64) -> bool {
    d.iter()
        .zip(x.iter())
        .all(|(di, xi)| di.abs() <= tol * (1.0 + xi.abs()))
}

/// Invert a negative-definite Hessian; returns the covariance and a PD flag.
pub fn covariance_from_hessian(h: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let mut info = -h;
    symmetrize(&mut info);
    match info.clone().cholesky() {
        Some(ch) => (ch.inverse(), true),
        None => {
            let inv = info
                .try_inverse()
                .unwrap_or_else(|| DMatrix::from_element(h.nrows(), h.ncols(), f64::NAN));
            (inv, false)
        }
    }
}

/// Sample standard deviation; `None` below two observations.
pub fn sample_sd(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let ss = xs.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    Some((ss / (n - 1.0)).sqrt())
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}
