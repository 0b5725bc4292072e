//! Quantified smoothness: compactly supported bumps of prescribed regularity
//! class, a truncated weighted-derivative seminorm that measures it, and the
//! constant by which differentiation shrinks the weight radius.
//!
//! The class parameter `sigma` interpolates between analytic-like behavior
//! (sigma close to 1) and ordinary smoothness; `tau` is the weight radius.
//! The seminorm of `f` over a box is
//!
//! ```text
//! sum_{|alpha| <= M} tau^{|alpha|} (alpha!)^{-sigma} sup_lattice |D^alpha f|
//! ```
//!
//! with the sup taken over a sample lattice. Orders zero through two use the
//! field's own evaluators; higher orders nest centered differences on top of
//! the analytic Hessian, peeling one derivative at a time along the axis
//! with the largest remaining index.

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::geom::{BoxRegion, Vec3};
use std::sync::Arc;

#[derive(Clone, Copy, Debug)]
pub struct SeminormParams {
    pub sigma: f64,
    pub tau: f64,
    /// Truncation order M of the derivative sum.
    pub max_order: usize,
    /// Sample points per axis for the sup.
    pub lattice_n: usize,
    /// Base step for the nested differences; order m uses `fd_base_step / m`.
    pub fd_base_step: f64,
}

impl Default for SeminormParams {
    fn default() -> Self {
        Self { sigma: 2.0, tau: 0.5, max_order: 8, lattice_n: 17, fd_base_step: 0.01 }
    }
}

impl SeminormParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 1.0) {
            return Err(Error::SigmaOutOfRange { sigma: self.sigma, need: "sigma >= 1" });
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::TauOutOfRange { tau: self.tau });
        }
        if self.max_order < 2 || self.lattice_n < 2 || !(self.fd_base_step > 0.0) {
            return Err(Error::SigmaOutOfRange {
                sigma: self.sigma,
                need: "max_order >= 2, lattice_n >= 2, fd_base_step > 0",
            });
        }
        Ok(())
    }
}

/// `D^alpha f` at `p`. Orders two and below are analytic; higher orders are
/// centered differences of the next order down, stepped along the axis with
/// the largest remaining multi-index entry, with step `base / |alpha|`.
pub fn partial_derivative(f: &ScalarField, p: &Vec3, alpha: [usize; 3], base: f64) -> f64 {
    let m: usize = alpha.iter().sum();
    match m {
        0 => f.eval(p),
        1 => {
            let k = (0..3).find(|&k| alpha[k] == 1).unwrap();
            f.grad(p)[k]
        }
        2 => {
            if let Some(k) = (0..3).find(|&k| alpha[k] == 2) {
                f.hess(p)[(k, k)]
            } else {
                let mut it = (0..3).filter(|&k| alpha[k] == 1);
                let (i, j) = (it.next().unwrap(), it.next().unwrap());
                f.hess(p)[(i, j)]
            }
        }
        _ => {
            let k = (0..3).max_by_key(|&k| alpha[k]).unwrap();
            let mut lower = alpha;
            lower[k] -= 1;
            let h = base / m as f64;
            let mut a = *p;
            let mut b = *p;
            a[k] += h;
            b[k] -= h;
            (partial_derivative(f, &a, lower, base) - partial_derivative(f, &b, lower, base))
                / (2.0 * h)
        }
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn multi_indices(max_order: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for m in 0..=max_order {
        for a0 in 0..=m {
            for a1 in 0..=(m - a0) {
                out.push([a0, a1, m - a0 - a1]);
            }
        }
    }
    out
}

/// Truncated weighted-derivative seminorm of `f` over `bx`.
pub fn seminorm(f: &ScalarField, bx: &BoxRegion, prm: &SeminormParams) -> Result<f64> {
    prm.validate()?;
    let pts = bx.lattice(prm.lattice_n);
    let mut total = 0.0;
    for alpha in multi_indices(prm.max_order) {
        let m: usize = alpha.iter().sum();
        let mut sup: f64 = 0.0;
        for p in &pts {
            sup = sup.max(partial_derivative(f, p, alpha, prm.fd_base_step).abs());
        }
        let weight = prm.tau.powi(m as i32)
            / (factorial(alpha[0]) * factorial(alpha[1]) * factorial(alpha[2])).powf(prm.sigma);
        total += weight * sup;
    }
    Ok(total)
}

/// Per-order contributions to the seminorm, for diagnostics.
pub fn seminorm_by_order(f: &ScalarField, bx: &BoxRegion, prm: &SeminormParams) -> Result<Vec<f64>> {
    prm.validate()?;
    let pts = bx.lattice(prm.lattice_n);
    let mut by_order = vec![0.0; prm.max_order + 1];
    for alpha in multi_indices(prm.max_order) {
        let m: usize = alpha.iter().sum();
        let mut sup: f64 = 0.0;
        for p in &pts {
            sup = sup.max(partial_derivative(f, p, alpha, prm.fd_base_step).abs());
        }
        let weight = prm.tau.powi(m as i32)
            / (factorial(alpha[0]) * factorial(alpha[1]) * factorial(alpha[2])).powf(prm.sigma);
        by_order[m] += weight * sup;
    }
    Ok(by_order)
}

/// One-axis seminorm of a function given by its value and two derivatives:
/// `sum_{m <= M} tau^m (m!)^{-sigma} sup |f^{(m)}|`, sup over a lattice on
/// `[a, b]`. Orders above two nest centered differences as in the 3D case.
pub fn seminorm_1d(
    f: &dyn Fn(f64) -> (f64, f64, f64),
    a: f64,
    b: f64,
    prm: &SeminormParams,
) -> Result<f64> {
    prm.validate()?;
    if !(b > a) {
        return Err(Error::EmptyInterval { a, b });
    }
    fn deriv(f: &dyn Fn(f64) -> (f64, f64, f64), t: f64, m: usize, base: f64) -> f64 {
        match m {
            0 => f(t).0,
            1 => f(t).1,
            2 => f(t).2,
            _ => {
                let h = base / m as f64;
                (deriv(f, t + h, m - 1, base) - deriv(f, t - h, m - 1, base)) / (2.0 * h)
            }
        }
    }
    let n = prm.lattice_n;
    let mut total = 0.0;
    for m in 0..=prm.max_order {
        let mut sup: f64 = 0.0;
        for i in 0..n {
            let t = a + (b - a) * i as f64 / (n - 1) as f64;
            sup = sup.max(deriv(f, t, m, prm.fd_base_step).abs());
        }
        total += prm.tau.powi(m as i32) / factorial(m).powf(prm.sigma) * sup;
    }
    Ok(total)
}

/// Constant C such that one derivative maps the class with radius `tau`
/// into the class with the smaller radius `tau_prime`:
/// `C = (1/tau) sup_m m^sigma (tau_prime/tau)^{m-1}`.
pub fn derivative_loss_constant(sigma: f64, tau: f64, tau_prime: f64) -> Result<f64> {
    if !(sigma >= 1.0) {
        return Err(Error::SigmaOutOfRange { sigma, need: "sigma >= 1" });
    }
    if !(tau > 0.0) {
        return Err(Error::TauOutOfRange { tau });
    }
    if !(tau_prime > 0.0 && tau_prime < tau) {
        return Err(Error::RadiusOrder { tau, tau_prime });
    }
    let r = tau_prime / tau;
    let mut sup: f64 = 0.0;
    let mut falling = 0;
    for m in 1..=10_000usize {
        let term = (m as f64).powf(sigma) * r.powi(m as i32 - 1);
        if term > sup {
            sup = term;
            falling = 0;
        } else {
            falling += 1;
            // The terms are eventually strictly decreasing; stop once past the peak.
            if falling > 4 && m > 8 {
                break;
            }
        }
    }
    Ok(sup / tau)
}

/// One-axis bump supported on `(a, b)`, from the class with parameter
/// `sigma > 1`: `exp(-s^{-1/(2(sigma-1))})` with `s = (t-a)(b-t)/(b-a)^2`.
/// Value and two derivatives are closed-form; all vanish outside `[a, b]`.
#[derive(Clone, Copy, Debug)]
pub struct Bump1d {
    a: f64,
    b: f64,
    p: f64,
    sqrt_path: bool,
}

/// Exponents above this underflow `exp(-e)` to zero along with every
/// derivative factor that multiplies it.
const UNDERFLOW_EXPONENT: f64 = 700.0;

impl Bump1d {
    pub fn new(a: f64, b: f64, sigma: f64) -> Result<Self> {
        if !(b > a) || !a.is_finite() || !b.is_finite() {
            return Err(Error::EmptyInterval { a, b });
        }
        if !(sigma > 1.0) {
            return Err(Error::SigmaOutOfRange { sigma, need: "sigma > 1 for bumps" });
        }
        let p = 1.0 / (2.0 * (sigma - 1.0));
        Ok(Self { a, b, p, sqrt_path: (p - 0.5).abs() < 1e-15 })
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    /// (value, first, second derivative) at t.
    pub fn eval2(&self, t: f64) -> (f64, f64, f64) {
        if t <= self.a || t >= self.b {
            return (0.0, 0.0, 0.0);
        }
        let len2 = (self.b - self.a) * (self.b - self.a);
        let s = (t - self.a) * (self.b - t) / len2;
        let s1 = (self.a + self.b - 2.0 * t) / len2;
        let s2 = -2.0 / len2;
        let p = self.p;
        // e = s^{-p}, and the two inverse powers the derivatives need.
        let (e, sp1, sp2) = if self.sqrt_path {
            let r = s.sqrt();
            let e = 1.0 / r;
            (e, e / s, e / (s * s))
        } else {
            let e = s.powf(-p);
            (e, e / s, e / (s * s))
        };
        if e > UNDERFLOW_EXPONENT {
            return (0.0, 0.0, 0.0);
        }
        let v = (-e).exp();
        let d1 = v * p * sp1 * s1;
        let d2 = v * (p * p * sp1 * sp1 * s1 * s1 - p * (p + 1.0) * sp2 * s1 * s1 + p * sp1 * s2);
        (v, d1, d2)
    }

    pub fn value(&self, t: f64) -> f64 {
        self.eval2(t).0
    }
}

/// Product bump supported exactly on `bx`, with analytic gradient and
/// Hessian. Unnormalized: the midpoint value is `exp(-n * s0)` with
/// `s0 = 4^{1/(2(sigma-1))}` per axis.
pub fn bump_field(bx: &BoxRegion, sigma: f64) -> Result<ScalarField> {
    let bumps: [Bump1d; 3] = [
        Bump1d::new(bx.lo[0], bx.hi[0], sigma)?,
        Bump1d::new(bx.lo[1], bx.hi[1], sigma)?,
        Bump1d::new(bx.lo[2], bx.hi[2], sigma)?,
    ];
    let b_eval = bumps;
    let b_grad = bumps;
    let b_hess = bumps;
    let eval = Arc::new(move |p: &Vec3| {
        let mut v = 1.0;
        for k in 0..3 {
            v *= b_eval[k].eval2(p[k]).0;
            if v == 0.0 {
                return 0.0;
            }
        }
        v
    });
    let grad = Arc::new(move |p: &Vec3| {
        let e: Vec<(f64, f64, f64)> = (0..3).map(|k| b_grad[k].eval2(p[k])).collect();
        Vec3::new(
            e[0].1 * e[1].0 * e[2].0,
            e[0].0 * e[1].1 * e[2].0,
            e[0].0 * e[1].0 * e[2].1,
        )
    });
    let hess = Arc::new(move |p: &Vec3| {
        let e: Vec<(f64, f64, f64)> = (0..3).map(|k| b_hess[k].eval2(p[k])).collect();
        let mut h = crate::geom::Mat3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                h[(i, j)] = (0..3)
                    .map(|k| {
                        if k == i && k == j {
                            e[k].2
                        } else if k == i || k == j {
                            e[k].1
                        } else {
                            e[k].0
                        }
                    })
                    .product();
            }
        }
        h
    });
    Ok(ScalarField::from_parts(eval, grad, hess).with_support(*bx))
}
