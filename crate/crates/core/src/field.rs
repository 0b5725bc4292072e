//! Immutable field evaluators: scalars, symmetric matrix coefficients, and
//! diffeomorphisms of the unit cube.
//!
//! Fields are closures over `R^3`, not grid samples. Arithmetic combinators
//! propagate gradients and Hessians by the chain rule, so quantities built
//! from closed-form ingredients keep analytic first and second derivatives
//! all the way through the constructions. Compact support is tracked as a box
//! and enforced exactly: outside its support a field evaluates to literal
//! zero, and outside its support a diffeomorphism is the identity.

use crate::error::{Error, Result};
use crate::geom::{BoxRegion, Mat3, Vec3};
use std::sync::Arc;

type EvalFn = Arc<dyn Fn(&Vec3) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&Vec3) -> Vec3 + Send + Sync>;
type HessFn = Arc<dyn Fn(&Vec3) -> Mat3 + Send + Sync>;
type MapFn = Arc<dyn Fn(&Vec3) -> Vec3 + Send + Sync>;
type JacFn = Arc<dyn Fn(&Vec3) -> Mat3 + Send + Sync>;
type MatFn = Arc<dyn Fn(&Vec3) -> Mat3 + Send + Sync>;

/// How derivatives of a field are produced.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DerivMode {
    Analytic,
    Centered { step: f64 },
}

/// Scalar field with value, gradient, and Hessian evaluators.
#[derive(Clone)]
pub struct ScalarField {
    eval: EvalFn,
    grad: GradFn,
    hess: HessFn,
    support: Option<BoxRegion>,
    /// Sorted first-axis coordinates where the field is flat but not
    /// analytic (support edges of compactly supported ingredients).
    /// Quadrature along the first axis must break panels here; a Gauss rule
    /// straddling such a point loses its convergence rate.
    seams: Vec<f64>,
    mode: DerivMode,
}

fn merge_seams(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = a.iter().chain(b).copied().collect();
    out.sort_by(|x, y| x.partial_cmp(y).unwrap());
    out.dedup_by(|x, y| (*x - *y).abs() <= 1e-12);
    out
}

impl ScalarField {
    pub fn from_parts(eval: EvalFn, grad: GradFn, hess: HessFn) -> Self {
        Self { eval, grad, hess, support: None, seams: Vec::new(), mode: DerivMode::Analytic }
    }

    pub fn constant(v: f64) -> Self {
        Self::from_parts(
            Arc::new(move |_| v),
            Arc::new(|_| Vec3::zeros()),
            Arc::new(|_| Mat3::zeros()),
        )
    }

    /// The coordinate function `x_axis`.
    pub fn coordinate(axis: usize) -> Self {
        assert!(axis < 3);
        Self::from_parts(
            Arc::new(move |p: &Vec3| p[axis]),
            Arc::new(move |_| {
                let mut g = Vec3::zeros();
                g[axis] = 1.0;
                g
            }),
            Arc::new(|_| Mat3::zeros()),
        )
    }

    /// `cos(freq * x_axis)` with analytic derivatives.
    pub fn cos_wave(freq: f64, axis: usize) -> Self {
        assert!(axis < 3);
        Self::from_parts(
            Arc::new(move |p: &Vec3| (freq * p[axis]).cos()),
            Arc::new(move |p: &Vec3| {
                let mut g = Vec3::zeros();
                g[axis] = -freq * (freq * p[axis]).sin();
                g
            }),
            Arc::new(move |p: &Vec3| {
                let mut h = Mat3::zeros();
                h[(axis, axis)] = -freq * freq * (freq * p[axis]).cos();
                h
            }),
        )
    }

    /// Build from a value closure only; derivatives by centered differences.
    pub fn from_fn_centered(f: impl Fn(&Vec3) -> f64 + Send + Sync + 'static, step: f64) -> Self {
        let f = Arc::new(f);
        let fe = f.clone();
        let fg = f.clone();
        let fh = f;
        let grad = Arc::new(move |p: &Vec3| {
            let mut g = Vec3::zeros();
            for k in 0..3 {
                let mut a = *p;
                let mut b = *p;
                a[k] += step;
                b[k] -= step;
                g[k] = (fg(&a) - fg(&b)) / (2.0 * step);
            }
            g
        });
        let hess = Arc::new(move |p: &Vec3| {
            let mut h = Mat3::zeros();
            let f0 = fh(p);
            for i in 0..3 {
                let mut a = *p;
                let mut b = *p;
                a[i] += step;
                b[i] -= step;
                h[(i, i)] = (fh(&a) - 2.0 * f0 + fh(&b)) / (step * step);
                for j in (i + 1)..3 {
                    let mut pp = *p;
                    let mut pm = *p;
                    let mut mp = *p;
                    let mut mm = *p;
                    pp[i] += step;
                    pp[j] += step;
                    pm[i] += step;
                    pm[j] -= step;
                    mp[i] -= step;
                    mp[j] += step;
                    mm[i] -= step;
                    mm[j] -= step;
                    let v = (fh(&pp) - fh(&pm) - fh(&mp) + fh(&mm)) / (4.0 * step * step);
                    h[(i, j)] = v;
                    h[(j, i)] = v;
                }
            }
            h
        });
        Self {
            eval: Arc::new(move |p| fe(p)),
            grad,
            hess,
            support: None,
            seams: Vec::new(),
            mode: DerivMode::Centered { step },
        }
    }

    pub fn eval(&self, p: &Vec3) -> f64 {
        (self.eval)(p)
    }

    pub fn grad(&self, p: &Vec3) -> Vec3 {
        (self.grad)(p)
    }

    pub fn hess(&self, p: &Vec3) -> Mat3 {
        (self.hess)(p)
    }

    pub fn support(&self) -> Option<BoxRegion> {
        self.support
    }

    /// First-axis panel breakpoints for quadrature over this field.
    pub fn seams(&self) -> &[f64] {
        &self.seams
    }

    pub fn mode(&self) -> DerivMode {
        self.mode
    }

    /// Merge extra first-axis seams (interior junctions a wrapper knows
    /// about that the closure chain cannot see).
    pub fn with_seams(mut self, pts: &[f64]) -> Self {
        self.seams = merge_seams(&self.seams, pts);
        self
    }

    /// Declare compact support: outside `bx` the field reports exact zero.
    /// The box's first-axis edges join the seam list.
    pub fn with_support(self, bx: BoxRegion) -> Self {
        let e = self.eval.clone();
        let g = self.grad.clone();
        let h = self.hess.clone();
        Self {
            eval: Arc::new(move |p| if bx.contains(p) { e(p) } else { 0.0 }),
            grad: Arc::new(move |p| if bx.contains(p) { g(p) } else { Vec3::zeros() }),
            hess: Arc::new(move |p| if bx.contains(p) { h(p) } else { Mat3::zeros() }),
            support: Some(bx),
            seams: merge_seams(&self.seams, &[bx.lo[0], bx.hi[0]]),
            mode: self.mode,
        }
    }

    fn worst_mode(a: DerivMode, b: DerivMode) -> DerivMode {
        match (a, b) {
            (DerivMode::Analytic, DerivMode::Analytic) => DerivMode::Analytic,
            (DerivMode::Centered { step }, _) | (_, DerivMode::Centered { step }) => {
                DerivMode::Centered { step }
            }
        }
    }

    pub fn add(&self, other: &ScalarField) -> ScalarField {
        let (e1, g1, h1) = (self.eval.clone(), self.grad.clone(), self.hess.clone());
        let (e2, g2, h2) = (other.eval.clone(), other.grad.clone(), other.hess.clone());
        let support = match (self.support, other.support) {
            (Some(a), Some(b)) => Some(a.hull(&b)),
            _ => None,
        };
        ScalarField {
            eval: Arc::new(move |p| e1(p) + e2(p)),
            grad: Arc::new(move |p| g1(p) + g2(p)),
            hess: Arc::new(move |p| h1(p) + h2(p)),
            support,
            seams: merge_seams(&self.seams, &other.seams),
            mode: Self::worst_mode(self.mode, other.mode),
        }
    }

    pub fn sub(&self, other: &ScalarField) -> ScalarField {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, k: f64) -> ScalarField {
        let (e, g, h) = (self.eval.clone(), self.grad.clone(), self.hess.clone());
        ScalarField {
            eval: Arc::new(move |p| k * e(p)),
            grad: Arc::new(move |p| k * g(p)),
            hess: Arc::new(move |p| k * h(p)),
            support: self.support,
            seams: self.seams.clone(),
            mode: self.mode,
        }
    }

    /// `a + b * f`, keeping analytic derivatives.
    pub fn affine(&self, a: f64, b: f64) -> ScalarField {
        let (e, g, h) = (self.eval.clone(), self.grad.clone(), self.hess.clone());
        ScalarField {
            eval: Arc::new(move |p| a + b * e(p)),
            grad: Arc::new(move |p| b * g(p)),
            hess: Arc::new(move |p| b * h(p)),
            support: None,
            seams: self.seams.clone(),
            mode: self.mode,
        }
    }

    pub fn mul(&self, other: &ScalarField) -> ScalarField {
        let support = match (self.support, other.support) {
            (Some(a), Some(b)) => match a.intersect(&b) {
                Some(i) => Some(i),
                None => return ScalarField::constant(0.0),
            },
            (Some(a), None) => Some(a),
            (None, Some(b)) => Some(b),
            (None, None) => None,
        };
        let (e1, g1, h1) = (self.eval.clone(), self.grad.clone(), self.hess.clone());
        let (e2, g2, h2) = (other.eval.clone(), other.grad.clone(), other.hess.clone());
        let mode = Self::worst_mode(self.mode, other.mode);
        let eg1 = (e1.clone(), g1.clone());
        let eg2 = (e2.clone(), g2.clone());
        ScalarField {
            eval: Arc::new(move |p| e1(p) * e2(p)),
            grad: {
                let (e1, g1) = (eg1.0.clone(), eg1.1.clone());
                let (e2, g2) = (eg2.0.clone(), eg2.1.clone());
                Arc::new(move |p| g1(p) * e2(p) + g2(p) * e1(p))
            },
            hess: Arc::new(move |p| {
                let (v1, v2) = (eg1.0(p), eg2.0(p));
                let (d1, d2) = (eg1.1(p), eg2.1(p));
                h1(p) * v2 + h2(p) * v1 + d1 * d2.transpose() + d2 * d1.transpose()
            }),
            support,
            seams: merge_seams(&self.seams, &other.seams),
            mode,
        }
    }

    /// `f^alpha` by the chain rule. The base must stay positive wherever the
    /// result is evaluated; callers validate positivity on a lattice first.
    pub fn powf(&self, alpha: f64) -> ScalarField {
        let (e, g, h) = (self.eval.clone(), self.grad.clone(), self.hess.clone());
        let (e2, g2) = (e.clone(), g.clone());
        ScalarField {
            eval: Arc::new(move |p| e(p).powf(alpha)),
            grad: {
                let (e, g) = (e2.clone(), g2.clone());
                Arc::new(move |p| alpha * e(p).powf(alpha - 1.0) * g(p))
            },
            hess: Arc::new(move |p| {
                let v = e2(p);
                let d = g2(p);
                let va1 = v.powf(alpha - 1.0);
                let va2 = v.powf(alpha - 2.0);
                alpha * va1 * h(p) + alpha * (alpha - 1.0) * va2 * d * d.transpose()
            }),
            support: None,
            seams: self.seams.clone(),
            mode: self.mode,
        }
    }

    /// The partial derivative along one axis, as a field. Value and gradient
    /// reuse the parent's analytic gradient and Hessian; the Hessian (third
    /// derivatives of the parent) falls back to centered differences.
    pub fn partial(&self, axis: usize) -> ScalarField {
        assert!(axis < 3);
        let g = self.grad.clone();
        let h = self.hess.clone();
        let h2 = self.hess.clone();
        let step = 1e-5;
        ScalarField {
            eval: Arc::new(move |p| g(p)[axis]),
            grad: Arc::new(move |p| h(p).column(axis).into()),
            hess: Arc::new(move |p| {
                let mut out = Mat3::zeros();
                for k in 0..3 {
                    let mut a = *p;
                    let mut b = *p;
                    a[k] += step;
                    b[k] -= step;
                    let d = (h2(&a).column(axis) - h2(&b).column(axis)) / (2.0 * step);
                    for i in 0..3 {
                        out[(i, k)] = d[i];
                    }
                }
                0.5 * (out + out.transpose())
            }),
            support: self.support,
            seams: self.seams.clone(),
            mode: DerivMode::Centered { step },
        }
    }

    /// `f(Psi^{-1}(y))`. The gradient uses the chain rule with the Jacobian at
    /// the preimage; the Hessian falls back to centered differences of that
    /// gradient. Panics if inversion fails: callers guarantee the domain.
    pub fn compose_inverse(&self, psi: &Diffeo) -> ScalarField {
        let f = self.clone();
        let f2 = self.clone();
        let psi_a = psi.clone();
        let psi_b = psi.clone();
        let eval = Arc::new(move |y: &Vec3| {
            let x = psi_a.inverse(y).unwrap_or_else(|e| panic!("composition: {e}"));
            f.eval(&x)
        });
        let grad: GradFn = Arc::new(move |y: &Vec3| {
            let x = psi_b.inverse(y).unwrap_or_else(|e| panic!("composition: {e}"));
            let j = psi_b.jac(&x);
            let ji = j.try_inverse().expect("composition: singular Jacobian");
            ji.transpose() * f2.grad(&x)
        });
        let g2 = grad.clone();
        let step = 1e-6;
        let hess = Arc::new(move |y: &Vec3| {
            let mut h = Mat3::zeros();
            for k in 0..3 {
                let mut a = *y;
                let mut b = *y;
                a[k] += step;
                b[k] -= step;
                let d = (g2(&a) - g2(&b)) / (2.0 * step);
                for i in 0..3 {
                    h[(i, k)] = d[i];
                }
            }
            // Symmetrize the finite-difference Hessian.
            0.5 * (h + h.transpose())
        });
        // Seams do not transfer: the map moves them off their coordinates.
        ScalarField {
            eval,
            grad,
            hess,
            support: None,
            seams: Vec::new(),
            mode: DerivMode::Centered { step },
        }
    }
}

/// Symmetric matrix-valued coefficient with a declared ellipticity window.
#[derive(Clone)]
pub struct MatrixField {
    eval: MatFn,
    ellipticity: (f64, f64),
}

impl MatrixField {
    /// `claim = (lo, hi)` asserts `lo |v|^2 <= v^T A v <= hi |v|^2` pointwise.
    pub fn from_fn(f: impl Fn(&Vec3) -> Mat3 + Send + Sync + 'static, claim: (f64, f64)) -> Self {
        Self { eval: Arc::new(f), ellipticity: claim }
    }

    pub fn constant(m: Mat3, claim: (f64, f64)) -> Self {
        Self::from_fn(move |_| m, claim)
    }

    pub fn identity() -> Self {
        Self::constant(Mat3::identity(), (1.0, 1.0))
    }

    pub fn eval(&self, p: &Vec3) -> Mat3 {
        (self.eval)(p)
    }

    pub fn ellipticity(&self) -> (f64, f64) {
        self.ellipticity
    }

    pub fn scale(&self, k: f64) -> MatrixField {
        assert!(k > 0.0, "coefficient scaling must preserve positivity");
        let e = self.eval.clone();
        MatrixField {
            eval: Arc::new(move |p| k * e(p)),
            ellipticity: (k * self.ellipticity.0, k * self.ellipticity.1),
        }
    }

    /// `s(x)^power * A(x)` with the stated ellipticity window for the product.
    pub fn scaled_by_power(&self, s: &ScalarField, power: f64, claim: (f64, f64)) -> MatrixField {
        let e = self.eval.clone();
        let s = s.clone();
        MatrixField {
            eval: Arc::new(move |p| s.eval(p).powf(power) * e(p)),
            ellipticity: claim,
        }
    }

    /// Check symmetry, positive definiteness, and the ellipticity claim on a
    /// sample lattice. Returns the observed (min, max) eigenvalue range.
    pub fn verify_on(&self, bx: &BoxRegion, lattice_n: usize) -> Result<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for p in bx.lattice(lattice_n) {
            let a = self.eval(&p);
            let asym = (a - a.transpose()).abs().max();
            if asym > 1e-10 * (1.0 + a.abs().max()) {
                return Err(Error::NotSpd { min_eig: f64::NAN });
            }
            let eig = nalgebra::SymmetricEigen::new(0.5 * (a + a.transpose()));
            let (mn, mx) = (eig.eigenvalues.min(), eig.eigenvalues.max());
            if mn <= 0.0 {
                return Err(Error::NotSpd { min_eig: mn });
            }
            lo = lo.min(mn);
            hi = hi.max(mx);
        }
        let (clo, chi) = self.ellipticity;
        let slack = 1e-9 * (1.0 + chi.abs());
        if lo < clo - slack || hi > chi + slack {
            let observed = if lo < clo - slack { lo } else { hi };
            return Err(Error::EllipticityViolation { claimed_lo: clo, claimed_hi: chi, observed });
        }
        Ok((lo, hi))
    }
}

/// Newton parameters for diffeomorphism inversion.
#[derive(Clone, Copy, Debug)]
pub struct NewtonParams {
    pub max_iters: usize,
    pub step_tol: f64,
}

impl Default for NewtonParams {
    fn default() -> Self {
        Self { max_iters: 20, step_tol: 1e-13 }
    }
}

/// Orientation-preserving diffeomorphism, identity outside its support box.
#[derive(Clone)]
pub struct Diffeo {
    forward: MapFn,
    jacobian: JacFn,
    inverse_exact: Option<MapFn>,
    support: Option<BoxRegion>,
    newton: NewtonParams,
}

impl Diffeo {
    pub fn identity() -> Self {
        Self {
            forward: Arc::new(|p| *p),
            jacobian: Arc::new(|_| Mat3::identity()),
            inverse_exact: Some(Arc::new(|p| *p)),
            support: None,
            newton: NewtonParams::default(),
        }
    }

    /// `support`: outside this box the map is the identity (and is evaluated
    /// as such, exactly). The box must be invariant under the map.
    pub fn from_parts(
        forward: impl Fn(&Vec3) -> Vec3 + Send + Sync + 'static,
        jacobian: impl Fn(&Vec3) -> Mat3 + Send + Sync + 'static,
        support: Option<BoxRegion>,
    ) -> Self {
        let fwd: MapFn = Arc::new(forward);
        let jac: JacFn = Arc::new(jacobian);
        match support {
            Some(bx) => {
                let f = fwd.clone();
                let j = jac.clone();
                Self {
                    forward: Arc::new(move |p| if bx.contains(p) { f(p) } else { *p }),
                    jacobian: Arc::new(
                        move |p| if bx.contains(p) { j(p) } else { Mat3::identity() },
                    ),
                    inverse_exact: None,
                    support,
                    newton: NewtonParams::default(),
                }
            }
            None => Self {
                forward: fwd,
                jacobian: jac,
                inverse_exact: None,
                support: None,
                newton: NewtonParams::default(),
            },
        }
    }

    pub fn with_exact_inverse(
        mut self,
        inv: impl Fn(&Vec3) -> Vec3 + Send + Sync + 'static,
    ) -> Self {
        self.inverse_exact = Some(Arc::new(inv));
        self
    }

    pub fn with_newton(mut self, newton: NewtonParams) -> Self {
        self.newton = newton;
        self
    }

    pub fn support(&self) -> Option<BoxRegion> {
        self.support
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (self.forward)(p)
    }

    pub fn jac(&self, p: &Vec3) -> Mat3 {
        (self.jacobian)(p)
    }

    pub fn det_jac(&self, p: &Vec3) -> f64 {
        self.jac(p).determinant()
    }

    /// Solve `Psi(x) = y` by damped Newton iteration.
    pub fn inverse(&self, y: &Vec3) -> Result<Vec3> {
        if let Some(inv) = &self.inverse_exact {
            return Ok(inv(y));
        }
        if let Some(bx) = &self.support {
            if !bx.contains(y) {
                return Ok(*y);
            }
        }
        let mut x = *y;
        let mut r = self.apply(&x) - y;
        let mut rn = r.norm();
        for it in 0..self.newton.max_iters {
            if rn <= self.newton.step_tol {
                return Ok(x);
            }
            let j = self.jac(&x);
            let step = j.lu().solve(&r).ok_or(Error::OrientationFault { det: j.determinant() })?;
            // Damp: halve until the residual does not grow.
            let mut lambda = 1.0;
            let mut accepted = false;
            for _ in 0..6 {
                let cand = x - lambda * step;
                let rc = self.apply(&cand) - y;
                if rc.norm() <= rn || lambda * step.norm() <= self.newton.step_tol {
                    x = cand;
                    r = rc;
                    rn = r.norm();
                    accepted = true;
                    break;
                }
                lambda *= 0.5;
            }
            if !accepted {
                return Err(Error::InversionFailure {
                    x: y[0],
                    y: y[1],
                    z: y[2],
                    residual: rn,
                    iters: it + 1,
                });
            }
            if lambda * step.norm() <= self.newton.step_tol && rn <= 1e-10 {
                return Ok(x);
            }
        }
        if rn <= 1e-10 {
            return Ok(x);
        }
        Err(Error::InversionFailure {
            x: y[0],
            y: y[1],
            z: y[2],
            residual: rn,
            iters: self.newton.max_iters,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe_points() -> Vec<Vec3> {
        vec![
            Vec3::new(0.3, 0.4, 0.5),
            Vec3::new(0.71, 0.22, 0.64),
            Vec3::new(0.5, 0.5, 0.5),
            Vec3::new(0.12, 0.83, 0.41),
        ]
    }

    #[test]
    fn product_rule_matches_centered_differences() {
        let f = ScalarField::coordinate(0).mul(&ScalarField::cos_wave(3.0, 1));
        let g = f.powf(1.0).mul(&f.affine(2.0, 0.5));
        let fd = ScalarField::from_fn_centered(
            {
                let g = g.clone();
                move |p| g.eval(p)
            },
            1e-5,
        );
        for p in probe_points() {
            let ga = g.grad(&p);
            let gn = fd.grad(&p);
            assert!((ga - gn).norm() < 1e-8, "grad mismatch at {p:?}");
            let ha = g.hess(&p);
            let hn = fd.hess(&p);
            assert!((ha - hn).abs().max() < 1e-5, "hess mismatch {:?}", (ha - hn).abs().max());
        }
    }

    #[test]
    fn powf_chain_rule() {
        let base = ScalarField::coordinate(0).affine(2.0, 1.0); // 2 + x
        let c = base.powf(-0.3);
        let fd = ScalarField::from_fn_centered(
            {
                let c = c.clone();
                move |p| c.eval(p)
            },
            1e-5,
        );
        for p in probe_points() {
            assert!((c.grad(&p) - fd.grad(&p)).norm() < 1e-9);
            assert!((c.hess(&p) - fd.hess(&p)).abs().max() < 1e-6);
        }
    }

    #[test]
    fn support_guard_is_exact_zero() {
        let bx = BoxRegion::cube(0.25, 0.75).unwrap();
        let f = ScalarField::constant(3.0).with_support(bx);
        assert_eq!(f.eval(&Vec3::new(0.1, 0.5, 0.5)), 0.0);
        assert_eq!(f.eval(&Vec3::new(0.5, 0.5, 0.5)), 3.0);
        assert_eq!(f.grad(&Vec3::new(0.9, 0.9, 0.9)), Vec3::zeros());
    }

    #[test]
    fn disjoint_product_collapses_to_zero() {
        let a = ScalarField::constant(1.0).with_support(BoxRegion::cube(0.0, 0.4).unwrap());
        let b = ScalarField::constant(1.0).with_support(BoxRegion::cube(0.6, 1.0).unwrap());
        let p = a.mul(&b);
        assert_eq!(p.eval(&Vec3::new(0.3, 0.3, 0.3)), 0.0);
        assert_eq!(p.eval(&Vec3::new(0.7, 0.7, 0.7)), 0.0);
    }

    #[test]
    fn newton_inverts_a_shear() {
        // Psi(x) = x + 0.2*sin-free smooth shear in x1 depending on x2.
        let psi = Diffeo::from_parts(
            |p| Vec3::new(p[0] + 0.2 * p[1] * p[1], p[1], p[2]),
            |p| {
                let mut j = Mat3::identity();
                j[(0, 1)] = 0.4 * p[1];
                j
            },
            None,
        );
        for y in probe_points() {
            let x = psi.inverse(&y).unwrap();
            assert!((psi.apply(&x) - y).norm() < 1e-12);
        }
    }

    #[test]
    fn identity_outside_support() {
        let bx = BoxRegion::cube(0.25, 0.75).unwrap();
        let psi = Diffeo::from_parts(
            |p| Vec3::new(p[0] + 0.01, p[1], p[2]),
            |_| Mat3::identity(),
            Some(bx),
        );
        let outside = Vec3::new(0.9, 0.9, 0.9);
        assert_eq!(psi.apply(&outside), outside);
        assert_eq!(psi.inverse(&outside).unwrap(), outside);
    }

    #[test]
    fn matrix_field_verification_catches_bad_claims() {
        let a = MatrixField::constant(Mat3::identity() * 2.0, (1.9, 2.1));
        let bx = BoxRegion::unit();
        assert!(a.verify_on(&bx, 3).is_ok());
        let bad = MatrixField::constant(Mat3::identity() * 5.0, (1.0, 2.0));
        assert!(matches!(bad.verify_on(&bx, 3), Err(Error::EllipticityViolation { .. })));
        let sing = MatrixField::constant(Mat3::identity() * 0.0, (0.0, 0.0));
        assert!(matches!(sing.verify_on(&bx, 3), Err(Error::NotSpd { .. })));
    }

    #[test]
    fn compose_inverse_round_trip() {
        let psi = Diffeo::from_parts(
            |p| Vec3::new(p[0] + 0.1 * p[2], p[1], p[2]),
            |_| {
                let mut j = Mat3::identity();
                j[(0, 2)] = 0.1;
                j
            },
            None,
        );
        let f = ScalarField::coordinate(0).mul(&ScalarField::coordinate(2));
        let g = f.compose_inverse(&psi);
        for y in probe_points() {
            let x = Vec3::new(y[0] - 0.1 * y[2], y[1], y[2]);
            assert!((g.eval(&y) - f.eval(&x)).abs() < 1e-11);
        }
    }
}
