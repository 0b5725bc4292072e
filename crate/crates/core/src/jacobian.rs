//! Prescribing a Jacobian determinant: a compactly supported primitive for
//! the divergence equation on a box, and the density-interpolation flow that
//! turns it into a diffeomorphism with `det DPsi = 1 + h`.
//!
//! The divergence primitive peels one axis at a time: the first component
//! absorbs `h` minus a cutoff times its fiber average, and the remaining
//! components carry the averaged problem one dimension down. The
//! variable-limit antiderivative along the first axis stays a per-evaluation
//! Gauss rule, split into panels at the declared support edges (the
//! integrand is not analytic across them and a single rule straddling an
//! edge converges far too slowly). Fiber averages and their antiderivatives
//! are cached as Chebyshev interpolants at construction; the same cached
//! average feeds both the first and second components, so the telescoping
//! in the divergence cancels exactly rather than up to interpolation error.
//!
//! The flow integrates `dphi/dt = A_t(phi)` with classical RK4 jointly with
//! either the full matrix variational equation (for Jacobians of returned
//! maps) or its Liouville trace (for determinant certificates, one velocity
//! evaluation per stage instead of seven).

use crate::cheb::{self, Cheb1, Cheb2, ChebTensor};
use crate::error::{Error, Result};
use crate::field::{Diffeo, ScalarField};
use crate::geom::{BoxRegion, Mat3, Vec3};
use crate::gevrey::{seminorm_1d, Bump1d, SeminormParams};
use crate::par;
use crate::quad;
use std::sync::{Arc, Mutex};

/// Unit-integral cutoff on an interval: a bump rescaled so its integral is
/// exactly one in the interpolant sense, with a cached antiderivative.
#[derive(Clone, Debug)]
pub struct AxisCutoff {
    a: f64,
    b: f64,
    scale: f64,
    bump: Bump1d,
    antider: Cheb1,
}

impl AxisCutoff {
    pub fn new(a: f64, b: f64, sigma: f64, fit_n: usize) -> Result<Self> {
        let bump = Bump1d::new(a, b, sigma)?;
        let fit = Cheb1::fit(a, b, fit_n, |t| bump.value(t));
        let antider = fit.antiderivative();
        let total = antider.eval(b);
        assert!(total > 0.0, "cutoff bump integrates to {total}");
        Ok(Self { a, b, scale: 1.0 / total, bump, antider })
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    pub fn value(&self, t: f64) -> f64 {
        self.bump.value(t) * self.scale
    }

    /// (value, first, second derivative), all scaled to unit integral.
    pub fn eval2(&self, t: f64) -> (f64, f64, f64) {
        let (v, d1, d2) = self.bump.eval2(t);
        (v * self.scale, d1 * self.scale, d2 * self.scale)
    }

    /// Antiderivative from the left endpoint; exactly 0 below and 1 above.
    pub fn antider(&self, t: f64) -> f64 {
        if t <= self.a {
            0.0
        } else if t >= self.b {
            1.0
        } else {
            self.antider.eval(t) * self.scale
        }
    }

    /// One-axis seminorm of the cutoff under the given budget.
    pub fn seminorm(&self, prm: &SeminormParams) -> Result<f64> {
        let me = self.clone();
        seminorm_1d(&move |t| me.eval2(t), self.a, self.b, prm)
    }
}

/// One cutoff per axis of the box.
pub fn axis_cutoffs(bx: &BoxRegion, sigma: f64, fit_n: usize) -> Result<[AxisCutoff; 3]> {
    Ok([
        AxisCutoff::new(bx.lo[0], bx.hi[0], sigma, fit_n)?,
        AxisCutoff::new(bx.lo[1], bx.hi[1], sigma, fit_n)?,
        AxisCutoff::new(bx.lo[2], bx.hi[2], sigma, fit_n)?,
    ])
}

/// Product of the three cutoffs as a scalar field with analytic derivatives.
/// Its integral is one up to interpolant error; the mean projection divides
/// by its own discrete integral, so exact unit mass is not required here.
pub fn cutoff_product_field(cuts: &[AxisCutoff; 3]) -> ScalarField {
    let bx = BoxRegion::new(
        [cuts[0].a, cuts[1].a, cuts[2].a],
        [cuts[0].b, cuts[1].b, cuts[2].b],
    )
    .expect("cutoff intervals form a box");
    let ce = cuts.clone();
    let cg = cuts.clone();
    let ch = cuts.clone();
    let eval = Arc::new(move |p: &Vec3| (0..3).map(|k| ce[k].value(p[k])).product());
    let grad = Arc::new(move |p: &Vec3| {
        let e: Vec<(f64, f64, f64)> = (0..3).map(|k| cg[k].eval2(p[k])).collect();
        Vec3::new(e[0].1 * e[1].0 * e[2].0, e[0].0 * e[1].1 * e[2].0, e[0].0 * e[1].0 * e[2].1)
    });
    let hess = Arc::new(move |p: &Vec3| {
        let e: Vec<(f64, f64, f64)> = (0..3).map(|k| ch[k].eval2(p[k])).collect();
        let mut h = Mat3::zeros();
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
    ScalarField::from_parts(eval, grad, hess).with_support(bx)
}

/// The norm-constant recursion: base case `len + tau` on the last axis, and
/// `(len_j + tau)(1 + len_j T_j) + len_j T_j C(rest)` peeling axis j.
/// `thetas` holds the cutoff seminorms for all axes but the last.
pub fn div_constant_chain(lengths: &[f64], thetas: &[f64], tau: f64) -> f64 {
    assert!(!lengths.is_empty());
    assert_eq!(thetas.len() + 1, lengths.len());
    if lengths.len() == 1 {
        return lengths[0] + tau;
    }
    let rest = div_constant_chain(&lengths[1..], &thetas[1..], tau);
    let l = lengths[0];
    let th = thetas[0];
    (l + tau) * (1.0 + l * th) + l * th * rest
}

/// Evaluates the constant for the box, measuring cutoff seminorms under the
/// budget. Only the first two cutoffs enter in three dimensions.
pub fn div_constant(
    q: &BoxRegion,
    budget: &SeminormParams,
    cutoffs: &[AxisCutoff; 3],
) -> Result<f64> {
    let lengths = [q.length(0), q.length(1), q.length(2)];
    let thetas = [cutoffs[0].seminorm(budget)?, cutoffs[1].seminorm(budget)?];
    Ok(div_constant_chain(&lengths, &thetas, budget.tau))
}

#[derive(Clone, Copy, Debug)]
pub struct JacobianConfig {
    /// Gauss nodes per panel for the per-eval segment rule and the fiber
    /// sampling pass.
    pub quad_n: usize,
    /// Chebyshev order of the cached fiber interpolants. Independent of
    /// `quad_n` so that doubling quadrature nodes probes quadrature alone.
    pub fiber_n: usize,
    /// Chebyshev order for cutoff antiderivatives.
    pub cutoff_fit_n: usize,
    /// RK4 steps on [0, 1].
    pub steps: usize,
    /// Class parameter for the cutoff bumps.
    pub sigma: f64,
    /// Budget used for the norm constant and cutoff seminorms.
    pub budget: SeminormParams,
    /// Step for centered differences of the velocity in the variational
    /// equation.
    pub da_step: f64,
    /// Lattice points per axis for the construction-time drift scan.
    pub drift_lattice: usize,
}

impl Default for JacobianConfig {
    fn default() -> Self {
        Self {
            quad_n: 64,
            fiber_n: 128,
            cutoff_fit_n: 96,
            steps: 64,
            sigma: 2.0,
            budget: SeminormParams::default(),
            da_step: 1e-6,
            drift_lattice: 5,
        }
    }
}

/// Compactly supported primitive for the divergence equation: a vector
/// field with `div X = h` and support in the box hulling the input support
/// and the cutoff intervals.
#[derive(Clone)]
pub struct DivergencePrimitive {
    support: BoxRegion,
    constant_bound: f64,
    mean_before: f64,
    proj_coef: f64,
    h: ScalarField,
    cutoffs: [AxisCutoff; 3],
    /// Sorted axis-1 panel boundaries, first = support lo, last = support
    /// hi, interior entries at the declared support edges of the integrand.
    breaks: Vec<f64>,
    /// Per-panel `(a, b, nodes)`, node counts scaled to panel width.
    panels: Vec<(f64, f64, usize)>,
    fiber_h: Cheb2,
    fiber_ha: Cheb2,
    fiber_k: Cheb1,
    fiber_ka: Cheb1,
}

/// Gauss node counts per panel: `quad_n` is the budget for the full span,
/// split proportionally with a floor so narrow panels (window ramps, gaps
/// between supports) stop inflating every segment evaluation.
fn panel_table(breaks: &[f64], quad_n: usize) -> Vec<(f64, f64, usize)> {
    let span = breaks.last().unwrap() - breaks.first().unwrap();
    let floor = quad_n.min(16).max(8);
    breaks
        .windows(2)
        .map(|w| {
            let n = ((quad_n as f64 * (w[1] - w[0]) / span).ceil() as usize + 8).max(floor);
            (w[0], w[1], n)
        })
        .collect()
}

/// Sum of Gauss integrals of `f(s, y, z)` in s over the panels, cut off at
/// `upto`.
fn panel_integral(
    f: &ScalarField,
    panels: &[(f64, f64, usize)],
    upto: f64,
    y: f64,
    z: f64,
) -> f64 {
    let mut total = 0.0;
    for &(a, b, n) in panels {
        if a >= upto {
            break;
        }
        let b = b.min(upto);
        total += quad::integrate_interval(n, a, b, |s| f.eval(&Vec3::new(s, y, z)));
    }
    total
}

/// Axis-1 panel boundaries for integrating `fields` over `[a, b]`: the
/// interval ends plus each field's declared seams that fall strictly
/// inside.
fn axis_breaks(a: f64, b: f64, fields: &[&ScalarField]) -> Vec<f64> {
    let mut pts = vec![a, b];
    for f in fields {
        for &v in f.seams() {
            if v > a && v < b && pts.iter().all(|&p| (p - v).abs() > 1e-12) {
                pts.push(v);
            }
        }
    }
    pts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    pts
}

/// The fiber-average chain for one integrand: Chebyshev fit of the axis-1
/// integral H on the fiber box, its antiderivative in the second axis, the
/// second average K, and the antiderivative of that. The value `ka(b3)` is
/// the chain's discrete integral of the input over the whole box.
///
/// The fit of H gets its boundary traces zeroed in coefficient space. The
/// true fiber integral vanishes at the box edges (every ingredient's
/// support ends at or before them), so this removes only the fit's own
/// edge error; in exchange, every face value of the assembled field
/// vanishes in exact polynomial arithmetic rather than up to interpolation
/// error. The divergence identity is untouched: it telescopes for any
/// cached H as long as HA, K, KA derive from that same H.
struct FiberChain {
    h: Cheb2,
    ha: Cheb2,
    k: Cheb1,
    ka: Cheb1,
    total: f64,
}

fn fiber_chain_from_samples(k0: &BoxRegion, fiber_n: usize, samples: Vec<f64>) -> FiberChain {
    let (a2, b2) = (k0.lo[1], k0.hi[1]);
    let (a3, b3) = (k0.lo[2], k0.hi[2]);
    let h = Cheb2::from_samples((a2, b2), (a3, b3), fiber_n, fiber_n, samples)
        .with_zero_boundary();
    let ha = h.antiderivative_x();
    let ha2 = ha.clone();
    let k = Cheb1::fit(a3, b3, fiber_n, move |x3| ha2.eval(b2, x3));
    let ka = k.antiderivative();
    let total = ka.eval(b3);
    FiberChain { h, ha, k, ka, total }
}

fn sample_fiber_integrals(
    f: &ScalarField,
    k0: &BoxRegion,
    panels: &[(f64, f64, usize)],
    fiber_n: usize,
) -> Vec<f64> {
    let ys = cheb::nodes(fiber_n, k0.lo[1], k0.hi[1]);
    let zs = cheb::nodes(fiber_n, k0.lo[2], k0.hi[2]);
    let top = k0.hi[0];
    par::map(fiber_n * fiber_n, |idx| {
        panel_integral(f, panels, top, ys[idx / fiber_n], zs[idx % fiber_n])
    })
}

/// Builds the primitive. `h` must carry a declared support; the working box
/// is the hull of that support and the cutoff intervals and must sit
/// strictly inside `q`. The mean of `h` is projected out against the cutoff
/// product bump, with the coefficient chosen so the chain's own discrete
/// integral of the projected field is exactly zero; that makes the third
/// component vanish at the far face to rounding rather than to quadrature
/// error. The primitive solves the equation for the projected field,
/// exposed as `projected_h`.
pub fn div_primitive(
    h: &ScalarField,
    q: &BoxRegion,
    cutoffs: [AxisCutoff; 3],
    quad_n: usize,
    fiber_n: usize,
    budget: &SeminormParams,
) -> Result<DivergencePrimitive> {
    let hsupp = h.support().ok_or(Error::SupportUnknown)?;
    let cutbox = BoxRegion::new(
        [cutoffs[0].a, cutoffs[1].a, cutoffs[2].a],
        [cutoffs[0].b, cutoffs[1].b, cutoffs[2].b],
    )?;
    let k0 = hsupp.hull(&cutbox);
    if !q.contains_box_strictly(&k0) {
        return Err(Error::SupportViolation {
            inner: [k0.lo, k0.hi],
            outer: [q.lo, q.hi],
        });
    }

    let beta = cutoff_product_field(&cutoffs);
    let breaks = axis_breaks(k0.lo[0], k0.hi[0], &[h, &beta]);
    let panels = panel_table(&breaks, quad_n);

    let raw = sample_fiber_integrals(h, &k0, &panels, fiber_n);
    let bump = sample_fiber_integrals(&beta, &k0, &panels, fiber_n);
    let mean_before = fiber_chain_from_samples(&k0, fiber_n, raw.clone()).total;
    let beta_total = fiber_chain_from_samples(&k0, fiber_n, bump.clone()).total;
    assert!(
        beta_total > 0.1,
        "cutoff product integrates to {beta_total}; expected about one"
    );
    let c = mean_before / beta_total;

    let mixed: Vec<f64> = raw.iter().zip(&bump).map(|(a, b)| a - c * b).collect();
    let chain = fiber_chain_from_samples(&k0, fiber_n, mixed);
    if chain.total.abs() > 1e-12 {
        return Err(Error::MeanConstraint { integral: chain.total, tol: 1e-12 });
    }
    let projected = h.sub(&beta.scale(c));

    let constant_bound = div_constant(q, budget, &cutoffs)?;

    Ok(DivergencePrimitive {
        support: k0,
        constant_bound,
        mean_before,
        proj_coef: c,
        h: projected,
        cutoffs,
        breaks,
        panels,
        fiber_h: chain.h,
        fiber_ha: chain.ha,
        fiber_k: chain.k,
        fiber_ka: chain.ka,
    })
}

impl DivergencePrimitive {
    pub fn support(&self) -> BoxRegion {
        self.support
    }

    /// Same cached fibers, projection, and support, different per-eval
    /// segment rule. Cheaper rules suit bulk sampling passes whose
    /// divergence-defect budget is looser than the flow certificate's.
    pub fn with_quad_n(&self, quad_n: usize) -> Self {
        let panels = panel_table(&self.breaks, quad_n);
        Self { panels, ..self.clone() }
    }

    pub fn constant_bound(&self) -> f64 {
        self.constant_bound
    }

    /// Discrete integral of the input before projection (diagnostic).
    pub fn mean_before(&self) -> f64 {
        self.mean_before
    }

    /// Coefficient of the cutoff bump removed from the input.
    pub fn proj_coef(&self) -> f64 {
        self.proj_coef
    }

    /// The zero-mean field this primitive actually solves for.
    pub fn projected_h(&self) -> &ScalarField {
        &self.h
    }

    /// Largest trailing Chebyshev coefficient across the fiber caches; small
    /// values certify the caches resolve their integrands.
    pub fn fiber_tail(&self) -> f64 {
        self.fiber_h
            .tail_max(0)
            .max(self.fiber_h.tail_max(1))
            .max(self.fiber_k.tail_max())
    }

    pub fn eval(&self, p: &Vec3) -> Vec3 {
        if !self.support.contains(p) {
            return Vec3::zeros();
        }
        let seg = panel_integral(&self.h, &self.panels, p[0], p[1], p[2]);
        let hbar = self.fiber_h.eval(p[1], p[2]);
        let x1 = seg - self.cutoffs[0].antider(p[0]) * hbar;
        let th1 = self.cutoffs[0].value(p[0]);
        let kv = self.fiber_k.eval(p[2]);
        let x2 = th1 * (self.fiber_ha.eval(p[1], p[2]) - self.cutoffs[1].antider(p[1]) * kv);
        let x3 = th1 * self.cutoffs[1].value(p[1]) * self.fiber_ka.eval(p[2]);
        Vec3::new(x1, x2, x3)
    }

    /// Max over the points of |div X - h| with centered differences.
    pub fn divergence_residual(&self, points: &[Vec3], step: f64) -> f64 {
        par::max(points.len(), |i| {
            let p = &points[i];
            let mut div = 0.0;
            for k in 0..3 {
                let mut a = *p;
                let mut b = *p;
                a[k] += step;
                b[k] -= step;
                div += (self.eval(&a)[k] - self.eval(&b)[k]) / (2.0 * step);
            }
            (div - self.h.eval(p)).abs()
        })
    }
}

/// Velocity of the density interpolation: `A_t = X / (1 + (1-t) h)`.
struct Velocity {
    x: Arc<DivergencePrimitive>,
    h: ScalarField,
}

impl Velocity {
    fn rho(&self, t: f64, p: &Vec3) -> f64 {
        1.0 + (1.0 - t) * self.h.eval(p)
    }

    fn eval(&self, t: f64, p: &Vec3) -> Vec3 {
        let xv = self.x.eval(p);
        if xv == Vec3::zeros() {
            return xv;
        }
        xv / self.rho(t, p)
    }

    /// Velocity and its divergence in one pass (the field evaluation
    /// dominates the cost): div A = h/rho - (1-t) (X . grad h) / rho^2,
    /// using div X = h.
    fn eval_div(&self, t: f64, p: &Vec3) -> (Vec3, f64) {
        let xv = self.x.eval(p);
        let hv = self.h.eval(p);
        let rho = 1.0 + (1.0 - t) * hv;
        let diva = hv / rho - (1.0 - t) * xv.dot(&self.h.grad(p)) / (rho * rho);
        (xv / rho, diva)
    }

    fn jacobian_fd(&self, t: f64, p: &Vec3, step: f64) -> Mat3 {
        let mut m = Mat3::zeros();
        for j in 0..3 {
            let mut a = *p;
            let mut b = *p;
            a[j] += step;
            b[j] -= step;
            let col = (self.eval(t, &a) - self.eval(t, &b)) / (2.0 * step);
            for i in 0..3 {
                m[(i, j)] = col[i];
            }
        }
        m
    }
}

fn rk4_forward(v: &Velocity, p0: &Vec3, steps: usize) -> Vec3 {
    let dt = 1.0 / steps as f64;
    let mut y = *p0;
    for k in 0..steps {
        let t = k as f64 * dt;
        let k1 = v.eval(t, &y);
        let k2 = v.eval(t + 0.5 * dt, &(y + 0.5 * dt * k1));
        let k3 = v.eval(t + 0.5 * dt, &(y + 0.5 * dt * k2));
        let k4 = v.eval(t + dt, &(y + dt * k3));
        y += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    y
}

/// Forward map plus the full variational Jacobian, with the velocity
/// Jacobian by centered differences.
fn rk4_forward_jac(v: &Velocity, p0: &Vec3, steps: usize, da_step: f64) -> (Vec3, Mat3) {
    let dt = 1.0 / steps as f64;
    let mut y = *p0;
    let mut j = Mat3::identity();
    for k in 0..steps {
        let t = k as f64 * dt;
        let f1 = v.eval(t, &y);
        let g1 = v.jacobian_fd(t, &y, da_step) * j;
        let y2 = y + 0.5 * dt * f1;
        let j2 = j + 0.5 * dt * g1;
        let f2 = v.eval(t + 0.5 * dt, &y2);
        let g2 = v.jacobian_fd(t + 0.5 * dt, &y2, da_step) * j2;
        let y3 = y + 0.5 * dt * f2;
        let j3 = j + 0.5 * dt * g2;
        let f3 = v.eval(t + 0.5 * dt, &y3);
        let g3 = v.jacobian_fd(t + 0.5 * dt, &y3, da_step) * j3;
        let y4 = y + dt * f3;
        let j4 = j + dt * g3;
        let f4 = v.eval(t + dt, &y4);
        let g4 = v.jacobian_fd(t + dt, &y4, da_step) * j4;
        y += dt / 6.0 * (f1 + 2.0 * f2 + 2.0 * f3 + f4);
        j += dt / 6.0 * (g1 + 2.0 * g2 + 2.0 * g3 + g4);
    }
    (y, j)
}

/// Forward map plus the Jacobian determinant via the Liouville trace
/// `d(det)/dt = div A (phi) det`, one field evaluation per stage. Also
/// tracks the largest drift of the conserved quantity `rho_t(phi) det`
/// against its value `1 + h(p0)` at the step boundaries.
fn rk4_forward_det(v: &Velocity, p0: &Vec3, steps: usize) -> (Vec3, f64, f64) {
    let dt = 1.0 / steps as f64;
    let mut y = *p0;
    let mut d = 1.0;
    let target = 1.0 + v.h.eval(p0);
    let mut drift: f64 = 0.0;
    for k in 0..steps {
        let t = k as f64 * dt;
        let (f1, w1) = v.eval_div(t, &y);
        let e1 = w1 * d;
        let y2 = y + 0.5 * dt * f1;
        let d2 = d + 0.5 * dt * e1;
        let (f2, w2) = v.eval_div(t + 0.5 * dt, &y2);
        let e2 = w2 * d2;
        let y3 = y + 0.5 * dt * f2;
        let d3 = d + 0.5 * dt * e2;
        let (f3, w3) = v.eval_div(t + 0.5 * dt, &y3);
        let e3 = w3 * d3;
        let y4 = y + dt * f3;
        let d4 = d + dt * e3;
        let (f4, w4) = v.eval_div(t + dt, &y4);
        let e4 = w4 * d4;
        y += dt / 6.0 * (f1 + 2.0 * f2 + 2.0 * f3 + f4);
        d += dt / 6.0 * (e1 + 2.0 * e2 + 2.0 * e3 + e4);
        let t_next = (k + 1) as f64 * dt;
        drift = drift.max((v.rho(t_next, &y) * d - target).abs());
    }
    (y, d, drift)
}

/// Determinant certificate over a point set.
#[derive(Clone, Copy, Debug)]
pub struct FlowCert {
    /// max |det DPsi - (1 + h)| at time one.
    pub endpoint_residual: f64,
    /// max drift of the conserved density-determinant product over all
    /// steps and points.
    pub path_drift: f64,
}

/// Time-one map of the density interpolation flow.
pub struct FlowResult {
    pub psi: Diffeo,
    pub steps: usize,
    /// Construction-time drift scan over a lattice.
    pub drift: f64,
    k0: BoxRegion,
    vel: Arc<Velocity>,
}

pub fn moser_flow(
    h: &ScalarField,
    x: &DivergencePrimitive,
    steps: usize,
    da_step: f64,
    drift_lattice: usize,
) -> Result<FlowResult> {
    if steps < 8 {
        return Err(Error::StepBudget { steps, min: 8 });
    }
    let k0 = x.support();
    let mut sup: f64 = 0.0;
    for p in k0.lattice(17) {
        sup = sup.max(h.eval(&p).abs());
    }
    if sup > 0.5 {
        return Err(Error::AmplitudeTooLarge { sup });
    }
    // rho stays above 1 - sup|h| >= 1/2 everywhere, so positivity holds.
    let vel = Arc::new(Velocity { x: Arc::new(x.clone()), h: h.clone() });

    let pts = k0.lattice(drift_lattice);
    let drift = par::max(pts.len(), |i| rk4_forward_det(&vel, &pts[i], steps).2);

    let vf = vel.clone();
    let vj = vel.clone();
    let psi = Diffeo::from_parts(
        move |p| rk4_forward(&vf, p, steps),
        move |p| rk4_forward_jac(&vj, p, steps, da_step).1,
        Some(k0),
    );
    Ok(FlowResult { psi, steps, drift, k0, vel })
}

impl FlowResult {
    pub fn support(&self) -> BoxRegion {
        self.k0
    }

    /// det DPsi at a point, by the Liouville trace.
    pub fn det_at(&self, p: &Vec3) -> f64 {
        if !self.k0.contains(p) {
            return 1.0;
        }
        rk4_forward_det(&self.vel, p, self.steps).1
    }

    /// Certifies the determinant over the given points at a chosen step
    /// count (pass `self.steps` for the as-built flow; other counts probe
    /// step-size convergence).
    pub fn certify(&self, points: &[Vec3], steps: usize) -> FlowCert {
        let cases = par::map(points.len(), |i| {
            let p = &points[i];
            let (_, det, dr) = rk4_forward_det(&self.vel, p, steps);
            let target = 1.0 + self.vel.h.eval(p);
            ((det - target).abs(), dr)
        });
        let mut endpoint: f64 = 0.0;
        let mut path: f64 = 0.0;
        for (e, d) in cases {
            endpoint = endpoint.max(e);
            path = path.max(d);
        }
        FlowCert { endpoint_residual: endpoint, path_drift: path }
    }

    /// det DPsi by the full matrix variational equation (slower; used to
    /// cross-check the Liouville trace).
    pub fn det_via_matrix(&self, p: &Vec3, da_step: f64) -> f64 {
        rk4_forward_jac(&self.vel, p, self.steps, da_step).1.determinant()
    }

    /// det DPsi by centered differences of the forward map itself.
    pub fn det_via_map_fd(&self, p: &Vec3, step: f64) -> f64 {
        let mut m = Mat3::zeros();
        for j in 0..3 {
            let mut a = *p;
            let mut b = *p;
            a[j] += step;
            b[j] -= step;
            let col = (self.psi.apply(&a) - self.psi.apply(&b)) / (2.0 * step);
            for i in 0..3 {
                m[(i, j)] = col[i];
            }
        }
        m.determinant()
    }
}

/// Outcome of the full composition: primitive, flow, and the resulting map.
pub struct PrescribedJacobian {
    pub psi: Diffeo,
    pub flow: FlowResult,
    pub primitive: Arc<DivergencePrimitive>,
    pub sup_h: f64,
    pub mean_before: f64,
}

/// Composes the divergence primitive on `q` (cutoffs fixed on `q0`, so the
/// support box is `q0` for every admissible `h`) with the flow. The
/// returned map has `det DPsi = 1 + projected h` up to the flow drift and
/// is the identity outside `q0`.
pub fn prescribed_jacobian(
    h: &ScalarField,
    q0: &BoxRegion,
    q: &BoxRegion,
    cfg: &JacobianConfig,
) -> Result<PrescribedJacobian> {
    let hsupp = h.support().ok_or(Error::SupportUnknown)?;
    if !q0.contains_box(&hsupp) {
        return Err(Error::SupportViolation {
            inner: [hsupp.lo, hsupp.hi],
            outer: [q0.lo, q0.hi],
        });
    }
    let cutoffs = axis_cutoffs(q0, cfg.sigma, cfg.cutoff_fit_n)?;
    let prim = div_primitive(h, q, cutoffs, cfg.quad_n, cfg.fiber_n, &cfg.budget)?;
    let projected = prim.projected_h().clone();
    let mut sup: f64 = 0.0;
    for p in prim.support().lattice(17) {
        sup = sup.max(projected.eval(&p).abs());
    }
    let flow = moser_flow(&projected, &prim, cfg.steps, cfg.da_step, cfg.drift_lattice)?;
    let mean_before = prim.mean_before();
    Ok(PrescribedJacobian {
        psi: flow.psi.clone(),
        flow,
        primitive: Arc::new(prim),
        sup_h: sup,
        mean_before,
    })
}

/// Fit quality of a sampled map.
#[derive(Clone, Copy, Debug)]
pub struct SurrogateReport {
    /// Largest trailing Chebyshev coefficient across displacement fits.
    pub forward_tail: f64,
    /// max |inverse(forward(x)) - x| over the check points.
    pub round_trip: f64,
    /// max |surrogate(x) - psi(x)| over the check points, against the
    /// original map.
    pub forward_err: f64,
}

/// Replaces an expensive diffeomorphism by Chebyshev interpolants of its
/// displacement on the support box: spectral Jacobians, a fitted inverse
/// (no Newton at evaluation time), and exact identity outside the box.
/// The report quantifies how far the surrogate sits from the original.
pub fn sample_diffeo(
    psi: &Diffeo,
    k0: &BoxRegion,
    orders: [usize; 3],
    check: &[Vec3],
) -> Result<(Diffeo, SurrogateReport)> {
    let disp = ChebTensor::fit3(k0.lo, k0.hi, orders, |p| psi.apply(p) - p);
    let forward_tail = disp
        .iter()
        .map(|t| t.tail_max(0).max(t.tail_max(1)).max(t.tail_max(2)))
        .fold(0.0f64, f64::max);
    let jac_rows: Vec<[ChebTensor; 3]> = disp
        .iter()
        .map(|t| [t.derivative_axis(0), t.derivative_axis(1), t.derivative_axis(2)])
        .collect();

    let disp_f = disp.clone();
    let fwd = move |p: &Vec3| {
        Vec3::new(
            p[0] + disp_f[0].eval(p),
            p[1] + disp_f[1].eval(p),
            p[2] + disp_f[2].eval(p),
        )
    };
    let jac_local = |rows: &[[ChebTensor; 3]], p: &Vec3| {
        let mut m = Mat3::identity();
        for i in 0..3 {
            for j in 0..3 {
                m[(i, j)] += rows[i][j].eval(p);
            }
        }
        m
    };

    // Inverse displacement fit: Newton against the fitted forward at every
    // node of the same grid. The map is near-identity, so plain Newton with
    // a handful of iterations converges; any failure aborts the fit.
    let fail: Mutex<Option<(Vec3, f64)>> = Mutex::new(None);
    let rows_for_inv = jac_rows.clone();
    let fwd_for_inv = fwd.clone();
    let inv_disp = ChebTensor::fit3(k0.lo, k0.hi, orders, |y| {
        let mut x = *y;
        for _ in 0..30 {
            let r = fwd_for_inv(&x) - y;
            if r.norm() <= 1e-14 {
                return x - y;
            }
            let j = jac_local(&rows_for_inv, &x);
            match j.lu().solve(&r) {
                Some(step) => x -= step,
                None => break,
            }
        }
        let r = (fwd_for_inv(&x) - y).norm();
        if r > 1e-10 {
            *fail.lock().unwrap() = Some((*y, r));
        }
        x - y
    });
    if let Some((y, residual)) = *fail.lock().unwrap() {
        return Err(Error::InversionFailure { x: y[0], y: y[1], z: y[2], residual, iters: 30 });
    }

    let k0c = *k0;
    let inv = move |y: &Vec3| {
        if !k0c.contains(y) {
            return *y;
        }
        Vec3::new(
            y[0] + inv_disp[0].eval(y),
            y[1] + inv_disp[1].eval(y),
            y[2] + inv_disp[2].eval(y),
        )
    };

    let fwd_p = fwd.clone();
    let rows_p = jac_rows;
    let surrogate = Diffeo::from_parts(
        move |p| fwd_p(p),
        move |p| jac_local(&rows_p, p),
        Some(*k0),
    )
    .with_exact_inverse(inv);

    let mut round_trip: f64 = 0.0;
    let mut forward_err: f64 = 0.0;
    for p in check {
        let f = surrogate.apply(p);
        let back = surrogate.inverse(&f)?;
        round_trip = round_trip.max((back - p).norm());
        forward_err = forward_err.max((f - psi.apply(p)).norm());
    }
    Ok((surrogate, SurrogateReport { forward_tail, round_trip, forward_err }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gevrey::bump_field;
    use rand::Rng;
    use rand::SeedableRng;

    fn rng_points(bx: &BoxRegion, n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(bx.lo[0]..bx.hi[0]),
                    rng.random_range(bx.lo[1]..bx.hi[1]),
                    rng.random_range(bx.lo[2]..bx.hi[2]),
                )
            })
            .collect()
    }

    /// Normalizes a raw bump to unit integral.
    fn unit_bump(bx: &BoxRegion) -> ScalarField {
        let raw = bump_field(bx, 2.0).unwrap();
        let mass = quad::integrate_box(64, bx, |p| raw.eval(p));
        raw.scale(1.0 / mass)
    }

    fn rescale_to_sup(f: ScalarField, amp: f64) -> ScalarField {
        let mut sup: f64 = 0.0;
        for p in BoxRegion::cube(0.2, 0.8).unwrap().lattice(33) {
            sup = sup.max(f.eval(&p).abs());
        }
        f.scale(amp / sup)
    }

    /// Wide smooth sign-changing input on [0.2, 0.8]^3, rescaled to sup
    /// `amp`. The tilt factors keep the fiber averages nonzero in both
    /// remaining axes so every component of the primitive is exercised.
    fn wavy_input(amp: f64) -> ScalarField {
        let b = bump_field(&BoxRegion::cube(0.2, 0.8).unwrap(), 2.0).unwrap();
        let tilt = ScalarField::coordinate(0)
            .affine(-0.45, 1.0)
            .mul(&ScalarField::coordinate(1).affine(0.85, 0.3));
        rescale_to_sup(b.mul(&tilt), amp)
    }

    /// Difference of two disjoint unit-integral bumps split along the first
    /// axis, jointly rescaled to sup `amp`. The interior support edges make
    /// this the hard case for the panel rule. Zero mean by construction.
    fn bump_pair(amp: f64) -> ScalarField {
        let b1 = unit_bump(&BoxRegion::new([0.2, 0.2, 0.2], [0.48, 0.8, 0.8]).unwrap());
        let b2 = unit_bump(&BoxRegion::new([0.52, 0.28, 0.24], [0.8, 0.76, 0.78]).unwrap());
        rescale_to_sup(b1.sub(&b2), amp)
    }

    fn quick_cfg() -> JacobianConfig {
        JacobianConfig { quad_n: 32, fiber_n: 64, cutoff_fit_n: 64, ..Default::default() }
    }

    fn make_primitive(h: &ScalarField, quad_n: usize, fiber_n: usize) -> DivergencePrimitive {
        let q0 = BoxRegion::cube(0.2, 0.8).unwrap();
        let cuts = axis_cutoffs(&q0, 2.0, 96).unwrap();
        div_primitive(h, &BoxRegion::unit(), cuts, quad_n, fiber_n, &SeminormParams::default())
            .unwrap()
    }

    #[test]
    fn one_dimensional_constant() {
        // Base case: |I| + tau with I = (0.25, 0.75), tau = 0.5.
        assert_eq!(div_constant_chain(&[0.5], &[], 0.5), 1.0);
    }

    #[test]
    fn constant_grows_with_radius() {
        let q = BoxRegion::unit();
        let cuts = axis_cutoffs(&BoxRegion::cube(0.2, 0.8).unwrap(), 2.0, 64).unwrap();
        let lo = SeminormParams { tau: 0.4, lattice_n: 9, max_order: 6, ..Default::default() };
        let hi = SeminormParams { tau: 0.6, ..lo };
        let c_lo = div_constant(&q, &lo, &cuts).unwrap();
        let c_hi = div_constant(&q, &hi, &cuts).unwrap();
        assert!(c_hi > c_lo, "{c_hi} vs {c_lo}");
    }

    #[test]
    fn zero_input_gives_zero_field() {
        let h = ScalarField::constant(0.0).with_support(BoxRegion::cube(0.3, 0.7).unwrap());
        let cuts = axis_cutoffs(&BoxRegion::cube(0.25, 0.75).unwrap(), 2.0, 64).unwrap();
        let prim = div_primitive(&h, &BoxRegion::unit(), cuts, 32, 48, &SeminormParams::default())
            .unwrap();
        for p in rng_points(&BoxRegion::unit(), 50, 1) {
            assert_eq!(prim.eval(&p), Vec3::zeros());
        }
    }

    #[test]
    fn divergence_matches_input() {
        let prim = make_primitive(&wavy_input(1.0), 64, 128);
        let pts = rng_points(&BoxRegion::cube(0.2, 0.8).unwrap(), 1000, 2);
        let r = prim.divergence_residual(&pts, 1e-4);
        assert!(r <= 1e-6, "residual {r}");
        // The hard case: interior support edges, where a rule that ignores
        // panels loses six orders of magnitude.
        let prim = make_primitive(&bump_pair(0.3), 64, 128);
        let r = prim.divergence_residual(&pts, 1e-4);
        assert!(r <= 1e-6, "split-support residual {r}");
    }

    #[test]
    fn field_vanishes_outside_support() {
        let prim = make_primitive(&bump_pair(1.0), 32, 64);
        let k0 = prim.support();
        for p in rng_points(&BoxRegion::unit(), 300, 3) {
            if !k0.contains(&p) {
                assert_eq!(prim.eval(&p), Vec3::zeros());
            }
        }
    }

    #[test]
    fn doubling_quadrature_barely_moves_the_field() {
        // Same interpolation orders, doubled Gauss nodes: isolates the
        // quadrature contribution.
        let h = bump_pair(1.0);
        let p64 = make_primitive(&h, 64, 64);
        let p128 = make_primitive(&h, 128, 64);
        let mut worst: f64 = 0.0;
        for p in rng_points(&BoxRegion::cube(0.2, 0.8).unwrap(), 200, 4) {
            worst = worst.max((p64.eval(&p) - p128.eval(&p)).norm());
        }
        assert!(worst <= 1e-9, "quadrature sensitivity {worst}");
    }

    #[test]
    fn mean_projection_is_exact_in_the_chain_sense() {
        // A pure positive bump has nonzero mean; the projection removes it
        // and the chain's own integral of the projected field is zero, so
        // the third component vanishes at the far face.
        let b = unit_bump(&BoxRegion::cube(0.3, 0.7).unwrap());
        let q0 = BoxRegion::cube(0.25, 0.75).unwrap();
        let cuts = axis_cutoffs(&q0, 2.0, 96).unwrap();
        // Projecting a pure bump makes the removed part as large as the
        // input (coefficient one), the worst case for the face budget.
        let prim = div_primitive(&b, &BoxRegion::unit(), cuts, 64, 96, &SeminormParams::default())
            .unwrap();
        // The chain integral is a diagnostic; at this fiber order it
        // resolves the narrow bump's mass to a few parts in a million.
        assert!((prim.mean_before() - 1.0).abs() <= 1e-5, "unit bump mass {}", prim.mean_before());
        assert!((prim.proj_coef() - 1.0).abs() <= 1e-5);
        // Face values vanish in coefficient arithmetic, not up to
        // interpolation error: roundoff scale only.
        for y in [0.3, 0.5, 0.6] {
            let face = prim.eval(&Vec3::new(0.5, y, q0.hi[2] - 1e-13));
            assert!(face.norm() <= 1e-11, "far-face leak {} at y={y}", face.norm());
        }
    }

    #[test]
    fn unsupported_input_is_rejected() {
        let h = ScalarField::constant(1.0);
        let cuts = axis_cutoffs(&BoxRegion::cube(0.25, 0.75).unwrap(), 2.0, 64).unwrap();
        assert!(matches!(
            div_primitive(&h, &BoxRegion::unit(), cuts, 16, 32, &SeminormParams::default()),
            Err(Error::SupportUnknown)
        ));
    }

    #[test]
    fn escaping_support_is_rejected() {
        let h = ScalarField::constant(0.0).with_support(BoxRegion::unit());
        let cuts = axis_cutoffs(&BoxRegion::cube(0.25, 0.75).unwrap(), 2.0, 64).unwrap();
        assert!(matches!(
            div_primitive(&h, &BoxRegion::unit(), cuts, 16, 32, &SeminormParams::default()),
            Err(Error::SupportViolation { .. })
        ));
    }

    #[test]
    fn flow_of_zero_is_identity() {
        let pj = prescribed_jacobian(
            &ScalarField::constant(0.0).with_support(BoxRegion::cube(0.3, 0.7).unwrap()),
            &BoxRegion::cube(0.25, 0.75).unwrap(),
            &BoxRegion::unit(),
            &quick_cfg(),
        )
        .unwrap();
        assert!(pj.flow.drift <= 1e-14);
        for p in rng_points(&BoxRegion::unit(), 30, 5) {
            assert!((pj.psi.apply(&p) - p).norm() <= 1e-14);
            assert!((pj.flow.det_at(&p) - 1.0).abs() <= 1e-14);
        }
    }

    #[test]
    fn moser_identity_drift_small_and_fourth_order() {
        let h = bump_pair(0.4);
        let q0 = BoxRegion::cube(0.2, 0.8).unwrap();
        let pj = prescribed_jacobian(&h, &q0, &BoxRegion::unit(), &quick_cfg()).unwrap();
        let pts = rng_points(&q0, 120, 6);
        let c64 = pj.flow.certify(&pts, 64);
        let c32 = pj.flow.certify(&pts, 32);
        assert!(c64.endpoint_residual <= 1e-5, "endpoint {}", c64.endpoint_residual);
        let ratio = c32.path_drift / c64.path_drift;
        assert!(ratio >= 12.0, "drift ratio {ratio} ({} -> {})", c32.path_drift, c64.path_drift);
    }

    #[test]
    fn small_amplitude_meets_tight_drift() {
        let h = bump_pair(0.1);
        let q0 = BoxRegion::cube(0.2, 0.8).unwrap();
        let pj = prescribed_jacobian(&h, &q0, &BoxRegion::unit(), &quick_cfg()).unwrap();
        let pts = rng_points(&q0, 60, 7);
        let c = pj.flow.certify(&pts, 64);
        assert!(c.path_drift <= 1e-6, "drift {}", c.path_drift);
    }

    #[test]
    fn determinant_agrees_across_all_three_routes() {
        let h = bump_pair(0.35);
        let q0 = BoxRegion::cube(0.2, 0.8).unwrap();
        let pj = prescribed_jacobian(&h, &q0, &BoxRegion::unit(), &quick_cfg()).unwrap();
        for p in rng_points(&q0, 12, 8) {
            let liouville = pj.flow.det_at(&p);
            let matrix = pj.flow.det_via_matrix(&p, 1e-6);
            let map_fd = pj.flow.det_via_map_fd(&p, 1e-5);
            // The matrix route differences the velocity, so its floor is
            // the evaluation noise over the difference step.
            assert!((liouville - matrix).abs() <= 5e-8, "{liouville} vs {matrix}");
            assert!((liouville - map_fd).abs() <= 1e-5, "{liouville} vs {map_fd}");
        }
    }

    #[test]
    fn flow_identity_outside_support_and_invertible() {
        let h = bump_pair(0.3);
        let q0 = BoxRegion::cube(0.2, 0.8).unwrap();
        let pj = prescribed_jacobian(&h, &q0, &BoxRegion::unit(), &quick_cfg()).unwrap();
        let outside = Vec3::new(0.1, 0.5, 0.9);
        assert_eq!(pj.psi.apply(&outside), outside);
        for p in rng_points(&q0, 6, 9) {
            let y = pj.psi.apply(&p);
            let back = pj.psi.inverse(&y).unwrap();
            assert!((back - p).norm() <= 1e-12, "round trip {}", (back - p).norm());
        }
    }

    #[test]
    fn surrogate_tracks_a_closed_form_map() {
        let k0 = BoxRegion::cube(0.2, 0.8).unwrap();
        // Smooth compactly supported displacement in the first coordinate.
        let blob = move |p: &Vec3| {
            let mut w = 0.03;
            for k in 0..3 {
                let t = (p[k] - 0.2) / 0.6;
                w *= t * t * (1.0 - t) * (1.0 - t) * 16.0;
            }
            w
        };
        let psi = Diffeo::from_parts(
            move |p| Vec3::new(p[0] + blob(p), p[1], p[2]),
            move |p| {
                let mut j = Mat3::identity();
                let e = 1e-7;
                for k in 0..3 {
                    let mut a = *p;
                    let mut b = *p;
                    a[k] += e;
                    b[k] -= e;
                    j[(0, k)] += (blob(&a) - blob(&b)) / (2.0 * e);
                }
                j
            },
            Some(k0),
        );
        let check = rng_points(&k0, 40, 10);
        let (sur, rep) = sample_diffeo(&psi, &k0, [24, 24, 24], &check).unwrap();
        assert!(rep.forward_err <= 1e-9, "forward err {}", rep.forward_err);
        assert!(rep.round_trip <= 1e-10, "round trip {}", rep.round_trip);
        let outside = Vec3::new(0.05, 0.5, 0.5);
        assert_eq!(sur.apply(&outside), outside);
        for p in &check {
            // Spectral Jacobian against the map's own.
            let dj = (sur.jac(p) - psi.jac(p)).abs().max();
            assert!(dj <= 1e-6, "jac mismatch {dj}");
        }
    }
}
