use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes across the construction and certification pipeline.
///
/// Every variant carries the offending quantity so callers can report a
/// concrete number instead of a bare failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("box is degenerate: lo {lo:?} must be strictly below hi {hi:?} on every axis")]
    DegenerateBox { lo: [f64; 3], hi: [f64; 3] },

    #[error("matrix is not symmetric positive definite (smallest eigenvalue {min_eig:.6e})")]
    NotSpd { min_eig: f64 },

    #[error("dimension n = {n} unsupported: the conductivity-metric dictionary needs n >= 3")]
    UnsupportedDimension { n: usize },

    #[error("determinant {det:.6e} too close to zero for a power {power:.4}")]
    DegenerateDeterminant { det: f64, power: f64 },

    #[error("map degenerate or orientation-reversing at a sample: det = {det:.6e}")]
    OrientationFault { det: f64 },

    #[error(
        "Newton inversion failed at ({x:.6}, {y:.6}, {z:.6}): residual {residual:.3e} after {iters} iterations"
    )]
    InversionFailure { x: f64, y: f64, z: f64, residual: f64, iters: usize },

    #[error("ellipticity claim ({claimed_lo:.4e}, {claimed_hi:.4e}) violated: observed {observed:.4e}")]
    EllipticityViolation { claimed_lo: f64, claimed_hi: f64, observed: f64 },

    #[error("Gevrey order sigma = {sigma} out of range: {need}")]
    SigmaOutOfRange { sigma: f64, need: &'static str },

    #[error("Gevrey radius tau = {tau} must be positive")]
    TauOutOfRange { tau: f64 },

    #[error("radius order violated: need 0 < tau' < tau, got tau' = {tau_prime}, tau = {tau}")]
    RadiusOrder { tau: f64, tau_prime: f64 },

    #[error("interval ({a}, {b}) is empty")]
    EmptyInterval { a: f64, b: f64 },

    #[error("support box {inner:?} must lie strictly inside {outer:?}")]
    SupportViolation { inner: [[f64; 3]; 2], outer: [[f64; 3]; 2] },

    #[error("field must declare a compact support box for this operation")]
    SupportUnknown,

    #[error("mean constraint violated: integral {integral:.6e} exceeds tolerance {tol:.1e}")]
    MeanConstraint { integral: f64, tol: f64 },

    #[error("density amplitude sup|h| = {sup:.6} exceeds 1/2; flow density could degenerate")]
    AmplitudeTooLarge { sup: f64 },

    #[error("flow density reached {min:.6e} <= 0; transport ill-posed")]
    DensityPositivity { min: f64 },

    #[error("time step budget too small: {steps} steps, need at least {min}")]
    StepBudget { steps: usize, min: usize },

    #[error("frequency target q = {q} coincides with 2*lambda0 = {two_lambda0}; exponent undefined")]
    AlphaUndefined { q: f64, two_lambda0: f64 },

    #[error("conformal exponent alpha = {alpha:.6} forbidden: {need}")]
    ForbiddenExponent { alpha: f64, need: &'static str },

    #[error("energy target q = {q:.4} not above the attainable floor q0 = {q0:.4}")]
    EnergyTargetTooLow { q: f64, q0: f64 },

    #[error("moment matrix singular (det = {det:.3e}) and fallback basis failed")]
    MomentBasis { det: f64 },

    #[error("oscillation budget exhausted: energy {energy:.3} still below {target:.3} at N = {n_max}")]
    OscillationBudget { energy: f64, target: f64, n_max: u32 },

    #[error("energy path does not bracket the target: E(0) = {e_low:.4}, E(1) = {e_high:.4}, q = {q:.4}")]
    PathDegeneracy { e_low: f64, e_high: f64, q: f64 },

    #[error("conformal base 1 + eps*u reaches {min:.6e}; needs a positive floor")]
    ConformalPositivity { min: f64 },

    #[error("frequency ratio degenerate: numerator {numerator:.6e}, denominator {denominator:.6e}")]
    FrequencySign { numerator: f64, denominator: f64 },

    #[error("potential has no usable submersion direction: max sampled slope {max_slope:.3e}")]
    NoSubmersionDirection { max_slope: f64 },

    #[error("coordinate chart violated: target value {value:.6} outside range ({lo:.6}, {hi:.6})")]
    CoordinateChart { value: f64, lo: f64, hi: f64 },

    #[error("mesh too coarse: m = {m} nodes per axis, need at least {min}")]
    MeshTooCoarse { m: usize, min: usize },

    #[error("assembled operator not positive definite: {detail}")]
    Indefinite { detail: String },

    #[error("linear solver failed: {detail}")]
    SolverFailure { detail: String },

    #[error("eigenvalue iteration failed to settle: relative change {rel_change:.3e} after {iters} iterations")]
    EigenFailure { rel_change: f64, iters: usize },

    #[error("meshes do not match: {a} vs {b} nodes per axis")]
    MeshMismatch { a: usize, b: usize },

    #[error("config error at line {line}: {detail}")]
    Config { line: usize, detail: String },

    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },

    #[error("output `{path}` already exists; pass --force to overwrite")]
    OutputExists { path: String },

    #[error("field expression invalid: {detail}")]
    Expr { detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
