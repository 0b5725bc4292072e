//! Construction and numerical certification of boundary-indistinguishable
//! elliptic coefficients on the unit cube.
//!
//! Two constructions are implemented. The first produces pairs of anisotropic
//! conductivities whose Dirichlet-to-Neumann maps agree at a fixed nonzero
//! spectral parameter: a conformal factor built from a moment-normalized test
//! function is traded against a volume-preserving diffeomorphism obtained by
//! prescribing a Jacobian determinant. The second produces pairs of Riemannian
//! metrics sharing a fixed nonconstant potential, where the compensating
//! diffeomorphism is read off from the potential itself used as a coordinate.
//!
//! Every construction step carries a numerical certificate (moment residuals,
//! Jacobian drift, compatibility residuals, determinant invariants), and the
//! `dnmap` module closes the loop by assembling discrete Dirichlet-to-Neumann
//! matrices on structured hexahedral meshes and measuring their distance under
//! refinement.

pub mod cheb;
pub mod error;
pub mod field;
pub mod fixedfreq;
pub mod fixedpot;
pub mod geom;
pub mod gevrey;
pub mod jacobian;
pub mod par;
pub mod quad;
pub mod tensor;

pub use error::{Error, Result};
pub use field::{Diffeo, MatrixField, ScalarField};
pub use geom::{BoxRegion, Mat3, Vec3};
