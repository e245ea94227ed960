//! Numerical certification engine for c-projectively (and projectively)
//! compatible metric structures.
//!
//! The crate builds explicit compatible triples `(g, J, A)` in coordinates,
//! evaluates every field as a truncated Taylor jet at sampled points, and
//! certifies the defining identities — compatibility PDEs, Poisson
//! commutation of the Killing-tensor integrals, commutation of the quantized
//! operators, admissible potentials, and separation of variables — as
//! numerical residuals against fixed tolerances.
//!
//! Module map:
//! * [`jet`] — truncated multivariate Taylor arithmetic, the derivative backbone
//! * [`expr`] — the scalar-expression mini-language used in structure specs
//! * [`geom`] — metric/connection/curvature calculus over jets
//! * [`structures`] — explicit compatible structures and their pointwise checks
//! * [`integrals`] — the classical layer: `K(t)`, `V(t)`, `U(t)`, Poisson brackets
//! * [`quantization`] — operators, nested commutators, the B-tensor machinery
//! * [`separation`] — separated ODE/PDE system and eigenfunction reconstruction
//! * [`report`] — suite orchestration, configuration and report emission

pub mod expr;
pub mod fd;
pub mod geom;
pub mod integrals;
pub mod jet;
pub mod quantization;
pub mod report;
pub mod rng;
pub mod separation;
pub mod structures;

pub use jet::{CJet, Jet, JetCtx, JetError, MultiIndex};
