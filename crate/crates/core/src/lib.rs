//! Finite symbolic models for incrementally stable digital control systems.
//!
//! A control system `x' = f(x, u)` sampled with period `tau` under
//! piecewise-constant inputs is abstracted into a finite transition system
//! on a state lattice `[X]_eta` with labels on an input lattice `[U]_mu`.
//! When the stability certificate satisfies the precision condition, the
//! two are `eps`-approximately bisimilar, so controllers synthesized on the
//! finite model can be refined to the concrete system.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod abstraction;
pub mod expr;
pub mod integrate;
pub mod json;
pub mod lattice;
pub mod synth;
pub mod sysmodel;
pub mod ts;

pub use abstraction::{build, verify_relation_empirical, AbstractionError, BuildOptions, VerifyOptions, VerifyReport};
pub use expr::{ExprError, Expression};
pub use integrate::{flow, flow_sampled, IntegrateError};
pub use lattice::{lattice_points, AbstractionParams, LatticeGrid, ParamError, Rect};
pub use synth::{solve_reach, synth_sequence, Plan, SequenceSpec, SynthError};
pub use sysmodel::{ControlSystem, KinfGain, KlGain, ModelError, StabilityCertificate};
pub use ts::{greatest_bisim, greatest_sim, ApproxRelation, TransitionSystem, TsError};
