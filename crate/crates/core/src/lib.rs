//! Equilibrium causal models: differentiable structural maps, fixed-point
//! solvers, implicit gradients, and intervention design.

pub mod diffcore;
pub mod fixedpoint;
pub mod linalg;
pub mod sscm;
pub mod deq;
pub mod interventions;
pub mod modelzoo;
pub mod optimize;
