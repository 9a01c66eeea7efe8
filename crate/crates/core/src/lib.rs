//! Polynomial feedback synthesis for control systems of the form
//! `ẏ = Ay − N(y,y) + Bu` with cost `½∫‖y‖² + (α/2)∫‖u‖²`.
//!
//! The value function is expanded as `V_d(y) = Σ_{k=2}^d T_k(y,…,y)/k!`.
//! `T₂` solves the algebraic Riccati equation; every higher `T_k` solves a
//! generalized Lyapunov equation in the LQR closed-loop matrix whose
//! right-hand side depends only on lower orders. The resulting feedback
//! `u_d = −(1/α)BᵀDV_d` is then checked against exact algebraic identities,
//! closed-loop simulation and a direct open-loop optimizer.

pub mod archive;
pub mod cli;
pub mod error;
pub mod feedback;
pub mod genlyap;
pub mod lbfgs;
pub mod model;
pub mod oracle;
pub mod quadrature;
pub mod riccati;
pub mod sim;
pub mod symtensor;

pub use error::{Error, Result};
pub use feedback::ValueExpansion;
pub use genlyap::{synthesize, Synthesis};
pub use model::{make_burgers, make_scalar, BurgersConfig, QuadraticControlSystem};
pub use riccati::{solve_are, RiccatiSolution};
pub use symtensor::{GeneralTensor, SymTensor};
