//! Multi-agent motion planning as a dynamic potential game.
//!
//! Agents compute an ε-Nash equilibrium of a game whose costs penalize overlap of
//! ellipsoidal forward reachable sets, then execute the plan under bounded
//! disturbances with LQR feedback. The [`harness`] module wraps everything into
//! seeded Monte Carlo experiments.

pub mod costs;
pub mod dynamics;
pub mod ellipsoid;
pub mod error;
pub mod game;
pub mod harness;
pub mod linalg;
pub mod lqr;
pub mod optimizer;
pub mod reachability;

pub use error::{Error, Result};
