//! Periodic ISS backstepping for generalized triangular form systems.
//!
//! The crate builds T-periodic feedback laws for cascades
//! `ẋ_i = f_i(t, x_1..x_{i+1}) + δ_i Φ_i(t, x_1..x_i)` and checks the closed
//! loop numerically: dissipation inequalities on grids, stability envelopes
//! and asymptotic gains on simulated ensembles, and the winding-number
//! argument that rules out continuous static stabilizers for some plants.

pub mod backstepping;
pub mod certification;
pub mod cli;
pub mod comparison;
pub mod config;
pub mod cover;
pub mod expr;
pub mod extended;
pub mod numerics;
pub mod obstruction;
pub mod simulation;
pub mod system;

pub use backstepping::{FeedbackLaw, LocalFeedback};
pub use comparison::{ComparisonFunction, KlFunction};
pub use cover::AnnulusCover;
pub use expr::{parse_dynamics, Expr};
pub use extended::ExtendedSubsystem;
pub use system::{DisturbanceSignal, GtfSystem};
