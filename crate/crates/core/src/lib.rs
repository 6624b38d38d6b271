//! Kinetic transport model for mesenchymal cell motion through a fibre
//! network.
//!
//! Cells are described by a velocity distribution `p(x, t, v)` and the tissue
//! by a fibre-orientation measure `q(x, t, θ)` on the circle. The crate
//! provides:
//!
//! * [`measures`]: measure algebra on the circle and the velocity annulus and
//!   the model operators (mass, lifting, mean projection `Λ`, alignment `B`,
//!   turning operator).
//! * [`kinetic`]: a split-step solver for the coupled system on a periodic
//!   grid, including the parabolically scaled variant.
//! * [`characteristics`]: closed-form evaluation along characteristics for a
//!   prescribed fibre field.
//! * [`steady`]: constructors and verifiers for homogeneous, aligned, patchy
//!   and network steady states.
//! * [`limit`]: the diffusion tensor, an anisotropic diffusion solver and the
//!   ε-convergence experiment.
//!
//! Bulk grid updates run on rayon when the `parallel` feature is enabled
//! (default); see [`exec::Exec`].

pub mod characteristics;
pub mod exec;
pub mod kinetic;
pub mod limit;
pub mod measures;
pub mod steady;

pub use exec::Exec;
pub use measures::{DirectionMeasure, SpeedMeasure, VelocityMeasure};
