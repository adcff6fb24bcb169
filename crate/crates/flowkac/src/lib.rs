//! Mesh-free solver for time-dependent Fokker-Planck equations.
//!
//! The density `p(x,t)` of an Itô diffusion `dX = mu dt + sigma dW` is learned by
//! regressing a temporal normalizing flow onto Feynman-Kac targets
//!
//! ```text
//! p_fk(x,t) = E[ exp(-int_0^t q(X~_s, s) ds) * psi(X~_t) | X~_0 = x ]
//! ```
//!
//! where `X~` is the auxiliary process with drift `-mu + 2 div D` and unchanged
//! diffusion, and `q = div mu - div div D`. Targets are estimated by Monte-Carlo
//! over Euler-Maruyama paths; a Taylor expansion of the stochastic flow around a
//! reference point lets one path bundle serve every training point.
//!
//! Modules:
//! - [`models`]: SDE catalog, analytic derivatives, FlowKac transform.
//! - [`paths`]: fixed-seed Brownian bundles and Euler-Maruyama integration.
//! - [`sensitivity`]: path-wise Jacobian/Hessian propagation and Taylor reconstruction.
//! - [`feynman_kac`]: the Monte-Carlo target estimator.
//! - [`tnf`]: the temporal normalizing flow (actnorm, affine coupling, CDF layer).
//! - [`training`]: naive / sampling-trick / dynamic-reference training loops, Adam,
//!   adaptive resampling, and an MLP regression baseline.
//! - [`reference`]: closed-form densities and an ADI finite-difference solver.
//! - [`metrics`]: relative L2 and KL divergence in grid and sample form.
//! - [`cli`]: config parsing and the `flowkac` subcommands.

pub mod cli;
pub mod feynman_kac;
pub mod metrics;
pub mod models;
pub mod paths;
pub mod reference;
pub mod sensitivity;
pub mod tnf;
pub mod training;
