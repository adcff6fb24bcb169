//! SDE catalog and the FlowKac transform.
//!
//! An SDE `dX = mu(X,t) dt + sigma(X,t) dW` is described by the [`Sde`] trait,
//! which exposes drift/diffusion together with the spatial derivatives needed by
//! the sensitivity propagation (first and second order) and the divergence
//! fields of the diffusion matrix `D = sigma sigma^T / 2`.
//!
//! [`FlowKac`] wraps a base SDE into the auxiliary process
//!
//! ```text
//! mu~_i = -mu_i + 2 sum_j dD_ij/dx_j,      sigma~ = sigma,
//! q     = div mu - div (div D),
//! ```
//!
//! whose paths feed the Feynman-Kac estimator with `q` as the discount rate.
//!
//! All catalog entries have polynomial coefficients, so every derivative is
//! supplied in closed form. The generic `div_d*` implementations derived from
//! `sigma` and its derivatives are exact whenever third spatial derivatives of
//! `sigma` vanish; they serve custom test processes, while catalog entries
//! override them with the hand-derived expressions.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by catalog construction and path-wise evaluation.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown model `{0}` (expected one of gbm1d, ou2d, gbm2d, duffing, ou_nd)")]
    UnknownModel(String),
    #[error("model `{model}` is missing required parameter `{key}`")]
    MissingParam { model: &'static str, key: &'static str },
    #[error("model `{model}`: bad parameter `{key}`: {reason}")]
    BadParam { model: &'static str, key: String, reason: String },
    #[error("path and time sequences have different lengths ({path} vs {times})")]
    LengthMismatch { path: usize, times: usize },
}

/// A parameter value from a config file: scalar, vector, or matrix.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum ParamValue {
    Scalar(f64),
    Vector(Vec<f64>),
    Matrix(Vec<Vec<f64>>),
}

/// Named parameter map for a catalog entry.
pub type Params = BTreeMap<String, ParamValue>;

/// Time-dependent Itô SDE with analytic spatial derivatives.
///
/// Buffer layouts (row-major):
/// - `drift`: `d`
/// - `diffusion`: `d x m`, `out[i*m + k] = sigma_ik`
/// - `drift_jac`: `d x d`, `out[i*d + j] = d mu_i / d x_j`
/// - `drift_hess`: `d x d x d`, `out[(i*d + j)*d + k] = d^2 mu_i / dx_j dx_k`
/// - `diffusion_jac`: `d x m x d`, `out[(i*m + k)*d + j] = d sigma_ik / d x_j`
/// - `diffusion_hess`: `d x m x d x d`
pub trait Sde: Send + Sync {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn name(&self) -> &'static str;

    fn drift(&self, x: &[f64], t: f64, out: &mut [f64]);
    fn diffusion(&self, x: &[f64], t: f64, out: &mut [f64]);
    fn drift_jac(&self, x: &[f64], t: f64, out: &mut [f64]);
    fn drift_hess(&self, x: &[f64], t: f64, out: &mut [f64]);
    fn diffusion_jac(&self, x: &[f64], t: f64, out: &mut [f64]);
    fn diffusion_hess(&self, x: &[f64], t: f64, out: &mut [f64]);

    /// Initial density `psi(x)`.
    fn initial_density(&self, x: &[f64]) -> f64;

    /// Draw `n` points from `psi`, row-major `n x d`.
    fn sample_initial(&self, n: usize, rng: &mut dyn rand::RngCore) -> Vec<f64>;

    /// Whether the state space is the positive orthant (GBM-type processes).
    fn positive_support(&self) -> bool {
        false
    }

    /// Whether `q = div mu - div div D` does not depend on `x`.
    fn spatially_constant_q(&self) -> bool {
        false
    }

    /// `v_i = sum_j dD_ij/dx_j` with `D = sigma sigma^T / 2`.
    fn div_d(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let (d, m) = (self.dim(), self.noise_dim());
        let mut sig = vec![0.0; d * m];
        let mut sjac = vec![0.0; d * m * d];
        self.diffusion(x, t, &mut sig);
        self.diffusion_jac(x, t, &mut sjac);
        for v in out.iter_mut() {
            *v = 0.0;
        }
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                for k in 0..m {
                    acc += 0.5
                        * (sjac[(i * m + k) * d + j] * sig[j * m + k]
                            + sig[i * m + k] * sjac[(j * m + k) * d + j]);
                }
            }
            out[i] = acc;
        }
    }

    /// Jacobian of [`Sde::div_d`], `out[i*d + l] = d v_i / d x_l`.
    fn div_d_jac(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let (d, m) = (self.dim(), self.noise_dim());
        let mut sig = vec![0.0; d * m];
        let mut sjac = vec![0.0; d * m * d];
        let mut shess = vec![0.0; d * m * d * d];
        self.diffusion(x, t, &mut sig);
        self.diffusion_jac(x, t, &mut sjac);
        self.diffusion_hess(x, t, &mut shess);
        let dj = |i: usize, k: usize, j: usize| sjac[(i * m + k) * d + j];
        let dh = |i: usize, k: usize, j: usize, l: usize| shess[((i * m + k) * d + j) * d + l];
        for i in 0..d {
            for l in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    for k in 0..m {
                        acc += 0.5
                            * (dh(i, k, j, l) * sig[j * m + k]
                                + dj(i, k, j) * dj(j, k, l)
                                + dj(i, k, l) * dj(j, k, j)
                                + sig[i * m + k] * dh(j, k, j, l));
                    }
                }
                out[i * d + l] = acc;
            }
        }
    }

    /// Hessian of [`Sde::div_d`], `out[(i*d + l)*d + n] = d^2 v_i / dx_l dx_n`.
    ///
    /// Exact when third spatial derivatives of `sigma` vanish (true for every
    /// catalog entry, where `sigma` is constant or linear in `x`).
    fn div_d_hess(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let (d, m) = (self.dim(), self.noise_dim());
        let mut sjac = vec![0.0; d * m * d];
        let mut shess = vec![0.0; d * m * d * d];
        self.diffusion_jac(x, t, &mut sjac);
        self.diffusion_hess(x, t, &mut shess);
        let dj = |i: usize, k: usize, j: usize| sjac[(i * m + k) * d + j];
        let dh = |i: usize, k: usize, j: usize, l: usize| shess[((i * m + k) * d + j) * d + l];
        for i in 0..d {
            for l in 0..d {
                for n in 0..d {
                    let mut acc = 0.0;
                    for j in 0..d {
                        for k in 0..m {
                            acc += 0.5
                                * (dh(i, k, j, l) * dj(j, k, n)
                                    + dh(i, k, j, n) * dj(j, k, l)
                                    + dj(i, k, j) * dh(j, k, l, n)
                                    + dh(i, k, l, n) * dj(j, k, j)
                                    + dj(i, k, l) * dh(j, k, j, n)
                                    + dj(i, k, n) * dh(j, k, j, l));
                        }
                    }
                    out[(i * d + l) * d + n] = acc;
                }
            }
        }
    }

    /// `div mu = sum_i d mu_i / d x_i`.
    fn div_mu(&self, x: &[f64], t: f64) -> f64 {
        let d = self.dim();
        let mut jac = vec![0.0; d * d];
        self.drift_jac(x, t, &mut jac);
        (0..d).map(|i| jac[i * d + i]).sum()
    }

    /// `div (div D) = sum_i d v_i / d x_i`.
    fn div_div_d(&self, x: &[f64], t: f64) -> f64 {
        let d = self.dim();
        let mut jac = vec![0.0; d * d];
        self.div_d_jac(x, t, &mut jac);
        (0..d).map(|i| jac[i * d + i]).sum()
    }
}

fn fill(out: &mut [f64], v: f64) {
    for o in out.iter_mut() {
        *o = v;
    }
}

fn gaussian_sample(mean: &[f64], std: &[f64], n: usize, rng: &mut dyn rand::RngCore) -> Vec<f64> {
    let d = mean.len();
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            out[i * d + j] = mean[j] + std[j] * z;
        }
    }
    out
}

fn iso_gaussian_density(x: &[f64], mean: &[f64], var: f64) -> f64 {
    let d = x.len() as f64;
    let q: f64 = x
        .iter()
        .zip(mean)
        .map(|(xi, mi)| (xi - mi) * (xi - mi))
        .sum();
    (-0.5 * q / var).exp() / (2.0 * std::f64::consts::PI * var).powf(0.5 * d)
}

// ---------------------------------------------------------------------------
// Catalog entries
// ---------------------------------------------------------------------------

/// 1d geometric Brownian motion `dX = mu X dt + sigma X dW`, lognormal psi.
#[derive(Debug, Clone)]
pub struct Gbm1d {
    pub mu: f64,
    pub sigma: f64,
}

impl Sde for Gbm1d {
    fn dim(&self) -> usize {
        1
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn name(&self) -> &'static str {
        "gbm1d"
    }
    fn drift(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = self.mu * x[0];
    }
    fn diffusion(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = self.sigma * x[0];
    }
    fn drift_jac(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = self.mu;
    }
    fn drift_hess(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn diffusion_jac(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = self.sigma;
    }
    fn diffusion_hess(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn div_d(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = self.sigma * self.sigma * x[0];
    }
    fn div_d_jac(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = self.sigma * self.sigma;
    }
    fn div_d_hess(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn initial_density(&self, x: &[f64]) -> f64 {
        if x[0] <= 0.0 {
            return 0.0;
        }
        let s2 = self.sigma * self.sigma;
        let lx = x[0].ln();
        (-0.5 * lx * lx / s2).exp() / (x[0] * (2.0 * std::f64::consts::PI * s2).sqrt())
    }
    fn sample_initial(&self, n: usize, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                (self.sigma * z).exp()
            })
            .collect()
    }
    fn positive_support(&self) -> bool {
        true
    }
    fn spatially_constant_q(&self) -> bool {
        true
    }
}

/// 2d Ornstein-Uhlenbeck `dX = A X dt + Sigma dW`, Gaussian psi.
#[derive(Debug, Clone)]
pub struct Ou2d {
    pub a: [[f64; 2]; 2],
    pub sigma: [[f64; 2]; 2],
    pub mean0: [f64; 2],
    pub var0: f64,
}

impl Ou2d {
    pub fn paper_defaults(a: [[f64; 2]; 2], sigma: [[f64; 2]; 2]) -> Self {
        Ou2d { a, sigma, mean0: [1.0, 1.0], var0: 1.0 / 9.0 }
    }
}

impl Sde for Ou2d {
    fn dim(&self) -> usize {
        2
    }
    fn noise_dim(&self) -> usize {
        2
    }
    fn name(&self) -> &'static str {
        "ou2d"
    }
    fn drift(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = self.a[0][0] * x[0] + self.a[0][1] * x[1];
        out[1] = self.a[1][0] * x[0] + self.a[1][1] * x[1];
    }
    fn diffusion(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = self.sigma[0][0];
        out[1] = self.sigma[0][1];
        out[2] = self.sigma[1][0];
        out[3] = self.sigma[1][1];
    }
    fn drift_jac(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = self.a[0][0];
        out[1] = self.a[0][1];
        out[2] = self.a[1][0];
        out[3] = self.a[1][1];
    }
    fn drift_hess(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
    }
    fn diffusion_jac(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
    }
    fn diffusion_hess(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
    }
    fn div_d(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
    }
    fn div_d_jac(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
    }
    fn div_d_hess(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
    }
    fn initial_density(&self, x: &[f64]) -> f64 {
        iso_gaussian_density(x, &self.mean0, self.var0)
    }
    fn sample_initial(&self, n: usize, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let s = self.var0.sqrt();
        gaussian_sample(&self.mean0, &[s, s], n, rng)
    }
    fn spatially_constant_q(&self) -> bool {
        true
    }
}

/// 2d GBM `dX = (A + B^2/2) X dt + B X dW` with diagonal `A`, `B` and a single
/// scalar Brownian motion driving both components.
#[derive(Debug, Clone)]
pub struct Gbm2d {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub mu0: [f64; 2],
    /// Diagonal of the log-space initial covariance.
    pub s0: [f64; 2],
}

impl Sde for Gbm2d {
    fn dim(&self) -> usize {
        2
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn name(&self) -> &'static str {
        "gbm2d"
    }
    fn drift(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = (self.a[0] + 0.5 * self.b[0] * self.b[0]) * x[0];
        out[1] = (self.a[1] + 0.5 * self.b[1] * self.b[1]) * x[1];
    }
    fn diffusion(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = self.b[0] * x[0];
        out[1] = self.b[1] * x[1];
    }
    fn drift_jac(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = self.a[0] + 0.5 * self.b[0] * self.b[0];
        out[1] = 0.0;
        out[2] = 0.0;
        out[3] = self.a[1] + 0.5 * self.b[1] * self.b[1];
    }
    fn drift_hess(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
    }
    fn diffusion_jac(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        // out[(i*1 + 0)*2 + j] = d sigma_i0 / d x_j = b_i delta_ij
        out[0] = self.b[0];
        out[1] = 0.0;
        out[2] = 0.0;
        out[3] = self.b[1];
    }
    fn diffusion_hess(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
    }
    fn div_d(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        let (b1, b2) = (self.b[0], self.b[1]);
        out[0] = (b1 * b1 + 0.5 * b1 * b2) * x[0];
        out[1] = (b2 * b2 + 0.5 * b1 * b2) * x[1];
    }
    fn div_d_jac(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        let (b1, b2) = (self.b[0], self.b[1]);
        out[0] = b1 * b1 + 0.5 * b1 * b2;
        out[1] = 0.0;
        out[2] = 0.0;
        out[3] = b2 * b2 + 0.5 * b1 * b2;
    }
    fn div_d_hess(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
    }
    fn initial_density(&self, x: &[f64]) -> f64 {
        if x[0] <= 0.0 || x[1] <= 0.0 {
            return 0.0;
        }
        let mut q = 0.0;
        for i in 0..2 {
            let z = x[i].ln() - self.mu0[i];
            q += z * z / self.s0[i];
        }
        (-0.5 * q).exp()
            / (x[0] * x[1] * 2.0 * std::f64::consts::PI * (self.s0[0] * self.s0[1]).sqrt())
    }
    fn sample_initial(&self, n: usize, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let mut out = vec![0.0; 2 * n];
        for i in 0..n {
            for j in 0..2 {
                let z: f64 = rng.sample(StandardNormal);
                out[i * 2 + j] = (self.mu0[j] + self.s0[j].sqrt() * z).exp();
            }
        }
        out
    }
    fn positive_support(&self) -> bool {
        true
    }
    fn spatially_constant_q(&self) -> bool {
        true
    }
}

/// 2d Duffing oscillator with damping `0.4 omega` and cubic stiffness.
#[derive(Debug, Clone)]
pub struct Duffing {
    pub omega: f64,
}

impl Sde for Duffing {
    fn dim(&self) -> usize {
        2
    }
    fn noise_dim(&self) -> usize {
        2
    }
    fn name(&self) -> &'static str {
        "duffing"
    }
    fn drift(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        let w = self.omega;
        out[0] = x[1];
        out[1] = -0.4 * w * x[1] + w * w * x[0] - 0.1 * w * w * x[0] * x[0] * x[0];
    }
    fn diffusion(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 0.0;
        out[2] = 0.0;
        out[3] = 0.8f64.sqrt();
    }
    fn drift_jac(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        let w = self.omega;
        out[0] = 0.0;
        out[1] = 1.0;
        out[2] = w * w - 0.3 * w * w * x[0] * x[0];
        out[3] = -0.4 * w;
    }
    fn drift_hess(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
        // d^2 mu_2 / dx_1^2
        out[(1 * 2 + 0) * 2 + 0] = -0.6 * self.omega * self.omega * x[0];
    }
    fn diffusion_jac(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
    }
    fn diffusion_hess(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
    }
    fn div_d(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
    }
    fn div_d_jac(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
    }
    fn div_d_hess(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
    }
    fn initial_density(&self, x: &[f64]) -> f64 {
        iso_gaussian_density(x, &[0.0, 8.0], 0.5)
    }
    fn sample_initial(&self, n: usize, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let s = 0.5f64.sqrt();
        gaussian_sample(&[0.0, 8.0], &[s, s], n, rng)
    }
    fn spatially_constant_q(&self) -> bool {
        true
    }
}

/// Isotropic d-dimensional OU `dX = a X dt + sigma dW`, psi = N(1, I/4).
#[derive(Debug, Clone)]
pub struct OuNd {
    pub dim: usize,
    pub a: f64,
    pub sigma: f64,
}

impl Sde for OuNd {
    fn dim(&self) -> usize {
        self.dim
    }
    fn noise_dim(&self) -> usize {
        self.dim
    }
    fn name(&self) -> &'static str {
        "ou_nd"
    }
    fn drift(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        for i in 0..self.dim {
            out[i] = self.a * x[i];
        }
    }
    fn diffusion(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
        for i in 0..self.dim {
            out[i * self.dim + i] = self.sigma;
        }
    }
    fn drift_jac(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
        for i in 0..self.dim {
            out[i * self.dim + i] = self.a;
        }
    }
    fn drift_hess(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
    }
    fn diffusion_jac(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
    }
    fn diffusion_hess(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
    }
    fn div_d(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
    }
    fn div_d_jac(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
    }
    fn div_d_hess(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
    }
    fn initial_density(&self, x: &[f64]) -> f64 {
        let ones = vec![1.0; self.dim];
        iso_gaussian_density(x, &ones, 0.25)
    }
    fn sample_initial(&self, n: usize, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let ones = vec![1.0; self.dim];
        let half = vec![0.5; self.dim];
        gaussian_sample(&ones, &half, n, rng)
    }
    fn spatially_constant_q(&self) -> bool {
        true
    }
}

/// Constant-coefficient SDE `dX = c dt + Sigma dW`, standard-normal psi.
///
/// Mostly useful as a degenerate test process: the stochastic flow is
/// `x + c t + Sigma W_t`, so its Jacobian is the identity and its Hessian
/// vanishes.
#[derive(Debug, Clone)]
pub struct ConstantSde {
    pub dim: usize,
    pub noise_dim: usize,
    pub drift: Vec<f64>,
    /// Row-major `d x m`.
    pub diffusion: Vec<f64>,
}

impl Sde for ConstantSde {
    fn dim(&self) -> usize {
        self.dim
    }
    fn noise_dim(&self) -> usize {
        self.noise_dim
    }
    fn name(&self) -> &'static str {
        "constant"
    }
    fn drift(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.drift);
    }
    fn diffusion(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.diffusion);
    }
    fn drift_jac(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
    }
    fn drift_hess(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
    }
    fn diffusion_jac(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
    }
    fn diffusion_hess(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        fill(out, 0.0);
    }
    fn initial_density(&self, x: &[f64]) -> f64 {
        let zeros = vec![0.0; self.dim];
        iso_gaussian_density(x, &zeros, 1.0)
    }
    fn sample_initial(&self, n: usize, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let zeros = vec![0.0; self.dim];
        let ones = vec![1.0; self.dim];
        gaussian_sample(&zeros, &ones, n, rng)
    }
    fn spatially_constant_q(&self) -> bool {
        true
    }
}

// ---------------------------------------------------------------------------
// Catalog construction
// ---------------------------------------------------------------------------

/// One of the five shipped SDEs.
#[derive(Debug, Clone)]
pub enum CatalogSde {
    Gbm1d(Gbm1d),
    Ou2d(Ou2d),
    Gbm2d(Gbm2d),
    Duffing(Duffing),
    OuNd(OuNd),
}

macro_rules! delegate {
    ($self:ident, $inner:ident, $body:expr) => {
        match $self {
            CatalogSde::Gbm1d($inner) => $body,
            CatalogSde::Ou2d($inner) => $body,
            CatalogSde::Gbm2d($inner) => $body,
            CatalogSde::Duffing($inner) => $body,
            CatalogSde::OuNd($inner) => $body,
        }
    };
}

impl Sde for CatalogSde {
    fn dim(&self) -> usize {
        delegate!(self, s, s.dim())
    }
    fn noise_dim(&self) -> usize {
        delegate!(self, s, s.noise_dim())
    }
    fn name(&self) -> &'static str {
        delegate!(self, s, s.name())
    }
    fn drift(&self, x: &[f64], t: f64, out: &mut [f64]) {
        delegate!(self, s, s.drift(x, t, out))
    }
    fn diffusion(&self, x: &[f64], t: f64, out: &mut [f64]) {
        delegate!(self, s, s.diffusion(x, t, out))
    }
    fn drift_jac(&self, x: &[f64], t: f64, out: &mut [f64]) {
        delegate!(self, s, s.drift_jac(x, t, out))
    }
    fn drift_hess(&self, x: &[f64], t: f64, out: &mut [f64]) {
        delegate!(self, s, s.drift_hess(x, t, out))
    }
    fn diffusion_jac(&self, x: &[f64], t: f64, out: &mut [f64]) {
        delegate!(self, s, s.diffusion_jac(x, t, out))
    }
    fn diffusion_hess(&self, x: &[f64], t: f64, out: &mut [f64]) {
        delegate!(self, s, s.diffusion_hess(x, t, out))
    }
    fn div_d(&self, x: &[f64], t: f64, out: &mut [f64]) {
        delegate!(self, s, s.div_d(x, t, out))
    }
    fn div_d_jac(&self, x: &[f64], t: f64, out: &mut [f64]) {
        delegate!(self, s, s.div_d_jac(x, t, out))
    }
    fn div_d_hess(&self, x: &[f64], t: f64, out: &mut [f64]) {
        delegate!(self, s, s.div_d_hess(x, t, out))
    }
    fn initial_density(&self, x: &[f64]) -> f64 {
        delegate!(self, s, s.initial_density(x))
    }
    fn sample_initial(&self, n: usize, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        delegate!(self, s, s.sample_initial(n, rng))
    }
    fn positive_support(&self) -> bool {
        delegate!(self, s, s.positive_support())
    }
    fn spatially_constant_q(&self) -> bool {
        delegate!(self, s, s.spatially_constant_q())
    }
}

/// Parameter keys accepted by a catalog entry, used for config validation.
pub fn allowed_keys(name: &str) -> Option<&'static [&'static str]> {
    match name {
        "gbm1d" => Some(&["mu", "sigma"]),
        "ou2d" => Some(&["A", "Sigma"]),
        "gbm2d" => Some(&["a", "b", "mu0", "s0"]),
        "duffing" => Some(&["omega"]),
        "ou_nd" => Some(&["a", "sigma", "d"]),
        _ => None,
    }
}

fn get_scalar(params: &Params, model: &'static str, key: &str, default: Option<f64>) -> Result<f64, ModelError> {
    match params.get(key) {
        Some(ParamValue::Scalar(v)) => Ok(*v),
        Some(other) => Err(ModelError::BadParam {
            model,
            key: key.to_string(),
            reason: format!("expected a scalar, got {other:?}"),
        }),
        None => default.ok_or(ModelError::MissingParam {
            model,
            key: match key {
                "d" => "d",
                "omega" => "omega",
                "a" => "a",
                "sigma" => "sigma",
                "mu" => "mu",
                _ => "parameter",
            },
        }),
    }
}

fn get_mat2(
    params: &Params,
    model: &'static str,
    key: &str,
    default: [[f64; 2]; 2],
) -> Result<[[f64; 2]; 2], ModelError> {
    match params.get(key) {
        Some(ParamValue::Matrix(m)) if m.len() == 2 && m.iter().all(|r| r.len() == 2) => {
            Ok([[m[0][0], m[0][1]], [m[1][0], m[1][1]]])
        }
        Some(other) => Err(ModelError::BadParam {
            model,
            key: key.to_string(),
            reason: format!("expected a 2x2 matrix, got {other:?}"),
        }),
        None => Ok(default),
    }
}

fn get_vec2(
    params: &Params,
    model: &'static str,
    key: &str,
    default: [f64; 2],
) -> Result<[f64; 2], ModelError> {
    match params.get(key) {
        Some(ParamValue::Vector(v)) if v.len() == 2 => Ok([v[0], v[1]]),
        Some(other) => Err(ModelError::BadParam {
            model,
            key: key.to_string(),
            reason: format!("expected a length-2 vector, got {other:?}"),
        }),
        None => Ok(default),
    }
}

/// Build a catalog SDE from its name and parameter map.
///
/// Parameters omitted from the map fall back to the values used in the source
/// experiments; `ou_nd` has no sensible default dimension, so `d` is required.
/// Unknown keys are rejected.
pub fn catalog(name: &str, params: &Params) -> Result<CatalogSde, ModelError> {
    let allowed = allowed_keys(name).ok_or_else(|| ModelError::UnknownModel(name.to_string()))?;
    let model: &'static str = match name {
        "gbm1d" => "gbm1d",
        "ou2d" => "ou2d",
        "gbm2d" => "gbm2d",
        "duffing" => "duffing",
        _ => "ou_nd",
    };
    for key in params.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(ModelError::BadParam {
                model,
                key: key.clone(),
                reason: format!("unknown parameter (allowed: {allowed:?})"),
            });
        }
    }
    match name {
        "gbm1d" => Ok(CatalogSde::Gbm1d(Gbm1d {
            mu: get_scalar(params, model, "mu", Some(0.25))?,
            sigma: get_scalar(params, model, "sigma", Some(0.5))?,
        })),
        "ou2d" => {
            let a = get_mat2(params, model, "A", [[0.1, 1.0], [-1.0, -0.1]])?;
            let sigma = get_mat2(params, model, "Sigma", [[0.6, 0.0], [0.0, 0.0]])?;
            Ok(CatalogSde::Ou2d(Ou2d::paper_defaults(a, sigma)))
        }
        "gbm2d" => Ok(CatalogSde::Gbm2d(Gbm2d {
            a: get_vec2(params, model, "a", [-1.0, -2.0])?,
            b: get_vec2(params, model, "b", [0.5, 1.0])?,
            mu0: get_vec2(params, model, "mu0", [0.5, 0.7])?,
            s0: get_vec2(params, model, "s0", [0.5, 0.5])?,
        })),
        "duffing" => Ok(CatalogSde::Duffing(Duffing {
            omega: get_scalar(params, model, "omega", Some(1.0))?,
        })),
        "ou_nd" => {
            let d = get_scalar(params, model, "d", None)?;
            if d < 1.0 || d.fract() != 0.0 {
                return Err(ModelError::BadParam {
                    model,
                    key: "d".to_string(),
                    reason: format!("dimension must be a positive integer, got {d}"),
                });
            }
            Ok(CatalogSde::OuNd(OuNd {
                dim: d as usize,
                a: get_scalar(params, model, "a", Some(-0.5))?,
                sigma: get_scalar(params, model, "sigma", Some(0.4))?,
            }))
        }
        _ => unreachable!(),
    }
}

// ---------------------------------------------------------------------------
// FlowKac transform
// ---------------------------------------------------------------------------

/// The auxiliary process of the Feynman-Kac reformulation: drift
/// `-mu + 2 div D`, unchanged diffusion, and potential `q = div mu - div div D`.
#[derive(Debug, Clone)]
pub struct FlowKac<S> {
    base: S,
}

/// Total over any valid [`Sde`]; `sigma` is passed through untouched.
pub fn flowkac_transform<S: Sde>(sde: S) -> FlowKac<S> {
    FlowKac { base: sde }
}

impl<S: Sde> FlowKac<S> {
    pub fn base(&self) -> &S {
        &self.base
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn noise_dim(&self) -> usize {
        self.base.noise_dim()
    }

    /// `mu~_i = -mu_i + 2 v_i` with `v = div D`.
    pub fn drift_tilde(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let d = self.base.dim();
        let mut v = vec![0.0; d];
        self.base.drift(x, t, out);
        self.base.div_d(x, t, &mut v);
        for i in 0..d {
            out[i] = -out[i] + 2.0 * v[i];
        }
    }

    /// Jacobian of `mu~`, same layout as [`Sde::drift_jac`].
    pub fn drift_tilde_jac(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let d = self.base.dim();
        let mut v = vec![0.0; d * d];
        self.base.drift_jac(x, t, out);
        self.base.div_d_jac(x, t, &mut v);
        for i in 0..d * d {
            out[i] = -out[i] + 2.0 * v[i];
        }
    }

    /// Hessian of `mu~`, same layout as [`Sde::drift_hess`].
    pub fn drift_tilde_hess(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let d = self.base.dim();
        let mut v = vec![0.0; d * d * d];
        self.base.drift_hess(x, t, out);
        self.base.div_d_hess(x, t, &mut v);
        for i in 0..d * d * d {
            out[i] = -out[i] + 2.0 * v[i];
        }
    }

    /// Diffusion of the auxiliary process (`sigma~ = sigma`).
    pub fn diffusion(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.base.diffusion(x, t, out);
    }

    pub fn diffusion_jac(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.base.diffusion_jac(x, t, out);
    }

    pub fn diffusion_hess(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.base.diffusion_hess(x, t, out);
    }

    /// The effective potential `q(x,t)`.
    pub fn potential(&self, x: &[f64], t: f64) -> f64 {
        self.base.div_mu(x, t) - self.base.div_div_d(x, t)
    }

    /// `Some(q)` when the potential is spatially constant, letting the
    /// Feynman-Kac discount be computed as `exp(-q t)` with no quadrature.
    pub fn constant_potential(&self, t: f64) -> Option<f64> {
        if self.base.spatially_constant_q() {
            let probe = vec![1.0; self.base.dim()];
            Some(self.potential(&probe, t))
        } else {
            None
        }
    }

    pub fn initial_density(&self, x: &[f64]) -> f64 {
        self.base.initial_density(x)
    }

    pub fn positive_support(&self) -> bool {
        self.base.positive_support()
    }
}

/// Evaluate `q` at each `(path_k, t_k)`; `path` is row-major `n x d`.
pub fn evaluate_q_along_path<S: Sde>(
    fk: &FlowKac<S>,
    path: &[f64],
    times: &[f64],
) -> Result<Vec<f64>, ModelError> {
    let d = fk.dim();
    let n = path.len() / d;
    if n != times.len() || path.len() != n * d {
        return Err(ModelError::LengthMismatch { path: n, times: times.len() });
    }
    Ok(times
        .iter()
        .enumerate()
        .map(|(k, &t)| fk.potential(&path[k * d..(k + 1) * d], t))
        .collect())
}
