//! Fixed-realization Brownian increments and Euler-Maruyama integration of the
//! FlowKac process.
//!
//! The sampling trick of the training loop differentiates the *discrete* flow
//! map, so everything here runs on a fixed uniform grid: query times are
//! snapped to grid nodes at construction, and the same [`BrownianBundle`] is
//! shared across every training point of an epoch ("fix realization omega").
//!
//! Increments are drawn from per-path ChaCha streams, which makes a bundle
//! reproducible from `(seed, shape)` alone and lets path `w` keep its noise
//! when `n_paths` grows (seed-extended refinement). Bundles above a 2 GiB
//! budget are not materialized; their increments are regenerated per path.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::models::{FlowKac, Sde};

/// In-memory budget for increment storage before switching to regeneration.
const STORAGE_BUDGET_BYTES: usize = 2 << 30;

/// Floor applied to positive-support paths after a failed resample.
const POSITIVE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PathError {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("non-finite value at step {step} of path {path} (blow-up)")]
    NonFinitePath { path: usize, step: usize },
    #[error("bundle has noise dimension {bundle}, SDE needs {sde}")]
    NoiseDimMismatch { bundle: usize, sde: usize },
    #[error("start point contains non-finite values")]
    NonFiniteStart,
}

/// Uniform grid on `[t0, t1]` with query times snapped to nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    t1: f64,
    n_steps: usize,
    query_nodes: Vec<usize>,
    query_times: Vec<f64>,
    max_snap: f64,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, n_steps: usize, queries: &[f64]) -> Result<Self, PathError> {
        if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
            return Err(PathError::InvalidGrid(format!("need t0 < t1, got [{t0}, {t1}]")));
        }
        if n_steps == 0 {
            return Err(PathError::InvalidGrid("n_steps must be >= 1".into()));
        }
        let dt = (t1 - t0) / n_steps as f64;
        let mut query_nodes = Vec::with_capacity(queries.len());
        let mut query_times = Vec::with_capacity(queries.len());
        let mut max_snap = 0.0f64;
        for &q in queries {
            if !(t0..=t1).contains(&q) {
                return Err(PathError::InvalidGrid(format!(
                    "query time {q} outside [{t0}, {t1}]"
                )));
            }
            let node = (((q - t0) / dt).round() as usize).min(n_steps);
            let snapped = t0 + node as f64 * dt;
            max_snap = max_snap.max((snapped - q).abs());
            query_nodes.push(node);
            query_times.push(snapped);
        }
        Ok(TimeGrid { t0, t1, n_steps, query_nodes, query_times, max_snap })
    }

    /// Grid with `dt`-sized steps covering `[0, t1]`, querying at `queries`.
    pub fn with_dt(t1: f64, dt: f64, queries: &[f64]) -> Result<Self, PathError> {
        if !(dt > 0.0) {
            return Err(PathError::InvalidGrid(format!("dt must be positive, got {dt}")));
        }
        let n_steps = (t1 / dt).round().max(1.0) as usize;
        TimeGrid::new(0.0, t1, n_steps, queries)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }
    pub fn t1(&self) -> f64 {
        self.t1
    }
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.n_steps as f64
    }
    pub fn node_time(&self, node: usize) -> f64 {
        self.t0 + node as f64 * self.dt()
    }
    pub fn n_query(&self) -> usize {
        self.query_nodes.len()
    }
    pub fn query_nodes(&self) -> &[usize] {
        &self.query_nodes
    }
    /// Query times after snapping.
    pub fn query_times(&self) -> &[f64] {
        &self.query_times
    }
    /// Largest distance moved by snapping a query time to its node.
    pub fn max_snap_distance(&self) -> f64 {
        self.max_snap
    }
}

/// `n_paths x n_steps x m` Brownian increments, reproducible from the seed.
#[derive(Debug, Clone)]
pub struct BrownianBundle {
    seed: u64,
    n_paths: usize,
    noise_dim: usize,
    grid: TimeGrid,
    stored: Option<Vec<f64>>,
}

fn fill_path_increments(seed: u64, stream: u64, n: usize, sqrt_dt: f64, out: &mut [f64]) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    debug_assert_eq!(out.len(), n);
    for v in out.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = sqrt_dt * z;
    }
}

impl BrownianBundle {
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }
    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn is_stored(&self) -> bool {
        self.stored.is_some()
    }

    /// Increments of path `w`, length `n_steps * m`. `scratch` is used when the
    /// bundle exceeds the storage budget and regenerates on demand.
    pub fn increments<'a>(&'a self, w: usize, scratch: &'a mut Vec<f64>) -> &'a [f64] {
        let len = self.grid.n_steps() * self.noise_dim;
        match &self.stored {
            Some(all) => &all[w * len..(w + 1) * len],
            None => {
                scratch.resize(len, 0.0);
                fill_path_increments(self.seed, w as u64 + 1, len, self.grid.dt().sqrt(), scratch);
                scratch
            }
        }
    }

    /// Fresh increments for the one-shot positivity resample of path `w`.
    fn rescue_increments(&self, w: usize, scratch: &mut Vec<f64>) {
        let len = self.grid.n_steps() * self.noise_dim;
        scratch.resize(len, 0.0);
        fill_path_increments(
            self.seed,
            (1u64 << 63) | (w as u64 + 1),
            len,
            self.grid.dt().sqrt(),
            scratch,
        );
    }
}

/// Sample `n_paths` Brownian paths on `grid` with `m` noise dimensions.
pub fn make_brownian(seed: u64, n_paths: usize, m: usize, grid: &TimeGrid) -> BrownianBundle {
    assert!(n_paths >= 1, "need at least one path");
    assert!(m >= 1, "need at least one noise dimension");
    let total = n_paths * grid.n_steps() * m;
    let stored = if total * 8 <= STORAGE_BUDGET_BYTES {
        let mut all = vec![0.0; total];
        let len = grid.n_steps() * m;
        let sqrt_dt = grid.dt().sqrt();
        all.par_chunks_mut(len).enumerate().for_each(|(w, chunk)| {
            fill_path_increments(seed, w as u64 + 1, len, sqrt_dt, chunk);
        });
        Some(all)
    } else {
        None
    };
    BrownianBundle { seed, n_paths, noise_dim: m, grid: grid.clone(), stored }
}

/// Trajectory values of every path at the grid's query times.
#[derive(Debug, Clone)]
pub struct PathSet {
    start: Vec<f64>,
    dim: usize,
    n_paths: usize,
    n_query: usize,
    /// Row-major `n_paths x n_query x d`.
    values: Vec<f64>,
    /// Trapezoidal `int_0^{t_q} q ds` per `(path, query)`; `None` when `q` is
    /// spatially constant and the discount is computed in closed form.
    q_integrals: Option<Vec<f64>>,
    bundle_seed: u64,
    grid: TimeGrid,
    reconstructed: bool,
}

impl PathSet {
    pub fn start(&self) -> &[f64] {
        &self.start
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }
    pub fn n_query(&self) -> usize {
        self.n_query
    }
    pub fn bundle_seed(&self) -> u64 {
        self.bundle_seed
    }
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn is_reconstructed(&self) -> bool {
        self.reconstructed
    }

    /// State of path `w` at query index `q`.
    pub fn value(&self, w: usize, q: usize) -> &[f64] {
        let i = (w * self.n_query + q) * self.dim;
        &self.values[i..i + self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn q_integral(&self, w: usize, q: usize) -> Option<f64> {
        self.q_integrals.as_ref().map(|v| v[w * self.n_query + q])
    }

    pub fn q_integrals(&self) -> Option<&[f64]> {
        self.q_integrals.as_deref()
    }

    pub(crate) fn from_parts(
        start: Vec<f64>,
        dim: usize,
        n_paths: usize,
        n_query: usize,
        values: Vec<f64>,
        q_integrals: Option<Vec<f64>>,
        bundle_seed: u64,
        grid: TimeGrid,
        reconstructed: bool,
    ) -> Self {
        PathSet {
            start,
            dim,
            n_paths,
            n_query,
            values,
            q_integrals,
            bundle_seed,
            grid,
            reconstructed,
        }
    }

    /// Debug dump, columns `path_id,time,x_1..x_d`.
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        write!(out, "path_id,time")?;
        for i in 1..=self.dim {
            write!(out, ",x_{i}")?;
        }
        writeln!(out)?;
        for w in 0..self.n_paths {
            for (q, &t) in self.grid.query_times().iter().enumerate() {
                write!(out, "{w},{t}")?;
                for v in self.value(w, q) {
                    write!(out, ",{v}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// One Euler-Maruyama step of the FlowKac SDE; writes `x_{n+1}` into `next`.
#[inline]
pub(crate) fn em_step<S: Sde>(
    fk: &FlowKac<S>,
    x: &[f64],
    t: f64,
    dt: f64,
    dw: &[f64],
    drift_buf: &mut [f64],
    sigma_buf: &mut [f64],
    next: &mut [f64],
) {
    let d = x.len();
    let m = dw.len();
    fk.drift_tilde(x, t, drift_buf);
    fk.diffusion(x, t, sigma_buf);
    for i in 0..d {
        let mut acc = x[i] + drift_buf[i] * dt;
        for k in 0..m {
            acc += sigma_buf[i * m + k] * dw[k];
        }
        next[i] = acc;
    }
}

enum PathOutcome {
    Ok,
    CrossedZero,
    NonFinite(usize),
}

#[allow(clippy::too_many_arguments)]
fn run_single_path<S: Sde>(
    fk: &FlowKac<S>,
    x0: &[f64],
    grid: &TimeGrid,
    increments: &[f64],
    clamp_on_cross: bool,
    values_out: &mut [f64],
    qint_out: Option<&mut [f64]>,
    track_q: bool,
) -> PathOutcome {
    let d = fk.dim();
    let m = fk.noise_dim();
    let dt = grid.dt();
    let positive = fk.positive_support();
    let mut x = x0.to_vec();
    let mut next = vec![0.0; d];
    let mut drift_buf = vec![0.0; d];
    let mut sigma_buf = vec![0.0; d * m];
    let mut qint = 0.0;
    let mut q_prev = if track_q { fk.potential(&x, grid.t0()) } else { 0.0 };
    let mut qint_by_node = vec![0.0; if track_q { grid.n_steps() + 1 } else { 0 }];

    // Query values at node 0 (the start itself).
    for (qi, &node) in grid.query_nodes().iter().enumerate() {
        if node == 0 {
            values_out[qi * d..(qi + 1) * d].copy_from_slice(&x);
        }
    }

    for step in 0..grid.n_steps() {
        let t = grid.node_time(step);
        let dw = &increments[step * m..step * m + m];
        em_step(fk, &x, t, dt, dw, &mut drift_buf, &mut sigma_buf, &mut next);
        if positive {
            let mut crossed = false;
            for v in next.iter_mut() {
                if *v <= 0.0 {
                    crossed = true;
                    *v = POSITIVE_FLOOR;
                }
            }
            if crossed && !clamp_on_cross {
                return PathOutcome::CrossedZero;
            }
        }
        for &v in next.iter() {
            if !v.is_finite() {
                return PathOutcome::NonFinite(step);
            }
        }
        x.copy_from_slice(&next);
        if track_q {
            let t_next = grid.node_time(step + 1);
            let q_next = fk.potential(&x, t_next);
            qint += 0.5 * (q_prev + q_next) * dt;
            q_prev = q_next;
            qint_by_node[step + 1] = qint;
        }
        for (qi, &node) in grid.query_nodes().iter().enumerate() {
            if node == step + 1 {
                values_out[qi * d..(qi + 1) * d].copy_from_slice(&x);
            }
        }
    }
    if let Some(qout) = qint_out {
        for (qi, &node) in grid.query_nodes().iter().enumerate() {
            qout[qi] = qint_by_node[node];
        }
    }
    PathOutcome::Ok
}

/// Integrate the FlowKac SDE from `x0` along every path of `bundle`.
///
/// Pure in `(fk, x0, bundle)`. Positive-support processes that cross zero are
/// resampled once from a rescue stream and clamped to a small floor if they
/// cross again. For non-constant potentials the trapezoidal `int q ds` is
/// accumulated alongside the state and stored per query time.
pub fn euler_maruyama<S: Sde>(
    fk: &FlowKac<S>,
    x0: &[f64],
    bundle: &BrownianBundle,
) -> Result<PathSet, PathError> {
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(PathError::NonFiniteStart);
    }
    if bundle.noise_dim() != fk.noise_dim() {
        return Err(PathError::NoiseDimMismatch {
            bundle: bundle.noise_dim(),
            sde: fk.noise_dim(),
        });
    }
    let grid = bundle.grid().clone();
    let d = fk.dim();
    let n_q = grid.n_query();
    let n_w = bundle.n_paths();
    let track_q = fk.constant_potential(0.0).is_none();
    let mut values = vec![0.0; n_w * n_q * d];
    let mut qints = vec![0.0; n_w * n_q.max(1)];

    let results: Vec<Result<(), PathError>> = values
        .par_chunks_mut((n_q * d).max(1))
        .zip(qints.par_chunks_mut(n_q.max(1)))
        .enumerate()
        .map(|(w, (vals, qint))| {
            let mut scratch = Vec::new();
            let inc = bundle.increments(w, &mut scratch);
            let qslot = track_q.then(|| &mut *qint);
            match run_single_path(fk, x0, &grid, inc, false, vals, qslot, track_q) {
                PathOutcome::Ok => Ok(()),
                PathOutcome::NonFinite(step) => Err(PathError::NonFinitePath { path: w, step }),
                PathOutcome::CrossedZero => {
                    let mut rescue = Vec::new();
                    bundle.rescue_increments(w, &mut rescue);
                    let qslot = track_q.then(|| &mut *qint);
                    match run_single_path(fk, x0, &grid, &rescue, true, vals, qslot, track_q) {
                        PathOutcome::Ok => Ok(()),
                        PathOutcome::NonFinite(step) => {
                            Err(PathError::NonFinitePath { path: w, step })
                        }
                        PathOutcome::CrossedZero => unreachable!("clamped retry cannot cross"),
                    }
                }
            }
        })
        .collect();
    for r in results {
        r?;
    }

    qints.truncate(if track_q { n_w * n_q } else { 0 });
    Ok(PathSet::from_parts(
        x0.to_vec(),
        d,
        n_w,
        n_q,
        values,
        track_q.then_some(qints),
        bundle.seed(),
        grid,
        false,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{catalog, flowkac_transform, ConstantSde, Gbm1d, Ou2d, Params, ParamValue};

    fn sum(v: &[f64]) -> f64 {
        v.iter().sum()
    }

    #[test]
    fn grid_snaps_queries_to_nodes() {
        let g = TimeGrid::new(0.0, 1.0, 1000, &[0.0, 0.25049, 1.0]).unwrap();
        assert_eq!(g.query_nodes(), &[0, 250, 1000]);
        assert!(g.max_snap_distance() < 5.1e-4);
        assert!((g.query_times()[1] - 0.25).abs() < 1e-12);
        assert!(TimeGrid::new(0.0, 0.0, 10, &[]).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0, &[]).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 10, &[2.0]).is_err());
    }

    #[test]
    fn bundle_is_reproducible_bit_for_bit() {
        let g = TimeGrid::new(0.0, 1.0, 50, &[1.0]).unwrap();
        let a = make_brownian(99, 20, 3, &g);
        let b = make_brownian(99, 20, 3, &g);
        let mut sa = Vec::new();
        let mut sb = Vec::new();
        for w in 0..20 {
            let ia = a.increments(w, &mut sa).to_vec();
            let ib = b.increments(w, &mut sb).to_vec();
            assert!(ia.iter().zip(&ib).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn bundle_extension_keeps_existing_paths() {
        let g = TimeGrid::new(0.0, 1.0, 50, &[1.0]).unwrap();
        let small = make_brownian(7, 10, 2, &g);
        let big = make_brownian(7, 40, 2, &g);
        let mut s = Vec::new();
        for w in 0..10 {
            let a = small.increments(w, &mut s).to_vec();
            let b = big.increments(w, &mut s).to_vec();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn per_step_variance_within_five_se() {
        let n_w = 5000;
        let g = TimeGrid::new(0.0, 0.5, 50, &[0.5]).unwrap();
        let bundle = make_brownian(1234, n_w, 1, &g);
        let dt = g.dt();
        let se = dt * (2.0 / (n_w as f64 - 1.0)).sqrt();
        let mut scratch = Vec::new();
        let mut per_step = vec![0.0f64; g.n_steps()];
        for w in 0..n_w {
            let inc = bundle.increments(w, &mut scratch);
            for (s, &v) in inc.iter().enumerate() {
                per_step[s] += v * v;
            }
        }
        for (s, tot) in per_step.iter().enumerate() {
            let var = tot / n_w as f64;
            assert!((var - dt).abs() < 5.0 * se, "step {s}: var {var} vs dt {dt}");
        }
    }

    #[test]
    fn terminal_variance_matches_horizon() {
        let n_w = 5000;
        let g = TimeGrid::new(0.0, 2.0, 200, &[2.0]).unwrap();
        let bundle = make_brownian(5, n_w, 1, &g);
        let mut scratch = Vec::new();
        let mut acc = 0.0;
        for w in 0..n_w {
            let wt = sum(bundle.increments(w, &mut scratch));
            acc += wt * wt;
        }
        let var = acc / n_w as f64;
        let se = 2.0 * (2.0 / (n_w as f64 - 1.0)).sqrt();
        assert!((var - 2.0).abs() < 5.0 * se, "var(W_T) = {var}");
    }

    #[test]
    fn single_draw_shape_and_determinism() {
        let g = TimeGrid::new(0.0, 0.1, 1, &[0.1]).unwrap();
        let b1 = make_brownian(3, 1, 1, &g);
        let b2 = make_brownian(3, 1, 1, &g);
        let mut s = Vec::new();
        let v1 = b1.increments(0, &mut s).to_vec();
        let v2 = b2.increments(0, &mut s).to_vec();
        assert_eq!(v1.len(), 1);
        assert!(v1[0].is_finite());
        assert_eq!(v1[0].to_bits(), v2[0].to_bits());
    }

    #[test]
    fn zero_coefficients_give_constant_paths() {
        let fk = flowkac_transform(ConstantSde {
            dim: 2,
            noise_dim: 1,
            drift: vec![0.0, 0.0],
            diffusion: vec![0.0, 0.0],
        });
        let g = TimeGrid::new(0.0, 1.0, 100, &[0.0, 0.5, 1.0]).unwrap();
        let bundle = make_brownian(1, 8, 1, &g);
        let ps = euler_maruyama(&fk, &[0.4, -2.0], &bundle).unwrap();
        for w in 0..8 {
            for q in 0..3 {
                assert_eq!(ps.value(w, q), &[0.4, -2.0]);
            }
        }
    }

    #[test]
    fn paths_start_at_x0_at_time_zero() {
        let fk = flowkac_transform(catalog("ou2d", &Params::new()).unwrap());
        let g = TimeGrid::new(0.0, 1.0, 200, &[0.0, 1.0]).unwrap();
        let bundle = make_brownian(21, 16, 2, &g);
        let x0 = [0.3, 1.1];
        let ps = euler_maruyama(&fk, &x0, &bundle).unwrap();
        for w in 0..16 {
            assert_eq!(ps.value(w, 0), &x0);
        }
    }

    #[test]
    fn determinism_of_full_pathset() {
        let fk = flowkac_transform(catalog("gbm1d", &Params::new()).unwrap());
        let g = TimeGrid::new(0.0, 1.0, 500, &[0.5, 1.0]).unwrap();
        let bundle = make_brownian(17, 64, 1, &g);
        let a = euler_maruyama(&fk, &[1.0], &bundle).unwrap();
        let b = euler_maruyama(&fk, &[1.0], &bundle).unwrap();
        assert!(a
            .values()
            .iter()
            .zip(b.values())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    /// Exact FlowKac GBM map on the same Brownian path:
    /// `x0 exp((-mu + 3 sigma^2 / 2) t + sigma W_t)`.
    #[test]
    fn gbm1d_strong_error_is_order_dt() {
        let (mu, sigma) = (0.25, 0.5);
        let fk = flowkac_transform(Gbm1d { mu, sigma });
        let x0 = [1.0];
        let t1 = 1.0;

        let mut errs = Vec::new();
        for n_steps in [1000usize, 2000] {
            let g = TimeGrid::new(0.0, t1, n_steps, &[t1]).unwrap();
            // Build the fine bundle by summing pairs of a 2000-step master so
            // both resolutions ride the same Brownian path.
            let fine = TimeGrid::new(0.0, t1, 2000, &[t1]).unwrap();
            let master = make_brownian(77, 200, 1, &fine);
            let mut scratch = Vec::new();
            let mut rms = 0.0;
            for w in 0..200 {
                let fine_inc = master.increments(w, &mut scratch).to_vec();
                let ratio = 2000 / n_steps;
                let coarse: Vec<f64> = (0..n_steps)
                    .map(|s| fine_inc[s * ratio..(s + 1) * ratio].iter().sum())
                    .collect();
                let w_t: f64 = coarse.iter().sum();
                let exact = x0[0] * ((-mu + 1.5 * sigma * sigma) * t1 + sigma * w_t).exp();
                // Step the scheme by hand on the coarse increments.
                let mut x = x0;
                let mut next = [0.0];
                let (mut db, mut sb) = ([0.0], [0.0]);
                let dt = g.dt();
                for (s, &dw) in coarse.iter().enumerate() {
                    em_step(&fk, &x, g.node_time(s), dt, &[dw], &mut db, &mut sb, &mut next);
                    x = next;
                }
                rms += (x[0] - exact) * (x[0] - exact);
            }
            errs.push((rms / 200.0).sqrt());
        }
        // Strong order 1 for this linear SDE: halving dt roughly halves the error.
        let ratio = errs[1] / errs[0];
        assert!(errs[0] < 2e-2, "strong error too large: {}", errs[0]);
        assert!((0.3..0.8).contains(&ratio), "refinement ratio {ratio}");
    }

    #[test]
    fn deterministic_linear_flow_matches_matrix_exponential() {
        // A = -I, Sigma = 0: drift_tilde = -Ax = x, so paths grow like e^t.
        let mut p = Params::new();
        p.insert(
            "A".into(),
            ParamValue::Matrix(vec![vec![-1.0, 0.0], vec![0.0, -1.0]]),
        );
        p.insert(
            "Sigma".into(),
            ParamValue::Matrix(vec![vec![0.0, 0.0], vec![0.0, 0.0]]),
        );
        let fk = flowkac_transform(catalog("ou2d", &p).unwrap());
        let g = TimeGrid::new(0.0, 1.0, 2000, &[1.0]).unwrap();
        let bundle = make_brownian(1, 1, 2, &g);
        let ps = euler_maruyama(&fk, &[1.0, 1.0], &bundle).unwrap();
        let e = std::f64::consts::E;
        for &v in ps.value(0, 0) {
            assert!((v - e).abs() < 1e-3, "{v} vs {e}");
        }
    }

    #[test]
    fn shared_noise_contraction_bound() {
        // A = I makes the transformed drift -x, a contraction with rate e^{-t};
        // constant diffusion cancels in the path difference.
        let mut p = Params::new();
        p.insert(
            "A".into(),
            ParamValue::Matrix(vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
        );
        p.insert(
            "Sigma".into(),
            ParamValue::Matrix(vec![vec![0.6, 0.0], vec![0.0, 0.6]]),
        );
        let fk = flowkac_transform(catalog("ou2d", &p).unwrap());
        let g = TimeGrid::new(0.0, 2.0, 2000, &[0.5, 1.0, 2.0]).unwrap();
        let bundle = make_brownian(13, 32, 2, &g);
        let a = euler_maruyama(&fk, &[0.5, 0.5], &bundle).unwrap();
        let b = euler_maruyama(&fk, &[1.0, -0.2], &bundle).unwrap();
        let h = ((1.0f64 - 0.5).powi(2) + (-0.2f64 - 0.5).powi(2)).sqrt();
        for (qi, &t) in g.query_times().iter().enumerate() {
            let bound = h * (-t).exp();
            for w in 0..32 {
                let dx: f64 = a
                    .value(w, qi)
                    .iter()
                    .zip(b.value(w, qi))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                assert!(dx <= bound * 1.1, "t={t}: {dx} > {bound}");
            }
        }
    }

    #[test]
    fn grid_refinement_rms_shrinks_linearly() {
        let fk = flowkac_transform(catalog("ou2d", &Params::new()).unwrap());
        let fine_grid = TimeGrid::new(0.0, 1.0, 4000, &[1.0]).unwrap();
        let master = make_brownian(31, 64, 2, &fine_grid);
        let x0 = [1.0, 1.0];

        let run_at = |n_steps: usize| -> Vec<f64> {
            let g = TimeGrid::new(0.0, 1.0, n_steps, &[1.0]).unwrap();
            let ratio = 4000 / n_steps;
            let mut ends = Vec::new();
            let mut scr = Vec::new();
            for w in 0..64 {
                let fine_inc = master.increments(w, &mut scr).to_vec();
                let mut x = x0.to_vec();
                let mut next = vec![0.0; 2];
                let (mut db, mut sb) = (vec![0.0; 2], vec![0.0; 4]);
                for s in 0..n_steps {
                    let mut dw = [0.0; 2];
                    for r in 0..ratio {
                        dw[0] += fine_inc[(s * ratio + r) * 2];
                        dw[1] += fine_inc[(s * ratio + r) * 2 + 1];
                    }
                    em_step(&fk, &x, g.node_time(s), g.dt(), &dw, &mut db, &mut sb, &mut next);
                    x.copy_from_slice(&next);
                }
                ends.extend_from_slice(&x);
            }
            ends
        };

        let reference = run_at(4000);
        let rms = |ends: &[f64]| -> f64 {
            (ends
                .iter()
                .zip(&reference)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / 64.0)
                .sqrt()
        };
        let coarse = rms(&run_at(500));
        let finer = rms(&run_at(1000));
        // Linear SDE: order-1 strong convergence toward the shared fine path.
        let ratio = finer / coarse;
        assert!(ratio < 0.75, "refinement ratio {ratio} (coarse {coarse}, finer {finer})");
    }

    #[test]
    fn positive_support_paths_stay_positive() {
        let fk = flowkac_transform(Gbm1d { mu: 0.25, sigma: 2.0 });
        let g = TimeGrid::new(0.0, 1.0, 200, &[1.0]).unwrap();
        let bundle = make_brownian(2, 256, 1, &g);
        let ps = euler_maruyama(&fk, &[0.05], &bundle).unwrap();
        for w in 0..256 {
            assert!(ps.value(w, 0)[0] > 0.0);
        }
    }

    #[test]
    fn noise_dim_mismatch_is_reported() {
        let fk = flowkac_transform(catalog("ou2d", &Params::new()).unwrap());
        let g = TimeGrid::new(0.0, 1.0, 10, &[1.0]).unwrap();
        let bundle = make_brownian(1, 4, 1, &g);
        assert!(matches!(
            euler_maruyama(&fk, &[0.0, 0.0], &bundle),
            Err(PathError::NoiseDimMismatch { .. })
        ));
        assert!(matches!(
            euler_maruyama(&fk, &[f64::NAN, 0.0], &make_brownian(1, 4, 2, &g)),
            Err(PathError::NonFiniteStart)
        ));
    }

    #[test]
    fn csv_dump_has_expected_shape() {
        let fk = flowkac_transform(catalog("ou2d", &Params::new()).unwrap());
        let g = TimeGrid::new(0.0, 1.0, 100, &[0.5, 1.0]).unwrap();
        let bundle = make_brownian(4, 3, 2, &g);
        let ps = euler_maruyama(&fk, &[1.0, 1.0], &bundle).unwrap();
        let mut buf = Vec::new();
        ps.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path_id,time,x_1,x_2");
        assert_eq!(lines.len(), 1 + 3 * 2);
    }
}
