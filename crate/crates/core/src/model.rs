//! Block-structured drift/diffusion models on a periodic lattice.
//!
//! A state of dimension `n = m * b` is split into `m` blocks of `b`
//! components. The drift of block `j` reads only blocks `j-1`, `j`, `j+1`
//! (periodic), and the diffusion of block `j` reads only block `j`. This is
//! the structural assumption every solver and sampler in this crate relies
//! on. Block indices are 0-based throughout.

use crate::error::{Error, Result};

/// Drift callback: `(t, left, center, right, block, out)` where the slices
/// have length `b` and the result is written into `out`.
pub type DriftFn = Box<dyn Fn(f64, &[f64], &[f64], &[f64], usize, &mut [f64]) + Send + Sync>;

/// Diffusion coefficient of one block.
///
/// The common cases get dedicated variants so the integrator's inner loop can
/// skip work; `General` writes a row-major `b x b` matrix.
pub enum Diffusion {
    /// No stochastic forcing (ODE).
    Zero,
    /// Constant scalar multiple of the identity.
    ScalarDiag(f64),
    /// Arbitrary state-dependent matrix: `(t, center, block, out_bxb)`.
    General(Box<dyn Fn(f64, &[f64], usize, &mut [f64]) + Send + Sync>),
}

/// A block-structured locally-interacting SDE (or ODE when the diffusion is
/// zero) on the periodic lattice of `m` blocks of size `b`.
pub struct ModelSpec {
    m: usize,
    b: usize,
    drift: DriftFn,
    diffusion: Diffusion,
    /// Optional `(C_f, C_sigma)` for which Assumption-style Lipschitz bounds
    /// hold. Left unset when the model is not globally Lipschitz.
    lipschitz: Option<(f64, f64)>,
}

impl ModelSpec {
    pub fn new(
        m: usize,
        b: usize,
        drift: DriftFn,
        diffusion: Diffusion,
        lipschitz: Option<(f64, f64)>,
    ) -> Result<Self> {
        if m == 0 || b == 0 {
            return Err(Error::InvalidArgument(format!(
                "model dimensions must be positive, got m={m}, b={b}"
            )));
        }
        if let Some((cf, cs)) = lipschitz {
            if cf < 0.0 || cs < 0.0 {
                return Err(Error::InvalidArgument(
                    "Lipschitz constants must be nonnegative".into(),
                ));
            }
        }
        Ok(Self {
            m,
            b,
            drift,
            diffusion,
            lipschitz,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn b(&self) -> usize {
        self.b
    }

    /// Flat state dimension `n = m * b`.
    pub fn n(&self) -> usize {
        self.m * self.b
    }

    pub fn lipschitz(&self) -> Option<(f64, f64)> {
        self.lipschitz
    }

    /// True when the diffusion is identically zero.
    pub fn is_ode(&self) -> bool {
        matches!(self.diffusion, Diffusion::Zero)
    }

    /// Evaluate the drift of block `j` into `out`.
    #[inline]
    pub fn drift(&self, t: f64, left: &[f64], center: &[f64], right: &[f64], j: usize, out: &mut [f64]) {
        debug_assert!(j < self.m);
        (self.drift)(t, left, center, right, j, out);
    }

    /// Add `sigma_j(t, center) * scale * w` to `out` (the Euler-Maruyama
    /// noise term with `scale = sqrt(h)`).
    #[inline]
    pub fn add_scaled_noise(
        &self,
        t: f64,
        center: &[f64],
        j: usize,
        scale: f64,
        w: &[f64],
        out: &mut [f64],
    ) {
        match &self.diffusion {
            Diffusion::Zero => {}
            Diffusion::ScalarDiag(s) => {
                for (o, wi) in out.iter_mut().zip(w) {
                    *o += s * scale * wi;
                }
            }
            Diffusion::General(f) => {
                let b = self.b;
                let mut mat = vec![0.0; b * b];
                f(t, center, j, &mut mat);
                for r in 0..b {
                    let mut acc = 0.0;
                    for (c, wi) in w.iter().enumerate() {
                        acc += mat[r * b + c] * wi;
                    }
                    out[r] += scale * acc;
                }
            }
        }
    }

    /// Materialize the diffusion matrix of block `j` (row-major `b x b`).
    pub fn diffusion_matrix(&self, t: f64, center: &[f64], j: usize) -> Vec<f64> {
        let b = self.b;
        let mut mat = vec![0.0; b * b];
        match &self.diffusion {
            Diffusion::Zero => {}
            Diffusion::ScalarDiag(s) => {
                for r in 0..b {
                    mat[r * b + r] = *s;
                }
            }
            Diffusion::General(f) => f(t, center, j, &mut mat),
        }
        mat
    }
}

/// A flat state vector of `m` blocks of size `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    data: Vec<f64>,
    b: usize,
}

impl State {
    pub fn new(data: Vec<f64>, b: usize) -> Result<Self> {
        if b == 0 || data.is_empty() || data.len() % b != 0 {
            return Err(Error::InvalidArgument(format!(
                "state length {} is not a positive multiple of block size {b}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "state has non-finite entry at component {bad}"
            )));
        }
        Ok(Self { data, b })
    }

    pub fn zeros(m: usize, b: usize) -> Self {
        Self {
            data: vec![0.0; m * b],
            b,
        }
    }

    pub fn n(&self) -> usize {
        self.data.len()
    }

    pub fn m(&self) -> usize {
        self.data.len() / self.b
    }

    pub fn b(&self) -> usize {
        self.b
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn block(&self, j: usize) -> &[f64] {
        &self.data[j * self.b..(j + 1) * self.b]
    }

    pub fn block_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.b..(j + 1) * self.b]
    }

    /// Copy of `self` with block `j` replaced.
    pub fn with_block(&self, j: usize, values: &[f64]) -> Self {
        let mut out = self.clone();
        out.block_mut(j).copy_from_slice(values);
        out
    }
}

/// Torus distance between block indices `j1, j2` in `0..m`.
pub fn block_distance(j1: usize, j2: usize, m: usize) -> Result<usize> {
    if j1 >= m || j2 >= m {
        return Err(Error::InvalidArgument(format!(
            "block indices ({j1}, {j2}) out of range for m={m}"
        )));
    }
    let d = j1.abs_diff(j2);
    Ok(d.min(m - d))
}

/// Periodic neighbors `(j-1, j+1)` on the block torus.
#[inline]
pub fn neighbor_indices(j: usize, m: usize) -> (usize, usize) {
    ((j + m - 1) % m, (j + 1) % m)
}

/// The Lorenz 96 ODE, blocked into `n / b` blocks.
///
/// Component `q` evolves as `x_{q-1} (x_{q+1} - x_{q-2}) - x_q + 8` under
/// periodic component indexing. The component stencil reaches two to the
/// left, so blocks of size at least 2 are required for the drift to stay
/// within adjacent blocks.
pub fn lorenz96(n: usize, b: usize) -> Result<ModelSpec> {
    if n % 2 != 0 || n < 4 {
        return Err(Error::InvalidArgument(format!(
            "Lorenz 96 requires even n >= 4, got {n}"
        )));
    }
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "Lorenz 96 block size must be >= 2 (component stencil reaches x_{{j-2}}), got {b}"
        )));
    }
    if n % b != 0 {
        return Err(Error::InvalidArgument(format!(
            "n={n} not divisible by block size {b}"
        )));
    }
    let drift: DriftFn = Box::new(move |_t, left: &[f64], center: &[f64], right: &[f64], _j, out: &mut [f64]| {
        let b = center.len();
        for q in 0..b {
            let xm2 = if q >= 2 { center[q - 2] } else { left[b + q - 2] };
            let xm1 = if q >= 1 { center[q - 1] } else { left[b - 1] };
            let xp1 = if q + 1 < b { center[q + 1] } else { right[0] };
            out[q] = xm1 * (xp1 - xm2) - center[q] + 8.0;
        }
    });
    // Quadratic drift: no global Lipschitz constants to report.
    ModelSpec::new(n / b, b, drift, Diffusion::Zero, None)
}

/// Parameters of the linearized stochastic flow model (dissipative advection
/// on a periodic grid of spacing `grid_size`).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LinearFlowParams {
    pub grid_size: f64,
    pub diffusivity: f64,
    pub damping: f64,
    pub advection: f64,
    pub noise: f64,
}

impl Default for LinearFlowParams {
    /// The strong-advection weak-damping regime used throughout the
    /// experiments: l=0.2, mu=0.1, nu=0.1, w=2, sigma_x=0.1.
    fn default() -> Self {
        Self {
            grid_size: 0.2,
            diffusivity: 0.1,
            damping: 0.1,
            advection: 2.0,
            noise: 0.1,
        }
    }
}

impl LinearFlowParams {
    /// Centered-difference coefficients `(a, b, c)` of
    /// `dx_j = (a x_{j-1} + b x_j + c x_{j+1}) dt + noise dW_j`.
    pub fn coefficients(&self) -> (f64, f64, f64) {
        let l = self.grid_size;
        let a = self.diffusivity / (l * l) - self.advection / (2.0 * l);
        let b = -2.0 * self.diffusivity / (l * l) - self.damping;
        let c = self.diffusivity / (l * l) + self.advection / (2.0 * l);
        (a, b, c)
    }

    /// Lipschitz constants `(C_f, C_sigma)` reported for this model:
    /// `C_f = 3 max(a^2, b^2, c^2)` and `C_sigma = 0` (additive noise).
    pub fn lipschitz(&self) -> (f64, f64) {
        let (a, b, c) = self.coefficients();
        (3.0 * (a * a).max(b * b).max(c * c), 0.0)
    }
}

/// The linear stochastic flow model, blocked into `n / b` blocks.
pub fn linear_flow(n: usize, b: usize, params: LinearFlowParams) -> Result<ModelSpec> {
    if params.grid_size <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "grid size must be positive, got {}",
            params.grid_size
        )));
    }
    if n == 0 || b == 0 || n % b != 0 {
        return Err(Error::InvalidArgument(format!(
            "n={n} not a positive multiple of block size {b}"
        )));
    }
    let (ca, cb, cc) = params.coefficients();
    let drift: DriftFn = Box::new(move |_t, left: &[f64], center: &[f64], right: &[f64], _j, out: &mut [f64]| {
        let b = center.len();
        for q in 0..b {
            let xm1 = if q >= 1 { center[q - 1] } else { left[b - 1] };
            let xp1 = if q + 1 < b { center[q + 1] } else { right[0] };
            out[q] = ca * xm1 + cb * center[q] + cc * xp1;
        }
    });
    let diffusion = if params.noise == 0.0 {
        Diffusion::Zero
    } else {
        Diffusion::ScalarDiag(params.noise)
    };
    ModelSpec::new(n / b, b, drift, diffusion, Some(params.lipschitz()))
}

/// Evaluate the full-state drift (all blocks) of `model` at state `x`,
/// resolving periodic neighbors. Used by tests and the equilibrium prior.
pub fn full_drift(model: &ModelSpec, t: f64, x: &State, out: &mut [f64]) {
    let (m, b) = (model.m(), model.b());
    debug_assert_eq!(x.n(), model.n());
    debug_assert_eq!(out.len(), model.n());
    for j in 0..m {
        let (jl, jr) = neighbor_indices(j, m);
        let (head, tail) = out.split_at_mut((j + 1) * b);
        let _ = tail;
        let slot = &mut head[j * b..];
        model.drift(t, x.block(jl), x.block(j), x.block(jr), j, slot);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn block_distance_examples() {
        // 1-based spec examples (1,1,40), (1,40,40), (3,25,40) shifted to 0-based.
        assert_eq!(block_distance(0, 0, 40).unwrap(), 0);
        assert_eq!(block_distance(0, 39, 40).unwrap(), 1);
        assert_eq!(block_distance(2, 24, 40).unwrap(), 18);
        assert!(block_distance(0, 40, 40).is_err());
    }

    #[test]
    fn block_distance_is_torus_metric() {
        let m = 17;
        for j1 in 0..m {
            for j2 in 0..m {
                let d = block_distance(j1, j2, m).unwrap();
                assert_eq!(d, block_distance(j2, j1, m).unwrap());
                assert_eq!(d == 0, j1 == j2);
                assert!(d <= m / 2);
            }
        }
    }

    #[test]
    fn lorenz96_zero_state_drift_is_forcing() {
        let model = lorenz96(40, 2).unwrap();
        let x = State::zeros(20, 2);
        let mut out = vec![0.0; 40];
        full_drift(&model, 0.0, &x, &mut out);
        assert!(out.iter().all(|&v| v == 8.0));
    }

    #[test]
    fn lorenz96_hand_evaluated_component() {
        // n=4, state (1,2,3,4): drift_1 = -x3*x4 + x4*x2 - x1 + 8 = 3 (1-based).
        let model = lorenz96(4, 2).unwrap();
        let x = State::new(vec![1.0, 2.0, 3.0, 4.0], 2).unwrap();
        let mut out = vec![0.0; 4];
        full_drift(&model, 0.0, &x, &mut out);
        assert_eq!(out[0], -3.0 * 4.0 + 4.0 * 2.0 - 1.0 + 8.0);
        assert_eq!(out[0], 3.0);
        // Remaining components, by hand with wraparound:
        assert_eq!(out[1], -4.0 * 1.0 + 1.0 * 3.0 - 2.0 + 8.0);
        assert_eq!(out[2], -1.0 * 2.0 + 2.0 * 4.0 - 3.0 + 8.0);
        assert_eq!(out[3], -2.0 * 3.0 + 3.0 * 1.0 - 4.0 + 8.0);
    }

    #[test]
    fn lorenz96_diffusion_is_zero() {
        let model = lorenz96(8, 2).unwrap();
        assert!(model.is_ode());
        let mat = model.diffusion_matrix(0.3, &[1.0, -2.0], 1);
        assert!(mat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lorenz96_rejects_bad_dimensions() {
        assert!(lorenz96(5, 2).is_err());
        assert!(lorenz96(2, 2).is_err());
        assert!(lorenz96(40, 1).is_err());
        assert!(lorenz96(40, 3).is_err());
    }

    #[test]
    fn linear_flow_paper_coefficients() {
        let p = LinearFlowParams::default();
        let (a, b, c) = p.coefficients();
        assert!((a - -2.5).abs() < 1e-12);
        assert!((b - -5.1).abs() < 1e-12);
        assert!((c - 7.5).abs() < 1e-12);
    }

    #[test]
    fn linear_flow_pure_damping_decouples() {
        let p = LinearFlowParams {
            grid_size: 0.2,
            diffusivity: 0.0,
            damping: 0.3,
            advection: 0.0,
            noise: 0.1,
        };
        let (a, b, c) = p.coefficients();
        assert_eq!(a, 0.0);
        assert_eq!(c, 0.0);
        assert!((b - -0.3).abs() < 1e-15);
    }

    #[test]
    fn linear_flow_rejects_nonpositive_grid() {
        let p = LinearFlowParams {
            grid_size: 0.0,
            ..LinearFlowParams::default()
        };
        assert!(linear_flow(8, 1, p).is_err());
    }

    fn random_state(rng: &mut impl Rng, m: usize, b: usize, scale: f64) -> State {
        let data: Vec<f64> = (0..m * b).map(|_| rng.random_range(-scale..scale)).collect();
        State::new(data, b).unwrap()
    }

    #[test]
    fn drift_locality_one_block() {
        // Perturbing block k changes the drift only at blocks within torus
        // distance 1 of k.
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for (model, m, b) in [
            (lorenz96(20, 2).unwrap(), 10usize, 2usize),
            (linear_flow(12, 3, LinearFlowParams::default()).unwrap(), 4, 3),
        ] {
            for _ in 0..20 {
                let x = random_state(&mut rng, m, b, 5.0);
                let k = rng.random_range(0..m);
                let mut y = x.clone();
                for v in y.block_mut(k) {
                    *v += rng.random_range(-1.0..1.0);
                }
                let mut fx = vec![0.0; m * b];
                let mut fy = vec![0.0; m * b];
                full_drift(&model, 0.0, &x, &mut fx);
                full_drift(&model, 0.0, &y, &mut fy);
                for j in 0..m {
                    let changed = fx[j * b..(j + 1) * b] != fy[j * b..(j + 1) * b];
                    if block_distance(j, k, m).unwrap() > 1 {
                        assert!(!changed, "drift leaked beyond neighbors at block {j}");
                    }
                }
            }
        }
    }

    #[test]
    fn periodic_wraparound_matches_aliases() {
        // Evaluating block 0 with explicit wraparound neighbors equals the
        // full-state evaluation.
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let model = lorenz96(16, 2).unwrap();
        let m = model.m();
        let x = random_state(&mut rng, m, 2, 3.0);
        let mut full = vec![0.0; 16];
        full_drift(&model, 0.0, &x, &mut full);
        let mut out = vec![0.0; 2];
        model.drift(0.0, x.block(m - 1), x.block(0), x.block(1), 0, &mut out);
        assert_eq!(out, full[0..2]);
    }

    #[test]
    fn linear_flow_lipschitz_constants_hold() {
        // Assumption inequalities on 10^4 random argument pairs in a box.
        let p = LinearFlowParams::default();
        let (cf, cs) = p.lipschitz();
        let model = linear_flow(12, 4, p).unwrap();
        let b = model.b();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let draw = |rng: &mut ChaCha12Rng| -> Vec<f64> {
            (0..b).map(|_| rng.random_range(-10.0..10.0)).collect()
        };
        for _ in 0..10_000 {
            let (x1, x2, x3) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
            let (y1, y2, y3) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
            let mut fx = vec![0.0; b];
            let mut fy = vec![0.0; b];
            model.drift(0.0, &x1, &x2, &x3, 0, &mut fx);
            model.drift(0.0, &y1, &y2, &y3, 0, &mut fy);
            let lhs: f64 = fx.iter().zip(&fy).map(|(u, v)| (u - v) * (u - v)).sum();
            let rhs: f64 = cf
                * (x1.iter().zip(&y1).map(|(u, v)| (u - v) * (u - v)).sum::<f64>()
                    + x2.iter().zip(&y2).map(|(u, v)| (u - v) * (u - v)).sum::<f64>()
                    + x3.iter().zip(&y3).map(|(u, v)| (u - v) * (u - v)).sum::<f64>());
            assert!(lhs <= rhs * (1.0 + 1e-12), "drift Lipschitz bound violated");
            // Diffusion side: additive noise, difference is exactly zero.
            let sx = model.diffusion_matrix(0.0, &x2, 0);
            let sy = model.diffusion_matrix(0.0, &y2, 0);
            let ds: f64 = sx.iter().zip(&sy).map(|(u, v)| (u - v) * (u - v)).sum();
            let dx: f64 = x2.iter().zip(&y2).map(|(u, v)| (u - v) * (u - v)).sum();
            assert!(ds <= cs * dx + 1e-30);
        }
    }
}
