//! Full-state and local-patch numerical solution of the block SDE/ODE.
//!
//! Euler-Maruyama handles the stochastic case, classic RK4 the deterministic
//! one. Both come in a full-state flavor and a local flavor that re-solves
//! only the blocks within torus distance `L` of a perturbed block, reading
//! boundary data from a previously computed trajectory. The local solvers
//! call the exact same per-block step kernels as the full ones, so when the
//! re-solved region covers the whole torus the results agree bitwise.

use crate::brownian::BrownianStore;
use crate::error::{Error, Result};
use crate::model::{block_distance, ModelSpec, State};

/// Number of grid steps `T / h`, which must be an exact integer.
pub fn grid_steps(h: f64, t_end: f64) -> Result<usize> {
    if !(h > 0.0 && h.is_finite()) || !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "time grid must satisfy h > 0 and T > 0, got h={h}, T={t_end}"
        )));
    }
    let ratio = t_end / h;
    let steps = ratio.round();
    if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) || steps < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "T/h must be a positive integer, got T={t_end}, h={h}"
        )));
    }
    Ok(steps as usize)
}

/// One realization's solution values at every grid time, plus the four RK4
/// stage arrays when the producing integrator was RK4.
///
/// Layout is time-major: `values[(i*m + j)*b ..]` is block `j` at grid time
/// `i`, for `i` in `0..=steps`. Stages are `stages[((i*4 + s)*m + j)*b ..]`
/// for steps `i` in `0..steps` and stage `s` in `0..4`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    m: usize,
    b: usize,
    steps: usize,
    h: f64,
    t_end: f64,
    values: Vec<f64>,
    stages: Option<Vec<f64>>,
}

impl Trajectory {
    fn alloc(m: usize, b: usize, steps: usize, h: f64, t_end: f64, with_stages: bool) -> Self {
        Self {
            m,
            b,
            steps,
            h,
            t_end,
            values: vec![0.0; (steps + 1) * m * b],
            stages: with_stages.then(|| vec![0.0; steps * 4 * m * b]),
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn b(&self) -> usize {
        self.b
    }

    pub fn n(&self) -> usize {
        self.m * self.b
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn has_stages(&self) -> bool {
        self.stages.is_some()
    }

    /// Block `j` at grid time index `i` (0..=steps).
    #[inline]
    pub fn state(&self, i: usize, j: usize) -> &[f64] {
        let base = (i * self.m + j) * self.b;
        &self.values[base..base + self.b]
    }

    /// The full flat state at grid time index `i`.
    #[inline]
    pub fn state_layer(&self, i: usize) -> &[f64] {
        &self.values[i * self.m * self.b..(i + 1) * self.m * self.b]
    }

    /// The flat state at the terminal time `T`.
    #[inline]
    pub fn terminal(&self) -> &[f64] {
        self.state_layer(self.steps)
    }

    /// RK4 stage `s` (0..4) of block `j` at step `i`.
    #[inline]
    pub fn stage(&self, i: usize, s: usize, j: usize) -> &[f64] {
        let stages = self.stages.as_ref().expect("trajectory has no stages");
        let base = ((i * 4 + s) * self.m + j) * self.b;
        &stages[base..base + self.b]
    }
}

/// Per-realization trajectories, indexed by the Brownian realization `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryCache {
    realizations: Vec<Trajectory>,
}

impl TrajectoryCache {
    pub fn new(realizations: Vec<Trajectory>) -> Result<Self> {
        if realizations.is_empty() {
            return Err(Error::InvalidArgument("cache needs at least one realization".into()));
        }
        let first = &realizations[0];
        for t in &realizations[1..] {
            if t.m != first.m || t.b != first.b || t.steps != first.steps || t.has_stages() != first.has_stages() {
                return Err(Error::ContractViolation("cache realizations have mismatched shapes".into()));
            }
        }
        Ok(Self { realizations })
    }

    pub fn n_realizations(&self) -> usize {
        self.realizations.len()
    }

    pub fn get(&self, c: usize) -> &Trajectory {
        &self.realizations[c]
    }

    pub fn get_mut(&mut self, c: usize) -> &mut Trajectory {
        &mut self.realizations[c]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> {
        self.realizations.iter()
    }
}

/// A contiguous torus arc of blocks around a patch center.
#[derive(Debug, Clone, Copy)]
struct Window {
    start: usize,
    len: usize,
    m: usize,
}

impl Window {
    fn new(center: usize, reach: usize, m: usize) -> Self {
        let len = (2 * reach + 1).min(m);
        let start = (center + m - reach % m) % m;
        Self { start, len, m }
    }

    #[inline]
    fn block_of(&self, pos: usize) -> usize {
        (self.start + pos) % self.m
    }

    /// Window position of a global block, if covered.
    #[inline]
    fn position_of(&self, j: usize) -> Option<usize> {
        let pos = (j + self.m - self.start) % self.m;
        (pos < self.len).then_some(pos)
    }
}

/// Locally re-solved values around a perturbed block: the re-solved core
/// `{j : d(j, center) <= radius}` plus the copied halo the scheme needs
/// (width 1 for Euler-Maruyama, 4 for RK4).
#[derive(Debug, Clone)]
pub struct LocalPatch {
    center: usize,
    radius: usize,
    window: Window,
    /// Per window position: is this block re-solved (true) or copied (false)?
    core: Vec<bool>,
    b: usize,
    steps: usize,
    values: Vec<f64>,
    stages: Option<Vec<f64>>,
}

impl LocalPatch {
    fn alloc(center: usize, radius: usize, halo: usize, m: usize, b: usize, steps: usize, with_stages: bool) -> Self {
        let window = Window::new(center, radius + halo, m);
        let core = (0..window.len)
            .map(|p| block_distance(window.block_of(p), center, m).unwrap() <= radius)
            .collect();
        Self {
            center,
            radius,
            window,
            core,
            b,
            steps,
            values: vec![0.0; (steps + 1) * window.len * b],
            stages: with_stages.then(|| vec![0.0; steps * 4 * window.len * b]),
        }
    }

    pub fn center(&self) -> usize {
        self.center
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn has_stages(&self) -> bool {
        self.stages.is_some()
    }

    /// Global block indices covered by the patch (core plus halo).
    pub fn covered_blocks(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.window.len).map(|p| self.window.block_of(p))
    }

    /// Window position of block `j` if it belongs to the re-solved core.
    #[inline]
    pub fn core_position(&self, j: usize) -> Option<usize> {
        self.window.position_of(j).filter(|&p| self.core[p])
    }

    /// Block values at grid time `i` and window position `pos`.
    #[inline]
    pub fn value(&self, i: usize, pos: usize) -> &[f64] {
        let base = (i * self.window.len + pos) * self.b;
        &self.values[base..base + self.b]
    }

    #[inline]
    fn value_mut(&mut self, i: usize, pos: usize) -> &mut [f64] {
        let base = (i * self.window.len + pos) * self.b;
        &mut self.values[base..base + self.b]
    }

    fn stage_base(&self, i: usize, s: usize, pos: usize) -> usize {
        ((i * 4 + s) * self.window.len + pos) * self.b
    }

    #[inline]
    pub fn stage(&self, i: usize, s: usize, pos: usize) -> &[f64] {
        let base = self.stage_base(i, s, pos);
        &self.stages.as_ref().expect("patch has no stages")[base..base + self.b]
    }

    /// Terminal value of block `j`, taken from the patch when `j` is in the
    /// re-solved core and from `base` otherwise.
    #[inline]
    pub fn terminal_block<'a>(&'a self, base: &'a Trajectory, j: usize) -> &'a [f64] {
        match self.core_position(j) {
            Some(pos) => self.value(self.steps, pos),
            None => self.state(base, self.steps, j),
        }
    }

    #[inline]
    fn state<'a>(&self, base: &'a Trajectory, i: usize, j: usize) -> &'a [f64] {
        base.state(i, j)
    }

    /// Assemble the full terminal state the patch represents on top of `base`.
    pub fn assemble_terminal(&self, base: &Trajectory) -> Vec<f64> {
        let mut out = base.terminal().to_vec();
        for pos in 0..self.window.len {
            if self.core[pos] {
                let j = self.window.block_of(pos);
                out[j * self.b..(j + 1) * self.b].copy_from_slice(self.value(self.steps, pos));
            }
        }
        out
    }
}

/// Euler-Maruyama update of one block, shared verbatim by the full and local
/// solvers.
#[inline]
fn em_step_block(
    model: &ModelSpec,
    t: f64,
    h: f64,
    sqrt_h: f64,
    left: &[f64],
    center: &[f64],
    right: &[f64],
    j: usize,
    w: &[f64],
    drift_buf: &mut [f64],
    out: &mut [f64],
) {
    model.drift(t, left, center, right, j, drift_buf);
    for q in 0..out.len() {
        out[q] = center[q] + drift_buf[q] * h;
    }
    model.add_scaled_noise(t, center, j, sqrt_h, w, out);
}

fn check_finite(block: &[f64], c: usize, step: usize, j: usize) -> Result<()> {
    if block.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence {
            realization: c,
            step,
            block: j,
        })
    }
}

fn validate_against_store(model: &ModelSpec, store: &BrownianStore, c: usize, h: f64, t_end: f64) -> Result<usize> {
    let steps = grid_steps(h, t_end)?;
    if store.m() != model.m() || store.b() != model.b() {
        return Err(Error::InvalidArgument(format!(
            "store blocks ({}, {}) do not match model ({}, {})",
            store.m(),
            store.b(),
            model.m(),
            model.b()
        )));
    }
    if store.steps() != steps {
        return Err(Error::InvalidArgument(format!(
            "store has {} steps but T/h = {steps}",
            store.steps()
        )));
    }
    if c >= store.n_realizations() {
        return Err(Error::InvalidArgument(format!(
            "realization {c} out of range (S = {})",
            store.n_realizations()
        )));
    }
    Ok(steps)
}

/// Full-state Euler-Maruyama solve for realization `c`.
pub fn em_full(
    model: &ModelSpec,
    x0: &State,
    store: &BrownianStore,
    c: usize,
    h: f64,
    t_end: f64,
) -> Result<Trajectory> {
    let steps = validate_against_store(model, store, c, h, t_end)?;
    let (m, b) = (model.m(), model.b());
    if x0.n() != model.n() || x0.b() != b {
        return Err(Error::InvalidArgument("initial condition does not match model shape".into()));
    }
    let mut traj = Trajectory::alloc(m, b, steps, h, t_end, false);
    traj.values[..m * b].copy_from_slice(x0.as_slice());
    let sqrt_h = h.sqrt();
    let mut drift_buf = vec![0.0; b];
    for i in 0..steps {
        let t = i as f64 * h;
        let (prev_all, next_all) = traj.values.split_at_mut((i + 1) * m * b);
        let prev = &prev_all[i * m * b..];
        let next = &mut next_all[..m * b];
        for j in 0..m {
            let jl = (j + m - 1) % m;
            let jr = (j + 1) % m;
            let (left, center, right) = (
                &prev[jl * b..(jl + 1) * b],
                &prev[j * b..(j + 1) * b],
                &prev[jr * b..(jr + 1) * b],
            );
            em_step_block(
                model,
                t,
                h,
                sqrt_h,
                left,
                center,
                right,
                j,
                store.increment(c, i, j),
                &mut drift_buf,
                &mut next[j * b..(j + 1) * b],
            );
            check_finite(&next[j * b..(j + 1) * b], c, i + 1, j)?;
        }
    }
    Ok(traj)
}

fn check_local_contract(model: &ModelSpec, x_p: &State, base: &Trajectory, i_star: usize) -> Result<()> {
    let (m, b) = (model.m(), model.b());
    if base.m != m || base.b != b {
        return Err(Error::ContractViolation("base trajectory does not match model shape".into()));
    }
    if x_p.n() != model.n() || x_p.b() != b {
        return Err(Error::InvalidArgument("proposal state does not match model shape".into()));
    }
    if i_star >= m {
        return Err(Error::InvalidArgument(format!("center block {i_star} out of range for m={m}")));
    }
    for j in 0..m {
        if j != i_star && x_p.block(j) != base.state(0, j) {
            return Err(Error::ContractViolation(format!(
                "proposal differs from the base initial condition at block {j}, not just at {i_star}"
            )));
        }
    }
    Ok(())
}

/// Local Euler-Maruyama solve: re-solves blocks within distance `radius` of
/// `i_star` using the same stored increments as `base`, copying boundary
/// values from `base` in a width-1 halo.
pub fn em_local(
    model: &ModelSpec,
    x_p: &State,
    base: &Trajectory,
    store: &BrownianStore,
    c: usize,
    i_star: usize,
    radius: usize,
) -> Result<LocalPatch> {
    let steps = validate_against_store(model, store, c, base.h, base.t_end)?;
    if steps != base.steps {
        return Err(Error::ContractViolation("base trajectory and store disagree on the grid".into()));
    }
    check_local_contract(model, x_p, base, i_star)?;
    let (m, b) = (model.m(), model.b());
    let mut patch = LocalPatch::alloc(i_star, radius, 1, m, b, steps, false);
    let len = patch.window.len;
    for pos in 0..len {
        let j = patch.window.block_of(pos);
        patch.value_mut(0, pos).copy_from_slice(x_p.block(j));
    }
    let sqrt_h = base.h.sqrt();
    let mut drift_buf = vec![0.0; b];
    for i in 0..steps {
        let t = i as f64 * base.h;
        let (prev_all, next_all) = patch.values.split_at_mut((i + 1) * len * b);
        let prev = &prev_all[i * len * b..];
        let next = &mut next_all[..len * b];
        for pos in 0..len {
            let j = patch.window.block_of(pos);
            let out = &mut next[pos * b..(pos + 1) * b];
            if patch.core[pos] {
                let pl = (pos + len - 1) % len;
                let pr = (pos + 1) % len;
                em_step_block(
                    model,
                    t,
                    base.h,
                    sqrt_h,
                    &prev[pl * b..(pl + 1) * b],
                    &prev[pos * b..(pos + 1) * b],
                    &prev[pr * b..(pr + 1) * b],
                    j,
                    store.increment(c, i, j),
                    &mut drift_buf,
                    out,
                );
                check_finite(out, c, i + 1, j)?;
            } else {
                out.copy_from_slice(base.state(i + 1, j));
            }
        }
    }
    Ok(patch)
}

/// RK4 stage of one block: `out = h * f(t_arg, x + coef*k_prev, ...)` where
/// the previous-stage contribution is omitted for the first stage. Shared
/// verbatim by the full and local solvers.
#[inline]
#[allow(clippy::too_many_arguments)]
fn rk4_stage_block(
    model: &ModelSpec,
    t_arg: f64,
    h: f64,
    x_left: &[f64],
    x_center: &[f64],
    x_right: &[f64],
    prev: Option<(&[f64], &[f64], &[f64], f64)>,
    j: usize,
    arg_buf: &mut [f64],
    out: &mut [f64],
) {
    let b = out.len();
    match prev {
        None => model.drift(t_arg, x_left, x_center, x_right, j, out),
        Some((kl, kc, kr, coef)) => {
            let (al, rest) = arg_buf.split_at_mut(b);
            let (ac, ar) = rest.split_at_mut(b);
            for q in 0..b {
                al[q] = x_left[q] + coef * kl[q];
                ac[q] = x_center[q] + coef * kc[q];
                ar[q] = x_right[q] + coef * kr[q];
            }
            model.drift(t_arg, al, ac, ar, j, out);
        }
    }
    for v in out.iter_mut() {
        *v *= h;
    }
}

const RK4_STAGE_COEF: [f64; 3] = [0.5, 0.5, 1.0];
const RK4_STAGE_TOFF: [f64; 4] = [0.0, 0.5, 0.5, 1.0];

#[inline]
fn rk4_combine(x: &[f64], k1: &[f64], k2: &[f64], k3: &[f64], k4: &[f64], out: &mut [f64]) {
    for q in 0..out.len() {
        out[q] = x[q] + (k1[q] + 2.0 * k2[q] + 2.0 * k3[q] + k4[q]) / 6.0;
    }
}

/// Full-state classic RK4 solve. Requires a model with zero diffusion; all
/// four stage arrays are retained so local re-solves can copy them.
pub fn rk4_full(model: &ModelSpec, x0: &State, h: f64, t_end: f64) -> Result<Trajectory> {
    if !model.is_ode() {
        return Err(Error::UnsupportedScheme(
            "RK4 requires zero diffusion; use Euler-Maruyama for stochastic models".into(),
        ));
    }
    let steps = grid_steps(h, t_end)?;
    let (m, b) = (model.m(), model.b());
    if x0.n() != model.n() || x0.b() != b {
        return Err(Error::InvalidArgument("initial condition does not match model shape".into()));
    }
    let mut traj = Trajectory::alloc(m, b, steps, h, t_end, true);
    traj.values[..m * b].copy_from_slice(x0.as_slice());
    let mut arg_buf = vec![0.0; 3 * b];
    for i in 0..steps {
        let t = i as f64 * h;
        let stages = traj.stages.as_mut().unwrap();
        let step_base = i * 4 * m * b;
        for s in 0..4 {
            let x_layer = &traj.values[i * m * b..(i + 1) * m * b];
            let (prev_stages, cur_stage) = stages[step_base..].split_at_mut(s * m * b);
            let cur = &mut cur_stage[..m * b];
            let prev_stage = (s > 0).then(|| &prev_stages[(s - 1) * m * b..s * m * b]);
            for j in 0..m {
                let jl = (j + m - 1) % m;
                let jr = (j + 1) % m;
                let prev = prev_stage.map(|ks| {
                    (
                        &ks[jl * b..(jl + 1) * b],
                        &ks[j * b..(j + 1) * b],
                        &ks[jr * b..(jr + 1) * b],
                        RK4_STAGE_COEF[s - 1],
                    )
                });
                let (head, tail) = cur.split_at_mut((j + 1) * b);
                let _ = tail;
                rk4_stage_block(
                    model,
                    t + RK4_STAGE_TOFF[s] * h,
                    h,
                    &x_layer[jl * b..(jl + 1) * b],
                    &x_layer[j * b..(j + 1) * b],
                    &x_layer[jr * b..(jr + 1) * b],
                    prev,
                    j,
                    &mut arg_buf,
                    &mut head[j * b..],
                );
            }
        }
        let stage_at = |s: usize, j: usize| -> &[f64] {
            let base = step_base + (s * m + j) * b;
            &stages[base..base + b]
        };
        let (prev_all, next_all) = traj.values.split_at_mut((i + 1) * m * b);
        let x_layer = &prev_all[i * m * b..];
        let next = &mut next_all[..m * b];
        for j in 0..m {
            rk4_combine(
                &x_layer[j * b..(j + 1) * b],
                stage_at(0, j),
                stage_at(1, j),
                stage_at(2, j),
                stage_at(3, j),
                &mut next[j * b..(j + 1) * b],
            );
            check_finite(&next[j * b..(j + 1) * b], 0, i + 1, j)?;
        }
    }
    Ok(traj)
}

/// Local RK4 solve: re-solves states and stages for blocks within `radius`
/// of `i_star`, copying base states and stages in a width-4 halo (the stage
/// dependency chain reaches distance `radius + 4`).
pub fn rk4_local(
    model: &ModelSpec,
    x_p: &State,
    base: &Trajectory,
    i_star: usize,
    radius: usize,
) -> Result<LocalPatch> {
    if !model.is_ode() {
        return Err(Error::UnsupportedScheme(
            "RK4 requires zero diffusion; use Euler-Maruyama for stochastic models".into(),
        ));
    }
    if !base.has_stages() {
        return Err(Error::ContractViolation(
            "local RK4 needs the base trajectory's stage values; base was not produced by RK4".into(),
        ));
    }
    check_local_contract(model, x_p, base, i_star)?;
    let (m, b) = (model.m(), model.b());
    let steps = base.steps;
    let h = base.h;
    let mut patch = LocalPatch::alloc(i_star, radius, 4, m, b, steps, true);
    let len = patch.window.len;
    for pos in 0..len {
        let j = patch.window.block_of(pos);
        patch.value_mut(0, pos).copy_from_slice(x_p.block(j));
    }
    let mut arg_buf = vec![0.0; 3 * b];
    for i in 0..steps {
        let t = i as f64 * h;
        // Copy halo states (next layer) and halo stages (this step) first so
        // the core recursion below never reads base mid-update.
        for pos in 0..len {
            if !patch.core[pos] {
                let j = patch.window.block_of(pos);
                let next_base = ((i + 1) * len + pos) * b;
                patch.values[next_base..next_base + b].copy_from_slice(base.state(i + 1, j));
                for s in 0..4 {
                    let sb = patch.stage_base(i, s, pos);
                    patch.stages.as_mut().unwrap()[sb..sb + b].copy_from_slice(base.stage(i, s, j));
                }
            }
        }
        let step_base = i * 4 * len * b;
        for s in 0..4 {
            let x_layer = &patch.values[i * len * b..(i + 1) * len * b];
            let stages = patch.stages.as_mut().unwrap();
            let (prev_stages, cur_stage) = stages[step_base..].split_at_mut(s * len * b);
            let cur = &mut cur_stage[..len * b];
            let prev_stage = (s > 0).then(|| &prev_stages[(s - 1) * len * b..s * len * b]);
            for pos in 0..len {
                if !patch.core[pos] {
                    continue;
                }
                let j = patch.window.block_of(pos);
                let pl = (pos + len - 1) % len;
                let pr = (pos + 1) % len;
                let prev = prev_stage.map(|ks| {
                    (
                        &ks[pl * b..(pl + 1) * b],
                        &ks[pos * b..(pos + 1) * b],
                        &ks[pr * b..(pr + 1) * b],
                        RK4_STAGE_COEF[s - 1],
                    )
                });
                let (head, tail) = cur.split_at_mut((pos + 1) * b);
                let _ = tail;
                rk4_stage_block(
                    model,
                    t + RK4_STAGE_TOFF[s] * h,
                    h,
                    &x_layer[pl * b..(pl + 1) * b],
                    &x_layer[pos * b..(pos + 1) * b],
                    &x_layer[pr * b..(pr + 1) * b],
                    prev,
                    j,
                    &mut arg_buf,
                    &mut head[pos * b..],
                );
            }
        }
        {
            let stages = patch.stages.as_ref().unwrap();
            let (prev_all, next_all) = patch.values.split_at_mut((i + 1) * len * b);
            let x_layer = &prev_all[i * len * b..];
            let next = &mut next_all[..len * b];
            for pos in 0..len {
                if !patch.core[pos] {
                    continue;
                }
                let j = patch.window.block_of(pos);
                let stage_at = |s: usize| -> &[f64] {
                    let base = step_base + (s * len + pos) * b;
                    &stages[base..base + b]
                };
                rk4_combine(
                    &x_layer[pos * b..(pos + 1) * b],
                    stage_at(0),
                    stage_at(1),
                    stage_at(2),
                    stage_at(3),
                    &mut next[pos * b..(pos + 1) * b],
                );
                check_finite(&next[pos * b..(pos + 1) * b], 0, i + 1, j)?;
            }
        }
    }
    Ok(patch)
}

/// Write a patch's re-solved core back into the trajectory it was computed
/// against: values (and stages, for RK4) on the core blocks at all grid
/// times; every other block is untouched.
pub fn commit_patch(base: &mut Trajectory, patch: &LocalPatch) -> Result<()> {
    if patch.b != base.b || patch.window.m != base.m || patch.steps != base.steps {
        return Err(Error::ContractViolation("patch shape does not match the trajectory".into()));
    }
    if patch.has_stages() != base.has_stages() {
        return Err(Error::ContractViolation(
            "patch and trajectory disagree on stage storage (different schemes?)".into(),
        ));
    }
    let (m, b) = (base.m, base.b);
    for pos in 0..patch.window.len {
        if !patch.core[pos] {
            continue;
        }
        let j = patch.window.block_of(pos);
        for i in 0..=patch.steps {
            let dst = (i * m + j) * b;
            base.values[dst..dst + b].copy_from_slice(patch.value(i, pos));
        }
        if let (Some(dst_stages), Some(_)) = (base.stages.as_mut(), patch.stages.as_ref()) {
            for i in 0..patch.steps {
                for s in 0..4 {
                    let dst = ((i * 4 + s) * m + j) * b;
                    let src = patch.stage_base(i, s, pos);
                    dst_stages[dst..dst + b].copy_from_slice(&patch.stages.as_ref().unwrap()[src..src + b]);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{linear_flow, lorenz96, Diffusion, LinearFlowParams};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn scalar_decay_model() -> ModelSpec {
        ModelSpec::new(
            1,
            1,
            Box::new(|_t, _l, c: &[f64], _r, _j, out: &mut [f64]| out[0] = -c[0]),
            Diffusion::Zero,
            Some((1.0, 0.0)),
        )
        .unwrap()
    }

    fn random_state(rng: &mut impl Rng, m: usize, b: usize, scale: f64) -> State {
        State::new((0..m * b).map(|_| rng.random_range(-scale..scale)).collect(), b).unwrap()
    }

    #[test]
    fn em_zero_drift_zero_diffusion_is_constant() {
        let model = ModelSpec::new(
            3,
            2,
            Box::new(|_t, _l, _c, _r, _j, out: &mut [f64]| out.fill(0.0)),
            Diffusion::Zero,
            Some((0.0, 0.0)),
        )
        .unwrap();
        let store = BrownianStore::sample(1, 1, 3, 2, 10, 0.1).unwrap();
        let x0 = State::new(vec![1.0, -2.0, 0.5, 3.0, -1.0, 4.0], 2).unwrap();
        let traj = em_full(&model, &x0, &store, 0, 0.1, 1.0).unwrap();
        for i in 0..=10 {
            assert_eq!(traj.state_layer(i), x0.as_slice());
        }
    }

    #[test]
    fn em_scalar_decay_closed_form() {
        // dx = -x dt, x0 = 1, h = 0.01, T = 0.4: Euler gives 0.99^40.
        let model = scalar_decay_model();
        let store = BrownianStore::degenerate(1, 1, 40, 0.01).unwrap();
        let x0 = State::new(vec![1.0], 1).unwrap();
        let traj = em_full(&model, &x0, &store, 0, 0.01, 0.4).unwrap();
        assert_relative_eq!(traj.terminal()[0], 0.6689717585696803, max_relative = 1e-12);
    }

    #[test]
    fn em_rejects_non_integer_grid() {
        let model = scalar_decay_model();
        let store = BrownianStore::degenerate(1, 1, 40, 0.011).unwrap();
        let x0 = State::new(vec![1.0], 1).unwrap();
        assert!(em_full(&model, &x0, &store, 0, 0.011, 0.4).is_err());
    }

    #[test]
    fn em_divergence_reports_location() {
        // Quadratic blow-up from a large initial value overflows quickly.
        let model = ModelSpec::new(
            2,
            2,
            Box::new(|_t, _l, c: &[f64], _r, _j, out: &mut [f64]| {
                for q in 0..out.len() {
                    out[q] = c[q] * c[q] * c[q];
                }
            }),
            Diffusion::Zero,
            None,
        )
        .unwrap();
        let store = BrownianStore::degenerate(2, 2, 50, 0.5).unwrap();
        let x0 = State::new(vec![1e200, 0.0, 0.0, 0.0], 2).unwrap();
        match em_full(&model, &x0, &store, 0, 0.5, 25.0) {
            Err(Error::Divergence { realization, step, block }) => {
                assert_eq!(realization, 0);
                assert_eq!(step, 1);
                assert_eq!(block, 0);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rk4_scalar_decay_one_step() {
        let model = scalar_decay_model();
        let x0 = State::new(vec![1.0], 1).unwrap();
        let traj = rk4_full(&model, &x0, 0.01, 0.01).unwrap();
        // Hand-expanded RK4 for dx = -x: 1 - h + h^2/2 - h^3/6 + h^4/24.
        assert_relative_eq!(traj.terminal()[0], 0.99004983375, max_relative = 1e-14);
    }

    #[test]
    fn rk4_zero_drift_constant_with_zero_stages() {
        let model = ModelSpec::new(
            2,
            2,
            Box::new(|_t, _l, _c, _r, _j, out: &mut [f64]| out.fill(0.0)),
            Diffusion::Zero,
            None,
        )
        .unwrap();
        let x0 = State::new(vec![1.0, 2.0, 3.0, 4.0], 2).unwrap();
        let traj = rk4_full(&model, &x0, 0.1, 0.5).unwrap();
        assert_eq!(traj.terminal(), x0.as_slice());
        for i in 0..traj.steps() {
            for s in 0..4 {
                for j in 0..2 {
                    assert!(traj.stage(i, s, j).iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn rk4_rejects_stochastic_model() {
        let model = linear_flow(8, 2, LinearFlowParams::default()).unwrap();
        let x0 = State::zeros(4, 2);
        assert!(matches!(
            rk4_full(&model, &x0, 0.01, 0.4),
            Err(Error::UnsupportedScheme(_))
        ));
    }

    #[test]
    fn rk4_step_halving_agreement_on_lorenz() {
        let model = lorenz96(40, 2).unwrap();
        // A moderate state near the attractor: short spin-up from a ramp.
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let warm: Vec<f64> = (0..40).map(|_| 8.0 + rng.random_range(-1.0..1.0)).collect();
        let warm = rk4_full(&model, &State::new(warm, 2).unwrap(), 0.01, 5.0).unwrap();
        let x0 = State::new(warm.terminal().to_vec(), 2).unwrap();
        let coarse = rk4_full(&model, &x0, 0.01, 0.4).unwrap();
        let mid = rk4_full(&model, &x0, 0.005, 0.4).unwrap();
        let fine = rk4_full(&model, &x0, 0.0025, 0.4).unwrap();
        let inf_dist = |a: &Trajectory, b: &Trajectory| -> f64 {
            a.terminal()
                .iter()
                .zip(b.terminal())
                .map(|(u, v)| (u - v).abs())
                .fold(0.0f64, f64::max)
        };
        // On the attractor the h -> h/2 disagreement sits around 1e-5 and
        // each halving shrinks it by ~2^4 (measured 15.7 for this state).
        let e1 = inf_dist(&coarse, &mid);
        let e2 = inf_dist(&mid, &fine);
        assert!(e1 < 1e-4, "step-halving disagreement {e1}");
        assert!((10.0..=24.0).contains(&(e1 / e2)), "convergence order ratio {}", e1 / e2);
    }

    #[test]
    fn em_local_no_perturbation_matches_base_bitwise() {
        let model = linear_flow(16, 2, LinearFlowParams::default()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let store = BrownianStore::sample(6, 2, 8, 2, 40, 0.01).unwrap();
        let x0 = random_state(&mut rng, 8, 2, 1.0);
        let base = em_full(&model, &x0, &store, 1, 0.01, 0.4).unwrap();
        let patch = em_local(&model, &x0, &base, &store, 1, 3, 2).unwrap();
        for i in 0..=40 {
            for j in 0..8 {
                if let Some(pos) = patch.core_position(j) {
                    assert_eq!(patch.value(i, pos), base.state(i, j));
                }
            }
        }
    }

    #[test]
    fn em_local_full_coverage_is_bitwise_full_solve() {
        // Radius floor(m/2) makes the re-solved core the whole torus.
        let model = linear_flow(14, 2, LinearFlowParams::default()).unwrap();
        let m = model.m();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let store = BrownianStore::sample(8, 1, m, 2, 40, 0.01).unwrap();
        let x0 = random_state(&mut rng, m, 2, 1.0);
        let base = em_full(&model, &x0, &store, 0, 0.01, 0.4).unwrap();
        for i_star in 0..m {
            let mut xp = x0.clone();
            xp.block_mut(i_star)[0] += 0.7;
            let full = em_full(&model, &xp, &store, 0, 0.01, 0.4).unwrap();
            let patch = em_local(&model, &xp, &base, &store, 0, i_star, m / 2).unwrap();
            for i in 0..=40 {
                for j in 0..m {
                    let pos = patch.core_position(j).expect("full coverage");
                    assert_eq!(patch.value(i, pos), full.state(i, j), "mismatch at t{i} block {j}");
                }
            }
        }
    }

    #[test]
    fn em_local_boundary_error_decays_inward() {
        // Perturb block 0 on an n=8, b=1 linear model with L=2: the local
        // patch error against a full re-solve is larger at the patch edge
        // (distance 2) than at the center.
        let params = LinearFlowParams::default();
        let model = linear_flow(8, 1, params).unwrap();
        let store = BrownianStore::sample(9, 1, 8, 1, 40, 0.01).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let x0 = random_state(&mut rng, 8, 1, 1.0);
        let base = em_full(&model, &x0, &store, 0, 0.01, 0.4).unwrap();
        let mut xp = x0.clone();
        xp.block_mut(0)[0] += 1.0;
        let oracle = em_full(&model, &xp, &store, 0, 0.01, 0.4).unwrap();
        let patch = em_local(&model, &xp, &base, &store, 0, 0, 2).unwrap();
        let max_err = |j: usize| -> f64 {
            let pos = patch.core_position(j).unwrap();
            (0..=40)
                .map(|i| (patch.value(i, pos)[0] - oracle.state(i, j)[0]).abs())
                .fold(0.0, f64::max)
        };
        assert!(max_err(0) < max_err(2), "center {} edge {}", max_err(0), max_err(2));
    }

    #[test]
    fn em_local_rejects_mismatched_initial_condition() {
        let model = linear_flow(8, 2, LinearFlowParams::default()).unwrap();
        let store = BrownianStore::sample(10, 1, 4, 2, 10, 0.01).unwrap();
        let x0 = State::zeros(4, 2);
        let base = em_full(&model, &x0, &store, 0, 0.01, 0.1).unwrap();
        let mut xp = x0.clone();
        xp.block_mut(1)[0] += 1.0;
        xp.block_mut(2)[0] += 1.0;
        assert!(matches!(
            em_local(&model, &xp, &base, &store, 0, 1, 1),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn rk4_local_no_perturbation_matches_base_bitwise() {
        let model = lorenz96(20, 2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let x0 = random_state(&mut rng, 10, 2, 3.0);
        let base = rk4_full(&model, &x0, 0.01, 0.4).unwrap();
        let patch = rk4_local(&model, &x0, &base, 4, 1).unwrap();
        for i in 0..=40 {
            for j in 0..10 {
                if let Some(pos) = patch.core_position(j) {
                    assert_eq!(patch.value(i, pos), base.state(i, j));
                }
            }
        }
    }

    #[test]
    fn rk4_local_full_coverage_is_bitwise_full_solve() {
        let model = lorenz96(18, 2).unwrap();
        let m = model.m();
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let x0 = random_state(&mut rng, m, 2, 3.0);
        let base = rk4_full(&model, &x0, 0.01, 0.4).unwrap();
        for i_star in [0, 3, m - 1] {
            let mut xp = x0.clone();
            xp.block_mut(i_star)[1] -= 0.4;
            let full = rk4_full(&model, &xp, 0.01, 0.4).unwrap();
            let patch = rk4_local(&model, &xp, &base, i_star, m / 2).unwrap();
            for i in 0..=40 {
                for j in 0..m {
                    let pos = patch.core_position(j).expect("full coverage");
                    assert_eq!(patch.value(i, pos), full.state(i, j));
                }
            }
        }
    }

    #[test]
    fn rk4_local_requires_stages() {
        let model = lorenz96(8, 2).unwrap();
        let store = BrownianStore::degenerate(4, 2, 10, 0.01).unwrap();
        let x0 = State::zeros(4, 2);
        // An EM-produced base has no stages.
        let base = em_full(&model, &x0, &store, 0, 0.01, 0.1).unwrap();
        assert!(matches!(
            rk4_local(&model, &x0, &base, 0, 1),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn commit_patch_touches_only_core_blocks() {
        let model = linear_flow(16, 2, LinearFlowParams::default()).unwrap();
        let store = BrownianStore::sample(11, 1, 8, 2, 20, 0.01).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let x0 = random_state(&mut rng, 8, 2, 1.0);
        let mut base = em_full(&model, &x0, &store, 0, 0.01, 0.2).unwrap();
        let before = base.clone();
        let mut xp = x0.clone();
        xp.block_mut(2)[0] += 0.3;
        let patch = em_local(&model, &xp, &base, &store, 0, 2, 1).unwrap();
        commit_patch(&mut base, &patch).unwrap();
        for i in 0..=20 {
            for j in 0..8 {
                if patch.core_position(j).is_some() {
                    let pos = patch.core_position(j).unwrap();
                    assert_eq!(base.state(i, j), patch.value(i, pos));
                } else {
                    assert_eq!(base.state(i, j), before.state(i, j), "halo block {j} modified");
                }
            }
        }
    }

    #[test]
    fn commit_no_perturbation_patch_is_identity() {
        let model = lorenz96(12, 2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let x0 = random_state(&mut rng, 6, 2, 2.0);
        let mut base = rk4_full(&model, &x0, 0.01, 0.2).unwrap();
        let before = base.clone();
        let patch = rk4_local(&model, &x0, &base, 3, 1).unwrap();
        commit_patch(&mut base, &patch).unwrap();
        assert_eq!(base, before);
    }

    #[test]
    fn commit_full_coverage_patch_equals_full_solve() {
        let model = linear_flow(10, 1, LinearFlowParams::default()).unwrap();
        let store = BrownianStore::sample(13, 1, 10, 1, 20, 0.01).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let x0 = random_state(&mut rng, 10, 1, 1.0);
        let mut base = em_full(&model, &x0, &store, 0, 0.01, 0.2).unwrap();
        let mut xp = x0.clone();
        xp.block_mut(7)[0] -= 2.0;
        let patch = em_local(&model, &xp, &base, &store, 0, 7, 5).unwrap();
        commit_patch(&mut base, &patch).unwrap();
        let oracle = em_full(&model, &xp, &store, 0, 0.01, 0.2).unwrap();
        assert_eq!(base, oracle);
    }

    #[test]
    fn em_strong_error_halves_with_step_for_additive_noise() {
        // Build nested stores so the coarse increments are sums of the fine
        // ones; for additive noise EM is strong order 1.
        let params = LinearFlowParams::default();
        let model = linear_flow(8, 1, params).unwrap();
        let m = 8;
        let h_fine = 0.01 / 8.0;
        let steps_fine = 320;
        let n_rel = 48;
        let fine = BrownianStore::sample(21, n_rel, m, 1, steps_fine, h_fine).unwrap();
        let coarsen = |ratio: usize, h: f64| -> BrownianStore {
            let steps = steps_fine / ratio;
            let mut vals = vec![0.0; n_rel * steps * m];
            for c in 0..n_rel {
                for i in 0..steps {
                    for j in 0..m {
                        let mut acc = 0.0;
                        for k in 0..ratio {
                            acc += fine.increment(c, i * ratio + k, j)[0];
                        }
                        vals[(c * steps + i) * m + j] = acc / (ratio as f64).sqrt();
                    }
                }
            }
            BrownianStore::from_raw(n_rel, m, 1, steps, h, vals).unwrap()
        };
        let store_h = coarsen(8, 0.01);
        let store_h2 = coarsen(4, 0.005);
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let x0 = random_state(&mut rng, 8, 1, 1.0);
        let mut err_h = 0.0;
        let mut err_h2 = 0.0;
        for c in 0..n_rel {
            let reference = em_full(&model, &x0, &fine, c, h_fine, 0.4).unwrap();
            let sol_h = em_full(&model, &x0, &store_h, c, 0.01, 0.4).unwrap();
            let sol_h2 = em_full(&model, &x0, &store_h2, c, 0.005, 0.4).unwrap();
            let dist = |a: &[f64], b: &[f64]| -> f64 {
                a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
            };
            err_h += dist(sol_h.terminal(), reference.terminal());
            err_h2 += dist(sol_h2.terminal(), reference.terminal());
        }
        let ratio = err_h / err_h2;
        assert!((1.5..=2.5).contains(&ratio), "strong-order ratio {ratio}");
    }
}
