//! Metropolis-within-Gibbs chains, vanilla and accelerated.
//!
//! Both samplers share one sweep skeleton: draw a block proposal from the
//! prior conditional, evaluate a likelihood ratio, accept or reject. They
//! differ only in how the proposal's trajectories are obtained — a full
//! re-solve per realization (MwG) or a local patch against the cached
//! trajectories (a-MwG) — and both consume the random stream identically,
//! which is what makes the exact-equivalence oracle (maximal radius, full
//! acceptance, same seed, bitwise-equal chains) possible.
//!
//! The prior-conditional proposal cancels the prior density in the MH
//! ratio, so the acceptance probability is the bare likelihood ratio.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brownian::BrownianStore;
use crate::error::{Error, Result};
use crate::integrate::{
    commit_patch, em_full, em_local, grid_steps, rk4_full, rk4_local, LocalPatch, Trajectory, TrajectoryCache,
};
use crate::likelihood::{local_pm_log_ratio, ObservationModel};
use crate::model::{block_distance, ModelSpec, State};
use crate::prior::GaussianPrior;

/// Numerical scheme driving the trajectory solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Em,
    Rk4,
}

/// How the acceptance ratio is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptanceMode {
    /// Global (pseudo-marginal) log-likelihood difference.
    Full,
    /// Windowed ratio restricted to `window` observed state components
    /// around the perturbed block.
    Localized { window: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Mwg,
    Amwg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanOrder {
    /// Fixed 0..m block order within a sweep.
    Systematic,
    /// Uniformly random block choice, m proposals per sweep.
    Random,
}

/// Driver configuration for one chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Number of sweeps K (each sweep makes m block proposals).
    pub sweeps: usize,
    pub block_size: usize,
    /// Local domain radius L (used by a-MwG only).
    pub radius: usize,
    /// Brownian realizations S backing the pseudo-marginal likelihood.
    pub n_realizations: usize,
    pub h: f64,
    pub t_end: f64,
    pub scheme: Scheme,
    pub acceptance: AcceptanceMode,
    /// Propose well-separated blocks concurrently (a-MwG + localized only).
    pub parallel: bool,
    pub seed: u64,
    #[serde(default = "default_scan")]
    pub scan: ScanOrder,
    /// Optional full re-solve + likelihood refresh every this many sweeps.
    /// Off by default, matching the reference experiments.
    #[serde(default)]
    pub resync_every: Option<usize>,
}

fn default_scan() -> ScanOrder {
    ScanOrder::Systematic
}

impl SamplerConfig {
    /// Cross-field validation against the model this chain will run on.
    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        if self.sweeps == 0 {
            return Err(Error::InvalidArgument("sweep count K must be at least 1".into()));
        }
        if self.block_size != model.b() {
            return Err(Error::InvalidArgument(format!(
                "config block size {} does not match model block size {}",
                self.block_size,
                model.b()
            )));
        }
        grid_steps(self.h, self.t_end)?;
        if self.n_realizations == 0 {
            return Err(Error::InvalidArgument("need at least one Brownian realization".into()));
        }
        match self.scheme {
            Scheme::Rk4 => {
                if !model.is_ode() {
                    return Err(Error::UnsupportedScheme(
                        "RK4 requested for a model with nonzero diffusion".into(),
                    ));
                }
                if self.n_realizations != 1 {
                    return Err(Error::InvalidArgument(
                        "the deterministic RK4 route uses exactly one realization (S = 1)".into(),
                    ));
                }
            }
            Scheme::Em => {}
        }
        let m = model.m();
        if self.kind == SamplerKind::Amwg && self.radius > m / 2 {
            return Err(Error::InvalidArgument(format!(
                "radius {} exceeds the maximal torus radius {}",
                self.radius,
                m / 2
            )));
        }
        if let AcceptanceMode::Localized { window } = self.acceptance {
            if self.kind == SamplerKind::Mwg {
                return Err(Error::InvalidArgument(
                    "localized acceptance requires the accelerated sampler".into(),
                ));
            }
            if window < model.b() || window > model.n() {
                return Err(Error::InvalidArgument(format!(
                    "observation window {window} out of range [{}, {}]",
                    model.b(),
                    model.n()
                )));
            }
        }
        if self.parallel {
            if self.kind != SamplerKind::Amwg || matches!(self.acceptance, AcceptanceMode::Full) {
                return Err(Error::InvalidArgument(
                    "parallel block groups need a-MwG with localized acceptance (per-proposal ratios must not read global state)".into(),
                ));
            }
            if 2 * self.radius + 2 > m {
                return Err(Error::InvalidArgument(format!(
                    "parallel groups need 2L+2 <= m, got L={}, m={m}",
                    self.radius
                )));
            }
        }
        Ok(())
    }
}

/// Current chain iterate plus everything cached for it.
pub struct ChainState {
    /// Current initial-condition iterate.
    pub x: State,
    /// Per-realization trajectories from `x`.
    pub caches: TrajectoryCache,
    /// Cached pseudo-marginal log-likelihood of `x`; maintained under full
    /// acceptance, `None` under localized acceptance where the global value
    /// is never formed.
    pub log_lik: Option<f64>,
    pub accepted: Vec<u64>,
    pub proposed: Vec<u64>,
}

fn solve_full_all(
    model: &ModelSpec,
    x: &State,
    store: &BrownianStore,
    scheme: Scheme,
    h: f64,
    t_end: f64,
) -> Result<Vec<Trajectory>> {
    match scheme {
        Scheme::Em => (0..store.n_realizations())
            .into_par_iter()
            .map(|c| em_full(model, x, store, c, h, t_end))
            .collect(),
        Scheme::Rk4 => Ok(vec![rk4_full(model, x, h, t_end)?]),
    }
}

fn solve_local_all(
    model: &ModelSpec,
    x_p: &State,
    caches: &TrajectoryCache,
    store: &BrownianStore,
    scheme: Scheme,
    i_star: usize,
    radius: usize,
) -> Result<Vec<LocalPatch>> {
    match scheme {
        Scheme::Em => (0..caches.n_realizations())
            .into_par_iter()
            .map(|c| em_local(model, x_p, caches.get(c), store, c, i_star, radius))
            .collect(),
        Scheme::Rk4 => Ok(vec![rk4_local(model, x_p, caches.get(0), i_star, radius)?]),
    }
}

/// Initialize a chain: draw `x0` from the prior, run the full solves, cache
/// the likelihood.
pub fn init_chain<R: Rng + ?Sized>(
    model: &ModelSpec,
    prior: &GaussianPrior,
    obs: &ObservationModel,
    store: &BrownianStore,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<ChainState> {
    let x = prior.sample(rng);
    let trajs = solve_full_all(model, &x, store, config.scheme, config.h, config.t_end)?;
    let log_lik = obs.pm_loglik(trajs.iter().map(|t| t.terminal()));
    let caches = TrajectoryCache::new(trajs)?;
    Ok(ChainState {
        x,
        caches,
        log_lik: match config.acceptance {
            AcceptanceMode::Full => Some(log_lik),
            AcceptanceMode::Localized { .. } => None,
        },
        accepted: vec![0; model.m()],
        proposed: vec![0; model.m()],
    })
}

enum Route {
    Full,
    Local { radius: usize },
}

fn propose_and_decide<R: Rng + ?Sized>(
    chain: &mut ChainState,
    model: &ModelSpec,
    prior: &GaussianPrior,
    obs: &ObservationModel,
    store: &BrownianStore,
    config: &SamplerConfig,
    route: &Route,
    j: usize,
    rng: &mut R,
) -> Result<()> {
    let block = prior.conditional_block_sample(&chain.x, j, rng);
    let x_p = chain.x.with_block(j, &block);
    chain.proposed[j] += 1;

    enum Prepared {
        FullSolves(Vec<Trajectory>, f64),
        Patches(Vec<LocalPatch>, Option<f64>),
    }

    let (log_ratio, prepared) = match route {
        Route::Full => {
            let trajs = solve_full_all(model, &x_p, store, config.scheme, config.h, config.t_end)?;
            let ll_p = obs.pm_loglik(trajs.iter().map(|t| t.terminal()));
            let ll_o = chain.log_lik.expect("full acceptance maintains the cached log-likelihood");
            (ll_p - ll_o, Prepared::FullSolves(trajs, ll_p))
        }
        Route::Local { radius } => {
            let patches = solve_local_all(model, &x_p, &chain.caches, store, config.scheme, j, *radius)?;
            match config.acceptance {
                AcceptanceMode::Full => {
                    let assembled: Vec<Vec<f64>> = patches
                        .iter()
                        .zip(chain.caches.iter())
                        .map(|(p, t)| p.assemble_terminal(t))
                        .collect();
                    let ll_p = obs.pm_loglik(assembled.iter().map(|v| v.as_slice()));
                    let ll_o = chain.log_lik.expect("full acceptance maintains the cached log-likelihood");
                    (ll_p - ll_o, Prepared::Patches(patches, Some(ll_p)))
                }
                AcceptanceMode::Localized { window } => {
                    let lr = local_pm_log_ratio(obs, &chain.caches, &patches, j, window)?;
                    (lr, Prepared::Patches(patches, None))
                }
            }
        }
    };

    let alpha = log_ratio.exp().min(1.0);
    let u: f64 = rng.random();
    if u <= alpha {
        chain.accepted[j] += 1;
        chain.x = x_p;
        match prepared {
            Prepared::FullSolves(trajs, ll_p) => {
                chain.caches = TrajectoryCache::new(trajs)?;
                chain.log_lik = Some(ll_p);
            }
            Prepared::Patches(patches, ll_p) => {
                for (c, patch) in patches.iter().enumerate() {
                    commit_patch(chain.caches.get_mut(c), patch)?;
                }
                chain.log_lik = ll_p;
            }
        }
        // The cached value must equal a recomputation from the committed
        // caches; cheap enough to verify on every accept in debug builds.
        #[cfg(debug_assertions)]
        if let Some(ll) = chain.log_lik {
            let recomputed = obs.pm_loglik(chain.caches.iter().map(|t| t.terminal()));
            debug_assert_eq!(ll, recomputed, "cached log-likelihood drifted from the caches");
        }
    }
    Ok(())
}

fn scan_blocks<R: Rng + ?Sized>(m: usize, order: ScanOrder, rng: &mut R) -> Vec<usize> {
    match order {
        ScanOrder::Systematic => (0..m).collect(),
        ScanOrder::Random => (0..m).map(|_| rng.random_range(0..m)).collect(),
    }
}

/// One vanilla MwG sweep: every proposal triggers full re-solves for all
/// realizations.
pub fn mwg_sweep<R: Rng + ?Sized>(
    chain: &mut ChainState,
    model: &ModelSpec,
    prior: &GaussianPrior,
    obs: &ObservationModel,
    store: &BrownianStore,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<()> {
    for j in scan_blocks(model.m(), config.scan, rng) {
        propose_and_decide(chain, model, prior, obs, store, config, &Route::Full, j, rng)?;
    }
    Ok(())
}

/// One accelerated sweep: proposals are solved as local patches against the
/// cached trajectories and committed on acceptance.
pub fn amwg_sweep<R: Rng + ?Sized>(
    chain: &mut ChainState,
    model: &ModelSpec,
    prior: &GaussianPrior,
    obs: &ObservationModel,
    store: &BrownianStore,
    config: &SamplerConfig,
    rng: &mut R,
    radius: usize,
) -> Result<()> {
    for j in scan_blocks(model.m(), config.scan, rng) {
        propose_and_decide(chain, model, prior, obs, store, config, &Route::Local { radius }, j, rng)?;
    }
    Ok(())
}

/// Splitmix64, used to derive independent per-purpose and per-block seeds.
fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One parallel a-MwG sweep: the schedule's groups are processed in order;
/// within a group every block proposal is computed concurrently against the
/// group-start state with its own derived random stream, then the accepted
/// patches are committed in ascending block order.
fn amwg_parallel_sweep(
    chain: &mut ChainState,
    model: &ModelSpec,
    prior: &GaussianPrior,
    obs: &ObservationModel,
    store: &BrownianStore,
    config: &SamplerConfig,
    schedule: &[Vec<usize>],
    sweep_index: usize,
) -> Result<()> {
    let radius = config.radius;
    for group in schedule {
        struct Decision {
            j: usize,
            x_p: State,
            patches: Vec<LocalPatch>,
            accept: bool,
        }
        let decisions: Vec<Decision> = group
            .par_iter()
            .map(|&j| -> Result<Decision> {
                let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(
                    config.seed,
                    0x7000 ^ ((sweep_index as u64) << 20) ^ j as u64,
                ));
                let block = prior.conditional_block_sample(&chain.x, j, &mut rng);
                let x_p = chain.x.with_block(j, &block);
                let patches = solve_local_all(model, &x_p, &chain.caches, store, config.scheme, j, radius)?;
                let window = match config.acceptance {
                    AcceptanceMode::Localized { window } => window,
                    AcceptanceMode::Full => unreachable!("validated at config time"),
                };
                let lr = local_pm_log_ratio(obs, &chain.caches, &patches, j, window)?;
                let u: f64 = rng.random();
                Ok(Decision {
                    j,
                    x_p,
                    patches,
                    accept: u <= lr.exp().min(1.0),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for d in decisions {
            chain.proposed[d.j] += 1;
            if d.accept {
                chain.accepted[d.j] += 1;
                chain.x.block_mut(d.j).copy_from_slice(d.x_p.block(d.j));
                for (c, patch) in d.patches.iter().enumerate() {
                    commit_patch(chain.caches.get_mut(c), patch)?;
                }
            }
        }
    }
    Ok(())
}

/// Groups of block indices that are pairwise at torus distance `2L+2` or
/// more, i.e. their local domains plus boundary reads never overlap.
///
/// The groups partition `0..m`, the construction is deterministic, and the
/// group count is the smallest round-robin stride that satisfies the
/// separation constraint (minimal whenever `ceil(m / floor(m / (2L+2)))`
/// groups suffice, which pigeonhole makes a lower bound).
pub fn parallel_block_schedule(m: usize, radius: usize) -> Result<Vec<Vec<usize>>> {
    let sep = 2 * radius + 2;
    if sep > m {
        return Err(Error::InvalidArgument(format!(
            "no two blocks are 2L+2 = {sep} apart on a torus of {m} blocks"
        )));
    }
    let per_group = m / sep;
    let mut n_groups = m.div_ceil(per_group);
    loop {
        if n_groups >= m {
            return Ok((0..m).map(|j| vec![j]).collect());
        }
        let groups: Vec<Vec<usize>> = (0..n_groups)
            .map(|g| (g..m).step_by(n_groups).collect())
            .collect();
        let valid = groups.iter().all(|grp| {
            grp.iter().enumerate().all(|(a, &i)| {
                grp.iter().skip(a + 1).all(|&j| block_distance(i, j, m).unwrap() >= sep)
            })
        });
        if valid {
            return Ok(groups);
        }
        n_groups += 1;
    }
}

/// Everything a finished run reports.
#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    /// One row per sweep: the iterate after the sweep, flattened.
    pub samples: Vec<Vec<f64>>,
    pub accepted: Vec<u64>,
    pub proposed: Vec<u64>,
    /// Wall-clock seconds of the initial full computation.
    pub init_secs: f64,
    /// Wall-clock seconds of the sweep loop.
    pub sweep_secs: f64,
    pub seed: u64,
}

impl RunResult {
    pub fn acceptance_rate(&self) -> f64 {
        let acc: u64 = self.accepted.iter().sum();
        let prop: u64 = self.proposed.iter().sum();
        if prop == 0 {
            f64::NAN
        } else {
            acc as f64 / prop as f64
        }
    }
}

/// Drive a full chain: sample the Brownian store, draw the initial iterate,
/// then run K sweeps of the configured sampler.
pub fn run_chain(
    config: &SamplerConfig,
    model: &ModelSpec,
    prior: &GaussianPrior,
    obs: &ObservationModel,
) -> Result<RunResult> {
    config.validate(model)?;
    if prior.n() != model.n() || prior.b() != model.b() {
        return Err(Error::InvalidArgument("prior does not match model blocking".into()));
    }
    let steps = grid_steps(config.h, config.t_end)?;
    let store = match config.scheme {
        Scheme::Rk4 => BrownianStore::degenerate(model.m(), model.b(), steps, config.h)?,
        Scheme::Em => BrownianStore::sample(
            mix_seed(config.seed, 0xb0),
            config.n_realizations,
            model.m(),
            model.b(),
            steps,
            config.h,
        )?,
    };
    run_chain_with_store(config, model, prior, obs, &store)
}

/// Like [`run_chain`] but against a caller-supplied Brownian store, so
/// experiments can replay bit-exactly from a dumped store.
pub fn run_chain_with_store(
    config: &SamplerConfig,
    model: &ModelSpec,
    prior: &GaussianPrior,
    obs: &ObservationModel,
    store: &BrownianStore,
) -> Result<RunResult> {
    config.validate(model)?;
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(config.seed, 0xc4a1));
    let t0 = Instant::now();
    let mut chain = init_chain(model, prior, obs, store, config, &mut rng)?;
    let init_secs = t0.elapsed().as_secs_f64();
    let schedule = if config.parallel {
        Some(parallel_block_schedule(model.m(), config.radius)?)
    } else {
        None
    };
    let mut samples = Vec::with_capacity(config.sweeps);
    let t1 = Instant::now();
    for k in 0..config.sweeps {
        match (&config.kind, &schedule) {
            (SamplerKind::Mwg, _) => {
                mwg_sweep(&mut chain, model, prior, obs, store, config, &mut rng)?;
            }
            (SamplerKind::Amwg, None) => {
                amwg_sweep(&mut chain, model, prior, obs, store, config, &mut rng, config.radius)?;
            }
            (SamplerKind::Amwg, Some(sched)) => {
                amwg_parallel_sweep(&mut chain, model, prior, obs, store, config, sched, k)?;
            }
        }
        if let Some(every) = config.resync_every {
            if every > 0 && (k + 1) % every == 0 {
                let trajs = solve_full_all(model, &chain.x, store, config.scheme, config.h, config.t_end)?;
                let ll = obs.pm_loglik(trajs.iter().map(|t| t.terminal()));
                chain.caches = TrajectoryCache::new(trajs)?;
                if chain.log_lik.is_some() {
                    chain.log_lik = Some(ll);
                }
            }
        }
        samples.push(chain.x.as_slice().to_vec());
    }
    let sweep_secs = t1.elapsed().as_secs_f64();
    Ok(RunResult {
        samples,
        accepted: chain.accepted,
        proposed: chain.proposed,
        init_secs,
        sweep_secs,
        seed: config.seed,
    })
}
