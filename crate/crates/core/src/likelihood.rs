//! Observation model and the likelihoods driving the Metropolis step.
//!
//! Everything is computed in log space end to end: the pseudo-marginal
//! average over Brownian realizations goes through a max-shifted
//! log-sum-exp, so acceptance ratios stay finite even when every individual
//! `exp(-q/2)` underflows. The localized ratio restricts the observation to
//! a component window around the perturbed block, which is what keeps a
//! proposal's acceptance cost independent of the state dimension.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::integrate::{LocalPatch, TrajectoryCache};

/// Max-shifted log of a sum of exponentials.
pub fn log_sum_exp(vals: &[f64]) -> f64 {
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Linear-Gaussian observation of the terminal state: `y = H x(T) + xi`,
/// `xi ~ N(0, R)`.
pub struct ObservationModel {
    h: DMatrix<f64>,
    r: DMatrix<f64>,
    r_chol: Cholesky<f64, nalgebra::Dyn>,
    y: DVector<f64>,
    /// Nonzero column indices of each observation row.
    row_support: Vec<Vec<usize>>,
}

impl ObservationModel {
    pub fn new(h: DMatrix<f64>, r: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        let n_obs = h.nrows();
        if y.len() != n_obs || r.nrows() != n_obs || r.ncols() != n_obs {
            return Err(Error::InvalidArgument(format!(
                "observation shapes disagree: H is {}x{}, R is {}x{}, y has {}",
                h.nrows(),
                h.ncols(),
                r.nrows(),
                r.ncols(),
                y.len()
            )));
        }
        let mut row_support = Vec::with_capacity(n_obs);
        for i in 0..n_obs {
            let support: Vec<usize> = (0..h.ncols()).filter(|&q| h[(i, q)] != 0.0).collect();
            if support.is_empty() {
                return Err(Error::InvalidArgument(format!("observation row {i} reads nothing")));
            }
            row_support.push(support);
        }
        let r_chol = Cholesky::new(r.clone())
            .ok_or_else(|| Error::NotPositiveDefinite("observation noise covariance".into()))?;
        Ok(Self {
            h,
            r,
            r_chol,
            y: DVector::from_vec(y),
            row_support,
        })
    }

    /// Every-other-component observation: `H` is `n/2 x n` with ones at
    /// columns `0, 2, 4, ...` and `R = noise_var * I`.
    pub fn every_other(n: usize, noise_var: f64, y: Vec<f64>) -> Result<Self> {
        if n % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "every-other-component observation needs even n, got {n}"
            )));
        }
        let mut h = DMatrix::zeros(n / 2, n);
        for i in 0..n / 2 {
            h[(i, 2 * i)] = 1.0;
        }
        Self::new(h, DMatrix::identity(n / 2, n / 2) * noise_var, y)
    }

    /// Draw synthetic data from a known terminal state: `y = H x + chol(R) z`.
    pub fn synthesize_data<R: Rng + ?Sized>(
        h: DMatrix<f64>,
        r: DMatrix<f64>,
        truth_terminal: &[f64],
        rng: &mut R,
    ) -> Result<Self> {
        let chol = Cholesky::new(r.clone())
            .ok_or_else(|| Error::NotPositiveDefinite("observation noise covariance".into()))?;
        let x = DVector::from_column_slice(truth_terminal);
        let z = DVector::from_fn(r.nrows(), |_, _| StandardNormal.sample(rng));
        let y = &h * x + chol.l() * z;
        Self::new(h, r, y.as_slice().to_vec())
    }

    pub fn n_obs(&self) -> usize {
        self.h.nrows()
    }

    pub fn n_state(&self) -> usize {
        self.h.ncols()
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    /// `||y - H x||^2_R` for a flat terminal state.
    pub fn residual_quad_form(&self, terminal: &[f64]) -> f64 {
        let x = DVector::from_column_slice(terminal);
        let resid = &self.y - &self.h * x;
        self.r_chol.solve(&resid).dot(&resid)
    }

    /// Exact ODE log-likelihood `-1/2 ||y - H x(T)||^2_R` (up to the constant
    /// the MH ratio cancels).
    pub fn ode_loglik(&self, terminal: &[f64]) -> f64 {
        -0.5 * self.residual_quad_form(terminal)
    }

    /// Pseudo-marginal log-likelihood
    /// `log (1/S) sum_c exp(-1/2 ||y - H x(T,c)||^2_R)`, in log space.
    pub fn pm_loglik<'a, I>(&self, terminals: I) -> f64
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let logs: Vec<f64> = terminals
            .into_iter()
            .map(|t| -0.5 * self.residual_quad_form(t))
            .collect();
        assert!(!logs.is_empty(), "pseudo-marginal likelihood needs at least one realization");
        log_sum_exp(&logs) - (logs.len() as f64).ln()
    }

    /// The observation restricted to a window of `obs_window` components
    /// centered on block `i_star`: keeps the rows whose support lies fully
    /// inside the window.
    pub fn local_window(&self, i_star: usize, obs_window: usize, m: usize, b: usize) -> Result<ObservationWindow> {
        let n = self.n_state();
        if m * b != n {
            return Err(Error::InvalidArgument(format!(
                "window blocking {m}x{b} does not match observed state dimension {n}"
            )));
        }
        if obs_window < b {
            return Err(Error::InvalidArgument(format!(
                "observation window {obs_window} smaller than one block ({b})"
            )));
        }
        if obs_window > n {
            return Err(Error::InvalidArgument(format!(
                "observation window {obs_window} exceeds state dimension {n}"
            )));
        }
        if i_star >= m {
            return Err(Error::InvalidArgument(format!("center block {i_star} out of range")));
        }
        let left = (obs_window - b) / 2;
        let start = (i_star * b + n - left % n) % n;
        let comps: Vec<usize> = (0..obs_window).map(|k| (start + k) % n).collect();
        let mut in_window = vec![usize::MAX; n];
        for (k, &q) in comps.iter().enumerate() {
            in_window[q] = k;
        }
        let rows: Vec<usize> = (0..self.n_obs())
            .filter(|&i| self.row_support[i].iter().all(|&q| in_window[q] != usize::MAX))
            .collect();
        let mut h_sub = DMatrix::zeros(rows.len(), comps.len());
        for (ri, &i) in rows.iter().enumerate() {
            for &q in &self.row_support[i] {
                h_sub[(ri, in_window[q])] = self.h[(i, q)];
            }
        }
        let r_sub = self.r.select_rows(rows.iter()).select_columns(rows.iter());
        let r_chol = Cholesky::new(r_sub)
            .ok_or_else(|| Error::NotPositiveDefinite("windowed observation noise".into()))?;
        let y_sub = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i]));
        Ok(ObservationWindow {
            comps,
            h_sub,
            r_chol,
            y_sub,
        })
    }
}

/// A windowed view of the observation, produced by
/// [`ObservationModel::local_window`].
pub struct ObservationWindow {
    comps: Vec<usize>,
    h_sub: DMatrix<f64>,
    r_chol: Cholesky<f64, nalgebra::Dyn>,
    y_sub: DVector<f64>,
}

impl ObservationWindow {
    pub fn n_rows(&self) -> usize {
        self.y_sub.len()
    }

    pub fn components(&self) -> &[usize] {
        &self.comps
    }

    fn quad_form(&self, window_state: &DVector<f64>) -> f64 {
        let resid = &self.y_sub - &self.h_sub * window_state;
        self.r_chol.solve(&resid).dot(&resid)
    }
}

/// Localized pseudo-marginal log acceptance ratio `log(p_hat_p / p_hat_o)`.
///
/// Both sums run over the same windowed observation rows; the proposal's
/// terminal values come from the patches on their re-solved cores and from
/// the cached trajectories everywhere else.
pub fn local_pm_log_ratio(
    obs: &ObservationModel,
    base: &TrajectoryCache,
    patches: &[LocalPatch],
    i_star: usize,
    obs_window: usize,
) -> Result<f64> {
    let s = base.n_realizations();
    if patches.len() != s {
        return Err(Error::ContractViolation(format!(
            "{} patches for {s} cached realizations",
            patches.len()
        )));
    }
    for p in patches {
        if p.center() != i_star {
            return Err(Error::ContractViolation(format!(
                "patch centered at {} used for block {i_star}",
                p.center()
            )));
        }
    }
    let first = base.get(0);
    let (m, b) = (first.m(), first.b());
    let window = obs.local_window(i_star, obs_window, m, b)?;
    let mut log_p = Vec::with_capacity(s);
    let mut log_o = Vec::with_capacity(s);
    let mut xw_p = DVector::zeros(window.comps.len());
    let mut xw_o = DVector::zeros(window.comps.len());
    for c in 0..s {
        let traj = base.get(c);
        let patch = &patches[c];
        for (k, &q) in window.comps.iter().enumerate() {
            let j = q / b;
            xw_o[k] = traj.state(traj.steps(), j)[q % b];
            xw_p[k] = patch.terminal_block(traj, j)[q % b];
        }
        log_p.push(-0.5 * window.quad_form(&xw_p));
        log_o.push(-0.5 * window.quad_form(&xw_o));
    }
    Ok(log_sum_exp(&log_p) - log_sum_exp(&log_o))
}

/// Write observation data as CSV, one value per line.
pub fn save_vector_csv<P: AsRef<Path>>(path: P, values: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in values {
        writeln!(w, "{v}")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a one-value-per-line CSV written by [`save_vector_csv`].
pub fn load_vector_csv<P: AsRef<Path>>(path: P) -> Result<Vec<f64>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(
            t.parse::<f64>()
                .map_err(|e| Error::Format(format!("line {}: {e}", ln + 1)))?,
        );
    }
    Ok(out)
}

/// Read an explicit observation matrix from CSV (comma-separated rows).
pub fn load_matrix_csv<P: AsRef<Path>>(path: P) -> Result<DMatrix<f64>> {
    let r = BufReader::new(File::open(path)?);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> = t.split(',').map(|v| v.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| Error::Format(format!("line {}: {e}", ln + 1)))?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Format(format!("line {}: ragged row", ln + 1)));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format("empty matrix file".into()));
    }
    let (nr, nc) = (rows.len(), rows[0].len());
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}
