//! Fixed Brownian-increment realizations backing the pseudo-marginal
//! likelihood.
//!
//! The store holds raw standard-normal draws; the `sqrt(h)` scaling is the
//! integrator's job, so one store serves any step-consistent scheme. The
//! contents are sampled once per run and never refreshed while a chain is
//! running.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"AMWGBWN1";

/// `S` realizations of per-block standard-normal increments on the time grid.
///
/// Layout is time-major within each realization: `[c][i][j][component]`, so a
/// local patch reading all steps of a few blocks walks the buffer with a
/// fixed stride.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianStore {
    n_realizations: usize,
    steps: usize,
    m: usize,
    b: usize,
    h: f64,
    increments: Vec<f64>,
}

impl BrownianStore {
    /// Sample a fully populated store. Deterministic in `seed`.
    pub fn sample(seed: u64, n_realizations: usize, m: usize, b: usize, steps: usize, h: f64) -> Result<Self> {
        if n_realizations == 0 || m == 0 || b == 0 || steps == 0 {
            return Err(Error::InvalidArgument(format!(
                "store dimensions must be positive, got S={n_realizations}, m={m}, b={b}, steps={steps}"
            )));
        }
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::InvalidArgument(format!("step size must be positive, got {h}")));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let len = n_realizations * steps * m * b;
        let mut increments = Vec::with_capacity(len);
        for _ in 0..len {
            increments.push(StandardNormal.sample(&mut rng));
        }
        Ok(Self {
            n_realizations,
            steps,
            m,
            b,
            h,
            increments,
        })
    }

    /// Build a store from externally supplied increments (layout
    /// `[c][i][j][component]`). Used for replay and refinement tests.
    pub fn from_raw(
        n_realizations: usize,
        m: usize,
        b: usize,
        steps: usize,
        h: f64,
        increments: Vec<f64>,
    ) -> Result<Self> {
        if increments.len() != n_realizations * steps * m * b {
            return Err(Error::InvalidArgument(format!(
                "increment buffer has length {}, expected {}",
                increments.len(),
                n_realizations * steps * m * b
            )));
        }
        Ok(Self {
            n_realizations,
            steps,
            m,
            b,
            h,
            increments,
        })
    }

    /// Degenerate single-realization store of zeros, for the ODE case where
    /// no Brownian motion is sampled.
    pub fn degenerate(m: usize, b: usize, steps: usize, h: f64) -> Result<Self> {
        if m == 0 || b == 0 || steps == 0 {
            return Err(Error::InvalidArgument(format!(
                "store dimensions must be positive, got m={m}, b={b}, steps={steps}"
            )));
        }
        Ok(Self {
            n_realizations: 1,
            steps,
            m,
            b,
            h,
            increments: vec![0.0; steps * m * b],
        })
    }

    pub fn n_realizations(&self) -> usize {
        self.n_realizations
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn b(&self) -> usize {
        self.b
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// The raw standard-normal increment of block `j` at step `i` in
    /// realization `c`.
    #[inline]
    pub fn increment(&self, c: usize, i: usize, j: usize) -> &[f64] {
        debug_assert!(c < self.n_realizations && i < self.steps && j < self.m);
        let base = ((c * self.steps + i) * self.m + j) * self.b;
        &self.increments[base..base + self.b]
    }

    pub fn raw(&self) -> &[f64] {
        &self.increments
    }

    /// Write the store as a self-describing binary file: magic, the five
    /// dimensions (S, steps, m, b as u64 and h as f64, little-endian), then
    /// the flat increment array as little-endian f64.
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        for dim in [self.n_realizations, self.steps, self.m, self.b] {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        w.write_all(&self.h.to_le_bytes())?;
        for v in &self.increments {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read a store written by [`BrownianStore::save`]. Bit-exact round trip.
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a Brownian store file".into()));
        }
        let mut buf = [0u8; 8];
        let mut dims = [0usize; 4];
        for d in &mut dims {
            r.read_exact(&mut buf)?;
            *d = u64::from_le_bytes(buf) as usize;
        }
        r.read_exact(&mut buf)?;
        let h = f64::from_le_bytes(buf);
        let [n_realizations, steps, m, b] = dims;
        let len = n_realizations
            .checked_mul(steps)
            .and_then(|v| v.checked_mul(m))
            .and_then(|v| v.checked_mul(b))
            .ok_or_else(|| Error::Format("store dimensions overflow".into()))?;
        let mut increments = vec![0.0; len];
        for v in &mut increments {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        Ok(Self {
            n_realizations,
            steps,
            m,
            b,
            h,
            increments,
        })
    }
}
