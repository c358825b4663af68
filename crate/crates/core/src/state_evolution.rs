//! Scalar state evolution with an empirically tabulated denoiser error.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::linalg::{complex_normal, CMatrix, RMatrix, C64};
use crate::mrf::{MrfParams, MrfPrior};
use crate::uamp::{gaussian_denoiser, Prior};

/// Minimum number of scalar samples per noise level.
pub const MIN_SAMPLES: usize = 10_000;

/// Denoiser mean-squared error as a function of the effective noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct MmseTable {
    noise_grid: Vec<f64>,
    mmse_values: Vec<f64>,
}

impl MmseTable {
    pub fn new(noise_grid: Vec<f64>, mmse_values: Vec<f64>) -> Result<Self> {
        if noise_grid.len() < 2 || noise_grid.len() != mmse_values.len() {
            return Err(invalid(
                "noise_grid",
                "need at least two (noise, mmse) pairs of equal length",
            ));
        }
        if noise_grid.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(invalid("noise_grid", "noise levels must be positive"));
        }
        if noise_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid(
                "noise_grid",
                "noise levels must be strictly increasing",
            ));
        }
        if mmse_values.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
            return Err(invalid(
                "mmse_values",
                "errors must be finite and non-negative",
            ));
        }
        Ok(Self {
            noise_grid,
            mmse_values,
        })
    }

    pub fn noise_grid(&self) -> &[f64] {
        &self.noise_grid
    }
    pub fn mmse_values(&self) -> &[f64] {
        &self.mmse_values
    }

    /// Piecewise-linear interpolation in log-log coordinates. Returns the
    /// value and whether `tau` fell outside the grid and was clamped.
    pub fn lookup(&self, tau: f64) -> (f64, bool) {
        let g = &self.noise_grid;
        let v = &self.mmse_values;
        if !(tau > g[0]) {
            return (v[0], tau < g[0]);
        }
        if tau >= g[g.len() - 1] {
            return (v[v.len() - 1], tau > g[g.len() - 1]);
        }
        let hi = g.partition_point(|t| *t <= tau);
        let lo = hi - 1;
        let (t0, t1, m0, m1) = (g[lo], g[hi], v[lo], v[hi]);
        let value = if m0 > 0.0 && m1 > 0.0 {
            let w = (tau.ln() - t0.ln()) / (t1.ln() - t0.ln());
            (m0.ln() + w * (m1.ln() - m0.ln())).exp()
        } else {
            m0 + (tau - t0) / (t1 - t0) * (m1 - m0)
        };
        (value, false)
    }

    /// Two whitespace-separated columns, `noise mmse`, after a comment header.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# noise_variance mmse\n");
        for (t, m) in self.noise_grid.iter().zip(&self.mmse_values) {
            let _ = writeln!(out, "{t} {m}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut grid = Vec::new();
        let mut vals = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                line: idx + 1,
                message,
            };
            let mut it = line.split_whitespace();
            let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
                return Err(err("expected two columns".into()));
            };
            grid.push(a.parse::<f64>().map_err(|e| err(e.to_string()))?);
            vals.push(b.parse::<f64>().map_err(|e| err(e.to_string()))?);
        }
        Self::new(grid, vals)
    }
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|j| (a + (b - a) * j as f64 / (n - 1) as f64).exp())
        .collect()
}

/// The default grid: 40 points spanning `[1e-6, 1e2]` times the signal variance.
pub fn default_noise_grid(signal_variance: f64) -> Vec<f64> {
    log_spaced(1e-6 * signal_variance, 1e2 * signal_variance, 40)
}

/// How the tabulated denoiser is run: the estimator's prior, applied for a
/// number of prior/posterior passes at a fixed noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserConfig {
    pub params: MrfParams,
    pub sweeps: usize,
    pub passes: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            params: MrfParams::default(),
            sweeps: 1,
            passes: 10,
        }
    }
}

/// Mean-squared error of the prior's denoiser for `q = x + CN(0, tau)`.
pub fn denoise_error<R: Rng + ?Sized>(
    x: &CMatrix,
    tau: f64,
    denoiser: &DenoiserConfig,
    rng: &mut R,
) -> Result<f64> {
    let noise = complex_normal(rng, x.nrows(), x.ncols());
    let q = x + noise * C64::new(tau.sqrt(), 0.0);
    let mut prior = MrfPrior::new(denoiser.params, denoiser.sweeps)?;
    prior.reset(x.shape());
    let mut gamma = RMatrix::from_element(x.nrows(), x.ncols(), 1.0);
    let mut x_hat = CMatrix::zeros(x.nrows(), x.ncols());
    let mut var = RMatrix::zeros(x.nrows(), x.ncols());
    for pass in 0..=denoiser.passes {
        for idx in 0..q.len() {
            let (m, v) = gaussian_denoiser(q[idx], tau, gamma[idx]);
            x_hat[idx] = m;
            var[idx] = v;
        }
        if pass < denoiser.passes {
            gamma = prior.update(&x_hat, &var)?.into_inner();
        }
    }
    let err: f64 = x
        .iter()
        .zip(x_hat.iter())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    Ok(err / x.len() as f64)
}

/// Tabulate the denoiser error over `noise_grid`. Signals come from
/// `draw_signal` until at least `n_samples` scalar entries are collected;
/// noise levels are evaluated in parallel on independent substreams.
pub fn build_mmse_table<R, F>(
    denoiser: &DenoiserConfig,
    mut draw_signal: F,
    noise_grid: &[f64],
    n_samples: usize,
    rng: &mut R,
) -> Result<MmseTable>
where
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> Result<CMatrix>,
{
    if n_samples < MIN_SAMPLES {
        return Err(Error::InsufficientSamples {
            got: n_samples,
            required: MIN_SAMPLES,
        });
    }
    denoiser.params.validate()?;
    let mut signals = Vec::new();
    let mut collected = 0;
    while collected < n_samples {
        let x = draw_signal(rng)?;
        if x.is_empty() {
            return Err(invalid("x_distribution", "signal draws are empty"));
        }
        collected += x.len();
        signals.push(x);
    }
    let base: u64 = rng.random();
    let mmse = noise_grid
        .par_iter()
        .enumerate()
        .map(|(j, &tau)| {
            let mut sub = ChaCha8Rng::seed_from_u64(base);
            sub.set_stream(j as u64);
            let mut total = 0.0;
            for x in &signals {
                total += denoise_error(x, tau, denoiser, &mut sub)? * x.len() as f64;
            }
            Ok(total / collected as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    MmseTable::new(noise_grid.to_vec(), mmse)
}

/// Predicted effective-noise sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SeTrajectory {
    pub tau: Vec<f64>,
    pub mmse: Vec<f64>,
    /// Some lookup fell outside the table.
    pub clamped: bool,
}

/// Iterate `tau = N / sum(lambda / (mmse * lambda + beta_inv))`, starting from
/// `mmse = 1` (the estimator's initial `tau_x`).
pub fn se_trajectory_with(
    mut mmse_of: impl FnMut(f64) -> (f64, bool),
    lambda: &[f64],
    n_unknowns: usize,
    beta_inv: f64,
    n_iters: usize,
) -> Result<SeTrajectory> {
    if !(beta_inv >= 0.0 && beta_inv.is_finite()) {
        return Err(invalid(
            "beta_inv",
            "noise variance must be finite and non-negative",
        ));
    }
    if lambda.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(invalid("lambda", "entries must be non-negative"));
    }
    let n = n_unknowns as f64;
    let mut mmse = 1.0;
    let mut out = SeTrajectory {
        tau: Vec::with_capacity(n_iters),
        mmse: Vec::with_capacity(n_iters),
        clamped: false,
    };
    for _ in 0..n_iters {
        let denom: f64 = lambda
            .iter()
            .filter(|l| **l > 0.0)
            .map(|l| l / (mmse * l + beta_inv))
            .sum();
        let tau = n / denom;
        out.tau.push(tau);
        out.mmse.push(mmse);
        let (next, clamped) = mmse_of(tau);
        if clamped && !out.clamped {
            log::warn!("state evolution left the tabulated range at tau = {tau:e}");
        }
        out.clamped |= clamped;
        mmse = next;
    }
    Ok(out)
}

pub fn se_trajectory(
    table: &MmseTable,
    lambda: &[f64],
    n_unknowns: usize,
    beta_inv: f64,
    n_iters: usize,
) -> Result<SeTrajectory> {
    se_trajectory_with(|t| table.lookup(t), lambda, n_unknowns, beta_inv, n_iters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn grid_spacing() {
        let g = default_noise_grid(2.0);
        assert_eq!(g.len(), 40);
        assert_relative_eq!(g[0], 2e-6, max_relative = 1e-12);
        assert_relative_eq!(g[39], 2e2, max_relative = 1e-12);
        let ratios: Vec<f64> = g.windows(2).map(|w| w[1] / w[0]).collect();
        for r in &ratios {
            assert_relative_eq!(*r, ratios[0], max_relative = 1e-9);
        }
    }

    #[test]
    fn lookup_interpolates_power_laws_exactly() {
        let grid = log_spaced(1e-3, 1e3, 7);
        let vals: Vec<f64> = grid.iter().map(|t| 0.5 * t.powf(0.7)).collect();
        let table = MmseTable::new(grid, vals).unwrap();
        for tau in [2e-3, 0.37, 55.0] {
            let (v, clamped) = table.lookup(tau);
            assert!(!clamped);
            assert_relative_eq!(v, 0.5 * f64::powf(tau, 0.7), max_relative = 1e-10);
        }
        assert_eq!(table.lookup(1e-9), (table.mmse_values()[0], true));
        assert_eq!(table.lookup(1e9), (table.mmse_values()[6], true));
        let lo = table.noise_grid()[0];
        assert_eq!(table.lookup(lo), (table.mmse_values()[0], false));
    }

    #[test]
    fn table_validation_and_text() {
        assert!(MmseTable::new(vec![1.0, 1.0], vec![0.1, 0.2]).is_err());
        assert!(MmseTable::new(vec![1.0], vec![0.1]).is_err());
        assert!(MmseTable::new(vec![1.0, 2.0], vec![0.1, -0.2]).is_err());
        let t = MmseTable::new(vec![1e-3, 0.1, 10.0], vec![0.0, 0.05, 0.9]).unwrap();
        assert_eq!(MmseTable::from_text(&t.to_text()).unwrap(), t);
        assert!(MmseTable::from_text("1 2 3").is_err());
    }

    #[test]
    fn zero_mmse_gives_noise_floor() {
        let lambda = vec![1.0; 64];
        let se = se_trajectory_with(|_| (0.0, false), &lambda, 64, 0.25, 6).unwrap();
        // the first step still carries the unit initial error
        assert_relative_eq!(se.tau[0], 1.25, max_relative = 1e-12);
        for t in &se.tau[1..] {
            assert_relative_eq!(*t, 0.25, max_relative = 1e-12);
        }
    }

    #[test]
    fn constant_mmse_on_unitary_operator() {
        let lambda = vec![1.0; 32];
        let se = se_trajectory_with(|_| (0.3, false), &lambda, 32, 0.1, 5).unwrap();
        for t in &se.tau[1..] {
            assert_relative_eq!(*t, 0.4, max_relative = 1e-12);
        }
    }

    #[test]
    fn too_few_samples_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = build_mmse_table(
            &DenoiserConfig::default(),
            |_| Ok(CMatrix::zeros(4, 4)),
            &[1.0, 2.0],
            100,
            &mut rng,
        );
        assert!(matches!(r, Err(Error::InsufficientSamples { .. })));
    }

    #[test]
    fn zero_signal_table_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let grid = log_spaced(1e-4, 1e2, 6);
        let t = build_mmse_table(
            &DenoiserConfig::default(),
            |_| Ok(CMatrix::zeros(32, 32)),
            &grid,
            MIN_SAMPLES,
            &mut rng,
        )
        .unwrap();
        // shrinkage removes almost all of the injected noise
        for (tau, m) in t.noise_grid().iter().zip(t.mmse_values()) {
            assert!(*m < 0.1 * tau, "tau {tau}: {m}");
        }
    }
}
