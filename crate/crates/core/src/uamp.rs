//! Unitary approximate message passing with noise-precision learning.
//!
//! The loop runs entirely in the rotated coordinates `r = U^H y`, where the
//! operator is `Lambda V^H`. The sparse prior is pluggable through [`Prior`].

use crate::error::{check_shape, invalid, Error, Result};
use crate::linalg::{norm_sq, CMatrix, RMatrix, C64};
use crate::transform::UnitaryOperator;

/// Precisions handed from the prior back to the measurement side.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMessage {
    gamma_hat: RMatrix,
}

impl PriorMessage {
    pub fn new(gamma_hat: RMatrix) -> Result<Self> {
        if gamma_hat.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err(invalid(
                "gamma_hat",
                "precisions must be finite and non-negative",
            ));
        }
        Ok(Self { gamma_hat })
    }
    pub fn gamma_hat(&self) -> &RMatrix {
        &self.gamma_hat
    }
    pub fn into_inner(self) -> RMatrix {
        self.gamma_hat
    }
}

/// Sparse prior exchanging Gaussian messages with the measurement module.
pub trait Prior {
    /// Forget all state; `shape` is the unknown grid.
    fn reset(&mut self, shape: (usize, usize));
    /// Consume posterior means/variances, return prior precisions.
    fn update(&mut self, x_hat: &CMatrix, x_var: &RMatrix) -> Result<PriorMessage>;
}

/// Prior with a fixed precision on every entry.
#[derive(Debug, Clone, Copy)]
pub struct FixedPrecisionPrior(pub f64);

impl Prior for FixedPrecisionPrior {
    fn reset(&mut self, _shape: (usize, usize)) {}
    fn update(&mut self, x_hat: &CMatrix, _x_var: &RMatrix) -> Result<PriorMessage> {
        PriorMessage::new(RMatrix::from_element(x_hat.nrows(), x_hat.ncols(), self.0))
    }
}

/// How the denoised output `z_hat` is formed from the prediction `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputEstimate {
    /// Gaussian posterior mean combining the prediction with the observation.
    #[default]
    PosteriorMean,
    /// Shrunk prediction without the observation term.
    ShrunkPrediction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UampConfig {
    pub max_iters: usize,
    /// Relative change of `x_hat` below which the loop stops.
    pub tol: f64,
    /// 1 means undamped.
    pub damping: f64,
    pub variance_floor: f64,
    pub variance_cap: f64,
    pub output_estimate: OutputEstimate,
}

impl Default for UampConfig {
    fn default() -> Self {
        Self {
            max_iters: 20,
            tol: 1e-6,
            damping: 1.0,
            variance_floor: 1e-12,
            variance_cap: 1e12,
            output_estimate: OutputEstimate::PosteriorMean,
        }
    }
}

impl UampConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(invalid("max_iters", "need at least one iteration"));
        }
        if !(self.tol >= 0.0) {
            return Err(invalid("tol", "must be non-negative"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(invalid("damping", "must lie in (0, 1]"));
        }
        if !(self.variance_floor > 0.0 && self.variance_cap > self.variance_floor) {
            return Err(invalid("variance_floor", "need 0 < floor < cap"));
        }
        Ok(())
    }
}

/// All per-iteration quantities of the message-passing loop.
#[derive(Debug, Clone)]
pub struct UampState {
    pub x_hat: CMatrix,
    /// Per-entry posterior variance of `x_hat`.
    pub x_var: RMatrix,
    pub tau_x: f64,
    pub p: CMatrix,
    pub tau_p: RMatrix,
    pub z_hat: CMatrix,
    pub v_z: RMatrix,
    pub beta_hat: f64,
    /// Scaled residual fed back into the next prediction.
    pub residual: CMatrix,
    pub tau_s: RMatrix,
    pub q: CMatrix,
    pub tau_q: f64,
    pub gamma_hat: RMatrix,
    pub iteration: usize,
    /// Number of times a variance was pushed back into [floor, cap].
    pub guard_events: usize,
}

impl UampState {
    /// Start of the loop: `tau_x = 1`, `x_hat = 0`, `gamma_hat = 1`,
    /// `beta_hat = 1`, zero residual.
    pub fn new(x_shape: (usize, usize), y_shape: (usize, usize)) -> Self {
        let (i, q) = x_shape;
        let (m, k) = y_shape;
        Self {
            x_hat: CMatrix::zeros(i, q),
            x_var: RMatrix::from_element(i, q, 1.0),
            tau_x: 1.0,
            p: CMatrix::zeros(m, k),
            tau_p: RMatrix::from_element(m, k, 1.0),
            z_hat: CMatrix::zeros(m, k),
            v_z: RMatrix::zeros(m, k),
            beta_hat: 1.0,
            residual: CMatrix::zeros(m, k),
            tau_s: RMatrix::zeros(m, k),
            q: CMatrix::zeros(i, q),
            tau_q: 1.0,
            gamma_hat: RMatrix::from_element(i, q, 1.0),
            iteration: 0,
            guard_events: 0,
        }
    }

    pub fn for_operator(op: &UnitaryOperator) -> Self {
        Self::new(op.x_shape(), op.y_shape())
    }

    fn guard(&mut self, name: &'static str, v: f64, config: &UampConfig) -> Result<f64> {
        if v.is_nan() {
            return Err(Error::Divergence {
                iteration: self.iteration + 1,
                quantity: name,
                value: v,
            });
        }
        if v < config.variance_floor {
            self.guard_events += 1;
            log::debug!(
                "iteration {}: {name} = {v:e} raised to floor",
                self.iteration + 1
            );
            Ok(config.variance_floor)
        } else if v > config.variance_cap {
            self.guard_events += 1;
            log::debug!(
                "iteration {}: {name} = {v:e} lowered to cap",
                self.iteration + 1
            );
            Ok(config.variance_cap)
        } else {
            Ok(v)
        }
    }

    fn ensure_finite(&self, name: &'static str, m: &CMatrix) -> Result<()> {
        let e = norm_sq(m);
        if e.is_finite() {
            Ok(())
        } else {
            Err(Error::Divergence {
                iteration: self.iteration + 1,
                quantity: name,
                value: e,
            })
        }
    }

    /// Output side: prediction, denoised output, noise precision and the
    /// scaled residual.
    pub fn measurement_halfstep(
        &mut self,
        r: &CMatrix,
        op: &UnitaryOperator,
        config: &UampConfig,
    ) -> Result<()> {
        check_shape("measurement_halfstep", r, op.y_shape())?;
        let lambda = op.lambda();
        let (m_r, k) = op.y_shape();
        let m = (m_r * k) as f64;

        for idx in 0..lambda.len() {
            let tp = self.tau_x * lambda[idx];
            self.tau_p[idx] = self.guard("tau_p", tp, config)?;
        }
        let phi_x = op.apply(&self.x_hat)?;
        for idx in 0..phi_x.len() {
            self.p[idx] = phi_x[idx] - self.residual[idx] * self.tau_p[idx];
        }
        self.ensure_finite("p", &self.p)?;

        let beta = self.beta_hat;
        for idx in 0..self.p.len() {
            let bt = beta * self.tau_p[idx];
            self.v_z[idx] = self.tau_p[idx] / (1.0 + bt);
            self.z_hat[idx] = match config.output_estimate {
                OutputEstimate::PosteriorMean => (r[idx] * bt + self.p[idx]) / (1.0 + bt),
                OutputEstimate::ShrunkPrediction => self.p[idx] * (bt / (1.0 + bt)),
            };
        }
        let misfit: f64 = r
            .iter()
            .zip(self.z_hat.iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            + self.v_z.sum();
        self.beta_hat = noise_precision_from_misfit(m, misfit);
        self.beta_hat = self.guard("beta_hat", self.beta_hat, config)?;

        let d = config.damping;
        for idx in 0..self.tau_s.len() {
            let ts = 1.0 / (self.tau_p[idx] + 1.0 / self.beta_hat);
            self.tau_s[idx] = self.guard("tau_s", ts, config)?;
            let s_new = (r[idx] - self.p[idx]) * self.tau_s[idx];
            self.residual[idx] = s_new * d + self.residual[idx] * (1.0 - d);
        }
        self.ensure_finite("residual", &self.residual)
    }

    /// Input side: effective scalar channel `q = x + noise(tau_q)` followed by
    /// the Gaussian denoiser with the current prior precisions.
    pub fn estimation_halfstep(&mut self, op: &UnitaryOperator, config: &UampConfig) -> Result<()> {
        let lambda = op.lambda();
        let n = op.n_unknowns() as f64;
        let weight: f64 = lambda
            .iter()
            .zip(self.tau_s.iter())
            .map(|(l, t)| l * t)
            .sum();
        let tq = n / weight;
        if !(tq > 0.0) {
            return Err(Error::Divergence {
                iteration: self.iteration + 1,
                quantity: "tau_q",
                value: tq,
            });
        }
        self.tau_q = self.guard("tau_q", tq, config)?;
        let back = op.apply_adjoint(&self.residual)?;
        self.q = &self.x_hat + back * C64::new(self.tau_q, 0.0);
        self.ensure_finite("q", &self.q)?;

        let d = config.damping;
        let mut var_sum = 0.0;
        for idx in 0..self.q.len() {
            let (mean, var) = gaussian_denoiser(self.q[idx], self.tau_q, self.gamma_hat[idx]);
            self.x_hat[idx] = mean * d + self.x_hat[idx] * (1.0 - d);
            self.x_var[idx] = var;
            var_sum += var;
        }
        let tx = var_sum / n;
        self.tau_x = self.guard("tau_x", d * tx + (1.0 - d) * self.tau_x, config)?;
        self.iteration += 1;
        Ok(())
    }
}

/// Posterior mean and variance of `x` from `q = x + CN(0, tau_q)` under the
/// prior `CN(0, 1/gamma)`.
pub fn gaussian_denoiser(q: C64, tau_q: f64, gamma: f64) -> (C64, f64) {
    let shrink = 1.0 / (1.0 + tau_q * gamma);
    (q * shrink, tau_q * shrink)
}

/// `M / misfit`, the mode of the Gamma posterior on the noise precision.
pub fn noise_precision_from_misfit(n_measurements: f64, misfit: f64) -> f64 {
    n_measurements / misfit
}

/// One row of the convergence trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationStats {
    pub iteration: usize,
    pub tau_q: f64,
    pub tau_x: f64,
    pub beta_hat: f64,
    pub relative_change: f64,
}

#[derive(Debug, Clone)]
pub struct UampOutput {
    pub x_hat: CMatrix,
    pub x_var: RMatrix,
    pub beta_hat: f64,
    pub iterations: usize,
    pub converged: bool,
    pub guard_events: usize,
    pub trace: Vec<IterationStats>,
}

/// Run the estimator on a rotated observation `r`. `observer` sees the state
/// after every full iteration, including the prior update.
pub fn run<P: Prior + ?Sized>(
    r: &CMatrix,
    op: &UnitaryOperator,
    prior: &mut P,
    config: &UampConfig,
    mut observer: impl FnMut(&UampState),
) -> Result<UampOutput> {
    config.validate()?;
    check_shape("run", r, op.y_shape())?;
    prior.reset(op.x_shape());
    let mut state = UampState::for_operator(op);
    let mut trace = Vec::with_capacity(config.max_iters);
    let mut converged = false;
    for _ in 0..config.max_iters {
        let previous = state.x_hat.clone();
        state.measurement_halfstep(r, op, config)?;
        state.estimation_halfstep(op, config)?;
        let msg = prior.update(&state.x_hat, &state.x_var)?;
        state.gamma_hat = msg.into_inner();

        let change = (&state.x_hat - &previous).norm();
        let base = previous.norm();
        let relative_change = if base > 0.0 {
            change / base
        } else if change == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        trace.push(IterationStats {
            iteration: state.iteration,
            tau_q: state.tau_q,
            tau_x: state.tau_x,
            beta_hat: state.beta_hat,
            relative_change,
        });
        observer(&state);
        if relative_change < config.tol {
            converged = true;
            break;
        }
    }
    if state.guard_events > 0 {
        log::info!(
            "{} variance guard events during estimation",
            state.guard_events
        );
    }
    Ok(UampOutput {
        x_hat: state.x_hat,
        x_var: state.x_var,
        beta_hat: state.beta_hat,
        iterations: state.iteration,
        converged,
        guard_events: state.guard_events,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::complex_normal;
    use crate::transform::MeasurementOperator;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unitary_op(seed: u64, a: usize, b: usize) -> UnitaryOperator {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qa = complex_normal(&mut rng, a, a).qr().q();
        let qb = complex_normal(&mut rng, b, b).qr().q();
        MeasurementOperator::from_factors(qa, qb)
            .unwrap()
            .svd_preprocess()
            .unwrap()
    }

    #[test]
    fn initial_state() {
        let s = UampState::new((4, 3), (5, 2));
        assert_eq!(s.tau_x, 1.0);
        assert_eq!(s.beta_hat, 1.0);
        assert_eq!(s.iteration, 0);
        assert!(s.x_hat.iter().all(|z| z.norm() == 0.0));
        assert!(s.gamma_hat.iter().all(|g| *g == 1.0));
        assert!(s.residual.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn unitary_operator_gives_unit_tau_p() {
        let op = unitary_op(1, 6, 2);
        let mut s = UampState::for_operator(&op);
        let r = complex_normal(&mut ChaCha8Rng::seed_from_u64(2), 6, 2);
        s.measurement_halfstep(&r, &op, &UampConfig::default())
            .unwrap();
        assert!(s.tau_p.iter().all(|t| (t - 1.0).abs() < 1e-12));
    }

    #[test]
    fn genie_noise_precision() {
        let sigma2 = 0.3;
        let m = 400.0;
        assert!((noise_precision_from_misfit(m, m * sigma2) - 1.0 / sigma2).abs() < 1e-12);
    }

    #[test]
    fn noiseless_limit_of_output_estimate() {
        let op = unitary_op(3, 4, 2);
        let r = complex_normal(&mut ChaCha8Rng::seed_from_u64(4), 4, 2);
        let x = complex_normal(&mut ChaCha8Rng::seed_from_u64(5), 4, 2);
        for rule in [
            OutputEstimate::PosteriorMean,
            OutputEstimate::ShrunkPrediction,
        ] {
            let cfg = UampConfig {
                output_estimate: rule,
                ..UampConfig::default()
            };
            let mut s = UampState::for_operator(&op);
            s.x_hat = x.clone();
            s.beta_hat = 1e14;
            s.measurement_halfstep(&r, &op, &cfg).unwrap();
            assert!(s.v_z.iter().all(|v| *v < 1e-13));
            // the posterior mean collapses onto the observation, the shrunk
            // prediction onto p
            let target = match rule {
                OutputEstimate::PosteriorMean => &r,
                OutputEstimate::ShrunkPrediction => &s.p,
            };
            assert!((&s.z_hat - target).norm() < 1e-10);
        }
    }

    #[test]
    fn denoiser_examples() {
        let (m, v) = gaussian_denoiser(C64::new(2.0, 0.0), 1.0, 1.0);
        assert!((m - C64::new(1.0, 0.0)).norm() < 1e-15);
        assert!((v - 0.5).abs() < 1e-15);
        let (m, _) = gaussian_denoiser(C64::new(0.3, -1.0), 2.0, 0.0);
        assert_eq!(m, C64::new(0.3, -1.0));
        let (m, v) = gaussian_denoiser(C64::new(5.0, 5.0), 1.0, 1e15);
        assert!(m.norm() < 1e-13 && v < 1e-14);
    }

    #[test]
    fn zero_observation_stays_zero() {
        let op = unitary_op(6, 16, 4);
        let mut prior = FixedPrecisionPrior(1.0);
        let r = CMatrix::zeros(16, 4);
        let out = run(&r, &op, &mut prior, &UampConfig::default(), |_| {}).unwrap();
        assert!(out.x_hat.norm() / 8.0 < 1e-6);
    }

    #[test]
    fn shape_errors() {
        let op = unitary_op(6, 4, 2);
        let mut prior = FixedPrecisionPrior(1.0);
        let r = CMatrix::zeros(3, 2);
        assert!(matches!(
            run(&r, &op, &mut prior, &UampConfig::default(), |_| {}),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn nan_observation_reports_divergence() {
        let op = unitary_op(6, 4, 2);
        let mut prior = FixedPrecisionPrior(1.0);
        let mut r = CMatrix::zeros(4, 2);
        r[(0, 0)] = C64::new(f64::NAN, 0.0);
        let err = run(&r, &op, &mut prior, &UampConfig::default(), |_| {}).unwrap_err();
        assert!(
            matches!(err, Error::Divergence { iteration: 1, .. }),
            "{err}"
        );
    }

    #[test]
    fn config_validation() {
        let bad = UampConfig {
            damping: 0.0,
            ..UampConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = UampConfig {
            max_iters: 0,
            ..UampConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
