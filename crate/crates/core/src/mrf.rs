//! Three-layer sparse prior with a 4-connected Ising support field.
//!
//! Each coefficient has a Gaussian prior whose precision is Gamma distributed
//! with an "active" or "inactive" shape/rate depending on a binary support
//! state. Support states are coupled to their left/right/top/bottom
//! neighbours on the angular-delay grid and inferred by loopy belief
//! propagation, one synchronous sweep per outer iteration by default.

use nalgebra::DMatrix;

use crate::error::{check_shape, invalid, Result};
use crate::linalg::{CMatrix, RMatrix, C64};
use crate::uamp::{Prior, PriorMessage};

/// Probabilities are kept inside `[PROB_FLOOR, 1 - PROB_FLOOR]`.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MrfParams {
    /// Edge coupling; larger values favour larger clusters.
    pub alpha: f64,
    /// Sparsity bias; larger values favour inactive cells.
    pub eta: f64,
    /// Active-state Gamma shape and rate.
    pub a: f64,
    pub b: f64,
    /// Inactive-state Gamma shape and rate.
    pub a_bar: f64,
    pub b_bar: f64,
}

impl Default for MrfParams {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            eta: -0.4,
            a: 1.0,
            b: 1.0,
            a_bar: 1.0,
            b_bar: 1e-6,
        }
    }
}

impl MrfParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("a", self.a),
            ("b", self.b),
            ("a_bar", self.a_bar),
            ("b_bar", self.b_bar),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("{v} is not positive")));
            }
        }
        if !(self.alpha.is_finite() && self.eta.is_finite()) {
            return Err(invalid("alpha", "coupling parameters must be finite"));
        }
        let ratio = (self.a_bar / self.b_bar) / (self.a / self.b);
        if ratio < 1e3 {
            return Err(invalid(
                "b_bar",
                format!(
                    "inactive mean precision only {ratio:.3e} times the active one (need >= 1e3)"
                ),
            ));
        }
        Ok(())
    }

    /// Same Gamma layers with the Ising coupling switched off.
    pub fn decoupled(&self) -> Self {
        Self {
            alpha: 0.0,
            eta: 0.0,
            ..*self
        }
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Evidence for the active state from the current posterior of one
/// coefficient, with `E = |x_hat|^2 + var`.
pub fn support_likelihood(x_hat: C64, var: f64, params: &MrfParams) -> f64 {
    let e = x_hat.norm_sqr() + var;
    let act = params.a * (params.b_bar + e);
    let inact = params.a_bar * (params.b + e);
    act / (act + inact)
}

/// Message from a neighbour with evidence `pi_out` and incoming messages
/// `others` from its remaining three neighbours.
pub fn neighbour_message(pi_out: f64, others: [f64; 3], alpha: f64, eta: f64) -> f64 {
    let on: f64 = others.iter().product();
    let off: f64 = others.iter().map(|l| 1.0 - l).product();
    let p_act = pi_out * (-eta).exp() * on;
    let p_inact = (1.0 - pi_out) * eta.exp() * off;
    let (ea, ena) = (alpha.exp(), (-alpha).exp());
    let m_on = ea * p_act + ena * p_inact;
    let m_off = ena * p_act + ea * p_inact;
    clamp_prob(m_on / (m_on + m_off))
}

/// Log of the Ising potential of a support pattern, `true` meaning active:
/// `alpha` times the sum of `s_i s_j` over lattice edges minus `eta` times the
/// sum of `s_n`, with `s = +-1`.
pub fn support_log_potential(support: &DMatrix<bool>, alpha: f64, eta: f64) -> f64 {
    let s = |i: usize, q: usize| if support[(i, q)] { 1.0 } else { -1.0 };
    let (rows, cols) = support.shape();
    let mut pair = 0.0;
    let mut single = 0.0;
    for q in 0..cols {
        for i in 0..rows {
            single += s(i, q);
            if i + 1 < rows {
                pair += s(i, q) * s(i + 1, q);
            }
            if q + 1 < cols {
                pair += s(i, q) * s(i, q + 1);
            }
        }
    }
    alpha * pair - eta * single
}

/// Prior support probability from the four incoming messages.
pub fn support_prior(lams: [f64; 4], eta: f64) -> f64 {
    let on: f64 = lams.iter().product::<f64>() * (-eta).exp();
    let off: f64 = lams.iter().map(|l| 1.0 - l).product::<f64>() * eta.exp();
    clamp_prob(on / (on + off))
}

/// Posterior mean precision under the two-component Gamma mixture.
pub fn gamma_posterior_mean(x_hat: C64, var: f64, pi_in: f64, params: &MrfParams) -> f64 {
    let e = x_hat.norm_sqr() + var;
    pi_in * (params.a + 1.0) / (params.b + e)
        + (1.0 - pi_in) * (params.a_bar + 1.0) / (params.b_bar + e)
}

/// Belief-propagation messages on the support lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct MrfMessageGrid {
    pub pi_out: RMatrix,
    /// Message arriving from the neighbour at `(i, q - 1)`.
    pub lambda_left: RMatrix,
    /// Message arriving from `(i, q + 1)`.
    pub lambda_right: RMatrix,
    /// Message arriving from `(i - 1, q)`.
    pub lambda_top: RMatrix,
    /// Message arriving from `(i + 1, q)`.
    pub lambda_bottom: RMatrix,
    pub pi_in: RMatrix,
    pub gamma_hat: RMatrix,
}

impl MrfMessageGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        let half = RMatrix::from_element(rows, cols, 0.5);
        Self {
            pi_out: half.clone(),
            lambda_left: half.clone(),
            lambda_right: half.clone(),
            lambda_top: half.clone(),
            lambda_bottom: half.clone(),
            pi_in: half,
            gamma_hat: RMatrix::from_element(rows, cols, 1.0),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pi_out.shape()
    }

    pub fn update_pi_out(
        &mut self,
        x_hat: &CMatrix,
        var: &RMatrix,
        params: &MrfParams,
    ) -> Result<()> {
        check_shape("update_pi_out", x_hat, self.shape())?;
        check_shape("update_pi_out", var, self.shape())?;
        for idx in 0..x_hat.len() {
            self.pi_out[idx] = clamp_prob(support_likelihood(x_hat[idx], var[idx], params));
        }
        Ok(())
    }

    /// One synchronous sweep: all new messages are computed from the old ones.
    /// Cells on the lattice edge receive 1/2 from the missing side.
    pub fn update_directional_messages(&mut self, params: &MrfParams) {
        let (rows, cols) = self.shape();
        let (alpha, eta) = (params.alpha, params.eta);
        let old = self.clone();
        let msg = |i: usize, q: usize, excl: [f64; 3]| {
            neighbour_message(old.pi_out[(i, q)], excl, alpha, eta)
        };
        for q in 0..cols {
            for i in 0..rows {
                self.lambda_left[(i, q)] = if q > 0 {
                    let j = (i, q - 1);
                    msg(
                        j.0,
                        j.1,
                        [old.lambda_left[j], old.lambda_top[j], old.lambda_bottom[j]],
                    )
                } else {
                    0.5
                };
                self.lambda_right[(i, q)] = if q + 1 < cols {
                    let j = (i, q + 1);
                    msg(
                        j.0,
                        j.1,
                        [old.lambda_right[j], old.lambda_top[j], old.lambda_bottom[j]],
                    )
                } else {
                    0.5
                };
                self.lambda_top[(i, q)] = if i > 0 {
                    let j = (i - 1, q);
                    msg(
                        j.0,
                        j.1,
                        [old.lambda_left[j], old.lambda_right[j], old.lambda_top[j]],
                    )
                } else {
                    0.5
                };
                self.lambda_bottom[(i, q)] = if i + 1 < rows {
                    let j = (i + 1, q);
                    msg(
                        j.0,
                        j.1,
                        [
                            old.lambda_left[j],
                            old.lambda_right[j],
                            old.lambda_bottom[j],
                        ],
                    )
                } else {
                    0.5
                };
            }
        }
    }

    pub fn update_pi_in(&mut self, params: &MrfParams) {
        for idx in 0..self.pi_in.len() {
            let lams = [
                self.lambda_left[idx],
                self.lambda_right[idx],
                self.lambda_top[idx],
                self.lambda_bottom[idx],
            ];
            self.pi_in[idx] = support_prior(lams, params.eta);
        }
    }

    pub fn update_gamma(
        &mut self,
        x_hat: &CMatrix,
        var: &RMatrix,
        params: &MrfParams,
    ) -> Result<()> {
        check_shape("update_gamma", x_hat, self.shape())?;
        for idx in 0..x_hat.len() {
            self.gamma_hat[idx] =
                gamma_posterior_mean(x_hat[idx], var[idx], self.pi_in[idx], params);
        }
        Ok(())
    }

    /// Belief that each cell is active, combining local evidence and the
    /// neighbourhood prior.
    pub fn support_marginals(&self) -> RMatrix {
        self.pi_out
            .zip_map(&self.pi_in, |o, i| o * i / (o * i + (1.0 - o) * (1.0 - i)))
    }
}

/// Evidence update, `sweeps` message sweeps, prior support update and the new
/// precisions, in that order. `sweeps = 0` leaves the support prior untouched.
pub fn prior_update(
    x_hat: &CMatrix,
    var: &RMatrix,
    params: &MrfParams,
    grid: &mut MrfMessageGrid,
    sweeps: usize,
) -> Result<PriorMessage> {
    grid.update_pi_out(x_hat, var, params)?;
    for _ in 0..sweeps {
        grid.update_directional_messages(params);
    }
    grid.update_pi_in(params);
    grid.update_gamma(x_hat, var, params)?;
    PriorMessage::new(grid.gamma_hat.clone())
}

/// [`Prior`] backed by the MRF message grid.
#[derive(Debug, Clone)]
pub struct MrfPrior {
    params: MrfParams,
    sweeps: usize,
    grid: MrfMessageGrid,
}

impl MrfPrior {
    pub fn new(params: MrfParams, sweeps: usize) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            sweeps,
            grid: MrfMessageGrid::new(0, 0),
        })
    }

    /// Independent-coefficient prior: no coupling and no message sweeps, so
    /// the support prior stays at 1/2 everywhere.
    pub fn two_layer(params: MrfParams) -> Result<Self> {
        Self::new(params.decoupled(), 0)
    }

    pub fn params(&self) -> &MrfParams {
        &self.params
    }
    pub fn grid(&self) -> &MrfMessageGrid {
        &self.grid
    }
}

impl Prior for MrfPrior {
    fn reset(&mut self, shape: (usize, usize)) {
        self.grid = MrfMessageGrid::new(shape.0, shape.1);
    }

    fn update(&mut self, x_hat: &CMatrix, x_var: &RMatrix) -> Result<PriorMessage> {
        prior_update(x_hat, x_var, &self.params, &mut self.grid, self.sweeps)
    }
}
