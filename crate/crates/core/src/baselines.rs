//! Reference estimators: greedy pursuit on the vectorized model and the
//! two-layer (uncoupled) sparse Bayesian learner.

use crate::error::{check_shape, invalid, Result};
use crate::linalg::{CMatrix, C64};
use crate::mrf::{MrfParams, MrfPrior};
use crate::transform::{MeasurementOperator, UnitaryOperator};
use crate::uamp::{self, UampConfig, UampOutput};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreedyConfig {
    pub max_atoms: usize,
    /// Stop once `||residual|| / ||y||` drops below this.
    pub residual_tol: f64,
}

impl GreedyConfig {
    /// Default atom budget `4 * max(1, round(0.02 N))` for `N` unknowns.
    pub fn for_unknowns(n_unknowns: usize) -> Self {
        let base = ((0.02 * n_unknowns as f64).round() as usize).max(1);
        Self {
            max_atoms: 4 * base,
            residual_tol: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_atoms == 0 {
            return Err(invalid("max_atoms", "need at least one atom"));
        }
        if !(self.residual_tol > 0.0 && self.residual_tol < 1.0) {
            return Err(invalid("residual_tol", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GreedyOutput {
    pub x_hat: CMatrix,
    /// Selected `(angle, delay)` cells in selection order.
    pub support: Vec<(usize, usize)>,
    /// Residual norm before the first atom and after each one.
    pub residual_norms: Vec<f64>,
    /// Set when a restricted normal-equation solve needed diagonal loading.
    pub regularized: bool,
}

/// Orthogonal matching pursuit over the atoms `vec(a_i b_q^T)` of `Y = A X B`.
///
/// Atoms are picked by normalized correlation with the residual and all
/// coefficients are refit by least squares after every pick.
pub fn somp_estimate(
    y: &CMatrix,
    op: &MeasurementOperator,
    config: &GreedyConfig,
) -> Result<GreedyOutput> {
    config.validate()?;
    check_shape("somp_estimate", y, op.y_shape())?;
    let a = op.a_factor();
    let b = op.b_factor();
    let (n_ang, n_del) = op.x_shape();

    let gram_a = a.adjoint() * a;
    let gram_b = b.map(|z| z.conj()) * b.transpose();
    let norm_a: Vec<f64> = (0..n_ang).map(|i| gram_a[(i, i)].re.sqrt()).collect();
    let norm_b: Vec<f64> = (0..n_del).map(|q| gram_b[(q, q)].re.sqrt()).collect();
    let target = op.adjoint(y)?;

    let y_norm = y.norm();
    let mut x_hat = CMatrix::zeros(n_ang, n_del);
    let mut residual_norms = vec![y_norm];
    let mut support: Vec<(usize, usize)> = Vec::new();
    let mut regularized = false;
    if y_norm == 0.0 {
        return Ok(GreedyOutput {
            x_hat,
            support,
            residual_norms,
            regularized,
        });
    }

    let mut residual = y.clone();
    let mut gram = CMatrix::zeros(0, 0);
    let limit = config.max_atoms.min(n_ang * n_del);
    while support.len() < limit {
        let corr = op.adjoint(&residual)?;
        let mut best: Option<((usize, usize), f64)> = None;
        for q in 0..n_del {
            for i in 0..n_ang {
                let denom = norm_a[i] * norm_b[q];
                if denom == 0.0 || support.contains(&(i, q)) {
                    continue;
                }
                let score = corr[(i, q)].norm() / denom;
                if best.is_none_or(|(_, s)| score > s) {
                    best = Some(((i, q), score));
                }
            }
        }
        let Some((cell, score)) = best else { break };
        if score <= 0.0 {
            break;
        }

        let s = support.len();
        let mut grown = CMatrix::zeros(s + 1, s + 1);
        grown.view_mut((0, 0), (s, s)).copy_from(&gram);
        for (j, &(i2, q2)) in support.iter().enumerate() {
            let g = gram_a[(i2, cell.0)] * gram_b[(q2, cell.1)];
            grown[(j, s)] = g;
            grown[(s, j)] = g.conj();
        }
        grown[(s, s)] = gram_a[(cell.0, cell.0)] * gram_b[(cell.1, cell.1)];
        gram = grown;
        support.push(cell);

        let rhs = nalgebra::DVector::from_iterator(
            support.len(),
            support.iter().map(|&(i, q)| target[(i, q)]),
        );
        let coeffs = match gram.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => {
                regularized = true;
                let load = 1e-10
                    * gram
                        .diagonal()
                        .iter()
                        .map(|z| z.re)
                        .fold(0.0, f64::max)
                        .max(1e-300);
                let mut loaded = gram.clone();
                for j in 0..loaded.nrows() {
                    loaded[(j, j)] += C64::new(load, 0.0);
                }
                match loaded.cholesky() {
                    Some(ch) => ch.solve(&rhs),
                    None => {
                        log::warn!(
                            "greedy refit failed even with loading; stopping at {} atoms",
                            s
                        );
                        support.pop();
                        break;
                    }
                }
            }
        };
        if regularized {
            log::debug!("greedy refit regularized at {} atoms", support.len());
        }

        x_hat.fill(C64::new(0.0, 0.0));
        for (&(i, q), c) in support.iter().zip(coeffs.iter()) {
            x_hat[(i, q)] = *c;
        }
        residual = y - op.forward(&x_hat)?;
        let rn = residual.norm();
        residual_norms.push(rn);
        if rn / y_norm < config.residual_tol {
            break;
        }
    }
    Ok(GreedyOutput {
        x_hat,
        support,
        residual_norms,
        regularized,
    })
}

/// The main estimator with the support coupling removed.
pub fn uamp_sbl_twolayer(
    r: &CMatrix,
    op: &UnitaryOperator,
    params: &MrfParams,
    config: &UampConfig,
    observer: impl FnMut(&uamp::UampState),
) -> Result<UampOutput> {
    let mut prior = MrfPrior::two_layer(*params)?;
    uamp::run(r, op, &mut prior, config, observer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::complex_normal;
    use crate::transform::{build_combiner, Dictionary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn operator(seed: u64) -> MeasurementOperator {
        let d = Dictionary::new(16, 16, 4, 4).unwrap();
        let w = build_combiner(12, 4, 16, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        MeasurementOperator::new(w, &d).unwrap()
    }

    #[test]
    fn default_budget() {
        assert_eq!(GreedyConfig::for_unknowns(1024).max_atoms, 80);
        assert_eq!(GreedyConfig::for_unknowns(10).max_atoms, 4);
        assert!(GreedyConfig {
            max_atoms: 0,
            residual_tol: 0.1
        }
        .validate()
        .is_err());
        assert!(GreedyConfig {
            max_atoms: 3,
            residual_tol: 1.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn single_atom_recovered_exactly() {
        let op = operator(1);
        let mut x = CMatrix::zeros(16, 4);
        x[(5, 2)] = C64::new(0.7, -1.3);
        let y = op.forward(&x).unwrap();
        let out = somp_estimate(&y, &op, &GreedyConfig::for_unknowns(64)).unwrap();
        assert_eq!(out.support, vec![(5, 2)]);
        assert!((out.x_hat[(5, 2)] - x[(5, 2)]).norm() < 1e-10);
        assert!(*out.residual_norms.last().unwrap() < 1e-8);
    }

    #[test]
    fn zero_observation_gives_empty_support() {
        let op = operator(2);
        let out =
            somp_estimate(&CMatrix::zeros(12, 4), &op, &GreedyConfig::for_unknowns(64)).unwrap();
        assert!(out.support.is_empty());
        assert!(out.x_hat.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn residual_never_grows() {
        let op = operator(3);
        let y = complex_normal(&mut ChaCha8Rng::seed_from_u64(4), 12, 4);
        let cfg = GreedyConfig {
            max_atoms: 30,
            residual_tol: 1e-9,
        };
        let out = somp_estimate(&y, &op, &cfg).unwrap();
        for w in out.residual_norms.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9));
        }
    }

    #[test]
    fn shape_checked() {
        let op = operator(3);
        assert!(
            somp_estimate(&CMatrix::zeros(4, 4), &op, &GreedyConfig::for_unknowns(64)).is_err()
        );
    }
}
