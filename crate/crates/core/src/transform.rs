//! Angular-delay dictionaries, the hybrid combiner and the Kronecker-structured
//! measurement operator with its factored SVD.

use std::f64::consts::PI;

use nalgebra::DVector;
use rand::{Rng, RngCore};

use crate::channel::SpatialFrequencyChannel;
use crate::error::{check_shape, invalid, Error, Result};
use crate::linalg::{complete_unitary, vec_index, CMatrix, RMatrix, C64};

/// Largest dense Kronecker operator (in entries) we agree to materialize.
pub const DENSE_LIMIT: usize = 1 << 22;

/// Oversampled DFT dictionaries for the angle and delay domains.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    angular: CMatrix,
    delay: CMatrix,
}

impl Dictionary {
    pub fn new(
        n_antennas: usize,
        n_angles: usize,
        n_subcarriers: usize,
        n_delays: usize,
    ) -> Result<Self> {
        if n_antennas == 0 || n_subcarriers == 0 {
            return Err(invalid(
                "dictionary",
                "array and subcarrier counts must be positive",
            ));
        }
        if n_angles < n_antennas {
            return Err(invalid(
                "n_angles",
                format!("{n_angles} < {n_antennas} antennas"),
            ));
        }
        if n_delays < n_subcarriers {
            return Err(invalid(
                "n_delays",
                format!("{n_delays} < {n_subcarriers} subcarriers"),
            ));
        }
        Ok(Self {
            angular: dft_block(n_antennas, n_angles),
            delay: dft_block(n_subcarriers, n_delays),
        })
    }

    /// `F_A`, antennas by angular bins.
    pub fn angular(&self) -> &CMatrix {
        &self.angular
    }
    /// `F_D`, subcarriers by delay bins.
    pub fn delay(&self) -> &CMatrix {
        &self.delay
    }
    pub fn n_antennas(&self) -> usize {
        self.angular.nrows()
    }
    pub fn n_angles(&self) -> usize {
        self.angular.ncols()
    }
    pub fn n_subcarriers(&self) -> usize {
        self.delay.nrows()
    }
    pub fn n_delays(&self) -> usize {
        self.delay.ncols()
    }
    pub fn is_square(&self) -> bool {
        self.n_angles() == self.n_antennas() && self.n_delays() == self.n_subcarriers()
    }
}

fn dft_block(rows: usize, cols: usize) -> CMatrix {
    let scale = 1.0 / (rows as f64).sqrt();
    CMatrix::from_fn(rows, cols, |r, c| {
        // reduce the exponent first so large grids keep full phase accuracy
        let turns = ((r * c) % cols) as f64 / cols as f64;
        C64::from_polar(scale, -2.0 * PI * turns)
    })
}

/// Channel in the angular-delay domain, angular bins by delay bins.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularDelayChannel {
    entries: CMatrix,
}

impl AngularDelayChannel {
    pub fn new(entries: CMatrix) -> Self {
        Self { entries }
    }
    pub fn entries(&self) -> &CMatrix {
        &self.entries
    }
    pub fn into_entries(self) -> CMatrix {
        self.entries
    }
    /// Column-stacked view, index `i + I * q`.
    pub fn to_vec(&self) -> DVector<C64> {
        DVector::from_column_slice(self.entries.as_slice())
    }
    pub fn from_vec(n_angles: usize, n_delays: usize, x: &DVector<C64>) -> Result<Self> {
        if x.len() != n_angles * n_delays {
            return Err(Error::ShapeMismatch {
                context: "unvec",
                expected: (n_angles * n_delays, 1),
                actual: (x.len(), 1),
            });
        }
        Ok(Self::new(CMatrix::from_column_slice(
            n_angles,
            n_delays,
            x.as_slice(),
        )))
    }
}

/// `F_A^H H F_D`; exact only for square (critically sampled) dictionaries.
pub fn to_angular_delay(
    h: &SpatialFrequencyChannel,
    dict: &Dictionary,
) -> Result<AngularDelayChannel> {
    if !dict.is_square() {
        return Err(Error::Unsupported(
            "angular-delay analysis needs a critically sampled dictionary".into(),
        ));
    }
    check_shape(
        "to_angular_delay",
        h.entries(),
        (dict.n_antennas(), dict.n_subcarriers()),
    )?;
    Ok(AngularDelayChannel::new(
        dict.angular.adjoint() * h.entries() * &dict.delay,
    ))
}

/// `F_A X F_D^H`.
pub fn from_angular_delay(
    x: &AngularDelayChannel,
    dict: &Dictionary,
) -> Result<SpatialFrequencyChannel> {
    check_shape(
        "from_angular_delay",
        x.entries(),
        (dict.n_angles(), dict.n_delays()),
    )?;
    SpatialFrequencyChannel::from_entries(&dict.angular * x.entries() * dict.delay.adjoint())
}

/// Source of receive combining matrices.
pub trait CombinerCodebook {
    fn draw(&self, n_rows: usize, n_antennas: usize, rng: &mut dyn RngCore) -> CMatrix;
}

/// Phase-shifter combiner: modulus `1/sqrt(N_R)`, i.i.d. uniform phases.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPhaseCodebook;

impl CombinerCodebook for RandomPhaseCodebook {
    fn draw(&self, n_rows: usize, n_antennas: usize, rng: &mut dyn RngCore) -> CMatrix {
        let scale = 1.0 / (n_antennas as f64).sqrt();
        CMatrix::from_fn(n_rows, n_antennas, |_, _| {
            C64::from_polar(scale, rng.random_range(-PI..PI))
        })
    }
}

/// Stacked combiner for `m_r / n_rf` pilot slots of `n_rf` RF chains each.
pub fn build_combiner<R: RngCore>(
    m_r: usize,
    n_rf: usize,
    n_antennas: usize,
    rng: &mut R,
) -> Result<CMatrix> {
    if n_rf == 0 || m_r == 0 || n_antennas == 0 {
        return Err(invalid("combiner", "dimensions must be positive"));
    }
    if !m_r.is_multiple_of(n_rf) {
        return Err(invalid(
            "m_r",
            format!("{m_r} is not a multiple of {n_rf} RF chains"),
        ));
    }
    Ok(RandomPhaseCodebook.draw(m_r, n_antennas, rng))
}

/// `Y = A X B` with `A = W F_A` and `B = F_D^H`.
#[derive(Debug, Clone)]
pub struct MeasurementOperator {
    combiner: CMatrix,
    a_factor: CMatrix,
    b_factor: CMatrix,
}

impl MeasurementOperator {
    pub fn new(combiner: CMatrix, dict: &Dictionary) -> Result<Self> {
        if combiner.ncols() != dict.n_antennas() {
            return Err(Error::ShapeMismatch {
                context: "combiner",
                expected: (combiner.nrows(), dict.n_antennas()),
                actual: combiner.shape(),
            });
        }
        let a_factor = &combiner * dict.angular();
        let b_factor = dict.delay().adjoint();
        Ok(Self {
            combiner,
            a_factor,
            b_factor,
        })
    }

    /// Operator from explicit factors, for synthetic problems.
    pub fn from_factors(a_factor: CMatrix, b_factor: CMatrix) -> Result<Self> {
        if a_factor.is_empty() || b_factor.is_empty() {
            return Err(invalid("factors", "empty operator factor"));
        }
        Ok(Self {
            combiner: CMatrix::identity(a_factor.nrows(), a_factor.nrows()),
            a_factor,
            b_factor,
        })
    }

    pub fn combiner(&self) -> &CMatrix {
        &self.combiner
    }
    pub fn a_factor(&self) -> &CMatrix {
        &self.a_factor
    }
    pub fn b_factor(&self) -> &CMatrix {
        &self.b_factor
    }
    /// Shape of the sparse unknown grid, angular by delay bins.
    pub fn x_shape(&self) -> (usize, usize) {
        (self.a_factor.ncols(), self.b_factor.nrows())
    }
    /// Shape of the observation grid, combiner outputs by subcarriers.
    pub fn y_shape(&self) -> (usize, usize) {
        (self.a_factor.nrows(), self.b_factor.ncols())
    }

    pub fn forward(&self, x: &CMatrix) -> Result<CMatrix> {
        check_shape("forward", x, self.x_shape())?;
        Ok(&self.a_factor * x * &self.b_factor)
    }

    pub fn adjoint(&self, y: &CMatrix) -> Result<CMatrix> {
        check_shape("adjoint", y, self.y_shape())?;
        Ok(self.a_factor.adjoint() * y * self.b_factor.adjoint())
    }

    /// Dense `B^T kron A`, refused above [`DENSE_LIMIT`] entries.
    pub fn materialize(&self) -> Result<CMatrix> {
        let (m_r, k) = self.y_shape();
        let (i, q) = self.x_shape();
        if m_r * k * i * q > DENSE_LIMIT {
            return Err(Error::Unsupported(format!(
                "dense operator of {}x{} exceeds the materialization limit",
                m_r * k,
                i * q
            )));
        }
        Ok(self.b_factor.transpose().kronecker(&self.a_factor))
    }

    /// Factored SVD of the Kronecker operator.
    pub fn svd_preprocess(&self) -> Result<UnitaryOperator> {
        let (u_a, s_a, v_a) = sorted_svd(&self.a_factor)?;
        let (u_t, s_t, v_t) = sorted_svd(&self.b_factor.transpose())?;
        let top = s_a.first().copied().unwrap_or(0.0) * s_t.first().copied().unwrap_or(0.0);
        if !(top > 0.0) {
            return Err(Error::DegenerateOperator(
                "all singular values are zero".into(),
            ));
        }
        let (m_r, k) = self.y_shape();
        let scale = RMatrix::from_fn(m_r, k, |m, kk| {
            s_a.get(m).copied().unwrap_or(0.0) * s_t.get(kk).copied().unwrap_or(0.0)
        });
        let lambda = scale.map(|s| s * s);
        Ok(UnitaryOperator {
            u_a: complete_unitary(&u_a),
            u_t: complete_unitary(&u_t),
            v_a,
            v_t,
            sigma_a: s_a,
            sigma_t: s_t,
            scale,
            lambda,
        })
    }
}

/// Left vectors, singular values (descending) and right vectors of `m`.
fn sorted_svd(m: &CMatrix) -> Result<(CMatrix, Vec<f64>, CMatrix)> {
    let svd = m.clone().svd(true, true);
    let u = svd
        .u
        .ok_or_else(|| Error::DegenerateOperator("SVD left vectors unavailable".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::DegenerateOperator("SVD right vectors unavailable".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sigma = order.iter().map(|&j| svd.singular_values[j]).collect();
    let u_sorted = CMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let v = CMatrix::from_fn(v_t.ncols(), order.len(), |r, c| v_t[(order[c], r)].conj());
    Ok((u_sorted, sigma, v))
}

/// Measurement operator in the rotated coordinates `U^H y`, where it acts as
/// the diagonal scaling `Lambda V^H`. Nothing of size M x N is ever stored.
#[derive(Debug, Clone)]
pub struct UnitaryOperator {
    u_a: CMatrix,
    u_t: CMatrix,
    v_a: CMatrix,
    v_t: CMatrix,
    sigma_a: Vec<f64>,
    sigma_t: Vec<f64>,
    scale: RMatrix,
    lambda: RMatrix,
}

impl UnitaryOperator {
    pub fn y_shape(&self) -> (usize, usize) {
        self.scale.shape()
    }
    pub fn x_shape(&self) -> (usize, usize) {
        (self.v_a.nrows(), self.v_t.nrows())
    }
    pub fn n_measurements(&self) -> usize {
        self.scale.len()
    }
    pub fn n_unknowns(&self) -> usize {
        self.v_a.nrows() * self.v_t.nrows()
    }

    /// Squared singular values laid out on the observation grid.
    pub fn lambda(&self) -> &RMatrix {
        &self.lambda
    }
    /// Same values in column-stacked order.
    pub fn lambda_vec(&self) -> Vec<f64> {
        self.lambda.as_slice().to_vec()
    }
    pub fn singular_values(&self) -> &RMatrix {
        &self.scale
    }
    pub fn factor_singular_values(&self) -> (&[f64], &[f64]) {
        (&self.sigma_a, &self.sigma_t)
    }

    /// `r = U^H vec(y)`.
    pub fn transform_observation(&self, y: &CMatrix) -> Result<CMatrix> {
        check_shape("transform_observation", y, self.y_shape())?;
        Ok(self.u_a.adjoint() * y * self.u_t.map(|z| z.conj()))
    }

    /// Inverse rotation back to the original observation coordinates.
    pub fn untransform_observation(&self, r: &CMatrix) -> Result<CMatrix> {
        check_shape("untransform_observation", r, self.y_shape())?;
        Ok(&self.u_a * r * self.u_t.transpose())
    }

    /// `Lambda V^H vec(x)`.
    pub fn apply(&self, x: &CMatrix) -> Result<CMatrix> {
        check_shape("apply", x, self.x_shape())?;
        let core = self.v_a.adjoint() * x * self.v_t.map(|z| z.conj());
        let mut out = CMatrix::zeros(self.scale.nrows(), self.scale.ncols());
        for c in 0..core.ncols() {
            for r in 0..core.nrows() {
                out[(r, c)] = core[(r, c)] * self.scale[(r, c)];
            }
        }
        Ok(out)
    }

    /// `V Lambda^H vec(r)`.
    pub fn apply_adjoint(&self, r: &CMatrix) -> Result<CMatrix> {
        check_shape("apply_adjoint", r, self.y_shape())?;
        let (ra, rt) = (self.v_a.ncols(), self.v_t.ncols());
        let core = CMatrix::from_fn(ra, rt, |i, j| r[(i, j)] * self.scale[(i, j)]);
        Ok(&self.v_a * core * self.v_t.transpose())
    }

    /// Dense factors `(U, Lambda, V)` with `Phi = U Lambda V^H`, for tests.
    pub fn materialize_factors(&self) -> Result<(CMatrix, CMatrix, CMatrix)> {
        let (m_r, k) = self.y_shape();
        let (ra, rt) = (self.v_a.ncols(), self.v_t.ncols());
        let n = self.n_unknowns();
        if m_r * k * n > DENSE_LIMIT {
            return Err(Error::Unsupported(
                "operator too large to materialize".into(),
            ));
        }
        let u = self.u_t.kronecker(&self.u_a);
        let v = self.v_t.kronecker(&self.v_a);
        let mut lam = CMatrix::zeros(m_r * k, ra * rt);
        for j in 0..rt {
            for i in 0..ra {
                lam[(vec_index(i, j, m_r), vec_index(i, j, ra))] =
                    C64::new(self.scale[(i, j)], 0.0);
            }
        }
        Ok((u, lam, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{complex_normal, norm_sq};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn dictionary_examples() {
        let d = Dictionary::new(4, 8, 3, 5).unwrap();
        for i in 0..8 {
            assert!((d.angular()[(0, i)] - C64::new(0.5, 0.0)).norm() < 1e-15);
        }
        let d = Dictionary::new(4, 4, 4, 4).unwrap();
        assert!((d.angular()[(1, 1)] - C64::new(0.0, -0.5)).norm() < 1e-12);
        let gram = d.angular().adjoint() * d.angular();
        assert!((gram - CMatrix::identity(4, 4)).norm() < 1e-12);
        let gram = d.delay().adjoint() * d.delay();
        assert!((gram - CMatrix::identity(4, 4)).norm() < 1e-12);
    }

    #[test]
    fn dictionary_rejects_undersampling() {
        assert!(Dictionary::new(8, 4, 4, 4).is_err());
        assert!(Dictionary::new(4, 4, 8, 4).is_err());
    }

    #[test]
    fn angular_delay_round_trip_and_atoms() {
        let d = Dictionary::new(8, 8, 4, 4).unwrap();
        let zero = SpatialFrequencyChannel::from_entries(CMatrix::zeros(8, 4)).unwrap();
        assert!(norm_sq(to_angular_delay(&zero, &d).unwrap().entries()) == 0.0);

        let mut e = CMatrix::zeros(8, 4);
        e[(3, 2)] = C64::new(1.0, 0.0);
        let atom = from_angular_delay(&AngularDelayChannel::new(e.clone()), &d).unwrap();
        let back = to_angular_delay(&atom, &d).unwrap();
        assert!((back.entries() - &e).norm() < 1e-12);

        let h = SpatialFrequencyChannel::from_entries(complex_normal(&mut rng(2), 8, 4)).unwrap();
        let x = to_angular_delay(&h, &d).unwrap();
        let h2 = from_angular_delay(&x, &d).unwrap();
        assert!((h2.entries() - h.entries()).norm() / h.entries().norm() < 1e-10);

        let over = Dictionary::new(8, 16, 4, 4).unwrap();
        assert!(matches!(
            to_angular_delay(&h, &over),
            Err(Error::Unsupported(_))
        ));
        assert!(from_angular_delay(&x, &over).is_err());
    }

    #[test]
    fn vec_round_trip() {
        let x = AngularDelayChannel::new(complex_normal(&mut rng(5), 6, 3));
        let v = x.to_vec();
        assert_eq!(v[vec_index(4, 2, 6)], x.entries()[(4, 2)]);
        assert_eq!(AngularDelayChannel::from_vec(6, 3, &v).unwrap(), x);
        assert!(AngularDelayChannel::from_vec(5, 3, &v).is_err());
    }

    #[test]
    fn combiner_examples() {
        let w = build_combiner(128, 16, 256, &mut rng(1)).unwrap();
        assert_eq!(w.shape(), (128, 256));
        assert!(w.iter().all(|z| (z.norm() - 1.0 / 16.0).abs() < 1e-14));
        let w2 = build_combiner(128, 16, 256, &mut rng(1)).unwrap();
        assert_eq!(w, w2);
        assert!(build_combiner(30, 16, 256, &mut rng(1)).is_err());
    }

    fn small_operator(
        seed: u64,
        m_r: usize,
        n_r: usize,
        i: usize,
        k: usize,
        q: usize,
    ) -> MeasurementOperator {
        let d = Dictionary::new(n_r, i, k, q).unwrap();
        let w = build_combiner(m_r, 1, n_r, &mut rng(seed)).unwrap();
        MeasurementOperator::new(w, &d).unwrap()
    }

    #[test]
    fn forward_matches_dense_kronecker() {
        let op = small_operator(3, 4, 4, 4, 2, 2);
        let phi = op.materialize().unwrap();
        assert_eq!(phi.shape(), (8, 8));
        let x = complex_normal(&mut rng(4), 4, 2);
        let y = op.forward(&x).unwrap();
        let yv = &phi * DVector::from_column_slice(x.as_slice());
        for (a, b) in y.as_slice().iter().zip(yv.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
        assert!(op
            .forward(&CMatrix::zeros(4, 2))
            .unwrap()
            .iter()
            .all(|z| z.norm() == 0.0));
        assert!(op.forward(&CMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn svd_of_square_delay_factor_repeats_values() {
        let mut r = rng(8);
        let a = complex_normal(&mut r, 16, 32);
        let d = Dictionary::new(4, 4, 4, 4).unwrap();
        let op = MeasurementOperator::from_factors(a.clone(), d.delay().adjoint()).unwrap();
        let u = op.svd_preprocess().unwrap();
        let dense = a.singular_values();
        let mut dense: Vec<f64> = dense.iter().copied().collect();
        dense.sort_by(|x, y| y.total_cmp(x));
        let lam = u.lambda();
        for k in 0..4 {
            for m in 0..16 {
                assert!((lam[(m, k)] - dense[m] * dense[m]).abs() < 1e-9 * dense[0] * dense[0]);
            }
        }
    }

    #[test]
    fn unitary_operator_has_unit_lambda() {
        let mut r = rng(12);
        let qa = complex_normal(&mut r, 6, 6).qr().q();
        let qb = complex_normal(&mut r, 3, 3).qr().q();
        let op = MeasurementOperator::from_factors(qa, qb).unwrap();
        let u = op.svd_preprocess().unwrap();
        assert!(u.lambda().iter().all(|l| (l - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_operator_is_degenerate() {
        let op = MeasurementOperator::from_factors(CMatrix::zeros(3, 4), CMatrix::identity(2, 2))
            .unwrap();
        assert!(matches!(
            op.svd_preprocess(),
            Err(Error::DegenerateOperator(_))
        ));
    }

    #[test]
    fn rotated_operator_agrees_with_original() {
        // tall A (more combiner rows than angular bins) exercises basis completion
        for &(m_r, i) in &[(6usize, 8usize), (10, 8)] {
            let op = small_operator(7, m_r, 8, i, 3, 5);
            let u = op.svd_preprocess().unwrap();
            let x = complex_normal(&mut rng(9), i, 5);
            let y = op.forward(&x).unwrap();
            let r = u.transform_observation(&y).unwrap();
            let r2 = u.apply(&x).unwrap();
            assert!((&r - &r2).norm() < 1e-10 * r.norm());
            assert!((norm_sq(&r) - norm_sq(&y)).abs() < 1e-10 * norm_sq(&y));
            let back = u.untransform_observation(&r).unwrap();
            assert!((back - &y).norm() < 1e-10 * y.norm());

            // adjoint identity in the rotated coordinates
            let s = complex_normal(&mut rng(10), m_r, 3);
            let lhs = u.apply(&x).unwrap().dotc(&s);
            let rhs = x.dotc(&u.apply_adjoint(&s).unwrap());
            assert!((lhs - rhs).norm() < 1e-10 * lhs.norm());
        }
    }
}
