//! Dense complex helpers shared by the channel, operator and estimator code.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type RMatrix = DMatrix<f64>;

/// Squared Frobenius norm.
pub fn norm_sq(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum()
}

/// `rows x cols` matrix of i.i.d. circularly-symmetric CN(0, 1) entries.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> CMatrix {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    CMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(re * s, im * s)
    })
}

/// Position of grid cell `(row, col)` in the column-stacked vector of a grid
/// with `rows` rows. This is the single definition of the vec ordering.
#[inline]
pub fn vec_index(row: usize, col: usize, rows: usize) -> usize {
    row + rows * col
}

/// Inverse of [`vec_index`].
#[inline]
pub fn unvec_index(n: usize, rows: usize) -> (usize, usize) {
    (n % rows, n / rows)
}

/// Extend orthonormal columns `u` (n x r, r <= n) to a full n x n unitary.
///
/// Candidates are canonical basis vectors, orthogonalized twice against the
/// current basis; the best-conditioned remainder is accepted each round.
pub(crate) fn complete_unitary(u: &CMatrix) -> CMatrix {
    let n = u.nrows();
    let r = u.ncols();
    if r >= n {
        return u.columns(0, n).into_owned();
    }
    let mut out = CMatrix::zeros(n, n);
    out.columns_mut(0, r).copy_from(u);
    let mut filled = r;
    let mut used = vec![false; n];
    while filled < n {
        let mut best: Option<(usize, nalgebra::DVector<C64>, f64)> = None;
        for (e, taken) in used.iter().enumerate() {
            if *taken {
                continue;
            }
            let mut v = nalgebra::DVector::<C64>::zeros(n);
            v[e] = C64::new(1.0, 0.0);
            for _ in 0..2 {
                for c in 0..filled {
                    let col = out.column(c);
                    let proj = col.dotc(&v);
                    v.axpy(-proj, &col, C64::new(1.0, 0.0));
                }
            }
            let nv = v.norm();
            if best.as_ref().is_none_or(|b| nv > b.2) {
                best = Some((e, v, nv));
            }
        }
        let (e, v, nv) = best.expect("remaining basis candidates");
        used[e] = true;
        out.column_mut(filled).copy_from(&(v / C64::new(nv, 0.0)));
        filled += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vec_index_round_trip() {
        for n in 0..60 {
            let (i, q) = unvec_index(n, 7);
            assert_eq!(vec_index(i, q, 7), n);
        }
        // column-major: row index fastest
        assert_eq!(vec_index(1, 0, 4), 1);
        assert_eq!(vec_index(0, 1, 4), 4);
    }

    #[test]
    fn completion_is_unitary() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = complex_normal(&mut rng, 9, 4);
        let q = a.qr().q();
        let full = complete_unitary(&q);
        let gram = full.adjoint() * &full;
        let err = (gram - CMatrix::identity(9, 9)).norm();
        assert!(err < 1e-12, "{err}");
        assert!((full.columns(0, 4) - &q).norm() < 1e-15);
    }

    #[test]
    fn complex_normal_has_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = complex_normal(&mut rng, 200, 200);
        let var = norm_sq(&m) / 40_000.0;
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }
}
