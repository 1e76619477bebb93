//! Dense numerical kernels shared by every solver layer.
//!
//! Everything downstream reduces to a handful of operations on real dense
//! matrices: a rank-revealing Moore-Penrose pseudoinverse, positive
//! semidefiniteness and range-membership tests, and one step of exact
//! first/second moment propagation for an affine stochastic recursion
//!
//! ```text
//! Y' = F Y + f + sum_i (G_i Y + g_i) w_i,   E[w] = 0,  E[w w'] = delta.
//! ```
//!
//! All tolerances are collected in [`Tolerances`] so that rank decisions,
//! PSD floors, and range residual bounds stay consistent across modules.

use nalgebra::{DMatrix, DVector};

/// Dense column-major matrix of `f64`; the one matrix type used everywhere.
pub type Mat = DMatrix<f64>;
/// Dense column vector of `f64`.
pub type Vecf = DVector<f64>;

/// Numerical tolerances used by the solver layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Relative singular-value cutoff: `sigma_i < rank_rtol * sigma_max` is
    /// treated as zero when forming pseudoinverses and deciding rank.
    pub rank_rtol: f64,
    /// Eigenvalue floor for positive semidefiniteness tests.
    pub psd_atol: f64,
    /// Residual bound for range-membership and projection-identity tests.
    pub range_rtol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rank_rtol: 1e-10,
            psd_atol: 1e-9,
            range_rtol: 1e-8,
        }
    }
}

/// Build a matrix from row slices (panics if rows are ragged or non-finite).
pub fn mat(rows: &[&[f64]]) -> Mat {
    let nr = rows.len();
    let nc = if nr == 0 { 0 } else { rows[0].len() };
    for r in rows {
        assert_eq!(r.len(), nc, "ragged rows");
        assert!(r.iter().all(|x| x.is_finite()), "non-finite entry");
    }
    Mat::from_fn(nr, nc, |i, j| rows[i][j])
}

/// Build a column vector from a slice (panics on non-finite entries).
pub fn vecf(entries: &[f64]) -> Vecf {
    assert!(entries.iter().all(|x| x.is_finite()), "non-finite entry");
    Vecf::from_column_slice(entries)
}

/// Moore-Penrose pseudoinverse via SVD with a relative singular-value cutoff.
///
/// Singular values below `rank_rtol * sigma_max` are treated as zero. For the
/// all-zero matrix the pseudoinverse is the zero matrix of transposed shape.
pub fn pinv(m: &Mat, tol: &Tolerances) -> Mat {
    let (nr, nc) = m.shape();
    if nr == 0 || nc == 0 {
        return Mat::zeros(nc, nr);
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd u");
    let vt = svd.v_t.as_ref().expect("svd v_t");
    let smax = svd.singular_values.max();
    let cutoff = tol.rank_rtol * smax;
    let sinv = Vecf::from_iterator(
        svd.singular_values.len(),
        svd.singular_values
            .iter()
            .map(|&s| if s > cutoff && s > 0.0 { 1.0 / s } else { 0.0 }),
    );
    vt.transpose() * Mat::from_diagonal(&sinv) * u.transpose()
}

/// Numerical rank under the same cutoff rule as [`pinv`].
pub fn rank(m: &Mat, tol: &Tolerances) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.max();
    let cutoff = tol.rank_rtol * smax;
    sv.iter().filter(|&&s| s > cutoff && s > 0.0).count()
}

/// Smallest-over-largest singular value; 0 for rank-deficient or empty input.
pub fn inv_condition(m: &Mat, _tol: &Tolerances) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0.0;
    }
    sv.min() / smax
}

/// True iff the symmetric part of `m` has minimum eigenvalue `>= -psd_atol`.
pub fn is_psd(m: &Mat, tol: &Tolerances) -> bool {
    assert_eq!(m.nrows(), m.ncols(), "is_psd needs a square matrix");
    if m.nrows() == 0 {
        return true;
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigenvalues();
    eig.min() >= -tol.psd_atol
}

/// True iff every column of `x` lies in the column range of `w`:
/// `||x - W W' x|| <= range_rtol * (1 + ||x||)` column-wise
/// (`W'` denoting the pseudoinverse of `W`).
pub fn in_range(w: &Mat, x: &Mat, tol: &Tolerances) -> bool {
    let wp = pinv(w, tol);
    let proj = w * &wp * x;
    for j in 0..x.ncols() {
        let xj = x.column(j);
        let rj = xj - proj.column(j);
        if rj.norm() > tol.range_rtol * (1.0 + xj.norm()) {
            return false;
        }
    }
    true
}

/// True iff `W W' H = H` within `range_rtol * (1 + ||H||)` in Frobenius norm
/// (`W'` denoting the pseudoinverse of `W`).
pub fn projection_identity(w: &Mat, h: &Mat, tol: &Tolerances) -> bool {
    let wp = pinv(w, tol);
    let resid = w * &wp * h - h;
    resid.norm() <= tol.range_rtol * (1.0 + h.norm())
}

/// One exact step of mean / second-moment propagation for
/// `Y' = F Y + f + sum_i (G_i Y + g_i) w_i` with `E[w] = 0`,
/// `E[w w'] = delta`.
///
/// Returns `(mean', smom')` where `smom = E[Y Y']`:
///
/// ```text
/// mean' = F mean + f
/// smom' = F S F' + F mean f' + f mean' F' + f f'
///       + sum_{ij} delta_{ij} (G_i S G_j' + G_i mean g_j' + g_i mean' G_j' + g_i g_j')
/// ```
pub fn second_moment_step(
    f_mat: &Mat,
    f_off: &Vecf,
    g_mats: &[Mat],
    g_offs: &[Vecf],
    delta: &Mat,
    mean: &Vecf,
    smom: &Mat,
) -> (Vecf, Mat) {
    let p = g_mats.len();
    assert_eq!(g_offs.len(), p, "noise coefficient count mismatch");
    assert_eq!(delta.shape(), (p, p), "delta shape mismatch");
    let mean_next = f_mat * mean + f_off;
    let fm = f_mat * mean;
    let mut smom_next = f_mat * smom * f_mat.transpose()
        + &fm * f_off.transpose()
        + f_off * fm.transpose()
        + f_off * f_off.transpose();
    for i in 0..p {
        for j in 0..p {
            let d = delta[(i, j)];
            if d == 0.0 {
                continue;
            }
            let gim = &g_mats[i] * mean;
            let gjm = &g_mats[j] * mean;
            smom_next += d
                * (&g_mats[i] * smom * g_mats[j].transpose()
                    + &gim * g_offs[j].transpose()
                    + &g_offs[i] * gjm.transpose()
                    + &g_offs[i] * g_offs[j].transpose());
        }
    }
    (mean_next, smom_next)
}

/// Symmetric PSD square root of a symmetric PSD matrix (eigen decomposition,
/// negative roundoff eigenvalues clamped to zero).
pub fn psd_sqrt(m: &Mat) -> Mat {
    assert_eq!(m.nrows(), m.ncols(), "psd_sqrt needs a square matrix");
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = Vecf::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()),
    );
    &eig.eigenvectors * Mat::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Symmetrize in place only when the asymmetry is roundoff-sized relative to
/// the matrix scale; genuinely non-symmetric matrices are left untouched.
pub fn symmetrize_roundoff(m: &mut Mat) {
    let scale = 1.0 + m.norm();
    let asym = (&*m - m.transpose()).norm();
    if asym <= 1e-10 * scale {
        let sym = (&*m + m.transpose()) * 0.5;
        *m = sym;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, nr: usize, nc: usize) -> Mat {
        Mat::from_fn(nr, nc, |_, _| rng.random_range(-3.0..3.0))
    }

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    #[test]
    fn pinv_satisfies_penrose_axioms_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..60 {
            let nr = rng.random_range(1..=12);
            let nc = rng.random_range(1..=12);
            let mut a = random_mat(&mut rng, nr, nc);
            // Every third trial: force rank deficiency by duplicating a column.
            if trial % 3 == 0 && nc >= 2 {
                let col0 = a.column(0).clone_owned();
                a.set_column(nc - 1, &col0);
            }
            let ap = pinv(&a, &tol());
            let scale = 1.0 + a.norm();
            let e1 = (&a * &ap * &a - &a).norm() / scale;
            let e2 = (&ap * &a * &ap - &ap).norm() / (1.0 + ap.norm());
            let aap = &a * &ap;
            let e3 = (&aap - aap.transpose()).norm() / scale;
            let apa = &ap * &a;
            let e4 = (&apa - apa.transpose()).norm() / scale;
            assert!(
                e1 < 1e-8 && e2 < 1e-8 && e3 < 1e-8 && e4 < 1e-8,
                "Penrose residuals {e1:.2e} {e2:.2e} {e3:.2e} {e4:.2e} at trial {trial}"
            );
        }
    }

    #[test]
    fn pinv_is_involutive_on_full_rank_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let n = rng.random_range(1..=10);
            let a = random_mat(&mut rng, n, n) + Mat::identity(n, n) * 4.0;
            let back = pinv(&pinv(&a, &tol()), &tol());
            assert!(
                (&back - &a).norm() / (1.0 + a.norm()) < 1e-8,
                "pinv(pinv(A)) != A"
            );
        }
    }

    #[test]
    fn pinv_of_zero_and_empty() {
        let z = Mat::zeros(3, 2);
        assert_eq!(pinv(&z, &tol()), Mat::zeros(2, 3));
        let e = Mat::zeros(0, 4);
        assert_eq!(pinv(&e, &tol()).shape(), (4, 0));
        assert_eq!(rank(&z, &tol()), 0);
    }

    #[test]
    fn is_psd_accepts_gram_matrices_and_rejects_indefinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..40 {
            let nr = rng.random_range(1..=8);
            let nc = rng.random_range(1..=8);
            let a = random_mat(&mut rng, nr, nc);
            let g = &a * a.transpose();
            assert!(is_psd(&g, &tol()), "Gram matrix must be PSD");
        }
        let ind = mat(&[&[1.0, 0.0], &[0.0, -0.5]]);
        assert!(!is_psd(&ind, &tol()));
    }

    #[test]
    fn range_tests_agree_with_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            let n = rng.random_range(2..=8);
            let r = rng.random_range(1..n);
            let basis = random_mat(&mut rng, n, r);
            let w = &basis * random_mat(&mut rng, r, n); // rank <= r < n
            let inside = &basis * random_mat(&mut rng, r, 2);
            assert!(in_range(&w, &inside, &tol()), "columns built from the basis");
            assert!(projection_identity(&w, &inside, &tol()));
        }
        // A vector with a component orthogonal to a strict subspace is outside.
        let w = mat(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let x = mat(&[&[1.0], &[1.0]]);
        assert!(!in_range(&w, &x, &tol()));
        assert!(!projection_identity(&w, &x, &tol()));
    }

    #[test]
    fn second_moment_step_matches_exhaustive_two_point_expectation() {
        // Noise w = L eps with eps uniform on {-1, 1}^p, so E[w w'] = L L'.
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..20 {
            let n = rng.random_range(1..=4);
            let p = rng.random_range(1..=3);
            let f_mat = random_mat(&mut rng, n, n);
            let f_off = Vecf::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let l = random_mat(&mut rng, p, p);
            let delta = &l * l.transpose();
            let g_mats: Vec<Mat> = (0..p).map(|_| random_mat(&mut rng, n, n)).collect();
            let g_offs: Vec<Vecf> =
                (0..p).map(|_| Vecf::from_fn(n, |_, _| rng.random_range(-1.0..1.0))).collect();
            let mean = Vecf::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            // A valid second moment: mean mean' + PSD covariance.
            let half = random_mat(&mut rng, n, n);
            let smom = &mean * mean.transpose() + &half * half.transpose();

            let (m1, s1) =
                second_moment_step(&f_mat, &f_off, &g_mats, &g_offs, &delta, &mean, &smom);

            // Exhaustive expectation over the 2^p sign patterns. The
            // propagated quantities are linear in (mean, smom), so evaluating
            // with the moment pair directly is exact.
            let mut m2 = Vecf::zeros(n);
            let mut s2 = Mat::zeros(n, n);
            let count = 1usize << p;
            for mask in 0..count {
                let eps = Vecf::from_fn(p, |i, _| if mask >> i & 1 == 1 { 1.0 } else { -1.0 });
                let w = &l * eps;
                let mut a_tot = f_mat.clone();
                let mut b_tot = f_off.clone();
                for i in 0..p {
                    a_tot += &g_mats[i] * w[i];
                    b_tot += &g_offs[i] * w[i];
                }
                m2 += (&a_tot * &mean + &b_tot) / count as f64;
                s2 += (&a_tot * &smom * a_tot.transpose()
                    + &a_tot * &mean * b_tot.transpose()
                    + &b_tot * (&a_tot * &mean).transpose()
                    + &b_tot * b_tot.transpose())
                    / count as f64;
            }
            assert!((&m1 - &m2).norm() < 1e-12 * (1.0 + m2.norm()), "mean mismatch");
            assert!((&s1 - &s2).norm() < 1e-12 * (1.0 + s2.norm()), "second moment mismatch");
            // Output second moment stays symmetric PSD (as covariance + mean outer).
            assert!((&s1 - s1.transpose()).norm() < 1e-9 * (1.0 + s1.norm()));
            let cov = &s1 - &m1 * m1.transpose();
            assert!(is_psd(&cov, &tol()), "propagated covariance must be PSD");
        }
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let n = rng.random_range(1..=6);
            let a = random_mat(&mut rng, n, n);
            let m = &a * a.transpose();
            let r = psd_sqrt(&m);
            assert!((&r - r.transpose()).norm() < 1e-10 * (1.0 + r.norm()));
            assert!((&r * &r - &m).norm() < 1e-9 * (1.0 + m.norm()));
        }
    }
}
