//! Matrix functions on symmetric positive definite matrices and the
//! whitening-plus-log projection into the tangent space at the identity.
//!
//! Every matrix function goes through a symmetric eigendecomposition, so
//! outputs are symmetric up to the explicit `(A + Aᵀ)/2` applied after each
//! reassembly.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Smallest eigenvalue accepted for an SPD input unless overridden.
pub const DEFAULT_EIGEN_FLOOR: f64 = 1e-12;

const SYMMETRY_RTOL: f64 = 1e-12;
const EIGEN_MAX_ITER: usize = 10_000;

/// Real symmetric matrix, e.g. a tangent-space representation.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    m: DMatrix<f64>,
}

/// Symmetric positive definite matrix with the eigenvalue floor it was
/// validated against.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    m: DMatrix<f64>,
    floor: f64,
}

fn max_asymmetry(m: &DMatrix<f64>) -> (f64, f64) {
    let p = m.nrows();
    let mut asym = 0.0f64;
    let mut scale = 0.0f64;
    for i in 0..p {
        for j in 0..p {
            scale = scale.max(m[(i, j)].abs());
            if j > i {
                asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
    }
    (asym, scale)
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix entry".into()));
    }
    let (asym, scale) = max_asymmetry(m);
    if asym > SYMMETRY_RTOL * scale {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&m)?;
        Ok(Self { m })
    }

    /// Builds `(m + mᵀ)/2`; never fails on square finite input.
    pub fn symmetrized(m: &DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch("symmetrize requires a square matrix".into()));
        }
        Ok(Self { m: symmetrize(m) })
    }

    pub(crate) fn from_symmetric_unchecked(m: DMatrix<f64>) -> Self {
        Self { m }
    }

    pub fn zeros(p: usize) -> Self {
        Self { m: DMatrix::zeros(p, p) }
    }

    pub fn identity(p: usize) -> Self {
        Self { m: DMatrix::identity(p, p) }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[(i, j)]
    }
}

impl SpdMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        Self::with_floor(m, DEFAULT_EIGEN_FLOOR)
    }

    /// Validates symmetry and that the smallest eigenvalue exceeds `floor`.
    pub fn with_floor(m: DMatrix<f64>, floor: f64) -> Result<Self> {
        check_symmetric(&m)?;
        let eig = eigen_of(&m)?;
        check_floor(&eig.values, floor)?;
        Ok(Self { m, floor })
    }

    pub(crate) fn from_spd_unchecked(m: DMatrix<f64>, floor: f64) -> Self {
        Self { m, floor }
    }

    pub fn identity(p: usize) -> Self {
        Self {
            m: DMatrix::identity(p, p),
            floor: DEFAULT_EIGEN_FLOOR,
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    pub fn as_sym(&self) -> SymMatrix {
        SymMatrix { m: self.m.clone() }
    }

    /// Multiplies every entry by `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale factor must be positive, got {c}")));
        }
        Ok(Self {
            m: &self.m * c,
            floor: self.floor,
        })
    }
}

/// Eigenvalues sorted descending with matching orthonormal eigenvector columns.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    /// `Q diag(f(e)) Qᵀ`, symmetrized.
    pub fn reassemble(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let p = self.values.len();
        let mut scaled = self.vectors.clone();
        for k in 0..p {
            let fk = f(self.values[k]);
            scaled.column_mut(k).scale_mut(fk);
        }
        symmetrize(&(scaled * self.vectors.transpose()))
    }
}

fn eigen_of(m: &DMatrix<f64>) -> Result<SymEigen> {
    let p = m.nrows();
    let eig = SymmetricEigen::try_new(m.clone(), f64::EPSILON, EIGEN_MAX_ITER).ok_or_else(|| {
        Error::EigenNonConvergence {
            dim: p,
            norm: m.norm(),
        }
    })?;
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(p, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vectors = DMatrix::zeros(p, p);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SymEigen { values, vectors })
}

fn check_floor(values: &DVector<f64>, floor: f64) -> Result<()> {
    let min = values.min();
    if !(min > floor) {
        let max = values.max();
        return Err(Error::IllConditioned {
            min_eigenvalue: min,
            floor,
            condition: if min > 0.0 { max / min } else { f64::INFINITY },
        });
    }
    Ok(())
}

pub fn sym_eigen(s: &SymMatrix) -> Result<SymEigen> {
    eigen_of(&s.m)
}

fn spd_eigen(m: &SpdMatrix) -> Result<SymEigen> {
    let eig = eigen_of(&m.m)?;
    check_floor(&eig.values, m.floor)?;
    Ok(eig)
}

pub fn spd_sqrt(m: &SpdMatrix) -> Result<SpdMatrix> {
    let eig = spd_eigen(m)?;
    Ok(SpdMatrix::from_spd_unchecked(eig.reassemble(f64::sqrt), m.floor))
}

pub fn spd_inv_sqrt(m: &SpdMatrix) -> Result<SpdMatrix> {
    let eig = spd_eigen(m)?;
    Ok(SpdMatrix::from_spd_unchecked(
        eig.reassemble(|e| 1.0 / e.sqrt()),
        m.floor,
    ))
}

pub fn spd_logm(m: &SpdMatrix) -> Result<SymMatrix> {
    let eig = spd_eigen(m)?;
    Ok(SymMatrix::from_symmetric_unchecked(eig.reassemble(f64::ln)))
}

/// Matrix exponential of a symmetric matrix; the inverse of [`spd_logm`].
pub fn sym_expm(s: &SymMatrix) -> Result<SpdMatrix> {
    let eig = sym_eigen(s)?;
    Ok(SpdMatrix::from_spd_unchecked(
        eig.reassemble(f64::exp),
        DEFAULT_EIGEN_FLOOR,
    ))
}

pub fn euclidean_mean(ms: &[SpdMatrix]) -> Result<SpdMatrix> {
    let first = ms.first().ok_or_else(|| Error::Empty("euclidean_mean of no matrices".into()))?;
    let p = first.dim();
    let mut acc = DMatrix::<f64>::zeros(p, p);
    for (k, m) in ms.iter().enumerate() {
        if m.dim() != p {
            return Err(Error::DimensionMismatch(format!(
                "matrix {k} is {}x{}, expected {p}x{p}",
                m.dim(),
                m.dim()
            )));
        }
        acc += &m.m;
    }
    acc /= ms.len() as f64;
    Ok(SpdMatrix::from_spd_unchecked(acc, first.floor))
}

fn check_same_dim(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(format!("{a}x{a} vs {b}x{b}")));
    }
    Ok(())
}

/// Precomputed `Mref^{-1/2}` for projecting many matrices against one reference.
#[derive(Debug, Clone)]
pub struct TangentProjector {
    inv_sqrt: DMatrix<f64>,
    floor: f64,
}

impl TangentProjector {
    pub fn new(mref: &SpdMatrix) -> Result<Self> {
        Ok(Self {
            inv_sqrt: spd_inv_sqrt(mref)?.m,
            floor: mref.floor,
        })
    }

    pub fn dim(&self) -> usize {
        self.inv_sqrt.nrows()
    }

    pub fn inv_sqrt(&self) -> &DMatrix<f64> {
        &self.inv_sqrt
    }

    pub fn whiten(&self, m: &SpdMatrix) -> Result<SpdMatrix> {
        check_same_dim(m.dim(), self.dim())?;
        let w = &self.inv_sqrt * &m.m * &self.inv_sqrt;
        Ok(SpdMatrix::from_spd_unchecked(symmetrize(&w), self.floor))
    }

    pub fn project(&self, m: &SpdMatrix) -> Result<SymMatrix> {
        spd_logm(&self.whiten(m)?)
    }
}

/// `Mref^{-1/2} M Mref^{-1/2}`, symmetrized.
pub fn whiten(m: &SpdMatrix, mref: &SpdMatrix) -> Result<SpdMatrix> {
    check_same_dim(m.dim(), mref.dim())?;
    TangentProjector::new(mref)?.whiten(m)
}

/// `Log(Mref^{-1/2} M Mref^{-1/2})`.
pub fn tangent_project(m: &SpdMatrix, mref: &SpdMatrix) -> Result<SymMatrix> {
    check_same_dim(m.dim(), mref.dim())?;
    TangentProjector::new(mref)?.project(m)
}

pub fn frobenius_inner(a: &SymMatrix, b: &SymMatrix) -> Result<f64> {
    check_same_dim(a.dim(), b.dim())?;
    Ok(a.m.iter().zip(b.m.iter()).map(|(x, y)| x * y).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sym(p: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        symmetrize(&a)
    }

    pub(crate) fn random_spd(p: usize, rng: &mut impl Rng) -> SpdMatrix {
        let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        let m = &a * a.transpose() + DMatrix::identity(p, p) * 0.5;
        SpdMatrix::new(symmetrize(&m)).unwrap()
    }

    fn rel_fro(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    /// Truncated Taylor series with scaling and squaring; independent of the
    /// eigen route.
    fn taylor_expm(s: &DMatrix<f64>) -> DMatrix<f64> {
        let p = s.nrows();
        let norm = s.norm();
        let squarings = (norm.log2().ceil().max(0.0) as u32) + 4;
        let a = s / 2f64.powi(squarings as i32);
        let mut term = DMatrix::identity(p, p);
        let mut sum = DMatrix::identity(p, p);
        for k in 1..30 {
            term = &term * &a / k as f64;
            sum += &term;
        }
        for _ in 0..squarings {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn eigen_identity_and_diagonal() {
        let e = sym_eigen(&SymMatrix::identity(3)).unwrap();
        assert!(e.values.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0, 2.0]));
        let e = sym_eigen(&SymMatrix::new(d).unwrap()).unwrap();
        assert_eq!(e.values.as_slice(), &[3.0, 2.0, 1.0]);
        // permuted identity columns
        for k in 0..3 {
            let col = e.vectors.column(k);
            assert_eq!(col.iter().filter(|v| v.abs() > 0.5).count(), 1);
        }
        assert!((e.vectors[(1, 0)].abs() - 1.0).abs() < 1e-15);
        assert!((e.vectors[(2, 1)].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn eigen_reconstruction_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let s = random_sym(5, &mut rng);
            let e = sym_eigen(&SymMatrix::new(s.clone()).unwrap()).unwrap();
            let rebuilt = &e.vectors * DMatrix::from_diagonal(&e.values) * e.vectors.transpose();
            assert!((rebuilt - &s).norm() <= 1e-10 * s.norm());
            let qtq = e.vectors.transpose() * &e.vectors;
            assert!((qtq - DMatrix::identity(5, 5)).amax() < 1e-12);
            assert!(e.values.as_slice().windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn sqrt_diagonal_and_identity() {
        let i = SpdMatrix::identity(4);
        assert!((spd_sqrt(&i).unwrap().m - DMatrix::identity(4, 4)).amax() < 1e-15);
        let m = SpdMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]))).unwrap();
        let s = spd_sqrt(&m).unwrap();
        assert!((s.m[(0, 0)] - 2.0).abs() < 1e-14 && (s.m[(1, 1)] - 3.0).abs() < 1e-14);
        let is = spd_inv_sqrt(&m).unwrap();
        assert!((is.m[(0, 0)] - 0.5).abs() < 1e-14 && (is.m[(1, 1)] - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn sqrt_multiplies_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let m = random_spd(6, &mut rng);
            let s = spd_sqrt(&m).unwrap();
            assert!(rel_fro(&(&s.m * &s.m), &m.m) < 1e-10);
            let is = spd_inv_sqrt(&m).unwrap();
            assert!((&s.m * &is.m - DMatrix::identity(6, 6)).amax() < 1e-10);
        }
    }

    #[test]
    fn floor_violation_is_reported() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(SpdMatrix::new(m), Err(Error::IllConditioned { .. })));
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-6]));
        assert!(SpdMatrix::new(m.clone()).is_ok());
        assert!(matches!(SpdMatrix::with_floor(m, 1e-4), Err(Error::IllConditioned { .. })));
    }

    #[test]
    fn asymmetric_input_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.1, 0.0, 2.0]);
        assert!(matches!(SymMatrix::new(m), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn logm_cases() {
        assert!(spd_logm(&SpdMatrix::identity(3)).unwrap().m.amax() < 1e-15);
        let e = std::f64::consts::E;
        let m = SpdMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![e, e * e]))).unwrap();
        let l = spd_logm(&m).unwrap();
        assert!((l.m[(0, 0)] - 1.0).abs() < 1e-14 && (l.m[(1, 1)] - 2.0).abs() < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let m = random_spd(5, &mut rng);
            let l = spd_logm(&m).unwrap();
            assert!(rel_fro(&taylor_expm(&l.m), &m.m) < 1e-9);
            assert!(rel_fro(&sym_expm(&l).unwrap().m, &m.m) < 1e-9);
        }
    }

    #[test]
    fn mean_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_spd(3, &mut rng);
        assert_eq!(euclidean_mean(std::slice::from_ref(&m)).unwrap().m, m.m);
        let a = SpdMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0]))).unwrap();
        let b = SpdMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0]))).unwrap();
        let mean = euclidean_mean(&[a, b]).unwrap();
        assert_eq!(mean.m, DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0])));
        let ms: Vec<_> = (0..10).map(|_| random_spd(4, &mut rng)).collect();
        let mean = euclidean_mean(&ms).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let brute: f64 = ms.iter().map(|m| m.m[(i, j)]).sum::<f64>() / 10.0;
                assert!((mean.m[(i, j)] - brute).abs() < 1e-14);
            }
        }
        assert!(matches!(euclidean_mean(&[]), Err(Error::Empty(_))));
        let bad = vec![SpdMatrix::identity(2), SpdMatrix::identity(3)];
        assert!(matches!(euclidean_mean(&bad), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn whiten_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mref = random_spd(4, &mut rng);
        let w = whiten(&mref, &mref).unwrap();
        assert!((w.m - DMatrix::identity(4, 4)).amax() < 1e-12);
        let w = whiten(&mref.scaled(3.0).unwrap(), &mref).unwrap();
        assert!((w.m - DMatrix::identity(4, 4) * 3.0).amax() < 1e-12);

        let m = random_spd(4, &mut rng);
        let w = whiten(&m, &mref).unwrap();
        // dense route: inverse square root from an inverse and a square root
        let inv = mref.m.clone().try_inverse().unwrap();
        let inv_sqrt = spd_sqrt(&SpdMatrix::new(symmetrize(&inv)).unwrap()).unwrap().m;
        let direct = &inv_sqrt * &m.m * &inv_sqrt;
        assert!(rel_fro(&w.m, &direct) < 1e-10);
        // congruence inverse
        let s = spd_sqrt(&mref).unwrap().m;
        assert!(rel_fro(&(&s * &w.m * &s), &m.m) < 1e-9);
    }

    #[test]
    fn tangent_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mref = random_spd(5, &mut rng);
        assert!(tangent_project(&mref, &mref).unwrap().m.amax() < 1e-10);
        let t = tangent_project(&mref.scaled(2.0).unwrap(), &mref).unwrap();
        assert!((t.m - DMatrix::identity(5, 5) * 2f64.ln()).amax() < 1e-10);
        let m = random_spd(5, &mut rng);
        let t = tangent_project(&m, &mref).unwrap();
        let composed = spd_logm(&whiten(&m, &mref).unwrap()).unwrap();
        assert!((t.m.clone() - composed.m).amax() < 1e-14);
        assert_eq!(t.m, t.m.transpose());
    }

    #[test]
    fn affine_invariance_under_orthogonal_congruence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_spd(4, &mut rng);
        let mref = random_spd(4, &mut rng);
        let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let q = a.qr().q();
        let tm = SpdMatrix::new(symmetrize(&(&q * &m.m * q.transpose()))).unwrap();
        let tr = SpdMatrix::new(symmetrize(&(&q * &mref.m * q.transpose()))).unwrap();
        let e1 = sym_eigen(&tangent_project(&m, &mref).unwrap()).unwrap().values;
        let e2 = sym_eigen(&tangent_project(&tm, &tr).unwrap()).unwrap().values;
        assert!((e1 - e2).amax() < 1e-8);
    }

    #[test]
    fn frobenius_cases() {
        let i = SymMatrix::identity(2);
        assert_eq!(frobenius_inner(&i, &i).unwrap(), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = SymMatrix::new(random_sym(4, &mut rng)).unwrap();
        assert_eq!(frobenius_inner(&a, &SymMatrix::zeros(4)).unwrap(), 0.0);
        let b = SymMatrix::new(random_sym(4, &mut rng)).unwrap();
        let oracle: f64 = a.m.component_mul(&b.m).iter().sum();
        assert_eq!(frobenius_inner(&a, &b).unwrap(), oracle);
        assert!(frobenius_inner(&a, &SymMatrix::zeros(3)).is_err());
    }
}
